use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use dcs_core::gradcheck;
use dcs_core::io::{generate_dataset, Checkpoint, Dataset, RunConfig, RunRecord, Stage};
use dcs_core::pipeline::{
    baseline_compare, canonical_sphere, few_shot_eval, finetune, global_grad_norm, run_stage1, run_stage2, run_stage3,
    stage2_center_quality, FewShotTask, Init, LossLog, Model, StageOptions, StageRun,
};
use dcs_core::sampler::heatmap_rows;
use dcs_core::tensor::Mode;
use dcs_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dcs", version, about = "Learned center sampling for point-cloud pretraining")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, logs and run records.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic shape dataset to <out>/data.
    GenData,
    /// Train the sphere encoder and decoder.
    Stage1(StageArgs),
    /// Train the composition net on decoded sphere points.
    Stage2(StageArgs),
    /// Jointly train the sampler and the masked autoencoder.
    Stage3(StageArgs),
    /// Classification finetuning, scored on the held-out split.
    Finetune(FinetuneArgs),
    /// Episodic few-shot evaluation on frozen features.
    Fewshot(FewShotArgs),
    /// Center-set chamfer of FPS, learned and random centers.
    Compare(FromArgs),
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Per-point group probabilities on the canonical sphere.
    Heatmap(FromArgs),
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory; defaults to <out>/data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    data: DataArg,
    /// Checkpoint of the previous stage; defaults to <out>/stage<N-1>.ck.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Stop after this epoch, leaving a resumable checkpoint.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Continue from a partially trained checkpoint of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FromArgs {
    #[command(flatten)]
    data: DataArg,
    /// Trained checkpoint; defaults to <out>/stage3.ck.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    from: FromArgs,
    /// Keep the sampler frozen during finetuning.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    stop_gradient: bool,
    /// Start from fresh parameters instead of a checkpoint.
    #[arg(long)]
    fresh: bool,
}

#[derive(Args)]
struct FewShotArgs {
    #[command(flatten)]
    from: FromArgs,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per operation.
    #[arg(long, default_value_t = gradcheck::DEFAULT_INSTANCES)]
    instances: usize,
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&self, arg: &DataArg) -> Result<Dataset> {
        let dir = arg.data.clone().unwrap_or_else(|| self.path("data"));
        if !dir.is_dir() {
            return Err(Error::Pipeline(format!(
                "dataset directory {} not found; run `dcs gen-data` first",
                dir.display()
            )));
        }
        Dataset::load(&dir, self.cfg.data.holdout_per_class)
    }

    fn checkpoint(&self, given: &Option<PathBuf>, default: &str) -> Result<Checkpoint> {
        let path = given.clone().unwrap_or_else(|| self.path(default));
        Checkpoint::load(&path)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }

    fn record(&self, command: &str) -> RunRecord {
        RunRecord::new(command, self.seed, &self.cfg)
    }

    fn save_record(&self, record: &RunRecord) -> Result<()> {
        record.save(&self.path(&format!("{}_record.json", record.command)))
    }
}

fn stage_options(args: &StageArgs) -> Result<StageOptions> {
    Ok(StageOptions {
        stop_after: args.stop_after,
        resume: args.resume.as_deref().map(Checkpoint::load).transpose()?,
    })
}

fn log_summary(record: &mut RunRecord, log: &LossLog) {
    for term in &log.terms {
        let series = log.series(term).expect("term from the log");
        if let (Some(first), Some(last)) = (series.first(), series.last()) {
            record.set(&format!("{term}_first"), *first);
            record.set(&format!("{term}_last"), *last);
        }
    }
    record.set("epochs_run", log.rows.len());
}

fn finish_stage(ctx: &Ctx, name: &str, run: &StageRun, record: &mut RunRecord) -> Result<()> {
    run.checkpoint.save(&ctx.path(&format!("{name}.ck")))?;
    ctx.write(&format!("{name}_loss.csv"), &run.log.to_csv())?;
    log_summary(record, &run.log);
    for f in &run.frozen {
        record.set(&format!("frozen_hash {}", f.prefix), f.after.clone());
    }
    if let Some(row) = run.log.rows.last() {
        let parts: Vec<String> = run
            .log
            .terms
            .iter()
            .zip(&row.values)
            .map(|(t, v)| format!("{t} {v:.6}"))
            .collect();
        println!("{name}: epoch {} {}", row.epoch, parts.join(" "));
    }
    Ok(())
}

fn run(cli: Cli, config: PathBuf) -> Result<bool> {
    let cfg = RunConfig::load(&config)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
        path: cli.out.clone(),
        source: e,
    })?;
    let ctx = Ctx { cfg, seed, out: cli.out };
    let cfg = &ctx.cfg;
    match cli.command {
        Command::GenData => {
            let dir = ctx.path("data");
            let files = generate_dataset(&dir, &cfg.data, seed)?;
            let mut rec = ctx.record("gen-data");
            rec.set("clouds", files.len());
            rec.set("directory", dir.display().to_string());
            ctx.save_record(&rec)?;
            println!("wrote {} clouds to {}", files.len(), dir.display());
        }
        Command::Stage1(args) => {
            let data = ctx.dataset(&args.data)?;
            let r = run_stage1(cfg, &data, seed, &stage_options(&args)?)?;
            let mut rec = ctx.record("stage1");
            finish_stage(&ctx, "stage1", &r, &mut rec)?;
            ctx.save_record(&rec)?;
        }
        Command::Stage2(args) => {
            let data = ctx.dataset(&args.data)?;
            let prev = ctx.checkpoint(&args.from, "stage1.ck")?;
            let r = run_stage2(cfg, &data, &prev, seed, &stage_options(&args)?)?;
            let mut rec = ctx.record("stage2");
            finish_stage(&ctx, "stage2", &r, &mut rec)?;
            let model = Model::from_checkpoint(cfg, seed, None, &r.checkpoint, Stage::Stage2)?;
            let q = stage2_center_quality(cfg, &model, &data.held_out)?;
            rec.set("heldout_center_cd", q.learned);
            rec.set("heldout_fps_cd", q.fps);
            println!("held-out center chamfer {:.6} (fps {:.6})", q.learned, q.fps);
            ctx.save_record(&rec)?;
        }
        Command::Stage3(args) => {
            let data = ctx.dataset(&args.data)?;
            let prev = ctx.checkpoint(&args.from, "stage2.ck")?;
            let start = Model::from_checkpoint(cfg, seed, None, &prev, Stage::Stage2)?;
            let probe: Vec<_> = data.train.iter().take(cfg.stage3.batch_size).cloned().collect();
            let norm = global_grad_norm(cfg, &start, &probe, false, seed)?;
            let r = run_stage3(cfg, &data, &prev, seed, &stage_options(&args)?)?;
            let mut rec = ctx.record("stage3");
            rec.set("sampler_grad_norm_at_start", norm);
            finish_stage(&ctx, "stage3", &r, &mut rec)?;
            ctx.save_record(&rec)?;
        }
        Command::Finetune(args) => {
            let data = ctx.dataset(&args.from.data)?;
            let ck;
            let init = if args.fresh {
                Init::Fresh
            } else {
                ck = ctx.checkpoint(&args.from.from, "stage3.ck")?;
                Init::Checkpoint(&ck)
            };
            let r = finetune(cfg, &data, init, args.stop_gradient, seed, &StageOptions::default())?;
            r.checkpoint.save(&ctx.path("finetune.ck"))?;
            ctx.write("finetune_loss.csv", &r.log.to_csv())?;
            let mut rec = ctx.record("finetune");
            log_summary(&mut rec, &r.log);
            rec.set("stop_gradient", args.stop_gradient);
            rec.set("fresh_init", args.fresh);
            rec.set("heldout_accuracy", r.accuracy);
            rec.set("sampler_hash_before", r.sampler_before.clone());
            rec.set("sampler_hash_after", r.sampler_after.clone());
            rec.set("sampler_unchanged", r.sampler_before == r.sampler_after);
            ctx.save_record(&rec)?;
            println!(
                "held-out accuracy {:.4}; sampler {}",
                r.accuracy,
                if r.sampler_before == r.sampler_after {
                    "unchanged"
                } else {
                    "updated"
                }
            );
        }
        Command::Fewshot(args) => {
            let data = ctx.dataset(&args.from.data)?;
            let ck = ctx.checkpoint(&args.from.from, "stage3.ck")?;
            let task = FewShotTask {
                way: args.way.unwrap_or(cfg.fewshot.way),
                shot: args.shot.unwrap_or(cfg.fewshot.shot),
                query: cfg.fewshot.query,
                seed,
            };
            let episodes = args.episodes.unwrap_or(cfg.fewshot.episodes);
            let r = few_shot_eval(cfg, &data, &ck, task, episodes)?;
            let mut rec = ctx.record("fewshot");
            rec.set("way", task.way);
            rec.set("shot", task.shot);
            rec.set("accuracies", r.accuracies.clone());
            rec.set("mean", r.mean);
            rec.set("std", r.std);
            ctx.save_record(&rec)?;
            println!(
                "{}-way {}-shot over {episodes} episodes: {:.2} ± {:.2} %",
                task.way,
                task.shot,
                100.0 * r.mean,
                100.0 * r.std
            );
        }
        Command::Compare(args) => {
            let data = ctx.dataset(&args.data)?;
            let ck = ctx.checkpoint(&args.from, "stage3.ck")?;
            let r = baseline_compare(cfg, &data, &ck, seed)?;
            ctx.write("compare.csv", &r.to_csv())?;
            let (f, d, rnd) = r.mean();
            let mut rec = ctx.record("compare");
            rec.set("fps_cd", f);
            rec.set("dcs_cd", d);
            rec.set("random_cd", rnd);
            rec.set("dcs_beats_random", r.dcs_beats_random);
            ctx.save_record(&rec)?;
            println!("mean center chamfer: fps {f:.6} dcs {d:.6} random {rnd:.6}");
            println!("dcs beats random on {:.1}% of clouds", 100.0 * r.dcs_beats_random);
        }
        Command::Gradcheck(args) => {
            let r = gradcheck::run_suite(args.instances, seed)?;
            let mut rec = ctx.record("gradcheck");
            for o in &r.ops {
                println!(
                    "{:<22} {} max rel error {:.3e}",
                    o.op,
                    if o.passed { "ok  " } else { "FAIL" },
                    o.max_rel_error
                );
                rec.set(&o.op, o.max_rel_error);
            }
            rec.set("all_passed", r.all_passed());
            rec.set("seconds", r.elapsed.as_secs_f64());
            ctx.save_record(&rec)?;
            println!("{} ops in {:.2}s", r.ops.len(), r.elapsed.as_secs_f64());
            return Ok(r.all_passed());
        }
        Command::Heatmap(args) => {
            let ck = ctx.checkpoint(&args.from, "stage3.ck")?;
            if !matches!(ck.stage, Stage::Stage2 | Stage::Stage3) {
                return Err(Error::Pipeline(format!(
                    "heatmap needs a stage2 or stage3 checkpoint, got {}",
                    ck.stage.name()
                )));
            }
            let model = Model::from_checkpoint(cfg, seed, None, &ck, ck.stage)?;
            let sphere = canonical_sphere(cfg.data.points)?;
            let map = model
                .sampler
                .composition
                .probability_map(&model.store, &sphere, Mode::Eval)?;
            let mut text = String::from("x,y,z,argmax,max");
            for j in 0..map.groups() {
                text.push_str(&format!(",p_{j}"));
            }
            text.push('\n');
            let rows = heatmap_rows(&sphere, &map)?;
            for r in &rows {
                text.push_str(r);
                text.push('\n');
            }
            ctx.write("heatmap.csv", &text)?;
            let mut rec = ctx.record("heatmap");
            rec.set("rows", rows.len());
            ctx.save_record(&rec)?;
            println!("wrote {} rows to {}", rows.len(), ctx.path("heatmap.csv").display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let mut cli = Cli::parse();
    let Some(config) = cli.config.take() else {
        Cli::command()
            .error(ErrorKind::MissingRequiredArgument, "the following required argument was not provided: --config <PATH>")
            .exit()
    };
    match run(cli, config) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
