use std::fmt::Write as _;

use super::stages::{backward_step, train_loop};
use super::{
    freeze_snapshot, hash_prefixes, verify_frozen, LossLog, Model, StageOptions, COMPARE_STREAM, FEWSHOT_STREAM,
    FINETUNE_STREAM, SAMPLER_PREFIXES,
};
use crate::backbone::{ClassHead, BACKBONE_PREFIX, HEAD_PREFIX};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_value, fps, knn_indices, relative_patches, ChamferForm, Point, PointCloud};
use crate::io::{Checkpoint, Dataset, RunConfig, Stage};
use crate::rng::Rng;
use crate::sampler::{dcs_forward, dcs_sample, COMPOSITION_PREFIX, DECODER_PREFIX, ENCODER_PREFIX};
use crate::tensor::{gumbel_noise, AdamW, Graph, Mode, ParamStore, Tensor, Var};

/// Starting point of a finetuning run.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    /// Sampler and backbone from a stage-3 checkpoint.
    Checkpoint(&'a Checkpoint),
    /// Freshly initialized parameters.
    Fresh,
}

#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub checkpoint: Checkpoint,
    pub log: LossLog,
    /// Top-1 accuracy on the held-out split.
    pub accuracy: f64,
    pub sampler_before: String,
    pub sampler_after: String,
}

/// Noise-free sampled patches `[G, k, 3]` and centers `[G, 3]` of one cloud.
fn eval_tokens(cfg: &RunConfig, model: &Model, cloud: &PointCloud) -> Result<(Tensor, Tensor)> {
    let s = dcs_sample(&model.store, &model.sampler.composition, &cfg.sampler, cloud, None)?;
    Ok((s.patches.relative, Tensor::from_points(&s.centers.centers)))
}

/// Stacks per-cloud token tensors along a new leading axis.
fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

fn label_of(c: &PointCloud) -> Result<usize> {
    c.label
        .ok_or_else(|| Error::Pipeline(format!("cloud `{}` has no class label", c.id)))
}

/// Mean cross-entropy of logits `[B, C]` against integer labels.
fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let c = g.shape(logits)[1];
    let mut onehot = Tensor::zeros(&[labels.len(), c]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * c + l] = 1.0;
    }
    let lp = g.log_softmax(logits, 1)?;
    let oh = g.input(onehot);
    let picked = g.mul(lp, oh)?;
    let s = g.sum(picked);
    Ok(g.mul_scalar(s, -1.0 / labels.len() as f64))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of the model's head on `clouds`, with noise-free
/// sampling and the backbone in eval mode.
pub fn classification_accuracy(cfg: &RunConfig, model: &Model, clouds: &[PointCloud]) -> Result<f64> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::Pipeline("model has no classification head".into()))?;
    if clouds.is_empty() {
        return Err(Error::Pipeline("no clouds to classify".into()));
    }
    let mut correct = 0;
    let mut rng = Rng::new(0);
    for chunk in clouds.chunks(32) {
        let tokens = chunk
            .iter()
            .map(|c| eval_tokens(cfg, model, c))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let p = g.input(stack(&tokens.iter().map(|t| &t.0).collect::<Vec<_>>())?);
        let c = g.input(stack(&tokens.iter().map(|t| &t.1).collect::<Vec<_>>())?);
        let logits = model.mae.classify(&mut g, &model.store, head, p, c, Mode::Eval, &mut rng)?;
        let classes = head.classes();
        for (row, cloud) in g.value(logits).data().chunks_exact(classes).zip(chunk) {
            if argmax(row) == label_of(cloud)? {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / clouds.len() as f64)
}

/// Supervised classification training on the train split, scored on the
/// held-out split.
///
/// With `stop_gradient` the sampler is frozen and samples noise-free
/// centers; otherwise the composition net trains along with the backbone
/// through Gumbel-relaxed sampling.
pub fn finetune(
    cfg: &RunConfig,
    data: &Dataset,
    init: Init<'_>,
    stop_gradient: bool,
    seed: u64,
    opts: &StageOptions,
) -> Result<FinetuneRun> {
    if data.classes < 2 {
        return Err(Error::Pipeline(format!(
            "finetuning needs at least two classes, dataset has {}",
            data.classes
        )));
    }
    if data.train.is_empty() || data.held_out.is_empty() {
        return Err(Error::Pipeline("finetuning needs non-empty train and held-out splits".into()));
    }
    let labels = data.train.iter().map(label_of).collect::<Result<Vec<_>>>()?;
    let plan = cfg.finetune.plan()?;
    let mut model = match init {
        Init::Checkpoint(ck) => Model::from_checkpoint(cfg, seed, Some(data.classes), ck, Stage::Stage3)?,
        Init::Fresh => Model::new(cfg, seed, Some(data.classes))?,
    };
    model.store.snap_to_f32();
    let sampler_before = model.sampler_hash();
    let mut frozen = vec![ENCODER_PREFIX, DECODER_PREFIX];
    let mut trainable = vec![BACKBONE_PREFIX, HEAD_PREFIX];
    if stop_gradient {
        frozen.push(COMPOSITION_PREFIX);
    } else {
        trainable.push(COMPOSITION_PREFIX);
    }
    model.store.set_trainable_only(&trainable);
    let snapshot = freeze_snapshot(&model.store, &frozen);
    // Frozen sampler: tokens never change, so sample them once.
    let cached = if stop_gradient {
        Some(
            data.train
                .iter()
                .map(|c| eval_tokens(cfg, &model, c))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let (groups, k) = (cfg.sampler.groups, cfg.sampler.group_size);
    let seed_rng = Rng::new(seed).fork(FINETUNE_STREAM);
    let (log, checkpoint) = train_loop(
        Stage::Finetune,
        &mut model,
        &plan,
        opts,
        &seed_rng,
        &["loss", "train_acc"],
        &mut Vec::new(),
        |model, opt, _epoch, rng, _| {
            let mut order: Vec<usize> = (0..data.train.len()).collect();
            rng.shuffle(&mut order);
            let (mut sum_loss, mut correct) = (0.0, 0usize);
            for chunk in order.chunks(plan.batch_size) {
                let mut g = Graph::new();
                let (p, c) = match &cached {
                    Some(tokens) => {
                        let p = stack(&chunk.iter().map(|&i| &tokens[i].0).collect::<Vec<_>>())?;
                        let c = stack(&chunk.iter().map(|&i| &tokens[i].1).collect::<Vec<_>>())?;
                        (g.input(p), g.input(c))
                    }
                    None => {
                        let vars: Vec<Var> = chunk.iter().map(|&i| g.input(data.train[i].to_tensor())).collect();
                        let noise: Vec<Tensor> = chunk
                            .iter()
                            .map(|&i| gumbel_noise(&[data.train[i].len(), groups], rng))
                            .collect();
                        let dcs = dcs_forward(
                            &mut g,
                            &model.store,
                            &model.sampler.composition,
                            &cfg.sampler,
                            &vars,
                            cfg.sampler.temperature,
                            Some(&noise),
                            Mode::Train,
                        )?;
                        let mut ps = Vec::with_capacity(chunk.len());
                        let mut cs = Vec::with_capacity(chunk.len());
                        for ((&i, &var), d) in chunk.iter().zip(&vars).zip(&dcs) {
                            let idx = knn_indices(&data.train[i].points, &g.value(d.centers).to_points(), k)?;
                            let rel = relative_patches(&mut g, var, d.centers, &idx, k)?;
                            ps.push(g.reshape(rel, &[1, groups, k, 3])?);
                            cs.push(g.reshape(d.centers, &[1, groups, 3])?);
                        }
                        (g.concat(&ps, 0)?, g.concat(&cs, 0)?)
                    }
                };
                let head = model.head.as_ref().expect("finetune model has a head");
                let logits = model.mae.classify(&mut g, &model.store, head, p, c, Mode::Train, rng)?;
                let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let loss = cross_entropy(&mut g, logits, &batch_labels)?;
                let classes = head.classes();
                for (row, &l) in g.value(logits).data().chunks_exact(classes).zip(&batch_labels) {
                    if argmax(row) == l {
                        correct += 1;
                    }
                }
                sum_loss += chunk.len() as f64 * g.value(loss).item();
                backward_step(&mut g, model, opt, loss)?;
            }
            let n = data.train.len() as f64;
            Ok(vec![sum_loss / n, correct as f64 / n])
        },
    )?;
    verify_frozen(&model.store, snapshot)?;
    let accuracy = classification_accuracy(cfg, &model, &data.held_out)?;
    Ok(FinetuneRun {
        checkpoint,
        log,
        accuracy,
        sampler_before,
        sampler_after: hash_prefixes(&model.store, &SAMPLER_PREFIXES),
    })
}

/// One W-way S-shot episode definition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FewShotTask {
    pub way: usize,
    pub shot: usize,
    /// Query clouds per class.
    pub query: usize,
    pub seed: u64,
}

/// Pool indices drawn for one episode, with labels remapped to `0..way`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeSplit {
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over episodes.
    pub std: f64,
    pub splits: Vec<EpisodeSplit>,
}

impl FewShotTask {
    /// Draws the classes and per-class support/query clouds of episode
    /// `episode` from a pool given as per-cloud labels.
    pub fn split(&self, labels: &[usize], episode: usize) -> Result<EpisodeSplit> {
        if self.way == 0 || self.shot == 0 || self.query == 0 {
            return Err(Error::Pipeline("few-shot way, shot and query must be >= 1".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let need = self.shot + self.query;
        let eligible: Vec<usize> = (0..classes).filter(|&c| by_class[c].len() >= need).collect();
        if eligible.len() < self.way {
            return Err(Error::Pipeline(format!(
                "{}-way {}-shot needs {} classes with at least {need} clouds each, found {}",
                self.way,
                self.shot,
                self.way,
                eligible.len()
            )));
        }
        let mut rng = Rng::new(self.seed).fork(FEWSHOT_STREAM).fork(episode as u64);
        let picked: Vec<usize> = rng.choose(eligible.len(), self.way).into_iter().map(|i| eligible[i]).collect();
        let (mut support, mut query) = (Vec::new(), Vec::new());
        for (new_label, &c) in picked.iter().enumerate() {
            let members = &by_class[c];
            let chosen = rng.choose(members.len(), need);
            for (j, &m) in chosen.iter().enumerate() {
                let item = (members[m], new_label);
                if j < self.shot {
                    support.push(item);
                } else {
                    query.push(item);
                }
            }
        }
        Ok(EpisodeSplit {
            classes: picked,
            support,
            query,
        })
    }
}

/// Few-shot classification on frozen pretrained features: per episode a
/// fresh head is trained on the support set and scored on the query set.
pub fn few_shot_eval(
    cfg: &RunConfig,
    data: &Dataset,
    stage3: &Checkpoint,
    task: FewShotTask,
    episodes: usize,
) -> Result<FewShotReport> {
    if episodes == 0 {
        return Err(Error::Pipeline("few-shot evaluation needs at least one episode".into()));
    }
    let model = Model::from_checkpoint(cfg, task.seed, None, stage3, Stage::Stage3)?;
    let pool: Vec<&PointCloud> = data.train.iter().chain(&data.held_out).collect();
    let labels = pool.iter().map(|c| label_of(c)).collect::<Result<Vec<_>>>()?;
    let splits = (0..episodes)
        .map(|e| task.split(&labels, e))
        .collect::<Result<Vec<_>>>()?;
    let mut features: Vec<Option<Vec<f64>>> = vec![None; pool.len()];
    for s in &splits {
        for &(i, _) in s.support.iter().chain(&s.query) {
            if features[i].is_none() {
                features[i] = Some(cloud_features(cfg, &model, pool[i])?);
            }
        }
    }
    let d = cfg.backbone.embed_dim;
    let fs = &cfg.fewshot;
    let mut accuracies = Vec::with_capacity(episodes);
    for (e, s) in splits.iter().enumerate() {
        let gather = |items: &[(usize, usize)]| -> Result<Tensor> {
            let data = items
                .iter()
                .flat_map(|&(i, _)| features[i].as_ref().expect("computed above").iter().copied())
                .collect();
            Tensor::new(vec![items.len(), d], data)
        };
        let (xs, xq) = (gather(&s.support)?, gather(&s.query)?);
        let ys: Vec<usize> = s.support.iter().map(|p| p.1).collect();
        let mut rng = Rng::new(task.seed).fork(FEWSHOT_STREAM).fork(1 << 32 | e as u64);
        let mut store = ParamStore::new();
        let head = ClassHead::new(&mut store, &cfg.backbone, task.way, &mut rng)?;
        let mut opt = AdamW::new(fs.lr, fs.weight_decay);
        for _ in 0..fs.epochs {
            let mut g = Graph::new();
            let x = g.input(xs.clone());
            let logits = head.forward(&mut g, &store, x, Mode::Train, &mut rng)?;
            let loss = cross_entropy(&mut g, logits, &ys)?;
            g.backward(loss)?;
            store.zero_grad();
            store.absorb(&mut g);
            opt.step(&mut store)?;
        }
        let mut g = Graph::new();
        let x = g.input(xq);
        let logits = head.forward(&mut g, &store, x, Mode::Eval, &mut rng)?;
        let correct = g
            .value(logits)
            .data()
            .chunks_exact(task.way)
            .zip(&s.query)
            .filter(|(row, q)| argmax(row) == q.1)
            .count();
        accuracies.push(correct as f64 / s.query.len() as f64);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(FewShotReport {
        accuracies,
        mean,
        std,
        splits,
    })
}

fn cloud_features(cfg: &RunConfig, model: &Model, cloud: &PointCloud) -> Result<Vec<f64>> {
    let (p, c) = eval_tokens(cfg, model, cloud)?;
    let mut g = Graph::new();
    let p = g.input(stack(&[&p])?);
    let c = g.input(stack(&[&c])?);
    let f = model.mae.features(&mut g, &model.store, p, c)?;
    Ok(g.value(f).data().to_vec())
}

/// Center-set chamfer (ℓ2) of three center choices for one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub id: String,
    pub fps: f64,
    pub dcs: f64,
    pub random: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    /// Fraction of clouds where DCS centers beat the random subset.
    pub dcs_beats_random: f64,
}

impl CompareReport {
    pub fn mean(&self) -> (f64, f64, f64) {
        let n = self.rows.len() as f64;
        let s = self.rows.iter().fold((0.0, 0.0, 0.0), |a, r| (a.0 + r.fps, a.1 + r.dcs, a.2 + r.random));
        (s.0 / n, s.1 / n, s.2 / n)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("cloud,fps,dcs,random\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.id, r.fps, r.dcs, r.random).expect("write to string");
        }
        let (f, d, r) = self.mean();
        writeln!(s, "mean,{f},{d},{r}").expect("write to string");
        s
    }
}

/// Compares FPS, noise-free DCS and uniform-random centers on every
/// held-out cloud.
pub fn baseline_compare(cfg: &RunConfig, data: &Dataset, stage3: &Checkpoint, seed: u64) -> Result<CompareReport> {
    if data.held_out.is_empty() {
        return Err(Error::Pipeline("no held-out clouds to compare on".into()));
    }
    let model = Model::from_checkpoint(cfg, seed, None, stage3, Stage::Stage3)?;
    let g = cfg.sampler.groups;
    let mut rng = Rng::new(seed).fork(COMPARE_STREAM);
    let mut rows = Vec::with_capacity(data.held_out.len());
    for cloud in &data.held_out {
        let pick = |idx: &[usize]| -> Vec<Point> { idx.iter().map(|&i| cloud.points[i]).collect() };
        let f = pick(&fps(&cloud.points, g, 0)?);
        let r = pick(&rng.choose(cloud.len(), g));
        let d = dcs_sample(&model.store, &model.sampler.composition, &cfg.sampler, cloud, None)?
            .centers
            .centers;
        rows.push(CompareRow {
            id: cloud.id.clone(),
            fps: chamfer_value(&f, &cloud.points, ChamferForm::L2)?,
            dcs: chamfer_value(&d, &cloud.points, ChamferForm::L2)?,
            random: chamfer_value(&r, &cloud.points, ChamferForm::L2)?,
        });
    }
    let wins = rows.iter().filter(|r| r.dcs < r.random).count();
    Ok(CompareReport {
        dcs_beats_random: wins as f64 / rows.len() as f64,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_split_is_disjoint_and_sized() {
        let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let task = FewShotTask {
            way: 3,
            shot: 4,
            query: 5,
            seed: 7,
        };
        let s = task.split(&labels, 2).unwrap();
        assert_eq!(s.support.len(), 12);
        assert_eq!(s.query.len(), 15);
        let mut all: Vec<usize> = s.support.iter().chain(&s.query).map(|p| p.0).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 27);
        for &(i, l) in s.support.iter().chain(&s.query) {
            assert_eq!(labels[i], s.classes[l]);
        }
        assert_eq!(task.split(&labels, 2).unwrap(), s);
        assert_ne!(task.split(&labels, 3).unwrap(), s);
    }

    #[test]
    fn episode_split_rejects_small_pool() {
        let labels: Vec<usize> = (0..20).map(|i| i % 5).collect();
        let task = FewShotTask {
            way: 2,
            shot: 2,
            query: 3,
            seed: 0,
        };
        assert!(task.split(&labels, 0).is_err());
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let l = cross_entropy(&mut g, x, &[2, 1]).unwrap();
        let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let want = ((lse - 3.0) + 3f64.ln()) / 2.0;
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }
}
