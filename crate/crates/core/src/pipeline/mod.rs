//! Staged training, finetuning, few-shot evaluation and baseline
//! comparison on top of the sampler and backbone.

mod downstream;
mod stages;

pub use downstream::{EpisodeSplit, 
    baseline_compare, classification_accuracy, few_shot_eval, finetune, CompareReport, CompareRow, FewShotReport,
    FewShotTask, FinetuneRun, Init,
};
pub use stages::{global_grad_norm, run_stage1, run_stage2, run_stage3, stage2_center_quality, CenterQuality};

use std::fmt::Write as _;

use crate::backbone::{ClassHead, MaskedAutoencoder};
use crate::error::{Error, Result};
use crate::geometry::{sphere_samples, Point, SphereMethod};
use crate::io::{Checkpoint, RunConfig, Stage};
use crate::rng::Rng;
use crate::sampler::{Sampler, COMPOSITION_PREFIX, DECODER_PREFIX, ENCODER_PREFIX};
use crate::tensor::{Graph, ParamStore, Var};

/// Prefixes of every sampler parameter.
pub const SAMPLER_PREFIXES: [&str; 3] = [ENCODER_PREFIX, DECODER_PREFIX, COMPOSITION_PREFIX];

// RNG stream ids under the master seed.
const INIT_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;
pub(crate) const STAGE1_STREAM: u64 = 11;
pub(crate) const STAGE2_STREAM: u64 = 12;
pub(crate) const STAGE3_STREAM: u64 = 13;
pub(crate) const FINETUNE_STREAM: u64 = 14;
pub(crate) const FEWSHOT_STREAM: u64 = 15;
pub(crate) const COMPARE_STREAM: u64 = 16;

/// Sampler, backbone and (for finetuning) a class head in one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub sampler: Sampler,
    pub mae: MaskedAutoencoder,
    pub head: Option<ClassHead>,
}

impl Model {
    /// Fresh parameters, deterministic in `seed`.
    pub fn new(cfg: &RunConfig, seed: u64, classes: Option<usize>) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed).fork(INIT_STREAM);
        let sampler = Sampler::new(&mut store, &cfg.sampler, &mut rng)?;
        let mae = MaskedAutoencoder::new(&mut store, &cfg.backbone, cfg.sampler.group_size, &mut rng)?;
        let head = match classes {
            Some(c) => Some(ClassHead::new(
                &mut store,
                &cfg.backbone,
                c,
                &mut Rng::new(seed).fork(HEAD_STREAM),
            )?),
            None => None,
        };
        // Parameters live at checkpoint precision from the start.
        store.snap_to_f32();
        Ok(Self {
            store,
            sampler,
            mae,
            head,
        })
    }

    /// Fresh model overwritten by a checkpoint of exactly stage `needs`.
    pub fn from_checkpoint(
        cfg: &RunConfig,
        seed: u64,
        classes: Option<usize>,
        ck: &Checkpoint,
        needs: Stage,
    ) -> Result<Self> {
        if ck.stage != needs {
            return Err(Error::Pipeline(format!(
                "expected a {} checkpoint, got a {} checkpoint",
                needs.name(),
                ck.stage.name()
            )));
        }
        let mut m = Self::new(cfg, seed, classes)?;
        ck.apply(&mut m.store)?;
        Ok(m)
    }

    /// Hash over all sampler parameters.
    pub fn sampler_hash(&self) -> String {
        hash_prefixes(&self.store, &SAMPLER_PREFIXES)
    }
}

pub fn hash_prefixes(store: &ParamStore, prefixes: &[&str]) -> String {
    prefixes
        .iter()
        .map(|p| store.hash_prefix(p))
        .collect::<Vec<_>>()
        .join(":")
}

/// One line per epoch: `epoch, lr, term...`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLog {
    pub terms: Vec<String>,
    pub rows: Vec<LogRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub values: Vec<f64>,
}

impl LossLog {
    pub fn new(terms: &[&str]) -> Self {
        Self {
            terms: terms.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, lr: f64, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.terms.len());
        self.rows.push(LogRow { epoch, lr, values });
    }

    /// Values of one term over the epochs.
    pub fn series(&self, term: &str) -> Option<Vec<f64>> {
        let i = self.terms.iter().position(|t| t == term)?;
        Some(self.rows.iter().map(|r| r.values[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("epoch,lr,{}\n", self.terms.join(","));
        for r in &self.rows {
            write!(s, "{},{}", r.epoch, r.lr).expect("write to string");
            for v in &r.values {
                write!(s, ",{v}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }
}

/// Hashes of a frozen parameter group before and after a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeCheck {
    pub prefix: String,
    pub before: String,
    pub after: String,
}

/// Result of one training stage.
#[derive(Clone, Debug)]
pub struct StageRun {
    pub checkpoint: Checkpoint,
    pub log: LossLog,
    pub frozen: Vec<FreezeCheck>,
}

/// Early stop and resume controls for a stage.
#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    /// Stop after this epoch, leaving a resumable checkpoint.
    pub stop_after: Option<usize>,
    /// Continue from a partially trained checkpoint of the same stage.
    pub resume: Option<Checkpoint>,
}

pub(crate) fn freeze_snapshot(store: &ParamStore, prefixes: &[&str]) -> Vec<(String, String)> {
    prefixes
        .iter()
        .map(|p| (p.to_string(), store.hash_prefix(p)))
        .collect()
}

/// Compares hashes of frozen groups and fails on any change.
pub(crate) fn verify_frozen(store: &ParamStore, before: Vec<(String, String)>) -> Result<Vec<FreezeCheck>> {
    let mut out = Vec::new();
    for (prefix, h) in before {
        let after = store.hash_prefix(&prefix);
        if after != h {
            return Err(Error::Pipeline(format!("frozen parameters under `{prefix}` changed")));
        }
        out.push(FreezeCheck {
            prefix,
            before: h,
            after,
        });
    }
    Ok(out)
}

/// The canonical sphere samples shared by stage 1 and stage 2.
pub fn canonical_sphere(points: usize) -> Result<Vec<Point>> {
    sphere_samples(points, SphereMethod::Fibonacci, 0)
}

/// Mean of per-example scalar losses.
pub(crate) fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut flat = Vec::with_capacity(terms.len());
    for &t in terms {
        flat.push(g.reshape(t, &[1])?);
    }
    let all = g.concat(&flat, 0)?;
    Ok(g.mean(all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_csv_layout() {
        let mut log = LossLog::new(&["loss", "emd"]);
        log.push(1, 5e-5, vec![2.5, 1.0]);
        log.push(2, 1e-4, vec![2.0, 0.5]);
        assert_eq!(log.to_csv(), "epoch,lr,loss,emd\n1,0.00005,2.5,1\n2,0.0001,2,0.5\n");
        assert_eq!(log.series("emd").unwrap(), vec![1.0, 0.5]);
        assert!(log.series("x").is_none());
    }

    #[test]
    fn wrong_stage_checkpoint_rejected() {
        let cfg = RunConfig::default();
        let m = Model::new(&cfg, 0, None).unwrap();
        let ck = Checkpoint::capture(Stage::Stage1, &m.store);
        let e = Model::from_checkpoint(&cfg, 0, None, &ck, Stage::Stage2).unwrap_err();
        assert!(e.to_string().contains("stage2"), "{e}");
    }

    #[test]
    fn model_init_is_seeded() {
        let cfg = RunConfig::default();
        let a = Model::new(&cfg, 3, Some(5)).unwrap();
        let b = Model::new(&cfg, 3, Some(5)).unwrap();
        let c = Model::new(&cfg, 4, Some(5)).unwrap();
        assert_eq!(a.store.hash_prefix(""), b.store.hash_prefix(""));
        assert_ne!(a.store.hash_prefix(""), c.store.hash_prefix(""));
    }
}
