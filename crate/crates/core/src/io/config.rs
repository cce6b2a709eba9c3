use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::sampler::{GlobalLoss, SamplerConfig};
use crate::tensor::CosineWarmupSchedule;

/// Epoch count, batching and optimizer settings of one training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: CosineWarmupSchedule,
    pub weight_decay: f64,
}

macro_rules! stage_section {
    ($(#[$doc:meta])* $name:ident, $section:literal, epochs = $epochs:expr, lr = $lr:expr, warmup = $warmup:expr, weight_decay = $wd:expr) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            pub epochs: usize,
            pub batch_size: usize,
            pub lr: f64,
            pub min_lr: f64,
            pub warmup_epochs: usize,
            pub weight_decay: f64,
        }

        impl Default for $name {
            fn default() -> Self {
                Self {
                    epochs: $epochs,
                    batch_size: 16,
                    lr: $lr,
                    min_lr: 1e-6,
                    warmup_epochs: $warmup,
                    weight_decay: $wd,
                }
            }
        }

        impl $name {
            pub fn plan(&self) -> Result<TrainPlan> {
                let err = |m: String| Error::Config(format!(concat!($section, ".{}"), m));
                let bad = |m: String| Err(err(m));
                if self.epochs == 0 {
                    return bad("epochs must be >= 1".into());
                }
                if self.batch_size == 0 {
                    return bad("batch_size must be >= 1".into());
                }
                if !(self.weight_decay >= 0.0) {
                    return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
                }
                let schedule = CosineWarmupSchedule::new(self.lr, self.warmup_epochs, self.epochs, self.min_lr)
                    .map_err(|e| err(format!("schedule: {e}")))?;
                Ok(TrainPlan {
                    epochs: self.epochs,
                    batch_size: self.batch_size,
                    schedule,
                    weight_decay: self.weight_decay,
                })
            }
        }
    };
}

stage_section!(
    /// Sphere encoder/decoder training.
    Stage1Config, "stage1", epochs = 200, lr = 5e-4, warmup = 10, weight_decay = 5e-4
);
stage_section!(
    /// Composition-net training on decoded sphere points.
    Stage2Config, "stage2", epochs = 200, lr = 5e-4, warmup = 10, weight_decay = 5e-4
);
stage_section!(
    /// Joint sampler and backbone pretraining.
    Stage3Config, "stage3", epochs = 100, lr = 5e-4, warmup = 10, weight_decay = 5e-2
);
stage_section!(
    /// Supervised classification finetuning.
    FinetuneConfig, "finetune", epochs = 20, lr = 5e-4, warmup = 2, weight_decay = 5e-2
);

/// Loss-term weights shared by the stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the matching term next to chamfer in stage 1.
    pub emd_weight: f64,
    pub local_weight: f64,
    pub global_weight: f64,
    pub global_loss: GlobalLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            emd_weight: 1.0,
            local_weight: 1.0,
            global_weight: 1.0,
            global_loss: GlobalLoss::L2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
    /// Head-only training epochs per episode.
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 10,
            query: 20,
            episodes: 10,
            epochs: 50,
            lr: 1e-3,
            weight_decay: 5e-2,
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way == 0 || self.shot == 0 || self.query == 0 || self.episodes == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "fewshot.way, shot, query, episodes and epochs must all be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("fewshot.lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Every tunable of a run, read from a TOML file with one section per
/// part. Missing keys take their defaults; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub finetune: FinetuneConfig,
    pub fewshot: FewShotConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: origin.to_string(),
                line,
                msg: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.sampler.validate()?;
        self.backbone.validate()?;
        self.stage1.plan()?;
        self.stage2.plan()?;
        self.stage3.plan()?;
        self.finetune.plan()?;
        self.fewshot.validate()?;
        if self.sampler.group_size > self.data.points {
            return Err(Error::Config(format!(
                "sampler.group_size ({}) exceeds data.points ({})",
                self.sampler.group_size, self.data.points
            )));
        }
        if self.sampler.groups > self.data.points {
            return Err(Error::Config(format!(
                "sampler.groups ({}) exceeds data.points ({})",
                self.sampler.groups, self.data.points
            )));
        }
        crate::backbone::mask_counts(self.sampler.groups, self.backbone.mask_ratio)
            .map_err(|e| Error::Config(e.to_string()))?;
        for (name, w) in [
            ("emd_weight", self.loss.emd_weight),
            ("local_weight", self.loss.local_weight),
            ("global_weight", self.loss.global_weight),
        ] {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("", "t").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.stage1.plan().unwrap().schedule.lr_at(10).unwrap(), 5e-4);
        assert_eq!((c.sampler.groups, c.sampler.group_size), (32, 16));
    }

    #[test]
    fn unknown_key_names_line() {
        let e = RunConfig::parse("[stage1]\nepochs = 5\nwarmup_epochs = 1\nbogus = 1\n", "cfg.toml").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("cfg.toml:4"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let c = RunConfig::parse("[stage3]\nepochs = 40\n", "t").unwrap();
        assert_eq!(c.stage3.epochs, 40);
        assert_eq!(c.stage3.weight_decay, 5e-2);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("[stage2]\nepochs = 5\nwarmup_epochs = 5\n", "t").is_err());
        assert!(RunConfig::parse("[backbone]\nmask_ratio = 1.5\n", "t").is_err());
        assert!(RunConfig::parse("[loss]\nglobal_loss = \"l3\"\n", "t").is_err());
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut c = RunConfig::default();
        c.loss.global_loss = GlobalLoss::L1L2;
        c.seed = 9;
        assert_eq!(RunConfig::parse(&c.to_toml(), "t").unwrap(), c);
    }
}
