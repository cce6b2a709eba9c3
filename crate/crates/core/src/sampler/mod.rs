//! The learned sampler: a sphere encoder/decoder pair, the composition
//! network that partitions points into groups, and the differentiable
//! center sampling built from them.

mod composition;
mod sphere;

pub use composition::{
    dcs_forward, dcs_sample, global_recon_loss, heatmap_rows, stage2_loss, uniform_prior_penalty, CompositionNet,
    DcsSample, DcsVars, GlobalLoss, ProbabilityMap,
};
pub use sphere::{
    forward_map, stage1_loss, EdgeEncoder, LatentEmbedding, Neighborhood, SphereDecoder, SphereSamples,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{GumbelMode, ParamStore};

/// Parameter name prefixes of the three sampler parts.
pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const COMPOSITION_PREFIX: &str = "dcs.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of groups `G`, which is also the number of centers.
    pub groups: usize,
    /// Points per patch `k`.
    pub group_size: usize,
    /// Linear layers in the composition net (1 to 3).
    pub depth: usize,
    pub hidden: usize,
    pub temperature: f64,
    /// Temperature multiplier applied once per epoch.
    pub anneal: f64,
    pub prior_weight: f64,
    pub normalize_columns: bool,
    pub gumbel_mode: GumbelMode,
    pub latent_dim: usize,
    /// Neighbors per point in the edge convolution.
    pub edge_k: usize,
    pub edge_hidden: usize,
    pub decoder_hidden: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            groups: 32,
            group_size: 16,
            depth: 2,
            hidden: 128,
            temperature: 1.0,
            anneal: 1.0,
            prior_weight: 0.0,
            normalize_columns: true,
            gumbel_mode: GumbelMode::Soft,
            latent_dim: 128,
            edge_k: 8,
            edge_hidden: 64,
            decoder_hidden: 256,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.groups < 2 {
            return bad(format!("sampler.groups must be >= 2, got {}", self.groups));
        }
        if self.group_size == 0 {
            return bad("sampler.group_size must be >= 1".into());
        }
        if !(1..=3).contains(&self.depth) {
            return bad(format!("sampler.depth must be 1, 2 or 3, got {}", self.depth));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("sampler.temperature must be > 0, got {}", self.temperature));
        }
        if !(self.anneal > 0.0) {
            return bad(format!("sampler.anneal must be > 0, got {}", self.anneal));
        }
        if self.prior_weight < 0.0 {
            return bad(format!("sampler.prior_weight must be >= 0, got {}", self.prior_weight));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
            ("edge_k", self.edge_k),
            ("edge_hidden", self.edge_hidden),
            ("decoder_hidden", self.decoder_hidden),
        ] {
            if v == 0 {
                return bad(format!("sampler.{name} must be >= 1"));
            }
        }
        Ok(())
    }

    /// Temperature in effect during `epoch` (1-based).
    pub fn temperature_at(&self, epoch: usize) -> f64 {
        self.temperature * self.anneal.powi(epoch.saturating_sub(1) as i32)
    }
}

/// All sampler parts, registered in one parameter store.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub encoder: EdgeEncoder,
    pub decoder: SphereDecoder,
    pub composition: CompositionNet,
}

impl Sampler {
    pub fn new(store: &mut ParamStore, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = EdgeEncoder::new(
            store,
            ENCODER_PREFIX.trim_end_matches('.'),
            cfg.edge_k,
            cfg.edge_hidden,
            cfg.latent_dim,
            rng,
        )?;
        let decoder = SphereDecoder::new(
            store,
            DECODER_PREFIX.trim_end_matches('.'),
            cfg.latent_dim,
            cfg.decoder_hidden,
            rng,
        )?;
        let composition = CompositionNet::new(store, COMPOSITION_PREFIX.trim_end_matches('.'), cfg, rng)?;
        Ok(Self {
            encoder,
            decoder,
            composition,
        })
    }
}
