#![allow(dead_code)]

use dcs_core::io::{Checkpoint, DataConfig, Dataset, RunConfig};
use dcs_core::pipeline::Model;

/// A run small enough for the default test profile: 5 classes of 6 clouds
/// with 64 points, 8 groups of 8, and a few epochs per stage.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data = DataConfig {
        per_class: 6,
        holdout_per_class: 2,
        points: 64,
        ..DataConfig::default()
    };
    c.sampler.groups = 8;
    c.sampler.group_size = 8;
    c.sampler.edge_k = 4;
    c.sampler.edge_hidden = 8;
    c.sampler.latent_dim = 16;
    c.sampler.decoder_hidden = 16;
    c.sampler.hidden = 16;
    c.backbone.embed_dim = 16;
    c.backbone.heads = 2;
    c.backbone.encoder_blocks = 1;
    c.backbone.embed_hidden = 8;
    c.backbone.pos_hidden = 8;
    c.stage1.epochs = 3;
    c.stage1.warmup_epochs = 1;
    c.stage2.epochs = 3;
    c.stage2.warmup_epochs = 1;
    c.stage3.epochs = 2;
    c.stage3.warmup_epochs = 1;
    c.finetune.epochs = 2;
    c.finetune.warmup_epochs = 1;
    c.fewshot.epochs = 5;
    c.fewshot.query = 2;
    c.fewshot.shot = 2;
    c.validate().expect("tiny config is valid");
    c
}

pub fn tiny_data(cfg: &RunConfig) -> Dataset {
    Dataset::synthesize(&cfg.data, 3).expect("synthetic data")
}

pub type P = [f64; 3];

pub fn dist2(a: &P, b: &P) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Greedy farthest-point selection written as the textbook loop: at each
/// step recompute, for every point, its distance to the nearest selected
/// point, and take the largest (lowest index on ties).
pub fn fps_oracle(points: &[P], k: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < k {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            let d = chosen.iter().map(|&c| dist2(p, &points[c])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

/// Both-direction mean nearest-neighbor distance by double loop; squared
/// distances for the ℓ2 form, plain distances for ℓ1.
pub fn chamfer_oracle(a: &[P], b: &[P], squared: bool) -> f64 {
    let term = |x: &P, ys: &[P]| {
        let d = ys.iter().map(|y| dist2(x, y)).fold(f64::INFINITY, f64::min);
        if squared {
            d
        } else {
            d.sqrt()
        }
    };
    a.iter().map(|x| term(x, b)).sum::<f64>() / a.len() as f64
        + b.iter().map(|y| term(y, a)).sum::<f64>() / b.len() as f64
}

/// Minimum over all permutations of the summed matched distances.
pub fn emd_oracle(a: &[P], b: &[P]) -> f64 {
    fn rec(a: &[P], b: &[P], used: &mut Vec<bool>, i: usize) -> f64 {
        if i == a.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(dist2(&a[i], &b[j]).sqrt() + rec(a, b, used, i + 1));
                used[j] = false;
            }
        }
        best
    }
    rec(a, b, &mut vec![false; b.len()], 0)
}

/// Saves, loads and applies each checkpoint to a differently seeded model,
/// then captures the same parameter blocks again. True when all three
/// agree bit for bit.
pub fn round_trips(cfg: &RunConfig, classes: usize, cks: &[&Checkpoint]) -> dcs_core::Result<bool> {
    let dir = tempfile::tempdir().map_err(|e| dcs_core::Error::Io {
        path: "tempdir".into(),
        source: e,
    })?;
    let mut ok = true;
    for (i, ck) in cks.iter().enumerate() {
        let path = dir.path().join(format!("{i}.ck"));
        ck.save(&path)?;
        let back = Checkpoint::load(&path)?;
        let mut model = Model::new(cfg, cfg.seed + 1, Some(classes))?;
        back.apply(&mut model.store)?;
        let again = Checkpoint::capture(ck.stage, &model.store);
        let reread = ck.params.iter().all(|b| again.params.iter().any(|a| a == b));
        ok &= back == **ck && back.to_bytes() == ck.to_bytes() && reread;
    }
    Ok(ok)
}
