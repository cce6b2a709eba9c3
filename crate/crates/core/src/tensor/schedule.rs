use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr` at
/// `total_epochs`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CosineWarmupSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl CosineWarmupSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize, min_lr: f64) -> Result<Self> {
        if total_epochs <= warmup_epochs {
            return Err(Error::invalid(format!(
                "total epochs {total_epochs} must exceed warmup epochs {warmup_epochs}"
            )));
        }
        if !(base_lr >= min_lr && min_lr >= 0.0) {
            return Err(Error::invalid(format!(
                "need base lr {base_lr} >= min lr {min_lr} >= 0"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
            min_lr,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside 0..={}",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * epoch as f64 / self.warmup_epochs as f64);
        }
        let progress = (epoch - self.warmup_epochs) as f64
            / (self.total_epochs - self.warmup_epochs) as f64;
        Ok(self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_end_is_base_rate() {
        let s = CosineWarmupSchedule::new(5e-4, 10, 200, 1e-6).unwrap();
        assert_eq!(s.lr_at(10).unwrap(), 5e-4);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
    }

    #[test]
    fn final_epoch_is_min_rate() {
        let s = CosineWarmupSchedule::new(5e-4, 10, 200, 1e-6).unwrap();
        assert!((s.lr_at(200).unwrap() - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn midpoint_is_average() {
        let s = CosineWarmupSchedule::new(5e-4, 10, 210, 1e-5).unwrap();
        let mid = s.lr_at(110).unwrap();
        assert!((mid - (5e-4 + 1e-5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_epoch_rejected() {
        let s = CosineWarmupSchedule::new(5e-4, 10, 20, 0.0).unwrap();
        assert!(s.lr_at(21).is_err());
        assert!(CosineWarmupSchedule::new(1e-3, 10, 10, 0.0).is_err());
    }

    #[test]
    fn non_increasing_after_warmup() {
        let s = CosineWarmupSchedule::new(1e-3, 5, 57, 1e-5).unwrap();
        let rates: Vec<f64> = (5..=57).map(|e| s.lr_at(e).unwrap()).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }
}
