use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    WarmupCosine,
    Constant,
}

/// Per-step learning rate.
///
/// Warmup-cosine rises linearly from `lr_init` to `lr_peak` over
/// `warmup_steps`, then follows a half cosine down to `lr_final` at
/// `total_steps`. Constant returns `lr_peak` everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn warmup_cosine(
        lr_init: f64,
        lr_peak: f64,
        lr_final: f64,
        warmup_steps: u64,
        total_steps: u64,
    ) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(NnError::InvalidSchedule(format!(
                "warmup {warmup_steps} exceeds total {total_steps}"
            )));
        }
        Ok(Self {
            kind: ScheduleKind::WarmupCosine,
            lr_init,
            lr_peak,
            lr_final,
            warmup_steps,
            total_steps,
        })
    }

    pub fn constant(lr: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            lr_init: lr,
            lr_peak: lr,
            lr_final: lr,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(NnError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        Ok(match self.kind {
            ScheduleKind::Constant => self.lr_peak,
            ScheduleKind::WarmupCosine => {
                if step < self.warmup_steps {
                    let frac = step as f64 / self.warmup_steps as f64;
                    self.lr_init + (self.lr_peak - self.lr_init) * frac
                } else {
                    let span = self.total_steps - self.warmup_steps;
                    if span == 0 {
                        return Ok(self.lr_peak);
                    }
                    let progress = (step - self.warmup_steps) as f64 / span as f64;
                    self.lr_final
                        + 0.5 * (self.lr_peak - self.lr_final) * (1.0 + (PI * progress).cos())
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_cosine_landmarks() {
        let s = LrSchedule::warmup_cosine(0.0, 1e-3, 1e-5, 50, 1000).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(25).unwrap() - 5e-4).abs() < 1e-18);
        assert!((s.lr_at(50).unwrap() - 1e-3).abs() < 1e-18);
        assert!((s.lr_at(1000).unwrap() - 1e-5).abs() < 1e-18);
        let mid = s.lr_at(525).unwrap();
        assert!((mid - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
        assert!(s.lr_at(1001).is_err());
    }

    #[test]
    fn cosine_part_is_monotone() {
        let s = LrSchedule::warmup_cosine(0.0, 1e-3, 1e-5, 10, 200).unwrap();
        let lrs: Vec<f64> = (10..=200).map(|t| s.lr_at(t).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn constant_schedule() {
        let s = LrSchedule::constant(1e-3, 700);
        for t in [0, 1, 350, 700] {
            assert_eq!(s.lr_at(t).unwrap(), 1e-3);
        }
        assert!(s.lr_at(701).is_err());
    }

    #[test]
    fn degenerate_warmups() {
        let s = LrSchedule::warmup_cosine(0.0, 1e-3, 1e-5, 0, 10).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 1e-3);
        let s = LrSchedule::warmup_cosine(0.0, 1e-3, 1e-5, 10, 10).unwrap();
        assert_eq!(s.lr_at(10).unwrap(), 1e-3);
        assert!(LrSchedule::warmup_cosine(0.0, 1e-3, 1e-5, 11, 10).is_err());
    }
}
