//! Learning-rate schedules: cosine and linear decay with optional warmup.

use serde::{Deserialize, Serialize};

use crate::{LensError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f32,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, base_lr: f32, total_steps: u64, warmup_steps: u64) -> Self {
        Self {
            kind,
            base_lr,
            total_steps,
            warmup_steps,
        }
    }

    pub fn lr_at(&self, step: u64) -> Result<f32> {
        lr_at(self, step)
    }
}

/// Cosine: base·0.5·(1+cos(π·t)); linear: base·(1−t); t measures progress
/// after warmup. Warmup ramps affinely from 0 to base_lr.
pub fn lr_at(s: &LrSchedule, step: u64) -> Result<f32> {
    if step > s.total_steps {
        return Err(LensError::InvalidArgument(format!(
            "schedule step {step} out of range 0..={}",
            s.total_steps
        )));
    }
    if step < s.warmup_steps {
        return Ok(s.base_lr * step as f32 / s.warmup_steps as f32);
    }
    let denom = s.total_steps.saturating_sub(s.warmup_steps);
    let t = if denom == 0 {
        1.0
    } else {
        (step - s.warmup_steps) as f64 / denom as f64
    };
    let f = match s.kind {
        ScheduleKind::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
        ScheduleKind::Linear => 1.0 - t,
        ScheduleKind::Constant => 1.0,
    };
    Ok((s.base_lr as f64 * f) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::new(ScheduleKind::Cosine, 0.1, 100, 0);
        assert_eq!(s.lr_at(0).unwrap(), 0.1);
        assert!(s.lr_at(100).unwrap().abs() < 1e-9);
    }

    #[test]
    fn linear_midpoint() {
        let s = LrSchedule::new(ScheduleKind::Linear, 3e-6, 100, 0);
        let mid = s.lr_at(50).unwrap();
        assert!((mid - 1.5e-6).abs() < 1e-12, "got {mid}");
    }

    #[test]
    fn out_of_range_is_error() {
        let s = LrSchedule::new(ScheduleKind::Linear, 1.0, 10, 0);
        assert!(s.lr_at(11).is_err());
    }

    #[test]
    fn warmup_ramps_from_zero() {
        let s = LrSchedule::new(ScheduleKind::Cosine, 1.0, 100, 10);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(5).unwrap() - 0.5).abs() < 1e-6);
        assert_eq!(s.lr_at(10).unwrap(), 1.0);
    }

    #[test]
    fn monotone_non_increasing_after_warmup() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear, ScheduleKind::Constant] {
            let s = LrSchedule::new(kind, 0.3, 200, 20);
            let mut prev = f32::INFINITY;
            for step in 20..=200 {
                let lr = s.lr_at(step).unwrap();
                assert!(lr <= prev + 1e-12, "{kind:?} increased at {step}");
                assert!(lr >= 0.0);
                prev = lr;
            }
        }
    }
}
