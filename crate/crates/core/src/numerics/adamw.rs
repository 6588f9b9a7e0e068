//! Decoupled-weight-decay Adam.

use std::collections::BTreeMap;

use super::tensor::Params;
use crate::{LensError, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state: per-parameter first/second moment buffers plus the
/// shared step counter (increments by exactly 1 per update).
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Update every trainable parameter from its accumulated gradient.
    /// Parameters without `requires_grad` are untouched.
    pub fn step(&mut self, params: &mut Params, lr: f32, h: &AdamHyper) -> Result<()> {
        if !(lr > 0.0) {
            return Err(LensError::InvalidArgument(format!("lr must be > 0, got {lr}")));
        }
        self.step += 1;
        let t = self.step;
        let (b1, b2) = h.betas;
        let bc1 = 1.0 - (b1 as f64).powi(t as i32) as f32;
        let bc2 = 1.0 - (b2 as f64).powi(t as i32) as f32;
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(LensError::Shape {
                    context: "adamw_step",
                    expected: format!("moment buffers of {n} for {name}"),
                    got: format!("{} / {}", m.len(), v.len()),
                });
            }
            let g = match p.grad() {
                Some(g) if g.len() == n => g.to_vec(),
                Some(g) => {
                    return Err(LensError::Shape {
                        context: "adamw_step",
                        expected: format!("grad of {n} for {name}"),
                        got: format!("{}", g.len()),
                    })
                }
                None => vec![0.0; n],
            };
            let data = p.data_mut();
            for i in 0..n {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + h.eps) + h.weight_decay * data[i]);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&BTreeMap<String, Vec<f32>>, &BTreeMap<String, Vec<f32>>) {
        (&self.m, &self.v)
    }

    pub fn insert_moments(&mut self, name: &str, m: Vec<f32>, v: Vec<f32>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }
}

/// Single-tensor update used by unit tests and the spec examples.
pub fn adamw_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f32,
    h: &AdamHyper,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(LensError::Shape {
            context: "adamw_step",
            expected: format!("{} elements", param.len()),
            got: format!("{}/{}/{}", grad.len(), m.len(), v.len()),
        });
    }
    let (b1, b2) = h.betas;
    let bc1 = 1.0 - (b1 as f64).powi(step as i32) as f32;
    let bc2 = 1.0 - (b2 as f64).powi(step as i32) as f32;
    for i in 0..param.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * (mhat / (vhat.sqrt() + h.eps) + h.weight_decay * param[i]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = vec![1.0f32, -2.0, 3.5];
        let g = vec![0.0f32; 3];
        let (mut m, mut v) = (vec![0.0f32; 3], vec![0.0f32; 3]);
        adamw_step(&mut p, &g, &mut m, &mut v, 1, 0.1, &AdamHyper::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_has_unit_magnitude_update() {
        // p=1, g=1, lr=0.1: bias-corrected moments give mhat=1, vhat=1.
        let mut p = vec![1.0f32];
        let g = vec![1.0f32];
        let (mut m, mut v) = (vec![0.0f32; 1], vec![0.0f32; 1]);
        adamw_step(&mut p, &g, &mut m, &mut v, 1, 0.1, &AdamHyper::default()).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6, "got {}", p[0]);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut p = vec![1.0f32];
        let g = vec![0.0f32];
        let (mut m, mut v) = (vec![0.0f32; 1], vec![0.0f32; 1]);
        let h = AdamHyper {
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut p, &g, &mut m, &mut v, 1, 0.1, &h).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-6, "got {}", p[0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = vec![1.0f32; 2];
        let g = vec![0.0f32; 3];
        let (mut m, mut v) = (vec![0.0f32; 2], vec![0.0f32; 2]);
        assert!(adamw_step(&mut p, &g, &mut m, &mut v, 1, 0.1, &AdamHyper::default()).is_err());
    }

    #[test]
    fn store_level_step_is_bit_identical_across_runs() {
        let run = || {
            let mut params = Params::new();
            let mut t = Tensor::from_vec(&[3], vec![0.5, -0.25, 2.0]).unwrap();
            t.set_requires_grad(true);
            t.accumulate_grad(&[0.1, -0.2, 0.3]);
            params.insert("w", t);
            let mut opt = AdamW::new();
            for _ in 0..5 {
                opt.step(&mut params, 0.01, &AdamHyper::default()).unwrap();
            }
            params.get("w").data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut params = Params::new();
        let mut t = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        t.set_requires_grad(false);
        params.insert("frozen", t);
        let mut opt = AdamW::new();
        opt.step(&mut params, 0.1, &AdamHyper::default()).unwrap();
        assert_eq!(params.get("frozen").data(), &[1.0, 1.0]);
    }

    #[test]
    fn step_counter_increments() {
        let mut params = Params::new();
        let mut opt = AdamW::new();
        assert_eq!(opt.step, 0);
        opt.step(&mut params, 0.1, &AdamHyper::default()).unwrap();
        opt.step(&mut params, 0.1, &AdamHyper::default()).unwrap();
        assert_eq!(opt.step, 2);
    }
}
