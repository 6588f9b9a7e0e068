//! Finite-difference verification of reverse-mode gradients.
//!
//! The checked forward runs at f64 (same generic graph code as training)
//! so the central-difference oracle is not limited by f32 rounding noise;
//! parameters themselves stay f32, and the realized f32 perturbation is
//! used as the divisor.

use super::tape::{Tape, Var};
use super::tensor::Params;
use crate::{LensError, Result};

/// Per-parameter maximum relative error found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tol
    }

    pub fn lines(&self) -> String {
        let mut s = String::new();
        for (name, err) in &self.per_param {
            s.push_str(&format!("{name}: max rel err {err:.3e}\n"));
        }
        s
    }
}

/// Compare analytic gradients of `forward` against central finite
/// differences for every entry of every trainable parameter in `params`.
///
/// `forward` must be deterministic for fixed inputs; this is checked by
/// evaluating it twice and requiring bit-identical loss values. The relative
/// error per entry is |analytic − numeric| / max(|analytic|, |numeric|, 1e-8);
/// the report passes iff every entry's error is ≤ `tol`.
pub fn grad_check(
    forward: impl Fn(&mut Tape<f64>, &Params) -> Var,
    params: &mut Params,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let eval = |params: &Params| -> f64 {
        let mut tape = Tape::<f64>::new();
        let loss = forward(&mut tape, params);
        tape.scalar(loss)
    };
    let f0 = eval(params);
    let f1 = eval(params);
    if f0.to_bits() != f1.to_bits() {
        return Err(LensError::InvalidArgument(
            "grad_check: forward is non-deterministic (two runs disagree)".into(),
        ));
    }

    // Analytic pass.
    let mut tape = Tape::<f64>::new();
    let loss = forward(&mut tape, params);
    tape.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| {
            let g = tape
                .param_grad(n)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (n.clone(), g)
        })
        .collect();

    let mut per_param = Vec::new();
    let mut max_err = 0.0f64;
    for (name, a_grad) in &analytic {
        let numel = params.get(name).numel();
        let mut worst = 0.0f64;
        for i in 0..numel {
            let orig = params.get(name).data()[i];
            let xp = orig + h as f32;
            let xm = orig - h as f32;
            params.get_mut(name).data_mut()[i] = xp;
            let fp = eval(params);
            params.get_mut(name).data_mut()[i] = xm;
            let fm = eval(params);
            params.get_mut(name).data_mut()[i] = orig;
            // Divide by the perturbation actually realized in f32.
            let numeric = (fp - fm) / (xp as f64 - xm as f64);
            let a = a_grad[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if err > worst {
                worst = err;
            }
        }
        per_param.push((name.clone(), worst));
        if worst > max_err {
            max_err = worst;
        }
    }
    Ok(GradCheckReport {
        per_param,
        max_err,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::rng::Rng;

    fn randn_param(params: &mut Params, name: &str, shape: &[usize], rng: &mut Rng, scale: f32) {
        let mut t = Tensor::randn(shape, scale, rng);
        t.set_requires_grad(true);
        params.insert(name, t);
    }

    #[test]
    fn identity_map_has_zero_error() {
        let mut params = Params::new();
        let mut t = Tensor::from_vec(&[1], vec![0.3]).unwrap();
        t.set_requires_grad(true);
        params.insert("x", t);
        let report = grad_check(
            |tape, p| {
                let x = tape.param("x", p.get("x"));
                tape.sum(x)
            },
            &mut params,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert_eq!(report.max_err, 0.0);
    }

    #[test]
    fn softmax_cross_entropy_matches_central_differences() {
        // logits [1,2,3], target index 2, h=1e-3.
        let mut params = Params::new();
        let mut t = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        t.set_requires_grad(true);
        params.insert("logits", t);
        let report = grad_check(
            |tape, p| {
                let z = tape.param("logits", p.get("logits"));
                let lp = tape.row_log_softmax(z);
                let picked = tape.pick_per_row(lp, &[2]);
                let s = tape.sum(picked);
                tape.scale(s, -1.0)
            },
            &mut params,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_err);
    }

    #[test]
    fn two_layer_network_matches_central_differences() {
        let mut rng = Rng::new(42);
        let mut params = Params::new();
        randn_param(&mut params, "w1", &[4, 8], &mut rng, 0.5);
        randn_param(&mut params, "b1", &[1, 8], &mut rng, 0.5);
        randn_param(&mut params, "w2", &[8, 3], &mut rng, 0.5);
        randn_param(&mut params, "b2", &[1, 3], &mut rng, 0.5);
        let x: Vec<f32> = (0..8).map(|_| rng.normal_f32() * 0.5).collect();
        let probe: Vec<f32> = (0..6).map(|_| rng.normal_f32()).collect();
        let report = grad_check(
            |tape, p| {
                let w1 = tape.param("w1", p.get("w1"));
                let b1 = tape.param("b1", p.get("b1"));
                let w2 = tape.param("w2", p.get("w2"));
                let b2 = tape.param("b2", p.get("b2"));
                let xv = tape.constant_f32(2, 4, &x);
                let h1 = tape.matmul(xv, w1);
                let h1 = tape.add_row(h1, b1);
                let h1 = tape.gelu(h1);
                let h2 = tape.matmul(h1, w2);
                let h2 = tape.add_row(h2, b2);
                let pv = tape.constant_f32(2, 3, &probe);
                let weighted = tape.mul(h2, pv);
                tape.sum(weighted)
            },
            &mut params,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_err);
    }

    #[test]
    fn detects_nondeterministic_forward() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let mut params = Params::new();
        let mut t = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        t.set_requires_grad(true);
        params.insert("x", t);
        let res = grad_check(
            |tape, p| {
                counter.set(counter.get() + 1.0);
                let x = tape.param("x", p.get("x"));
                let c = tape.constant_scalar(counter.get());
                let y = tape.mul(x, c);
                tape.sum(y)
            },
            &mut params,
            1e-3,
            1e-3,
        );
        assert!(res.is_err());
    }
}
