//! The context module: learned context queries and the connector that
//! projects their extracted hidden states into the mask decoder's prompt
//! space. Two connector variants exist for the architecture ablation: a
//! 2-block pre-norm transformer (`vit`) and a per-row MLP (`mlp`).

use serde::{Deserialize, Serialize};

use crate::numerics::{Params, Scalar, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectorKind {
    Vit,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    /// Number of context queries M.
    pub queries: usize,
    /// MLLM hidden dim C (must match the policy dim).
    pub dim: usize,
    /// Mask-head prompt dim.
    pub seg_dim: usize,
    pub connector: ConnectorKind,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            queries: 64,
            dim: 64,
            seg_dim: 64,
            connector: ConnectorKind::Vit,
        }
    }
}

const VIT_BLOCKS: usize = 2;
const INIT_STD: f32 = 0.02;

/// Context-query bank plus connector parameters, all under `bridge/`.
pub struct Bridge {
    pub cfg: BridgeConfig,
}

impl Bridge {
    pub fn new(cfg: BridgeConfig) -> Self {
        assert!(cfg.queries >= 1, "need at least one context query");
        Self { cfg }
    }

    pub fn init_params(&self, params: &mut Params, rng: &mut Rng) {
        let (c, d) = (self.cfg.dim, self.cfg.seg_dim);
        params.insert(
            "bridge/q",
            Tensor::randn(&[self.cfg.queries, c], INIT_STD, rng),
        );
        match self.cfg.connector {
            ConnectorKind::Vit => {
                for l in 0..VIT_BLOCKS {
                    let p = |n: &str| format!("bridge/vit{l}/{n}");
                    params.insert(&p("ln1_g"), Tensor::full(&[c], 1.0));
                    params.insert(&p("ln1_b"), Tensor::zeros(&[c]));
                    for w in ["wq", "wk", "wv", "wo"] {
                        params.insert(&p(w), Tensor::randn(&[c, c], INIT_STD, rng));
                    }
                    for b in ["bq", "bk", "bv", "bo"] {
                        params.insert(&p(b), Tensor::zeros(&[c]));
                    }
                    params.insert(&p("ln2_g"), Tensor::full(&[c], 1.0));
                    params.insert(&p("ln2_b"), Tensor::zeros(&[c]));
                    params.insert(&p("mlp_w1"), Tensor::randn(&[c, 4 * c], INIT_STD, rng));
                    params.insert(&p("mlp_b1"), Tensor::zeros(&[4 * c]));
                    params.insert(&p("mlp_w2"), Tensor::randn(&[4 * c, c], INIT_STD, rng));
                    params.insert(&p("mlp_b2"), Tensor::zeros(&[c]));
                }
                params.insert("bridge/out_w", Tensor::randn(&[c, d], INIT_STD, rng));
                params.insert("bridge/out_b", Tensor::zeros(&[d]));
            }
            ConnectorKind::Mlp => {
                params.insert("bridge/mlp_w1", Tensor::randn(&[c, 4 * c], INIT_STD, rng));
                params.insert("bridge/mlp_b1", Tensor::zeros(&[4 * c]));
                params.insert("bridge/mlp_w2", Tensor::randn(&[4 * c, d], INIT_STD, rng));
                params.insert("bridge/mlp_b2", Tensor::zeros(&[d]));
            }
        }
    }

    /// True for every parameter belonging to the context module (queries
    /// plus connector) — the only trainables of the alignment stage.
    pub fn owns(name: &str) -> bool {
        name.starts_with("bridge/")
    }

    pub fn queries_var<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params) -> Var {
        tape.param("bridge/q", params.get("bridge/q"))
    }

    /// Project extracted query states Q' (M×C) into the prompt space
    /// (M×seg_dim) with the configured connector.
    pub fn connect<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params, qp: Var) -> Var {
        match self.cfg.connector {
            ConnectorKind::Vit => self.connect_vit(tape, params, qp),
            ConnectorKind::Mlp => self.connect_mlp(tape, params, qp),
        }
    }

    /// Two pre-norm self-attention blocks (single head, MLP ratio 4) over
    /// the M query tokens, then a linear C -> seg_dim map. No positional
    /// encodings, so the map is equivariant to row permutations.
    pub fn connect_vit<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params, qp: Var) -> Var {
        let c = self.cfg.dim;
        assert_eq!(tape.cols(qp), c, "connector input must be MxC");
        let scale = 1.0 / (c as f64).sqrt();
        let mut x = qp;
        for l in 0..VIT_BLOCKS {
            let p = |n: &str| format!("bridge/vit{l}/{n}");
            let g1 = tape.param(&p("ln1_g"), params.get(&p("ln1_g")));
            let b1 = tape.param(&p("ln1_b"), params.get(&p("ln1_b")));
            let xn = tape.layer_norm(x, g1, b1);
            let wq = tape.param(&p("wq"), params.get(&p("wq")));
            let wk = tape.param(&p("wk"), params.get(&p("wk")));
            let wv = tape.param(&p("wv"), params.get(&p("wv")));
            let wo = tape.param(&p("wo"), params.get(&p("wo")));
            let bq = tape.param(&p("bq"), params.get(&p("bq")));
            let bk = tape.param(&p("bk"), params.get(&p("bk")));
            let bv = tape.param(&p("bv"), params.get(&p("bv")));
            let bo = tape.param(&p("bo"), params.get(&p("bo")));
            let q = tape.matmul(xn, wq);
            let q = tape.add_row(q, bq);
            let k = tape.matmul(xn, wk);
            let k = tape.add_row(k, bk);
            let v = tape.matmul(xn, wv);
            let v = tape.add_row(v, bv);
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, scale);
            let probs = tape.row_softmax(scores);
            let att = tape.matmul(probs, v);
            let proj = tape.matmul(att, wo);
            let proj = tape.add_row(proj, bo);
            x = tape.add(x, proj);

            let g2 = tape.param(&p("ln2_g"), params.get(&p("ln2_g")));
            let b2 = tape.param(&p("ln2_b"), params.get(&p("ln2_b")));
            let xn = tape.layer_norm(x, g2, b2);
            let w1 = tape.param(&p("mlp_w1"), params.get(&p("mlp_w1")));
            let bb1 = tape.param(&p("mlp_b1"), params.get(&p("mlp_b1")));
            let w2 = tape.param(&p("mlp_w2"), params.get(&p("mlp_w2")));
            let bb2 = tape.param(&p("mlp_b2"), params.get(&p("mlp_b2")));
            let h = tape.matmul(xn, w1);
            let h = tape.add_row(h, bb1);
            let h = tape.hard_swish(h);
            let out = tape.matmul(h, w2);
            let out = tape.add_row(out, bb2);
            x = tape.add(x, out);
        }
        let ow = tape.param("bridge/out_w", params.get("bridge/out_w"));
        let ob = tape.param("bridge/out_b", params.get("bridge/out_b"));
        let y = tape.matmul(x, ow);
        tape.add_row(y, ob)
    }

    /// Per-row 2-layer MLP (hidden 4C, gelu) applied independently to each
    /// query; no cross-query mixing.
    pub fn connect_mlp<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params, qp: Var) -> Var {
        assert_eq!(tape.cols(qp), self.cfg.dim, "connector input must be MxC");
        let w1 = tape.param("bridge/mlp_w1", params.get("bridge/mlp_w1"));
        let b1 = tape.param("bridge/mlp_b1", params.get("bridge/mlp_b1"));
        let w2 = tape.param("bridge/mlp_w2", params.get("bridge/mlp_w2"));
        let b2 = tape.param("bridge/mlp_b2", params.get("bridge/mlp_b2"));
        let h = tape.matmul(qp, w1);
        let h = tape.add_row(h, b1);
        let h = tape.hard_swish(h);
        let y = tape.matmul(h, w2);
        tape.add_row(y, b2)
    }
}
