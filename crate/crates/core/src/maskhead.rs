//! The toy segmentation model: a patch-embedding image encoder producing a
//! feature grid, a prompt-conditioned cross-attention mask decoder, and the
//! dice+focal segmentation loss.

use serde::{Deserialize, Serialize};

use crate::numerics::{Params, Scalar, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::synthworld::{Image, Mask};
use crate::{LensError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskHeadConfig {
    /// Feature/prompt dim.
    pub seg_dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
}

impl Default for MaskHeadConfig {
    fn default() -> Self {
        Self {
            seg_dim: 64,
            enc_blocks: 2,
            dec_blocks: 2,
        }
    }
}

/// Encoder patch side: the feature grid is (H/4)x(W/4).
pub const ENC_PATCH: usize = 4;
const INIT_STD: f32 = 0.02;

/// Focal loss focusing exponent.
pub const FOCAL_GAMMA: i32 = 2;
/// Foreground weight of the focal term.
pub const FOCAL_ALPHA: f64 = 0.25;
/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

/// Encoded image: one token per 4x4 patch, plus the grid geometry.
pub struct FeatureGrid {
    pub tokens: Var,
    pub grid_w: usize,
    pub grid_h: usize,
}

/// Decoder output: per-pixel mask logits at input resolution.
pub struct MaskLogits {
    pub logits: Var,
    pub width: usize,
    pub height: usize,
}

pub struct MaskHead {
    pub cfg: MaskHeadConfig,
}

impl MaskHead {
    pub fn new(cfg: MaskHeadConfig) -> Self {
        Self { cfg }
    }

    pub fn init_params(&self, params: &mut Params, rng: &mut Rng) {
        let d = self.cfg.seg_dim;
        let patch_dim = ENC_PATCH * ENC_PATCH * 3;
        params.insert("mask/enc/patch_w", Tensor::randn(&[patch_dim, d], INIT_STD, rng));
        params.insert("mask/enc/patch_b", Tensor::zeros(&[d]));
        // learned 2-D positional embeddings, factored into row + column;
        // initialized an order of magnitude above the weight std so token
        // position is a first-class feature from step one
        params.insert("mask/enc/pos_row", Tensor::randn(&[32, d], 0.2, rng));
        params.insert("mask/enc/pos_col", Tensor::randn(&[32, d], 0.2, rng));
        for l in 0..self.cfg.enc_blocks {
            let p = |n: &str| format!("mask/enc/b{l}/{n}");
            Self::init_block(params, rng, &p, d);
        }
        for l in 0..self.cfg.dec_blocks {
            let p = |n: &str| format!("mask/dec/b{l}/{n}");
            Self::init_block(params, rng, &p, d);
        }
        params.insert(
            "mask/dec/out_w",
            Tensor::randn(&[d, ENC_PATCH * ENC_PATCH], INIT_STD, rng),
        );
        params.insert("mask/dec/out_b", Tensor::zeros(&[ENC_PATCH * ENC_PATCH]));
    }

    fn init_block(params: &mut Params, rng: &mut Rng, p: &dyn Fn(&str) -> String, d: usize) {
        params.insert(&p("ln1_g"), Tensor::full(&[d], 1.0));
        params.insert(&p("ln1_b"), Tensor::zeros(&[d]));
        for w in ["wq", "wk", "wv", "wo"] {
            params.insert(&p(w), Tensor::randn(&[d, d], INIT_STD, rng));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            params.insert(&p(b), Tensor::zeros(&[d]));
        }
        params.insert(&p("ln2_g"), Tensor::full(&[d], 1.0));
        params.insert(&p("ln2_b"), Tensor::zeros(&[d]));
        params.insert(&p("mlp_w1"), Tensor::randn(&[d, 4 * d], INIT_STD, rng));
        params.insert(&p("mlp_b1"), Tensor::zeros(&[4 * d]));
        params.insert(&p("mlp_w2"), Tensor::randn(&[4 * d, d], INIT_STD, rng));
        params.insert(&p("mlp_b2"), Tensor::zeros(&[d]));
    }

    /// Everything under the frozen-encoder contract of the RL stage.
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("mask/enc/")
    }

    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("mask/dec/")
    }

    /// Patch-embed and self-attend the image into a feature grid.
    pub fn encode_image<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params,
        img: &Image,
    ) -> Result<FeatureGrid> {
        if img.width % ENC_PATCH != 0 || img.height % ENC_PATCH != 0 {
            return Err(LensError::InvalidArgument(format!(
                "image {}x{} not divisible by {ENC_PATCH}",
                img.width, img.height
            )));
        }
        let (patches, n_tokens, patch_dim) =
            crate::policy::image_to_patches(img, ENC_PATCH)?;
        let (grid_w, grid_h) = (img.width / ENC_PATCH, img.height / ENC_PATCH);
        let d = self.cfg.seg_dim;
        let px = tape.constant_f32(n_tokens, patch_dim, &patches);
        let pw = tape.param("mask/enc/patch_w", params.get("mask/enc/patch_w"));
        let pb = tape.param("mask/enc/patch_b", params.get("mask/enc/patch_b"));
        let mut x = tape.matmul(px, pw);
        x = tape.add_row(x, pb);
        let pos_row = tape.param("mask/enc/pos_row", params.get("mask/enc/pos_row"));
        let pos_col = tape.param("mask/enc/pos_col", params.get("mask/enc/pos_col"));
        let row_ids: Vec<u32> = (0..grid_h as u32)
            .flat_map(|r| std::iter::repeat(r).take(grid_w))
            .collect();
        let col_ids: Vec<u32> = (0..grid_h).flat_map(|_| 0..grid_w as u32).collect();
        let pr = tape.gather_rows(pos_row, &row_ids);
        let pc = tape.gather_rows(pos_col, &col_ids);
        x = tape.add(x, pr);
        x = tape.add(x, pc);
        for l in 0..self.cfg.enc_blocks {
            let p = |n: &str| format!("mask/enc/b{l}/{n}");
            x = Self::self_attn_block(tape, params, &p, x, d);
        }
        Ok(FeatureGrid {
            tokens: x,
            grid_w,
            grid_h,
        })
    }

    fn self_attn_block<T: Scalar>(
        tape: &mut Tape<T>,
        params: &Params,
        p: &dyn Fn(&str) -> String,
        x: Var,
        d: usize,
    ) -> Var {
        let scale = 1.0 / (d as f64).sqrt();
        let g1 = tape.param(&p("ln1_g"), params.get(&p("ln1_g")));
        let b1 = tape.param(&p("ln1_b"), params.get(&p("ln1_b")));
        let xn = tape.layer_norm(x, g1, b1);
        let (q, k, v) = Self::qkv(tape, params, p, xn, xn);
        let scores = tape.matmul_nt(q, k);
        let scores = tape.scale(scores, scale);
        let probs = tape.row_softmax(scores);
        let att = tape.matmul(probs, v);
        let wo = tape.param(&p("wo"), params.get(&p("wo")));
        let bo = tape.param(&p("bo"), params.get(&p("bo")));
        let proj = tape.matmul(att, wo);
        let proj = tape.add_row(proj, bo);
        let x = tape.add(x, proj);
        Self::mlp_block(tape, params, p, x)
    }

    fn qkv<T: Scalar>(
        tape: &mut Tape<T>,
        params: &Params,
        p: &dyn Fn(&str) -> String,
        q_src: Var,
        kv_src: Var,
    ) -> (Var, Var, Var) {
        let wq = tape.param(&p("wq"), params.get(&p("wq")));
        let wk = tape.param(&p("wk"), params.get(&p("wk")));
        let wv = tape.param(&p("wv"), params.get(&p("wv")));
        let bq = tape.param(&p("bq"), params.get(&p("bq")));
        let bk = tape.param(&p("bk"), params.get(&p("bk")));
        let bv = tape.param(&p("bv"), params.get(&p("bv")));
        let q = tape.matmul(q_src, wq);
        let q = tape.add_row(q, bq);
        let k = tape.matmul(kv_src, wk);
        let k = tape.add_row(k, bk);
        let v = tape.matmul(kv_src, wv);
        let v = tape.add_row(v, bv);
        (q, k, v)
    }

    fn mlp_block<T: Scalar>(
        tape: &mut Tape<T>,
        params: &Params,
        p: &dyn Fn(&str) -> String,
        x: Var,
    ) -> Var {
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
        tape.add(x, out)
    }

    /// Rebuild a feature grid from cached encoder output values. Valid only
    /// while the encoder is frozen (the grid is a constant of the graph).
    pub fn grid_from_values<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        grid_w: usize,
        grid_h: usize,
        values: &[f32],
    ) -> FeatureGrid {
        debug_assert_eq!(values.len(), grid_w * grid_h * self.cfg.seg_dim);
        FeatureGrid {
            tokens: tape.constant_f32(grid_w * grid_h, self.cfg.seg_dim, values),
            grid_w,
            grid_h,
        }
    }

    /// Cross-attention decoder: grid tokens attend to the prompt tokens,
    /// then each token maps to its 4x4 logit patch, reassembled at native
    /// resolution by exact patch placement.
    pub fn decode_mask<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params,
        grid: &FeatureGrid,
        prompt: Var,
    ) -> Result<MaskLogits> {
        let d = self.cfg.seg_dim;
        if tape.cols(prompt) != d {
            return Err(LensError::Shape {
                context: "decode_mask",
                expected: format!("prompt dim {d}"),
                got: format!("{}", tape.cols(prompt)),
            });
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut x = grid.tokens;
        for l in 0..self.cfg.dec_blocks {
            let p = |n: &str| format!("mask/dec/b{l}/{n}");
            let g1 = tape.param(&p("ln1_g"), params.get(&p("ln1_g")));
            let b1 = tape.param(&p("ln1_b"), params.get(&p("ln1_b")));
            let xn = tape.layer_norm(x, g1, b1);
            let (q, k, v) = Self::qkv(tape, params, &p, xn, prompt);
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, scale);
            let probs = tape.row_softmax(scores);
            let att = tape.matmul(probs, v);
            let wo = tape.param(&p("wo"), params.get(&p("wo")));
            let bo = tape.param(&p("bo"), params.get(&p("bo")));
            let proj = tape.matmul(att, wo);
            let proj = tape.add_row(proj, bo);
            x = tape.add(x, proj);
            x = Self::mlp_block(tape, params, &p, x);
        }
        let ow = tape.param("mask/dec/out_w", params.get("mask/dec/out_w"));
        let ob = tape.param("mask/dec/out_b", params.get("mask/dec/out_b"));
        let patch_logits = tape.matmul(x, ow);
        let patch_logits = tape.add_row(patch_logits, ob); // [tokens, 16]
        // place each token's 4x4 patch at its grid position
        let (w, h) = (grid.grid_w * ENC_PATCH, grid.grid_h * ENC_PATCH);
        let mut map = vec![0u32; w * h];
        for (i, m) in map.iter_mut().enumerate() {
            let (x_px, y_px) = (i % w, i / w);
            let (gx, gy) = (x_px / ENC_PATCH, y_px / ENC_PATCH);
            let (dx, dy) = (x_px % ENC_PATCH, y_px % ENC_PATCH);
            let token = gy * grid.grid_w + gx;
            *m = (token * ENC_PATCH * ENC_PATCH + dy * ENC_PATCH + dx) as u32;
        }
        let logits = tape.reindex(patch_logits, &map, h, w);
        Ok(MaskLogits {
            logits,
            width: w,
            height: h,
        })
    }

    /// dice(sigmoid(logits), gt) + focal(logits, gt), both mean-reduced.
    pub fn seg_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        logits: &MaskLogits,
        gt: &Mask,
    ) -> Result<Var> {
        seg_loss(tape, logits, gt)
    }
}

/// Dice loss with smoothing 1 plus binary focal loss (gamma 2, alpha 0.25),
/// computed from logits for stability: log p = -softplus(-z),
/// log (1-p) = -softplus(z).
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, logits: &MaskLogits, gt: &Mask) -> Result<Var> {
    if gt.width() != logits.width || gt.height() != logits.height {
        return Err(LensError::Shape {
            context: "seg_loss",
            expected: format!("{}x{}", logits.width, logits.height),
            got: format!("{}x{}", gt.width(), gt.height()),
        });
    }
    if gt.is_empty() {
        return Err(LensError::InvalidArgument(
            "seg_loss requires a non-empty ground-truth mask".into(),
        ));
    }
    let n = gt.bits().len();
    let gt_f: Vec<f32> = gt.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let z = logits.logits;
    let g = tape.constant_f32(logits.height, logits.width, &gt_f);

    // dice = 1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s)
    let p = tape.sigmoid(z);
    let pg = tape.mul(p, g);
    let inter = tape.sum(pg);
    let psum = tape.sum(p);
    let gsum = tape.sum(g);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_SMOOTH);
    let den = tape.add(psum, gsum);
    let den = tape.add_scalar(den, DICE_SMOOTH);
    let inv_den = map_recip(tape, den);
    let ratio = tape.mul(num, inv_den);
    let neg = tape.scale(ratio, -1.0);
    let dice = tape.add_scalar(neg, 1.0);

    // focal, per pixel:
    //   fg: alpha * (1-p)^2 * softplus(-z);  bg: (1-alpha) * p^2 * softplus(z)
    let one_minus_g: Vec<f32> = gt_f.iter().map(|&v| 1.0 - v).collect();
    let gneg = tape.constant_f32(logits.height, logits.width, &one_minus_g);
    let minus_z = tape.scale(z, -1.0);
    let log_p = tape.softplus(minus_z); // -log p
    let log_1p = tape.softplus(z); // -log (1-p)
    let one_minus_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_scalar(one_minus_p, 1.0);
    let omp_sq = tape.mul(one_minus_p, one_minus_p);
    let p_sq = tape.mul(p, p);
    let fg = tape.mul(omp_sq, log_p);
    let fg = tape.mul(fg, g);
    let fg = tape.scale(fg, FOCAL_ALPHA);
    let bg = tape.mul(p_sq, log_1p);
    let bg = tape.mul(bg, gneg);
    let bg = tape.scale(bg, 1.0 - FOCAL_ALPHA);
    let focal = tape.add(fg, bg);
    let focal_sum = tape.sum(focal);
    let focal_mean = tape.scale(focal_sum, 1.0 / n as f64);

    Ok(tape.add(dice, focal_mean))
}

fn map_recip<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    // 1/x via exp(-ln x); x > 0 in every use here
    let lx = tape.ln(x);
    let nlx = tape.scale(lx, -1.0);
    tape.exp(nlx)
}

/// bit = logit > threshold.
pub fn binarize(logits: &[f32], width: usize, height: usize, threshold: f32) -> Mask {
    let bits = logits.iter().map(|&z| z > threshold).collect();
    Mask::from_bits(width, height, bits).expect("logits sized to raster")
}
