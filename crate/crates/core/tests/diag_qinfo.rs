//! Temporary diagnostic: regress gt_box linearly from extracted Q' states
//! against a frozen policy, to measure how much localization information
//! the query extraction can reach.

use lens_core::numerics::{AdamHyper, AdamW, Params, Tape, Tensor};
use lens_core::pipeline::{build_models, Checkpoint, RunConfig};
use lens_core::rewards::box_iou;
use lens_core::rng::Rng;
use lens_core::synthworld::{build_split, render};

#[test]
#[ignore]
fn box_regression_from_queries() {
    let mut cfg = RunConfig::default();
    cfg.world.train_size = 512;
    let models = build_models(&cfg);
    let samples = build_split(&cfg.world, 42, "train", 512).unwrap();
    let ck = Checkpoint::load(std::path::Path::new("/tmp/pilot/expn/bootstrap.ckpt"), None, true).unwrap();
    let mut params = ck.params;
    let mut rng = Rng::new(7);
    models.bridge.init_params(&mut params, &mut rng);
    params.insert("probe/w", Tensor::randn(&[cfg.model.dim, 4], 0.05, &mut rng));
    params.insert("probe/b", Tensor::zeros(&[4]));
    params.set_trainable(|n| n == "bridge/q" || n.starts_with("probe/"));

    // frozen prefixes
    let completions: Vec<Vec<u32>> = samples.iter().map(|s| {
        let img = render(&s.scene);
        let layout = models.policy.layout(&img, &s.expression).unwrap();
        models.policy.generate(&params, &layout, 0.0, 48, &mut Rng::new(0)).unwrap().tokens
    }).collect();
    let kvs: Vec<_> = samples.iter().enumerate().map(|(i, s)| {
        let img = render(&s.scene);
        let layout = models.policy.layout(&img, &s.expression).unwrap();
        models.policy.prefix_kv(&params, &layout, &completions[i]).unwrap()
    }).collect();

    let mut opt = AdamW::new();
    let adam = AdamHyper::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut orng = Rng::new(3);
    let mut cursor = usize::MAX;
    for step in 0..600 {
        params.zero_grads();
        for _ in 0..16 {
            if cursor >= order.len() { orng.shuffle(&mut order); cursor = 0; }
            let idx = order[cursor]; cursor += 1;
            let s = &samples[idx];
            let gt: Vec<f32> = s.gt_box.iter().map(|&v| v as f32 / 32.0).collect();
            let mut tape = Tape::<f32>::new();
            let q = models.bridge.queries_var(&mut tape, &params);
            let qp = models.policy.extract_context_from_kv(&mut tape, &params, &kvs[idx], q).unwrap();
            // mean over queries then linear head to 4 coords
            let w = tape.param("probe/w", params.get("probe/w"));
            let b = tape.param("probe/b", params.get("probe/b"));
            let coords = tape.matmul(qp, w);
            let coords = tape.add_row(coords, b); // [M, 4]
            let gtv = tape.constant_f32(1, 4, &gt);
            let gt_rep = tape.concat_rows(&vec![gtv; cfg.model.queries]);
            let diff = tape.sub(coords, gt_rep);
            let sq = tape.mul(diff, diff);
            let loss = tape.mean(sq);
            let scaled = tape.scale(loss, 1.0 / 16.0);
            tape.backward(scaled).unwrap();
            tape.apply_param_grads(&mut params);
        }
        opt.step(&mut params, 2e-3, &adam).unwrap();
        if step % 150 == 0 || step == 599 {
            let mut iou = 0.0;
            let mut n = 0.0;
            for (idx, s) in samples.iter().enumerate().take(96) {
                let mut tape = Tape::<f32>::new();
                let q = models.bridge.queries_var(&mut tape, &params);
                let qp = models.policy.extract_context_from_kv(&mut tape, &params, &kvs[idx], q).unwrap();
                let w = tape.param("probe/w", params.get("probe/w"));
                let b = tape.param("probe/b", params.get("probe/b"));
                let coords = tape.matmul(qp, w);
                let coords = tape.add_row(coords, b);
                let v = tape.value(coords);
                let m = cfg.model.queries;
                let mut mean = [0.0f32; 4];
                for r in 0..m { for c in 0..4 { mean[c] += v[r*4+c]; } }
                let pred: Vec<i64> = mean.iter().map(|x| ((x / m as f32) * 32.0).round() as i64).collect();
                let pb = [pred[0].clamp(0,32), pred[1].clamp(0,32), pred[2].clamp(0,32), pred[3].clamp(0,32)];
                if pb[0] < pb[2] && pb[1] < pb[3] {
                    iou += box_iou(pb, s.gt_box);
                }
                n += 1.0;
            }
            println!("step {step}: probe box iou {:.3}", iou / n);
        }
    }
}
