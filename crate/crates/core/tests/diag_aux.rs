//! Temporary diagnostic: did the auxiliary grounding head itself learn to
//! regress boxes from the hidden states?

use lens_core::numerics::Tape;
use lens_core::pipeline::{build_models, Checkpoint, RunConfig};
use lens_core::policy::completion_target_tokens;
use lens_core::rewards::box_iou;
use lens_core::synthworld::{build_split, render};

#[test]
#[ignore]
fn aux_head_accuracy() {
    let mut cfg = RunConfig::default();
    cfg.world.train_size = 512;
    let models = build_models(&cfg);
    let samples = build_split(&cfg.world, 42, "train", 512).unwrap();
    let ck = Checkpoint::load(std::path::Path::new("/tmp/pilot/expo/bootstrap.ckpt"), None, true).unwrap();
    let params = ck.params;
    for (head, stream_name) in [("aux/w", "final"), ("aux/w_mid", "pre_last")] {
        let mut iou = 0.0;
        let mut n = 0.0;
        for s in samples.iter().take(96) {
            let img = render(&s.scene);
            let layout = models.policy.layout(&img, &s.expression).unwrap();
            let target = models.policy.vocab
                .tokenize(&completion_target_tokens(&s.cot_target, s.gt_box)).unwrap();
            let mut tape = Tape::<f32>::new();
            let (hidden, pre_last) = models.policy
                .forward_hidden_full(&mut tape, &params, &layout, &target, None, None).unwrap();
            let stream = if stream_name == "final" { hidden } else { pre_last };
            let rows = tape.row_slice(stream, layout.len() - 1, layout.len());
            let w = tape.param(head, params.get(head));
            let b = tape.param("aux/b", params.get("aux/b"));
            let pred = tape.matmul(rows, w);
            let pred = tape.add_row(pred, b);
            let v = tape.value(pred);
            let pb: Vec<i64> = v.iter().map(|x| (x * 32.0).round() as i64).collect();
            let pb = [pb[0].clamp(0, 32), pb[1].clamp(0, 32), pb[2].clamp(0, 32), pb[3].clamp(0, 32)];
            if pb[0] < pb[2] && pb[1] < pb[3] {
                iou += box_iou(pb, s.gt_box);
            }
            n += 1.0;
        }
        println!("{stream_name} head box iou: {:.3}", iou / n);
    }
}
