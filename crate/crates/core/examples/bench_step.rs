use std::time::Instant;
use stsx_core::data::{synth_backbone, CorruptionConfig};
use stsx_core::model::{Model, ModelConfig};
use stsx_core::segments::{extract_segments, LabelSequence};
use stsx_core::train::{build_targets, hungarian_match, refinement_loss, Adam, TrainConfig};

fn main() {
    let classes = 6;
    let t_len = 300;
    let gt = LabelSequence((0..t_len).map(|t| (t / 30) % classes).collect());
    let cfg = CorruptionConfig { feature_dim: 64, ..Default::default() };
    let synth = synth_backbone(&gt, classes, &cfg, 0).unwrap();
    let mut model = Model::new(ModelConfig::with_classes(classes)).unwrap();
    let tc = TrainConfig::default();
    let mut adam = Adam::new(&model.params, tc.learning_rate, tc.weight_decay);

    let segments = extract_segments(&synth.init_pred);
    let gt_segments = extract_segments(&gt);
    let m = hungarian_match(&segments, &gt_segments);
    let targets = build_targets(&m, &segments, &gt_segments, classes);
    println!("T={} N={} segments", t_len, segments.len());

    let start = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let mut pass = model.forward_video(&synth.features, &synth.init_pred).unwrap();
        let parts = refinement_loss(
            &mut pass.forward.graph, pass.class_logits, pass.offsets, &targets, 1.0, 1.0,
        ).unwrap();
        pass.forward.graph.backward(parts.total).unwrap();
        let grads = pass.forward.param_grads();
        drop(pass);
        adam.step(&mut model.params, &grads);
    }
    let per_step = start.elapsed().as_secs_f64() / reps as f64;
    println!("per-step: {:.3}s  -> 60 epochs x 20 videos = {:.1}s", per_step, per_step * 1200.0);

    let start = Instant::now();
    let out = model.infer(&synth.features, &synth.init_pred).unwrap();
    println!("infer: {:.3}s, labels {}", start.elapsed().as_secs_f64(), out.labels.len());
}
