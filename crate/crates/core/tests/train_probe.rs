use arc_core::datagen::{generate, split, DatasetConfig};
use arc_core::descriptor::StageSet;
use arc_core::model::{build_smallnet, train, Mode, TrainConfig};
use arc_core::tensor::DType;
use std::time::Instant;

#[test]
fn grid() {
    let cfg = DatasetConfig::default();
    let data = generate(&cfg, 2000).unwrap();
    let (tr, te) = split(data, 0.8, 1).unwrap();
    for (mode, lr, scale, epochs) in [
        (Mode::Static, 0.01, 1.0, 6),
        (Mode::Arc, 0.01, 1.0, 6),
        (Mode::Static, 0.05, 0.1, 6),
    ] {
        let tc = TrainConfig {
            mode,
            arc_stages: StageSet::ALL,
            n: 4,
            epochs,
            learning_rate: lr,
            backbone_lr_scale: scale,
            seed: 7,
            ..TrainConfig::default()
        };
        let mut model = build_smallnet(&tc, DType::F32).unwrap();
        let t0 = Instant::now();
        match train(&mut model, &tr, &te, &tc, |_| {}) {
            Ok(ms) => {
                let accs: Vec<String> = ms.iter().map(|m| format!("{:.2}", m.test_acc)).collect();
                eprintln!("{mode} lr={lr} scale={scale}: test {} loss {:.3} ({:.0}s)", accs.join(" "), ms.last().unwrap().train_loss, t0.elapsed().as_secs_f64());
            }
            Err(e) => eprintln!("{mode} lr={lr} scale={scale}: {e}"),
        }
    }
}
