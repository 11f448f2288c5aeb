//! Times training steps on the 4-block reference configuration.
//!
//! Run with: cargo run --release --example train_speed -- [steps]

use bip_core::model::{Model, ModelConfig};
use bip_core::tensor::ActivationKind;
use bip_core::textgen::synthetic_corpus;
use bip_core::train::{train, TrainConfig};

fn main() {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let cfg = ModelConfig::new(64, 4, 128, 4, ActivationKind::Gelu)
        .unwrap()
        .with_prenorm(true);
    let corpus = synthetic_corpus(0, 200_000);
    let tc = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let t = std::time::Instant::now();
    let out = train(Model::init(&cfg, 1).unwrap(), &corpus, &tc).unwrap();
    let el = t.elapsed().as_secs_f64();
    println!(
        "{steps} steps in {el:.2}s ({:.1} ms/step), loss {:.3} -> {:.3}",
        el * 1e3 / steps as f64,
        out.log[0].loss,
        out.log.last().unwrap().loss
    );
}
