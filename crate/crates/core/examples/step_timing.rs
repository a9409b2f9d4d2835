//! Wall-clock of one training step at the toy-run size.

use std::time::Instant;

use glmamba::config::ModelConfig;
use glmamba::gradcheck::random_tensor;
use glmamba::model::GlMamba;
use glmamba::train::{train_step, Adam, Batch};

fn main() {
    let cfg = ModelConfig {
        channels: 32,
        num_blocks: 2,
        ..Default::default()
    };
    let (m, mut store) = GlMamba::init::<f32>(&cfg).unwrap();
    let mut adam = Adam::new(cfg.lr, &store);
    let b = Batch {
        lr: random_tensor([2, 1, 32, 32], 1, 0.5).cast(),
        reference: random_tensor([2, 1, 64, 64], 2, 0.5).cast(),
        hr: random_tensor([2, 1, 64, 64], 3, 0.5).cast(),
    };
    for _ in 0..5 {
        let t = Instant::now();
        let l = train_step(&m, &mut store, &mut adam, &b).unwrap();
        println!("loss {:.6} in {:.3}s", l.loss, t.elapsed().as_secs_f64());
    }
}
