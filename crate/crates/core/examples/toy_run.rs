//! Small training run on synthetic pairs; prints loss and PSNR against
//! bicubic. Arguments are `key=value` overrides of the model config plus
//! `steps`, `count`, `test_count`, `size`, and `every`. The test set comes
//! from the next generator seed.

use std::time::Instant;

use glmamba::config::{KvMap, ModelConfig};
use glmamba::data::{gen_synthetic, SyntheticSpec};
use glmamba::pipeline::{evaluate, evaluate_bicubic, mean_psnr, Session};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kv = KvMap::parse(&args.join("\n")).unwrap();
    let mut cfg = ModelConfig {
        channels: 32,
        num_blocks: 2,
        ..Default::default()
    };
    let rest = cfg.apply(&kv).unwrap();
    let get = |k: &str, d: usize| kv.get(k).map_or(d, |v| v.parse().unwrap());
    assert!(rest.iter().all(|k| ["steps", "count", "test_count", "size", "every"].contains(&k.as_str())), "{rest:?}");
    let (steps, every) = (get("steps", 200), get("every", 50));
    let spec = SyntheticSpec {
        count: get("count", 8),
        size: get("size", 32),
        scale: cfg.scale,
        seed: cfg.seed,
        ..Default::default()
    };
    let pairs = gen_synthetic(&spec).unwrap();
    let test = gen_synthetic(&SyntheticSpec {
        count: get("test_count", 8),
        seed: spec.seed + 1,
        ..spec.clone()
    })
    .unwrap();
    let mut s = Session::<f32>::new(&cfg).unwrap();
    let t0 = Instant::now();
    let init = s.dataset_loss(&pairs).unwrap();
    println!("initial dataset loss {:.5}", init.loss);
    s.train(&pairs, steps, |step, l| {
        if step as usize % every == 0 {
            println!("step {step:5} loss {:.5} ({:.0}s)", l.loss, t0.elapsed().as_secs_f64());
        }
    })
    .unwrap();
    let fin = s.dataset_loss(&pairs).unwrap();
    let model = mean_psnr(&evaluate(&s.model, &s.store, &test).unwrap());
    let bic = mean_psnr(&evaluate_bicubic(&test, cfg.scale).unwrap());
    println!(
        "final dataset loss {:.5} (ratio {:.3}); test psnr {model:.2} dB vs bicubic {bic:.2} dB; {:.0}s",
        fin.loss,
        fin.loss / init.loss,
        t0.elapsed().as_secs_f64()
    );
}
