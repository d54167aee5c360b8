//! Overfits a small model on a handful of generated chairs and reports
//! part accuracy as training progresses.
//!
//! Optional positional arguments:
//!   d_model n_layers n_pc learning_rate epochs mon_branches val_every count
//!
//! e.g. `cargo run --release --example overfit -- 64 3 24 1e-3 200 5 5 16`

use partasm_core::data::{generate, Category, GeneratorSpec};
use partasm_core::model::{AssemblyModel, ModelConfig};
use partasm_core::train::{train_run, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let num = |i: usize, default: f64| -> f64 {
        args.get(i)
            .map(|s| s.parse().expect("numeric argument"))
            .unwrap_or(default)
    };
    let d_model = num(0, 64.0) as usize;
    let n_layers = num(1, 3.0) as usize;
    let n_pc = num(2, 24.0) as usize;
    let learning_rate = num(3, 1e-3);
    let epochs = num(4, 200.0) as usize;
    let mon_branches = num(5, 5.0) as usize;
    let val_every = num(6, 5.0) as usize;
    let count = num(7, 16.0) as usize;

    let spec = GeneratorSpec {
        category: Category::Chair,
        n_pc,
        seed: 601,
    };
    let set = generate(&spec, count).expect("generator");
    let mcfg = ModelConfig {
        d_model,
        n_heads: 4,
        n_layers,
        noise_dim: 8,
        max_parts: 8,
        n_pc,
        head_hidden: d_model,
        use_instance_encoding: true,
    };
    let mut model = AssemblyModel::init(mcfg, 60).expect("init");
    let tcfg = TrainConfig {
        learning_rate,
        epochs,
        batch_size: 8,
        mon_branches,
        seed: 61,
        val_k: 10,
        val_every,
        stop_at_val_pa: Some(90.0),
        ..TrainConfig::default()
    };
    println!(
        "overfitting {count} chairs: d_model {d_model}, {n_layers} layers, {n_pc} pts/part, \
         lr {learning_rate}, {mon_branches} noise branches"
    );
    let t0 = Instant::now();
    let outcome = train_run(&mut model, &set, &set, &tcfg, None).expect("training");
    for e in &outcome.record.epochs {
        match e.val_pa {
            Some(pa) => println!(
                "epoch {:>3}  loss {:>8.4}  PA {:>6.2}  ({} ms)",
                e.epoch, e.train_total, pa, e.wall_ms
            ),
            None => println!(
                "epoch {:>3}  loss {:>8.4}             ({} ms)",
                e.epoch, e.train_total, e.wall_ms
            ),
        }
    }
    println!(
        "best PA {:?} at epoch {:?} after {:.0}s",
        outcome.record.best_val_pa,
        outcome.record.best_epoch,
        t0.elapsed().as_secs_f64()
    );
}
