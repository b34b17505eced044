//! Trains the tiny configuration on a handful of synthetic pairs and prints
//! the training-set IoU after every epoch.
//!
//! ```text
//! cargo run --release -p cdnet-core --example overfit -- [steps] [lr] [pairs] [snap_px] [batch] [encoder_lr_mult] [seed] [grad_clip]
//! ```

use std::time::Instant;

use cdnet::data::{ShapeKind, SynthConfig};
use cdnet::model::ModelConfig;
use cdnet::train::{train_with, RunConfig, SynthData, TrainOptions};

fn main() -> cdnet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(300, |s| s.parse().expect("steps"));
    let lr: f64 = args.get(2).map_or(1e-3, |s| s.parse().expect("lr"));
    let pairs: usize = args.get(3).map_or(8, |s| s.parse().expect("pairs"));
    let snap: usize = args.get(4).map_or(4, |s| s.parse().expect("snap_px"));
    let batch: usize = args.get(5).map_or(4, |s| s.parse().expect("batch"));
    let enc_mult: f64 = args
        .get(6)
        .map_or(0.1, |s| s.parse().expect("encoder_lr_mult"));
    let seed: u64 = args.get(7).map_or(0, |s| s.parse().expect("seed"));
    let clip: Option<f64> = args.get(8).map(|s| s.parse().expect("grad_clip"));

    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny();
    cfg.optim.base_lr = lr;
    cfg.optim.epochs = 10_000;
    cfg.optim.max_steps = Some(steps);
    cfg.optim.augment = false;
    cfg.optim.batch_size = batch;
    cfg.optim.encoder_lr_mult = enc_mult;
    cfg.optim.seed = seed;
    cfg.optim.grad_clip = clip;
    cfg.data.synth = Some(SynthData {
        n_train: pairs,
        n_val: 0,
        pair: SynthConfig {
            shape_kinds: vec![ShapeKind::Rectangle],
            snap_px: snap,
            ..Default::default()
        },
    });
    let t0 = Instant::now();
    let out = train_with(&cfg, &TrainOptions::default())?;
    for row in &out.history {
        println!(
            "epoch {:4} loss {:.4} set {:.4} pixel {:.4} IoU {:.4}",
            row.epoch, row.l_total, row.l_set, row.l_pixel, row.val_iou
        );
    }
    println!("steps {} in {:.1?}", out.steps, t0.elapsed());
    Ok(())
}
