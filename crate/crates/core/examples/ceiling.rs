//! IoU reachable by a predictor that is perfect on the stride-4 grid.

use cdnet::data::{generate_pair, SynthConfig};
use cdnet::decoder::{predict_mask, DenseLogits};
use cdnet::loss::downsample_gt;
use cdnet::metrics::{accumulate, report, ConfusionCounts};
use cdnet::tensor::Mat;

fn main() -> cdnet::Result<()> {
    let n: u64 = std::env::args()
        .nth(1)
        .map_or(8, |s| s.parse().expect("count"));
    let mut hard = ConfusionCounts::default();
    let mut soft = ConfusionCounts::default();
    for seed in 0..n {
        let pair = generate_pair(&SynthConfig::default().with_seed(seed))?;
        let gt = pair.gt.clone().expect("synthetic pairs carry gt");
        let grid = downsample_gt(&gt)?;
        let (h, w) = (grid.h, grid.w);
        let logits = Mat::from_fn(h * w, 2, |r, c| {
            if (grid.data[r] == 1) == (c == 1) {
                20.0
            } else {
                -20.0
            }
        });
        let pred = predict_mask(&DenseLogits { logits, h, w }, (gt.h, gt.w));
        hard = accumulate(&pred, &gt, hard)?;
        let frac = |r: usize| {
            let (y, x) = (r / w, r % w);
            let mut s = 0.0;
            for dy in 0..4 {
                for dx in 0..4 {
                    s += gt.at(4 * y + dy, 4 * x + dx) as f64;
                }
            }
            (s / 16.0).clamp(1e-6, 1.0 - 1e-6)
        };
        let logits = Mat::from_fn(h * w, 2, |r, c| {
            if c == 1 {
                (frac(r) / (1.0 - frac(r))).ln()
            } else {
                0.0
            }
        });
        let pred = predict_mask(&DenseLogits { logits, h, w }, (gt.h, gt.w));
        soft = accumulate(&pred, &gt, soft)?;
    }
    println!("binary cells: {}", report(&hard)?);
    println!("area fractions: {}", report(&soft)?);
    Ok(())
}
