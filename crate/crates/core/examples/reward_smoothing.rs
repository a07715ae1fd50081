//! Gaussian reward smoothing of a sparse episode.

use gawm::smoothing::{smooth_rewards, smoothing_kernel, SmoothingConfig};

fn main() -> anyhow::Result<()> {
    let kernel = smoothing_kernel(2, 1.0)?;
    println!("kernel H=2 sigma=1: {kernel:.6?}");

    let raw = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    for (h, sigma) in [(0, 1.0), (1, 1.0), (2, 1.0), (2, 2.0)] {
        let cfg = SmoothingConfig {
            half_window: h,
            sigma,
            enabled: true,
        };
        let s = smooth_rewards(&raw, &cfg)?;
        println!("H={h} sigma={sigma}: {s:.3?} (sum {:.3})", s.iter().sum::<f64>());
    }
    Ok(())
}
