//! Checks reverse-mode input gradients of the full model against central
//! finite differences, for both architecture variants.
//!
//! cargo run --release --example gradient_check

use attrib_bench::grid::{ExplainTarget, Setting};
use attrib_bench::model::{ModelGraph, SplitPoint, Variant};
use attrib_bench::{BackwardMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> attrib_bench::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    for variant in [Variant::Plain, Variant::BatchNorm] {
        let model = ModelGraph::build(variant, 7);
        let mut worst: f64 = 0.0;
        for _ in 0..3 {
            let x = Tensor::new(vec![3, 32, 32], (0..3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            let class = rng.random_range(0..10);
            // The GridPG score at the input split is exactly the class logit.
            let target = ExplainTarget::new(&model, Setting::GridPg, SplitPoint::Input, &x, 0, class)?;
            let (_, grad) = target.gradient(&x, BackwardMode::Standard)?;
            for _ in 0..50 {
                let i = rng.random_range(0..x.numel());
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                let fd = (model.logits(&xp)?.data()[class] - model.logits(&xm)?.data()[class]) / (2.0 * h);
                let g = grad.data()[i];
                let denom = g.abs().max(fd.abs());
                if denom > 0.0 {
                    worst = worst.max((g - fd).abs() / denom);
                }
            }
        }
        println!("{variant:?}: 150 coordinates, max relative error {worst:.2e}");
    }
    Ok(())
}
