use attrib_bench::grid::{ExplainTarget, Setting};
use attrib_bench::model::{ModelGraph, SplitPoint, Variant};
use attrib_bench::{BackwardMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_rel_err(model: &ModelGraph, point: SplitPoint, setting: Setting, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(vec![3, 32, 32], (0..3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let t = ExplainTarget::new(model, setting, point, &x, rng.random_range(0..4), rng.random_range(0..10)).unwrap();
    let a = t.activation.clone();
    let (y, grad) = t.gradient(&a, BackwardMode::Standard).unwrap();
    assert!((y - t.score(&a).unwrap()).abs() <= 1e-12 * y.abs().max(1.0));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let i = rng.random_range(0..a.numel());
        let (mut ap, mut am) = (a.clone(), a.clone());
        ap.data_mut()[i] += h;
        am.data_mut()[i] -= h;
        let fd = (t.score(&ap).unwrap() - t.score(&am).unwrap()) / (2.0 * h);
        let g = grad.data()[i];
        let d = (g - fd).abs();
        if d > 0.0 {
            worst = worst.max(d / g.abs().max(fd.abs()));
        }
    }
    worst
}

#[test]
fn explain_gradients_match_finite_differences() {
    for variant in [Variant::Plain, Variant::BatchNorm] {
        let model = ModelGraph::build(variant, 5);
        for (k, setting) in Setting::ALL.into_iter().enumerate() {
            for point in SplitPoint::ALL {
                let err = max_rel_err(&model, point, setting, 100 + k as u64);
                assert!(err <= 1e-6, "{variant:?} {setting} {point}: relative error {err:.2e}");
            }
        }
    }
}

#[test]
fn guided_gradient_differs_only_by_sign_gating() {
    let model = ModelGraph::build(Variant::Plain, 9);
    let x = Tensor::full(vec![3, 32, 32], 0.25);
    let t = ExplainTarget::new(&model, Setting::GridPg, SplitPoint::Input, &x, 0, 2).unwrap();
    let (y1, g) = t.gradient(&x, BackwardMode::Standard).unwrap();
    let (y2, gg) = t.gradient(&x, BackwardMode::Guided).unwrap();
    assert_eq!(y1, y2);
    assert_eq!(g.shape(), gg.shape());
    assert_ne!(g, gg);
}
