//! Generates the synthetic shapes dataset, trains the classifier and keeps the
//! confidently classified evaluation images.
//!
//! cargo run --release --example train_classifier -- [plain|batchnorm] [epochs]

use std::time::Instant;

use attrib_bench::dataset;
use attrib_bench::model::{train, ModelGraph, TrainConfig, Variant};

fn main() -> attrib_bench::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("plain").parse()?;
    let epochs = args.next().map_or(30, |s| s.parse().expect("epochs must be an integer"));

    let data = dataset::generate(0, 1000, 1000)?;
    let mut model = ModelGraph::build(variant, 0);
    let start = Instant::now();
    let report = train(&mut model, &data, &TrainConfig { epochs, ..TrainConfig::default() })?;
    println!(
        "{variant}: train acc {:.4}, eval acc {:.4} in {:.1}s",
        report.train_accuracy,
        report.eval_accuracy,
        start.elapsed().as_secs_f64()
    );
    let pool = model.filter_confident(&data, 0.99)?;
    println!("confident images per class at 0.99: {:?}", pool.per_class);
    Ok(())
}
