//! The whole benchmark at reduced scale: dataset, training, confidence
//! filter, all methods on every layer and setting, AggAtt panels and the
//! report.
//!
//! cargo run --release --example end_to_end -- [out-dir] [grids]

use attrib_bench::config::RunConfig;
use attrib_bench::pipeline::{render_report, run_all};

fn main() -> attrib_bench::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig { out_dir: args.next().unwrap_or("attrib-bench-small".into()).into(), ..RunConfig::default() };
    cfg.eval.grids = args.next().map_or(40, |s| s.parse().expect("grid count"));
    let report = run_all(&cfg)?;
    print!("{}", render_report(&report));
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}
