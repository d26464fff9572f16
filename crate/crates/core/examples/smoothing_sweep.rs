//! Gaussian smoothing of input-layer IxG and IntGrad maps: mean GridPG
//! localization per kernel size.
//!
//! cargo run --release --example smoothing_sweep -- [out-dir] [grids]

use attrib_bench::attributions::{attribute_many, smooth, Method};
use attrib_bench::config::RunConfig;
use attrib_bench::grid::{ExplainTarget, Setting};
use attrib_bench::metrics::{localization_score, summarize};
use attrib_bench::model::SplitPoint;
use attrib_bench::pipeline::{grids_for, prepare};

const KERNELS: [usize; 6] = [1, 5, 9, 17, 33, 73];

fn main() -> attrib_bench::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let cfg = RunConfig { out_dir: args.next().unwrap_or("attrib-bench-out".into()).into(), ..RunConfig::default() };
    let n = args.next().map_or(30, |s| s.parse().expect("grid count"));
    let prep = prepare(&cfg)?;
    let methods = [Method::IxG, Method::IntGrad];
    let mut scores = vec![vec![Vec::new(); KERNELS.len()]; methods.len()];
    for g in grids_for(&cfg, &prep.pool, Setting::GridPg, n)? {
        let t = ExplainTarget::for_sample(&prep.model, &g, SplitPoint::Input, 0)?;
        for (i, a) in attribute_many(&methods, &t, &cfg.attribution, 0)?.iter().enumerate() {
            for (j, &k) in KERNELS.iter().enumerate() {
                scores[i][j].extend(localization_score(&smooth(&a.values, k)?, &g.cell_boxes()[0])?);
            }
        }
    }
    print!("{:<8}", "K");
    KERNELS.iter().for_each(|k| print!("{k:>7}"));
    println!();
    for (m, row) in methods.iter().zip(&scores) {
        print!("{:<8}", m.to_string());
        row.iter().for_each(|s| print!("{:>7.3}", summarize(s).map_or(f64::NAN, |x| x.mean)));
        println!();
    }
    Ok(())
}
