//! Spearman correlation between per-sample GridPG scores of GradCAM at the
//! final split and IntGrad at the input split, before and after smoothing.
//!
//! cargo run --release --example rank_correlation -- [out-dir] [grids]

use attrib_bench::attributions::{attribute, smooth, to_image_space, Method};
use attrib_bench::config::RunConfig;
use attrib_bench::grid::{ExplainTarget, Setting};
use attrib_bench::metrics::{localization_score, spearman};
use attrib_bench::model::SplitPoint;
use attrib_bench::pipeline::{grids_for, prepare};

fn main() -> attrib_bench::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let cfg = RunConfig { out_dir: args.next().unwrap_or("attrib-bench-out".into()).into(), ..RunConfig::default() };
    let n = args.next().map_or(50, |s| s.parse().expect("grid count"));
    let prep = prepare(&cfg)?;

    let (mut cam, mut ig, mut sig) = (Vec::new(), Vec::new(), Vec::new());
    for g in grids_for(&cfg, &prep.pool, Setting::GridPg, n)? {
        let cell = g.cell_boxes()[0];
        let fin = ExplainTarget::for_sample(&prep.model, &g, SplitPoint::Final, 0)?;
        let inp = ExplainTarget::for_sample(&prep.model, &g, SplitPoint::Input, 0)?;
        let c = localization_score(&to_image_space(&attribute(Method::GradCam, &fin, &cfg.attribution, 0)?.values, g.size(), g.setting)?, &cell)?;
        let raw = attribute(Method::IntGrad, &inp, &cfg.attribution, 0)?.values;
        let (i, s) = (localization_score(&raw, &cell)?, localization_score(&smooth(&raw, 73)?, &cell)?);
        if let (Some(c), Some(i), Some(s)) = (c, i, s) {
            cam.push(c);
            ig.push(i);
            sig.push(s);
        }
    }
    let show = |r: Option<f64>| r.map_or("undefined".to_string(), |r| format!("{r:.3}"));
    println!("{} grids scored by all three", cam.len());
    println!("GradCAM/final vs IntGrad/input:        rho = {}", show(spearman(&cam, &ig)?));
    println!("GradCAM/final vs S-IntGrad:K=73/input: rho = {}", show(spearman(&cam, &sig)?));
    Ok(())
}
