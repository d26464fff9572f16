//! One method, three layers: the same attribution rule applied at the input,
//! middle and final split of the network, scored on GridPG grids.
//!
//! cargo run --release --example ml_att_layers -- [out-dir] [grids]

use attrib_bench::attributions::{attribute_many, to_image_space, Method};
use attrib_bench::config::RunConfig;
use attrib_bench::grid::{ExplainTarget, Setting};
use attrib_bench::metrics::{localization_score, summarize};
use attrib_bench::model::SplitPoint;
use attrib_bench::pipeline::{grids_for, prepare};

fn main() -> attrib_bench::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let cfg = RunConfig { out_dir: args.next().unwrap_or("attrib-bench-out".into()).into(), ..RunConfig::default() };
    let n = args.next().map_or(20, |s| s.parse().expect("grid count"));
    let prep = prepare(&cfg)?;
    let grids = grids_for(&cfg, &prep.pool, Setting::GridPg, n)?;
    let methods = [Method::Gradient, Method::IxG, Method::GradCam, Method::LayerCam, Method::Occlusion];

    print!("{:<10}", "method");
    SplitPoint::ALL.iter().for_each(|l| print!("{l:>10}"));
    println!();
    let mut table = vec![vec![Vec::new(); SplitPoint::ALL.len()]; methods.len()];
    for g in &grids {
        for (j, &layer) in SplitPoint::ALL.iter().enumerate() {
            let t = ExplainTarget::for_sample(&prep.model, g, layer, 0)?;
            for (i, a) in attribute_many(&methods, &t, &cfg.attribution, g.seed)?.iter().enumerate() {
                table[i][j].extend(localization_score(&to_image_space(&a.values, g.size(), g.setting)?, &g.cell_boxes()[0])?);
            }
        }
    }
    for (m, row) in methods.iter().zip(&table) {
        print!("{m:<10}");
        // n/a: no map of this column had positive mass
        row.iter().for_each(|s| print!("{:>10}", summarize(s).map_or("n/a".into(), |x| format!("{:.3}", x.mean))));
        println!();
    }
    Ok(())
}
