//! Disconnected grids: under DiFull each cell is classified separately, so an
//! attribution that leaks outside the target cell is provably unfaithful.
//! Compares backprop methods at the input split with CAM methods at the final
//! split.
//!
//! cargo run --release --example difull_disconnection -- [out-dir] [grids]

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

    let runs = [
        (SplitPoint::Input, vec![Method::Gradient, Method::IxG, Method::IntGrad, Method::GuidedBp, Method::Occlusion]),
        (SplitPoint::Final, vec![Method::GradCam, Method::GradCamPp, Method::LayerCam, Method::ScoreCam]),
    ];
    for setting in [Setting::GridPg, Setting::DiFull] {
        let grids = grids_for(&cfg, &prep.pool, setting, n)?;
        for (layer, methods) in &runs {
            let mut scores = vec![Vec::new(); methods.len()];
            for g in &grids {
                let t = ExplainTarget::for_sample(&prep.model, g, *layer, 0)?;
                for (i, a) in attribute_many(methods, &t, &cfg.attribution, g.seed)?.iter().enumerate() {
                    let map = to_image_space(&a.values, g.size(), g.setting)?;
                    scores[i].extend(localization_score(&map, &g.cell_boxes()[0])?);
                }
            }
            for (m, s) in methods.iter().zip(&scores) {
                let x = summarize(s).expect("scores");
                println!("{setting:>7} {layer:>5} {m:<11} mean {:.3}  min {:.3}", x.mean, s.iter().cloned().fold(1.0, f64::min));
            }
        }
    }
    Ok(())
}
