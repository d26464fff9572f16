//! A grid whose top-left and bottom-right cells hold the same image: under
//! DiFull only the top-left cell can influence the score, yet GradCAM's
//! channel-pooled weights light up both copies. LayerCAM keeps positional
//! gradients and does not.
//!
//! cargo run --release --example gradcam_repeated_class -- [out-dir] [grids]

use std::collections::BTreeMap;

use attrib_bench::attributions::{attribute_many, to_image_space, Method};
use attrib_bench::config::RunConfig;
use attrib_bench::dataset::LabeledImage;
use attrib_bench::grid::{compose, ExplainTarget, GridSample, Setting};
use attrib_bench::metrics::localization_score;
use attrib_bench::model::SplitPoint;
use attrib_bench::pipeline::{grids_for, prepare};

fn main() -> attrib_bench::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let cfg = RunConfig { out_dir: args.next().unwrap_or("attrib-bench-out".into()).into(), ..RunConfig::default() };
    let n = args.next().map_or(10, |s| s.parse().expect("grid count"));
    let prep = prepare(&cfg)?;
    let by_id: BTreeMap<u64, &LabeledImage> = prep.pool.iter().map(|i| (i.sample_id, i)).collect();

    println!("grid  GradCAM  LayerCAM  (final split, DiFull, twin image in bottom-right)");
    for g in grids_for(&cfg, &prep.pool, Setting::DiFull, n)? {
        let mut ids = g.source_ids;
        ids[3] = ids[0];
        let parts: Vec<&LabeledImage> = ids.iter().map(|id| by_id[id]).collect();
        let twin = GridSample { source_ids: ids, pixels: compose(&parts)?, ..g };
        let t = ExplainTarget::for_sample(&prep.model, &twin, SplitPoint::Final, 0)?;
        let maps = attribute_many(&[Method::GradCam, Method::LayerCam], &t, &cfg.attribution, 0)?;
        let l: Vec<Option<f64>> = maps
            .iter()
            .map(|a| localization_score(&to_image_space(&a.values, twin.size(), twin.setting)?, &twin.cell_boxes()[0]))
            .collect::<attrib_bench::Result<_>>()?;
        println!("{:>4}  {:>7.3}  {:>8.3}", twin.sample_id, l[0].unwrap_or(f64::NAN), l[1].unwrap_or(f64::NAN));
    }
    Ok(())
}
