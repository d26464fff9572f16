//! AggAtt: sort GradCAM maps by localization score, average them per
//! percentile bin and write the bins as PNGs plus a montage.
//!
//! cargo run --release --example aggatt_panels -- [out-dir] [grids]

use attrib_bench::attributions::{attribute, to_image_space, Method};
use attrib_bench::config::RunConfig;
use attrib_bench::grid::{ExplainTarget, Setting};
use attrib_bench::metrics::{aggatt, localization_score, ScoredMap, AGGATT_EDGES};
use attrib_bench::model::SplitPoint;
use attrib_bench::pipeline::{grids_for, prepare};
use attrib_bench::render::{montage, render_map, save_png};

fn main() -> attrib_bench::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let cfg = RunConfig { out_dir: args.next().unwrap_or("attrib-bench-out".into()).into(), ..RunConfig::default() };
    let n = args.next().map_or(100, |s| s.parse().expect("grid count"));
    let prep = prepare(&cfg)?;

    let mut records = Vec::new();
    for g in grids_for(&cfg, &prep.pool, Setting::GridPg, n)? {
        let t = ExplainTarget::for_sample(&prep.model, &g, SplitPoint::Final, 0)?;
        let map = to_image_space(&attribute(Method::GradCam, &t, &cfg.attribution, 0)?.values, g.size(), g.setting)?;
        if let Some(score) = localization_score(&map, &g.cell_boxes()[0])? {
            records.push(ScoredMap { sample_id: g.sample_id, score, map });
        }
    }
    let panel = aggatt(&records, &AGGATT_EDGES)?;
    let dir = cfg.out_dir.join("example_aggatt");
    std::fs::create_dir_all(&dir)?;
    let mut images = Vec::new();
    for (i, bin) in panel.bins.iter().enumerate() {
        println!(
            "bin {i} [{}%, {}%): {:>3} maps, mean L {:.3}",
            bin.lower_percent,
            bin.upper_percent,
            bin.sample_ids.len(),
            bin.mean_score
        );
        let img = render_map(bin.mean_map.as_ref().expect("mean map"))?;
        save_png(&img, &dir.join(format!("bin{i}.png")))?;
        images.push(img);
    }
    save_png(&montage(&images), &dir.join("montage.png"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
