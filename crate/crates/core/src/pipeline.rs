//! The benchmark stages and the artifacts they pass along.
//!
//! Every stage reads its inputs from the output directory, validates them,
//! and writes its own artifacts there together with the resolved config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attributions::{attribute_many, smooth, to_image_space, MapArchive, MapEntry, MapKind, MapSidecar};
use crate::binio::derive_seed;
use crate::config::{RunConfig, ScoreKey};
use crate::dataset::{self, Dataset, LabeledImage, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::grid::{self, ExplainTarget, GridSample, Setting};
use crate::metrics::{aggatt, localization_score, spearman, summarize, ScoredMap, Summary, FLAG_NO_POSITIVE_MASS};
use crate::model::{train, ModelGraph, SplitPoint};
use crate::render;
use crate::tensor::Tensor;

pub const SCORES_HEADER: &str = "sample_id,method,layer,setting,target_cell,loc_score,flag";
const CONFIDENT_VERSION: u32 = 1;
const REPORT_VERSION: u32 = 1;

/// File layout of one output directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.ads")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.atbn")
    }
    pub fn confident(&self) -> PathBuf {
        self.root.join("confident.json")
    }
    pub fn grids(&self, setting: Setting) -> PathBuf {
        self.root.join(format!("grids_{setting}.jsonl"))
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }
    pub fn maps_dir(&self) -> PathBuf {
        self.root.join("maps")
    }
    /// Archive of one score column, named so that it survives any file system.
    pub fn map_archive(&self, key: &ScoreKey) -> PathBuf {
        self.maps_dir().join(format!("{}.amap", file_stem(key)))
    }
    pub fn aggatt_dir(&self) -> PathBuf {
        self.root.join("aggatt")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}

/// `gridpg/S-IxG:K=73/input` becomes `gridpg_S-IxG-K73_input`.
pub fn file_stem(key: &ScoreKey) -> String {
    let kind: String = key
        .kind
        .to_string()
        .replace(":K=", "-K")
        .chars()
        .map(|c| if c == '+' { 'p' } else { c })
        .collect();
    format!("{}_{kind}_{}", key.setting, key.layer)
}

/// Sidecar path for artifacts whose own format has no room for provenance.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_meta(path: &Path, cfg: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({ "config": cfg.echo(), "details": extra });
    std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), producer })
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Runs `f` on a pool of `jobs` workers.
fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

pub fn gen_data(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let out = Artifacts::new(&cfg.out_dir);
    ensure_dir(&out.root)?;
    let mut data = dataset::generate(derive_seed(cfg.seed, "data", 0), cfg.data.n_train, cfg.data.n_eval)?;
    data.manifest.meta = serde_json::to_string(&cfg.echo())?;
    data.save(&out.dataset())?;
    log::info!("wrote {} train and {} eval images to {}", data.train.len(), data.eval.len(), out.dataset().display());
    Ok(data)
}

pub fn train_model(cfg: &RunConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let out = Artifacts::new(&cfg.out_dir);
    let data = Dataset::load(&out.dataset())?;
    let seed = derive_seed(cfg.seed, "model", 0);
    let tc = cfg.model.train_config(seed);
    let mut model = ModelGraph::build(cfg.model.variant, seed);
    let jobs = cfg.resolved_jobs();
    let report = with_pool(jobs, || train(&mut model, &data, &tc))??;
    log::info!(
        "trained {:?} model: train accuracy {:.4}, eval accuracy {:.4}",
        cfg.model.variant,
        report.train_accuracy,
        report.eval_accuracy
    );
    model.meta.config = cfg.echo();
    model.save(&out.model())?;
    Ok(model)
}

/// The confident-pool manifest: eval images the model classifies with high
/// confidence, by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidentManifest {
    pub version: u32,
    pub threshold: f64,
    pub sample_ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub per_class: BTreeMap<String, usize>,
    pub starved_classes: Vec<usize>,
    pub config: serde_json::Value,
}

impl ConfidentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        require(path, "filter")?;
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.version != CONFIDENT_VERSION {
            return Err(Error::Version(format!("confident pool version {}, this build reads {CONFIDENT_VERSION}", m.version)));
        }
        if m.sample_ids.len() != m.labels.len() || m.sample_ids.len() != m.confidences.len() {
            return Err(Error::Format("confident pool columns differ in length".into()));
        }
        Ok(m)
    }

    /// Resolves the pool against the dataset it was filtered from.
    pub fn images(&self, data: &Dataset) -> Result<Vec<LabeledImage>> {
        self.sample_ids
            .iter()
            .zip(&self.labels)
            .map(|(&id, &label)| {
                let img = data
                    .eval_by_id(id)
                    .ok_or_else(|| Error::Format(format!("confident pool names image {id}, absent from the dataset")))?;
                if img.label != label {
                    return Err(Error::Format(format!("confident pool labels image {id} as {label}, dataset says {}", img.label)));
                }
                Ok(img.clone())
            })
            .collect()
    }
}

pub fn filter(cfg: &RunConfig) -> Result<ConfidentManifest> {
    cfg.validate()?;
    let out = Artifacts::new(&cfg.out_dir);
    let data = Dataset::load(&out.dataset())?;
    require(&out.model(), "train")?;
    let model = ModelGraph::load(&out.model())?;
    let pool = with_pool(cfg.resolved_jobs(), || model.filter_confident(&data, cfg.filter.threshold))??;
    let manifest = ConfidentManifest {
        version: CONFIDENT_VERSION,
        threshold: pool.threshold,
        sample_ids: pool.images.iter().map(|i| i.sample_id).collect(),
        labels: pool.images.iter().map(|i| i.label).collect(),
        confidences: pool.confidences,
        per_class: CLASS_NAMES.iter().zip(&pool.per_class).map(|(n, &c)| (n.to_string(), c)).collect(),
        starved_classes: pool.starved_classes,
        config: cfg.echo(),
    };
    std::fs::write(out.confident(), serde_json::to_string_pretty(&manifest)? + "\n")?;
    log::info!("{} of {} eval images pass confidence {}", manifest.sample_ids.len(), data.eval.len(), cfg.filter.threshold);
    Ok(manifest)
}

/// Dataset, trained model and confident pool of an output directory.
pub struct Prepared {
    pub data: Dataset,
    pub model: ModelGraph,
    pub pool: Vec<LabeledImage>,
}

/// Loads the upstream artifacts, producing whichever are missing.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let out = Artifacts::new(&cfg.out_dir);
    if !out.dataset().exists() {
        gen_data(cfg)?;
    }
    if !out.model().exists() {
        train_model(cfg)?;
    }
    if !out.confident().exists() {
        filter(cfg)?;
    }
    let data = Dataset::load(&out.dataset())?;
    let model = ModelGraph::load(&out.model())?;
    let pool = ConfidentManifest::load(&out.confident())?.images(&data)?;
    Ok(Prepared { data, model, pool })
}

/// The grids `eval` scores for one setting.
pub fn grids_for(cfg: &RunConfig, pool: &[LabeledImage], setting: Setting, count: usize) -> Result<Vec<GridSample>> {
    grid::build_grids(pool, setting, count, derive_seed(cfg.seed, "grids", 0))
}

/// One line of the scores CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub sample_id: u64,
    pub kind: MapKind,
    pub layer: SplitPoint,
    pub setting: Setting,
    pub target_cell: usize,
    pub loc_score: Option<f64>,
    pub flags: Vec<String>,
}

impl ScoreRow {
    pub fn key(&self) -> ScoreKey {
        ScoreKey { setting: self.setting, kind: self.kind, layer: self.layer }
    }

    fn csv_line(&self) -> String {
        let score = self.loc_score.map(|s| s.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.sample_id,
            self.kind,
            self.layer,
            self.setting,
            self.target_cell,
            score,
            self.flags.join("|")
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("scores.csv line {lineno}: {what}"));
        let f: Vec<&str> = line.split(',').collect();
        let [id, kind, layer, setting, cell, score, flag] = f[..] else {
            return Err(bad("expected 7 fields"));
        };
        Ok(Self {
            sample_id: id.parse().map_err(|_| bad("sample_id"))?,
            kind: kind.parse().map_err(|_| bad("method"))?,
            layer: layer.parse().map_err(|_| bad("layer"))?,
            setting: setting.parse().map_err(|_| bad("setting"))?,
            target_cell: cell.parse().map_err(|_| bad("target_cell"))?,
            loc_score: if score.is_empty() { None } else { Some(score.parse().map_err(|_| bad("loc_score"))?) },
            flags: if flag.is_empty() { Vec::new() } else { flag.split('|').map(str::to_string).collect() },
        })
    }
}

pub fn write_scores(rows: &[ScoreRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(SCORES_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn read_scores(text: &str) -> Result<Vec<ScoreRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SCORES_HEADER) {
        return Err(Error::Format(format!("scores.csv must start with `{SCORES_HEADER}`")));
    }
    lines.enumerate().filter(|(_, l)| !l.is_empty()).map(|(i, l)| ScoreRow::parse(l, i + 2)).collect()
}

/// Scores and archived maps of one grid.
struct GridResult {
    rows: Vec<ScoreRow>,
    maps: Vec<(ScoreKey, MapEntry, Tensor)>,
}

/// Every method at every layer on one grid.
fn evaluate_grid(
    cfg: &RunConfig,
    model: &ModelGraph,
    grid: &GridSample,
    layers: &[SplitPoint],
    methods: &[crate::attributions::Method],
    keep: &dyn Fn(&ScoreKey) -> bool,
) -> Result<GridResult> {
    let cell = cfg.eval.target_cell;
    let boxes = grid.cell_boxes();
    let size = grid.size();
    let mut out = GridResult { rows: Vec::new(), maps: Vec::new() };
    for &layer in layers {
        let target = ExplainTarget::for_sample(model, grid, layer, cell)?;
        let seed = derive_seed(cfg.seed, &format!("rise/{}/{layer}", grid.setting), grid.sample_id);
        let attrs = attribute_many(methods, &target, &cfg.attribution, seed)?;
        for attr in attrs {
            let smoothings = if attr.method.smoothable() { cfg.smoothing_for(layer) } else { &[] };
            let variants = std::iter::once(None).chain(smoothings.iter().map(|&k| Some(k)));
            for smoothing in variants {
                let kind = MapKind { method: attr.method, smoothing };
                let split_map = match smoothing {
                    None => attr.values.clone(),
                    Some(k) => smooth(&attr.values, k)?,
                };
                let map = to_image_space(&split_map, size, grid.setting)?;
                let loc_score = localization_score(&map, &boxes[cell])?;
                let mut flags: Vec<String> = attr.flags.iter().map(|f| f.to_string()).collect();
                if loc_score.is_none() {
                    flags.push(FLAG_NO_POSITIVE_MASS.to_string());
                }
                let row = ScoreRow {
                    sample_id: grid.sample_id,
                    kind,
                    layer,
                    setting: grid.setting,
                    target_cell: cell,
                    loc_score,
                    flags,
                };
                let key = row.key();
                if keep(&key) {
                    let entry = MapEntry {
                        sample_id: grid.sample_id,
                        method: kind.to_string(),
                        layer,
                        setting: grid.setting,
                        target_cell: cell,
                        target_class: grid.cell_labels[cell],
                        loc_score,
                        flags: row.flags.clone(),
                    };
                    out.maps.push((key, entry, map));
                }
                out.rows.push(row);
            }
        }
    }
    Ok(out)
}

/// Summary of an `eval` run.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub rows: Vec<ScoreRow>,
    pub archives: Vec<ScoreKey>,
}

/// Builds the grids and scores every configured method, layer and setting.
pub fn eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    cfg.validate()?;
    let out = Artifacts::new(&cfg.out_dir);
    let data = Dataset::load(&out.dataset())?;
    require(&out.model(), "train")?;
    let model = ModelGraph::load(&out.model())?;
    let pool = ConfidentManifest::load(&out.confident())?.images(&data)?;
    let (settings, layers, methods) = (cfg.settings()?, cfg.layers()?, cfg.methods()?);
    let selectors = cfg.save_selectors()?;
    let keep = |k: &ScoreKey| selectors.iter().any(|s| s.matches(k));
    let jobs = cfg.resolved_jobs();

    let mut rows = Vec::new();
    let mut archived: BTreeMap<ScoreKey, (Vec<MapEntry>, Vec<Tensor>)> = BTreeMap::new();
    let mut grid_size = 0;
    for &setting in &settings {
        let grids = grids_for(cfg, &pool, setting, cfg.eval.grids)?;
        let path = out.grids(setting);
        std::fs::write(&path, grid::write_manifest(&grids)?)?;
        write_meta(&path, cfg, serde_json::json!({ "setting": setting, "grids": grids.len() }))?;
        grid_size = grids[0].size();

        let started = std::time::Instant::now();
        // Ordered collect: results come back in grid order whatever the pool size.
        let results: Vec<GridResult> = with_pool(jobs, || {
            grids.par_iter().map(|g| evaluate_grid(cfg, &model, g, &layers, &methods, &keep)).collect::<Result<_>>()
        })??;
        log::info!("{setting}: {} grids in {:.1}s", grids.len(), started.elapsed().as_secs_f64());
        for r in results {
            rows.extend(r.rows);
            for (key, entry, map) in r.maps {
                let slot = archived.entry(key).or_default();
                slot.0.push(entry);
                slot.1.push(map);
            }
        }
    }

    std::fs::write(out.scores(), write_scores(&rows))?;
    write_meta(&out.scores(), cfg, serde_json::json!({ "rows": rows.len() }))?;
    ensure_dir(&out.maps_dir())?;
    for (key, (entries, maps)) in &archived {
        let archive = MapArchive {
            sidecar: MapSidecar { height: grid_size, width: grid_size, entries: entries.clone(), config: cfg.echo() },
            maps: maps.clone(),
        };
        archive.save(&out.map_archive(key))?;
    }
    Ok(EvalOutcome { rows, archives: archived.into_keys().collect() })
}

/// Index entry of one AggAtt panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub key: String,
    pub dir: String,
    pub panel: Option<crate::metrics::AggAttPanel>,
    pub skipped: Option<String>,
}

/// Renders one panel per archived map column: a PNG per bin plus a montage.
pub fn aggatt_panels(cfg: &RunConfig) -> Result<Vec<PanelRecord>> {
    cfg.validate()?;
    let out = Artifacts::new(&cfg.out_dir);
    let dir = out.maps_dir();
    require(&dir, "eval")?;
    let mut archives: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "amap"))
        .collect();
    archives.sort();
    if archives.is_empty() {
        return Err(Error::MissingArtifact { path: dir, producer: "eval" });
    }
    ensure_dir(&out.aggatt_dir())?;
    let mut index = Vec::new();
    for path in archives {
        let archive = MapArchive::load(&path)?;
        let Some(first) = archive.sidecar.entries.first() else { continue };
        let key = ScoreKey { setting: first.setting, kind: first.method.parse()?, layer: first.layer };
        let stem = file_stem(&key);
        let records: Vec<ScoredMap> = archive
            .sidecar
            .entries
            .iter()
            .zip(&archive.maps)
            .filter_map(|(e, m)| e.loc_score.map(|score| ScoredMap { sample_id: e.sample_id, score, map: m.clone() }))
            .collect();
        let panel = match aggatt(&records, &cfg.aggatt.edges) {
            Ok(p) => p,
            Err(e @ (Error::Starved(_) | Error::InvalidArgument(_))) => {
                log::warn!("{key}: no AggAtt panel ({e})");
                index.push(PanelRecord { key: key.to_string(), dir: stem, panel: None, skipped: Some(e.to_string()) });
                continue;
            }
            Err(e) => return Err(e),
        };
        let panel_dir = out.aggatt_dir().join(&stem);
        ensure_dir(&panel_dir)?;
        let mut images = Vec::with_capacity(panel.bins.len());
        for (i, bin) in panel.bins.iter().enumerate() {
            let img = render::render_map(bin.mean_map.as_ref().expect("aggatt fills mean maps"))?;
            let name = format!("bin{i}_{}-{}.png", bin.lower_percent, bin.upper_percent);
            render::save_png(&img, &panel_dir.join(name))?;
            images.push(img);
        }
        render::save_png(&render::montage(&images), &panel_dir.join("montage.png"))?;
        let excluded = archive.sidecar.entries.len() - records.len();
        let panel = crate::metrics::AggAttPanel { excluded: panel.excluded + excluded, ..panel };
        let json = serde_json::json!({ "key": key.to_string(), "panel": panel, "config": cfg.echo() });
        std::fs::write(panel_dir.join("panel.json"), serde_json::to_string_pretty(&json)? + "\n")?;
        index.push(PanelRecord { key: key.to_string(), dir: stem, panel: Some(panel), skipped: None });
    }
    let json = serde_json::json!({ "panels": index, "config": cfg.echo() });
    std::fs::write(out.aggatt_dir().join("index.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    Ok(index)
}

/// Score statistics of one method, layer and setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub layer: SplitPoint,
    pub setting: Setting,
    pub summary: Option<Summary>,
    /// Rows without a score (no positive mass).
    pub excluded: usize,
    pub flags: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub a: String,
    pub b: String,
    /// Samples scored under both.
    pub n: usize,
    pub rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub rows: Vec<ReportRow>,
    pub correlations: Vec<Correlation>,
    pub config: serde_json::Value,
}

impl Report {
    pub fn row(&self, key: &ScoreKey) -> Option<&ReportRow> {
        let method = key.kind.to_string();
        self.rows.iter().find(|r| r.method == method && r.layer == key.layer && r.setting == key.setting)
    }
}

/// Aggregates score rows into per-column statistics and rank correlations.
pub fn build_report(cfg: &RunConfig, rows: &[ScoreRow]) -> Result<Report> {
    let mut groups: BTreeMap<ScoreKey, Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.key()).or_default().push(r);
    }
    let report_rows = groups
        .iter()
        .map(|(key, rs)| {
            let scores: Vec<f64> = rs.iter().filter_map(|r| r.loc_score).collect();
            let mut flags = BTreeMap::new();
            for f in rs.iter().flat_map(|r| &r.flags) {
                *flags.entry(f.clone()).or_insert(0) += 1;
            }
            ReportRow {
                method: key.kind.to_string(),
                layer: key.layer,
                setting: key.setting,
                summary: summarize(&scores),
                excluded: rs.len() - scores.len(),
                flags,
            }
        })
        .collect();
    let mut correlations = Vec::new();
    for [a, b] in cfg.correlation_pairs()? {
        let by_id = |k: &ScoreKey| -> BTreeMap<u64, f64> {
            groups.get(k).map(|rs| rs.iter().filter_map(|r| Some((r.sample_id, r.loc_score?))).collect()).unwrap_or_default()
        };
        let (sa, sb) = (by_id(&a), by_id(&b));
        let ids: Vec<u64> = sa.keys().filter(|id| sb.contains_key(id)).copied().collect();
        let va: Vec<f64> = ids.iter().map(|id| sa[id]).collect();
        let vb: Vec<f64> = ids.iter().map(|id| sb[id]).collect();
        let rho = if ids.len() >= 2 { spearman(&va, &vb)? } else { None };
        correlations.push(Correlation { a: a.to_string(), b: b.to_string(), n: ids.len(), rho });
    }
    Ok(Report { version: REPORT_VERSION, rows: report_rows, correlations, config: cfg.echo() })
}

/// Plain-text table: one block per setting, methods as rows, layers as
/// columns, each cell `median [q1, q3] mean`.
pub fn render_report(report: &Report) -> String {
    let settings: BTreeSet<Setting> = report.rows.iter().map(|r| r.setting).collect();
    let layers: BTreeSet<SplitPoint> = report.rows.iter().map(|r| r.layer).collect();
    let mut methods: Vec<MapKind> = Vec::new();
    for r in &report.rows {
        if let Ok(k) = r.method.parse::<MapKind>() {
            if !methods.contains(&k) {
                methods.push(k);
            }
        }
    }
    methods.sort();
    let width = methods.iter().map(|m| m.to_string().len()).max().unwrap_or(6).max(6);
    const CELL: usize = 30;
    let mut s = String::new();
    for setting in settings {
        let _ = writeln!(s, "== {setting}: localization score, median [q1, q3] mean (N) ==");
        let _ = write!(s, "{:width$}", "method");
        for l in &layers {
            let _ = write!(s, "  {:<CELL$}", l.name());
        }
        s.push('\n');
        for m in &methods {
            let name = m.to_string();
            let cells: Vec<String> = layers
                .iter()
                .map(|&l| {
                    let row = report.rows.iter().find(|r| r.setting == setting && r.layer == l && r.method == name);
                    match row.and_then(|r| r.summary.as_ref().map(|x| (x, r.excluded))) {
                        Some((x, ex)) => {
                            let n = if ex > 0 { format!("{}+{ex}x", x.n) } else { x.n.to_string() };
                            format!("{:.3} [{:.3}, {:.3}] {:.3} ({n})", x.median, x.q1, x.q3, x.mean)
                        }
                        None if row.is_some() => "no positive mass".into(),
                        None => "-".into(),
                    }
                })
                .collect();
            if cells.iter().all(|c| c == "-") {
                continue;
            }
            let _ = write!(s, "{name:width$}");
            for c in cells {
                let _ = write!(s, "  {c:<CELL$}");
            }
            s.push('\n');
        }
        s.push('\n');
    }
    if !report.correlations.is_empty() {
        s.push_str("== Spearman rank correlation of per-sample scores ==\n");
        for c in &report.correlations {
            let rho = c.rho.map(|r| format!("{r:.3}")).unwrap_or_else(|| "undefined".into());
            let _ = writeln!(s, "{} vs {}: rho = {rho} (N = {})", c.a, c.b, c.n);
        }
    }
    s
}

pub fn report(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let out = Artifacts::new(&cfg.out_dir);
    require(&out.scores(), "eval")?;
    let rows = read_scores(&std::fs::read_to_string(out.scores())?)?;
    let report = build_report(cfg, &rows)?;
    std::fs::write(out.report_json(), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(out.report_txt(), render_report(&report))?;
    Ok(report)
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig) -> Result<Report> {
    gen_data(cfg)?;
    train_model(cfg)?;
    filter(cfg)?;
    eval(cfg)?;
    aggatt_panels(cfg)?;
    report(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributions::Method;

    fn row(id: u64, kind: &str, score: Option<f64>) -> ScoreRow {
        ScoreRow {
            sample_id: id,
            kind: kind.parse().unwrap(),
            layer: SplitPoint::Final,
            setting: Setting::GridPg,
            target_cell: 0,
            loc_score: score,
            flags: if score.is_none() { vec![FLAG_NO_POSITIVE_MASS.into()] } else { vec![] },
        }
    }

    #[test]
    fn scores_csv_round_trips_exactly() {
        let rows = vec![row(0, "GradCAM++", Some(0.1 + 0.2)), row(1, "S-IxG:K=9", None), row(2, "RISE", Some(1.0))];
        let text = write_scores(&rows);
        assert!(text.starts_with("sample_id,method,layer,setting,target_cell,loc_score,flag\n"));
        assert!(text.contains("\n1,S-IxG:K=9,final,gridpg,0,,no-positive-mass\n"));
        assert_eq!(read_scores(&text).unwrap(), rows);
        assert!(matches!(read_scores("a,b\n"), Err(Error::Format(_))));
    }

    #[test]
    fn file_stems_are_plain() {
        let key: ScoreKey = "dipart/S-IntGrad:K=73/input".parse().unwrap();
        assert_eq!(file_stem(&key), "dipart_S-IntGrad-K73_input");
        let key = ScoreKey { setting: Setting::GridPg, kind: MapKind::plain(Method::GradCamPp), layer: SplitPoint::Mid };
        assert_eq!(file_stem(&key), "gridpg_GradCAMpp_mid");
    }

    #[test]
    fn report_summarizes_and_correlates() {
        let mut cfg = RunConfig::default();
        cfg.report.correlations = vec![["gridpg/GradCAM/final".into(), "gridpg/LayerCAM/final".into()]];
        let mut rows = Vec::new();
        for i in 0..5u64 {
            rows.push(row(i, "GradCAM", Some(i as f64 / 4.0)));
            rows.push(row(i, "LayerCAM", if i == 4 { None } else { Some(1.0 - i as f64 / 4.0) }));
        }
        let rep = build_report(&cfg, &rows).unwrap();
        let gc = rep.row(&"gridpg/GradCAM/final".parse().unwrap()).unwrap();
        assert_eq!(gc.summary.as_ref().unwrap().median, 0.5);
        let lc = rep.row(&"gridpg/LayerCAM/final".parse().unwrap()).unwrap();
        assert_eq!((lc.excluded, lc.flags[FLAG_NO_POSITIVE_MASS]), (1, 1));
        assert_eq!(rep.correlations[0].n, 4);
        assert_eq!(rep.correlations[0].rho, Some(-1.0));
        let txt = render_report(&rep);
        assert!(txt.contains("== gridpg"));
        assert!(txt.contains("rho = -1.000 (N = 4)"));
    }

    #[test]
    fn stages_name_their_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { out_dir: dir.path().to_path_buf(), ..RunConfig::default() };
        for (result, producer) in [
            (train_model(&cfg).map(|_| ()), "gen-data"),
            (report(&cfg).map(|_| ()), "eval"),
            (aggatt_panels(&cfg).map(|_| ()), "eval"),
        ] {
            match result {
                Err(Error::MissingArtifact { producer: p, .. }) => assert_eq!(p, producer),
                other => panic!("expected a missing-artifact error, got {other:?}"),
            }
        }
    }
}
