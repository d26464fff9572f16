//! Run configuration: a sectioned `key = value` file, overridable from the
//! command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attributions::{AttributionConfig, MapKind, Method};
use crate::error::{Error, Result};
use crate::grid::Setting;
use crate::metrics::AGGATT_EDGES;
use crate::model::{Loss, SplitPoint, TrainConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for evaluation; 0 means "use ATTRIB_BENCH_JOBS or 1".
    pub jobs: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
    pub smoothing: SmoothingConfig,
    pub attribution: AttributionConfig,
    pub aggatt: AggAttConfig,
    pub report: ReportConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub loss: Loss,
}

impl ModelConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed,
            loss: self.loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub grids: usize,
    pub settings: Vec<String>,
    pub layers: Vec<String>,
    /// Method names, or `all`.
    pub methods: Vec<String>,
    pub target_cell: usize,
    /// `setting/method/layer` selectors of the maps to archive; `*` matches anything.
    pub save_maps: Vec<String>,
}

/// Gaussian kernel sizes applied to IxG and IntGrad maps, per split layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    pub input: Vec<usize>,
    pub mid: Vec<usize>,
    #[serde(rename = "final")]
    pub final_: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggAttConfig {
    pub edges: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Pairs of `setting/method/layer` whose per-sample scores are rank-correlated.
    pub correlations: Vec<[String; 2]>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("attrib-bench-out"),
            jobs: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            filter: FilterConfig::default(),
            eval: EvalConfig::default(),
            smoothing: SmoothingConfig::default(),
            attribution: AttributionConfig { rise_masks: 100, ..AttributionConfig::default() },
            aggatt: AggAttConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 1000, n_eval: 1000 }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { variant: Variant::Plain, epochs: 30, lr: 0.02, momentum: 0.9, batch_size: 32, loss: Loss::default() }
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { threshold: 0.99 }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grids: 200,
            settings: Setting::ALL.iter().map(|s| s.to_string()).collect(),
            layers: SplitPoint::ALL.iter().map(|s| s.to_string()).collect(),
            methods: vec!["all".into()],
            target_cell: 0,
            save_maps: vec![
                "gridpg/GradCAM/final".into(),
                "gridpg/LayerCAM/final".into(),
                "gridpg/IntGrad/input".into(),
                "gridpg/S-IntGrad:K=73/input".into(),
                "difull/GradCAM/final".into(),
                "dipart/GradCAM/final".into(),
            ],
        }
    }
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { input: vec![9, 33, 73], mid: vec![5], final_: vec![9] }
    }
}

impl Default for AggAttConfig {
    fn default() -> Self {
        Self { edges: AGGATT_EDGES.to_vec() }
    }
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            correlations: vec![
                ["gridpg/GradCAM/final".into(), "gridpg/IntGrad/input".into()],
                ["gridpg/GradCAM/final".into(), "gridpg/S-IntGrad:K=73/input".into()],
            ],
        }
    }
}

/// A `setting/method/layer` triple naming one column of scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScoreKey {
    pub setting: Setting,
    pub kind: MapKind,
    pub layer: SplitPoint,
}

impl std::fmt::Display for ScoreKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.setting, self.kind, self.layer)
    }
}

impl std::str::FromStr for ScoreKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let [setting, kind, layer] = parts[..] else {
            return Err(Error::Config(format!("expected setting/method/layer, got {s:?}")));
        };
        Ok(Self { setting: setting.parse()?, kind: kind.parse()?, layer: layer.parse()? })
    }
}

/// Selector with `*` wildcards over a [`ScoreKey`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapSelector {
    setting: Option<Setting>,
    kind: Option<MapKind>,
    layer: Option<SplitPoint>,
}

impl MapSelector {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let [setting, kind, layer] = parts[..] else {
            return Err(Error::Config(format!("map selector must be setting/method/layer, got {s:?}")));
        };
        let any = |p: &str| p == "*";
        Ok(Self {
            setting: if any(setting) { None } else { Some(setting.parse()?) },
            kind: if any(kind) { None } else { Some(kind.parse()?) },
            layer: if any(layer) { None } else { Some(layer.parse()?) },
        })
    }

    pub fn matches(&self, key: &ScoreKey) -> bool {
        self.setting.is_none_or(|s| s == key.setting)
            && self.kind.is_none_or(|k| k == key.kind)
            && self.layer.is_none_or(|l| l == key.layer)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    /// Loads a config file; a missing path is a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The configuration as embedded in artifacts: everything that can
    /// influence results, plus the code version.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("out_dir");
            o.remove("jobs");
            o.insert("code_version".into(), env!("CARGO_PKG_VERSION").into());
        }
        v
    }

    pub fn settings(&self) -> Result<Vec<Setting>> {
        parse_list(&self.eval.settings, "settings")
    }

    pub fn layers(&self) -> Result<Vec<SplitPoint>> {
        parse_list(&self.eval.layers, "layers")
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        if self.eval.methods.iter().any(|m| m.eq_ignore_ascii_case("all")) {
            return Ok(Method::ALL.to_vec());
        }
        parse_list(&self.eval.methods, "methods")
    }

    pub fn smoothing_for(&self, layer: SplitPoint) -> &[usize] {
        match layer {
            SplitPoint::Input => &self.smoothing.input,
            SplitPoint::Mid => &self.smoothing.mid,
            SplitPoint::Final => &self.smoothing.final_,
        }
    }

    /// Map kinds scored at one layer, in output order.
    pub fn kinds_for(&self, layer: SplitPoint) -> Result<Vec<MapKind>> {
        let mut out = Vec::new();
        for m in self.methods()? {
            out.push(MapKind::plain(m));
            if m.smoothable() {
                out.extend(self.smoothing_for(layer).iter().map(|&k| MapKind { method: m, smoothing: Some(k) }));
            }
        }
        Ok(out)
    }

    pub fn save_selectors(&self) -> Result<Vec<MapSelector>> {
        self.eval.save_maps.iter().map(|s| MapSelector::parse(s)).collect()
    }

    pub fn correlation_pairs(&self) -> Result<Vec<[ScoreKey; 2]>> {
        self.report.correlations.iter().map(|[a, b]| Ok([a.parse()?, b.parse()?])).collect()
    }

    /// Worker count: explicit setting, then ATTRIB_BENCH_JOBS, then 1.
    pub fn resolved_jobs(&self) -> usize {
        if self.jobs > 0 {
            return self.jobs;
        }
        std::env::var("ATTRIB_BENCH_JOBS").ok().and_then(|v| v.parse().ok()).filter(|&j| j > 0).unwrap_or(1)
    }

    /// Checks every name and range before any work starts.
    pub fn validate(&self) -> Result<()> {
        let settings = self.settings()?;
        let layers = self.layers()?;
        let methods = self.methods()?;
        if settings.is_empty() || layers.is_empty() || methods.is_empty() {
            return Err(Error::Config("settings, layers and methods must be nonempty".into()));
        }
        for k in self.smoothing.input.iter().chain(&self.smoothing.mid).chain(&self.smoothing.final_) {
            if k % 2 == 0 {
                return Err(Error::Config(format!("smoothing kernel sizes must be odd, got {k}")));
            }
        }
        if self.eval.target_cell >= crate::grid::NUM_CELLS {
            return Err(Error::Config(format!("target_cell {} is not a cell of a 2x2 grid", self.eval.target_cell)));
        }
        if self.eval.grids == 0 {
            return Err(Error::Config("eval.grids must be positive".into()));
        }
        if !(self.filter.threshold > 0.0 && self.filter.threshold < 1.0) {
            return Err(Error::Config(format!("filter.threshold must be in (0,1), got {}", self.filter.threshold)));
        }
        if self.data.n_train < 10 || self.data.n_eval < 10 {
            return Err(Error::Config("data.n_train and data.n_eval must be at least 10".into()));
        }
        if self.model.epochs == 0 || self.model.batch_size == 0 || !(self.model.lr > 0.0) {
            return Err(Error::Config("model.epochs, model.batch_size and model.lr must be positive".into()));
        }
        self.attribution.validate()?;
        self.save_selectors()?;
        self.correlation_pairs()?;
        let e = &self.aggatt.edges;
        if e.len() < 2 || e[0] != 0.0 || *e.last().unwrap() != 100.0 || e.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("aggatt.edges must rise from 0 to 100, got {e:?}")));
        }
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr<Err = Error> + PartialEq>(items: &[String], what: &str) -> Result<Vec<T>> {
    let mut out: Vec<T> = Vec::new();
    for s in items {
        let v: T = s.trim().parse()?;
        if out.contains(&v) {
            return Err(Error::Config(format!("{what} lists {s:?} twice")));
        }
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.kinds_for(SplitPoint::Input).unwrap().len(), 11 + 2 * 3);
    }

    #[test]
    fn sectioned_file_overrides_defaults() {
        let c = RunConfig::from_toml("seed = 5\n[eval]\ngrids = 20\nmethods = [\"IxG\", \"GradCAM\"]\n[smoothing]\ninput = [1, 9]\n").unwrap();
        assert_eq!((c.seed, c.eval.grids), (5, 20));
        assert_eq!(c.methods().unwrap(), [Method::IxG, Method::GradCam]);
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.kinds_for(SplitPoint::Input).unwrap().iter().map(|k| k.to_string()).collect::<Vec<_>>(), [
            "IxG",
            "S-IxG:K=1",
            "S-IxG:K=9",
            "GradCAM"
        ]);
    }

    #[test]
    fn bad_names_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.eval.layers = vec!["deep".into()];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.smoothing.mid = vec![4];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.eval.save_maps = vec!["gridpg/GradCAM".into()];
        assert!(c.validate().is_err());
    }

    #[test]
    fn selectors_match_wildcards() {
        let key: ScoreKey = "difull/S-IxG:K=9/final".parse().unwrap();
        assert!(MapSelector::parse("*/*/final").unwrap().matches(&key));
        assert!(MapSelector::parse("difull/S-IxG:K=9/*").unwrap().matches(&key));
        assert!(!MapSelector::parse("gridpg/*/*").unwrap().matches(&key));
        assert_eq!(key.to_string(), "difull/S-IxG:K=9/final");
    }
}
