use std::fs;
use std::path::{Path, PathBuf};

use arconv::arconv::{AblationFlags, HWRange, KernelSpec};
use arconv::arnet::{ARNetConfig, LayerSettings, Topology};
use arconv::data::{GenConfig, WaldConfig};
use arconv::gradcheck::CheckConfig;
use arconv::metrics::MetricConfig;
use arconv::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Everything a command needs, as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for data, initialization and batch order.
    pub seed: u64,
    pub data: DataSection,
    pub network: NetworkSection,
    pub training: TrainSection,
    pub metrics: MetricsSection,
    pub heatmap: HeatmapSection,
    pub gradcheck: CheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSection::default(),
            network: NetworkSection::default(),
            training: TrainSection::default(),
            metrics: MetricsSection::default(),
            heatmap: HeatmapSection::default(),
            gradcheck: CheckConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory written by `gen`; generated in memory when null.
    pub path: Option<PathBuf>,
    pub count: usize,
    pub bands: usize,
    pub size: usize,
    pub noise: f64,
    pub blur_sigma: f64,
    pub pan_weights: Vec<f64>,
    /// Trailing samples kept out of training.
    pub holdout: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GenConfig::default();
        DataSection {
            path: None,
            count: g.count,
            bands: g.bands,
            size: g.size,
            noise: g.noise,
            blur_sigma: g.wald.sigma,
            pan_weights: g.wald.pan_weights,
            holdout: 20,
        }
    }
}

impl DataSection {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            count: self.count,
            bands: self.bands,
            size: self.size,
            noise: self.noise,
            wald: WaldConfig {
                sigma: self.blur_sigma,
                pan_weights: self.pan_weights.clone(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub base_channels: usize,
    pub topology: Topology,
    pub extractor_width: usize,
    pub k_max: usize,
    pub fixed_spec: KernelSpec,
    /// Height and width range of every layer.
    pub range: HWRange,
    pub n: Option<f64>,
    pub m: Option<f64>,
    pub ablation: AblationFlags,
    /// Per-layer settings; replaces `range`, `n`, `m` and `ablation`.
    pub layers: Option<Vec<LayerSettings>>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let c = ARNetConfig::new(4);
        NetworkSection {
            base_channels: c.base_channels,
            topology: c.topology,
            extractor_width: c.extractor_width,
            k_max: c.k_max,
            fixed_spec: c.fixed_spec,
            range: HWRange::default(),
            n: None,
            m: None,
            ablation: AblationFlags::default(),
            layers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub explore_epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            epochs: t.epochs,
            explore_epochs: t.explore_epochs,
            lr0: t.lr0,
            decay_factor: t.decay_factor,
            decay_every: t.decay_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub window: usize,
    pub ratio: usize,
    /// Absolute residual mapped to full brightness in residual images.
    pub residual_scale: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let m = MetricConfig::default();
        MetricsSection {
            window: m.window,
            ratio: m.ratio,
            residual_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapSection {
    /// Dataset index to visualize; the first held-out sample when null.
    pub sample: Option<usize>,
    /// Also score the two-object scale study.
    pub study: bool,
    pub large_size: usize,
    pub small_size: usize,
}

impl Default for HeatmapSection {
    fn default() -> Self {
        HeatmapSection {
            sample: None,
            study: true,
            large_size: 28,
            small_size: 6,
        }
    }
}

impl RunConfig {
    pub fn network_config(&self) -> ARNetConfig {
        let n = &self.network;
        let mut c = ARNetConfig::with_topology(self.data.bands, n.topology);
        c.base_channels = n.base_channels;
        c.extractor_width = n.extractor_width;
        c.k_max = n.k_max;
        c.fixed_spec = n.fixed_spec;
        c.seed = self.seed;
        match &n.layers {
            Some(layers) => c.layers = layers.clone(),
            None => {
                for l in &mut c.layers {
                    *l = LayerSettings {
                        range_h: n.range,
                        range_w: n.range,
                        n: n.n,
                        m: n.m,
                        flags: n.ablation,
                    };
                }
            }
        }
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            explore_epochs: t.explore_epochs,
            lr0: t.lr0,
            decay_factor: t.decay_factor,
            decay_every: t.decay_every,
            seed: self.seed,
        }
    }

    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            window: self.metrics.window,
            ratio: self.metrics.ratio,
        }
    }

    /// Cross-section checks; run before any file is touched.
    pub fn validate(&self) -> CliResult<()> {
        let net = self.network_config();
        net.validate()?;
        self.train_config().validate()?;
        self.data.gen_config().validate()?;
        self.metric_config().validate()?;
        self.gradcheck.validate()?;
        let d = &self.data;
        if d.size % net.size_multiple() != 0 {
            return Err(CliError::Config(format!(
                "image size {} must be a multiple of {}",
                d.size,
                net.size_multiple()
            )));
        }
        if !(self.metrics.residual_scale > 0.0) {
            return Err(CliError::Config("metrics.residual_scale must be positive".into()));
        }
        let h = &self.heatmap;
        if h.small_size == 0 || h.small_size >= h.large_size || 2 * h.large_size + 4 > d.size {
            return Err(CliError::Config(format!(
                "heatmap objects {}px and {}px do not fit a {}px scene",
                h.large_size, h.small_size, d.size
            )));
        }
        Ok(())
    }

    /// Read an optional JSON file, then apply `--seed` and `key=value` overrides.
    pub fn load(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> CliResult<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Set `a.b.c=value`; the value is parsed as JSON, falling back to a string.
/// Numeric segments index arrays.
pub fn apply_override(root: &mut Value, item: &str) -> CliResult<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {item:?} is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("malformed key {path:?}")));
    }
    let mut node = root;
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), parsed);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert(Value::Null)
            }
            Value::Array(items) => {
                let i: usize = key
                    .parse()
                    .map_err(|_| CliError::Config(format!("{path}: {key:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(i)
                    .ok_or_else(|| CliError::Config(format!("{path}: index {i} out of range for {len} items")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("{path}: {key:?} is not inside an object"))),
        };
    }
    Ok(())
}
