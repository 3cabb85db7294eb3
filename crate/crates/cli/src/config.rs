//! Run configuration: a TOML or JSON file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use ragcn::gradcheck::GradcheckConfig;
use ragcn::occlusion::OcclusionSpec;
use ragcn::stgcn::{LayerSpec, StgcnConfig, STANDARD_PLAN};
use ragcn::train::TrainConfig;
use ragcn::{Error, GraphDef, Result};
use serde::{Deserialize, Serialize};

/// Named layer plans. `standard` is the ten-layer network; the smaller ones
/// keep CPU runs short.
pub fn plan_preset(name: &str) -> Result<Vec<LayerSpec>> {
    let plan: &[(usize, usize, usize)] = match name {
        "standard" => &STANDARD_PLAN,
        "desk" => &[(9, 16, 1), (16, 16, 1), (16, 32, 2), (32, 32, 1)],
        "micro" => &[(9, 8, 1), (8, 8, 2)],
        other => return Err(Error::Config(format!("unknown plan {other:?} (standard, desk, micro)"))),
    };
    Ok(plan
        .iter()
        .map(|&(in_channels, out_channels, stride)| LayerSpec { in_channels, out_channels, stride })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub joints_per_class: usize,
    pub frames: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { classes: 4, per_class: 10, joints_per_class: 3, frames: 32, noise: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Graph definition file; the built-in NTU RGB+D skeleton when absent.
    pub graph: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub val_dataset: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub streams: usize,
    pub dmax: usize,
    pub window: usize,
    pub plan: String,
    /// Explicit layer list; takes precedence over `plan`.
    pub layers: Option<Vec<LayerSpec>>,
    pub dropout: f64,
    pub seed: u64,
    pub train: TrainConfig,
    pub occlusion: Vec<OcclusionSpec>,
    pub synth: SynthConfig,
    pub gradcheck: GradcheckConfig,
    pub cam_samples: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            graph: None,
            dataset: None,
            val_dataset: None,
            checkpoints: Vec::new(),
            streams: 3,
            dmax: 2,
            window: 5,
            plan: "standard".into(),
            layers: None,
            dropout: 0.5,
            seed: 0,
            train: TrainConfig::default(),
            occlusion: Vec::new(),
            synth: SynthConfig::default(),
            gradcheck: GradcheckConfig::default(),
            cam_samples: 4,
            out: None,
        }
    }
}

impl RunConfig {
    /// Reads a TOML or JSON config, or the `config` section of a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        if is_json {
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let inner = match value.get("config") {
                Some(cfg) if value.get("command").is_some() => cfg.clone(),
                _ => value,
            };
            Ok(serde_json::from_value(inner)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.streams == 0 {
            return Err(Error::Config("streams must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.train.validate()?;
        self.network_config(1)?.validate()
    }

    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        match &self.layers {
            Some(layers) => Ok(layers.clone()),
            None => plan_preset(&self.plan),
        }
    }

    pub fn network_config(&self, num_classes: usize) -> Result<StgcnConfig> {
        let plan: Vec<(usize, usize, usize)> =
            self.layers()?.iter().map(|l| (l.in_channels, l.out_channels, l.stride)).collect();
        let mut cfg = StgcnConfig::from_plan(num_classes, self.dmax, self.window, &plan);
        cfg.dropout = self.dropout;
        Ok(cfg)
    }

    pub fn graph_def(&self) -> Result<GraphDef> {
        match &self.graph {
            Some(path) => GraphDef::load(path),
            None => Ok(GraphDef::ntu_rgbd()),
        }
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| Error::Usage("this command needs --dataset".into()))
    }
}
