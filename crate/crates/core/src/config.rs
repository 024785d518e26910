//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitKind, SplitPlan};
use crate::error::{Error, Result};
use crate::model::{GnnKind, ModelConfig, Variant};
use crate::solver::{Method, SolveSpec};
use crate::train::TrainConfig;

/// Everything a `train` run needs, minus the node count (read from data).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub data: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub channels: usize,
    pub out_channels: usize,
    pub interval_minutes: f64,
    pub input_len: usize,
    pub horizon: usize,
    pub dim_h: usize,
    pub dim_z: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub sig_depth: usize,
    pub subpath_len: usize,
    pub logsig_substeps: usize,
    pub variant: Variant,
    pub gnn_kind: GnnKind,
    pub solver: Method,
    pub steps_per_window: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub split: SplitKind,
    pub ratios: [f64; 3],
    pub folds: usize,
    pub drop_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            data: None,
            adjacency: None,
            channels: 1,
            out_channels: 1,
            interval_minutes: 5.0,
            input_len: 12,
            horizon: 12,
            dim_h: 64,
            dim_z: 64,
            num_layers: 1,
            embed_dim: 2,
            sig_depth: 2,
            subpath_len: 2,
            logsig_substeps: 4,
            variant: Variant::Full,
            gnn_kind: GnnKind::Adaptive,
            solver: Method::Rk4,
            steps_per_window: 1,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-3,
            patience: 15,
            seed: 0,
            split: SplitKind::Chronological,
            ratios: [6.0, 2.0, 2.0],
            folds: 4,
            drop_rate: 0.0,
        }
    }
}

/// Bundled configurations: a desk-scale synthetic one and the best settings
/// reported for each PeMS benchmark.
pub const PRESETS: &[(&str, &str)] = &[
    ("synth", include_str!("../presets/synth.conf")),
    ("pemsd3", include_str!("../presets/pemsd3.conf")),
    ("pemsd4", include_str!("../presets/pemsd4.conf")),
    ("pemsd7", include_str!("../presets/pemsd7.conf")),
    ("pemsd8", include_str!("../presets/pemsd8.conf")),
    ("pemsd7m", include_str!("../presets/pemsd7m.conf")),
    ("pemsd7l", include_str!("../presets/pemsd7l.conf")),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("unknown preset '{name}' ({})", names.join("|")))
            })?;
        Self::parse_str(text)
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are rejected.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got '{line}'"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    /// Loads a file; relative data paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data, &mut cfg.adjacency].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "name" => self.name = value.to_string(),
            "data" => self.data = opt_path(value),
            "adjacency" => self.adjacency = opt_path(value),
            "channels" => self.channels = parse(key, value)?,
            "out_channels" => self.out_channels = parse(key, value)?,
            "interval_minutes" => self.interval_minutes = parse(key, value)?,
            "input_len" => self.input_len = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "hidden" => {
                self.dim_h = parse(key, value)?;
                self.dim_z = self.dim_h;
            }
            "dim_h" => self.dim_h = parse(key, value)?,
            "dim_z" => self.dim_z = parse(key, value)?,
            "num_layers" => self.num_layers = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "sig_depth" => self.sig_depth = parse(key, value)?,
            "subpath_len" => self.subpath_len = parse(key, value)?,
            "logsig_substeps" => self.logsig_substeps = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "gnn_kind" => self.gnn_kind = value.parse()?,
            "solver" => self.solver = value.parse()?,
            "steps_per_window" => self.steps_per_window = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "split" => self.split = value.parse()?,
            "ratios" => {
                let parts: Vec<f64> = value
                    .split(':')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.ratios = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("ratios need three parts, got '{value}'")))?;
            }
            "folds" => self.folds = parse(key, value)?,
            "drop_rate" => self.drop_rate = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Every key with its resolved value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let r = &self.ratios;
        vec![
            ("name", self.name.clone()),
            ("data", path(&self.data)),
            ("adjacency", path(&self.adjacency)),
            ("channels", self.channels.to_string()),
            ("out_channels", self.out_channels.to_string()),
            ("interval_minutes", self.interval_minutes.to_string()),
            ("input_len", self.input_len.to_string()),
            ("horizon", self.horizon.to_string()),
            ("dim_h", self.dim_h.to_string()),
            ("dim_z", self.dim_z.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("sig_depth", self.sig_depth.to_string()),
            ("subpath_len", self.subpath_len.to_string()),
            ("logsig_substeps", self.logsig_substeps.to_string()),
            ("variant", self.variant.to_string()),
            ("gnn_kind", self.gnn_kind.to_string()),
            ("solver", self.solver.to_string()),
            ("steps_per_window", self.steps_per_window.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("split", self.split.to_string()),
            ("ratios", format!("{}:{}:{}", r[0], r[1], r[2])),
            ("folds", self.folds.to_string()),
            ("drop_rate", self.drop_rate.to_string()),
        ]
    }

    /// Fully resolved config text; parses back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Rejects inconsistent settings before any data is touched.
    pub fn validate(&self) -> Result<()> {
        self.model_config(1).validate()?;
        self.train_config().validate()?;
        self.solve_spec().validate()?;
        self.split_plan().validate()?;
        if self.input_len < 2 {
            return Err(Error::Config("input_len must be at least 2".into()));
        }
        if self.subpath_len > self.input_len - 1 {
            return Err(Error::Config(format!(
                "subpath_len {} exceeds the {} intervals of a window",
                self.subpath_len,
                self.input_len - 1
            )));
        }
        if self.logsig_substeps == 0 {
            return Err(Error::Config("logsig_substeps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("drop_rate {} outside [0, 1)", self.drop_rate)));
        }
        if self.gnn_kind.needs_external_graph() && self.variant != Variant::TemporalOnly && self.adjacency.is_none() {
            return Err(Error::Config(format!("gnn_kind {} needs an adjacency file", self.gnn_kind)));
        }
        Ok(())
    }

    pub fn model_config(&self, num_nodes: usize) -> ModelConfig {
        ModelConfig {
            num_nodes,
            in_channels: self.channels,
            horizon: self.horizon,
            out_channels: self.out_channels,
            dim_h: self.dim_h,
            dim_z: self.dim_z,
            num_layers: self.num_layers,
            embed_dim: self.embed_dim,
            sig_depth: self.sig_depth,
            subpath_len: self.subpath_len,
            variant: self.variant,
            gnn_kind: self.gnn_kind,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn solve_spec(&self) -> SolveSpec {
        SolveSpec {
            method: self.solver,
            steps_per_window: self.steps_per_window,
        }
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            kind: self.split,
            ratios: self.ratios,
            folds: self.folds,
        }
    }
}
