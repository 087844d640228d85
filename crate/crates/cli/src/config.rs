//! Flat `key = value` run configuration.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use corrmcnn::data::SyntheticSpec;
use corrmcnn::model::{apply_override, build_preset, canonical_text, ArchitectureSpec, LossWeights, SPEC_KEYS};

/// Invalid configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn from_core(e: corrmcnn::Error) -> anyhow::Error {
    match e {
        corrmcnn::Error::Config(m) | corrmcnn::Error::Usage(m) | corrmcnn::Error::Dimension(m) => bad(m),
        other => other.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    Mnist,
    Synthetic,
}

impl Dataset {
    fn name(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Synthetic => "synthetic",
        }
    }
}

/// Run keys in snapshot order. Architecture keys follow them.
pub const RUN_KEYS: [&str; 17] = [
    "preset",
    "dataset",
    "data_dir",
    "out_dir",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "desk_scale",
    "desk_train_size",
    "eval_folds",
    "synth_n",
    "synth_test_n",
    "synth_rho",
    "synth_noise",
    "synth_tolerance",
    "log_every",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: String,
    pub dataset: Dataset,
    /// Falls back to `CRL_DATA_DIR`, then `data/mnist`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub desk_scale: bool,
    pub desk_train_size: usize,
    pub eval_folds: usize,
    pub synth_n: usize,
    pub synth_test_n: usize,
    pub synth_rho: Vec<f64>,
    pub synth_noise: f64,
    pub synth_tolerance: f64,
    /// Progress lines on stderr every this many epochs; 0 silences them.
    pub log_every: usize,
    /// Architecture and loss-weight overrides in the order given.
    pub overrides: Vec<(String, String)>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(format!("{key} = {value:?} is not a valid value")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(format!("{key} = {value:?} is not a boolean"))),
    }
}

fn parse_rho(value: &str) -> Result<Vec<f64>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']').trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|v| parse::<f64>("synth_rho", v.trim())).collect()
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Builds a configuration from a file's pairs followed by `--set`
    /// overrides; later values win.
    pub fn from_pairs(file: &[(String, String)], sets: &[(String, String)]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (k, _) in file {
            if !seen.insert(k.as_str()) {
                return Err(bad(format!("key {k:?} appears twice in the configuration file")));
            }
        }
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (k, v) in file.iter().chain(sets) {
            if let Some(slot) = pairs.iter_mut().find(|(pk, _)| pk == k) {
                slot.1 = v.clone();
            } else {
                pairs.push((k.clone(), v.clone()));
            }
        }
        let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());

        let preset = get("preset").unwrap_or("mnist-arc1").to_string();
        let dataset = match get("dataset") {
            Some("mnist") => Dataset::Mnist,
            Some("synthetic") => Dataset::Synthetic,
            Some(other) => return Err(bad(format!("dataset = {other:?}; expected mnist or synthetic"))),
            None if preset.starts_with("synthetic") => Dataset::Synthetic,
            None => Dataset::Mnist,
        };
        let seed = get("seed")
            .ok_or_else(|| bad("seed is mandatory; add `seed = <integer>`"))
            .and_then(|v| parse("seed", v))?;
        let mut cfg = RunConfig {
            out_dir: PathBuf::from(format!("runs/{preset}")),
            preset,
            dataset,
            data_dir: None,
            seed,
            epochs: 25,
            batch_size: 100,
            lr: 1e-3,
            desk_scale: false,
            desk_train_size: 10_000,
            eval_folds: 5,
            synth_n: 10_000,
            synth_test_n: 2_000,
            synth_rho: vec![0.9, 0.5],
            synth_noise: 1.0,
            synth_tolerance: 0.05,
            log_every: 1,
            overrides: Vec::new(),
        };
        for (k, v) in &pairs {
            let v = v.as_str();
            match k.as_str() {
                "preset" | "dataset" | "seed" => {}
                "data_dir" => cfg.data_dir = Some(PathBuf::from(v)),
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "epochs" => cfg.epochs = parse(k, v)?,
                "batch_size" => cfg.batch_size = parse(k, v)?,
                "lr" => cfg.lr = parse(k, v)?,
                "desk_scale" => cfg.desk_scale = parse_bool(k, v)?,
                "desk_train_size" => cfg.desk_train_size = parse(k, v)?,
                "eval_folds" => cfg.eval_folds = parse(k, v)?,
                "synth_n" => cfg.synth_n = parse(k, v)?,
                "synth_test_n" => cfg.synth_test_n = parse(k, v)?,
                "synth_rho" => cfg.synth_rho = parse_rho(v)?,
                "synth_noise" => cfg.synth_noise = parse(k, v)?,
                "synth_tolerance" => cfg.synth_tolerance = parse(k, v)?,
                "log_every" => cfg.log_every = parse(k, v)?,
                key if SPEC_KEYS.contains(&key) => cfg.overrides.push((k.clone(), v.to_string())),
                key => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(bad(format!("lr = {} must be a finite non-negative number", cfg.lr)));
        }
        cfg.architecture()?;
        if cfg.dataset == Dataset::Synthetic {
            cfg.synthetic_spec(0, 0)?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        let sets = sets
            .iter()
            .map(|s| {
                s.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| bad(format!("--set expects KEY=VALUE, got {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(&file, &sets)
    }

    /// The preset with all overrides applied and validated.
    pub fn architecture(&self) -> Result<(ArchitectureSpec, LossWeights)> {
        let (mut spec, mut weights) = build_preset(&self.preset).map_err(from_core)?;
        for (k, v) in &self.overrides {
            apply_override(&mut spec, &mut weights, k, v).map_err(from_core)?;
        }
        spec.validate(&weights).map_err(from_core)?;
        Ok((spec, weights))
    }

    /// Planted-correlation spec sized to the architecture's views.
    pub fn synthetic_spec(&self, n: usize, seed: u64) -> Result<SyntheticSpec> {
        let (spec, _) = self.architecture()?;
        let s = SyntheticSpec {
            n: n.max(1),
            d1: spec.view_dim(0),
            d2: spec.view_dim(1),
            rho: self.synth_rho.clone(),
            noise_sigma: self.synth_noise,
            seed,
        };
        s.validate().map_err(from_core)?;
        Ok(s)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os("CRL_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }

    /// Every run key followed by the resolved architecture; loading this text
    /// reproduces the run.
    pub fn snapshot(&self) -> Result<String> {
        let mut s = String::new();
        let rho = self.synth_rho.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>().join(",");
        let data_dir = self.data_dir.as_ref().map_or(String::new(), |d| d.display().to_string());
        for key in RUN_KEYS {
            let value = match key {
                "preset" => self.preset.clone(),
                "dataset" => self.dataset.name().into(),
                "data_dir" if data_dir.is_empty() => continue,
                "data_dir" => data_dir.clone(),
                "out_dir" => self.out_dir.display().to_string(),
                "seed" => self.seed.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => format!("{:?}", self.lr),
                "desk_scale" => self.desk_scale.to_string(),
                "desk_train_size" => self.desk_train_size.to_string(),
                "eval_folds" => self.eval_folds.to_string(),
                "synth_n" => self.synth_n.to_string(),
                "synth_test_n" => self.synth_test_n.to_string(),
                "synth_rho" => format!("[{rho}]"),
                "synth_noise" => format!("{:?}", self.synth_noise),
                "synth_tolerance" => format!("{:?}", self.synth_tolerance),
                "log_every" => self.log_every.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        let (spec, weights) = self.architecture()?;
        s.push_str(&canonical_text(&spec, &weights));
        Ok(s)
    }
}
