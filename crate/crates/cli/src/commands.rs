use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use corrmcnn::data::{load_mnist, synth_correlated, MultiViewDataset, Split};
use corrmcnn::engine::AdamConfig;
use corrmcnn::eval::{
    cca_closed_form, emit_reconstructions, evaluate, sum_correlation_metric, EvalOptions, EvalReport, DEFAULT_REG,
};
use corrmcnn::model::checkpoint::{self, write_atomic};
use corrmcnn::model::{digest, train_epoch, EpochMetrics, Model, TrainState};

use crate::config::{Dataset, RunConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "train_timing.csv";
pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const LOG_HEADER: &str = "epoch,L1,L2,L3,L4,L5,L6,L7,objective\n";
pub const DEFAULT_COUNT: usize = 8;

pub struct Splits {
    pub train: MultiViewDataset,
    pub test: MultiViewDataset,
}

/// Training and held-out data for the configured dataset. Synthetic data is
/// drawn once and split so both parts share the same planted rotations.
pub fn load_data(cfg: &RunConfig) -> Result<Splits> {
    match cfg.dataset {
        Dataset::Mnist => {
            let dir = cfg.data_dir();
            let mut train = load_mnist(&dir, Split::Train)?;
            if cfg.desk_scale {
                train = train.seeded_subset(cfg.desk_train_size, cfg.seed);
            }
            let test = load_mnist(&dir, Split::Test)?;
            Ok(Splits { train, test })
        }
        Dataset::Synthetic => {
            let spec = cfg.synthetic_spec(cfg.synth_n + cfg.synth_test_n, cfg.seed)?;
            let all = synth_correlated(&spec)?;
            let train_idx: Vec<usize> = (0..cfg.synth_n).collect();
            let test_idx: Vec<usize> = (cfg.synth_n..all.len()).collect();
            Ok(Splits {
                train: all.subset(&train_idx),
                test: all.subset(&test_idx),
            })
        }
    }
}

fn write_metadata(cfg: &RunConfig, command: &str, started: SystemTime, clock: Instant) -> Result<()> {
    let meta = serde_json::json!({
        "command": command,
        "started_unix_seconds": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "runtime_seconds": clock.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let path = cfg.out_dir.join(format!("{command}_metadata.json"));
    write_atomic(&path, format!("{meta:#}\n").as_bytes())?;
    Ok(())
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))
}

pub fn log_line(m: &EpochMetrics) -> String {
    let mut s = m.epoch.to_string();
    for v in m.mean.terms.iter().chain([&m.mean.objective]) {
        let _ = write!(s, ",{v:?}");
    }
    s.push('\n');
    s
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs: Vec<EpochMetrics>,
}

fn fresh_state(cfg: &RunConfig) -> Result<TrainState> {
    let (spec, weights) = cfg.architecture()?;
    let model = Model::new(spec, weights, cfg.seed)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    Ok(TrainState::new(model, adam, cfg.seed))
}

fn train_loop(cfg: &RunConfig, state: &mut TrainState, data: &MultiViewDataset, mut after: impl FnMut(&EpochMetrics, f64) -> Result<()>) -> Result<Vec<EpochMetrics>> {
    let mut out = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let clock = Instant::now();
        let m = train_epoch(state, data, cfg.batch_size)?;
        let secs = clock.elapsed().as_secs_f64();
        if cfg.log_every > 0 && ((m.epoch as usize).is_multiple_of(cfg.log_every) || m.epoch as usize == cfg.epochs) {
            eprintln!(
                "epoch {}/{}  objective {:.6}  ({secs:.1}s)",
                m.epoch, cfg.epochs, m.mean.objective
            );
        }
        after(&m, secs)?;
        out.push(m);
    }
    Ok(out)
}

/// Trains for `epochs` and writes the checkpoint, the loss log, a separate
/// wall-time log and the resolved configuration.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let mut state = fresh_state(cfg)?;
    let data = load_data(cfg)?.train;
    prepare_out_dir(cfg)?;
    write_atomic(&cfg.out_dir.join(CONFIG_SNAPSHOT), cfg.snapshot()?.as_bytes())?;

    let log_path = cfg.out_dir.join(LOG_FILE);
    let timing_path = cfg.out_dir.join(TIMING_FILE);
    let mut log = String::from(LOG_HEADER);
    let mut timing = String::from("epoch,wall_seconds\n");
    write_atomic(&log_path, log.as_bytes())?;
    write_atomic(&timing_path, timing.as_bytes())?;
    let epochs = train_loop(cfg, &mut state, &data, |m, secs| {
        log.push_str(&log_line(m));
        let _ = writeln!(timing, "{},{secs:.3}", m.epoch);
        write_atomic(&log_path, log.as_bytes())?;
        write_atomic(&timing_path, timing.as_bytes())?;
        Ok(())
    })?;

    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&state, &ckpt)?;
    write_metadata(cfg, "train", started, clock)?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        log: log_path,
        epochs,
    })
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<TrainState> {
    let (spec, weights) = cfg.architecture()?;
    let path = path.map_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    Ok(checkpoint::load_matching(&path, &digest(&spec, &weights))?)
}

/// Evaluates a checkpoint on the held-out split and writes the report as a
/// table and as JSON.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let state = load_checkpoint(cfg, checkpoint)?;
    let test = load_data(cfg)?.test;
    let opts = EvalOptions {
        folds: cfg.eval_folds,
        seed: cfg.seed,
        ..EvalOptions::default()
    };
    let report = evaluate(&state.model, &test, &opts)?;
    prepare_out_dir(cfg)?;
    write_atomic(&cfg.out_dir.join("eval_report.txt"), report.to_table().as_bytes())?;
    write_atomic(&cfg.out_dir.join("eval_report.json"), report.to_json().as_bytes())?;
    write_metadata(cfg, "eval", started, clock)?;
    Ok(report)
}

/// Writes original and cross-reconstructed images for the first `count`
/// held-out samples into `out_dir/reconstructions`.
pub fn cmd_reconstruct(cfg: &RunConfig, checkpoint: Option<&Path>, count: usize) -> Result<Vec<PathBuf>> {
    let state = load_checkpoint(cfg, checkpoint)?;
    let test = load_data(cfg)?.test;
    Ok(emit_reconstructions(
        &state.model,
        &test,
        count,
        &cfg.out_dir.join("reconstructions"),
    )?)
}

#[derive(Clone, Debug)]
pub struct SynthCheck {
    pub planted: Vec<f64>,
    pub recovered: Vec<f64>,
    pub learned_initial: f64,
    pub learned: f64,
    pub null_threshold: f64,
    pub cca_passed: bool,
    pub learned_passed: bool,
    pub table: String,
}

impl SynthCheck {
    pub fn passed(&self) -> bool {
        self.cca_passed && self.learned_passed
    }
}

/// Planted correlations versus closed-form CCA recovery versus the held-out
/// sum correlation of a model trained on the same data.
///
/// CCA must recover every planted coefficient within `synth_tolerance`. With
/// nothing planted, the learned held-out sum correlation must stay below
/// `3 * joint_dim / sqrt(n_test)`.
pub fn cmd_synth_check(cfg: &RunConfig) -> Result<SynthCheck> {
    let mut cfg = cfg.clone();
    cfg.dataset = Dataset::Synthetic;
    let splits = load_data(&cfg)?;
    let (d1, d2) = splits.train.dims();
    let k = (cfg.synth_rho.len() + 1).min(d1.min(d2));
    let cca = cca_closed_form(&splits.train.views[0], &splits.train.views[1], DEFAULT_REG, k)?;

    let mut state = fresh_state(&cfg)?;
    let learned_initial = sum_correlation_metric(&state.model, &splits.test)?.sum;
    train_loop(&cfg, &mut state, &splits.train, |_, _| Ok(()))?;
    let learned = sum_correlation_metric(&state.model, &splits.test)?.sum;
    let joint = state.model.spec.joint_dim as f64;
    let null_threshold = 3.0 * joint / (splits.test.len() as f64).sqrt();

    let mut table = String::from("coefficient   planted   recovered   |diff|    status\n");
    let mut cca_passed = true;
    for (i, r) in cca.correlations.iter().enumerate() {
        match cfg.synth_rho.get(i) {
            Some(p) => {
                let diff = (r - p).abs();
                let ok = diff <= cfg.synth_tolerance;
                cca_passed &= ok;
                let _ = writeln!(
                    table,
                    "{i:<13} {p:<9.4} {r:<11.4} {diff:<9.4} {}",
                    if ok { "ok" } else { "FAIL" }
                );
            }
            None => {
                let _ = writeln!(table, "{i:<13} {:<9} {r:<11.4} {:<9} not planted", "-", "-");
            }
        }
    }
    let learned_passed = !cfg.synth_rho.is_empty() || learned.abs() < null_threshold;
    let _ = writeln!(
        table,
        "learned held-out sum correlation {learned:.4} (initial {learned_initial:.4}, null threshold {null_threshold:.4}, {} epochs){}",
        cfg.epochs,
        match (cfg.synth_rho.is_empty(), learned_passed) {
            (false, _) => "",
            (true, true) => " ok",
            (true, false) => " FAIL",
        }
    );
    prepare_out_dir(&cfg)?;
    write_atomic(&cfg.out_dir.join("synth_check.txt"), table.as_bytes())?;
    Ok(SynthCheck {
        planted: cfg.synth_rho.clone(),
        recovered: cca.correlations,
        learned_initial,
        learned,
        null_threshold,
        cca_passed,
        learned_passed,
        table,
    })
}
