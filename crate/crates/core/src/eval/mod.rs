//! Sum correlation, closed-form CCA, cross-view transfer accuracy and
//! reconstruction images.

mod cca;
mod classifier;
mod correlation;
mod recon;
mod transfer;

use std::fmt::Write as _;

use serde::Serialize;

pub use cca::{cca_closed_form, Cca, DEFAULT_REG};
pub use classifier::{accuracy, standardizer, train_linear_classifier, ClassifierConfig, LinearClassifier};
pub use correlation::{column_correlations, masked_projections, sum_correlation_metric, CorrelationReport};
pub use recon::{emit_reconstructions, encode_pgm, file_names, quantize};
pub use transfer::{fold_partition, transfer_learning_eval, Direction, TransferResult};

use crate::data::MultiViewDataset;
use crate::error::{Error, Result};
use crate::model::{digest, Model};

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub folds: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Accuracy {
    pub accuracy: f64,
    pub folds: Vec<f64>,
}

impl From<TransferResult> for Accuracy {
    fn from(r: TransferResult) -> Self {
        Self {
            accuracy: r.accuracy,
            folds: r.folds,
        }
    }
}

/// Evaluation results. Serialized key names are stable; run time is kept
/// out of the report so reruns are byte-identical.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub n_test: usize,
    pub joint_dim: usize,
    pub sum_correlation: f64,
    pub per_dimension_correlations: Vec<f64>,
    pub degenerate_dimensions: Vec<usize>,
    pub transfer_l2r: Option<Accuracy>,
    pub transfer_r2l: Option<Accuracy>,
    /// Mean of the two same-view accuracies.
    pub single_view: Option<f64>,
    pub single_view_left: Option<Accuracy>,
    pub single_view_right: Option<Accuracy>,
    pub folds: usize,
    pub config_digest: String,
}

/// Sum correlation on `data`, plus all transfer directions when it is
/// labeled.
pub fn evaluate(model: &Model, data: &MultiViewDataset, opts: &EvalOptions) -> Result<EvalReport> {
    if data.len() < 2 {
        return Err(Error::Config("evaluation needs at least 2 samples".into()));
    }
    let (hx, hy) = masked_projections(model, data)?;
    let corr = column_correlations(&hx, &hy)?;
    let mut report = EvalReport {
        dataset: data.name.clone(),
        n_test: data.len(),
        joint_dim: model.spec.joint_dim,
        sum_correlation: corr.sum,
        per_dimension_correlations: corr.per_dimension,
        degenerate_dimensions: corr.degenerate,
        transfer_l2r: None,
        transfer_r2l: None,
        single_view: None,
        single_view_left: None,
        single_view_right: None,
        folds: opts.folds,
        config_digest: digest(&model.spec, &model.weights),
    };
    if let Some(labels) = &data.labels {
        let run = |d| transfer_learning_eval([&hx, &hy], labels, d, opts.folds, opts.seed, &opts.classifier);
        let l2r = run(Direction::LeftToRight)?;
        let r2l = run(Direction::RightToLeft)?;
        let left = run(Direction::SingleLeft)?;
        let right = run(Direction::SingleRight)?;
        report.single_view = Some((left.accuracy + right.accuracy) / 2.0);
        report.transfer_l2r = Some(l2r.into());
        report.transfer_r2l = Some(r2l.into());
        report.single_view_left = Some(left.into());
        report.single_view_right = Some(right.into());
    }
    Ok(report)
}

fn pct(a: &Option<Accuracy>) -> String {
    a.as_ref()
        .map_or_else(|| "n/a".into(), |a| format!("{:.2}%", 100.0 * a.accuracy))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset               {}", self.dataset);
        let _ = writeln!(s, "test samples          {}", self.n_test);
        let _ = writeln!(
            s,
            "sum correlation       {:.4} / {}",
            self.sum_correlation, self.joint_dim
        );
        if !self.degenerate_dimensions.is_empty() {
            let _ = writeln!(s, "degenerate dims       {:?}", self.degenerate_dimensions);
        }
        let _ = writeln!(s, "transfer l2r          {}", pct(&self.transfer_l2r));
        let _ = writeln!(s, "transfer r2l          {}", pct(&self.transfer_r2l));
        let _ = writeln!(s, "single view (left)    {}", pct(&self.single_view_left));
        let _ = writeln!(s, "single view (right)   {}", pct(&self.single_view_right));
        let _ = writeln!(s, "folds                 {}", self.folds);
        let _ = writeln!(s, "architecture digest   {}", self.config_digest);
        s
    }
}
