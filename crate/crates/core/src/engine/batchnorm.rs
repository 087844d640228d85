use super::params::ParamSet;
use super::tape::{BatchStats, Mode, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Exponential moving averages of per-feature batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    /// `running = momentum·running + (1-momentum)·batch`, using the unbiased
    /// batch variance.
    pub fn update(&mut self, stats: &BatchStats, momentum: f64) {
        let n = stats.count as f64;
        let unbias = n / (n - 1.0);
        for j in 0..self.mean.len() {
            self.mean[j] = momentum * self.mean[j] + (1.0 - momentum) * stats.mean[j];
            self.var[j] = momentum * self.var[j] + (1.0 - momentum) * stats.var[j] * unbias;
        }
    }
}

/// Self-contained batch-normalization layer state.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::full(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running: RunningStats::new(features),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            mode: Mode::Train,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.gamma.len();
        if self.beta.len() != f || self.running.mean.len() != f || self.running.var.len() != f {
            return Err(Error::Dimension(
                "batch norm parameters disagree on the feature count".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.momentum == 0.0 {
            return Err(Error::Config(format!("momentum {} outside (0, 1)", self.momentum)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.running.var.iter().any(|v| *v <= 0.0) {
            return Err(Error::Numerical("running variance must stay positive".into()));
        }
        Ok(())
    }

    /// Normalizes `input` and, in train mode, folds the batch statistics into
    /// the running averages. Gamma and beta are recorded as trainable leaves;
    /// their handles are returned alongside the output.
    pub fn forward(&mut self, tape: &mut Tape, input: Var) -> Result<(Var, Var, Var)> {
        self.validate()?;
        let gamma = tape.param(self.gamma.clone());
        let beta = tape.param(self.beta.clone());
        let out = match self.mode {
            Mode::Train => {
                let (out, stats) = tape.batch_norm_train(input, gamma, beta, self.epsilon)?;
                self.running.update(&stats, self.momentum);
                out
            }
            Mode::Eval => tape.batch_norm_eval(
                input,
                gamma,
                beta,
                &self.running.mean,
                &self.running.var,
                self.epsilon,
            )?,
        };
        Ok((out, gamma, beta))
    }

    pub fn to_params(&self, prefix: &str, out: &mut ParamSet) {
        out.insert(format!("{prefix}.gamma"), self.gamma.clone());
        out.insert(format!("{prefix}.beta"), self.beta.clone());
    }
}
