//! One-vs-rest linear max-margin classifier trained by seeded stochastic
//! subgradient descent on the L2-regularized hinge loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub l2: f64,
    pub epochs: usize,
    /// Initial step; the schedule is `lr / (1 + l2·lr·t)`.
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            epochs: 50,
            lr: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearClassifier {
    /// `[features, classes]`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    /// Per-feature standardization fitted on the training features.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub config: ClassifierConfig,
}

/// Per-column mean and inverse standard deviation (1 for constant columns).
pub fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.row_len());
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let scale = var
        .iter()
        .map(|v| {
            let sd = (v / n as f64).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn standardize(row: &[f64], mean: &[f64], scale: &[f64], out: &mut [f64]) {
    for j in 0..row.len() {
        out[j] = (row[j] - mean[j]) * scale[j];
    }
}

pub fn train_linear_classifier(x: &Tensor, labels: &[u8], config: &ClassifierConfig) -> Result<LinearClassifier> {
    if x.rank() != 2 || x.row_len() == 0 {
        return Err(Error::Usage(format!("classifier needs [m, d] features with d > 0, got {:?}", x.shape())));
    }
    let (m, d) = (x.rows(), x.row_len());
    if labels.len() != m {
        return Err(Error::Dimension(format!("{m} feature rows but {} labels", labels.len())));
    }
    let classes = labels.iter().copied().max().map_or(0, |c| c as usize + 1);
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Usage("classifier needs at least two distinct classes".into()));
    }
    if m < classes {
        return Err(Error::Usage(format!("{m} samples for {classes} classes")));
    }
    let (mean, scale) = standardizer(x);
    let mut z = vec![0.0; m * d];
    for (i, row) in x.data().chunks(d).enumerate() {
        standardize(row, &mean, &scale, &mut z[i * d..(i + 1) * d]);
    }
    // w is kept class-major here ([classes, d]) for contiguous updates.
    let mut w = vec![0.0; classes * d];
    let mut b = vec![0.0; classes];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut t = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let eta = config.lr / (1.0 + config.l2 * config.lr * t as f64);
            let shrink = 1.0 - eta * config.l2;
            let xi = &z[i * d..(i + 1) * d];
            for c in 0..classes {
                let wc = &mut w[c * d..(c + 1) * d];
                let yc = if labels[i] as usize == c { 1.0 } else { -1.0 };
                let margin = yc * (wc.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + b[c]);
                wc.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    wc.iter_mut().zip(xi).for_each(|(v, x)| *v += eta * yc * x);
                    b[c] += eta * yc;
                }
            }
            t += 1;
        }
    }
    let weight = Tensor::from_fn(&[d, classes], |k| w[(k % classes) * d + k / classes]);
    Ok(LinearClassifier {
        weight,
        bias: b,
        mean,
        scale,
        config: config.clone(),
    })
}

impl LinearClassifier {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Arg-max class per row; ties go to the lower index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        self.predict_with(x, &self.mean, &self.scale)
    }

    /// Prediction with an explicit standardization.
    pub fn predict_with(&self, x: &Tensor, mean: &[f64], scale: &[f64]) -> Result<Vec<u8>> {
        let d = self.mean.len();
        if x.rank() != 2 || x.row_len() != d || mean.len() != d || scale.len() != d {
            return Err(Error::Dimension(format!(
                "classifier expects [m, {d}] features, got {:?}",
                x.shape()
            )));
        }
        let k = self.classes();
        let w = self.weight.data();
        let mut z = vec![0.0; d];
        let mut out = Vec::with_capacity(x.rows());
        for row in x.data().chunks(d) {
            standardize(row, mean, scale, &mut z);
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..k {
                let s: f64 = (0..d).map(|j| z[j] * w[j * k + c]).sum::<f64>() + self.bias[c];
                if s > best.1 {
                    best = (c, s);
                }
            }
            out.push(best.0 as u8);
        }
        Ok(out)
    }
}

pub fn accuracy(pred: &[u8], truth: &[u8]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}
