//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use crate::error::{Error, Result};

/// One evaluation of the function under test.
pub struct Probe {
    pub loss: f64,
    /// Analytic gradients; only requested at the base point.
    pub grads: Option<ParamSet>,
    /// Branch fingerprint (see [`super::Tape::kink_signature`]). Perturbations
    /// that change it straddle a kink and are resampled.
    pub signature: u64,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error of near-zero entries.
    pub floor: f64,
    /// Entries probed per parameter tensor; `None` checks every entry.
    pub entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            floor: 1e-6,
            entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub skipped_at_kinks: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients from `f` with central differences
/// `(f(θ+h) - f(θ-h)) / 2h` entry by entry.
pub fn gradient_check<F>(mut f: F, params: &ParamSet, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet, bool) -> Result<Probe>,
{
    let base = f(params, true)?;
    let again = f(params, false)?;
    if base.loss.to_bits() != again.loss.to_bits() || base.signature != again.signature {
        return Err(Error::Usage(format!(
            "gradient check aborted: objective is not deterministic ({} vs {}); \
             freeze dropout seeds or use eval mode",
            base.loss, again.loss
        )));
    }
    let analytic = base
        .grads
        .ok_or_else(|| Error::Usage("objective returned no gradients at the base point".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_error: 0.0,
        passed: true,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).map_or(0, |t| t.len());
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Usage(format!("no analytic gradient for {name}")))?
            .clone();
        let want = config.entries_per_param.unwrap_or(len).min(len);
        // Candidate order: a seeded permutation, so kink hits fall through to
        // fresh entries.
        let order: Vec<usize> = sample(&mut rng, len, len).into_vec();
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            skipped_at_kinks: 0,
            max_rel_error: 0.0,
            passed: true,
        };
        for idx in order {
            if check.checked == want {
                break;
            }
            let orig = params.get(&name).expect("name from params").data()[idx];
            work.get_mut(&name).expect("cloned").data_mut()[idx] = orig + config.step;
            let plus = f(&work, false)?;
            work.get_mut(&name).expect("cloned").data_mut()[idx] = orig - config.step;
            let minus = f(&work, false)?;
            work.get_mut(&name).expect("cloned").data_mut()[idx] = orig;
            if plus.signature != base.signature || minus.signature != base.signature {
                check.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * config.step);
            let err = relative_error(grad.data()[idx], numeric, config.floor);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        check.passed = check.max_rel_error < config.tolerance && (check.checked > 0 || len == 0);
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.passed &= check.passed;
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Tape, Tensor};

    fn quadratic(params: &ParamSet, want: bool) -> Result<Probe> {
        let mut tape = Tape::new();
        let w = tape.param(params.get("w").unwrap().clone());
        let target = tape.constant(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let loss = tape.mse(w, target)?;
        let grads = if want {
            let g = tape.backward(loss)?;
            let mut out = ParamSet::new();
            out.insert("w", g.get(w).unwrap().clone());
            Some(out)
        } else {
            None
        };
        Ok(Probe {
            loss: tape.value(loss).item(),
            grads,
            signature: tape.kink_signature(),
        })
    }

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(&[3], vec![1.0, 2.0, -3.0]).unwrap());
        let report = gradient_check(quadratic, &p, &GradCheckConfig::default()).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn nondeterministic_objective_is_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0));
        let mut calls = 0.0;
        let res = gradient_check(
            |_, _| {
                calls += 1.0;
                Ok(Probe {
                    loss: calls,
                    grads: Some(ParamSet::new()),
                    signature: 0,
                })
            },
            &p,
            &GradCheckConfig::default(),
        );
        assert!(matches!(res, Err(Error::Usage(_))));
    }

    #[test]
    fn wrong_gradient_fails() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.5));
        let report = gradient_check(
            |ps, want| {
                let w = ps.get("w").unwrap().item();
                let mut g = ParamSet::new();
                g.insert("w", Tensor::scalar(3.0 * w));
                Ok(Probe {
                    loss: w * w,
                    grads: want.then_some(g),
                    signature: 0,
                })
            },
            &p,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed);
    }
}
