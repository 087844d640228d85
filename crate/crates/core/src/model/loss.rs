//! The seven objective terms and their combination.

use super::network::EncodingTrace;
use super::spec::{ArchitectureSpec, LossWeights};
use crate::engine::{Tape, Tensor, Var};
use crate::error::Result;

/// Self reconstruction `MSE(z, g(h(z)))`.
pub fn self_reconstruction(tape: &mut Tape, tr: &EncodingTrace) -> Result<Var> {
    tape.mse(tr.target, tr.recon_both)
}

/// Full reconstruction from the x view alone.
pub fn cross_from_x(tape: &mut Tape, tr: &EncodingTrace) -> Result<Var> {
    tape.mse(tr.target, tr.recon_from_x)
}

/// Full reconstruction from the y view alone.
pub fn cross_from_y(tape: &mut Tape, tr: &EncodingTrace) -> Result<Var> {
    tape.mse(tr.target, tr.recon_from_y)
}

/// `Σ_j MSE(h(x^j), h(y^j))` over encoder steps.
pub fn step_alignment(tape: &mut Tape, tr: &EncodingTrace) -> Result<Var> {
    let mut terms = Vec::new();
    for (a, b) in tr.steps[0].iter().zip(&tr.steps[1]) {
        terms.push((tape.mse(*a, *b)?, 1.0));
    }
    tape.combine(&terms)
}

/// `MSE(g(h(X)), g(h(Y)))`.
pub fn reconstruction_agreement(tape: &mut Tape, tr: &EncodingTrace) -> Result<Var> {
    tape.mse(tr.recon_from_x, tr.recon_from_y)
}

/// `λ · sumcorr(h(X), h(Y))`.
pub fn joint_correlation(tape: &mut Tape, tr: &EncodingTrace, spec: &ArchitectureSpec, w: &LossWeights) -> Result<Var> {
    let c = tape.sum_correlation(tr.joint_x, tr.joint_y, spec.corr_epsilon)?;
    tape.combine(&[(c, w.lambda_final)])
}

/// `Σ_j λ_j · sumcorr(h(x^j), h(y^j)) + λ_dec · sumcorr` of the decoder
/// dense step. Zero (and free of any dependence on the λs) when disabled.
pub fn step_correlation(tape: &mut Tape, tr: &EncodingTrace, spec: &ArchitectureSpec, w: &LossWeights) -> Result<Var> {
    if !spec.use_l7 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::new();
    for ((a, b), lambda) in tr.steps[0].iter().zip(&tr.steps[1]).zip(&w.lambda_encode) {
        terms.push((tape.sum_correlation(*a, *b, spec.corr_epsilon)?, *lambda));
    }
    let dec = tape.sum_correlation(tr.hidden_x, tr.hidden_y, spec.corr_epsilon)?;
    terms.push((dec, w.lambda_decode));
    tape.combine(&terms)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// L1 … L7 in order.
    pub terms: [Var; 7],
    pub objective: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub terms: [f64; 7],
    pub objective: f64,
}

/// `L1 + L2 + L3 + L4 + L5 − (L6 + L7)`.
pub fn total_objective(tape: &mut Tape, terms: &[Var; 7]) -> Result<Var> {
    let signs = [1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0];
    let parts: Vec<(Var, f64)> = terms.iter().copied().zip(signs).collect();
    tape.combine(&parts)
}

pub fn compute(tape: &mut Tape, tr: &EncodingTrace, spec: &ArchitectureSpec, w: &LossWeights) -> Result<LossTerms> {
    let terms = [
        self_reconstruction(tape, tr)?,
        cross_from_x(tape, tr)?,
        cross_from_y(tape, tr)?,
        step_alignment(tape, tr)?,
        reconstruction_agreement(tape, tr)?,
        joint_correlation(tape, tr, spec, w)?,
        step_correlation(tape, tr, spec, w)?,
    ];
    let objective = total_objective(tape, &terms)?;
    Ok(LossTerms { terms, objective })
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            terms: self.terms.map(|v| tape.value(v).item()),
            objective: tape.value(self.objective).item(),
        }
    }
}
