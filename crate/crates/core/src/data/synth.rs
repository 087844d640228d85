//! Two Gaussian views sharing latent factors with planted canonical
//! correlations.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::MultiViewDataset;
use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d1: usize,
    pub d2: usize,
    pub rho: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d1 == 0 || self.d2 == 0 {
            return Err(Error::Config("synthetic n, d1 and d2 must be positive".into()));
        }
        if self.rho.len() > self.d1.min(self.d2) {
            return Err(Error::Config(format!(
                "{} planted correlations exceed min(d1, d2) = {}",
                self.rho.len(),
                self.d1.min(self.d2)
            )));
        }
        if let Some(r) = self.rho.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("rho value {r} outside [0, 1]")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Random `d × d` orthonormal matrix from the QR factor of a Gaussian draw.
fn orthonormal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// In canonical coordinates sample `i` is `a = [s, σ·e₁]`,
/// `b = [ρ∘s + √(1-ρ²)∘u, σ·e₂]` with `s, u, e ~ N(0, I)`; each view is then
/// rotated by its own random orthonormal loading, which leaves canonical
/// correlations unchanged.
pub fn synth_correlated(spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let q1 = orthonormal(spec.d1, &mut rng);
    let q2 = orthonormal(spec.d2, &mut rng);
    let k = spec.rho.len();
    let mut a = DMatrix::<f64>::zeros(spec.n, spec.d1);
    let mut b = DMatrix::<f64>::zeros(spec.n, spec.d2);
    for i in 0..spec.n {
        for (j, &r) in spec.rho.iter().enumerate() {
            let s: f64 = StandardNormal.sample(&mut rng);
            let u: f64 = StandardNormal.sample(&mut rng);
            a[(i, j)] = s;
            b[(i, j)] = r * s + (1.0 - r * r).sqrt() * u;
        }
        for j in k..spec.d1 {
            let e: f64 = StandardNormal.sample(&mut rng);
            a[(i, j)] = spec.noise_sigma * e;
        }
        for j in k..spec.d2 {
            let e: f64 = StandardNormal.sample(&mut rng);
            b[(i, j)] = spec.noise_sigma * e;
        }
    }
    let to_tensor = |m: DMatrix<f64>| -> Result<Tensor> {
        let (r, c) = m.shape();
        // nalgebra is column-major; transpose to get row-major storage.
        Tensor::new(&[r, c], m.transpose().as_slice().to_vec())
    };
    let x = to_tensor(a * q1.transpose())?;
    let y = to_tensor(b * q2.transpose())?;
    let rho = spec.rho.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>().join(",");
    MultiViewDataset::new(
        format!(
            "synthetic(n={}, d1={}, d2={}, rho=[{rho}], noise_sigma={:?}, seed={})",
            spec.n, spec.d1, spec.d2, spec.noise_sigma, spec.seed
        ),
        x,
        y,
        None,
    )
}
