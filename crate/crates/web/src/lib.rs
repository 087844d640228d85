//! Browser bindings for three operations: cross-view reconstruction of a
//! drawn digit, checkpoint inspection, and the planted-correlation CCA check.

use corrmcnn::data::{join_vertical, split_vertical, synth_correlated, SyntheticSpec};
use corrmcnn::engine::Tensor;
use corrmcnn::eval::{cca_closed_form, DEFAULT_REG};
use corrmcnn::model::{build_preset, canonical_text, checkpoint, digest, Model};
use corrmcnn::{Error, Result};
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A model held by the page.
#[wasm_bindgen]
pub struct Demo {
    model: Model,
    source: String,
}

impl Demo {
    pub fn untrained(preset: &str, seed: u32) -> Result<Demo> {
        let (spec, weights) = build_preset(preset)?;
        Ok(Demo {
            model: Model::new(spec, weights, u64::from(seed))?,
            source: format!("untrained {preset}, seed {seed}"),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Demo> {
        let state = checkpoint::decode(bytes)?;
        Ok(Demo {
            source: format!("checkpoint after {} epochs ({} steps)", state.epoch, state.step),
            model: state.model,
        })
    }

    /// Takes a `28 x 28` image in `[0, 1]` and returns the composite with one
    /// half kept and the other decoded from it alone.
    pub fn cross_reconstruct(&self, pixels: &[f64], keep_left: bool) -> Result<Vec<f64>> {
        if pixels.len() != 784 {
            return Err(Error::Dimension(format!("expected 784 pixels, got {}", pixels.len())));
        }
        if (self.model.spec.view_dim(0), self.model.spec.view_dim(1)) != (392, 392) {
            return Err(Error::Usage("reconstruction needs a model over 28x14 half images".into()));
        }
        let halves = split_vertical(&Tensor::new(&[1, 28, 28], pixels.to_vec())?, None)?;
        let [left, right] = &halves.views;
        let image = if keep_left {
            let (_, r) = self.model.decode(&self.model.encode(Some(left), None)?)?;
            join_vertical(left, &r)?
        } else {
            let (l, _) = self.model.decode(&self.model.encode(None, Some(right))?)?;
            join_vertical(&l, right)?
        };
        Ok(image.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn summary(&self) -> String {
        let m = &self.model;
        format!(
            "{}\nparameters {}\ndigest {}\n\n{}",
            self.source,
            m.params.iter().map(|(_, t)| t.len()).sum::<usize>(),
            digest(&m.spec, &m.weights),
            canonical_text(&m.spec, &m.weights)
        )
    }
}

#[wasm_bindgen]
impl Demo {
    /// Freshly initialized `mnist-arc1` model.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        Demo::untrained("mnist-arc1", seed).map_err(js)
    }

    /// Model from a checkpoint written by `crl train`.
    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(bytes: &[u8]) -> std::result::Result<Demo, JsError> {
        Demo::from_bytes(bytes).map_err(js)
    }

    #[wasm_bindgen(js_name = reconstruct)]
    pub fn reconstruct_js(&self, pixels: &[f64], keep_left: bool) -> std::result::Result<Vec<f64>, JsError> {
        self.cross_reconstruct(pixels, keep_left).map_err(js)
    }

    #[wasm_bindgen(js_name = describe)]
    pub fn describe_js(&self) -> String {
        self.summary()
    }
}

/// Canonical correlations recovered from planted synthetic data, largest
/// first.
pub fn planted_cca(n: usize, d: usize, rho: &[f64], noise: f64, seed: u32) -> Result<Vec<f64>> {
    let data = synth_correlated(&SyntheticSpec {
        n,
        d1: d,
        d2: d,
        rho: rho.to_vec(),
        noise_sigma: noise,
        seed: u64::from(seed),
    })?;
    Ok(cca_closed_form(&data.views[0], &data.views[1], DEFAULT_REG, d)?.correlations)
}

#[wasm_bindgen(js_name = plantedCca)]
pub fn planted_cca_js(n: usize, d: usize, rho: &[f64], noise: f64, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    planted_cca(n, d, rho, noise, seed).map_err(js)
}
