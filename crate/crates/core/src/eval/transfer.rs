use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::classifier::{accuracy, standardizer, train_linear_classifier, ClassifierConfig};
use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Train on left-view projections, test on right-view projections.
    LeftToRight,
    RightToLeft,
    /// Train and test on the left view's projections.
    SingleLeft,
    SingleRight,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::LeftToRight => "l2r",
            Direction::RightToLeft => "r2l",
            Direction::SingleLeft => "single_left",
            Direction::SingleRight => "single_right",
        }
    }

    /// (train view, test view) indices.
    fn views(self) -> (usize, usize) {
        match self {
            Direction::LeftToRight => (0, 1),
            Direction::RightToLeft => (1, 0),
            Direction::SingleLeft => (0, 0),
            Direction::SingleRight => (1, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferResult {
    pub accuracy: f64,
    pub folds: Vec<f64>,
}

/// Disjoint folds covering `0..n`, from a seeded permutation.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in order.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    out
}

/// K-fold cross-view classification over projections `[hx, hy]`.
///
/// Each view's features are standardized with statistics of that view on the
/// training folds, so a classifier fit on one view sees the other view on
/// the same scale. Labels are only read from the training folds.
pub fn transfer_learning_eval(
    proj: [&Tensor; 2],
    labels: &[u8],
    direction: Direction,
    folds: usize,
    seed: u64,
    config: &ClassifierConfig,
) -> Result<TransferResult> {
    let n = labels.len();
    if proj[0].shape() != proj[1].shape() || proj[0].rank() != 2 || proj[0].rows() != n {
        return Err(Error::Dimension(format!(
            "projections {:?} / {:?} do not match {n} labels",
            proj[0].shape(),
            proj[1].shape()
        )));
    }
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("{folds} folds for {n} samples")));
    }
    let (train_v, test_v) = direction.views();
    let parts = fold_partition(n, folds, seed);
    let mut accs = Vec::with_capacity(folds);
    for (f, test_idx) in parts.iter().enumerate() {
        let train_idx: Vec<usize> = parts
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, p)| p.iter().copied())
            .collect();
        let xtr = proj[train_v].select_rows(&train_idx);
        let ytr: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
        let clf = train_linear_classifier(&xtr, &ytr, config)?;
        let (mean, scale) = standardizer(&proj[test_v].select_rows(&train_idx));
        let xte = proj[test_v].select_rows(test_idx);
        let yte: Vec<u8> = test_idx.iter().map(|&i| labels[i]).collect();
        let pred = clf.predict_with(&xte, &mean, &scale)?;
        accs.push(accuracy(&pred, &yte));
    }
    Ok(TransferResult {
        accuracy: accs.iter().sum::<f64>() / folds as f64,
        folds: accs,
    })
}
