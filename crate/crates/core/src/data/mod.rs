//! Two-view datasets: MNIST half images, synthetic correlated views, and
//! seeded mini-batching.

mod idx;
mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use idx::{encode_images, encode_labels, load_mnist_idx, parse_images, parse_labels};
pub use synth::{synth_correlated, SyntheticSpec};

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const FETCH_HINT: &str = "run scripts/fetch_mnist.sh to download the MNIST IDX files";

#[derive(Clone, Debug)]
pub struct MultiViewDataset {
    pub name: String,
    /// `[n, d1]` and `[n, d2]`, one sample per row.
    pub views: [Tensor; 2],
    pub labels: Option<Vec<u8>>,
    pub normalization: String,
    pub source_digest: String,
}

#[derive(Clone, Debug)]
pub struct MultiViewBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub labels: Option<Vec<u8>>,
    /// Dataset rows this batch was drawn from.
    pub indices: Vec<usize>,
}

impl MultiViewDataset {
    pub fn new(name: impl Into<String>, x: Tensor, y: Tensor, labels: Option<Vec<u8>>) -> Result<Self> {
        if x.rank() != 2 || y.rank() != 2 {
            return Err(Error::Dimension(format!(
                "views must be [n, d] matrices, got {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        if x.rows() != y.rows() {
            return Err(Error::Dimension(format!(
                "views disagree on sample count: {} vs {}",
                x.rows(),
                y.rows()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != x.rows() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} samples",
                    l.len(),
                    x.rows()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            views: [x, y],
            labels,
            normalization: "none".into(),
            source_digest: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.views[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.views[0].row_len(), self.views[1].row_len())
    }

    pub fn select(&self, idx: &[usize]) -> MultiViewBatch {
        MultiViewBatch {
            x: self.views[0].select_rows(idx),
            y: self.views[1].select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            indices: idx.to_vec(),
        }
    }

    /// Rows `idx` as a new dataset with the same metadata.
    pub fn subset(&self, idx: &[usize]) -> MultiViewDataset {
        let b = self.select(idx);
        MultiViewDataset {
            name: format!("{}[{} rows]", self.name, idx.len()),
            views: [b.x, b.y],
            labels: b.labels,
            normalization: self.normalization.clone(),
            source_digest: self.source_digest.clone(),
        }
    }

    /// The first `n` samples of a seeded permutation.
    pub fn seeded_subset(&self, n: usize, seed: u64) -> MultiViewDataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(n.min(self.len()));
        self.subset(&order)
    }
}

/// Splits `[n, 28, 28]` images into left (columns 0..13) and right
/// (columns 14..27) halves, each flattened row-major to 392 features.
pub fn split_vertical(images: &Tensor, labels: Option<Vec<u8>>) -> Result<MultiViewDataset> {
    if images.rank() != 3 || images.shape()[1..] != [28, 28] {
        return Err(Error::Dimension(format!(
            "split_vertical expects [n, 28, 28] images, got {:?}",
            images.shape()
        )));
    }
    let n = images.shape()[0];
    let mut left = Vec::with_capacity(n * 392);
    let mut right = Vec::with_capacity(n * 392);
    for row in images.data().chunks(28) {
        left.extend_from_slice(&row[..14]);
        right.extend_from_slice(&row[14..]);
    }
    MultiViewDataset::new(
        "mnist-halves",
        Tensor::new(&[n, 392], left)?,
        Tensor::new(&[n, 392], right)?,
        labels,
    )
}

/// Re-joins two half views into `[n, 28, 28]` images.
pub fn join_vertical(left: &Tensor, right: &Tensor) -> Result<Tensor> {
    if left.shape() != right.shape() || left.row_len() != 392 {
        return Err(Error::Dimension(format!(
            "join_vertical expects two [n, 392] views, got {:?} and {:?}",
            left.shape(),
            right.shape()
        )));
    }
    let n = left.rows();
    let mut out = Vec::with_capacity(n * 784);
    for (l, r) in left.data().chunks(14).zip(right.data().chunks(14)) {
        out.extend_from_slice(l);
        out.extend_from_slice(r);
    }
    Tensor::new(&[n, 28, 28], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads one MNIST split from `data_dir` as half-image views.
pub fn load_mnist(data_dir: &Path, split: Split) -> Result<MultiViewDataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = data_dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = data_dir.join(format!("{prefix}-labels-idx1-ubyte"));
    for p in [&images, &labels] {
        if !p.is_file() {
            return Err(Error::Usage(format!("{} not found; {FETCH_HINT}", p.display())));
        }
    }
    let (img, lab, digest) = load_mnist_idx(&images, &labels)?;
    let mut ds = split_vertical(&img, Some(lab))?;
    ds.name = format!("mnist-{prefix}");
    ds.normalization = "pixel/255".into();
    ds.source_digest = digest;
    Ok(ds)
}

/// Mixes a seed with a stream index so related streams stay uncorrelated.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batches over a seeded permutation of the dataset.
pub struct BatchIter<'a> {
    data: &'a MultiViewDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Seeded by `(seed, epoch)`; a trailing batch smaller than 2 is dropped.
pub fn batch_iter(data: &MultiViewDataset, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter<'_>> {
    if data.is_empty() {
        return Err(Error::Usage("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
    Ok(BatchIter {
        data,
        order,
        batch_size,
        pos: 0,
    })
}

impl<'a> BatchIter<'a> {
    /// Number of batches this iterator yields in total.
    pub fn batch_count(&self) -> usize {
        if self.batch_size < 2 {
            return 0;
        }
        let n = self.order.len();
        let full = n / self.batch_size;
        full + usize::from(n % self.batch_size >= 2)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = MultiViewBatch;

    fn next(&mut self) -> Option<MultiViewBatch> {
        let end = (self.pos + self.batch_size).min(self.order.len());
        if end - self.pos < 2 {
            return None;
        }
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.data.select(idx))
    }
}
