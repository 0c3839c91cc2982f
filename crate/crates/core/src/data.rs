//! In-memory image sets and pixel normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel `(x − mean) / std`, applied after augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::Config(format!(
                "normalization std must be positive, got {:?}",
                self.std
            )));
        }
        Ok(())
    }

    /// `img: 3×H×W` in `[0, 1]`.
    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        if img.rank() != 3 || img.shape()[0] != 3 {
            return Err(Error::invalid(
                "normalize",
                format!("expected 3×H×W, got {:?}", img.shape()),
            ));
        }
        let plane = img.shape()[1] * img.shape()[2];
        let mut out = img.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }
}

/// Labelled raw images (`3×H×W`, values in `[0, 1]`).
#[derive(Clone, Debug, Default)]
pub struct ImageSet {
    pub images: Vec<Tensor>,
    pub pids: Vec<i64>,
    pub camids: Vec<i64>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, img: Tensor, pid: i64, camid: i64) {
        self.images.push(img);
        self.pids.push(pid);
        self.camids.push(camid);
    }

    pub fn concat(mut self, other: &ImageSet) -> ImageSet {
        self.images.extend(other.images.iter().cloned());
        self.pids.extend(&other.pids);
        self.camids.extend(&other.camids);
        self
    }

    pub fn subset(&self, idx: &[usize]) -> ImageSet {
        ImageSet {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            pids: idx.iter().map(|&i| self.pids[i]).collect(),
            camids: idx.iter().map(|&i| self.camids[i]).collect(),
        }
    }

    /// Normalized `N×3×H×W` batch of the whole set.
    pub fn normalized_batch(&self, norm: &Normalization) -> Result<Tensor> {
        let imgs = self.images.iter().map(|i| norm.apply(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = imgs.iter().collect();
        Tensor::stack(&refs)
    }
}
