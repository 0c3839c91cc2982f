use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErasingConfig {
    pub probability: f64,
    /// Erased area as a fraction of the image, `[lo, hi]`.
    pub area: [f64; 2],
    /// Height / width of the erased rectangle, `[lo, hi]`.
    pub aspect: [f64; 2],
    pub max_tries: usize,
}

impl Default for ErasingConfig {
    fn default() -> Self {
        ErasingConfig {
            probability: 0.5,
            area: [0.02, 0.4],
            aspect: [0.3, 10.0 / 3.0],
            max_tries: 100,
        }
    }
}

impl ErasingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.probability)
            && 0.0 < self.area[0]
            && self.area[0] <= self.area[1]
            && self.area[1] <= 1.0
            && 0.0 < self.aspect[0]
            && self.aspect[0] <= self.aspect[1];
        if !ok {
            return Err(Error::Config(format!("erasing: invalid ranges {self:?}")));
        }
        Ok(())
    }
}

/// Erased region: rows `[top, top+h)`, columns `[left, left+w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

/// With probability `cfg.probability`, overwrites one random rectangle of
/// `img: C×H×W` with uniform `[0, 1)` noise. Returns the rectangle, or
/// `None` when the image is left unchanged.
pub fn random_erase(img: &Tensor, cfg: &ErasingConfig, rng: &mut Rng) -> Result<(Tensor, Option<Rect>)> {
    if img.rank() != 3 {
        return Err(Error::invalid(
            "random_erase",
            format!("expected C×H×W, got {:?}", img.shape()),
        ));
    }
    if !rng.bernoulli(cfg.probability) {
        return Ok((img.clone(), None));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let area = (h * w) as f64;
    for _ in 0..cfg.max_tries {
        let target = rng.uniform_in(cfg.area[0], cfg.area[1]) * area;
        let aspect = rng.uniform_in(cfg.aspect[0], cfg.aspect[1]);
        let rh = (target * aspect).sqrt().round() as usize;
        let rw = (target / aspect).sqrt().round() as usize;
        if rh == 0 || rw == 0 || rh >= h || rw >= w {
            continue;
        }
        let rect = Rect {
            top: rng.below(h - rh + 1),
            left: rng.below(w - rw + 1),
            h: rh,
            w: rw,
        };
        let mut out = img.clone();
        let data = out.data_mut();
        for ch in 0..c {
            for y in rect.top..rect.top + rh {
                for x in rect.left..rect.left + rw {
                    data[(ch * h + y) * w + x] = rng.uniform();
                }
            }
        }
        return Ok((out, Some(rect)));
    }
    Ok((img.clone(), None))
}
