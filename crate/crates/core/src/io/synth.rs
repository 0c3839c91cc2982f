//! Procedural pedestrian-like images for desk-scale runs.
//!
//! An identity is a torso colour, a leg colour, a horizontal stripe
//! frequency and phase on the torso, and a head tone. Each image shifts the
//! figure by a few pixels, applies its camera's brightness and colour cast,
//! and adds pixel noise over a random background.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::image::save_png;
use crate::io::manifest::{Manifest, ManifestRow, Split};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub imgs_per_id: usize,
    pub cams: usize,
    /// `[H, W]`.
    pub hw: [usize; 2],
    pub seed: u64,
    /// Identities `0..train_ids` go to the train split; the rest form
    /// query (camera 0) and gallery (other cameras). `None` means half.
    pub train_ids: Option<usize>,
}

impl SynthConfig {
    pub fn new(n_ids: usize, imgs_per_id: usize, cams: usize, hw: [usize; 2], seed: u64) -> Self {
        SynthConfig {
            n_ids,
            imgs_per_id,
            cams,
            hw,
            seed,
            train_ids: None,
        }
    }

    pub fn train_ids(&self) -> usize {
        self.train_ids.unwrap_or(self.n_ids / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ids < 2 {
            return Err(Error::Config(format!(
                "synth: need at least 2 identities, got {}",
                self.n_ids
            )));
        }
        if self.imgs_per_id == 0 || self.cams == 0 || self.hw[0] < 8 || self.hw[1] < 4 {
            return Err(Error::Config(
                "synth: imgs_per_id and cams must be positive, images at least 8×4".into(),
            ));
        }
        if self.train_ids() > self.n_ids {
            return Err(Error::Config(format!(
                "synth: train_ids {} exceeds n_ids {}",
                self.train_ids(),
                self.n_ids
            )));
        }
        Ok(())
    }
}

struct Identity {
    torso: [f64; 3],
    legs: [f64; 3],
    head: f64,
    freq: f64,
    phase: f64,
}

struct Camera {
    gain: f64,
    cast: [f64; 3],
}

const ID_STREAM: u64 = 1;
const CAM_STREAM: u64 = 2;
const IMG_STREAM: u64 = 3;

fn identity(seed: u64, pid: usize) -> Identity {
    let mut r = Rng::keyed(seed, &[ID_STREAM, pid as u64]);
    let color = |r: &mut Rng| [r.uniform_in(0.1, 0.9), r.uniform_in(0.1, 0.9), r.uniform_in(0.1, 0.9)];
    Identity {
        torso: color(&mut r),
        legs: color(&mut r),
        head: r.uniform_in(0.4, 0.8),
        freq: 1.0 + r.below(4) as f64,
        phase: r.uniform_in(0.0, std::f64::consts::TAU),
    }
}

fn camera(seed: u64, cam: usize) -> Camera {
    let mut r = Rng::keyed(seed, &[CAM_STREAM, cam as u64]);
    Camera {
        gain: r.uniform_in(0.8, 1.2),
        cast: [
            r.uniform_in(-0.06, 0.06),
            r.uniform_in(-0.06, 0.06),
            r.uniform_in(-0.06, 0.06),
        ],
    }
}

/// One `3×H×W` image in `[0, 1]`.
pub fn render(cfg: &SynthConfig, pid: usize, cam: usize, index: usize) -> Tensor {
    let id = identity(cfg.seed, pid);
    let cm = camera(cfg.seed, cam);
    let mut r = Rng::keyed(cfg.seed, &[IMG_STREAM, pid as u64, index as u64]);
    let [h, w] = cfg.hw;
    let (hf, wf) = (h as f64, w as f64);
    let dy = r.uniform_in(-0.05, 0.05) * hf;
    let dx = r.uniform_in(-0.08, 0.08) * wf;
    let bg = [r.uniform_in(0.2, 0.6), r.uniform_in(0.2, 0.6), r.uniform_in(0.2, 0.6)];
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let v = (y as f64 + 0.5 - dy) / hf;
            let u = (x as f64 + 0.5 - dx) / wf;
            let centered = (u - 0.5).abs();
            let px: [f64; 3] = if (0.04..0.18).contains(&v) && centered < 0.12 {
                [id.head; 3]
            } else if (0.18..0.55).contains(&v) && centered < 0.28 {
                let t = v - 0.18;
                let stripe = 0.15 * (std::f64::consts::TAU * id.freq * t / 0.37 * 2.0 + id.phase).sin();
                id.torso.map(|c| c + stripe)
            } else if (0.55..0.95).contains(&v) && centered < 0.2 && centered > 0.02 {
                id.legs
            } else {
                bg
            };
            for c in 0..3 {
                let val = px[c] * cm.gain + cm.cast[c] + 0.04 * r.normal();
                data[(c * h + y) * w + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("sizes agree")
}

/// Writes PNG images under `out_dir/images` and `out_dir/manifest.csv`.
/// Image `j` of an identity is seen by camera `j mod cams`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let train_ids = cfg.train_ids();
    let mut rows = Vec::new();
    for pid in 0..cfg.n_ids {
        for j in 0..cfg.imgs_per_id {
            let cam = j % cfg.cams;
            let rel = format!("images/{pid:04}_c{cam}_{j:03}.png");
            let resolved = out_dir.join(&rel);
            save_png(&resolved, &render(cfg, pid, cam, j))?;
            let split = if pid < train_ids {
                Split::Train
            } else if cam == 0 {
                Split::Query
            } else {
                Split::Gallery
            };
            rows.push(ManifestRow {
                path: rel,
                resolved,
                pid: pid as i64,
                camid: cam as i64,
                split,
            });
        }
    }
    let manifest = Manifest { rows };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
