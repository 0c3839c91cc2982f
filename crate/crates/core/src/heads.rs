//! Multi-granularity stripe branches and the per-branch pooled feature
//! extractor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, Linear, ParamId, ParamStore, PoolKind};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MgoConfig {
    /// Number of horizontal stripes.
    pub k: usize,
    /// Granularity levels; empty means `1..=k`.
    #[serde(default)]
    pub levels: Vec<usize>,
}

impl Default for MgoConfig {
    fn default() -> Self {
        MgoConfig {
            k: 6,
            levels: Vec::new(),
        }
    }
}

impl MgoConfig {
    pub fn levels(&self) -> Vec<usize> {
        if self.levels.is_empty() {
            (1..=self.k).collect()
        } else {
            self.levels.clone()
        }
    }

    pub fn validate(&self, height: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("mgo: k must be positive".into()));
        }
        if !height.is_multiple_of(self.k) {
            return Err(Error::Config(format!(
                "mgo: map height {height} is not divisible by k={}",
                self.k
            )));
        }
        let levels = self.levels();
        if levels.iter().any(|&p| p == 0 || p > self.k) {
            return Err(Error::Config(format!(
                "mgo: levels {levels:?} must lie in 1..={}",
                self.k
            )));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "mgo: levels {levels:?} must be strictly increasing"
            )));
        }
        Ok(())
    }

    /// Branch layout for a map of the given height, level-major and
    /// offset-minor.
    pub fn branches(&self, height: usize) -> Result<Vec<BranchSpec>> {
        self.validate(height)?;
        let stripe = height / self.k;
        let mut out = Vec::new();
        for part in self.levels() {
            let span = self.k - part + 1;
            for offset in 1..=part {
                let lo = (offset - 1) * stripe;
                out.push(BranchSpec {
                    part,
                    offset,
                    row_lo: lo,
                    row_hi: lo + span * stripe,
                });
            }
        }
        Ok(out)
    }
}

/// One stripe union: level `part`, 1-based `offset`, rows `[row_lo, row_hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub part: usize,
    pub offset: usize,
    pub row_lo: usize,
    pub row_hi: usize,
}

impl BranchSpec {
    pub fn label(&self) -> String {
        format!("p{}o{}", self.part, self.offset)
    }
}

/// Slices `f: N×C×H×W` into the configured branches.
pub fn mgo_partition(cx: &mut Ctx, f: Var, cfg: &MgoConfig) -> Result<Vec<(BranchSpec, Var)>> {
    let h = cx.tape.shape(f)[2];
    cfg.branches(h)?
        .into_iter()
        .map(|b| Ok((b, cx.tape.slice_rows(f, b.row_lo, b.row_hi)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpfeConfig {
    /// Width after the 1×1 reduction.
    pub c_red: usize,
    pub feat_dim: usize,
}

impl MpfeConfig {
    pub fn reference() -> Self {
        MpfeConfig {
            c_red: 1024,
            feat_dim: 512,
        }
    }

    pub fn mini() -> Self {
        MpfeConfig {
            c_red: 128,
            feat_dim: 512,
        }
    }
}

/// Per-branch outputs, each with a leading batch axis.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// Pre-BN feature, `N×feat_dim`; feeds the triplet loss.
    pub f_tri: Var,
    /// Post-BN feature, `N×feat_dim`; feeds the classifier and retrieval.
    pub f_id: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Mpfe {
    pub reduce: Conv2d,
    pub bn1: BatchNorm,
    pub fc: Linear,
    pub bn2: BatchNorm,
    pub classifier: Linear,
}

impl Mpfe {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &MpfeConfig,
        num_ids: usize,
        rng: &mut Rng,
    ) -> Self {
        Mpfe {
            reduce: Conv2d::new(
                store,
                &format!("{name}.reduce"),
                2 * channels,
                cfg.c_red,
                (1, 1),
                (1, 1),
                (0, 0),
                false,
                rng,
            ),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cfg.c_red),
            fc: Linear::new(store, &format!("{name}.fc"), cfg.c_red, cfg.feat_dim, true, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cfg.feat_dim),
            classifier: Linear::new(store, &format!("{name}.classifier"), cfg.feat_dim, num_ids, false, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.reduce.weight];
        for bn in [&self.bn1, &self.bn2] {
            ids.extend([bn.gamma, bn.beta, bn.running_mean, bn.running_var]);
        }
        ids.push(self.fc.weight);
        ids.extend(self.fc.bias);
        ids.push(self.classifier.weight);
        ids
    }

    pub fn forward(&self, cx: &mut Ctx, branch: Var) -> Result<BranchOutput> {
        let n = cx.tape.shape(branch)[0];
        let max = cx.tape.global_pool(branch, PoolKind::Max)?;
        let avg = cx.tape.global_pool(branch, PoolKind::Avg)?;
        let pooled = cx.tape.concat(&[max, avg], 1)?;
        let c2 = cx.tape.shape(pooled)[1];
        let pooled = cx.tape.reshape(pooled, &[n, c2, 1, 1])?;
        let reduced = self.reduce.forward(cx, pooled)?;
        let c_red = cx.tape.shape(reduced)[1];
        let reduced = cx.tape.reshape(reduced, &[n, c_red])?;
        let h = self.bn1.forward(cx, reduced)?;
        let h = cx.tape.relu(h);
        let f_tri = self.fc.forward(cx, h)?;
        let f_id = self.bn2.forward(cx, f_tri)?;
        let logits = self.classifier.forward(cx, f_id)?;
        Ok(BranchOutput { f_tri, f_id, logits })
    }
}

/// Concatenates per-branch features (each `N×D`) into `N×(B·D)` rows, with
/// every `D`-slice scaled to unit L2 norm. All-zero slices stay zero.
pub fn descriptor_extract(features: &[&Tensor]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::invalid("descriptor_extract", "no branches"))?;
    if first.rank() != 2 {
        return Err(Error::invalid(
            "descriptor_extract",
            format!("expected N×D, got {:?}", first.shape()),
        ));
    }
    let (n, d) = (first.shape()[0], first.shape()[1]);
    for f in features {
        if f.shape() != first.shape() {
            return Err(Error::shape("descriptor_extract", first.shape(), f.shape()));
        }
    }
    let b = features.len();
    let mut out = vec![0.0; n * b * d];
    for i in 0..n {
        for (j, f) in features.iter().enumerate() {
            let src = &f.data()[i * d..(i + 1) * d];
            let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dst = &mut out[(i * b + j) * d..(i * b + j + 1) * d];
            if norm > 0.0 {
                for (o, s) in dst.iter_mut().zip(src) {
                    *o = s / norm;
                }
            }
        }
    }
    Tensor::new(&[n, b * d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tape::Tape;

    #[test]
    fn default_layout_has_21_branches() {
        let b = MgoConfig::default().branches(24).unwrap();
        assert_eq!(b.len(), 21);
        assert_eq!((b[0].row_lo, b[0].row_hi), (0, 24));
        assert_eq!((b[1].row_lo, b[1].row_hi), (0, 20));
        assert_eq!((b[2].row_lo, b[2].row_hi), (4, 24));
        let last: Vec<_> = b[15..].iter().map(|s| (s.row_lo, s.row_hi)).collect();
        assert_eq!(last, (0..6).map(|i| (4 * i, 4 * i + 4)).collect::<Vec<_>>());
    }

    #[test]
    fn coverage_and_overlap() {
        let cfg = MgoConfig::default();
        let h = 12;
        let all = cfg.branches(h).unwrap();
        for part in 1..=6 {
            let lvl: Vec<_> = all.iter().filter(|s| s.part == part).collect();
            assert_eq!(lvl.len(), part);
            assert_eq!(lvl[0].row_lo, 0);
            assert_eq!(lvl.last().unwrap().row_hi, h);
            for w in lvl.windows(2) {
                assert_eq!(w[0].row_hi - w[1].row_lo, (6 - part) * h / 6);
            }
        }
    }

    #[test]
    fn rejects_indivisible_height_and_bad_levels() {
        assert!(MgoConfig::default().branches(10).is_err());
        let cfg = MgoConfig {
            k: 4,
            levels: vec![2, 5],
        };
        assert!(cfg.branches(8).is_err());
        let cfg = MgoConfig {
            k: 4,
            levels: vec![1, 4],
        };
        assert_eq!(cfg.branches(8).unwrap().len(), 5);
    }

    #[test]
    fn descriptor_normalizes_slices() {
        let a = Tensor::new(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, -2.0]).unwrap();
        let d = descriptor_extract(&[&a, &b]).unwrap();
        assert_eq!(d.shape(), &[2, 4]);
        assert_eq!(d.data(), &[0.6, 0.8, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0]);
        let b5 = b.map(|v| 5.0 * v);
        assert_eq!(descriptor_extract(&[&a, &b5]).unwrap(), d);
    }

    #[test]
    fn mpfe_constant_branch_and_widths() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let cfg = MpfeConfig {
            c_red: 6,
            feat_dim: 512,
        };
        let head = Mpfe::new(&mut store, "h", 3, &cfg, 5, &mut rng);
        for h in [1, 4] {
            let x = Tensor::randn(&[2, 3, h, 4], 1.0, &mut rng);
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, &store, Mode::Eval, false);
            let xv = cx.tape.constant(x);
            let out = head.forward(&mut cx, xv).unwrap();
            assert_eq!(cx.tape.shape(out.f_tri), &[2, 512]);
            assert_eq!(cx.tape.shape(out.f_id), &[2, 512]);
            assert_eq!(cx.tape.shape(out.logits), &[2, 5]);
        }
    }

    #[test]
    fn mpfe_hand_oracle() {
        // C=2, c_red=2, feat_dim=2, 3 ids, eval mode with unit running stats
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let cfg = MpfeConfig { c_red: 2, feat_dim: 2 };
        let head = Mpfe::new(&mut store, "h", 2, &cfg, 3, &mut rng);
        // reduce picks max of ch0 and avg of ch1
        store
            .set(
                head.reduce.weight,
                Tensor::new(&[2, 4, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        store.set(head.fc.weight, Tensor::eye(2)).unwrap();
        store
            .set(head.fc.bias.unwrap(), Tensor::new(&[2], vec![0.0, -1.0]).unwrap())
            .unwrap();
        store
            .set(
                head.classifier.weight,
                Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
            )
            .unwrap();
        let x = Tensor::new(&[1, 2, 2, 1], vec![1.0, 3.0, -4.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval, false);
        let xv = cx.tape.constant(x);
        let out = head.forward(&mut cx, xv).unwrap();
        let bn = |v: f64| v / (1.0 + crate::nn::BN_EPS).sqrt();
        // max ch0 = 3, avg ch1 = -1
        let r = [bn(3.0).max(0.0), bn(-1.0).max(0.0)];
        let f_tri = [r[0], r[1] - 1.0];
        let f_id = [bn(f_tri[0]), bn(f_tri[1])];
        let logits = [f_id[0], f_id[1], f_id[0] + f_id[1]];
        let close = |t: &Tensor, want: &[f64]| t.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-14);
        assert!(close(cx.tape.value(out.f_tri), &f_tri));
        assert!(close(cx.tape.value(out.f_id), &f_id));
        assert!(close(cx.tape.value(out.logits), &logits));
    }
}
