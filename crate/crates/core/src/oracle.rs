//! Slow, obviously-correct reference implementations used to pin the fast
//! kernels, the batch-hard triplet loss and the retrieval protocol.

use crate::eval::{pairwise_distances, EmbeddingSet};
use crate::Tensor;

/// Six-loop convolution with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for i in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at(&[i, ic, iy as usize, ix as usize]) * w.at(&[oc, ic, ky, kx]);
                                }
                            }
                        }
                    }
                    out.data_mut()[((i * o + oc) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

/// Windowed max or mean over a `C×H×W` map.
pub fn pool2d(x: &Tensor, max: bool, win: (usize, usize), stride: (usize, usize)) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h - win.0) / stride.0 + 1;
    let wo = (w - win.1) / stride.1 + 1;
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                for dy in 0..win.0 {
                    for dx in 0..win.1 {
                        let v = x.at(&[ch, oy * stride.0 + dy, ox * stride.1 + dx]);
                        acc = if max { acc.max(v) } else { acc + v };
                    }
                }
                if !max {
                    acc /= (win.0 * win.1) as f64;
                }
                out.data_mut()[(ch * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

/// Loop form of `x·wᵀ + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    Tensor::from_fn(&[n, dout], |i| {
        let (r, j) = (i / dout, i % dout);
        (0..din).fold(b.data()[j], |s, k| s + x.at(&[r, k]) * w.at(&[j, k]))
    })
}

/// Mean over anchors with a positive and a negative of the largest hinge
/// over every (positive, negative) pair.
pub fn batch_hard_triplet(f: &Tensor, pids: &[i64], margin: f64, squared: bool) -> f64 {
    let (n, d) = (f.shape()[0], f.shape()[1]);
    let dist = |i: usize, j: usize| {
        let s: f64 = (0..d).map(|k| (f.at(&[i, k]) - f.at(&[j, k])).powi(2)).sum();
        if squared {
            s
        } else {
            s.sqrt()
        }
    };
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..n {
        let mut best: Option<f64> = None;
        for p in (0..n).filter(|&p| p != a && pids[p] == pids[a]) {
            for q in (0..n).filter(|&q| pids[q] != pids[a]) {
                let h = (dist(a, p) - dist(a, q) + margin).max(0.0);
                best = Some(best.map_or(h, |b: f64| b.max(h)));
            }
        }
        if let Some(b) = best {
            total += b;
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Metrics of the brute-force protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub valid: usize,
}

/// Position of every kept gallery item is the count of kept items that
/// strictly precede it under (distance, index); no sorting involved.
pub fn ranking(q: &EmbeddingSet, g: &EmbeddingSet, max_rank: usize) -> Option<Ranking> {
    let dm = pairwise_distances(&q.descriptors, &g.descriptors).ok()?;
    let ng = g.len();
    let mut hits = vec![0usize; max_rank];
    let mut aps = Vec::new();
    for i in 0..q.len() {
        let keep = |j: usize| g.pids[j] >= 0 && !(g.pids[j] == q.pids[i] && g.camids[j] == q.camids[i]);
        let key = |j: usize| dm.data()[i * ng + j];
        let pos = |j: usize| {
            (0..ng)
                .filter(|&m| keep(m) && (key(m) < key(j) || (key(m) == key(j) && m < j)))
                .count()
        };
        let mut rel_pos: Vec<usize> = (0..ng)
            .filter(|&j| keep(j) && g.pids[j] == q.pids[i])
            .map(pos)
            .collect();
        if rel_pos.is_empty() {
            continue;
        }
        rel_pos.sort_unstable();
        let mut ap = 0.0;
        for (n, &p) in rel_pos.iter().enumerate() {
            ap += (n + 1) as f64 / (p + 1) as f64;
        }
        aps.push(ap / rel_pos.len() as f64);
        for (r, h) in hits.iter_mut().enumerate() {
            if rel_pos[0] <= r {
                *h += 1;
            }
        }
    }
    if aps.is_empty() {
        return None;
    }
    let nv = aps.len();
    Some(Ranking {
        cmc: hits.iter().map(|&h| h as f64 / nv as f64).collect(),
        map: aps.iter().sum::<f64>() / nv as f64,
        valid: nv,
    })
}
