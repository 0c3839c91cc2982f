//! Retrieval metrics under the cross-camera protocol.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kernels::gemm;
use crate::tensor::Tensor;

/// Descriptors with identity and camera labels, one row per image.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub descriptors: Tensor,
    pub pids: Vec<i64>,
    pub camids: Vec<i64>,
    pub paths: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(descriptors: Tensor, pids: Vec<i64>, camids: Vec<i64>, paths: Vec<String>) -> Result<Self> {
        let n = if descriptors.rank() == 2 {
            descriptors.shape()[0]
        } else {
            usize::MAX
        };
        if n != pids.len() || n != camids.len() || n != paths.len() {
            return Err(Error::invalid(
                "embedding set",
                format!(
                    "descriptors {:?} with {} pids, {} camids, {} paths",
                    descriptors.shape(),
                    pids.len(),
                    camids.len(),
                    paths.len()
                ),
            ));
        }
        Ok(EmbeddingSet {
            descriptors,
            pids,
            camids,
            paths,
        })
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.shape()[1]
    }
}

/// Euclidean distances `n_q×n_g` via `|q|² + |g|² − 2q·g`, clamped at 0.
pub fn pairwise_distances(q: &Tensor, g: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || g.rank() != 2 || q.shape()[1] != g.shape()[1] {
        return Err(Error::shape("pairwise_distances", q.shape(), g.shape()));
    }
    let (nq, ng, d) = (q.shape()[0], g.shape()[0], q.shape()[1]);
    let sq = |t: &Tensor| -> Vec<f64> {
        t.data()
            .chunks(d.max(1))
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect()
    };
    let (qn, gn) = (sq(q), sq(g));
    let mut dot = vec![0.0; nq * ng];
    gemm(nq, d, ng, q.data(), false, g.data(), true, &mut dot, false);
    for i in 0..nq {
        for j in 0..ng {
            let v = &mut dot[i * ng + j];
            *v = (qn[i] + gn[j] - 2.0 * *v).max(0.0).sqrt();
        }
    }
    Tensor::new(&[nq, ng], dot)
}

#[derive(Clone, Debug)]
pub struct RankingResult {
    /// Per query, all gallery indices by ascending distance (ties by index).
    pub orders: Vec<Vec<usize>>,
    /// Per query, average precision; `None` for queries without a valid match.
    pub ap: Vec<Option<f64>>,
    /// `cmc[r-1]`: fraction of valid queries matched within the top `r`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_valid: usize,
    pub num_invalid: usize,
}

impl RankingResult {
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc[(r.min(self.cmc.len())).max(1) - 1]
    }

    /// `rank,cmc` rows.
    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (i, v) in self.cmc.iter().enumerate() {
            writeln!(s, "{},{v:.6}", i + 1).unwrap();
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "rank1={:.4} rank5={:.4} rank10={:.4} mAP={:.4} queries={} skipped={}",
            self.rank(1),
            self.rank(5),
            self.rank(10),
            self.map,
            self.num_valid,
            self.num_invalid
        )
    }
}

/// Whether gallery item `j` counts for query `i`: junk identities and
/// same-identity same-camera items are dropped.
fn kept(q: &EmbeddingSet, i: usize, g: &EmbeddingSet, j: usize) -> bool {
    g.pids[j] >= 0 && !(g.pids[j] == q.pids[i] && g.camids[j] == q.camids[i])
}

pub fn evaluate(q: &EmbeddingSet, g: &EmbeddingSet, max_rank: usize) -> Result<RankingResult> {
    if max_rank == 0 {
        return Err(Error::invalid("evaluate", "max_rank must be positive"));
    }
    let dist = pairwise_distances(&q.descriptors, &g.descriptors)?;
    let ng = g.len();
    let mut orders = Vec::with_capacity(q.len());
    let mut ap = Vec::with_capacity(q.len());
    let mut hits = vec![0usize; max_rank];
    for i in 0..q.len() {
        let row = &dist.data()[i * ng..(i + 1) * ng];
        let mut order: Vec<usize> = (0..ng).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let relevant: Vec<bool> = order
            .iter()
            .filter(|&&j| kept(q, i, g, j))
            .map(|&j| g.pids[j] == q.pids[i])
            .collect();
        let num_rel = relevant.iter().filter(|&&r| r).count();
        if num_rel == 0 {
            ap.push(None);
        } else {
            let mut found = 0usize;
            let mut sum = 0.0;
            for (pos, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
                found += 1;
                sum += found as f64 / (pos + 1) as f64;
            }
            ap.push(Some(sum / num_rel as f64));
            let first = relevant.iter().position(|&r| r).unwrap();
            for h in hits.iter_mut().skip(first) {
                *h += 1;
            }
        }
        orders.push(order);
    }
    let valid: Vec<f64> = ap.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Protocol(format!(
            "none of the {} queries has a gallery match from a different camera",
            q.len()
        )));
    }
    let nv = valid.len();
    Ok(RankingResult {
        orders,
        cmc: hits.iter().map(|&h| h as f64 / nv as f64).collect(),
        map: valid.iter().sum::<f64>() / nv as f64,
        num_invalid: ap.len() - nv,
        num_valid: nv,
        ap,
    })
}

/// Per query, the top `max_rank` kept gallery items:
/// `query,rank,gallery,distance,correct`.
pub fn ranked_list_csv(q: &EmbeddingSet, g: &EmbeddingSet, result: &RankingResult, max_rank: usize) -> Result<String> {
    let dist = pairwise_distances(&q.descriptors, &g.descriptors)?;
    let ng = g.len();
    let mut s = String::from("query,rank,gallery,distance,correct\n");
    for (i, order) in result.orders.iter().enumerate() {
        for (r, &j) in order.iter().filter(|&&j| kept(q, i, g, j)).take(max_rank).enumerate() {
            writeln!(
                s,
                "{},{},{},{:.6},{}",
                q.paths[i],
                r + 1,
                g.paths[j],
                dist.data()[i * ng + j],
                u8::from(g.pids[j] == q.pids[i])
            )
            .unwrap();
        }
    }
    Ok(s)
}
