use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Indices of one P×K batch, grouped as P blocks of K.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub pids: Vec<i64>,
    /// Identities with fewer than K images, filled by sampling with
    /// replacement.
    pub resampled: Vec<i64>,
}

/// Draws `p` distinct identities and `k` images of each from `pids`
/// (one entry per image).
pub fn pk_sample(pids: &[i64], p: usize, k: usize, rng: &mut Rng) -> Result<PkBatch> {
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &pid) in pids.iter().enumerate() {
        groups.entry(pid).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::invalid(
            "pk_sample",
            format!("need at least 2 identities, found {}", groups.len()),
        ));
    }
    if groups.len() < p {
        return Err(Error::invalid(
            "pk_sample",
            format!("batch asks for {p} identities but only {} exist", groups.len()),
        ));
    }
    let mut ids: Vec<i64> = groups.keys().copied().collect();
    rng.shuffle(&mut ids);
    ids.truncate(p);
    let mut batch = PkBatch {
        indices: Vec::with_capacity(p * k),
        pids: Vec::with_capacity(p * k),
        resampled: Vec::new(),
    };
    for pid in ids {
        let members = &groups[&pid];
        if members.len() >= k {
            let mut m = members.clone();
            rng.shuffle(&mut m);
            batch.indices.extend_from_slice(&m[..k]);
        } else {
            batch.resampled.push(pid);
            batch.indices.extend((0..k).map(|_| members[rng.below(members.len())]));
        }
        batch.pids.extend(std::iter::repeat_n(pid, k));
    }
    Ok(batch)
}
