//! Untracked forms of the primitives on plain tensors. Each call runs a
//! throwaway tape with constant inputs.

use crate::error::{Error, Result};
use crate::tape::{PoolKind, Tape};
use crate::tensor::Tensor;

pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let wv = t.constant(weight.clone());
    let bv = bias.map(|b| t.constant(b.clone()));
    let y = t.conv2d(xv, wv, bv, stride, padding)?;
    Ok(t.value(y).clone())
}

fn as_batch(op: &'static str, x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [c, h, w] => x.reshape(&[1, c, h, w]),
        _ => Err(Error::invalid(op, format!("C×H×W expected, got {:?}", x.shape()))),
    }
}

/// Windowed pooling of a `C×H×W` map.
pub fn pool2d(x: &Tensor, kind: PoolKind, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let mut t = Tape::new();
    let xv = t.constant(as_batch("pool2d", x)?);
    let y = t.pool2d(xv, kind, window, stride)?;
    let out = t.value(y);
    out.reshape(&out.shape()[1..])
}

/// Spatial `(max, mean)` per channel of a `C×H×W` map.
pub fn global_pools(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut t = Tape::new();
    let xv = t.constant(as_batch("global_pools", x)?);
    let mx = t.global_pool(xv, PoolKind::Max)?;
    let av = t.global_pool(xv, PoolKind::Avg)?;
    let c = x.shape()[0];
    Ok((t.value(mx).reshape(&[c])?, t.value(av).reshape(&[c])?))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = t.sigmoid(xv);
    t.value(y).clone()
}

/// `x·Wᵀ + b` for `x: N×in`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let wv = t.constant(weight.clone());
    let bv = bias.map(|b| t.constant(b.clone()));
    let y = t.linear(xv, wv, bv)?;
    Ok(t.value(y).clone())
}
