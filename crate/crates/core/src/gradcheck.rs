//! Central-difference gradient checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Error between one analytic and one numeric partial derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Evaluates the scalar program `f` at `point` and returns the largest
/// [`relative_error`] between its tape gradient and central differences
/// with step `eps`, over every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let l = f(&mut tape, x)?;
        Ok(tape.value(l).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}


/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

/// Reduces `y` to a scalar through fixed random weights, so every output
/// coordinate contributes (a plain sum is blind to e.g. batch-norm's input
/// gradient).
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = crate::rng::Rng::new(seed);
    let w = Tensor::randn(t.shape(y), 1.0, &mut rng);
    let wv = t.constant(w);
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

/// Random values bounded away from zero, so ReLU kinks sit outside `±eps`.
fn away_from_zero(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_in(0.1, 1.5);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Gradient checks of every differentiable tape primitive at randomized
/// smooth points.
pub fn primitive_suite(seed: u64, eps: f64) -> Result<Vec<CheckResult>> {
    use crate::rng::Rng;
    use crate::tape::{Distance, PoolKind};

    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, point: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>| -> Result<()> {
        let err = grad_check(f, point, eps)?;
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
        });
        Ok(())
    };

    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    run("matmul/lhs", &a, &|t, x| {
        let bv = t.constant(b.clone());
        let y = t.matmul(x, bv)?;
        project(t, y, 1)
    })?;
    run("matmul/rhs", &b, &|t, x| {
        let av = t.constant(a.clone());
        let y = t.matmul(av, x)?;
        project(t, y, 1)
    })?;

    let lx = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let lw = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let lb = Tensor::randn(&[3], 1.0, &mut rng);
    run("linear/input", &lx, &|t, x| {
        let (w, bb) = (t.constant(lw.clone()), t.constant(lb.clone()));
        let y = t.linear(x, w, Some(bb))?;
        project(t, y, 2)
    })?;
    run("linear/weight", &lw, &|t, w| {
        let (x, bb) = (t.constant(lx.clone()), t.constant(lb.clone()));
        let y = t.linear(x, w, Some(bb))?;
        project(t, y, 2)
    })?;
    run("linear/bias", &lb, &|t, bb| {
        let (x, w) = (t.constant(lx.clone()), t.constant(lw.clone()));
        let y = t.linear(x, w, Some(bb))?;
        project(t, y, 2)
    })?;

    let e1 = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let e2 = Tensor::randn(&[2, 3], 1.0, &mut rng);
    run("add", &e1, &|t, x| {
        let o = t.constant(e2.clone());
        let y = t.add(x, o)?;
        project(t, y, 3)
    })?;
    run("sub", &e1, &|t, x| {
        let o = t.constant(e2.clone());
        let y = t.sub(o, x)?;
        project(t, y, 3)
    })?;
    run("mul", &e1, &|t, x| {
        let o = t.constant(e2.clone());
        let y = t.mul(x, o)?;
        let y = t.mul(y, x)?;
        project(t, y, 3)
    })?;
    run("scale+add_scalar+mean", &e1, &|t, x| {
        let y = t.scale(x, -2.5);
        let y = t.add_scalar(y, 0.3);
        let y = t.mul(y, y)?;
        Ok(t.mean(y))
    })?;
    run("sigmoid", &e1, &|t, x| {
        let y = t.sigmoid(x);
        project(t, y, 4)
    })?;
    let rp = away_from_zero(&[3, 4], &mut rng);
    run("relu", &rp, &|t, x| {
        let y = t.relu(x);
        project(t, y, 5)
    })?;
    run("reshape", &e1, &|t, x| {
        let y = t.reshape(x, &[3, 2])?;
        project(t, y, 6)
    })?;

    let m1 = Tensor::randn(&[2, 2, 3, 2], 1.0, &mut rng);
    let m2 = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng);
    run("concat_channels", &m1, &|t, x| {
        let o = t.constant(m2.clone());
        let y = t.concat_channels(&[o, x])?;
        project(t, y, 7)
    })?;
    run("slice_rows", &m2, &|t, x| {
        let y = t.slice_rows(x, 1, 3)?;
        project(t, y, 8)
    })?;

    let cx = Tensor::randn(&[2, 3, 5, 4], 1.0, &mut rng);
    let cw = Tensor::randn(&[2, 3, 3, 3], 0.5, &mut rng);
    let cb = Tensor::randn(&[2], 0.5, &mut rng);
    run("conv2d/input", &cx, &|t, x| {
        let (w, bb) = (t.constant(cw.clone()), t.constant(cb.clone()));
        let y = t.conv2d(x, w, Some(bb), (2, 1), (1, 1))?;
        project(t, y, 9)
    })?;
    run("conv2d/weight", &cw, &|t, w| {
        let (x, bb) = (t.constant(cx.clone()), t.constant(cb.clone()));
        let y = t.conv2d(x, w, Some(bb), (2, 1), (1, 1))?;
        project(t, y, 9)
    })?;
    run("conv2d/bias", &cb, &|t, bb| {
        let (x, w) = (t.constant(cx.clone()), t.constant(cw.clone()));
        let y = t.conv2d(x, w, Some(bb), (2, 1), (1, 1))?;
        project(t, y, 9)
    })?;

    let bx = Tensor::randn(&[4, 3, 2, 2], 2.0, &mut rng);
    let bg = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut rng);
    let bbeta = Tensor::randn(&[3], 1.0, &mut rng);
    let rm = Tensor::randn(&[3], 1.0, &mut rng);
    let rv = Tensor::rand_uniform(&[3], 0.5, 2.0, &mut rng);
    run("batch_norm/train/input", &bx, &|t, x| {
        let (g, bb) = (t.constant(bg.clone()), t.constant(bbeta.clone()));
        let (y, _) = t.batch_norm(x, g, bb, None, 1e-5)?;
        project(t, y, 10)
    })?;
    run("batch_norm/train/gamma", &bg, &|t, g| {
        let (x, bb) = (t.constant(bx.clone()), t.constant(bbeta.clone()));
        let (y, _) = t.batch_norm(x, g, bb, None, 1e-5)?;
        project(t, y, 10)
    })?;
    run("batch_norm/train/beta", &bbeta, &|t, bb| {
        let (x, g) = (t.constant(bx.clone()), t.constant(bg.clone()));
        let (y, _) = t.batch_norm(x, g, bb, None, 1e-5)?;
        project(t, y, 10)
    })?;
    run("batch_norm/eval/input", &bx, &|t, x| {
        let (g, bb) = (t.constant(bg.clone()), t.constant(bbeta.clone()));
        let (y, _) = t.batch_norm(x, g, bb, Some((rm.data(), rv.data())), 1e-5)?;
        project(t, y, 10)
    })?;
    let bx2 = Tensor::randn(&[5, 3], 2.0, &mut rng);
    run("batch_norm/train/vector", &bx2, &|t, x| {
        let (g, bb) = (t.constant(bg.clone()), t.constant(bbeta.clone()));
        let (y, _) = t.batch_norm(x, g, bb, None, 1e-5)?;
        project(t, y, 11)
    })?;

    let px = Tensor::randn(&[2, 2, 4, 6], 1.0, &mut rng);
    for kind in [PoolKind::Max, PoolKind::Avg] {
        let tag = if kind == PoolKind::Max { "max" } else { "avg" };
        run(&format!("pool2d/{tag}"), &px, &|t, x| {
            let y = t.pool2d(x, kind, (2, 3), (2, 3))?;
            project(t, y, 12)
        })?;
        run(&format!("channel_pool/{tag}"), &px, &|t, x| {
            let y = t.channel_pool(x, kind)?;
            project(t, y, 13)
        })?;
        run(&format!("global_pool/{tag}"), &px, &|t, x| {
            let y = t.global_pool(x, kind)?;
            project(t, y, 14)
        })?;
    }

    let gx = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
    let gs = Tensor::rand_uniform(&[2, 1, 2, 2], 0.1, 0.9, &mut rng);
    let gc = Tensor::rand_uniform(&[2, 3], 0.1, 0.9, &mut rng);
    run("gate_spatial/input", &gx, &|t, x| {
        let m = t.constant(gs.clone());
        let y = t.gate_spatial(x, m)?;
        project(t, y, 15)
    })?;
    run("gate_spatial/map", &gs, &|t, m| {
        let x = t.constant(gx.clone());
        let y = t.gate_spatial(x, m)?;
        project(t, y, 15)
    })?;
    run("gate_channel/input", &gx, &|t, x| {
        let m = t.constant(gc.clone());
        let y = t.gate_channel(x, m)?;
        project(t, y, 16)
    })?;
    run("gate_channel/map", &gc, &|t, m| {
        let x = t.constant(gx.clone());
        let y = t.gate_channel(x, m)?;
        project(t, y, 16)
    })?;

    let logits = Tensor::randn(&[4, 5], 2.0, &mut rng);
    let targets = Tensor::from_fn(&[4, 5], |i| if i % 5 == (i / 5) % 5 { 0.92 } else { 0.02 });
    run("softmax_cross_entropy", &logits, &|t, z| {
        t.softmax_cross_entropy(z, &targets)
    })?;

    let feats = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let labels = [0, 0, 1, 1, 2, 2];
    for (tag, distance, margin) in [
        ("batch_hard_triplet/euclidean", Distance::Euclidean, 3.0),
        ("batch_hard_triplet/squared", Distance::SquaredEuclidean, 10.0),
    ] {
        run(tag, &feats, &|t, f| {
            Ok(t.batch_hard_triplet(f, &labels, margin, distance)?.0)
        })?;
    }
    Ok(out)
}

#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let results = primitive_suite(2024, 1e-5).unwrap();
        assert!(results.len() >= 30);
        for r in &results {
            assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
        }
    }
}
