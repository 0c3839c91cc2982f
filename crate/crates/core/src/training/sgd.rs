use crate::nn::{ParamId, ParamStore};
use crate::tape::{Gradients, Var};
use crate::tensor::Tensor;

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v − lr·(g + λ·p)`, `p ← p + v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates every bound parameter. Parameters the loss did not reach
    /// still decay and carry momentum.
    pub fn step(&mut self, store: &mut ParamStore, bound: &[(ParamId, Var)], grads: &Gradients, lr: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for &(id, var) in bound {
            let p = store.get_mut(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(var).map(|g| g.data());
            let (mu, wd) = (self.momentum, self.weight_decay);
            for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                *vv = mu * *vv - lr * (gi + wd * *pv);
                *pv += *vv;
            }
        }
    }
}
