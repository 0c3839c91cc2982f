use crate::error::Result;
use crate::nn::{Ctx, Mode, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// 2-D convolution; weights are `C_out×C_in×kh×kw`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (c_in * kernel.0 * kernel.1) as f64;
        let w = Tensor::randn(&[c_out, c_in, kernel.0, kernel.1], (2.0 / fan_in).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), ParamKind::Trainable));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                ParamKind::Buffer,
            ),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        match cx.mode {
            Mode::Train => {
                let (y, stats) = cx.tape.batch_norm(x, gamma, beta, None, self.eps)?;
                if let Some(stats) = stats {
                    cx.bn_updates.push(super::BnUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        momentum: self.momentum,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = cx.store;
                let running = (store.get(self.running_mean).data(), store.get(self.running_var).data());
                let (y, _) = cx.tape.batch_norm(x, gamma, beta, Some(running), self.eps)?;
                Ok(y)
            }
        }
    }
}

/// Affine map `x·Wᵀ + b`; weights are `out×in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(in)`.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = Tensor::rand_uniform(&[d_out, d_in], -bound, bound, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable);
        let bias = bias.then(|| {
            let b = Tensor::rand_uniform(&[d_out], -bound, bound, rng);
            store.add(format!("{name}.bias"), b, ParamKind::Trainable)
        });
        Linear { weight, bias }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.tape.linear(x, w, b)
    }
}
