//! Prediction head and loss composition in log10 target space.

use alloc::format;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::init::Initializer;
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// `½·e^(−s)·(z − μ)² + ½·s` with `s` clamped to `[-10, 10]`.
pub fn nll(z: f64, mu: f64, s: f64) -> f64 {
    let s = s.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
    let r = z - mu;
    0.5 * math::exp(-s) * r * r + 0.5 * s
}

/// `(∂/∂μ, ∂/∂s)` of [`nll`]; the log-variance gradient is zero where the clamp is active.
pub fn nll_grad(z: f64, mu: f64, s: f64) -> (f64, f64) {
    let clamped = s.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
    let inv_var = math::exp(-clamped);
    let r = z - mu;
    let dmu = -inv_var * r;
    let ds = if s == clamped { 0.5 - 0.5 * inv_var * r * r } else { 0.0 };
    (dmu, ds)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub balance: f64,
    pub alignment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            balance: 0.01,
            alignment: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(balance: f64, alignment: f64) -> Result<Self> {
        if !(balance >= 0.0 && alignment >= 0.0) {
            return Err(Error::Param(format!(
                "loss weights must be non-negative, got {balance} and {alignment}"
            )));
        }
        Ok(Self { balance, alignment })
    }
}

pub fn total_loss(task: f64, balance: f64, alignment: f64, w: LossWeights) -> f64 {
    task + w.balance * balance + w.alignment * alignment
}

/// Point prediction `10^μ` and the predicted standard deviation in log10 units.
pub fn predict(mu: f64, s: f64) -> (f64, f64) {
    (math::powf(10.0, mu), math::sqrt(math::exp(s)))
}

/// `D → D/2 → 2` GELU MLP producing `(μ, s)`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, init: &mut Initializer) -> Self {
        let hidden = (d / 2).max(1);
        let name = |s: &str| format!("{prefix}.{s}");
        Self {
            w1: store.register(&name("w1"), init.glorot(d, hidden), false, true),
            b1: store.register(&name("b1"), Tensor::zeros(1, hidden), false, false),
            w2: store.register(&name("w2"), init.glorot(hidden, 2), false, true),
            b2: store.register(&name("b2"), Tensor::zeros(1, 2), false, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h2: NodeId) -> Result<NodeId> {
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let h = g.matmul(h2, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let out = g.matmul(h, w2)?;
        g.add_row(out, b2)
    }
}

/// Returns `(μ, s)` for a `1 × D` input.
pub fn head_forward(store: &ParamStore, params: &HeadParams, h2: &Tensor) -> Result<(f64, f64)> {
    if h2.rows() != 1 {
        return Err(Error::Shape {
            op: "head_forward",
            left: h2.shape(),
            right: (1, h2.cols()),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(h2.clone());
    let out = params.forward(&mut g, store, x)?;
    let v = g.value(out).data();
    Ok((v[0], v[1]))
}
