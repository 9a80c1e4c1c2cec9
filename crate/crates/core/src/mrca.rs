//! Substrate recognition: single-head cross-attention from enzyme residues
//! (queries) to substrate tokens (keys/values), fused back into the enzyme
//! stream with a residual connection and layer normalization.

use alloc::format;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::init::Initializer;
use crate::math;
use crate::ops::LAYER_NORM_EPS;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MrcaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// `d_k × D` output map, present only when `d_k ≠ D`.
    pub wo: Option<ParamId>,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub d: usize,
    pub d_k: usize,
    /// Layer norm after the residual add (default) or on the query input.
    pub post_norm: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct MrcaNodes {
    pub h1: NodeId,
    pub attention: NodeId,
}

impl MrcaParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_k: usize,
        post_norm: bool,
        init: &mut Initializer,
    ) -> Self {
        let name = |s: &str| format!("{prefix}.{s}");
        let wq = store.register(&name("wq"), init.glorot(d, d_k), false, true);
        let wk = store.register(&name("wk"), init.glorot(d, d_k), false, true);
        let wv = store.register(&name("wv"), init.glorot(d, d_k), false, true);
        let wo = (d_k != d).then(|| store.register(&name("wo"), init.glorot(d_k, d), false, true));
        let ln_gain = store.register(&name("ln.gain"), Tensor::filled(1, d, 1.0), false, false);
        let ln_bias = store.register(&name("ln.bias"), Tensor::zeros(1, d), false, false);
        Self {
            wq,
            wk,
            wv,
            wo,
            ln_gain,
            ln_bias,
            d,
            d_k,
            post_norm,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h_e: NodeId, h_m: NodeId) -> Result<MrcaNodes> {
        let (se, sm) = (g.value(h_e).shape(), g.value(h_m).shape());
        if se.1 != self.d || sm.1 != self.d {
            return Err(Error::Shape {
                op: "mrca",
                left: se,
                right: sm,
            });
        }
        if se.0 == 0 || sm.0 == 0 {
            return Err(Error::Precondition(format!(
                "cross-attention needs at least one token per side, got {se:?} and {sm:?}"
            )));
        }
        let gain = g.param(store, self.ln_gain);
        let bias = g.param(store, self.ln_bias);
        let query_in = if self.post_norm {
            h_e
        } else {
            g.layer_norm(h_e, gain, bias, LAYER_NORM_EPS)?
        };
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let q = g.matmul(query_in, wq)?;
        let k = g.matmul(h_m, wk)?;
        let v = g.matmul(h_m, wv)?;
        let scores = g.matmul_bt(q, k)?;
        let scores = g.scale(scores, 1.0 / math::sqrt(self.d_k as f64));
        let attention = g.softmax_rows(scores);
        let mut z = g.matmul(attention, v)?;
        if let Some(wo) = self.wo {
            let wo = g.param(store, wo);
            z = g.matmul(z, wo)?;
        }
        let fused = g.add(h_e, z)?;
        let h1 = if self.post_norm {
            g.layer_norm(fused, gain, bias, LAYER_NORM_EPS)?
        } else {
            fused
        };
        Ok(MrcaNodes { h1, attention })
    }
}

/// Returns `(H⁽¹⁾, A_em)` for constant inputs.
pub fn mrca_forward(store: &ParamStore, params: &MrcaParams, h_e: &Tensor, h_m: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let e = g.constant(h_e.clone());
    let m = g.constant(h_m.clone());
    let out = params.forward(&mut g, store, e, m)?;
    Ok((g.value(out.h1).clone(), g.value(out.attention).clone()))
}
