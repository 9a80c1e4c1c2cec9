//! Geometry-aware mixture of experts.
//!
//! Each sample is routed once, from the concatenation of the pooled pocket
//! rows of `H⁽¹⁾` and the pooled geometry descriptors. The `k` most probable
//! experts are kept and their gates renormalized to sum to one. Experts are
//! low-rank, geometry-modulated updates applied only to pocket rows; every
//! other row passes through untouched. The gated expert outputs are summed,
//! mean-pooled over tokens and passed through a two-layer GELU MLP.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::init::Initializer;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Strictly increasing, non-empty residue indices into an enzyme sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PocketIndexSet(Vec<usize>);

impl PocketIndexSet {
    pub fn new(indices: Vec<usize>, seq_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Pocket("empty pocket".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Pocket("indices must be strictly increasing".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= seq_len) {
            return Err(Error::Pocket(format!(
                "index {bad} out of range for sequence length {seq_len}"
            )));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Gate on pooled pocket recognition features and pooled geometry.
    Geometry,
    /// Geometry-blind: gate on the token-mean of `H⁽¹⁾` only.
    Plain,
}

#[derive(Clone, Debug)]
pub struct ExpertParams {
    pub u: ParamId,
    pub v: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct GmoeParams {
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub experts: Vec<ExpertParams>,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub r: usize,
    pub routing: Routing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateReport {
    pub alpha: Vec<f64>,
    pub alpha_tilde: Vec<f64>,
    /// Selected expert indices in ascending order.
    pub selected: Vec<usize>,
    /// `v_emg`, the `1 × 2D` routing vector.
    pub routing: Tensor,
}

#[derive(Clone, Debug)]
pub struct RouteNodes {
    pub alpha: NodeId,
    pub alpha_tilde: NodeId,
    pub report: GateReport,
}

#[derive(Clone, Debug)]
pub struct GmoeNodes {
    /// Gate-weighted sum of expert outputs, `L_e × D`.
    pub mixed: NodeId,
    /// `H⁽²⁾`, `1 × D`.
    pub h2: NodeId,
    pub route: RouteNodes,
}

/// Indices of the `k` largest entries, ties broken by lower index, returned ascending.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

impl GmoeParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        n: usize,
        k: usize,
        r: usize,
        routing: Routing,
        init: &mut Initializer,
    ) -> Result<Self> {
        if k == 0 || k > n || r == 0 {
            return Err(Error::Param(format!("need 1 <= k <= n and r >= 1, got n={n} k={k} r={r}")));
        }
        let name = |s: &str| format!("{prefix}.{s}");
        let gate_w = store.register(&name("gate.w"), init.glorot(n, 2 * d), false, true);
        let gate_b = store.register(&name("gate.b"), Tensor::zeros(n, 1), false, false);
        let experts = (0..n)
            .map(|i| ExpertParams {
                u: store.register(&name(&format!("expert{i}.u")), init.glorot(r, d), false, true),
                v: store.register(&name(&format!("expert{i}.v")), init.glorot(d, r), false, true),
                b: store.register(&name(&format!("expert{i}.b")), init.glorot(r, d), false, true),
            })
            .collect();
        Ok(Self {
            gate_w,
            gate_b,
            experts,
            mlp_w1: store.register(&name("mlp.w1"), init.glorot(d, d), false, true),
            mlp_b1: store.register(&name("mlp.b1"), Tensor::zeros(1, d), false, false),
            mlp_w2: store.register(&name("mlp.w2"), init.glorot(d, d), false, true),
            mlp_b2: store.register(&name("mlp.b2"), Tensor::zeros(1, d), false, false),
            d,
            n,
            k,
            r,
            routing,
        })
    }

    pub fn route(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h1: NodeId,
        h_g: NodeId,
        pocket: &PocketIndexSet,
    ) -> Result<RouteNodes> {
        check_pocket(g, h1, pocket)?;
        let v = match self.routing {
            Routing::Geometry => {
                let rows = g.gather_rows(h1, pocket.indices())?;
                let p = g.mean_rows(rows)?;
                let q = g.mean_rows(h_g)?;
                g.concat_cols(&[p, q])?
            }
            Routing::Plain => {
                let p = g.mean_rows(h1)?;
                let zeros = g.constant(Tensor::zeros(1, self.d));
                g.concat_cols(&[p, zeros])?
            }
        };
        let w = g.param(store, self.gate_w);
        let b = g.param(store, self.gate_b);
        let logits = g.matmul_bt(v, w)?;
        let b = g.reshape(b, 1, self.n)?;
        let logits = g.add(logits, b)?;
        let alpha = g.softmax_rows(logits);
        let probs = g.value(alpha).data().to_vec();
        let selected = top_k_indices(&probs, self.k);
        let alpha_tilde = g.top_k_renorm(alpha, &selected)?;
        let report = GateReport {
            alpha: probs,
            alpha_tilde: g.value(alpha_tilde).data().to_vec(),
            selected,
            routing: g.value(v).clone(),
        };
        Ok(RouteNodes {
            alpha,
            alpha_tilde,
            report,
        })
    }

    /// `h_p + V_i · gelu(U_i h_p + B_i γ)` on pocket rows, identity elsewhere.
    pub fn expert(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        i: usize,
        h1: NodeId,
        gamma: NodeId,
        pocket: &PocketIndexSet,
    ) -> Result<NodeId> {
        let e = self
            .experts
            .get(i)
            .ok_or_else(|| Error::Param(format!("expert index {i} out of range for {} experts", self.n)))?;
        check_pocket(g, h1, pocket)?;
        let (u, v, b) = (g.param(store, e.u), g.param(store, e.v), g.param(store, e.b));
        let rows = g.gather_rows(h1, pocket.indices())?;
        let pre = g.matmul_bt(rows, u)?;
        let shift = g.matmul_bt(gamma, b)?;
        let pre = g.add_row(pre, shift)?;
        let act = g.gelu(pre);
        let delta = g.matmul_bt(act, v)?;
        g.scatter_add_rows(h1, delta, pocket.indices())
    }

    /// Routes and returns the gate-weighted sum of the selected experts (`L_e × D`).
    pub fn mix(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h1: NodeId,
        h_g: NodeId,
        pocket: &PocketIndexSet,
    ) -> Result<(NodeId, RouteNodes)> {
        let route = self.route(g, store, h1, h_g, pocket)?;
        let gamma = g.mean_rows(h_g)?;
        let mut mixed: Option<NodeId> = None;
        for &i in &route.report.selected {
            let out = self.expert(g, store, i, h1, gamma, pocket)?;
            let weighted = g.scale_by_entry(out, route.alpha_tilde, i)?;
            mixed = Some(match mixed {
                Some(acc) => g.add(acc, weighted)?,
                None => weighted,
            });
        }
        Ok((mixed.expect("k >= 1"), route))
    }

    /// The aggregation MLP over a `1 × D` pooled state.
    pub fn aggregate(&self, g: &mut Graph, store: &ParamStore, pooled: NodeId) -> Result<NodeId> {
        let (w1, b1) = (g.param(store, self.mlp_w1), g.param(store, self.mlp_b1));
        let h = g.matmul(pooled, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let (w2, b2) = (g.param(store, self.mlp_w2), g.param(store, self.mlp_b2));
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h1: NodeId,
        h_g: NodeId,
        pocket: &PocketIndexSet,
    ) -> Result<GmoeNodes> {
        let (mixed, route) = self.mix(g, store, h1, h_g, pocket)?;
        let pooled = g.mean_rows(mixed)?;
        let h2 = self.aggregate(g, store, pooled)?;
        Ok(GmoeNodes { mixed, h2, route })
    }
}

fn check_pocket(g: &Graph, h1: NodeId, pocket: &PocketIndexSet) -> Result<()> {
    let len = g.value(h1).rows();
    match pocket.indices().last() {
        None => Err(Error::Precondition("empty pocket".into())),
        Some(&last) if last >= len => Err(Error::Pocket(format!(
            "index {last} out of range for {len} residues"
        ))),
        _ => Ok(()),
    }
}

pub fn route(
    store: &ParamStore,
    params: &GmoeParams,
    h1: &Tensor,
    h_g: &Tensor,
    pocket: &PocketIndexSet,
) -> Result<GateReport> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(h1.clone()), g.constant(h_g.clone()));
    Ok(params.route(&mut g, store, a, b, pocket)?.report)
}

pub fn expert_forward(
    store: &ParamStore,
    params: &GmoeParams,
    i: usize,
    h1: &Tensor,
    h_g: &Tensor,
    pocket: &PocketIndexSet,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(h1.clone()), g.constant(h_g.clone()));
    let gamma = g.mean_rows(b)?;
    let out = params.expert(&mut g, store, i, a, gamma, pocket)?;
    Ok(g.value(out).clone())
}

pub fn gmoe_forward(
    store: &ParamStore,
    params: &GmoeParams,
    h1: &Tensor,
    h_g: &Tensor,
    pocket: &PocketIndexSet,
) -> Result<(Tensor, GateReport)> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(h1.clone()), g.constant(h_g.clone()));
    let out = params.forward(&mut g, store, a, b, pocket)?;
    Ok((g.value(out.h2).clone(), out.route.report))
}

/// Records `‖ᾱ − 1/n‖² + ‖ū − k/n‖²` over the batch's sparse gates.
///
/// The usage term is piecewise constant and enters as a constant.
pub fn balance_loss_node(g: &mut Graph, alpha_tilde: &[NodeId], n: usize, k: usize) -> Result<NodeId> {
    if alpha_tilde.is_empty() {
        return Err(Error::Precondition("balance loss needs at least one sample".into()));
    }
    let batch = alpha_tilde.len() as f64;
    let stacked = g.stack_rows(alpha_tilde)?;
    if g.value(stacked).cols() != n {
        return Err(Error::Shape {
            op: "balance_loss",
            left: g.value(stacked).shape(),
            right: (alpha_tilde.len(), n),
        });
    }
    let mut usage = alloc::vec![0.0; n];
    for &a in alpha_tilde {
        for (u, &v) in usage.iter_mut().zip(g.value(a).data()) {
            if v > 0.0 {
                *u += 1.0;
            }
        }
    }
    let usage_term: f64 = usage
        .iter()
        .map(|u| {
            let dev = u / batch - k as f64 / n as f64;
            dev * dev
        })
        .sum();
    let mean = g.mean_rows(stacked)?;
    let uniform = g.constant(Tensor::filled(1, n, 1.0 / n as f64));
    let dev = g.sub(mean, uniform)?;
    let importance = g.sum_squares(dev);
    let usage = g.constant(Tensor::filled(1, 1, usage_term));
    g.add(importance, usage)
}

pub fn balance_loss(reports: &[GateReport], n: usize, k: usize) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = reports
        .iter()
        .map(|r| Tensor::row_vector(r.alpha_tilde.clone()).map(|t| g.constant(t)))
        .collect::<Result<Vec<_>>>()?;
    let l = balance_loss_node(&mut g, &nodes, n, k)?;
    Ok(g.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn report(alpha_tilde: Vec<f64>) -> GateReport {
        GateReport {
            alpha: alpha_tilde.clone(),
            selected: alpha_tilde
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0.0)
                .map(|(i, _)| i)
                .collect(),
            alpha_tilde,
            routing: Tensor::zeros(1, 2),
        }
    }

    #[test]
    fn pocket_validation() {
        assert!(PocketIndexSet::new(vec![], 5).is_err());
        assert!(PocketIndexSet::new(vec![1, 1], 5).is_err());
        assert!(PocketIndexSet::new(vec![2, 1], 5).is_err());
        assert!(PocketIndexSet::new(vec![1, 5], 5).is_err());
        let p = PocketIndexSet::new(vec![0, 4], 5).unwrap();
        assert!(p.contains(4) && !p.contains(2));
    }

    #[test]
    fn top_k_renormalization_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row_vector(vec![0.4, 0.3, 0.2, 0.1]).unwrap());
        let sel = top_k_indices(g.value(a).data(), 2);
        assert_eq!(sel, vec![0, 1]);
        let t = g.top_k_renorm(a, &sel).unwrap();
        let v = g.value(t).data();
        assert!((v[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((v[1] - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[0.25; 4], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.1, 0.3, 0.3, 0.3], 2), vec![1, 2]);
    }

    #[test]
    fn zero_gate_routes_uniformly() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(2);
        let p = GmoeParams::init(&mut store, "gmoe", 4, 4, 2, 2, Routing::Geometry, &mut init).unwrap();
        store.value_mut(p.gate_w).fill(0.0);
        let h1 = init.uniform(5, 4, 1.0);
        let hg = init.uniform(3, 4, 1.0);
        let pocket = PocketIndexSet::new(vec![1, 3], 5).unwrap();
        let r = route(&store, &p, &h1, &hg, &pocket).unwrap();
        assert_eq!(r.alpha, vec![0.25; 4]);
        assert_eq!(r.selected, vec![0, 1]);
        assert_eq!(r.alpha_tilde, vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(r.routing.shape(), (1, 8));
    }

    #[test]
    fn invalid_config_and_expert_index() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(2);
        assert!(GmoeParams::init(&mut store, "a", 4, 4, 5, 2, Routing::Geometry, &mut init).is_err());
        assert!(GmoeParams::init(&mut store, "b", 4, 4, 0, 2, Routing::Geometry, &mut init).is_err());
        let p = GmoeParams::init(&mut store, "c", 4, 2, 1, 1, Routing::Geometry, &mut init).unwrap();
        let pocket = PocketIndexSet::new(vec![0], 2).unwrap();
        let err = expert_forward(&store, &p, 2, &Tensor::zeros(2, 4), &Tensor::zeros(1, 4), &pocket).unwrap_err();
        assert!(matches!(err, Error::Param(_)));
        let long = PocketIndexSet::new(vec![3], 4).unwrap();
        assert!(route(&store, &p, &Tensor::zeros(2, 4), &Tensor::zeros(1, 4), &long).is_err());
    }

    #[test]
    fn balance_loss_examples() {
        assert_eq!(balance_loss(&[report(vec![0.25; 4])], 4, 4).unwrap(), 0.0);
        let l = balance_loss(&[report(vec![1.0, 0.0, 0.0, 0.0])], 4, 1).unwrap();
        assert!((l - 1.5).abs() < 1e-12);
        let l = balance_loss(
            &[report(vec![0.5, 0.5, 0.0, 0.0]), report(vec![0.0, 0.0, 0.5, 0.5])],
            4,
            2,
        )
        .unwrap();
        assert_eq!(l, 0.0);
        assert!(balance_loss(&[], 4, 2).is_err());
    }

    #[test]
    fn balance_gradient_vanishes_at_uniform() {
        let mut g = Graph::new();
        let a = g.input(Tensor::row_vector(vec![0.5, 0.5, 0.0, 0.0]).unwrap());
        let b = g.input(Tensor::row_vector(vec![0.0, 0.0, 0.5, 0.5]).unwrap());
        let l = balance_loss_node(&mut g, &[a, b], 4, 2).unwrap();
        let grads = g.backward_scalar(l);
        for n in [a, b] {
            assert!(grads.node(n).unwrap().data().iter().all(|v| *v == 0.0));
        }
    }
}
