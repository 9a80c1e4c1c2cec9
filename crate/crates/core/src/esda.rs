//! Distribution alignment between stage representations.
//!
//! Each stage is summarized by its residue mean; a mini-batch MMD² with an
//! RBF kernel compares the substrate-conditioned and geometry-conditioned
//! summaries against the backbone summaries. The estimator drops the
//! within-set diagonals but keeps the `1/N²` normalization, so it is biased
//! and can be negative (`mmd2(S, S) = −2/|S|`).

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{self, Graph, NodeId};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummaries {
    pub z0: Tensor,
    pub z1: Tensor,
    pub z2: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelConfig {
    MedianHeuristic,
    Fixed(f64),
    /// Separate fixed bandwidths for the two alignment terms.
    FixedPair(f64, f64),
}

pub fn stage_summaries(h0: &Tensor, h1: &Tensor, h2: &Tensor) -> Result<StageSummaries> {
    if h0.shape() != h1.shape() {
        return Err(Error::Shape {
            op: "stage_summaries",
            left: h0.shape(),
            right: h1.shape(),
        });
    }
    if h2.shape() != (1, h0.cols()) {
        return Err(Error::Shape {
            op: "stage_summaries",
            left: h0.shape(),
            right: h2.shape(),
        });
    }
    Ok(StageSummaries {
        z0: graph::mean_rows(h0)?,
        z1: graph::mean_rows(h1)?,
        z2: h2.clone(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    math::exp(-sq_dist(a, b) / (2.0 * sigma * sigma))
}

pub fn rbf_kernel(a: &Tensor, b: &Tensor, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Precondition("kernel bandwidth must be positive".into()));
    }
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "rbf_kernel",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(kernel(a.data(), b.data(), sigma))
}

/// Median pairwise Euclidean distance over the rows of `points`, ignoring
/// zero distances; `1.0` when every pair coincides.
pub fn median_bandwidth_rows(points: &Tensor) -> Result<f64> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::Precondition("median heuristic needs at least two points".into()));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for p in 0..n {
        for q in p + 1..n {
            let d = math::sqrt(sq_dist(points.row(p), points.row(q)));
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    Ok(if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    })
}

pub fn median_bandwidth(points: &[Tensor]) -> Result<f64> {
    median_bandwidth_rows(&stack(points)?)
}

fn stack(points: &[Tensor]) -> Result<Tensor> {
    let Some(first) = points.first() else {
        return Err(Error::Precondition("empty point set".into()));
    };
    let cols = first.len();
    let mut data = Vec::with_capacity(points.len() * cols);
    for p in points {
        if p.len() != cols {
            return Err(Error::Shape {
                op: "stack",
                left: first.shape(),
                right: p.shape(),
            });
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(points.len(), cols, data)
}

fn within_sum(x: &Tensor, sigma: f64) -> f64 {
    let n = x.rows();
    let mut s = 0.0;
    for p in 0..n {
        for q in p + 1..n {
            s += kernel(x.row(p), x.row(q), sigma);
        }
    }
    2.0 * s
}

/// MMD² between the row sets of `a` (`N_a × D`) and `b` (`N_b × D`).
pub fn mmd2_rows(a: &Tensor, b: &Tensor, sigma: f64) -> Result<f64> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Precondition(alloc::format!(
            "MMD needs at least two samples per set, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "mmd2",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if !(sigma > 0.0) {
        return Err(Error::Precondition("kernel bandwidth must be positive".into()));
    }
    let (na, nb) = (a.rows() as f64, b.rows() as f64);
    let mut cross = 0.0;
    for p in 0..a.rows() {
        for q in 0..b.rows() {
            cross += kernel(a.row(p), b.row(q), sigma);
        }
    }
    Ok(within_sum(a, sigma) / (na * na) + within_sum(b, sigma) / (nb * nb) - 2.0 * cross / (na * nb))
}

/// Gradients of [`mmd2_rows`] with respect to every row of `a` and `b`, σ held fixed.
pub(crate) fn mmd2_rows_grad(a: &Tensor, b: &Tensor, sigma: f64) -> (Tensor, Tensor) {
    let (na, nb) = (a.rows() as f64, b.rows() as f64);
    let s2 = sigma * sigma;
    let mut ga = Tensor::zeros(a.rows(), a.cols());
    let mut gb = Tensor::zeros(b.rows(), b.cols());
    within_grad(a, s2, 2.0 / (na * na), &mut ga);
    within_grad(b, s2, 2.0 / (nb * nb), &mut gb);
    let c = 2.0 / (na * nb * s2);
    for p in 0..a.rows() {
        for q in 0..b.rows() {
            let (ap, bq) = (a.row(p), b.row(q));
            let k = kernel(ap, bq, sigma);
            for j in 0..a.cols() {
                let diff = ap[j] - bq[j];
                ga.row_mut(p)[j] += c * k * diff;
                gb.row_mut(q)[j] -= c * k * diff;
            }
        }
    }
    (ga, gb)
}

fn within_grad(x: &Tensor, s2: f64, coef: f64, out: &mut Tensor) {
    let sigma = math::sqrt(s2);
    for p in 0..x.rows() {
        for q in p + 1..x.rows() {
            let (xp, xq) = (x.row(p), x.row(q));
            let k = kernel(xp, xq, sigma);
            for j in 0..x.cols() {
                let g = coef * k * (xp[j] - xq[j]) / s2;
                out.row_mut(p)[j] -= g;
                out.row_mut(q)[j] += g;
            }
        }
    }
}

pub fn mmd2(za: &[Tensor], zb: &[Tensor], sigma: f64) -> Result<f64> {
    mmd2_rows(&stack(za)?, &stack(zb)?, sigma)
}

fn bandwidth(config: KernelConfig, term: usize, a: &Tensor, b: &Tensor) -> Result<f64> {
    let fixed = match config {
        KernelConfig::Fixed(s) => s,
        KernelConfig::FixedPair(s1, s2) => [s1, s2][term],
        KernelConfig::MedianHeuristic => {
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            return median_bandwidth_rows(&Tensor::new(a.rows() + b.rows(), a.cols(), data)?);
        }
    };
    if fixed > 0.0 {
        Ok(fixed)
    } else {
        Err(Error::Precondition("kernel bandwidth must be positive".into()))
    }
}

/// Alignment loss recorded on `g` from per-sample `1 × D` summaries.
/// Returns the loss node and the two bandwidths used.
pub fn esda_loss_node(
    g: &mut Graph,
    z0: &[NodeId],
    z1: &[NodeId],
    z2: &[NodeId],
    config: KernelConfig,
) -> Result<(NodeId, [f64; 2])> {
    if z0.len() < 2 || z1.len() != z0.len() || z2.len() != z0.len() {
        return Err(Error::Precondition(alloc::format!(
            "alignment needs a batch of at least two samples, got {}",
            z0.len()
        )));
    }
    let s0 = g.stack_rows(z0)?;
    let s1 = g.stack_rows(z1)?;
    let s2 = g.stack_rows(z2)?;
    let sigma1 = bandwidth(config, 0, g.value(s1), g.value(s0))?;
    let sigma2 = bandwidth(config, 1, g.value(s2), g.value(s0))?;
    let t1 = g.mmd2(s1, s0, sigma1)?;
    let t2 = g.mmd2(s2, s0, sigma2)?;
    Ok((g.add(t1, t2)?, [sigma1, sigma2]))
}

pub fn esda_loss(batch: &[StageSummaries], config: KernelConfig) -> Result<f64> {
    let mut g = Graph::new();
    let mut z = [Vec::new(), Vec::new(), Vec::new()];
    for s in batch {
        z[0].push(g.constant(s.z0.clone()));
        z[1].push(g.constant(s.z1.clone()));
        z[2].push(g.constant(s.z2.clone()));
    }
    let (l, _) = esda_loss_node(&mut g, &z[0], &z[1], &z[2], config)?;
    Ok(g.value(l).data()[0])
}
