//! End-to-end model assembly: encoders, the two conditioning stages (or an
//! ablation variant), the prediction head, and the batch objective.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::{BackboneConfig, GeometryEncoder, GeometryInput, LoraSet, Mode, SubstrateEncoder, SurrogateEncoder};
use crate::error::{Error, Result};
use crate::esda::{esda_loss_node, KernelConfig};
use crate::gmoe::{balance_loss_node, GateReport, GmoeParams, PocketIndexSet, Routing};
use crate::graph::{Graph, NodeId};
use crate::init::{mix64, Initializer};
use crate::mrca::MrcaParams;
use crate::objective::{HeadParams, LossWeights};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Substrate recognition, then geometry-routed adaptation.
    Staged,
    /// Pooled enzyme, substrate and geometry summaries concatenated into an MLP.
    ConcatMlp,
    /// Geometry-routed adaptation on the raw enzyme stream, then substrate recognition.
    GeometryFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskLoss {
    /// Heteroscedastic Gaussian negative log-likelihood.
    Nll,
    /// Squared error on the mean channel; the variance channel receives no gradient.
    SquaredError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub d_k: usize,
    pub experts: usize,
    pub top_k: usize,
    pub expert_rank: usize,
    pub routing: Routing,
    pub use_mrca: bool,
    pub use_gmoe: bool,
    pub fusion: FusionMode,
    pub mrca_post_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            seed: 0,
            d_k: backbone.d,
            backbone,
            experts: 4,
            top_k: 2,
            expert_rank: 2,
            routing: Routing::Geometry,
            use_mrca: true,
            use_gmoe: true,
            fusion: FusionMode::Staged,
            mrca_post_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.d == 0 || b.layers == 0 || b.max_len == 0 || self.d_k == 0 {
            return Err(Error::Param("dimensions must be positive".into()));
        }
        if b.lora_rank == 0 || !(b.lora_scale > 0.0) || !(0.0..1.0).contains(&b.lora_dropout) {
            return Err(Error::Param(format!(
                "LoRA needs rank >= 1, scale > 0 and dropout in [0, 1), got {}, {}, {}",
                b.lora_rank, b.lora_scale, b.lora_dropout
            )));
        }
        if self.top_k == 0 || self.top_k > self.experts || self.expert_rank == 0 {
            return Err(Error::Param(format!(
                "need 1 <= k <= n and r >= 1, got n={} k={} r={}",
                self.experts, self.top_k, self.expert_rank
            )));
        }
        if self.fusion == FusionMode::GeometryFirst && !(self.use_mrca && self.use_gmoe) {
            return Err(Error::Param("geometry-first fusion needs both conditioning stages".into()));
        }
        Ok(())
    }
}

/// One tokenized enzyme–substrate pair with its pocket.
#[derive(Clone, Debug)]
pub struct SampleInput {
    pub enzyme: Vec<u8>,
    pub substrate: Vec<u8>,
    pub pocket: PocketIndexSet,
    pub geometry: GeometryInput,
}

#[derive(Clone, Debug)]
struct ConcatParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct StageNodes {
    pub z0: NodeId,
    pub z1: NodeId,
    pub z2: NodeId,
}

/// The recorded forward pass of a single sample.
pub struct SampleForward {
    pub graph: Graph,
    /// `1 × 2` head output `(μ, s)`.
    pub head: NodeId,
    pub stages: Option<StageNodes>,
    pub gate: Option<(NodeId, GateReport)>,
}

impl SampleForward {
    pub fn mu(&self) -> f64 {
        self.graph.value(self.head).data()[0]
    }

    pub fn log_var(&self) -> f64 {
        self.graph.value(self.head).data()[1]
    }

    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> ParamGrads {
        self.graph.backward(seeds).into_params()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    encoder: SurrogateEncoder,
    lora: LoraSet,
    substrate: SubstrateEncoder,
    geometry: GeometryEncoder,
    mrca: Option<MrcaParams>,
    gmoe: Option<GmoeParams>,
    concat: Option<ConcatParams>,
    head: HeadParams,
}

fn stream(seed: u64, tag: u64) -> Initializer {
    Initializer::new(mix64(seed ^ mix64(tag)))
}

impl Model {
    /// Registers every parameter in a fresh store. Each component draws from
    /// its own seeded stream, so ablations share the backbone and encoders.
    pub fn new(config: ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.backbone.d;
        let seed = config.seed;
        let encoder = SurrogateEncoder::init(&mut store, &config.backbone, &mut stream(seed, 1));
        let lora = LoraSet::init(&mut store, &config.backbone, &mut stream(seed, 2));
        let substrate = SubstrateEncoder::init(&mut store, d, &mut stream(seed, 3));
        let geometry = GeometryEncoder::init(&mut store, d, &mut stream(seed, 4));
        let staged = config.fusion != FusionMode::ConcatMlp;
        let mrca = (staged && config.use_mrca).then(|| {
            MrcaParams::init(&mut store, "mrca", d, config.d_k, config.mrca_post_norm, &mut stream(seed, 5))
        });
        let gmoe = if staged && config.use_gmoe {
            Some(GmoeParams::init(
                &mut store,
                "gmoe",
                d,
                config.experts,
                config.top_k,
                config.expert_rank,
                config.routing,
                &mut stream(seed, 6),
            )?)
        } else {
            None
        };
        let concat = (!staged).then(|| {
            let mut init = stream(seed, 7);
            ConcatParams {
                w1: store.register("fusion.w1", init.glorot(3 * d, d), false, true),
                b1: store.register("fusion.b1", Tensor::zeros(1, d), false, false),
                w2: store.register("fusion.w2", init.glorot(d, d), false, true),
                b2: store.register("fusion.b2", Tensor::zeros(1, d), false, false),
            }
        });
        let head = HeadParams::init(&mut store, "head", d, &mut stream(seed, 8));
        let model = Self {
            config,
            encoder,
            lora,
            substrate,
            geometry,
            mrca,
            gmoe,
            concat,
            head,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(n, k)` when the mixture-of-experts stage is active.
    pub fn expert_shape(&self) -> Option<(usize, usize)> {
        self.gmoe.as_ref().map(|m| (m.n, m.k))
    }

    pub fn forward(&self, store: &ParamStore, input: &SampleInput, mode: Mode) -> Result<SampleForward> {
        if input.pocket.indices().last().is_some_and(|&i| i >= input.enzyme.len()) {
            return Err(Error::Pocket(format!(
                "pocket index out of range for {} residues",
                input.enzyme.len()
            )));
        }
        let mut g = Graph::new();
        let h_e = self.encoder.encode(&mut g, store, Some(&self.lora), &input.enzyme, mode)?;
        let h_m = self.substrate.encode(&mut g, store, &input.substrate)?;
        let h_g = self.geometry.encode(&mut g, store, &input.geometry)?;
        let (h2, stages, gate) = match (self.config.fusion, &self.concat) {
            (FusionMode::ConcatMlp, Some(c)) => {
                let parts = [g.mean_rows(h_e)?, g.mean_rows(h_m)?, g.mean_rows(h_g)?];
                let x = g.concat_cols(&parts)?;
                let (w1, b1) = (g.param(store, c.w1), g.param(store, c.b1));
                let h = g.matmul(x, w1)?;
                let h = g.add_row(h, b1)?;
                let h = g.gelu(h);
                let (w2, b2) = (g.param(store, c.w2), g.param(store, c.b2));
                let h = g.matmul(h, w2)?;
                (g.add_row(h, b2)?, None, None)
            }
            (FusionMode::GeometryFirst, _) => {
                let (mrca, gmoe) = match (&self.mrca, &self.gmoe) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::Param("geometry-first fusion needs both stages".into())),
                };
                let (mixed, route) = gmoe.mix(&mut g, store, h_e, h_g, &input.pocket)?;
                let h1 = mrca.forward(&mut g, store, mixed, h_m)?.h1;
                let pooled = g.mean_rows(h1)?;
                let h2 = gmoe.aggregate(&mut g, store, pooled)?;
                let stages = StageNodes {
                    z0: g.mean_rows(h_e)?,
                    z1: g.mean_rows(mixed)?,
                    z2: h2,
                };
                (h2, Some(stages), Some((route.alpha_tilde, route.report)))
            }
            _ => {
                let h1 = match &self.mrca {
                    Some(m) => m.forward(&mut g, store, h_e, h_m)?.h1,
                    None => h_e,
                };
                let (h2, gate) = match &self.gmoe {
                    Some(m) => {
                        let out = m.forward(&mut g, store, h1, h_g, &input.pocket)?;
                        (out.h2, Some((out.route.alpha_tilde, out.route.report)))
                    }
                    None => (g.mean_rows(h1)?, None),
                };
                let stages = StageNodes {
                    z0: g.mean_rows(h_e)?,
                    z1: g.mean_rows(h1)?,
                    z2: h2,
                };
                (h2, Some(stages), gate)
            }
        };
        let head = self.head.forward(&mut g, store, h2)?;
        Ok(SampleForward {
            graph: g,
            head,
            stages,
            gate,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub use_esda: bool,
    pub kernel: KernelConfig,
    pub task: TaskLoss,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            use_esda: true,
            kernel: KernelConfig::MedianHeuristic,
            task: TaskLoss::Nll,
        }
    }
}

/// Loss terms of one mini-batch plus the output gradients to push back
/// through each sample's recorded forward pass.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: f64,
    pub task: f64,
    pub balance: Option<f64>,
    pub alignment: Option<f64>,
    pub bandwidths: Option<[f64; 2]>,
    pub seeds: Vec<Vec<(NodeId, Tensor)>>,
}

/// Composes `L_task + λ1·L_balance + λ2·L_align` over per-sample forwards.
/// The alignment term is skipped (reported as `None`) when disabled, when
/// the batch has fewer than two samples, or when the fusion mode has no stages.
pub fn batch_loss(forwards: &[SampleForward], targets: &[f64], config: &ObjectiveConfig) -> Result<BatchLoss> {
    if forwards.is_empty() || forwards.len() != targets.len() {
        return Err(Error::Precondition(format!(
            "batch of {} forwards against {} targets",
            forwards.len(),
            targets.len()
        )));
    }
    let batch = forwards.len();
    let mut g = Graph::new();
    let heads: Vec<NodeId> = forwards.iter().map(|f| g.input(f.graph.value(f.head).clone())).collect();
    let mut task_sum: Option<NodeId> = None;
    for (&h, &z) in heads.iter().zip(targets) {
        let l = match config.task {
            TaskLoss::Nll => g.gaussian_nll(h, z)?,
            TaskLoss::SquaredError => g.squared_error(h, z)?,
        };
        task_sum = Some(match task_sum {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let task = g.scale(task_sum.expect("non-empty batch"), 1.0 / batch as f64);
    let mut total = task;

    let mut gate_inputs = Vec::new();
    let mut balance = None;
    let gates: Option<Vec<&(NodeId, GateReport)>> = forwards.iter().map(|f| f.gate.as_ref()).collect();
    if let Some(gates) = gates {
        for (_, report) in &gates {
            gate_inputs.push(g.input(Tensor::row_vector(report.alpha_tilde.clone())?));
        }
        let n = gates[0].1.alpha_tilde.len();
        let k = gates[0].1.selected.len();
        let l = balance_loss_node(&mut g, &gate_inputs, n, k)?;
        balance = Some(g.value(l).data()[0]);
        let weighted = g.scale(l, config.weights.balance);
        total = g.add(total, weighted)?;
    }

    let mut stage_inputs = Vec::new();
    let mut alignment = None;
    let mut bandwidths = None;
    let stages: Option<Vec<StageNodes>> = forwards.iter().map(|f| f.stages).collect();
    if let (true, Some(stages)) = (config.use_esda && batch >= 2, stages) {
        for (f, s) in forwards.iter().zip(&stages) {
            let v = |id| f.graph.value(id).clone();
            stage_inputs.push([g.input(v(s.z0)), g.input(v(s.z1)), g.input(v(s.z2))]);
        }
        let col = |j: usize| stage_inputs.iter().map(|s| s[j]).collect::<Vec<_>>();
        let (l, sigmas) = esda_loss_node(&mut g, &col(0), &col(1), &col(2), config.kernel)?;
        alignment = Some(g.value(l).data()[0]);
        bandwidths = Some(sigmas);
        let weighted = g.scale(l, config.weights.alignment);
        total = g.add(total, weighted)?;
    }

    let total_value = g.value(total).data()[0];
    if !total_value.is_finite() {
        return Err(Error::NonFiniteLoss(total_value));
    }
    let grads = g.backward_scalar(total);
    let mut seeds = Vec::with_capacity(batch);
    for (b, f) in forwards.iter().enumerate() {
        let mut s = Vec::new();
        let mut push = |node: NodeId, input: NodeId| {
            if let Some(t) = grads.node(input) {
                s.push((node, t.clone()));
            }
        };
        push(f.head, heads[b]);
        if let (Some((node, _)), Some(&input)) = (&f.gate, gate_inputs.get(b)) {
            push(*node, input);
        }
        if let (Some(st), Some(inputs)) = (f.stages, stage_inputs.get(b)) {
            push(st.z0, inputs[0]);
            push(st.z1, inputs[1]);
            push(st.z2, inputs[2]);
        }
        seeds.push(s);
    }
    Ok(BatchLoss {
        total: total_value,
        task: g.value(task).data()[0],
        balance,
        alignment,
        bandwidths,
        seeds,
    })
}

/// Forward, loss and parameter gradients for a batch, one sample at a time.
pub fn loss_and_grads(
    model: &Model,
    store: &ParamStore,
    inputs: &[SampleInput],
    targets: &[f64],
    modes: &[Mode],
    config: &ObjectiveConfig,
) -> Result<(BatchLoss, ParamGrads)> {
    if modes.len() != inputs.len() {
        return Err(Error::Precondition("one mode per sample required".into()));
    }
    let forwards = inputs
        .iter()
        .zip(modes)
        .map(|(x, &m)| model.forward(store, x, m))
        .collect::<Result<Vec<_>>>()?;
    let loss = batch_loss(&forwards, targets, config)?;
    let mut grads = ParamGrads::new(store.len());
    for (f, s) in forwards.iter().zip(&loss.seeds) {
        grads.merge(&f.backward(s));
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::init::Initializer;

    fn micro_config(fusion: FusionMode) -> ModelConfig {
        ModelConfig {
            seed: 3,
            backbone: BackboneConfig {
                d: 8,
                layers: 1,
                max_len: 16,
                lora_rank: 2,
                lora_scale: 4.0,
                lora_dropout: 0.0,
            },
            d_k: 8,
            experts: 4,
            top_k: 2,
            expert_rank: 2,
            fusion,
            ..ModelConfig::default()
        }
    }

    fn sample(init: &mut Initializer, i: u8) -> SampleInput {
        let enzyme: Vec<u8> = (0..6).map(|j| (i * 3 + j * 5) % 20).collect();
        SampleInput {
            enzyme: enzyme.clone(),
            substrate: (0..4).map(|j| (i * 7 + j * 11) % 60).collect(),
            pocket: PocketIndexSet::new(alloc::vec![1, 2, 4], 6).unwrap(),
            geometry: GeometryInput::new(init.uniform(3, 3, 4.0), alloc::vec![enzyme[1], enzyme[2], enzyme[4]]).unwrap(),
        }
    }

    fn batch() -> (Vec<SampleInput>, Vec<f64>) {
        let mut init = Initializer::new(5);
        let xs = (0..3).map(|i| sample(&mut init, i)).collect();
        (xs, alloc::vec![0.3, -0.8, 1.1])
    }

    #[test]
    fn fusion_modes_produce_head_outputs() {
        let (xs, _) = batch();
        for fusion in [FusionMode::Staged, FusionMode::ConcatMlp, FusionMode::GeometryFirst] {
            let (model, store) = Model::new(micro_config(fusion)).unwrap();
            let f = model.forward(&store, &xs[0], Mode::Eval).unwrap();
            assert_eq!(f.graph.value(f.head).shape(), (1, 2));
            assert_eq!(f.stages.is_some(), fusion != FusionMode::ConcatMlp);
            assert_eq!(f.gate.is_some(), fusion != FusionMode::ConcatMlp);
        }
    }

    #[test]
    fn ablations_share_the_encoders() {
        let (a, sa) = Model::new(micro_config(FusionMode::Staged)).unwrap();
        let (_, sb) = Model::new(micro_config(FusionMode::ConcatMlp)).unwrap();
        let _ = a;
        for name in ["backbone.layer0.wq", "lora.layer0.q.down", "substrate.embed", "geometry.w1", "head.w1"] {
            let (ia, ib) = (sa.id(name).unwrap(), sb.id(name).unwrap());
            assert_eq!(sa.value(ia), sb.value(ib), "{name}");
        }
    }

    #[test]
    fn geometry_first_requires_both_stages() {
        let mut c = micro_config(FusionMode::GeometryFirst);
        c.use_mrca = false;
        assert!(Model::new(c).is_err());
    }

    #[test]
    fn single_sample_batch_skips_alignment() {
        let (xs, zs) = batch();
        let (model, store) = Model::new(micro_config(FusionMode::Staged)).unwrap();
        let (loss, _) = loss_and_grads(&model, &store, &xs[..1], &zs[..1], &[Mode::Eval], &ObjectiveConfig::default()).unwrap();
        assert!(loss.alignment.is_none());
        assert!(loss.balance.is_some());
    }

    #[test]
    fn total_matches_weighted_terms() {
        let (xs, zs) = batch();
        let (model, store) = Model::new(micro_config(FusionMode::Staged)).unwrap();
        let cfg = ObjectiveConfig::default();
        let (loss, _) = loss_and_grads(&model, &store, &xs, &zs, &[Mode::Eval; 3], &cfg).unwrap();
        let expect = loss.task + 0.01 * loss.balance.unwrap() + 0.1 * loss.alignment.unwrap();
        assert!((loss.total - expect).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let (xs, zs) = batch();
        for fusion in [FusionMode::Staged, FusionMode::GeometryFirst, FusionMode::ConcatMlp] {
            let (model, store) = Model::new(micro_config(fusion)).unwrap();
            let base = ObjectiveConfig::default();
            let (loss, _) = loss_and_grads(&model, &store, &xs, &zs, &[Mode::Eval; 3], &base).unwrap();
            let kernel = match loss.bandwidths {
                Some([a, b]) => KernelConfig::FixedPair(a, b),
                None => KernelConfig::MedianHeuristic,
            };
            let cfg = ObjectiveConfig { kernel, ..base };
            let reports = grad_check(&store, 1e-5, |s, want| {
                let (l, g) = loss_and_grads(&model, s, &xs, &zs, &[Mode::Eval; 3], &cfg)?;
                Ok((l.total, want.then_some(g)))
            })
            .unwrap();
            for r in reports {
                assert!(r.max_rel_error < 1e-4, "{fusion:?} {}: {}", r.name, r.max_rel_error);
            }
        }
    }
}
