//! Token-embedding streams feeding the staged conditioning.
//!
//! * enzyme residues: a frozen, randomly initialized pre-norm transformer
//!   stack with trainable low-rank adapters on the query and value projections;
//! * substrate characters: a learned embedding table;
//! * pocket geometry: pose-invariant distance statistics plus a residue
//!   identity embedding, mapped to `D` by a two-layer MLP.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::init::{unit_from_key, Initializer};
use crate::math;
use crate::ops::LAYER_NORM_EPS;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::{ENZYME_VOCAB, SUBSTRATE_VOCAB};

/// Coordinates enter the featurizer in units of 10 Å.
const DISTANCE_SCALE: f64 = 0.1;
const GEOMETRY_STATS: usize = 4;
/// Bound of the uniform initialization of learned token tables.
const EMBED_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub d: usize,
    pub layers: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub lora_dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            max_len: 64,
            lora_rank: 8,
            lora_scale: 16.0,
            lora_dropout: 0.1,
        }
    }
}

/// Whether stochastic layers are active. Dropout masks are a pure function
/// of `(seed, layer, projection, position, channel)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

/// Frozen surrogate protein encoder.
#[derive(Clone, Debug)]
pub struct SurrogateEncoder {
    config: BackboneConfig,
    embed: ParamId,
    layers: Vec<EncoderLayer>,
    final_gain: ParamId,
    final_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
}

/// Query and value adapters for every encoder layer.
#[derive(Clone, Debug)]
pub struct LoraSet {
    pub query: Vec<LoraAdapter>,
    pub value: Vec<LoraAdapter>,
}

fn frozen(store: &mut ParamStore, name: &str, t: Tensor, decay: bool) -> ParamId {
    store.register(name, t, true, decay)
}

impl SurrogateEncoder {
    pub fn init(store: &mut ParamStore, config: &BackboneConfig, init: &mut Initializer) -> Self {
        let d = config.d;
        let embed = frozen(store, "backbone.embed", init.uniform(ENZYME_VOCAB, d, 1.0), true);
        let layers = (0..config.layers)
            .map(|l| {
                let p = |s: &str| format!("backbone.layer{l}.{s}");
                EncoderLayer {
                    ln1_gain: frozen(store, &p("ln1.gain"), Tensor::filled(1, d, 1.0), false),
                    ln1_bias: frozen(store, &p("ln1.bias"), Tensor::zeros(1, d), false),
                    wq: frozen(store, &p("wq"), init.glorot(d, d), true),
                    wk: frozen(store, &p("wk"), init.glorot(d, d), true),
                    wv: frozen(store, &p("wv"), init.glorot(d, d), true),
                    wo: frozen(store, &p("wo"), init.glorot(d, d), true),
                    ln2_gain: frozen(store, &p("ln2.gain"), Tensor::filled(1, d, 1.0), false),
                    ln2_bias: frozen(store, &p("ln2.bias"), Tensor::zeros(1, d), false),
                    ff1_w: frozen(store, &p("ff1.w"), init.glorot(d, 4 * d), true),
                    ff1_b: frozen(store, &p("ff1.b"), Tensor::zeros(1, 4 * d), false),
                    ff2_w: frozen(store, &p("ff2.w"), init.glorot(4 * d, d), true),
                    ff2_b: frozen(store, &p("ff2.b"), Tensor::zeros(1, d), false),
                }
            })
            .collect();
        let final_gain = frozen(store, "backbone.final.gain", Tensor::filled(1, d, 1.0), false);
        let final_bias = frozen(store, "backbone.final.bias", Tensor::zeros(1, d), false);
        Self {
            config: config.clone(),
            embed,
            layers,
            final_gain,
            final_bias,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Records the encoder on `g` and returns the `L_e × D` residue embeddings.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        adapters: Option<&LoraSet>,
        tokens: &[u8],
        mode: Mode,
    ) -> Result<NodeId> {
        if tokens.is_empty() || tokens.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "enzyme length {} outside 1..={}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= ENZYME_VOCAB) {
            return Err(Error::Vocabulary {
                vocabulary: "enzyme",
                position: pos,
                token: char::from_u32(u32::from(tokens[pos])).unwrap_or('?'),
            });
        }
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = g.param(store, self.embed);
        let mut x = g.gather_rows(table, &rows)?;
        let inv_sqrt_d = 1.0 / math::sqrt(self.config.d as f64);

        for (l, layer) in self.layers.iter().enumerate() {
            let (gn, bn) = (g.param(store, layer.ln1_gain), g.param(store, layer.ln1_bias));
            let h = g.layer_norm(x, gn, bn, LAYER_NORM_EPS)?;
            let wq = g.param(store, layer.wq);
            let wk = g.param(store, layer.wk);
            let wv = g.param(store, layer.wv);
            let mut q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let mut v = g.matmul(h, wv)?;
            if let Some(set) = adapters {
                let dq = set.query[l].apply(g, store, h, mode, &[l as u64, 0])?;
                q = g.add(q, dq)?;
                let dv = set.value[l].apply(g, store, h, mode, &[l as u64, 1])?;
                v = g.add(v, dv)?;
            }
            let scores = g.matmul_bt(q, k)?;
            let scores = g.scale(scores, inv_sqrt_d);
            let attn = g.softmax_rows(scores);
            let ctx = g.matmul(attn, v)?;
            let wo = g.param(store, layer.wo);
            let out = g.matmul(ctx, wo)?;
            x = g.add(x, out)?;

            let (gn, bn) = (g.param(store, layer.ln2_gain), g.param(store, layer.ln2_bias));
            let h = g.layer_norm(x, gn, bn, LAYER_NORM_EPS)?;
            let (w1, b1) = (g.param(store, layer.ff1_w), g.param(store, layer.ff1_b));
            let f = g.matmul(h, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.gelu(f);
            let (w2, b2) = (g.param(store, layer.ff2_w), g.param(store, layer.ff2_b));
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, b2)?;
            x = g.add(x, f)?;
        }
        let (gn, bn) = (g.param(store, self.final_gain), g.param(store, self.final_bias));
        g.layer_norm(x, gn, bn, LAYER_NORM_EPS)
    }
}

impl LoraAdapter {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        config: &BackboneConfig,
        init: &mut Initializer,
    ) -> Self {
        let (d, r) = (config.d, config.lora_rank);
        let bound = 1.0 / math::sqrt(d as f64);
        let down = store.register(&format!("{name}.down"), init.uniform(r, d, bound), false, true);
        let up = store.register(&format!("{name}.up"), Tensor::zeros(d, r), false, true);
        Self {
            down,
            up,
            rank: r,
            scale: config.lora_scale,
            dropout: config.lora_dropout,
        }
    }

    /// `(scale / rank) · dropout(x) · downᵀ · upᵀ`.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mode: Mode,
        key: &[u64],
    ) -> Result<NodeId> {
        let mut input = x;
        if let Mode::Train { seed } = mode {
            if self.dropout > 0.0 {
                let (rows, cols) = g.value(x).shape();
                let keep = 1.0 - self.dropout;
                let mut mask = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let u = unit_from_key(&[seed, key[0], key[1], r as u64, c as u64]);
                        if u >= self.dropout {
                            mask.set(r, c, 1.0 / keep);
                        }
                    }
                }
                input = g.mul_const(x, mask)?;
            }
        }
        let down = g.param(store, self.down);
        let up = g.param(store, self.up);
        let low = g.matmul_bt(input, down)?;
        let full = g.matmul_bt(low, up)?;
        Ok(g.scale(full, self.scale / self.rank as f64))
    }
}

impl LoraSet {
    pub fn init(store: &mut ParamStore, config: &BackboneConfig, init: &mut Initializer) -> Self {
        let mut query = Vec::new();
        let mut value = Vec::new();
        for l in 0..config.layers {
            query.push(LoraAdapter::init(store, &format!("lora.layer{l}.q"), config, init));
            value.push(LoraAdapter::init(store, &format!("lora.layer{l}.v"), config, init));
        }
        Self { query, value }
    }
}

/// Learned embedding table over SMILES characters.
#[derive(Clone, Debug)]
pub struct SubstrateEncoder {
    pub table: ParamId,
}

impl SubstrateEncoder {
    pub fn init(store: &mut ParamStore, d: usize, init: &mut Initializer) -> Self {
        let table = store.register("substrate.embed", init.uniform(SUBSTRATE_VOCAB, d, EMBED_INIT), false, true);
        Self { table }
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: &[u8]) -> Result<NodeId> {
        let table = g.param(store, self.table);
        encode_substrate_node(g, table, tokens)
    }
}

fn encode_substrate_node(g: &mut Graph, table: NodeId, tokens: &[u8]) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::Input("empty substrate".into()));
    }
    let vocab = g.value(table).rows();
    if let Some(pos) = tokens.iter().position(|&t| t as usize >= vocab) {
        return Err(Error::Vocabulary {
            vocabulary: "substrate",
            position: pos,
            token: char::from_u32(u32::from(tokens[pos])).unwrap_or('?'),
        });
    }
    let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    g.gather_rows(table, &rows)
}

/// Row-gathers `tokens` from an embedding table.
pub fn encode_substrate(tokens: &[u8], table: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.constant(table.clone());
    let out = encode_substrate_node(&mut g, t, tokens)?;
    Ok(g.value(out).clone())
}

/// Pocket residues with their coordinates (ångström).
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryInput {
    coords: Tensor,
    residues: Vec<u8>,
}

impl GeometryInput {
    pub fn new(coords: Tensor, residues: Vec<u8>) -> Result<Self> {
        if coords.cols() != 3 || coords.rows() == 0 {
            return Err(Error::Input(format!(
                "pocket coordinates must be L_g x 3 with L_g >= 1, got {:?}",
                coords.shape()
            )));
        }
        if residues.len() != coords.rows() {
            return Err(Error::Input(format!(
                "{} pocket residues but {} coordinate rows",
                residues.len(),
                coords.rows()
            )));
        }
        if !coords.is_finite() {
            return Err(Error::Input("non-finite pocket coordinates".into()));
        }
        Ok(Self { coords, residues })
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn residues(&self) -> &[u8] {
        &self.residues
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }
}

/// Per-residue `(min, mean, max)` distance to the other pocket residues and
/// distance to the pocket centroid, in ångström. A lone residue gets zeros.
pub fn pocket_distance_stats(coords: &Tensor) -> Tensor {
    let n = coords.rows();
    let mut centroid = [0.0; 3];
    for r in 0..n {
        for (c, v) in centroid.iter_mut().zip(coords.row(r)) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);
    let dist = |a: &[f64], b: &[f64]| {
        math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
    };
    let mut out = Tensor::zeros(n, GEOMETRY_STATS);
    for i in 0..n {
        let mut ds: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| dist(coords.row(i), coords.row(j)))
            .collect();
        ds.sort_by(f64::total_cmp);
        if !ds.is_empty() {
            out.set(i, 0, ds[0]);
            out.set(i, 1, ds.iter().sum::<f64>() / ds.len() as f64);
            out.set(i, 2, ds[ds.len() - 1]);
        }
        out.set(i, 3, dist(coords.row(i), &centroid));
    }
    out
}

#[derive(Clone, Debug)]
pub struct GeometryEncoder {
    pub identity: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl GeometryEncoder {
    pub fn init(store: &mut ParamStore, d: usize, init: &mut Initializer) -> Self {
        Self {
            identity: store.register("geometry.identity", init.uniform(ENZYME_VOCAB, d, EMBED_INIT), false, true),
            w1: store.register("geometry.w1", init.glorot(GEOMETRY_STATS + d, d), false, true),
            b1: store.register("geometry.b1", Tensor::zeros(1, d), false, false),
            w2: store.register("geometry.w2", init.glorot(d, d), false, true),
            b2: store.register("geometry.b2", Tensor::zeros(1, d), false, false),
        }
    }

    /// Records the featurizer and returns `H_g` (`L_g × D`).
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, input: &GeometryInput) -> Result<NodeId> {
        let mut stats = pocket_distance_stats(&input.coords);
        stats.data_mut().iter_mut().for_each(|v| *v *= DISTANCE_SCALE);
        let stats = g.constant(stats);
        let table = g.param(store, self.identity);
        let rows: Vec<usize> = input.residues.iter().map(|&t| t as usize).collect();
        if let Some(pos) = rows.iter().position(|&t| t >= g.value(table).rows()) {
            return Err(Error::Vocabulary {
                vocabulary: "enzyme",
                position: pos,
                token: '?',
            });
        }
        let ident = g.gather_rows(table, &rows)?;
        let feats = g.concat_cols(&[stats, ident])?;
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let h = g.matmul(feats, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }
}
