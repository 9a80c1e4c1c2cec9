//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use erba_core::backbone::BackboneConfig;
use erba_core::esda::KernelConfig;
use erba_core::gmoe::Routing;
use erba_core::model::{FusionMode, ModelConfig, ObjectiveConfig, TaskLoss};
use erba_core::objective::LossWeights;
use sha2::{Digest, Sha256};

use crate::dataset::Endpoint;
use crate::error::{io_error, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Restricts training and evaluation to one endpoint; `None` keeps all rows.
    pub endpoint: Option<Endpoint>,
    pub d: usize,
    pub d_k: usize,
    pub layers: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub lora_dropout: f64,
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_rank: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lambda_balance: f64,
    pub lambda_align: f64,
    pub use_mrca: bool,
    pub use_gmoe: bool,
    pub use_esda: bool,
    pub fusion_mode: FusionMode,
    pub routing: Routing,
    pub task_loss: TaskLoss,
    pub mrca_post_norm: bool,
    /// `None` selects the median heuristic.
    pub kernel_bandwidth: Option<f64>,
    /// Runtime only; excluded from the canonical text and the config hash.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            endpoint: None,
            d: 32,
            d_k: 32,
            layers: 2,
            max_len: 64,
            lora_rank: 8,
            lora_scale: 16.0,
            lora_dropout: 0.1,
            n_experts: 4,
            top_k: 2,
            expert_rank: 2,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 10,
            lambda_balance: 0.01,
            lambda_align: 0.1,
            use_mrca: true,
            use_gmoe: true,
            use_esda: true,
            fusion_mode: FusionMode::Staged,
            routing: Routing::Geometry,
            task_loss: TaskLoss::Nll,
            mrca_post_norm: true,
            kernel_bandwidth: None,
            workers: 1,
        }
    }
}

fn fusion_name(f: FusionMode) -> &'static str {
    match f {
        FusionMode::Staged => "staged",
        FusionMode::ConcatMlp => "concat_mlp",
        FusionMode::GeometryFirst => "geometry_first",
    }
}

/// Splits `key = value` lines into a map of `key → (line, value)`.
/// Blank lines and `#` comments are skipped; duplicate keys are errors.
pub(crate) fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if seen.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(seen)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let seen = parse_pairs(text)?;
        let mut c = Self::default();
        let mut d_k = None;
        for (key, (line, v)) in &seen {
            let v = v.as_str();
            let k = key.as_str();
            match k {
                "seed" => c.seed = parse_value(k, v)?,
                "endpoint" => c.endpoint = if v == "all" { None } else { Some(parse_value(k, v)?) },
                "d" => c.d = parse_value(k, v)?,
                "d_k" => d_k = Some(parse_value(k, v)?),
                "layers" => c.layers = parse_value(k, v)?,
                "max_len" => c.max_len = parse_value(k, v)?,
                "lora_rank" => c.lora_rank = parse_value(k, v)?,
                "lora_scale" => c.lora_scale = parse_value(k, v)?,
                "lora_dropout" => c.lora_dropout = parse_value(k, v)?,
                "n_experts" => c.n_experts = parse_value(k, v)?,
                "top_k" => c.top_k = parse_value(k, v)?,
                "expert_rank" => c.expert_rank = parse_value(k, v)?,
                "batch_size" => c.batch_size = parse_value(k, v)?,
                "lr" => c.lr = parse_value(k, v)?,
                "weight_decay" => c.weight_decay = parse_value(k, v)?,
                "epochs" => c.epochs = parse_value(k, v)?,
                "lambda_balance" => c.lambda_balance = parse_value(k, v)?,
                "lambda_align" => c.lambda_align = parse_value(k, v)?,
                "use_mrca" => c.use_mrca = parse_value(k, v)?,
                "use_gmoe" => c.use_gmoe = parse_value(k, v)?,
                "use_esda" => c.use_esda = parse_value(k, v)?,
                "mrca_post_norm" => c.mrca_post_norm = parse_value(k, v)?,
                "fusion_mode" => {
                    c.fusion_mode = match v {
                        "staged" => FusionMode::Staged,
                        "concat_mlp" => FusionMode::ConcatMlp,
                        "geometry_first" => FusionMode::GeometryFirst,
                        _ => return Err(Error::Config(format!("line {line}: unknown fusion_mode {v:?}"))),
                    }
                }
                "routing" => {
                    c.routing = match v {
                        "geometry" => Routing::Geometry,
                        "plain" => Routing::Plain,
                        _ => return Err(Error::Config(format!("line {line}: unknown routing {v:?}"))),
                    }
                }
                "task_loss" => {
                    c.task_loss = match v {
                        "nll" => TaskLoss::Nll,
                        "l2" => TaskLoss::SquaredError,
                        _ => return Err(Error::Config(format!("line {line}: unknown task_loss {v:?}"))),
                    }
                }
                "kernel_bandwidth" => {
                    c.kernel_bandwidth = if v == "median" { None } else { Some(parse_value(k, v)?) }
                }
                "workers" => c.workers = parse_value(k, v)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {k:?}"))),
            }
        }
        c.d_k = d_k.unwrap_or(c.d);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_k", self.d_k),
            ("layers", self.layers),
            ("max_len", self.max_len),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("workers", self.workers),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if self.kernel_bandwidth.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("kernel_bandwidth must be positive".into()));
        }
        LossWeights::new(self.lambda_balance, self.lambda_align)?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            backbone: BackboneConfig {
                d: self.d,
                layers: self.layers,
                max_len: self.max_len,
                lora_rank: self.lora_rank,
                lora_scale: self.lora_scale,
                lora_dropout: self.lora_dropout,
            },
            d_k: self.d_k,
            experts: self.n_experts,
            top_k: self.top_k,
            expert_rank: self.expert_rank,
            routing: self.routing,
            use_mrca: self.use_mrca,
            use_gmoe: self.use_gmoe,
            fusion: self.fusion_mode,
            mrca_post_norm: self.mrca_post_norm,
        }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: LossWeights {
                balance: self.lambda_balance,
                alignment: self.lambda_align,
            },
            use_esda: self.use_esda,
            kernel: match self.kernel_bandwidth {
                Some(s) => KernelConfig::Fixed(s),
                None => KernelConfig::MedianHeuristic,
            },
            task: self.task_loss,
        }
    }

    /// Every setting except `workers`, one `key = value` per line in a fixed order.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(s, "{k} = {v}").expect("write to string");
        };
        put("seed", &self.seed);
        put("endpoint", &self.endpoint.map_or("all".to_string(), |e| e.to_string()));
        put("d", &self.d);
        put("d_k", &self.d_k);
        put("layers", &self.layers);
        put("max_len", &self.max_len);
        put("lora_rank", &self.lora_rank);
        put("lora_scale", &self.lora_scale);
        put("lora_dropout", &self.lora_dropout);
        put("n_experts", &self.n_experts);
        put("top_k", &self.top_k);
        put("expert_rank", &self.expert_rank);
        put("batch_size", &self.batch_size);
        put("lr", &self.lr);
        put("weight_decay", &self.weight_decay);
        put("epochs", &self.epochs);
        put("lambda_balance", &self.lambda_balance);
        put("lambda_align", &self.lambda_align);
        put("use_mrca", &self.use_mrca);
        put("use_gmoe", &self.use_gmoe);
        put("use_esda", &self.use_esda);
        put("fusion_mode", &fusion_name(self.fusion_mode));
        put(
            "routing",
            &match self.routing {
                Routing::Geometry => "geometry",
                Routing::Plain => "plain",
            },
        );
        put(
            "task_loss",
            &match self.task_loss {
                TaskLoss::Nll => "nll",
                TaskLoss::SquaredError => "l2",
            },
        );
        put("mrca_post_norm", &self.mrca_post_norm);
        put(
            "kernel_bandwidth",
            &self.kernel_bandwidth.map_or("median".to_string(), |s| s.to_string()),
        );
        s
    }

    pub fn hash(&self) -> [u8; 32] {
        config_hash(&self.canonical_text())
    }
}

pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}
