//! CKPT1 checkpoints: magic `CKPT`, `u32` version, `u32` section count, then
//! per section a `u16` name length, the name bytes and one EMB1 record,
//! followed by the 32-byte SHA-256 of the run configuration text.
//!
//! Two metadata sections precede the parameters: `meta.config` holds the
//! canonical configuration text (one byte per `f32`, exact) and
//! `meta.frozen` holds one `0/1` flag per parameter in registration order.

use std::fs;
use std::path::Path;

use erba_core::emb::{self, Reader};
use erba_core::model::Model;
use erba_core::{ParamStore, Tensor};

use crate::config::{config_hash, TrainConfig};
use crate::error::{io_error, with_path, Error, Result};

pub const MAGIC: &[u8; 4] = b"CKPT";
pub const VERSION: u32 = 1;
const CONFIG_SECTION: &str = "meta.config";
const FROZEN_SECTION: &str = "meta.frozen";

pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    /// Hash stored in the file.
    pub hash: [u8; 32],
}

impl Checkpoint {
    /// Whether the stored hash matches the embedded configuration.
    pub fn hash_consistent(&self) -> bool {
        self.hash == self.config.hash()
    }

    /// Whether the stored hash matches the configuration of the current run.
    pub fn matches(&self, current: &TrainConfig) -> bool {
        self.hash == current.hash()
    }
}

fn push_section(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    let len = u16::try_from(name.len()).expect("section names are short");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    emb::encode_into(t, out);
}

pub fn encode_checkpoint(config: &TrainConfig, store: &ParamStore) -> Vec<u8> {
    let text = config.canonical_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&((store.len() + 2) as u32).to_le_bytes());
    let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
    push_section(&mut out, CONFIG_SECTION, &Tensor::new(1, bytes.len(), bytes).expect("finite"));
    let flags: Vec<f64> = store.iter().map(|(_, p)| f64::from(u8::from(p.frozen))).collect();
    push_section(&mut out, FROZEN_SECTION, &Tensor::new(1, flags.len(), flags).expect("finite"));
    for (_, p) in store.iter() {
        push_section(&mut out, &p.name, &p.value);
    }
    out.extend_from_slice(&config_hash(&text));
    out
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, store: &ParamStore) -> Result<()> {
    fs::write(path, encode_checkpoint(config, store)).map_err(io_error(path))
}

fn format_error(offset: usize, message: impl Into<String>) -> erba_core::Error {
    erba_core::Error::Format {
        offset,
        message: message.into(),
    }
}

/// Decodes a checkpoint and rebuilds the model it was trained with.
pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(format_error(0, "bad magic, expected \"CKPT\"").into());
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_error(at, format!("unsupported checkpoint version {version}")).into());
    }
    let count_at = r.offset();
    let count = r.u32("section count")? as usize;
    let mut sections = Vec::new();
    while r.remaining() > 32 {
        if sections.len() == count {
            return Err(format_error(r.offset(), format!("more sections than the declared {count}")).into());
        }
        let at = r.offset();
        let len = r.u16("section name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "section name")?)
            .map_err(|_| format_error(at + 2, "section name is not UTF-8"))?
            .to_string();
        let t = r.matrix()?;
        sections.push((at, name, t));
    }
    if sections.len() != count {
        return Err(format_error(
            count_at,
            format!("section count mismatch: declared {count}, found {}", sections.len()),
        )
        .into());
    }
    let hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");

    let mut it = sections.into_iter();
    let text = match it.next() {
        Some((at, name, t)) if name == CONFIG_SECTION => {
            let bytes: Option<Vec<u8>> = t
                .data()
                .iter()
                .map(|&v| (v.fract() == 0.0 && (0.0..=255.0).contains(&v)).then_some(v as u8))
                .collect();
            bytes
                .and_then(|b| String::from_utf8(b).ok())
                .ok_or_else(|| format_error(at, "config section is not text"))?
        }
        _ => return Err(format_error(count_at + 4, format!("first section must be {CONFIG_SECTION}")).into()),
    };
    let config = TrainConfig::parse(&text).map_err(CheckpointError::Config)?;
    let (frozen_at, frozen) = match it.next() {
        Some((at, name, t)) if name == FROZEN_SECTION => (at, t),
        _ => return Err(format_error(count_at + 4, format!("second section must be {FROZEN_SECTION}")).into()),
    };
    let (model, mut store) = Model::new(config.model_config())?;
    if count - 2 != store.len() || frozen.len() != store.len() {
        return Err(format_error(
            count_at,
            format!("section count mismatch: {} parameters in file, model has {}", count - 2, store.len()),
        )
        .into());
    }
    for (i, (at, name, t)) in it.enumerate() {
        let id = store
            .id(&name)
            .ok_or_else(|| format_error(at, format!("unknown parameter section {name:?}")))?;
        if id.index() != i {
            return Err(format_error(at, format!("parameter section {name:?} out of order")).into());
        }
        store
            .assign(&name, t)
            .map_err(|e| format_error(at, format!("parameter {name:?}: {e}")))?;
        let flag = frozen.data()[i];
        if flag != 0.0 && flag != 1.0 {
            return Err(format_error(frozen_at, "frozen flags must be 0 or 1").into());
        }
        store.param_mut(id).frozen = flag == 1.0;
    }
    Ok(Checkpoint {
        config,
        model,
        store,
        hash,
    })
}

#[derive(Debug)]
pub enum CheckpointError {
    Core(erba_core::Error),
    Config(Error),
}

impl From<erba_core::Error> for CheckpointError {
    fn from(e: erba_core::Error) -> Self {
        Self::Core(e)
    }
}

/// Loads a checkpoint, logging a warning when its stored hash disagrees
/// with the embedded configuration.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_error(path))?;
    let ckpt = decode_checkpoint(&bytes).map_err(|e| match e {
        CheckpointError::Core(e) => with_path(path)(e),
        CheckpointError::Config(e) => Error::Checkpoint(format!("{}: {e}", path.display())),
    })?;
    if !ckpt.hash_consistent() {
        log::warn!("{}: stored config hash does not match the embedded configuration", path.display());
    }
    Ok(ckpt)
}
