//! Tab-separated measurement tables with EMB1 pocket-coordinate side files.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use erba_core::backbone::GeometryInput;
use erba_core::gmoe::PocketIndexSet;
use erba_core::model::SampleInput;
use erba_core::vocab::{tokenize_enzyme, tokenize_substrate};
use erba_core::{emb, Tensor};

use crate::error::{io_error, with_path, Error, Result};

pub const HEADER: [&str; 7] = ["id", "sequence", "smiles", "pocket_indices", "pocket_coords", "endpoint", "value"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Kcat,
    Km,
    Ki,
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kcat" => Ok(Self::Kcat),
            "km" => Ok(Self::Km),
            "ki" => Ok(Self::Ki),
            _ => Err(format!("unknown endpoint {s:?}, expected kcat, km or ki")),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Kcat => "kcat",
            Self::Km => "km",
            Self::Ki => "ki",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub sequence: String,
    pub smiles: String,
    /// Sorted, 0-based residue indices.
    pub pocket: Vec<usize>,
    /// `|pocket| × 3` coordinates in ångström, one row per pocket residue.
    pub coords: Tensor,
    /// Path of the coordinate file as written in the table.
    pub coords_path: String,
    pub endpoint: Endpoint,
    /// Positive measured value, in the source's units.
    pub value: f64,
}

impl SampleRecord {
    /// The regression target `log10(value)`.
    pub fn target(&self) -> f64 {
        self.value.log10()
    }

    pub fn to_input(&self) -> Result<SampleInput> {
        let enzyme = tokenize_enzyme(&self.sequence)?;
        let substrate = tokenize_substrate(&self.smiles)?;
        let pocket = PocketIndexSet::new(self.pocket.clone(), enzyme.len())?;
        let residues = self.pocket.iter().map(|&i| enzyme[i]).collect();
        let geometry = GeometryInput::new(self.coords.clone(), residues)?;
        Ok(SampleInput {
            enzyme,
            substrate,
            pocket,
            geometry,
        })
    }
}

pub fn load_embeddings(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_error(path))?;
    emb::decode(&bytes).map_err(with_path(path))
}

pub fn save_embeddings(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, emb::encode(t)).map_err(io_error(path))
}

fn parse_row(dir: &Path, fields: &[&str]) -> std::result::Result<SampleRecord, String> {
    if fields.len() != HEADER.len() {
        return Err(format!("expected {} columns, found {}", HEADER.len(), fields.len()));
    }
    let [id, sequence, smiles, pocket, coords_path, endpoint, value] = fields else {
        unreachable!("column count checked");
    };
    if id.is_empty() {
        return Err("empty id".into());
    }
    let enzyme = tokenize_enzyme(sequence).map_err(|e| e.to_string())?;
    tokenize_substrate(smiles).map_err(|e| e.to_string())?;
    let mut indices = pocket
        .split(';')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("bad pocket index {s:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    indices.sort_unstable();
    if indices.windows(2).any(|w| w[0] == w[1]) {
        return Err("duplicate pocket index".into());
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= enzyme.len()) {
        return Err(format!("pocket index {bad} out of range for sequence length {}", enzyme.len()));
    }
    let endpoint: Endpoint = endpoint.parse()?;
    let value: f64 = value.parse().map_err(|_| format!("bad value {value:?}"))?;
    if !(value > 0.0 && value.is_finite()) {
        return Err(format!("value must be positive and finite, got {value}"));
    }
    let coords = load_embeddings(&dir.join(coords_path)).map_err(|e| e.to_string())?;
    if coords.shape() != (indices.len(), 3) {
        return Err(format!(
            "pocket coordinates are {}x{}, expected {}x3",
            coords.rows(),
            coords.cols(),
            indices.len()
        ));
    }
    Ok(SampleRecord {
        id: id.to_string(),
        sequence: sequence.to_string(),
        smiles: smiles.to_string(),
        pocket: indices,
        coords,
        coords_path: coords_path.to_string(),
        endpoint,
        value,
    })
}

/// Reads and validates a dataset table. Coordinate paths resolve relative
/// to the table's directory.
pub fn parse_dataset(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let parse_error = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut header_seen = false;
    let mut ids = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !header_seen {
            if fields != HEADER {
                return Err(parse_error(line_no, format!("expected header {:?}", HEADER.join("\t"))));
            }
            header_seen = true;
            continue;
        }
        let record = parse_row(dir, &fields).map_err(|m| parse_error(line_no, m))?;
        if !ids.insert(record.id.clone()) {
            return Err(parse_error(line_no, format!("duplicate id {:?}", record.id)));
        }
        out.push(record);
    }
    if !header_seen {
        return Err(parse_error(1, "missing header".into()));
    }
    Ok(out)
}

/// Writes `records` as `dir/name` and each coordinate matrix to its
/// `coords_path` under `dir`.
pub fn write_dataset(dir: &Path, name: &str, records: &[SampleRecord]) -> Result<PathBuf> {
    let mut text = HEADER.join("\t");
    text.push('\n');
    for r in records {
        let coords = dir.join(&r.coords_path);
        if let Some(parent) = coords.parent() {
            fs::create_dir_all(parent).map_err(io_error(parent))?;
        }
        save_embeddings(&coords, &r.coords)?;
        let pocket: Vec<String> = r.pocket.iter().map(usize::to_string).collect();
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id,
            r.sequence,
            r.smiles,
            pocket.join(";"),
            r.coords_path,
            r.endpoint,
            r.value
        ));
    }
    let path = dir.join(name);
    fs::write(&path, text).map_err(io_error(&path))?;
    Ok(path)
}
