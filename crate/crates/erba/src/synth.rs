//! Synthetic measurements with planted substrate and geometry structure.
//!
//! Each sample draws a latent regime that fixes a pocket template (a rod,
//! a ring, a shell, or for higher regime counts a hashed point cloud). The
//! template is normalized to unit radius of gyration, then scaled, rotated
//! and jittered into pocket coordinates. The log-space target is
//!
//! ```text
//! z = offset + a · bilinear(substrate, pocket residues) + b_g · radius_of_gyration + ε
//! ```
//!
//! where both features are standardized over the generated set. The
//! bilinear term pairs a pocket signature (how the pocket residues map onto
//! their complementary substrate characters) with the substrate's character
//! presence vector, which amounts to the fraction of pocket residues whose
//! partner character occurs in the SMILES string. `b_g`
//! runs linearly from `+geometry` (regime 0) to `−geometry` (last regime),
//! and `ε` has standard deviation `noise · √(1 + hetero_scale · g/(m−1))`
//! when the heteroscedastic flag is set, `noise` otherwise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use erba_core::init::unit_from_key;
use erba_core::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{parse_pairs, parse_value};
use crate::dataset::{write_dataset, Endpoint, SampleRecord};
use crate::error::{io_error, Error, Result};

const AMINO: &[u8] = b"ACDEFGHIKLMNPQRSTVWY";
const SMILES_CHARS: &[u8] = b"CNOSPFcnos()=#123[]@+-Hl";
const SIGNATURE_SALT: u64 = 0x5EED_0F_5167;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub samples: usize,
    pub enzyme_len_min: usize,
    pub enzyme_len_max: usize,
    pub substrate_len_min: usize,
    pub substrate_len_max: usize,
    pub pocket_min: usize,
    pub pocket_max: usize,
    pub regimes: usize,
    pub noise: f64,
    pub heteroscedastic: bool,
    pub hetero_scale: f64,
    /// Coefficient `a` of the substrate–pocket bilinear term.
    pub bilinear: f64,
    /// Magnitude of the regime-dependent radius-of-gyration slope.
    pub geometry: f64,
    pub offset: f64,
    pub endpoint: Endpoint,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            samples: 200,
            enzyme_len_min: 16,
            enzyme_len_max: 32,
            substrate_len_min: 6,
            substrate_len_max: 16,
            pocket_min: 4,
            pocket_max: 8,
            regimes: 3,
            noise: 0.1,
            heteroscedastic: false,
            hetero_scale: 3.0,
            bilinear: 1.0,
            geometry: 1.0,
            offset: 0.0,
            endpoint: Endpoint::Kcat,
        }
    }
}

impl SynthSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (key, (line, v)) in parse_pairs(text)? {
            let k = key.as_str();
            let v = v.as_str();
            match k {
                "samples" => s.samples = parse_value(k, v)?,
                "enzyme_len_min" => s.enzyme_len_min = parse_value(k, v)?,
                "enzyme_len_max" => s.enzyme_len_max = parse_value(k, v)?,
                "substrate_len_min" => s.substrate_len_min = parse_value(k, v)?,
                "substrate_len_max" => s.substrate_len_max = parse_value(k, v)?,
                "pocket_min" => s.pocket_min = parse_value(k, v)?,
                "pocket_max" => s.pocket_max = parse_value(k, v)?,
                "regimes" => s.regimes = parse_value(k, v)?,
                "noise" => s.noise = parse_value(k, v)?,
                "heteroscedastic" => s.heteroscedastic = parse_value(k, v)?,
                "hetero_scale" => s.hetero_scale = parse_value(k, v)?,
                "bilinear" => s.bilinear = parse_value(k, v)?,
                "geometry" => s.geometry = parse_value(k, v)?,
                "offset" => s.offset = parse_value(k, v)?,
                "endpoint" => s.endpoint = parse_value(k, v)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {k:?}"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.samples == 0 || self.regimes == 0 {
            return bad("samples and regimes must be positive");
        }
        if self.enzyme_len_min == 0 || self.enzyme_len_min > self.enzyme_len_max {
            return bad("enzyme length range must satisfy 1 <= min <= max");
        }
        if self.substrate_len_min == 0 || self.substrate_len_min > self.substrate_len_max {
            return bad("substrate length range must satisfy 1 <= min <= max");
        }
        if self.pocket_min == 0 || self.pocket_min > self.pocket_max || self.pocket_min > self.enzyme_len_min {
            return bad("pocket size range must satisfy 1 <= min <= max and min <= enzyme_len_min");
        }
        let reals = [self.noise, self.hetero_scale, self.bilinear, self.geometry, self.offset];
        if reals.iter().any(|v| !v.is_finite()) || self.noise < 0.0 || self.hetero_scale < 0.0 {
            return bad("noise and hetero_scale must be finite and non-negative");
        }
        Ok(())
    }

    /// Regression slope of the geometry term in regime `g`.
    pub fn regime_slope(&self, g: usize) -> f64 {
        if self.regimes == 1 {
            self.geometry
        } else {
            self.geometry * (1.0 - 2.0 * g as f64 / (self.regimes - 1) as f64)
        }
    }

    pub fn noise_std(&self, g: usize) -> f64 {
        if !self.heteroscedastic || self.regimes == 1 {
            return self.noise;
        }
        let u = g as f64 / (self.regimes - 1) as f64;
        self.noise * (1.0 + self.hetero_scale * u).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub records: Vec<SampleRecord>,
    /// Latent regime of each record.
    pub regimes: Vec<usize>,
    /// Noise-free `(bilinear, radius_of_gyration)` features, standardized.
    pub features: Vec<(f64, f64)>,
}

/// Substrate character that binds enzyme residue `token`.
fn complement(token: u8) -> u8 {
    let h = unit_from_key(&[SIGNATURE_SALT, u64::from(token)]);
    SMILES_CHARS[(h * SMILES_CHARS.len() as f64) as usize]
}

/// Pocket signature (fraction of pocket residues complementing each
/// substrate character) dotted with the substrate presence signature.
fn lock_and_key(pocket_residues: &[u8], smiles: &[u8]) -> f64 {
    let hits = pocket_residues
        .iter()
        .filter(|&&r| smiles.contains(&complement(r)))
        .count();
    hits as f64 / pocket_residues.len() as f64
}

/// Unit-scale template point `k` of `p` for regime `g`.
fn template_point(g: usize, k: usize, p: usize) -> [f64; 3] {
    let t = if p > 1 { k as f64 / (p - 1) as f64 } else { 0.5 };
    match g {
        0 => [2.0 * t - 1.0, 0.0, 0.0],
        1 => {
            let a = 2.0 * PI * k as f64 / p as f64;
            [a.cos(), a.sin(), 0.0]
        }
        2 => {
            // Fibonacci sphere.
            let y = if p > 1 { 1.0 - 2.0 * t } else { 0.0 };
            let r = (1.0 - y * y).max(0.0).sqrt();
            let a = PI * (3.0 - 5f64.sqrt()) * k as f64;
            [r * a.cos(), y, r * a.sin()]
        }
        _ => {
            let c = |j: u64| 2.0 * unit_from_key(&[SIGNATURE_SALT, 7, g as u64, k as u64, j]) - 1.0;
            [c(0), c(1), c(2)]
        }
    }
}

/// Template points for regime `g`, centred and scaled to unit radius of
/// gyration so that pocket size carries no regime information.
fn unit_template(g: usize, p: usize) -> Vec<[f64; 3]> {
    let mut pts: Vec<[f64; 3]> = (0..p).map(|k| template_point(g, k, p)).collect();
    let mut c = [0.0; 3];
    for q in &pts {
        for j in 0..3 {
            c[j] += q[j] / p as f64;
        }
    }
    let rg = (pts.iter().map(|q| (0..3).map(|j| (q[j] - c[j]).powi(2)).sum::<f64>()).sum::<f64>() / p as f64).sqrt();
    let s = if rg > 0.0 { 1.0 / rg } else { 1.0 };
    for q in &mut pts {
        for j in 0..3 {
            q[j] = (q[j] - c[j]) * s;
        }
    }
    pts
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn radius_of_gyration(coords: &Tensor) -> f64 {
    let n = coords.rows() as f64;
    let mut c = [0.0; 3];
    for r in 0..coords.rows() {
        for (j, v) in coords.row(r).iter().enumerate() {
            c[j] += v / n;
        }
    }
    let ss: f64 = (0..coords.rows())
        .map(|r| coords.row(r).iter().zip(c).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum();
    (ss / n).sqrt()
}

fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    values.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

pub fn gen_synth(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drafts = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let le = rng.random_range(spec.enzyme_len_min..=spec.enzyme_len_max);
        let sequence: Vec<u8> = (0..le).map(|_| AMINO[rng.random_range(0..AMINO.len())]).collect();
        let lm = rng.random_range(spec.substrate_len_min..=spec.substrate_len_max);
        let smiles: Vec<u8> = (0..lm)
            .map(|_| SMILES_CHARS[rng.random_range(0..SMILES_CHARS.len())])
            .collect();
        let p = rng.random_range(spec.pocket_min..=spec.pocket_max.min(le));
        let mut pocket = sample(&mut rng, le, p).into_vec();
        pocket.sort_unstable();
        let g = rng.random_range(0..spec.regimes);
        let scale = rng.random_range(2.0..6.0);
        let rot = random_rotation(&mut rng);
        let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
        let template = unit_template(g, p);
        let mut coords = Tensor::zeros(p, 3);
        for (k, t) in template.iter().enumerate() {
            for (r, row) in rot.iter().enumerate() {
                let jitter: f64 = StandardNormal.sample(&mut rng);
                let v = scale * (row[0] * t[0] + row[1] * t[1] + row[2] * t[2]) + shift[r] + 0.1 * jitter;
                coords.set(k, r, v);
            }
        }
        let residues: Vec<u8> = pocket.iter().map(|&k| sequence[k]).collect();
        let bilinear = lock_and_key(&residues, &smiles);
        let eps: f64 = StandardNormal.sample(&mut rng);
        drafts.push((i, sequence, smiles, pocket, coords, g, bilinear, eps));
    }
    let mut bil: Vec<f64> = drafts.iter().map(|d| d.6).collect();
    let mut rg: Vec<f64> = drafts.iter().map(|d| radius_of_gyration(&d.4)).collect();
    standardize(&mut bil);
    standardize(&mut rg);
    let mut data = SynthData {
        records: Vec::with_capacity(spec.samples),
        regimes: Vec::with_capacity(spec.samples),
        features: Vec::with_capacity(spec.samples),
    };
    for (j, (i, sequence, smiles, pocket, coords, g, _, eps)) in drafts.into_iter().enumerate() {
        let z = spec.offset + spec.bilinear * bil[j] + spec.regime_slope(g) * rg[j] + spec.noise_std(g) * eps;
        let id = format!("s{i:05}");
        data.records.push(SampleRecord {
            coords_path: format!("coords/{id}.emb"),
            id,
            sequence: String::from_utf8(sequence).expect("ASCII"),
            smiles: String::from_utf8(smiles).expect("ASCII"),
            pocket,
            coords,
            endpoint: spec.endpoint,
            value: 10f64.powf(z),
        });
        data.regimes.push(g);
        data.features.push((bil[j], rg[j]));
    }
    Ok(data)
}

/// Writes `data.tsv`, its coordinate files and the `regimes.tsv` sidecar into `dir`.
pub fn write_synth(dir: &Path, data: &SynthData) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    write_dataset(dir, "data.tsv", &data.records)?;
    let mut text = String::from("id\tregime\n");
    for (r, g) in data.records.iter().zip(&data.regimes) {
        text.push_str(&format!("{}\t{g}\n", r.id));
    }
    let path = dir.join("regimes.tsv");
    fs::write(&path, text).map_err(io_error(&path))
}
