//! Batch inference, z-space metrics and prediction tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use erba_core::backbone::Mode;
use erba_core::metrics::{self, MetricsReport};
use erba_core::model::Model;
use erba_core::objective;
use erba_core::ParamStore;

use crate::dataset::{SampleRecord, HEADER};
use crate::error::{io_error, Result};
use crate::train::{parallel_map, prepare};

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mu: f64,
    pub log_var: f64,
    /// Predicted standard deviation in log10 units.
    pub log10_sigma: f64,
    /// `10^μ`.
    pub yhat: f64,
}

pub fn predict(model: &Model, store: &ParamStore, records: &[&SampleRecord], workers: usize) -> Result<Vec<Prediction>> {
    let inputs = prepare(records)?;
    parallel_map(workers, &inputs, |x| model.forward(store, x, Mode::Eval))
        .into_iter()
        .map(|f| {
            let f = f?;
            let (mu, s) = (f.mu(), f.log_var());
            let (yhat, log10_sigma) = objective::predict(mu, s);
            Ok(Prediction {
                mu,
                log_var: s,
                log10_sigma,
                yhat,
            })
        })
        .collect()
}

pub fn evaluate(model: &Model, store: &ParamStore, records: &[&SampleRecord], workers: usize) -> Result<MetricsReport> {
    let preds = predict(model, store, records, workers)?;
    let mu: Vec<f64> = preds.iter().map(|p| p.mu).collect();
    let z: Vec<f64> = records.iter().map(|r| r.target()).collect();
    Ok(metrics::evaluate(&mu, &z)?)
}

/// `key=value` lines; undefined correlations print as `nan` with a flag line.
pub fn format_metrics(m: &MetricsReport) -> String {
    let mut s = String::new();
    let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| v.to_string());
    let _ = writeln!(s, "n={}", m.n);
    let _ = writeln!(s, "r2={}", opt(m.r2));
    let _ = writeln!(s, "pcc={}", opt(m.pcc));
    let _ = writeln!(s, "rmse={}", m.rmse);
    let _ = writeln!(s, "mae={}", m.mae);
    if m.r2.is_none() || m.pcc.is_none() {
        let _ = writeln!(s, "undefined=zero_variance");
    }
    s
}

/// The input table with `mu`, `log10_sigma` and `yhat` columns appended.
pub fn write_predictions(path: &Path, records: &[&SampleRecord], preds: &[Prediction]) -> Result<()> {
    let mut s = HEADER.join("\t");
    s.push_str("\tmu\tlog10_sigma\tyhat\n");
    for (r, p) in records.iter().zip(preds) {
        let pocket: Vec<String> = r.pocket.iter().map(usize::to_string).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            r.sequence,
            r.smiles,
            pocket.join(";"),
            r.coords_path,
            r.endpoint,
            r.value,
            p.mu,
            p.log10_sigma,
            p.yhat
        );
    }
    fs::write(path, s).map_err(io_error(path))
}
