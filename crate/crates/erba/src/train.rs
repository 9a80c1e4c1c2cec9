//! Mini-batch training with per-sample work fanned out to threads and
//! gradients merged in sample order, so results do not depend on the
//! worker count.

use std::fmt::Write as _;
use std::thread;

use erba_core::backbone::Mode;
use erba_core::init::mix64;
use erba_core::model::{batch_loss, Model, SampleForward, SampleInput};
use erba_core::optim::AdamW;
use erba_core::{ParamGrads, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::dataset::SampleRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    /// Batch-mean losses averaged over the epoch's batches.
    pub task: f64,
    pub balance: Option<f64>,
    pub alignment: Option<f64>,
    /// Number of times each expert was selected.
    pub usage: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub log: TrainLog,
}

/// Records for the configured endpoint, in file order.
pub fn select<'a>(config: &TrainConfig, data: &'a [SampleRecord]) -> Vec<&'a SampleRecord> {
    data.iter()
        .filter(|r| config.endpoint.is_none_or(|e| r.endpoint == e))
        .collect()
}

pub(crate) fn prepare(records: &[&SampleRecord]) -> Result<Vec<SampleInput>> {
    records
        .iter()
        .map(|r| {
            r.to_input()
                .map_err(|e| Error::Training(format!("sample {}: {e}", r.id)))
        })
        .collect()
}

/// Runs `f` over `items` on up to `workers` threads and returns the results in item order.
pub(crate) fn parallel_map<T: Sync, R: Send>(workers: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn dropout_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    mix64(mix64(seed ^ 0xD50F) ^ mix64(epoch as u64) ^ (sample as u64).rotate_left(32))
}

fn dump_batch(ids: &[&str], forwards: &[SampleForward], targets: &[f64]) -> String {
    let mut s = String::new();
    for ((id, f), z) in ids.iter().zip(forwards).zip(targets) {
        let _ = write!(s, "\n  {id}: mu={} s={} target={z}", f.mu(), f.log_var());
    }
    s
}

pub fn train(config: &TrainConfig, data: &[SampleRecord]) -> Result<Trained> {
    config.validate()?;
    let records = select(config, data);
    if records.is_empty() {
        return Err(Error::Training("no training samples for the selected endpoint".into()));
    }
    let inputs = prepare(&records)?;
    let targets: Vec<f64> = records.iter().map(|r| r.target()).collect();
    let (model, mut store) = Model::new(config.model_config())?;
    let objective = config.objective_config();
    let mut opt = AdamW::new(config.lr, config.weight_decay)?;
    if config.use_esda && config.batch_size < 2 {
        log::warn!("batch size {} is below 2; the alignment loss is skipped", config.batch_size);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(config.seed ^ 0x5407_F1E));
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut log = TrainLog::default();
    let n_experts = model.expert_shape().map_or(0, |(n, _)| n);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        if config.use_esda && batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            batches.pop();
            log::warn!("epoch {epoch}: dropped a final batch of one sample");
        }
        let mut entry = EpochLog {
            epoch,
            batches: 0,
            task: 0.0,
            balance: None,
            alignment: None,
            usage: vec![0; n_experts],
        };
        let (mut bal_sum, mut bal_n, mut align_sum, mut align_n) = (0.0, 0usize, 0.0, 0usize);
        for batch in batches {
            let forwards = parallel_map(config.workers, batch, |&i| {
                let mode = Mode::Train {
                    seed: dropout_seed(config.seed, epoch, i),
                };
                model.forward(&store, &inputs[i], mode)
            })
            .into_iter()
            .collect::<std::result::Result<Vec<_>, _>>()?;
            let batch_targets: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let ids: Vec<&str> = batch.iter().map(|&i| records[i].id.as_str()).collect();
            let loss = match batch_loss(&forwards, &batch_targets, &objective) {
                Ok(l) => l,
                Err(erba_core::Error::NonFiniteLoss(v)) => {
                    return Err(Error::Training(format!(
                        "non-finite loss {v} in epoch {epoch}; batch:{}",
                        dump_batch(&ids, &forwards, &batch_targets)
                    )))
                }
                Err(e) => return Err(e.into()),
            };
            let work: Vec<usize> = (0..forwards.len()).collect();
            let partial = parallel_map(config.workers, &work, |&b| forwards[b].backward(&loss.seeds[b]));
            let mut grads = ParamGrads::new(store.len());
            for g in &partial {
                grads.merge(g);
            }
            opt.step(&mut store, &grads).map_err(|e| {
                Error::Training(format!(
                    "non-finite gradient ({e}) in epoch {epoch}; batch:{}",
                    dump_batch(&ids, &forwards, &batch_targets)
                ))
            })?;
            for f in &forwards {
                if let Some((_, report)) = &f.gate {
                    for &e in &report.selected {
                        entry.usage[e] += 1;
                    }
                }
            }
            entry.batches += 1;
            entry.task += loss.task;
            if let Some(b) = loss.balance {
                bal_sum += b;
                bal_n += 1;
            }
            if let Some(a) = loss.alignment {
                align_sum += a;
                align_n += 1;
            }
        }
        let nb = entry.batches.max(1) as f64;
        entry.task /= nb;
        entry.balance = (bal_n > 0).then(|| bal_sum / bal_n as f64);
        entry.alignment = (align_n > 0).then(|| align_sum / align_n as f64);
        log::info!(
            "epoch {epoch}: task={:.6} balance={} alignment={} usage={:?}",
            entry.task,
            entry.balance.map_or("-".into(), |v| format!("{v:.6}")),
            entry.alignment.map_or("-".into(), |v| format!("{v:.6}")),
            entry.usage
        );
        log.epochs.push(entry);
    }
    Ok(Trained { model, store, log })
}
