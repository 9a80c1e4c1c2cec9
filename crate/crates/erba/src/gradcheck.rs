//! Finite-difference verification of the full model on a micro batch.

use erba_core::backbone::{GeometryInput, Mode};
use erba_core::esda::{esda_loss_node, KernelConfig};
use erba_core::gmoe::PocketIndexSet;
use erba_core::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
use erba_core::init::Initializer;
use erba_core::model::{loss_and_grads, Model, ObjectiveConfig, SampleInput};
use erba_core::{Graph, ParamStore};

use crate::config::TrainConfig;
use crate::error::Result;

pub const ENZYME_LEN: usize = 6;
pub const SUBSTRATE_LEN: usize = 4;
pub const POCKET_LEN: usize = 3;
pub const BATCH: usize = 3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ModuleReport {
    pub module: &'static str,
    pub worst: GradCheckReport,
}

fn module_of(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "lora" => "lora",
        "substrate" => "substrate",
        "geometry" => "geometry",
        "mrca" => "mrca",
        "gmoe" => "gmoe",
        "fusion" => "fusion",
        "head" => "head",
        _ => "other",
    }
}

/// Random samples with `L_e = 6`, `L_m = 4`, `L_g = 3` and their targets.
pub fn micro_batch(seed: u64) -> (Vec<SampleInput>, Vec<f64>) {
    let mut init = Initializer::new(seed);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..BATCH {
        let enzyme: Vec<u8> = (0..ENZYME_LEN).map(|_| (init.next_u64() % 20) as u8).collect();
        let substrate = (0..SUBSTRATE_LEN).map(|_| (init.next_u64() % 95) as u8).collect();
        let mut pocket: Vec<usize> = (0..ENZYME_LEN).collect();
        for i in (1..ENZYME_LEN).rev() {
            pocket.swap(i, (init.next_u64() % (i as u64 + 1)) as usize);
        }
        pocket.truncate(POCKET_LEN);
        pocket.sort_unstable();
        let residues = pocket.iter().map(|&i| enzyme[i]).collect();
        let coords = init.uniform(POCKET_LEN, 3, 5.0);
        inputs.push(SampleInput {
            pocket: PocketIndexSet::new(pocket, ENZYME_LEN).expect("valid micro pocket"),
            geometry: GeometryInput::new(coords, residues).expect("valid micro geometry"),
            enzyme,
            substrate,
        });
        targets.push(init.uniform(1, 1, 2.0).data()[0]);
    }
    (inputs, targets)
}

/// Worst relative error per parameter group, plus an `esda` row checking
/// the alignment loss against the stage summaries it consumes.
pub fn run_gradcheck(config: &TrainConfig) -> Result<Vec<ModuleReport>> {
    config.validate()?;
    let (model, store) = Model::new(config.model_config())?;
    let (inputs, targets) = micro_batch(config.seed ^ 0x6C);
    let modes: Vec<Mode> = (0..BATCH as u64).map(|i| Mode::Train { seed: config.seed + i }).collect();
    let base = config.objective_config();
    let (loss, _) = loss_and_grads(&model, &store, &inputs, &targets, &modes, &base)?;
    // The kernel bandwidth is a constant of the objective; hold it at the base point.
    let kernel = match loss.bandwidths {
        Some([a, b]) => KernelConfig::FixedPair(a, b),
        None => base.kernel,
    };
    let objective = ObjectiveConfig { kernel, ..base };
    let reports = grad_check(&store, DEFAULT_STEP, |s, want| {
        let (l, g) = loss_and_grads(&model, s, &inputs, &targets, &modes, &objective)?;
        Ok((l.total, want.then_some(g)))
    })?;
    let mut out: Vec<ModuleReport> = Vec::new();
    for r in reports {
        let module = module_of(&r.name);
        match out.iter_mut().find(|m| m.module == module) {
            Some(m) if r.max_rel_error > m.worst.max_rel_error => m.worst = r,
            Some(_) => {}
            None => out.push(ModuleReport { module, worst: r }),
        }
    }
    out.push(ModuleReport {
        module: "esda",
        worst: esda_check(config.seed, config.d, base.kernel)?,
    });
    Ok(out)
}

fn esda_check(seed: u64, d: usize, kernel: KernelConfig) -> Result<GradCheckReport> {
    let mut init = Initializer::new(seed ^ 0xE5DA);
    let mut store = ParamStore::new();
    for stage in 0..3 {
        for b in 0..BATCH {
            store.register(&format!("esda.z{stage}.{b}"), init.uniform(1, d, 1.0), false, false);
        }
    }
    let ids: Vec<_> = store.ids().collect();
    let eval = |s: &ParamStore, k: KernelConfig| -> erba_core::Result<(f64, [f64; 2], Graph, erba_core::NodeId)> {
        let mut g = Graph::new();
        let nodes: Vec<_> = ids.iter().map(|&id| g.param(s, id)).collect();
        let (l, sig) = esda_loss_node(&mut g, &nodes[..BATCH], &nodes[BATCH..2 * BATCH], &nodes[2 * BATCH..], k)?;
        Ok((g.value(l).data()[0], sig, g, l))
    };
    let (_, [s1, s2], _, _) = eval(&store, kernel)?;
    let fixed = KernelConfig::FixedPair(s1, s2);
    let reports = grad_check(&store, DEFAULT_STEP, |s, want| {
        let (v, _, g, l) = eval(s, fixed)?;
        Ok((v, want.then(|| g.backward_scalar(l).into_params())))
    })?;
    let worst = reports
        .into_iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("alignment check has parameters");
    Ok(GradCheckReport {
        name: "esda (stage summaries)".into(),
        ..worst
    })
}
