//! Accuracy and timing measurements of a trained model against the reference
//! solver.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gns::{GnsParams, GnsSpec, GraphBatch};
use crate::graph::{build_graph, ThermalGraph};
use crate::metrics::{relative_error_field, relative_l1};
use crate::oracle::Oracle;
use crate::system::{ThermalState, VoxelSystem};
use crate::train::{build_dataset, train, Dataset, TrainConfig, TrainPair};
use crate::trajectory::Trajectory;

const EVAL_BATCH: usize = 16;

fn pair_graphs(data: &Dataset, pairs: &[TrainPair]) -> Result<Vec<ThermalGraph>> {
    pairs
        .iter()
        .map(|p| build_graph(&data.systems[p.system], &p.input, data.dt))
        .collect()
}

/// Mean over pairs of the one-step relative L1 error, without input noise.
pub fn one_step_error(params: &GnsParams, data: &Dataset, pairs: &[TrainPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("one-step error over an empty pair set".into()));
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(EVAL_BATCH) {
        let graphs = pair_graphs(data, chunk)?;
        let refs: Vec<&ThermalGraph> = graphs.iter().collect();
        let batch = GraphBatch::from_graphs(&refs)?;
        let pred = params.predict(&batch)?;
        for (k, p) in chunk.iter().enumerate() {
            let (a, b) = (batch.graph_slots[k], batch.graph_slots[k + 1]);
            total += relative_l1(&pred[a..b], &p.target.temps)?;
        }
    }
    Ok(total / pairs.len() as f64)
}

/// One-step error of the update with every flux set to zero (sources only).
pub fn source_only_one_step_error(data: &Dataset, pairs: &[TrainPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("one-step error over an empty pair set".into()));
    }
    let mut total = 0.0;
    for (p, g) in pairs.iter().zip(pair_graphs(data, pairs)?) {
        let pred: Vec<f64> = g.temps.iter().zip(&g.c_src).map(|(t, s)| t + s).collect();
        total += relative_l1(&pred, &p.target.temps)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Per-step relative L1 error of a model rollout started from the
/// reference's first state.
pub fn rollout_error(params: &GnsParams, system: &VoxelSystem, reference: &Trajectory) -> Result<Vec<f64>> {
    reference.validate()?;
    let predicted = params.rollout(system, &reference.states[0], reference.n_steps(), reference.dt)?;
    curve_between(&predicted, reference)
}

pub fn curve_between(predicted: &Trajectory, reference: &Trajectory) -> Result<Vec<f64>> {
    if predicted.states.len() != reference.states.len() {
        return Err(Error::Shape(format!(
            "{} predicted states vs {} reference states",
            predicted.states.len(),
            reference.states.len()
        )));
    }
    predicted
        .states
        .iter()
        .zip(&reference.states)
        .map(|(p, r)| relative_l1(&p.temps, &r.temps))
        .collect()
}

/// Signed per-cell relative error `(pred - ref) / ref`.
pub fn error_map(predicted: &ThermalState, reference: &ThermalState) -> Result<Vec<f64>> {
    relative_error_field(&predicted.temps, &reference.temps)
}

/// Whether the largest absolute entry of `map` lies in a heat-source cell.
pub fn max_error_at_source(system: &VoxelSystem, map: &[f64], step: usize) -> bool {
    let cells = system.occupied_cells();
    let Some((i, _)) = map.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())) else {
        return false;
    };
    system.cells[cells[i]].power_at(step) > 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub repetitions: usize,
    pub gns_mean_s: f64,
    pub gns_std_s: f64,
    pub oracle_mean_s: f64,
    pub oracle_std_s: f64,
    /// Oracle time over GNS time.
    pub ratio: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Wall-clock time per reporting step for the model and the reference solver
/// on the same system; one warm-up call of each is excluded.
pub fn benchmark_step(params: &GnsParams, system: &VoxelSystem, repetitions: usize) -> Result<Timing> {
    if repetitions == 0 {
        return Err(Error::Contract("benchmark needs at least one repetition".into()));
    }
    let dt = params.spec.dt;
    let state = ThermalState::uniform(system, system.reference_temperature());
    let oracle = Oracle::new(system);
    let mut gns = Vec::with_capacity(repetitions);
    let mut ora = Vec::with_capacity(repetitions);
    params.gns_step(system, &state, dt)?;
    oracle.step(system, &state, dt)?;
    for _ in 0..repetitions {
        let t = Instant::now();
        std::hint::black_box(params.gns_step(system, &state, dt)?);
        gns.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        std::hint::black_box(oracle.step(system, &state, dt)?);
        ora.push(t.elapsed().as_secs_f64());
    }
    let (gm, gs) = mean_std(&gns);
    let (om, os) = mean_std(&ora);
    Ok(Timing {
        repetitions,
        gns_mean_s: gm,
        gns_std_s: gs,
        oracle_mean_s: om,
        oracle_std_s: os,
        ratio: om / gm,
    })
}

/// A named training set.
#[derive(Debug, Clone)]
pub struct MixRecipe {
    pub name: String,
    pub data: Vec<(VoxelSystem, Trajectory)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixResult {
    pub mix: String,
    pub seed: u64,
    /// Mean over evaluation systems of the per-step rollout error.
    pub mean_curve: Vec<f64>,
    pub final_error: f64,
}

/// Mean rollout curve of `params` over a set of reference trajectories.
pub fn mean_rollout_curve(params: &GnsParams, eval: &[(VoxelSystem, Trajectory)]) -> Result<Vec<f64>> {
    if eval.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let mut mean: Vec<f64> = Vec::new();
    for (s, tr) in eval {
        let c = rollout_error(params, s, tr)?;
        if mean.is_empty() {
            mean = vec![0.0; c.len()];
        }
        if c.len() != mean.len() {
            return Err(Error::Shape("evaluation trajectories differ in length".into()));
        }
        for (m, x) in mean.iter_mut().zip(&c) {
            *m += x / eval.len() as f64;
        }
    }
    Ok(mean)
}

/// Trains one model per (mix, seed) with otherwise identical settings and
/// evaluates each on the shared evaluation set.
pub fn compare_training_mixes(
    mixes: &[MixRecipe],
    eval: &[(VoxelSystem, Trajectory)],
    spec: GnsSpec,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<MixResult>> {
    let mut out = Vec::new();
    for mix in mixes {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..*config };
            let data = build_dataset(mix.data.clone(), &cfg)?;
            let st = train(&data, spec, &cfg)?;
            let mean_curve = mean_rollout_curve(&st.params, eval)?;
            out.push(MixResult {
                mix: mix.name.clone(),
                seed,
                final_error: *mean_curve.last().unwrap_or(&0.0),
                mean_curve,
            });
        }
    }
    Ok(out)
}
