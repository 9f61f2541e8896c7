//! One-step supervised training of the GNS against reference trajectories.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::one_step_error;
use crate::gns::{GnsGradients, GnsParams, GnsSpec, GraphBatch};
use crate::graph::{build_graph, ThermalGraph};
use crate::io::{put_f64s, read_file, write_atomic, Reader};
use crate::system::{ThermalState, VoxelSystem};
use crate::trajectory::Trajectory;

pub use crate::metrics::relative_l1;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const OPTIMIZER_MAGIC: [u8; 8] = *b"TGNSADM\0";
pub const OPTIMIZER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Number of equal multiplicative drops from `lr_initial` to `lr_final`.
    pub lr_drops: usize,
    /// Fraction of the epochs after which `lr_final` is reached.
    pub lr_plateau_fraction: f64,
    pub batch_size: usize,
    pub noise_std: f64,
    pub noise_off_fraction: f64,
    pub epochs: usize,
    pub split_fraction: f64,
    /// Pairs drawn per system, out of `steps_reference` reporting steps.
    pub steps_per_system: usize,
    pub steps_reference: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-4,
            lr_final: 1e-6,
            lr_drops: 8,
            lr_plateau_fraction: 0.8,
            batch_size: 10,
            noise_std: 3e-5,
            noise_off_fraction: 0.1,
            epochs: 50,
            split_fraction: 0.8,
            steps_per_system: 375,
            steps_reference: 400,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(field, msg));
        if !(self.lr_initial >= 0.0 && self.lr_final >= 0.0 && self.lr_final <= self.lr_initial) {
            return bad(
                "lr_final",
                format!(
                    "need 0 <= lr_final <= lr_initial, got {} and {}",
                    self.lr_final, self.lr_initial
                ),
            );
        }
        if self.lr_drops == 0 {
            return bad("lr_drops", "must be positive".into());
        }
        if !(self.lr_plateau_fraction > 0.0 && self.lr_plateau_fraction <= 1.0) {
            return bad(
                "lr_plateau_fraction",
                format!("must be in (0, 1], got {}", self.lr_plateau_fraction),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", format!("must be >= 0, got {}", self.noise_std));
        }
        if !(0.0..=1.0).contains(&self.noise_off_fraction) {
            return bad(
                "noise_off_fraction",
                format!("must be in [0, 1], got {}", self.noise_off_fraction),
            );
        }
        if !(self.split_fraction > 0.0 && self.split_fraction <= 1.0) {
            return bad(
                "split_fraction",
                format!("must be in (0, 1], got {}", self.split_fraction),
            );
        }
        if self.steps_per_system == 0 || self.steps_per_system > self.steps_reference {
            return bad(
                "steps_per_system",
                format!("must be in 1..={}, got {}", self.steps_reference, self.steps_per_system),
            );
        }
        Ok(())
    }

    /// Epochs between learning-rate drops.
    pub fn lr_interval(&self) -> usize {
        ((self.lr_plateau_fraction * self.epochs as f64 / self.lr_drops as f64).floor() as usize).max(1)
    }

    /// First epoch trained without input noise.
    pub fn noise_off_epoch(&self) -> usize {
        self.epochs - (self.noise_off_fraction * self.epochs as f64).round() as usize
    }
}

/// Piecewise-constant learning rate.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let k = epoch / config.lr_interval();
    if k >= config.lr_drops || config.lr_initial == 0.0 {
        return config.lr_final;
    }
    let factor = (config.lr_final / config.lr_initial).powf(1.0 / config.lr_drops as f64);
    (config.lr_initial * factor.powi(k as i32)).max(config.lr_final)
}

/// Multiplies each temperature by an independent `N(1, std)` draw.
pub fn inject_noise(state: &ThermalState, std: f64, rng: &mut impl rand::Rng) -> ThermalState {
    if std == 0.0 {
        return state.clone();
    }
    let normal = Normal::new(1.0, std).expect("std is finite and non-negative");
    ThermalState {
        t: state.t,
        temps: state.temps.iter().map(|t| t * normal.sample(rng)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    /// Index into [`Dataset::systems`].
    pub system: usize,
    pub system_ref: String,
    pub step_index: usize,
    pub input: ThermalState,
    pub target: ThermalState,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub systems: Vec<VoxelSystem>,
    pub train: Vec<TrainPair>,
    pub test: Vec<TrainPair>,
    pub dt: f64,
}

impl Dataset {
    pub fn train_refs(&self) -> Vec<String> {
        let mut r: Vec<String> = self.train.iter().map(|p| p.system_ref.clone()).collect();
        r.dedup();
        r
    }

    pub fn test_refs(&self) -> Vec<String> {
        let mut r: Vec<String> = self.test.iter().map(|p| p.system_ref.clone()).collect();
        r.dedup();
        r
    }
}

/// Derives an independent stream seed from `seed` and a key.
pub fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws a per-system subset of reporting steps and splits systems into
/// train and test pools.
pub fn build_dataset(data: Vec<(VoxelSystem, Trajectory)>, config: &TrainConfig) -> Result<Dataset> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("no trajectories to train on".into()));
    }
    let dt = data[0].1.dt;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0xDA7A));
    let mut per_system = Vec::with_capacity(data.len());
    for (i, (sys, tr)) in data.iter().enumerate() {
        tr.validate()?;
        if tr.n_steps() == 0 {
            return Err(Error::Contract(format!("trajectory of {} has no steps", sys.name)));
        }
        if (tr.dt - dt).abs() > 1e-12 * dt {
            return Err(Error::Contract(format!(
                "{} uses dt = {}, others {dt}",
                sys.name, tr.dt
            )));
        }
        if tr.n_cells() != sys.n_occupied() {
            return Err(Error::Structure(format!(
                "trajectory does not match system {}",
                sys.name
            )));
        }
        let n = tr.n_steps();
        let k = ((n * config.steps_per_system) as f64 / config.steps_reference as f64).round() as usize;
        let mut steps = sample(&mut rng, n, k.clamp(1, n)).into_vec();
        steps.sort_unstable();
        let pairs: Vec<TrainPair> = steps
            .into_iter()
            .map(|s| TrainPair {
                system: i,
                system_ref: sys.name.clone(),
                step_index: s,
                input: tr.states[s].clone(),
                target: tr.states[s + 1].clone(),
            })
            .collect();
        per_system.push(pairs);
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = if n == 1 {
        1
    } else {
        ((config.split_fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let mut train_ids = order[..n_train].to_vec();
    let mut test_ids = order[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut per_system: Vec<Option<Vec<TrainPair>>> = per_system.into_iter().map(Some).collect();
    for i in train_ids {
        train.extend(per_system[i].take().unwrap());
    }
    for i in test_ids {
        test.extend(per_system[i].take().unwrap());
    }
    Ok(Dataset {
        systems: data.into_iter().map(|(s, _)| s).collect(),
        train,
        test,
        dt,
    })
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &GnsParams) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&OPTIMIZER_MAGIC);
        out.extend_from_slice(&OPTIMIZER_VERSION.to_le_bytes());
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.bytes::<8>()? != OPTIMIZER_MAGIC {
            return Err(r.err("not an optimizer state file"));
        }
        let version = r.u32()?;
        if version != OPTIMIZER_VERSION {
            return Err(Error::Version(format!(
                "{}: optimizer state version {version}",
                path.display()
            )));
        }
        let t = r.u64()?;
        let n = r.u64()? as usize;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u64()? as usize;
            m.push(r.f64_vec(len)?);
            v.push(r.f64_vec(len)?);
        }
        r.finish()?;
        Ok(Self { t, m, v })
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut GnsParams, grads: &GnsGradients, state: &mut AdamState, lr: f64) -> Result<()> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    if g.len() != p.len()
        || state.m.len() != p.len()
        || p.iter()
            .zip(&g)
            .zip(&state.m)
            .any(|((a, b), c)| a.len() != b.len() || a.len() != c.len())
    {
        return Err(Error::Shape("gradient, parameter and optimizer layouts differ".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (k, (pt, gt)) in p.iter_mut().zip(&g).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..pt.len() {
            let gi = gt[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            pt[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// `NaN` when there is no test pool.
    pub test_one_step_error: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,test_one_step_error\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.lr, r.train_loss, r.test_one_step_error);
    }
    s
}

pub fn parse_history_csv(text: &str, path: &Path) -> Result<Vec<EpochRecord>> {
    let err = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        message: format!("line {}: {msg}", line + 1),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == "epoch,lr,train_loss,test_one_step_error" => {}
        _ => return Err(err(0, "missing history header")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(err(i, "expected 4 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(i, "bad number"));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| err(i, "bad epoch"))?,
                lr: num(f[1])?,
                train_loss: num(f[2])?,
                test_one_step_error: num(f[3])?,
            })
        })
        .collect()
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: GnsParams,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

pub const STATE_MODEL_FILE: &str = "model.ckpt";
pub const STATE_OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_HISTORY_FILE: &str = "history.csv";

impl TrainState {
    pub fn fresh(spec: GnsSpec, seed: u64) -> Result<Self> {
        let params = GnsParams::init(spec, seed)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            params,
            adam,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn save(&self, dir: &Path, provenance: &crate::gns::Provenance) -> Result<()> {
        self.params.save(&dir.join(STATE_MODEL_FILE), Some(provenance))?;
        write_atomic(&dir.join(STATE_OPTIMIZER_FILE), &self.adam.to_bytes())?;
        write_atomic(&dir.join(STATE_HISTORY_FILE), history_csv(&self.history).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = GnsParams::load(&dir.join(STATE_MODEL_FILE))?;
        let opt_path = dir.join(STATE_OPTIMIZER_FILE);
        let adam = AdamState::from_bytes(&read_file(&opt_path)?, &opt_path)?;
        if adam.m.iter().map(Vec::len).ne(params.tensors().iter().map(|t| t.len())) {
            return Err(Error::Structure("optimizer state does not match the checkpoint".into()));
        }
        let hist_path = dir.join(STATE_HISTORY_FILE);
        let text = String::from_utf8_lossy(&read_file(&hist_path)?).into_owned();
        let history = parse_history_csv(&text, &hist_path)?;
        Ok(Self {
            params,
            adam,
            epoch: history.last().map_or(0, |r| r.epoch + 1),
            history,
        })
    }
}

/// Input graph of each system at step 0; pairs re-read sources and
/// temperatures from it.
fn base_graphs(data: &Dataset) -> Result<Vec<ThermalGraph>> {
    data.systems
        .iter()
        .map(|s| build_graph(s, &ThermalState::uniform(s, s.reference_temperature()), data.dt))
        .collect()
}

pub(crate) fn pair_graph(
    base: &ThermalGraph,
    system: &VoxelSystem,
    input: &ThermalState,
    step: usize,
) -> Result<ThermalGraph> {
    let mut g = base.clone();
    g.refresh_sources_mut(system, step)?;
    g.refresh_temperatures_mut(input)?;
    Ok(g)
}

/// Runs epochs `state.epoch..config.epochs`, calling `on_epoch` after each.
pub fn train_from(
    data: &Dataset,
    mut state: TrainState,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if (data.dt - state.params.spec.dt).abs() > 1e-12 * data.dt {
        return Err(Error::Contract(format!(
            "data uses dt = {} s, model is built for {} s",
            data.dt, state.params.spec.dt
        )));
    }
    let bases = base_graphs(data)?;
    let noise_off = config.noise_off_epoch();
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let lr = lr_at(epoch, config);
        let std = if epoch < noise_off { config.noise_std } else { 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 1 + epoch as u64));
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut graphs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::new();
            for &i in chunk {
                let p = &data.train[i];
                let noisy = inject_noise(&p.input, std, &mut rng);
                graphs.push(pair_graph(
                    &bases[p.system],
                    &data.systems[p.system],
                    &noisy,
                    p.step_index,
                )?);
                targets.extend_from_slice(&p.target.temps);
            }
            let refs: Vec<&ThermalGraph> = graphs.iter().collect();
            let batch = GraphBatch::from_graphs(&refs)?;
            let refs_str = || {
                chunk
                    .iter()
                    .map(|&i| data.train[i].system_ref.as_str())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let (loss, grads) = state.params.loss_and_gradient(&batch, &targets).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {b} ({}): {m}", refs_str())),
                other => other,
            })?;
            if !loss.is_finite() || grads.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {b} (systems {})",
                    refs_str()
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            adam_step(&mut state.params, &grads, &mut state.adam, lr)?;
        }
        let test_err = if data.test.is_empty() {
            f64::NAN
        } else {
            one_step_error(&state.params, data, &data.test)?
        };
        state.history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / data.train.len() as f64,
            test_one_step_error: test_err,
        });
        state.epoch += 1;
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Freshly initialized state for `spec`, advancing by the data's time step.
pub fn initial_state(data: &Dataset, spec: GnsSpec, config: &TrainConfig) -> Result<TrainState> {
    TrainState::fresh(GnsSpec { dt: data.dt, ..spec }, mix(config.seed, 0x1A17))
}

pub fn train(data: &Dataset, spec: GnsSpec, config: &TrainConfig) -> Result<TrainState> {
    train_from(data, initial_state(data, spec, config)?, config, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::simulate_reference;
    use crate::sysgen::gen_voxel_system;

    fn tiny_trajectories(n: usize, steps: usize) -> Vec<(VoxelSystem, Trajectory)> {
        (0..n)
            .map(|i| {
                let mut s = gen_voxel_system(i as u64, [2, 2, 2], 2e-4);
                s.name = format!("sys{i:02}");
                s.cells[0].source_power = 5e-4;
                let tr = simulate_reference(&s, s.reference_temperature(), steps, 0.01).unwrap();
                (s, tr)
            })
            .collect()
    }

    fn spec() -> GnsSpec {
        GnsSpec {
            latent_dim: 8,
            flux_output_init: 1e-3,
            ..GnsSpec::default()
        }
    }

    #[test]
    fn lr_schedule_endpoints_and_monotonicity() {
        let c = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &c), 1e-4);
        assert_eq!(c.lr_interval(), 10);
        assert_eq!(lr_at(80, &c), 1e-6);
        assert_eq!(lr_at(99, &c), 1e-6);
        assert!((lr_at(10, &c) / 1e-4 - 10f64.powf(-0.25)).abs() < 1e-12);
        for e in 1..200 {
            assert!(lr_at(e, &c) <= lr_at(e - 1, &c));
        }
        let short = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        assert_eq!(short.lr_interval(), 1);
        assert_eq!(lr_at(0, &short), 1e-4);
        assert_eq!(lr_at(8, &short), 1e-6);
    }

    #[test]
    fn noise_statistics() {
        let st = ThermalState {
            t: 0.0,
            temps: vec![1.0; 1_000_000],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = inject_noise(&st, 3e-5, &mut rng);
        let n = noisy.temps.len() as f64;
        let mean = noisy.temps.iter().sum::<f64>() / n;
        let std = (noisy.temps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 1.0).abs() < 1e-6, "mean {mean}");
        assert!((std / 3e-5 - 1.0).abs() < 0.05, "std {std}");
        assert_eq!(inject_noise(&st, 0.0, &mut rng), st);
        let a = inject_noise(&st, 3e-5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = inject_noise(&st, 3e-5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_counts_and_split() {
        let data = tiny_trajectories(10, 100);
        let c = TrainConfig::default();
        let ds = build_dataset(data.clone(), &c).unwrap();
        assert_eq!(ds.train_refs().len(), 8);
        assert_eq!(ds.test_refs().len(), 2);
        assert_eq!(ds.train.len(), 8 * 94);
        assert_eq!(ds.test.len(), 2 * 94);
        for r in ds.test_refs() {
            assert!(!ds.train_refs().contains(&r));
        }
        for p in &ds.train {
            assert!((p.target.t - p.input.t - 0.01).abs() < 1e-12);
            assert!(p.step_index < 100);
        }
        let again = build_dataset(data.clone(), &c).unwrap();
        assert_eq!(again.train, ds.train);
        assert_eq!(again.test, ds.test);

        let one_out = TrainConfig {
            split_fraction: 0.9,
            ..c
        };
        assert_eq!(build_dataset(data, &one_out).unwrap().test_refs().len(), 1);
        assert!(build_dataset(Vec::new(), &c).is_err());
    }

    #[test]
    fn adam_identities() {
        let mut p = GnsParams::init(spec(), 1).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zero = p.zero_gradients();
        adam_step(&mut p, &zero, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);

        let mut g = p.zero_gradients();
        g.flux_mlp.layers[0].bias[0] = 0.37;
        g.flux_mlp.layers[0].bias[1] = -2.5e-6;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        let d0 = p.flux_mlp.params.layers[0].bias[0] - before.flux_mlp.params.layers[0].bias[0];
        let d1 = p.flux_mlp.params.layers[0].bias[1] - before.flux_mlp.params.layers[0].bias[1];
        assert!((d0 + 1e-3).abs() < 1e-10);
        assert!((d1 - 1e-3).abs() < 1e-5);

        let bytes = st.to_bytes();
        assert_eq!(AdamState::from_bytes(&bytes, Path::new("m")).unwrap(), st);
    }

    #[test]
    fn overfits_a_single_pair() {
        let data = tiny_trajectories(1, 3);
        let c = TrainConfig {
            epochs: 400,
            split_fraction: 1.0,
            steps_per_system: 1,
            steps_reference: 3,
            noise_std: 0.0,
            lr_initial: 1e-3,
            lr_final: 1e-3,
            ..TrainConfig::default()
        };
        let ds = build_dataset(data, &c).unwrap();
        assert_eq!(ds.train.len(), 1);
        let st = train(&ds, spec(), &c).unwrap();
        let first = st.history[0].train_loss;
        let last = st.history.last().unwrap().train_loss;
        assert!(last < 0.2 * first, "{first} -> {last}");
        assert!(st.history.iter().all(|r| r.test_one_step_error.is_nan()));
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = tiny_trajectories(2, 4);
        let c = TrainConfig {
            epochs: 2,
            lr_initial: 0.0,
            lr_final: 0.0,
            steps_reference: 4,
            steps_per_system: 4,
            ..TrainConfig::default()
        };
        let ds = build_dataset(data, &c).unwrap();
        let init = TrainState::fresh(spec(), 5).unwrap();
        let out = train_from(&ds, init.clone(), &c, |_| Ok(())).unwrap();
        assert_eq!(out.params, init.params);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn resume_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_trajectories(3, 6);
        let c = TrainConfig {
            epochs: 4,
            steps_reference: 6,
            steps_per_system: 5,
            batch_size: 3,
            lr_initial: 1e-3,
            ..TrainConfig::default()
        };
        let ds = build_dataset(data, &c).unwrap();
        let full = train_from(&ds, TrainState::fresh(spec(), 2).unwrap(), &c, |_| Ok(())).unwrap();

        let prov = crate::gns::Provenance {
            seed: 2,
            epoch: 2,
            loss: 0.0,
            tool_version: "t".into(),
        };
        let half = TrainConfig { epochs: 2, ..c };
        let partial = train_from(&ds, TrainState::fresh(spec(), 2).unwrap(), &half, |_| Ok(())).unwrap();
        partial.save(dir.path(), &prov).unwrap();
        let loaded = TrainState::load(dir.path()).unwrap();
        assert_eq!(loaded, partial);
        let resumed = train_from(&ds, loaded, &c, |_| Ok(())).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let data = tiny_trajectories(2, 3);
        let c = TrainConfig {
            epochs: 1,
            steps_reference: 3,
            steps_per_system: 3,
            ..TrainConfig::default()
        };
        let ds = build_dataset(data, &c).unwrap();
        let mut st = TrainState::fresh(spec(), 0).unwrap();
        st.params.flux_mlp.params.layers[2].bias[0] = 800.0;
        let err = train_from(&ds, st, &c, |_| Ok(())).unwrap_err();
        assert_eq!(err.category(), "numerical");
        assert!(err.to_string().contains("epoch 0"), "{err}");
    }

    #[test]
    fn history_round_trip() {
        let h = vec![
            EpochRecord {
                epoch: 0,
                lr: 1e-4,
                train_loss: 0.123456789012345,
                test_one_step_error: f64::NAN,
            },
            EpochRecord {
                epoch: 1,
                lr: 5.6e-5,
                train_loss: 1e-7,
                test_one_step_error: 3.3e-6,
            },
        ];
        let back = parse_history_csv(&history_csv(&h), Path::new("h")).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].test_one_step_error.is_nan());
        assert_eq!(back[1], h[1]);
        assert_eq!(back[0].train_loss, h[0].train_loss);
        assert!(parse_history_csv("nope\n", Path::new("h")).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let e = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .unwrap_err();
        assert!(e.to_string().contains("batch_size"));
        assert!(TrainConfig {
            split_fraction: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_final: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    proptest::proptest! {
        #[test]
        fn lr_schedule_stays_between_endpoints(
            epochs in 1usize..500,
            lr_initial in 1e-6f64..1e-1,
            ratio in 1e-4f64..1.0,
        ) {
            let c = TrainConfig {
                epochs,
                lr_initial,
                lr_final: lr_initial * ratio,
                ..TrainConfig::default()
            };
            proptest::prop_assert_eq!(lr_at(0, &c), lr_initial);
            for e in 1..epochs + 5 {
                let lr = lr_at(e, &c);
                proptest::prop_assert!(lr <= lr_at(e - 1, &c));
                proptest::prop_assert!(lr >= c.lr_final && lr <= lr_initial);
            }
        }
    }
}
