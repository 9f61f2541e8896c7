//! Config-driven commands behind the command-line tool.
//!
//! Each command writes its artifacts and exactly one [`MANIFEST_FILE`] into a
//! single output directory. Configs are JSON objects carrying a `version`
//! field; every other field is optional and falls back to its default.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{benchmark_step, curve_between, error_map, max_error_at_source, one_step_error, Timing};
use crate::gns::{GnsParams, GnsSpec, Provenance};
use crate::io::write_atomic;
use crate::metrics::relative_l1;
use crate::oracle::{simulate_reference, Oracle};
use crate::sysgen::{
    electronic_dims, gen_block_system_with, gen_electronic_system_with, gen_voxel_system_with, BlockConfig,
    ElectronicConfig, VoxelConfig,
};
use crate::system::{VoxelSystem, DEFAULT_DT, DEFAULT_DX};
use crate::train::{
    build_dataset, initial_state, mix, train_from, Dataset, EpochRecord, TrainConfig, TrainPair, TrainState,
    STATE_MODEL_FILE,
};
use crate::trajectory::Trajectory;
use crate::vtk::write_vtk;

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "THERMO_GNS_OUT";
pub const DEFAULT_OUT_ROOT: &str = "thermo-gns-out";
pub const TOOL_NAME: &str = "thermo-gns";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// `$THERMO_GNS_OUT/<command>`, or `thermo-gns-out/<command>` when unset.
pub fn default_out_dir(command: &str) -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
        .join(command)
}

pub trait CommandConfig: Serialize + DeserializeOwned + Default {
    fn validate(&self) -> Result<()>;
}

/// Parses and validates a config; field errors carry their JSON path.
pub fn parse_config<T: CommandConfig>(text: &str) -> Result<T> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config(".", e.to_string()))?;
    match raw.get("version") {
        None => return Err(Error::config("version", "missing; configs must declare a version")),
        Some(v) if v.as_u64() == Some(CONFIG_VERSION as u64) => {}
        Some(v) => {
            return Err(Error::Version(format!(
                "config version {v} is not supported (expected {CONFIG_VERSION})"
            )))
        }
    }
    let cfg: T = serde_path_to_error::deserialize(raw).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config<T: CommandConfig>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn check_version(version: u32) -> Result<()> {
    if version != CONFIG_VERSION {
        return Err(Error::Version(format!(
            "config version {version} is not supported (expected {CONFIG_VERSION})"
        )));
    }
    Ok(())
}

fn nested(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { path, message } => Error::Config {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => other,
    }
}

fn check_dims(field: &str, dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::config(
            field,
            format!("every extent must be at least 1, got {dims:?}"),
        ));
    }
    Ok(())
}

fn check_positive(field: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::config(field, format!("must be positive and finite, got {x}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item: String,
    pub category: String,
    pub message: String,
}

impl ItemFailure {
    fn new(item: impl Into<String>, e: &Error) -> Self {
        Self {
            item: item.into(),
            category: e.category().into(),
            message: e.to_string(),
        }
    }
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    /// SHA-256 of the effective config serialized with sorted keys.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    /// Artifact paths relative to the manifest's directory.
    pub outputs: Vec<PathBuf>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub status: RunStatus,
    pub failures: Vec<ItemFailure>,
    pub error: Option<String>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn config_hash(config: &serde_json::Value) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    fn begin(command: &str, config: &impl Serialize, seeds: Vec<u64>, inputs: Vec<PathBuf>) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            tool: TOOL_NAME.into(),
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            config_hash: config_hash(&config)?,
            config,
            seeds,
            inputs,
            outputs: Vec::new(),
            started_unix_s: unix_now(),
            finished_unix_s: 0.0,
            status: RunStatus::Ok,
            failures: Vec::new(),
            error: None,
        })
    }

    fn finish(mut self, dir: &Path, error: Option<&Error>) -> Result<Self> {
        self.finished_unix_s = unix_now();
        self.outputs.sort();
        self.outputs.dedup();
        self.error = error.map(|e| format!("[{}] {e}", e.category()));
        self.status = if error.is_some() {
            RunStatus::Failed
        } else if self.failures.is_empty() {
            RunStatus::Ok
        } else {
            RunStatus::Partial
        };
        write_atomic(
            &dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&self)?.as_bytes(),
        )?;
        Ok(self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })
    }

    /// Copy with both timestamps zeroed, for comparing reruns.
    pub fn without_timestamps(&self) -> Self {
        Self {
            started_unix_s: 0.0,
            finished_unix_s: 0.0,
            ..self.clone()
        }
    }
}

fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(Error::config("workers", "must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// System files in `dir`, sorted by name; manifests and splits are skipped.
pub fn list_system_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if path.is_file() && name.ends_with(".json") && name != MANIFEST_FILE && name != SPLIT_FILE {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn trajectory_path(dir: &Path, system_name: &str) -> PathBuf {
    dir.join(format!("{system_name}.traj"))
}

fn check_unique_names(systems: &[VoxelSystem]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in systems {
        if !seen.insert(s.name.as_str()) {
            return Err(Error::Contract(format!("two system files share the name {:?}", s.name)));
        }
    }
    Ok(())
}

/// Loads every system in `systems_dir` with its trajectory from
/// `trajectories_dir`.
pub fn load_system_trajectories(systems_dir: &Path, trajectories_dir: &Path) -> Result<Vec<(VoxelSystem, Trajectory)>> {
    let systems = list_system_files(systems_dir)?
        .iter()
        .map(|p| VoxelSystem::load(p))
        .collect::<Result<Vec<_>>>()?;
    check_unique_names(&systems)?;
    let mut out = Vec::with_capacity(systems.len());
    for s in systems {
        let path = trajectory_path(trajectories_dir, &s.name);
        let tr = Trajectory::load(&path)?;
        tr.validate()?;
        if tr.n_cells() != s.n_occupied() {
            return Err(Error::Structure(format!(
                "{} has {} cells per frame, system {} has {} occupied cells",
                path.display(),
                tr.n_cells(),
                s.name,
                s.n_occupied()
            )));
        }
        out.push((s, tr));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub version: u32,
    pub seed: u64,
    /// Grid of voxel and block systems.
    pub dims: [usize; 3],
    pub dx: f64,
    pub voxel: usize,
    pub block: usize,
    pub electronic: usize,
    pub blocks_per_system: usize,
    /// Grid of electronic-like systems; `None` is four times `dims`.
    pub electronic_dims: Option<[usize; 3]>,
    pub voxel_options: VoxelConfig,
    pub block_options: BlockConfig,
    pub electronic_options: ElectronicConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            dims: [10, 10, 10],
            dx: DEFAULT_DX,
            voxel: 10,
            block: 10,
            electronic: 0,
            blocks_per_system: 3,
            electronic_dims: None,
            voxel_options: VoxelConfig::default(),
            block_options: BlockConfig::default(),
            electronic_options: ElectronicConfig::default(),
        }
    }
}

impl CommandConfig for GenerateConfig {
    fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        check_dims("dims", self.dims)?;
        if let Some(d) = self.electronic_dims {
            check_dims("electronic_dims", d)?;
        }
        check_positive("dx", self.dx)?;
        let f = self.voxel_options.source_fraction;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::config(
                "voxel_options.source_fraction",
                format!("must lie in [0, 1], got {f}"),
            ));
        }
        let f = self.block_options.max_footprint_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config(
                "block_options.max_footprint_fraction",
                format!("must lie in (0, 1], got {f}"),
            ));
        }
        let p = self.block_options.source_block_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(
                "block_options.source_block_probability",
                format!("must lie in [0, 1], got {p}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum FamilyJob {
    Voxel,
    Block,
    Electronic,
}

impl FamilyJob {
    fn prefix(self) -> &'static str {
        match self {
            FamilyJob::Voxel => "voxel",
            FamilyJob::Block => "block",
            FamilyJob::Electronic => "electronic",
        }
    }

    fn key(self) -> u64 {
        match self {
            FamilyJob::Voxel => 1,
            FamilyJob::Block => 2,
            FamilyJob::Electronic => 3,
        }
    }
}

fn generate_one(cfg: &GenerateConfig, family: FamilyJob, i: usize) -> Result<VoxelSystem> {
    let seed = mix(mix(cfg.seed, family.key()), i as u64);
    let mut sys = match family {
        FamilyJob::Voxel => gen_voxel_system_with(seed, cfg.dims, cfg.dx, &cfg.voxel_options),
        FamilyJob::Block => gen_block_system_with(seed, cfg.dims, cfg.dx, cfg.blocks_per_system, &cfg.block_options),
        FamilyJob::Electronic => {
            let dims = cfg.electronic_dims.unwrap_or_else(|| electronic_dims(cfg.dims));
            gen_electronic_system_with(seed, dims, cfg.dx, &cfg.electronic_options)?
        }
    };
    sys.name = format!("{}_{i:04}", family.prefix());
    sys.validate()?;
    Ok(sys)
}

/// Writes one JSON file per generated system into `out_dir`.
pub fn cmd_generate(cfg: &GenerateConfig, out_dir: &Path, workers: Option<usize>) -> Result<RunManifest> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let mut manifest = RunManifest::begin("generate", cfg, vec![cfg.seed], Vec::new())?;
    let jobs: Vec<(FamilyJob, usize)> = [
        (FamilyJob::Voxel, cfg.voxel),
        (FamilyJob::Block, cfg.block),
        (FamilyJob::Electronic, cfg.electronic),
    ]
    .into_iter()
    .flat_map(|(f, n)| (0..n).map(move |i| (f, i)))
    .collect();
    let results: Vec<(String, Result<PathBuf>)> = worker_pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(f, i)| {
                let item = format!("{}_{i:04}", f.prefix());
                let r = generate_one(cfg, f, i).and_then(|s| {
                    let name = PathBuf::from(format!("{}.json", s.name));
                    s.save(&out_dir.join(&name))?;
                    Ok(name)
                });
                (item, r)
            })
            .collect()
    });
    for (item, r) in results {
        match r {
            Ok(p) => manifest.outputs.push(p),
            Err(e) => manifest.failures.push(ItemFailure::new(item, &e)),
        }
    }
    manifest.finish(out_dir, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub version: u32,
    pub n_steps: usize,
    pub dt: f64,
    /// Uniform initial temperature; `None` uses each system's boundary
    /// temperature.
    pub t0: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            n_steps: 400,
            dt: DEFAULT_DT,
            t0: None,
        }
    }
}

impl CommandConfig for SimulateConfig {
    fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        if self.n_steps == 0 {
            return Err(Error::config("n_steps", "must be at least 1"));
        }
        check_positive("dt", self.dt)?;
        if let Some(t) = self.t0 {
            check_positive("t0", t)?;
        }
        Ok(())
    }
}

/// Runs the reference solver on every system in `systems_dir`, writing
/// `<name>.traj` files into `out_dir`. Failing systems are listed in the
/// manifest and do not stop the others.
pub fn cmd_simulate(
    cfg: &SimulateConfig,
    systems_dir: &Path,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<RunManifest> {
    cfg.validate()?;
    let files = list_system_files(systems_dir)?;
    create_dir(out_dir)?;
    let mut manifest = RunManifest::begin("simulate", cfg, Vec::new(), vec![systems_dir.to_path_buf()])?;
    let mut names = BTreeSet::new();
    let mut systems = Vec::new();
    for f in &files {
        let item = f
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match VoxelSystem::load(f) {
            Ok(s) if !names.insert(s.name.clone()) => manifest.failures.push(ItemFailure::new(
                item,
                &Error::Contract(format!("duplicate system name {:?}", s.name)),
            )),
            Ok(s) => systems.push(s),
            Err(e) => manifest.failures.push(ItemFailure::new(item, &e)),
        }
    }
    let results: Vec<(String, Result<PathBuf>)> = worker_pool(workers)?.install(|| {
        systems
            .par_iter()
            .map(|s| {
                let r = simulate_reference(
                    s,
                    cfg.t0.unwrap_or_else(|| s.reference_temperature()),
                    cfg.n_steps,
                    cfg.dt,
                )
                .and_then(|tr| {
                    let name = PathBuf::from(format!("{}.traj", s.name));
                    tr.save(&out_dir.join(&name))?;
                    Ok(name)
                });
                (s.name.clone(), r)
            })
            .collect()
    });
    for (item, r) in results {
        match r {
            Ok(p) => manifest.outputs.push(p),
            Err(e) => manifest.failures.push(ItemFailure::new(item, &e)),
        }
    }
    manifest.finish(out_dir, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub version: u32,
    pub systems_dir: Option<PathBuf>,
    pub trajectories_dir: Option<PathBuf>,
    pub model: GnsSpec,
    pub train: TrainConfig,
    /// Epoch interval of periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Continue from the state found in the output directory, if any.
    pub resume: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            systems_dir: None,
            trajectories_dir: None,
            model: GnsSpec::default(),
            train: TrainConfig::default(),
            checkpoint_every: 10,
            resume: false,
        }
    }
}

fn required<'a>(field: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::config(field, "required"))
}

impl CommandConfig for TrainRunConfig {
    fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        self.model.validate().map_err(|e| match e {
            Error::Contract(m) => Error::config("model", m),
            other => other,
        })?;
        self.train.validate().map_err(|e| nested("train", e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn of(data: &Dataset) -> Self {
        Self {
            train: data.train_refs(),
            test: data.test_refs(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn provenance(state: &TrainState, seed: u64) -> Provenance {
    Provenance {
        seed,
        epoch: state.epoch,
        loss: state.history.last().map_or(f64::NAN, |r| r.train_loss),
        tool_version: TOOL_VERSION.into(),
    }
}

fn periodic_checkpoint_name(epoch: usize) -> PathBuf {
    Path::new(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.ckpt"))
}

/// Builds the dataset, trains, and writes `model.ckpt`, `optimizer.bin`,
/// `history.csv`, `split.json` and periodic checkpoints into `out_dir`.
/// `report` sees every finished epoch.
pub fn cmd_train(cfg: &TrainRunConfig, out_dir: &Path, mut report: impl FnMut(&EpochRecord)) -> Result<RunManifest> {
    cfg.validate()?;
    let systems_dir = required("systems_dir", &cfg.systems_dir)?;
    let traj_dir = required("trajectories_dir", &cfg.trajectories_dir)?;
    let data = build_dataset(load_system_trajectories(systems_dir, traj_dir)?, &cfg.train)?;
    create_dir(out_dir)?;
    let split = Split::of(&data);
    write_atomic(
        &out_dir.join(SPLIT_FILE),
        serde_json::to_string_pretty(&split)?.as_bytes(),
    )?;

    let mut manifest = RunManifest::begin(
        "train",
        cfg,
        vec![cfg.train.seed],
        vec![systems_dir.to_path_buf(), traj_dir.to_path_buf()],
    )?;
    let fresh = initial_state(&data, cfg.model, &cfg.train)?;
    let state = if cfg.resume && out_dir.join(STATE_MODEL_FILE).exists() {
        let st = TrainState::load(out_dir)?;
        if st.params.spec != fresh.params.spec {
            let e = Error::Version(format!(
                "state in {} was trained with {:?}, config asks for {:?}",
                out_dir.display(),
                st.params.spec,
                fresh.params.spec
            ));
            manifest.finish(out_dir, Some(&e))?;
            return Err(e);
        }
        manifest.inputs.push(out_dir.join(STATE_MODEL_FILE));
        st
    } else {
        fresh
    };

    let seed = cfg.train.seed;
    let mut periodic = Vec::new();
    let result = train_from(&data, state, &cfg.train, |st| {
        if let Some(r) = st.history.last() {
            report(r);
        }
        if cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0 {
            let prov = provenance(st, seed);
            st.save(out_dir, &prov)?;
            let name = periodic_checkpoint_name(st.epoch);
            st.params.save(&out_dir.join(&name), Some(&prov))?;
            periodic.push(name);
        }
        Ok(())
    });
    match result.and_then(|st| st.save(out_dir, &provenance(&st, seed))) {
        Ok(()) => {
            manifest.outputs.extend(
                [
                    STATE_MODEL_FILE,
                    "model.ckpt.json",
                    crate::train::STATE_OPTIMIZER_FILE,
                    crate::train::STATE_HISTORY_FILE,
                    SPLIT_FILE,
                ]
                .map(PathBuf::from),
            );
            for p in periodic {
                manifest.outputs.push(p.with_extension("ckpt.json"));
                manifest.outputs.push(p);
            }
            manifest.finish(out_dir, None)
        }
        Err(e) => {
            manifest.outputs.push(PathBuf::from(SPLIT_FILE));
            manifest.outputs.extend(periodic);
            manifest.finish(out_dir, Some(&e))?;
            Err(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub version: u32,
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the reference solver against its own trajectories.
    pub identity: bool,
    pub systems_dir: Option<PathBuf>,
    pub trajectories_dir: Option<PathBuf>,
    /// `split.json` of a training run; restricts evaluation to its test
    /// systems.
    pub split: Option<PathBuf>,
    /// Steps exported as VTK error maps; empty means the final step only.
    pub map_steps: Vec<usize>,
    /// 0 skips the timing benchmark.
    pub benchmark_repetitions: usize,
    /// Benchmark on a generated voxel system of this size instead of the
    /// first evaluation system.
    pub benchmark_dims: Option<[usize; 3]>,
    pub seed: u64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            checkpoint: None,
            identity: false,
            systems_dir: None,
            trajectories_dir: None,
            split: None,
            map_steps: Vec::new(),
            benchmark_repetitions: 5,
            benchmark_dims: None,
            seed: 0,
        }
    }
}

impl CommandConfig for EvaluateConfig {
    fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        match (&self.checkpoint, self.identity) {
            (Some(_), true) => return Err(Error::config("identity", "cannot be combined with a checkpoint")),
            (None, false) => return Err(Error::config("checkpoint", "required unless identity is set")),
            _ => {}
        }
        if let Some(d) = self.benchmark_dims {
            check_dims("benchmark_dims", d)?;
        }
        Ok(())
    }
}

enum Model {
    Gns(GnsParams),
    Reference,
}

struct SystemEval {
    name: String,
    pairs: usize,
    one_step_sum: f64,
    curve: Vec<f64>,
    peak_at_source: bool,
    maps: Vec<PathBuf>,
}

fn evaluate_system(
    model: &Model,
    system: &VoxelSystem,
    reference: &Trajectory,
    map_steps: &[usize],
    out_dir: &Path,
) -> Result<SystemEval> {
    let dt = reference.dt;
    let n = reference.n_steps();
    let pairs: Vec<TrainPair> = (0..n)
        .map(|k| TrainPair {
            system: 0,
            system_ref: system.name.clone(),
            step_index: k,
            input: reference.states[k].clone(),
            target: reference.states[k + 1].clone(),
        })
        .collect();
    let (one_step_sum, predicted) = match model {
        Model::Gns(params) => {
            let data = Dataset {
                systems: vec![system.clone()],
                train: Vec::new(),
                test: Vec::new(),
                dt,
            };
            let sum = if pairs.is_empty() {
                0.0
            } else {
                one_step_error(params, &data, &pairs)? * pairs.len() as f64
            };
            (sum, params.rollout(system, &reference.states[0], n, dt)?)
        }
        Model::Reference => {
            let oracle = Oracle::new(system);
            let mut sum = 0.0;
            for p in &pairs {
                sum += relative_l1(&oracle.step(system, &p.input, dt)?.temps, &p.target.temps)?;
            }
            (sum, rollout_reference(&oracle, system, reference)?)
        }
    };
    let curve = curve_between(&predicted, reference)?;
    let final_map = error_map(&predicted.states[n], &reference.states[n])?;
    let peak_at_source = max_error_at_source(system, &final_map, n);
    let mut maps = Vec::new();
    let steps: Vec<usize> = if map_steps.is_empty() {
        vec![n]
    } else {
        map_steps.to_vec()
    };
    for k in steps {
        let map = error_map(&predicted.states[k], &reference.states[k])?;
        let name = PathBuf::from("maps").join(format!("{}_step{k:04}.vtk", system.name));
        write_vtk(
            &out_dir.join(&name),
            system,
            &format!("{} step {k}", system.name),
            &[
                ("temperature_model", &predicted.states[k].temps),
                ("temperature_reference", &reference.states[k].temps),
                ("relative_error", &map),
            ],
        )?;
        maps.push(name);
    }
    Ok(SystemEval {
        name: system.name.clone(),
        pairs: pairs.len(),
        one_step_sum,
        curve,
        peak_at_source,
        maps,
    })
}

fn rollout_reference(oracle: &Oracle, system: &VoxelSystem, reference: &Trajectory) -> Result<Trajectory> {
    let mut states = vec![reference.states[0].clone()];
    for i in 0..reference.n_steps() {
        let mut next = oracle.step(system, &states[i], reference.dt)?;
        next.t = (i + 1) as f64 * reference.dt;
        states.push(next);
    }
    Ok(Trajectory {
        system_ref: system.name.clone(),
        dt: reference.dt,
        states,
    })
}

/// Headline numbers of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub model: String,
    pub systems: usize,
    pub failed: usize,
    pub one_step_mean: f64,
    pub final_rollout_mean: f64,
    pub rollout_steps: usize,
    pub peak_at_source: usize,
    pub timing: Option<TimingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub system: String,
    pub dims: [usize; 3],
    pub repetitions: usize,
    pub gns_mean_s: f64,
    pub gns_std_s: f64,
    pub oracle_mean_s: f64,
    pub oracle_std_s: f64,
    pub ratio: f64,
}

impl TimingRecord {
    fn new(system: &VoxelSystem, t: &Timing) -> Self {
        Self {
            system: system.name.clone(),
            dims: system.dims,
            repetitions: t.repetitions,
            gns_mean_s: t.gns_mean_s,
            gns_std_s: t.gns_std_s,
            oracle_mean_s: t.oracle_mean_s,
            oracle_std_s: t.oracle_std_s,
            ratio: t.ratio,
        }
    }
}

fn summary_text(s: &EvaluationSummary) -> String {
    let mut out = format!("model: {}\n", s.model);
    out += &format!("systems evaluated: {} ({} failed)\n", s.systems, s.failed);
    out += &format!(
        "one-step mean relative L1: {:.6e} ({:.6} %)\n",
        s.one_step_mean,
        100.0 * s.one_step_mean
    );
    out += &format!(
        "rollout mean relative L1 at step {}: {:.6e} ({:.6} %)\n",
        s.rollout_steps,
        s.final_rollout_mean,
        100.0 * s.final_rollout_mean
    );
    out += &format!(
        "largest final error inside a heat source: {} of {} systems\n",
        s.peak_at_source, s.systems
    );
    match &s.timing {
        Some(t) => {
            out += &format!(
                "timing on {} ({}x{}x{}, {} repetitions): model {:.4e} s/step, reference {:.4e} s/step, reference/model {:.3}\n",
                t.system, t.dims[0], t.dims[1], t.dims[2], t.repetitions, t.gns_mean_s, t.oracle_mean_s, t.ratio
            );
        }
        None => out += "timing: skipped\n",
    }
    out
}

/// Writes `errors.csv`, `rollout_curves.csv`, `maps/*.vtk`, `timing.csv`
/// and `summary.txt` into `out_dir`.
pub fn cmd_evaluate(cfg: &EvaluateConfig, out_dir: &Path, workers: Option<usize>) -> Result<RunManifest> {
    cfg.validate()?;
    let systems_dir = required("systems_dir", &cfg.systems_dir)?;
    let traj_dir = required("trajectories_dir", &cfg.trajectories_dir)?;
    let mut inputs = vec![systems_dir.to_path_buf(), traj_dir.to_path_buf()];
    let (model, model_label) = match &cfg.checkpoint {
        Some(path) => {
            inputs.push(path.clone());
            let p = GnsParams::load(path)?;
            let label = format!(
                "{} (latent {}, {} parameters)",
                path.display(),
                p.spec.latent_dim,
                p.n_params()
            );
            (Model::Gns(p), label)
        }
        None => (Model::Reference, "reference solver (identity mode)".to_string()),
    };
    let mut data = load_system_trajectories(systems_dir, traj_dir)?;
    if let Some(split) = &cfg.split {
        inputs.push(split.clone());
        let keep: BTreeSet<String> = Split::load(split)?.test.into_iter().collect();
        data.retain(|(s, _)| keep.contains(&s.name));
    }
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let n_steps = data[0].1.n_steps();
    let dt = data[0].1.dt;
    for (s, tr) in &data {
        if tr.n_steps() != n_steps || tr.dt != dt {
            return Err(Error::Contract(format!(
                "trajectory of {} has {} steps of {} s, expected {} steps of {} s",
                s.name,
                tr.n_steps(),
                tr.dt,
                n_steps,
                dt
            )));
        }
    }
    if let Model::Gns(p) = &model {
        if (p.spec.dt - dt).abs() > 1e-12 * dt {
            return Err(Error::Version(format!(
                "checkpoint advances by {} s but the trajectories use {} s",
                p.spec.dt, dt
            )));
        }
    }
    if let Some(&k) = cfg.map_steps.iter().find(|&&k| k > n_steps) {
        return Err(Error::config(
            "map_steps",
            format!("step {k} is beyond the {n_steps}-step rollout"),
        ));
    }

    create_dir(out_dir)?;
    let mut manifest = RunManifest::begin("evaluate", cfg, vec![cfg.seed], inputs)?;
    let results: Vec<(String, Result<SystemEval>)> = worker_pool(workers)?.install(|| {
        data.par_iter()
            .map(|(s, tr)| (s.name.clone(), evaluate_system(&model, s, tr, &cfg.map_steps, out_dir)))
            .collect()
    });
    let mut evals = Vec::new();
    for (item, r) in results {
        match r {
            Ok(e) => evals.push(e),
            Err(e) => manifest.failures.push(ItemFailure::new(item, &e)),
        }
    }
    if evals.is_empty() {
        let e = Error::Numerical(format!("all {} evaluation systems failed", data.len()));
        manifest.finish(out_dir, Some(&e))?;
        return Err(e);
    }

    let total_pairs: usize = evals.iter().map(|e| e.pairs).sum();
    let one_step_mean = if total_pairs == 0 {
        0.0
    } else {
        evals.iter().map(|e| e.one_step_sum).sum::<f64>() / total_pairs as f64
    };
    let mean_curve: Vec<f64> = (0..=n_steps)
        .map(|k| evals.iter().map(|e| e.curve[k]).sum::<f64>() / evals.len() as f64)
        .collect();

    let mut errors = String::from("system,pairs,one_step_error,final_rollout_error,peak_error_at_source\n");
    for e in &evals {
        let one = if e.pairs == 0 {
            0.0
        } else {
            e.one_step_sum / e.pairs as f64
        };
        errors += &format!(
            "{},{},{:e},{:e},{}\n",
            e.name, e.pairs, one, e.curve[n_steps], e.peak_at_source
        );
    }
    errors += &format!("mean,{total_pairs},{one_step_mean:e},{:e},\n", mean_curve[n_steps]);
    write_atomic(&out_dir.join("errors.csv"), errors.as_bytes())?;

    let mut curves = String::from("step,mean");
    for e in &evals {
        curves += &format!(",{}", e.name);
    }
    curves.push('\n');
    for (k, m) in mean_curve.iter().enumerate() {
        curves += &format!("{k},{m:e}");
        for e in &evals {
            curves += &format!(",{:e}", e.curve[k]);
        }
        curves.push('\n');
    }
    write_atomic(&out_dir.join("rollout_curves.csv"), curves.as_bytes())?;

    let timing = match (&model, cfg.benchmark_repetitions) {
        (Model::Gns(p), reps) if reps > 0 => {
            let bench = match cfg.benchmark_dims {
                Some(d) => {
                    let mut s = gen_voxel_system_with(cfg.seed, d, data[0].0.dx, &VoxelConfig::default());
                    s.name = format!("benchmark_{}x{}x{}", d[0], d[1], d[2]);
                    s
                }
                None => data[0].0.clone(),
            };
            let t = benchmark_step(p, &bench, reps)?;
            Some(TimingRecord::new(&bench, &t))
        }
        _ => None,
    };
    let mut timing_csv =
        String::from("system,nx,ny,nz,repetitions,gns_mean_s,gns_std_s,oracle_mean_s,oracle_std_s,ratio\n");
    if let Some(t) = &timing {
        timing_csv += &format!(
            "{},{},{},{},{},{:e},{:e},{:e},{:e},{:e}\n",
            t.system,
            t.dims[0],
            t.dims[1],
            t.dims[2],
            t.repetitions,
            t.gns_mean_s,
            t.gns_std_s,
            t.oracle_mean_s,
            t.oracle_std_s,
            t.ratio
        );
    }
    write_atomic(&out_dir.join("timing.csv"), timing_csv.as_bytes())?;

    let summary = EvaluationSummary {
        model: model_label,
        systems: evals.len(),
        failed: manifest.failures.len(),
        one_step_mean,
        final_rollout_mean: mean_curve[n_steps],
        rollout_steps: n_steps,
        peak_at_source: evals.iter().filter(|e| e.peak_at_source).count(),
        timing,
    };
    write_atomic(&out_dir.join("summary.txt"), summary_text(&summary).as_bytes())?;
    write_atomic(
        &out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;

    manifest.outputs.extend(
        [
            "errors.csv",
            "rollout_curves.csv",
            "timing.csv",
            "summary.txt",
            "summary.json",
        ]
        .map(PathBuf::from),
    );
    for e in evals {
        manifest.outputs.extend(e.maps);
    }
    manifest.finish(out_dir, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Vtk,
    Csv,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vtk" => Ok(ExportFormat::Vtk),
            "csv" => Ok(ExportFormat::Csv),
            other => Err(Error::config(
                "format",
                format!("unsupported export format {other:?} (use vtk or csv)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ExportRecord<'a> {
    input: &'a Path,
    system: Option<&'a Path>,
    format: ExportFormat,
}

/// Exports a trajectory. `vtk` writes one file per frame plus a manifest
/// into the directory `out`; `csv` writes the single file `out`.
pub fn cmd_export(input: &Path, system: Option<&Path>, format: ExportFormat, out: &Path) -> Result<Vec<PathBuf>> {
    let tr = Trajectory::load(input)?;
    tr.validate()?;
    match format {
        ExportFormat::Csv => {
            write_atomic(out, tr.to_csv().as_bytes())?;
            Ok(vec![out.to_path_buf()])
        }
        ExportFormat::Vtk => {
            let sys_path = system.ok_or_else(|| Error::config("system", "VTK export needs the system file"))?;
            let sys = VoxelSystem::load(sys_path)?;
            if tr.n_cells() != sys.n_occupied() {
                return Err(Error::Structure(format!(
                    "trajectory has {} cells per frame, system {} has {} occupied cells",
                    tr.n_cells(),
                    sys.name,
                    sys.n_occupied()
                )));
            }
            create_dir(out)?;
            let record = ExportRecord { input, system, format };
            let mut inputs = vec![input.to_path_buf(), sys_path.to_path_buf()];
            inputs.dedup();
            let mut manifest = RunManifest::begin("export", &record, Vec::new(), inputs)?;
            let stem = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut written = Vec::with_capacity(tr.states.len());
            for (k, st) in tr.states.iter().enumerate() {
                let name = PathBuf::from(format!("{stem}_{k:04}.vtk"));
                let title = format!("{} t = {} s", tr.system_ref, st.t);
                write_vtk(&out.join(&name), &sys, &title, &[("temperature", &st.temps)])?;
                written.push(out.join(&name));
                manifest.outputs.push(name);
            }
            manifest.finish(out, None)?;
            Ok(written)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn small_generate(voxel: usize, block: usize) -> GenerateConfig {
        GenerateConfig {
            dims: [3, 3, 2],
            voxel,
            block,
            ..GenerateConfig::default()
        }
    }

    fn read(p: &Path) -> Vec<u8> {
        fs::read(p).unwrap()
    }

    #[test]
    fn config_errors_name_the_field() {
        let e = parse_config::<GenerateConfig>(r#"{"version": 1, "dims": [3, 3]}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "dims"), "{e}");
        let e = parse_config::<TrainRunConfig>(r#"{"version": 1, "train": {"lr_intial": 1e-3}}"#).unwrap_err();
        assert!(
            matches!(&e, Error::Config { path, .. } if path.starts_with("train")),
            "{e}"
        );
        let e = parse_config::<TrainRunConfig>(r#"{"version": 1, "train": {"batch_size": 0}}"#).unwrap_err();
        assert!(
            matches!(&e, Error::Config { path, .. } if path == "train.batch_size"),
            "{e}"
        );
        let e = parse_config::<GenerateConfig>(r#"{"seed": 3}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "version"), "{e}");
        let e = parse_config::<GenerateConfig>(r#"{"version": 7}"#).unwrap_err();
        assert!(matches!(e, Error::Version(_)));
        let e = parse_config::<EvaluateConfig>(r#"{"version": 1}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "checkpoint"), "{e}");
    }

    #[test]
    fn partial_configs_take_defaults() {
        let g: GenerateConfig = parse_config(r#"{"version": 1, "voxel": 2}"#).unwrap();
        assert_eq!(
            g,
            GenerateConfig {
                voxel: 2,
                ..GenerateConfig::default()
            }
        );
        let t: TrainRunConfig = parse_config(r#"{"version": 1, "model": {"latent_dim": 16}}"#).unwrap();
        assert_eq!(t.model.latent_dim, 16);
        assert_eq!(t.model.n_hidden, GnsSpec::default().n_hidden);
    }

    #[test]
    fn config_hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a": 1, "b": [2, 3]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b": [2, 3], "a": 1}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn generate_counts_and_determinism() {
        let (a, b) = (tmp(), tmp());
        let cfg = small_generate(3, 2);
        let m = cmd_generate(&cfg, a.path(), Some(2)).unwrap();
        cmd_generate(&cfg, b.path(), Some(1)).unwrap();
        assert_eq!(m.status, RunStatus::Ok);
        let files = list_system_files(a.path()).unwrap();
        assert_eq!(files.len(), 5);
        assert_eq!(m.outputs.len(), 5);
        for f in &files {
            assert_eq!(read(f), read(&b.path().join(f.file_name().unwrap())));
        }
        let ma = RunManifest::load(a.path()).unwrap();
        let mb = RunManifest::load(b.path()).unwrap();
        assert_eq!(ma.without_timestamps(), mb.without_timestamps());
        assert_eq!(VoxelSystem::load(&files[0]).unwrap().name, "block_0000");
    }

    #[test]
    fn generate_zero_is_valid() {
        let d = tmp();
        let m = cmd_generate(&small_generate(0, 0), d.path(), None).unwrap();
        assert!(m.outputs.is_empty());
        assert_eq!(list_system_files(d.path()).unwrap().len(), 0);
        assert!(d.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn generate_records_placement_failures() {
        let d = tmp();
        let cfg = GenerateConfig {
            electronic: 1,
            electronic_dims: Some([2, 2, 2]),
            electronic_options: ElectronicConfig {
                n_components: 40,
                max_retries: 1,
                ..ElectronicConfig::default()
            },
            ..small_generate(1, 0)
        };
        let m = cmd_generate(&cfg, d.path(), None).unwrap();
        assert_eq!(m.status, RunStatus::Partial);
        assert_eq!(m.failures.len(), 1);
        assert_eq!(m.failures[0].item, "electronic_0000");
        assert_eq!(m.failures[0].category, "placement");
        assert_eq!(m.outputs, vec![PathBuf::from("voxel_0000.json")]);
    }

    #[test]
    fn simulate_frame_counts_and_missing_dir() {
        let (s, t) = (tmp(), tmp());
        cmd_generate(&small_generate(2, 0), s.path(), None).unwrap();
        let cfg = SimulateConfig {
            n_steps: 1,
            ..SimulateConfig::default()
        };
        let m = cmd_simulate(&cfg, s.path(), t.path(), Some(2)).unwrap();
        assert_eq!(m.outputs.len(), 2);
        let tr = Trajectory::load(&trajectory_path(t.path(), "voxel_0001")).unwrap();
        assert_eq!(tr.states.len(), 2);
        let e = cmd_simulate(&cfg, &s.path().join("nope"), t.path(), None).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
    }

    #[test]
    fn simulate_continues_past_bad_items() {
        let (s, t) = (tmp(), tmp());
        cmd_generate(&small_generate(1, 0), s.path(), None).unwrap();
        fs::write(s.path().join("broken.json"), "{").unwrap();
        let cfg = SimulateConfig {
            n_steps: 2,
            ..SimulateConfig::default()
        };
        let m = cmd_simulate(&cfg, s.path(), t.path(), None).unwrap();
        assert_eq!(m.status, RunStatus::Partial);
        assert_eq!(m.failures[0].item, "broken.json");
        assert_eq!(m.outputs, vec![PathBuf::from("voxel_0000.traj")]);
    }

    fn pipeline_inputs(n: usize, steps: usize) -> (tempfile::TempDir, tempfile::TempDir) {
        let (s, t) = (tmp(), tmp());
        cmd_generate(&small_generate(n, 0), s.path(), None).unwrap();
        let cfg = SimulateConfig {
            n_steps: steps,
            ..SimulateConfig::default()
        };
        cmd_simulate(&cfg, s.path(), t.path(), None).unwrap();
        (s, t)
    }

    fn smoke_train(s: &Path, t: &Path, epochs: usize) -> TrainRunConfig {
        TrainRunConfig {
            systems_dir: Some(s.to_path_buf()),
            trajectories_dir: Some(t.to_path_buf()),
            model: GnsSpec {
                latent_dim: 8,
                flux_output_init: 1e-2,
                ..GnsSpec::default()
            },
            train: TrainConfig {
                epochs,
                lr_initial: 1e-3,
                lr_final: 1e-4,
                steps_per_system: 4,
                steps_reference: 4,
                ..TrainConfig::default()
            },
            checkpoint_every: 2,
            ..TrainRunConfig::default()
        }
    }

    #[test]
    fn train_writes_reloadable_state() {
        let (s, t) = pipeline_inputs(1, 4);
        let out = tmp();
        let mut seen = Vec::new();
        let m = cmd_train(&smoke_train(s.path(), t.path(), 2), out.path(), |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, vec![0, 1]);
        assert_eq!(m.status, RunStatus::Ok);
        let st = TrainState::load(out.path()).unwrap();
        assert_eq!(st.epoch, 2);
        let p = GnsParams::load(&out.path().join(STATE_MODEL_FILE)).unwrap();
        assert_eq!(p, st.params);
        assert!(out.path().join(periodic_checkpoint_name(2)).exists());
        for o in &m.outputs {
            assert!(out.path().join(o).exists(), "{}", o.display());
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (s, t) = pipeline_inputs(2, 4);
        let (full, part) = (tmp(), tmp());
        cmd_train(&smoke_train(s.path(), t.path(), 4), full.path(), |_| {}).unwrap();
        cmd_train(&smoke_train(s.path(), t.path(), 2), part.path(), |_| {}).unwrap();
        let resumed = TrainRunConfig {
            resume: true,
            ..smoke_train(s.path(), t.path(), 4)
        };
        let mut seen = Vec::new();
        cmd_train(&resumed, part.path(), |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, vec![2, 3]);
        assert_eq!(
            read(&full.path().join(STATE_MODEL_FILE)),
            read(&part.path().join(STATE_MODEL_FILE))
        );
        assert_eq!(
            read(&full.path().join(crate::train::STATE_HISTORY_FILE)),
            read(&part.path().join(crate::train::STATE_HISTORY_FILE))
        );
    }

    #[test]
    fn resume_refuses_other_spec() {
        let (s, t) = pipeline_inputs(1, 4);
        let out = tmp();
        cmd_train(&smoke_train(s.path(), t.path(), 1), out.path(), |_| {}).unwrap();
        let mut cfg = smoke_train(s.path(), t.path(), 2);
        cfg.resume = true;
        cfg.model.latent_dim = 12;
        assert!(matches!(cmd_train(&cfg, out.path(), |_| {}), Err(Error::Version(_))));
        assert_eq!(RunManifest::load(out.path()).unwrap().status, RunStatus::Failed);
    }

    #[test]
    fn train_abort_is_recorded() {
        let (s, t) = pipeline_inputs(1, 4);
        let out = tmp();
        let mut cfg = smoke_train(s.path(), t.path(), 3);
        cfg.model.flux_output_init = 1.0;
        cfg.model.flux_scale = 1e308;
        let e = cmd_train(&cfg, out.path(), |_| {}).unwrap_err();
        assert!(matches!(e, Error::Numerical(_)), "{e}");
        let m = RunManifest::load(out.path()).unwrap();
        assert_eq!(m.status, RunStatus::Failed);
        assert!(m.error.unwrap().starts_with("[numerical]"));
    }

    fn eval_cfg(s: &Path, t: &Path) -> EvaluateConfig {
        EvaluateConfig {
            systems_dir: Some(s.to_path_buf()),
            trajectories_dir: Some(t.to_path_buf()),
            benchmark_repetitions: 1,
            ..EvaluateConfig::default()
        }
    }

    fn csv_column(text: &str, col: usize) -> Vec<f64> {
        text.lines()
            .skip(1)
            .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
            .collect()
    }

    #[test]
    fn identity_evaluation_is_exact() {
        let (s, t) = pipeline_inputs(2, 5);
        let out = tmp();
        let cfg = EvaluateConfig {
            identity: true,
            ..eval_cfg(s.path(), t.path())
        };
        let m = cmd_evaluate(&cfg, out.path(), None).unwrap();
        assert_eq!(m.status, RunStatus::Ok);
        let errors = fs::read_to_string(out.path().join("errors.csv")).unwrap();
        assert!(csv_column(&errors, 2).iter().all(|&x| x == 0.0));
        assert!(csv_column(&errors, 3).iter().all(|&x| x == 0.0));
        let curves = fs::read_to_string(out.path().join("rollout_curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 7);
        assert!(csv_column(&curves, 1).iter().all(|&x| x == 0.0));
        assert!(out.path().join("maps/voxel_0000_step0005.vtk").exists());
    }

    #[test]
    fn evaluation_of_zero_flux_model_matches_direct_computation() {
        let (s, t) = pipeline_inputs(1, 3);
        let out = tmp();
        let sys = VoxelSystem::load(&s.path().join("voxel_0000.json")).unwrap();
        let tr = Trajectory::load(&trajectory_path(t.path(), "voxel_0000")).unwrap();
        let params = GnsParams::zero_flux(
            GnsSpec {
                latent_dim: 4,
                ..GnsSpec::default()
            },
            0,
        )
        .unwrap();
        let ckpt = out.path().join("zero.ckpt");
        params.save(&ckpt, None).unwrap();
        let cfg = EvaluateConfig {
            checkpoint: Some(ckpt),
            map_steps: vec![0, 2],
            ..eval_cfg(s.path(), t.path())
        };
        let report = out.path().join("report");
        cmd_evaluate(&cfg, &report, Some(1)).unwrap();
        let oracle_free: Vec<f64> = tr.states[..3]
            .iter()
            .zip(&tr.states[1..])
            .enumerate()
            .map(|(k, (a, b))| {
                let occupied = sys.occupied_cells();
                let pred: Vec<f64> = a
                    .temps
                    .iter()
                    .zip(&occupied)
                    .map(|(t, &c)| {
                        let m = sys.material_of(c);
                        t + 0.01 * sys.cells[c].power_at(k) / (sys.cell_volume() * m.volumetric_capacity())
                    })
                    .collect();
                relative_l1(&pred, &b.temps).unwrap()
            })
            .collect();
        let expected = oracle_free.iter().sum::<f64>() / 3.0;
        let errors = fs::read_to_string(report.join("errors.csv")).unwrap();
        let got = csv_column(&errors, 2)[0];
        assert!(
            (got - expected).abs() <= 1e-12 * expected.max(1e-30),
            "{got} vs {expected}"
        );
        assert!(report.join("maps/voxel_0000_step0000.vtk").exists());
        assert!(report.join("maps/voxel_0000_step0002.vtk").exists());
        let timing = fs::read_to_string(report.join("timing.csv")).unwrap();
        assert_eq!(timing.lines().count(), 2);
        let summary = fs::read_to_string(report.join("summary.txt")).unwrap();
        assert!(summary.contains("one-step mean relative L1"));
    }

    #[test]
    fn evaluation_refusals() {
        let (s, t) = pipeline_inputs(1, 2);
        let out = tmp();
        let empty = tmp();
        let cfg = EvaluateConfig {
            identity: true,
            ..eval_cfg(empty.path(), t.path())
        };
        assert!(matches!(cmd_evaluate(&cfg, out.path(), None), Err(Error::Contract(_))));

        let params = GnsParams::zero_flux(
            GnsSpec {
                latent_dim: 4,
                dt: 0.02,
                ..GnsSpec::default()
            },
            0,
        )
        .unwrap();
        let ckpt = out.path().join("m.ckpt");
        params.save(&ckpt, None).unwrap();
        let cfg = EvaluateConfig {
            checkpoint: Some(ckpt.clone()),
            ..eval_cfg(s.path(), t.path())
        };
        assert!(matches!(cmd_evaluate(&cfg, out.path(), None), Err(Error::Version(_))));

        let mut bytes = read(&ckpt);
        bytes[8] = 99;
        fs::write(&ckpt, bytes).unwrap();
        assert!(matches!(cmd_evaluate(&cfg, out.path(), None), Err(Error::Version(_))));

        let cfg = EvaluateConfig {
            identity: true,
            map_steps: vec![3],
            ..eval_cfg(s.path(), t.path())
        };
        assert!(matches!(
            cmd_evaluate(&cfg, out.path(), None),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn split_restricts_evaluation() {
        let (s, t) = pipeline_inputs(3, 2);
        let out = tmp();
        let split = out.path().join(SPLIT_FILE);
        let sp = Split {
            train: vec!["voxel_0000".into(), "voxel_0001".into()],
            test: vec!["voxel_0002".into()],
        };
        fs::write(&split, serde_json::to_string(&sp).unwrap()).unwrap();
        let cfg = EvaluateConfig {
            identity: true,
            split: Some(split),
            ..eval_cfg(s.path(), t.path())
        };
        cmd_evaluate(&cfg, &out.path().join("r"), None).unwrap();
        let errors = fs::read_to_string(out.path().join("r/errors.csv")).unwrap();
        let names: Vec<&str> = errors.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(names, vec!["voxel_0002", "mean"]);
    }

    #[test]
    fn export_vtk_and_csv() {
        let (s, t) = pipeline_inputs(1, 1);
        let out = tmp();
        let traj = trajectory_path(t.path(), "voxel_0000");
        let sys = s.path().join("voxel_0000.json");
        let files = cmd_export(&traj, Some(&sys), ExportFormat::Vtk, &out.path().join("vtk")).unwrap();
        assert_eq!(files.len(), 2);
        for f in &files {
            let bytes = read(f);
            let head = String::from_utf8_lossy(&bytes[..120]).into_owned();
            assert!(head.contains("DIMENSIONS 4 4 3"), "{head}");
        }
        assert!(out.path().join("vtk").join(MANIFEST_FILE).exists());
        let csv = out.path().join("t.csv");
        cmd_export(&traj, None, ExportFormat::Csv, &csv).unwrap();
        let rows = fs::read_to_string(&csv).unwrap().lines().count() - 1;
        assert_eq!(rows, 2 * 18);
        assert!(matches!(
            cmd_export(&out.path().join("none.traj"), None, ExportFormat::Csv, &csv),
            Err(Error::Io { .. })
        ));
        assert!(matches!("png".parse::<ExportFormat>(), Err(Error::Config { .. })));
        assert!(matches!(
            cmd_export(&traj, None, ExportFormat::Vtk, out.path()),
            Err(Error::Config { .. })
        ));
    }
}
