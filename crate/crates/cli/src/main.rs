//! `thermo-gns` command-line driver.
//!
//! Settings are resolved in this order, later entries winning: built-in
//! defaults, the JSON file given by `--config`, then command-line flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thermo_gns::pipeline::{
    cmd_evaluate, cmd_export, cmd_generate, cmd_simulate, cmd_train, default_out_dir, load_config, CommandConfig,
    EvaluateConfig, ExportFormat, GenerateConfig, RunManifest, RunStatus, SimulateConfig, TrainRunConfig,
    MANIFEST_FILE,
};

const PARTIAL_EXIT: u8 = 6;

#[derive(Parser)]
#[command(
    name = "thermo-gns",
    version,
    about = "Learned graph-network simulator for transient heat conduction"
)]
#[command(
    after_help = "Flags override fields of the --config file, which override built-in defaults.\n\
Without --out, output goes to $THERMO_GNS_OUT/<command> (thermo-gns-out/<command> when unset).\n\
On failure the last stderr line reads `error[<category>]: <message>`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file for the command.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Size of the worker pool; defaults to the number of cores.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate random voxel, block and electronic-like systems.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of voxel systems.
        #[arg(long, value_name = "N")]
        voxel: Option<usize>,
        /// Number of block systems.
        #[arg(long, value_name = "N")]
        block: Option<usize>,
        /// Number of electronic-like systems.
        #[arg(long, value_name = "N")]
        electronic: Option<usize>,
        /// Grid of voxel and block systems, e.g. 10,10,10.
        #[arg(long, value_name = "NX,NY,NZ", value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
        /// Grid of electronic-like systems; four times --dims by default.
        #[arg(long, value_name = "NX,NY,NZ", value_parser = parse_dims)]
        electronic_dims: Option<[usize; 3]>,
        /// Cell edge length in m.
        #[arg(long, value_name = "M")]
        dx: Option<f64>,
    },
    /// Run the reference solver on every system in a directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Directory of system JSON files.
        #[arg(long, value_name = "DIR")]
        systems: PathBuf,
        /// Number of reporting steps.
        #[arg(long, value_name = "N")]
        n_steps: Option<usize>,
        /// Reporting step in s.
        #[arg(long, value_name = "S")]
        dt: Option<f64>,
        /// Uniform initial temperature in K; each system's boundary
        /// temperature by default.
        #[arg(long, value_name = "K")]
        t0: Option<f64>,
    },
    /// Train a model on simulated trajectories.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of system JSON files.
        #[arg(long, value_name = "DIR")]
        systems: Option<PathBuf>,
        /// Directory of trajectory files.
        #[arg(long, value_name = "DIR")]
        trajectories: Option<PathBuf>,
        /// Total number of epochs.
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        /// Width of latent vectors and hidden layers.
        #[arg(long, value_name = "N")]
        latent: Option<usize>,
        /// Training pairs per optimizer step.
        #[arg(long, value_name = "N")]
        batch_size: Option<usize>,
        /// Learning rate of the first plateau.
        #[arg(long, value_name = "LR")]
        lr_initial: Option<f64>,
        /// Learning rate after the last drop.
        #[arg(long, value_name = "LR")]
        lr_final: Option<f64>,
        /// Epoch interval of periodic checkpoints; 0 disables them.
        #[arg(long, value_name = "N")]
        checkpoint_every: Option<usize>,
        /// Continue from the state stored in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Measure a model against reference trajectories.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint.
        #[arg(long, value_name = "PATH", conflicts_with = "identity")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the reference solver against itself.
        #[arg(long)]
        identity: bool,
        /// Directory of system JSON files.
        #[arg(long, value_name = "DIR")]
        systems: Option<PathBuf>,
        /// Directory of trajectory files.
        #[arg(long, value_name = "DIR")]
        trajectories: Option<PathBuf>,
        /// split.json of a training run; only its test systems are evaluated.
        #[arg(long, value_name = "PATH")]
        split: Option<PathBuf>,
        /// Step exported as a VTK error map; repeatable. Final step by default.
        #[arg(long = "map-step", value_name = "K")]
        map_steps: Vec<usize>,
        /// Timing repetitions; 0 skips the benchmark.
        #[arg(long, value_name = "N")]
        bench_reps: Option<usize>,
        /// Benchmark on a generated voxel system of this size.
        #[arg(long, value_name = "NX,NY,NZ", value_parser = parse_dims)]
        bench_dims: Option<[usize; 3]>,
    },
    /// Convert a trajectory to VTK frames or CSV.
    Export {
        /// Trajectory file.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// System file the trajectory belongs to; required for VTK.
        #[arg(long, value_name = "PATH")]
        system: Option<PathBuf>,
        /// vtk (one file per frame) or csv.
        #[arg(long, value_name = "FORMAT", default_value = "vtk")]
        format: String,
        /// Output directory for vtk, output file for csv.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split([',', 'x']).map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three extents like 10,10,10, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("invalid extent {p:?}"))?;
    }
    Ok(out)
}

fn base_config<T: CommandConfig>(path: &Option<PathBuf>) -> thermo_gns::Result<T> {
    match path {
        Some(p) => load_config(p),
        None => Ok(T::default()),
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn out_dir(common_out: Option<PathBuf>, command: &str) -> PathBuf {
    common_out.unwrap_or_else(|| default_out_dir(command))
}

fn report(manifest: &RunManifest, dir: &Path, what: &str) -> ExitCode {
    println!("{} {what} written to {}", manifest.outputs.len(), dir.display());
    if manifest.status == RunStatus::Partial {
        for f in &manifest.failures {
            eprintln!("failed: {} [{}] {}", f.item, f.category, f.message);
        }
        eprintln!(
            "error[partial]: {} item(s) failed; see {}",
            manifest.failures.len(),
            dir.join(MANIFEST_FILE).display()
        );
        return ExitCode::from(PARTIAL_EXIT);
    }
    ExitCode::SUCCESS
}

fn run(cli: Cli) -> thermo_gns::Result<ExitCode> {
    match cli.command {
        Command::Generate {
            common,
            voxel,
            block,
            electronic,
            dims,
            electronic_dims,
            dx,
        } => {
            let mut cfg: GenerateConfig = base_config(&common.config)?;
            set(&mut cfg.seed, common.seed);
            set(&mut cfg.voxel, voxel);
            set(&mut cfg.block, block);
            set(&mut cfg.electronic, electronic);
            set(&mut cfg.dims, dims);
            set(&mut cfg.dx, dx);
            if electronic_dims.is_some() {
                cfg.electronic_dims = electronic_dims;
            }
            let dir = out_dir(common.out, "generate");
            let m = cmd_generate(&cfg, &dir, common.workers)?;
            Ok(report(&m, &dir, "systems"))
        }
        Command::Simulate {
            common,
            systems,
            n_steps,
            dt,
            t0,
        } => {
            let mut cfg: SimulateConfig = base_config(&common.config)?;
            set(&mut cfg.n_steps, n_steps);
            set(&mut cfg.dt, dt);
            if t0.is_some() {
                cfg.t0 = t0;
            }
            let dir = out_dir(common.out, "simulate");
            let m = cmd_simulate(&cfg, &systems, &dir, common.workers)?;
            Ok(report(&m, &dir, "trajectories"))
        }
        Command::Train {
            common,
            systems,
            trajectories,
            epochs,
            latent,
            batch_size,
            lr_initial,
            lr_final,
            checkpoint_every,
            resume,
        } => {
            let mut cfg: TrainRunConfig = base_config(&common.config)?;
            set(&mut cfg.train.seed, common.seed);
            if systems.is_some() {
                cfg.systems_dir = systems;
            }
            if trajectories.is_some() {
                cfg.trajectories_dir = trajectories;
            }
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.model.latent_dim, latent);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.lr_initial, lr_initial);
            set(&mut cfg.train.lr_final, lr_final);
            set(&mut cfg.checkpoint_every, checkpoint_every);
            cfg.resume |= resume;
            let dir = out_dir(common.out, "train");
            let m = cmd_train(&cfg, &dir, |r| {
                eprintln!(
                    "epoch {:>4}  lr {:.3e}  train loss {:.6e}  test one-step {:.6e}",
                    r.epoch, r.lr, r.train_loss, r.test_one_step_error
                )
            })?;
            Ok(report(&m, &dir, "files"))
        }
        Command::Evaluate {
            common,
            checkpoint,
            identity,
            systems,
            trajectories,
            split,
            map_steps,
            bench_reps,
            bench_dims,
        } => {
            let mut cfg: EvaluateConfig = base_config(&common.config)?;
            set(&mut cfg.seed, common.seed);
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
                cfg.identity = false;
            }
            if identity {
                cfg.identity = true;
                cfg.checkpoint = None;
            }
            if systems.is_some() {
                cfg.systems_dir = systems;
            }
            if trajectories.is_some() {
                cfg.trajectories_dir = trajectories;
            }
            if split.is_some() {
                cfg.split = split;
            }
            if !map_steps.is_empty() {
                cfg.map_steps = map_steps;
            }
            set(&mut cfg.benchmark_repetitions, bench_reps);
            if bench_dims.is_some() {
                cfg.benchmark_dims = bench_dims;
            }
            let dir = out_dir(common.out, "evaluate");
            let m = cmd_evaluate(&cfg, &dir, common.workers)?;
            if let Ok(text) = std::fs::read_to_string(dir.join("summary.txt")) {
                print!("{text}");
            }
            Ok(report(&m, &dir, "files"))
        }
        Command::Export {
            input,
            system,
            format,
            out,
        } => {
            let format: ExportFormat = format.parse()?;
            let out = out.unwrap_or_else(|| {
                let dir = default_out_dir("export");
                match format {
                    ExportFormat::Vtk => dir,
                    ExportFormat::Csv => {
                        let stem = input
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default();
                        dir.join(format!("{stem}.csv"))
                    }
                }
            });
            let files = cmd_export(&input, system.as_deref(), format, &out)?;
            println!("{} file(s) written to {}", files.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
