use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use ccl_core::eval::{compare, linear_probe, similarity_map, ProbeConfig};
use ccl_core::pretrain::train::curve_csv;
use ccl_core::pretrain::{generate_world, train, Checkpoint, Method, SyntheticWorldConfig, TrainConfig, World};
use ccl_core::scene::load_scene_index;
use ccl_core::vse::{global_sync_stats, keyframe_sync_stats, run_vse_with_stats};
use ccl_core::{DirMaskStore, Error};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

/// Conflict-aware LiDAR-camera contrastive pretraining lab.
#[derive(Parser, Debug)]
#[command(name = "ccl", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-sensor world.
    GenData {
        /// World config JSON; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select one distinct sweep per keyframe interval of a scene.
    VseSelect {
        /// Scene index JSON.
        #[arg(long)]
        scene: PathBuf,
        /// Directory of `<frame_id>.cmpm` masks.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pool keyframe statistics over these scene indexes instead of the
        /// scene's own keyframes.
        #[arg(long, num_args = 1..)]
        global_stats: Vec<PathBuf>,
    },
    /// Train a checkpoint on a generated world.
    Pretrain {
        #[arg(long)]
        world: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, value_enum, default_value = "off")]
        vse: Toggle,
        /// Training config JSON.
        #[arg(long, conflicts_with = "reference")]
        config: Option<PathBuf>,
        /// Use the reference schedule (lr 0.2, 200 epochs).
        #[arg(long)]
        reference: bool,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Linear-probe a checkpoint against ground-truth point labels.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        world: PathBuf,
        /// Probe config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine-similarity map from one query point to a frame's points and pixels.
    Simmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        frame: String,
        /// Index of the query point in the frame's point cloud.
        #[arg(long)]
        query: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the pixel maps as a PPM heatmap.
        #[arg(long)]
        ppm: Option<PathBuf>,
    },
    /// Compare two checkpoints on probe accuracy and consistency.
    Report {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Nce,
    Conflict,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

fn read_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn open_world(path: &Path) -> Result<World> {
    World::open(path).with_context(|| format!("opening world {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg: SyntheticWorldConfig = read_or_default(config.as_deref())?;
            let manifest = generate_world(&cfg, &out)?;
            eprintln!("wrote {} scene(s) to {}", manifest.scenes.len(), out.display());
        }
        Command::VseSelect {
            scene,
            masks,
            out,
            global_stats,
        } => {
            let index = load_scene_index(&scene)?;
            let stats = if global_stats.is_empty() {
                keyframe_sync_stats(&index)?
            } else {
                let others = global_stats
                    .iter()
                    .map(load_scene_index)
                    .collect::<Result<Vec<_>, _>>()?;
                global_sync_stats(&others)?
            };
            let report = run_vse_with_stats(&index, &DirMaskStore::new(masks), stats)?;
            write(&out, report.to_json() + "\n")?;
            eprintln!(
                "selected {} sweep(s) for {}",
                report.selections().count(),
                report.scene_id
            );
        }
        Command::Pretrain {
            world,
            method,
            vse,
            config,
            reference,
            out,
            curve,
        } => {
            let world = open_world(&world)?;
            let cfg = if reference {
                TrainConfig::reference()
            } else {
                read_or_default(config.as_deref())?
            };
            let method = match method {
                MethodArg::Nce => Method::Nce,
                MethodArg::Conflict => Method::ConflictAware,
            };
            let outcome = train(&world, &cfg, method, matches!(vse, Toggle::On))?;
            outcome.checkpoint.save(&out)?;
            let curve_path = curve.unwrap_or_else(|| out.with_extension("csv"));
            write(&curve_path, curve_csv(&outcome.curve))?;
            let last = outcome.curve.last().map_or(f64::NAN, |p| p.loss);
            eprintln!(
                "trained {method} on {} frame(s); final loss {last:.4}; checkpoint {}",
                outcome.frames.len(),
                outcome.checkpoint.config_hash()
            );
        }
        Command::Probe {
            ckpt,
            world,
            config,
            out,
        } => {
            let world = open_world(&world)?;
            let ck = load_checkpoint(&ckpt)?;
            let cfg: ProbeConfig = read_or_default(config.as_deref())?;
            let result = linear_probe(&ck, &world, &cfg)?;
            write(&out, to_json(&result))?;
            eprintln!(
                "overall accuracy {:.4}, mean class accuracy {:.4}",
                result.overall, result.mean_class
            );
        }
        Command::Simmap {
            ckpt,
            world,
            frame,
            query,
            out,
            ppm,
        } => {
            let world = open_world(&world)?;
            let ck = load_checkpoint(&ckpt)?;
            let map = similarity_map(&ck, &world, &frame, query)?;
            write(&out, map.to_csv())?;
            if let Some(ppm) = ppm {
                write(&ppm, map.to_ppm())?;
            }
        }
        Command::Report {
            ckpt_a,
            ckpt_b,
            world,
            config,
            out,
        } => {
            let world = open_world(&world)?;
            let a = load_checkpoint(&ckpt_a)?;
            let b = load_checkpoint(&ckpt_b)?;
            let cfg: ProbeConfig = read_or_default(config.as_deref())?;
            let report = compare(&a, &b, &world, &cfg)?;
            write(&out, to_json(&report))?;
            eprintln!(
                "accuracy delta {:+.4}, consistency gap delta {:+.4}",
                report.accuracy_delta, report.gap_delta
            );
        }
    }
    Ok(())
}

/// Validation failures anywhere in the chain exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    let invalid = err
        .chain()
        .any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_validation));
    if invalid {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
