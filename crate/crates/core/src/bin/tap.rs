use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use tap_core::dataset::{build_dataset, load_cloud, DatasetConfig, ShapeKind, DEFAULT_POINTS};
use tap_core::geometry::sample_poses;
use tap_core::model::end_to_end_gradcheck;
use tap_core::ndcompute::GradCheckConfig;
use tap_core::renderer::{default_splat_radius, render, save_image};
use tap_core::trainer::{evaluate, export_embeddings, finetune, linear_probe, pretrain, Preset, RunConfig};
use tap_core::{Error, Result};

const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "tap", version, about = "Point-cloud encoder pre-training by view-image generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// `key = value` configuration file; unset keys take preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no configuration file is given.
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::preset(self.preset),
        };
        let pairs = self
            .overrides
            .iter()
            .map(|s| {
                s.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))
            })
            .collect::<Result<Vec<_>>>()?;
        base.with_overrides(&pairs)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape dataset with rendered views.
    GenData {
        /// Instances per category.
        #[arg(long, default_value_t = 10)]
        shapes: usize,
        #[arg(long, default_value_t = 12)]
        views: usize,
        #[arg(long, default_value_t = DEFAULT_POINTS)]
        points: usize,
        /// Image height and width.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one cloud from one of the fixed viewpoints.
    Render {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long, default_value_t = 0)]
        pose_index: usize,
        #[arg(long, default_value_t = 12)]
        views: usize,
        #[arg(long, default_value_t = 30.0)]
        elevation: f64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train encoder, photograph module and generator.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Deterministic reconstruction loss of a pre-trained checkpoint.
    Eval {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train encoder and classification head; without --init, from scratch.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Linear probe on frozen encoder features; without --init, a random encoder.
    Probe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write pooled encoder features of every cloud as CSV.
    ExportEmb {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// End-to-end finite-difference gradient check at 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Quick invariant battery: geometry, attention, loss, optimizer, checkpoint, gradients.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            shapes,
            views,
            points,
            size,
            seed,
            out,
        } => {
            let cfg = DatasetConfig {
                shapes: ShapeKind::ALL.iter().map(|&k| (k, shapes)).collect(),
                n_points: points,
                views,
                height: size,
                width: size,
                seed,
                ..DatasetConfig::default()
            };
            let m = build_dataset(&cfg, &out)?;
            println!("wrote {} clouds × {} views to {}", m.entries.len(), m.views, out.display());
        }
        Command::Render {
            cloud,
            pose_index,
            views,
            elevation,
            size,
            out,
        } => {
            let c = load_cloud(&cloud)?;
            let poses = sample_poses(views, elevation)?;
            let pose = poses
                .get(pose_index)
                .ok_or_else(|| Error::Config(format!("pose index {pose_index} out of range for {views} views")))?;
            let img = render(&c.points, pose, size, size, default_splat_radius(size, size))?;
            save_image(&img, &out)?;
            println!("{} foreground pixels", img.foreground_count());
        }
        Command::Pretrain {
            data,
            out,
            resume,
            config,
        } => {
            let cfg = config.resolve()?;
            let t = Instant::now();
            let o = pretrain(&cfg, &data, &out, resume.as_deref())?;
            println!(
                "{} steps, {} epochs, final loss {:.6} ({:.1}s)",
                o.steps,
                o.epochs,
                o.final_loss,
                t.elapsed().as_secs_f64()
            );
        }
        Command::Eval { init, data } => {
            let e = evaluate(&init, &data)?;
            println!("pairs {} loss_fg {:.6} loss_bg {:.6} loss_total {:.6}", e.pairs, e.fg, e.bg, e.total);
        }
        Command::Finetune {
            data,
            init,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            print!("{}", finetune(&cfg, init.as_deref(), &data, out.as_deref())?.to_text());
        }
        Command::Probe { data, init, config } => {
            let cfg = config.resolve()?;
            print!("{}", linear_probe(&cfg, init.as_deref(), &data)?.to_text());
        }
        Command::ExportEmb { init, data, out } => {
            let n = export_embeddings(&init, &data, &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
        Command::Gradcheck { seed, config } => {
            let cfg = config.resolve()?;
            let t = Instant::now();
            let gc = GradCheckConfig {
                skip_kinks: true,
                ..GradCheckConfig::default()
            };
            let r = end_to_end_gradcheck(&cfg.model, seed, &gc)?;
            for (name, err) in &r.per_param {
                println!("{name:<40} {err:.3e}");
            }
            println!(
                "checked {} elements ({} skipped at kinks), max rel err {:.3e} in {} ({:.1}s)",
                r.checked,
                r.skipped,
                r.max_rel_err,
                r.worst_param().unwrap_or("-"),
                t.elapsed().as_secs_f64()
            );
            if !r.passes(GRADCHECK_TOL) {
                return Err(Error::Numeric(format!("gradient check exceeds {GRADCHECK_TOL:e}")));
            }
        }
        Command::Selftest { seed } => {
            let checks = tap_core::selftest::run(seed);
            for c in &checks {
                println!("[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} self-test check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
