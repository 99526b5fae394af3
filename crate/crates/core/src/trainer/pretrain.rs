use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{peek_dtype, Checkpoint, RngState};
use super::config::{Precision, RunConfig, SplitSelect};
use super::optim::{adamw_step, cosine_lr, AdamHyper, AdamState};
use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::geometry::{random_pose, Pose, Vec3};
use crate::model::{init_params, sample_loss};
use crate::ndcompute::{lit, ParamSet, Real, Tape};
use crate::photograph::DropPath;
use crate::renderer::{default_splat_radius, load_image, render, ViewImage};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,step,loss_fg,loss_bg,loss_total,lr";
pub const FINAL_CHECKPOINT: &str = "final.tapk";
pub const LAST_CHECKPOINT: &str = "last.tapk";
pub const PRETRAIN_KIND: &str = "pretrain";
/// Stream of the training RNG (shuffling, drop path, continuous poses);
/// parameter initialization uses other streams of the same seed.
const TRAIN_STREAM: u64 = 11;

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.tapk")
}

/// One metrics row. Loss columns are batch means of the weighted region
/// terms, so `loss_fg + loss_bg = loss_total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub step: u64,
    pub loss_fg: f64,
    pub loss_bg: f64,
    pub loss_total: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.loss_fg, self.loss_bg, self.loss_total, self.lr
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::data(format!("malformed metrics row `{line}`"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            loss_fg: num(f[2])?,
            loss_bg: num(f[3])?,
            loss_total: num(f[4])?,
            lr: num(f[5])?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::data(format!("{} lacks the metrics header", path.display())));
    }
    lines.map(MetricsRow::parse).collect()
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub out_dir: PathBuf,
    pub steps: u64,
    pub epochs: u64,
    pub final_loss: f64,
}

struct Sample {
    points: Vec<Vec3>,
    views: Vec<ViewImage>,
}

fn load_samples(manifest: &DatasetManifest, split: SplitSelect, dims: (usize, usize)) -> Result<Vec<Sample>> {
    if (manifest.height, manifest.width) != dims {
        return Err(Error::config(format!(
            "dataset images are {}x{} but the model generates {}x{}",
            manifest.height, manifest.width, dims.0, dims.1
        )));
    }
    let mut out = Vec::new();
    for e in &manifest.entries {
        if split == SplitSelect::Train && e.split != Split::Train {
            continue;
        }
        let points = manifest.load_cloud(e)?.points;
        let views = (0..manifest.views)
            .map(|v| load_image(&manifest.image_path(e, v)))
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample { points, views });
    }
    if out.is_empty() {
        return Err(Error::data("no clouds selected for pre-training"));
    }
    Ok(out)
}

/// Pre-trains on the dataset at `data_dir`, writing metrics and checkpoints
/// into `out_dir`. With `resume`, training continues from that checkpoint,
/// which must come from the same configuration.
pub fn pretrain(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<PretrainOutcome> {
    match cfg.pretrain.precision {
        Precision::F32 => run::<f32>(cfg, data_dir, out_dir, resume),
        Precision::F64 => run::<f64>(cfg, data_dir, out_dir, resume),
    }
}

/// Region-weighted losses averaged over every (cloud, view) pair of the
/// selected split, with drop path disabled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalLoss {
    pub fg: f64,
    pub bg: f64,
    pub total: f64,
    pub pairs: usize,
}

/// Deterministic reconstruction loss of the model stored at `checkpoint`.
pub fn evaluate(checkpoint: &Path, data_dir: &Path) -> Result<EvalLoss> {
    match peek_dtype(checkpoint)? {
        4 => evaluate_params(&Checkpoint::<f32>::load(checkpoint)?, data_dir),
        _ => evaluate_params(&Checkpoint::<f64>::load(checkpoint)?, data_dir),
    }
}

fn evaluate_params<T: Real>(ck: &Checkpoint<T>, data_dir: &Path) -> Result<EvalLoss> {
    let cfg = RunConfig::parse(&ck.config_text)?;
    let model = &cfg.model;
    let manifest = DatasetManifest::load(data_dir)?;
    let samples = load_samples(&manifest, cfg.pretrain.split, model.image_dims()?)?;
    let poses = manifest.poses()?;
    let mut acc = EvalLoss {
        fg: 0.0,
        bg: 0.0,
        total: 0.0,
        pairs: 0,
    };
    for s in &samples {
        for (pose, gt) in poses.iter().zip(&s.views) {
            let mut tape = Tape::new();
            let loss = sample_loss(&mut tape, &ck.params, model, &s.points, pose, gt, &mut DropPath::eval())?;
            let value = |v| tape.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
            acc.fg += value(loss.fg);
            acc.bg += value(loss.bg);
            acc.total += value(loss.total);
            acc.pairs += 1;
        }
    }
    let n = acc.pairs as f64;
    Ok(EvalLoss {
        fg: acc.fg / n,
        bg: acc.bg / n,
        total: acc.total / n,
        pairs: acc.pairs,
    })
}

fn worst_gradient<T: Real>(params: &ParamSet<T>) -> String {
    let mut worst = (f64::NEG_INFINITY, String::from("<none>"));
    for (name, t) in params.iter() {
        let m = t.grad().unwrap_or(&[]).iter().fold(0.0f64, |acc, g| {
            let g = g.to_f64().unwrap_or(f64::NAN).abs();
            if g.is_nan() {
                f64::INFINITY
            } else {
                acc.max(g)
            }
        });
        if m > worst.0 {
            worst = (m, name.clone());
        }
    }
    format!("{} (max |grad| {})", worst.1, worst.0)
}

fn run<T: Real>(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.pretrain;
    let model = &cfg.model;
    let manifest = DatasetManifest::load(data_dir)?;
    let dims = model.image_dims()?;
    let samples = load_samples(&manifest, tc.split, dims)?;
    let poses = manifest.poses()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let pairs: Vec<(usize, usize)> = (0..samples.len())
        .flat_map(|c| (0..manifest.views).map(move |v| (c, v)))
        .collect();
    let steps_per_epoch = pairs.len().div_ceil(tc.batch) as u64;
    let total = tc.max_steps.map_or(tc.epochs as u64 * steps_per_epoch, |s| s as u64);
    let epochs = total.div_ceil(steps_per_epoch);
    let warmup = tc.warmup_epochs as u64 * steps_per_epoch;
    let config_text = cfg.to_text();

    let (mut params, mut adam, mut rng, mut step, start_epoch) = match resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            if ck.kind != PRETRAIN_KIND {
                return Err(Error::config(format!("{} is a `{}` checkpoint", path.display(), ck.kind)));
            }
            if ck.config_text != config_text {
                return Err(Error::config(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            (ck.params, ck.adam, ck.rng.restore(), ck.step, ck.epoch)
        }
        None => {
            let params = init_params::<T>(model, tc.seed)?;
            let adam = AdamState::new(&params);
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
            rng.set_stream(TRAIN_STREAM);
            (params, adam, rng, 0, 0)
        }
    };

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics_text = format!("{METRICS_HEADER}\n");
    if resume.is_some() && metrics_path.exists() {
        for row in read_metrics(&metrics_path)? {
            if row.step <= step {
                metrics_text.push_str(&row.to_csv());
                metrics_text.push('\n');
            }
        }
    }
    fs::write(&metrics_path, &metrics_text).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let hp = AdamHyper::default();
    let radius = default_splat_radius(dims.0, dims.1);
    let mut final_loss = f64::NAN;
    let mut epoch = start_epoch;
    while epoch < epochs && step < total {
        epoch += 1;
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch) {
            if step >= total {
                break;
            }
            step += 1;
            let lr = cosine_lr(step as usize, total as usize, tc.lr0, tc.lr_min(), warmup as usize);
            params.zero_grads();
            let inv_b: T = lit(1.0 / chunk.len() as f64);
            let (mut fg, mut bg, mut tot) = (0.0, 0.0, 0.0);
            for &(ci, vi) in chunk {
                let sample = &samples[ci];
                let (pose, rendered): (Pose, Option<ViewImage>) = if tc.continuous_poses {
                    let pose = random_pose(&mut rng);
                    let img = render(&sample.points, &pose, dims.0, dims.1, radius)?;
                    (pose, Some(img))
                } else {
                    (poses[vi], None)
                };
                let gt = rendered.as_ref().unwrap_or(&sample.views[vi]);
                let mut tape = Tape::new();
                let mut drop = DropPath::train(model.photo.drop_path, &mut rng);
                let loss = sample_loss(&mut tape, &params, model, &sample.points, &pose, gt, &mut drop)?;
                let value = |v| tape.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
                let total_v = value(loss.total);
                if !total_v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {step} (lr {lr}); largest gradient so far in {}",
                        worst_gradient(&params)
                    )));
                }
                fg += value(loss.fg);
                bg += value(loss.bg);
                tot += total_v;
                let scaled = tape.scale(loss.total, inv_b);
                tape.backward_into(scaled, &mut params)?;
            }
            let any_bad = params
                .iter()
                .any(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())));
            if any_bad {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at step {step} (lr {lr}) in {}",
                    worst_gradient(&params)
                )));
            }
            adamw_step(&mut params, &mut adam, lr, tc.weight_decay, &hp)?;
            let n = chunk.len() as f64;
            let row = MetricsRow {
                epoch,
                step,
                loss_fg: fg / n,
                loss_bg: bg / n,
                loss_total: tot / n,
                lr,
            };
            final_loss = row.loss_total;
            writeln!(metrics, "{}", row.to_csv()).map_err(|e| Error::io(&metrics_path, e))?;
        }
        let ck = Checkpoint {
            kind: PRETRAIN_KIND.to_string(),
            config_text: config_text.clone(),
            epoch,
            step,
            rng: RngState::capture(&rng),
            params: params.clone(),
            adam: adam.clone(),
        };
        let name = if tc.keep_epoch_checkpoints {
            epoch_checkpoint_name(epoch)
        } else {
            LAST_CHECKPOINT.to_string()
        };
        ck.save(&out_dir.join(name))?;
        if step >= total {
            ck.save(&out_dir.join(FINAL_CHECKPOINT))?;
        }
    }
    Ok(PretrainOutcome {
        out_dir: out_dir.to_path_buf(),
        steps: step,
        epochs: epoch,
        final_loss,
    })
}
