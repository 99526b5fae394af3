use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{peek_dtype, Checkpoint, RngState};
use super::config::{Precision, RunConfig};
use super::optim::{adamw_step, cosine_lr, AdamHyper, AdamState};
use crate::backbone::{self, EncoderConfig};
use crate::dataset::{DatasetManifest, ManifestEntry, ShapeKind, Split};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::ndcompute::{init_mlp, mlp_forward, ParamSet, Real, Tape, Tensor, Var};

pub const FINETUNE_KIND: &str = "finetune";
pub const FINETUNE_CHECKPOINT: &str = "finetune.tapk";
pub const REPORT_FILE: &str = "report.txt";
pub const HEAD_PREFIX: &str = "head";
const PROBE_PREFIX: &str = "probe";
const HEAD_STREAM: u64 = 21;
const DATA_STREAM: u64 = 22;
const ENCODER_STREAM: u64 = 1;

pub fn num_classes() -> usize {
    ShapeKind::ALL.len()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub final_loss: f64,
}

impl ClassifierReport {
    pub fn to_text(&self) -> String {
        format!(
            "train_accuracy = {}\ntest_accuracy = {}\ntrain_count = {}\ntest_count = {}\nfinal_loss = {}\n",
            self.train_accuracy, self.test_accuracy, self.train_count, self.test_count, self.final_loss
        )
    }
}

struct Labeled {
    points: Vec<Vec3>,
    label: usize,
}

/// Training entries (optionally the first `per_class` of each category by
/// id) and test entries. Test categories must all appear in training.
fn labeled_split<'a>(
    manifest: &'a DatasetManifest,
    per_class: Option<usize>,
) -> Result<(Vec<&'a ManifestEntry>, Vec<&'a ManifestEntry>)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut train = Vec::new();
    for e in manifest.split(Split::Train) {
        let c = counts.entry(e.label()).or_default();
        if per_class.map_or(true, |n| *c < n) {
            *c += 1;
            train.push(e);
        }
    }
    if train.is_empty() {
        return Err(Error::data("no labeled training clouds"));
    }
    let test: Vec<_> = manifest.split(Split::Test).collect();
    let seen: BTreeSet<usize> = train.iter().map(|e| e.label()).collect();
    if let Some(e) = test.iter().find(|e| !seen.contains(&e.label())) {
        return Err(Error::data(format!(
            "test cloud `{}` has category `{}` absent from the training split",
            e.id, e.category
        )));
    }
    Ok((train, test))
}

fn load_labeled(manifest: &DatasetManifest, entries: &[&ManifestEntry]) -> Result<Vec<Labeled>> {
    entries
        .iter()
        .map(|e| {
            let c = manifest.load_cloud(e)?;
            Ok(Labeled {
                points: c.points,
                label: e.label(),
            })
        })
        .collect()
}

/// Encoder configuration and parameters stored in a checkpoint, converted
/// to `T`.
pub fn load_encoder<T: Real>(path: &Path) -> Result<(EncoderConfig, ParamSet<T>)> {
    let (text, params) = match peek_dtype(path)? {
        4 => {
            let ck = Checkpoint::<f32>::load(path)?;
            (ck.config_text, ck.params.subset("encoder.").cast::<T>())
        }
        8 => {
            let ck = Checkpoint::<f64>::load(path)?;
            (ck.config_text, ck.params.subset("encoder.").cast::<T>())
        }
        d => return Err(Error::format(6, format!("unknown value width {d}"))),
    };
    let cfg = RunConfig::parse(&text)?;
    if params.is_empty() {
        return Err(Error::data(format!("{} holds no encoder parameters", path.display())));
    }
    Ok((cfg.model.encoder, params))
}

fn scratch_encoder<T: Real>(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ENCODER_STREAM);
    let mut params = ParamSet::new();
    backbone::init_params(&mut params, cfg, &mut rng)?;
    Ok(params)
}

fn head_dims(c3d: usize, hidden: usize) -> Vec<usize> {
    vec![2 * c3d, hidden, num_classes()]
}

/// Encoder (from `init`, or freshly initialized from the fine-tune seed)
/// plus a new classification head. The head and data order depend only on
/// the seed, so a scratch run and a pre-trained run differ only in encoder
/// values.
pub fn initial_params<T: Real>(cfg: &RunConfig, init: Option<&Path>) -> Result<(EncoderConfig, ParamSet<T>)> {
    let seed = cfg.finetune.train.seed;
    let (enc_cfg, mut params) = match init {
        Some(path) => load_encoder::<T>(path)?,
        None => {
            let enc = cfg.model.encoder.clone();
            let p = scratch_encoder(&enc, seed)?;
            (enc, p)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(HEAD_STREAM);
    init_mlp(
        &mut params,
        &format!("{HEAD_PREFIX}.mlp"),
        &head_dims(enc_cfg.channels, cfg.finetune.head_hidden),
        &mut rng,
    )?;
    Ok((enc_cfg, params))
}

/// Largest absolute difference per parameter; names missing on one side
/// report infinity.
pub fn param_diff<T: Real>(a: &ParamSet<T>, b: &ParamSet<T>) -> Vec<(String, f64)> {
    let names: BTreeSet<&String> = a.names().chain(b.names()).collect();
    names
        .into_iter()
        .map(|n| {
            let d = match (a.get(n), b.get(n)) {
                (Ok(x), Ok(y)) if x.shape() == y.shape() => x.max_abs_diff(y).to_f64().unwrap_or(f64::NAN),
                _ => f64::INFINITY,
            };
            (n.clone(), d)
        })
        .collect()
}

/// `[1 × 2·C3d]`: max-pool ⊕ mean-pool of the encoder features.
pub fn pooled_features<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
    points: &[Vec3],
) -> Result<Var> {
    let enc = backbone::encode(tape, params, cfg, points)?;
    let all = vec![(0..enc.centers.len()).collect::<Vec<_>>()];
    let max = tape.group_max(enc.features, &all)?;
    let mean = tape.group_mean(enc.features, &all)?;
    tape.concat_cols(max, mean)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy<T: Real>(
    params: &ParamSet<T>,
    enc_cfg: &EncoderConfig,
    hidden: usize,
    data: &[Labeled],
) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0;
    for s in data {
        let mut tape = Tape::new();
        let f = pooled_features(&mut tape, params, enc_cfg, &s.points)?;
        let logits = mlp_forward(&mut tape, params, &format!("{HEAD_PREFIX}.mlp"), &head_dims(enc_cfg.channels, hidden), f)?;
        if argmax(tape.value(logits).data()) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains encoder and head with cross-entropy on the labeled training
/// split and reports train/test accuracy. Without `init` the encoder starts
/// from random weights. With `out_dir`, the report and a checkpoint are
/// written there.
pub fn finetune(cfg: &RunConfig, init: Option<&Path>, data_dir: &Path, out_dir: Option<&Path>) -> Result<ClassifierReport> {
    match cfg.finetune.train.precision {
        Precision::F32 => finetune_as::<f32>(cfg, init, data_dir, out_dir),
        Precision::F64 => finetune_as::<f64>(cfg, init, data_dir, out_dir),
    }
}

fn finetune_as<T: Real>(cfg: &RunConfig, init: Option<&Path>, data_dir: &Path, out_dir: Option<&Path>) -> Result<ClassifierReport> {
    cfg.validate()?;
    let tc = &cfg.finetune.train;
    let hidden = cfg.finetune.head_hidden;
    let manifest = DatasetManifest::load(data_dir)?;
    let (train_e, test_e) = labeled_split(&manifest, cfg.finetune.labels_per_class)?;
    let (train, test) = (load_labeled(&manifest, &train_e)?, load_labeled(&manifest, &test_e)?);
    let (enc_cfg, mut params) = initial_params::<T>(cfg, init)?;
    let mut adam = AdamState::new(&params);
    let hp = AdamHyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(DATA_STREAM);

    let steps_per_epoch = train.len().div_ceil(tc.batch);
    let total = tc.max_steps.unwrap_or(tc.epochs * steps_per_epoch);
    let warmup = tc.warmup_epochs * steps_per_epoch;
    let head = format!("{HEAD_PREFIX}.mlp");
    let dims = head_dims(enc_cfg.channels, hidden);
    let mut step = 0;
    let mut final_loss = f64::NAN;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'outer: for _ in 0..total.div_ceil(steps_per_epoch) {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch) {
            if step >= total {
                break 'outer;
            }
            step += 1;
            let lr = cosine_lr(step, total, tc.lr0, tc.lr_min(), warmup);
            let mut tape = Tape::new();
            let mut rows: Option<Var> = None;
            for &i in chunk {
                let f = pooled_features(&mut tape, &params, &enc_cfg, &train[i].points)?;
                rows = Some(match rows {
                    None => f,
                    Some(r) => tape.concat_rows(r, f)?,
                });
            }
            let logits = mlp_forward(&mut tape, &params, &head, &dims, rows.expect("non-empty chunk"))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            final_loss = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
            if !final_loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite fine-tune loss at step {step} (lr {lr})")));
            }
            params.zero_grads();
            tape.backward_into(loss, &mut params)?;
            adamw_step(&mut params, &mut adam, lr, tc.weight_decay, &hp)?;
        }
    }

    let report = ClassifierReport {
        train_accuracy: accuracy(&params, &enc_cfg, hidden, &train)?,
        test_accuracy: accuracy(&params, &enc_cfg, hidden, &test)?,
        train_count: train.len(),
        test_count: test.len(),
        final_loss,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(REPORT_FILE);
        fs::write(&path, report.to_text()).map_err(|e| Error::io(&path, e))?;
        let mut saved = cfg.clone();
        saved.model.encoder = enc_cfg;
        Checkpoint {
            kind: FINETUNE_KIND.to_string(),
            config_text: saved.to_text(),
            epoch: step.div_ceil(steps_per_epoch) as u64,
            step: step as u64,
            rng: RngState::capture(&rng),
            params,
            adam,
        }
        .save(&dir.join(FINETUNE_CHECKPOINT))?;
    }
    Ok(report)
}

/// Standardized pooled features for the probe, computed at 64-bit.
fn probe_features(enc_cfg: &EncoderConfig, encoder: &ParamSet<f64>, data: &[Labeled]) -> Result<Vec<Vec<f64>>> {
    data.iter()
        .map(|s| {
            let mut tape = Tape::new();
            let f = pooled_features(&mut tape, encoder, enc_cfg, &s.points)?;
            Ok(tape.value(f).data().to_vec())
        })
        .collect()
}

/// Trains a single affine classifier on frozen, standardized encoder
/// features. `encoder` is only read.
pub fn probe_with_encoder(
    cfg: &RunConfig,
    enc_cfg: &EncoderConfig,
    encoder: &ParamSet<f64>,
    manifest: &DatasetManifest,
) -> Result<ClassifierReport> {
    let pc = &cfg.probe;
    let (train_e, test_e) = labeled_split(manifest, pc.labels_per_class)?;
    let (train, test) = (load_labeled(manifest, &train_e)?, load_labeled(manifest, &test_e)?);
    let mut xtr = probe_features(enc_cfg, encoder, &train)?;
    let mut xte = probe_features(enc_cfg, encoder, &test)?;
    let d = xtr[0].len();
    let n = xtr.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| xtr.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (xtr.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8))
        .collect();
    for r in xtr.iter_mut().chain(xte.iter_mut()) {
        for j in 0..d {
            r[j] = (r[j] - mean[j]) / std[j];
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    rng.set_stream(HEAD_STREAM);
    let mut params = ParamSet::<f64>::new();
    let dims = [d, num_classes()];
    init_mlp(&mut params, PROBE_PREFIX, &dims, &mut rng)?;
    let mut adam = AdamState::new(&params);
    let x = Tensor::new(vec![xtr.len(), d], xtr.concat())?;
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let mut final_loss = f64::NAN;
    for step in 1..=pc.epochs {
        let lr = cosine_lr(step, pc.epochs, pc.lr0, pc.lr0 / 100.0, 0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let logits = mlp_forward(&mut tape, &params, PROBE_PREFIX, &dims, xv)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        final_loss = tape.value(loss).data()[0];
        params.zero_grads();
        tape.backward_into(loss, &mut params)?;
        adamw_step(&mut params, &mut adam, lr, pc.weight_decay, &AdamHyper::default())?;
    }

    let acc = |rows: &[Vec<f64>], data: &[Labeled]| -> Result<f64> {
        if rows.is_empty() {
            return Ok(f64::NAN);
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(vec![rows.len(), d], rows.concat())?);
        let logits = mlp_forward(&mut tape, &params, PROBE_PREFIX, &dims, xv)?;
        let correct = tape
            .value(logits)
            .data()
            .chunks(num_classes())
            .zip(data)
            .filter(|(row, s)| argmax(row) == s.label)
            .count();
        Ok(correct as f64 / rows.len() as f64)
    };
    Ok(ClassifierReport {
        train_accuracy: acc(&xtr, &train)?,
        test_accuracy: acc(&xte, &test)?,
        train_count: train.len(),
        test_count: test.len(),
        final_loss,
    })
}

/// Linear probe on the encoder from `init`, or on a random encoder seeded
/// by `probe.seed` when `init` is `None`.
pub fn linear_probe(cfg: &RunConfig, init: Option<&Path>, data_dir: &Path) -> Result<ClassifierReport> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data_dir)?;
    let (enc_cfg, encoder) = match init {
        Some(path) => load_encoder::<f64>(path)?,
        None => (cfg.model.encoder.clone(), scratch_encoder(&cfg.model.encoder, cfg.probe.seed)?),
    };
    probe_with_encoder(cfg, &enc_cfg, &encoder, &manifest)
}

/// Writes `id,label,f0,…` with the max-pooled encoder feature of every
/// manifest cloud, computed at 64-bit. Returns the row count.
pub fn export_embeddings(init: &Path, data_dir: &Path, out_path: &Path) -> Result<usize> {
    let manifest = DatasetManifest::load(data_dir)?;
    let (enc_cfg, encoder) = load_encoder::<f64>(init)?;
    let mut text = String::from("id,label");
    for j in 0..enc_cfg.channels {
        text.push_str(&format!(",f{j}"));
    }
    text.push('\n');
    for e in &manifest.entries {
        let cloud = manifest.load_cloud(e)?;
        let mut tape = Tape::new();
        let enc = backbone::encode(&mut tape, &encoder, &enc_cfg, &cloud.points)?;
        let all = vec![(0..enc.centers.len()).collect::<Vec<_>>()];
        let pooled = tape.group_max(enc.features, &all)?;
        text.push_str(&format!("{},{}", e.id, e.label()));
        for v in tape.value(pooled).data() {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out_path, text).map_err(|e| Error::io(out_path, e))?;
    Ok(manifest.entries.len())
}
