//! Quick invariant battery behind `tap selftest`: each check runs in well
//! under a second except the reduced gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::EncodedCloud;
use crate::error::Result;
use crate::geometry::{fit_projection, optical_line, random_pose, rotate_points, Vec3, DEFAULT_MARGIN};
use crate::model::{end_to_end_gradcheck, init_params, ModelConfig};
use crate::ndcompute::{uniform_tensor, GradCheckConfig, Tape, Tensor};
use crate::objective::{tap_loss, LossWeights};
use crate::photograph::{photograph_forward, DropPath, ATTENTION_TAG};
use crate::renderer::ViewImage;
use crate::trainer::{adamw_step, cosine_lr, AdamHyper, AdamState, Checkpoint, RngState};

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

fn geometry(rng: &mut ChaCha8Rng) -> Result<Check> {
    let (mut cell, mut norm) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let pose = random_pose(rng);
        let (h, w) = (rng.gen_range(2..=16), rng.gen_range(2..=16));
        let pp = fit_projection(&rotate_points(&cloud(rng, 16), &pose), h, w, DEFAULT_MARGIN)?;
        let (u, v) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let line = optical_line(&pose, &pp, u, v)?;
        let gp = pp.project(&pose.apply(&line.at(rng.gen_range(-3.0..3.0))));
        cell = cell.max((gp.u - u as f64).abs()).max((gp.v - v as f64).abs());
        let d = line.direction;
        norm = norm.max(((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - 1.0).abs());
    }
    Ok(check(
        "optical line round-trip",
        cell < 1e-9 && norm < 1e-12,
        format!("cell error {cell:.2e}, direction norm error {norm:.2e}"),
    ))
}

fn attention(rng: &mut ChaCha8Rng) -> Result<Check> {
    let cfg = ModelConfig::desk();
    let params = init_params::<f64>(&cfg, 1)?;
    let (n, c) = (cfg.encoder.centers, cfg.encoder.channels);
    let pose = random_pose(rng);
    let centers = cloud(rng, n);
    let feats: Tensor<f64> = uniform_tensor(&[n, c], 1.0, rng);
    let pp = fit_projection(&rotate_points(&centers, &pose), cfg.photo.grid_h, cfg.photo.grid_w, DEFAULT_MARGIN)?;
    let perm: Vec<usize> = (0..n).rev().collect();
    let (mut row_err, mut outs) = (0.0f64, Vec::new());
    for order in [(0..n).collect::<Vec<_>>(), perm] {
        let mut tape = Tape::new();
        let data = order.iter().flat_map(|&r| feats.data()[r * c..(r + 1) * c].to_vec()).collect();
        let enc = EncodedCloud {
            centers: order.iter().map(|&r| centers[r]).collect(),
            center_indices: order.clone(),
            features: tape.leaf(Tensor::new(vec![n, c], data)?),
        };
        let out = photograph_forward(&mut tape, &params, &cfg.photo, &enc, &pose, &pp, &mut DropPath::eval())?;
        for &w in tape.tagged(ATTENTION_TAG) {
            let t = tape.value(w);
            let cols = *t.shape().last().unwrap_or(&1);
            for row in t.data().chunks(cols) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        outs.push(tape.value(out).clone());
    }
    let perm_err = outs[0].max_abs_diff(&outs[1]);
    Ok(check(
        "attention rows and memory order",
        row_err < 1e-6 && perm_err < 1e-6,
        format!("row sum error {row_err:.2e}, permutation change {perm_err:.2e}"),
    ))
}

fn loss(rng: &mut ChaCha8Rng) -> Result<Check> {
    let weights = LossWeights::default();
    let (h, w) = (8, 8);
    let mut px = vec![1.0; h * w * 3];
    let mut fg = 0;
    for cell in px.chunks_mut(3) {
        if rng.gen_bool(0.4) {
            cell.fill(0.5);
            fg += 1;
        }
    }
    let gt = ViewImage::from_pixels(h, w, px.clone())?;
    let delta = 0.1;
    let mut tape = Tape::new();
    let g = tape.leaf(Tensor::new(vec![h, w, 3], px.iter().map(|v| v - delta).collect())?);
    let l = tap_loss(&mut tape, g, &gt, &weights)?;
    let rho = fg as f64 / (h * w) as f64;
    let want = (weights.w_fg * rho + weights.w_bg * (1.0 - rho)) * delta * delta;
    let err = (tape.value(l.total).data()[0] - want).abs();
    Ok(check("uniform-offset loss", err < 1e-12, format!("error {err:.2e}")))
}

fn optimizer() -> Result<Check> {
    let cfg = ModelConfig::desk();
    let mut params = init_params::<f64>(&cfg, 2)?;
    let before = params.clone();
    let mut state = AdamState::new(&params);
    for (_, t) in params.iter_mut() {
        t.set_grad(vec![0.0; t.numel()])?;
    }
    adamw_step(&mut params, &mut state, 0.1, 0.05, &AdamHyper::default())?;
    let mut err = 0.0f64;
    for ((_, a), (_, b)) in before.iter().zip(params.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            err = err.max((x * (1.0 - 0.005) - y).abs());
        }
    }
    let ends = (cosine_lr(10, 100, 1e-3, 1e-5, 10) - 1e-3).abs() + (cosine_lr(100, 100, 1e-3, 1e-5, 10) - 1e-5).abs();
    Ok(check(
        "decay-only step and schedule endpoints",
        err < 1e-15 && ends < 1e-15,
        format!("decay error {err:.2e}, endpoint error {ends:.2e}"),
    ))
}

fn checkpoint() -> Result<Check> {
    let cfg = ModelConfig::desk();
    let params = init_params::<f32>(&cfg, 3)?;
    let ck = Checkpoint {
        kind: "selftest".to_string(),
        config_text: String::new(),
        epoch: 1,
        step: 2,
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(3)),
        adam: AdamState::new(&params),
        params,
    };
    let a = ck.to_bytes()?;
    let b = Checkpoint::<f32>::from_bytes(&a)?.to_bytes()?;
    Ok(check("checkpoint round-trip", a == b, format!("{} bytes", a.len())))
}

fn gradient(seed: u64) -> Result<Check> {
    let gc = GradCheckConfig {
        samples_per_tensor: 2,
        skip_kinks: true,
        seed,
        ..GradCheckConfig::default()
    };
    let r = end_to_end_gradcheck(&ModelConfig::desk(), seed, &gc)?;
    Ok(check(
        "reduced end-to-end gradient check",
        r.passes(1e-5),
        format!("{} elements, {} at kinks, max rel err {:.2e}", r.checked, r.skipped, r.max_rel_err),
    ))
}

/// Runs every check; an error inside a check is reported as its failure.
pub fn run(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let results: [(&'static str, Result<Check>); 6] = [
        ("optical line round-trip", geometry(&mut rng)),
        ("attention rows and memory order", attention(&mut rng)),
        ("uniform-offset loss", loss(&mut rng)),
        ("decay-only step and schedule endpoints", optimizer()),
        ("checkpoint round-trip", checkpoint()),
        ("reduced end-to-end gradient check", gradient(seed)),
    ];
    results
        .into_iter()
        .map(|(name, r)| r.unwrap_or_else(|e| check(name, false, format!("error: {e}"))))
        .collect()
}
