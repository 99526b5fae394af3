//! The full pre-training pipeline: encoder → photograph → generator → loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, EncoderConfig};
use crate::decoder2d::{self, DecoderConfig};
use crate::error::{Error, Result};
use crate::geometry::{fit_projection, rotate_points, Pose, ProjectionParams, Vec3, DEFAULT_MARGIN};
use crate::dataset::{gen_shape, ShapeKind};
use crate::ndcompute::{grad_check, GradCheckConfig, GradReport, ParamSet, Real, Tape, Var};
use crate::objective::{tap_loss, LossWeights, TapLoss};
use crate::photograph::{self, DropPath, PhotoConfig};
use crate::renderer::{default_splat_radius, render, ViewImage};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub photo: PhotoConfig,
    pub decoder: DecoderConfig,
    pub loss: LossWeights,
}

impl ModelConfig {
    /// 7×7×256 feature map, 224×224 images.
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            photo: PhotoConfig::default(),
            decoder: DecoderConfig::full(),
            loss: LossWeights::default(),
        }
    }

    /// 4×4×128 feature map, 32×32 images.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            photo: PhotoConfig::desk(),
            decoder: DecoderConfig::desk(),
            loss: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.photo.validate()?;
        self.decoder.validate()?;
        self.loss.validate()?;
        if self.photo.channels != self.decoder.in_channels() {
            return Err(Error::config(format!(
                "photograph emits {} channels but the decoder expects {}",
                self.photo.channels,
                self.decoder.in_channels()
            )));
        }
        Ok(())
    }

    /// Generated image extents.
    pub fn image_dims(&self) -> Result<(usize, usize)> {
        self.decoder.output_dims(self.photo.grid_h, self.photo.grid_w)
    }
}

/// Fresh parameters for every module, each drawn from its own stream so
/// that changing one module's shape leaves the others' initial values alone.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    backbone::init_params(&mut params, &cfg.encoder, &mut stream(1))?;
    photograph::init_params(&mut params, &cfg.photo, cfg.encoder.channels, &mut stream(2))?;
    decoder2d::init_params(&mut params, &cfg.decoder, &mut stream(3))?;
    Ok(params)
}

/// Photograph-grid projection of `points` seen from `pose`.
pub fn grid_projection(cfg: &ModelConfig, points: &[Vec3], pose: &Pose) -> Result<ProjectionParams> {
    fit_projection(&rotate_points(points, pose), cfg.photo.grid_h, cfg.photo.grid_w, DEFAULT_MARGIN)
}

/// Predicted view image `[H × W × 3]`, unclamped.
pub fn generate<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    points: &[Vec3],
    pose: &Pose,
    drop: &mut DropPath<'_>,
) -> Result<Var> {
    let enc = backbone::encode(tape, params, &cfg.encoder, points)?;
    let pp = grid_projection(cfg, points, pose)?;
    let fmap = photograph::photograph_forward(tape, params, &cfg.photo, &enc, pose, &pp, drop)?;
    decoder2d::decode(tape, params, &cfg.decoder, fmap)
}

/// Pre-training loss of one (cloud, pose, ground truth) sample.
pub fn sample_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    points: &[Vec3],
    pose: &Pose,
    gt: &ViewImage,
    drop: &mut DropPath<'_>,
) -> Result<TapLoss> {
    let img = generate(tape, params, cfg, points, pose, drop)?;
    tap_loss(tape, img, gt, &cfg.loss)
}

/// Points per cloud in [`end_to_end_gradcheck`].
pub const GRADCHECK_POINTS: usize = 128;

/// Finite-difference check of the whole pipeline at 64-bit on a two-sample
/// batch (mean of the two sample losses). Biases and norm shifts are
/// perturbed away from zero first: at initialization every center's own
/// relative coordinate is zero, which places those pre-activations exactly
/// on the ReLU kink where central differences are meaningless.
pub fn end_to_end_gradcheck(cfg: &ModelConfig, seed: u64, gc: &GradCheckConfig) -> Result<GradReport> {
    let mut params = init_params::<f64>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") || name.ends_with(".shift") {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }
    let (h, w) = cfg.image_dims()?;
    let samples = [
        (ShapeKind::Torus, Pose::from_view(30.0, 30.0)),
        (ShapeKind::Cone, Pose::from_view(120.0, -20.0)),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (kind, pose))| {
        let cloud = gen_shape(kind, GRADCHECK_POINTS, seed + i as u64)?;
        let gt = render(&cloud.points, &pose, h, w, default_splat_radius(h, w))?;
        Ok((cloud.points, pose, gt))
    })
    .collect::<Result<Vec<_>>>()?;
    let f = |tape: &mut Tape<f64>, p: &ParamSet<f64>| {
        let mut total = None;
        for (points, pose, gt) in &samples {
            let l = sample_loss(tape, p, cfg, points, pose, gt, &mut DropPath::eval())?.total;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let sum = total.expect("two samples");
        Ok(tape.scale(sum, 0.5))
    };
    grad_check(f, &params, gc)
}
