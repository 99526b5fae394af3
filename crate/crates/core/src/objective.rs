//! Training objectives: the foreground/background weighted image loss and
//! the Chamfer distance between point sets.

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::ndcompute::{lit, Real, Tape, Tensor, Var};
use crate::renderer::{ViewImage, WHITE_THRESHOLD};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_fg: f64,
    pub w_bg: f64,
    /// Normalize each region by its own pixel count instead of `H·W`.
    pub per_region: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_fg: 20.0,
            w_bg: 1.0,
            per_region: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_fg >= 0.0 && self.w_bg >= 0.0) {
            return Err(Error::config(format!("loss weights ({}, {}) must be non-negative", self.w_fg, self.w_bg)));
        }
        Ok(())
    }
}

/// `[H × W]` with 1 on foreground pixels: any channel below the white
/// threshold.
pub fn fg_bg_mask(gt: &ViewImage) -> Tensor<f64> {
    let data = gt
        .pixels
        .chunks_exact(3)
        .map(|px| if px.iter().all(|&c| c >= WHITE_THRESHOLD) { 0.0 } else { 1.0 })
        .collect();
    Tensor::new(vec![gt.height, gt.width], data).expect("image extents are positive")
}

/// Weighted region terms and their sum, all scalars on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TapLoss {
    /// `w_fg · D_fg`
    pub fg: Var,
    /// `w_bg · D_bg`
    pub bg: Var,
    pub total: Var,
}

/// `w_fg·D_fg + w_bg·D_bg`, where `D_k` sums the per-pixel channel mean of
/// `(clamp(gen) − gt)²` over region `k` and divides by `H·W`.
pub fn tap_loss<T: Real>(tape: &mut Tape<T>, gen: Var, gt: &ViewImage, w: &LossWeights) -> Result<TapLoss> {
    w.validate()?;
    let (h, wd) = (gt.height, gt.width);
    if tape.shape(gen) != [h, wd, 3] {
        return Err(Error::contract(format!(
            "generated image {:?} does not match target {h}x{wd}x3",
            tape.shape(gen)
        )));
    }
    let mask = fg_bg_mask(gt);
    let n_fg = mask.data().iter().filter(|&&m| m > 0.0).count();
    let n_bg = h * wd - n_fg;
    let region_norm = |count: usize| {
        let denom = if w.per_region { count } else { h * wd };
        if denom == 0 {
            0.0
        } else {
            1.0 / (3.0 * denom as f64)
        }
    };
    let (c_fg, c_bg) = (w.w_fg * region_norm(n_fg), w.w_bg * region_norm(n_bg));

    let target = Tensor::new(vec![h, wd, 3], gt.pixels.iter().map(|&v| lit::<T>(v)).collect())?;
    let target = tape.leaf(target);
    let clamped = tape.clamp(gen, T::zero(), T::one());
    let diff = tape.sub(clamped, target)?;
    let sq = tape.square(diff);

    let mut weights = |fg: bool, coeff: f64| -> Result<Var> {
        let data = mask
            .data()
            .iter()
            .flat_map(|&m| {
                let inside = (m > 0.0) == fg;
                [lit::<T>(if inside { coeff } else { 0.0 }); 3]
            })
            .collect();
        Ok(tape.leaf(Tensor::new(vec![h, wd, 3], data)?))
    };
    let wf = weights(true, c_fg)?;
    let wb = weights(false, c_bg)?;
    let fg = tape.mul(sq, wf)?;
    let fg = tape.sum_all(fg);
    let bg = tape.mul(sq, wb)?;
    let bg = tape.sum_all(bg);
    let total = tape.add(fg, bg)?;
    Ok(TapLoss { fg, bg, total })
}

fn sq_dist(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Mean over `from` of the squared distance to the nearest point of `to`.
/// `to` is searched outward from the query's position along x and the scan
/// stops once the x gap alone exceeds the best distance.
fn directed_term(from: &[Vec3], to: &[Vec3]) -> f64 {
    let mut sorted: Vec<Vec3> = to.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let mut total = 0.0;
    for p in from {
        let start = sorted.partition_point(|q| q[0] < p[0]);
        let mut best = f64::INFINITY;
        for q in sorted[start..].iter() {
            if (q[0] - p[0]).powi(2) > best {
                break;
            }
            best = best.min(sq_dist(p, q));
        }
        for q in sorted[..start].iter().rev() {
            if (q[0] - p[0]).powi(2) > best {
                break;
            }
            best = best.min(sq_dist(p, q));
        }
        total += best;
    }
    total / from.len() as f64
}

/// The two directed terms `(a → b, b → a)` of the Chamfer distance.
pub fn chamfer_terms(a: &[Vec3], b: &[Vec3]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("Chamfer distance needs two non-empty clouds"));
    }
    Ok((directed_term(a, b), directed_term(b, a)))
}

/// Squared-l2 Chamfer distance: the sum of both directed mean
/// nearest-neighbour terms.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    let (ab, ba) = chamfer_terms(a, b)?;
    Ok(ab + ba)
}
