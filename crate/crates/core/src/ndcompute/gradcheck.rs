//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamSet};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Elements checked per tensor; smaller tensors are checked fully.
    pub samples_per_tensor: usize,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to round-off do not produce unbounded ratios.
    pub abs_floor: f64,
    /// Skip elements whose perturbation changes a ReLU, clamp or max
    /// branch. Central differences across a kink do not estimate the
    /// derivative at the point, so such elements carry no information.
    pub skip_kinks: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_tensor: 64,
            abs_floor: 1e-4,
            skip_kinks: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstElement {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: Option<WorstElement>,
    pub checked: usize,
    /// Elements skipped because a perturbation crossed a kink.
    pub skipped: usize,
    /// Largest relative error per tensor, in parameter order.
    pub per_param: Vec<(String, f64)>,
}

impl GradReport {
    pub fn worst_param(&self) -> Option<&str> {
        self.worst.as_ref().map(|w| w.param.as_str())
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Builds the computation with `f`, differentiates it, and compares every
/// parameter gradient against central differences.
pub fn grad_check<F>(f: F, params: &ParamSet<f64>, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let analytic = tape.backward(loss)?.into_params();
    compare_gradients(&analytic, f, params, cfg)
}

/// Compares precomputed `analytic` gradients against central differences
/// of `f`. Parameters absent from `analytic` are treated as having zero
/// gradient.
pub fn compare_gradients<F>(
    analytic: &Gradients<f64>,
    f: F,
    params: &ParamSet<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let eval = |p: &ParamSet<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, p)?;
        let sig = if cfg.skip_kinks { tape.branch_signature() } else { 0 };
        Ok((tape.value(loss).data()[0], sig))
    };
    let base_sig = eval(params)?.1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        per_param: Vec::new(),
    };

    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let numel = params.get(&name)?.numel();
        let mut indices: Vec<usize> = if numel <= cfg.samples_per_tensor {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, cfg.samples_per_tensor).into_vec()
        };
        indices.sort_unstable();
        let mut tensor_max = 0.0f64;
        for idx in indices {
            let orig = params.get(&name)?.data()[idx];
            work.get_mut(&name)?.data_mut()[idx] = orig + cfg.eps;
            let (plus, sig_plus) = eval(&work)?;
            work.get_mut(&name)?.data_mut()[idx] = orig - cfg.eps;
            let (minus, sig_minus) = eval(&work)?;
            work.get_mut(&name)?.data_mut()[idx] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped += 1;
                continue;
            }

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.get(&name).map_or(0.0, |g| g[idx]);
            let err = relative_error(a, numeric, cfg.abs_floor);
            report.checked += 1;
            tensor_max = tensor_max.max(err);
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(WorstElement {
                    param: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
        report.per_param.push((name, tensor_max));
    }
    Ok(report)
}
