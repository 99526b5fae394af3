//! Pose-conditioned photograph module. Each cell of an `h × w` grid asks a
//! query built from its optical line; the queries cross-attend over the
//! encoder's center tokens plus a learnable pad token and come out as a
//! `h × w × C2d` view-feature map.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::EncodedCloud;
use crate::error::{Error, Result};
use crate::geometry::{optical_line, rotate_points, Pose, ProjectionParams};
use crate::ndcompute::{init_mlp, init_norm, linear, lit, mlp_forward, norm, uniform_tensor, ParamSet, Real, Tape, Tensor, Var};

pub const PREFIX: &str = "photo";
/// Tape tag under which every attention weight matrix is recorded.
pub const ATTENTION_TAG: &str = "attention";
pub const QUERY_INIT_WIDTH: usize = 8;
const QUERY_HIDDEN: usize = 128;
const FF_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhotoMode {
    CrossAttention,
    LearnableQuery,
    DirectProjection,
}

impl PhotoMode {
    pub fn name(self) -> &'static str {
        match self {
            PhotoMode::CrossAttention => "cross_attention",
            PhotoMode::LearnableQuery => "learnable_query",
            PhotoMode::DirectProjection => "direct_projection",
        }
    }
}

impl fmt::Display for PhotoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhotoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [PhotoMode::CrossAttention, PhotoMode::LearnableQuery, PhotoMode::DirectProjection]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown photograph mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhotoConfig {
    pub layers: usize,
    /// Token width `C2d`.
    pub channels: usize,
    pub heads: usize,
    pub drop_path: f64,
    pub mode: PhotoMode,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for PhotoConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            channels: 256,
            heads: 4,
            drop_path: 0.1,
            mode: PhotoMode::CrossAttention,
            grid_h: 7,
            grid_w: 7,
        }
    }
}

impl PhotoConfig {
    pub fn desk() -> Self {
        Self {
            layers: 2,
            channels: 128,
            grid_h: 4,
            grid_w: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "{} channels do not split into {} heads",
                self.channels, self.heads
            )));
        }
        if self.grid_h < 2 || self.grid_w < 2 {
            return Err(Error::config("photograph grid must be at least 2x2"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config(format!("drop path rate {} outside [0, 1)", self.drop_path)));
        }
        Ok(())
    }

    fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn uses_attention(&self) -> bool {
        self.mode != PhotoMode::DirectProjection
    }
}

/// Stochastic depth on residual branches. `eval()` never drops.
pub struct DropPath<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> DropPath<'a> {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    /// `x + branch`, with the branch dropped or rescaled by `1/(1 − rate)`.
    pub fn residual<T: Real>(&mut self, tape: &mut Tape<T>, x: Var, branch: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                if rng.gen::<f64>() < self.rate {
                    Ok(x)
                } else {
                    let b = tape.scale(branch, lit(1.0 / (1.0 - self.rate)));
                    tape.add(x, b)
                }
            }
            _ => tape.add(x, branch),
        }
    }
}

pub struct QueryGrid<T> {
    /// `[h·w × 8]`, row-major over cells.
    pub init: Tensor<T>,
    /// `[h·w × C2d]`
    pub lifted: Var,
}

fn block_prefix(layer: usize) -> String {
    format!("{PREFIX}.block.{layer}")
}

fn query_dims(cfg: &PhotoConfig) -> Vec<usize> {
    vec![QUERY_INIT_WIDTH, QUERY_HIDDEN, cfg.channels]
}

fn learned_query_dims(cfg: &PhotoConfig) -> Vec<usize> {
    vec![9, QUERY_HIDDEN, cfg.cells() * cfg.channels]
}

fn memory_dims(cfg: &PhotoConfig, c3d: usize) -> Vec<usize> {
    vec![c3d + 3, cfg.channels, cfg.channels]
}

/// Registers every parameter used by `cfg.mode`. `c3d` is the encoder
/// feature width.
pub fn init_params<T: Real>(params: &mut ParamSet<T>, cfg: &PhotoConfig, c3d: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    init_mlp(params, &format!("{PREFIX}.memory_mlp"), &memory_dims(cfg, c3d), rng)?;
    params.insert(format!("{PREFIX}.pad"), uniform_tensor(&[c], 0.5, rng))?;
    match cfg.mode {
        PhotoMode::CrossAttention => init_mlp(params, &format!("{PREFIX}.query_mlp"), &query_dims(cfg), rng)?,
        PhotoMode::LearnableQuery => init_mlp(params, &format!("{PREFIX}.learned_query_mlp"), &learned_query_dims(cfg), rng)?,
        PhotoMode::DirectProjection => {}
    }
    if cfg.uses_attention() {
        for l in 0..cfg.layers {
            let p = block_prefix(l);
            init_norm(params, &format!("{p}.norm_attn"), c)?;
            for proj in ["q", "k", "v", "out"] {
                init_mlp(params, &format!("{p}.attn.{proj}"), &[c, c], rng)?;
            }
            init_norm(params, &format!("{p}.norm_ff"), c)?;
            init_mlp(params, &format!("{p}.ff"), &[c, FF_EXPANSION * c, c], rng)?;
        }
        init_norm(params, &format!("{PREFIX}.norm_out"), c)?;
    }
    Ok(())
}

/// The 8-wide optical-line descriptor of every grid cell, row-major.
pub fn query_init<T: Real>(pose: &Pose, pp: &ProjectionParams) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(pp.h * pp.w * QUERY_INIT_WIDTH);
    for u in 0..pp.h {
        for v in 0..pp.w {
            data.extend(optical_line(pose, pp, u, v)?.query_row().map(lit::<T>));
        }
    }
    Tensor::new(vec![pp.h * pp.w, QUERY_INIT_WIDTH], data)
}

pub fn build_queries<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &PhotoConfig,
    pose: &Pose,
    pp: &ProjectionParams,
) -> Result<QueryGrid<T>> {
    if (pp.h, pp.w) != (cfg.grid_h, cfg.grid_w) {
        return Err(Error::contract(format!(
            "projection fitted for {}x{}, photograph grid is {}x{}",
            pp.h, pp.w, cfg.grid_h, cfg.grid_w
        )));
    }
    let init = query_init(pose, pp)?;
    let x = tape.leaf(init.clone());
    let lifted = mlp_forward(tape, params, &format!("{PREFIX}.query_mlp"), &query_dims(cfg), x)?;
    Ok(QueryGrid { init, lifted })
}

/// `[n+1 × C2d]` memory: an MLP over `[features | centers]` with the pad
/// token appended as the last row.
pub fn build_memory<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &PhotoConfig,
    enc: &EncodedCloud,
) -> Result<Var> {
    let n = enc.centers.len();
    let c3d = match tape.shape(enc.features) {
        &[rows, c] if rows == n => c,
        s => return Err(Error::contract(format!("features {s:?} for {n} centers"))),
    };
    let coords = Tensor::new(vec![n, 3], enc.centers.iter().flatten().map(|&v| lit::<T>(v)).collect())?;
    let coords = tape.leaf(coords);
    let x = tape.concat_cols(enc.features, coords)?;
    let tokens = mlp_forward(tape, params, &format!("{PREFIX}.memory_mlp"), &memory_dims(cfg, c3d), x)?;
    let pad = tape.param(params, &format!("{PREFIX}.pad"))?;
    let pad = tape.reshape(pad, vec![1, cfg.channels])?;
    tape.concat_rows(tokens, pad)
}

/// Multi-head scaled dot-product attention on already projected `q`, `k`,
/// `v`; head outputs are concatenated along columns.
pub fn attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let c = tape.value(q).rows_cols().1;
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!("{c} channels do not split into {heads} heads")));
    }
    let dk = c / heads;
    let scale: T = lit(1.0 / (dk as f64).sqrt());
    let mut out: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores)?;
        tape.tag(ATTENTION_TAG, weights);
        let oh = tape.matmul(weights, vh)?;
        out = Some(match out {
            None => oh,
            Some(prev) => tape.concat_cols(prev, oh)?,
        });
    }
    Ok(out.expect("at least one head"))
}

/// One pre-norm block: attention over `memory` with a residual, then a
/// feed-forward layer with a residual.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_block<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &PhotoConfig,
    layer: usize,
    x: Var,
    memory: Var,
    drop: &mut DropPath<'_>,
) -> Result<Var> {
    cfg.validate()?;
    let p = block_prefix(layer);
    let xn = norm(tape, params, &format!("{p}.norm_attn"), x)?;
    let q = linear(tape, params, &format!("{p}.attn.q.0"), xn)?;
    let k = linear(tape, params, &format!("{p}.attn.k.0"), memory)?;
    let v = linear(tape, params, &format!("{p}.attn.v.0"), memory)?;
    let heads = attention(tape, q, k, v, cfg.heads)?;
    let attn = linear(tape, params, &format!("{p}.attn.out.0"), heads)?;
    let x = drop.residual(tape, x, attn)?;

    let xn = norm(tape, params, &format!("{p}.norm_ff"), x)?;
    let c = cfg.channels;
    let ff = mlp_forward(tape, params, &format!("{p}.ff"), &[c, FF_EXPANSION * c, c], xn)?;
    drop.residual(tape, x, ff)
}

fn attention_stack<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &PhotoConfig,
    queries: Var,
    memory: Var,
    drop: &mut DropPath<'_>,
) -> Result<Var> {
    let mut x = queries;
    for l in 0..cfg.layers {
        x = cross_attention_block(tape, params, cfg, l, x, memory, drop)?;
    }
    norm(tape, params, &format!("{PREFIX}.norm_out"), x)
}

/// Memory-row groups per grid cell: centers landing in a cell, or the pad
/// row for empty cells.
fn projection_groups(enc: &EncodedCloud, pose: &Pose, pp: &ProjectionParams) -> Vec<Vec<usize>> {
    let n = enc.centers.len();
    let mut groups = vec![Vec::new(); pp.h * pp.w];
    for (i, p) in rotate_points(&enc.centers, pose).iter().enumerate() {
        let gp = pp.project(p);
        let u = (gp.u.round().max(0.0) as usize).min(pp.h - 1);
        let v = (gp.v.round().max(0.0) as usize).min(pp.w - 1);
        groups[u * pp.w + v].push(i);
    }
    for g in groups.iter_mut().filter(|g| g.is_empty()) {
        g.push(n);
    }
    groups
}

/// View-feature map `[h × w × C2d]` for one cloud and pose. `pp` must be
/// fitted to the full cloud rotated by `pose` on the photograph grid.
pub fn photograph_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &PhotoConfig,
    enc: &EncodedCloud,
    pose: &Pose,
    pp: &ProjectionParams,
    drop: &mut DropPath<'_>,
) -> Result<Var> {
    cfg.validate()?;
    let memory = build_memory(tape, params, cfg, enc)?;
    let cells = match cfg.mode {
        PhotoMode::CrossAttention => {
            let queries = build_queries(tape, params, cfg, pose, pp)?;
            attention_stack(tape, params, cfg, queries.lifted, memory, drop)?
        }
        PhotoMode::LearnableQuery => {
            let r = Tensor::new(vec![1, 9], pose.flattened().map(lit::<T>).to_vec())?;
            let r = tape.leaf(r);
            let q = mlp_forward(tape, params, &format!("{PREFIX}.learned_query_mlp"), &learned_query_dims(cfg), r)?;
            let q = tape.reshape(q, vec![cfg.cells(), cfg.channels])?;
            attention_stack(tape, params, cfg, q, memory, drop)?
        }
        PhotoMode::DirectProjection => {
            if (pp.h, pp.w) != (cfg.grid_h, cfg.grid_w) {
                return Err(Error::contract("projection does not match the photograph grid"));
            }
            tape.group_mean(memory, &projection_groups(enc, pose, pp))?
        }
    };
    tape.reshape(cells, vec![cfg.grid_h, cfg.grid_w, cfg.channels])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::backbone::{self, EncoderConfig};
    use crate::geometry::{fit_projection, random_pose, Vec3, DEFAULT_MARGIN};
    use crate::ndcompute::{grad_check, GradCheckConfig};

    fn small_cfg(mode: PhotoMode) -> PhotoConfig {
        PhotoConfig {
            layers: 2,
            channels: 8,
            heads: 2,
            drop_path: 0.1,
            mode,
            grid_h: 3,
            grid_w: 3,
        }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect()
    }

    fn fake_encoding<T: Real>(tape: &mut Tape<T>, rng: &mut ChaCha8Rng, n: usize, c3d: usize) -> EncodedCloud {
        let centers = random_cloud(rng, n);
        let features = tape.leaf(uniform_tensor(&[n, c3d], 1.0, rng));
        EncodedCloud {
            center_indices: (0..n).collect(),
            centers,
            features,
        }
    }

    fn fit(points: &[Vec3], pose: &Pose, cfg: &PhotoConfig) -> ProjectionParams {
        fit_projection(&rotate_points(points, pose), cfg.grid_h, cfg.grid_w, DEFAULT_MARGIN).unwrap()
    }

    #[test]
    fn identity_pose_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = random_cloud(&mut rng, 20);
        let cfg = small_cfg(PhotoMode::CrossAttention);
        let pose = Pose::identity();
        let init: Tensor<f64> = query_init(&pose, &fit(&pts, &pose, &cfg)).unwrap();
        assert_eq!(init.shape(), &[9, QUERY_INIT_WIDTH]);
        for r in 0..9 {
            assert_eq!(&init.data()[r * 8 + 3..r * 8 + 6], &[0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn distinct_cells_have_distinct_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_cloud(&mut rng, 20);
        let cfg = small_cfg(PhotoMode::CrossAttention);
        let pose = random_pose(&mut rng);
        let init: Tensor<f64> = query_init(&pose, &fit(&pts, &pose, &cfg)).unwrap();
        let rows: Vec<&[f64]> = init.data().chunks(8).collect();
        for i in 0..rows.len() {
            let d = &rows[i][3..6];
            assert!(((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert_ne!(rows[i][..3], rows[j][..3]);
            }
        }
    }

    #[test]
    fn memory_rows_and_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_cfg(PhotoMode::CrossAttention);
        let mut params = ParamSet::<f64>::new();
        init_params(&mut params, &cfg, 5, &mut rng).unwrap();
        for (name, t) in params.iter_mut() {
            if name.starts_with("photo.memory_mlp") && name.ends_with("weight") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let b: Vec<f64> = (0..8).map(|i| i as f64 * 0.25).collect();
        params.get_mut("photo.memory_mlp.1.bias").unwrap().data_mut().copy_from_slice(&b);
        let pad = params.get("photo.pad").unwrap().data().to_vec();

        let mut tape = Tape::new();
        let e1 = fake_encoding(&mut tape, &mut rng, 6, 5);
        let e2 = fake_encoding(&mut tape, &mut rng, 4, 5);
        let m1 = build_memory(&mut tape, &params, &cfg, &e1).unwrap();
        let m2 = build_memory(&mut tape, &params, &cfg, &e2).unwrap();
        assert_eq!(tape.shape(m1), &[7, 8]);
        assert_eq!(tape.shape(m2), &[5, 8]);
        let (v1, v2) = (tape.value(m1).data(), tape.value(m2).data());
        for row in v1[..6 * 8].chunks(8) {
            assert_eq!(row, &b[..]);
        }
        assert_eq!(&v1[6 * 8..], &pad[..]);
        assert_eq!(&v2[4 * 8..], &pad[..]);
    }

    #[test]
    fn single_token_and_uniform_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(uniform_tensor(&[5, 8], 1.0, &mut rng));
        let k1 = tape.leaf(uniform_tensor(&[1, 8], 1.0, &mut rng));
        let v1t: Tensor<f64> = uniform_tensor(&[1, 8], 1.0, &mut rng);
        let v1 = tape.leaf(v1t.clone());
        let out = attention(&mut tape, q, k1, v1, 2).unwrap();
        for row in tape.value(out).data().chunks(8) {
            for (a, b) in row.iter().zip(v1t.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }

        let krow: Tensor<f64> = uniform_tensor(&[1, 8], 1.0, &mut rng);
        let keys = Tensor::new(vec![4, 8], krow.data().repeat(4)).unwrap();
        let k = tape.leaf(keys);
        let vt: Tensor<f64> = uniform_tensor(&[4, 8], 1.0, &mut rng);
        let v = tape.leaf(vt.clone());
        let out = attention(&mut tape, q, k, v, 4).unwrap();
        for w in tape.tagged(ATTENTION_TAG)[2..].iter() {
            assert!(tape.value(*w).data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        }
        let mean: Vec<f64> = (0..8).map(|c| (0..4).map(|r| vt.get(&[r, c])).sum::<f64>() / 4.0).collect();
        for row in tape.value(out).data().chunks(8) {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_mismatch_is_config_error() {
        let mut cfg = small_cfg(PhotoMode::CrossAttention);
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(matches!("nope".parse::<PhotoMode>(), Err(Error::Config(_))));
        assert_eq!("learnable_query".parse::<PhotoMode>().unwrap(), PhotoMode::LearnableQuery);
    }

    #[test]
    fn block_ignores_memory_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = small_cfg(PhotoMode::CrossAttention);
        let mut params = ParamSet::<f64>::new();
        init_params(&mut params, &cfg, 5, &mut rng).unwrap();
        let q: Tensor<f64> = uniform_tensor(&[9, 8], 1.0, &mut rng);
        let mem: Tensor<f64> = uniform_tensor(&[7, 8], 1.0, &mut rng);
        let perm = [3, 6, 0, 5, 1, 4, 2];
        let permuted = Tensor::new(vec![7, 8], perm.iter().flat_map(|&r| mem.data()[r * 8..r * 8 + 8].to_vec()).collect()).unwrap();
        let run = |m: Tensor<f64>| {
            let mut tape = Tape::new();
            let (qv, mv) = (tape.leaf(q.clone()), tape.leaf(m));
            let out = cross_attention_block(&mut tape, &params, &cfg, 0, qv, mv, &mut DropPath::eval()).unwrap();
            tape.value(out).clone()
        };
        assert!(run(mem).max_abs_diff(&run(permuted)) < 1e-12);
    }

    #[test]
    fn output_shapes_for_all_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg0 = PhotoConfig::default();
        for mode in [PhotoMode::CrossAttention, PhotoMode::LearnableQuery, PhotoMode::DirectProjection] {
            let cfg = PhotoConfig { mode, ..cfg0.clone() };
            let mut params = ParamSet::<f32>::new();
            init_params(&mut params, &cfg, 256, &mut rng).unwrap();
            let mut tape = Tape::new();
            let enc = fake_encoding(&mut tape, &mut rng, 64, 256);
            let pose = random_pose(&mut rng);
            let pp = fit(&enc.centers, &pose, &cfg);
            let out = photograph_forward(&mut tape, &params, &cfg, &enc, &pose, &pp, &mut DropPath::eval()).unwrap();
            assert_eq!(tape.shape(out), &[7, 7, 256], "{mode}");
            assert!(tape.value(out).all_finite());
        }
    }

    #[test]
    fn direct_projection_single_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = small_cfg(PhotoMode::DirectProjection);
        let mut params = ParamSet::<f64>::new();
        init_params(&mut params, &cfg, 5, &mut rng).unwrap();
        let pad = params.get("photo.pad").unwrap().data().to_vec();
        let mut tape = Tape::new();
        let enc = fake_encoding(&mut tape, &mut rng, 1, 5);
        let cloud = random_cloud(&mut rng, 30);
        let pose = random_pose(&mut rng);
        let pp = fit(&cloud, &pose, &cfg);
        let out = photograph_forward(&mut tape, &params, &cfg, &enc, &pose, &pp, &mut DropPath::eval()).unwrap();
        let non_pad = tape.value(out).data().chunks(8).filter(|c| *c != &pad[..]).count();
        assert_eq!(non_pad, 1);
    }

    #[test]
    fn output_depends_on_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = small_cfg(PhotoMode::CrossAttention);
        let mut params = ParamSet::<f64>::new();
        init_params(&mut params, &cfg, 5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let enc = fake_encoding(&mut tape, &mut rng, 10, 5);
        let mut outs = Vec::new();
        for pose in [Pose::identity(), Pose::rot_y(std::f64::consts::FRAC_PI_2)] {
            let pp = fit(&enc.centers, &pose, &cfg);
            let o = photograph_forward(&mut tape, &params, &cfg, &enc, &pose, &pp, &mut DropPath::eval()).unwrap();
            outs.push(tape.value(o).clone());
        }
        assert!(outs[0].max_abs_diff(&outs[1]) > 0.0);
        for w in tape.tagged(ATTENTION_TAG) {
            for row in tape.value(*w).data().chunks(10 + 1) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn drop_path_is_deterministic_per_seed_and_off_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = PhotoConfig {
            drop_path: 0.5,
            ..small_cfg(PhotoMode::CrossAttention)
        };
        let mut params = ParamSet::<f64>::new();
        init_params(&mut params, &cfg, 5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let enc = fake_encoding(&mut tape, &mut rng, 10, 5);
        let pose = Pose::identity();
        let pp = fit(&enc.centers, &pose, &cfg);
        let mut run = |seed: Option<u64>| {
            let mut r = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
            let mut drop = match seed {
                Some(_) => DropPath::train(cfg.drop_path, &mut r),
                None => DropPath::eval(),
            };
            let o = photograph_forward(&mut tape, &params, &cfg, &enc, &pose, &pp, &mut drop).unwrap();
            tape.value(o).clone()
        };
        let (a, b, e) = (run(Some(1)), run(Some(1)), run(None));
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&e) > 0.0);
    }

    #[test]
    fn full_module_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc_cfg = EncoderConfig {
            point_dims: vec![6],
            centers: 5,
            k: 4,
            channels: 6,
            start_index: 0,
        };
        for mode in [PhotoMode::CrossAttention, PhotoMode::LearnableQuery, PhotoMode::DirectProjection] {
            let cfg = small_cfg(mode);
            let mut params = ParamSet::<f64>::new();
            backbone::init_params(&mut params, &enc_cfg, &mut rng).unwrap();
            init_params(&mut params, &cfg, 6, &mut rng).unwrap();
            for (name, t) in params.iter_mut() {
                if name.ends_with(".bias") || name.ends_with(".shift") {
                    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
                }
            }
            let cloud = random_cloud(&mut rng, 24);
            let pose = random_pose(&mut rng);
            let pp = fit(&cloud, &pose, &cfg);
            let head: Tensor<f64> = uniform_tensor(&[3, 3, 8], 1.0, &mut rng);
            let f = |tape: &mut Tape<f64>, p: &ParamSet<f64>| {
                let enc = backbone::encode(tape, p, &enc_cfg, &cloud)?;
                let out = photograph_forward(tape, p, &cfg, &enc, &pose, &pp, &mut DropPath::eval())?;
                let h = tape.leaf(head.clone());
                let prod = tape.mul(out, h)?;
                Ok(tape.sum_all(prod))
            };
            let report = grad_check(f, &params, &GradCheckConfig::default()).unwrap();
            assert!(report.max_rel_err < 1e-5, "{mode}: {:?}", report.worst);
        }
    }
}
