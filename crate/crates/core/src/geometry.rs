//! Poses, parallel projection onto a grid, and the inverse optical lines.
//!
//! Conventions: a point `x` is rotated into the camera frame as `x' = R·x`.
//! The first rotated coordinate indexes grid rows (`u`), the second grid
//! columns (`v`), and the viewer looks along `+z'`, so a smaller `z'` is
//! nearer.

use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

const POSE_TOL: f64 = 1e-9;

/// Rotation matrix with `RᵀR = I` and `det R = +1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    r: Mat3,
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

impl Pose {
    pub fn new(r: Mat3) -> Result<Self> {
        if r.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Pose("non-finite entry".into()));
        }
        let rtr = mat_mul(&transpose(&r), &r);
        for (i, row) in rtr.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (v - expect).abs() > POSE_TOL {
                    return Err(Error::Pose(format!("RᵀR[{i}][{j}] = {v}")));
                }
            }
        }
        let d = det(&r);
        if (d - 1.0).abs() > POSE_TOL {
            return Err(Error::Pose(format!("det R = {d}")));
        }
        Ok(Self { r })
    }

    pub fn identity() -> Self {
        Self {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            r: [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        }
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            r: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        }
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            r: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Viewpoint on a ring: azimuth spins the object about its `x` axis
    /// (the image's vertical), elevation then tilts it about `y'`.
    pub fn from_view(azimuth_deg: f64, elevation_deg: f64) -> Self {
        Self::rot_y(elevation_deg.to_radians()).compose(&Self::rot_x(azimuth_deg.to_radians()))
    }

    /// `self · first`: applying the result equals applying `first`, then `self`.
    pub fn compose(&self, first: &Pose) -> Pose {
        Pose {
            r: mat_mul(&self.r, &first.r),
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.r
    }

    /// `R⁻¹`, which is `Rᵀ` for a rotation.
    pub fn inverse_matrix(&self) -> Mat3 {
        transpose(&self.r)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = &self.r;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    /// Row-major flattening, used as input by the learnable-query ablation.
    pub fn flattened(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for (i, v) in self.r.iter().flatten().enumerate() {
            out[i] = *v;
        }
        out
    }
}

/// `x' = R·x` for every point.
pub fn rotate_points(points: &[Vec3], pose: &Pose) -> Vec<Vec3> {
    points.iter().map(|p| pose.apply(p)).collect()
}

/// Grid placement for one (cloud, pose) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionParams {
    pub h: usize,
    pub w: usize,
    /// Scene units per grid cell, shared by both axes.
    pub g: f64,
    /// Centering offsets, in grid cells.
    pub o_h: f64,
    pub o_w: f64,
    /// Minima of the rotated first two coordinates.
    pub x0: f64,
    pub y0: f64,
    pub margin: f64,
}

pub const DEFAULT_MARGIN: f64 = 0.1;
const MIN_CELL: f64 = 1e-9;

/// Fits cell size and offsets so the rotated cloud is centered in an
/// `h × w` grid with a border of `margin` on the tighter axis.
pub fn fit_projection(rotated: &[Vec3], h: usize, w: usize, margin: f64) -> Result<ProjectionParams> {
    if rotated.is_empty() {
        return Err(Error::data("cannot fit a projection to an empty cloud"));
    }
    if h < 2 || w < 2 {
        return Err(Error::contract(format!("grid {h}x{w} must be at least 2x2")));
    }
    if !(0.0..0.5).contains(&margin) {
        return Err(Error::config(format!("margin {margin} outside [0, 0.5)")));
    }
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in rotated {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let (ext_x, ext_y) = (x1 - x0, y1 - y0);
    let span = (h.min(w) - 1) as f64 * (1.0 - 2.0 * margin);
    let g = (ext_x.max(ext_y) / span).max(MIN_CELL);
    let o_h = ((h - 1) as f64 - ext_x / g) / 2.0;
    let o_w = ((w - 1) as f64 - ext_y / g) / 2.0;
    Ok(ProjectionParams {
        h,
        w,
        g,
        o_h,
        o_w,
        x0,
        y0,
        margin,
    })
}

/// Continuous grid coordinates of a rotated point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl ProjectionParams {
    pub fn project(&self, p: &Vec3) -> GridPoint {
        GridPoint {
            u: (p[0] - self.x0) / self.g + self.o_h,
            v: (p[1] - self.y0) / self.g + self.o_w,
            depth: p[2],
        }
    }

    /// Rotated-frame first coordinate of grid row `u`: `g·(u − o_h) + x0`.
    pub fn psi_h(&self, u: f64) -> f64 {
        self.g * (u - self.o_h) + self.x0
    }

    pub fn psi_w(&self, v: f64) -> f64 {
        self.g * (v - self.o_w) + self.y0
    }
}

pub fn project_to_grid(rotated: &[Vec3], pp: &ProjectionParams) -> Vec<GridPoint> {
    rotated.iter().map(|p| pp.project(p)).collect()
}

/// Every point on the line projects to the same grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpticalLine {
    /// Canonical-frame point on the line with `z' = 0`.
    pub origin: Vec3,
    /// Unit direction along the viewing axis, in the canonical frame.
    pub direction: Vec3,
    /// `(u/h, v/w)`.
    pub grid_pos: [f64; 2],
}

impl OpticalLine {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }

    /// `[O_x, O_y, O_z, d_x, d_y, d_z, u/h, v/w]`
    pub fn query_row(&self) -> [f64; 8] {
        let (o, d, g) = (self.origin, self.direction, self.grid_pos);
        [o[0], o[1], o[2], d[0], d[1], d[2], g[0], g[1]]
    }
}

/// Traces grid cell `(u, v)` back into the canonical frame.
pub fn optical_line(pose: &Pose, pp: &ProjectionParams, u: usize, v: usize) -> Result<OpticalLine> {
    if u >= pp.h || v >= pp.w {
        return Err(Error::contract(format!(
            "cell ({u}, {v}) outside {}x{} grid",
            pp.h, pp.w
        )));
    }
    let a = pose.inverse_matrix();
    let (ph, pw) = (pp.psi_h(u as f64), pp.psi_w(v as f64));
    let origin = [
        a[0][0] * ph + a[0][1] * pw,
        a[1][0] * ph + a[1][1] * pw,
        a[2][0] * ph + a[2][1] * pw,
    ];
    let d = [a[0][2], a[1][2], a[2][2]];
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    Ok(OpticalLine {
        origin,
        direction: [d[0] / norm, d[1] / norm, d[2] / norm],
        grid_pos: [u as f64 / pp.h as f64, v as f64 / pp.w as f64],
    })
}

/// `count` viewpoints evenly spaced in azimuth at a fixed elevation.
pub fn sample_poses(count: usize, elevation_deg: f64) -> Result<Vec<Pose>> {
    if count == 0 {
        return Err(Error::contract("pose count must be at least 1"));
    }
    let step = 360.0 / count as f64;
    Ok((0..count)
        .map(|k| Pose::from_view(k as f64 * step, elevation_deg))
        .collect())
}

/// Uniformly distributed random rotation, drawn as a normalized quaternion
/// by rejection sampling in the unit 4-ball.
pub fn random_pose<R: Rng>(rng: &mut R) -> Pose {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    Pose {
        r: [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ],
    }
}

pub const DEFAULT_VIEWS: usize = 12;
pub const DEFAULT_ELEVATION_DEG: f64 = 30.0;
