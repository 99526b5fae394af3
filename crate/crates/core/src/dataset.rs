//! Synthetic point clouds, the on-disk cloud format, and dataset manifests.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{random_pose, sample_poses, Pose, Vec3, DEFAULT_ELEVATION_DEG, DEFAULT_VIEWS};
use crate::renderer::{default_splat_radius, render, save_image};

pub const DEFAULT_POINTS: usize = 1024;
pub const MIN_POINTS: usize = 16;
pub const GENERATOR_VERSION: &str = "tap-synth-1";

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub id: String,
    pub label: Option<usize>,
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(id: impl Into<String>, points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::data("point cloud needs at least one point"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data("point cloud has non-finite coordinates"));
        }
        Ok(Self {
            id: id.into(),
            label: None,
            points,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
    Pyramid,
    Capsule,
    Ellipsoid,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::Cone,
        ShapeKind::Pyramid,
        ShapeKind::Capsule,
        ShapeKind::Ellipsoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::Cone => "cone",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Capsule => "capsule",
            ShapeKind::Ellipsoid => "ellipsoid",
        }
    }

    /// Class index, the position in [`ShapeKind::ALL`].
    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape kind `{s}`")))
    }
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let p: Vec3 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [p[0] / n, p[1] / n, p[2] / n];
        }
    }
}

fn on_triangle(rng: &mut ChaCha8Rng, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let (mut s, mut t): (f64, f64) = (rng.gen(), rng.gen());
    if s + t > 1.0 {
        s = 1.0 - s;
        t = 1.0 - t;
    }
    [0, 1, 2].map(|i| a[i] + s * (b[i] - a[i]) + t * (c[i] - a[i]))
}

fn disc(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen::<f64>().sqrt();
    let th = rng.gen_range(0.0..std::f64::consts::TAU);
    (r * th.cos(), r * th.sin())
}

/// One surface sample; the vertical axis is `z`.
fn sample_surface(kind: ShapeKind, rng: &mut ChaCha8Rng) -> Vec3 {
    use std::f64::consts::{PI, TAU};
    match kind {
        ShapeKind::Sphere => unit_sphere(rng),
        ShapeKind::Ellipsoid => {
            let p = unit_sphere(rng);
            [p[0], 0.55 * p[1], 0.3 * p[2]]
        }
        ShapeKind::Cube => {
            let face = rng.gen_range(0..6);
            let (a, b) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, a, b],
                1 => [a, s, b],
                _ => [a, b, s],
            }
        }
        ShapeKind::Cylinder => {
            // radius 0.6, height 2: lateral area 2.4π, caps 0.72π
            let (r, half) = (0.6, 1.0);
            if rng.gen::<f64>() < 2.4 / 3.12 {
                let th = rng.gen_range(0.0..TAU);
                [r * th.cos(), r * th.sin(), rng.gen_range(-half..half)]
            } else {
                let (x, y) = disc(rng, r);
                [x, y, if rng.gen() { half } else { -half }]
            }
        }
        ShapeKind::Capsule => {
            // radius 0.4, straight section of height 1.2
            let (r, half) = (0.4, 0.6);
            let side = 2.0 * PI * r * 2.0 * half;
            let caps = 4.0 * PI * r * r;
            if rng.gen::<f64>() < side / (side + caps) {
                let th = rng.gen_range(0.0..TAU);
                [r * th.cos(), r * th.sin(), rng.gen_range(-half..half)]
            } else {
                let p = unit_sphere(rng);
                let shift = if p[2] >= 0.0 { half } else { -half };
                [r * p[0], r * p[1], r * p[2] + shift]
            }
        }
        ShapeKind::Torus => {
            // major radius 1, minor 0.3; rejection on the area element
            let (big, small) = (1.0, 0.3);
            loop {
                let (u, v) = (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU));
                let weight = (big + small * v.cos()) / (big + small);
                if rng.gen::<f64>() <= weight {
                    let ring = big + small * v.cos();
                    return [ring * u.cos(), ring * u.sin(), small * v.sin()];
                }
            }
        }
        ShapeKind::Cone => {
            // base radius 0.8 at z = -0.6, apex at z = 1
            let (r, z0, z1): (f64, f64, f64) = (0.8, -0.6, 1.0);
            let slant = (r * r + (z1 - z0) * (z1 - z0)).sqrt();
            let lateral = PI * r * slant;
            let base = PI * r * r;
            if rng.gen::<f64>() < lateral / (lateral + base) {
                let frac = rng.gen::<f64>().sqrt();
                let th = rng.gen_range(0.0..TAU);
                [frac * r * th.cos(), frac * r * th.sin(), z1 + frac * (z0 - z1)]
            } else {
                let (x, y) = disc(rng, r);
                [x, y, z0]
            }
        }
        ShapeKind::Pyramid => {
            let (h0, h1): (f64, f64) = (-0.6, 1.0);
            let c = [[-0.8, -0.8, h0], [0.8, -0.8, h0], [0.8, 0.8, h0], [-0.8, 0.8, h0]];
            let apex = [0.0, 0.0, h1];
            let side = 0.5 * 1.6 * (0.8f64.powi(2) + (h1 - h0).powi(2)).sqrt();
            let base = 1.6 * 1.6;
            let pick = rng.gen::<f64>() * (base + 4.0 * side);
            if pick < base {
                [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), h0]
            } else {
                let k = (((pick - base) / side) as usize).min(3);
                on_triangle(rng, c[k], c[(k + 1) % 4], apex)
            }
        }
    }
}

/// Sphere samples whose centroid is exactly the origin, so centering leaves
/// every point on the unit sphere: antipodal pairs, plus one great-circle
/// triple when `n` is odd.
fn balanced_sphere(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(n);
    if n % 2 == 1 {
        let (a, b) = (unit_sphere(rng), unit_sphere(rng));
        // orthonormal pair spanning a great circle through `a`
        let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let mut c = [0, 1, 2].map(|i| b[i] - d * a[i]);
        let cn = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        c.iter_mut().for_each(|v| *v /= cn);
        let (s, co) = (3f64.sqrt() / 2.0, -0.5);
        pts.push(a);
        pts.push([0, 1, 2].map(|i| co * a[i] + s * c[i]));
        pts.push([0, 1, 2].map(|i| co * a[i] - s * c[i]));
    }
    while pts.len() < n {
        let p = unit_sphere(rng);
        pts.push(p);
        pts.push([-p[0], -p[1], -p[2]]);
    }
    pts
}

/// Centers on the centroid and scales the farthest point to radius 1. A
/// cloud whose points all coincide is only centered.
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    let n = cloud.points.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &cloud.points {
        for i in 0..3 {
            centroid[i] += p[i] / n;
        }
    }
    let mut points: Vec<Vec3> = cloud.points.iter().map(|p| [0, 1, 2].map(|i| p[i] - centroid[i])).collect();
    let radius = points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if radius > 0.0 {
        points.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v /= radius));
    }
    PointCloud {
        id: cloud.id.clone(),
        label: cloud.label,
        points,
    }
}

fn quantize_f32(points: &mut [Vec3]) {
    points.iter_mut().flatten().for_each(|v| *v = *v as f32 as f64);
}

/// Samples `n_points` on the surface of `kind` and normalizes. The
/// coordinates are rounded to single precision so the cloud survives a
/// save/load cycle bit-for-bit.
pub fn gen_shape(kind: ShapeKind, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points < MIN_POINTS {
        return Err(Error::contract(format!("n_points {n_points} below {MIN_POINTS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = if kind == ShapeKind::Sphere {
        balanced_sphere(n_points, &mut rng)
    } else {
        (0..n_points).map(|_| sample_surface(kind, &mut rng)).collect()
    };
    let mut cloud = normalize_cloud(&PointCloud::new(format!("{kind}"), points)?);
    quantize_f32(&mut cloud.points);
    Ok(cloud.with_label(kind.label()))
}

const CLOUD_MAGIC: &[u8; 4] = b"TAPC";
const CLOUD_VERSION: u16 = 1;
const CLOUD_HEADER: usize = 10;

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(CLOUD_HEADER + cloud.points.len() * 12);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.points.len() as u32).to_le_bytes());
    for v in cloud.points.iter().flatten() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_cloud(bytes: &[u8], id: &str) -> Result<PointCloud> {
    if bytes.len() < 4 || &bytes[..4] != CLOUD_MAGIC {
        return Err(Error::format(0, "missing TAPC magic"));
    }
    if bytes.len() < CLOUD_HEADER {
        return Err(Error::format(bytes.len(), "truncated header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CLOUD_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[CLOUD_HEADER..];
    if payload.len() != n * 12 {
        return Err(Error::format(
            CLOUD_HEADER + payload.len().min(n * 12),
            format!("header declares {n} points but payload has {} bytes", payload.len()),
        ));
    }
    let points = payload
        .chunks_exact(12)
        .map(|c| [0, 1, 2].map(|i| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().expect("4 bytes")) as f64))
        .collect();
    PointCloud::new(id, points).map_err(|e| match e {
        Error::Data(m) => Error::format(CLOUD_HEADER, m),
        other => other,
    })
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, encode_cloud(cloud)).map_err(|e| Error::io(path, e))
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
    decode_cloud(&bytes, id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Stable 90/10 assignment from a hash of the cloud id.
    pub fn for_id(id: &str) -> Split {
        let digest = Sha256::digest(id.as_bytes());
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 10;
        if bucket == 0 {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::data(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub category: ShapeKind,
    pub split: Split,
    /// Relative to the manifest directory.
    pub cloud: PathBuf,
    /// Indexed by pose index.
    pub images: Vec<PathBuf>,
}

impl ManifestEntry {
    pub fn label(&self) -> usize {
        self.category.label()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub generator: String,
    pub views: usize,
    pub elevation_deg: f64,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_COLUMNS: &str = "id\tcategory\tsplit\tcloud\tview\timage";

impl DatasetManifest {
    pub fn poses(&self) -> Result<Vec<Pose>> {
        sample_poses(self.views, self.elevation_deg)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_cloud(&self, entry: &ManifestEntry) -> Result<PointCloud> {
        let mut cloud = load_cloud(&self.root.join(&entry.cloud))?;
        cloud.id = entry.id.clone();
        Ok(cloud.with_label(entry.label()))
    }

    pub fn image_path(&self, entry: &ManifestEntry, view: usize) -> PathBuf {
        self.root.join(&entry.images[view])
    }

    /// Line-oriented UTF-8: a `#` metadata line, the column header, then
    /// one tab-separated record per (cloud, view).
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# tap-manifest v1 seed={} generator={} views={} elevation={} height={} width={}\n{MANIFEST_COLUMNS}\n",
            self.seed, self.generator, self.views, self.elevation_deg, self.height, self.width
        );
        for e in &self.entries {
            for (view, img) in e.images.iter().enumerate() {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    e.id,
                    e.category,
                    e.split.name(),
                    e.cloud.display(),
                    view,
                    img.display()
                ));
            }
        }
        out
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: String| Error::data(format!("manifest line {}: {msg}", line + 1));
        let (_, meta) = lines.next().ok_or_else(|| Error::data("empty manifest"))?;
        let meta = meta
            .strip_prefix("# tap-manifest v1")
            .ok_or_else(|| bad(0, "missing `# tap-manifest v1` header".into()))?;
        let field = |key: &str| -> Result<String> {
            meta.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| bad(0, format!("missing `{key}`")))
        };
        let num = |s: String, key: &str| -> Result<f64> { s.parse().map_err(|_| bad(0, format!("bad `{key}`"))) };
        let seed = field("seed")?.parse().map_err(|_| bad(0, "bad seed".into()))?;
        let generator = field("generator")?;
        let views = num(field("views")?, "views")? as usize;
        let elevation_deg = num(field("elevation")?, "elevation")?;
        let height = num(field("height")?, "height")? as usize;
        let width = num(field("width")?, "width")? as usize;
        match lines.next() {
            Some((_, cols)) if cols == MANIFEST_COLUMNS => {}
            _ => return Err(bad(1, "missing column header".into())),
        }

        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(ln, format!("expected 6 fields, found {}", f.len())));
            }
            let view: usize = f[4].parse().map_err(|_| bad(ln, "bad view index".into()))?;
            let category: ShapeKind = f[1].parse()?;
            let split: Split = f[2].parse()?;
            match entries.last_mut() {
                Some(e) if e.id == f[0] => {
                    if view != e.images.len() {
                        return Err(bad(ln, format!("view {view} out of order for `{}`", e.id)));
                    }
                    e.images.push(PathBuf::from(f[5]));
                }
                _ => {
                    if view != 0 {
                        return Err(bad(ln, format!("first view of `{}` is {view}", f[0])));
                    }
                    entries.push(ManifestEntry {
                        id: f[0].to_string(),
                        category,
                        split,
                        cloud: PathBuf::from(f[3]),
                        images: vec![PathBuf::from(f[5])],
                    });
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            seed,
            generator,
            views,
            elevation_deg,
            height,
            width,
            entries,
        })
    }

    /// Reads `manifest.tsv` from `dir` and checks that every referenced file
    /// exists and every entry has exactly `views` images.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m = Self::parse(&text, dir)?;
        let mut seen = BTreeSet::new();
        for e in &m.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::data(format!("duplicate cloud id `{}`", e.id)));
            }
            if e.images.len() != m.views {
                return Err(Error::data(format!(
                    "`{}` has {} views, manifest declares {}",
                    e.id,
                    e.images.len(),
                    m.views
                )));
            }
            for p in std::iter::once(&e.cloud).chain(&e.images) {
                if !dir.join(p).exists() {
                    return Err(Error::data(format!("missing file {}", p.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

/// Per-instance variation applied on top of the canonical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Augment {
    /// Each axis is scaled by a factor drawn from `[1 − s, 1 + s]`.
    pub scale_jitter: f64,
    /// Apply a uniformly random rotation to each instance.
    pub random_rotation: bool,
    /// Standard deviation of per-point Gaussian-ish noise, as a fraction of
    /// the unit radius.
    pub noise: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            scale_jitter: 0.2,
            random_rotation: false,
            noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub shapes: Vec<(ShapeKind, usize)>,
    pub n_points: usize,
    pub views: usize,
    pub elevation_deg: f64,
    pub height: usize,
    pub width: usize,
    pub splat_radius: Option<usize>,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            shapes: ShapeKind::ALL.iter().map(|&k| (k, 1)).collect(),
            n_points: DEFAULT_POINTS,
            views: DEFAULT_VIEWS,
            elevation_deg: DEFAULT_ELEVATION_DEG,
            height: 32,
            width: 32,
            splat_radius: None,
            augment: Augment::default(),
            seed: 0,
        }
    }
}

fn instance_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Generates one instance: canonical shape, then the configured
/// augmentation, then renormalization.
pub fn gen_instance(kind: ShapeKind, index: usize, cfg: &DatasetConfig) -> Result<PointCloud> {
    let id = format!("{kind}_{index:04}");
    let seed = instance_seed(cfg.seed, &id);
    let base = gen_shape(kind, cfg.n_points, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let a = &cfg.augment;
    let scale: Vec3 = [0; 3].map(|_| 1.0 + a.scale_jitter * rng.gen_range(-1.0..=1.0));
    let pose = if a.random_rotation { random_pose(&mut rng) } else { Pose::identity() };
    let points = base
        .points
        .iter()
        .map(|p| {
            let mut q = [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]];
            if a.noise > 0.0 {
                for v in q.iter_mut() {
                    // sum of uniforms: cheap, bounded, roughly normal
                    let n: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * 0.866;
                    *v += a.noise * n;
                }
            }
            pose.apply(&q)
        })
        .collect();
    let mut cloud = normalize_cloud(&PointCloud::new(id, points)?);
    quantize_f32(&mut cloud.points);
    Ok(cloud.with_label(kind.label()))
}

/// Generates every configured instance, renders `views` images per cloud,
/// and writes clouds, images, and the manifest under `out_dir`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.views == 0 {
        return Err(Error::config("views must be at least 1"));
    }
    for sub in ["clouds", "images"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let poses = sample_poses(cfg.views, cfg.elevation_deg)?;
    let radius = cfg
        .splat_radius
        .unwrap_or_else(|| default_splat_radius(cfg.height, cfg.width));

    let mut entries = Vec::new();
    for &(kind, count) in &cfg.shapes {
        for index in 0..count {
            let cloud = gen_instance(kind, index, cfg)?;
            let cloud_rel = PathBuf::from("clouds").join(format!("{}.tapc", cloud.id));
            save_cloud(&cloud, &out_dir.join(&cloud_rel))?;
            let mut images = Vec::with_capacity(poses.len());
            for (v, pose) in poses.iter().enumerate() {
                let img = render(&cloud.points, pose, cfg.height, cfg.width, radius)?;
                let rel = PathBuf::from("images").join(format!("{}_v{v:02}.ppm", cloud.id));
                save_image(&img, &out_dir.join(&rel))?;
                images.push(rel);
            }
            entries.push(ManifestEntry {
                split: Split::for_id(&cloud.id),
                id: cloud.id,
                category: kind,
                cloud: cloud_rel,
                images,
            });
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        seed: cfg.seed,
        generator: GENERATOR_VERSION.to_string(),
        views: cfg.views,
        elevation_deg: cfg.elevation_deg,
        height: cfg.height,
        width: cfg.width,
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::load_image;

    fn norm(p: &Vec3) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }

    #[test]
    fn sphere_points_are_unit() {
        let c = gen_shape(ShapeKind::Sphere, DEFAULT_POINTS, 3).unwrap();
        assert_eq!(c.len(), 1024);
        assert!(c.points.iter().all(|p| (norm(p) - 1.0).abs() < 1e-6));
    }

    #[test]
    fn every_kind_is_normalized_and_deterministic() {
        for kind in ShapeKind::ALL {
            let a = gen_shape(kind, 200, 42).unwrap();
            let b = gen_shape(kind, 200, 42).unwrap();
            assert_eq!(a, b);
            let radius = a.points.iter().map(norm).fold(0.0, f64::max);
            assert!((radius - 1.0).abs() < 1e-6, "{kind}: {radius}");
            for i in 0..3 {
                let mean: f64 = a.points.iter().map(|p| p[i]).sum::<f64>() / 200.0;
                assert!(mean.abs() < 1e-6, "{kind}");
            }
            assert_eq!(a.label, Some(kind.label()));
        }
        assert!(gen_shape(ShapeKind::Cube, 15, 0).is_err());
        assert!(matches!("blob".parse::<ShapeKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn normalization_cases() {
        let c = gen_shape(ShapeKind::Torus, 64, 1).unwrap();
        let again = normalize_cloud(&c);
        for (a, b) in c.points.iter().zip(&again.points) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-6);
            }
        }
        let twice = normalize_cloud(&again);
        for (a, b) in again.points.iter().zip(&twice.points) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }

        let moved = PointCloud::new("m", c.points.iter().map(|p| p.map(|v| 5.0 * v + 2.0)).collect()).unwrap();
        let n = normalize_cloud(&moved);
        for (a, b) in n.points.iter().zip(&again.points) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-6);
            }
        }

        let single = normalize_cloud(&PointCloud::new("s", vec![[3.0, 3.0, 3.0]]).unwrap());
        assert_eq!(single.points, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn cloud_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_shape(ShapeKind::Capsule, 100, 5).unwrap();
        let path = dir.path().join("c.tapc");
        save_cloud(&c, &path).unwrap();
        let back = load_cloud(&path).unwrap();
        assert_eq!(back.points, c.points);

        let bytes = encode_cloud(&c);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cloud(&bad, "x"), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[6..10].copy_from_slice(&101u32.to_le_bytes());
        assert!(matches!(decode_cloud(&bad, "x"), Err(Error::Format { .. })));
        assert!(matches!(decode_cloud(&bytes[..bytes.len() - 1], "x"), Err(Error::Format { .. })));
        assert!(matches!(decode_cloud(&bytes[..7], "x"), Err(Error::Format { offset: 7, .. })));
    }

    fn small_config(seed: u64) -> DatasetConfig {
        DatasetConfig {
            n_points: 128,
            height: 16,
            width: 16,
            seed,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn build_counts_and_reproducibility() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = build_dataset(&small_config(7), d1.path()).unwrap();
        let m2 = build_dataset(&small_config(7), d2.path()).unwrap();
        assert_eq!(m1.entries.len(), 8);
        let images: usize = m1.entries.iter().map(|e| e.images.len()).sum();
        assert_eq!(images, 96);
        assert_eq!(m1.to_text().lines().count(), 2 + 96);
        assert_eq!(m1.to_text(), m2.to_text());
        for e in &m1.entries {
            for p in std::iter::once(&e.cloud).chain(&e.images) {
                assert_eq!(fs::read(d1.path().join(p)).unwrap(), fs::read(d2.path().join(p)).unwrap());
            }
        }
        let loaded = DatasetManifest::load(d1.path()).unwrap();
        assert_eq!(loaded, m1);
        for e in &loaded.entries {
            for v in 0..loaded.views {
                let img = load_image(&loaded.image_path(e, v)).unwrap();
                assert_eq!((img.height, img.width), (16, 16));
            }
        }
    }

    #[test]
    fn split_is_stable_and_disjoint() {
        let ids: Vec<String> = (0..500).map(|i| format!("cube_{i:04}")).collect();
        let a: Vec<Split> = ids.iter().map(|id| Split::for_id(id)).collect();
        let b: Vec<Split> = ids.iter().map(|id| Split::for_id(id)).collect();
        assert_eq!(a, b);
        let test = a.iter().filter(|&&s| s == Split::Test).count();
        // 10% nominal; binomial(500, 0.1) lies well within these bounds
        assert!((25..=75).contains(&test), "{test}");
    }

    #[test]
    fn manifest_rejects_gaps_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small_config(1), dir.path()).unwrap();
        let text = m.to_text();
        let gap: String = text.lines().filter(|l| !l.contains("\t1\timages")).map(|l| format!("{l}\n")).collect();
        assert!(DatasetManifest::parse(&gap, dir.path()).is_err());

        fs::remove_file(dir.path().join(&m.entries[0].images[3])).unwrap();
        assert!(matches!(DatasetManifest::load(dir.path()), Err(Error::Data(_))));
    }
}
