//! Ground-truth view images: z-buffered point splats under parallel
//! projection, shaded by normalized depth, plus binary PPM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{fit_projection, project_to_grid, rotate_points, Pose, Vec3, DEFAULT_MARGIN};

/// Foreground threshold: a pixel is background iff every channel is at
/// least `1 − 1/255`.
pub const WHITE_THRESHOLD: f64 = 1.0 - 1.0 / 255.0;
const SHADE_NEAR: f64 = 0.15;
const SHADE_RANGE: f64 = 0.7;

/// `H × W × 3` image with values in `[0, 1]`, row-major from the top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub fg_mask: Vec<bool>,
}

impl ViewImage {
    pub fn white(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![1.0; height * width * 3],
            fg_mask: vec![false; height * width],
        }
    }

    /// Builds an image from raw pixels, deriving the mask from the
    /// threshold rule.
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Dimension {
                op: "view_image",
                lhs: vec![height, width, 3],
                rhs: vec![pixels.len()],
            });
        }
        let fg_mask = pixels
            .chunks_exact(3)
            .map(|px| px.iter().any(|&c| c < WHITE_THRESHOLD))
            .collect();
        Ok(Self {
            height,
            width,
            pixels,
            fg_mask,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn foreground_count(&self) -> usize {
        self.fg_mask.iter().filter(|&&m| m).count()
    }
}

/// Splat radius for a target resolution: 2 pixels at 224, scaled
/// proportionally, never below 1.
pub fn default_splat_radius(height: usize, width: usize) -> usize {
    ((2.0 * height.min(width) as f64 / 224.0).round() as usize).max(1)
}

/// Renders `points` (canonical frame) as seen from `pose`.
pub fn render(points: &[Vec3], pose: &Pose, height: usize, width: usize, splat_radius: usize) -> Result<ViewImage> {
    if points.is_empty() {
        return Err(Error::data("cannot render an empty cloud"));
    }
    if height < 8 || width < 8 {
        return Err(Error::contract(format!("image {height}x{width} below 8x8")));
    }
    let rotated = rotate_points(points, pose);
    let pp = fit_projection(&rotated, height, width, DEFAULT_MARGIN)?;
    let grid = project_to_grid(&rotated, &pp);
    let (zmin, zmax) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), g| (lo.min(g.depth), hi.max(g.depth)));
    let zrange = zmax - zmin;

    let mut zbuf = vec![f64::INFINITY; height * width];
    let mut img = ViewImage::white(height, width);
    let r = splat_radius as i64;
    for gp in &grid {
        let (cu, cv) = (gp.u.round() as i64, gp.v.round() as i64);
        let t = if zrange > 0.0 { (gp.depth - zmin) / zrange } else { 0.0 };
        let shade = SHADE_NEAR + SHADE_RANGE * t;
        for du in -r..=r {
            for dv in -r..=r {
                if du * du + dv * dv > r * r {
                    continue;
                }
                let (pu, pv) = (cu + du, cv + dv);
                if pu < 0 || pv < 0 || pu >= height as i64 || pv >= width as i64 {
                    continue;
                }
                let idx = pu as usize * width + pv as usize;
                if gp.depth < zbuf[idx] {
                    zbuf[idx] = gp.depth;
                    img.pixels[idx * 3..idx * 3 + 3].fill(shade);
                    img.fg_mask[idx] = true;
                }
            }
        }
    }
    Ok(img)
}

/// Writes a binary PPM (`P6`, maxval 255).
pub fn save_image(img: &ViewImage, path: &Path) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<ViewImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

/// Parses a binary PPM. Comments (`#` to end of line) are allowed in the
/// header.
pub fn decode_ppm(bytes: &[u8]) -> Result<ViewImage> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "truncated PPM header"));
        }
        tokens.push((start, &bytes[start..pos]));
    }
    if tokens[0].1 != b"P6" {
        return Err(Error::format(0, "missing P6 magic"));
    }
    let num = |(off, tok): (usize, &[u8])| -> Result<usize> {
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(off, "expected a decimal number"))
    };
    let width = num(tokens[1])?;
    let height = num(tokens[2])?;
    let maxval = num(tokens[3])?;
    if maxval != 255 {
        return Err(Error::format(tokens[3].0, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(tokens[1].0, "zero image extent"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let expected = width * height * 3;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != expected {
        return Err(Error::format(
            pos + payload.len().min(expected),
            format!("payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let pixels = payload.iter().map(|&b| b as f64 / 255.0).collect();
    ViewImage::from_pixels(height, width, pixels)
}
