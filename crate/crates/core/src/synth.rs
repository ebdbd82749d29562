//! Seeded synthetic copy-move forgeries in two visually distinct domains.
//!
//! Domain A is smooth (a gradient under many soft-edged shapes and
//! low-frequency blobs); domain B is a patchwork of high-frequency gratings
//! with noise. A forgery copies a source region,
//! optionally rotated and scaled, to a disjoint destination; the mask marks
//! both copies.
//!
//! On disk a dataset is a directory holding `manifest.txt`, `images/*.png`
//! (RGB, 8 bit), `masks/*.png` (grey, values 0 or 255) and `specs/*.json`.
//! Each manifest line is `image_path mask_path domain seed`, with paths
//! relative to the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{GroundTruthMask, ImageTensor};

/// Placement attempts before generation gives up.
pub const MAX_ATTEMPTS: usize = 100;
/// Default grid for drawn copy offsets, the stride of the finest correlation level.
pub const DEFAULT_OFFSET_GRID: usize = 8;
const A_NOISE_STD: f64 = 0.012;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            _ => Err(Error::Config(format!("unknown domain `{s}` (expected A or B)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionShape {
    Ellipse,
    Rectangle,
    Polygon,
}

/// Everything needed to regenerate one sample. Placement fields left as
/// `None` are drawn from `seed` by rejection sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgerySpec {
    pub height: usize,
    pub width: usize,
    pub domain: Domain,
    pub seed: u64,
    /// `false` yields a pristine image with an empty mask.
    pub forged: bool,
    pub shape: RegionShape,
    /// Source area as a fraction of the image, in `[0.02, 0.25]`.
    pub size_fraction: f64,
    pub rotation_deg: f64,
    pub scale: f64,
    /// Source region centre `(row, col)`.
    pub source_center: Option<(f64, f64)>,
    /// Destination centre minus source centre `(rows, cols)`.
    pub offset: Option<(i32, i32)>,
    /// Drawn offsets are multiples of this many pixels (1 = any offset).
    pub offset_grid: usize,
    /// Standard deviation of additive Gaussian noise (0 disables).
    pub noise_std: f64,
}

impl ForgerySpec {
    /// Draw shape, size and transform from `seed`.
    pub fn random(height: usize, width: usize, domain: Domain, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f0e9);
        let shape = match rng.gen_range(0..3) {
            0 => RegionShape::Ellipse,
            1 => RegionShape::Rectangle,
            _ => RegionShape::Polygon,
        };
        let (rotation_deg, scale) = if rng.gen_bool(0.5) {
            (0.0, 1.0)
        } else {
            (rng.gen_range(-45.0..=45.0), rng.gen_range(0.7..=1.3))
        };
        ForgerySpec {
            height,
            width,
            domain,
            seed,
            forged: true,
            shape,
            size_fraction: rng.gen_range(0.08..=0.2),
            rotation_deg,
            scale,
            source_center: None,
            offset: None,
            offset_grid: DEFAULT_OFFSET_GRID,
            noise_std: 0.0,
        }
    }

    /// Untransformed copy (rotation 0, scale 1).
    pub fn plain_copy(height: usize, width: usize, domain: Domain, seed: u64) -> Self {
        ForgerySpec {
            rotation_deg: 0.0,
            scale: 1.0,
            ..Self::random(height, width, domain, seed)
        }
    }

    pub fn pristine(height: usize, width: usize, domain: Domain, seed: u64) -> Self {
        ForgerySpec {
            forged: false,
            ..Self::random(height, width, domain, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return bad(format!("size {}×{} must be a multiple of 32", self.height, self.width));
        }
        if !(0.02..=0.25).contains(&self.size_fraction) {
            return bad(format!("size fraction {} outside [0.02, 0.25]", self.size_fraction));
        }
        if !(-45.0..=45.0).contains(&self.rotation_deg) {
            return bad(format!("rotation {} outside [-45, 45]", self.rotation_deg));
        }
        if !(0.7..=1.3).contains(&self.scale) {
            return bad(format!("scale {} outside [0.7, 1.3]", self.scale));
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise std must be ≥ 0".into());
        }
        if self.offset_grid == 0 {
            return bad("offset grid must be ≥ 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub mask: GroundTruthMask,
    pub spec: ForgerySpec,
}

/// Number of dihedral variants of a square image.
pub const DIHEDRAL_VARIANTS: usize = 8;

/// Apply the dihedral element `k` (bit 0 flips rows, bit 1 flips columns,
/// bit 2 transposes first) to an `h × w × c` tensor.
pub fn dihedral(t: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = t.dims3()?;
    let k = k % DIHEDRAL_VARIANTS;
    let transpose = k & 4 != 0;
    if transpose && h != w {
        return Err(Error::Config(format!("transposing a non-square {h}×{w} tensor")));
    }
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for y in 0..h {
        for x in 0..w {
            let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
            if k & 1 != 0 {
                sy = h - 1 - sy;
            }
            if k & 2 != 0 {
                sx = w - 1 - sx;
            }
            out.extend_from_slice(&d[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

impl Sample {
    /// Image and mask under the dihedral element `k`; the `ForgerySpec` is kept as drawn.
    pub fn dihedral(&self, k: usize) -> Result<Sample> {
        Ok(Sample {
            image: ImageTensor::new(dihedral(self.image.tensor(), k)?)?,
            mask: GroundTruthMask::new(dihedral(self.mask.tensor(), k)?)?,
            spec: self.spec.clone(),
        })
    }
}

/// Pixel sets of a realized forgery (row-major flags).
#[derive(Clone, Debug)]
pub struct Placement {
    pub source: Vec<bool>,
    pub destination: Vec<bool>,
    pub source_center: (f64, f64),
    pub offset: (i32, i32),
}

/// Base image in `[0,1]`, `h·w·3` values, quantized to 8 bits.
pub fn base_image(h: usize, w: usize, domain: Domain, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut img = vec![0.0f64; h * w * 3];
    match domain {
        Domain::A => {
            let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
            let gy: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
            let gx: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (y as f64 / h as f64 - 0.5, x as f64 / w as f64 - 0.5);
                    for c in 0..3 {
                        img[(y * w + x) * 3 + c] = c0[c] + gy[c] * fy + gx[c] * fx;
                    }
                }
            }
            // dense soft-edged shapes so that every region has its own layout
            let side = h.min(w) as f64;
            for _ in 0..rng.gen_range(24..40) {
                let cy = rng.gen_range(0.0..h as f64);
                let cx = rng.gen_range(0.0..w as f64);
                let r = rng.gen_range(0.04..0.16) * side;
                let aspect: f64 = rng.gen_range(0.5..2.0);
                let col: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
                let opacity = rng.gen_range(0.6..0.95);
                let edge = rng.gen_range(1.5..3.0);
                let rect = rng.gen_bool(0.5);
                let (y0, y1) = ((cy - 2.0 * r).max(0.0) as usize, ((cy + 2.0 * r) as usize + 1).min(h));
                let (x0, x1) = ((cx - 2.0 * r).max(0.0) as usize, ((cx + 2.0 * r) as usize + 1).min(w));
                for y in y0..y1 {
                    for x in x0..x1 {
                        let (dy, dx) = ((y as f64 - cy) / r * aspect.sqrt(), (x as f64 - cx) / r / aspect.sqrt());
                        let d = if rect { dy.abs().max(dx.abs()) } else { (dy * dy + dx * dx).sqrt() };
                        let a = ((1.0 - d) * r / edge).clamp(0.0, 1.0) * opacity;
                        for c in 0..3 {
                            let v = &mut img[(y * w + x) * 3 + c];
                            *v = *v * (1.0 - a) + col[c] * a;
                        }
                    }
                }
            }
            // low-frequency blobs
            let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
                .map(|_| {
                    (
                        rng.gen_range(0.5..2.5),
                        rng.gen_range(0.5..2.5),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        std::array::from_fn(|_| rng.gen_range(-0.06..0.06)),
                    )
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
                    for (ky, kx, ph, amp) in &waves {
                        let s = (std::f64::consts::TAU * (ky * fy + kx * fx) + ph).sin();
                        for c in 0..3 {
                            img[(y * w + x) * 3 + c] += amp[c] * s;
                        }
                    }
                }
            }
            // faint sensor noise
            let noise = Normal::new(0.0, A_NOISE_STD).expect("valid std");
            img.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        Domain::B => {
            // Voronoi patchwork; each cell carries its own fine grating
            struct Cell {
                y: f64,
                x: f64,
                base: [f64; 3],
                amp: [f64; 3],
                k: (f64, f64),
                phase: f64,
            }
            let cells: Vec<Cell> = (0..rng.gen_range(12..24))
                .map(|_| {
                    let f = rng.gen_range(0.15..0.45);
                    let th = rng.gen_range(0.0..std::f64::consts::PI);
                    Cell {
                        y: rng.gen_range(0.0..h as f64),
                        x: rng.gen_range(0.0..w as f64),
                        base: std::array::from_fn(|_| rng.gen_range(0.2..0.8)),
                        amp: std::array::from_fn(|_| rng.gen_range(0.08..0.2)),
                        k: (f * th.cos(), f * th.sin()),
                        phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    }
                })
                .collect();
            let noise = Normal::new(0.0, 0.05).expect("valid std");
            for y in 0..h {
                for x in 0..w {
                    let (yf, xf) = (y as f64, x as f64);
                    let cell = cells
                        .iter()
                        .min_by(|a, b| {
                            let da = (a.y - yf).powi(2) + (a.x - xf).powi(2);
                            let db = (b.y - yf).powi(2) + (b.x - xf).powi(2);
                            da.total_cmp(&db)
                        })
                        .expect("at least one cell");
                    let s = (std::f64::consts::TAU * (cell.k.0 * yf + cell.k.1 * xf) + cell.phase).sin();
                    for c in 0..3 {
                        img[(y * w + x) * 3 + c] = cell.base[c] + cell.amp[c] * s + noise.sample(rng);
                    }
                }
            }
        }
    }
    img.into_iter().map(quantize).collect()
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Source region of area `fraction·h·w` centred at `(cy, cx)`.
fn region(h: usize, w: usize, spec: &ForgerySpec, center: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<bool> {
    let area = spec.size_fraction * (h * w) as f64;
    let aspect: f64 = rng.gen_range(0.6..1.6);
    let (cy, cx) = center;
    let mut out = vec![false; h * w];
    match spec.shape {
        RegionShape::Ellipse => {
            let ry = (area / (std::f64::consts::PI * aspect)).sqrt();
            let rx = ry * aspect;
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                    out[y * w + x] = dy * dy + dx * dx <= 1.0;
                }
            }
        }
        RegionShape::Rectangle => {
            let hy = (area / aspect).sqrt() / 2.0;
            let hx = hy * aspect;
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = (y as f64 - cy).abs() <= hy && (x as f64 - cx).abs() <= hx;
                }
            }
        }
        RegionShape::Polygon => {
            let n = rng.gen_range(5..9);
            let mut pts: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let th = std::f64::consts::TAU * (i as f64 + rng.gen_range(-0.3..0.3)) / n as f64;
                    let r = rng.gen_range(0.6..1.0);
                    (r * th.sin(), r * th.cos() * aspect)
                })
                .collect();
            let unit_area = shoelace(&pts);
            let k = (area / unit_area).sqrt();
            pts.iter_mut().for_each(|p| *p = (cy + p.0 * k, cx + p.1 * k));
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = point_in_polygon(y as f64, x as f64, &pts);
                }
            }
        }
    }
    out
}

fn shoelace(p: &[(f64, f64)]) -> f64 {
    let n = p.len();
    (0..n)
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

fn point_in_polygon(y: f64, x: f64, p: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = p.len();
    for i in 0..n {
        let (a, b) = (p[i], p[(i + n - 1) % n]);
        if (a.0 > y) != (b.0 > y) && x < (b.1 - a.1) * (y - a.0) / (b.0 - a.0) + a.1 {
            inside = !inside;
        }
    }
    inside
}

/// Inverse of the destination map: `p = c_src + (R·s)⁻¹ (q − c_dst)`.
fn inverse_map(spec: &ForgerySpec, c_src: (f64, f64), c_dst: (f64, f64), q: (f64, f64)) -> (f64, f64) {
    if spec.rotation_deg == 0.0 && spec.scale == 1.0 {
        // integer offsets: keep the copy exact
        return (q.0 - (c_dst.0 - c_src.0).round(), q.1 - (c_dst.1 - c_src.1).round());
    }
    let th = spec.rotation_deg.to_radians();
    let (s, c) = th.sin_cos();
    let (dy, dx) = ((q.0 - c_dst.0) / spec.scale, (q.1 - c_dst.1) / spec.scale);
    (c_src.0 + c * dy + s * dx, c_src.1 - s * dy + c * dx)
}

fn bilinear(img: &[f32], h: usize, w: usize, p: (f64, f64), ch: usize) -> f64 {
    let y0 = p.0.floor().clamp(0.0, (h - 1) as f64);
    let x0 = p.1.floor().clamp(0.0, (w - 1) as f64);
    let (fy, fx) = ((p.0 - y0).clamp(0.0, 1.0), (p.1 - x0).clamp(0.0, 1.0));
    let (y0, x0) = (y0 as usize, x0 as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let at = |y: usize, x: usize| img[(y * w + x) * 3 + ch] as f64;
    if fy == 0.0 && fx == 0.0 {
        return at(y0, x0);
    }
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

fn try_place(
    spec: &ForgerySpec,
    rng: &mut ChaCha8Rng,
) -> Option<Placement> {
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let c_src = spec
        .source_center
        .unwrap_or_else(|| (rng.gen_range(0.15 * hf..0.85 * hf), rng.gen_range(0.15 * wf..0.85 * wf)));
    let offset = spec.offset.unwrap_or_else(|| {
        let g = spec.offset_grid as i32;
        let (my, mx) = (h as i32 * 3 / 4 / g, w as i32 * 3 / 4 / g);
        (rng.gen_range(-my..=my) * g, rng.gen_range(-mx..=mx) * g)
    });
    let source = region(h, w, spec, c_src, rng);
    let c_dst = (c_src.0 + offset.0 as f64, c_src.1 + offset.1 as f64);
    let idx = |y: isize, x: isize| -> Option<usize> {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
    };
    // source must not touch the border so the whole region is visible
    for y in 0..h {
        for x in 0..w {
            if source[y * w + x] && (y == 0 || x == 0 || y == h - 1 || x == w - 1) {
                return None;
            }
        }
    }
    let src_count = source.iter().filter(|&&b| b).count();
    if src_count == 0 {
        return None;
    }
    let mut destination = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = inverse_map(spec, c_src, c_dst, (y as f64, x as f64));
            if let Some(i) = idx(p.0.round() as isize, p.1.round() as isize) {
                destination[y * w + x] = source[i];
            }
        }
    }
    // every source pixel must land inside the image
    let th = spec.rotation_deg.to_radians();
    let (s, c) = th.sin_cos();
    for y in 0..h {
        for x in 0..w {
            if source[y * w + x] {
                let (dy, dx) = (y as f64 - c_src.0, x as f64 - c_src.1);
                let qy = c_dst.0 + spec.scale * (c * dy - s * dx);
                let qx = c_dst.1 + spec.scale * (s * dy + c * dx);
                if qy < 0.0 || qx < 0.0 || qy > hf - 1.0 || qx > wf - 1.0 {
                    return None;
                }
            }
        }
    }
    if destination.iter().zip(&source).any(|(&d, &s)| d && s) {
        return None;
    }
    if !destination.iter().any(|&d| d) {
        return None;
    }
    Some(Placement {
        source,
        destination,
        source_center: c_src,
        offset,
    })
}

/// Realize a forgery and report its pixel sets.
pub fn generate_with_placement(spec: &ForgerySpec) -> Result<(Sample, Option<Placement>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut img = base_image(h, w, spec.domain, &mut rng);
    let mut placement = None;
    if spec.forged {
        let pl = (0..MAX_ATTEMPTS)
            .find_map(|_| try_place(spec, &mut rng))
            .ok_or_else(|| {
                Error::Generation(format!(
                    "no disjoint placement found for seed {} after {MAX_ATTEMPTS} attempts",
                    spec.seed
                ))
            })?;
        let c_dst = (
            pl.source_center.0 + pl.offset.0 as f64,
            pl.source_center.1 + pl.offset.1 as f64,
        );
        let src_img = img.clone();
        for y in 0..h {
            for x in 0..w {
                if pl.destination[y * w + x] {
                    let p = inverse_map(spec, pl.source_center, c_dst, (y as f64, x as f64));
                    for ch in 0..3 {
                        img[(y * w + x) * 3 + ch] = quantize(bilinear(&src_img, h, w, p, ch));
                    }
                }
            }
        }
        placement = Some(pl);
    }
    if spec.noise_std > 0.0 {
        let n = Normal::new(0.0, spec.noise_std).expect("valid std");
        img.iter_mut()
            .for_each(|v| *v = quantize(*v as f64 + n.sample(&mut rng)));
    }
    let forged: Vec<bool> = match &placement {
        Some(pl) => pl.source.iter().zip(&pl.destination).map(|(&a, &b)| a || b).collect(),
        None => vec![false; h * w],
    };
    let sample = Sample {
        image: ImageTensor::new(Tensor::new(&[h, w, 3], img)?)?,
        mask: GroundTruthMask::from_forged(h, w, &forged)?,
        spec: spec.clone(),
    };
    Ok((sample, placement))
}

pub fn generate_sample(spec: &ForgerySpec) -> Result<Sample> {
    generate_with_placement(spec).map(|(s, _)| s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    pub n: usize,
    pub domain: Domain,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Every `k`-th sample (index `k−1`, `2k−1`, ...) is pristine; 0 disables.
    pub pristine_every: usize,
    pub noise_std: f64,
    pub offset_grid: usize,
}

impl DatasetOptions {
    pub fn new(n: usize, domain: Domain, seed: u64, size: usize) -> Self {
        DatasetOptions {
            n,
            domain,
            seed,
            height: size,
            width: size,
            pristine_every: 0,
            noise_std: 0.0,
            offset_grid: DEFAULT_OFFSET_GRID,
        }
    }

    /// Sub-seed of sample `i` (splitmix64 of seed and index).
    pub fn sample_seed(&self, i: usize) -> u64 {
        let mut z = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(i as u64 + 1)
            .wrapping_add(match self.domain {
                Domain::A => 0,
                Domain::B => 0xB0B0_B0B0,
            });
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn spec(&self, i: usize) -> ForgerySpec {
        self.spec_with_seed(i, self.sample_seed(i))
    }

    fn spec_with_seed(&self, i: usize, s: u64) -> ForgerySpec {
        let mut spec = if self.pristine_every > 0 && (i + 1) % self.pristine_every == 0 {
            ForgerySpec::pristine(self.height, self.width, self.domain, s)
        } else {
            ForgerySpec::random(self.height, self.width, self.domain, s)
        };
        spec.noise_std = self.noise_std;
        spec.offset_grid = self.offset_grid;
        spec
    }
}

/// Generate samples in memory. A spec whose placement fails is redrawn
/// from a fresh sub-seed so the set always has `n` members.
pub fn generate_samples(opts: &DatasetOptions) -> Result<Vec<Sample>> {
    (0..opts.n)
        .map(|i| {
            let mut spec = opts.spec(i);
            let mut last = None;
            for retry in 0..8u64 {
                match generate_sample(&spec) {
                    Ok(s) => return Ok(s),
                    Err(e @ Error::Generation(_)) => {
                        last = Some(e);
                        spec = opts.spec_with_seed(i, spec.seed.wrapping_add(0x1000_0000_0000 * (retry + 1)));
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub domain: Domain,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {} {}\n", e.image.display(), e.mask.display(), e.domain, e.seed))
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Dataset {
                sample: format!("{}:{}", path.display(), n + 1),
                msg: "expected `image mask domain seed`".into(),
            };
            if f.len() != 4 {
                return Err(bad());
            }
            entries.push(ManifestEntry {
                image: f[0].into(),
                mask: f[1].into(),
                domain: f[2].parse()?,
                seed: f[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(Manifest {
            path: path.to_path_buf(),
            entries,
        })
    }

    fn dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }
}

pub fn save_image_png(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = img.dims3()?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn save_mask_png(forged: &[bool], h: usize, w: usize, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = forged.iter().map(|&f| if f { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// RGB image scaled to `[0,1]` as `h × w × 3`.
pub fn load_image_png(path: &Path) -> Result<Tensor<f32>> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Binary mask; any value other than 0 or 255 is rejected.
pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut forged = Vec::with_capacity((w * h) as usize);
    for (i, &v) in img.as_raw().iter().enumerate() {
        match v {
            0 => forged.push(false),
            255 => forged.push(true),
            _ => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    msg: format!("mask value {v} at pixel {i} is neither 0 nor 255"),
                })
            }
        }
    }
    Ok((h as usize, w as usize, forged))
}

/// Write a dataset to `out_dir`; returns its manifest.
pub fn generate_dataset(opts: &DatasetOptions, out_dir: &Path) -> Result<Manifest> {
    let samples = generate_samples(opts)?;
    write_dataset(&samples, out_dir)
}

pub fn write_dataset(samples: &[Sample], out_dir: &Path) -> Result<Manifest> {
    for sub in ["images", "masks", "specs"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:05}.png"));
        let mask = PathBuf::from(format!("masks/{i:05}.png"));
        save_image_png(s.image.tensor(), &out_dir.join(&image))?;
        save_mask_png(&s.mask.forged(), s.mask.height(), s.mask.width(), &out_dir.join(&mask))?;
        let spec_path = out_dir.join(format!("specs/{i:05}.json"));
        let json = serde_json::to_string_pretty(&s.spec).expect("spec serializes");
        std::fs::write(&spec_path, json).map_err(|e| Error::io(&spec_path, e))?;
        entries.push(ManifestEntry {
            image,
            mask,
            domain: s.spec.domain,
            seed: s.spec.seed,
        });
    }
    let manifest = Manifest {
        path: out_dir.join("manifest.txt"),
        entries,
    };
    std::fs::write(&manifest.path, manifest.to_text()).map_err(|e| Error::io(&manifest.path, e))?;
    Ok(manifest)
}

/// Read every sample listed in a manifest. The `ForgerySpec` record is taken from
/// `specs/<stem>.json` next to the images when present, otherwise rebuilt
/// from the manifest's domain and seed.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<Sample>> {
    let m = Manifest::read(manifest_path)?;
    let dir = m.dir().to_path_buf();
    m.entries
        .iter()
        .map(|e| {
            let name = e.image.display().to_string();
            let wrap = |err: Error| Error::Dataset {
                sample: name.clone(),
                msg: err.to_string(),
            };
            let img = load_image_png(&dir.join(&e.image)).map_err(wrap)?;
            let (h, w, forged) = load_mask_png(&dir.join(&e.mask)).map_err(wrap)?;
            if img.shape()[..2] != [h, w] {
                return Err(wrap(Error::Shape(format!(
                    "mask {h}×{w} vs image {:?}",
                    &img.shape()[..2]
                ))));
            }
            let stem = e.image.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
            let spec_path = dir.join("specs").join(format!("{stem}.json"));
            let spec = match std::fs::read_to_string(&spec_path) {
                Ok(t) => serde_json::from_str(&t).map_err(|err| Error::Dataset {
                    sample: name.clone(),
                    msg: format!("bad spec record: {err}"),
                })?,
                Err(_) => {
                    let mut s = ForgerySpec::random(h, w, e.domain, e.seed);
                    s.forged = forged.iter().any(|&f| f);
                    s
                }
            };
            Ok(Sample {
                image: ImageTensor::new(img).map_err(wrap)?,
                mask: GroundTruthMask::from_forged(h, w, &forged).map_err(wrap)?,
                spec,
            })
        })
        .collect()
}

/// Mean absolute horizontal plus vertical finite difference over all channels.
pub fn mean_gradient_magnitude(img: &Tensor<f32>) -> f64 {
    let (h, w, c) = img.dims3().expect("h × w × c image");
    let d = img.data();
    let mut s = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = d[(y * w + x) * c + ch] as f64;
                if x + 1 < w {
                    s += (d[(y * w + x + 1) * c + ch] as f64 - v).abs();
                    n += 1;
                }
                if y + 1 < h {
                    s += (d[((y + 1) * w + x) * c + ch] as f64 - v).abs();
                    n += 1;
                }
            }
        }
    }
    s / n.max(1) as f64
}
