//! Volumes, synthetic phantoms, slicing, normalization, augmentation, and
//! dataset splitting.
//!
//! A volume stores its image (and optional binary label) flat with index
//! x + dx*(y + dy*z), so z-planes are contiguous and slicing is free. The
//! phantom generator builds an ellipsoid body with tube-like branches
//! attached to its surface, draws intensities around two class means, and
//! overlays noise plus a smooth bias field so thresholding alone cannot
//! solve the task. Generation redraws until the foreground fraction lands
//! in a fixed band, keeping class imbalance realistic but bounded.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug)]
pub struct VolumeCase {
    pub id: String,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub image: Vec<f32>,
    pub label: Option<Vec<u8>>,
}

/// Foreground-fraction band enforced by the generator's redraw loop.
pub const PHANTOM_MIN_FG: f64 = 0.006;
pub const PHANTOM_MAX_FG: f64 = 0.145;

impl VolumeCase {
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn num_slices(&self) -> usize {
        self.dims[2]
    }

    fn plane(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// Image plane at z index k (row-major, x fastest).
    pub fn image_slice(&self, k: usize) -> &[f32] {
        let p = self.plane();
        &self.image[k * p..(k + 1) * p]
    }

    pub fn label_slice(&self, k: usize) -> Option<&[u8]> {
        let p = self.plane();
        self.label.as_ref().map(|l| &l[k * p..(k + 1) * p])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.voxel_count();
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("volume {}: zero dimension {:?}", self.id, self.dims)));
        }
        if self.image.len() != n {
            return Err(Error::Shape(format!(
                "volume {}: image has {} voxels, dims want {n}",
                self.id,
                self.image.len()
            )));
        }
        if let Some(l) = &self.label {
            if l.len() != n {
                return Err(Error::Shape(format!(
                    "volume {}: label has {} voxels, dims want {n}",
                    self.id,
                    l.len()
                )));
            }
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!(
                "volume {}: spacing {:?} must be positive",
                self.id, self.spacing
            )));
        }
        Ok(())
    }
}

/// Synthetic organ-like phantom: compact ellipsoid body plus branchy
/// tubes, imaged at two intensity levels with noise and a bias field.
pub fn generate_phantom(id: &str, dims: [usize; 3], rng: &mut RngStream) -> Result<VolumeCase> {
    let [dx, dy, dz] = dims;
    if dx < 32 || dy < 32 || dz < 8 {
        return Err(Error::Config(format!(
            "phantom dims {dx}x{dy}x{dz} too small (need at least 32x32x8)"
        )));
    }
    let n = dx * dy * dz;

    let mut label = vec![0u8; n];
    for attempt in 0.. {
        if attempt >= 64 {
            return Err(Error::Numeric(
                "phantom generation failed to reach the foreground band in 64 draws".into(),
            ));
        }
        label.fill(0);
        draw_shape(&mut label, dims, rng);
        let fg = label.iter().filter(|&&v| v != 0).count() as f64 / n as f64;
        if (PHANTOM_MIN_FG..=PHANTOM_MAX_FG).contains(&fg) {
            break;
        }
    }

    // intensities: class means 0.7/0.3, Gaussian noise, then a smooth
    // cosine bias field with total amplitude drawn in [0.05, 0.15]
    let mut image = vec![0.0f32; n];
    for i in 0..n {
        let mean = if label[i] != 0 { 0.7 } else { 0.3 };
        image[i] = mean + rng.normal(0.0, 0.1);
    }
    let amp_total = rng.uniform_in(0.05, 0.15);
    let mut comps = Vec::new();
    let mut weight_sum = 0.0f32;
    for _ in 0..3 {
        let w = rng.uniform_in(0.2, 1.0);
        weight_sum += w;
        comps.push((
            w,
            rng.uniform_in(0.5, 1.5),
            rng.uniform_in(0.5, 1.5),
            rng.uniform_in(0.5, 1.5),
            rng.uniform_in(0.0, std::f32::consts::TAU),
        ));
    }
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let mut b = 0.0f32;
                for &(w, fx, fy, fz, phase) in &comps {
                    let t = std::f32::consts::TAU
                        * (fx * x as f32 / dx as f32
                            + fy * y as f32 / dy as f32
                            + fz * z as f32 / dz as f32)
                        + phase;
                    b += w / weight_sum * amp_total * t.cos();
                }
                image[x + dx * (y + dy * z)] += b;
            }
        }
    }

    let case = VolumeCase {
        id: id.to_string(),
        dims,
        spacing: [1.0, 1.0, 1.0],
        image,
        label: Some(label),
    };
    case.validate()?;
    Ok(case)
}

fn draw_shape(label: &mut [u8], dims: [usize; 3], rng: &mut RngStream) {
    let [dx, dy, dz] = dims;
    let fdims = [dx as f64, dy as f64, dz as f64];

    // ellipsoid semi-axes at 15-35% of each extent, half that as radius
    let mut semi = [0.0f64; 3];
    for a in 0..3 {
        semi[a] = (rng.uniform_in(0.15, 0.35) as f64 * fdims[a] / 2.0).max(1.0);
    }
    let mut center = [0.0f64; 3];
    for a in 0..3 {
        let lo = semi[a];
        let hi = fdims[a] - 1.0 - semi[a];
        center[a] = if hi > lo { rng.uniform_in(lo as f32, hi as f32) as f64 } else { fdims[a] / 2.0 };
    }
    fill_ellipsoid(label, dims, center, semi);

    let tubes = 2 + rng.index(5); // 2..=6
    let max_extent = fdims[0].max(fdims[1]).max(fdims[2]);
    for _ in 0..tubes {
        // random direction; surface point of the ellipsoid along it
        let mut dir = [0.0f64; 3];
        loop {
            let mut norm = 0.0;
            for d in dir.iter_mut() {
                *d = rng.normal(0.0, 1.0) as f64;
                norm += *d * *d;
            }
            if norm > 1e-6 {
                let inv = 1.0 / norm.sqrt();
                for d in dir.iter_mut() {
                    *d *= inv;
                }
                break;
            }
        }
        let mut q = 0.0;
        for a in 0..3 {
            q += (dir[a] / semi[a]).powi(2);
        }
        let t_surface = 1.0 / q.sqrt();
        let start = [
            center[0] + dir[0] * t_surface,
            center[1] + dir[1] * t_surface,
            center[2] + dir[2] * t_surface,
        ];
        let radius = rng.uniform_in(2.0, 4.0) as f64;
        let len = rng.uniform_in(0.2, 0.5) as f64 * max_extent;
        let end = [
            start[0] + dir[0] * len,
            start[1] + dir[1] * len,
            start[2] + dir[2] * len,
        ];
        fill_capsule(label, dims, start, end, radius);
    }
}

fn fill_ellipsoid(label: &mut [u8], dims: [usize; 3], c: [f64; 3], s: [f64; 3]) {
    let [dx, dy, dz] = dims;
    let lo = |a: f64, s: f64| (a - s).floor().max(0.0) as usize;
    let hi = |a: f64, s: f64, d: usize| ((a + s).ceil() as usize).min(d - 1);
    for z in lo(c[2], s[2])..=hi(c[2], s[2], dz) {
        for y in lo(c[1], s[1])..=hi(c[1], s[1], dy) {
            for x in lo(c[0], s[0])..=hi(c[0], s[0], dx) {
                let e = ((x as f64 - c[0]) / s[0]).powi(2)
                    + ((y as f64 - c[1]) / s[1]).powi(2)
                    + ((z as f64 - c[2]) / s[2]).powi(2);
                if e <= 1.0 {
                    label[x + dx * (y + dy * z)] = 1;
                }
            }
        }
    }
}

fn fill_capsule(label: &mut [u8], dims: [usize; 3], a: [f64; 3], b: [f64; 3], r: f64) {
    let [dx, dy, dz] = dims;
    let lo = |i: usize| (a[i].min(b[i]) - r).floor().max(0.0) as usize;
    let hi = |i: usize, d: usize| (((a[i].max(b[i]) + r).ceil()) as usize).min(d.saturating_sub(1));
    if lo(0) > hi(0, dx) || lo(1) > hi(1, dy) || lo(2) > hi(2, dz) {
        return;
    }
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ab2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    for z in lo(2)..=hi(2, dz) {
        for y in lo(1)..=hi(1, dy) {
            for x in lo(0)..=hi(0, dx) {
                let p = [x as f64, y as f64, z as f64];
                let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
                let t = if ab2 > 0.0 {
                    ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / ab2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let d2 = (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>();
                if d2 <= r * r {
                    label[x + dx * (y + dy * z)] = 1;
                }
            }
        }
    }
}

const MAGIC: &[u8; 4] = b"SEGV";
const VERSION: u32 = 1;
/// Refuse volumes above 2^31 voxels; anything bigger is a corrupt header.
const MAX_VOXELS: u64 = 1 << 31;

pub fn write_volume(case: &VolumeCase, path: &Path) -> Result<()> {
    case.validate()?;
    let mut buf = Vec::with_capacity(32 + case.image.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for &d in &case.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &s in &case.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.push(case.label.is_some() as u8);
    buf.extend_from_slice(&[0, 0, 0]);
    for &v in &case.image {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = &case.label {
        buf.extend_from_slice(l);
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<VolumeCase> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::format(path, "truncated volume file"));
        }
        let out = &buf[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    let mut pos = 0usize;
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let version = u32_at(&mut pos)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    let mut total: u64 = 1;
    for d in dims.iter_mut() {
        let v = u32_at(&mut pos)?;
        if v == 0 {
            return Err(Error::format(path, "dim overflow: zero dimension"));
        }
        total = total.saturating_mul(v as u64);
        *d = v as usize;
    }
    if total > MAX_VOXELS {
        return Err(Error::format(
            path,
            format!("dim overflow: {}x{}x{} voxels", dims[0], dims[1], dims[2]),
        ));
    }
    let mut spacing = [0.0f32; 3];
    for s in spacing.iter_mut() {
        *s = f32::from_bits(u32_at(&mut pos)?);
    }
    let payload = take(&mut pos, 1)?[0];
    if payload > 1 {
        return Err(Error::format(path, format!("unknown payload kind {payload}")));
    }
    take(&mut pos, 3)?; // padding
    let n = (total as usize) * 4;
    let raw = take(&mut pos, n)?;
    let image: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let label = if payload == 1 {
        let raw = take(&mut pos, total as usize)?;
        Some(raw.to_vec())
    } else {
        None
    };
    if pos != buf.len() {
        return Err(Error::format(path, "unexpected trailing data"));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string());
    let case = VolumeCase { id, dims, spacing, image, label };
    case.validate()?;
    Ok(case)
}

/// Zero-mean unit-variance normalization in f64, summed in value-sorted
/// order so any permutation of the same values (a flip, a transpose)
/// normalizes to exactly the permuted output. Constant slices map to zero.
pub fn normalize_slice(slice: &[f32]) -> Vec<f32> {
    if slice.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<f32> = slice.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = sorted.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; slice.len()];
    }
    slice.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

/// Reverse a row-major h x w plane along one in-plane axis.
pub fn flip_plane<T: Copy>(data: &mut [T], h: usize, w: usize, axis: FlipAxis) {
    debug_assert_eq!(data.len(), h * w);
    match axis {
        FlipAxis::Horizontal => {
            for row in data.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        FlipAxis::Vertical => {
            for y in 0..h / 2 {
                let (top, rest) = data.split_at_mut((h - 1 - y) * w);
                let (a, b) = (&mut top[y * w..(y + 1) * w], &mut rest[..w]);
                a.swap_with_slice(b);
            }
        }
    }
}

/// With probability p, flip image and label together along one random
/// in-plane axis.
pub fn augment_flip(
    image: &mut [f32],
    label: &mut [u8],
    h: usize,
    w: usize,
    rng: &mut RngStream,
    p: f32,
) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("flip probability {p} must be in [0, 1]")));
    }
    if rng.uniform() < p {
        let axis = if rng.index(2) == 0 { FlipAxis::Horizontal } else { FlipAxis::Vertical };
        flip_plane(image, h, w, axis);
        flip_plane(label, h, w, axis);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Deterministic shuffle, then floor(n*r_val) validation ids, floor(n*r_test)
/// test ids, remainder training.
pub fn split_dataset(
    ids: &[String],
    ratios: (f64, f64, f64),
    rng: &mut RngStream,
) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return Err(Error::Config("cannot split an empty id list".into()));
    }
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test].iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::Config(format!("split ratios {ratios:?} must lie in [0, 1]")));
    }
    if ((r_train + r_val + r_test) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must sum to 1")));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    rng.shuffle(&mut order);
    let n = ids.len();
    let n_val = (n as f64 * r_val).floor() as usize;
    let n_test = (n as f64 * r_test).floor() as usize;
    let pick = |range: std::ops::Range<usize>| -> Vec<String> {
        order[range].iter().map(|&i| ids[i].clone()).collect()
    };
    Ok(DatasetSplit {
        validation: pick(0..n_val),
        test: pick(n_val..n_val + n_test),
        train: pick(n_val + n_test..n),
    })
}
