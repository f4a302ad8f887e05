//! Shared helpers and independent oracles for the integration suites.
//!
//! The oracles re-derive expected values from the definitions with the
//! simplest possible algorithms (full sorts, pairwise scans, flood fill)
//! so the optimized library paths are checked against genuinely
//! independent computations.

#![allow(dead_code)] // each integration target uses its own subset

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use pyraseg::data::{normalize_slice, VolumeCase};
use pyraseg::metrics::Connectivity;
use pyraseg::network::Model;
use pyraseg::rng::{RngStream, STREAM_DROPOUT};

/// Fresh private directory under the system temp dir.
pub fn unique_temp_dir(tag: &str) -> PathBuf {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).expect("clock").as_nanos();
    let dir = std::env::temp_dir().join(format!("pyraseg-{tag}-{}-{nanos}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("create temp dir");
    dir
}

fn neighbor_offsets(conn: Connectivity) -> Vec<(isize, isize, isize)> {
    let mut out = Vec::new();
    for oz in -1isize..=1 {
        for oy in -1isize..=1 {
            for ox in -1isize..=1 {
                if (ox, oy, oz) == (0, 0, 0) {
                    continue;
                }
                let faces = ox.abs() + oy.abs() + oz.abs();
                match conn {
                    Connectivity::Six if faces == 1 => out.push((ox, oy, oz)),
                    Connectivity::TwentySix => out.push((ox, oy, oz)),
                    _ => {}
                }
            }
        }
    }
    out
}

/// Boundary per definition: a foreground voxel with any `conn`-neighbor
/// that lies outside the volume or on background.
pub fn oracle_boundary(mask: &[u8], dims: [usize; 3], conn: Connectivity) -> Vec<[usize; 3]> {
    let [dx, dy, dz] = dims;
    let offsets = neighbor_offsets(conn);
    let mut out = Vec::new();
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                if mask[x + dx * (y + dy * z)] == 0 {
                    continue;
                }
                let exposed = offsets.iter().any(|&(ox, oy, oz)| {
                    let (nx, ny, nz) = (x as isize + ox, y as isize + oy, z as isize + oz);
                    if nx < 0 || ny < 0 || nz < 0 {
                        return true;
                    }
                    let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                    if nx >= dx || ny >= dy || nz >= dz {
                        return true;
                    }
                    mask[nx + dx * (ny + dy * nz)] == 0
                });
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Brute-force symmetric boundary distances in millimetres: the average
/// over the union of both boundary sets of each voxel's nearest-opposite
/// distance, and the maximum of the same; `None` when either boundary is
/// empty.
pub fn oracle_distances(
    pred: &[u8],
    gt: &[u8],
    dims: [usize; 3],
    spacing: [f64; 3],
    conn: Connectivity,
) -> Option<(f64, f64)> {
    let bp = oracle_boundary(pred, dims, conn);
    let bg = oracle_boundary(gt, dims, conn);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let dist = |a: &[usize; 3], b: &[usize; 3]| -> f64 {
        let mut sq = 0.0f64;
        for axis in 0..3 {
            let d = (a[axis] as f64 - b[axis] as f64) * spacing[axis];
            sq += d * d;
        }
        sq.sqrt()
    };
    let nearest = |a: &[usize; 3], set: &[[usize; 3]]| -> f64 {
        set.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min)
    };
    let mut sum = 0.0f64;
    let mut max = 0.0f64;
    for a in &bp {
        let d = nearest(a, &bg);
        sum += d;
        max = max.max(d);
    }
    for b in &bg {
        let d = nearest(b, &bp);
        sum += d;
        max = max.max(d);
    }
    Some((sum / (bp.len() + bg.len()) as f64, max))
}

/// Flood-fill connected components: voxel index lists sorted ascending,
/// components ordered by size descending then smallest index ascending.
pub fn oracle_components(mask: &[u8], dims: [usize; 3], conn: Connectivity) -> Vec<Vec<usize>> {
    let [dx, dy, dz] = dims;
    let offsets = neighbor_offsets(conn);
    let mut seen = vec![false; mask.len()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut voxels = Vec::new();
        seen[start] = true;
        while let Some(i) = stack.pop() {
            voxels.push(i);
            let (x, y, z) = (i % dx, (i / dx) % dy, i / (dx * dy));
            for &(ox, oy, oz) in &offsets {
                let (nx, ny, nz) = (x as isize + ox, y as isize + oy, z as isize + oz);
                if nx < 0 || ny < 0 || nz < 0 {
                    continue;
                }
                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                if nx >= dx || ny >= dy || nz >= dz {
                    continue;
                }
                let n = nx + dx * (ny + dy * nz);
                if mask[n] != 0 && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        voxels.sort_unstable();
        comps.push(voxels);
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

/// Hard-negative selection re-derived with a full sort.
pub struct OracleSelection {
    pub c_p: usize,
    pub c_n: usize,
    pub c_hn: usize,
    pub selected_bg: Vec<usize>,
}

pub fn oracle_ohnem_select(fg_probs: &[f32], labels: &[u8], floor_cap: usize) -> OracleSelection {
    let mut bg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let c_n = bg.len();
    let c_p = labels.len() - c_n;
    // keep max(2 * positives, min(floor, negatives / 4)) negatives, capped
    // at the number available
    let c_hn = (2 * c_p).max(floor_cap.min(c_n / 4)).min(c_n);
    bg.sort_by(|&a, &b| fg_probs[b].total_cmp(&fg_probs[a]).then(a.cmp(&b)));
    bg.truncate(c_hn);
    bg.sort_unstable();
    OracleSelection { c_p, c_n, c_hn, selected_bg: bg }
}

/// Per-voxel foreground probability 1 - softmax_0 from [K, HW] logits:
/// f64 math, rounded once to f32.
pub fn oracle_fg_probs(logits: &[f32], classes: usize, hw: usize) -> Vec<f32> {
    assert_eq!(logits.len(), classes * hw);
    (0..hw)
        .map(|v| {
            let at = |c: usize| logits[c * hw + v] as f64;
            let mut m = f64::NEG_INFINITY;
            for c in 0..classes {
                m = m.max(at(c));
            }
            let mut denom = 0.0f64;
            for c in 0..classes {
                denom += (at(c) - m).exp();
            }
            (1.0 - (at(0) - m).exp() / denom) as f32
        })
        .collect()
}

/// Mean cross-entropy over foreground plus selected background voxels of
/// one slice, computed directly in f64 from [K, HW] logits.
pub fn oracle_ohnem_slice_loss(
    logits: &[f32],
    classes: usize,
    labels: &[u8],
    selected_bg: &[usize],
) -> f64 {
    let hw = labels.len();
    assert_eq!(logits.len(), classes * hw);
    let ce = |v: usize| -> f64 {
        let at = |c: usize| logits[c * hw + v] as f64;
        let mut m = f64::NEG_INFINITY;
        for c in 0..classes {
            m = m.max(at(c));
        }
        let mut denom = 0.0f64;
        for c in 0..classes {
            denom += (at(c) - m).exp();
        }
        -((at(labels[v] as usize) - m).exp() / denom).ln()
    };
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for v in 0..hw {
        if labels[v] != 0 {
            sum += ce(v);
            count += 1;
        }
    }
    for &v in selected_bg {
        sum += ce(v);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Per-slice argmax inference over a whole volume; no post-processing.
pub fn predict_labels(model: &mut Model, case: &VolumeCase) -> Vec<u8> {
    let [dx, dy, dz] = case.dims;
    let classes = model.config.num_classes;
    let plane = dx * dy;
    let mut labels = vec![0u8; case.voxel_count()];
    let mut rng = RngStream::new(0, STREAM_DROPOUT);
    for k in 0..dz {
        let slice = normalize_slice(case.image_slice(k));
        model.reset();
        let fwd = model.forward(&slice, 1, false, &mut rng).expect("inference forward");
        let logits = model.graph.data(fwd.main);
        for p in 0..plane {
            let mut best_class = 0usize;
            let mut best = logits[p];
            for c in 1..classes {
                let v = logits[c * plane + p];
                if v > best {
                    best = v;
                    best_class = c;
                }
            }
            labels[k * plane + p] = best_class as u8;
        }
    }
    labels
}
