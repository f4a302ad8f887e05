//! Volumetric evaluation: Dice, conformity, Jaccard, average and Hausdorff
//! boundary distances in millimetres, plus connected-component
//! post-processing.
//!
//! Masks are flat u8 volumes (0 background, nonzero foreground) indexed
//! x + dx*(y + dy*z). Boundary distances are exact nearest-neighbour
//! distances between voxel centers: for each query the search walks
//! Chebyshev shells over an occupancy grid and stops once no farther shell
//! can beat the best hit, which reproduces the brute-force pairwise answer
//! without the quadratic cost.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    pub fn parse(s: &str) -> Result<Connectivity> {
        match s {
            "6" => Ok(Connectivity::Six),
            "26" => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!(
                "unknown connectivity {other:?} (expected \"6\" or \"26\")"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Connectivity::Six => "6",
            Connectivity::TwentySix => "26",
        }
    }
}

fn check_pair(pred: &[u8], gt: &[u8], dims: [usize; 3]) -> Result<()> {
    let n = dims[0] * dims[1] * dims[2];
    if pred.len() != n || gt.len() != n {
        return Err(Error::Shape(format!(
            "metrics: masks of {} and {} voxels for dims {}x{}x{}",
            pred.len(),
            gt.len(),
            dims[0],
            dims[1],
            dims[2]
        )));
    }
    Ok(())
}

/// 2|P∩G| / (|P|+|G|); 1.0 when both masks are empty.
pub fn dice(pred: &[u8], gt: &[u8], dims: [usize; 3]) -> Result<f64> {
    check_pair(pred, gt, dims)?;
    let mut inter = 0u64;
    let mut p = 0u64;
    let mut g = 0u64;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        p += (a != 0) as u64;
        g += (b != 0) as u64;
        inter += (a != 0 && b != 0) as u64;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// |P∩G| / |P∪G|; 1.0 when both masks are empty.
pub fn jaccard(pred: &[u8], gt: &[u8], dims: [usize; 3]) -> Result<f64> {
    check_pair(pred, gt, dims)?;
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        inter += (a != 0 && b != 0) as u64;
        union += (a != 0 || b != 0) as u64;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Conformity coefficient (3d-2)/d; undefined at d = 0.
pub fn conform_from_dice(d: f64) -> Option<f64> {
    if d > 0.0 {
        Some((3.0 * d - 2.0) / d)
    } else {
        None
    }
}

/// Foreground voxels with at least one neighbour (under `conn`) that is
/// background or outside the volume. Returned as ascending flat indices.
pub fn extract_boundary(mask: &[u8], dims: [usize; 3], conn: Connectivity) -> Vec<usize> {
    let [dx, dy, dz] = dims;
    let offsets = neighbor_offsets(conn);
    let mut out = Vec::new();
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let i = x + dx * (y + dy * z);
                if mask[i] == 0 {
                    continue;
                }
                let exposed = offsets.iter().any(|&(ox, oy, oz)| {
                    let (nx, ny, nz) =
                        (x as isize + ox, y as isize + oy, z as isize + oz);
                    if nx < 0
                        || ny < 0
                        || nz < 0
                        || nx >= dx as isize
                        || ny >= dy as isize
                        || nz >= dz as isize
                    {
                        return true;
                    }
                    mask[nx as usize + dx * (ny as usize + dy * nz as usize)] == 0
                });
                if exposed {
                    out.push(i);
                }
            }
        }
    }
    out
}

fn neighbor_offsets(conn: Connectivity) -> Vec<(isize, isize, isize)> {
    match conn {
        Connectivity::Six => vec![
            (-1, 0, 0),
            (1, 0, 0),
            (0, -1, 0),
            (0, 1, 0),
            (0, 0, -1),
            (0, 0, 1),
        ],
        Connectivity::TwentySix => {
            let mut v = Vec::with_capacity(26);
            for oz in -1..=1isize {
                for oy in -1..=1isize {
                    for ox in -1..=1isize {
                        if (ox, oy, oz) != (0, 0, 0) {
                            v.push((ox, oy, oz));
                        }
                    }
                }
            }
            v
        }
    }
}

struct Occupancy {
    grid: Vec<bool>,
    dims: [usize; 3],
}

impl Occupancy {
    fn new(points: &[usize], dims: [usize; 3]) -> Occupancy {
        let mut grid = vec![false; dims[0] * dims[1] * dims[2]];
        for &p in points {
            grid[p] = true;
        }
        Occupancy { grid, dims }
    }

    /// Exact squared distance (mm^2) from a voxel center to the nearest
    /// occupied voxel center. Shells are scanned in Chebyshev order; once
    /// the next shell cannot beat the best hit the answer is final.
    fn nearest_sq(&self, idx: usize, spacing: [f64; 3]) -> f64 {
        let [dx, dy, dz] = self.dims;
        let x = (idx % dx) as isize;
        let y = (idx / dx % dy) as isize;
        let z = (idx / (dx * dy)) as isize;
        let smin = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let rmax = dx.max(dy).max(dz) as isize;
        let mut best = f64::INFINITY;
        for r in 0..=rmax {
            let reach = (r as f64) * smin;
            if reach * reach >= best {
                break;
            }
            for oz in -r..=r {
                let nz = z + oz;
                if nz < 0 || nz >= dz as isize {
                    continue;
                }
                let surface_z = oz.abs() == r;
                for oy in -r..=r {
                    let ny = y + oy;
                    if ny < 0 || ny >= dy as isize {
                        continue;
                    }
                    // rows touching the shell in y or z scan every x; other
                    // rows only reach the shell at the two extreme offsets
                    let surface_yz = surface_z || oy.abs() == r;
                    let mut probe = |ox: isize| {
                        let nx = x + ox;
                        if nx >= 0 && nx < dx as isize {
                            let ni = nx as usize + dx * (ny as usize + dy * nz as usize);
                            if self.grid[ni] {
                                best = best.min(dist_sq([ox, oy, oz], spacing));
                            }
                        }
                    };
                    if surface_yz {
                        for ox in -r..=r {
                            probe(ox);
                        }
                    } else {
                        probe(-r);
                        probe(r);
                    }
                }
            }
        }
        best
    }
}

fn dist_sq(offset: [isize; 3], spacing: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let d = offset[a] as f64 * spacing[a];
        s += d * d;
    }
    s
}

fn validate_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Config(format!(
            "spacing components must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Average symmetric and Hausdorff boundary distances in mm, or None when
/// either boundary is empty.
pub fn boundary_distances(
    pred: &[u8],
    gt: &[u8],
    dims: [usize; 3],
    spacing: [f64; 3],
    conn: Connectivity,
) -> Result<Option<(f64, f64)>> {
    check_pair(pred, gt, dims)?;
    validate_spacing(spacing)?;
    let bp = extract_boundary(pred, dims, conn);
    let bg = extract_boundary(gt, dims, conn);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let occ_g = Occupancy::new(&bg, dims);
    let occ_p = Occupancy::new(&bp, dims);
    let mut sum = 0.0f64;
    let mut max = 0.0f64;
    for &a in &bp {
        let d = occ_g.nearest_sq(a, spacing).sqrt();
        sum += d;
        max = max.max(d);
    }
    for &b in &bg {
        let d = occ_p.nearest_sq(b, spacing).sqrt();
        sum += d;
        max = max.max(d);
    }
    let adb = sum / (bp.len() + bg.len()) as f64;
    Ok(Some((adb, max)))
}

pub fn adb(
    pred: &[u8],
    gt: &[u8],
    dims: [usize; 3],
    spacing: [f64; 3],
    conn: Connectivity,
) -> Result<Option<f64>> {
    Ok(boundary_distances(pred, gt, dims, spacing, conn)?.map(|(a, _)| a))
}

pub fn hdb(
    pred: &[u8],
    gt: &[u8],
    dims: [usize; 3],
    spacing: [f64; 3],
    conn: Connectivity,
) -> Result<Option<f64>> {
    Ok(boundary_distances(pred, gt, dims, spacing, conn)?.map(|(_, h)| h))
}

#[derive(Clone, Debug)]
pub struct Component {
    pub size: usize,
    pub min_index: usize,
    pub voxels: Vec<usize>,
}

/// Maximal connected foreground regions, ordered by descending size with
/// ties going to the lower minimum flat index.
pub fn connected_components(mask: &[u8], dims: [usize; 3], conn: Connectivity) -> Vec<Component> {
    let [dx, dy, dz] = dims;
    let offsets = neighbor_offsets(conn);
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    let mut queue = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        queue.clear();
        queue.push(start);
        seen[start] = true;
        let mut voxels = Vec::new();
        while let Some(i) = queue.pop() {
            voxels.push(i);
            let x = (i % dx) as isize;
            let y = (i / dx % dy) as isize;
            let z = (i / (dx * dy)) as isize;
            for &(ox, oy, oz) in &offsets {
                let (nx, ny, nz) = (x + ox, y + oy, z + oz);
                if nx < 0
                    || ny < 0
                    || nz < 0
                    || nx >= dx as isize
                    || ny >= dy as isize
                    || nz >= dz as isize
                {
                    continue;
                }
                let ni = nx as usize + dx * (ny as usize + dy * nz as usize);
                if mask[ni] != 0 && !seen[ni] {
                    seen[ni] = true;
                    queue.push(ni);
                }
            }
        }
        voxels.sort_unstable();
        comps.push(Component { size: voxels.len(), min_index: voxels[0], voxels });
    }
    comps.sort_by(|a, b| b.size.cmp(&a.size).then(a.min_index.cmp(&b.min_index)));
    comps
}

/// Keep every component whose size is at least min_fraction times the
/// largest component's size.
pub fn remove_small_components(
    mask: &[u8],
    dims: [usize; 3],
    conn: Connectivity,
    min_fraction: f64,
) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(Error::Config(format!(
            "min_fraction {min_fraction} must be in [0, 1]"
        )));
    }
    let comps = connected_components(mask, dims, conn);
    let mut out = vec![0u8; mask.len()];
    let Some(largest) = comps.first().map(|c| c.size) else {
        return Ok(out);
    };
    let threshold = min_fraction * largest as f64;
    for c in &comps {
        if c.size as f64 >= threshold {
            for &v in &c.voxels {
                out[v] = 1;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub boundary_connectivity: Connectivity,
    pub component_connectivity: Connectivity,
    pub min_fraction: f64,
    pub postprocess: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            boundary_connectivity: Connectivity::Six,
            component_connectivity: Connectivity::TwentySix,
            min_fraction: 0.1,
            postprocess: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseMetrics {
    pub id: String,
    pub dice: f64,
    pub conform: Option<f64>,
    pub jaccard: f64,
    pub adb_mm: Option<f64>,
    pub hdb_mm: Option<f64>,
}

/// Post-process the prediction, then score it against the ground truth.
pub fn evaluate_case(
    id: &str,
    pred: &[u8],
    gt: &[u8],
    dims: [usize; 3],
    spacing: [f64; 3],
    opts: &EvalOptions,
) -> Result<CaseMetrics> {
    check_pair(pred, gt, dims)?;
    let cleaned;
    let pred = if opts.postprocess {
        cleaned = remove_small_components(
            pred,
            dims,
            opts.component_connectivity,
            opts.min_fraction,
        )?;
        &cleaned[..]
    } else {
        pred
    };
    let d = dice(pred, gt, dims)?;
    let j = jaccard(pred, gt, dims)?;
    let bd = boundary_distances(pred, gt, dims, spacing, opts.boundary_connectivity)?;
    Ok(CaseMetrics {
        id: id.to_string(),
        dice: d,
        conform: conform_from_dice(d),
        jaccard: j,
        adb_mm: bd.map(|(a, _)| a),
        hdb_mm: bd.map(|(_, h)| h),
    })
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub mean_dice: f64,
    pub mean_conform: Option<f64>,
    pub mean_jaccard: f64,
    pub mean_adb: Option<f64>,
    pub mean_hdb: Option<f64>,
}

/// Aggregate per-case metrics by arithmetic mean; undefined values are
/// excluded from their mean (and the mean is undefined if no case defines
/// the value).
pub fn evaluate_set(cases: Vec<CaseMetrics>) -> MetricsReport {
    let mean = |vals: Vec<f64>| -> Option<f64> {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let mean_dice = mean(cases.iter().map(|c| c.dice).collect()).unwrap_or(f64::NAN);
    let mean_jaccard = mean(cases.iter().map(|c| c.jaccard).collect()).unwrap_or(f64::NAN);
    let mean_conform = mean(cases.iter().filter_map(|c| c.conform).collect());
    let mean_adb = mean(cases.iter().filter_map(|c| c.adb_mm).collect());
    let mean_hdb = mean(cases.iter().filter_map(|c| c.hdb_mm).collect());
    MetricsReport { cases, mean_dice, mean_conform, mean_jaccard, mean_adb, mean_hdb }
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let ratio = |v: f64| format!("{v:.6}");
        let ratio_opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        let mm_opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.3}"));
        let mut s = String::from("case,dice,conform,jaccard,adb_mm,hdb_mm\n");
        for c in &self.cases {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.id,
                ratio(c.dice),
                ratio_opt(c.conform),
                ratio(c.jaccard),
                mm_opt(c.adb_mm),
                mm_opt(c.hdb_mm)
            ));
        }
        s.push_str(&format!(
            "MEAN,{},{},{},{},{}\n",
            ratio(self.mean_dice),
            ratio_opt(self.mean_conform),
            ratio(self.mean_jaccard),
            mm_opt(self.mean_adb),
            mm_opt(self.mean_hdb)
        ));
        s
    }
}
