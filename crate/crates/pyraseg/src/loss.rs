//! Training objectives: weighted cross-entropy, online hard-negative
//! mining over background voxels, and the combined main + auxiliary loss.
//!
//! Hard-negative selection ranks background voxels of each slice by
//! foreground probability (descending, ties to the lower flat index) and
//! keeps c_hn = max(2*c_p, min(floor_cap, c_n/4)) of them, clamped to
//! [0, c_n]. The selection is a constant with respect to the graph: only the
//! cross-entropy over the selected set is differentiated.

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

/// Default cap inside min(cap, c_n/4). Deliberately small; overridable
/// through the training config.
pub const DEFAULT_OHNEM_FLOOR: usize = 5;

/// Default weight of the auxiliary-head term in the total loss.
pub const DEFAULT_AUX_WEIGHT: f32 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Ohnem,
    WeightedCe,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<LossMode> {
        match s {
            "ohnem" => Ok(LossMode::Ohnem),
            "weighted_ce" => Ok(LossMode::WeightedCe),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?} (expected \"ohnem\" or \"weighted_ce\")"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Ohnem => "ohnem",
            LossMode::WeightedCe => "weighted_ce",
        }
    }
}

/// Hard-negative pick for one slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OhnemSelection {
    pub c_p: usize,
    pub c_n: usize,
    pub c_hn: usize,
    /// Flat in-slice indices of the selected background voxels, ascending.
    pub selected_bg: Vec<usize>,
}

/// Per-batch inverse-frequency class weights: w_k = total/(K*count_k)
/// clamped to [0.1, 10]; an absent class gets weight 0.
pub fn class_weights(labels: &[u8], k: usize) -> Vec<f32> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let total = labels.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                (total / (k as f64 * c as f64)).clamp(0.1, 10.0) as f32
            }
        })
        .collect()
}

/// Mean over all voxels of w_label * (-log softmax(logits)_label).
pub fn weighted_cross_entropy(
    g: &mut Graph,
    logits: TensorId,
    labels: &[u8],
    weights: &[f32],
) -> Result<TensorId> {
    let k = g.shape(logits)[1];
    if weights.len() != k {
        return Err(Error::Shape(format!(
            "weighted_cross_entropy: {} weights for {k} classes",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::Config(format!(
            "weighted_cross_entropy: class weight {w} is not finite and non-negative"
        )));
    }
    let ce = g.cross_entropy_map(logits, labels)?;
    let inv = 1.0 / labels.len() as f64;
    let w: Vec<f32> = labels.iter().map(|&l| (weights[l as usize] as f64 * inv) as f32).collect();
    g.weighted_sum(ce, w)
}

/// Per-voxel foreground probability 1 - softmax_0, flattened [N,H,W].
/// Computed in f64 and rounded once to f32 so rankings are reproducible.
pub fn foreground_probs(g: &Graph, logits: TensorId) -> Vec<f32> {
    let sh = g.shape(logits);
    let (n, k, hw) = (sh[0], sh[1], sh[2] * sh[3]);
    let d = g.data(logits);
    let mut out = vec![0.0f32; n * hw];
    for ni in 0..n {
        for v in 0..hw {
            let at = |c: usize| d[(ni * k + c) * hw + v] as f64;
            let mut m = at(0);
            for c in 1..k {
                m = m.max(at(c));
            }
            let mut denom = 0.0f64;
            for c in 0..k {
                denom += (at(c) - m).exp();
            }
            let p0 = (at(0) - m).exp() / denom;
            out[ni * hw + v] = (1.0 - p0) as f32;
        }
    }
    out
}

/// Rank one slice's background voxels and keep the hardest ones.
pub fn ohnem_select(fg_probs: &[f32], labels: &[u8], floor_cap: usize) -> OhnemSelection {
    debug_assert_eq!(fg_probs.len(), labels.len());
    let mut bg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let c_n = bg.len();
    let c_p = labels.len() - c_n;
    let c_hn = (2 * c_p).max(floor_cap.min(c_n / 4)).min(c_n);
    if c_hn < c_n {
        // total order: probability descending, then flat index ascending
        let by_hardness = |a: &usize, b: &usize| {
            fg_probs[*b].total_cmp(&fg_probs[*a]).then(a.cmp(b))
        };
        if c_hn > 0 {
            bg.select_nth_unstable_by(c_hn, by_hardness);
        }
        bg.truncate(c_hn);
    }
    bg.sort_unstable();
    OhnemSelection { c_p, c_n, c_hn, selected_bg: bg }
}

/// Selection for every slice of a [N,K,H,W] logits batch.
pub fn ohnem_selections(
    g: &Graph,
    logits: TensorId,
    labels: &[u8],
    floor_cap: usize,
) -> Result<Vec<OhnemSelection>> {
    let sh = g.shape(logits);
    if sh.len() != 4 {
        return Err(Error::Shape(format!("ohnem: logits must be [N,K,H,W], got {sh:?}")));
    }
    let (n, hw) = (sh[0], sh[2] * sh[3]);
    if labels.len() != n * hw {
        return Err(Error::Shape(format!(
            "ohnem: {} labels for {} voxels",
            labels.len(),
            n * hw
        )));
    }
    let fg = foreground_probs(g, logits);
    Ok((0..n)
        .map(|ni| ohnem_select(&fg[ni * hw..(ni + 1) * hw], &labels[ni * hw..(ni + 1) * hw], floor_cap))
        .collect())
}

/// Loss under an already-made selection: per slice the unweighted mean
/// cross-entropy over foreground plus selected background voxels, averaged
/// over slices. Slices with an empty set contribute 0 but still divide.
pub fn ohnem_loss_from(
    g: &mut Graph,
    logits: TensorId,
    labels: &[u8],
    selections: &[OhnemSelection],
) -> Result<TensorId> {
    let sh = g.shape(logits);
    let (n, hw) = (sh[0], sh[2] * sh[3]);
    if selections.len() != n {
        return Err(Error::Shape(format!(
            "ohnem: {} selections for {n} slices",
            selections.len()
        )));
    }
    let ce = g.cross_entropy_map(logits, labels)?;
    let mut w = vec![0.0f32; n * hw];
    for (ni, sel) in selections.iter().enumerate() {
        let base = ni * hw;
        let set_size = sel.c_p + sel.selected_bg.len();
        if set_size == 0 {
            continue;
        }
        let wv = (1.0 / (n as f64 * set_size as f64)) as f32;
        for i in 0..hw {
            if labels[base + i] != 0 {
                w[base + i] = wv;
            }
        }
        for &i in &sel.selected_bg {
            w[base + i] = wv;
        }
    }
    g.weighted_sum(ce, w)
}

/// Select hard negatives from the current logits, then score them.
pub fn ohnem_loss(
    g: &mut Graph,
    logits: TensorId,
    labels: &[u8],
    floor_cap: usize,
) -> Result<TensorId> {
    let sels = ohnem_selections(g, logits, labels, floor_cap)?;
    ohnem_loss_from(g, logits, labels, &sels)
}

/// Main loss in the requested mode plus aux_weight times the auxiliary
/// head's weighted cross-entropy. Both weighted-CE terms share per-batch
/// inverse-frequency class weights.
pub fn total_loss(
    g: &mut Graph,
    main_logits: TensorId,
    aux_logits: TensorId,
    labels: &[u8],
    mode: LossMode,
    aux_weight: f32,
    floor_cap: usize,
) -> Result<TensorId> {
    if aux_weight < 0.0 || !aux_weight.is_finite() {
        return Err(Error::Config(format!("aux_weight must be finite and >= 0, got {aux_weight}")));
    }
    let k = g.shape(main_logits)[1];
    let cw = class_weights(labels, k);
    let main = match mode {
        LossMode::Ohnem => ohnem_loss(g, main_logits, labels, floor_cap)?,
        LossMode::WeightedCe => weighted_cross_entropy(g, main_logits, labels, &cw)?,
    };
    let aux = weighted_cross_entropy(g, aux_logits, labels, &cw)?;
    let scaled = g.scale(aux, aux_weight);
    g.add(main, scaled)
}
