//! Loss terms of the training objective, evaluated as plain functions.
//!
//! ```text
//! L = w_d L_d + w_i L_i + sum_h (w_g L_g^h + w_s L_s^h + w_o L_o^h)
//! ```
//!
//! Every volumetric term only sees the sites inside the frustum mask. Sums use
//! pairwise reduction in canonical site order so results are bit-stable.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::categories::{CategoryId, CategoryTable};
use crate::error::{contract, invalid, Result};
use crate::geometry::DepthMap;
use crate::math::{exp, ln, pairwise_sum};
use crate::volume::{SparseVolume, VoxelMask};

pub const BCE_EPSILON: f64 = 1e-7;
/// Semantic weight of freespace sites.
pub const FREESPACE_WEIGHT: f64 = 0.001;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ClassWeightTable {
    pub weights: BTreeMap<CategoryId, f64>,
    pub freespace: CategoryId,
    pub freespace_weight: f64,
}

impl ClassWeightTable {
    /// Every category at `weight`, freespace at 0.001.
    pub fn uniform(categories: &CategoryTable, weight: f64) -> Self {
        Self {
            weights: categories.iter().map(|c| (c.id, weight)).collect(),
            freespace: categories.freespace(),
            freespace_weight: FREESPACE_WEIGHT,
        }
    }

    pub fn weight(&self, c: CategoryId) -> Option<f64> {
        if c == self.freespace {
            Some(self.freespace_weight)
        } else {
            self.weights.get(&c).copied()
        }
    }
}

/// `w_c = 1 / ln(1 + f_c)` with `f_c` the share of category `c` among all
/// counts. Categories without samples get the largest computed weight.
pub fn class_weights_inverse_log(
    counts: &BTreeMap<CategoryId, u64>,
    categories: &CategoryTable,
) -> Result<ClassWeightTable> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(invalid("class weights need at least one positive count"));
    }
    if let Some(c) = counts.keys().find(|c| categories.get(**c).is_none()) {
        return Err(invalid(format!("category {c} is not in the table")));
    }
    let mut weights = BTreeMap::new();
    for cat in categories.iter() {
        if let Some(&n) = counts.get(&cat.id).filter(|n| **n > 0) {
            weights.insert(cat.id, 1.0 / ln(1.0 + n as f64 / total as f64));
        }
    }
    let max = weights.values().copied().fold(0.0, f64::max);
    for cat in categories.iter() {
        weights.entry(cat.id).or_insert(max);
    }
    Ok(ClassWeightTable {
        weights,
        freespace: categories.freespace(),
        freespace_weight: FREESPACE_WEIGHT,
    })
}

/// Mean binary cross entropy with the probability clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn binary_cross_entropy(pred: &[f64], target: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let terms: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            -(y * ln(p) + (1.0 - y) * ln(1.0 - p))
        })
        .collect();
    pairwise_sum(&terms) / terms.len() as f64
}

fn check_support<P, Q>(a: &SparseVolume<P>, b: &SparseVolume<Q>, what: &str) -> Result<()> {
    if !a.same_support(b) {
        return Err(contract(format!("{what}: prediction and target site sets differ")));
    }
    Ok(())
}

fn mean(terms: &[f64]) -> f64 {
    if terms.is_empty() {
        0.0
    } else {
        pairwise_sum(terms) / terms.len() as f64
    }
}

/// Occupancy BCE, plus at level 0 the mean absolute distance error.
pub fn loss_geometry(
    occ_pred: &SparseVolume<f32>,
    occ_gt: &SparseVolume<f32>,
    sdf: Option<(&SparseVolume<f32>, &SparseVolume<f32>)>,
    level: usize,
    mask: &VoxelMask,
) -> Result<f64> {
    check_support(occ_pred, occ_gt, "occupancy")?;
    let (p, y): (Vec<f64>, Vec<f64>) = occ_pred
        .iter()
        .filter(|(c, _)| mask.contains(*c))
        .map(|(c, &p)| (p as f64, *occ_gt.get(c).expect("same support") as f64))
        .unzip();
    let mut loss = binary_cross_entropy(&p, &y);
    if level == 0 {
        let (sp, sg) = sdf.ok_or_else(|| invalid("level 0 needs distance predictions and targets"))?;
        check_support(sp, sg, "distance")?;
        let l1: Vec<f64> = sp
            .iter()
            .filter(|(c, _)| mask.contains(*c))
            .map(|(c, &x)| (x as f64 - *sg.get(c).expect("same support") as f64).abs())
            .collect();
        loss += mean(&l1);
    }
    Ok(loss)
}

fn cross_entropy(logits: &[f32], target: usize) -> f64 {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let terms: Vec<f64> = logits.iter().map(|&x| exp(x as f64 - m)).collect();
    m + ln(pairwise_sum(&terms)) - logits[target] as f64
}

/// Class-weighted cross entropy, normalized by the sum of the weights of the
/// contributing sites.
pub fn loss_semantic(
    logits: &SparseVolume<Vec<f32>>,
    targets: &SparseVolume<CategoryId>,
    weights: &ClassWeightTable,
    categories: &CategoryTable,
    mask: &VoxelMask,
) -> Result<f64> {
    check_support(logits, targets, "semantic")?;
    let (mut num, mut den) = (Vec::new(), Vec::new());
    for (c, l) in logits.iter().filter(|(c, _)| mask.contains(*c)) {
        let t = *targets.get(c).expect("same support");
        let channel = categories
            .channel_of(t)
            .ok_or_else(|| invalid(format!("unknown target category {t} at {c:?}")))?;
        let w = weights
            .weight(t)
            .ok_or_else(|| invalid(format!("no class weight for category {t}")))?;
        if l.len() != categories.len() {
            return Err(invalid(format!(
                "{} logits at {c:?} for {} categories",
                l.len(),
                categories.len()
            )));
        }
        num.push(w * cross_entropy(l, channel));
        den.push(w);
    }
    if den.is_empty() {
        return Ok(0.0);
    }
    Ok(pairwise_sum(&num) / pairwise_sum(&den))
}

/// Mean cross entropy over the instance channels.
pub fn loss_instance(logits: &SparseVolume<Vec<f32>>, targets: &SparseVolume<u32>, mask: &VoxelMask) -> Result<f64> {
    check_support(logits, targets, "instance")?;
    let channels = logits.iter().next().map_or(0, |(_, l)| l.len());
    let mut terms = Vec::new();
    for (c, l) in logits.iter() {
        let t = *targets.get(c).expect("same support") as usize;
        if l.len() != channels || t >= channels {
            return Err(invalid(format!("instance channel mismatch at {c:?}")));
        }
        if mask.contains(c) {
            terms.push(cross_entropy(l, t));
        }
    }
    Ok(mean(&terms))
}

/// Mean `|ln d_pred - ln d_gt|` over pixels valid in both maps. Only the
/// log-l1 part of the 2D depth objective; normal and gradient terms are not
/// evaluated.
pub fn depth_loss_log_l1(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(invalid("depth maps differ in size"));
    }
    let terms: Vec<f64> = pred
        .values
        .iter()
        .zip(&gt.values)
        .filter(|(p, g)| DepthMap::is_valid_depth(**p) && DepthMap::is_valid_depth(**g))
        .map(|(&p, &g)| (ln(p as f64) - ln(g as f64)).abs())
        .collect();
    Ok(mean(&terms))
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LossWeights {
    pub w_d: f64,
    pub w_i: f64,
    pub w_g: f64,
    pub w_s: f64,
    pub w_o: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_d: 1.0,
            w_i: 1.0,
            w_g: 1.0,
            w_s: 1.0,
            w_o: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_d, self.w_i, self.w_g, self.w_s, self.w_o];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `L_g^h`, `L_s^h` and `L_o^h` of one level.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LevelLosses {
    pub geometry: f64,
    pub semantic: f64,
    pub instance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LossParts {
    /// 2D depth loss `L_d`.
    pub depth: f64,
    /// 2D instance segmentation loss `L_i`.
    pub instance_2d: f64,
    /// Indexed by level.
    pub levels: Vec<LevelLosses>,
}

/// Weighted total over `levels` hierarchy levels.
pub fn loss_total(parts: &LossParts, w: &LossWeights, levels: usize) -> Result<f64> {
    w.validate()?;
    if parts.levels.len() != levels {
        return Err(invalid(format!(
            "{} level terms given for {levels} hierarchy levels",
            parts.levels.len()
        )));
    }
    let mut total = w.w_d * parts.depth + w.w_i * parts.instance_2d;
    for l in &parts.levels {
        total += w.w_g * l.geometry + w.w_s * l.semantic + w.w_o * l.instance;
    }
    Ok(total)
}
