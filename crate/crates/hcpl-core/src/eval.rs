//! Mask-matched detection scoring: per-class average precision and the
//! class-mean mAP.
//!
//! Detections are greedily matched to ground-truth cells of the same image
//! by mask IoU strictly above the threshold; per-class AP uses the monotone
//! precision-envelope interpolation; the summary score is the mean over
//! classes present in the ground truth (absent classes are excluded by
//! default, configurable to score zero instead).

use std::collections::BTreeMap;

use crate::error::{HcplError, Result};
use crate::par;
use crate::segpost::InstanceMasks;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.6;
pub const MAX_CLASSES_PER_CELL: usize = 6;

/// A cell mask as a sorted set of row-major pixel indices within its image
/// frame. Masks compared against each other must share the frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask {
    pixels: Vec<u32>,
}

impl CellMask {
    pub fn from_indices(mut pixels: Vec<u32>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Self { pixels }
    }

    /// All pixels carrying `label` in an instance label map.
    pub fn from_label_map(masks: &InstanceMasks, label: u32) -> Self {
        let pixels = masks
            .labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == label)
            .map(|(p, _)| p as u32)
            .collect();
        Self { pixels }
    }

    pub fn pixels(&self) -> &[u32] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn intersection_len(&self, other: &CellMask) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.pixels.len() && j < other.pixels.len() {
            match self.pixels[i].cmp(&other.pixels[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// Intersection over union by pixel counting; two empty masks have no
    /// defined overlap and are rejected.
    pub fn iou(&self, other: &CellMask) -> Result<f64> {
        let inter = self.intersection_len(other);
        let union = self.len() + other.len() - inter;
        if union == 0 {
            return Err(HcplError::InvalidOperand {
                op: "mask_iou",
                detail: "both masks are empty".into(),
            });
        }
        Ok(inter as f64 / union as f64)
    }
}

/// One scored mask prediction for a single class.
#[derive(Debug, Clone)]
pub struct Detection {
    pub image_id: u32,
    pub class_id: usize,
    pub score: f64,
    pub mask: CellMask,
}

impl Detection {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_id >= num_classes {
            return Err(HcplError::Input(format!(
                "detection class {} out of range 0..{num_classes}",
                self.class_id
            )));
        }
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(HcplError::Input(format!("detection score {} outside [0,1]", self.score)));
        }
        if self.mask.is_empty() {
            return Err(HcplError::Input("detection mask is empty".into()));
        }
        Ok(())
    }
}

/// A ground-truth cell with its (non-empty, up to six) class set.
#[derive(Debug, Clone)]
pub struct GroundTruthCell {
    pub image_id: u32,
    pub cell_id: u32,
    pub classes: Vec<usize>,
    pub mask: CellMask,
}

impl GroundTruthCell {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() > MAX_CLASSES_PER_CELL {
            return Err(HcplError::Input(format!(
                "cell {} has {} classes, expected 1..={MAX_CLASSES_PER_CELL}",
                self.cell_id,
                self.classes.len()
            )));
        }
        let mut seen = self.classes.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(HcplError::Input(format!("cell {} repeats a class", self.cell_id)));
        }
        if self.classes.iter().any(|&c| c >= num_classes) {
            return Err(HcplError::Input(format!(
                "cell {} has a class out of range 0..{num_classes}",
                self.cell_id
            )));
        }
        if self.mask.is_empty() {
            return Err(HcplError::Input(format!("cell {} mask is empty", self.cell_id)));
        }
        Ok(())
    }
}

/// TP/FP flags for one class, in descending-score detection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchOutcome {
    pub flags: Vec<bool>,
    pub n_gt: usize,
}

/// Greedy matching for one class: detections of that class, in descending
/// score (ties keep insertion order), each take the unmatched same-image
/// ground-truth cell carrying the class with the highest IoU. A pair only
/// matches when IoU is strictly above `iou_th`; IoU equal to the threshold
/// does not match. Each ground-truth cell is consumed at most once.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthCell],
    iou_th: f64,
    class_id: usize,
) -> Result<MatchOutcome> {
    if !iou_th.is_finite() || !(0.0..1.0).contains(&iou_th) {
        return Err(HcplError::Config(format!("iou threshold {iou_th} outside [0,1)")));
    }
    if dets.iter().any(|d| !d.score.is_finite()) {
        return Err(HcplError::Input("detection score is not finite".into()));
    }

    let mut order: Vec<usize> =
        (0..dets.len()).filter(|&i| dets[i].class_id == class_id).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).expect("scores are finite"));

    let mut by_image: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut n_gt = 0usize;
    for (gi, gt) in gts.iter().enumerate() {
        if gt.classes.contains(&class_id) {
            by_image.entry(gt.image_id).or_default().push(gi);
            n_gt += 1;
        }
    }

    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(order.len());
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(f64, usize)> = None;
        if let Some(cands) = by_image.get(&det.image_id) {
            for &gi in cands {
                if taken[gi] {
                    continue;
                }
                let iou = det.mask.iou(&gts[gi].mask)?;
                if iou > iou_th && best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, gi));
                }
            }
        }
        match best {
            Some((_, gi)) => {
                taken[gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    Ok(MatchOutcome { flags, n_gt })
}

/// Area under the interpolated precision-recall curve, with the monotone
/// precision envelope. `flags` are TP/FP in descending-score order. With no
/// ground truth the score is 0; exclusion of such classes from a mean is the
/// caller's policy.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        prec.push(tp as f64 / (i + 1) as f64);
    }
    let mut env = prec.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            ap += env[i];
        }
    }
    ap / n_gt as f64
}

/// How classes with no ground-truth cells enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbsentClassPolicy {
    /// Leave absent classes out of the mean (default).
    Exclude,
    /// Count absent classes as zero AP.
    ScoreZero,
}

#[derive(Debug, Clone)]
pub struct MapReport {
    /// AP per class id; `None` when the class was excluded from the mean.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

pub fn map_with_policy(
    dets: &[Detection],
    gts: &[GroundTruthCell],
    num_classes: usize,
    iou_th: f64,
    policy: AbsentClassPolicy,
) -> Result<MapReport> {
    for det in dets {
        det.validate(num_classes)?;
    }
    for gt in gts {
        gt.validate(num_classes)?;
    }
    let per_class: Vec<Option<f64>> = par::try_map_indices(num_classes, |c| {
        let present = gts.iter().any(|g| g.classes.contains(&c));
        if !present {
            return Ok(match policy {
                AbsentClassPolicy::Exclude => None,
                AbsentClassPolicy::ScoreZero => Some(0.0),
            });
        }
        let outcome = match_detections(dets, gts, iou_th, c)?;
        Ok(Some(average_precision(&outcome.flags, outcome.n_gt)))
    })?;

    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if included.is_empty() {
        0.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    Ok(MapReport { per_class, map })
}

/// The 19-class mean score: AP per class present in ground truth, matched at
/// IoU > 0.6, averaged over the present classes.
pub fn map19(dets: &[Detection], gts: &[GroundTruthCell]) -> Result<MapReport> {
    map_with_policy(
        dets,
        gts,
        crate::dataset::NUM_CLASSES,
        DEFAULT_IOU_THRESHOLD,
        AbsentClassPolicy::Exclude,
    )
}
