//! Confidence re-labelling: weak binary labels inherited from image-level
//! annotations are re-scored by a committee of models, averaged, power
//! transformed and written back as soft labels over several rounds.
//!
//! Only classes whose weak label was positive are ever re-scored; weak
//! negatives stay exactly zero.

use crate::dataset::CellDataset;
use crate::error::{HcplError, Result};
use crate::models::PredictionMatrix;
use crate::tensor::Tensor;

/// Bins of the per-round confidence histograms.
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CraConfig {
    /// Power-transform exponent applied to combined confidences.
    pub beta: f64,
    /// Re-labelling rounds; zero leaves the dataset untouched.
    pub rounds: usize,
    /// Committee size expected from the trainer each round.
    pub committee: usize,
}

impl Default for CraConfig {
    fn default() -> Self {
        CraConfig { beta: 0.5, rounds: 2, committee: 3 }
    }
}

impl CraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(HcplError::Config("beta must be a positive real".into()));
        }
        if self.committee == 0 {
            return Err(HcplError::Config("committee size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Elementwise mean of committee predictions; image-stream vectors are
/// averaged only when every member carries one.
pub fn combine_confidences(matrices: &[PredictionMatrix]) -> Result<PredictionMatrix> {
    if matrices.is_empty() {
        return Err(HcplError::Input("empty committee".into()));
    }
    let shape = matrices[0].cell.shape().to_vec();
    for m in matrices {
        if m.cell.shape() != shape.as_slice() {
            return Err(HcplError::ShapeMismatch {
                op: "combine_confidences",
                detail: format!("{:?} vs {:?}", m.cell.shape(), shape),
            });
        }
    }
    let inv = 1.0 / matrices.len() as f64;
    let mut cell = vec![0.0; matrices[0].cell.numel()];
    for m in matrices {
        for (acc, v) in cell.iter_mut().zip(m.cell.data()) {
            *acc += v;
        }
    }
    cell.iter_mut().for_each(|v| *v *= inv);
    let image = if matrices.iter().all(|m| m.image.is_some()) {
        let mut img = vec![0.0; matrices[0].cell.numel()];
        for m in matrices {
            for (acc, v) in img.iter_mut().zip(m.image.as_ref().unwrap().data()) {
                *acc += v;
            }
        }
        img.iter_mut().for_each(|v| *v *= inv);
        Some(Tensor::from_vec(shape.clone(), img)?)
    } else {
        None
    };
    Ok(PredictionMatrix { cell: Tensor::from_vec(shape, cell)?, image })
}

/// c -> c^beta; maps [0,1] into [0,1] and inflates mid confidences when
/// beta < 1.
pub fn power_transform(c: f64, beta: f64) -> f64 {
    c.powf(beta)
}

/// One re-labelling pass: every positive entry of `labels` becomes the
/// power-transformed committee mean; non-positive entries stay zero.
pub fn relabel_round(
    labels: &[Vec<f64>],
    committee: &[PredictionMatrix],
    cfg: &CraConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if committee.len() != cfg.committee {
        return Err(HcplError::Input(format!(
            "trainer produced {} committee members, expected {}",
            committee.len(),
            cfg.committee
        )));
    }
    let combined = combine_confidences(committee)?;
    let (n, c) = (combined.cell.shape()[0], combined.cell.shape()[1]);
    if labels.len() != n {
        return Err(HcplError::Input(format!(
            "{} label rows for {} predicted cells",
            labels.len(),
            n
        )));
    }
    let mut out = Vec::with_capacity(n);
    for (i, row) in labels.iter().enumerate() {
        if row.len() != c {
            return Err(HcplError::Input(format!(
                "label row {} has {} classes, predictions have {}",
                i,
                row.len(),
                c
            )));
        }
        let probs = combined.cell_row(i);
        let new_row = row
            .iter()
            .zip(probs)
            .map(|(y, p)| {
                if *y > 0.0 {
                    power_transform(p.clamp(0.0, 1.0), cfg.beta)
                } else {
                    0.0
                }
            })
            .collect();
        out.push(new_row);
    }
    Ok(out)
}

/// Histogram of soft labels at the weak-positive entries, `HISTOGRAM_BINS`
/// equal bins over [0,1].
pub fn confidence_histogram(labels: &[Vec<f64>], positive_mask: &[Vec<bool>]) -> Vec<usize> {
    let mut bins = vec![0usize; HISTOGRAM_BINS];
    for (row, mask) in labels.iter().zip(positive_mask) {
        for (v, m) in row.iter().zip(mask) {
            if *m {
                let b = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                bins[b] += 1;
            }
        }
    }
    bins
}

/// Per-round diagnostics from a full re-labelling run.
#[derive(Debug, Clone)]
pub struct CraReport {
    /// One confidence histogram per executed round.
    pub histograms: Vec<Vec<usize>>,
    /// Weak-positive entry count (each histogram sums to this).
    pub positive_count: usize,
}

/// Full re-labelling: `rounds` iterations of train-committee / combine /
/// re-score. The trainer is called with the current dataset and the round
/// index and must return predictions for every cell in dataset order; the
/// cell field should already hold whatever fused probability the committee
/// reports. Eligibility is fixed by the original weak labels.
pub fn run_cra<F>(
    dataset: &CellDataset,
    mut trainer: F,
    cfg: &CraConfig,
) -> Result<(CellDataset, CraReport)>
where
    F: FnMut(&CellDataset, usize) -> Result<Vec<PredictionMatrix>>,
{
    cfg.validate()?;
    dataset.validate()?;
    let weak_mask: Vec<Vec<bool>> =
        dataset.cells.iter().map(|c| c.labels.iter().map(|y| *y > 0.0).collect()).collect();
    let positive_count = weak_mask.iter().flatten().filter(|m| **m).count();
    let weak_labels: Vec<Vec<f64>> = dataset.cells.iter().map(|c| c.labels.clone()).collect();

    let mut current = dataset.clone();
    let mut histograms = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let committee = trainer(&current, round)?;
        // eligibility comes from the original weak mask, not the soft values
        let new_labels = relabel_round(&weak_labels, &committee, cfg)?;
        for (cell, labels) in current.cells.iter_mut().zip(new_labels) {
            cell.labels = labels;
        }
        histograms.push(confidence_histogram(
            &current.cells.iter().map(|c| c.labels.clone()).collect::<Vec<_>>(),
            &weak_mask,
        ));
    }
    Ok((current, CraReport { histograms, positive_count }))
}
