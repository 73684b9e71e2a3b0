//! In-memory dataset of single-cell crops with per-cell labels, plus the
//! extraction of cell crops from full images and instance masks.
//!
//! Labels are real-valued in [0,1]: binary for weak labels inherited from
//! the image level, soft after confidence re-labelling.

use crate::error::{HcplError, Result};
use crate::scattering::resample_nearest;
use crate::tensor::Tensor;

/// Number of localisation classes in the full label schema (columns c0..c18).
pub const NUM_CLASSES: usize = 19;

/// One cell: a square 4-channel crop and its current training labels.
#[derive(Debug, Clone)]
pub struct CellRecord {
    pub image_id: u32,
    pub cell_id: u32,
    /// `[S, S, 4]`, channels red/green/blue/yellow.
    pub crop: Tensor,
    /// Length = dataset num_classes, values in [0,1].
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CellDataset {
    pub num_classes: usize,
    pub cells: Vec<CellRecord>,
}

impl CellDataset {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(HcplError::Input("dataset has zero classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for cell in &self.cells {
            if cell.labels.len() != self.num_classes {
                return Err(HcplError::Input(format!(
                    "cell {} has {} labels, dataset has {} classes",
                    cell.cell_id,
                    cell.labels.len(),
                    self.num_classes
                )));
            }
            if cell.labels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(HcplError::Input(format!("cell {} label outside [0,1]", cell.cell_id)));
            }
            if !seen.insert(cell.cell_id) {
                return Err(HcplError::Input(format!("duplicate cell id {}", cell.cell_id)));
            }
        }
        Ok(())
    }

    /// Cells grouped by source image, ascending image id; cell order within
    /// a bag follows dataset order.
    pub fn bags(&self) -> Vec<(u32, Vec<usize>)> {
        let mut by_image: Vec<(u32, Vec<usize>)> = Vec::new();
        for (idx, cell) in self.cells.iter().enumerate() {
            match by_image.iter_mut().find(|(id, _)| *id == cell.image_id) {
                Some((_, v)) => v.push(idx),
                None => by_image.push((cell.image_id, vec![idx])),
            }
        }
        by_image.sort_by_key(|(id, _)| *id);
        by_image
    }

    /// Image-level label as the union (elementwise max) of its cell labels.
    pub fn image_label(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0f64; self.num_classes];
        for &i in indices {
            for (o, l) in out.iter_mut().zip(&self.cells[i].labels) {
                *o = (*o).max(*l);
            }
        }
        out
    }

    /// Fraction of cells carrying each class (labels thresholded at 0.5).
    pub fn class_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.num_classes];
        for cell in &self.cells {
            for (cnt, l) in counts.iter_mut().zip(&cell.labels) {
                if *l >= 0.5 {
                    *cnt += 1.0;
                }
            }
        }
        let n = self.cells.len().max(1) as f64;
        counts.iter().map(|c| c / n).collect()
    }

    /// Inverse-frequency class weights, normalised to mean 1. Frequencies
    /// are floored at half a cell so absent classes stay finite.
    pub fn inverse_frequency_weights(&self) -> Vec<f64> {
        let freq = self.class_frequencies();
        let floor = 0.5 / self.cells.len().max(1) as f64;
        let raw: Vec<f64> = freq.iter().map(|f| 1.0 / f.max(floor)).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        raw.iter().map(|w| w / mean).collect()
    }
}

/// Bounding box of an instance id inside an id-mask; None if absent.
fn instance_bbox(instances: &Tensor, id: f64) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = (instances.shape()[0], instances.shape()[1]);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    let mut found = false;
    for i in 0..h {
        for j in 0..w {
            if instances.data()[i * w + j] == id {
                found = true;
                r0 = r0.min(i);
                r1 = r1.max(i);
                c0 = c0.min(j);
                c1 = c1.max(j);
            }
        }
    }
    if found {
        Some((r0, r1, c0, c1))
    } else {
        None
    }
}

/// Instance ids present in an id-mask, ascending, excluding background 0.
pub fn instance_ids(instances: &Tensor) -> Vec<u32> {
    let mut ids: Vec<u32> = instances
        .data()
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| *v as u32)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Cut one cell out of a full image: pixels of other cells are zeroed, the
/// bounding box is centred on a square canvas and resampled to `crop_size`.
pub fn extract_cell_crop(
    image: &Tensor,
    instances: &Tensor,
    id: u32,
    crop_size: usize,
) -> Result<Tensor> {
    if image.rank() != 3 || instances.rank() != 2 {
        return Err(HcplError::ShapeMismatch {
            op: "extract_cell_crop",
            detail: format!("image {:?}, instances {:?}", image.shape(), instances.shape()),
        });
    }
    let (h, w, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if instances.shape() != [h, w] {
        return Err(HcplError::ShapeMismatch {
            op: "extract_cell_crop",
            detail: "image and instance mask disagree on resolution".into(),
        });
    }
    let (r0, r1, c0, c1) = instance_bbox(instances, id as f64).ok_or_else(|| {
        HcplError::Input(format!("instance {} not present in mask", id))
    })?;
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    let side = bh.max(bw);
    let mut canvas = Tensor::zeros(vec![side, side, ch]);
    let (off_r, off_c) = ((side - bh) / 2, (side - bw) / 2);
    for i in 0..bh {
        for j in 0..bw {
            if instances.data()[(r0 + i) * w + (c0 + j)] == id as f64 {
                for k in 0..ch {
                    canvas.set3(off_r + i, off_c + j, k, image.at3(r0 + i, c0 + j, k));
                }
            }
        }
    }
    resample_nearest(&canvas, crop_size, crop_size)
}

/// Binary mask crop of one instance on the same square canvas as the image
/// crop (needed by the integrity features and crop-class generator).
pub fn extract_cell_mask(instances: &Tensor, id: u32, crop_size: usize) -> Result<Tensor> {
    let w = instances.shape()[1];
    let (r0, r1, c0, c1) = instance_bbox(instances, id as f64).ok_or_else(|| {
        HcplError::Input(format!("instance {} not present in mask", id))
    })?;
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    let side = bh.max(bw);
    let mut canvas = Tensor::zeros(vec![side, side, 1]);
    let (off_r, off_c) = ((side - bh) / 2, (side - bw) / 2);
    for i in 0..bh {
        for j in 0..bw {
            if instances.data()[(r0 + i) * w + (c0 + j)] == id as f64 {
                canvas.set3(off_r + i, off_c + j, 0, 1.0);
            }
        }
    }
    let scaled = resample_nearest(&canvas, crop_size, crop_size)?;
    scaled.reshaped(vec![crop_size, crop_size])
}
