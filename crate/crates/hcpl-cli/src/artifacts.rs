//! Dataset directory layout and the artifact formats shared between
//! commands: tensors per image, the per-cell row table, detections derived
//! from a prediction matrix, and the saved fusion profile.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hcpl_core::dataset::{extract_cell_crop, extract_cell_mask, instance_ids, CellDataset, CellRecord, NUM_CLASSES};
use hcpl_core::eval::{CellMask, Detection};
use hcpl_core::fusion::CorrelationProfile;
use hcpl_core::io::{f64_from_hex, f64_to_hex, read_tensor, rle_decode, rle_encode, write_detections_csv};
use hcpl_core::tensor::Tensor;
use hcpl_core::{par, HcplError, Result};

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const MAPS_DIR: &str = "maps";
pub const LABELS_FILE: &str = "labels.csv";
pub const TRUTH_FILE: &str = "truth.csv";

pub fn image_path(data: &Path, id: u32) -> PathBuf {
    data.join(IMAGES_DIR).join(format!("img_{id:05}.hcpl"))
}

pub fn mask_path(masks: &Path, id: u32) -> PathBuf {
    masks.join(format!("mask_{id:05}.hcpl"))
}

pub fn nuclei_map_path(data: &Path, id: u32) -> PathBuf {
    data.join(MAPS_DIR).join(format!("nuc_{id:05}.hcpl"))
}

pub fn cell_map_path(data: &Path, id: u32) -> PathBuf {
    data.join(MAPS_DIR).join(format!("cell_{id:05}.hcpl"))
}

/// Image ids found in a dataset directory, sorted ascending. Files must be
/// named `{prefix}_{id:05}.hcpl`.
pub fn list_ids(dir: &Path, prefix: &str) -> Result<Vec<u32>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| HcplError::io(dir.display().to_string(), e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| HcplError::io(dir.display().to_string(), e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('_')) {
            if let Some(stem) = rest.strip_suffix(".hcpl") {
                if let Ok(id) = stem.parse::<u32>() {
                    ids.push(id);
                }
            }
        }
    }
    if ids.is_empty() {
        return Err(HcplError::Input(format!(
            "no {prefix}_*.hcpl files under {}",
            dir.display()
        )));
    }
    ids.sort_unstable();
    Ok(ids)
}

/// One row of the cell table; `row` order matches the prediction matrix.
#[derive(Debug, Clone)]
pub struct CellEntry {
    pub image_id: u32,
    pub cell_id: u32,
    /// Full-image pixel mask, used for detections and IoU matching.
    pub mask: CellMask,
}

/// Cells of a dataset directory in deterministic order: images ascending,
/// instance labels ascending within an image. When `labels` is given every
/// cell id must be present in it; otherwise labels are all-zero.
pub fn build_cells(
    data: &Path,
    masks: &Path,
    crop_size: usize,
    labels: Option<&BTreeMap<u32, Vec<f64>>>,
) -> Result<(CellDataset, Vec<CellEntry>)> {
    let ids = list_ids(&data.join(IMAGES_DIR), "img")?;
    let per_image = par::try_map_indices(ids.len(), |k| {
        let id = ids[k];
        let image = read_tensor(image_path(data, id))?;
        let mask = read_tensor(mask_path(masks, id))?;
        let mut records = Vec::new();
        let mut entries = Vec::new();
        for inst in instance_ids(&mask) {
            let cell_id = id * hcpl_core::phantom::CELL_ID_STRIDE + inst;
            let row_labels = match labels {
                Some(map) => map
                    .get(&cell_id)
                    .cloned()
                    .ok_or_else(|| HcplError::Input(format!("cell {cell_id} missing from labels")))?,
                None => vec![0.0; NUM_CLASSES],
            };
            let pixels: Vec<u32> = mask
                .data()
                .iter()
                .enumerate()
                .filter(|(_, v)| **v == inst as f64)
                .map(|(i, _)| i as u32)
                .collect();
            records.push(CellRecord {
                image_id: id,
                cell_id,
                crop: extract_cell_crop(&image, &mask, inst, crop_size)?,
                labels: row_labels,
            });
            entries.push(CellEntry { image_id: id, cell_id, mask: CellMask::from_indices(pixels) });
        }
        Ok::<_, HcplError>((records, entries))
    })?;
    let mut cells = Vec::new();
    let mut entries = Vec::new();
    for (r, e) in per_image {
        cells.extend(r);
        entries.extend(e);
    }
    let dataset = CellDataset { num_classes: NUM_CLASSES, cells };
    dataset.validate()?;
    Ok((dataset, entries))
}

/// Matched (image crop, mask crop) pairs in cell-table order, for the
/// integrity detector.
pub fn load_cell_pairs(data: &Path, masks: &Path, crop_size: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let ids = list_ids(&data.join(IMAGES_DIR), "img")?;
    let per_image = par::try_map_indices(ids.len(), |k| {
        let id = ids[k];
        let image = read_tensor(image_path(data, id))?;
        let mask = read_tensor(mask_path(masks, id))?;
        let mut pairs = Vec::new();
        for inst in instance_ids(&mask) {
            pairs.push((
                extract_cell_crop(&image, &mask, inst, crop_size)?,
                extract_cell_mask(&mask, inst, crop_size)?,
            ));
        }
        Ok::<_, HcplError>(pairs)
    })?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn cells_csv_string(entries: &[CellEntry]) -> String {
    let mut text = String::from("row,image_id,cell_id,rle\n");
    for (row, e) in entries.iter().enumerate() {
        let _ = writeln!(text, "{row},{},{},{}", e.image_id, e.cell_id, rle_encode(&e.mask));
    }
    text
}

pub fn parse_cells_csv(text: &str, origin: &str) -> Result<Vec<CellEntry>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "row,image_id,cell_id,rle" {
        return Err(HcplError::Parse {
            path: origin.to_string(),
            detail: format!("unexpected header {header:?}"),
        });
    }
    let mut entries = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = |detail: String| HcplError::Parse { path: origin.to_string(), detail };
        let mut fields = line.splitn(4, ',');
        let row: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad row index", n + 2)))?;
        if row != n {
            return Err(bad(format!("line {}: row {row} out of order", n + 2)));
        }
        let image_id: u32 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad image id", n + 2)))?;
        let cell_id: u32 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad cell id", n + 2)))?;
        let rle = fields.next().ok_or_else(|| bad(format!("line {}: missing rle", n + 2)))?;
        entries.push(CellEntry { image_id, cell_id, mask: rle_decode(rle, origin)? });
    }
    Ok(entries)
}

/// Expand a prediction matrix into one detection per (cell, class) pair and
/// write them in the detections format.
pub fn write_matrix_detections(path: &Path, matrix: &Tensor, entries: &[CellEntry]) -> Result<()> {
    let (n, c) = (matrix.shape()[0], matrix.shape()[1]);
    if n != entries.len() {
        return Err(HcplError::Input(format!(
            "prediction matrix has {n} rows, cell table {}",
            entries.len()
        )));
    }
    let mut dets = Vec::with_capacity(n * c);
    for (row, entry) in entries.iter().enumerate() {
        for class in 0..c {
            dets.push(Detection {
                image_id: entry.image_id,
                class_id: class,
                score: matrix.at2(row, class),
                mask: entry.mask.clone(),
            });
        }
    }
    write_detections_csv(path, &dets)
}

/// Per-class gate statistics learned at training time, stored as text with
/// exact float bits. Histograms are not persisted; a loaded profile carries
/// only what fusion needs.
pub fn fusion_profile_string(profile: &CorrelationProfile) -> String {
    let mut text = String::new();
    let _ = writeln!(text, "rho_th {}", f64_to_hex(profile.rho_th));
    for c in 0..profile.num_classes() {
        let _ = writeln!(
            text,
            "class {c} defined {} r {}",
            profile.defined[c] as u8,
            f64_to_hex(profile.r[c])
        );
    }
    text
}

pub fn parse_fusion_profile(text: &str, origin: &str) -> Result<CorrelationProfile> {
    let bad = |detail: String| HcplError::Parse { path: origin.to_string(), detail };
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| bad("empty profile".into()))?;
    let rho_th = match head.strip_prefix("rho_th ") {
        Some(hex) => f64_from_hex(hex, origin)?,
        None => return Err(bad(format!("expected rho_th line, got {head:?}"))),
    };
    let mut r = Vec::new();
    let mut defined = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["class", idx, "defined", d, "r", hex] => {
                if idx.parse::<usize>() != Ok(r.len()) {
                    return Err(bad(format!("class lines out of order at {line:?}")));
                }
                defined.push(match *d {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(format!("bad defined flag in {line:?}"))),
                });
                r.push(f64_from_hex(hex, origin)?);
            }
            _ => return Err(bad(format!("unrecognised line {line:?}"))),
        }
    }
    if r.is_empty() {
        return Err(bad("profile lists no classes".into()));
    }
    let num_classes = r.len();
    Ok(CorrelationProfile {
        r,
        defined,
        rho_th,
        hist2d: vec![vec![]; num_classes],
        pairs: vec![0; num_classes],
    })
}
