//! Synthetic phantom dataset generator.
//!
//! Images are 4-channel (red microtubule filaments, green protein stain,
//! blue nucleus, yellow reticular texture) with one procedural green texture
//! per localisation class, painted into packed, non-touching cell disks.
//! Every cell carries one true class; the image-level weak label is the
//! union over its cells, so weak over-labelling is guaranteed by
//! construction and its expected rate has a closed form.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{extract_cell_crop, CellDataset, CellRecord, NUM_CLASSES};
use crate::error::{HcplError, Result};
use crate::eval::{CellMask, GroundTruthCell};
use crate::io::LabelRow;
use crate::par;
use crate::segpost::{InstanceMasks, ProbabilityMaps};
use crate::tensor::Tensor;

/// Cell ids are `image_id * CELL_ID_STRIDE + instance_label`.
pub const CELL_ID_STRIDE: u32 = 10_000;

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub num_images: usize,
    pub cells_per_image: usize,
    /// Nominal cell disk radius; per-cell radii jitter below it.
    pub cell_radius: usize,
    /// Class mixture over all [`NUM_CLASSES`] classes, summing to 1.
    pub mixture: Vec<f64>,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl PhantomConfig {
    /// Mixture putting equal weight on the first `active` classes.
    pub fn uniform_mixture(active: usize) -> Vec<f64> {
        let mut m = vec![0.0; NUM_CLASSES];
        for w in m.iter_mut().take(active) {
            *w = 1.0 / active as f64;
        }
        m
    }

    fn slot_side(&self) -> usize {
        2 * self.cell_radius + 4
    }

    fn slots_per_side(&self) -> usize {
        self.image_size / self.slot_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 || self.cells_per_image == 0 {
            return Err(HcplError::Config("need at least one image and one cell".into()));
        }
        if self.cell_radius < 4 {
            return Err(HcplError::Config("cell radius must be at least 4 pixels".into()));
        }
        if self.cells_per_image as u32 >= CELL_ID_STRIDE {
            return Err(HcplError::Config(format!(
                "cells per image must stay below {CELL_ID_STRIDE}"
            )));
        }
        if self.mixture.len() != NUM_CLASSES {
            return Err(HcplError::Config(format!(
                "mixture has {} weights, expected {NUM_CLASSES}",
                self.mixture.len()
            )));
        }
        if self.mixture.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(HcplError::Config("mixture weights must be non-negative".into()));
        }
        let sum: f64 = self.mixture.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(HcplError::Config(format!("mixture weights sum to {sum}, expected 1")));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(HcplError::Config("noise level must be non-negative".into()));
        }
        let slots = self.slots_per_side() * self.slots_per_side();
        if self.cells_per_image > slots {
            return Err(HcplError::Config(format!(
                "{} cells per image exceed the packable area of {slots} slots",
                self.cells_per_image
            )));
        }
        Ok(())
    }
}

/// One generated image with its ground truth.
#[derive(Debug, Clone)]
pub struct PhantomImage {
    pub image_id: u32,
    /// `[S, S, 4]` with noise applied.
    pub image: Tensor,
    /// Clean geometric nuclei/cell probability maps for the segmenter.
    pub maps: ProbabilityMaps,
    pub instances: InstanceMasks,
    /// True class of instance `k + 1` at index `k`.
    pub cell_classes: Vec<usize>,
    /// Union of the one-hot cell labels.
    pub weak_labels: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub images: Vec<PhantomImage>,
}

/// Geometry and per-cell random draws, fixed before painting.
struct CellSpec {
    centre: (f64, f64),
    radius: f64,
    nucleus: (f64, f64),
    n_radius: f64,
    class: usize,
    filament_angles: [f64; 3],
    dot_phase: f64,
    mito: Vec<(f64, f64)>,
    blob_angle: f64,
    stripe_offset: i64,
}

fn sample_class(mixture: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (c, &p) in mixture.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    mixture.iter().rposition(|&p| p > 0.0).unwrap_or(mixture.len() - 1)
}

fn sample_cell(cfg: &PhantomConfig, slot: usize, rng: &mut ChaCha8Rng) -> CellSpec {
    let side = cfg.slot_side();
    let per = cfg.slots_per_side();
    let (si, sj) = (slot / per, slot % per);
    let jitter_i = rng.random_range(-1..=1) as f64;
    let jitter_j = rng.random_range(-1..=1) as f64;
    let centre = (
        (si * side + side / 2) as f64 + jitter_i,
        (sj * side + side / 2) as f64 + jitter_j,
    );
    let radius = cfg.cell_radius as f64 * rng.random_range(0.82..0.98);
    let n_radius = (radius * 0.45).max(2.0);
    let max_off = (radius - n_radius - 1.0).max(0.0);
    let nucleus = (
        centre.0 + rng.random_range(-1.0f64..1.0).clamp(-max_off, max_off),
        centre.1 + rng.random_range(-1.0f64..1.0).clamp(-max_off, max_off),
    );
    let class = sample_class(&cfg.mixture, rng);
    let filament_angles = [
        rng.random_range(0.0..std::f64::consts::PI),
        rng.random_range(0.0..std::f64::consts::PI),
        rng.random_range(0.0..std::f64::consts::PI),
    ];
    let dot_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mito = (0..8)
        .map(|_| {
            let rho = rng.random_range((n_radius + 1.0)..(radius - 1.5).max(n_radius + 1.1));
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            (nucleus.0 + rho * phi.cos(), nucleus.1 + rho * phi.sin())
        })
        .collect();
    let blob_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let stripe_offset = rng.random_range(0..6) as i64;
    CellSpec {
        centre,
        radius,
        nucleus,
        n_radius,
        class,
        filament_angles,
        dot_phase,
        mito,
        blob_angle,
        stripe_offset,
    }
}

fn dist(a: (f64, f64), i: usize, j: usize) -> f64 {
    ((i as f64 - a.0).powi(2) + (j as f64 - a.1).powi(2)).sqrt()
}

/// Perpendicular distance from pixel to the line through `centre` at `angle`.
fn line_dist(centre: (f64, f64), angle: f64, i: usize, j: usize) -> f64 {
    let (di, dj) = (i as f64 - centre.0, j as f64 - centre.1);
    (-angle.sin() * di + angle.cos() * dj).abs()
}

fn filament_hit(spec: &CellSpec, i: usize, j: usize) -> bool {
    spec.filament_angles.iter().any(|&a| line_dist(spec.centre, a, i, j) <= 0.8)
}

fn reticular_hit(spec: &CellSpec, i: usize, j: usize) -> bool {
    let dc = dist(spec.centre, i, j);
    let dn = dist(spec.nucleus, i, j);
    dn > spec.n_radius && ((dc / 2.0) as usize) % 2 == 1
}

/// Green-channel intensity of one pixel inside the cell, by class texture.
fn green_value(spec: &CellSpec, i: usize, j: usize) -> f64 {
    let dc = dist(spec.centre, i, j);
    let dn = dist(spec.nucleus, i, j);
    let (r, rn) = (spec.radius, spec.n_radius);
    let g = 0.85;
    match spec.class {
        0 => {
            // nucleoplasm: fills the nucleus
            if dn <= rn {
                g
            } else {
                0.0
            }
        }
        1 => {
            // cytosol: everything but the nucleus
            if dn > rn {
                g
            } else {
                0.0
            }
        }
        2 => {
            // cell membrane ring
            if dc >= r - 1.5 {
                g
            } else {
                0.0
            }
        }
        3 => {
            // three nucleolar dots
            let dot_r = (rn * 0.28).max(1.2);
            for t in 0..3 {
                let phi = spec.dot_phase + t as f64 * std::f64::consts::TAU / 3.0;
                let c = (spec.nucleus.0 + 0.55 * rn * phi.cos(), spec.nucleus.1 + 0.55 * rn * phi.sin());
                if dist(c, i, j) <= dot_r {
                    return 0.95;
                }
            }
            0.0
        }
        4 => {
            // mitochondrial puncta in the cytoplasm
            if dn > rn && spec.mito.iter().any(|&c| dist(c, i, j) <= 1.3) {
                0.9
            } else {
                0.0
            }
        }
        5 => {
            // vertical stripes
            if (j as i64 - spec.stripe_offset).rem_euclid(4) < 2 {
                g
            } else {
                0.0
            }
        }
        6 => {
            // horizontal stripes
            if (i as i64 - spec.stripe_offset).rem_euclid(4) < 2 {
                g
            } else {
                0.0
            }
        }
        7 => g * (1.0 - dc / r),
        8 => g * (dc / r),
        9 => {
            // nuclear membrane ring
            if dn >= rn - 1.5 && dn <= rn {
                g
            } else {
                0.0
            }
        }
        10 => {
            // diagonal stripes
            if (i as i64 + j as i64 - spec.stripe_offset).rem_euclid(6) < 3 {
                g
            } else {
                0.0
            }
        }
        11 => {
            // block checkerboard
            if (i / 3 + j / 3) % 2 == 0 {
                g
            } else {
                0.0
            }
        }
        12 => {
            if (j as f64) < spec.centre.1 {
                g
            } else {
                0.0
            }
        }
        13 => {
            if (i as f64) < spec.centre.0 {
                g
            } else {
                0.0
            }
        }
        14 => {
            // single centrosome dot just outside the nucleus
            let c = (
                spec.nucleus.0 + (rn + 2.0) * spec.dot_phase.cos(),
                spec.nucleus.1 + (rn + 2.0) * spec.dot_phase.sin(),
            );
            if dist(c, i, j) <= 2.0 {
                0.95
            } else {
                0.0
            }
        }
        15 => {
            // two opposing cytoplasmic blobs
            let rr = 0.55 * r;
            let a = (spec.centre.0 + rr * spec.blob_angle.cos(), spec.centre.1 + rr * spec.blob_angle.sin());
            let b = (spec.centre.0 - rr * spec.blob_angle.cos(), spec.centre.1 - rr * spec.blob_angle.sin());
            if dist(a, i, j) <= 0.22 * r || dist(b, i, j) <= 0.22 * r {
                g
            } else {
                0.0
            }
        }
        16 => {
            // colocalised with the microtubule filaments
            if filament_hit(spec, i, j) {
                0.8
            } else {
                0.0
            }
        }
        17 => {
            // colocalised with the reticular texture
            if reticular_hit(spec, i, j) {
                0.8
            } else {
                0.0
            }
        }
        _ => 0.0,
    }
}

fn generate_image(cfg: &PhantomConfig, index: usize) -> PhantomImage {
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    let s = cfg.image_size;
    let per = cfg.slots_per_side();

    let mut slots: Vec<usize> = (0..per * per).collect();
    slots.shuffle(&mut rng);
    let mut chosen: Vec<usize> = slots.into_iter().take(cfg.cells_per_image).collect();
    chosen.sort_unstable();

    let specs: Vec<CellSpec> = chosen.iter().map(|&sl| sample_cell(cfg, sl, &mut rng)).collect();

    let mut image = Tensor::zeros(vec![s, s, 4]);
    let mut nuclei_map = vec![0.0f64; s * s];
    let mut cell_map = vec![0.0f64; s * s];
    let mut labels = vec![0u32; s * s];

    for (k, spec) in specs.iter().enumerate() {
        let r_ceil = spec.radius.ceil() as i64 + 1;
        let (ci, cj) = (spec.centre.0.round() as i64, spec.centre.1.round() as i64);
        for i in (ci - r_ceil).max(0)..(ci + r_ceil + 1).min(s as i64) {
            for j in (cj - r_ceil).max(0)..(cj + r_ceil + 1).min(s as i64) {
                let (i, j) = (i as usize, j as usize);
                if dist(spec.centre, i, j) > spec.radius {
                    continue;
                }
                labels[i * s + j] = (k + 1) as u32;
                cell_map[i * s + j] = 1.0;
                if dist(spec.nucleus, i, j) <= spec.n_radius {
                    nuclei_map[i * s + j] = 1.0;
                    image.set3(i, j, 2, 0.9);
                }
                if filament_hit(spec, i, j) {
                    image.set3(i, j, 0, 0.7);
                }
                if reticular_hit(spec, i, j) {
                    image.set3(i, j, 3, 0.55);
                }
                let g = green_value(spec, i, j);
                if g > 0.0 {
                    image.set3(i, j, 1, g);
                }
            }
        }
    }

    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("validated noise level");
        for v in image.data_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let mut weak = vec![0.0; NUM_CLASSES];
    for spec in &specs {
        weak[spec.class] = 1.0;
    }

    PhantomImage {
        image_id: index as u32,
        image,
        maps: ProbabilityMaps::new(
            Tensor::from_vec(vec![s, s], nuclei_map).expect("map shape"),
            Tensor::from_vec(vec![s, s], cell_map).expect("map shape"),
        )
        .expect("maps are clean binary geometry"),
        instances: InstanceMasks {
            height: s,
            width: s,
            labels,
            count: specs.len(),
        },
        cell_classes: specs.iter().map(|sp| sp.class).collect(),
        weak_labels: weak,
    }
}

/// Deterministic generation, parallel over images with merge by index.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<PhantomDataset> {
    cfg.validate()?;
    let images = par::try_map_indices(cfg.num_images, |i| Ok(generate_image(cfg, i)))?;
    Ok(PhantomDataset { images })
}

/// Always-sequential counterpart of [`generate_phantom`] for benchmarks.
pub fn generate_phantom_seq(cfg: &PhantomConfig) -> Result<PhantomDataset> {
    cfg.validate()?;
    let images = par::try_map_indices_seq(cfg.num_images, |i| Ok(generate_image(cfg, i)))?;
    Ok(PhantomDataset { images })
}

pub fn cell_id(image_id: u32, label: u32) -> u32 {
    image_id * CELL_ID_STRIDE + label
}

impl PhantomDataset {
    fn cells<F: Fn(&PhantomImage, usize) -> Vec<f64>>(
        &self,
        crop_size: usize,
        labels_of: F,
    ) -> Result<CellDataset> {
        let mut cells = Vec::new();
        for img in &self.images {
            let inst = img.instances.to_tensor();
            for k in 0..img.instances.count {
                let label = (k + 1) as u32;
                cells.push(CellRecord {
                    image_id: img.image_id,
                    cell_id: cell_id(img.image_id, label),
                    crop: extract_cell_crop(&img.image, &inst, label, crop_size)?,
                    labels: labels_of(img, k),
                });
            }
        }
        let ds = CellDataset { num_classes: NUM_CLASSES, cells };
        ds.validate()?;
        Ok(ds)
    }

    /// Cells labelled with their image's weak label union.
    pub fn weak_cell_dataset(&self, crop_size: usize) -> Result<CellDataset> {
        self.cells(crop_size, |img, _| img.weak_labels.clone())
    }

    /// Cells labelled with their true one-hot class.
    pub fn true_cell_dataset(&self, crop_size: usize) -> Result<CellDataset> {
        self.cells(crop_size, |img, k| {
            let mut one_hot = vec![0.0; NUM_CLASSES];
            one_hot[img.cell_classes[k]] = 1.0;
            one_hot
        })
    }

    /// Ground-truth records for the evaluator.
    pub fn ground_truth(&self) -> Vec<GroundTruthCell> {
        let mut out = Vec::new();
        for img in &self.images {
            for k in 0..img.instances.count {
                let label = (k + 1) as u32;
                out.push(GroundTruthCell {
                    image_id: img.image_id,
                    cell_id: cell_id(img.image_id, label),
                    classes: vec![img.cell_classes[k]],
                    mask: CellMask::from_label_map(&img.instances, label),
                });
            }
        }
        out
    }

    /// Weak labels as rows of the labels table.
    pub fn weak_label_rows(&self) -> Vec<LabelRow> {
        let mut out = Vec::new();
        for img in &self.images {
            for k in 0..img.instances.count {
                out.push(LabelRow {
                    cell_id: cell_id(img.image_id, (k + 1) as u32),
                    image_id: img.image_id,
                    labels: img.weak_labels.clone(),
                });
            }
        }
        out
    }

    /// Fraction of weak-positive (cell, class) pairs that are false at the
    /// cell level.
    pub fn over_label_rate(&self) -> f64 {
        let mut pairs = 0usize;
        let mut false_pairs = 0usize;
        for img in &self.images {
            for c in 0..NUM_CLASSES {
                if img.weak_labels[c] < 0.5 {
                    continue;
                }
                for &true_class in &img.cell_classes {
                    pairs += 1;
                    if true_class != c {
                        false_pairs += 1;
                    }
                }
            }
        }
        if pairs == 0 {
            0.0
        } else {
            false_pairs as f64 / pairs as f64
        }
    }
}

/// Closed-form expectation of [`PhantomDataset::over_label_rate`]: with k
/// cells per image and class probabilities p_c, the expected false and total
/// weak-positive pair counts per image are k(1-(1-p_c)^k) - k p_c and
/// k(1-(1-p_c)^k), so the rate is 1 - 1 / sum_c (1-(1-p_c)^k).
pub fn expected_over_label_rate(cfg: &PhantomConfig) -> f64 {
    let k = cfg.cells_per_image as f64;
    let denom: f64 = cfg.mixture.iter().map(|&p| 1.0 - (1.0 - p).powf(k)).sum();
    if denom == 0.0 {
        0.0
    } else {
        1.0 - 1.0 / denom
    }
}
