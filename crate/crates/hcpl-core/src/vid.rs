//! Visual integrity scoring: morphological features feed a boosted-tree
//! good/bad classifier, a small CNN predicts how much of the cell was
//! cropped away, and the two combine into one per-cell weight.

use crate::error::{HcplError, Result};
use crate::gbt::GbtModel;
use crate::graph::{Tape, ValueId};
use crate::layers::{backbone_forward, classifier_logits, global_average_pool, BackboneConfig};
use crate::models::{register_params, ParamSet, RegisteredParams};
use crate::tensor::Tensor;
use crate::train::{cosine_lr, Adam};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Fraction bands of removed cell area and their class labels 1..=4.
pub const CROP_BANDS: [f64; 3] = [0.3, 0.5, 0.8];

/// Visibility value per crop class; higher crop classes carry less weight.
pub const VISIBILITY_VALUES: [f64; 4] = [1.0, 1.0, 0.5, 0.1];

/// Default threshold on the (blue+green)/total mass ratio.
pub const INTENSITY_FLAG_THRESHOLD: f64 = 0.05;

/// The eight morphological features of one cell mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphFeatures {
    pub bbox_height: f64,
    pub bbox_width: f64,
    pub aspect_ratio: f64,
    pub bbox_area: f64,
    pub mask_area: f64,
    pub mask_perimeter: f64,
    pub largest_dimension: f64,
    pub intensity_flag: f64,
}

impl MorphFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.bbox_height,
            self.bbox_width,
            self.aspect_ratio,
            self.bbox_area,
            self.mask_area,
            self.mask_perimeter,
            self.largest_dimension,
            self.intensity_flag,
        ]
    }

    pub const LEN: usize = 8;
}

/// Extract the eight features from a binary mask and its 4-channel image.
/// The perimeter counts mask pixels with a 4-neighbour outside the mask
/// (off-grid counts as outside); the intensity flag fires when the blue and
/// green channels carry more than `intensity_threshold` of the total pixel
/// mass inside the mask.
pub fn morph_features(
    mask: &Tensor,
    image: &Tensor,
    intensity_threshold: f64,
) -> Result<MorphFeatures> {
    if mask.rank() != 2 {
        return Err(HcplError::ShapeMismatch {
            op: "morph_features",
            detail: format!("mask must be [h,w], got {:?}", mask.shape()),
        });
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if image.rank() != 3 || image.shape()[0] != h || image.shape()[1] != w || image.shape()[2] != 4
    {
        return Err(HcplError::ShapeMismatch {
            op: "morph_features",
            detail: format!("image {:?} does not match mask {}x{}x4", image.shape(), h, w),
        });
    }
    let on = |i: usize, j: usize| mask.data()[i * w + j] > 0.5;
    let (mut min_i, mut max_i, mut min_j, mut max_j) = (usize::MAX, 0, usize::MAX, 0);
    let mut area = 0usize;
    let mut perimeter = 0usize;
    for i in 0..h {
        for j in 0..w {
            if !on(i, j) {
                continue;
            }
            area += 1;
            min_i = min_i.min(i);
            max_i = max_i.max(i);
            min_j = min_j.min(j);
            max_j = max_j.max(j);
            let boundary = i == 0
                || i == h - 1
                || j == 0
                || j == w - 1
                || !on(i - 1, j)
                || !on(i + 1, j)
                || !on(i, j - 1)
                || !on(i, j + 1);
            if boundary {
                perimeter += 1;
            }
        }
    }
    if area == 0 {
        return Err(HcplError::Input("empty mask has no morphology".into()));
    }
    let bbox_height = (max_i - min_i + 1) as f64;
    let bbox_width = (max_j - min_j + 1) as f64;
    let mut bg_mass = 0.0;
    let mut total_mass = 0.0;
    for i in 0..h {
        for j in 0..w {
            if on(i, j) {
                for c in 0..4 {
                    let v = image.at3(i, j, c);
                    total_mass += v;
                    // channel order: red, green, blue, yellow
                    if c == 1 || c == 2 {
                        bg_mass += v;
                    }
                }
            }
        }
    }
    let ratio = if total_mass > 0.0 { bg_mass / total_mass } else { 0.0 };
    Ok(MorphFeatures {
        bbox_height,
        bbox_width,
        aspect_ratio: bbox_height / bbox_width,
        bbox_area: bbox_height * bbox_width,
        mask_area: area as f64,
        mask_perimeter: perimeter as f64,
        largest_dimension: bbox_height.max(bbox_width),
        intensity_flag: if ratio > intensity_threshold { 1.0 } else { 0.0 },
    })
}

/// Class 1..=4 for a cropped-out fraction; bands closed on the left.
pub fn crop_class_of(fraction: f64) -> Result<u8> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(HcplError::InvalidOperand {
            op: "crop_class",
            detail: format!("fraction {} outside [0,1)", fraction),
        });
    }
    Ok(match fraction {
        f if f < CROP_BANDS[0] => 1,
        f if f < CROP_BANDS[1] => 2,
        f if f < CROP_BANDS[2] => 3,
        _ => 4,
    })
}

/// Remove a border region totalling `fraction` of the mask area by cutting
/// from one randomly chosen side, zeroing both image and mask. Returns the
/// cropped pair and the fraction's class.
pub fn crop_dataset_gen(
    image: &Tensor,
    mask: &Tensor,
    fraction: f64,
    seed: u64,
) -> Result<(Tensor, Tensor, u8)> {
    let class = crop_class_of(fraction)?;
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if image.shape()[0] != h || image.shape()[1] != w {
        return Err(HcplError::ShapeMismatch {
            op: "crop_dataset_gen",
            detail: format!("image {:?} vs mask {:?}", image.shape(), mask.shape()),
        });
    }
    let area = mask.data().iter().filter(|v| **v > 0.5).count();
    if area == 0 {
        return Err(HcplError::Input("cannot crop an empty mask".into()));
    }
    if fraction == 0.0 {
        return Ok((image.clone(), mask.clone(), class));
    }
    let target = (fraction * area as f64).round() as usize;
    if target >= area {
        return Err(HcplError::InvalidOperand {
            op: "crop_dataset_gen",
            detail: format!("removing {} of {} mask pixels leaves nothing", target, area),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = rng.random_range(0..4u8);
    // advance a cutting line inward until enough mask pixels fall behind it
    let mut removed = 0usize;
    let mut cut_lines = 0usize;
    let limit = if side < 2 { h } else { w };
    let line_count = |line: usize| -> usize {
        let mut c = 0;
        match side {
            0 => {
                // from the top: row `line`
                for j in 0..w {
                    if mask.data()[line * w + j] > 0.5 {
                        c += 1;
                    }
                }
            }
            1 => {
                // from the bottom
                for j in 0..w {
                    if mask.data()[(h - 1 - line) * w + j] > 0.5 {
                        c += 1;
                    }
                }
            }
            2 => {
                // from the left: column `line`
                for i in 0..h {
                    if mask.data()[i * w + line] > 0.5 {
                        c += 1;
                    }
                }
            }
            _ => {
                // from the right
                for i in 0..h {
                    if mask.data()[i * w + (w - 1 - line)] > 0.5 {
                        c += 1;
                    }
                }
            }
        }
        c
    };
    while cut_lines < limit && removed < target {
        removed += line_count(cut_lines);
        cut_lines += 1;
    }
    let ch = image.shape().get(2).copied().unwrap_or(1);
    let mut out_img = image.clone();
    let mut out_mask = mask.clone();
    let zero_at = |i: usize, j: usize, img: &mut Tensor, msk: &mut Tensor| {
        msk.data_mut()[i * w + j] = 0.0;
        for c in 0..ch {
            img.data_mut()[(i * w + j) * ch + c] = 0.0;
        }
    };
    for line in 0..cut_lines {
        match side {
            0 => (0..w).for_each(|j| zero_at(line, j, &mut out_img, &mut out_mask)),
            1 => (0..w).for_each(|j| zero_at(h - 1 - line, j, &mut out_img, &mut out_mask)),
            2 => (0..h).for_each(|i| zero_at(i, line, &mut out_img, &mut out_mask)),
            _ => (0..h).for_each(|i| zero_at(i, w - 1 - line, &mut out_img, &mut out_mask)),
        }
    }
    if out_mask.data().iter().all(|v| *v <= 0.5) {
        return Err(HcplError::InvalidOperand {
            op: "crop_dataset_gen",
            detail: "crop removed the whole cell".into(),
        });
    }
    Ok((out_img, out_mask, class))
}

/// 4-class crop-ratio classifier: toy backbone, GAP, softmax head.
#[derive(Debug, Clone)]
pub struct CropRatioModel {
    pub backbone: BackboneConfig,
    pub params: ParamSet,
}

pub fn init_crop_ratio_model(backbone: BackboneConfig, seed: u64) -> Result<CropRatioModel> {
    backbone.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, t) in crate::layers::init_backbone_params(&backbone, &mut rng)? {
        params.push(name, t);
    }
    let d = backbone.feature_dim();
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let data: Vec<f64> = (0..d * 4).map(|_| normal.sample(&mut rng)).collect();
    params.push("head.w", Tensor::from_vec(vec![d, 4], data)?);
    params.push("head.b", Tensor::zeros(vec![4]));
    Ok(CropRatioModel { backbone, params })
}

fn crop_ratio_logits(
    tape: &mut Tape,
    reg: &RegisteredParams,
    backbone: &BackboneConfig,
    x: ValueId,
) -> Result<ValueId> {
    let stages: Vec<(ValueId, ValueId)> = (0..backbone.stage_widths.len())
        .map(|i| {
            Ok((
                reg.vid(&format!("backbone.stage{}.kernel", i))?,
                reg.vid(&format!("backbone.stage{}.bias", i))?,
            ))
        })
        .collect::<Result<_>>()?;
    let r = backbone_forward(tape, x, &stages, backbone)?;
    let a = tape.relu(r)?;
    let s = global_average_pool(tape, a)?;
    classifier_logits(tape, s, reg.vid("head.w")?, reg.vid("head.b")?)
}

/// Softmax probabilities over the four crop classes.
pub fn crop_ratio_classify(model: &CropRatioModel, cell: &Tensor) -> Result<[f64; 4]> {
    let mut tape = Tape::new();
    let reg = register_params(&mut tape, &model.params, false);
    let x = tape.constant(cell.clone());
    let logits = crop_ratio_logits(&mut tape, &reg, &model.backbone, x)?;
    let probs = tape.softmax(logits)?;
    let data = tape.value(probs).data();
    Ok([data[0], data[1], data[2], data[3]])
}

/// Train the crop classifier with cross-entropy; `examples` pairs a crop
/// with its class label 1..=4. Returns per-step losses.
pub fn train_crop_ratio(
    model: &mut CropRatioModel,
    examples: &[(Tensor, u8)],
    epochs: usize,
    batch_size: usize,
    lr0: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(HcplError::Input("no crop examples".into()));
    }
    if epochs == 0 || batch_size == 0 || !(lr0 > 0.0) {
        return Err(HcplError::Config("epochs, batch_size and lr0 must be positive".into()));
    }
    for (_, class) in examples {
        if !(1..=4).contains(class) {
            return Err(HcplError::Input(format!("crop class {} outside 1..=4", class)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes: Vec<Vec<usize>> = model.params.iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut adam = Adam::new(&shapes);
    let steps_per_epoch = examples.len().div_ceil(batch_size);
    let total_steps = epochs * steps_per_epoch;
    let mut losses = Vec::with_capacity(total_steps);
    let mut global_step = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let lr = cosine_lr(global_step, total_steps, lr0, lr0 / 100.0);
            let mut tape = Tape::new();
            let reg = register_params(&mut tape, &model.params, true);
            let mut per_example = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (crop, class) = &examples[idx];
                let x = tape.constant(crop.clone());
                let logits = crop_ratio_logits(&mut tape, &reg, &model.backbone, x)?;
                let probs = tape.softmax(logits)?;
                let safe = tape.clamp(probs, 1e-12, 1.0)?;
                let logp = tape.log(safe)?;
                let mut onehot = vec![0.0; 4];
                onehot[(*class - 1) as usize] = 1.0;
                let y = tape.constant(Tensor::from_vec(vec![4], onehot)?);
                let picked = tape.mul(logp, y)?;
                per_example.push(tape.reduce_sum(picked, None)?);
            }
            let mut rows = Vec::with_capacity(per_example.len());
            for &v in &per_example {
                rows.push(tape.reshape(v, vec![1])?);
            }
            let stacked = tape.concat(&rows, 0)?;
            let mean = tape.reduce_mean(stacked, None)?;
            let neg = tape.scalar_const(-1.0);
            let loss = tape.mul(mean, neg)?;
            let loss_val = tape.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(HcplError::Diverged(format!(
                    "non-finite crop loss at epoch {}",
                    epoch
                )));
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = reg
                .vids()
                .iter()
                .map(|&vid| {
                    tape.grad(vid)
                        .ok_or_else(|| HcplError::Graph("parameter missing gradient".into()))
                })
                .collect::<Result<_>>()?;
            let mut param_refs: Vec<&mut Tensor> =
                model.params.iter_mut().map(|(_, t)| t).collect();
            adam.step(&mut param_refs, &grads, lr)?;
            losses.push(loss_val);
            global_step += 1;
        }
    }
    Ok(losses)
}

/// Combine the good-cell probability with crop-band probabilities:
/// weight = good_prob * sum_k crop_probs[k] * v[k].
pub fn vid_weight(good_prob: f64, crop_probs: &[f64; 4], visibility: &[f64; 4]) -> Result<f64> {
    if !(0.0..=1.0).contains(&good_prob) {
        return Err(HcplError::InvalidOperand {
            op: "vid_weight",
            detail: format!("good_prob {} outside [0,1]", good_prob),
        });
    }
    for p in crop_probs {
        if !(0.0..=1.0).contains(p) {
            return Err(HcplError::InvalidOperand {
                op: "vid_weight",
                detail: format!("crop probability {} outside [0,1]", p),
            });
        }
    }
    for v in visibility {
        if !(0.0..=1.0).contains(v) {
            return Err(HcplError::InvalidOperand {
                op: "vid_weight",
                detail: format!("visibility value {} outside [0,1]", v),
            });
        }
    }
    let vis: f64 = crop_probs.iter().zip(visibility).map(|(p, v)| p * v).sum();
    Ok((good_prob * vis).clamp(0.0, 1.0))
}

/// Both trained integrity modules plus the combination constants.
#[derive(Debug, Clone)]
pub struct VidModel {
    pub gbt: GbtModel,
    pub crop: CropRatioModel,
    pub visibility: [f64; 4],
    pub intensity_threshold: f64,
}

impl VidModel {
    /// Per-cell integrity weight from the cell's image and mask.
    pub fn weight(&self, image: &Tensor, mask: &Tensor) -> Result<f64> {
        let features = morph_features(mask, image, self.intensity_threshold)?;
        let good = self.gbt.predict_proba(&features.to_vec())?;
        let crop_probs = crop_ratio_classify(&self.crop, image)?;
        vid_weight(good, &crop_probs, &self.visibility)
    }
}
