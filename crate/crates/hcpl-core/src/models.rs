//! The three model families assembled from layers:
//!
//! * DSA: dual-stream attention-style bag model; per-cell descriptors feed
//!   an image stream (bag max-pool then FC1) and a cell stream (FC2).
//! * CLA: single cell stream backbone -> Weibull -> GAP -> power norm -> head.
//! * CLH: backbone fused with fixed scattering features -> GAP -> head.
//!
//! Probabilities are per-class logistic values: cells carry multiple
//! locations, so classes are scored independently rather than softmaxed.

use crate::dataset::CellRecord;
use crate::error::{HcplError, Result};
use crate::graph::{Tape, ValueId};
use crate::layers::{
    backbone_forward, bag_max_pool, classifier_logits, global_average_pool, grad_cam,
    guard_features, init_backbone_params, power_normalise, weibull_activation, BackboneConfig,
    PowerNormParams, PowerNormVids, WeibullParams, WeibullVids,
};
use crate::loss::{classification_loss, LossKind};
use crate::par;
use crate::scattering::{build_filter_bank, hybrid_fuse, resample_nearest, scattering2d, FilterBank};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Channel of the protein stain inside 4-channel crops.
pub const PROTEIN_CHANNEL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    Dsa,
    Cla,
    Clh,
}

impl ModelFamily {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelFamily::Dsa => "dsa",
            ModelFamily::Cla => "cla",
            ModelFamily::Clh => "clh",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "dsa" => Ok(ModelFamily::Dsa),
            "cla" => Ok(ModelFamily::Cla),
            "clh" => Ok(ModelFamily::Clh),
            other => Err(HcplError::Config(format!("unknown model family '{}'", other))),
        }
    }
}

/// Scattering branch settings for the CLH family.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringSettings {
    pub j_scales: usize,
    pub orientations: usize,
    pub kernel_size: usize,
    pub max_order: usize,
    pub mix_width: usize,
}

impl ScatteringSettings {
    pub fn num_channels(&self) -> usize {
        let (j, l) = (self.j_scales, self.orientations);
        let second = if self.max_order >= 2 { l * l * j * (j - 1) / 2 } else { 0 };
        1 + j * l + second
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    /// Image-stream loss weight (DSA).
    pub w1: f64,
    /// Cell-stream loss weight; defaults to 0.2 * w1.
    pub w2: f64,
    pub scattering: Option<ScatteringSettings>,
}

impl ModelConfig {
    pub fn new(family: ModelFamily, backbone: BackboneConfig, num_classes: usize) -> Self {
        let scattering = if family == ModelFamily::Clh {
            Some(ScatteringSettings {
                j_scales: 2,
                orientations: 4,
                kernel_size: 9,
                max_order: 2,
                mix_width: backbone.stage_widths.last().copied().unwrap_or(16),
            })
        } else {
            None
        };
        ModelConfig { family, backbone, num_classes, w1: 1.0, w2: 0.2, scattering }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 {
            return Err(HcplError::Config("num_classes must be positive".into()));
        }
        if self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(HcplError::Config("stream loss weights must be non-negative".into()));
        }
        if self.family == ModelFamily::Clh {
            let s = self
                .scattering
                .as_ref()
                .ok_or_else(|| HcplError::Config("clh model needs scattering settings".into()))?;
            if s.max_order == 0 || s.max_order > 2 {
                return Err(HcplError::Config("scattering max_order must be 1 or 2".into()));
            }
            let side = 1usize << s.j_scales;
            if self.backbone.input_h % side != 0 || self.backbone.input_w % side != 0 {
                return Err(HcplError::Config(format!(
                    "input {}x{} not divisible by 2^{} for the scattering branch",
                    self.backbone.input_h, self.backbone.input_w, s.j_scales
                )));
            }
        }
        Ok(())
    }

    /// Descriptor dimension entering the classifier head.
    pub fn head_input_dim(&self) -> usize {
        match self.family {
            ModelFamily::Clh => self.scattering.as_ref().expect("validated").mix_width,
            _ => self.backbone.feature_dim(),
        }
    }
}

/// Ordered, named parameter collection. Order is fixed at initialisation and
/// shared by the optimiser state and the serialised form.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {}", name);
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some((_, t)) => {
                if t.shape() != tensor.shape() {
                    return Err(HcplError::ShapeMismatch {
                        op: "param_set",
                        detail: format!(
                            "{}: {:?} vs {:?}",
                            name,
                            t.shape(),
                            tensor.shape()
                        ),
                    });
                }
                *t = tensor;
                Ok(())
            }
            None => Err(HcplError::Config(format!("unknown parameter '{}'", name))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A model: configuration plus current parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    /// Seed the parameters were initialised from.
    pub init_seed: u64,
}

/// Initialise a model deterministically from a seed.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, t) in init_backbone_params(&cfg.backbone, &mut rng)? {
        params.push(name, t);
    }
    let d = cfg.backbone.feature_dim();
    let c = cfg.num_classes;
    let linear = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
        let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Tensor::from_vec(vec![rows, cols], data).expect("linear shape")
    };
    match cfg.family {
        ModelFamily::Dsa => {
            push_weibull(&mut params, &WeibullParams::init());
            push_power_norm(&mut params, &PowerNormParams::init());
            let w_img = linear(&mut rng, d, c);
            params.push("fc_image.w", w_img);
            params.push("fc_image.b", Tensor::zeros(vec![c]));
            let w_cell = linear(&mut rng, d, c);
            params.push("fc_cell.w", w_cell);
            params.push("fc_cell.b", Tensor::zeros(vec![c]));
        }
        ModelFamily::Cla => {
            push_weibull(&mut params, &WeibullParams::init());
            push_power_norm(&mut params, &PowerNormParams::init());
            let w = linear(&mut rng, d, c);
            params.push("head.w", w);
            params.push("head.b", Tensor::zeros(vec![c]));
        }
        ModelFamily::Clh => {
            let s = cfg.scattering.as_ref().expect("validated");
            let cin = d + s.num_channels();
            let normal = Normal::new(0.0, (2.0 / cin as f64).sqrt()).expect("positive std");
            let data: Vec<f64> =
                (0..cin * s.mix_width).map(|_| normal.sample(&mut rng)).collect();
            params.push("fusion.kernel", Tensor::from_vec(vec![1, 1, cin, s.mix_width], data)?);
            params.push("fusion.bias", Tensor::zeros(vec![s.mix_width]));
            let w = linear(&mut rng, s.mix_width, c);
            params.push("head.w", w);
            params.push("head.b", Tensor::zeros(vec![c]));
        }
    }
    Ok(Model { cfg: cfg.clone(), params, init_seed: seed })
}

fn push_weibull(params: &mut ParamSet, p: &WeibullParams) {
    let [ul, uz, ug, ue] = p.to_unconstrained();
    params.push("weibull.u_lambda", Tensor::scalar(ul));
    params.push("weibull.u_zeta", Tensor::scalar(uz));
    params.push("weibull.u_gamma", Tensor::scalar(ug));
    params.push("weibull.u_eta", Tensor::scalar(ue));
}

fn push_power_norm(params: &mut ParamSet, p: &PowerNormParams) {
    let [ua, ub] = p.to_unconstrained();
    params.push("pnorm.u_alpha", Tensor::scalar(ua));
    params.push("pnorm.u_beta", Tensor::scalar(ub));
}

/// Parameters registered on a tape, addressable by name.
pub struct RegisteredParams {
    names: Vec<String>,
    vids: Vec<ValueId>,
}

impl RegisteredParams {
    pub fn vid(&self, name: &str) -> Result<ValueId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vids[i])
            .ok_or_else(|| HcplError::Config(format!("parameter '{}' not registered", name)))
    }

    pub fn vids(&self) -> &[ValueId] {
        &self.vids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn backbone_stages(&self, n: usize) -> Result<Vec<(ValueId, ValueId)>> {
        (0..n)
            .map(|i| {
                Ok((
                    self.vid(&format!("backbone.stage{}.kernel", i))?,
                    self.vid(&format!("backbone.stage{}.bias", i))?,
                ))
            })
            .collect()
    }

    fn weibull_vids(&self) -> Result<WeibullVids> {
        Ok(WeibullVids {
            u_lambda: self.vid("weibull.u_lambda")?,
            u_zeta: self.vid("weibull.u_zeta")?,
            u_gamma: self.vid("weibull.u_gamma")?,
            u_eta: self.vid("weibull.u_eta")?,
        })
    }

    fn power_norm_vids(&self) -> Result<PowerNormVids> {
        Ok(PowerNormVids {
            u_alpha: self.vid("pnorm.u_alpha")?,
            u_beta: self.vid("pnorm.u_beta")?,
        })
    }
}

/// Put every parameter of a set on the tape.
pub fn register_params(tape: &mut Tape, params: &ParamSet, requires_grad: bool) -> RegisteredParams {
    let mut names = Vec::with_capacity(params.len());
    let mut vids = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        names.push(name.to_string());
        vids.push(tape.leaf(t.clone(), requires_grad));
    }
    RegisteredParams { names, vids }
}

/// Per-cell descriptor shared by DSA and CLA:
/// backbone -> rectified guard -> Weibull -> GAP -> power norm.
pub fn cell_descriptor(
    tape: &mut Tape,
    reg: &RegisteredParams,
    cfg: &ModelConfig,
    x: ValueId,
) -> Result<ValueId> {
    let stages = reg.backbone_stages(cfg.backbone.stage_widths.len())?;
    let r = backbone_forward(tape, x, &stages, &cfg.backbone)?;
    descriptor_from_features(tape, reg, r)
}

/// Descriptor tail from precomputed backbone features.
fn descriptor_from_features(
    tape: &mut Tape,
    reg: &RegisteredParams,
    r: ValueId,
) -> Result<ValueId> {
    let rg = guard_features(tape, r)?;
    let wb = reg.weibull_vids()?;
    let t = weibull_activation(tape, rg, &wb)?;
    let s = global_average_pool(tape, t)?;
    let pn = reg.power_norm_vids()?;
    power_normalise(tape, s, &pn)
}

/// CLA forward for one cell; returns (backbone features, logits).
pub fn cla_forward(
    tape: &mut Tape,
    reg: &RegisteredParams,
    cfg: &ModelConfig,
    x: ValueId,
) -> Result<(ValueId, ValueId)> {
    let stages = reg.backbone_stages(cfg.backbone.stage_widths.len())?;
    let r = backbone_forward(tape, x, &stages, &cfg.backbone)?;
    let d = descriptor_from_features(tape, reg, r)?;
    let logits = classifier_logits(tape, d, reg.vid("head.w")?, reg.vid("head.b")?)?;
    Ok((r, logits))
}

/// Fixed scattering features of a cell crop, resampled to the backbone's
/// output resolution. Pure function of the crop; not differentiable.
pub fn clh_scattering_features(cfg: &ModelConfig, bank: &FilterBank, crop: &Tensor) -> Result<Tensor> {
    let s = cfg.scattering.as_ref().ok_or_else(|| {
        HcplError::Config("scattering settings missing for clh features".into())
    })?;
    let (h, w) = (crop.shape()[0], crop.shape()[1]);
    let mut green = Tensor::zeros(vec![h, w]);
    for i in 0..h {
        for j in 0..w {
            green.data_mut()[i * w + j] = crop.at3(i, j, PROTEIN_CHANNEL);
        }
    }
    let coeffs = scattering2d(&green, bank, s.max_order)?;
    let flat = coeffs.flatten()?;
    let (oh, ow) = cfg.backbone.out_hw();
    resample_nearest(&flat, oh, ow)
}

/// Build the filter bank for a CLH config.
pub fn clh_filter_bank(cfg: &ModelConfig) -> Result<FilterBank> {
    let s = cfg.scattering.as_ref().ok_or_else(|| {
        HcplError::Config("scattering settings missing for clh bank".into())
    })?;
    build_filter_bank(s.j_scales, s.orientations, s.kernel_size)
}

/// CLH forward for one cell given precomputed scattering features;
/// returns (fused conv features, logits).
pub fn clh_forward(
    tape: &mut Tape,
    reg: &RegisteredParams,
    cfg: &ModelConfig,
    x: ValueId,
    scat: &Tensor,
) -> Result<(ValueId, ValueId)> {
    let stages = reg.backbone_stages(cfg.backbone.stage_widths.len())?;
    let r = backbone_forward(tape, x, &stages, &cfg.backbone)?;
    let sv = tape.constant(scat.clone());
    let fused = hybrid_fuse(
        tape,
        r,
        sv,
        reg.vid("fusion.kernel")?,
        Some(reg.vid("fusion.bias")?),
    )?;
    let a = tape.relu(fused)?;
    let s = global_average_pool(tape, a)?;
    let logits = classifier_logits(tape, s, reg.vid("head.w")?, reg.vid("head.b")?)?;
    Ok((a, logits))
}

/// Dual-stream outputs for a bag of cells from one image:
/// (image probabilities [C], cell probabilities [N,C]).
pub fn dsa_forward(
    tape: &mut Tape,
    reg: &RegisteredParams,
    cfg: &ModelConfig,
    bag: &[ValueId],
) -> Result<(ValueId, ValueId)> {
    if bag.is_empty() {
        return Err(HcplError::InvalidOperand { op: "dsa_forward", detail: "empty bag".into() });
    }
    let d = cfg.backbone.feature_dim();
    let mut rows = Vec::with_capacity(bag.len());
    for &x in bag {
        let desc = cell_descriptor(tape, reg, cfg, x)?;
        rows.push(tape.reshape(desc, vec![1, d])?);
    }
    let stack = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
    let pooled = bag_max_pool(tape, stack)?;
    let img_logits =
        classifier_logits(tape, pooled, reg.vid("fc_image.w")?, reg.vid("fc_image.b")?)?;
    let image_probs = tape.sigmoid(img_logits)?;
    let cell_logits =
        classifier_logits(tape, stack, reg.vid("fc_cell.w")?, reg.vid("fc_cell.b")?)?;
    let cell_probs = tape.sigmoid(cell_logits)?;
    Ok((image_probs, cell_probs))
}

/// Combined dual-stream loss L_f = W1 * L1(image) + W2 * L2(cells).
pub fn dsa_loss(
    tape: &mut Tape,
    image_probs: ValueId,
    cell_probs: ValueId,
    image_label: &Tensor,
    cell_labels: &Tensor,
    cfg: &ModelConfig,
    kind: LossKind,
    class_weights: &[f64],
) -> Result<ValueId> {
    let l1 = classification_loss(tape, kind, image_probs, image_label, class_weights)?;
    let l2 = classification_loss(tape, kind, cell_probs, cell_labels, class_weights)?;
    let w1 = tape.scalar_const(cfg.w1);
    let w2 = tape.scalar_const(cfg.w2);
    let t1 = tape.mul(l1, w1)?;
    let t2 = tape.mul(l2, w2)?;
    tape.add(t1, t2)
}

/// Per-cell predictions; DSA rows also carry their image-stream vector.
#[derive(Debug, Clone)]
pub struct PredictionMatrix {
    /// `[N, C]` per-cell probabilities.
    pub cell: Tensor,
    /// `[N, C]` image-stream probabilities copied to each cell (DSA only).
    pub image: Option<Tensor>,
}

impl PredictionMatrix {
    pub fn num_cells(&self) -> usize {
        self.cell.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.cell.shape()[1]
    }

    pub fn cell_row(&self, n: usize) -> &[f64] {
        let c = self.num_classes();
        &self.cell.data()[n * c..(n + 1) * c]
    }

    pub fn image_row(&self, n: usize) -> Option<&[f64]> {
        self.image.as_ref().map(|t| {
            let c = self.num_classes();
            &t.data()[n * c..(n + 1) * c]
        })
    }
}

/// Predict probabilities for a list of cells, parallel over cells (bags for
/// the dual-stream family).
pub fn predict(model: &Model, cells: &[CellRecord]) -> Result<PredictionMatrix> {
    predict_impl(model, cells, false)
}

/// Always-sequential prediction for parallel/sequential benchmarking.
pub fn predict_seq(model: &Model, cells: &[CellRecord]) -> Result<PredictionMatrix> {
    predict_impl(model, cells, true)
}

fn predict_impl(model: &Model, cells: &[CellRecord], force_seq: bool) -> Result<PredictionMatrix> {
    if cells.is_empty() {
        return Err(HcplError::Input("no cells to predict".into()));
    }
    let c = model.cfg.num_classes;
    match model.cfg.family {
        ModelFamily::Cla | ModelFamily::Clh => {
            let bank = if model.cfg.family == ModelFamily::Clh {
                Some(clh_filter_bank(&model.cfg)?)
            } else {
                None
            };
            let run = |i: usize| -> Result<Vec<f64>> {
                let mut tape = Tape::new();
                let reg = register_params(&mut tape, &model.params, false);
                let x = tape.leaf(cells[i].crop.clone(), true);
                let logits = match model.cfg.family {
                    ModelFamily::Cla => cla_forward(&mut tape, &reg, &model.cfg, x)?.1,
                    ModelFamily::Clh => {
                        let scat = clh_scattering_features(
                            &model.cfg,
                            bank.as_ref().expect("bank built"),
                            &cells[i].crop,
                        )?;
                        clh_forward(&mut tape, &reg, &model.cfg, x, &scat)?.1
                    }
                    ModelFamily::Dsa => unreachable!(),
                };
                let probs = tape.sigmoid(logits)?;
                Ok(tape.value(probs).data().to_vec())
            };
            let rows = if force_seq {
                par::try_map_indices_seq(cells.len(), run)?
            } else {
                par::try_map_indices(cells.len(), run)?
            };
            let mut data = Vec::with_capacity(cells.len() * c);
            for row in rows {
                data.extend_from_slice(&row);
            }
            Ok(PredictionMatrix {
                cell: Tensor::from_vec(vec![cells.len(), c], data)?,
                image: None,
            })
        }
        ModelFamily::Dsa => {
            // group cells into image bags, predict bag-wise
            let mut bags: Vec<(u32, Vec<usize>)> = Vec::new();
            for (idx, cell) in cells.iter().enumerate() {
                match bags.iter_mut().find(|(id, _)| *id == cell.image_id) {
                    Some((_, v)) => v.push(idx),
                    None => bags.push((cell.image_id, vec![idx])),
                }
            }
            let run = |bi: usize| -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
                let (_, indices) = &bags[bi];
                let mut tape = Tape::new();
                let reg = register_params(&mut tape, &model.params, false);
                let bag: Vec<ValueId> = indices
                    .iter()
                    .map(|&i| tape.leaf(cells[i].crop.clone(), true))
                    .collect();
                let (img, cell_p) = dsa_forward(&mut tape, &reg, &model.cfg, &bag)?;
                Ok((
                    indices.clone(),
                    tape.value(img).data().to_vec(),
                    tape.value(cell_p).data().to_vec(),
                ))
            };
            let results = if force_seq {
                par::try_map_indices_seq(bags.len(), run)?
            } else {
                par::try_map_indices(bags.len(), run)?
            };
            let mut cell_data = vec![0.0; cells.len() * c];
            let mut image_data = vec![0.0; cells.len() * c];
            for (indices, img, cell_p) in results {
                for (row, &cell_idx) in indices.iter().enumerate() {
                    cell_data[cell_idx * c..(cell_idx + 1) * c]
                        .copy_from_slice(&cell_p[row * c..(row + 1) * c]);
                    image_data[cell_idx * c..(cell_idx + 1) * c].copy_from_slice(&img);
                }
            }
            Ok(PredictionMatrix {
                cell: Tensor::from_vec(vec![cells.len(), c], cell_data)?,
                image: Some(Tensor::from_vec(vec![cells.len(), c], image_data)?),
            })
        }
    }
}

/// Class activation map for one cell under any family.
pub fn model_cam(model: &Model, crop: &Tensor, class_idx: usize) -> Result<Tensor> {
    let cfg = model.cfg.clone();
    let params = model.params.clone();
    let bank = if cfg.family == ModelFamily::Clh { Some(clh_filter_bank(&cfg)?) } else { None };
    let scat = match (&bank, cfg.family) {
        (Some(b), ModelFamily::Clh) => Some(clh_scattering_features(&cfg, b, crop)?),
        _ => None,
    };
    grad_cam(
        move |tape, xv| {
            let reg = register_params(tape, &params, false);
            match cfg.family {
                ModelFamily::Cla => cla_forward(tape, &reg, &cfg, xv),
                ModelFamily::Clh => {
                    clh_forward(tape, &reg, &cfg, xv, scat.as_ref().expect("features built"))
                }
                ModelFamily::Dsa => {
                    let stages = reg.backbone_stages(cfg.backbone.stage_widths.len())?;
                    let r = backbone_forward(tape, xv, &stages, &cfg.backbone)?;
                    let d = descriptor_from_features(tape, &reg, r)?;
                    let logits =
                        classifier_logits(tape, d, reg.vid("fc_cell.w")?, reg.vid("fc_cell.b")?)?;
                    Ok((r, logits))
                }
            }
        },
        crop,
        class_idx,
        model.cfg.num_classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::graph::finite_difference_gradient;
    use crate::tensor::max_rel_diff;

    fn small_cfg(family: ModelFamily) -> ModelConfig {
        let backbone = BackboneConfig {
            channels_in: 4,
            stage_widths: vec![3, 5],
            input_h: 8,
            input_w: 8,
        };
        ModelConfig::new(family, backbone, 6)
    }

    fn rand_crop(rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..8 * 8 * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(vec![8, 8, 4], data).unwrap()
    }

    fn cells_for(rng: &mut ChaCha8Rng, n: usize, image_id: u32) -> Vec<CellRecord> {
        (0..n)
            .map(|i| CellRecord {
                image_id,
                cell_id: image_id * 100 + i as u32,
                crop: rand_crop(rng),
                labels: vec![0.0; 6],
            })
            .collect()
    }

    #[test]
    fn dsa_single_cell_bag_pools_to_the_cell_descriptor() {
        let cfg = small_cfg(ModelFamily::Dsa);
        let model = init_model(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let crop = rand_crop(&mut rng);
        let mut tape = Tape::new();
        let reg = register_params(&mut tape, &model.params, false);
        // manual image stream: descriptor -> fc_image -> sigmoid
        let x = tape.constant(crop.clone());
        let desc = cell_descriptor(&mut tape, &reg, &cfg, x).unwrap();
        let manual_logits = classifier_logits(
            &mut tape,
            desc,
            reg.vid("fc_image.w").unwrap(),
            reg.vid("fc_image.b").unwrap(),
        )
        .unwrap();
        let manual = tape.sigmoid(manual_logits).unwrap();
        let x2 = tape.constant(crop);
        let (img, cell_probs) = dsa_forward(&mut tape, &reg, &cfg, &[x2]).unwrap();
        assert_eq!(tape.value(cell_probs).shape(), &[1, 6]);
        // max-pool over a singleton bag is the identity, so both paths match
        let manual = tape.value(manual).data().to_vec();
        let via_bag = tape.value(img).data().to_vec();
        for (m, b) in manual.iter().zip(&via_bag) {
            assert_eq!(m.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dsa_outputs_in_unit_interval_and_bag_duplication_invariant() {
        let cfg = small_cfg(ModelFamily::Dsa);
        let model = init_model(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let a = rand_crop(&mut rng);
        let b = rand_crop(&mut rng);
        let run = |bag_crops: &[&Tensor]| {
            let mut tape = Tape::new();
            let reg = register_params(&mut tape, &model.params, false);
            let bag: Vec<ValueId> = bag_crops.iter().map(|c| tape.constant((*c).clone())).collect();
            let (img, cells) = dsa_forward(&mut tape, &reg, &cfg, &bag).unwrap();
            (tape.value(img).data().to_vec(), tape.value(cells).data().to_vec())
        };
        let (img1, cells1) = run(&[&a, &b]);
        assert!(img1.iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(cells1.iter().all(|v| *v > 0.0 && *v < 1.0));
        // duplicating a cell leaves the image stream unchanged
        let (img2, _) = run(&[&a, &b, &a]);
        for (x, y) in img1.iter().zip(&img2) {
            assert!((x - y).abs() < 1e-15);
        }
        // bag order does not matter for the image stream
        let (img3, _) = run(&[&b, &a]);
        for (x, y) in img1.iter().zip(&img3) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn dsa_loss_is_linear_in_stream_losses() {
        let cfg = small_cfg(ModelFamily::Dsa);
        let model = init_model(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let crops = [rand_crop(&mut rng), rand_crop(&mut rng)];
        let img_y = Tensor::from_vec(vec![6], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let cell_y = Tensor::from_vec(
            vec![2, 6],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let w = vec![1.0; 6];
        let eval = |w1: f64, w2: f64| {
            let mut cfg2 = cfg.clone();
            cfg2.w1 = w1;
            cfg2.w2 = w2;
            let mut tape = Tape::new();
            let reg = register_params(&mut tape, &model.params, false);
            let bag: Vec<ValueId> = crops.iter().map(|c| tape.constant(c.clone())).collect();
            let (img, cells) = dsa_forward(&mut tape, &reg, &cfg2, &bag).unwrap();
            let l = dsa_loss(
                &mut tape,
                img,
                cells,
                &img_y,
                &cell_y,
                &cfg2,
                LossKind::WeightedBce,
                &w,
            )
            .unwrap();
            tape.value(l).item().unwrap()
        };
        let l1 = eval(1.0, 0.0);
        let l2 = eval(0.0, 1.0);
        let combined = eval(0.7, 0.3);
        assert!((combined - (0.7 * l1 + 0.3 * l2)).abs() < 1e-12);
        let default_combined = eval(1.0, 0.2);
        assert!((default_combined - (l1 + 0.2 * l2)).abs() < 1e-12);
    }

    #[test]
    fn dsa_graph_passes_gradient_check_on_two_cell_bag() {
        let cfg = small_cfg(ModelFamily::Dsa);
        let model = init_model(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let crops = [rand_crop(&mut rng), rand_crop(&mut rng)];
        let img_y = Tensor::from_vec(vec![6], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let cell_y = Tensor::from_vec(
            vec![2, 6],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let w = vec![1.0, 0.5, 2.0, 1.0, 1.5, 0.7];

        let run = |probe_name: Option<&str>, probe: Option<&Tensor>| -> (Tape, ValueId, RegisteredParams) {
            let mut tape = Tape::new();
            let mut names = Vec::new();
            let mut vids = Vec::new();
            for (name, t) in model.params.iter() {
                let tensor = match (probe_name, probe) {
                    (Some(pn), Some(pt)) if pn == name => pt.clone(),
                    _ => t.clone(),
                };
                names.push(name.to_string());
                vids.push(tape.leaf(tensor, true));
            }
            let reg = RegisteredParams { names, vids };
            let bag: Vec<ValueId> = crops.iter().map(|c| tape.constant(c.clone())).collect();
            let (img, cells) = dsa_forward(&mut tape, &reg, &cfg, &bag).unwrap();
            let l = dsa_loss(
                &mut tape,
                img,
                cells,
                &img_y,
                &cell_y,
                &cfg,
                LossKind::WeightedBce,
                &w,
            )
            .unwrap();
            (tape, l, reg)
        };

        for (name, tensor) in model.params.iter() {
            let (mut tape, loss, reg) = run(None, None);
            tape.backward(loss).unwrap();
            let analytic = tape.grad(reg.vid(name).unwrap()).unwrap();
            let fd = finite_difference_gradient(
                |p| {
                    let (tape, loss, _) = run(Some(name), Some(p));
                    tape.value(loss).item()
                },
                tensor,
                1e-4,
            )
            .unwrap();
            let err = max_rel_diff(&analytic, &fd, 1e-3);
            assert!(err <= 1e-4, "param {} rel err {}", name, err);
        }
    }

    #[test]
    fn predict_is_deterministic_and_correctly_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut cells = cells_for(&mut rng, 3, 0);
        cells.extend(cells_for(&mut rng, 2, 1));
        for family in [ModelFamily::Dsa, ModelFamily::Cla, ModelFamily::Clh] {
            let cfg = small_cfg(family);
            let model = init_model(&cfg, 7).unwrap();
            let a = predict(&model, &cells).unwrap();
            let b = predict(&model, &cells).unwrap();
            assert_eq!(a.cell.shape(), &[5, 6]);
            assert!(a
                .cell
                .data()
                .iter()
                .zip(b.cell.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            let s = predict_seq(&model, &cells).unwrap();
            assert!(a
                .cell
                .data()
                .iter()
                .zip(s.cell.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            match family {
                ModelFamily::Dsa => {
                    let img = a.image.as_ref().expect("dsa attaches image probs");
                    assert_eq!(img.shape(), &[5, 6]);
                    // cells of the same image share the image-stream row
                    assert_eq!(a.image_row(0).unwrap(), a.image_row(1).unwrap());
                }
                _ => assert!(a.image.is_none()),
            }
        }
    }

    #[test]
    fn zeroed_head_predicts_half_everywhere() {
        let cfg = small_cfg(ModelFamily::Cla);
        let mut model = init_model(&cfg, 8).unwrap();
        model.params.set("head.w", Tensor::zeros(vec![5, 6])).unwrap();
        model.params.set("head.b", Tensor::zeros(vec![6])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let cells = cells_for(&mut rng, 2, 0);
        let m = predict(&model, &cells).unwrap();
        assert!(m.cell.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn model_cam_runs_for_every_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let crop = rand_crop(&mut rng);
        for family in [ModelFamily::Dsa, ModelFamily::Cla, ModelFamily::Clh] {
            let cfg = small_cfg(family);
            let model = init_model(&cfg, 9).unwrap();
            let cam = model_cam(&model, &crop, 2).unwrap();
            assert_eq!(cam.shape(), &[2, 2]);
            assert!(cam.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(model_cam(&model, &crop, 6).is_err());
        }
    }

    #[test]
    fn clh_validation_catches_missing_scattering_and_bad_divisibility() {
        let mut cfg = small_cfg(ModelFamily::Clh);
        cfg.scattering = None;
        assert!(cfg.validate().is_err());
        let mut cfg2 = small_cfg(ModelFamily::Clh);
        cfg2.backbone.input_h = 10;
        cfg2.backbone.input_w = 10;
        assert!(cfg2.validate().is_err());
    }
}
