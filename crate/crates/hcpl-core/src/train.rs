//! Training loop: Adam with cosine-annealed learning rate over shuffled
//! batches of cells (bags for the dual-stream family), optional
//! augmentation, and a recorded loss trace.

use crate::augment::{augment, AugmentConfig};
use crate::dataset::CellDataset;
use crate::error::{HcplError, Result};
use crate::graph::{Tape, ValueId};
use crate::loss::{classification_loss, LossKind};
use crate::models::{
    clh_filter_bank, clh_forward, clh_scattering_features, cla_forward, dsa_forward, dsa_loss,
    register_params, Model, ModelFamily, RegisteredParams,
};
use crate::par;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Adam optimiser state over an ordered parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    /// Zero-initialised moments matching the given parameter shapes.
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Adam {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update of every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(HcplError::InvalidOperand {
                op: "adam",
                detail: format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(HcplError::ShapeMismatch {
                    op: "adam",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }
}

/// Cosine-annealed learning rate: lr(t) = lr_min + (lr0-lr_min)(1+cos(pi t/T))/2.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    lr_min + (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Annealing floor; defaults to lr0/100.
    pub lr_min: f64,
    pub epochs: usize,
    /// Cells per batch (bag cap for the dual-stream family).
    pub batch_size: usize,
    /// Per-class loss weights, all positive.
    pub class_weights: Vec<f64>,
    pub loss: LossKind,
    pub seed: u64,
    /// Augmentation applied to crops during training, if any.
    pub augment: Option<AugmentConfig>,
}

impl TrainConfig {
    pub fn new(num_classes: usize) -> Self {
        let lr0 = 2e-4;
        TrainConfig {
            lr0,
            lr_min: lr0 / 100.0,
            epochs: 1,
            batch_size: 20,
            class_weights: vec![1.0; num_classes],
            loss: LossKind::WeightedBce,
            seed: 0,
            augment: None,
        }
    }

    pub fn with_lr(mut self, lr0: f64) -> Self {
        self.lr0 = lr0;
        self.lr_min = lr0 / 100.0;
        self
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(HcplError::Config("lr0 must be positive".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(HcplError::Config("lr_min must lie in [0, lr0]".into()));
        }
        if self.epochs == 0 {
            return Err(HcplError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(HcplError::Config("batch_size must be at least 1".into()));
        }
        if self.class_weights.len() != num_classes {
            return Err(HcplError::Config(format!(
                "{} class weights for {} classes",
                self.class_weights.len(),
                num_classes
            )));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(HcplError::Config("class weights must be positive and finite".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if let LossKind::Focal { gamma } = self.loss {
            if !(gamma >= 0.0) {
                return Err(HcplError::Config("focal gamma must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Loss trace and schedule summary from one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Loss value at every optimiser step, in order.
    pub step_losses: Vec<f64>,
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub total_steps: usize,
    pub final_lr: f64,
}

// one training unit: either an image bag (DSA) or a plain batch of cells
struct Batch {
    cell_indices: Vec<usize>,
    /// Union label of the source image; present only for bag batches.
    image_label: Option<Vec<f64>>,
}

fn plan_epoch(
    model_family: ModelFamily,
    dataset: &CellDataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Batch> {
    match model_family {
        ModelFamily::Dsa => {
            let mut bags = dataset.bags();
            bags.shuffle(rng);
            bags.into_iter()
                .map(|(_, mut indices)| {
                    let image_label = Some(dataset.image_label(&indices));
                    if indices.len() > batch_size {
                        indices.shuffle(rng);
                        indices.truncate(batch_size);
                        indices.sort_unstable();
                    }
                    Batch { cell_indices: indices, image_label }
                })
                .collect()
        }
        ModelFamily::Cla | ModelFamily::Clh => {
            let mut order: Vec<usize> = (0..dataset.cells.len()).collect();
            order.shuffle(rng);
            order
                .chunks(batch_size)
                .map(|chunk| Batch { cell_indices: chunk.to_vec(), image_label: None })
                .collect()
        }
    }
}

fn labels_matrix(dataset: &CellDataset, indices: &[usize]) -> Result<Tensor> {
    let c = dataset.num_classes;
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        data.extend_from_slice(&dataset.cells[i].labels);
    }
    Tensor::from_vec(vec![indices.len(), c], data)
}

/// Stack per-cell class probabilities into an [N, C] matrix on the tape.
fn stack_probability_rows(tape: &mut Tape, rows: &[ValueId], c: usize) -> Result<ValueId> {
    let mut reshaped = Vec::with_capacity(rows.len());
    for &r in rows {
        reshaped.push(tape.reshape(r, vec![1, c])?);
    }
    if reshaped.len() == 1 {
        Ok(reshaped[0])
    } else {
        tape.concat(&reshaped, 0)
    }
}

/// Train a model in place; deterministic given the config seed. Returns the
/// loss trace. A non-finite loss aborts with a diagnostic.
pub fn train(model: &mut Model, dataset: &CellDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    dataset.validate()?;
    cfg.validate(model.cfg.num_classes)?;
    if dataset.num_classes != model.cfg.num_classes {
        return Err(HcplError::Config(format!(
            "dataset has {} classes, model {}",
            dataset.num_classes, model.cfg.num_classes
        )));
    }
    let family = model.cfg.family;
    let bank = if family == ModelFamily::Clh { Some(clh_filter_bank(&model.cfg)?) } else { None };
    let augment_on = cfg.augment.as_ref().map(|a| a.any_enabled()).unwrap_or(false);

    // fixed scattering features can be computed once when crops never change
    let scat_cache: Option<Vec<Tensor>> = match (&bank, augment_on) {
        (Some(b), false) => Some(par::try_map_indices(dataset.cells.len(), |i| {
            clh_scattering_features(&model.cfg, b, &dataset.cells[i].crop)
        })?),
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_plans = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        epoch_plans.push(plan_epoch(family, dataset, cfg.batch_size, &mut rng));
    }
    let total_steps: usize = epoch_plans.iter().map(|p| p.len()).sum();
    if total_steps == 0 {
        return Err(HcplError::Input("dataset produced no training batches".into()));
    }

    let shapes: Vec<Vec<usize>> = model.params.iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut adam = Adam::new(&shapes);
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;
    let mut final_lr = cfg.lr0;

    for (epoch, plan) in epoch_plans.iter().enumerate() {
        let mut epoch_sum = 0.0;
        for (step, batch) in plan.iter().enumerate() {
            let lr = cosine_lr(global_step, total_steps, cfg.lr0, cfg.lr_min);
            final_lr = lr;
            let crops: Vec<Tensor> = batch
                .cell_indices
                .iter()
                .map(|&i| {
                    let crop = &dataset.cells[i].crop;
                    match (&cfg.augment, augment_on) {
                        (Some(a), true) => {
                            let side = crop.shape()[0];
                            let mask = Tensor::full(vec![side, crop.shape()[1]], 1.0);
                            let (img, _) = augment(crop, &mask, a, rng.random::<u64>())?;
                            Ok(img)
                        }
                        _ => Ok(crop.clone()),
                    }
                })
                .collect::<Result<_>>()?;

            let mut tape = Tape::new();
            let reg = register_params(&mut tape, &model.params, true);
            let loss = build_batch_loss(
                &mut tape, &reg, model, dataset, cfg, batch, &crops, &bank, &scat_cache,
            )
            .map_err(|e| match e {
                HcplError::NonFinite { op } => HcplError::Diverged(format!(
                    "non-finite value in {} at epoch {} step {}",
                    op, epoch, step
                )),
                other => other,
            })?;
            let loss_val = tape.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(HcplError::Diverged(format!(
                    "non-finite loss {} at epoch {} step {}",
                    loss_val, epoch, step
                )));
            }
            tape.backward(loss).map_err(|e| match e {
                HcplError::NonFinite { op } => HcplError::Diverged(format!(
                    "non-finite gradient in {} at epoch {} step {}",
                    op, epoch, step
                )),
                other => other,
            })?;
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
            step_losses.push(loss_val);
            epoch_sum += loss_val;
            global_step += 1;
        }
        epoch_losses.push(epoch_sum / plan.len().max(1) as f64);
    }

    Ok(TrainReport { step_losses, epoch_losses, total_steps, final_lr })
}

#[allow(clippy::too_many_arguments)]
fn build_batch_loss(
    tape: &mut Tape,
    reg: &RegisteredParams,
    model: &Model,
    dataset: &CellDataset,
    cfg: &TrainConfig,
    batch: &Batch,
    crops: &[Tensor],
    bank: &Option<crate::scattering::FilterBank>,
    scat_cache: &Option<Vec<Tensor>>,
) -> Result<ValueId> {
    let c = model.cfg.num_classes;
    let cell_y = labels_matrix(dataset, &batch.cell_indices)?;
    match model.cfg.family {
        ModelFamily::Dsa => {
            let bag: Vec<ValueId> = crops.iter().map(|t| tape.constant(t.clone())).collect();
            let (image_probs, cell_probs) = dsa_forward(tape, reg, &model.cfg, &bag)?;
            let img_y = Tensor::from_vec(
                vec![c],
                batch.image_label.clone().expect("bag batches carry an image label"),
            )?;
            dsa_loss(
                tape,
                image_probs,
                cell_probs,
                &img_y,
                &cell_y,
                &model.cfg,
                cfg.loss,
                &cfg.class_weights,
            )
        }
        ModelFamily::Cla => {
            let mut rows = Vec::with_capacity(crops.len());
            for t in crops {
                let x = tape.constant(t.clone());
                let (_, logits) = cla_forward(tape, reg, &model.cfg, x)?;
                rows.push(tape.sigmoid(logits)?);
            }
            let probs = stack_probability_rows(tape, &rows, c)?;
            classification_loss(tape, cfg.loss, probs, &cell_y, &cfg.class_weights)
        }
        ModelFamily::Clh => {
            let b = bank.as_ref().expect("clh bank built");
            let mut rows = Vec::with_capacity(crops.len());
            for (pos, t) in crops.iter().enumerate() {
                let scat = match scat_cache {
                    Some(cache) => cache[batch.cell_indices[pos]].clone(),
                    None => clh_scattering_features(&model.cfg, b, t)?,
                };
                let x = tape.constant(t.clone());
                let (_, logits) = clh_forward(tape, reg, &model.cfg, x, &scat)?;
                rows.push(tape.sigmoid(logits)?);
            }
            let probs = stack_probability_rows(tape, &rows, c)?;
            classification_loss(tape, cfg.loss, probs, &cell_y, &cfg.class_weights)
        }
    }
}
