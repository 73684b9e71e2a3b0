//! Pipeline-specific layers: Weibull activation, global average pooling,
//! power normalisation, bag max-pooling, a small convolutional backbone and
//! gradient-weighted class activation maps.
//!
//! Learnable positive parameters are stored unconstrained and mapped through
//! `exp`, so every optimiser step keeps them strictly positive.

use crate::error::{HcplError, Result};
use crate::graph::{Tape, ValueId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Floor applied to rectified backbone features before the Weibull layer so
/// the power term stays finite if the shape exponent drifts below 1.
pub const FEATURE_FLOOR: f64 = 1e-9;

// ── Weibull activation ───────────────────────────────────────────────

/// Natural-scale Weibull parameters; all strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeibullParams {
    pub lambda: f64,
    pub zeta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl WeibullParams {
    /// Identity-regime start: the layer begins as exp(-R).
    pub fn init() -> Self {
        WeibullParams { lambda: 1.0, zeta: 1.0, gamma: 1.0, eta: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("zeta", self.zeta),
            ("gamma", self.gamma),
            ("eta", self.eta),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(HcplError::InvalidOperand {
                    op: "weibull",
                    detail: format!("parameter {} must be strictly positive, got {}", name, v),
                });
            }
        }
        Ok(())
    }

    /// Unconstrained values whose exp reproduces the parameters.
    pub fn to_unconstrained(&self) -> [f64; 4] {
        [self.lambda.ln(), self.zeta.ln(), self.gamma.ln(), self.eta.ln()]
    }
}

/// Tape handles of the unconstrained Weibull parameters.
#[derive(Debug, Clone, Copy)]
pub struct WeibullVids {
    pub u_lambda: ValueId,
    pub u_zeta: ValueId,
    pub u_gamma: ValueId,
    pub u_eta: ValueId,
}

/// Put natural-scale parameters on a tape as unconstrained leaves.
pub fn register_weibull(tape: &mut Tape, p: &WeibullParams, requires_grad: bool) -> Result<WeibullVids> {
    p.validate()?;
    let [ul, uz, ug, ue] = p.to_unconstrained();
    Ok(WeibullVids {
        u_lambda: tape.leaf(Tensor::scalar(ul), requires_grad),
        u_zeta: tape.leaf(Tensor::scalar(uz), requires_grad),
        u_gamma: tape.leaf(Tensor::scalar(ug), requires_grad),
        u_eta: tape.leaf(Tensor::scalar(ue), requires_grad),
    })
}

/// T_i = (R_i/lambda)^(zeta-1) * exp(-(R_i/gamma)^eta), elementwise.
pub fn weibull_activation(tape: &mut Tape, r: ValueId, p: &WeibullVids) -> Result<ValueId> {
    let lambda = tape.exp(p.u_lambda)?;
    let zeta = tape.exp(p.u_zeta)?;
    let gamma = tape.exp(p.u_gamma)?;
    let eta = tape.exp(p.u_eta)?;
    let one = tape.scalar_const(1.0);
    let rl = tape.div(r, lambda)?;
    let zm1 = tape.sub(zeta, one)?;
    let power_term = tape.pow(rl, zm1)?;
    let rg = tape.div(r, gamma)?;
    let rg_eta = tape.pow(rg, eta)?;
    let neg_one = tape.scalar_const(-1.0);
    let neg = tape.mul(rg_eta, neg_one)?;
    let exp_term = tape.exp(neg)?;
    tape.mul(power_term, exp_term)
}

/// Clamp rectified features into [FEATURE_FLOOR, inf) before the Weibull
/// layer. Gradient at exactly-zero features was already zero through the
/// rectifier, so the guard changes no gradients on the valid domain.
pub fn guard_features(tape: &mut Tape, r: ValueId) -> Result<ValueId> {
    tape.clamp(r, FEATURE_FLOOR, f64::MAX)
}

// ── pooling and normalisation ────────────────────────────────────────

/// S_k = mean over the two spatial axes of a rank-3 tensor.
pub fn global_average_pool(tape: &mut Tape, t: ValueId) -> Result<ValueId> {
    if tape.value(t).rank() != 3 {
        return Err(HcplError::ShapeMismatch {
            op: "global_average_pool",
            detail: format!("expects rank-3 input, got {:?}", tape.value(t).shape()),
        });
    }
    tape.reduce_mean(t, Some(vec![0, 1]))
}

/// Natural-scale power-normalisation parameters; both strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerNormParams {
    pub alpha: f64,
    pub beta_pn: f64,
}

impl PowerNormParams {
    pub fn init() -> Self {
        PowerNormParams { alpha: 1.0, beta_pn: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta_pn > 0.0) {
            return Err(HcplError::InvalidOperand {
                op: "power_normalise",
                detail: format!(
                    "alpha and beta_pn must be strictly positive, got {} and {}",
                    self.alpha, self.beta_pn
                ),
            });
        }
        Ok(())
    }

    pub fn to_unconstrained(&self) -> [f64; 2] {
        [self.alpha.ln(), self.beta_pn.ln()]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PowerNormVids {
    pub u_alpha: ValueId,
    pub u_beta: ValueId,
}

pub fn register_power_norm(
    tape: &mut Tape,
    p: &PowerNormParams,
    requires_grad: bool,
) -> Result<PowerNormVids> {
    p.validate()?;
    let [ua, ub] = p.to_unconstrained();
    Ok(PowerNormVids {
        u_alpha: tape.leaf(Tensor::scalar(ua), requires_grad),
        u_beta: tape.leaf(Tensor::scalar(ub), requires_grad),
    })
}

/// delta(s)_k = alpha * s_k^beta_pn for non-negative s.
pub fn power_normalise(tape: &mut Tape, s: ValueId, p: &PowerNormVids) -> Result<ValueId> {
    if let Some(bad) = tape.value(s).data().iter().find(|v| **v < 0.0) {
        return Err(HcplError::InvalidOperand {
            op: "power_normalise",
            detail: format!("requires non-negative input, got {}", bad),
        });
    }
    let alpha = tape.exp(p.u_alpha)?;
    let beta = tape.exp(p.u_beta)?;
    let powed = tape.pow(s, beta)?;
    tape.mul(powed, alpha)
}

/// Elementwise maximum over the bag dimension of an N x D matrix.
/// Gradient flows to the argmax row of each column only.
pub fn bag_max_pool(tape: &mut Tape, bag: ValueId) -> Result<ValueId> {
    let shape = tape.value(bag).shape().to_vec();
    if shape.len() != 2 {
        return Err(HcplError::ShapeMismatch {
            op: "bag_max_pool",
            detail: format!("expects N x D matrix, got {:?}", shape),
        });
    }
    if shape[0] == 0 {
        return Err(HcplError::InvalidOperand { op: "bag_max_pool", detail: "empty bag".into() });
    }
    tape.reduce_max(bag, Some(vec![0]))
}

// ── backbone ─────────────────────────────────────────────────────────

/// Small convolutional feature extractor: one 3x3 stride-2 conv + rectifier
/// per stage. The final stage width is the descriptor dimension D.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub channels_in: usize,
    pub stage_widths: Vec<usize>,
    pub input_h: usize,
    pub input_w: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels_in == 0 || self.stage_widths.is_empty() {
            return Err(HcplError::Config("backbone needs channels and at least one stage".into()));
        }
        if self.stage_widths.contains(&0) {
            return Err(HcplError::Config("zero-width backbone stage".into()));
        }
        let (h, w) = self.out_hw();
        if h == 0 || w == 0 {
            return Err(HcplError::Config(format!(
                "input {}x{} collapses before {} stages complete",
                self.input_h,
                self.input_w,
                self.stage_widths.len()
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_widths.last().expect("validated non-empty")
    }

    /// Spatial size after all stride-2 stages (kernel 3, pad 1).
    pub fn out_hw(&self) -> (usize, usize) {
        let mut h = self.input_h;
        let mut w = self.input_w;
        for _ in &self.stage_widths {
            if h + 2 < 3 || w + 2 < 3 {
                return (0, 0);
            }
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        (h, w)
    }
}

/// He-style initial parameters, named `backbone.stage{i}.{kernel,bias}`.
pub fn init_backbone_params<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Result<Vec<(String, Tensor)>> {
    cfg.validate()?;
    let mut params = Vec::new();
    let mut cin = cfg.channels_in;
    for (i, &cout) in cfg.stage_widths.iter().enumerate() {
        let fan_in = 9 * cin;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = 3 * 3 * cin * cout;
        let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        params.push((
            format!("backbone.stage{}.kernel", i),
            Tensor::from_vec(vec![3, 3, cin, cout], data)?,
        ));
        params.push((format!("backbone.stage{}.bias", i), Tensor::zeros(vec![cout])));
        cin = cout;
    }
    Ok(params)
}

/// Run the backbone on one image; `stages` pairs (kernel, bias) per stage.
pub fn backbone_forward(
    tape: &mut Tape,
    x: ValueId,
    stages: &[(ValueId, ValueId)],
    cfg: &BackboneConfig,
) -> Result<ValueId> {
    let shape = tape.value(x).shape().to_vec();
    if shape != [cfg.input_h, cfg.input_w, cfg.channels_in] {
        return Err(HcplError::ShapeMismatch {
            op: "backbone",
            detail: format!(
                "input {:?}, configured {}x{}x{}",
                shape, cfg.input_h, cfg.input_w, cfg.channels_in
            ),
        });
    }
    if stages.len() != cfg.stage_widths.len() {
        return Err(HcplError::Config(format!(
            "backbone has {} stages, given {} parameter pairs",
            cfg.stage_widths.len(),
            stages.len()
        )));
    }
    let mut cur = x;
    for (kernel, bias) in stages {
        cur = tape.conv2d(cur, *kernel, Some(*bias), 2, 1)?;
        cur = tape.relu(cur)?;
    }
    Ok(cur)
}

// ── classifier heads ─────────────────────────────────────────────────

/// Affine map over rows: x [N,D] . w [D,C] + b [C] -> [N,C].
/// The bias is lifted to a rank-2 row via an all-ones outer product so the
/// gradient to `b` is the usual column sum.
pub fn linear_rows(tape: &mut Tape, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
    let n = tape.value(x).shape()[0];
    let c = tape.value(b).numel();
    let z = tape.matmul(x, w)?;
    let ones = tape.constant(Tensor::full(vec![n, 1], 1.0));
    let b_row = tape.reshape(b, vec![1, c])?;
    let bias_mat = tape.matmul(ones, b_row)?;
    tape.add(z, bias_mat)
}

/// Independent per-class probabilities: logistic(affine(S)).
pub fn classifier_head(tape: &mut Tape, s: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
    let logits = classifier_logits(tape, s, w, b)?;
    tape.sigmoid(logits)
}

/// Pre-squash logits of the classifier head; accepts [D] or [N,D].
pub fn classifier_logits(tape: &mut Tape, s: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
    let rank1 = tape.value(s).rank() == 1;
    let s2 = if rank1 {
        let d = tape.value(s).numel();
        tape.reshape(s, vec![1, d])?
    } else {
        s
    };
    let out = linear_rows(tape, s2, w, b)?;
    if rank1 {
        let c = tape.value(out).numel();
        tape.reshape(out, vec![c])
    } else {
        Ok(out)
    }
}

// ── class activation maps ────────────────────────────────────────────

/// Gradient-weighted class activation map.
///
/// `forward` records the model on the tape and returns (final conv features
/// R of shape [H,W,D], class scores of shape [C]). The map is the rectified
/// channel sum of R weighted by the spatial mean of dScore/dR, min-max
/// normalised into [0,1]; a constant map normalises to all zeros.
pub fn grad_cam<F>(forward: F, x: &Tensor, class_idx: usize, num_classes: usize) -> Result<Tensor>
where
    F: Fn(&mut Tape, ValueId) -> Result<(ValueId, ValueId)>,
{
    if class_idx >= num_classes {
        return Err(HcplError::InvalidOperand {
            op: "grad_cam",
            detail: format!("class {} out of range for {} classes", class_idx, num_classes),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let (r_id, scores_id) = forward(&mut tape, xv)?;
    let c = tape.value(scores_id).numel();
    if c != num_classes {
        return Err(HcplError::ShapeMismatch {
            op: "grad_cam",
            detail: format!("model produced {} scores, expected {}", c, num_classes),
        });
    }
    let r_shape = tape.value(r_id).shape().to_vec();
    if r_shape.len() != 3 {
        return Err(HcplError::ShapeMismatch {
            op: "grad_cam",
            detail: format!("features must be rank 3, got {:?}", r_shape),
        });
    }
    let mut onehot = vec![0.0; c];
    onehot[class_idx] = 1.0;
    let scores_flat = tape.reshape(scores_id, vec![c])?;
    let mask = tape.constant(Tensor::from_vec(vec![c], onehot)?);
    let picked = tape.mul(scores_flat, mask)?;
    let score = tape.reduce_sum(picked, None)?;
    tape.backward(score)?;
    let r = tape.value(r_id).clone();
    let g = tape.grad(r_id).ok_or_else(|| {
        HcplError::Graph("class score does not depend on the feature tensor".into())
    })?;
    let (h, w, d) = (r_shape[0], r_shape[1], r_shape[2]);
    let mut weights = vec![0.0; d];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                weights[k] += g.at3(i, j, k);
            }
        }
    }
    let inv = 1.0 / (h * w) as f64;
    for wv in weights.iter_mut() {
        *wv *= inv;
    }
    let mut cam = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for k in 0..d {
                acc += weights[k] * r.at3(i, j, k);
            }
            cam[i * w + j] = acc.max(0.0);
        }
    }
    let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in cam.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        cam.iter_mut().for_each(|v| *v = 0.0);
    }
    Tensor::from_vec(vec![h, w], cam)
}
