//! Stochastic augmentation of cell crops: crop, flip, shift, rotation,
//! scaling and cutout, each applied identically to the image and its mask.
//!
//! Geometric ops are lattice-aligned (nearest-neighbour resampling, 90
//! degree rotations) so mask pixel counts behave predictably. A transform
//! that empties the mask is resampled up to 10 times, then replaced by the
//! identity.

use crate::error::{HcplError, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Attempts before an augmentation that keeps emptying the mask gives up.
pub const MAX_RESAMPLE_TRIES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub crop: bool,
    /// Lower bound on retained area fraction for random crops.
    pub crop_min_area: f64,
    pub flip: bool,
    pub shift: bool,
    /// Maximum shift as a fraction of the side length.
    pub shift_frac: f64,
    pub rotate: bool,
    pub scale: bool,
    /// Inclusive scale factor range.
    pub scale_range: (f64, f64),
    pub cutout: bool,
    /// Upper bound on the cutout rectangle area fraction.
    pub cutout_max_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: true,
            crop_min_area: 0.8,
            flip: true,
            shift: true,
            shift_frac: 0.1,
            rotate: true,
            scale: true,
            scale_range: (0.9, 1.1),
            cutout: true,
            cutout_max_area: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Configuration with every transform disabled (identity).
    pub fn all_off() -> Self {
        AugmentConfig {
            crop: false,
            crop_min_area: 1.0,
            flip: false,
            shift: false,
            shift_frac: 0.0,
            rotate: false,
            scale: false,
            scale_range: (1.0, 1.0),
            cutout: false,
            cutout_max_area: 0.0,
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.crop || self.flip || self.shift || self.rotate || self.scale || self.cutout
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.crop_min_area) || self.crop_min_area == 0.0 {
            return Err(HcplError::Config("crop_min_area must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.shift_frac) {
            return Err(HcplError::Config("shift_frac must be in [0, 1]".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(HcplError::Config("scale_range must satisfy 0 < lo <= hi".into()));
        }
        if !(0.0..=1.0).contains(&self.cutout_max_area) {
            return Err(HcplError::Config("cutout_max_area must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One concrete sampled transform; applying it twice to equal-shaped inputs
/// performs identical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Quarter turns counter-clockwise in {-1, 0, 1}.
    pub rot_quarter: i32,
    /// Pixel shift (down, right); vacated pixels become zero.
    pub shift: (i64, i64),
    /// Resample factor; identity at 1.
    pub scale: f64,
    /// Crop rectangle (top, left, side) before resizing back, if any.
    pub crop: Option<(usize, usize, usize)>,
    /// Zeroed rectangle (top, left, height, width), if any.
    pub cutout: Option<(usize, usize, usize, usize)>,
}

impl TransformSpec {
    pub fn identity() -> Self {
        TransformSpec {
            flip_h: false,
            flip_v: false,
            rot_quarter: 0,
            shift: (0, 0),
            scale: 1.0,
            crop: None,
            cutout: None,
        }
    }
}

/// Draw a transform for a side x side crop.
pub fn sample_transform<R: Rng>(cfg: &AugmentConfig, side: usize, rng: &mut R) -> TransformSpec {
    let mut spec = TransformSpec::identity();
    if cfg.flip {
        spec.flip_h = rng.random_bool(0.5);
        spec.flip_v = rng.random_bool(0.5);
    }
    if cfg.rotate {
        spec.rot_quarter = rng.random_range(-1..=1);
    }
    if cfg.shift && cfg.shift_frac > 0.0 {
        let m = (cfg.shift_frac * side as f64).floor() as i64;
        if m > 0 {
            spec.shift = (rng.random_range(-m..=m), rng.random_range(-m..=m));
        }
    }
    if cfg.scale {
        let (lo, hi) = cfg.scale_range;
        spec.scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    }
    if cfg.crop && cfg.crop_min_area < 1.0 {
        let area = rng.random_range(cfg.crop_min_area..=1.0);
        let cside = ((side as f64) * area.sqrt()).round().max(1.0) as usize;
        let cside = cside.min(side);
        let top = rng.random_range(0..=side - cside);
        let left = rng.random_range(0..=side - cside);
        spec.crop = Some((top, left, cside));
    }
    if cfg.cutout && cfg.cutout_max_area > 0.0 {
        let max_px = ((side * side) as f64 * cfg.cutout_max_area).floor().max(1.0) as usize;
        let max_side = (max_px as f64).sqrt().floor().max(1.0) as usize;
        let ch = rng.random_range(1..=max_side.min(side));
        let cw_cap = (max_px / ch).clamp(1, side);
        let cw = rng.random_range(1..=cw_cap);
        let top = rng.random_range(0..=side - ch);
        let left = rng.random_range(0..=side - cw);
        spec.cutout = Some((top, left, ch, cw));
    }
    spec
}

// plane-wise primitives over row-major [h, w, ch] data; ch = 1 for masks

fn plane_get(data: &[f64], w: usize, ch: usize, i: usize, j: usize, k: usize) -> f64 {
    data[(i * w + j) * ch + k]
}

/// Mirror columns.
pub fn flip_horizontal(t: &Tensor) -> Tensor {
    geometry_map(t, |_h, w, i, j| (i, w - 1 - j))
}

/// Mirror rows.
pub fn flip_vertical(t: &Tensor) -> Tensor {
    geometry_map(t, |h, _w, i, j| (h - 1 - i, j))
}

/// Quarter-turn counter-clockwise; requires a square plane.
pub fn rot90_ccw(t: &Tensor) -> Result<Tensor> {
    let (h, w, _) = plane_dims(t)?;
    if h != w {
        return Err(HcplError::InvalidOperand {
            op: "rot90",
            detail: format!("rotation needs a square plane, got {}x{}", h, w),
        });
    }
    // out[i][j] = in[j][w-1-i]
    Ok(geometry_map(t, |_h, w, i, j| (j, w - 1 - i)))
}

/// Quarter-turn clockwise; requires a square plane.
pub fn rot90_cw(t: &Tensor) -> Result<Tensor> {
    let (h, w, _) = plane_dims(t)?;
    if h != w {
        return Err(HcplError::InvalidOperand {
            op: "rot90",
            detail: format!("rotation needs a square plane, got {}x{}", h, w),
        });
    }
    // out[i][j] = in[h-1-j][i]
    Ok(geometry_map(t, |h, _w, i, j| (h - 1 - j, i)))
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w, 1)),
        [h, w, c] => Ok((*h, *w, *c)),
        other => Err(HcplError::ShapeMismatch {
            op: "augment",
            detail: format!("expected [h,w] or [h,w,c], got {:?}", other),
        }),
    }
}

/// Rebuild a tensor by sampling source coordinates per output pixel.
fn geometry_map(t: &Tensor, src: impl Fn(usize, usize, usize, usize) -> (usize, usize)) -> Tensor {
    let (h, w, ch) = plane_dims(t).expect("caller validated rank");
    let mut out = vec![0.0; t.numel()];
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = src(h, w, i, j);
            for k in 0..ch {
                out[(i * w + j) * ch + k] = plane_get(t.data(), w, ch, si, sj, k);
            }
        }
    }
    Tensor::from_vec(t.shape().to_vec(), out).expect("same shape")
}

/// Integer shift with zero fill.
pub fn shift(t: &Tensor, dy: i64, dx: i64) -> Result<Tensor> {
    let (h, w, ch) = plane_dims(t)?;
    let mut out = vec![0.0; t.numel()];
    for i in 0..h {
        for j in 0..w {
            let si = i as i64 - dy;
            let sj = j as i64 - dx;
            if si >= 0 && si < h as i64 && sj >= 0 && sj < w as i64 {
                for k in 0..ch {
                    out[(i * w + j) * ch + k] =
                        plane_get(t.data(), w, ch, si as usize, sj as usize, k);
                }
            }
        }
    }
    Tensor::from_vec(t.shape().to_vec(), out)
}

/// Nearest-neighbour resample of the plane to (oh, ow).
pub fn resize_nearest(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w, ch) = plane_dims(t)?;
    if oh == 0 || ow == 0 {
        return Err(HcplError::InvalidOperand { op: "resize", detail: "zero target size".into() });
    }
    let mut out = vec![0.0; oh * ow * ch];
    for i in 0..oh {
        let si = i * h / oh;
        for j in 0..ow {
            let sj = j * w / ow;
            for k in 0..ch {
                out[(i * ow + j) * ch + k] = plane_get(t.data(), w, ch, si, sj, k);
            }
        }
    }
    let shape = if t.rank() == 2 { vec![oh, ow] } else { vec![oh, ow, ch] };
    Tensor::from_vec(shape, out)
}

/// Rescale by a factor and centre crop/pad back to the original size.
pub fn rescale_keep_size(t: &Tensor, factor: f64) -> Result<Tensor> {
    let (h, w, ch) = plane_dims(t)?;
    if factor <= 0.0 {
        return Err(HcplError::InvalidOperand {
            op: "rescale",
            detail: format!("scale factor {} not positive", factor),
        });
    }
    let nh = ((h as f64 * factor).round() as usize).max(1);
    let nw = ((w as f64 * factor).round() as usize).max(1);
    if nh == h && nw == w {
        return Ok(t.clone());
    }
    let scaled = resize_nearest(t, nh, nw)?;
    let mut out = vec![0.0; h * w * ch];
    // copy the centred overlap between the scaled plane and the output
    let (oy, sy) = if nh >= h { (0, (nh - h) / 2) } else { ((h - nh) / 2, 0) };
    let (ox, sx) = if nw >= w { (0, (nw - w) / 2) } else { ((w - nw) / 2, 0) };
    let copy_h = nh.min(h);
    let copy_w = nw.min(w);
    for i in 0..copy_h {
        for j in 0..copy_w {
            for k in 0..ch {
                out[((oy + i) * w + (ox + j)) * ch + k] =
                    plane_get(scaled.data(), nw, ch, sy + i, sx + j, k);
            }
        }
    }
    Tensor::from_vec(t.shape().to_vec(), out)
}

/// Crop a square window and resize back to the source size.
pub fn crop_resize(t: &Tensor, top: usize, left: usize, side: usize) -> Result<Tensor> {
    let (h, w, ch) = plane_dims(t)?;
    if side == 0 || top + side > h || left + side > w {
        return Err(HcplError::InvalidOperand {
            op: "crop",
            detail: format!("window {}+{} x {}+{} outside {}x{}", top, side, left, side, h, w),
        });
    }
    let mut window = vec![0.0; side * side * ch];
    for i in 0..side {
        for j in 0..side {
            for k in 0..ch {
                window[(i * side + j) * ch + k] =
                    plane_get(t.data(), w, ch, top + i, left + j, k);
            }
        }
    }
    let shape = if t.rank() == 2 { vec![side, side] } else { vec![side, side, ch] };
    let window = Tensor::from_vec(shape, window)?;
    resize_nearest(&window, h, w)
}

/// Zero a rectangle.
pub fn cutout(t: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, ch) = plane_dims(t)?;
    if top + height > h || left + width > w {
        return Err(HcplError::InvalidOperand {
            op: "cutout",
            detail: format!("rectangle outside {}x{} plane", h, w),
        });
    }
    let mut out = t.clone();
    for i in top..top + height {
        for j in left..left + width {
            for k in 0..ch {
                out.data_mut()[(i * w + j) * ch + k] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Apply a sampled transform to one tensor.
pub fn apply_transform(t: &Tensor, spec: &TransformSpec) -> Result<Tensor> {
    let mut cur = t.clone();
    if spec.flip_h {
        cur = flip_horizontal(&cur);
    }
    if spec.flip_v {
        cur = flip_vertical(&cur);
    }
    match spec.rot_quarter {
        0 => {}
        1 => cur = rot90_ccw(&cur)?,
        -1 => cur = rot90_cw(&cur)?,
        other => {
            return Err(HcplError::InvalidOperand {
                op: "augment",
                detail: format!("rot_quarter {} outside -1..=1", other),
            })
        }
    }
    if spec.shift != (0, 0) {
        cur = shift(&cur, spec.shift.0, spec.shift.1)?;
    }
    if spec.scale != 1.0 {
        cur = rescale_keep_size(&cur, spec.scale)?;
    }
    if let Some((top, left, side)) = spec.crop {
        cur = crop_resize(&cur, top, left, side)?;
    }
    if let Some((top, left, h, w)) = spec.cutout {
        cur = cutout(&cur, top, left, h, w)?;
    }
    Ok(cur)
}

fn mask_is_empty(mask: &Tensor) -> bool {
    mask.data().iter().all(|v| *v <= 0.5)
}

/// Augment an image and its mask with one shared transform. Retries when the
/// transform empties a non-empty mask; after `MAX_RESAMPLE_TRIES` failures
/// the pair is returned unchanged.
pub fn augment(
    image: &Tensor,
    mask: &Tensor,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let (h, w, _) = plane_dims(image)?;
    let (mh, mw, mc) = plane_dims(mask)?;
    if mh != h || mw != w || mc != 1 {
        return Err(HcplError::ShapeMismatch {
            op: "augment",
            detail: format!("mask {:?} does not match image {:?}", mask.shape(), image.shape()),
        });
    }
    if cfg.rotate && h != w {
        return Err(HcplError::InvalidOperand {
            op: "augment",
            detail: format!("rotation needs square crops, got {}x{}", h, w),
        });
    }
    if !cfg.any_enabled() {
        return Ok((image.clone(), mask.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RESAMPLE_TRIES {
        let spec = sample_transform(cfg, h.min(w), &mut rng);
        let new_mask = apply_transform(mask, &spec)?;
        if mask_is_empty(&new_mask) {
            continue;
        }
        let new_image = apply_transform(image, &spec)?;
        return Ok((new_image, new_mask));
    }
    Ok((image.clone(), mask.clone()))
}
