//! Wavelet scattering features and the hybrid fusion block.
//!
//! The transform cascades complex oriented band-pass filters with a modulus
//! nonlinearity and a Gaussian low-pass, all with circular boundary handling
//! so the shift properties hold exactly on the torus.

use crate::error::{HcplError, Result};
use crate::graph::{Tape, ValueId};
use crate::par;
use crate::tensor::Tensor;

/// One complex oriented band-pass kernel.
#[derive(Debug, Clone)]
pub struct BandPassFilter {
    pub scale: usize,
    pub orientation: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

/// Morlet-style filter bank: `j_scales` dyadic scales times `orientations`
/// directions, plus one Gaussian low-pass at scale 2^j_scales.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub j_scales: usize,
    pub orientations: usize,
    pub kernel_size: usize,
    band_pass: Vec<BandPassFilter>,
    low_pass: Vec<f64>,
}

/// Build the bank. Band-pass kernels are zero-mean corrected and unit-L1
/// normalised; the low-pass is non-negative and sums to exactly 1.
pub fn build_filter_bank(j_scales: usize, orientations: usize, kernel_size: usize) -> Result<FilterBank> {
    if j_scales == 0 || orientations == 0 {
        return Err(HcplError::Config("filter bank needs at least one scale and orientation".into()));
    }
    if kernel_size % 2 == 0 {
        return Err(HcplError::Config(format!("kernel_size must be odd, got {}", kernel_size)));
    }
    let r = (kernel_size / 2) as isize;
    let mut band_pass = Vec::with_capacity(j_scales * orientations);
    for j in 0..j_scales {
        let sigma = 0.8 * (1 << j) as f64;
        let xi = 3.0 * std::f64::consts::PI / (4.0 * (1 << j) as f64);
        for l in 0..orientations {
            let theta = std::f64::consts::PI * l as f64 / orientations as f64;
            let (dx, dy) = (theta.cos(), theta.sin());
            let n = kernel_size * kernel_size;
            let mut g = vec![0.0; n];
            let mut cr = vec![0.0; n];
            let mut ci = vec![0.0; n];
            let mut g_sum = 0.0;
            let (mut osc_r, mut osc_i) = (0.0, 0.0);
            for u in -r..=r {
                for v in -r..=r {
                    let idx = ((u + r) * kernel_size as isize + (v + r)) as usize;
                    let gauss = (-((u * u + v * v) as f64) / (2.0 * sigma * sigma)).exp();
                    let phase = xi * (u as f64 * dx + v as f64 * dy);
                    g[idx] = gauss;
                    cr[idx] = gauss * phase.cos();
                    ci[idx] = gauss * phase.sin();
                    g_sum += gauss;
                    osc_r += cr[idx];
                    osc_i += ci[idx];
                }
            }
            // subtract beta*g so the kernel sums to exactly zero
            let (beta_r, beta_i) = (osc_r / g_sum, osc_i / g_sum);
            let mut re = vec![0.0; n];
            let mut im = vec![0.0; n];
            let mut l1 = 0.0;
            for idx in 0..n {
                re[idx] = cr[idx] - beta_r * g[idx];
                im[idx] = ci[idx] - beta_i * g[idx];
                l1 += (re[idx] * re[idx] + im[idx] * im[idx]).sqrt();
            }
            for idx in 0..n {
                re[idx] /= l1;
                im[idx] /= l1;
            }
            band_pass.push(BandPassFilter { scale: j, orientation: l, re, im });
        }
    }
    let sigma_lp = 0.8 * (1 << j_scales) as f64;
    let mut low_pass = vec![0.0; kernel_size * kernel_size];
    let mut sum = 0.0;
    for u in -r..=r {
        for v in -r..=r {
            let idx = ((u + r) * kernel_size as isize + (v + r)) as usize;
            low_pass[idx] = (-((u * u + v * v) as f64) / (2.0 * sigma_lp * sigma_lp)).exp();
            sum += low_pass[idx];
        }
    }
    for v in low_pass.iter_mut() {
        *v /= sum;
    }
    Ok(FilterBank { j_scales, orientations, kernel_size, band_pass, low_pass })
}

impl FilterBank {
    pub fn num_band_pass(&self) -> usize {
        self.band_pass.len()
    }

    pub fn band_pass(&self, scale: usize, orientation: usize) -> &BandPassFilter {
        &self.band_pass[scale * self.orientations + orientation]
    }

    /// Reorder orientation indices in place (testing hook for the channel
    /// equivariance property). `perm[l]` gives the new orientation at slot l.
    pub fn permute_orientations(&mut self, perm: &[usize]) -> Result<()> {
        if perm.len() != self.orientations {
            return Err(HcplError::Config("permutation length mismatch".into()));
        }
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.orientations).collect::<Vec<_>>() {
            return Err(HcplError::Config("not a permutation".into()));
        }
        let old = self.band_pass.clone();
        for j in 0..self.j_scales {
            for l in 0..self.orientations {
                self.band_pass[j * self.orientations + l] =
                    old[j * self.orientations + perm[l]].clone();
            }
        }
        Ok(())
    }

    /// Largest value of |lowpass_hat|^2 + sum |bandpass_hat|^2 over the
    /// h x w circular frequency grid (Littlewood-Paley frame bound).
    pub fn frame_bound(&self, h: usize, w: usize) -> f64 {
        let r = (self.kernel_size / 2) as isize;
        let mut bound: f64 = 0.0;
        for w1 in 0..h {
            for w2 in 0..w {
                let mut lp = 0.0;
                let (mut fr, mut fi) = (0.0, 0.0);
                for u in -r..=r {
                    for v in -r..=r {
                        let idx = ((u + r) * self.kernel_size as isize + (v + r)) as usize;
                        let ang = -2.0 * std::f64::consts::PI
                            * (w1 as f64 * u as f64 / h as f64 + w2 as f64 * v as f64 / w as f64);
                        fr += self.low_pass[idx] * ang.cos();
                        fi += self.low_pass[idx] * ang.sin();
                    }
                }
                lp += fr * fr + fi * fi;
                for bp in &self.band_pass {
                    let (mut pr, mut pi) = (0.0, 0.0);
                    for u in -r..=r {
                        for v in -r..=r {
                            let idx = ((u + r) * self.kernel_size as isize + (v + r)) as usize;
                            let ang = -2.0 * std::f64::consts::PI
                                * (w1 as f64 * u as f64 / h as f64
                                    + w2 as f64 * v as f64 / w as f64);
                            let (c, s) = (ang.cos(), ang.sin());
                            pr += bp.re[idx] * c - bp.im[idx] * s;
                            pi += bp.re[idx] * s + bp.im[idx] * c;
                        }
                    }
                    lp += pr * pr + pi * pi;
                }
                bound = bound.max(lp);
            }
        }
        bound
    }

    /// Factor F with ||scattering(x)||_2 <= ||x||_2 * F, from the cascade
    /// bound sqrt(B + B^2 + B^3) with B the measured frame bound.
    pub fn energy_bound_factor(&self, h: usize, w: usize) -> f64 {
        let b = self.frame_bound(h, w);
        (b + b * b + b * b * b).sqrt()
    }
}

/// Scattering output, spatially subsampled by 2^j_scales in both axes.
#[derive(Debug, Clone)]
pub struct ScatteringCoeffs {
    /// `[h, w, 1]`
    pub order0: Tensor,
    /// `[h, w, j_scales * orientations]`, channel = scale * L + orientation
    pub order1: Tensor,
    /// `[h, w, n2]`, channel = pair(j1<j2) * L^2 + theta1 * L + theta2
    pub order2: Tensor,
    pub j_scales: usize,
    pub orientations: usize,
}

impl ScatteringCoeffs {
    pub fn num_channels(&self) -> usize {
        self.order0.shape()[2] + self.order1.shape()[2] + self.order2.shape()[2]
    }

    /// All orders stacked along the channel axis.
    pub fn flatten(&self) -> Result<Tensor> {
        let (h, w) = (self.order0.shape()[0], self.order0.shape()[1]);
        let total = self.num_channels();
        let mut out = Tensor::zeros(vec![h, w, total]);
        let parts = [&self.order0, &self.order1, &self.order2];
        for i in 0..h {
            for j in 0..w {
                let mut c = 0;
                for part in parts {
                    for k in 0..part.shape()[2] {
                        out.set3(i, j, c, part.at3(i, j, k));
                        c += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn l2_norm(&self) -> f64 {
        let sq = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        (sq(&self.order0) + sq(&self.order1) + sq(&self.order2)).sqrt()
    }
}

fn conv2_circular(x: &[f64], h: usize, w: usize, k: &[f64], ks: usize) -> Vec<f64> {
    let r = (ks / 2) as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for u in -r..=r {
                let row = (i + u).rem_euclid(h as isize) as usize;
                for v in -r..=r {
                    let col = (j + v).rem_euclid(w as isize) as usize;
                    let kidx = ((u + r) * ks as isize + (v + r)) as usize;
                    acc += x[row * w + col] * k[kidx];
                }
            }
            out[(i as usize) * w + j as usize] = acc;
        }
    }
    out
}

fn modulus_field(x: &[f64], h: usize, w: usize, bp: &BandPassFilter, ks: usize) -> Vec<f64> {
    let re = conv2_circular(x, h, w, &bp.re, ks);
    let im = conv2_circular(x, h, w, &bp.im, ks);
    re.iter().zip(&im).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}

fn lowpass_subsample(x: &[f64], h: usize, w: usize, bank: &FilterBank) -> Vec<f64> {
    let full = conv2_circular(x, h, w, &bank.low_pass, bank.kernel_size);
    let s = 1 << bank.j_scales;
    let (ho, wo) = (h / s, w / s);
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = full[(i * s) * w + j * s];
        }
    }
    out
}

/// Scattering transform of a rank-2 image.
pub fn scattering2d(x: &Tensor, bank: &FilterBank, max_order: usize) -> Result<ScatteringCoeffs> {
    scattering_impl(x, bank, max_order, false)
}

/// Always-sequential variant for parallel/sequential benchmarking.
pub fn scattering2d_seq(x: &Tensor, bank: &FilterBank, max_order: usize) -> Result<ScatteringCoeffs> {
    scattering_impl(x, bank, max_order, true)
}

fn scattering_impl(
    x: &Tensor,
    bank: &FilterBank,
    max_order: usize,
    force_seq: bool,
) -> Result<ScatteringCoeffs> {
    if x.rank() != 2 {
        return Err(HcplError::ShapeMismatch {
            op: "scattering2d",
            detail: format!("expects rank-2 image, got {:?}", x.shape()),
        });
    }
    if max_order == 0 || max_order > 2 {
        return Err(HcplError::Config(format!("max_order must be 1 or 2, got {}", max_order)));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let s = 1 << bank.j_scales;
    if h % s != 0 || w % s != 0 {
        return Err(HcplError::ShapeMismatch {
            op: "scattering2d",
            detail: format!("{}x{} not divisible by 2^{}", h, w, bank.j_scales),
        });
    }
    let (ho, wo) = (h / s, w / s);
    let to_tensor = |chans: Vec<Vec<f64>>| -> Result<Tensor> {
        let c = chans.len();
        let mut t = Tensor::zeros(vec![ho, wo, c]);
        for (k, ch) in chans.iter().enumerate() {
            for i in 0..ho {
                for j in 0..wo {
                    t.set3(i, j, k, ch[i * wo + j]);
                }
            }
        }
        Ok(t)
    };

    let order0 = to_tensor(vec![lowpass_subsample(x.data(), h, w, bank)])?;

    // first-order modulus fields, kept at full resolution for the cascade
    let nbp = bank.band_pass.len();
    let compute_u1 = |fi: usize| -> Result<Vec<f64>> {
        Ok(modulus_field(x.data(), h, w, &bank.band_pass[fi], bank.kernel_size))
    };
    let u1: Vec<Vec<f64>> = if force_seq {
        par::try_map_indices_seq(nbp, compute_u1)?
    } else {
        par::try_map_indices(nbp, compute_u1)?
    };
    let compute_s1 = |fi: usize| -> Result<Vec<f64>> { Ok(lowpass_subsample(&u1[fi], h, w, bank)) };
    let s1: Vec<Vec<f64>> = if force_seq {
        par::try_map_indices_seq(nbp, compute_s1)?
    } else {
        par::try_map_indices(nbp, compute_s1)?
    };
    let order1 = to_tensor(s1)?;

    // scale-increasing second order
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if max_order == 2 {
        for f1 in 0..nbp {
            for f2 in 0..nbp {
                if bank.band_pass[f2].scale > bank.band_pass[f1].scale {
                    pairs.push((f1, f2));
                }
            }
        }
    }
    let compute_s2 = |pi: usize| -> Result<Vec<f64>> {
        let (f1, f2) = pairs[pi];
        let u2 = modulus_field(&u1[f1], h, w, &bank.band_pass[f2], bank.kernel_size);
        Ok(lowpass_subsample(&u2, h, w, bank))
    };
    let s2: Vec<Vec<f64>> = if force_seq {
        par::try_map_indices_seq(pairs.len(), compute_s2)?
    } else {
        par::try_map_indices(pairs.len(), compute_s2)?
    };
    let order2 = if s2.is_empty() {
        Tensor::zeros(vec![ho, wo, 0])
    } else {
        to_tensor(s2)?
    };

    Ok(ScatteringCoeffs {
        order0,
        order1,
        order2,
        j_scales: bank.j_scales,
        orientations: bank.orientations,
    })
}

/// Nearest-neighbour spatial resampling of a channel tensor.
pub fn resample_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(HcplError::ShapeMismatch {
            op: "resample_nearest",
            detail: format!("expects rank-3 tensor, got {:?}", t.shape()),
        });
    }
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(HcplError::InvalidOperand {
            op: "resample_nearest",
            detail: "zero-sized spatial extent".into(),
        });
    }
    let mut out = Tensor::zeros(vec![out_h, out_w, c]);
    for i in 0..out_h {
        let si = i * h / out_h;
        for j in 0..out_w {
            let sj = j * w / out_w;
            for k in 0..c {
                out.set3(i, j, k, t.at3(si, sj, k));
            }
        }
    }
    Ok(out)
}

/// Identity 1x1 mixing kernel of width d: fusion with this kernel and zero
/// bias reproduces its input.
pub fn identity_mixing_kernel(d: usize) -> Tensor {
    let mut k = Tensor::zeros(vec![1, 1, d, d]);
    for i in 0..d {
        let idx = i * d + i;
        k.data_mut()[idx] = 1.0;
    }
    k
}

/// Hybrid fusion: channel concatenation of the deep and scattering branches
/// followed by a learnable 1x1 mixing convolution.
pub fn hybrid_fuse(
    tape: &mut Tape,
    deep: ValueId,
    scat: ValueId,
    mix_kernel: ValueId,
    mix_bias: Option<ValueId>,
) -> Result<ValueId> {
    let ds = tape.value(deep).shape().to_vec();
    let ss = tape.value(scat).shape().to_vec();
    if ds.len() != 3 || ss.len() != 3 || ds[0] != ss[0] || ds[1] != ss[1] {
        return Err(HcplError::ShapeMismatch {
            op: "hybrid_fuse",
            detail: format!("deep {:?} vs scattering {:?}", ds, ss),
        });
    }
    let cat = tape.concat(&[deep, scat], 2)?;
    tape.conv2d(cat, mix_kernel, mix_bias, 1, 0)
}
