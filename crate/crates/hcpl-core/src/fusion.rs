//! Correlation-gated fusion of image-level and cell-level predictions,
//! diagnostic 2D histograms, hierarchical ensembling across model groups,
//! and per-cell integrity weighting.

use crate::error::{HcplError, Result};
use crate::models::PredictionMatrix;
use crate::tensor::Tensor;

/// Default gating threshold on the per-class correlation.
pub const DEFAULT_RHO_TH: f64 = 0.2;

/// Default bin count for diagnostic histograms.
pub const DEFAULT_BINS: usize = 20;

/// Pearson correlation of two equal-length vectors. A constant vector makes
/// the coefficient undefined; that case returns (0.0, false).
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return Err(HcplError::ShapeMismatch {
            op: "pearson_r",
            detail: format!("{} vs {} samples", a.len(), b.len()),
        });
    }
    if a.len() < 2 {
        return Err(HcplError::InvalidOperand {
            op: "pearson_r",
            detail: "need at least two samples".into(),
        });
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok((0.0, false));
    }
    Ok(((cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0), true))
}

/// 2D histogram of paired values over [0,1]^2 with `bins` bins per axis.
/// Returned row-major: counts[i][j] covers a-bin i, b-bin j.
pub fn histogram2d(a: &[f64], b: &[f64], bins: usize) -> Result<Vec<Vec<usize>>> {
    if a.len() != b.len() {
        return Err(HcplError::ShapeMismatch {
            op: "histogram2d",
            detail: format!("{} vs {} samples", a.len(), b.len()),
        });
    }
    if bins == 0 {
        return Err(HcplError::InvalidOperand { op: "histogram2d", detail: "zero bins".into() });
    }
    let mut counts = vec![vec![0usize; bins]; bins];
    for (x, y) in a.iter().zip(b) {
        if !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y) {
            return Err(HcplError::InvalidOperand {
                op: "histogram2d",
                detail: format!("pair ({}, {}) outside [0,1]^2", x, y),
            });
        }
        let bi = ((x * bins as f64) as usize).min(bins - 1);
        let bj = ((y * bins as f64) as usize).min(bins - 1);
        counts[bi][bj] += 1;
    }
    Ok(counts)
}

/// Per-class gating statistics for image/cell fusion.
#[derive(Debug, Clone)]
pub struct CorrelationProfile {
    /// Pearson coefficient per class (flagged value 0 when undefined).
    pub r: Vec<f64>,
    /// Whether the coefficient was defined for the class.
    pub defined: Vec<bool>,
    /// Gating threshold.
    pub rho_th: f64,
    /// Per-class 2D histogram of (image, cell) prediction pairs.
    pub hist2d: Vec<Vec<Vec<usize>>>,
    /// Pairs that entered each per-class statistic.
    pub pairs: Vec<usize>,
}

impl CorrelationProfile {
    pub fn num_classes(&self) -> usize {
        self.r.len()
    }

    /// True when class `c` uses the image x cell product.
    pub fn gated(&self, c: usize) -> bool {
        self.defined[c] && self.r[c] >= self.rho_th
    }

    /// Profile that fuses no class (cell-only everywhere).
    pub fn cell_only(num_classes: usize, rho_th: f64) -> Self {
        CorrelationProfile {
            r: vec![0.0; num_classes],
            defined: vec![false; num_classes],
            rho_th,
            hist2d: vec![vec![]; num_classes],
            pairs: vec![0; num_classes],
        }
    }
}

/// Estimate the per-class correlation between image-stream and cell-stream
/// predictions. For class c only cells whose source image carries c
/// (image_labels row positive) enter the statistic; fewer than two such
/// pairs, or constant predictions, flag the class undefined.
pub fn correlation_profile(
    preds: &PredictionMatrix,
    image_labels: &[Vec<f64>],
    rho_th: f64,
    bins: usize,
) -> Result<CorrelationProfile> {
    let image = preds.image.as_ref().ok_or_else(|| {
        HcplError::Input("correlation profile needs image-stream predictions".into())
    })?;
    let (n, c) = (preds.num_cells(), preds.num_classes());
    if image_labels.len() != n {
        return Err(HcplError::Input(format!(
            "{} image-label rows for {} cells",
            image_labels.len(),
            n
        )));
    }
    let mut r = vec![0.0; c];
    let mut defined = vec![false; c];
    let mut hist2d = Vec::with_capacity(c);
    let mut pairs = vec![0usize; c];
    for k in 0..c {
        let mut img_vals = Vec::new();
        let mut cell_vals = Vec::new();
        for i in 0..n {
            if image_labels[i].len() != c {
                return Err(HcplError::Input(format!(
                    "image-label row {} has {} classes, expected {}",
                    i,
                    image_labels[i].len(),
                    c
                )));
            }
            if image_labels[i][k] > 0.5 {
                img_vals.push(image.data()[i * c + k].clamp(0.0, 1.0));
                cell_vals.push(preds.cell.data()[i * c + k].clamp(0.0, 1.0));
            }
        }
        pairs[k] = img_vals.len();
        if img_vals.len() >= 2 {
            let (rk, ok) = pearson_r(&img_vals, &cell_vals)?;
            r[k] = rk;
            defined[k] = ok;
        }
        hist2d.push(if img_vals.is_empty() {
            vec![vec![0; bins]; bins]
        } else {
            histogram2d(&img_vals, &cell_vals, bins)?
        });
    }
    Ok(CorrelationProfile { r, defined, rho_th, hist2d, pairs })
}

/// Gate one cell's probabilities: product where the class correlation
/// clears the threshold, cell-only otherwise.
pub fn fuse_image_cell(
    img_p: &[f64],
    cell_p: &[f64],
    profile: &CorrelationProfile,
) -> Result<Vec<f64>> {
    if img_p.len() != cell_p.len() || img_p.len() != profile.num_classes() {
        return Err(HcplError::ShapeMismatch {
            op: "fuse_image_cell",
            detail: format!(
                "img {} / cell {} / profile {}",
                img_p.len(),
                cell_p.len(),
                profile.num_classes()
            ),
        });
    }
    Ok((0..img_p.len())
        .map(|c| if profile.gated(c) { img_p[c] * cell_p[c] } else { cell_p[c] })
        .collect())
}

/// Fuse a whole prediction matrix; requires the image stream.
pub fn fuse_matrix(preds: &PredictionMatrix, profile: &CorrelationProfile) -> Result<Tensor> {
    let image = preds
        .image
        .as_ref()
        .ok_or_else(|| HcplError::Input("fusion needs image-stream predictions".into()))?;
    let (n, c) = (preds.num_cells(), preds.num_classes());
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let img_row = &image.data()[i * c..(i + 1) * c];
        let fused = fuse_image_cell(img_row, preds.cell_row(i), profile)?;
        out.extend_from_slice(&fused);
    }
    Tensor::from_vec(vec![n, c], out)
}

/// Mean within each group, then mean across group means. Grouping is part
/// of the semantics: (1,3) differs from a flat 4-model average.
pub fn ensemble_hierarchical(groups: &[Vec<Tensor>]) -> Result<Tensor> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(HcplError::Input("every ensemble group must be non-empty".into()));
    }
    let shape = groups[0][0].shape().to_vec();
    for m in groups.iter().flatten() {
        if m.shape() != shape.as_slice() {
            return Err(HcplError::ShapeMismatch {
                op: "ensemble",
                detail: format!("{:?} vs {:?}", m.shape(), shape),
            });
        }
    }
    let numel = groups[0][0].numel();
    let mut acc = vec![0.0; numel];
    for group in groups {
        let ginv = 1.0 / group.len() as f64;
        for (i, slot) in acc.iter_mut().enumerate() {
            let gmean: f64 = group.iter().map(|m| m.data()[i]).sum::<f64>() * ginv;
            *slot += gmean;
        }
    }
    let global_inv = 1.0 / groups.len() as f64;
    acc.iter_mut().for_each(|v| *v *= global_inv);
    Tensor::from_vec(shape, acc)
}

/// Scale each cell's probability row by its integrity weight.
pub fn apply_vid(matrix: &PredictionMatrix, weights: &[f64]) -> Result<PredictionMatrix> {
    let (n, c) = (matrix.num_cells(), matrix.num_classes());
    if weights.len() != n {
        return Err(HcplError::Input(format!("{} weights for {} cells", weights.len(), n)));
    }
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(HcplError::InvalidOperand {
            op: "apply_vid",
            detail: format!("weight {} outside [0,1]", w),
        });
    }
    let mut data = matrix.cell.data().to_vec();
    for i in 0..n {
        for k in 0..c {
            data[i * c + k] *= weights[i];
        }
    }
    Ok(PredictionMatrix {
        cell: Tensor::from_vec(vec![n, c], data)?,
        image: matrix.image.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pearson_matches_its_definition() {
        let a = vec![0.1, 0.4, 0.3, 0.9];
        let (r, ok) = pearson_r(&a, &a).unwrap();
        assert!(ok);
        assert!((r - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let (r, ok) = pearson_r(&a, &neg).unwrap();
        assert!(ok);
        assert!((r + 1.0).abs() < 1e-12);
        // direct-formula oracle on random input
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let (r, ok) = pearson_r(&x, &y).unwrap();
        assert!(ok);
        let n = 50.0;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
        let sy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
        assert!((r - cov / (sx * sy)).abs() < 1e-12);
    }

    #[test]
    fn constant_vectors_flag_undefined() {
        let a = vec![0.5, 0.5, 0.5];
        let b = vec![0.1, 0.2, 0.3];
        assert_eq!(pearson_r(&a, &b).unwrap(), (0.0, false));
        assert_eq!(pearson_r(&b, &a).unwrap(), (0.0, false));
        assert!(pearson_r(&a, &b[..2]).is_err());
        assert!(pearson_r(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn histogram2d_counts_and_rejects_out_of_range() {
        let h = histogram2d(&[0.0], &[0.0], 20).unwrap();
        assert_eq!(h[0][0], 1);
        assert_eq!(h.iter().flatten().sum::<usize>(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let a: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
        let h = histogram2d(&a, &b, 20).unwrap();
        assert_eq!(h.iter().flatten().sum::<usize>(), 500);
        assert!(histogram2d(&[1.2], &[0.1], 20).is_err());
        // exact grid: one pair per bin centre -> perfectly uniform counts
        let bins = 5;
        let mut ga = Vec::new();
        let mut gb = Vec::new();
        for i in 0..bins {
            for j in 0..bins {
                ga.push((i as f64 + 0.5) / bins as f64);
                gb.push((j as f64 + 0.5) / bins as f64);
            }
        }
        let h = histogram2d(&ga, &gb, bins).unwrap();
        for row in &h {
            for count in row {
                assert_eq!(*count, 1);
            }
        }
    }

    fn profile_from(r: &[f64], defined: &[bool], rho_th: f64) -> CorrelationProfile {
        CorrelationProfile {
            r: r.to_vec(),
            defined: defined.to_vec(),
            rho_th,
            hist2d: vec![vec![]; r.len()],
            pairs: vec![0; r.len()],
        }
    }

    #[test]
    fn fusion_gates_per_class() {
        let img = [1.0, 1.0, 1.0];
        let cell = [0.3, 0.6, 0.9];
        let profile = profile_from(&[0.5, 0.1, 0.9], &[true, true, true], 0.2);
        // all-ones image stream: product equals cell everywhere
        let out = fuse_image_cell(&img, &cell, &profile).unwrap();
        assert_eq!(out, cell.to_vec());
        // below-threshold correlations keep the cell value
        let low = profile_from(&[0.1, 0.0, -0.5], &[true, true, true], 0.2);
        let out = fuse_image_cell(&[0.2, 0.4, 0.6], &cell, &low).unwrap();
        assert_eq!(out, cell.to_vec());
        // mixed gate against an elementwise oracle
        let mixed = profile_from(&[0.25, 0.1, 0.2], &[true, true, true], 0.2);
        let img = [0.5, 0.5, 0.5];
        let out = fuse_image_cell(&img, &cell, &mixed).unwrap();
        assert_eq!(out, vec![0.5 * 0.3, 0.6, 0.5 * 0.9]);
        // undefined correlation gates to cell-only even with high r
        let undef = profile_from(&[0.9, 0.9, 0.9], &[false, true, false], 0.2);
        let out = fuse_image_cell(&img, &cell, &undef).unwrap();
        assert_eq!(out, vec![0.3, 0.5 * 0.6, 0.9]);
    }

    #[test]
    fn gated_fusion_never_exceeds_either_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let profile = profile_from(&[0.9, 0.05], &[true, true], 0.2);
        for _ in 0..200 {
            let img = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let cell = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let out = fuse_image_cell(&img, &cell, &profile).unwrap();
            assert!(out[0] <= img[0].min(cell[0]) + 1e-15);
            assert_eq!(out[1], cell[1]);
        }
    }

    #[test]
    fn correlation_profile_uses_only_label_carrying_images() {
        // class 0: cells 0,1 (image 0 carries it) correlate positively;
        // class 1: only image 1 carries it, and its predictions are constant
        let cell = Tensor::from_vec(
            vec![4, 2],
            vec![0.9, 0.5, 0.1, 0.5, 0.4, 0.5, 0.6, 0.5],
        )
        .unwrap();
        let image = Tensor::from_vec(
            vec![4, 2],
            vec![0.8, 0.2, 0.2, 0.2, 0.5, 0.2, 0.5, 0.2],
        )
        .unwrap();
        let preds = PredictionMatrix { cell, image: Some(image) };
        let image_labels = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let profile = correlation_profile(&preds, &image_labels, 0.2, 4).unwrap();
        assert_eq!(profile.pairs, vec![2, 2]);
        assert!(profile.defined[0]);
        assert!((profile.r[0] - 1.0).abs() < 1e-12, "perfectly aligned pair");
        assert!(!profile.defined[1], "constant image predictions are undefined");
        assert_eq!(profile.r[1], 0.0);
        assert!(profile.gated(0));
        assert!(!profile.gated(1));
        for (k, hist) in profile.hist2d.iter().enumerate() {
            let total: usize = hist.iter().flatten().sum();
            assert_eq!(total, profile.pairs[k]);
        }
    }

    fn mat(n: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(vec![n, c], data).unwrap()
    }

    #[test]
    fn hierarchical_ensemble_matches_hand_oracle() {
        let (m1, m2, m3, m4) = (mat(3, 2, 1), mat(3, 2, 2), mat(3, 2, 3), mat(3, 2, 4));
        // single group, single model: identity
        let out = ensemble_hierarchical(&[vec![m1.clone()]]).unwrap();
        assert_eq!(out.data(), m1.data());
        // identical matrices everywhere: that matrix
        let out =
            ensemble_hierarchical(&[vec![m1.clone(), m1.clone()], vec![m1.clone()]]).unwrap();
        for (a, b) in out.data().iter().zip(m1.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        // groups (1,3): half m1 plus half the mean of the rest
        let out = ensemble_hierarchical(&[
            vec![m1.clone()],
            vec![m2.clone(), m3.clone(), m4.clone()],
        ])
        .unwrap();
        for i in 0..6 {
            let expect = 0.5 * m1.data()[i]
                + 0.5 * (m2.data()[i] + m3.data()[i] + m4.data()[i]) / 3.0;
            assert!((out.data()[i] - expect).abs() < 1e-15);
        }
        // permutation inside a group changes nothing
        let perm = ensemble_hierarchical(&[
            vec![m1.clone()],
            vec![m4.clone(), m2.clone(), m3.clone()],
        ])
        .unwrap();
        for (a, b) in out.data().iter().zip(perm.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        // grouping (1,3) differs from the flat 4-model mean
        let flat = ensemble_hierarchical(&[vec![m1, m2, m3, m4]]).unwrap();
        let max_gap = out
            .data()
            .iter()
            .zip(flat.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_gap > 1e-6, "hierarchy must weight the lone model differently");
    }

    #[test]
    fn ensemble_rejects_empty_and_misaligned_groups() {
        assert!(ensemble_hierarchical(&[]).is_err());
        assert!(ensemble_hierarchical(&[vec![]]).is_err());
        let bad = vec![vec![mat(3, 2, 1)], vec![mat(2, 2, 2)]];
        assert!(ensemble_hierarchical(&bad).is_err());
    }

    #[test]
    fn vid_weights_scale_rows() {
        let m = PredictionMatrix { cell: mat(3, 2, 9), image: None };
        let out = apply_vid(&m, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out.cell.data(), m.cell.data());
        let out = apply_vid(&m, &[1.0, 0.0, 0.5]).unwrap();
        assert_eq!(out.cell_row(1), &[0.0, 0.0]);
        for k in 0..2 {
            assert_eq!(out.cell_row(0)[k], m.cell_row(0)[k]);
            assert!((out.cell_row(2)[k] - 0.5 * m.cell_row(2)[k]).abs() < 1e-15);
        }
        assert!(apply_vid(&m, &[1.0, 1.0]).is_err());
        assert!(apply_vid(&m, &[1.0, 1.0, 1.5]).is_err());
    }

    proptest! {
        /// Everything downstream of probabilities stays inside [0,1].
        #[test]
        fn inference_graph_preserves_the_unit_interval(
            img in proptest::collection::vec(0.0f64..=1.0, 4),
            cell in proptest::collection::vec(0.0f64..=1.0, 4),
            r in proptest::collection::vec(-1.0f64..=1.0, 4),
            w in 0.0f64..=1.0,
        ) {
            let profile = CorrelationProfile {
                r: r.clone(),
                defined: vec![true; 4],
                rho_th: 0.2,
                hist2d: vec![vec![]; 4],
                pairs: vec![0; 4],
            };
            let fused = fuse_image_cell(&img, &cell, &profile).unwrap();
            for v in &fused {
                prop_assert!((0.0..=1.0).contains(v));
            }
            let m = PredictionMatrix {
                cell: Tensor::from_vec(vec![1, 4], fused).unwrap(),
                image: None,
            };
            let weighted = apply_vid(&m, &[w]).unwrap();
            for v in weighted.cell.data() {
                prop_assert!((0.0..=1.0).contains(v));
            }
            let ens = ensemble_hierarchical(&[
                vec![m.cell.clone(), weighted.cell.clone()],
                vec![m.cell.clone()],
            ]).unwrap();
            for v in ens.data() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
