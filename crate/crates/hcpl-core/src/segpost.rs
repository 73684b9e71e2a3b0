//! Segmentation post-processing: turn nuclei/cell probability maps into
//! instance label maps.
//!
//! Nuclei components seed a geodesic expansion over the thresholded cell
//! foreground; a morphological cleanup pass removes debris. The production
//! pipeline runs at half resolution (2x2 mean pooling in, nearest-neighbour
//! label upscale out) and can optionally run the full-resolution path next
//! to it to report the count delta and matched-instance IoU.

use crate::error::{HcplError, Result};
use crate::par;
use crate::tensor::Tensor;

pub const DEFAULT_T_NUC: f64 = 0.5;
pub const DEFAULT_T_CELL: f64 = 0.5;
/// Default minimum instance area, in full-resolution pixels.
pub const DEFAULT_MIN_AREA: usize = 64;

/// Per-image nuclei and whole-cell probability maps, both `[H, W]` in [0,1].
#[derive(Debug, Clone)]
pub struct ProbabilityMaps {
    pub nuclei: Tensor,
    pub cell: Tensor,
}

impl ProbabilityMaps {
    pub fn new(nuclei: Tensor, cell: Tensor) -> Result<Self> {
        if nuclei.rank() != 2 || cell.rank() != 2 {
            return Err(HcplError::ShapeMismatch {
                op: "probability_maps",
                detail: format!(
                    "expected rank-2 maps, got ranks {} and {}",
                    nuclei.rank(),
                    cell.rank()
                ),
            });
        }
        if nuclei.shape() != cell.shape() {
            return Err(HcplError::ShapeMismatch {
                op: "probability_maps",
                detail: format!("nuclei {:?} vs cell {:?}", nuclei.shape(), cell.shape()),
            });
        }
        for (name, map) in [("nuclei", &nuclei), ("cell", &cell)] {
            if map.data().iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
                return Err(HcplError::InvalidOperand {
                    op: "probability_maps",
                    detail: format!("{name} map has values outside [0,1]"),
                });
            }
        }
        Ok(Self { nuclei, cell })
    }

    pub fn height(&self) -> usize {
        self.nuclei.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.nuclei.shape()[1]
    }
}

/// Instance label map: 0 is background, instances are labelled 1..=count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMasks {
    pub height: usize,
    pub width: usize,
    /// Row-major, length `height * width`.
    pub labels: Vec<u32>,
    pub count: usize,
}

impl InstanceMasks {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, labels: vec![0; height * width], count: 0 }
    }

    pub fn label_at(&self, i: usize, j: usize) -> u32 {
        self.labels[i * self.width + j]
    }

    /// Pixel area per instance; index `k` holds the area of label `k + 1`.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.count];
        for &l in &self.labels {
            if l > 0 {
                areas[(l - 1) as usize] += 1;
            }
        }
        areas
    }

    pub fn total_foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    /// Checks the structural invariants: labels contiguous in 1..=count and
    /// every instance 4-connected.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(HcplError::Input("label map length does not match its shape".into()));
        }
        let mut seen = vec![false; self.count];
        for &l in &self.labels {
            if l as usize > self.count {
                return Err(HcplError::Input(format!(
                    "label {l} exceeds instance count {}",
                    self.count
                )));
            }
            if l > 0 {
                seen[(l - 1) as usize] = true;
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(HcplError::Input(format!("label {} has no pixels", k + 1)));
        }
        for k in 1..=self.count {
            if !self.instance_is_connected(k as u32) {
                return Err(HcplError::Input(format!("instance {k} is not 4-connected")));
            }
        }
        Ok(())
    }

    /// Label map as a `[H, W]` tensor of label values, for the crop helpers
    /// and the tensor container.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.labels.iter().map(|&l| l as f64).collect();
        Tensor::from_vec(vec![self.height, self.width], data)
            .expect("label map length matches its shape")
    }

    /// Inverse of [`InstanceMasks::to_tensor`]; values must be non-negative
    /// integers and the positive ones contiguous from 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(HcplError::ShapeMismatch {
                op: "instance_masks",
                detail: format!("expected rank 2, got {:?}", t.shape()),
            });
        }
        let mut labels = Vec::with_capacity(t.numel());
        let mut max = 0u32;
        for &v in t.data() {
            if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(HcplError::InvalidOperand {
                    op: "instance_masks",
                    detail: format!("label value {v} is not a non-negative integer"),
                });
            }
            let l = v as u32;
            max = max.max(l);
            labels.push(l);
        }
        let out =
            Self { height: t.shape()[0], width: t.shape()[1], labels, count: max as usize };
        for k in 1..=out.count {
            if !out.labels.iter().any(|&l| l as usize == k) {
                return Err(HcplError::InvalidOperand {
                    op: "instance_masks",
                    detail: format!("labels are not contiguous: {k} is missing"),
                });
            }
        }
        Ok(out)
    }

    fn instance_is_connected(&self, label: u32) -> bool {
        let start = match self.labels.iter().position(|&l| l == label) {
            Some(p) => p,
            None => return false,
        };
        let total = self.labels.iter().filter(|&&l| l == label).count();
        let mut visited = vec![false; self.labels.len()];
        let mut stack = vec![start];
        visited[start] = true;
        let mut reached = 0usize;
        while let Some(p) = stack.pop() {
            reached += 1;
            for q in neighbours4(p, self.height, self.width) {
                if !visited[q] && self.labels[q] == label {
                    visited[q] = true;
                    stack.push(q);
                }
            }
        }
        reached == total
    }
}

fn neighbours4(idx: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (i, j) = (idx / w, idx % w);
    let mut out = [usize::MAX; 4];
    let mut n = 0;
    if i > 0 {
        out[n] = idx - w;
        n += 1;
    }
    if i + 1 < h {
        out[n] = idx + w;
        n += 1;
    }
    if j > 0 {
        out[n] = idx - 1;
        n += 1;
    }
    if j + 1 < w {
        out[n] = idx + 1;
        n += 1;
    }
    out.into_iter().take(n)
}

/// 2x2 mean pooling; both dimensions must be even.
pub fn downscale_mean(map: &Tensor) -> Result<Tensor> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(HcplError::InvalidOperand {
            op: "downscale_mean",
            detail: format!("dimensions {h}x{w} not divisible by 2"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut s = 0.0;
            for di in 0..2 {
                for dj in 0..2 {
                    s += map.at2(2 * i + di, 2 * j + dj);
                }
            }
            out[i * ow + j] = s / 4.0;
        }
    }
    Tensor::from_vec(vec![oh, ow], out)
}

/// Nearest-neighbour 2x upscale of a probability map.
pub fn upscale_nearest(map: &Tensor) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = vec![0.0; 4 * h * w];
    for i in 0..2 * h {
        for j in 0..2 * w {
            out[i * 2 * w + j] = map.at2(i / 2, j / 2);
        }
    }
    Tensor::from_vec(vec![2 * h, 2 * w], out).expect("upscale shape is consistent")
}

/// Nearest-neighbour 2x upscale of a label map. Each pixel becomes a 2x2
/// block, so label set, connectivity, and count carry over unchanged.
pub fn upscale_labels(masks: &InstanceMasks) -> InstanceMasks {
    let (h, w) = (masks.height, masks.width);
    let mut labels = vec![0u32; 4 * h * w];
    for i in 0..2 * h {
        for j in 0..2 * w {
            labels[i * 2 * w + j] = masks.labels[(i / 2) * w + j / 2];
        }
    }
    InstanceMasks { height: 2 * h, width: 2 * w, labels, count: masks.count }
}

/// Seeded instance extraction.
///
/// Pixels with nuclei probability >= `t_nuc` form seeds, labelled by
/// 4-connected component in raster order of each component's first pixel.
/// Seeds then grow over the domain `{cell >= t_cell} U seeds` by
/// level-synchronous multi-source BFS; at equal geodesic distance the lowest
/// seed label wins. Foreground pixels unreachable from any seed stay
/// background. No seeds is a valid empty result, not an error.
pub fn extract_instances(maps: &ProbabilityMaps, t_nuc: f64, t_cell: f64) -> Result<InstanceMasks> {
    for (name, t) in [("t_nuc", t_nuc), ("t_cell", t_cell)] {
        if !t.is_finite() || t <= 0.0 || t >= 1.0 {
            return Err(HcplError::Config(format!("{name} must lie in (0,1), got {t}")));
        }
    }
    let (h, w) = (maps.height(), maps.width());
    let n = h * w;
    let nuc = maps.nuclei.data();
    let cell = maps.cell.data();

    let mut labels = vec![0u32; n];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..n {
        if nuc[start] < t_nuc || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            for q in neighbours4(p, h, w) {
                if labels[q] == 0 && nuc[q] >= t_nuc {
                    labels[q] = count;
                    stack.push(q);
                }
            }
        }
    }

    // Growth domain fixed before expansion: seed pixels plus cell foreground.
    let grow: Vec<bool> = (0..n).map(|p| labels[p] != 0 || cell[p] >= t_cell).collect();

    let mut frontier: Vec<usize> = (0..n).filter(|&p| labels[p] != 0).collect();
    let mut claims: Vec<(usize, u32)> = Vec::new();
    while !frontier.is_empty() {
        claims.clear();
        for &p in &frontier {
            for q in neighbours4(p, h, w) {
                if labels[q] == 0 && grow[q] {
                    claims.push((q, labels[p]));
                }
            }
        }
        // Collecting the whole level before assigning keeps the expansion
        // level-synchronous; the sort makes the lowest label win each pixel.
        claims.sort_unstable();
        frontier.clear();
        for &(q, l) in &claims {
            if labels[q] == 0 {
                labels[q] = l;
                frontier.push(q);
            }
        }
    }

    Ok(InstanceMasks { height: h, width: w, labels, count: count as usize })
}

/// Exact pixel accounting for one cleanup pass:
/// `input_area == output_area + pixels_removed_small + pixels_removed_opening`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanupReport {
    pub input_count: usize,
    pub output_count: usize,
    pub input_area: usize,
    pub output_area: usize,
    pub pixels_removed_small: usize,
    pub pixels_removed_opening: usize,
}

/// Removes instances below `min_area`, then applies one 3x3 opening
/// (erode + dilate) per surviving instance. Opening never grows an instance;
/// if it splits one, the largest 4-connected piece is kept (earliest pixel
/// wins ties) so the instance count stays monotone. Survivors are relabelled
/// contiguously in ascending input-label order.
pub fn morph_cleanup(masks: &InstanceMasks, min_area: usize) -> (InstanceMasks, CleanupReport) {
    let (h, w) = (masks.height, masks.width);
    let areas = masks.areas();
    let input_area: usize = areas.iter().sum();

    let mut pixels_removed_small = 0usize;
    let mut pixels_removed_opening = 0usize;
    let mut out_labels = vec![0u32; h * w];
    let mut next_label = 0u32;

    for k in 0..masks.count {
        let label = (k + 1) as u32;
        if areas[k] < min_area {
            pixels_removed_small += areas[k];
            continue;
        }
        let member: Vec<bool> = masks.labels.iter().map(|&l| l == label).collect();
        let opened = open_3x3(&member, h, w);
        let kept = largest_component(&opened, h, w);
        let kept_area = kept.iter().filter(|&&b| b).count();
        pixels_removed_opening += areas[k] - kept_area;
        if kept_area == 0 {
            continue;
        }
        next_label += 1;
        for (p, &b) in kept.iter().enumerate() {
            if b {
                out_labels[p] = next_label;
            }
        }
    }

    let out = InstanceMasks { height: h, width: w, labels: out_labels, count: next_label as usize };
    let output_area = out.total_foreground();
    let report = CleanupReport {
        input_count: masks.count,
        output_count: out.count,
        input_area,
        output_area,
        pixels_removed_small,
        pixels_removed_opening,
    };
    (out, report)
}

/// Morphological opening with the full 3x3 structuring element. Erosion
/// treats out-of-grid pixels as background, so the result is always a subset
/// of the input.
fn open_3x3(member: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |set: &[bool], i: i64, j: i64| -> bool {
        i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && set[i as usize * w + j as usize]
    };
    let mut eroded = vec![false; h * w];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let all = (-1..=1).all(|di| (-1..=1).all(|dj| at(member, i + di, j + dj)));
            eroded[i as usize * w + j as usize] = all;
        }
    }
    let mut dilated = vec![false; h * w];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let any = (-1..=1).any(|di| (-1..=1).any(|dj| at(&eroded, i + di, j + dj)));
            dilated[i as usize * w + j as usize] = any;
        }
    }
    dilated
}

fn largest_component(member: &[bool], h: usize, w: usize) -> Vec<bool> {
    let n = h * w;
    let mut comp = vec![0u32; n];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if !member[start] || comp[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        comp[start] = id;
        stack.push(start);
        let mut size = 0usize;
        while let Some(p) = stack.pop() {
            size += 1;
            for q in neighbours4(p, h, w) {
                if member[q] && comp[q] == 0 {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        sizes.push(size);
    }
    // Components are discovered in raster order, so at equal size the earlier
    // (lower id) one is kept.
    let best = match sizes.iter().enumerate().max_by_key(|&(i, &s)| (s, usize::MAX - i)) {
        Some((i, _)) => i as u32 + 1,
        None => return vec![false; n],
    };
    comp.iter().map(|&c| c == best).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentConfig {
    pub t_nuc: f64,
    pub t_cell: f64,
    /// Minimum instance area in full-resolution pixels; the half-resolution
    /// path scales it by 1/4.
    pub min_area: usize,
    /// Also run the full-resolution path and report the comparison.
    pub compare: bool,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            t_nuc: DEFAULT_T_NUC,
            t_cell: DEFAULT_T_CELL,
            min_area: DEFAULT_MIN_AREA,
            compare: false,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("t_nuc", self.t_nuc), ("t_cell", self.t_cell)] {
            if !t.is_finite() || t <= 0.0 || t >= 1.0 {
                return Err(HcplError::Config(format!("{name} must lie in (0,1), got {t}")));
            }
        }
        Ok(())
    }
}

/// Full-vs-fast path comparison on one image.
#[derive(Debug, Clone)]
pub struct PathComparison {
    pub full_count: usize,
    pub fast_count: usize,
    pub matched: usize,
    /// Mean IoU over greedily matched instance pairs; 0 when nothing matched.
    pub mean_matched_iou: f64,
}

#[derive(Debug, Clone)]
pub struct SegmentReport {
    pub cleanup: CleanupReport,
    pub comparison: Option<PathComparison>,
}

/// Half-resolution pipeline: 2x2 mean downscale, extract, cleanup, nearest
/// 2x label upscale. With `cfg.compare` the full-resolution path runs too
/// and the report carries the instance-count delta and matched IoU.
pub fn segment_pipeline(
    maps: &ProbabilityMaps,
    cfg: &SegmentConfig,
) -> Result<(InstanceMasks, SegmentReport)> {
    cfg.validate()?;
    let half = ProbabilityMaps::new(downscale_mean(&maps.nuclei)?, downscale_mean(&maps.cell)?)?;
    let extracted = extract_instances(&half, cfg.t_nuc, cfg.t_cell)?;
    let (cleaned, cleanup) = morph_cleanup(&extracted, cfg.min_area / 4);
    let out = upscale_labels(&cleaned);

    let comparison = if cfg.compare {
        let full = extract_instances(maps, cfg.t_nuc, cfg.t_cell)?;
        let (full_clean, _) = morph_cleanup(&full, cfg.min_area);
        Some(compare_paths(&full_clean, &out))
    } else {
        None
    };
    Ok((out, SegmentReport { cleanup, comparison }))
}

/// Greedy instance matching between the two paths: fast instances in label
/// order each take the unmatched full instance of highest IoU (> 0).
fn compare_paths(full: &InstanceMasks, fast: &InstanceMasks) -> PathComparison {
    let full_areas = full.areas();
    let fast_areas = fast.areas();
    let mut inter = vec![vec![0usize; full.count]; fast.count];
    for (&a, &b) in fast.labels.iter().zip(&full.labels) {
        if a > 0 && b > 0 {
            inter[(a - 1) as usize][(b - 1) as usize] += 1;
        }
    }

    let mut matched_full = vec![false; full.count];
    let mut matched = 0usize;
    let mut iou_sum = 0.0;
    for fl in 0..fast.count {
        let mut best: Option<(f64, usize)> = None;
        for gl in 0..full.count {
            if matched_full[gl] || inter[fl][gl] == 0 {
                continue;
            }
            let union = fast_areas[fl] + full_areas[gl] - inter[fl][gl];
            let iou = inter[fl][gl] as f64 / union as f64;
            if best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, gl));
            }
        }
        if let Some((iou, gl)) = best {
            matched_full[gl] = true;
            matched += 1;
            iou_sum += iou;
        }
    }
    PathComparison {
        full_count: full.count,
        fast_count: fast.count,
        matched,
        mean_matched_iou: if matched == 0 { 0.0 } else { iou_sum / matched as f64 },
    }
}

/// Runs the pipeline over a batch of images, in parallel when enabled.
pub fn segment_batch(
    maps: &[ProbabilityMaps],
    cfg: &SegmentConfig,
) -> Result<Vec<(InstanceMasks, SegmentReport)>> {
    par::try_map_indices(maps.len(), |i| segment_pipeline(&maps[i], cfg))
}

/// Always-sequential counterpart of [`segment_batch`] for benchmarks.
pub fn segment_batch_seq(
    maps: &[ProbabilityMaps],
    cfg: &SegmentConfig,
) -> Result<Vec<(InstanceMasks, SegmentReport)>> {
    par::try_map_indices_seq(maps.len(), |i| segment_pipeline(&maps[i], cfg))
}
