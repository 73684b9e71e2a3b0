//! Minimal gradient-boosted trees for binary classification: logistic loss,
//! second-order (Newton) leaf values, exact greedy splits, and a plain-text
//! serialisation that round-trips bit-exactly.

use crate::error::{HcplError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GbtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Minimum samples a node needs before a split is considered.
    pub min_samples_split: usize,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            n_trees: 100,
            max_depth: 3,
            learning_rate: 0.1,
            lambda: 1.0,
            min_samples_split: 2,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(HcplError::Config("max_depth must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(HcplError::Config("learning_rate must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(HcplError::Config("lambda must be non-negative".into()));
        }
        if self.min_samples_split < 2 {
            return Err(HcplError::Config("min_samples_split must be at least 2".into()));
        }
        Ok(())
    }
}

/// One node of a regression tree, indexing into the tree's node arena.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

/// Regression tree over an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    idx = if x[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn max_feature_index(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature),
                TreeNode::Leaf { .. } => None,
            })
            .max()
    }
}

/// Boosted-tree model; margin = base_score + lr * sum of tree outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GbtModel {
    pub trees: Vec<Tree>,
    pub base_score: f64,
    pub learning_rate: f64,
    pub num_features: usize,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl GbtModel {
    pub fn predict_margin(&self, x: &[f64]) -> f64 {
        let mut z = self.base_score;
        for tree in &self.trees {
            z += self.learning_rate * tree.predict(x);
        }
        z
    }

    /// Probability of the positive class.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.num_features {
            return Err(HcplError::ShapeMismatch {
                op: "gbt_predict",
                detail: format!("{} features, model expects {}", x.len(), self.num_features),
            });
        }
        Ok(sigmoid(self.predict_margin(x)))
    }
}

fn logistic_loss(margins: &[f64], labels: &[f64]) -> f64 {
    let mut total = 0.0;
    for (z, y) in margins.iter().zip(labels) {
        // numerically stable -[y log p + (1-y) log(1-p)]
        let zmax = z.max(0.0);
        total += zmax - z * y + (1.0 + (-z.abs()).exp()).ln();
    }
    total / margins.len() as f64
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
    left_rows: Vec<usize>,
    right_rows: Vec<usize>,
}

/// Exact greedy split: scan every feature and boundary between distinct
/// sorted values; gain follows the second-order objective reduction. Ties
/// keep the lowest feature index, then the lowest threshold.
fn best_split(
    rows: &[usize],
    features: &[Vec<f64>],
    grad: &[f64],
    hess: &[f64],
    lambda: f64,
) -> Option<SplitChoice> {
    let g_total: f64 = rows.iter().map(|&r| grad[r]).sum();
    let h_total: f64 = rows.iter().map(|&r| hess[r]).sum();
    let parent_score = g_total * g_total / (h_total + lambda);
    let num_features = features[rows[0]].len();
    let mut best: Option<SplitChoice> = None;
    for f in 0..num_features {
        let mut order: Vec<usize> = rows.to_vec();
        order.sort_by(|&a, &b| {
            features[a][f].partial_cmp(&features[b][f]).expect("finite features")
        });
        let mut g_left = 0.0;
        let mut h_left = 0.0;
        for split_at in 1..order.len() {
            let prev = features[order[split_at - 1]][f];
            let cur = features[order[split_at]][f];
            g_left += grad[order[split_at - 1]];
            h_left += hess[order[split_at - 1]];
            if cur <= prev {
                continue;
            }
            let g_right = g_total - g_left;
            let h_right = h_total - h_left;
            let gain = 0.5
                * (g_left * g_left / (h_left + lambda)
                    + g_right * g_right / (h_right + lambda)
                    - parent_score);
            let threshold = prev + (cur - prev) / 2.0;
            let better = match &best {
                None => gain > 1e-12,
                Some(b) => gain > b.gain + 1e-12,
            };
            if better {
                best = Some(SplitChoice {
                    feature: f,
                    threshold,
                    gain,
                    left_rows: order[..split_at].to_vec(),
                    right_rows: order[split_at..].to_vec(),
                });
            }
        }
    }
    best
}

fn build_tree(
    nodes: &mut Vec<TreeNode>,
    rows: Vec<usize>,
    features: &[Vec<f64>],
    grad: &[f64],
    hess: &[f64],
    cfg: &GbtConfig,
    depth: usize,
) -> usize {
    let leaf_value = || {
        let g: f64 = rows.iter().map(|&r| grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| hess[r]).sum();
        -g / (h + cfg.lambda)
    };
    if depth >= cfg.max_depth || rows.len() < cfg.min_samples_split {
        nodes.push(TreeNode::Leaf { value: leaf_value() });
        return nodes.len() - 1;
    }
    match best_split(&rows, features, grad, hess, cfg.lambda) {
        None => {
            nodes.push(TreeNode::Leaf { value: leaf_value() });
            nodes.len() - 1
        }
        Some(choice) => {
            let idx = nodes.len();
            // placeholder; children are appended after
            nodes.push(TreeNode::Split {
                feature: choice.feature,
                threshold: choice.threshold,
                left: 0,
                right: 0,
            });
            let left = build_tree(nodes, choice.left_rows, features, grad, hess, cfg, depth + 1);
            let right =
                build_tree(nodes, choice.right_rows, features, grad, hess, cfg, depth + 1);
            if let TreeNode::Split { left: l, right: r, .. } = &mut nodes[idx] {
                *l = left;
                *r = right;
            }
            idx
        }
    }
}

/// Fit a boosted classifier. Returns the model and the mean training
/// logistic loss after each boosting round (index 0 = prior only).
pub fn gbt_train(
    features: &[Vec<f64>],
    labels: &[f64],
    cfg: &GbtConfig,
) -> Result<(GbtModel, Vec<f64>)> {
    cfg.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(HcplError::Input(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let num_features = features[0].len();
    if num_features == 0 {
        return Err(HcplError::Input("feature rows are empty".into()));
    }
    for (i, row) in features.iter().enumerate() {
        if row.len() != num_features {
            return Err(HcplError::Input(format!(
                "feature row {} has {} entries, expected {}",
                i,
                row.len(),
                num_features
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(HcplError::NonFinite { op: "gbt_train".into() });
        }
    }
    let positives = labels.iter().filter(|y| **y > 0.5).count();
    if positives < 2 || labels.len() - positives < 2 {
        return Err(HcplError::Input(format!(
            "need at least 2 examples per class, got {} positive / {} negative",
            positives,
            labels.len() - positives
        )));
    }
    let prior = (positives as f64 / labels.len() as f64).clamp(1e-6, 1.0 - 1e-6);
    let base_score = (prior / (1.0 - prior)).ln();
    let mut margins = vec![base_score; labels.len()];
    let mut loss_trace = Vec::with_capacity(cfg.n_trees + 1);
    loss_trace.push(logistic_loss(&margins, labels));
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let all_rows: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..cfg.n_trees {
        let mut grad = vec![0.0; labels.len()];
        let mut hess = vec![0.0; labels.len()];
        for i in 0..labels.len() {
            let p = sigmoid(margins[i]);
            grad[i] = p - labels[i];
            hess[i] = (p * (1.0 - p)).max(1e-12);
        }
        let mut nodes = Vec::new();
        build_tree(&mut nodes, all_rows.clone(), features, &grad, &hess, cfg, 0);
        let tree = Tree { nodes };
        for (i, row) in features.iter().enumerate() {
            margins[i] += cfg.learning_rate * tree.predict(row);
        }
        trees.push(tree);
        loss_trace.push(logistic_loss(&margins, labels));
    }
    Ok((GbtModel { trees, base_score, learning_rate: cfg.learning_rate, num_features }, loss_trace))
}

/// k-fold cross-validation accuracy (threshold 0.5); the seed fixes fold
/// assignment.
pub fn gbt_cross_validate(
    features: &[Vec<f64>],
    labels: &[f64],
    cfg: &GbtConfig,
    folds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if folds < 2 || folds > features.len() {
        return Err(HcplError::Config(format!(
            "{} folds for {} examples",
            folds,
            features.len()
        )));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut accuracies = Vec::with_capacity(folds);
    for k in 0..folds {
        let held: Vec<usize> =
            order.iter().copied().skip(k).step_by(folds).collect();
        let train_rows: Vec<usize> =
            order.iter().copied().filter(|r| !held.contains(r)).collect();
        let train_x: Vec<Vec<f64>> = train_rows.iter().map(|&r| features[r].clone()).collect();
        let train_y: Vec<f64> = train_rows.iter().map(|&r| labels[r]).collect();
        let (model, _) = gbt_train(&train_x, &train_y, cfg)?;
        let mut correct = 0;
        for &r in &held {
            let p = model.predict_proba(&features[r])?;
            if (p >= 0.5) == (labels[r] > 0.5) {
                correct += 1;
            }
        }
        accuracies.push(correct as f64 / held.len() as f64);
    }
    Ok(accuracies)
}

// ── plain-text serialisation ─────────────────────────────────────────
//
// floats are written as the hex of their IEEE bits so the round trip is
// bit-exact; the format stays line-oriented and diffable.

fn write_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn read_f64(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| HcplError::Parse { path: "<gbt>".into(), detail: format!("bad float: {}", e) })
}

impl GbtModel {
    /// Line-oriented text dump; floats as IEEE bit hex for exactness.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("gbt v1\n");
        out.push_str(&format!("num_features {}\n", self.num_features));
        out.push_str(&format!("learning_rate {}\n", write_f64(self.learning_rate)));
        out.push_str(&format!("base_score {}\n", write_f64(self.base_score)));
        out.push_str(&format!("trees {}\n", self.trees.len()));
        for tree in &self.trees {
            out.push_str(&format!("tree {}\n", tree.nodes.len()));
            for node in &tree.nodes {
                match node {
                    TreeNode::Split { feature, threshold, left, right } => {
                        out.push_str(&format!(
                            "split {} {} {} {}\n",
                            feature,
                            write_f64(*threshold),
                            left,
                            right
                        ));
                    }
                    TreeNode::Leaf { value } => {
                        out.push_str(&format!("leaf {}\n", write_f64(*value)));
                    }
                }
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |detail: String| HcplError::Parse { path: "<gbt>".into(), detail };
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| err(format!("missing {}", what)))
        };
        if next("header")? != "gbt v1" {
            return Err(err("expected 'gbt v1' header".into()));
        }
        let parse_kv = |line: &str, key: &str| -> Result<String> {
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(err(format!("expected '{}' line, got '{}'", key, line)));
            }
            it.next().map(str::to_string).ok_or_else(|| err(format!("missing {} value", key)))
        };
        let num_features: usize = parse_kv(next("num_features")?, "num_features")?
            .parse()
            .map_err(|e| err(format!("num_features: {}", e)))?;
        let learning_rate = read_f64(&parse_kv(next("learning_rate")?, "learning_rate")?)?;
        let base_score = read_f64(&parse_kv(next("base_score")?, "base_score")?)?;
        let n_trees: usize = parse_kv(next("trees")?, "trees")?
            .parse()
            .map_err(|e| err(format!("trees: {}", e)))?;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let n_nodes: usize = parse_kv(next("tree")?, "tree")?
                .parse()
                .map_err(|e| err(format!("tree size: {}", e)))?;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                let line = next("node")?;
                let parts: Vec<&str> = line.split_whitespace().collect();
                match parts.as_slice() {
                    ["split", f, th, l, r] => nodes.push(TreeNode::Split {
                        feature: f.parse().map_err(|e| err(format!("feature: {}", e)))?,
                        threshold: read_f64(th)?,
                        left: l.parse().map_err(|e| err(format!("left: {}", e)))?,
                        right: r.parse().map_err(|e| err(format!("right: {}", e)))?,
                    }),
                    ["leaf", v] => nodes.push(TreeNode::Leaf { value: read_f64(v)? }),
                    _ => return Err(err(format!("bad node line '{}'", line))),
                }
            }
            for node in &nodes {
                if let TreeNode::Split { feature, left, right, .. } = node {
                    if *feature >= num_features || *left >= nodes.len() || *right >= nodes.len() {
                        return Err(err("node references out of range".into()));
                    }
                }
            }
            trees.push(Tree { nodes });
        }
        if next("terminator")? != "end" {
            return Err(err("missing 'end' terminator".into()));
        }
        Ok(GbtModel { trees, base_score, learning_rate, num_features })
    }
}
