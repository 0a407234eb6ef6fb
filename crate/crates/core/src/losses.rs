//! Bipartite matching and the set-prediction training objectives.

use serde::{Deserialize, Serialize};

use crate::boxes::{Box9DoF, Vec3};
use crate::error::{Error, Result};
use crate::tensor::{focal_term, sigmoid, softplus};
use crate::tensor::{Graph, Tensor, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Width of the box regression encoding: center offset (3), log-extents (3),
/// then (sin, cos) for each of the three angles.
pub const BOX_DIM: usize = 12;

const LOG_EXTENT_CLAMP: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detection,
    Grounding,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Detection => "detection",
            Task::Grounding => "grounding",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    /// (prediction, ground truth), sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Min-cost assignment of size `rows.len()` for `rows.len() <= cols.len()`,
/// restricted to the given rows and columns. Returns (column for each row, cost).
fn kuhn_munkres(cost: &Tensor, rows: &[usize], cols: &[usize], transposed: bool) -> (Vec<usize>, f64) {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let at = |i: usize, j: usize| {
        if transposed {
            cost.get(cols[j], rows[i])
        } else {
            cost.get(rows[i], cols[j])
        }
    };
    // 1-based potentials formulation; index 0 is a virtual row/column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = assign.iter().enumerate().map(|(i, &j)| at(i, j)).sum();
    (assign, total)
}

/// Optimal cost of matching min(|rows|, |cols|) pairs within the sub-matrix.
fn optimal_cost(cost: &Tensor, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        kuhn_munkres(cost, rows, cols, false).1
    } else {
        kuhn_munkres(cost, cols, rows, true).1
    }
}

/// Globally minimal assignment for a K×G cost matrix. Among optimal
/// assignments the lexicographically smallest sorted pair list is returned.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    if cost.shape().len() != 2 {
        return Err(Error::shape("hungarian", format!("cost must be a matrix, got {:?}", cost.shape())));
    }
    let (k, g) = (cost.shape()[0], cost.shape()[1]);
    if k == 0 || g == 0 {
        return Ok(Assignment::default());
    }
    let all_rows: Vec<usize> = (0..k).collect();
    let mut cols: Vec<usize> = (0..g).collect();
    let target = optimal_cost(cost, &all_rows, &cols);
    let scale = cost.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-10 * (1.0 + scale * k.min(g) as f64);
    let need = k.min(g);

    // Fix pairs greedily in lexicographic order, keeping only choices that
    // still admit an optimal completion.
    let mut pairs = Vec::with_capacity(need);
    let mut fixed = 0.0;
    for i in 0..k {
        if pairs.len() == need {
            break;
        }
        let rest: Vec<usize> = (i + 1..k).collect();
        let remaining = need - pairs.len() - 1;
        let mut chosen = None;
        for (pos, &j) in cols.iter().enumerate() {
            let others: Vec<usize> = cols.iter().copied().filter(|&c| c != j).collect();
            if rest.len().min(others.len()) < remaining {
                continue;
            }
            let total = fixed + cost.get(i, j) + optimal_cost(cost, &rest, &others);
            if total <= target + tol {
                chosen = Some(pos);
                break;
            }
        }
        if let Some(pos) = chosen {
            let j = cols.remove(pos);
            fixed += cost.get(i, j);
            pairs.push((i, j));
        }
    }
    let cost_sum = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
    Ok(Assignment { pairs, cost: cost_sum })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub ground: f64,
    pub spatial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            box_: 1.0,
            ground: 1.0,
            spatial: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("cls", self.cls), ("box", self.box_), ("ground", self.ground), ("spatial", self.spatial)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("loss weight {name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// Weight on the focal term: `cls` for detection, `ground` for grounding.
    pub fn focal(&self, task: Task) -> f64 {
        match task {
            Task::Detection => self.cls,
            Task::Grounding => self.ground,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: Task,
    /// Focal classification term (L_cls for detection, grounding focal term otherwise).
    pub focal: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    /// Spatial relevance term; always 0 for detection.
    pub spatial: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn combine(task: Task, focal: f64, box_: f64, spatial: f64, weights: LossWeights) -> Self {
        let spatial = if task == Task::Detection { 0.0 } else { spatial };
        let mut total = weights.focal(task) * focal + weights.box_ * box_;
        if task == Task::Grounding {
            total += weights.spatial * spatial;
        }
        Self {
            task,
            focal,
            box_,
            spatial,
            total,
            weights,
        }
    }
}

/// Ground truth for one task on one scene. For grounding, `boxes` holds the
/// single referred box and `classes` is `[0]` (the lone confidence column).
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<Box9DoF>,
    pub classes: Vec<usize>,
}

impl GroundTruth {
    pub fn detection(boxes: Vec<Box9DoF>, classes: Vec<usize>) -> Result<Self> {
        if boxes.len() != classes.len() {
            return Err(Error::shape("GroundTruth", format!("{} boxes, {} classes", boxes.len(), classes.len())));
        }
        Ok(Self { boxes, classes })
    }

    pub fn grounding(target: Box9DoF) -> Self {
        Self {
            boxes: vec![target],
            classes: vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Regression target for `b` relative to an anchor point.
pub fn encode_box(b: &Box9DoF, anchor: &Vec3) -> [f64; BOX_DIM] {
    let mut e = [0.0; BOX_DIM];
    for i in 0..3 {
        e[i] = b.center[i] - anchor[i];
        e[3 + i] = b.size[i].ln();
        e[6 + 2 * i] = b.angles[i].sin();
        e[7 + 2 * i] = b.angles[i].cos();
    }
    e
}

/// Inverse of [`encode_box`]. Extents come from `exp`, so they are positive
/// for any input; log-extents are clamped to keep them finite.
pub fn decode_box(e: &[f64], anchor: &Vec3) -> Result<Box9DoF> {
    if e.len() != BOX_DIM {
        return Err(Error::shape("decode_box", format!("expected {BOX_DIM} values, got {}", e.len())));
    }
    let center = Vec3::new(anchor.x + e[0], anchor.y + e[1], anchor.z + e[2]);
    let size = Vec3::new(
        e[3].clamp(-LOG_EXTENT_CLAMP, LOG_EXTENT_CLAMP).exp(),
        e[4].clamp(-LOG_EXTENT_CLAMP, LOG_EXTENT_CLAMP).exp(),
        e[5].clamp(-LOG_EXTENT_CLAMP, LOG_EXTENT_CLAMP).exp(),
    );
    let angles = [e[6].atan2(e[7]), e[8].atan2(e[9]), e[10].atan2(e[11])];
    Box9DoF::new(center, size, angles)
}

/// L1 on centers, on log-extent ratios and on (sin, cos) of each angle.
pub fn box_loss(pred: &Box9DoF, gt: &Box9DoF) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        s += (pred.center[i] - gt.center[i]).abs();
        s += (pred.size[i] / gt.size[i]).ln().abs();
        s += (pred.angles[i].sin() - gt.angles[i].sin()).abs();
        s += (pred.angles[i].cos() - gt.angles[i].cos()).abs();
    }
    s
}

/// Sigmoid focal loss summed over elements and divided by the number of
/// positive targets (at least 1).
pub fn focal_loss(logits: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    check_binary(logits, targets, "focal_loss")?;
    let positives = targets.iter().filter(|&&t| t == 1.0).count().max(1);
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| focal_term(x, t, alpha, gamma).0)
        .sum();
    Ok(sum / positives as f64)
}

/// Mean binary cross-entropy of relevance logits against inside-box labels.
pub fn spatial_relevance_loss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    check_binary(logits, labels, "spatial_relevance_loss")?;
    if logits.is_empty() {
        return Err(Error::Empty("spatial_relevance_loss: no voxels".into()));
    }
    let sum: f64 = logits.iter().zip(labels).map(|(&x, &y)| softplus(x) - y * x).sum();
    Ok(sum / logits.len() as f64)
}

fn check_binary(logits: &[f64], targets: &[f64], ctx: &str) -> Result<()> {
    if logits.len() != targets.len() {
        return Err(Error::shape(ctx, format!("{} logits vs {} targets", logits.len(), targets.len())));
    }
    if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidArgument(format!("{ctx}: targets must be 0 or 1")));
    }
    Ok(())
}

/// 1.0 for each point inside `target` (boundary included), else 0.0.
pub fn spatial_labels(points: &[Vec3], target: &Box9DoF) -> Vec<f64> {
    points.iter().map(|p| f64::from(u8::from(target.contains_point(p)))).collect()
}

/// Cost (k, g) = λ_cls·(−p_k(class_g)) + λ_box·box_loss(box_k, box_g), with
/// p the sigmoid of the class (or grounding) logit.
pub fn matching_cost(
    pred_boxes: &[Box9DoF],
    logits: &Tensor,
    gt: &GroundTruth,
    task: Task,
    weights: &LossWeights,
) -> Result<Tensor> {
    let (k, classes) = logits.dims2()?;
    if k != pred_boxes.len() {
        return Err(Error::shape("matching_cost", format!("{} boxes, {k} logit rows", pred_boxes.len())));
    }
    if let Some(&c) = gt.classes.iter().find(|&&c| c >= classes) {
        return Err(Error::shape("matching_cost", format!("class {c} with {classes} logit columns")));
    }
    let wc = weights.focal(task);
    let mut data = Vec::with_capacity(k * gt.len());
    for (i, pb) in pred_boxes.iter().enumerate() {
        for (b, &c) in gt.boxes.iter().zip(&gt.classes) {
            data.push(wc * -sigmoid(logits.get(i, c)) + weights.box_ * box_loss(pb, b));
        }
    }
    Tensor::matrix(k, gt.len(), data)
}

/// Differentiable prediction handles for one task.
#[derive(Clone, Debug)]
pub struct PredictionVars<'a> {
    /// K × num_classes (detection) or K × 1 (grounding).
    pub logits: Var,
    /// K × [`BOX_DIM`] normalized box encodings.
    pub boxes: Var,
    /// Query positions the encodings are relative to.
    pub anchors: &'a [Vec3],
    /// N × 1 relevance logits (grounding only).
    pub relevance: Option<Var>,
}

/// Decodes the current box encodings into boxes.
pub fn decode_all(g: &Graph, boxes: Var, anchors: &[Vec3]) -> Result<Vec<Box9DoF>> {
    let t = g.value(boxes);
    if t.rows() != anchors.len() || t.cols() != BOX_DIM {
        return Err(Error::shape("decode_all", format!("{:?} encodings for {} anchors", t.shape(), anchors.len())));
    }
    anchors.iter().enumerate().map(|(i, a)| decode_box(t.row(i), a)).collect()
}

/// Builds the task objective on the graph. Matching is computed from current
/// values unless `frozen` supplies it. Returns the scalar loss, its breakdown
/// and the assignment used.
pub fn total_loss_graph(
    g: &mut Graph,
    preds: &PredictionVars,
    gt: &GroundTruth,
    task: Task,
    weights: &LossWeights,
    spatial_targets: Option<&[f64]>,
    frozen: Option<&Assignment>,
) -> Result<(Var, LossBreakdown, Assignment)> {
    weights.validate()?;
    let pred_boxes = decode_all(g, preds.boxes, preds.anchors)?;
    let logits = g.value(preds.logits).clone();
    let (k, classes) = logits.dims2()?;
    let assignment = match frozen {
        Some(a) => a.clone(),
        None => hungarian(&matching_cost(&pred_boxes, &logits, gt, task, weights)?)?,
    };
    if assignment.pairs.iter().any(|&(p, t)| p >= k || t >= gt.len()) {
        return Err(Error::InvalidArgument("assignment indices out of range".into()));
    }

    let mut targets = vec![0.0; k * classes];
    for &(p, t) in &assignment.pairs {
        targets[p * classes + gt.classes[t]] = 1.0;
    }
    let matched = assignment.pairs.len().max(1) as f64;
    let focal_el = g.focal_with_logits(preds.logits, &targets, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let focal_sum = g.sum(focal_el);
    let focal = g.scale(focal_sum, 1.0 / matched);

    let box_term = if assignment.pairs.is_empty() {
        g.constant(Tensor::filled(vec![1, 1], 0.0))
    } else {
        let idx: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
        let mut enc = Vec::with_capacity(idx.len() * BOX_DIM);
        for &(p, t) in &assignment.pairs {
            enc.extend(encode_box(&gt.boxes[t], &preds.anchors[p]));
        }
        let target = g.constant(Tensor::matrix(idx.len(), BOX_DIM, enc)?);
        let picked = g.gather_rows(preds.boxes, &idx)?;
        let diff = g.sub(picked, target)?;
        let l1 = g.abs(diff);
        let s = g.sum(l1);
        g.scale(s, 1.0 / matched)
    };

    let mut total = {
        let a = g.scale(focal, weights.focal(task));
        let b = g.scale(box_term, weights.box_);
        g.add(a, b)?
    };
    let mut spatial_value = 0.0;
    if task == Task::Grounding {
        if let (Some(rel), Some(labels)) = (preds.relevance, spatial_targets) {
            let bce = g.bce_with_logits(rel, labels)?;
            let spatial = g.mean(bce);
            spatial_value = g.value(spatial).item();
            let w = g.scale(spatial, weights.spatial);
            total = g.add(total, w)?;
        }
    }
    let mut breakdown = LossBreakdown::combine(
        task,
        g.value(focal).item(),
        g.value(box_term).item(),
        spatial_value,
        *weights,
    );
    breakdown.total = g.value(total).item();
    Ok((total, breakdown, assignment))
}

/// Value-only objective for fixed prediction tensors.
pub fn total_loss(
    logits: &Tensor,
    box_encodings: &Tensor,
    anchors: &[Vec3],
    relevance: Option<&Tensor>,
    gt: &GroundTruth,
    task: Task,
    weights: &LossWeights,
    spatial_targets: Option<&[f64]>,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let preds = PredictionVars {
        logits: g.constant(logits.clone()),
        boxes: g.constant(box_encodings.clone()),
        anchors,
        relevance: relevance.map(|r| g.constant(r.clone())),
    };
    Ok(total_loss_graph(&mut g, &preds, gt, task, weights, spatial_targets, None)?.1)
}
