//! IoU-threshold average precision for detection and grounding, bucketed by
//! instruction difficulty and view dependency.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{box_iou, Box9DoF};
use crate::error::{Error, Result};
use crate::scene::{Difficulty, CLASS_NAMES};

/// Ranking of predictions: descending score, then ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// TP flag for each prediction (in input order). Predictions claim ground
/// truth greedily in descending score order; each takes the unclaimed box it
/// overlaps most and is a TP iff that IoU reaches the threshold.
pub fn match_predictions(boxes: &[Box9DoF], scores: &[f64], gts: &[Box9DoF], iou_thresh: f64) -> Result<Vec<bool>> {
    if boxes.len() != scores.len() {
        return Err(Error::shape("match_predictions", format!("{} boxes, {} scores", boxes.len(), scores.len())));
    }
    let mut claimed = vec![false; gts.len()];
    let mut flags = vec![false; boxes.len()];
    for i in ranking(scores) {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if claimed[j] {
                continue;
            }
            let iou = box_iou(&boxes[i], gt);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou >= iou_thresh {
                claimed[j] = true;
                flags[i] = true;
            }
        }
    }
    Ok(flags)
}

/// All-point interpolated AP: area under the precision–recall curve with
/// precision replaced by its running maximum from the right.
pub fn average_precision(scores: &[f64], tp: &[bool], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::InvalidArgument("average precision needs at least one ground-truth box".into()));
    }
    if scores.len() != tp.len() {
        return Err(Error::shape("average_precision", format!("{} scores, {} flags", scores.len(), tp.len())));
    }
    let order = ranking(scores);
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut hits = 0usize;
    for (n, &i) in order.iter().enumerate() {
        hits += usize::from(tp[i]);
        precision.push(hits as f64 / (n + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Ok(ap.clamp(0.0, 1.0))
}

/// One instruction's ranked predictions and its referred box.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingResult {
    pub scene: String,
    pub instruction: usize,
    pub boxes: Vec<Box9DoF>,
    pub scores: Vec<f64>,
    pub target: Box9DoF,
    pub difficulty: Difficulty,
    pub view_dep: bool,
}

/// One scene's detection output and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub boxes: Vec<Box9DoF>,
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
    pub gt_boxes: Vec<Box9DoF>,
    pub gt_classes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// `None` when the bucket holds no instructions.
    pub ap: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub overall: Bucket,
    pub easy: Bucket,
    pub hard: Bucket,
    pub view_dep: Bucket,
    pub view_indep: Bucket,
}

impl BucketReport {
    pub fn buckets(&self) -> [(&'static str, Bucket); 5] {
        [
            ("Overall", self.overall),
            ("Easy", self.easy),
            ("Hard", self.hard),
            ("View-Dep", self.view_dep),
            ("View-Indep", self.view_indep),
        ]
    }
}

/// Pooled AP over a subset of instructions: every query of every instruction
/// is ranked together, with one ground-truth box per instruction.
fn pooled_ap(results: &[&GroundingResult], iou: f64) -> Result<Bucket> {
    if results.is_empty() {
        return Ok(Bucket { ap: None, count: 0 });
    }
    let mut scores = Vec::new();
    let mut flags = Vec::new();
    for r in results {
        flags.extend(match_predictions(&r.boxes, &r.scores, std::slice::from_ref(&r.target), iou)?);
        scores.extend_from_slice(&r.scores);
    }
    Ok(Bucket {
        ap: Some(average_precision(&scores, &flags, results.len())?),
        count: results.len(),
    })
}

pub fn bucket_report(results: &[GroundingResult], iou: f64) -> Result<BucketReport> {
    let pick = |f: &dyn Fn(&GroundingResult) -> bool| results.iter().filter(|r| f(r)).collect::<Vec<_>>();
    Ok(BucketReport {
        overall: pooled_ap(&pick(&|_| true), iou)?,
        easy: pooled_ap(&pick(&|r| r.difficulty == Difficulty::Easy), iou)?,
        hard: pooled_ap(&pick(&|r| r.difficulty == Difficulty::Hard), iou)?,
        view_dep: pooled_ap(&pick(&|r| r.view_dep), iou)?,
        view_indep: pooled_ap(&pick(&|r| !r.view_dep), iou)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    pub ap: f64,
    pub num_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Mean over classes with at least one ground-truth box.
    pub map: Option<f64>,
    pub per_class: Vec<ClassAp>,
}

pub fn detection_report(results: &[DetectionResult], num_classes: usize, iou: f64) -> Result<DetectionReport> {
    let mut per_class = Vec::new();
    for c in 0..num_classes {
        let mut scores = Vec::new();
        let mut flags = Vec::new();
        let mut num_gt = 0;
        for r in results {
            let idx: Vec<usize> = (0..r.boxes.len()).filter(|&i| r.classes[i] == c).collect();
            let gts: Vec<Box9DoF> =
                r.gt_boxes.iter().zip(&r.gt_classes).filter(|(_, &g)| g == c).map(|(b, _)| *b).collect();
            num_gt += gts.len();
            let boxes: Vec<Box9DoF> = idx.iter().map(|&i| r.boxes[i]).collect();
            let s: Vec<f64> = idx.iter().map(|&i| r.scores[i]).collect();
            flags.extend(match_predictions(&boxes, &s, &gts, iou)?);
            scores.extend(s);
        }
        if num_gt > 0 {
            per_class.push(ClassAp {
                class: CLASS_NAMES.get(c).map_or_else(|| c.to_string(), |n| n.to_string()),
                ap: average_precision(&scores, &flags, num_gt)?,
                num_gt,
            });
        }
    }
    let map = (!per_class.is_empty()).then(|| per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64);
    Ok(DetectionReport { map, per_class })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub iou: f64,
    pub grounding: BucketReport,
    pub detection: DetectionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub scene: String,
    pub instruction: usize,
    /// IoU of the highest-confidence prediction with the referred box.
    pub top1_iou: f64,
    pub best_iou: f64,
    /// 1-based rank of the first prediction reaching the lowest threshold.
    pub first_hit_rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<ThresholdReport>,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn diagnostics(results: &[GroundingResult], iou: f64) -> Vec<Diagnostic> {
    results
        .iter()
        .map(|r| {
            let order = ranking(&r.scores);
            let ious: Vec<f64> = order.iter().map(|&i| box_iou(&r.boxes[i], &r.target)).collect();
            Diagnostic {
                scene: r.scene.clone(),
                instruction: r.instruction,
                top1_iou: ious.first().copied().unwrap_or(0.0),
                best_iou: ious.iter().copied().fold(0.0, f64::max),
                first_hit_rank: ious.iter().position(|&x| x >= iou).map(|p| p + 1),
            }
        })
        .collect()
}

pub fn evaluate(
    grounding: &[GroundingResult],
    detection: &[DetectionResult],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidArgument("IoU thresholds must lie in [0, 1]".into()));
    }
    let mut reports = Vec::with_capacity(thresholds.len());
    for &iou in thresholds {
        reports.push(ThresholdReport {
            iou,
            grounding: bucket_report(grounding, iou)?,
            detection: detection_report(detection, num_classes, iou)?,
        });
    }
    let lowest = thresholds.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(EvalReport {
        thresholds: reports,
        diagnostics: diagnostics(grounding, lowest),
    })
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Aligned plain-text table, one row per threshold.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<12}", "Grounding");
    for (name, _) in report.thresholds.first().map(|t| t.grounding.buckets()).unwrap_or_default() {
        let _ = write!(out, "{name:>12}");
    }
    out.push('\n');
    for t in &report.thresholds {
        let _ = write!(out, "{:<12}", format!("AP@{:.0}", 100.0 * t.iou));
        for (_, b) in t.grounding.buckets() {
            let _ = write!(out, "{:>12}", pct(b.ap));
        }
        out.push('\n');
    }
    if let Some(t) = report.thresholds.first() {
        let _ = write!(out, "{:<12}", "Count");
        for (_, b) in t.grounding.buckets() {
            let _ = write!(out, "{:>12}", b.count);
        }
        out.push('\n');
    }
    out.push('\n');
    let _ = writeln!(out, "{:<12}{:>12}", "Detection", "mAP");
    for t in &report.thresholds {
        let _ = writeln!(out, "{:<12}{:>12}", format!("AP@{:.0}", 100.0 * t.iou), pct(t.detection.map));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::Vec3;
    use crate::rng::Rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cube(x: f64) -> Box9DoF {
        Box9DoF::axis_aligned(Vec3::new(x, 0.0, 0.0), Vec3::repeat(1.0)).unwrap()
    }

    /// Unit cube shifted along x so that its IoU with `cube(0)` equals `iou`.
    fn with_iou(iou: f64) -> Box9DoF {
        cube(1.0 - 2.0 * iou / (1.0 + iou))
    }

    #[test]
    fn matching_examples() {
        let gt = [cube(0.0)];
        assert_eq!(match_predictions(&[with_iou(0.3)], &[1.0], &gt, 0.25).unwrap(), vec![true]);
        assert_eq!(match_predictions(&[with_iou(0.2)], &[1.0], &gt, 0.25).unwrap(), vec![false]);
        let two = [with_iou(0.9), with_iou(0.5)];
        assert_eq!(match_predictions(&two, &[0.4, 0.8], &gt, 0.25).unwrap(), vec![false, true]);
    }

    /// Hand-computed PR fixtures: (ranked TP flags, num_gt, AP).
    fn fixtures() -> Vec<(Vec<bool>, usize, f64)> {
        vec![
            (vec![true], 1, 1.0),
            (vec![false], 1, 0.0),
            (vec![true, false], 2, 0.5),
            // P: 1, 1/2, 2/3; R: 1/2, 1/2, 1 → 0.5·1 + 0.5·(2/3)
            (vec![true, false, true], 2, 0.5 + 1.0 / 3.0),
            // P: 0, 1/2, 1/3, 1/2; R: 0, 1/3, 1/3, 2/3 → (1/3)(1/2) + (1/3)(1/2)
            (vec![false, true, false, true], 3, 1.0 / 3.0),
        ]
    }

    #[test]
    fn ap_matches_hand_fixtures() {
        for (flags, num_gt, expected) in fixtures() {
            let scores: Vec<f64> = (0..flags.len()).map(|i| 1.0 - 0.1 * i as f64).collect();
            assert_relative_eq!(average_precision(&scores, &flags, num_gt).unwrap(), expected, epsilon = 1e-12);
        }
        assert!(average_precision(&[], &[], 0).is_err());
    }

    proptest! {
        #[test]
        fn ap_invariant_to_monotone_rescaling(flags in prop::collection::vec(any::<bool>(), 1..30),
                                              extra in 0usize..5, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let scores: Vec<f64> = flags.iter().map(|_| rng.range(-2.0, 2.0)).collect();
            let num_gt = flags.iter().filter(|&&f| f).count() + extra;
            prop_assume!(num_gt > 0);
            let a = average_precision(&scores, &flags, num_gt).unwrap();
            let rescaled: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
            prop_assert_eq!(a, average_precision(&rescaled, &flags, num_gt).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn stricter_threshold_never_raises_ap(seed in any::<u64>(), n in 1usize..8, g in 1usize..4) {
            let mut rng = Rng::new(seed);
            let gts: Vec<Box9DoF> = (0..g).map(|i| cube(3.0 * i as f64)).collect();
            let boxes: Vec<Box9DoF> = (0..n).map(|_| cube(3.0 * rng.below(0, g) as f64 + rng.range(-0.8, 0.8))).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let ap = |t| {
                let f = match_predictions(&boxes, &scores, &gts, t).unwrap();
                average_precision(&scores, &f, g).unwrap()
            };
            prop_assert!(ap(0.5) <= ap(0.25));
        }

        #[test]
        fn greedy_matches_reference(seed in any::<u64>(), n in 1usize..=5, g in 1usize..=5) {
            let mut rng = Rng::new(seed);
            let gts: Vec<Box9DoF> = (0..g).map(|i| cube(1.5 * i as f64)).collect();
            let boxes: Vec<Box9DoF> = (0..n).map(|_| cube(rng.range(-0.5, 1.5 * g as f64))).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let flags = match_predictions(&boxes, &scores, &gts, 0.25).unwrap();
            // Reference: IoU table, then claims in descending-score order.
            let table: Vec<Vec<f64>> = boxes.iter().map(|b| gts.iter().map(|t| box_iou(b, t)).collect()).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
            let mut free = vec![true; g];
            let mut expect = vec![false; n];
            for i in order {
                let best = (0..g).filter(|&j| free[j]).max_by(|&a, &b| table[i][a].partial_cmp(&table[i][b]).unwrap().then(b.cmp(&a)));
                if let Some(j) = best {
                    if table[i][j] >= 0.25 {
                        free[j] = false;
                        expect[i] = true;
                    }
                }
            }
            prop_assert_eq!(flags, expect);
        }
    }

    fn result(hit: bool, difficulty: Difficulty, view_dep: bool) -> GroundingResult {
        GroundingResult {
            scene: "s".into(),
            instruction: 0,
            boxes: vec![if hit { cube(0.0) } else { cube(5.0) }],
            scores: vec![0.9],
            target: cube(0.0),
            difficulty,
            view_dep,
        }
    }

    #[test]
    fn bucket_examples() {
        let all_easy = [result(true, Difficulty::Easy, false), result(false, Difficulty::Easy, false)];
        let r = bucket_report(&all_easy, 0.25).unwrap();
        assert_eq!(r.hard, Bucket { ap: None, count: 0 });
        assert_eq!(r.easy.count, 2);

        let mixed = [result(true, Difficulty::Easy, false), result(false, Difficulty::Hard, true)];
        let r = bucket_report(&mixed, 0.25).unwrap();
        assert_eq!(r.easy.ap, Some(1.0));
        assert_eq!(r.hard.ap, Some(0.0));
        // pooled over the union, not a mean of buckets
        assert_relative_eq!(r.overall.ap.unwrap(), 0.5);
        let table = render_table(&evaluate(&mixed, &[], 8, &[0.25, 0.5]).unwrap());
        assert!(table.contains("AP@25") && table.contains("AP@50") && table.contains("View-Indep"));
    }

    #[test]
    fn detection_map_over_present_classes() {
        let r = DetectionResult {
            boxes: vec![cube(0.0), cube(3.0)],
            scores: vec![0.9, 0.8],
            classes: vec![0, 1],
            gt_boxes: vec![cube(0.0), cube(10.0)],
            gt_classes: vec![0, 1],
        };
        let d = detection_report(&[r], 8, 0.25).unwrap();
        assert_eq!(d.per_class.len(), 2);
        assert_relative_eq!(d.map.unwrap(), 0.5);
    }
}
