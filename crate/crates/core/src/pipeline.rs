//! End-to-end plumbing: scenes to network inputs and labels, the joint
//! training objective and loop, batched inference and evaluation, and the
//! relevance heatmap export.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, DetectionResult, EvalReport, GroundingResult};
use crate::geometry::{backproject_pixel, project_point, sample_views, voxelize, VoxelFeatureSet};
use crate::boxes::Box9DoF;
use crate::losses::{spatial_labels, total_loss_graph, Assignment, GroundTruth, LossBreakdown, LossWeights, PredictionVars, Task};
use crate::network::{encode_scene, forward_task, materialize, Model, ModelConfig, SceneInputs, TaskGraph};
use crate::rng::Rng;
use crate::scene::{
    generate_scene, load_scene_file, make_instruction, render_view, view_features, Scene, SceneFile,
};
use crate::tensor::{
    grad_check, load_checkpoint, save_checkpoint, sigmoid, GradCheckReport, Graph, Optimizer, Tensor, Var,
};

/// Renders every view, back-projects the depth, voxelizes with normalized
/// coordinates as point features and samples the stub 2D features.
pub fn prepare_scene(scene: &Scene, model: &ModelConfig, voxel_size: f64) -> Result<SceneInputs> {
    if model.point_dim != 3 {
        return Err(Error::InvalidArgument(format!(
            "point features are normalized xyz, so model.point_dim must be 3 (got {})",
            model.point_dim
        )));
    }
    let max_depth = 2.0 * scene.room.norm();
    let mut points = Vec::new();
    let mut views = Vec::with_capacity(scene.cameras.len());
    for (vi, cam) in scene.cameras.iter().enumerate() {
        let render = render_view(scene, vi)?;
        let k = &cam.intrinsics;
        for v in 0..k.height {
            for u in 0..k.width {
                let i = v * k.width + u;
                if let (Some(d), Some(_)) = (render.depth.get(u, v), render.object_ids[i]) {
                    points.push(backproject_pixel(u as f64, v as f64, d, k, &cam.pose));
                }
            }
        }
        views.push(view_features(scene, vi, &render, model.view_dim, max_depth)?);
    }
    if points.is_empty() {
        return Err(Error::Empty("no view sees any object".into()));
    }
    let feats: Vec<f64> = points
        .iter()
        .flat_map(|p| (0..3).map(move |a| 2.0 * p[a] / scene.room[a] - 1.0))
        .collect();
    let feats = Tensor::matrix(points.len(), 3, feats)?;
    let voxels = voxelize(&points, Some(&feats), voxel_size)?;
    let sampled = sample_views(&voxels, &views)?;
    Ok(SceneInputs { voxels, sampled })
}

/// One referring instruction with its training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub index: usize,
    pub tokens: Vec<usize>,
    pub gt: GroundTruth,
    /// 1 where the voxel center lies inside the referred box; also the
    /// grounding scoring-head target.
    pub labels: Vec<f64>,
}

/// A scene ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub file: SceneFile,
    pub inputs: SceneInputs,
    pub detection: GroundTruth,
    /// N × num_classes scoring-head targets, row-major.
    pub score_targets: Vec<f64>,
    pub grounding: Vec<GroundingSample>,
}

impl Sample {
    pub fn new(name: impl Into<String>, file: SceneFile, cfg: &RunConfig) -> Result<Self> {
        let inputs = prepare_scene(&file.scene, &cfg.model, cfg.voxel_size)?;
        Self::from_inputs(name, file, inputs, cfg.model.num_classes)
    }

    pub fn from_inputs(name: impl Into<String>, file: SceneFile, inputs: SceneInputs, nc: usize) -> Result<Self> {
        let scene = &file.scene;
        if let Some(o) = scene.objects.iter().find(|o| o.class >= nc) {
            return Err(Error::InvalidArgument(format!("class {} exceeds model.num_classes {nc}", o.class)));
        }
        let detection = GroundTruth::detection(
            scene.objects.iter().map(|o| o.bbox).collect(),
            scene.objects.iter().map(|o| o.class).collect(),
        )?;
        let coords = &inputs.voxels.coords;
        let mut score_targets = vec![0.0; coords.len() * nc];
        for (v, c) in coords.iter().enumerate() {
            for o in scene.objects.iter().filter(|o| o.bbox.contains_point(c)) {
                score_targets[v * nc + o.class] = 1.0;
            }
        }
        let grounding = file
            .instructions
            .iter()
            .enumerate()
            .map(|(i, ins)| GroundingSample {
                index: i,
                tokens: ins.tokens.clone(),
                gt: GroundTruth::grounding(scene.objects[ins.target].bbox),
                labels: spatial_labels(coords, &scene.objects[ins.target].bbox),
            })
            .collect();
        Ok(Self {
            name: name.into(),
            file,
            inputs,
            detection,
            score_targets,
            grounding,
        })
    }
}

/// Query selections and matchings to hold fixed, e.g. while probing
/// gradients by finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen {
    pub detection: (Vec<usize>, Assignment),
    pub grounding: Vec<(Vec<usize>, Assignment)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub detection: LossBreakdown,
    /// Mean over the scene's instructions; `None` when it has none.
    pub grounding: Option<LossBreakdown>,
    /// Auxiliary scoring-head BCE (detection plus mean grounding).
    pub score: f64,
    pub total: f64,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> Option<LossBreakdown> {
    let first = parts.first()?;
    let n = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    Some(LossBreakdown {
        task: first.task,
        focal: avg(|b| b.focal),
        box_: avg(|b| b.box_),
        spatial: avg(|b| b.spatial),
        total: avg(|b| b.total),
        weights: first.weights,
    })
}

fn task_preds(t: &TaskGraph) -> PredictionVars<'_> {
    PredictionVars {
        logits: t.logits,
        boxes: t.boxes,
        anchors: &t.queries.positions,
        relevance: t.relevance,
    }
}

/// Joint objective on one scene: detection loss + mean grounding loss over
/// its instructions + `score_weight` × scoring-head BCE.
pub fn sample_objective(
    g: &mut Graph,
    model: &Model,
    sample: &Sample,
    weights: &LossWeights,
    score_weight: f64,
    frozen: Option<&Frozen>,
) -> Result<(Var, StepLosses, Frozen)> {
    let inputs = &sample.inputs;
    let enc = encode_scene(g, model, inputs)?;

    let det_sel = frozen.map(|f| f.detection.0.as_slice());
    let det = forward_task(g, model, inputs, &enc, Task::Detection, None, det_sel)?;
    let (det_loss, det_bd, det_asg) = total_loss_graph(
        g,
        &task_preds(&det),
        &sample.detection,
        Task::Detection,
        weights,
        None,
        frozen.map(|f| &f.detection.1),
    )?;
    let det_score_el = g.bce_with_logits(det.score_logits, &sample.score_targets)?;
    let mut score = g.mean(det_score_el);
    let mut total = det_loss;

    let mut grd_bds = Vec::new();
    let mut grd_frozen = Vec::new();
    if !sample.grounding.is_empty() {
        let inv = 1.0 / sample.grounding.len() as f64;
        for (i, gs) in sample.grounding.iter().enumerate() {
            let fz = frozen.and_then(|f| f.grounding.get(i));
            let t = forward_task(
                g,
                model,
                inputs,
                &enc,
                Task::Grounding,
                Some(&gs.tokens),
                fz.map(|f| f.0.as_slice()),
            )?;
            let (l, bd, asg) = total_loss_graph(
                g,
                &task_preds(&t),
                &gs.gt,
                Task::Grounding,
                weights,
                Some(&gs.labels),
                fz.map(|f| &f.1),
            )?;
            let l = g.scale(l, inv);
            total = g.add(total, l)?;
            let s_el = g.bce_with_logits(t.score_logits, &gs.labels)?;
            let s = g.mean(s_el);
            let s = g.scale(s, inv);
            score = g.add(score, s)?;
            grd_bds.push(bd);
            grd_frozen.push((t.queries.indices.clone(), asg));
        }
    }
    let weighted = g.scale(score, score_weight);
    total = g.add(total, weighted)?;
    let losses = StepLosses {
        detection: det_bd,
        grounding: mean_breakdown(&grd_bds),
        score: g.value(score).item(),
        total: g.value(total).item(),
    };
    let frozen = Frozen {
        detection: (det.queries.indices.clone(), det_asg),
        grounding: grd_frozen,
    };
    Ok((total, losses, frozen))
}

/// One entry of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub scene: String,
    #[serde(flatten)]
    pub losses: StepLosses,
}

/// Adam (or SGD) over the joint objective; step `t` visits scene `t mod n`.
/// Aborts with [`Error::Diverged`] on a non-finite loss or gradient.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    cfg: &RunConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    if samples.is_empty() {
        return Err(Error::Empty("training needs at least one scene".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut log = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let sample = &samples[step % samples.len()];
        let mut g = Graph::new();
        let (loss, losses, _) = sample_objective(&mut g, model, sample, &cfg.weights, cfg.train.score_weight, None)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { step },
                e => e,
            })?;
        if !losses.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = g.backward(loss).map_err(|_| Error::Diverged { step })?;
        model.params.accumulate(&g, &grads);
        opt.step(&mut model.params).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step },
            e => e,
        })?;
        let rec = StepRecord {
            step,
            scene: sample.name.clone(),
            losses,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Value of the joint objective for the current parameters.
pub fn objective_value(model: &Model, sample: &Sample, cfg: &RunConfig) -> Result<StepLosses> {
    let mut g = Graph::new();
    Ok(sample_objective(&mut g, model, sample, &cfg.weights, cfg.train.score_weight, None)?.1)
}

/// Per-scene inference output.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneOutputs {
    pub detection: DetectionResult,
    pub grounding: Vec<GroundingResult>,
    /// Per instruction, per-voxel relevance logits (when region activation is on).
    pub relevance: Vec<Option<Vec<f64>>>,
}

pub fn infer(model: &Model, sample: &Sample) -> Result<SceneOutputs> {
    let inputs = &sample.inputs;
    let mut g = Graph::new();
    let enc = encode_scene(&mut g, model, inputs)?;
    let det = forward_task(&mut g, model, inputs, &enc, Task::Detection, None, None)?;
    let det = materialize(&g, &det)?;
    let scene = &sample.file.scene;
    let detection = DetectionResult {
        scores: det.confidences(),
        classes: det.classes(),
        boxes: det.boxes,
        gt_boxes: scene.objects.iter().map(|o| o.bbox).collect(),
        gt_classes: scene.objects.iter().map(|o| o.class).collect(),
    };
    let mut grounding = Vec::with_capacity(sample.grounding.len());
    let mut relevance = Vec::with_capacity(sample.grounding.len());
    for (gs, ins) in sample.grounding.iter().zip(&sample.file.instructions) {
        let t = forward_task(&mut g, model, inputs, &enc, Task::Grounding, Some(&gs.tokens), None)?;
        let out = materialize(&g, &t)?;
        grounding.push(GroundingResult {
            scene: sample.name.clone(),
            instruction: gs.index,
            scores: out.confidences(),
            boxes: out.boxes,
            target: gs.gt.boxes[0],
            difficulty: ins.difficulty,
            view_dep: ins.view_dep,
        });
        relevance.push(out.relevance);
    }
    Ok(SceneOutputs {
        detection,
        grounding,
        relevance,
    })
}

/// Infers every scene in parallel; results keep scene order.
pub fn infer_all(model: &Model, samples: &[Sample]) -> Result<Vec<SceneOutputs>> {
    samples.par_iter().map(|s| infer(model, s)).collect()
}

pub fn evaluate_samples(model: &Model, samples: &[Sample], thresholds: &[f64]) -> Result<EvalReport> {
    let outs = infer_all(model, samples)?;
    let grounding: Vec<GroundingResult> = outs.iter().flat_map(|o| o.grounding.iter().cloned()).collect();
    let detection: Vec<DetectionResult> = outs.into_iter().map(|o| o.detection).collect();
    evaluate(&grounding, &detection, model.config.num_classes, thresholds)
}

/// Scenes for `cfg.num_scenes`, named `scene_000`, … Scene `i` draws its
/// seed from a stream forked off `cfg.seed`; instructions are made for every
/// object that admits one.
pub fn generate_scene_files(cfg: &RunConfig) -> Result<Vec<(String, SceneFile)>> {
    let mut root = Rng::new(cfg.seed);
    (0..cfg.num_scenes)
        .map(|i| {
            let seed = root.fork(i as u64).next_u64();
            let scene = generate_scene(&cfg.scene, seed)?;
            let mut instructions = Vec::new();
            for t in 0..scene.objects.len() {
                match make_instruction(&scene, t, seed ^ t as u64) {
                    Ok(ins) => instructions.push(ins),
                    Err(Error::NoRelation { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok((format!("scene_{i:03}"), SceneFile { scene, instructions }))
        })
        .collect()
}

/// Loads scene files and builds samples named after their file stems.
pub fn load_samples(paths: &[impl AsRef<Path>], cfg: &RunConfig) -> Result<Vec<Sample>> {
    paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            let loaded = load_scene_file(p)?;
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Sample::new(name, loaded.file, cfg)
        })
        .collect()
}

pub fn save_model(path: &Path, model: &Model, cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.model = model.config.clone();
    save_checkpoint(path, &model.params, &cfg)
}

/// Loads parameters together with the run configuration they were trained with.
pub fn load_model(path: &Path) -> Result<(Model, RunConfig)> {
    let ck = load_checkpoint::<RunConfig>(path)?;
    ck.hyper.validate()?;
    let fresh = Model::init(ck.hyper.model.clone(), 0)?;
    for id in fresh.params.ids() {
        let name = fresh.params.name(id);
        let shape = fresh.params.value(id).shape();
        match ck.params.value_by_name(name) {
            Some(t) if t.shape() == shape => {}
            _ => {
                return Err(Error::Schema {
                    path: format!("tensors.{name}"),
                    message: format!("missing or not of shape {shape:?}"),
                })
            }
        }
    }
    Ok((Model::from_params(ck.hyper.model.clone(), ck.params), ck.hyper))
}

/// Module label of a parameter name, for per-module gradient reports.
pub fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let keep = match parts[0] {
        "voxel_encoder" | "fuse" | "text_proj" => 1,
        _ => 2,
    };
    parts[..keep.min(parts.len())].join(".")
}

/// Voxel budget of the gradient-check scene.
pub const GRADCHECK_VOXELS: usize = 10;

/// A two-object scene cut down to at most [`GRADCHECK_VOXELS`] voxels, split
/// evenly between the objects, with a narrow model whose parameters are
/// jittered away from initialization so that identity-initialized blocks
/// carry non-trivial gradients.
pub fn gradcheck_setup(seed: u64) -> Result<(Model, Sample, RunConfig)> {
    let mut cfg = RunConfig {
        seed,
        num_scenes: 1,
        model: ModelConfig {
            dim: 8,
            layers: 2,
            context_layers: 1,
            heads: 2,
            ffn_hidden: 8,
            k_det: 4,
            k_grd: 3,
            geometric_dim: 4,
            view_dim: 4,
            word_dim: 4,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.scene.min_objects = 2;
    cfg.scene.max_objects = 2;
    let (name, file) = generate_scene_files(&cfg)?.remove(0);
    let full = prepare_scene(&file.scene, &cfg.model, cfg.voxel_size)?;
    let per = GRADCHECK_VOXELS / file.scene.objects.len();
    let mut idx = Vec::new();
    for o in &file.scene.objects {
        let coords = &full.voxels.coords;
        let mine = (0..coords.len()).filter(|&v| o.bbox.contains_point(&coords[v]) && !idx.contains(&v));
        idx.extend(mine.take(per).collect::<Vec<_>>());
    }
    idx.sort_unstable();
    let sample = Sample::from_inputs(name, file, full.subset(&idx)?, cfg.model.num_classes)?;
    let mut model = Model::init(cfg.model.clone(), seed)?;
    let mut rng = Rng::new(seed ^ 0x6a17);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model.params.value_mut(id).data_mut().iter_mut().for_each(|w| *w += 0.1 * rng.normal());
    }
    Ok((model, sample, cfg))
}

/// Finite-difference check of the joint objective with query selection and
/// matching frozen at their values for the unperturbed parameters.
pub fn run_gradcheck(
    model: &Model,
    sample: &Sample,
    cfg: &RunConfig,
    eps: f64,
    tol: f64,
    inject_fault: bool,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let (_, _, frozen) = sample_objective(&mut g, model, sample, &cfg.weights, cfg.train.score_weight, None)?;
    grad_check(
        &model.params,
        |store| {
            let m = Model::from_params(model.config.clone(), store.clone());
            let mut g = Graph::new();
            if inject_fault {
                g.inject_fault();
            }
            let (l, _, _) = sample_objective(&mut g, &m, sample, &cfg.weights, cfg.train.score_weight, Some(&frozen))?;
            Ok((g, l))
        },
        eps,
        tol,
    )
}

/// Gray (128,128,128) at score 0 to red (255,0,0) at score 1.
pub fn heat_color(score: f64) -> [u8; 3] {
    let s = score.clamp(0.0, 1.0);
    let gb = (128.0 * (1.0 - s)).round() as u8;
    [(128.0 + 127.0 * s).round() as u8, gb, gb]
}

/// RGB image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Heatmap {
    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Paints each pixel with the score of the voxel whose projection lies
/// nearest to it (ties: nearer the camera, then lower index). Only voxels in
/// front of the camera count; with none, the map is the score-0 color.
pub fn relevance_heatmap(scene: &Scene, voxels: &VoxelFeatureSet, scores: &[f64], view: usize) -> Result<Heatmap> {
    let cam = scene
        .cameras
        .get(view)
        .ok_or_else(|| Error::InvalidArgument(format!("view {view} out of range ({} cameras)", scene.cameras.len())))?;
    if scores.len() != voxels.len() {
        return Err(Error::shape("heatmap", format!("{} scores for {} voxels", scores.len(), voxels.len())));
    }
    let k = &cam.intrinsics;
    let proj: Vec<(f64, f64, f64, f64)> = voxels
        .coords
        .iter()
        .zip(scores)
        .filter_map(|(p, &s)| {
            let pr = project_point(p, k, &cam.pose);
            pr.in_front.then_some((pr.u, pr.v, pr.depth, s))
        })
        .collect();
    let mut rgb = Vec::with_capacity(k.width * k.height * 3);
    for v in 0..k.height {
        for u in 0..k.width {
            let (x, y) = (u as f64, v as f64);
            let best = proj.iter().min_by(|a, b| {
                let da = (a.0 - x).powi(2) + (a.1 - y).powi(2);
                let db = (b.0 - x).powi(2) + (b.1 - y).powi(2);
                da.total_cmp(&db).then(a.2.total_cmp(&b.2))
            });
            rgb.extend(heat_color(best.map_or(0.0, |b| b.3)));
        }
    }
    Ok(Heatmap {
        width: k.width,
        height: k.height,
        rgb,
    })
}

/// `x,y,z,score` per voxel, with a header line.
pub fn relevance_csv(voxels: &VoxelFeatureSet, scores: &[f64]) -> String {
    let mut out = String::from("x,y,z,score\n");
    for (p, s) in voxels.coords.iter().zip(scores) {
        let _ = writeln!(out, "{},{},{},{}", p.x, p.y, p.z, s);
    }
    out
}

/// Sigmoid relevance of every voxel for instruction `index`, or 0.5
/// everywhere when region activation is disabled.
pub fn relevance_scores(model: &Model, sample: &Sample, index: usize) -> Result<Vec<f64>> {
    let gs = sample
        .grounding
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("instruction {index} out of range ({})", sample.grounding.len())))?;
    let inputs = &sample.inputs;
    let mut g = Graph::new();
    let enc = encode_scene(&mut g, model, inputs)?;
    let t = forward_task(&mut g, model, inputs, &enc, Task::Grounding, Some(&gs.tokens), None)?;
    Ok(match t.relevance {
        Some(r) => g.value(r).data().iter().map(|&x| sigmoid(x)).collect(),
        None => vec![0.5; inputs.voxels.len()],
    })
}

/// Mean of `scores` over voxels whose centers lie inside `bbox`.
pub fn mean_score_in(voxels: &VoxelFeatureSet, scores: &[f64], bbox: &Box9DoF) -> Option<f64> {
    let vals: Vec<f64> = voxels
        .coords
        .iter()
        .zip(scores)
        .filter(|(c, _)| bbox.contains_point(c))
        .map(|(_, &s)| s)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject_depth;
    use crate::scene::SceneConfig;

    fn small_run() -> RunConfig {
        RunConfig {
            num_scenes: 1,
            model: ModelConfig {
                dim: 16,
                layers: 1,
                ffn_hidden: 16,
                k_det: 8,
                k_grd: 4,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn sample(cfg: &RunConfig) -> Sample {
        let (name, file) = generate_scene_files(cfg).unwrap().remove(0);
        Sample::new(name, file, cfg).unwrap()
    }

    #[test]
    fn prepared_points_match_backprojection() {
        let cfg = small_run();
        let s = sample(&cfg);
        let scene = &s.file.scene;
        let mut pts = Vec::new();
        for (i, c) in scene.cameras.iter().enumerate() {
            let d = render_view(scene, i).unwrap().depth;
            if d.valid_count() > 0 {
                pts.extend(backproject_depth(&d, &c.intrinsics, &c.pose).unwrap());
            }
        }
        let vox = voxelize(&pts, None, cfg.voxel_size).unwrap();
        assert_eq!(vox.indices, s.inputs.voxels.indices);
    }

    #[test]
    fn score_targets_follow_box_containment() {
        let cfg = small_run();
        let s = sample(&cfg);
        let nc = cfg.model.num_classes;
        let mut inside = 0;
        for (v, p) in s.inputs.voxels.coords.iter().enumerate() {
            let row = &s.score_targets[v * nc..(v + 1) * nc];
            for (c, &t) in row.iter().enumerate() {
                let want = s.file.scene.objects.iter().any(|o| o.class == c && o.bbox.contains_point(p));
                assert_eq!(t == 1.0, want);
                inside += usize::from(want);
            }
        }
        assert!(inside > 0);
        for (gs, ins) in s.grounding.iter().zip(&s.file.instructions) {
            let b = &s.file.scene.objects[ins.target].bbox;
            let want: Vec<f64> = s.inputs.voxels.coords.iter().map(|p| f64::from(u8::from(b.contains_point(p)))).collect();
            assert_eq!(gs.labels, want);
        }
    }

    #[test]
    fn frozen_objective_reproduces_free_one() {
        let cfg = small_run();
        let s = sample(&cfg);
        let model = Model::init(cfg.model.clone(), 3).unwrap();
        let mut g = Graph::new();
        let (_, a, fz) = sample_objective(&mut g, &model, &s, &cfg.weights, 1.0, None).unwrap();
        let mut g = Graph::new();
        let (_, b, fz2) = sample_objective(&mut g, &model, &s, &cfg.weights, 1.0, Some(&fz)).unwrap();
        assert_eq!(a, b);
        assert_eq!(fz, fz2);
        assert!(a.total.is_finite() && a.total > 0.0);
    }

    #[test]
    fn zero_steps_leave_parameters() {
        let mut cfg = small_run();
        cfg.train.steps = 0;
        let s = sample(&cfg);
        let mut model = Model::init(cfg.model.clone(), 3).unwrap();
        let before = model.params.clone();
        assert!(train(&mut model, &[s], &cfg, |_| {}).unwrap().is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn few_steps_reduce_loss() {
        let mut cfg = small_run();
        cfg.train.steps = 30;
        cfg.optimizer.lr = 3e-3;
        let s = sample(&cfg);
        let mut model = Model::init(cfg.model.clone(), 3).unwrap();
        let log = train(&mut model, std::slice::from_ref(&s), &cfg, |_| {}).unwrap();
        assert_eq!(log.len(), 30);
        assert!(log[29].losses.total < log[0].losses.total);
    }

    #[test]
    fn heat_colors() {
        assert_eq!(heat_color(0.0), [128, 128, 128]);
        assert_eq!(heat_color(1.0), [255, 0, 0]);
        assert_eq!(heat_color(0.5), [192, 64, 64]);
        assert_eq!(heat_color(7.0), [255, 0, 0]);
    }

    #[test]
    fn uniform_scores_give_uniform_map() {
        let cfg = small_run();
        let s = sample(&cfg);
        let vox = &s.inputs.voxels;
        let h = relevance_heatmap(&s.file.scene, vox, &vec![0.5; vox.len()], 1).unwrap();
        assert!(h.rgb.chunks(3).all(|c| c == [192, 64, 64]));
        let ppm = h.to_ppm();
        assert!(ppm.starts_with(b"P6\n64 48\n255\n"));
        assert_eq!(ppm.len(), "P6\n64 48\n255\n".len() + 64 * 48 * 3);
        assert!(relevance_heatmap(&s.file.scene, vox, &vec![0.5; vox.len()], 99).is_err());
        let csv = relevance_csv(vox, &vec![0.5; vox.len()]);
        assert_eq!(csv.lines().count(), vox.len() + 1);
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = RunConfig {
            num_scenes: 2,
            scene: SceneConfig {
                duplicate_class: true,
                ..SceneConfig::default()
            },
            ..RunConfig::default()
        };
        let a = generate_scene_files(&cfg).unwrap();
        assert_eq!(a, generate_scene_files(&cfg).unwrap());
        assert_ne!(a[0].1, a[1].1);
        assert!(a.iter().all(|(_, f)| !f.instructions.is_empty()));
    }
}
