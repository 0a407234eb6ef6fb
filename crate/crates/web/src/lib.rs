//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The page offers an IoU explorer for two oriented boxes, depth views of a
//! synthetic scene, and relevance heatmaps from a small model that can be
//! trained for a few steps in the browser. The exported functions are thin
//! wrappers over plain Rust ones so the logic is testable natively.

use serde_json::json;
use wasm_bindgen::prelude::*;

use egoground::boxes::{box_iou_exact, box_iou_mc, intersection_volume, Box9DoF};
use egoground::config::RunConfig;
use egoground::network::{Model, ModelConfig};
use egoground::pipeline::{generate_scene_files, heat_color, relevance_heatmap, relevance_scores, train, Sample};
use egoground::scene::{render_view, CLASS_NAMES};

fn js(e: egoground::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Exact and Monte-Carlo IoU of two boxes given as
/// `[x, y, z, l, w, h, alpha, beta, gamma]`, plus both boxes' corners.
pub fn iou_json(a: &[f64], b: &[f64], samples: usize) -> egoground::Result<String> {
    let parse = |v: &[f64]| -> egoground::Result<Box9DoF> {
        let arr: [f64; 9] = v
            .try_into()
            .map_err(|_| egoground::Error::InvalidArgument(format!("a box needs 9 numbers, got {}", v.len())))?;
        Box9DoF::from_array(arr)
    };
    let (a, b) = (parse(a)?, parse(b)?);
    let exact = box_iou_exact(&a, &b);
    let mc = box_iou_mc(&a, &b, samples.max(1), 1);
    let corners = |x: &Box9DoF| x.corners().iter().map(|c| [c.x, c.y, c.z]).collect::<Vec<_>>();
    Ok(json!({
        "iou": exact.iou,
        "fallback": exact.fallback,
        "intersection": intersection_volume(&a, &b),
        "mc_iou": mc.iou,
        "mc_std_err": mc.std_err,
        "corners_a": corners(&a),
        "corners_b": corners(&b),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn box_iou(a: &[f64], b: &[f64], samples: u32) -> Result<String, JsError> {
    iou_json(a, b, samples as usize).map_err(js)
}

/// Near surfaces bright, far ones dark; pixels that hit nothing are navy.
pub fn depth_rgba(depth: &[Option<f64>], max_depth: f64) -> Vec<u8> {
    depth
        .iter()
        .flat_map(|d| match d {
            Some(d) => {
                let v = (255.0 * (1.0 - (d / max_depth).clamp(0.0, 1.0))).round() as u8;
                [v, v, v, 255]
            }
            None => [16, 24, 64, 255],
        })
        .collect()
}

/// One synthetic scene and a small model over it.
#[wasm_bindgen]
pub struct Demo {
    cfg: RunConfig,
    sample: Sample,
    model: Model,
    steps: usize,
}

impl Demo {
    pub fn create(seed: u64) -> egoground::Result<Self> {
        let mut cfg = RunConfig {
            seed,
            num_scenes: 1,
            model: ModelConfig {
                dim: 16,
                layers: 1,
                context_layers: 0,
                ffn_hidden: 32,
                k_det: 8,
                k_grd: 4,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        };
        cfg.scene.duplicate_class = true;
        let (name, file) = generate_scene_files(&cfg)?.remove(0);
        let sample = Sample::new(name, file, &cfg)?;
        let model = Model::init(cfg.model.clone(), seed)?;
        Ok(Self {
            cfg,
            sample,
            model,
            steps: 0,
        })
    }

    pub fn summary_json(&self) -> String {
        let scene = &self.sample.file.scene;
        let objects: Vec<_> = scene
            .objects
            .iter()
            .map(|o| json!({"class": CLASS_NAMES[o.class], "box": o.bbox.to_array()}))
            .collect();
        let instructions: Vec<_> = self
            .sample
            .file
            .instructions
            .iter()
            .map(|i| json!({"text": i.text(), "target": i.target, "hard": i.difficulty == egoground::scene::Difficulty::Hard}))
            .collect();
        json!({
            "views": scene.cameras.len(),
            "width": self.cfg.scene.image_width,
            "height": self.cfg.scene.image_height,
            "voxels": self.sample.inputs.voxels.len(),
            "steps": self.steps,
            "objects": objects,
            "instructions": instructions,
        })
        .to_string()
    }

    pub fn depth_image(&self, view: usize) -> egoground::Result<Vec<u8>> {
        let scene = &self.sample.file.scene;
        let r = render_view(scene, view)?;
        let d: Vec<Option<f64>> = (0..r.depth.height)
            .flat_map(|v| (0..r.depth.width).map(move |u| (u, v)))
            .map(|(u, v)| r.depth.get(u, v))
            .collect();
        Ok(depth_rgba(&d, scene.room.norm()))
    }

    /// Trains `steps` more Adam steps (fresh moments each call); returns the
    /// last joint loss.
    pub fn train_steps(&mut self, steps: usize) -> egoground::Result<f64> {
        let mut cfg = self.cfg.clone();
        cfg.train.steps = steps;
        let log = train(&mut self.model, std::slice::from_ref(&self.sample), &cfg, |_| {})?;
        self.steps += log.len();
        Ok(log.last().map_or(f64::NAN, |r| r.losses.total))
    }

    pub fn heatmap_image(&self, view: usize, instruction: usize) -> egoground::Result<Vec<u8>> {
        let scores = relevance_scores(&self.model, &self.sample, instruction)?;
        let map = relevance_heatmap(&self.sample.file.scene, &self.sample.inputs.voxels, &scores, view)?;
        Ok(map.rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Self::create(u64::from(seed)).map_err(js)
    }

    pub fn summary(&self) -> String {
        self.summary_json()
    }

    pub fn depth(&self, view: usize) -> Result<Vec<u8>, JsError> {
        self.depth_image(view).map_err(js)
    }

    pub fn train(&mut self, steps: usize) -> Result<f64, JsError> {
        self.train_steps(steps).map_err(js)
    }

    pub fn heatmap(&self, view: usize, instruction: usize) -> Result<Vec<u8>, JsError> {
        self.heatmap_image(view, instruction).map_err(js)
    }

    /// Legend color for a relevance score, as `#rrggbb`.
    pub fn color(score: f64) -> String {
        let [r, g, b] = heat_color(score);
        format!("#{r:02x}{g:02x}{b:02x}")
    }
}
