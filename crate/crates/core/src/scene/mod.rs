//! Synthetic rooms: floor-standing boxes, a ring of inward-looking cameras,
//! analytic depth, stub image features and templated referring instructions.

mod instruction;
mod io;

pub use instruction::{make_instruction, Difficulty, Instruction, Relation, VOCAB};
pub use io::{load_scene_file, save_scene_file, scene_file_from_json, scene_file_to_json, LoadedScene, SceneFile};

use serde::{Deserialize, Serialize};

use crate::boxes::{box_iou, Box9DoF, Vec3};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap, ViewFeatureMap};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 8] = ["chair", "table", "sofa", "cabinet", "bed", "lamp", "desk", "shelf"];

/// (min, max) of (l, w, h) per class, meters.
const SIZE_PRIORS: [([f64; 3], [f64; 3]); 8] = [
    ([0.45, 0.45, 0.8], [0.6, 0.6, 1.0]),
    ([1.0, 0.7, 0.7], [1.4, 0.9, 0.8]),
    ([1.5, 0.8, 0.8], [2.0, 1.0, 0.9]),
    ([0.6, 0.4, 0.9], [1.0, 0.6, 1.6]),
    ([1.8, 1.3, 0.5], [2.0, 1.6, 0.6]),
    ([0.3, 0.3, 1.2], [0.4, 0.4, 1.6]),
    ([1.0, 0.6, 0.72], [1.3, 0.75, 0.76]),
    ([0.8, 0.3, 1.4], [1.1, 0.4, 1.9]),
];

/// Gap kept between any two objects so their surfaces never share a voxel.
const PLACEMENT_MARGIN: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub bbox: Box9DoF,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub cameras: Vec<Camera>,
    /// Room extent; the room spans `[0, room.x] × [0, room.y] × [0, room.z]`.
    pub room: Vec3,
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::InvalidArgument("scene has no cameras".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.class >= CLASS_NAMES.len() {
                return Err(Error::InvalidArgument(format!("object {i}: class {} out of range", o.class)));
            }
            if !inside_room(&o.bbox, &self.room) {
                return Err(Error::InvalidArgument(format!("object {i} leaves the room")));
            }
        }
        Ok(())
    }

    pub fn count_class(&self, class: usize) -> usize {
        self.objects.iter().filter(|o| o.class == class).count()
    }
}

fn inside_room(b: &Box9DoF, room: &Vec3) -> bool {
    let (lo, hi) = b.aabb();
    (0..3).all(|i| lo[i] >= -1e-9 && hi[i] <= room[i] + 1e-9)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Number of classes drawn from; at most 8.
    pub num_classes: usize,
    pub room: [f64; 3],
    pub num_cameras: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Horizontal field of view, degrees.
    pub hfov_deg: f64,
    /// Force the first two objects to share a class, so every scene has a distractor pair.
    pub duplicate_class: bool,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 3,
            max_objects: 6,
            num_classes: CLASS_NAMES.len(),
            room: [6.0, 6.0, 3.0],
            num_cameras: 4,
            image_width: 64,
            image_height: 48,
            hfov_deg: 75.0,
            duplicate_class: false,
            max_retries: 2000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must be non-empty and start at 1 or more");
        }
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return bad("num_classes must be in 1..=8");
        }
        if self.duplicate_class && self.min_objects < 2 {
            return bad("duplicate_class needs at least 2 objects");
        }
        // Apart from one duplicated class, classes are distinct within a scene.
        if self.max_objects > self.num_classes + usize::from(self.duplicate_class) {
            return bad("max_objects exceeds the number of distinct classes available");
        }
        if self.room.iter().any(|&r| !(r > 0.5)) {
            return bad("room extents must exceed 0.5 m");
        }
        if self.num_cameras == 0 || self.image_width < 2 || self.image_height < 2 {
            return bad("need at least one camera and a 2x2 image");
        }
        if !(self.hfov_deg > 1.0 && self.hfov_deg < 170.0) {
            return bad("hfov_deg must lie in (1, 170)");
        }
        Ok(())
    }
}

fn sample_object(rng: &mut Rng, class: usize, room: &Vec3) -> Option<Box9DoF> {
    let (lo, hi) = SIZE_PRIORS[class];
    let size = Vec3::new(rng.range(lo[0], hi[0]), rng.range(lo[1], hi[1]), rng.range(lo[2], hi[2]));
    let yaw = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
    let x = rng.range(0.0, room.x);
    let y = rng.range(0.0, room.y);
    let b = Box9DoF::new(Vec3::new(x, y, size.z / 2.0), size, [yaw, 0.0, 0.0]).ok()?;
    inside_room(&b, room).then_some(b)
}

fn inflated(b: &Box9DoF) -> Box9DoF {
    Box9DoF {
        size: b.size.add_scalar(PLACEMENT_MARGIN),
        ..*b
    }
}

/// Class list for one scene: distinct classes, except that with
/// `duplicate_class` the first two objects share one.
fn sample_classes(rng: &mut Rng, cfg: &SceneConfig, n: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..cfg.num_classes).collect();
    rng.shuffle(&mut pool);
    let mut classes = Vec::with_capacity(n);
    if cfg.duplicate_class {
        classes.push(pool[0]);
    }
    classes.extend(pool.into_iter().take(n - classes.len()));
    classes
}

pub fn ring_cameras(cfg: &SceneConfig, room: &Vec3) -> Result<Vec<Camera>> {
    let intr = CameraIntrinsics::from_fov(cfg.image_width, cfg.image_height, cfg.hfov_deg.to_radians())?;
    let center = Vec3::new(room.x / 2.0, room.y / 2.0, 0.0);
    let radius = 0.75 * room.x.max(room.y);
    let target = center + Vec3::new(0.0, 0.0, 0.4);
    (0..cfg.num_cameras)
        .map(|i| {
            let phase = std::f64::consts::FRAC_PI_4 + std::f64::consts::TAU * i as f64 / cfg.num_cameras as f64;
            let eye = center + Vec3::new(radius * phase.cos(), radius * phase.sin(), 0.8 * room.z);
            Ok(Camera {
                intrinsics: intr,
                pose: CameraPose::look_at(eye, target, Vec3::z())?,
            })
        })
        .collect()
}

const LAYOUT_RESTARTS: usize = 20;

fn place_objects(rng: &mut Rng, classes: &[usize], room: &Vec3, tries: usize) -> Option<Vec<SceneObject>> {
    let mut objects: Vec<SceneObject> = Vec::with_capacity(classes.len());
    for &class in classes {
        let placed = (0..tries).find_map(|_| {
            let b = sample_object(rng, class, room)?;
            let grown = inflated(&b);
            objects
                .iter()
                .all(|o| box_iou(&inflated(&o.bbox), &grown) == 0.0)
                .then_some(b)
        })?;
        objects.push(SceneObject { bbox: placed, class });
    }
    Some(objects)
}

/// Rejection-samples floor-standing, yaw-only boxes that keep a margin from
/// each other, then places cameras on a ring looking at the room center.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let room = Vec3::from(cfg.room);
    let n = rng.below(cfg.min_objects, cfg.max_objects + 1);
    let classes = sample_classes(&mut rng, cfg, n);
    let mut objects = Vec::new();
    for _ in 0..LAYOUT_RESTARTS {
        if let Some(layout) = place_objects(&mut rng, &classes, &room, cfg.max_retries) {
            objects = layout;
            break;
        }
    }
    if objects.len() != n {
        return Err(Error::Generation(format!(
            "could not place {n} objects in a {:?} room after {LAYOUT_RESTARTS} layouts of {} tries per object",
            cfg.room, cfg.max_retries
        )));
    }
    Ok(Scene {
        objects,
        cameras: ring_cameras(cfg, &room)?,
        room,
        seed,
    })
}

/// Entry and exit ray parameters of a ray against a box, if it hits.
fn ray_box(origin: &Vec3, dir: &Vec3, b: &Box9DoF) -> Option<(f64, f64)> {
    let r = b.rotation();
    let o = r.transpose() * (origin - b.center);
    let d = r.transpose() * dir;
    let h = b.half();
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i].abs() > h[i] {
                return None;
            }
        } else {
            let a = (-h[i] - o[i]) / d[i];
            let c = (h[i] - o[i]) / d[i];
            t0 = t0.max(a.min(c));
            t1 = t1.min(a.max(c));
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Depth plus the index of the object seen at each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Render {
    pub depth: DepthMap,
    pub object_ids: Vec<Option<usize>>,
}

/// Ray-casts every pixel center against all boxes; the nearest hit in front of
/// the camera wins. Depth is the camera-frame z of the hit.
pub fn render_view(scene: &Scene, view: usize) -> Result<Render> {
    let cam = scene
        .cameras
        .get(view)
        .ok_or_else(|| Error::InvalidArgument(format!("view {view} out of range ({} cameras)", scene.cameras.len())))?;
    let k = &cam.intrinsics;
    let n = k.width * k.height;
    let mut values = vec![0.0; n];
    let mut valid = vec![false; n];
    let mut ids = vec![None; n];
    let origin = cam.pose.translation;
    for v in 0..k.height {
        for u in 0..k.width {
            // Direction with unit camera-z, so the ray parameter is the depth.
            let dc = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let dir = cam.pose.rotation * dc;
            let mut best: Option<(f64, usize)> = None;
            for (oi, o) in scene.objects.iter().enumerate() {
                if let Some((t0, t1)) = ray_box(&origin, &dir, &o.bbox) {
                    let t = if t0 > 0.0 { t0 } else { t1 };
                    if t > 0.0 && best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, oi));
                    }
                }
            }
            if let Some((t, oi)) = best {
                let i = v * k.width + u;
                values[i] = t;
                valid[i] = true;
                ids[i] = Some(oi);
            }
        }
    }
    Ok(Render {
        depth: DepthMap::new(k.width, k.height, values, valid)?,
        object_ids: ids,
    })
}

pub fn render_depth(scene: &Scene, view: usize) -> Result<DepthMap> {
    Ok(render_view(scene, view)?.depth)
}

/// Fixed pseudo-random embedding of a class, the stand-in for image semantics.
pub fn class_embedding(class: usize, dim: usize) -> Vec<f64> {
    let mut rng = Rng::new(0x00c1_a55e_0000_0000 ^ class as u64);
    let scale = 1.0 / (dim.max(1) as f64).sqrt();
    (0..dim).map(|_| rng.normal() * scale).collect()
}

/// Per-pixel stub features: class embedding (`channels - 1` dims) followed by
/// depth divided by `max_depth`. Background pixels are zero.
pub fn view_features(scene: &Scene, view: usize, render: &Render, channels: usize, max_depth: f64) -> Result<ViewFeatureMap> {
    if channels < 2 {
        return Err(Error::InvalidArgument("view features need at least 2 channels".into()));
    }
    let cam = &scene.cameras[view];
    let table: Vec<Vec<f64>> = (0..CLASS_NAMES.len()).map(|c| class_embedding(c, channels - 1)).collect();
    let n = cam.intrinsics.width * cam.intrinsics.height;
    let mut data = vec![0.0; n * channels];
    for (i, id) in render.object_ids.iter().enumerate() {
        if let Some(oi) = id {
            let cell = &mut data[i * channels..(i + 1) * channels];
            cell[..channels - 1].copy_from_slice(&table[scene.objects[*oi].class]);
            cell[channels - 1] = render.depth.values[i] / max_depth;
        }
    }
    ViewFeatureMap::new(cam.intrinsics, cam.pose, channels, data)
}

/// Fixed word table mapping vocabulary ids to `dim`-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct StubEmbeddings {
    pub word_table: Tensor,
}

impl StubEmbeddings {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let data = (0..VOCAB.len() * dim).map(|_| rng.normal()).collect();
        Self {
            word_table: Tensor::raw(vec![VOCAB.len(), dim], data),
        }
    }

    /// T × dim token matrix.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Empty("instruction has no tokens".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= VOCAB.len()) {
            return Err(Error::InvalidArgument(format!("token id {t} outside vocabulary")));
        }
        Ok(self.word_table.gather_rows(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject_depth;

    fn surface_distance(p: &Vec3, b: &Box9DoF) -> f64 {
        let q = b.rotation().transpose() * (p - b.center);
        let h = b.half();
        let outside = Vec3::new((q.x.abs() - h.x).max(0.0), (q.y.abs() - h.y).max(0.0), (q.z.abs() - h.z).max(0.0));
        if outside.norm() > 0.0 {
            outside.norm()
        } else {
            (0..3).map(|i| h[i] - q[i].abs()).fold(f64::INFINITY, f64::min)
        }
    }

    fn one_camera_scene(objects: Vec<SceneObject>) -> Scene {
        let intr = CameraIntrinsics::new(20.0, 20.0, 10.0, 7.0, 21, 15).unwrap();
        Scene {
            objects,
            cameras: vec![Camera {
                intrinsics: intr,
                pose: CameraPose::identity(),
            }],
            room: Vec3::repeat(10.0),
            seed: 0,
        }
    }

    fn cube_at(z_near: f64) -> SceneObject {
        SceneObject {
            bbox: Box9DoF::axis_aligned(Vec3::new(0.0, 0.0, z_near + 0.5), Vec3::repeat(1.0)).unwrap(),
            class: 0,
        }
    }

    #[test]
    fn render_examples() {
        let s = one_camera_scene(vec![cube_at(2.0)]);
        let d = render_depth(&s, 0).unwrap();
        assert_eq!(d.get(10, 7), Some(2.0));
        assert_eq!(render_depth(&one_camera_scene(vec![]), 0).unwrap().valid_count(), 0);
        let s = one_camera_scene(vec![cube_at(4.0), cube_at(2.0)]);
        let r = render_view(&s, 0).unwrap();
        assert_eq!(r.depth.get(10, 7), Some(2.0));
        assert_eq!(r.object_ids[7 * 21 + 10], Some(1));
        assert!(render_view(&s, 1).is_err());
    }

    #[test]
    fn generation_examples() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg, 3).unwrap();
        assert_eq!(s.objects.len(), 1);
        s.validate().unwrap();

        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 42).unwrap();
        assert_eq!(a, generate_scene(&cfg, 42).unwrap());
        for (i, x) in a.objects.iter().enumerate() {
            for y in &a.objects[i + 1..] {
                assert_eq!(box_iou(&x.bbox, &y.bbox), 0.0);
            }
        }
        let dup = SceneConfig {
            duplicate_class: true,
            ..cfg
        };
        for seed in 0..10 {
            let s = generate_scene(&dup, seed).unwrap();
            assert_eq!(s.objects[0].class, s.objects[1].class);
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let cfg = SceneConfig {
            min_objects: 6,
            max_objects: 6,
            room: [1.0, 1.0, 3.0],
            max_retries: 5,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn rendered_points_lie_on_surfaces() {
        let s = generate_scene(&SceneConfig::default(), 9).unwrap();
        for (view, cam) in s.cameras.iter().enumerate() {
            let d = render_depth(&s, view).unwrap();
            if d.valid_count() == 0 {
                continue;
            }
            for p in backproject_depth(&d, &cam.intrinsics, &cam.pose).unwrap() {
                let best = s.objects.iter().map(|o| surface_distance(&p, &o.bbox).abs()).fold(f64::INFINITY, f64::min);
                assert!(best < 1e-6, "point {p:?} is {best} from any surface");
            }
        }
    }

    #[test]
    fn cameras_see_objects() {
        let s = generate_scene(&SceneConfig::default(), 1).unwrap();
        let seen: usize = (0..s.cameras.len()).map(|v| render_depth(&s, v).unwrap().valid_count()).sum();
        assert!(seen > 100);
    }

    #[test]
    fn stub_features() {
        let s = one_camera_scene(vec![cube_at(2.0)]);
        let r = render_view(&s, 0).unwrap();
        let f = view_features(&s, 0, &r, 5, 10.0).unwrap();
        let c = f.cell(10, 7);
        assert_eq!(&c[..4], class_embedding(0, 4).as_slice());
        assert_eq!(c[4], 0.2);
        assert_eq!(f.cell(0, 0), &[0.0; 5]);
    }
}
