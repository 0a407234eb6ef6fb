use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::{Camera, Instruction, Scene, SceneObject, CLASS_NAMES, VOCAB};
use crate::boxes::{Box9DoF, Vec3};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};

/// A scene together with its referring instructions.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFile {
    pub scene: Scene,
    pub instructions: Vec<Instruction>,
}

/// A loaded file plus the paths of any fields that were ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedScene {
    pub file: SceneFile,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ObjectDoc {
    center: [f64; 3],
    size: [f64; 3],
    angles: [f64; 3],
    class: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraDoc {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    w: usize,
    h: usize,
    /// Row-major camera-to-world rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    room: [f64; 3],
    objects: Vec<ObjectDoc>,
    cameras: Vec<CameraDoc>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct FileDoc {
    scene: SceneDoc,
    instructions: Vec<Instruction>,
}

fn to_doc(f: &SceneFile) -> FileDoc {
    let s = &f.scene;
    FileDoc {
        scene: SceneDoc {
            room: s.room.into(),
            objects: s
                .objects
                .iter()
                .map(|o| ObjectDoc {
                    center: o.bbox.center.into(),
                    size: o.bbox.size.into(),
                    angles: o.bbox.angles,
                    class: o.class,
                })
                .collect(),
            cameras: s
                .cameras
                .iter()
                .map(|c| {
                    let r = &c.pose.rotation;
                    CameraDoc {
                        fx: c.intrinsics.fx,
                        fy: c.intrinsics.fy,
                        cx: c.intrinsics.cx,
                        cy: c.intrinsics.cy,
                        w: c.intrinsics.width,
                        h: c.intrinsics.height,
                        rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
                        translation: c.pose.translation.into(),
                    }
                })
                .collect(),
            seed: s.seed,
        },
        instructions: f.instructions.clone(),
    }
}

fn schema(path: impl Into<String>, e: impl std::fmt::Display) -> Error {
    Error::Schema {
        path: path.into(),
        message: e.to_string(),
    }
}

fn from_doc(d: FileDoc) -> Result<SceneFile> {
    let mut objects = Vec::with_capacity(d.scene.objects.len());
    for (i, o) in d.scene.objects.into_iter().enumerate() {
        let path = format!("scene.objects[{i}]");
        let bbox = Box9DoF::new(Vec3::from(o.center), Vec3::from(o.size), o.angles).map_err(|e| schema(&path, e))?;
        if o.class >= CLASS_NAMES.len() {
            return Err(schema(format!("{path}.class"), format!("class {} out of range", o.class)));
        }
        objects.push(SceneObject { bbox, class: o.class });
    }
    let mut cameras = Vec::with_capacity(d.scene.cameras.len());
    for (i, c) in d.scene.cameras.into_iter().enumerate() {
        let path = format!("scene.cameras[{i}]");
        let intrinsics = CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.w, c.h).map_err(|e| schema(&path, e))?;
        let r = c.rotation;
        let rot = Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]);
        let pose = CameraPose::new(rot, Vec3::from(c.translation)).map_err(|e| schema(format!("{path}.rotation"), e))?;
        cameras.push(Camera { intrinsics, pose });
    }
    let scene = Scene {
        objects,
        cameras,
        room: Vec3::from(d.scene.room),
        seed: d.scene.seed,
    };
    scene.validate().map_err(|e| schema("scene", e))?;
    for (i, ins) in d.instructions.iter().enumerate() {
        if ins.target >= scene.objects.len() {
            return Err(schema(format!("instructions[{i}].target"), "target index out of range"));
        }
        if ins.tokens.is_empty() || ins.tokens.iter().any(|&t| t >= VOCAB.len()) {
            return Err(schema(format!("instructions[{i}].tokens"), "empty or out-of-vocabulary tokens"));
        }
    }
    Ok(SceneFile {
        scene,
        instructions: d.instructions,
    })
}

/// Pretty JSON with shortest round-trip float formatting.
pub fn scene_file_to_json(f: &SceneFile) -> Result<String> {
    serde_json::to_string_pretty(&to_doc(f))
        .map(|s| s + "\n")
        .map_err(|e| schema("", e))
}

/// Parses a scene document. Missing or mistyped fields fail with their path;
/// unknown fields are skipped and reported in `warnings`.
pub fn scene_file_from_json(text: &str) -> Result<LoadedScene> {
    let mut warnings = Vec::new();
    let mut jd = serde_json::Deserializer::from_str(text);
    let doc: FileDoc = {
        let mut record = |path: serde_ignored::Path| warnings.push(path.to_string());
        let de = serde_ignored::Deserializer::new(&mut jd, &mut record);
        serde_path_to_error::deserialize(de).map_err(|e| schema(e.path().to_string(), e.inner()))?
    };
    jd.end().map_err(|e| schema("", e))?;
    for w in &warnings {
        log::warn!("ignoring unknown scene field `{w}`");
    }
    Ok(LoadedScene {
        file: from_doc(doc)?,
        warnings,
    })
}

pub fn save_scene_file(path: &Path, f: &SceneFile) -> Result<()> {
    fs::write(path, scene_file_to_json(f)?).map_err(|e| Error::io(path, e))
}

pub fn load_scene_file(path: &Path) -> Result<LoadedScene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_file_from_json(&text)
}
