use serde::{Deserialize, Serialize};

use super::{Scene, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Instruction vocabulary. Ids index this table.
pub const VOCAB: [&str; 15] = [
    "the", "chair", "table", "sofa", "cabinet", "bed", "lamp", "desk", "shelf", "nearest", "to", "left", "of",
    "right", "above",
];

const THE: usize = 0;
const CLASS_BASE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    NearestTo,
    LeftOf,
    RightOf,
    Above,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::NearestTo, Relation::LeftOf, Relation::RightOf, Relation::Above];

    fn words(self) -> &'static [usize] {
        match self {
            Relation::NearestTo => &[9, 10],
            Relation::LeftOf => &[11, 12],
            Relation::RightOf => &[13, 12],
            Relation::Above => &[14],
        }
    }

    /// Directional relations depend on the observer's viewpoint.
    pub fn view_dependent(self) -> bool {
        !matches!(self, Relation::NearestTo)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<usize>,
    pub target: usize,
    pub difficulty: Difficulty,
    pub view_dep: bool,
}

impl Instruction {
    pub fn text(&self) -> String {
        self.tokens.iter().map(|&t| VOCAB.get(t).copied().unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }
}

/// Does `rel(obj, anchor)` hold? Left/right use the first camera's image axis.
fn holds(scene: &Scene, rel: Relation, obj: usize, anchor: usize, others: &[usize]) -> bool {
    let o = &scene.objects[obj].bbox;
    let a = &scene.objects[anchor].bbox;
    match rel {
        Relation::NearestTo => {
            let d = (o.center - a.center).norm();
            others.iter().all(|&x| (scene.objects[x].bbox.center - a.center).norm() > d + 1e-9)
        }
        Relation::LeftOf | Relation::RightOf => {
            let pose = &scene.cameras[0].pose;
            let sign = if rel == Relation::LeftOf { 1.0 } else { -1.0 };
            let ax = pose.to_camera(&a.center).x;
            sign * (ax - pose.to_camera(&o.center).x) > 1e-9
        }
        Relation::Above => {
            let (lo, _) = o.aabb();
            let (_, ahi) = a.aabb();
            lo.z >= ahi.z
        }
    }
}

/// Builds a referring instruction for `target`. Unique classes get "the
/// <class>"; otherwise a relation to a uniquely-classed anchor that holds for
/// the target and for no same-class distractor is drawn with `seed`.
pub fn make_instruction(scene: &Scene, target: usize, seed: u64) -> Result<Instruction> {
    let obj = scene
        .objects
        .get(target)
        .ok_or_else(|| Error::InvalidArgument(format!("target {target} out of range")))?;
    if obj.class >= CLASS_NAMES.len() {
        return Err(Error::InvalidArgument(format!("class {} out of range", obj.class)));
    }
    let distractors: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| i != target && scene.objects[i].class == obj.class)
        .collect();
    let mut tokens = vec![THE, CLASS_BASE + obj.class];
    if distractors.is_empty() {
        return Ok(Instruction {
            tokens,
            target,
            difficulty: Difficulty::Easy,
            view_dep: false,
        });
    }
    let mut candidates = Vec::new();
    for rel in Relation::ALL {
        for (a, anchor) in scene.objects.iter().enumerate() {
            if anchor.class == obj.class || scene.count_class(anchor.class) != 1 {
                continue;
            }
            let group: Vec<usize> = distractors.iter().copied().chain([target]).collect();
            let rest = |x: usize| group.iter().copied().filter(|&y| y != x).collect::<Vec<_>>();
            if holds(scene, rel, target, a, &rest(target))
                && distractors.iter().all(|&d| !holds(scene, rel, d, a, &rest(d)))
            {
                candidates.push((rel, a));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::NoRelation { target });
    }
    let (rel, a) = candidates[Rng::new(seed).below(0, candidates.len())];
    tokens.extend_from_slice(rel.words());
    tokens.extend([THE, CLASS_BASE + scene.objects[a].class]);
    Ok(Instruction {
        tokens,
        target,
        difficulty: Difficulty::Hard,
        view_dep: rel.view_dependent(),
    })
}
