//! Oriented 9DoF boxes: center, extents and three orientation angles.
//!
//! Orientation convention: `R = Rz(alpha) · Ry(beta) · Rx(gamma)`, mapping box-local
//! coordinates to world coordinates. Extents `(l, w, h)` run along the local
//! x, y and z axes. Points on the boundary count as inside.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Vec3 = Vector3<f64>;

/// Tolerance for classifying vertices against a clipping plane.
const PLANE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box9DoF {
    pub center: Vec3,
    /// (l, w, h), all strictly positive.
    pub size: Vec3,
    /// (alpha, beta, gamma) in radians, wrapped to (-π, π].
    pub angles: [f64; 3],
}

/// Wraps an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

pub fn rotation_matrix(alpha: f64, beta: f64, gamma: f64) -> Matrix3<f64> {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    let rz = Matrix3::new(ca, -sa, 0.0, sa, ca, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cg, -sg, 0.0, sg, cg);
    rz * ry * rx
}

/// Inverse of [`rotation_matrix`] for a proper rotation. At gimbal lock
/// (|beta| = π/2) gamma is set to zero.
pub fn euler_from_matrix(r: &Matrix3<f64>) -> [f64; 3] {
    let sb = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let beta = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        let alpha = r[(1, 0)].atan2(r[(0, 0)]);
        let gamma = r[(2, 1)].atan2(r[(2, 2)]);
        [wrap_angle(alpha), wrap_angle(beta), wrap_angle(gamma)]
    } else {
        let alpha = (-r[(0, 1)]).atan2(r[(1, 1)]);
        [wrap_angle(alpha), wrap_angle(beta), 0.0]
    }
}

impl Box9DoF {
    pub fn new(center: Vec3, size: Vec3, angles: [f64; 3]) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("box extents must be positive, got {size:?}")));
        }
        if center.iter().chain(angles.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box center or angles".into()));
        }
        Ok(Self {
            center,
            size,
            angles: angles.map(wrap_angle),
        })
    }

    /// From `[x, y, z, l, w, h, alpha, beta, gamma]`.
    pub fn from_array(v: [f64; 9]) -> Result<Self> {
        Self::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]), [v[6], v[7], v[8]])
    }

    pub fn to_array(&self) -> [f64; 9] {
        let (c, s, a) = (self.center, self.size, self.angles);
        [c.x, c.y, c.z, s.x, s.y, s.z, a[0], a[1], a[2]]
    }

    pub fn axis_aligned(center: Vec3, size: Vec3) -> Result<Self> {
        Self::new(center, size, [0.0; 3])
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_matrix(self.angles[0], self.angles[1], self.angles[2])
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    pub fn half(&self) -> Vec3 {
        self.size * 0.5
    }

    pub fn contains_point(&self, p: &Vec3) -> bool {
        LocalFrame::of(self).contains(p)
    }

    /// Corner `k` is `center + R · (±l/2, ±w/2, ±h/2)` with the x sign taken from
    /// bit 0 of `k`, y from bit 1 and z from bit 2 (set bit = positive).
    pub fn corners(&self) -> [Vec3; 8] {
        let r = self.rotation();
        let h = self.half();
        std::array::from_fn(|k| {
            let sx = if k & 1 != 0 { 1.0 } else { -1.0 };
            let sy = if k & 2 != 0 { 1.0 } else { -1.0 };
            let sz = if k & 4 != 0 { 1.0 } else { -1.0 };
            self.center + r * Vec3::new(sx * h.x, sy * h.y, sz * h.z)
        })
    }

    pub fn aabb(&self) -> (Vec3, Vec3) {
        let cs = self.corners();
        let mut lo = cs[0];
        let mut hi = cs[0];
        for c in &cs[1..] {
            lo = lo.inf(c);
            hi = hi.sup(c);
        }
        (lo, hi)
    }

    /// Applies the rigid motion `x -> rot · x + trans`.
    pub fn transformed(&self, rot: &Matrix3<f64>, trans: &Vec3) -> Result<Self> {
        let r = rot * self.rotation();
        Self::new(rot * self.center + trans, self.size, euler_from_matrix(&r))
    }
}

/// Precomputed inverse pose for repeated containment tests.
#[derive(Clone, Copy, Debug)]
struct LocalFrame {
    rt: Matrix3<f64>,
    center: Vec3,
    half: Vec3,
}

impl LocalFrame {
    fn of(b: &Box9DoF) -> Self {
        Self {
            rt: b.rotation().transpose(),
            center: b.center,
            half: b.half(),
        }
    }

    #[inline]
    fn contains(&self, p: &Vec3) -> bool {
        let l = self.rt * (p - self.center);
        l.x.abs() <= self.half.x && l.y.abs() <= self.half.y && l.z.abs() <= self.half.z
    }
}

type Polygon = Vec<Vec3>;

const FACES: [[usize; 4]; 6] = [
    [0, 2, 6, 4],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 3, 7, 6],
    [0, 1, 3, 2],
    [4, 5, 7, 6],
];

fn box_faces(b: &Box9DoF) -> Vec<Polygon> {
    let cs = b.corners();
    FACES.iter().map(|f| f.iter().map(|&i| cs[i]).collect()).collect()
}

/// Outward halfspaces `n · x <= d` bounding the box.
fn halfspaces(b: &Box9DoF) -> [(Vec3, f64); 6] {
    let r = b.rotation();
    let h = b.half();
    std::array::from_fn(|k| {
        let axis = k / 2;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let n: Vec3 = r.column(axis) * sign;
        (n, n.dot(&b.center) + h[axis])
    })
}

/// Clips a closed convex polytope (as a face list) to `n · x <= d` and closes
/// the cut with a cap polygon.
fn clip_polytope(faces: Vec<Polygon>, n: &Vec3, d: f64) -> Vec<Polygon> {
    let tol = PLANE_TOL * (1.0 + d.abs());
    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut cap: Vec<Vec3> = Vec::new();
    let mut face_on_plane = false;
    for face in faces {
        let mut poly = Vec::with_capacity(face.len() + 2);
        let mut all_on = true;
        for i in 0..face.len() {
            let p = face[i];
            let q = face[(i + 1) % face.len()];
            let dp = n.dot(&p) - d;
            let dq = n.dot(&q) - d;
            if dp <= tol {
                poly.push(p);
                if dp.abs() <= tol {
                    cap.push(p);
                }
            }
            if dp.abs() > tol {
                all_on = false;
            }
            if (dp < -tol && dq > tol) || (dp > tol && dq < -tol) {
                let t = dp / (dp - dq);
                let x = p + (q - p) * t;
                poly.push(x);
                cap.push(x);
            }
        }
        if all_on && !face.is_empty() {
            face_on_plane = true;
        }
        if poly.len() >= 3 {
            out.push(poly);
        }
    }
    if !face_on_plane {
        if let Some(c) = order_cap(cap, n) {
            out.push(c);
        }
    }
    out
}

fn order_cap(mut pts: Vec<Vec3>, n: &Vec3) -> Option<Polygon> {
    let mut uniq: Vec<Vec3> = Vec::with_capacity(pts.len());
    for p in pts.drain(..) {
        if !uniq.iter().any(|q| (q - p).norm() < 1e-10) {
            uniq.push(p);
        }
    }
    if uniq.len() < 3 {
        return None;
    }
    let m = uniq.iter().fold(Vec3::zeros(), |a, p| a + p) / uniq.len() as f64;
    let far = uniq
        .iter()
        .max_by(|a, b| (*a - m).norm().total_cmp(&(*b - m).norm()))
        .copied()?;
    let u = (far - m).try_normalize(1e-15)?;
    let w = n.cross(&u);
    let mut keyed: Vec<(f64, Vec3)> = uniq
        .into_iter()
        .map(|p| {
            let r = p - m;
            (r.dot(&w).atan2(r.dot(&u)), p)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    Some(keyed.into_iter().map(|(_, p)| p).collect())
}

/// Volume of a convex polytope as the sum of tetrahedra from an interior point
/// to each fan-triangulated face (the discrete divergence theorem).
fn polytope_volume(faces: &[Polygon]) -> f64 {
    let count: usize = faces.iter().map(Vec::len).sum();
    if count == 0 {
        return 0.0;
    }
    let c = faces.iter().flatten().fold(Vec3::zeros(), |a, p| a + p) / count as f64;
    let mut vol = 0.0;
    for f in faces {
        let v0 = f[0] - c;
        for i in 1..f.len() - 1 {
            let a = f[i] - c;
            let b = f[i + 1] - c;
            vol += v0.dot(&a.cross(&b)).abs();
        }
    }
    vol / 6.0
}

/// Intersection volume of two boxes via halfspace clipping.
pub fn intersection_volume(a: &Box9DoF, b: &Box9DoF) -> f64 {
    let mut poly = box_faces(a);
    for (n, d) in halfspaces(b) {
        poly = clip_polytope(poly, &n, d);
        if poly.is_empty() {
            return 0.0;
        }
    }
    polytope_volume(&poly)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouResult {
    pub iou: f64,
    /// Set when clipping produced an inconsistent volume and the value is a
    /// Monte-Carlo estimate instead.
    pub fallback: bool,
}

const FALLBACK_SAMPLES: usize = 200_000;

/// Exact IoU of two oriented boxes by convex polytope clipping.
pub fn box_iou_exact(a: &Box9DoF, b: &Box9DoF) -> IouResult {
    let (va, vb) = (a.volume(), b.volume());
    let inter = intersection_volume(a, b);
    let limit = va.min(vb) * (1.0 + 1e-9);
    if !inter.is_finite() || inter > limit {
        let mc = box_iou_mc(a, b, FALLBACK_SAMPLES, 0x10C);
        return IouResult {
            iou: mc.iou,
            fallback: true,
        };
    }
    let inter = inter.min(va.min(vb));
    let iou = inter / (va + vb - inter);
    IouResult {
        iou: iou.clamp(0.0, 1.0),
        fallback: false,
    }
}

pub fn box_iou(a: &Box9DoF, b: &Box9DoF) -> f64 {
    box_iou_exact(a, b).iou
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub iou: f64,
    /// Binomial standard error of the intersection-within-union fraction.
    pub std_err: f64,
    pub union_hits: usize,
}

/// Monte-Carlo IoU: uniform samples in the joint bounding box, counting hits in
/// the union and in the intersection.
pub fn box_iou_mc(a: &Box9DoF, b: &Box9DoF, samples: usize, seed: u64) -> McEstimate {
    let (alo, ahi) = a.aabb();
    let (blo, bhi) = b.aabb();
    let lo = alo.inf(&blo);
    let span = ahi.sup(&bhi) - lo;
    let (fa, fb) = (LocalFrame::of(a), LocalFrame::of(b));
    let mut rng = Rng::new(seed);
    let (mut union, mut inter) = (0usize, 0usize);
    for _ in 0..samples.max(1) {
        let p = Vec3::new(
            lo.x + span.x * rng.uniform(),
            lo.y + span.y * rng.uniform(),
            lo.z + span.z * rng.uniform(),
        );
        let (ia, ib) = (fa.contains(&p), fb.contains(&p));
        if ia || ib {
            union += 1;
            if ia && ib {
                inter += 1;
            }
        }
    }
    if union == 0 {
        return McEstimate {
            iou: 0.0,
            std_err: 0.0,
            union_hits: 0,
        };
    }
    let p = inter as f64 / union as f64;
    McEstimate {
        iou: p,
        std_err: (p * (1.0 - p) / union as f64).sqrt(),
        union_hits: union,
    }
}
