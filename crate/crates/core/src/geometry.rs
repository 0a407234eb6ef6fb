//! Camera model, depth back-projection, voxelization and multi-view feature
//! lifting.
//!
//! Camera frame: x right, y down, z forward. A [`CameraPose`] maps camera
//! coordinates to world coordinates, `X_w = R · X_c + t`. Pixel `(u, v)`
//! addresses the pixel center at column `u`, row `v`.

use std::collections::BTreeMap;

use nalgebra::Matrix3;

use crate::boxes::Vec3;
use crate::error::{Error, Result};
use crate::tensor::{linear, Graph, LinearInit, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!("focal lengths must be positive ({fx}, {fy})")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Pinhole camera with the given horizontal field of view, centered principal point.
    pub fn from_fov(width: usize, height: usize, hfov: f64) -> Result<Self> {
        let f = (width as f64 / 2.0) / (hfov / 2.0).tan();
        Self::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if (rotation.transpose() * rotation - Matrix3::identity()).amax() > 1e-9 {
            return Err(Error::InvalidArgument("camera rotation is not orthonormal".into()));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("camera rotation has det != +1".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with image "up" closest to `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("look_at: eye equals target".into()))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("look_at: view direction parallel to up".into()))?;
        let y = z.cross(&x);
        Self::new(Matrix3::from_columns(&[x, y, z]), eye)
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Row-major depths along the camera z axis, in meters.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::shape("DepthMap", format!("{width}x{height} image")));
        }
        if values.iter().zip(&valid).any(|(&d, &ok)| ok && !(d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidArgument("valid depths must be positive and finite".into()));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn backproject_pixel(u: f64, v: f64, depth: f64, cam: &CameraIntrinsics, pose: &CameraPose) -> Vec3 {
    let pc = Vec3::new((u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth);
    pose.to_world(&pc)
}

/// World points of all valid pixels, in row-major pixel order.
pub fn backproject_depth(depth: &DepthMap, cam: &CameraIntrinsics, pose: &CameraPose) -> Result<Vec<Vec3>> {
    let mut out = Vec::with_capacity(depth.valid_count());
    for v in 0..depth.height {
        for u in 0..depth.width {
            if let Some(d) = depth.get(u, v) {
                out.push(backproject_pixel(u as f64, v as f64, d, cam, pose));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("depth map has no valid pixels".into()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth z_c.
    pub depth: f64,
    pub in_bounds: bool,
    pub in_front: bool,
}

impl Projection {
    pub fn visible(&self) -> bool {
        self.in_bounds && self.in_front
    }
}

pub fn project_point(p: &Vec3, cam: &CameraIntrinsics, pose: &CameraPose) -> Projection {
    let c = pose.to_camera(p);
    let in_front = c.z > 0.0;
    let (u, v) = if in_front {
        (cam.fx * c.x / c.z + cam.cx, cam.fy * c.y / c.z + cam.cy)
    } else {
        (f64::NAN, f64::NAN)
    };
    let in_bounds = in_front && within(u, cam.width) && within(v, cam.height);
    Projection {
        u,
        v,
        depth: c.z,
        in_bounds,
        in_front,
    }
}

/// Pixel-coordinate slack so round-off on the image border does not flip visibility.
const BORDER_EPS: f64 = 1e-9;

fn within(x: f64, extent: usize) -> bool {
    x >= -BORDER_EPS && x <= (extent - 1) as f64 + BORDER_EPS
}

pub fn project_points(points: &[Vec3], cam: &CameraIntrinsics, pose: &CameraPose) -> Vec<Projection> {
    points.iter().map(|p| project_point(p, cam, pose)).collect()
}

/// Sparse voxels: one entry per occupied cell, ordered by lattice index.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFeatureSet {
    /// Voxel centers, `(index + 0.5) · voxel_size`.
    pub coords: Vec<Vec3>,
    pub indices: Vec<[i64; 3]>,
    /// N × C per-voxel features.
    pub features: Tensor,
    pub voxel_size: f64,
}

impl VoxelFeatureSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub fn voxel_index(p: &Vec3, voxel_size: f64) -> [i64; 3] {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

pub fn voxel_center(idx: [i64; 3], voxel_size: f64) -> Vec3 {
    Vec3::new(
        (idx[0] as f64 + 0.5) * voxel_size,
        (idx[1] as f64 + 0.5) * voxel_size,
        (idx[2] as f64 + 0.5) * voxel_size,
    )
}

/// Buckets points into a regular grid. Each voxel's feature is the mean of its
/// members' features, or a single occupancy-count channel when `features` is
/// `None`. Members are summed in a canonical order, so the result does not
/// depend on input order down to the last bit.
pub fn voxelize(points: &[Vec3], features: Option<&Tensor>, voxel_size: f64) -> Result<VoxelFeatureSet> {
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size must be > 0, got {voxel_size}")));
    }
    if points.is_empty() {
        return Err(Error::Empty("no points to voxelize".into()));
    }
    let channels = match features {
        Some(f) => {
            let (r, c) = f.dims2()?;
            if r != points.len() {
                return Err(Error::shape("voxelize", format!("{} points but {r} feature rows", points.len())));
            }
            c
        }
        None => 1,
    };
    let mut buckets: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        buckets.entry(voxel_index(p, voxel_size)).or_default().push(i);
    }
    let mut coords = Vec::with_capacity(buckets.len());
    let mut indices = Vec::with_capacity(buckets.len());
    let mut data = Vec::with_capacity(buckets.len() * channels);
    for (idx, mut members) in buckets {
        coords.push(voxel_center(idx, voxel_size));
        indices.push(idx);
        match features {
            None => data.push(members.len() as f64),
            Some(f) => {
                members.sort_by(|&a, &b| {
                    let (pa, pb) = (points[a], points[b]);
                    pa.x.total_cmp(&pb.x)
                        .then(pa.y.total_cmp(&pb.y))
                        .then(pa.z.total_cmp(&pb.z))
                        .then_with(|| {
                            f.row(a)
                                .iter()
                                .zip(f.row(b))
                                .map(|(x, y)| x.total_cmp(y))
                                .find(|o| o.is_ne())
                                .unwrap_or(std::cmp::Ordering::Equal)
                        })
                });
                let mut acc = vec![0.0; channels];
                for &m in &members {
                    for (a, x) in acc.iter_mut().zip(f.row(m)) {
                        *a += x;
                    }
                }
                data.extend(acc.into_iter().map(|a| a / members.len() as f64));
            }
        }
    }
    let n = coords.len();
    Ok(VoxelFeatureSet {
        coords,
        indices,
        features: Tensor::new(vec![n, channels], data)?,
        voxel_size,
    })
}

/// Per-view 2D feature grid, H × W × C, with the camera that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatureMap {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub channels: usize,
    data: Vec<f64>,
}

impl ViewFeatureMap {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != intrinsics.width * intrinsics.height * channels {
            return Err(Error::shape(
                "ViewFeatureMap",
                format!(
                    "{}x{}x{channels} needs {} values, got {}",
                    intrinsics.height,
                    intrinsics.width,
                    intrinsics.width * intrinsics.height * channels,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("view feature map".into()));
        }
        Ok(Self {
            intrinsics,
            pose,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width() + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Bilinear blend of the four cells around continuous `(u, v)`. Invalid outside
/// `[0, W-1] × [0, H-1]`.
pub fn bilinear_sample(fm: &ViewFeatureMap, u: f64, v: f64) -> (Vec<f64>, bool) {
    let (w, h) = (fm.width(), fm.height());
    if !(within(u, w) && within(v, h)) {
        return (vec![0.0; fm.channels], false);
    }
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (ax, ay) = (u - x0 as f64, v - y0 as f64);
    let mut out = vec![0.0; fm.channels];
    for (x, y, wt) in [
        (x0, y0, (1.0 - ax) * (1.0 - ay)),
        (x1, y0, ax * (1.0 - ay)),
        (x0, y1, (1.0 - ax) * ay),
        (x1, y1, ax * ay),
    ] {
        if wt == 0.0 {
            continue;
        }
        for (o, c) in out.iter_mut().zip(fm.cell(x, y)) {
            *o += wt * c;
        }
    }
    (out, true)
}

/// Lifts 2D features onto voxel centers: project into every view, sample where
/// visible, and average over the views that see the voxel. Voxels no view sees
/// get the zero vector.
pub fn sample_views(voxels: &VoxelFeatureSet, views: &[ViewFeatureMap]) -> Result<Tensor> {
    let first = views.first().ok_or_else(|| Error::Empty("no views to sample".into()))?;
    let c = first.channels;
    if views.iter().any(|v| v.channels != c) {
        return Err(Error::shape("sample_views", "views disagree on channel count"));
    }
    let mut out = vec![0.0; voxels.len() * c];
    for (i, p) in voxels.coords.iter().enumerate() {
        let mut seen = 0usize;
        let row = &mut out[i * c..(i + 1) * c];
        for view in views {
            let pr = project_point(p, &view.intrinsics, &view.pose);
            if !pr.in_front {
                continue;
            }
            let (s, ok) = bilinear_sample(view, pr.u, pr.v);
            if ok {
                seen += 1;
                row.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            }
        }
        if seen > 0 {
            row.iter_mut().for_each(|a| *a /= seen as f64);
        }
    }
    Tensor::new(vec![voxels.len(), c], out)
}

/// Widths of the fusion stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionDims {
    /// Raw per-voxel feature width (input to the voxel encoder).
    pub point: usize,
    /// Voxel encoder output width.
    pub geometric: usize,
    /// Sampled 2D feature width.
    pub view: usize,
    /// Fused output width.
    pub out: usize,
}

pub fn init_fusion(store: &mut ParamStore, dims: FusionDims, rng: &mut crate::rng::Rng) -> Result<()> {
    crate::tensor::init_linear(store, "voxel_encoder", dims.point, dims.geometric, LinearInit::Xavier, rng)?;
    crate::tensor::init_linear(store, "fuse", dims.geometric + dims.view, dims.out, LinearInit::Xavier, rng)
}

/// Concatenates encoded voxel features with pre-sampled 2D features and
/// projects the result to the model width.
pub fn fuse_sampled(g: &mut Graph, store: &ParamStore, voxels: &VoxelFeatureSet, sampled: &Tensor) -> Result<Var> {
    if sampled.rows() != voxels.len() {
        return Err(Error::shape("fuse", format!("{} voxels, {} sampled rows", voxels.len(), sampled.rows())));
    }
    let raw = g.constant(voxels.features.clone());
    let geo = linear(g, store, "voxel_encoder", raw)?;
    let img = g.constant(sampled.clone());
    let cat = g.concat_cols(&[geo, img])?;
    linear(g, store, "fuse", cat)
}

/// Samples every view at the voxel centers and fuses with the voxel features.
pub fn fuse_features(
    g: &mut Graph,
    store: &ParamStore,
    voxels: &VoxelFeatureSet,
    views: &[ViewFeatureMap],
) -> Result<Var> {
    let sampled = sample_views(voxels, views)?;
    fuse_sampled(g, store, voxels, &sampled)
}
