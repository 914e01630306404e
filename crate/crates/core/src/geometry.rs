//! Pinhole camera model and the voxel-index / metric-coordinate mapping.
//!
//! Ego frame: x forward, y left, z up. Camera frame: x right, y down,
//! z along the optical axis. Pixel `(u, v)` has `u` along image columns;
//! integer pixel coordinates are pixel centres.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SscError};
use crate::scalar::Real;

pub type Point3<T> = [T; 3];

/// Minimum camera-frame depth (metres) for a projection to count as valid.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-6;

/// Depth value written for pixels without a surface hit.
pub const INVALID_DEPTH: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub fu: T,
    pub fv: T,
    pub cu: T,
    pub cv: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fu: T, fv: T, cu: T, cv: T, width: usize, height: usize) -> Result<Self> {
        let intr = CameraIntrinsics {
            fu,
            fv,
            cu,
            cv,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fu > T::zero() && self.fv > T::zero()) || !self.fu.is_finite() || !self.fv.is_finite() {
            return Err(SscError::invalid("focal lengths must be positive and finite"));
        }
        if !self.cu.is_finite() || !self.cv.is_finite() {
            return Err(SscError::invalid("principal point must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SscError::invalid("image extents must be positive"));
        }
        Ok(())
    }

    /// Whether a pixel coordinate lies on the image (pixel centres at integers).
    pub fn contains(&self, u: T, v: T) -> bool {
        let half = T::of(0.5);
        u >= -half && v >= -half && u < T::of_usize(self.width) - half && v < T::of_usize(self.height) - half
    }
}

/// Rigid transform from ego coordinates to camera coordinates:
/// `p_cam = R p_ego + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose<T> {
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

fn dot<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize<T: Real>(a: [T; 3]) -> [T; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn mat_vec<T: Real>(m: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn transpose<T: Real>(m: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut t = [[T::zero(); 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            t[j][i] = x;
        }
    }
    t
}

fn mat_mul<T: Real>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let bt = transpose(b);
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = dot(a[i], bt[j]);
        }
    }
    out
}

fn det<T: Real>(m: &[[T; 3]; 3]) -> T {
    dot(m[0], cross(m[1], m[2]))
}

impl<T: Real> CameraPose<T> {
    pub fn new(rotation: [[T; 3]; 3], translation: [T; 3]) -> Result<Self> {
        let pose = CameraPose { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        CameraPose {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tol = T::of(1e-9).max(T::epsilon() * T::of(64.0));
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        for (i, row) in rtr.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let want = if i == j { T::one() } else { T::zero() };
                if (x - want).abs() > tol {
                    return Err(SscError::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if (det(&self.rotation) - T::one()).abs() > tol {
            return Err(SscError::invalid("camera rotation must have determinant +1"));
        }
        if self.translation.iter().any(|x| !x.is_finite()) {
            return Err(SscError::invalid("camera translation must be finite"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` (ego coordinates, z up).
    pub fn look_at(eye: Point3<T>, target: Point3<T>) -> Result<Self> {
        let up = [T::zero(), T::zero(), T::one()];
        let forward = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
        let side = cross(forward, up);
        if dot(side, side) < T::of(1e-12) {
            return Err(SscError::invalid("look_at direction is parallel to the up axis"));
        }
        let right = normalize(side);
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let r_eye = mat_vec(&rotation, eye);
        CameraPose::new(rotation, [-r_eye[0], -r_eye[1], -r_eye[2]])
    }

    pub fn to_camera(&self, p: Point3<T>) -> Point3<T> {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn to_ego(&self, pc: Point3<T>) -> Point3<T> {
        let d = [pc[0] - self.translation[0], pc[1] - self.translation[1], pc[2] - self.translation[2]];
        mat_vec(&transpose(&self.rotation), d)
    }

    /// Camera centre in ego coordinates.
    pub fn center(&self) -> Point3<T> {
        self.to_ego([T::zero(); 3])
    }

    /// Same camera displaced by `delta` in ego coordinates.
    pub fn translated(&self, delta: Point3<T>) -> Self {
        let rd = mat_vec(&self.rotation, delta);
        CameraPose {
            rotation: self.rotation,
            translation: [
                self.translation[0] - rd[0],
                self.translation[1] - rd[1],
                self.translation[2] - rd[2],
            ],
        }
    }

    /// Pose seen after the whole world is moved by `p -> S p + s`.
    pub fn after_world_transform(&self, s_rot: &[[T; 3]; 3], s_trans: Point3<T>) -> Self {
        let rotation = mat_mul(&self.rotation, &transpose(s_rot));
        let rs = mat_vec(&rotation, s_trans);
        CameraPose {
            rotation,
            translation: [
                self.translation[0] - rs[0],
                self.translation[1] - rs[1],
                self.translation[2] - rs[2],
            ],
        }
    }

    /// Ray direction (ego frame, unit length) through pixel `(u, v)`.
    pub fn pixel_ray(&self, intr: &CameraIntrinsics<T>, u: T, v: T) -> Point3<T> {
        let dc = [(u - intr.cu) / intr.fu, (v - intr.cv) / intr.fv, T::one()];
        normalize(mat_vec(&transpose(&self.rotation), dc))
    }

    /// Optical axis in ego coordinates.
    pub fn forward(&self) -> Point3<T> {
        self.rotation[2]
    }
}

/// Per-pixel z-depth raster. Non-positive or non-finite entries are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthRaster<T> {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height` rows of `width` values.
    pub depth: Vec<T>,
}

impl<T: Real> DepthRaster<T> {
    pub fn new(width: usize, height: usize, depth: Vec<T>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(SscError::invalid(format!(
                "depth raster {width}x{height} needs {} values, got {}",
                width * height,
                depth.len()
            )));
        }
        Ok(DepthRaster { width, height, depth })
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        DepthRaster {
            width,
            height,
            depth: vec![T::of(INVALID_DEPTH); width * height],
        }
    }

    pub fn at(&self, u: usize, v: usize) -> T {
        self.depth[v * self.width + u]
    }

    pub fn is_valid(z: T) -> bool {
        z.is_finite() && z > T::zero()
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&z| Self::is_valid(z)).count()
    }
}

/// Lifts every valid pixel of a depth raster to an ego-frame point.
pub fn back_project<T: Real>(
    depth: &DepthRaster<T>,
    intr: &CameraIntrinsics<T>,
    pose: &CameraPose<T>,
) -> Result<Vec<Point3<T>>> {
    if depth.width != intr.width || depth.height != intr.height {
        return Err(SscError::invalid(format!(
            "depth raster is {}x{} but camera is {}x{}",
            depth.width, depth.height, intr.width, intr.height
        )));
    }
    let mut points = Vec::with_capacity(depth.valid_count());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let z = depth.at(u, v);
            if !DepthRaster::is_valid(z) {
                continue;
            }
            let x = (T::of_usize(u) - intr.cu) * z / intr.fu;
            let y = (T::of_usize(v) - intr.cv) * z / intr.fv;
            points.push(pose.to_ego([x, y, z]));
        }
    }
    Ok(points)
}

/// Projects an ego-frame point to a pixel. The flag is false when the point
/// is (nearly) behind the camera or lands outside the image.
pub fn project<T: Real>(point: Point3<T>, intr: &CameraIntrinsics<T>, pose: &CameraPose<T>) -> ([T; 2], bool) {
    let pc = pose.to_camera(point);
    if !(pc[2] > T::of(MIN_PROJECTION_DEPTH)) {
        return ([T::zero(); 2], false);
    }
    let u = intr.fu * pc[0] / pc[2] + intr.cu;
    let v = intr.fv * pc[1] / pc[2] + intr.cv;
    ([u, v], intr.contains(u, v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Output,
    Query,
}

/// Metric extent of the completion volume and its two grid resolutions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec<T> {
    pub origin: Point3<T>,
    pub voxel_size: T,
    pub dims: [usize; 3],
    pub query_dims: [usize; 3],
}

impl<T: Real> VolumeSpec<T> {
    pub fn new(origin: Point3<T>, voxel_size: T, dims: [usize; 3], query_dims: [usize; 3]) -> Result<Self> {
        let spec = VolumeSpec {
            origin,
            voxel_size,
            dims,
            query_dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > T::zero()) || !self.voxel_size.is_finite() {
            return Err(SscError::invalid("voxel size must be positive"));
        }
        if self.origin.iter().any(|x| !x.is_finite()) {
            return Err(SscError::invalid("volume origin must be finite"));
        }
        if self.dims.contains(&0) || self.query_dims.contains(&0) {
            return Err(SscError::invalid("volume dims must be positive"));
        }
        for a in 0..3 {
            if self.dims[a] % self.query_dims[a] != 0 {
                return Err(SscError::invalid(format!(
                    "query dim {} does not divide output dim {} on axis {a}",
                    self.query_dims[a], self.dims[a]
                )));
            }
        }
        let f = self.dims[0] / self.query_dims[0];
        if self.dims[1] / self.query_dims[1] != f || self.dims[2] / self.query_dims[2] != f {
            return Err(SscError::invalid("downsample factor must be equal on all axes"));
        }
        Ok(())
    }

    /// Integer ratio between output and query resolution.
    pub fn factor(&self) -> usize {
        self.dims[0] / self.query_dims[0]
    }

    pub fn dims_at(&self, res: Resolution) -> [usize; 3] {
        match res {
            Resolution::Output => self.dims,
            Resolution::Query => self.query_dims,
        }
    }

    pub fn cell_size(&self, res: Resolution) -> T {
        match res {
            Resolution::Output => self.voxel_size,
            Resolution::Query => self.voxel_size * T::of_usize(self.factor()),
        }
    }

    pub fn cell_count(&self, res: Resolution) -> usize {
        self.dims_at(res).iter().product()
    }

    /// Metric extent along each axis.
    pub fn extent(&self) -> [T; 3] {
        [0, 1, 2].map(|a| self.voxel_size * T::of_usize(self.dims[a]))
    }
}

/// Row-major flat index of `(i, j, k)` in a grid of `dims`.
pub fn flat_index(index: [usize; 3], dims: [usize; 3]) -> usize {
    (index[0] * dims[1] + index[1]) * dims[2] + index[2]
}

pub fn unflatten(flat: usize, dims: [usize; 3]) -> [usize; 3] {
    [flat / (dims[1] * dims[2]), (flat / dims[2]) % dims[1], flat % dims[2]]
}

pub fn voxel_center<T: Real>(index: [usize; 3], spec: &VolumeSpec<T>, res: Resolution) -> Result<Point3<T>> {
    let dims = spec.dims_at(res);
    if (0..3).any(|a| index[a] >= dims[a]) {
        return Err(SscError::invalid(format!("voxel index {index:?} outside {dims:?}")));
    }
    let s = spec.cell_size(res);
    Ok([0, 1, 2].map(|a| spec.origin[a] + (T::of_usize(index[a]) + T::of(0.5)) * s))
}

/// Cell containing `point`, or `None` outside the volume. Points on an upper
/// cell face belong to the next cell.
pub fn world_to_voxel<T: Real>(point: Point3<T>, spec: &VolumeSpec<T>, res: Resolution) -> Option<[usize; 3]> {
    let dims = spec.dims_at(res);
    let s = spec.cell_size(res);
    let mut out = [0usize; 3];
    for a in 0..3 {
        let q = ((point[a] - spec.origin[a]) / s).floor();
        if !q.is_finite() || q < T::zero() || q >= T::of_usize(dims[a]) {
            return None;
        }
        out[a] = q.to_usize()?;
    }
    Some(out)
}
