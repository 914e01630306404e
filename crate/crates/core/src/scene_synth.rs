//! Procedural box worlds with exact labels, z-depth and colour renderings.
//!
//! Object extents are whole multiples of the query cell so every query cell
//! is either fully inside or fully outside an object.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SscError};
use crate::features::ImageFrame;
use crate::geometry::{CameraIntrinsics, CameraPose, DepthRaster, Point3, Resolution, VolumeSpec, INVALID_DEPTH};
use crate::numerics::Rng;
use crate::scalar::Real;
use crate::voxel::{LabelGrid, EMPTY};

/// Class of the ground slab.
pub const GROUND_CLASS: u8 = 1;

/// Sky colour of rays that hit nothing.
pub const BACKGROUND: [f64; 3] = [0.62, 0.74, 0.88];

/// Brightness falls off as `1 / (1 + SHADE_RATE z)` with z-depth `z`.
pub const SHADE_RATE: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Ground,
    Car,
    Pole,
    Building,
}

/// Axis-aligned box `[min, max)` in ego metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub class: u8,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneObject {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    /// Entry distance of `o + t d` into the closed box, if any with `t > 0`.
    pub fn ray_entry(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut lo, mut hi) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub num_classes: usize,
    pub spec: VolumeSpec<f64>,
    pub objects: Vec<SceneObject>,
}

/// Scene generator settings. `num_classes` counts semantic classes `M`
/// (empty excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            min_objects: 3,
            max_objects: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(SscError::invalid("scene needs between 2 and 254 semantic classes"));
        }
        if self.min_objects > self.max_objects {
            return Err(SscError::invalid("min_objects exceeds max_objects"));
        }
        Ok(())
    }
}

fn tier(class: u8) -> ObjectKind {
    match (class - 2) % 3 {
        0 => ObjectKind::Car,
        1 => ObjectKind::Pole,
        _ => ObjectKind::Building,
    }
}

/// Footprint and height ranges, in query cells.
fn tier_cells(kind: ObjectKind) -> ([usize; 2], [usize; 2], usize) {
    match kind {
        ObjectKind::Car => ([2, 3], [2, 2], 2),
        ObjectKind::Pole => ([1, 1], [1, 1], 3),
        ObjectKind::Building => ([3, 5], [3, 5], 3),
        ObjectKind::Ground => ([0, 0], [0, 0], 1),
    }
}

impl Scene {
    /// Random scene: a ground slab one query cell thick plus boxes resting on it.
    pub fn generate(seed: u64, spec: &VolumeSpec<f64>, cfg: &SynthConfig) -> Result<Scene> {
        cfg.validate()?;
        spec.validate()?;
        let q = spec.cell_size(Resolution::Query);
        let qd = spec.dims_at(Resolution::Query);
        let ext = spec.extent();
        let o = spec.origin;
        let ground_top = o[2] + q;
        let mut objects = vec![SceneObject {
            kind: ObjectKind::Ground,
            class: GROUND_CLASS,
            min: o,
            max: [o[0] + ext[0], o[1] + ext[1], ground_top],
        }];
        let mut rng = Rng::new(seed);
        let count = rng.range_inclusive(cfg.min_objects, cfg.max_objects);
        let free_z = qd[2].saturating_sub(1);
        for _ in 0..count {
            if cfg.num_classes < 2 || free_z == 0 {
                break;
            }
            let class = 2 + rng.below(cfg.num_classes - 1) as u8;
            let kind = tier(class);
            let (sx, sy, sz) = tier_cells(kind);
            let nx = rng.range_inclusive(sx[0], sx[1]).min(qd[0]);
            let ny = rng.range_inclusive(sy[0], sy[1]).min(qd[1]);
            let nz = sz.min(free_z);
            let ix = rng.below(qd[0] - nx + 1);
            let iy = rng.below(qd[1] - ny + 1);
            let min = [o[0] + ix as f64 * q, o[1] + iy as f64 * q, ground_top];
            let max = [min[0] + nx as f64 * q, min[1] + ny as f64 * q, ground_top + nz as f64 * q];
            objects.push(SceneObject { kind, class, min, max });
        }
        Ok(Scene {
            seed,
            num_classes: cfg.num_classes,
            spec: *spec,
            objects,
        })
    }

    /// Label of the front-most (smallest near-face x, then earliest listed)
    /// object containing `p`.
    pub fn label_at(&self, p: [f64; 3]) -> u8 {
        let mut best: Option<&SceneObject> = None;
        for obj in &self.objects {
            if obj.contains(p) && best.is_none_or(|b| obj.min[0] < b.min[0]) {
                best = Some(obj);
            }
        }
        best.map_or(EMPTY, |b| b.class)
    }

    /// Ground-truth labels at output resolution, sampled at voxel centres.
    pub fn ground_truth(&self) -> LabelGrid {
        let s = &self.spec;
        let mut grid = LabelGrid::filled(s, Resolution::Output, EMPTY);
        let [h, w, z] = s.dims;
        let a = s.voxel_size;
        for i in 0..h {
            for j in 0..w {
                for k in 0..z {
                    let c = [
                        s.origin[0] + (i as f64 + 0.5) * a,
                        s.origin[1] + (j as f64 + 0.5) * a,
                        s.origin[2] + (k as f64 + 0.5) * a,
                    ];
                    grid.set([i, j, k], self.label_at(c));
                }
            }
        }
        grid
    }

    /// First object hit along `o + t d`, as `(t, object index)`.
    pub fn first_hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (idx, obj) in self.objects.iter().enumerate() {
            if let Some(t) = obj.ray_entry(o, d) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, idx));
                }
            }
        }
        best
    }
}

/// Generates a scene and its ground truth.
pub fn generate_scene(seed: u64, spec: &VolumeSpec<f64>, cfg: &SynthConfig) -> Result<(Scene, LabelGrid)> {
    let scene = Scene::generate(seed, spec, cfg)?;
    let gt = scene.ground_truth();
    Ok((scene, gt))
}

/// Ego-frame ray through image point `(u, v)` scaled so that its
/// camera-frame z component is 1: the hit parameter is the z-depth.
pub fn ray_through<T: Real>(intr: &CameraIntrinsics<T>, pose: &CameraPose<T>, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
    let dc = [
        (u - intr.cu.as_f64()) / intr.fu.as_f64(),
        (v - intr.cv.as_f64()) / intr.fv.as_f64(),
        1.0,
    ];
    let r = &pose.rotation;
    let mut d = [0.0; 3];
    for (a, da) in d.iter_mut().enumerate() {
        *da = (0..3).map(|b| r[b][a].as_f64() * dc[b]).sum();
    }
    let c = pose.center();
    ([c[0].as_f64(), c[1].as_f64(), c[2].as_f64()], d)
}

fn depth_ray<T: Real>(intr: &CameraIntrinsics<T>, pose: &CameraPose<T>, u: usize, v: usize) -> ([f64; 3], [f64; 3]) {
    ray_through(intr, pose, u as f64, v as f64)
}

/// Z-depth of the first hit per pixel. With `sigma > 0` each valid depth is
/// scaled by `1 + sigma * eps`, `eps ~ N(0, 1)` drawn from `noise_seed`;
/// a non-positive result becomes invalid.
pub fn render_depth<T: Real>(
    scene: &Scene,
    intr: &CameraIntrinsics<T>,
    pose: &CameraPose<T>,
    sigma: f64,
    noise_seed: u64,
) -> Result<DepthRaster<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(SscError::invalid(format!("depth noise level {sigma} must be finite and non-negative")));
    }
    intr.validate()?;
    let mut rng = Rng::new(noise_seed);
    let mut depth = Vec::with_capacity(intr.width * intr.height);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let (o, d) = depth_ray(intr, pose, u, v);
            let z = match scene.first_hit(o, d) {
                Some((t, _)) => {
                    let z = if sigma > 0.0 { t * (1.0 + sigma * rng.normal()) } else { t };
                    if z > 0.0 {
                        z
                    } else {
                        INVALID_DEPTH
                    }
                }
                None => INVALID_DEPTH,
            };
            depth.push(T::of(z));
        }
    }
    DepthRaster::new(intr.width, intr.height, depth)
}

/// Base colour of a class.
pub fn palette(class: u8) -> [f64; 3] {
    const FIXED: [[f64; 3]; 7] = [
        [0.0, 0.0, 0.0],
        [0.45, 0.40, 0.35],
        [0.85, 0.15, 0.15],
        [0.95, 0.85, 0.10],
        [0.20, 0.35, 0.85],
        [0.15, 0.75, 0.25],
        [0.75, 0.20, 0.75],
    ];
    if let Some(c) = FIXED.get(class as usize) {
        return *c;
    }
    // Golden-angle hue walk for the remaining classes.
    let h = (class as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.2 + 0.7 * r, 0.2 + 0.7 * g, 0.2 + 0.7 * b]
}

pub fn shade(z: f64) -> f64 {
    1.0 / (1.0 + SHADE_RATE * z)
}

/// Per-pixel class of the first hit (`EMPTY` for background).
pub fn render_classes<T: Real>(scene: &Scene, intr: &CameraIntrinsics<T>, pose: &CameraPose<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(intr.width * intr.height);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let (o, d) = depth_ray(intr, pose, u, v);
            out.push(scene.first_hit(o, d).map_or(EMPTY, |(_, i)| scene.objects[i].class));
        }
    }
    out
}

/// Colour image: palette colour of the first-hit class times
/// [`shade`] of its z-depth, [`BACKGROUND`] where nothing is hit.
pub fn render_image<T: Real>(
    scene: &Scene,
    intr: &CameraIntrinsics<T>,
    pose: &CameraPose<T>,
    time_index: usize,
) -> Result<ImageFrame<T>> {
    intr.validate()?;
    let mut pixels = Vec::with_capacity(intr.width * intr.height * 3);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let (o, d) = depth_ray(intr, pose, u, v);
            let rgb = match scene.first_hit(o, d) {
                Some((t, i)) => {
                    let c = palette(scene.objects[i].class);
                    let s = shade(t);
                    [c[0] * s, c[1] * s, c[2] * s]
                }
                None => BACKGROUND,
            };
            pixels.extend(rgb.iter().map(|&x| T::of(x)));
        }
    }
    ImageFrame::new(pixels, time_index, *intr, *pose)
}

/// Camera rig: one pinhole camera, frame `t` displaced by `-t * frame_step`
/// along ego x (past frames sit behind the current one).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub frame_step: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            width: 128,
            height: 96,
            focal: 60.0,
            eye: [-4.0, 0.0, 8.0],
            target: [6.4, 0.0, 0.0],
            frame_step: 0.8,
        }
    }
}

impl CameraRig {
    pub fn intrinsics<T: Real>(&self) -> Result<CameraIntrinsics<T>> {
        CameraIntrinsics::new(
            T::of(self.focal),
            T::of(self.focal),
            T::of((self.width as f64 - 1.0) / 2.0),
            T::of((self.height as f64 - 1.0) / 2.0),
            self.width,
            self.height,
        )
    }

    pub fn pose<T: Real>(&self, time_index: usize) -> Result<CameraPose<T>> {
        let base = CameraPose::look_at(self.eye.map(T::of), self.target.map(T::of))?;
        Ok(base.translated([T::of(-(time_index as f64) * self.frame_step), T::zero(), T::zero()]))
    }
}

/// One rendered camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    pub image: ImageFrame<T>,
    pub depth: DepthRaster<T>,
}

/// A scene with its labels and `frames` rendered views, current frame first.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample<T> {
    pub scene: Scene,
    pub gt: LabelGrid,
    pub frames: Vec<Frame<T>>,
}

/// Seed of the depth noise of frame `t` of scene `seed`.
pub fn noise_seed(seed: u64, t: usize) -> u64 {
    Rng::new(seed).fork(1 + t as u64).seed()
}

pub fn synthesize<T: Real>(
    seed: u64,
    spec: &VolumeSpec<f64>,
    cfg: &SynthConfig,
    rig: &CameraRig,
    frames: usize,
    sigma: f64,
) -> Result<SceneSample<T>> {
    let (scene, gt) = generate_scene(seed, spec, cfg)?;
    let frames = render_frames(&scene, rig, frames, sigma)?;
    Ok(SceneSample { scene, gt, frames })
}

pub fn render_frames<T: Real>(scene: &Scene, rig: &CameraRig, frames: usize, sigma: f64) -> Result<Vec<Frame<T>>> {
    let intr = rig.intrinsics::<T>()?;
    (0..frames)
        .map(|t| {
            let pose = rig.pose::<T>(t)?;
            Ok(Frame {
                image: render_image(scene, &intr, &pose, t)?,
                depth: render_depth(scene, &intr, &pose, sigma, noise_seed(scene.seed, t))?,
            })
        })
        .collect()
}

/// Ego-frame point at z-depth `z` along pixel `(u, v)`.
pub fn pixel_point(intr: &CameraIntrinsics<f64>, pose: &CameraPose<f64>, u: usize, v: usize, z: f64) -> Point3<f64> {
    let (o, d) = depth_ray(intr, pose, u, v);
    [o[0] + z * d[0], o[1] + z * d[1], o[2] + z * d[2]]
}
