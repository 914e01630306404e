//! Synthetic datasets on disk.
//!
//! ```text
//! <dir>/manifest.toml
//! <dir>/scene_0000/scene.toml     object list
//! <dir>/scene_0000/gt.vox         8-bit labels at output resolution
//! <dir>/scene_0000/frame_0.ppm    camera image, frame 0 is current
//! <dir>/scene_0000/frame_0.depth  z-depth raster
//! <dir>/scene_0000/frame_0.toml   camera description
//! ```
//!
//! Paths in the manifest are relative to the dataset directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, SscError};
use crate::io::{self, CameraFile};
use crate::numerics::Rng;
use crate::pipeline::SceneInput;
use crate::scalar::Real;
use crate::scene_synth::{synthesize, Scene};
use crate::voxel::LabelGrid;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub camera: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub seed: u64,
    pub scene: PathBuf,
    pub gt: PathBuf,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub depth_noise: f64,
    pub scenes: Vec<SceneEntry>,
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    Rng::new(seed).fork(0x5ce0_0000 + index as u64).seed()
}

/// One scene loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord<T> {
    pub index: usize,
    pub seed: u64,
    pub input: SceneInput<T>,
    pub gt: LabelGrid,
}

/// Renders `count` scenes with `cfg.frames` frames each into `dir`.
pub fn write_dataset(cfg: &RunConfig, count: usize, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| SscError::io(dir, e))?;
    let mut scenes = Vec::with_capacity(count);
    for index in 0..count {
        let seed = scene_seed(cfg.seed, index);
        let sample = synthesize::<f64>(seed, &cfg.volume, &cfg.synth, &cfg.camera, cfg.frames, cfg.depth_noise)?;
        let rel = PathBuf::from(format!("scene_{index:04}"));
        let entry = SceneEntry {
            index,
            seed,
            scene: rel.join("scene.toml"),
            gt: rel.join("gt.vox"),
            frames: (0..cfg.frames)
                .map(|t| FrameEntry {
                    image: rel.join(format!("frame_{t}.ppm")),
                    depth: rel.join(format!("frame_{t}.depth")),
                    camera: rel.join(format!("frame_{t}.toml")),
                })
                .collect(),
        };
        io::write_scene(&dir.join(&entry.scene), &sample.scene)?;
        io::write_labels(&dir.join(&entry.gt), &sample.gt)?;
        for (f, fe) in sample.frames.iter().zip(&entry.frames) {
            io::write_ppm(&dir.join(&fe.image), &f.image)?;
            io::write_depth(&dir.join(&fe.depth), &f.depth)?;
            let cam = CameraFile::new(f.image.time_index, &f.image.intrinsics, &f.image.pose);
            io::write_toml(&dir.join(&fe.camera), &cam)?;
        }
        scenes.push(entry);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        depth_noise: cfg.depth_noise,
        scenes,
    };
    io::write_toml(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        io::read_toml(&dir.join(MANIFEST))
    }

    /// Loads one scene; only the first `frames` frames are read.
    pub fn load<T: Real>(&self, dir: &Path, entry: &SceneEntry, frames: usize) -> Result<SceneRecord<T>> {
        if entry.frames.len() < frames {
            return Err(SscError::invalid(format!(
                "scene {} has {} frames, {frames} requested",
                entry.index,
                entry.frames.len()
            )));
        }
        let loaded = entry.frames[..frames]
            .iter()
            .map(|f| io::read_frame::<T>(&dir.join(&f.image), &dir.join(&f.camera)))
            .collect::<Result<Vec<_>>>()?;
        let first = entry.frames.first().ok_or_else(|| SscError::invalid("scene without frames"))?;
        let depth = io::read_depth::<T>(&dir.join(&first.depth))?;
        Ok(SceneRecord {
            index: entry.index,
            seed: entry.seed,
            input: SceneInput { frames: loaded, depth },
            gt: io::read_labels(&dir.join(&entry.gt))?,
        })
    }

    pub fn load_all<T: Real>(&self, dir: &Path, frames: usize) -> Result<Vec<SceneRecord<T>>> {
        self.scenes.iter().map(|e| self.load(dir, e, frames)).collect()
    }

    pub fn scene(&self, dir: &Path, entry: &SceneEntry) -> Result<Scene> {
        io::read_scene(&dir.join(&entry.scene))
    }
}
