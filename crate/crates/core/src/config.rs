//! Run configuration, stored as TOML with one table per concern.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SscError};
use crate::features::FeatureExtractor;
use crate::geometry::VolumeSpec;
use crate::io::{read_toml, write_toml};
use crate::scene_synth::{CameraRig, SynthConfig};
use crate::stage1::QueryMode;
use crate::stage2::Stage2Config;

/// Where occupancy-mode proposals come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OccupancySource {
    /// Thresholded output of the trained occupancy network.
    Stage1,
    /// Pooled ground-truth occupancy.
    Oracle,
    /// Pooled depth occupancy `M_in`, no correction network.
    RawDepth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub channels: [usize; 2],
    pub lr: f64,
    pub steps: u64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Stage1Section {
            channels: [16, 32],
            lr: 2e-4,
            steps: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub d: usize,
    pub n_samples: usize,
    pub cross_layers: usize,
    pub self_layers: usize,
    pub cross_attention: bool,
    pub self_attention: bool,
    pub query_mode: QueryMode,
    pub occupancy_source: OccupancySource,
    pub affinity: bool,
    pub lr: f64,
    pub steps: u64,
}

impl Default for Stage2Section {
    fn default() -> Self {
        let m = Stage2Config::default();
        Stage2Section {
            d: m.d,
            n_samples: m.n_samples,
            cross_layers: m.cross_layers,
            self_layers: m.self_layers,
            cross_attention: m.cross_attention,
            self_attention: m.self_attention,
            query_mode: QueryMode::Occupancy,
            occupancy_source: OccupancySource::Stage1,
            affinity: true,
            lr: 2e-4,
            steps: 5000,
        }
    }
}

impl Stage2Section {
    pub fn model(&self) -> Stage2Config {
        Stage2Config {
            d: self.d,
            n_samples: self.n_samples,
            cross_layers: self.cross_layers,
            self_layers: self.self_layers,
            cross_attention: self.cross_attention,
            self_attention: self.self_attention,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Range radii in metres.
    pub ranges: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ranges: vec![3.2, 6.4, 12.8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Camera frames per scene, current frame first.
    pub frames: usize,
    /// Multiplicative depth noise level.
    pub depth_noise: f64,
    /// Downsampling of image features relative to the image.
    pub feature_stride: usize,
    pub volume: VolumeSpec<f64>,
    pub synth: SynthConfig,
    pub camera: CameraRig,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            frames: 1,
            depth_noise: 0.0,
            feature_stride: 4,
            volume: VolumeSpec {
                origin: [0.0, -6.4, -0.8],
                voxel_size: 0.4,
                dims: [32, 32, 8],
                query_dims: [16, 16, 4],
            },
            synth: SynthConfig::default(),
            camera: CameraRig::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            eval: EvalSection::default(),
        }
    }
}

fn positive_lr(lr: f64, what: &str) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(SscError::invalid(format!("{what} learning rate must be positive and finite")));
    }
    Ok(())
}

impl RunConfig {
    /// Semantic classes plus the empty class.
    pub fn num_classes(&self) -> usize {
        self.synth.num_classes + 1
    }

    pub fn feature_extractor(&self) -> Result<FeatureExtractor> {
        FeatureExtractor::new(self.feature_stride, self.stage2.d)
    }

    pub fn validate(&self) -> Result<()> {
        self.volume.validate()?;
        self.synth.validate()?;
        self.stage2.model().validate()?;
        if self.frames == 0 {
            return Err(SscError::invalid("at least one camera frame is required"));
        }
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) {
            return Err(SscError::invalid("depth noise must be finite and non-negative"));
        }
        positive_lr(self.stage1.lr, "stage-1")?;
        positive_lr(self.stage2.lr, "stage-2")?;
        if self.stage1.channels.contains(&0) {
            return Err(SscError::invalid("stage-1 channel counts must be positive"));
        }
        self.feature_extractor()?.output_size(self.camera.width, self.camera.height)?;
        self.camera.intrinsics::<f64>()?;
        self.camera.pose::<f64>(0)?;
        let f = self.volume.factor();
        if f != 1 && f != 2 {
            return Err(SscError::invalid(format!("query downsampling factor must be 1 or 2, got {f}")));
        }
        if self.volume.query_dims[0] % 2 != 0 || self.volume.query_dims[1] % 2 != 0 {
            return Err(SscError::invalid("query grid h and w must be even"));
        }
        let ext = self.volume.extent();
        for &r in &self.eval.ranges {
            if !(r > 0.0) || r > ext[0] + 1e-9 || r > ext[1] + 1e-9 {
                return Err(SscError::invalid(format!(
                    "evaluation range {r} m outside the {} x {} m volume",
                    ext[0], ext[1]
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SscError::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SscError::format("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_toml(path, self)
    }
}
