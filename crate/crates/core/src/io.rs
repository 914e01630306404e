//! On-disk formats. All binary numbers are little-endian.
//!
//! Voxel grid (`.vox`), 48-byte header then labels in row-major order:
//!
//! | offset | type     | field                                   |
//! |--------|----------|-----------------------------------------|
//! | 0      | [u8; 4]  | magic `SSCV`                            |
//! | 4      | u16      | version (1)                             |
//! | 6      | u16      | label bits: 1 (packed, LSB first) or 8  |
//! | 8      | u16 x 3  | H, W, Z                                 |
//! | 14     | u16      | reserved (0)                            |
//! | 16     | f64 x 3  | origin                                  |
//! | 40     | f64      | voxel size                              |
//!
//! Depth raster (`.depth`): magic `SSCD`, u32 width, u32 height, f64
//! invalid sentinel, then `width * height` f64 z-depths row by row.
//!
//! Checkpoint (`.ckpt`): magic `SSCK`, u32 version (1), u32 metadata count,
//! each metadata entry as two length-prefixed UTF-8 strings, u32 tensor
//! count, then per tensor: length-prefixed name, u32 rank, u64 per extent
//! and the f64 values. Length prefixes are u32. Tensors are sorted by name.
//!
//! Camera, scene, manifest and config files are TOML.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SscError};
use crate::features::ImageFrame;
use crate::geometry::{CameraIntrinsics, CameraPose, DepthRaster, INVALID_DEPTH};
use crate::numerics::{ParamSet, Tensor};
use crate::scalar::Real;
use crate::scene_synth::Scene;
use crate::voxel::{LabelGrid, OccupancyGrid, VoxelGrid};

const VOXEL_MAGIC: &[u8; 4] = b"SSCV";
const DEPTH_MAGIC: &[u8; 4] = b"SSCD";
const CKPT_MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u16 = 1;
const VOXEL_HEADER: usize = 48;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SscError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SscError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| SscError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SscError::io(path, e))
}

pub fn write_toml<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| SscError::format("toml", e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

pub fn read_toml<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| SscError::format("toml", format!("{}: {e}", path.display())))
}

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SscError::format(self.what, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SscError::format(self.what, "string is not UTF-8"))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        if &self.array::<4>()? != want {
            return Err(SscError::format(self.what, "bad magic"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(SscError::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn voxel_header(out: &mut Vec<u8>, bits: u16, dims: [usize; 3], origin: [f64; 3], size: f64) -> Result<()> {
    out.extend(VOXEL_MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(bits.to_le_bytes());
    for d in dims {
        let d = u16::try_from(d).map_err(|_| SscError::invalid(format!("grid extent {d} exceeds 65535")))?;
        out.extend(d.to_le_bytes());
    }
    out.extend(0u16.to_le_bytes());
    for o in origin {
        out.extend(o.to_le_bytes());
    }
    out.extend(size.to_le_bytes());
    debug_assert_eq!(out.len(), VOXEL_HEADER);
    Ok(())
}

struct VoxelHeader {
    bits: u16,
    dims: [usize; 3],
    origin: [f64; 3],
    size: f64,
}

fn parse_voxel_header(r: &mut Reader) -> Result<VoxelHeader> {
    r.magic(VOXEL_MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(SscError::format("voxel grid", format!("unsupported version {version}")));
    }
    let bits = r.u16()?;
    let dims = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
    r.u16()?;
    let origin = [r.f64()?, r.f64()?, r.f64()?];
    let size = r.f64()?;
    Ok(VoxelHeader { bits, dims, origin, size })
}

pub fn encode_labels(grid: &LabelGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(VOXEL_HEADER + grid.len());
    voxel_header(&mut out, 8, grid.dims(), grid.origin(), grid.voxel_size())?;
    out.extend(grid.labels());
    Ok(out)
}

pub fn encode_occupancy(grid: &OccupancyGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(VOXEL_HEADER + grid.len().div_ceil(8));
    voxel_header(&mut out, 1, grid.dims(), grid.origin(), grid.voxel_size())?;
    for chunk in grid.labels().chunks(8) {
        out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &x)| b | (u8::from(x) << i)));
    }
    Ok(out)
}

/// Decodes either label width; a 1-bit grid reads as labels 0/1.
pub fn decode_labels(bytes: &[u8]) -> Result<LabelGrid> {
    let mut r = Reader::new(bytes, "voxel grid");
    let h = parse_voxel_header(&mut r)?;
    let n: usize = h.dims.iter().product();
    let labels = match h.bits {
        8 => r.take(n)?.to_vec(),
        1 => {
            let packed = r.take(n.div_ceil(8))?;
            (0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect()
        }
        b => return Err(SscError::format("voxel grid", format!("unsupported label width {b}"))),
    };
    r.finish()?;
    VoxelGrid::new(h.dims, h.origin, h.size, labels)
}

/// Decodes a 1-bit grid, or an 8-bit grid with nonzero as occupied.
pub fn decode_occupancy(bytes: &[u8]) -> Result<OccupancyGrid> {
    Ok(decode_labels(bytes)?.map(|l| l != 0))
}

pub fn write_labels(path: &Path, grid: &LabelGrid) -> Result<()> {
    write_bytes(path, &encode_labels(grid)?)
}

pub fn read_labels(path: &Path) -> Result<LabelGrid> {
    decode_labels(&read_bytes(path)?)
}

pub fn write_occupancy(path: &Path, grid: &OccupancyGrid) -> Result<()> {
    write_bytes(path, &encode_occupancy(grid)?)
}

pub fn read_occupancy(path: &Path) -> Result<OccupancyGrid> {
    decode_occupancy(&read_bytes(path)?)
}

pub fn encode_depth<T: Real>(d: &DepthRaster<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * d.depth.len());
    out.extend(DEPTH_MAGIC);
    out.extend((d.width as u32).to_le_bytes());
    out.extend((d.height as u32).to_le_bytes());
    out.extend(INVALID_DEPTH.to_le_bytes());
    for z in &d.depth {
        let z = if DepthRaster::is_valid(*z) { z.as_f64() } else { INVALID_DEPTH };
        out.extend(z.to_le_bytes());
    }
    out
}

/// Entries equal to the file's sentinel decode as [`INVALID_DEPTH`].
pub fn decode_depth<T: Real>(bytes: &[u8]) -> Result<DepthRaster<T>> {
    let mut r = Reader::new(bytes, "depth raster");
    r.magic(DEPTH_MAGIC)?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let sentinel = r.f64()?;
    let mut depth = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let z = r.f64()?;
        depth.push(T::of(if z == sentinel { INVALID_DEPTH } else { z }));
    }
    r.finish()?;
    DepthRaster::new(width, height, depth)
}

pub fn write_depth<T: Real>(path: &Path, d: &DepthRaster<T>) -> Result<()> {
    write_bytes(path, &encode_depth(d))
}

pub fn read_depth<T: Real>(path: &Path) -> Result<DepthRaster<T>> {
    decode_depth(&read_bytes(path)?)
}

/// Camera description file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub time_index: usize,
    pub intrinsics: CameraIntrinsics<f64>,
    pub pose: CameraPose<f64>,
}

impl CameraFile {
    pub fn new<T: Real>(time_index: usize, intr: &CameraIntrinsics<T>, pose: &CameraPose<T>) -> Self {
        CameraFile {
            time_index,
            intrinsics: CameraIntrinsics {
                fu: intr.fu.as_f64(),
                fv: intr.fv.as_f64(),
                cu: intr.cu.as_f64(),
                cv: intr.cv.as_f64(),
                width: intr.width,
                height: intr.height,
            },
            pose: CameraPose {
                rotation: pose.rotation.map(|r| r.map(Real::as_f64)),
                translation: pose.translation.map(Real::as_f64),
            },
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let cam: CameraFile = read_toml(path)?;
        cam.intrinsics.validate()?;
        cam.pose.validate()?;
        Ok(cam)
    }

    pub fn intrinsics<T: Real>(&self) -> CameraIntrinsics<T> {
        let k = &self.intrinsics;
        CameraIntrinsics {
            fu: T::of(k.fu),
            fv: T::of(k.fv),
            cu: T::of(k.cu),
            cv: T::of(k.cv),
            width: k.width,
            height: k.height,
        }
    }

    pub fn pose<T: Real>(&self) -> CameraPose<T> {
        CameraPose {
            rotation: self.pose.rotation.map(|r| r.map(T::of)),
            translation: self.pose.translation.map(T::of),
        }
    }
}

/// Binary 8-bit PPM of an image with values in `[0, 1]`.
pub fn write_ppm<T: Real>(path: &Path, frame: &ImageFrame<T>) -> Result<()> {
    let buf: Vec<u8> = frame
        .pixels
        .iter()
        .map(|p| (p.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut out = Vec::new();
    image::codecs::pnm::PnmEncoder::new(&mut out)
        .with_subtype(image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary))
        .encode(buf.as_slice(), frame.width as u32, frame.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| SscError::format("ppm", e.to_string()))?;
    write_bytes(path, &out)
}

/// Reads a PPM as `height x width x 3` values in `[0, 1]`.
pub fn read_ppm<T: Real>(path: &Path) -> Result<(usize, usize, Vec<T>)> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| SscError::format("ppm", format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw().into_iter().map(|b| T::of(b as f64 / 255.0)).collect();
    Ok((w, h, pixels))
}

/// Loads an image together with its camera file.
pub fn read_frame<T: Real>(image: &Path, camera: &Path) -> Result<ImageFrame<T>> {
    let cam = CameraFile::read(camera)?;
    let (w, h, pixels) = read_ppm::<T>(image)?;
    if (w, h) != (cam.intrinsics.width, cam.intrinsics.height) {
        return Err(SscError::invalid(format!(
            "image {} is {w}x{h} but its camera is {}x{}",
            image.display(),
            cam.intrinsics.width,
            cam.intrinsics.height
        )));
    }
    ImageFrame::new(pixels, cam.time_index, cam.intrinsics(), cam.pose())
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_toml(path, scene)
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    read_toml(path)
}

/// Named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f64>>,
}

impl Checkpoint {
    pub fn from_params<T: Real>(params: &ParamSet<T>) -> Self {
        let mut ck = Checkpoint::default();
        ck.add_params(params, "");
        ck
    }

    /// Stores every parameter under `prefix + name`.
    pub fn add_params<T: Real>(&mut self, params: &ParamSet<T>, prefix: &str) {
        for (name, t) in params.iter() {
            self.tensors.insert(format!("{prefix}{name}"), t.cast::<f64>());
        }
    }

    /// Copies tensors `prefix + name` into `params`, checking every shape.
    pub fn load_params<T: Real>(&self, params: &mut ParamSet<T>, prefix: &str) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let t = params.get_mut(&name).expect("listed");
            let src = self.tensors.get(&key).ok_or_else(|| SscError::Shape {
                name: key.clone(),
                expected: t.shape().to_vec(),
                found: vec![],
            })?;
            if src.shape() != t.shape() {
                return Err(SscError::Shape {
                    name: key,
                    expected: t.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            for (d, s) in t.data_mut().iter_mut().zip(src.data()) {
                *d = T::of(*s);
            }
        }
        Ok(())
    }

    /// Tensors under `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor<f64>> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(CKPT_MAGIC);
        out.extend(u32::from(VERSION).to_le_bytes());
        out.extend((self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CKPT_MAGIC)?;
        let version = r.u32()?;
        if version != u32::from(VERSION) {
            return Err(SscError::format("checkpoint", format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n.saturating_mul(8) <= bytes.len()).ok_or_else(|| {
                SscError::format("checkpoint", format!("tensor `{name}` has an implausible shape {shape:?}"))
            })?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| SscError::format("checkpoint", format!("`{name}`: {e}")))?;
            ck.tensors.insert(name, t);
        }
        r.finish()?;
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?)
    }
}
