//! Small convolutional image encoder producing per-view feature maps.

use crate::error::{Result, SscError};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::numerics::{Bound, ParamSet, Rng, Tape, Tensor, Var};
use crate::scalar::Real;

/// Camera image with its calibration. Pixels are `height x width x 3`,
/// row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame<T> {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<T>,
    /// Frame offset into the past: 0 is the current frame.
    pub time_index: usize,
    pub intrinsics: CameraIntrinsics<T>,
    pub pose: CameraPose<T>,
}

impl<T: Real> ImageFrame<T> {
    pub fn new(pixels: Vec<T>, time_index: usize, intrinsics: CameraIntrinsics<T>, pose: CameraPose<T>) -> Result<Self> {
        let (width, height) = (intrinsics.width, intrinsics.height);
        if pixels.len() != width * height * 3 {
            return Err(SscError::invalid(format!(
                "image needs {} values for {width}x{height}x3, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(SscError::NonFinite("image pixels".into()));
        }
        Ok(ImageFrame {
            width,
            height,
            pixels,
            time_index,
            intrinsics,
            pose,
        })
    }

    pub fn pixel(&self, u: usize, v: usize) -> [T; 3] {
        let o = (v * self.width + u) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

/// Feature map living on a tape: `rows x cols x channels`, at `1/stride` of
/// the image resolution.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub stride: usize,
}

impl FeatureMap {
    /// Converts an image pixel coordinate to this map's cell coordinate
    /// (cell centres at integers).
    pub fn from_image_coords<T: Real>(&self, px: [T; 2]) -> [T; 2] {
        let s = T::of_usize(self.stride);
        let half = T::of(0.5);
        [(px[0] + half) / s - half, (px[1] + half) / s - half]
    }
}

/// Convolution stack: `strides[i]` and `widths[i]` per 3x3 block, ReLU between
/// blocks, no activation after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub strides: Vec<usize>,
    pub widths: Vec<usize>,
}

impl FeatureExtractor {
    /// Stack for a power-of-two downsampling `stride` and output width `d`:
    /// stride-2 blocks followed by one stride-1 block, at least three blocks.
    pub fn new(stride: usize, d: usize) -> Result<Self> {
        if stride == 0 || !stride.is_power_of_two() {
            return Err(SscError::invalid(format!("feature stride {stride} is not a power of two")));
        }
        let n2 = stride.trailing_zeros() as usize;
        let blocks = (n2 + 1).max(3);
        let strides: Vec<usize> = (0..blocks).map(|i| if i < n2 { 2 } else { 1 }).collect();
        let widths = (0..blocks)
            .map(|i| if i + 1 == blocks { d } else if i == 0 { 16 } else { 32 })
            .collect();
        Ok(FeatureExtractor { strides, widths })
    }

    pub fn with_layers(strides: Vec<usize>, widths: Vec<usize>) -> Self {
        assert_eq!(strides.len(), widths.len());
        FeatureExtractor { strides, widths }
    }

    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn channels(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn init_params<T: Real>(&self, rng: &mut Rng, params: &mut ParamSet<T>) {
        let mut cin = 3;
        for (i, &w) in self.widths.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.insert_normal(&format!("feat.conv{i}.w"), vec![w, cin, 3, 3], std, rng);
            params.insert_zeros(&format!("feat.conv{i}.b"), vec![w]);
            cin = w;
        }
    }

    /// Output `(rows, cols)` for an image, or an error if the image does not
    /// divide evenly by the stride product.
    pub fn output_size(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        if width % s != 0 || height % s != 0 {
            return Err(SscError::invalid(format!(
                "image {width}x{height} is not divisible by feature stride {s}"
            )));
        }
        Ok((height / s, width / s))
    }

    pub fn extract<T: Real>(&self, tape: &mut Tape<T>, params: &Bound, frame: &ImageFrame<T>) -> Result<FeatureMap> {
        let (rows, cols) = self.output_size(frame.width, frame.height)?;
        let img = Tensor::from_parts(vec![frame.height, frame.width, 3], frame.pixels.clone());
        let x = tape.constant(&img);
        self.extract_from(tape, params, x, rows, cols)
    }

    /// Runs the stack on an `[H, W, 3]` image node (used when image pixels
    /// are themselves differentiated).
    pub fn extract_from<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        image: Var,
        rows: usize,
        cols: usize,
    ) -> Result<FeatureMap> {
        let mut x = tape.permute(image, &[2, 0, 1]);
        let last = self.widths.len() - 1;
        for (i, &s) in self.strides.iter().enumerate() {
            let w = params.get(&format!("feat.conv{i}.w"));
            let b = params.get(&format!("feat.conv{i}.b"));
            x = tape.conv2d(x, w, b, s, 1);
            if i != last {
                x = tape.relu(x);
            }
        }
        debug_assert_eq!(tape.shape(x), &[self.channels(), rows, cols]);
        let var = tape.permute(x, &[1, 2, 0]);
        Ok(FeatureMap {
            var,
            rows,
            cols,
            channels: self.channels(),
            stride: self.stride(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: usize, h: usize, f: impl Fn(usize) -> f64) -> ImageFrame<f64> {
        let intr = CameraIntrinsics::new(10.0, 10.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
        ImageFrame::new((0..w * h * 3).map(f).collect(), 0, intr, CameraPose::identity()).unwrap()
    }

    #[test]
    fn default_stack_shape() {
        let fx = FeatureExtractor::new(4, 16).unwrap();
        assert_eq!(fx.strides, vec![2, 2, 1]);
        assert_eq!(fx.widths, vec![16, 32, 16]);
        let mut params = ParamSet::<f64>::new();
        fx.init_params(&mut Rng::new(0), &mut params);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let fm = fx.extract(&mut tape, &b, &frame(32, 32, |i| (i % 7) as f64 / 7.0)).unwrap();
        assert_eq!((fm.rows, fm.cols, fm.channels), (8, 8, 16));
        assert_eq!(tape.shape(fm.var), &[8, 8, 16]);
    }

    #[test]
    fn sixteen_stride_stack() {
        let fx = FeatureExtractor::new(16, 8).unwrap();
        assert_eq!(fx.strides, vec![2, 2, 2, 2, 1]);
        assert_eq!(fx.stride(), 16);
    }

    #[test]
    fn rejects_indivisible_image() {
        let fx = FeatureExtractor::new(4, 8).unwrap();
        let mut params = ParamSet::<f64>::new();
        fx.init_params(&mut Rng::new(0), &mut params);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        assert!(fx.extract(&mut tape, &b, &frame(30, 32, |_| 0.5)).is_err());
        assert!(FeatureExtractor::new(3, 8).is_err());
    }

    #[test]
    fn identical_frames_identical_maps() {
        let fx = FeatureExtractor::new(4, 8).unwrap();
        let mut params = ParamSet::<f64>::new();
        fx.init_params(&mut Rng::new(9), &mut params);
        let f = frame(16, 16, |i| ((i * 31) % 17) as f64 / 17.0);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let a = fx.extract(&mut tape, &b, &f).unwrap();
        let c = fx.extract(&mut tape, &b, &f.clone()).unwrap();
        assert_eq!(tape.value(a.var), tape.value(c.var));
    }

    #[test]
    fn image_to_feature_coordinates() {
        let fm = FeatureMap {
            var: Tape::<f64>::new().constant(&Tensor::zeros(vec![1])),
            rows: 4,
            cols: 4,
            channels: 1,
            stride: 4,
        };
        // centre of cell 0 covers image pixels 0..4, centre at 1.5
        assert_eq!(fm.from_image_coords([1.5f64, 5.5]), [0.0, 1.0]);
    }
}
