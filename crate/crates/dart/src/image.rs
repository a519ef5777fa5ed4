//! Dense float image tensor.
//!
//! Coordinates follow one convention everywhere: pixel `i` occupies the
//! interval `[i, i+1)` along its axis, so its center sits at `i + 0.5`.

use crate::error::{DartError, Result};

/// H x W x Ch tensor of f64 samples, row-major with channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(DartError::invalid(
                "image dims",
                format!("{height}x{width}x{channels}"),
            ));
        }
        if data.len() != height * width * channels {
            return Err(DartError::DimMismatch {
                what: "image data",
                expected: (height * width * channels).to_string(),
                actual: data.len().to_string(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let px = pos / channels;
            return Err(DartError::NonFinite {
                row: px / width,
                col: px % width,
                value: data[pos],
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Build from a per-pixel closure `(y, x, c) -> value`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Rec. 601 luma for RGB images; channel 0 for everything else.
    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        if self.channels == 3 {
            0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
        } else {
            self.get(y, x, 0)
        }
    }

    /// Replicate a single-channel image across `channels` channels.
    pub fn broadcast_channels(&self, channels: usize) -> Image {
        if self.channels == channels {
            return self.clone();
        }
        Image::from_fn(self.height, self.width, channels, |y, x, _| {
            self.get(y, x, 0)
        })
    }
}

/// Ordered stack of same-sized frames.
#[derive(Debug, Clone)]
pub struct FrameStack {
    frames: Vec<Image>,
}

impl FrameStack {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        if frames.is_empty() {
            return Err(DartError::Empty {
                what: "frame stack",
            });
        }
        let (h, w, ch) = (frames[0].height(), frames[0].width(), frames[0].channels());
        for (i, f) in frames.iter().enumerate() {
            if f.height() != h || f.width() != w || f.channels() != ch {
                return Err(DartError::DimMismatch {
                    what: "frame dims",
                    expected: format!("{h}x{w}x{ch}"),
                    actual: format!("frame {i}: {}x{}x{}", f.height(), f.width(), f.channels()),
                });
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        let err = Image::new(2, 2, 1, vec![0.0, 1.0, f64::NAN, 2.0]).unwrap_err();
        match err {
            DartError::NonFinite { row, col, .. } => {
                assert_eq!((row, col), (1, 0));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn luminance_matches_rec601() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.5, 0.25]).unwrap();
        let expect = 0.299 + 0.587 * 0.5 + 0.114 * 0.25;
        assert!((img.luminance(0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn frame_stack_requires_matching_dims() {
        let a = Image::zeros(2, 2, 1);
        let b = Image::zeros(2, 3, 1);
        assert!(FrameStack::new(vec![a.clone(), b]).is_err());
        assert!(FrameStack::new(vec![]).is_err());
        assert_eq!(FrameStack::new(vec![a]).unwrap().len(), 1);
    }
}
