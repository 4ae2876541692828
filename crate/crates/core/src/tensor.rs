//! Dense image tensor in channels-height-width layout.
//!
//! All arithmetic in the pipeline runs in f64; single-precision only appears
//! at the checkpoint boundary (see `checkpoint`).

use crate::error::{Error, Result};

/// Multi-channel image, row-major within each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "Image::from_vec",
                format!("{} values", channels * height * width),
                format!("{}", data.len()),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// (channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Single-channel view of channel `c` as its own image (copies).
    pub fn extract_channel(&self, c: usize) -> Image {
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
        }
    }

    /// Stacks single-channel images along the channel axis.
    pub fn concat_channels(parts: &[&Image]) -> Result<Image> {
        let (h, w) = (parts[0].height, parts[0].width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::shape(
                    "Image::concat_channels",
                    format!("{}x{}", h, w),
                    format!("{}x{}", p.height, p.width),
                ));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Image {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "Image::zip_map",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Image {
        self.map(|v| v * s)
    }

    /// self += s * other, in place.
    pub fn add_scaled(&mut self, other: &Image, s: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "Image::add_scaled",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a + b)
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    /// [0,1] file/metric range -> [-1,1] diffusion range.
    pub fn to_signed(&self) -> Image {
        self.map(|v| 2.0 * v - 1.0)
    }

    /// [-1,1] diffusion range -> [0,1] file/metric range.
    pub fn to_unit(&self) -> Image {
        self.map(|v| (v + 1.0) * 0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_chw() {
        let mut im = Image::zeros(2, 3, 4);
        *im.at_mut(1, 2, 3) = 7.0;
        assert_eq!(im.data()[1 * 12 + 2 * 4 + 3], 7.0);
        assert_eq!(im.at(1, 2, 3), 7.0);
    }

    #[test]
    fn concat_stacks_channels() {
        let a = Image::filled(1, 2, 2, 1.0);
        let b = Image::filled(2, 2, 2, 2.0);
        let c = Image::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), (3, 2, 2));
        assert_eq!(c.at(0, 0, 0), 1.0);
        assert_eq!(c.at(2, 1, 1), 2.0);
    }

    #[test]
    fn concat_rejects_mismatched_sizes() {
        let a = Image::zeros(1, 2, 2);
        let b = Image::zeros(1, 3, 2);
        assert!(Image::concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn range_conversions_round_trip() {
        let a = Image::from_vec(1, 1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let back = a.to_signed().to_unit();
        for (x, y) in a.data().iter().zip(back.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
