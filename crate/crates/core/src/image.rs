//! In-memory image types. Intensities are `f64` in `[0, 1]`; quantisation to
//! bytes happens only at file boundaries.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(
                "numel",
                format!("{width}x{height} plane with {} values", data.len()),
            ));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Plane {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Plane::new(
            width,
            height,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }
}

/// RGB image stored interleaved (`y`, `x`, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim(
                "numel",
                format!("{width}x{height} RGB image with {} values", data.len()),
            ));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn plane(&self, c: usize) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }

    pub fn from_planes(planes: [&Plane; 3]) -> Result<Self> {
        let (w, h) = (planes[0].width, planes[0].height);
        if planes.iter().any(|p| p.width != w || p.height != h) {
            return Err(Error::dim("width", "RGB planes differ in size"));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            data.extend(planes.iter().map(|p| p.data[i]));
        }
        RgbImage::new(w, h, data)
    }

    pub fn map_planes(&self, f: impl Fn(&Plane) -> Plane) -> Result<Self> {
        let planes = [f(&self.plane(0)), f(&self.plane(1)), f(&self.plane(2))];
        Self::from_planes([&planes[0], &planes[1], &planes[2]])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        RgbImage::new(
            width,
            height,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// `1 x 3 x H x W` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        Tensor::from_fn([1, 3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            T::from_f64(self.data[p * 3 + c])
        })
    }
}

/// Maps `[0, 1]` to a byte with clamping and round-half-up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planes_round_trip() {
        let img = RgbImage::new(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.plane(1).data, vec![0.2, 0.5]);
        let back = img.map_planes(|p| p.clone()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn tensor_layout_is_nchw() {
        let img = RgbImage::new(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let t: Tensor<f64> = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }

    #[test]
    fn quantize_clamps() {
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5), 128);
    }
}
