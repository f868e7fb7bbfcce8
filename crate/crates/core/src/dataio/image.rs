use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Gray,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb => 3,
            ColorSpace::Gray => 1,
        }
    }

    fn from_channels(c: usize) -> Result<Self> {
        match c {
            3 => Ok(ColorSpace::Rgb),
            1 => Ok(ColorSpace::Gray),
            _ => Err(Error::Shape(format!("unsupported channel count {c}"))),
        }
    }
}

/// Interleaved `H×W×C` floating image.
///
/// Clean images and corrupted views live in `[0, 1]`; signed residuals
/// produced by the noise decoder use the same carrier.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    colorspace: ColorSpace,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        let colorspace = ColorSpace::from_channels(channels)?;
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite pixel value {bad}")));
        }
        Ok(Self {
            height,
            width,
            colorspace,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels]).expect("valid constant image")
    }

    /// Builds an image from `f(y, x, c)`.
    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data).expect("generator produced a valid image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.colorspace.channels()
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels())
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels() + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = f(*v);
        }
        out
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop {h}x{w}+{y0}+{x0} outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Self::new(h, w, c, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        let c = self.channels();
        Self::from_fn(self.height, self.width, c, |y, x, k| self.get(y, self.width - 1 - x, k))
    }

    pub fn flip_vertical(&self) -> Self {
        let c = self.channels();
        Self::from_fn(self.height, self.width, c, |y, x, k| {
            self.get(self.height - 1 - y, x, k)
        })
    }

    /// Clockwise quarter turn.
    pub fn rotate90(&self) -> Self {
        let c = self.channels();
        Self::from_fn(self.width, self.height, c, |y, x, k| {
            self.get(self.height - 1 - x, y, k)
        })
    }

    /// Reflect-pads (mirror without edge repeat) to at least `h`×`w`.
    pub fn pad_reflect_to(&self, h: usize, w: usize) -> Self {
        let c = self.channels();
        Self::from_fn(h.max(self.height), w.max(self.width), c, |y, x, k| {
            self.get(reflect(y as isize, self.height), reflect(x as isize, self.width), k)
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let is_gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if is_gray {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Self::new(h as usize, w as usize, 1, data)
        } else {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Self::new(h as usize, w as usize, 3, data)
        }
    }

    /// Quantizes to 8 bits (round-to-nearest after clamping) and writes PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_u8();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.colorspace {
            ColorSpace::Rgb => image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer sized to image")
                .save(path),
            ColorSpace::Gray => image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer sized to image")
                .save(path),
        };
        res.map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Stacks same-shaped images into an NHWC tensor.
    pub fn stack<T: Real>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero images".into()))?;
        let (h, w, c) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for im in images {
            first.ensure_same_shape(im)?;
            data.extend(im.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Ok(Tensor::new(vec![images.len(), h, w, c], data))
    }

    /// Splits an NHWC tensor back into images.
    pub fn unstack<T: Real>(t: &Tensor<T>) -> Result<Vec<ImageTensor>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected NHWC tensor, got {s:?}")));
        }
        let per = s[1] * s[2] * s[3];
        t.data()
            .chunks(per)
            .map(|chunk| {
                let data = chunk.iter().map(|v| v.as_f64() as f32).collect();
                ImageTensor::new(s[1], s[2], s[3], data)
            })
            .collect()
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Binary pixel mask, `1` = kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskTensor {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskTensor {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape("mask size mismatch".into()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Param("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn kept(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn dropped_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }

    /// Single-channel `[0, 1]` image view of the mask.
    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::from_fn(self.height, self.width, 1, |y, x, _| {
            self.data[y * self.width + x] as f32
        })
    }

    /// Applies the same geometric transform used on its image.
    pub fn map_geometry(&self, f: impl Fn(&ImageTensor) -> ImageTensor) -> Self {
        let img = f(&self.to_image());
        Self {
            height: img.height(),
            width: img.width(),
            data: img.data().iter().map(|&v| v as u8).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let img = ImageTensor::from_fn(3, 5, 3, |y, x, c| (y * 15 + x * 3 + c) as f32 / 45.0);
        let r = img.rotate90();
        assert_eq!(r.shape(), (5, 3, 3));
        assert_eq!(r.get(0, 2, 1), img.get(0, 0, 1));
        assert_eq!(r.rotate90().rotate90().rotate90(), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ImageTensor::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageTensor::new(0, 2, 3, vec![]).is_err());
        assert!(ImageTensor::new(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(4, 6, 3, |y, x, c| ((y * 31 + x * 7 + c * 50) % 256) as f32 / 255.0);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(ImageTensor::load_png(&p).unwrap(), img);
        let gray = ImageTensor::from_fn(3, 3, 1, |y, x, _| ((y * 3 + x) * 20) as f32 / 255.0);
        let p = dir.path().join("g.png");
        gray.save_png(&p).unwrap();
        assert_eq!(ImageTensor::load_png(&p).unwrap(), gray);
    }

    #[test]
    fn stack_unstack() {
        let a = ImageTensor::filled(2, 3, 3, 0.25);
        let b = ImageTensor::filled(2, 3, 3, 0.5);
        let t: Tensor<f32> = ImageTensor::stack(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3, 3]);
        assert_eq!(ImageTensor::unstack(&t).unwrap(), vec![a, b.clone()]);
        assert!(ImageTensor::stack::<f32>(&[&b, &ImageTensor::filled(3, 3, 3, 0.0)]).is_err());
    }
}
