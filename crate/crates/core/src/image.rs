//! Interleaved RGB float images and their PNG/PPM codecs.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Result, WbError};
use crate::tensor::Tensor4;

/// `height x width x 3` image, row-major, channels interleaved, nominally in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize) -> Self {
        ImageRGB {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(WbError::shape(
                "ImageRGB::from_vec",
                format!("{} values for {width}x{height}", width * height * 3),
                data.len(),
            ));
        }
        Ok(ImageRGB { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        ImageRGB { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn clamped(mut self) -> Self {
        self.clamp01();
        self
    }

    /// Copies the `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageRGB> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(WbError::OutOfRange {
                what: "crop window",
                detail: format!("{w}x{h} at ({x0},{y0}) in {}x{}", self.width, self.height),
            });
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(ImageRGB { width: w, height: h, data })
    }

    /// `1 x 3 x H x W` planar tensor.
    pub fn to_tensor(&self) -> Tensor4 {
        let plane = self.pixel_count();
        let mut out = vec![0.0f32; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[plane + i] = px[1];
            out[2 * plane + i] = px[2];
        }
        Tensor4::from_vec([1, 3, self.height, self.width], out).expect("planar layout")
    }

    /// Inverse of [`ImageRGB::to_tensor`] for sample `n` of a 3-channel tensor.
    pub fn from_tensor(t: &Tensor4, n: usize) -> Result<ImageRGB> {
        let [b, c, h, w] = t.dims();
        if c != 3 || n >= b {
            return Err(WbError::shape(
                "ImageRGB::from_tensor",
                "3-channel tensor",
                crate::tensor::fmt_dims(t.dims()),
            ));
        }
        let plane = h * w;
        let src = &t.data()[n * 3 * plane..(n + 1) * 3 * plane];
        let mut data = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            data.extend_from_slice(&[src[i], src[plane + i], src[2 * plane + i]]);
        }
        Ok(ImageRGB { width: w, height: h, data })
    }

    pub fn from_rgb8(img: &RgbImage) -> ImageRGB {
        ImageRGB {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    /// Quantizes to 8 bits: clamp to `[0, 1]`, scale by 255, round half up.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| quantize(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    /// Reads PNG or binary PPM, picking the codec from the file contents.
    pub fn load(path: impl AsRef<Path>) -> Result<ImageRGB> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| WbError::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<ImageRGB> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Writes PNG unless the extension is `.ppm`/`.pnm`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let format = match ext.as_deref() {
            Some("ppm") | Some("pnm") => ImageFormat::Pnm,
            _ => ImageFormat::Png,
        };
        let bytes = self.encode(format)?;
        std::fs::write(path, bytes).map_err(|e| WbError::io(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        self.encode(ImageFormat::Png)
    }

    fn encode(&self, format: ImageFormat) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, format)?;
        Ok(buf.into_inner())
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}
