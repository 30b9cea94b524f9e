//! Image containers and non-differentiable image utilities.
//!
//! Pixel values live in `[-1, 1]`: byte `p` maps to `2 p / 255 - 1`.

use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Rec. 601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Planar (channel-major) image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("image", format!("{channels} channels")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{} values for {channels}x{height}x{width}", data.len()),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Image::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image::new(channels, height, width, data)
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
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Expand a grey image to three identical channels; RGB is returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image {
            channels: 3,
            data,
            ..*self
        }
    }

    /// `1 x C x H x W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, self.channels, self.height, self.width), self.data.clone())
            .expect("extents match")
    }

    /// Sample `n` of a tensor with 1 or 3 channels.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Image> {
        let s = t.shape();
        Image::new(s.c(), s.h(), s.w(), t.sample(n).to_vec())
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Image> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::shape(
                "crop",
                format!(
                    "window {h}x{w} at ({row},{col}) outside {}x{}",
                    self.height, self.width
                ),
            ));
        }
        Image::from_fn(self.channels, h, w, |c, y, x| self.get(c, row + y, col + x))
    }

    /// Extend to `h x w` (at least the current extents) by reflecting
    /// about the bottom and right edges.
    pub fn pad_reflect_to(&self, h: usize, w: usize) -> Result<Image> {
        if h < self.height || w < self.width {
            return Err(Error::shape(
                "pad",
                format!("{h}x{w} smaller than {}x{}", self.height, self.width),
            ));
        }
        Image::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, reflect_index(y as isize, self.height), reflect_index(x as isize, self.width))
        })
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Reflect an index into `[0, n)` without repeating edge pixels, bouncing as
/// often as needed.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn byte_to_value(b: u8) -> f32 {
    2.0 * (b as f32 / 255.0) - 1.0
}

pub fn value_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

/// Decode an 8-bit PNG or binary PPM/PGM file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let fail = |detail: String| Error::Image {
        path: path.to_path_buf(),
        detail,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| fail(e.to_string()))?;
    let (channels, bytes, (w, h)) = match decoded.color() {
        ColorType::L8 | ColorType::La8 => {
            let g = decoded.to_luma8();
            (1, g.as_raw().clone(), g.dimensions())
        }
        ColorType::Rgb8 | ColorType::Rgba8 => {
            let rgb = decoded.to_rgb8();
            (3, rgb.as_raw().clone(), rgb.dimensions())
        }
        other => return Err(fail(format!("unsupported pixel format {other:?}; only 8-bit grey/RGB"))),
    };
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; channels * h * w];
    for (i, &b) in bytes.iter().enumerate() {
        let c = i % channels;
        let p = i / channels;
        data[c * h * w + p] = byte_to_value(b);
    }
    Image::new(channels, h, w, data)
}

/// Encode as PNG or binary PPM/PGM depending on the file extension.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (image.height, image.width);
    let plane = h * w;
    let mut bytes = vec![0u8; image.channels * plane];
    for p in 0..plane {
        for c in 0..image.channels {
            bytes[p * image.channels + c] = value_to_byte(image.data[c * plane + p]);
        }
    }
    let dynamic = if image.channels == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, bytes).expect("extents"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, bytes).expect("extents"))
    };
    dynamic.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })
}

pub fn to_greyscale(image: &Image) -> Result<Image> {
    if image.channels != 3 {
        return Err(Error::invalid("to_greyscale", "expects a 3-channel image"));
    }
    Image::from_fn(1, image.height, image.width, |_, y, x| {
        LUMA[0] * image.get(0, y, x) + LUMA[1] * image.get(1, y, x) + LUMA[2] * image.get(2, y, x)
    })
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Result<Vec<f32>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("gaussian_blur", format!("sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| (t / total) as f32).collect())
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(image: &Image, sigma: f32) -> Result<Image> {
    let taps = gaussian_kernel(sigma)?;
    let r = (taps.len() / 2) as isize;
    let (h, w) = (image.height, image.width);
    let horizontal = Image::from_fn(image.channels, h, w, |c, y, x| {
        taps.iter()
            .enumerate()
            .map(|(i, t)| t * image.get(c, y, reflect_index(x as isize + i as isize - r, w)))
            .sum()
    })?;
    Image::from_fn(image.channels, h, w, |c, y, x| {
        taps.iter()
            .enumerate()
            .map(|(i, t)| t * horizontal.get(c, reflect_index(y as isize + i as isize - r, h), x))
            .sum()
    })
}

/// Box average over non-overlapping `factor x factor` blocks, after
/// reflect-padding to the next multiple of `factor`.
pub fn downsample(image: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(Error::invalid("downsample", "factor must be positive"));
    }
    let h = image.height.div_ceil(factor) * factor;
    let w = image.width.div_ceil(factor) * factor;
    let padded = image.pad_reflect_to(h, w)?;
    let norm = 1.0 / (factor * factor) as f32;
    Image::from_fn(image.channels, h / factor, w / factor, |c, y, x| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += padded.get(c, y * factor + dy, x * factor + dx);
            }
        }
        acc * norm
    })
}
