use std::fmt;

use crate::error::{Error, Result};

/// Extents of a 4-axis array: (batch, channels, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per sample (c * h * w).
    pub fn sample_len(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }

    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + h) * self.0[3] + w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense NCHW array of 32-bit reals.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n() {
            for c in 0..shape.c() {
                for h in 0..shape.h() {
                    for w in 0..shape.w() {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f32 {
        let i = self.shape.index(n, c, h, w);
        &mut self.data[i]
    }

    /// The single value of a 1-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.shape.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} into {shape}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Copy a spatial window `[row, row+h) x [col, col+w)` of every sample/channel.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Tensor> {
        if row + h > self.shape.h() || col + w > self.shape.w() {
            return Err(Error::shape(
                "crop",
                format!(
                    "window {h}x{w} at ({row},{col}) outside {}",
                    self.shape
                ),
            ));
        }
        let s = self.shape;
        Ok(Tensor::from_fn(Shape::new(s.n(), s.c(), h, w), |n, c, y, x| {
            self.at(n, c, row + y, col + x)
        }))
    }

    /// Stack tensors along the batch axis; all must share (c, h, w).
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        let mut n = 0;
        for p in parts {
            if p.shape.0[1..] != first.0[1..] {
                return Err(Error::shape(
                    "stack",
                    format!("{} vs {}", p.shape, first),
                ));
            }
            n += p.shape.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c(), first.h(), first.w()),
            data,
        })
    }

    /// Concatenate along the channel axis; all must share (n, h, w).
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no tensors"))?
            .shape;
        for p in parts {
            if p.shape.n() != first.n() || p.shape.h() != first.h() || p.shape.w() != first.w() {
                return Err(Error::shape(
                    "concat",
                    format!("{} vs {}", p.shape, first),
                ));
            }
        }
        let c: usize = parts.iter().map(|p| p.shape.c()).sum();
        let mut data = Vec::with_capacity(first.n() * c * first.plane());
        for n in 0..first.n() {
            for p in parts {
                data.extend_from_slice(p.sample(n));
            }
        }
        Ok(Tensor {
            shape: Shape::new(first.n(), c, first.h(), first.w()),
            data,
        })
    }

    /// Channels `[start, start+len)` of every sample.
    pub fn channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if start + len > s.c() {
            return Err(Error::shape(
                "channels",
                format!("range {start}..{} of {s}", start + len),
            ));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n() * len * plane);
        for n in 0..s.n() {
            let base = n * s.sample_len() + start * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Tensor {
            shape: Shape::new(s.n(), len, s.h(), s.w()),
            data,
        })
    }
}
