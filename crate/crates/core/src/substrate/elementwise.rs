use super::{check_same_shape, Backward, Ctx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

struct Act {
    inputs: [Var; 1],
    kind: Activation,
}

impl Backward for Act {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = ctx.value(self.inputs[0]).data();
        let y = ctx.output().data();
        let mut dx = grad.clone();
        for (i, d) in dx.data_mut().iter_mut().enumerate() {
            *d *= self.kind.derivative(x[i], y[i]);
        }
        vec![Some(dx)]
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp {
    inputs: [Var; 2],
    kind: Binary,
}

impl Backward for BinaryOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        match self.kind {
            Binary::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Binary::Sub => vec![Some(grad.clone()), needs[1].then(|| grad.map(|g| -g))],
            Binary::Mul => {
                let a = ctx.value(self.inputs[0]);
                let b = ctx.value(self.inputs[1]);
                let prod = |other: &Tensor| {
                    let mut d = grad.clone();
                    d.data_mut().iter_mut().zip(other.data()).for_each(|(g, o)| *g *= o);
                    d
                };
                vec![needs[0].then(|| prod(b)), needs[1].then(|| prod(a))]
            }
        }
    }
}

struct Affine {
    inputs: [Var; 1],
    scale: f32,
}

impl Backward for Affine {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _ctx: &Ctx<'_>, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.map(|g| g * self.scale))]
    }
}

struct Concat {
    inputs: Vec<Var>,
    channels: Vec<usize>,
}

impl Backward for Concat {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, _ctx: &Ctx<'_>, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let mut start = 0;
        self.channels
            .iter()
            .zip(needs)
            .map(|(&c, &need)| {
                let g = need.then(|| grad.channels(start, c).expect("in range"));
                start += c;
                g
            })
            .collect()
    }
}

struct Slice {
    inputs: [Var; 1],
    start: usize,
}

impl Backward for Slice {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = ctx.value(self.inputs[0]).shape();
        let plane = s.plane();
        let len = grad.shape().c() * plane;
        let mut dx = Tensor::zeros(s);
        for n in 0..s.n() {
            let dst = &mut dx.sample_mut(n)[self.start * plane..self.start * plane + len];
            dst.copy_from_slice(grad.sample(n));
        }
        vec![Some(dx)]
    }
}

struct Blend {
    inputs: [Var; 3],
}

impl Backward for Blend {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let alpha = ctx.value(self.inputs[0]);
        let ig = ctx.value(self.inputs[1]);
        let im = ctx.value(self.inputs[2]);
        let s = grad.shape();
        let plane = s.plane();
        let mut da = needs[0].then(|| Tensor::zeros(alpha.shape()));
        let mut dg = needs[1].then(|| Tensor::zeros(s));
        let mut dm = needs[2].then(|| Tensor::zeros(s));
        for n in 0..s.n() {
            let a = alpha.sample(n);
            for c in 0..s.c() {
                for p in 0..plane {
                    let i = (n * s.c() + c) * plane + p;
                    let g = grad.data()[i];
                    if let Some(da) = da.as_mut() {
                        da.data_mut()[n * plane + p] += g * (ig.data()[i] - im.data()[i]);
                    }
                    if let Some(dg) = dg.as_mut() {
                        dg.data_mut()[i] = g * a[p];
                    }
                    if let Some(dm) = dm.as_mut() {
                        dm.data_mut()[i] = g * (1.0 - a[p]);
                    }
                }
            }
        }
        vec![da, dg, dm]
    }
}

impl Tape {
    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = self.value(input).map(|x| kind.apply(x));
        self.push_op(out, Act { inputs: [input], kind })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Var {
        self.activation(input, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, op: &'static str) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape(op, x, y)?;
        let f = match kind {
            Binary::Add => |p: f32, q: f32| p + q,
            Binary::Sub => |p: f32, q: f32| p - q,
            Binary::Mul => |p: f32, q: f32| p * q,
        };
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.push_op(out, BinaryOp { inputs: [a, b], kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine(&mut self, input: Var, scale: f32, offset: f32) -> Var {
        let out = self.value(input).map(|x| scale * x + offset);
        self.push_op(out, Affine { inputs: [input], scale })
    }

    pub fn scale(&mut self, input: Var, scale: f32) -> Var {
        self.affine(input, scale, 0.0)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&values)?;
        let channels = values.iter().map(|t| t.shape().c()).collect();
        Ok(self.push_op(
            out,
            Concat {
                inputs: parts.to_vec(),
                channels,
            },
        ))
    }

    /// Channels `[start, start+len)`.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).channels(start, len)?;
        Ok(self.push_op(out, Slice { inputs: [input], start }))
    }

    /// `alpha ⊙ parametric + (1 - alpha) ⊙ memory` with a one-channel mask
    /// broadcast over the image channels.
    pub fn blend(&mut self, alpha: Var, parametric: Var, memory: Var) -> Result<Var> {
        let (a, g, m) = (self.value(alpha), self.value(parametric), self.value(memory));
        check_same_shape("blend", g, m)?;
        let s = g.shape();
        if a.shape() != Shape::new(s.n(), 1, s.h(), s.w()) {
            return Err(Error::shape(
                "blend",
                format!("mask {} for images {s}", a.shape()),
            ));
        }
        let out = Tensor::from_fn(s, |n, c, h, w| blend_pixel(a.at(n, 0, h, w), g.at(n, c, h, w), m.at(n, c, h, w)));
        Ok(self.push_op(
            out,
            Blend {
                inputs: [alpha, parametric, memory],
            },
        ))
    }
}

/// The blend of one pixel value; the single definition shared by the
/// forward pass and anything checking it.
#[inline]
pub fn blend_pixel(alpha: f32, parametric: f32, memory: f32) -> f32 {
    alpha * parametric + (1.0 - alpha) * memory
}
