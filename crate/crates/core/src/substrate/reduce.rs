use super::{check_same_shape, Backward, Ctx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Clamp applied to probabilities inside logarithms.
const LOG_CLAMP: f32 = 1e-7;

/// `out[b,c,h,w] = Σ_n mix[b,n,h,w] · templates[b, 3n + c, h, w]`.
///
/// `mix` is `B x N x H x W`, `templates` is `B x 3N x H x W` (N stacked RGB
/// crops). Every output pixel reads only its own position.
pub fn mix_templates_forward(mix: &Tensor, templates: &Tensor) -> Result<Tensor> {
    let (ms, ts) = (mix.shape(), templates.shape());
    if ts != Shape::new(ms.n(), 3 * ms.c(), ms.h(), ms.w()) {
        return Err(Error::shape(
            "mix_templates",
            format!("mixture {ms} needs templates {}x{}x{}x{}, got {ts}", ms.n(), 3 * ms.c(), ms.h(), ms.w()),
        ));
    }
    let plane = ms.plane();
    let mut out = Tensor::zeros(Shape::new(ms.n(), 3, ms.h(), ms.w()));
    for b in 0..ms.n() {
        let a = mix.sample(b);
        let t = templates.sample(b);
        let o = out.sample_mut(b);
        let (o0, rest) = o.split_at_mut(plane);
        let (o1, o2) = rest.split_at_mut(plane);
        for n in 0..ms.c() {
            let weights = &a[n * plane..(n + 1) * plane];
            let src = &t[3 * n * plane..3 * (n + 1) * plane];
            let (s0, rest) = src.split_at(plane);
            let (s1, s2) = rest.split_at(plane);
            // one pass over the weights for all three channels
            for p in 0..plane {
                let w = weights[p];
                o0[p] += w * s0[p];
                o1[p] += w * s1[p];
                o2[p] += w * s2[p];
            }
        }
    }
    Ok(out)
}

struct Softmax {
    inputs: [Var; 1],
}

impl Backward for Softmax {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let y = ctx.output();
        let s = y.shape();
        let plane = s.plane();
        let mut dx = Tensor::zeros(s);
        for n in 0..s.n() {
            let (ys, gs) = (y.sample(n), grad.sample(n));
            let d = dx.sample_mut(n);
            for p in 0..plane {
                let dot: f32 = (0..s.c()).map(|c| ys[c * plane + p] * gs[c * plane + p]).sum();
                for c in 0..s.c() {
                    let i = c * plane + p;
                    d[i] = ys[i] * (gs[i] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

struct Mix {
    inputs: [Var; 1],
    templates: Tensor,
}

impl Backward for Mix {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = ctx.value(self.inputs[0]).shape();
        let plane = s.plane();
        let mut da = Tensor::zeros(s);
        for b in 0..s.n() {
            let t = self.templates.sample(b);
            let g = grad.sample(b);
            let d = da.sample_mut(b);
            for n in 0..s.c() {
                let dst = &mut d[n * plane..(n + 1) * plane];
                for c in 0..3 {
                    let src = &t[(3 * n + c) * plane..(3 * n + c + 1) * plane];
                    let gc = &g[c * plane..(c + 1) * plane];
                    for ((dv, sv), gv) in dst.iter_mut().zip(src).zip(gc) {
                        *dv += sv * gv;
                    }
                }
            }
        }
        vec![Some(da)]
    }
}

/// Reductions to a scalar whose gradient is a per-element map of the input.
enum Reduce {
    Sum,
    Mean,
    MeanSquare,
    NegLogMean { complement: bool },
    Entropy,
    TotalVariation,
}

struct ReduceOp {
    inputs: [Var; 1],
    kind: Reduce,
}

fn clamp_prob(v: f32) -> f32 {
    v.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
}

fn tv_counts(s: Shape) -> (usize, usize) {
    let horiz = s.n() * s.c() * s.h() * s.w().saturating_sub(1);
    let vert = s.n() * s.c() * s.h().saturating_sub(1) * s.w();
    (horiz, vert)
}

impl Reduce {
    fn forward(&self, x: &Tensor) -> f32 {
        let s = x.shape();
        let len = x.len().max(1) as f64;
        let v = match self {
            Reduce::Sum => x.sum(),
            Reduce::Mean => x.sum() / len,
            Reduce::MeanSquare => x.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / len,
            Reduce::NegLogMean { complement } => {
                -x.data()
                    .iter()
                    .map(|&v| (clamp_prob(if *complement { 1.0 - v } else { v }) as f64).ln())
                    .sum::<f64>()
                    / len
            }
            Reduce::Entropy => {
                let pixels = (s.n() * s.plane()).max(1) as f64;
                -x.data()
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p as f64 * (p as f64).ln())
                    .sum::<f64>()
                    / pixels
            }
            Reduce::TotalVariation => {
                let (hc, vc) = tv_counts(s);
                let (mut h, mut v) = (0.0f64, 0.0f64);
                for n in 0..s.n() {
                    for c in 0..s.c() {
                        for y in 0..s.h() {
                            for xx in 0..s.w() {
                                let here = x.at(n, c, y, xx) as f64;
                                if xx + 1 < s.w() {
                                    h += (x.at(n, c, y, xx + 1) as f64 - here).abs();
                                }
                                if y + 1 < s.h() {
                                    v += (x.at(n, c, y + 1, xx) as f64 - here).abs();
                                }
                            }
                        }
                    }
                }
                let mut tv = 0.0;
                if hc > 0 {
                    tv += h / hc as f64;
                }
                if vc > 0 {
                    tv += v / vc as f64;
                }
                tv
            }
        };
        v as f32
    }
}

impl Backward for ReduceOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let g = grad.item();
        let x = ctx.value(self.inputs[0]);
        let s = x.shape();
        let len = x.len().max(1) as f32;
        let dx = match self.kind {
            Reduce::Sum => Tensor::full(s, g),
            Reduce::Mean => Tensor::full(s, g / len),
            Reduce::MeanSquare => x.map(|v| g * 2.0 * v / len),
            Reduce::NegLogMean { complement } => x.map(|v| {
                let p = if complement { 1.0 - v } else { v };
                if p <= LOG_CLAMP || p >= 1.0 - LOG_CLAMP {
                    0.0
                } else {
                    let d = -g / (len * p);
                    if complement {
                        -d
                    } else {
                        d
                    }
                }
            }),
            Reduce::Entropy => {
                let pixels = (s.n() * s.plane()).max(1) as f32;
                x.map(|p| -g * (p.max(1e-30).ln() + 1.0) / pixels)
            }
            Reduce::TotalVariation => {
                let (hc, vc) = tv_counts(s);
                let mut dx = Tensor::zeros(s);
                let sign = |d: f32| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                for n in 0..s.n() {
                    for c in 0..s.c() {
                        for y in 0..s.h() {
                            for xx in 0..s.w() {
                                let here = x.at(n, c, y, xx);
                                if xx + 1 < s.w() {
                                    let d = g * sign(x.at(n, c, y, xx + 1) - here) / hc as f32;
                                    *dx.at_mut(n, c, y, xx + 1) += d;
                                    *dx.at_mut(n, c, y, xx) -= d;
                                }
                                if y + 1 < s.h() {
                                    let d = g * sign(x.at(n, c, y + 1, xx) - here) / vc as f32;
                                    *dx.at_mut(n, c, y + 1, xx) += d;
                                    *dx.at_mut(n, c, y, xx) -= d;
                                }
                            }
                        }
                    }
                }
                dx
            }
        };
        vec![Some(dx)]
    }
}

struct SampleMean {
    inputs: [Var; 1],
}

impl Backward for SampleMean {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = ctx.value(self.inputs[0]).shape();
        let len = s.sample_len() as f32;
        let mut dx = Tensor::zeros(s);
        for n in 0..s.n() {
            let g = grad.data()[n] / len;
            dx.sample_mut(n).fill(g);
        }
        vec![Some(dx)]
    }
}

struct AvgPool {
    inputs: [Var; 1],
    factor: usize,
}

impl Backward for AvgPool {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = ctx.value(self.inputs[0]).shape();
        let f = self.factor;
        let norm = 1.0 / (f * f) as f32;
        let dx = Tensor::from_fn(s, |n, c, h, w| grad.at(n, c, h / f, w / f) * norm);
        vec![Some(dx)]
    }
}

impl Tape {
    /// Softmax across channels independently at every (sample, row, col).
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.c() == 0 {
            return Err(Error::shape("softmax_channels", format!("no channels in {s}")));
        }
        let plane = s.plane();
        let mut out = Tensor::zeros(s);
        for n in 0..s.n() {
            let xs = x.sample(n);
            let o = out.sample_mut(n);
            for p in 0..plane {
                let max = (0..s.c()).map(|c| xs[c * plane + p]).fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0f32;
                for c in 0..s.c() {
                    let e = (xs[c * plane + p] - max).exp();
                    o[c * plane + p] = e;
                    total += e;
                }
                for c in 0..s.c() {
                    o[c * plane + p] /= total;
                }
            }
        }
        Ok(self.push_op(out, Softmax { inputs: [input] }))
    }

    /// Aligned soft attention over templates; gradients reach `mix` only.
    pub fn mix_templates(&mut self, mix: Var, templates: &Tensor) -> Result<Var> {
        let out = mix_templates_forward(self.value(mix), templates)?;
        Ok(self.push_op(
            out,
            Mix {
                inputs: [mix],
                templates: templates.clone(),
            },
        ))
    }

    fn reduce(&mut self, input: Var, kind: Reduce) -> Var {
        let out = Tensor::scalar(kind.forward(self.value(input)));
        self.push_op(out, ReduceOp { inputs: [input], kind })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        self.reduce(input, Reduce::Sum)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        self.reduce(input, Reduce::Mean)
    }

    pub fn mean_square(&mut self, input: Var) -> Var {
        self.reduce(input, Reduce::MeanSquare)
    }

    /// `-mean ln(x)`, or `-mean ln(1 - x)` when `complement`; arguments are
    /// clamped to `[1e-7, 1 - 1e-7]`.
    pub fn neg_log_mean(&mut self, input: Var, complement: bool) -> Var {
        self.reduce(input, Reduce::NegLogMean { complement })
    }

    /// Mean over pixels of `-Σ_c p ln p` (with `0 ln 0 = 0`).
    pub fn entropy_channels(&mut self, probs: Var) -> Var {
        self.reduce(probs, Reduce::Entropy)
    }

    /// Anisotropic total variation: mean |horizontal differences| plus mean
    /// |vertical differences|.
    pub fn total_variation(&mut self, input: Var) -> Var {
        self.reduce(input, Reduce::TotalVariation)
    }

    /// Mean squared difference between two arrays of equal shape.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mse", self.value(a), self.value(b))?;
        let d = self.sub(a, b)?;
        Ok(self.mean_square(d))
    }

    /// Mean over (c, h, w) of each sample, giving `B x 1 x 1 x 1`.
    pub fn mean_per_sample(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.shape();
        let data = (0..s.n())
            .map(|n| (x.sample(n).iter().map(|&v| v as f64).sum::<f64>() / s.sample_len() as f64) as f32)
            .collect();
        let out = Tensor::from_vec(Shape::new(s.n(), 1, 1, 1), data).expect("one value per sample");
        self.push_op(out, SampleMean { inputs: [input] })
    }

    /// Non-overlapping box average over `factor x factor` blocks. Extents
    /// must be divisible by `factor`.
    pub fn avg_pool(&mut self, input: Var, factor: usize) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if factor == 0 || s.h() % factor != 0 || s.w() % factor != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("extents of {s} not divisible by {factor}"),
            ));
        }
        let out = box_average(x, factor);
        Ok(self.push_op(out, AvgPool { inputs: [input], factor }))
    }
}

pub(crate) fn box_average(x: &Tensor, factor: usize) -> Tensor {
    let s = x.shape();
    let f = factor;
    let norm = 1.0 / (f * f) as f32;
    Tensor::from_fn(Shape::new(s.n(), s.c(), s.h() / f, s.w() / f), |n, c, h, w| {
        let mut acc = 0.0f32;
        for dy in 0..f {
            for dx in 0..f {
                acc += x.at(n, c, h * f + dy, w * f + dx);
            }
        }
        acc * norm
    })
}
