use super::{Backward, Ctx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// How a convolution reads outside the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Mirror about the edge pixel without repeating it.
    Reflect,
}

/// `floor((extent + 2p - k) / stride) + 1` with `p = (k - 1) / 2`.
pub fn conv2d_output_extent(extent: usize, kernel: usize, stride: usize) -> usize {
    let p = (kernel - 1) / 2;
    (extent + 2 * p - kernel) / stride + 1
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Source index (or `None` for a zero pad) for each (kernel tap, output
/// position) pair along one axis.
fn axis_map(extent: usize, out: usize, k: usize, stride: usize, padding: Padding) -> Vec<Option<usize>> {
    let p = (k - 1) / 2;
    let mut map = Vec::with_capacity(k * out);
    for tap in 0..k {
        for o in 0..out {
            let i = (o * stride + tap) as isize - p as isize;
            let src = if i >= 0 && (i as usize) < extent {
                Some(i as usize)
            } else {
                match padding {
                    Padding::Zero => None,
                    Padding::Reflect => Some(reflect(i, extent)),
                }
            };
            map.push(src);
        }
    }
    map
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

impl Geometry {
    fn new(input: Shape, k: usize, stride: usize, padding: Padding) -> Self {
        let (h, w) = (input.h(), input.w());
        let ho = conv2d_output_extent(h, k, stride);
        let wo = conv2d_output_extent(w, k, stride);
        Geometry {
            cin: input.c(),
            h,
            w,
            k,
            ho,
            wo,
            rows: axis_map(h, ho, k, stride, padding),
            cols: axis_map(w, wo, k, stride, padding),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.ho == self.h && self.wo == self.w
    }

    /// Gather one sample into a `(cin*k*k) x (ho*wo)` column matrix.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        let plane = self.h * self.w;
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &x[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let d = &mut dst[oy * wo..(oy + 1) * wo];
                        match self.rows[ky * ho + oy] {
                            None => d.fill(0.0),
                            Some(iy) => {
                                let src = &xc[iy * self.w..(iy + 1) * self.w];
                                let cm = &self.cols[kx * wo..(kx + 1) * wo];
                                for (dv, ix) in d.iter_mut().zip(cm) {
                                    *dv = match ix {
                                        Some(ix) => src[*ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-add a column matrix back onto one sample.
    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        let plane = self.h * self.w;
        let mut row = 0;
        for c in 0..self.cin {
            let dc = &mut dx[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        if let Some(iy) = self.rows[ky * ho + oy] {
                            let s = &src[oy * wo..(oy + 1) * wo];
                            let cm = &self.cols[kx * wo..(kx + 1) * wo];
                            for (v, ix) in s.iter().zip(cm) {
                                if let Some(ix) = ix {
                                    dc[iy * self.w + ix] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = a · b + beta · c` on row-major slices; `a` is `m x k` (or its
/// transpose stored `k x m`), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the slices' extents, which
    // were checked against m, k, n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Conv2d {
    inputs: Vec<Var>,
    stride: usize,
    padding: Padding,
    has_bias: bool,
}

impl Backward for Conv2d {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = ctx.value(self.inputs[0]);
        let w = ctx.value(self.inputs[1]);
        let (cout, k) = (w.shape().n(), w.shape().h());
        let geo = Geometry::new(x.shape(), k, self.stride, self.padding);
        let kk = geo.cin * k * k;
        let hw = geo.ho * geo.wo;
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        let pointwise = geo.is_pointwise();
        let mut cols = vec![0.0; if pointwise { 0 } else { kk * hw }];
        let mut dcols = vec![0.0; if dx.is_some() { kk * hw } else { 0 }];
        for n in 0..x.shape().n() {
            let g = grad.sample(n);
            if let Some(dw) = dw.as_mut() {
                let cols_ref: &[f32] = if pointwise {
                    x.sample(n)
                } else {
                    geo.im2col(x.sample(n), &mut cols);
                    &cols
                };
                gemm(cout, hw, kk, g, false, cols_ref, true, 1.0, dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                if pointwise {
                    gemm(kk, cout, hw, w.data(), true, g, false, 1.0, dx.sample_mut(n));
                } else {
                    gemm(kk, cout, hw, w.data(), true, g, false, 0.0, &mut dcols);
                    geo.col2im(&dcols, dx.sample_mut(n));
                }
            }
        }
        let mut out = vec![dx, dw];
        if self.has_bias {
            let db = needs[2].then(|| {
                let mut db = Tensor::zeros(Shape::new(1, cout, 1, 1));
                let plane = grad.shape().plane();
                for n in 0..grad.shape().n() {
                    let g = grad.sample(n);
                    for (co, d) in db.data_mut().iter_mut().enumerate() {
                        *d += g[co * plane..(co + 1) * plane].iter().sum::<f32>();
                    }
                }
                db
            });
            out.push(db);
        }
        out
    }
}

struct Upsample {
    inputs: [Var; 1],
    factor: usize,
}

impl Backward for Upsample {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = ctx.value(self.inputs[0]).shape();
        let f = self.factor;
        let mut dx = Tensor::zeros(s);
        for n in 0..s.n() {
            for c in 0..s.c() {
                for y in 0..s.h() * f {
                    for x in 0..s.w() * f {
                        *dx.at_mut(n, c, y / f, x / f) += grad.at(n, c, y, x);
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

impl Tape {
    /// 2-D convolution with "same"-style padding `p = (k-1)/2`.
    ///
    /// `kernel` is `cout x cin x k x k` with odd `k`; `bias`, when present,
    /// is `1 x cout x 1 x 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(kernel);
        if ws.h() != ws.w() || ws.h() % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ws} must be square with odd extent"),
            ));
        }
        if ws.c() != xs.c() {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs} has {} channels, kernel {ws} expects {}", xs.c(), ws.c()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let k = ws.h();
        let p = (k - 1) / 2;
        if xs.h() + 2 * p < k || xs.w() + 2 * p < k {
            return Err(Error::shape("conv2d", format!("input {xs} smaller than kernel {ws}")));
        }
        if padding == Padding::Reflect && (p >= xs.h() || p >= xs.w()) {
            return Err(Error::shape(
                "conv2d",
                format!("reflect padding {p} needs extents above it, got {xs}"),
            ));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != Shape::new(1, ws.n(), 1, 1) {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {bs} does not match kernel {ws}"),
                ));
            }
        }

        let geo = Geometry::new(xs, k, stride, padding);
        let cout = ws.n();
        let kk = geo.cin * k * k;
        let hw = geo.ho * geo.wo;
        let out_shape = Shape::new(xs.n(), cout, geo.ho, geo.wo);
        let mut out = Tensor::zeros(out_shape);
        {
            let x = self.value(input);
            let w = self.value(kernel);
            let pointwise = geo.is_pointwise();
            let mut cols = vec![0.0; if pointwise { 0 } else { kk * hw }];
            for n in 0..xs.n() {
                let cols_ref: &[f32] = if pointwise {
                    x.sample(n)
                } else {
                    geo.im2col(x.sample(n), &mut cols);
                    &cols
                };
                gemm(cout, kk, hw, w.data(), false, cols_ref, false, 0.0, out.sample_mut(n));
            }
            if let Some(b) = bias {
                let b = self.value(b).data().to_vec();
                for n in 0..xs.n() {
                    let o = out.sample_mut(n);
                    for (co, bv) in b.iter().enumerate() {
                        o[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
        }
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push_op(
            out,
            Conv2d {
                inputs,
                stride,
                padding,
                has_bias: bias.is_some(),
            },
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample", "factor must be positive"));
        }
        let s = self.shape(input);
        let f = factor;
        let x = self.value(input);
        let out = Tensor::from_fn(Shape::new(s.n(), s.c(), s.h() * f, s.w() * f), |n, c, y, xx| {
            x.at(n, c, y / f, xx / f)
        });
        Ok(self.push_op(
            out,
            Upsample {
                inputs: [input],
                factor,
            },
        ))
    }

    /// Nearest-neighbour upsample followed by a stride-1 zero-padded
    /// convolution.
    pub fn upsample_conv(&mut self, input: Var, kernel: Var, bias: Option<Var>, factor: usize) -> Result<Var> {
        if factor < 2 {
            return Err(Error::invalid(
                "upsample_conv",
                format!("factor must be at least 2, got {factor}"),
            ));
        }
        let up = self.upsample_nearest(input, factor)?;
        self.conv2d(up, kernel, bias, 1, Padding::Zero)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv2d_output_extent(160, 5, 2), 80);
        assert_eq!(conv2d_output_extent(7, 3, 1), 7);
        assert_eq!(conv2d_output_extent(7, 5, 2), 4);
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, h, w| (h * 3 + w) as f32);
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.conv2d(xv, k, Some(b), 1, Padding::Zero).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn constant_input_interior_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 1, 4, 4), 2.0));
        let k = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let y = tape.conv2d(x, k, None, 1, Padding::Zero).unwrap();
        let y = tape.value(y);
        assert_eq!(y.at(0, 0, 1, 1), 18.0);
        assert_eq!(y.at(0, 0, 2, 2), 18.0);
        // corner sees 4 of 9 taps
        assert_eq!(y.at(0, 0, 0, 0), 8.0);
    }

    #[test]
    fn reflect_padding_keeps_constants() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 1, 5, 5), 3.0));
        let k = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0 / 9.0));
        let y = tape.conv2d(x, k, None, 1, Padding::Reflect).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_channels_name_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let k = tape.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        let err = tape.conv2d(x, k, None, 1, Padding::Zero).unwrap_err().to_string();
        assert!(err.contains("1x2x4x4") && err.contains("1x3x3x3"), "{err}");
    }

    #[test]
    fn even_kernel_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        let k = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(tape.conv2d(x, k, None, 1, Padding::Zero).is_err());
    }

    #[test]
    fn upsample_identity_replicates_blocks() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let y = tape.upsample_conv(x, k, None, 2).unwrap();
        let y = tape.value(y);
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(y.at(0, 0, r, c), [1.0, 2.0, 3.0, 4.0][(r / 2) * 2 + c / 2]);
            }
        }
    }

    #[test]
    fn upsample_conv_constant_interior() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 0.7));
        let k = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0 / 9.0));
        let y = tape.upsample_conv(x, k, None, 2).unwrap();
        let y = tape.value(y);
        for r in 1..5 {
            for c in 1..5 {
                assert!((y.at(0, 0, r, c) - 0.7).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn upsample_factor_below_two_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let k = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(tape.upsample_conv(x, k, None, 1).is_err());
    }
}
