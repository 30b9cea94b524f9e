use super::{Backward, Ctx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Lower bound applied to per-channel variances before normalizing.
pub const VARIANCE_FLOOR: f32 = 1e-5;

/// Running statistics of one batch-norm layer, stored as a `2 x C x 1 x 1`
/// tensor (row 0 mean, row 1 variance) so it checkpoints like any array.
pub struct BatchNormStats;

impl BatchNormStats {
    pub fn init(channels: usize) -> Tensor {
        Tensor::from_fn(Shape::new(2, channels, 1, 1), |r, _, _, _| r as f32)
    }
}

/// Whether batch norm uses batch statistics (updating the running ones) or
/// the frozen running statistics.
pub enum NormMode<'a> {
    Train { running: &'a mut Tensor, momentum: f32 },
    Eval { running: &'a Tensor },
}

struct BatchNorm {
    inputs: [Var; 3],
    /// Normalized input x̂.
    xhat: Tensor,
    inv_std: Vec<f32>,
    /// Channels whose variance sat on the floor (statistics treated as
    /// constant w.r.t. the input in the variance term).
    floored: Vec<bool>,
    train: bool,
}

impl Backward for BatchNorm {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = grad.shape();
        let (nb, ch, plane) = (s.n(), s.c(), s.plane());
        let m = (nb * plane) as f32;
        let scale = ctx.value(self.inputs[1]).data();
        let mut dscale = vec![0.0f32; ch];
        let mut dshift = vec![0.0f32; ch];
        for n in 0..nb {
            for c in 0..ch {
                let base = (n * ch + c) * plane;
                let g = &grad.data()[base..base + plane];
                let xh = &self.xhat.data()[base..base + plane];
                dshift[c] += g.iter().sum::<f32>();
                dscale[c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(s);
            for c in 0..ch {
                let gamma = scale[c];
                let inv = self.inv_std[c];
                // Σ dx̂ and Σ dx̂·x̂ with dx̂ = g·γ
                let sum_d = dshift[c] * gamma;
                let sum_dx = dscale[c] * gamma;
                for n in 0..nb {
                    let base = (n * ch + c) * plane;
                    for i in base..base + plane {
                        let d = grad.data()[i] * gamma;
                        dx.data_mut()[i] = if !self.train {
                            d * inv
                        } else if self.floored[c] {
                            inv * (d - sum_d / m)
                        } else {
                            inv / m * (m * d - sum_d - self.xhat.data()[i] * sum_dx)
                        };
                    }
                }
            }
            dx
        });
        let shape = Shape::new(1, ch, 1, 1);
        vec![
            dx,
            needs[1].then(|| Tensor::from_vec(shape, dscale).unwrap()),
            needs[2].then(|| Tensor::from_vec(shape, dshift).unwrap()),
        ]
    }
}

impl Tape {
    /// Per-channel batch normalization with learned scale and shift
    /// (`1 x C x 1 x 1` each).
    pub fn batch_norm(&mut self, input: Var, scale: Var, shift: Var, mode: NormMode<'_>) -> Result<Var> {
        let s = self.shape(input);
        let ch = s.c();
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.shape(v) != Shape::new(1, ch, 1, 1) {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} {} for input {s}", self.shape(v)),
                ));
            }
        }
        let running_shape = Shape::new(2, ch, 1, 1);
        let plane = s.plane();
        let count = s.n() * plane;
        let x = self.value(input);
        let stats_shape = match &mode {
            NormMode::Train { running, .. } => running.shape(),
            NormMode::Eval { running } => running.shape(),
        };
        if stats_shape != running_shape {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats {stats_shape} for input {s}"),
            ));
        }
        let (mean, var, train) = match &mode {
            NormMode::Train { .. } => {
                if count < 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("train mode needs more than one value per channel, got {s}"),
                    ));
                }
                let mut mean = vec![0.0f64; ch];
                let mut var = vec![0.0f64; ch];
                for n in 0..s.n() {
                    for c in 0..ch {
                        let base = (n * ch + c) * plane;
                        mean[c] += x.data()[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for n in 0..s.n() {
                    for c in 0..ch {
                        let base = (n * ch + c) * plane;
                        var[c] += x.data()[base..base + plane]
                            .iter()
                            .map(|&v| (v as f64 - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (
                    mean.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
                    var.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
                    true,
                )
            }
            NormMode::Eval { running } => (
                running.data()[..ch].to_vec(),
                running.data()[ch..].to_vec(),
                false,
            ),
        };
        let floored: Vec<bool> = var.iter().map(|&v| v < VARIANCE_FLOOR).collect();
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / v.max(VARIANCE_FLOOR).sqrt()).collect();
        let gamma = self.value(scale).data().to_vec();
        let beta = self.value(shift).data().to_vec();
        let mut xhat = Tensor::zeros(s);
        let mut out = Tensor::zeros(s);
        for n in 0..s.n() {
            for c in 0..ch {
                let base = (n * ch + c) * plane;
                for i in base..base + plane {
                    let h = (x.data()[i] - mean[c]) * inv_std[c];
                    xhat.data_mut()[i] = h;
                    out.data_mut()[i] = gamma[c] * h + beta[c];
                }
            }
        }
        if let NormMode::Train { running, momentum } = mode {
            let unbias = count as f32 / (count as f32 - 1.0);
            let r = running.data_mut();
            for c in 0..ch {
                r[c] = (1.0 - momentum) * r[c] + momentum * mean[c];
                r[ch + c] = (1.0 - momentum) * r[ch + c] + momentum * var[c] * unbias;
            }
        }
        Ok(self.push_op(
            out,
            BatchNorm {
                inputs: [input, scale, shift],
                xhat,
                inv_std,
                floored,
                train,
            },
        ))
    }
}
