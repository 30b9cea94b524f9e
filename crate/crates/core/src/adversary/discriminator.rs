use super::AdvKind;
use crate::error::{Error, Result};
use crate::nn::{Conv, Norm, Phase};
use crate::substrate::{ParamStore, RngState, Tape, Var};
use crate::tensor::{Shape, Tensor};

const SLOPE: f32 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscConfig {
    pub layers: usize,
    pub kernel: usize,
    pub base_channels: usize,
    pub kind: AdvKind,
    pub gp_weight: f32,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            layers: 4,
            kernel: 5,
            base_channels: 32,
            kind: AdvKind::Dcgan,
            gp_weight: 10.0,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config(format!("discriminator needs at least 2 layers, got {}", self.layers)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("discriminator kernel must be odd, got {}", self.kernel)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("discriminator base_channels must be positive".into()));
        }
        if !(self.gp_weight >= 0.0 && self.gp_weight.is_finite()) {
            return Err(Error::Config(format!("gp_weight must be finite and non-negative, got {}", self.gp_weight)));
        }
        Ok(())
    }

    /// Smallest patch extent giving at least one score.
    pub fn min_extent(&self) -> usize {
        1 << self.layers
    }
}

#[derive(Clone, Debug)]
struct Layer {
    conv: Conv,
    norm: Option<Norm>,
}

/// Stack of stride-2 convolutions producing a grid of patch scores.
/// Batch norm is used on inner layers of the DCGAN discriminator only; the
/// WGAN-GP critic stays piecewise linear in its input.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscConfig,
    store: ParamStore,
    layers: Vec<Layer>,
}

impl Discriminator {
    pub fn new(cfg: DiscConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut cin = 3;
        for i in 0..cfg.layers {
            let last = i + 1 == cfg.layers;
            let cout = if last { 1 } else { cfg.base_channels << i.min(3) };
            let with_norm = !last && i > 0 && cfg.kind == AdvKind::Dcgan;
            let name = format!("disc{i}");
            let conv = Conv::new(&mut store, rng, &name, cin, cout, cfg.kernel, 2, !with_norm);
            let norm = with_norm.then(|| Norm::new(&mut store, rng, &format!("{name}.norm"), cout));
            layers.push(Layer { conv, norm });
            cin = cout;
        }
        Ok(Discriminator { cfg, store, layers })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, s: Shape) -> Result<()> {
        let m = self.cfg.min_extent();
        if s.c() != 3 || s.h() < m || s.w() < m {
            return Err(Error::shape(
                "disc_forward",
                format!("needs RGB patches of at least {m}x{m}, got {s}"),
            ));
        }
        Ok(())
    }

    /// Score map: probabilities for DCGAN, raw critic values for WGAN-GP.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, phase: Phase) -> Result<Var> {
        self.check(tape.shape(x))?;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.conv.forward(tape, &self.store, h)?;
            if let Some(norm) = &layer.norm {
                h = norm.forward(tape, &mut self.store, h, phase)?;
            }
            if i < last {
                h = tape.leaky_relu(h, SLOPE);
            }
        }
        Ok(match self.cfg.kind {
            AdvKind::Dcgan => tape.sigmoid(h),
            AdvKind::WganGp => h,
        })
    }

    /// Gradient of each sample's mean critic score with respect to that
    /// sample, at `x` (`B x 3 x H x W`). WGAN-GP critics only.
    pub fn input_gradient(&mut self, x: &Tensor) -> Result<Tensor> {
        self.require_critic("input_gradient")?;
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let scores = self.forward(&mut tape, xv, Phase::Train)?;
        let per_sample = tape.mean_per_sample(scores);
        let total = tape.sum(per_sample);
        tape.backward(total)?;
        Ok(tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
    }

    fn require_critic(&self, op: &'static str) -> Result<()> {
        if self.cfg.kind != AdvKind::WganGp {
            return Err(Error::invalid(op, "only defined for the WGAN-GP critic"));
        }
        Ok(())
    }

    /// Directional derivative of each sample's mean critic score along
    /// `direction`, at `x`, as a `B x 1 x 1 x 1` tape value that is
    /// differentiable in the critic parameters.
    ///
    /// The critic is piecewise linear in its input, so along a fixed
    /// direction the derivative is a product of the convolution weights and
    /// the (locally constant) activation slopes at `x`. Pushing the tangent
    /// through that product keeps the parameter dependence on the tape.
    pub fn directional_derivative(&mut self, tape: &mut Tape, x: &Tensor, direction: &Tensor) -> Result<Var> {
        self.require_critic("directional_derivative")?;
        if x.shape() != direction.shape() {
            return Err(Error::shape("directional_derivative", format!("{} vs {}", x.shape(), direction.shape())));
        }
        self.check(x.shape())?;
        let mut primal = x.clone();
        let mut tangent = tape.constant(direction.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(&self.store, layer.conv.weight);
            tangent = tape.conv2d(tangent, w, None, layer.conv.stride, crate::substrate::Padding::Zero)?;
            if i < last {
                // pre-activation of the primal pass picks each unit's slope
                let mut scratch = Tape::new();
                let pv = scratch.constant(primal);
                let pre = layer.conv.forward(&mut scratch, &self.store, pv)?;
                let pre = scratch.value(pre).clone();
                let slopes = tape.constant(pre.map(|v| if v > 0.0 { 1.0 } else { SLOPE }));
                tangent = tape.mul(tangent, slopes)?;
                primal = pre.map(|v| if v > 0.0 { v } else { SLOPE * v });
            }
        }
        Ok(tape.mean_per_sample(tangent))
    }

    /// Gradient penalty `gp_weight · mean_i (‖∇ D(x̂_i)‖ − 1)²` at the given
    /// interpolates, differentiable in the critic parameters. Also returns
    /// the gradient norms.
    pub fn gradient_penalty(&mut self, tape: &mut Tape, interpolates: &Tensor) -> Result<(Var, Vec<f32>)> {
        let g = self.input_gradient(interpolates)?;
        let s = g.shape();
        let mut direction = Tensor::zeros(s);
        let mut norms = Vec::with_capacity(s.n());
        for b in 0..s.n() {
            let n = g.sample(b).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if !n.is_finite() {
                return Err(Error::NonFinite(format!("critic gradient norm of sample {b} is {n}")));
            }
            norms.push(n as f32);
            if n > 0.0 {
                for (d, &v) in direction.sample_mut(b).iter_mut().zip(g.sample(b)) {
                    *d = (v as f64 / n) as f32;
                }
            }
        }
        let slope = self.directional_derivative(tape, interpolates, &direction)?;
        let shifted = tape.affine(slope, 1.0, -1.0);
        let penalty = tape.mean_square(shifted);
        Ok((tape.scale(penalty, self.cfg.gp_weight), norms))
    }
}
