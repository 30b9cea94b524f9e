//! Layer building blocks shared by the generator, the discriminator and the
//! learned correspondence map.

use crate::error::Result;
use crate::substrate::{BatchNormStats, Init, NormMode, ParamId, ParamStore, Padding, RngState, Tape, Var};
use crate::tensor::Shape;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f32 = 0.02;
/// Running-statistics momentum of every batch-norm layer.
pub const NORM_MOMENTUM: f32 = 0.1;

/// Whether batch-norm layers use and update batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    /// Nearest-neighbour upsampling factor applied before the convolution.
    pub upsample: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Shape::new(cout, cin, kernel, kernel), Init::Normal(INIT_STD), rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Shape::new(1, cout, 1, 1), Init::Constant(0.0), rng));
        Conv {
            weight,
            bias,
            stride,
            upsample: 1,
        }
    }

    pub fn upsampling(mut self, factor: usize) -> Self {
        self.upsample = factor;
        self
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        if self.upsample > 1 {
            tape.upsample_conv(x, w, b, self.upsample)
        } else {
            tape.conv2d(x, w, b, self.stride, Padding::Zero)
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub stats: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, rng: &mut RngState, name: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        Norm {
            scale: store.add(format!("{name}.scale"), shape, Init::Constant(1.0), rng),
            shift: store.add(format!("{name}.shift"), shape, Init::Constant(0.0), rng),
            stats: store.add_buffer(format!("{name}.running"), BatchNormStats::init(channels)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, phase: Phase) -> Result<Var> {
        let scale = tape.param(store, self.scale);
        let shift = tape.param(store, self.shift);
        match phase {
            Phase::Train => tape.batch_norm(
                x,
                scale,
                shift,
                NormMode::Train {
                    running: store.buffer_mut(self.stats),
                    momentum: NORM_MOMENTUM,
                },
            ),
            Phase::Eval => tape.batch_norm(x, scale, shift, NormMode::Eval { running: store.buffer(self.stats) }),
        }
    }
}
