//! The U-Net generator, its output heads, template mixing and blending.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Conv, Norm, Phase};
use crate::substrate::{box_average, ParamStore, RngState, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Where spatially constant noise channels enter the U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseSite {
    Input,
    Bottleneck,
    Both,
}

impl NoiseSite {
    fn at_input(self) -> bool {
        matches!(self, NoiseSite::Input | NoiseSite::Both)
    }

    fn at_bottleneck(self) -> bool {
        matches!(self, NoiseSite::Bottleneck | NoiseSite::Both)
    }
}

impl fmt::Display for NoiseSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseSite::Input => "input",
            NoiseSite::Bottleneck => "bottleneck",
            NoiseSite::Both => "both",
        })
    }
}

impl FromStr for NoiseSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(NoiseSite::Input),
            "bottleneck" => Ok(NoiseSite::Bottleneck),
            "both" => Ok(NoiseSite::Both),
            other => Err(Error::Config(format!("unknown noise site {other:?} (input|bottleneck|both)"))),
        }
    }
}

/// How the blend mask is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlendMode {
    /// Predicted by the α head.
    Learned,
    /// α ≡ 1: the output is the parametric image.
    Parametric,
    /// α ≡ 0: the output is the memory image.
    Memory,
}

impl fmt::Display for BlendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlendMode::Learned => "learned",
            BlendMode::Parametric => "parametric",
            BlendMode::Memory => "memory",
        })
    }
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(BlendMode::Learned),
            "parametric" => Ok(BlendMode::Parametric),
            "memory" => Ok(BlendMode::Memory),
            other => Err(Error::Config(format!("unknown blend mode {other:?} (learned|parametric|memory)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub noise_channels: usize,
    pub noise_site: NoiseSite,
    pub coord_injection: bool,
    /// Number of memory templates N; 0 disables the memory.
    pub templates: usize,
    pub blend: BlendMode,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            depth: 4,
            base_channels: 32,
            kernel: 5,
            noise_channels: 8,
            noise_site: NoiseSite::Bottleneck,
            coord_injection: true,
            templates: 4,
            blend: BlendMode::Learned,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("unet depth must be at least 2, got {}", self.depth)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("unet kernel must be odd, got {}", self.kernel)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("unet base_channels must be positive".into()));
        }
        if self.templates == 0 && self.blend == BlendMode::Memory {
            return Err(Error::Config("blend mode memory needs at least one template".into()));
        }
        Ok(())
    }

    /// Patch extents must be multiples of this.
    pub fn alignment(&self) -> usize {
        1 << self.depth
    }

    /// Raw output channels: N mixture logits, α, and three image channels.
    pub fn output_channels(&self) -> usize {
        self.templates + 4
    }

    fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i.min(3)
    }

    fn input_noise(&self) -> usize {
        if self.noise_site.at_input() {
            self.noise_channels
        } else {
            0
        }
    }

    fn bottleneck_noise(&self) -> usize {
        if self.noise_site.at_bottleneck() {
            self.noise_channels
        } else {
            0
        }
    }

    /// Channels of the network input: content RGB, ψ, input noise.
    pub fn input_channels(&self) -> usize {
        5 + self.input_noise()
    }

    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let a = self.alignment();
        if h == 0 || w == 0 || h % a != 0 || w % a != 0 {
            let up = |x: usize| x.div_ceil(a).max(1) * a;
            return Err(Error::shape(
                "unet_forward",
                format!(
                    "patch {h}x{w} not divisible by {a} (depth {}); pad to {}x{}",
                    self.depth,
                    up(h),
                    up(w)
                ),
            ));
        }
        Ok(())
    }
}

/// Inputs of one generator call. All tensors share batch and spatial
/// extents; `noise` is `B x K x 1 x 1` and is broadcast spatially.
pub struct GeneratorInput<'a> {
    pub content: &'a Tensor,
    pub coords: &'a Tensor,
    /// `B x 3N x H x W`, absent when N = 0.
    pub templates: Option<&'a Tensor>,
    pub noise: &'a Tensor,
}

/// Every intermediate of a generator pass, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    /// Mixture logits `B x N x H x W` (absent when N = 0).
    pub logits: Option<Var>,
    /// Softmax mixture Ã.
    pub mixture: Option<Var>,
    pub alpha: Var,
    pub parametric: Var,
    pub memory: Var,
    pub image: Var,
}

/// Evaluated maps of a generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorMaps {
    pub mixture: Option<Tensor>,
    pub alpha: Tensor,
    pub parametric: Tensor,
    pub memory: Tensor,
    pub image: Tensor,
}

impl GeneratorOutput {
    pub fn maps(&self, tape: &Tape) -> GeneratorMaps {
        GeneratorMaps {
            mixture: self.mixture.map(|v| tape.value(v).clone()),
            alpha: tape.value(self.alpha).clone(),
            parametric: tape.value(self.parametric).clone(),
            memory: tape.value(self.memory).clone(),
            image: tape.value(self.image).clone(),
        }
    }
}

/// Per-pixel entropy `-Σ_n Ã ln Ã` of a `B x N x H x W` mixture, as
/// `B x 1 x H x W`.
pub fn entropy_map(mixture: &Tensor) -> Tensor {
    let s = mixture.shape();
    Tensor::from_fn(Shape::new(s.n(), 1, s.h(), s.w()), |b, _, y, x| {
        let mut e = 0.0f64;
        for n in 0..s.c() {
            let p = mixture.at(b, n, y, x) as f64;
            if p > 0.0 {
                e -= p * p.ln();
            }
        }
        e as f32
    })
}

/// Broadcast `B x K x 1 x 1` noise to `B x K x H x W`.
fn broadcast_noise(noise: &Tensor, channels: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(Shape::new(noise.shape().n(), channels, h, w), |b, c, _, _| noise.at(b, c, 0, 0))
}

/// Split raw U-Net output into mixture logits, α (sigmoid) and I_G (tanh).
pub fn split_heads(tape: &mut Tape, raw: Var, templates: usize) -> Result<(Option<Var>, Var, Var)> {
    let s = tape.shape(raw);
    if s.c() != templates + 4 {
        return Err(Error::shape(
            "split_heads",
            format!("expected {} channels for N = {templates}, got {s}", templates + 4),
        ));
    }
    let logits = if templates > 0 {
        Some(tape.slice_channels(raw, 0, templates)?)
    } else {
        None
    };
    let a = tape.slice_channels(raw, templates, 1)?;
    let alpha = tape.sigmoid(a);
    let g = tape.slice_channels(raw, templates + 1, 3)?;
    let parametric = tape.tanh(g);
    Ok((logits, alpha, parametric))
}

/// The heads, mixer and blend applied to raw U-Net output.
pub fn compose(
    tape: &mut Tape,
    raw: Var,
    templates: Option<&Tensor>,
    n: usize,
    blend: BlendMode,
) -> Result<GeneratorOutput> {
    let (logits, learned_alpha, parametric) = split_heads(tape, raw, n)?;
    let s = tape.shape(parametric);
    let mask = Shape::new(s.n(), 1, s.h(), s.w());
    let alpha = match blend {
        BlendMode::Learned => learned_alpha,
        BlendMode::Parametric => tape.constant(Tensor::full(mask, 1.0)),
        BlendMode::Memory => tape.constant(Tensor::zeros(mask)),
    };
    let Some(logits) = logits else {
        // no memory: the output is the parametric image
        let memory = tape.constant(Tensor::zeros(s));
        let alpha = tape.constant(Tensor::full(mask, 1.0));
        return Ok(GeneratorOutput {
            logits: None,
            mixture: None,
            alpha,
            parametric,
            memory,
            image: parametric,
        });
    };
    let templates = templates.ok_or_else(|| Error::invalid("generate", format!("N = {n} but no templates given")))?;
    let mixture = tape.softmax_channels(logits)?;
    let memory = tape.mix_templates(mixture, templates)?;
    let image = tape.blend(alpha, parametric, memory)?;
    Ok(GeneratorOutput {
        logits: Some(logits),
        mixture: Some(mixture),
        alpha,
        parametric,
        memory,
        image,
    })
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    norm: Norm,
}

/// U-Net with stride-2 encoder stages, upsample-convolution decoder stages
/// and concatenated skip connections.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: UnetConfig,
    store: ParamStore,
    encoder: Vec<Stage>,
    decoder: Vec<Stage>,
    head: Conv,
}

impl Generator {
    pub fn new(cfg: UnetConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let k = cfg.kernel;
        let coord = if cfg.coord_injection { 2 } else { 0 };
        let mut encoder = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let cin = if i == 0 {
                cfg.input_channels()
            } else {
                cfg.stage_channels(i - 1) + coord
            };
            let cout = cfg.stage_channels(i);
            let name = format!("enc{i}");
            encoder.push(Stage {
                conv: Conv::new(&mut store, rng, &name, cin, cout, k, 2, false),
                norm: Norm::new(&mut store, rng, &format!("{name}.norm"), cout),
            });
        }
        let mut decoder = Vec::with_capacity(cfg.depth);
        for j in 0..cfg.depth {
            let cin = if j == 0 {
                cfg.stage_channels(cfg.depth - 1) + cfg.bottleneck_noise()
            } else {
                2 * cfg.stage_channels(cfg.depth - 1 - j)
            };
            let cout = if j + 1 < cfg.depth {
                cfg.stage_channels(cfg.depth - 2 - j)
            } else {
                cfg.base_channels
            };
            let name = format!("dec{j}");
            decoder.push(Stage {
                conv: Conv::new(&mut store, rng, &name, cin, cout, k, 1, false).upsampling(2),
                norm: Norm::new(&mut store, rng, &format!("{name}.norm"), cout),
            });
        }
        let head = Conv::new(
            &mut store,
            rng,
            "head",
            cfg.base_channels + cfg.input_channels(),
            cfg.output_channels(),
            k,
            1,
            true,
        );
        Ok(Generator {
            cfg,
            store,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, input: &GeneratorInput<'_>) -> Result<Shape> {
        let s = input.content.shape();
        if s.c() != 3 {
            return Err(Error::shape("unet_forward", format!("content must be RGB, got {s}")));
        }
        self.cfg.check_extent(s.h(), s.w())?;
        let want = Shape::new(s.n(), 2, s.h(), s.w());
        if input.coords.shape() != want {
            return Err(Error::shape("unet_forward", format!("coords {} for content {s}", input.coords.shape())));
        }
        let want = Shape::new(s.n(), self.cfg.noise_channels, 1, 1);
        if input.noise.shape() != want {
            return Err(Error::shape("unet_forward", format!("noise {} expected {want}", input.noise.shape())));
        }
        Ok(s)
    }

    /// Raw `(N+4)`-channel output.
    pub fn unet_forward(&mut self, tape: &mut Tape, input: &GeneratorInput<'_>, phase: Phase) -> Result<Var> {
        let s = self.check_input(input)?;
        let (h, w) = (s.h(), s.w());
        let content = tape.constant(input.content.clone());
        let coords = tape.constant(input.coords.clone());
        let mut parts = vec![content, coords];
        if self.cfg.input_noise() > 0 {
            parts.push(tape.constant(broadcast_noise(input.noise, self.cfg.noise_channels, h, w)));
        }
        let x0 = tape.concat_channels(&parts)?;

        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut x = x0;
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 && self.cfg.coord_injection {
                let psi = tape.constant(box_average(input.coords, 1 << i));
                x = tape.concat_channels(&[x, psi])?;
            }
            let y = stage.conv.forward(tape, &self.store, x)?;
            let y = stage.norm.forward(tape, &mut self.store, y, phase)?;
            x = tape.leaky_relu(y, 0.2);
            skips.push(x);
        }
        if self.cfg.bottleneck_noise() > 0 {
            let d = 1 << self.cfg.depth;
            let noise = tape.constant(broadcast_noise(input.noise, self.cfg.noise_channels, h / d, w / d));
            x = tape.concat_channels(&[x, noise])?;
        }
        let depth = self.cfg.depth;
        for (j, stage) in self.decoder.iter().enumerate() {
            let y = stage.conv.forward(tape, &self.store, x)?;
            let y = stage.norm.forward(tape, &mut self.store, y, phase)?;
            let y = tape.relu(y);
            let skip = if j + 1 < depth { skips[depth - 2 - j] } else { x0 };
            x = tape.concat_channels(&[y, skip])?;
        }
        self.head.forward(tape, &self.store, x)
    }

    /// Full pass: U-Net, heads, softmax mixer, aligned template mixing and
    /// blending.
    pub fn generate(&mut self, tape: &mut Tape, input: &GeneratorInput<'_>, phase: Phase) -> Result<GeneratorOutput> {
        let n = self.cfg.templates;
        if n > 0 {
            let s = input.content.shape();
            let want = Shape::new(s.n(), 3 * n, s.h(), s.w());
            match input.templates {
                Some(t) if t.shape() == want => {}
                Some(t) => {
                    return Err(Error::shape("generate", format!("templates {} expected {want}", t.shape())));
                }
                None => return Err(Error::invalid("generate", format!("N = {n} but no templates given"))),
            }
        }
        let raw = self.unet_forward(tape, input, phase)?;
        compose(tape, raw, input.templates, n, self.cfg.blend)
    }

    /// Raw `B x K x 1 x 1` noise draw, standard normal.
    pub fn draw_noise(&self, batch: usize, rng: &mut RngState) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let k = self.cfg.noise_channels;
        let data = (0..batch * k).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::from_vec(Shape::new(batch, k, 1, 1), data).expect("sized by construction")
    }
}
