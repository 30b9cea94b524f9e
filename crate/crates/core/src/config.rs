//! One run configuration with flat dotted keys (`unet.depth`, `train.lr`,
//! ...), read from TOML and overridable key by key.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use toml::{Table, Value};

use crate::adversary::{AdvKind, CorrespondenceKind, DiscConfig, LossConfig};
use crate::error::{Error, Result};
use crate::generator::UnetConfig;
use crate::template_memory::TileMode;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryConfig {
    pub n: usize,
    pub mode: TileMode,
    /// Bank extents during training; 0 takes the largest content extent.
    pub height: usize,
    pub width: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            n: 4,
            mode: TileMode::Mirror,
            height: 0,
            width: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub content: Vec<PathBuf>,
    pub style: Vec<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            content: Vec::new(),
            style: Vec::new(),
            output: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    /// Chunk core extent in pixels; 0 runs the whole image at once.
    pub chunk: usize,
}

#[allow(clippy::derivable_impls)]
impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { chunk: 0 }
    }
}

/// Name of the correspondence map; its parameters live in separate keys so
/// switching kinds keeps them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CorrespondenceName {
    GaussianGrey,
    DownsampleGrey,
    LearnedReconstruction,
}

impl FromStr for CorrespondenceName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_grey" => Ok(Self::GaussianGrey),
            "downsample_grey" => Ok(Self::DownsampleGrey),
            "learned_reconstruction" => Ok(Self::LearnedReconstruction),
            other => Err(Error::Config(format!(
                "unknown correspondence {other:?} (gaussian_grey|downsample_grey|learned_reconstruction)"
            ))),
        }
    }
}

impl CorrespondenceName {
    fn as_str(self) -> &'static str {
        match self {
            Self::GaussianGrey => "gaussian_grey",
            Self::DownsampleGrey => "downsample_grey",
            Self::LearnedReconstruction => "learned_reconstruction",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub unet: UnetConfig,
    pub disc: DiscConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub memory: MemoryConfig,
    pub paths: Paths,
    pub infer: InferConfig,
    correspondence: CorrespondenceName,
    sigma: f32,
    factor: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let memory = MemoryConfig::default();
        RunConfig {
            unet: UnetConfig {
                templates: memory.n,
                ..UnetConfig::default()
            },
            disc: DiscConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            memory,
            paths: Paths::default(),
            infer: InferConfig::default(),
            correspondence: CorrespondenceName::GaussianGrey,
            sigma: 2.0,
            factor: 4,
        }
    }
}

/// Every key with its documentation, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("unet.depth", "encoder/decoder stages; patches must be multiples of 2^depth"),
    ("unet.base_channels", "channels of the first encoder stage (doubling up to 8x)"),
    ("unet.kernel", "convolution kernel size (odd)"),
    ("unet.noise_channels", "spatially constant noise channels"),
    ("unet.noise_site", "where noise enters: input | bottleneck | both"),
    ("unet.coord_injection", "concatenate the pooled coordinate field before every encoder stage"),
    ("unet.blend", "learned | parametric (alpha = 1) | memory (alpha = 0)"),
    ("disc.layers", "stride-2 discriminator layers"),
    ("disc.kernel", "discriminator kernel size (odd)"),
    ("disc.base_channels", "channels of the first discriminator layer"),
    ("loss.kind", "adversarial loss: dcgan | wgan_gp"),
    ("loss.gp_weight", "gradient penalty weight (wgan_gp)"),
    ("loss.lambda", "content loss weight"),
    ("loss.correspondence", "gaussian_grey | downsample_grey | learned_reconstruction"),
    ("loss.sigma", "blur sigma of gaussian_grey"),
    ("loss.factor", "downsampling factor of downsample_grey"),
    ("loss.w_ent_a", "weight of the mixture entropy"),
    ("loss.w_tv_a", "weight of the mixture total variation"),
    ("loss.w_norm_alpha", "weight of the mean squared blend mask"),
    ("loss.w_tv_alpha", "weight of the blend mask total variation"),
    ("loss.ent_ramp_steps", "steps over which the entropy weight ramps up from 0"),
    ("train.patch", "training patch extent"),
    ("train.batch", "minibatch size"),
    ("train.lr", "Adam learning rate"),
    ("train.beta1", "Adam beta1"),
    ("train.beta2", "Adam beta2"),
    ("train.steps", "generator updates"),
    ("train.crop_mode", "aligned | independent memory crops"),
    ("train.snapshot_every", "steps between probe snapshots; 0 disables"),
    ("train.checkpoint_every", "steps between checkpoints; 0 writes only the final one"),
    ("train.seed", "master seed"),
    ("train.d_steps", "discriminator updates per generator update; 0 picks 1 for dcgan, 5 for wgan_gp"),
    ("train.max_retries", "rollback retries after a non-finite step before giving up"),
    ("memory.n", "number of templates; 0 disables the memory"),
    ("memory.mode", "template tiling: wrap | mirror"),
    ("memory.height", "bank rows during training; 0 uses the largest content height"),
    ("memory.width", "bank columns during training; 0 uses the largest content width"),
    ("paths.content", "content images (comma separated)"),
    ("paths.style", "style images (comma separated)"),
    ("paths.output", "output directory"),
    ("infer.chunk", "chunk core extent for inference; 0 runs the whole image"),
];

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {raw:?}: {e}")))
}

fn path_list(raw: &str) -> Vec<PathBuf> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
}

fn join_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

fn int(v: impl TryInto<i64>) -> Value {
    Value::Integer(v.try_into().unwrap_or(i64::MAX))
}

fn float(v: f32) -> Value {
    // through the shortest decimal so 2e-4 stays 2e-4 in the file
    Value::Float(v.to_string().parse().expect("f32 prints as a float"))
}

fn text(v: impl Display) -> Value {
    Value::String(v.to_string())
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "unet.depth" => self.unet.depth = parse(key, raw)?,
            "unet.base_channels" => self.unet.base_channels = parse(key, raw)?,
            "unet.kernel" => self.unet.kernel = parse(key, raw)?,
            "unet.noise_channels" => self.unet.noise_channels = parse(key, raw)?,
            "unet.noise_site" => self.unet.noise_site = parse(key, raw)?,
            "unet.coord_injection" => self.unet.coord_injection = parse(key, raw)?,
            "unet.blend" => self.unet.blend = parse(key, raw)?,
            "disc.layers" => self.disc.layers = parse(key, raw)?,
            "disc.kernel" => self.disc.kernel = parse(key, raw)?,
            "disc.base_channels" => self.disc.base_channels = parse(key, raw)?,
            "loss.kind" => self.disc.kind = parse::<AdvKind>(key, raw)?,
            "loss.gp_weight" => self.disc.gp_weight = parse(key, raw)?,
            "loss.lambda" => self.loss.lambda = parse(key, raw)?,
            "loss.correspondence" => self.correspondence = parse(key, raw)?,
            "loss.sigma" => self.sigma = parse(key, raw)?,
            "loss.factor" => self.factor = parse(key, raw)?,
            "loss.w_ent_a" => self.loss.w_ent_a = parse(key, raw)?,
            "loss.w_tv_a" => self.loss.w_tv_a = parse(key, raw)?,
            "loss.w_norm_alpha" => self.loss.w_norm_alpha = parse(key, raw)?,
            "loss.w_tv_alpha" => self.loss.w_tv_alpha = parse(key, raw)?,
            "loss.ent_ramp_steps" => self.loss.ent_ramp_steps = parse(key, raw)?,
            "train.patch" => self.train.patch = parse(key, raw)?,
            "train.batch" => self.train.batch = parse(key, raw)?,
            "train.lr" => self.train.lr = parse(key, raw)?,
            "train.beta1" => self.train.beta1 = parse(key, raw)?,
            "train.beta2" => self.train.beta2 = parse(key, raw)?,
            "train.steps" => self.train.steps = parse(key, raw)?,
            "train.crop_mode" => self.train.crop_mode = parse(key, raw)?,
            "train.snapshot_every" => self.train.snapshot_every = parse(key, raw)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, raw)?,
            "train.seed" => self.train.seed = parse(key, raw)?,
            "train.d_steps" => self.train.d_steps = parse(key, raw)?,
            "train.max_retries" => self.train.max_retries = parse(key, raw)?,
            "memory.n" => {
                self.memory.n = parse(key, raw)?;
                self.unet.templates = self.memory.n;
            }
            "memory.mode" => self.memory.mode = parse(key, raw)?,
            "memory.height" => self.memory.height = parse(key, raw)?,
            "memory.width" => self.memory.width = parse(key, raw)?,
            "paths.content" => self.paths.content = path_list(raw),
            "paths.style" => self.paths.style = path_list(raw),
            "paths.output" => self.paths.output = PathBuf::from(raw.trim()),
            "infer.chunk" => self.infer.chunk = parse(key, raw)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        self.loss.correspondence = match self.correspondence {
            CorrespondenceName::GaussianGrey => CorrespondenceKind::GaussianGrey { sigma: self.sigma },
            CorrespondenceName::DownsampleGrey => CorrespondenceKind::DownsampleGrey { factor: self.factor },
            CorrespondenceName::LearnedReconstruction => CorrespondenceKind::LearnedReconstruction,
        };
        Ok(())
    }

    /// Current value of a key as TOML.
    pub fn get(&self, key: &str) -> Result<Value> {
        Ok(match key {
            "unet.depth" => int(self.unet.depth),
            "unet.base_channels" => int(self.unet.base_channels),
            "unet.kernel" => int(self.unet.kernel),
            "unet.noise_channels" => int(self.unet.noise_channels),
            "unet.noise_site" => text(self.unet.noise_site),
            "unet.coord_injection" => Value::Boolean(self.unet.coord_injection),
            "unet.blend" => text(self.unet.blend),
            "disc.layers" => int(self.disc.layers),
            "disc.kernel" => int(self.disc.kernel),
            "disc.base_channels" => int(self.disc.base_channels),
            "loss.kind" => text(self.disc.kind),
            "loss.gp_weight" => float(self.disc.gp_weight),
            "loss.lambda" => float(self.loss.lambda),
            "loss.correspondence" => text(self.correspondence.as_str()),
            "loss.sigma" => float(self.sigma),
            "loss.factor" => int(self.factor),
            "loss.w_ent_a" => float(self.loss.w_ent_a),
            "loss.w_tv_a" => float(self.loss.w_tv_a),
            "loss.w_norm_alpha" => float(self.loss.w_norm_alpha),
            "loss.w_tv_alpha" => float(self.loss.w_tv_alpha),
            "loss.ent_ramp_steps" => int(self.loss.ent_ramp_steps),
            "train.patch" => int(self.train.patch),
            "train.batch" => int(self.train.batch),
            "train.lr" => float(self.train.lr),
            "train.beta1" => float(self.train.beta1),
            "train.beta2" => float(self.train.beta2),
            "train.steps" => int(self.train.steps),
            "train.crop_mode" => text(self.train.crop_mode),
            "train.snapshot_every" => int(self.train.snapshot_every),
            "train.checkpoint_every" => int(self.train.checkpoint_every),
            // seeds may exceed i64, so they travel as text
            "train.seed" => text(self.train.seed),
            "train.d_steps" => int(self.train.d_steps),
            "train.max_retries" => int(self.train.max_retries),
            "memory.n" => int(self.memory.n),
            "memory.mode" => text(self.memory.mode),
            "memory.height" => int(self.memory.height),
            "memory.width" => int(self.memory.width),
            "paths.content" => text(join_paths(&self.paths.content)),
            "paths.style" => text(join_paths(&self.paths.style)),
            "paths.output" => text(self.paths.output.display()),
            "infer.chunk" => int(self.infer.chunk),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        })
    }

    /// Apply every key of a TOML document (sections of scalar values) on
    /// top of the current values.
    pub fn merge_toml(&mut self, source: &str) -> Result<()> {
        let table: Table = source
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("malformed config: {e}")))?;
        for (section, body) in &table {
            let Value::Table(body) = body else {
                return Err(Error::Config(format!("unknown key {section:?}; keys live in sections like [train]")));
            };
            for (name, value) in body {
                let key = format!("{section}.{name}");
                let raw = match value {
                    Value::String(s) => s.clone(),
                    Value::Array(items) => items
                        .iter()
                        .map(|v| v.as_str().map(str::to_owned).unwrap_or_else(|| v.to_string()))
                        .collect::<Vec<_>>()
                        .join(","),
                    Value::Table(_) => return Err(Error::Config(format!("{key}: nested tables are not allowed"))),
                    other => other.to_string(),
                };
                self.set(&key, &raw)?;
            }
        }
        Ok(())
    }

    pub fn from_toml(source: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_toml(source)?;
        Ok(cfg)
    }

    /// The full configuration, every key present.
    pub fn to_toml(&self) -> String {
        let mut root = Table::new();
        for (key, _) in KEYS {
            let (section, name) = key.split_once('.').expect("dotted key");
            let entry = root
                .entry(section)
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("sections are tables");
            entry.insert(name.to_owned(), self.get(key).expect("registered key"));
        }
        toml::to_string(&root).expect("plain tables serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.disc.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.unet.templates != self.memory.n {
            return Err(Error::Config(format!(
                "unet templates {} differ from memory.n {}",
                self.unet.templates, self.memory.n
            )));
        }
        let p = self.train.patch;
        let a = self.unet.alignment();
        if p % a != 0 {
            return Err(Error::Config(format!(
                "train.patch {p} must be a multiple of 2^unet.depth = {a}; try {}",
                p.div_ceil(a) * a
            )));
        }
        if p < self.disc.min_extent() {
            return Err(Error::Config(format!(
                "train.patch {p} is below the discriminator's minimum {}",
                self.disc.min_extent()
            )));
        }
        if let CorrespondenceName::GaussianGrey = self.correspondence {
            if !(self.sigma > 0.0 && self.sigma.is_finite()) {
                return Err(Error::Config(format!("loss.sigma must be positive, got {}", self.sigma)));
            }
        }
        if let CorrespondenceName::DownsampleGrey = self.correspondence {
            if self.factor == 0 || p % self.factor != 0 {
                return Err(Error::Config(format!(
                    "loss.factor {} must be positive and divide train.patch {p}",
                    self.factor
                )));
            }
        }
        Ok(())
    }

    /// Discriminator updates per generator update after resolving 0.
    pub fn d_steps(&self) -> usize {
        if self.train.d_steps == 0 {
            self.disc.kind.default_d_steps()
        } else {
            self.train.d_steps
        }
    }
}
