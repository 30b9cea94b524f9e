//! Alternating generator/discriminator optimization, collapse monitoring,
//! probe snapshots, metrics and checkpoints.

mod checkpoint;
mod sampling;

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::RngCore;

pub use checkpoint::{Checkpoint, Entry, Payload, MAGIC, VERSION};
pub use sampling::{sample_batch, Batch, CropMode, Memory};

use crate::adversary::{
    dcgan_d_loss, dcgan_g_loss, regularizers, total_generator_loss, wgan_d_loss, wgan_g_loss, AdvKind,
    CorrespondenceMap, Discriminator, LossParts,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::generator::{entropy_map, Generator, GeneratorInput, GeneratorMaps};
use crate::image_ops::{save_image, Image};
use crate::nn::Phase;
use crate::substrate::{Adam, ParamStore, RngState, Tape};
use crate::template_memory::{build_memory, MemoryBank};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub patch: usize,
    pub batch: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub steps: u64,
    pub crop_mode: CropMode,
    /// 0 disables snapshots.
    pub snapshot_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Discriminator updates per generator update; 0 picks the loss
    /// family's default.
    pub d_steps: usize,
    pub max_retries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch: 64,
            batch: 4,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            steps: 1000,
            crop_mode: CropMode::Aligned,
            snapshot_every: 100,
            checkpoint_every: 0,
            seed: 0,
            d_steps: 0,
            max_retries: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if self.patch == 0 {
            return Err(Error::Config("train.patch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Steps before a uniformly mixed Ã counts as collapse.
pub const COLLAPSE_WARMUP: u64 = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Healthy,
    /// Ã is (nearly) one-hot.
    CollapseLow,
    /// Ã stays (nearly) uniform.
    CollapseHigh,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Healthy => "healthy",
            Verdict::CollapseLow => "collapse_low",
            Verdict::CollapseHigh => "collapse_high",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    pub mean_entropy: f64,
    /// Mean of Ã over batch and space, per template.
    pub usage: Vec<f64>,
    pub verdict: Verdict,
}

/// Entropy and usage statistics of a softmax mixture `B x N x H x W` at
/// training step `step`.
pub fn monitor_collapse(mixture: Option<&Tensor>, step: u64) -> CollapseReport {
    let Some(m) = mixture.filter(|m| m.shape().c() > 1) else {
        return CollapseReport {
            mean_entropy: 0.0,
            usage: mixture.map(|_| vec![1.0]).unwrap_or_default(),
            verdict: Verdict::Healthy,
        };
    };
    let s = m.shape();
    let n = s.c();
    let count = (s.n() * s.plane()) as f64;
    let mut usage = vec![0.0f64; n];
    for b in 0..s.n() {
        for (k, u) in usage.iter_mut().enumerate() {
            let base = (b * n + k) * s.plane();
            *u += m.data()[base..base + s.plane()].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    usage.iter_mut().for_each(|u| *u /= count);
    let mean_entropy = entropy_map(m).mean();
    let ln_n = (n as f64).ln();
    let verdict = if mean_entropy < 0.05 * ln_n {
        Verdict::CollapseLow
    } else if step > COLLAPSE_WARMUP && mean_entropy > 0.9 * ln_n {
        Verdict::CollapseHigh
    } else {
        Verdict::Healthy
    };
    CollapseReport {
        mean_entropy,
        usage,
        verdict,
    }
}

/// Losses and collapse statistics of one completed step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// Number of generator updates done, counting this one.
    pub step: u64,
    /// Mean discriminator loss over this step's discriminator updates.
    pub loss_d: f32,
    pub loss_g_adv: f32,
    pub content: f32,
    pub ent_a: f32,
    pub tv_a: f32,
    pub norm_alpha: f32,
    pub tv_alpha: f32,
    pub collapse: CollapseReport,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss_D,loss_G_adv,content,ent_A,tv_A,norm_alpha,tv_alpha";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_d,
            self.loss_g_adv,
            self.content,
            self.ent_a,
            self.tv_a,
            self.norm_alpha,
            self.tv_alpha
        )
    }
}

/// Independent random streams derived from the master seed, in a fixed
/// order so every consumer can rebuild its own.
struct Streams {
    bank: RngState,
    init: RngState,
    probe: RngState,
    train: RngState,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut master = RngState::new(seed);
        Streams {
            bank: master.fork(),
            init: master.fork(),
            probe: master.fork(),
            train: master.fork(),
        }
    }
}

/// Bank extents for training: configured, or the largest content extents.
pub fn memory_extent(run: &RunConfig, contents: &[Image]) -> (usize, usize) {
    let h = if run.memory.height > 0 {
        run.memory.height
    } else {
        contents.iter().map(Image::height).max().unwrap_or(0)
    };
    let w = if run.memory.width > 0 {
        run.memory.width
    } else {
        contents.iter().map(Image::width).max().unwrap_or(0)
    };
    (h, w)
}

/// The run's template bank at `extent`. Offsets and style choices depend
/// only on the seed, so training and inference banks agree.
pub fn build_bank(run: &RunConfig, styles: &[Image], extent: (usize, usize)) -> Result<Option<MemoryBank>> {
    if run.memory.n == 0 {
        return Ok(None);
    }
    let mut rng = Streams::new(run.train.seed).bank;
    build_memory(styles, run.memory.n, extent, run.memory.mode, &mut rng).map(Some)
}

/// Networks of a run, initialized from its seed.
pub fn build_networks(run: &RunConfig) -> Result<(Generator, Discriminator, CorrespondenceMap)> {
    let mut rng = Streams::new(run.train.seed).init;
    let gen = Generator::new(run.unet.clone(), &mut rng)?;
    let disc = Discriminator::new(run.disc.clone(), &mut rng)?;
    let corr = CorrespondenceMap::new(run.loss.correspondence, &mut rng)?;
    Ok((gen, disc, corr))
}

/// Fixed inputs rendered at every snapshot.
#[derive(Clone, Debug)]
struct Probe {
    content: Tensor,
    templates: Option<Tensor>,
    coords: Tensor,
    noise: Tensor,
}

pub struct Trainer {
    run: RunConfig,
    contents: Vec<Image>,
    styles: Vec<Image>,
    memory: Memory,
    gen: Generator,
    disc: Discriminator,
    corr: CorrespondenceMap,
    adam: Adam,
    probe: Probe,
    rng: RngState,
    step: u64,
    rollbacks: u64,
}

struct Saved {
    gen: ParamStore,
    disc: ParamStore,
    rec: Option<ParamStore>,
    rng: RngState,
}

fn restore_store(store: &mut ParamStore, saved: &ParamStore) {
    store.copy_state_from(saved);
    store.set_frozen(false);
}

impl Trainer {
    pub fn new(run: RunConfig, contents: Vec<Image>, styles: Vec<Image>) -> Result<Self> {
        run.validate()?;
        if contents.is_empty() {
            return Err(Error::Config("no content images".into()));
        }
        if styles.is_empty() {
            return Err(Error::Config("no style images".into()));
        }
        let contents: Vec<Image> = contents.iter().map(Image::to_rgb).collect();
        let styles: Vec<Image> = styles.iter().map(Image::to_rgb).collect();
        let extent = memory_extent(&run, &contents);
        if run.train.crop_mode == CropMode::Aligned {
            if let Some((i, c)) = contents
                .iter()
                .enumerate()
                .find(|(_, c)| c.height() > extent.0 || c.width() > extent.1)
            {
                return Err(Error::Config(format!(
                    "memory {}x{} does not cover content image {i} ({}x{}) for aligned crops",
                    extent.0,
                    extent.1,
                    c.height(),
                    c.width()
                )));
            }
        }
        let mut streams = Streams::new(run.train.seed);
        let bank = build_bank(&run, &styles, extent)?;
        let memory = Memory::new(bank, extent);
        let (gen, disc, corr) = build_networks(&run)?;
        let t = &run.train;
        let adam = Adam::new(t.lr, t.beta1, t.beta2);
        let pb = sample_batch(&contents, &styles, &memory, t.patch, 1, t.crop_mode, &mut streams.probe)?;
        let probe = Probe {
            content: pb.content,
            templates: pb.templates,
            coords: pb.coords,
            noise: gen.draw_noise(1, &mut streams.probe),
        };
        Ok(Trainer {
            run,
            contents,
            styles,
            memory,
            gen,
            disc,
            corr,
            adam,
            probe,
            rng: streams.train,
            step: 0,
            rollbacks: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.run
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn generator_mut(&mut self) -> &mut Generator {
        &mut self.gen
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn rng(&self) -> &RngState {
        &self.rng
    }

    /// Non-finite attempts rolled back since construction.
    pub fn rollbacks(&self) -> u64 {
        self.rollbacks
    }

    fn save(&self) -> Saved {
        Saved {
            gen: self.gen.store().clone(),
            disc: self.disc.store().clone(),
            rec: self.corr.store().cloned(),
            rng: self.rng.clone(),
        }
    }

    fn restore(&mut self, saved: &Saved) {
        restore_store(self.gen.store_mut(), &saved.gen);
        restore_store(self.disc.store_mut(), &saved.disc);
        if let (Some(store), Some(s)) = (self.corr.store_mut(), saved.rec.as_ref()) {
            restore_store(store, s);
        }
        self.rng = saved.rng.clone();
    }

    /// One generator update preceded by the configured discriminator
    /// updates. A non-finite loss, gradient or parameter rolls every network
    /// and the random stream back to the pre-step state; the step is retried
    /// on a different draw up to `max_retries` times.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let saved = self.save();
        let retries = self.run.train.max_retries;
        for attempt in 0..=retries {
            match self.try_step() {
                Ok(metrics) => {
                    self.step += 1;
                    return Ok(metrics);
                }
                Err(Error::NonFinite(what)) => {
                    log::warn!(
                        "step {}: non-finite {what}; rolled back (attempt {}/{})",
                        self.step + 1,
                        attempt + 1,
                        retries + 1
                    );
                    self.restore(&saved);
                    self.rollbacks += 1;
                    for _ in 0..=attempt {
                        self.rng.next_u64();
                    }
                    if attempt == retries {
                        return Err(Error::Divergence(format!(
                            "step {} stayed non-finite after {retries} retries (last: {what})",
                            self.step + 1
                        )));
                    }
                }
                Err(e) => {
                    self.restore(&saved);
                    return Err(e);
                }
            }
        }
        unreachable!("the last attempt returns")
    }

    fn inputs<'a>(batch: &'a Batch, noise: &'a Tensor) -> GeneratorInput<'a> {
        GeneratorInput {
            content: &batch.content,
            coords: &batch.coords,
            templates: batch.templates.as_ref(),
            noise,
        }
    }

    fn try_step(&mut self) -> Result<StepMetrics> {
        let t = self.run.train.clone();
        let d_steps = self.run.d_steps();
        let mut loss_d = 0.0f64;
        let mut last = None;
        for k in 0..d_steps {
            let batch = sample_batch(
                &self.contents,
                &self.styles,
                &self.memory,
                t.patch,
                t.batch,
                t.crop_mode,
                &mut self.rng,
            )?;
            let noise = self.gen.draw_noise(t.batch, &mut self.rng);
            // only the fakes of the last round feed the generator update
            let keep = k + 1 == d_steps;
            let mut tape = Tape::new();
            self.gen.store_mut().set_frozen(!keep);
            let out = self.gen.generate(&mut tape, &Self::inputs(&batch, &noise), Phase::Train);
            self.gen.store_mut().set_frozen(false);
            let out = out?;
            let fake = tape.value(out.image).clone();
            if !fake.all_finite() {
                return Err(Error::NonFinite("generator output".into()));
            }
            loss_d += self.update_discriminator(&batch.style, &fake)? as f64;
            if keep {
                last = Some((tape, out, batch));
            }
        }
        let (mut tape, out, batch) = last.expect("at least one discriminator round");

        self.disc.store_mut().set_frozen(true);
        let scores = self.disc.forward(&mut tape, out.image, Phase::Train);
        self.disc.store_mut().set_frozen(false);
        let scores = scores?;
        let adv = match self.run.disc.kind {
            AdvKind::Dcgan => dcgan_g_loss(&mut tape, scores),
            AdvKind::WganGp => wgan_g_loss(&mut tape, scores),
        };
        let content = tape.constant(batch.content.clone());
        let content = self.corr.content_loss(&mut tape, content, out.image)?;
        let reg = regularizers(&mut tape, out.mixture, out.alpha);
        let parts = LossParts { adv, content, reg };
        let total = total_generator_loss(&mut tape, &parts, &self.run.loss, self.step)?;
        tape.backward(total)?;
        let gen = self.gen.store_mut();
        gen.zero_grad();
        tape.flush_grads(gen);
        self.adam.step(gen)?;
        if !gen.all_finite() {
            return Err(Error::NonFinite("generator parameters".into()));
        }
        if let Some(rec) = self.corr.store_mut() {
            rec.zero_grad();
            tape.flush_grads(rec);
            self.adam.step(rec)?;
            if !rec.all_finite() {
                return Err(Error::NonFinite("reconstruction parameters".into()));
            }
        }
        let value = |v| tape.value(v).item();
        let collapse = monitor_collapse(out.mixture.map(|m| tape.value(m)), self.step + 1);
        Ok(StepMetrics {
            step: self.step + 1,
            loss_d: (loss_d / d_steps as f64) as f32,
            loss_g_adv: value(parts.adv),
            content: value(parts.content),
            ent_a: value(parts.reg.ent_a),
            tv_a: value(parts.reg.tv_a),
            norm_alpha: value(parts.reg.norm_alpha),
            tv_alpha: value(parts.reg.tv_alpha),
            collapse,
        })
    }

    fn update_discriminator(&mut self, real: &Tensor, fake: &Tensor) -> Result<f32> {
        let mut tape = Tape::new();
        let r = tape.constant(real.clone());
        let f = tape.constant(fake.clone());
        let sr = self.disc.forward(&mut tape, r, Phase::Train)?;
        let sf = self.disc.forward(&mut tape, f, Phase::Train)?;
        let loss = match self.run.disc.kind {
            AdvKind::Dcgan => dcgan_d_loss(&mut tape, sr, sf)?,
            AdvKind::WganGp => {
                let s = real.shape();
                let eps: Vec<f32> = (0..s.n()).map(|_| self.rng.uniform() as f32).collect();
                let mix = Tensor::from_fn(s, |n, c, h, w| {
                    eps[n] * real.at(n, c, h, w) + (1.0 - eps[n]) * fake.at(n, c, h, w)
                });
                let (penalty, _) = self.disc.gradient_penalty(&mut tape, &mix)?;
                wgan_d_loss(&mut tape, sr, sf, Some(penalty))?
            }
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss_D is {value}")));
        }
        tape.backward(loss)?;
        let store = self.disc.store_mut();
        store.zero_grad();
        tape.flush_grads(store);
        self.adam.step(store)?;
        if !store.all_finite() {
            return Err(Error::NonFinite("discriminator parameters".into()));
        }
        Ok(value)
    }

    /// Eval-mode maps of the fixed probe inputs.
    pub fn probe_maps(&mut self) -> Result<GeneratorMaps> {
        let p = &self.probe;
        let input = GeneratorInput {
            content: &p.content,
            coords: &p.coords,
            templates: p.templates.as_ref(),
            noise: &p.noise,
        };
        let mut tape = Tape::new();
        self.gen.store_mut().set_frozen(true);
        let out = self.gen.generate(&mut tape, &input, Phase::Eval);
        self.gen.store_mut().set_frozen(false);
        Ok(out?.maps(&tape))
    }

    /// Write `snap_{step:08}_{kind}.png` for the image, memory image,
    /// parametric image, blend mask and mixture entropy of the probe.
    pub fn snapshot(&mut self, dir: &Path) -> Result<()> {
        let maps = self.probe_maps()?;
        for (kind, image) in snapshot_images(&maps, self.run.memory.n)? {
            save_image(&image, dir.join(format!("snap_{:08}_{kind}.png", self.step)))?;
        }
        Ok(())
    }

    fn snapshot_logged(&mut self, dir: &Path) {
        if let Err(e) = self.snapshot(dir) {
            log::error!("snapshot at step {} failed: {e}", self.step);
        }
    }

    /// Full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_text("config", &self.run.to_toml());
        c.push_u64s("step", &[self.step]);
        c.push_u64s("rng", &[self.rng.seed(), self.rng.counter()]);
        c.push_store("gen", self.gen.store());
        c.push_store("disc", self.disc.store());
        if let Some(rec) = self.corr.store() {
            c.push_store("rec", rec);
        }
        c
    }

    /// Continue from a checkpoint of the same run.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let saved = self.save();
        let result = (|| {
            ckpt.load_store("gen", self.gen.store_mut())?;
            ckpt.load_store("disc", self.disc.store_mut())?;
            if let Some(rec) = self.corr.store_mut() {
                ckpt.load_store("rec", rec)?;
            }
            let rng = ckpt.u64s("rng")?;
            let [seed, counter] = rng else {
                return Err(Error::Checkpoint(format!("rng: expected 2 values, found {}", rng.len())));
            };
            let step = ckpt.u64s("step")?;
            let [step] = step else {
                return Err(Error::Checkpoint(format!("step: expected 1 value, found {}", step.len())));
            };
            self.rng = RngState::from_parts(*seed, *counter);
            self.step = *step;
            Ok(())
        })();
        if result.is_err() {
            self.restore(&saved);
        }
        result
    }

    /// Train until `self.step() == until`. With an output directory, append
    /// metrics to `metrics.csv`, write snapshots and checkpoints there.
    pub fn fit(
        &mut self,
        until: u64,
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut csv = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(open_metrics(&dir.join("metrics.csv"), self.step == 0)?)
            }
            None => None,
        };
        let every = self.run.train.snapshot_every;
        if let Some(dir) = out {
            if self.step == 0 && every > 0 {
                self.snapshot_logged(dir);
            }
        }
        let mut all = Vec::new();
        while self.step < until {
            let m = self.train_step()?;
            on_step(&m);
            if let (Some(dir), Some(file)) = (out, csv.as_mut()) {
                let path = dir.join("metrics.csv");
                writeln!(file, "{}", m.csv_row()).map_err(|e| Error::io(&path, e))?;
                if every > 0 && self.step % every == 0 {
                    self.snapshot_logged(dir);
                }
                let ce = self.run.train.checkpoint_every;
                if ce > 0 && self.step % ce == 0 {
                    self.checkpoint().save(&dir.join("checkpoint.famo"))?;
                }
            }
            all.push(m);
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("checkpoint.famo"))?;
        }
        Ok(all)
    }
}

fn open_metrics(path: &Path, fresh: bool) -> Result<File> {
    if fresh || !path.exists() {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", StepMetrics::CSV_HEADER).map_err(|e| Error::io(path, e))?;
        Ok(f)
    } else {
        OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
    }
}

/// Displayable versions of the decomposition: `(kind, image)` for image,
/// memory, parametric, alpha and entropy (scaled so ln N is white).
pub fn snapshot_images(maps: &GeneratorMaps, n: usize) -> Result<Vec<(&'static str, Image)>> {
    let alpha = maps.alpha.map(|a| 2.0 * a - 1.0);
    let entropy = match &maps.mixture {
        Some(m) if n > 1 => {
            let ln_n = (n as f32).ln();
            entropy_map(m).map(|e| 2.0 * e / ln_n - 1.0)
        }
        _ => Tensor::full(maps.alpha.shape(), -1.0),
    };
    Ok(vec![
        ("image", Image::from_tensor(&maps.image, 0)?),
        ("memory", Image::from_tensor(&maps.memory, 0)?),
        ("parametric", Image::from_tensor(&maps.parametric, 0)?),
        ("alpha", Image::from_tensor(&alpha, 0)?),
        ("entropy", Image::from_tensor(&entropy, 0)?),
    ])
}

/// Run configuration stored in a checkpoint.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    RunConfig::from_toml(ckpt.text("config")?)
}

#[cfg(test)]
mod tests;
