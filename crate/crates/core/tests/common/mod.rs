//! Test-only finite-difference oracle.
//!
//! The oracle never asks the tape for a derivative: it perturbs one input
//! element at a time, re-runs the forward pass, and projects the output onto
//! a fixed random direction in f64.

#![allow(dead_code)]

pub mod grad_suite;

use famos_core::{RngState, Shape, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal, Uniform};

pub const EPS: f32 = 1e-3;

pub fn random_tensor(shape: Shape, rng: &mut RngState, scale: f32) -> Tensor {
    let d = Normal::new(0.0f32, scale).unwrap();
    Tensor::from_fn(shape, |_, _, _, _| d.sample(rng))
}

pub fn uniform_tensor(shape: Shape, rng: &mut RngState, lo: f32, hi: f32) -> Tensor {
    let d = Uniform::new(lo, hi).unwrap();
    Tensor::from_fn(shape, |_, _, _, _| d.sample(rng))
}

/// Values bounded away from zero, so pointwise kinks are not straddled by
/// a finite-difference step.
pub fn away_from_zero(shape: Shape, rng: &mut RngState, margin: f32) -> Tensor {
    let d = Uniform::new(margin, 1.0f32).unwrap();
    Tensor::from_fn(shape, |_, _, _, _| {
        let v = d.sample(rng);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    })
}

pub struct GradReport {
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖), per input.
    pub rel_err: Vec<f64>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

fn project(out: &Tensor, dir: &Tensor) -> f64 {
    out.data().iter().zip(dir.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Compare tape gradients of `<f(inputs), r>` with central differences.
///
/// `check[i]` selects which inputs are differentiated; `max_coords` bounds
/// how many elements per input are perturbed (chosen at random when the
/// input is larger).
pub fn grad_check<F>(inputs: &[Tensor], check: &[bool], seed: u64, max_coords: usize, mut f: F) -> GradReport
where
    F: FnMut(&mut Tape, &[Var]) -> Var,
{
    let mut rng = RngState::new(seed ^ 0x9e37_79b9);
    let eval = |f: &mut F, xs: &[Tensor]| -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).clone()
    };

    let probe = eval(&mut f, inputs);
    let dir = random_tensor(probe.shape(), &mut rng, 1.0);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(check)
        .map(|(x, &c)| if c { tape.input(x.clone()) } else { tape.constant(x.clone()) })
        .collect();
    let out = f(&mut tape, &vars);
    let d = tape.constant(dir.clone());
    let prod = tape.mul(out, d).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let mut rel_err = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        if !check[i] {
            continue;
        }
        let analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let coords: Vec<usize> = if x.len() <= max_coords {
            (0..x.len()).collect()
        } else {
            (0..max_coords).map(|_| rng.below(x.len())).collect()
        };
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for &j in &coords {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + EPS;
            let plus = project(&eval(&mut f, &xs), &dir);
            xs[i].data_mut()[j] = x.data()[j] - EPS;
            let minus = project(&eval(&mut f, &xs), &dir);
            // actual perturbation after f32 rounding
            let h = (x.data()[j] + EPS) as f64 - (x.data()[j] - EPS) as f64;
            let numeric = (plus - minus) / h;
            let a = analytic.data()[j] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-12);
        rel_err.push(diff2.sqrt() / denom);
    }
    GradReport { rel_err }
}

pub mod fixtures {
    use famos_core::config::RunConfig;
    use famos_core::generator::{GeneratorInput, GeneratorMaps};
    use famos_core::image_ops::Image;
    use famos_core::inference::{infer_full, ChunkPlan, Inference};
    use famos_core::nn::Phase;
    use famos_core::trainer::{build_bank, Memory, Trainer};
    use famos_core::{RngState, Tape};

    pub fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(1, h, w, |_, _, x| -1.0 + 2.0 * x as f32 / (w - 1) as f32).unwrap()
    }

    /// Two-colour checkerboard with squares of `period / 2` pixels.
    pub fn checker(h: usize, w: usize, period: usize) -> Image {
        Image::from_fn(3, h, w, |_, y, x| {
            if (y / (period / 2) + x / (period / 2)) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .unwrap()
    }

    /// Smooth greyscale content with structure along both axes.
    pub fn waves(h: usize, w: usize) -> Image {
        Image::from_fn(1, h, w, |_, y, x| {
            (0.11 * x as f32).sin() * 0.6 + (0.07 * y as f32 + 0.3).cos() * 0.4
        })
        .unwrap()
    }

    pub fn small_config(depth: usize, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        let depth = depth.to_string();
        let seed = seed.to_string();
        for (k, v) in [
            ("unet.depth", depth.as_str()),
            ("unet.base_channels", "4"),
            ("unet.noise_channels", "2"),
            ("disc.layers", "2"),
            ("disc.base_channels", "4"),
            ("memory.n", "3"),
            ("train.patch", "32"),
            ("train.batch", "2"),
            ("train.snapshot_every", "0"),
            ("train.seed", seed.as_str()),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    /// A generator after a few training steps, so batch-norm running
    /// statistics are no longer the identity.
    pub fn trained(cfg: RunConfig, steps: u64) -> Trainer {
        let mut t = Trainer::new(cfg, vec![ramp(48, 48)], vec![checker(40, 40, 8)]).unwrap();
        for _ in 0..steps {
            t.train_step().unwrap();
        }
        t
    }

    pub fn run(t: &mut Trainer, content: &Image, plan: &ChunkPlan, seed: u64) -> Inference {
        let styles = vec![checker(40, 40, 8)];
        let bank = build_bank(t.config(), &styles, plan.frame).unwrap();
        let memory = Memory::new(bank, plan.frame);
        let mut rng = RngState::new(seed);
        let noise = t.generator().draw_noise(1, &mut rng);
        infer_full(t.generator_mut(), content, &memory, &noise, plan).unwrap()
    }

    /// One eval forward over the whole reflect-padded frame, without the
    /// chunking machinery.
    pub fn direct(t: &mut Trainer, content: &Image, frame: (usize, usize), seed: u64) -> GeneratorMaps {
        let padded = content.to_rgb().pad_reflect_to(frame.0, frame.1).unwrap().to_tensor();
        let bank = build_bank(t.config(), &[checker(40, 40, 8)], frame).unwrap();
        let memory = Memory::new(bank, frame);
        let (templates, coords) = memory.crop((0, 0), frame).unwrap();
        let mut rng = RngState::new(seed);
        let noise = t.generator().draw_noise(1, &mut rng);
        let gen = t.generator_mut();
        gen.store_mut().set_frozen(true);
        let mut tape = Tape::new();
        let input = GeneratorInput {
            content: &padded,
            coords: &coords,
            templates: templates.as_ref(),
            noise: &noise,
        };
        let out = gen.generate(&mut tape, &input, Phase::Eval).unwrap();
        gen.store_mut().set_frozen(false);
        out.maps(&tape)
    }
}
