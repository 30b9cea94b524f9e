use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use famos_core::bench::{run_bench, to_csv, BenchPlan};
use famos_core::config::RunConfig;
use famos_core::image_ops::{load_image, save_image, Image};
use famos_core::inference::{infer_full, plan_chunks, sidecar, InferenceMaps};
use famos_core::trainer::{build_bank, build_networks, checkpoint_config, memory_extent, Checkpoint, Memory, Payload, Trainer};
use famos_core::{Error, Result, RngState, Tensor};

use crate::{Cli, Command, OUTPUT_ENV};

/// Defaults, then the output directory from the environment, then `base`
/// (a checkpoint's config when no file is given), the config file, and the
/// flag overrides.
fn resolve_config(file: Option<&Path>, base: Option<&RunConfig>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(dir) = std::env::var(OUTPUT_ENV) {
        if !dir.is_empty() {
            cfg.set("paths.output", &dir)?;
        }
    }
    match (file, base) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            cfg.merge_toml(&text)?;
        }
        (None, Some(base)) => cfg.merge_toml(&base.to_toml())?,
        (None, None) => {}
    }
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    Ok(cfg)
}

fn load_all(paths: &[PathBuf], what: &str) -> Result<Vec<Image>> {
    if paths.is_empty() {
        return Err(Error::Config(format!("paths.{what} is empty")));
    }
    paths.iter().map(load_image).collect()
}

pub fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Templates { out } => {
            let cfg = resolve_config(file, None, overrides)?;
            cfg.validate()?;
            templates(&cfg, out)
        }
        Command::Train { resume } => {
            let cfg = resolve_config(file, None, overrides)?;
            train(cfg, resume.as_deref())
        }
        Command::Infer {
            checkpoint,
            content,
            chunk,
            decompose,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let stored = checkpoint_config(&ckpt)?;
            let mut cfg = resolve_config(file, Some(&stored), overrides)?;
            if let Some(c) = chunk {
                cfg.set("infer.chunk", &c.to_string())?;
            }
            cfg.validate()?;
            infer(&cfg, &ckpt, content.as_deref(), decompose)
        }
        Command::Bench { out } => {
            let cfg = resolve_config(file, None, overrides)?;
            bench(&cfg, out.as_deref())
        }
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn templates(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    if cfg.memory.n == 0 {
        return Err(Error::Config("memory.n is 0; there are no templates to build".into()));
    }
    let styles = load_all(&cfg.paths.style, "style")?;
    let contents = cfg.paths.content.iter().map(load_image).collect::<Result<Vec<_>>>()?;
    let extent = memory_extent(cfg, &contents);
    if extent.0 == 0 || extent.1 == 0 {
        return Err(Error::Config(
            "template extents unknown: set memory.height and memory.width or give paths.content".into(),
        ));
    }
    let bank = build_bank(cfg, &styles, extent)?.expect("memory.n > 0");
    let dir = out.unwrap_or_else(|| cfg.paths.output.join("templates"));
    bank.export(&dir)?;
    println!("{} templates of {}x{} in {}", bank.len(), extent.0, extent.1, dir.display());
    Ok(())
}

fn train(cfg: RunConfig, resume: Option<&Path>) -> Result<()> {
    let contents = load_all(&cfg.paths.content, "content")?;
    let styles = load_all(&cfg.paths.style, "style")?;
    let out = cfg.paths.output.clone();
    let steps = cfg.train.steps;
    let mut trainer = Trainer::new(cfg, contents, styles)?;
    if let Some(path) = resume {
        trainer.resume(&Checkpoint::load(path)?)?;
        log::info!("resumed at step {}", trainer.step());
    }
    let start = Instant::now();
    let every = (steps / 20).max(1);
    let result = trainer.fit(steps, Some(&out), |m| {
        if m.step % every == 0 || m.step == steps {
            log::info!(
                "step {} loss_D {:.4} loss_G_adv {:.4} content {:.4} entropy {:.3} {} ({:.1}s)",
                m.step,
                m.loss_d,
                m.loss_g_adv,
                m.content,
                m.collapse.mean_entropy,
                m.collapse.verdict,
                start.elapsed().as_secs_f64()
            );
        }
    });
    if let Err(e @ Error::Divergence(_)) = result {
        // the trainer holds the last good state after a failed step
        let path = out.join("checkpoint.famo");
        trainer.checkpoint().save(&path)?;
        log::error!("last good state (step {}) saved to {}", trainer.step(), path.display());
        return Err(e);
    }
    result?;
    println!("trained to step {} in {}", trainer.step(), out.display());
    Ok(())
}

fn write(out: &Path, name: &str, t: &Tensor) -> Result<()> {
    save_image(&Image::from_tensor(t, 0)?, out.join(name))
}

fn infer(cfg: &RunConfig, ckpt: &Checkpoint, content: Option<&Path>, decompose: bool) -> Result<()> {
    let content_path = match content {
        Some(p) => p.to_path_buf(),
        None => cfg
            .paths
            .content
            .first()
            .cloned()
            .ok_or_else(|| Error::Config("no content image: pass --content or set paths.content".into()))?,
    };
    let image = load_image(&content_path)?;
    let (mut gen, _, _) = build_networks(cfg)?;
    ckpt.load_values("gen", gen.store_mut())?;
    let plan = plan_chunks((image.height(), image.width()), cfg.infer.chunk, gen.config())?;
    let bank = if cfg.memory.n > 0 {
        build_bank(cfg, &load_all(&cfg.paths.style, "style")?, plan.frame)?
    } else {
        None
    };
    let memory = Memory::new(bank, plan.frame);
    let mut rng = RngState::new(cfg.train.seed);
    let record = sidecar(&plan, &rng);
    let noise = gen.draw_noise(1, &mut rng);
    let result = infer_full(&mut gen, &image, &memory, &noise, &plan)?;
    let out = &cfg.paths.output;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let InferenceMaps {
        image,
        memory,
        parametric,
        alpha,
        entropy,
    } = &result.maps;
    write(out, "mosaic.png", image)?;
    if decompose {
        write(out, "memory.png", memory)?;
        write(out, "parametric.png", parametric)?;
        write(out, "alpha.png", &alpha.map(|a| 2.0 * a - 1.0))?;
        let ln_n = (cfg.memory.n.max(2) as f32).ln();
        write(out, "entropy.png", &entropy.map(|e| 2.0 * e / ln_n - 1.0))?;
    }
    let path = out.join("mosaic.plan.txt");
    fs::write(&path, record).map_err(|e| Error::Io { path, source: e })?;
    println!(
        "{} chunk(s), halo {}, peak tape {} bytes; wrote {}",
        plan.chunks.len(),
        plan.halo,
        result.peak_tape_bytes,
        out.join("mosaic.png").display()
    );
    Ok(())
}

fn bench(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let plan = BenchPlan {
        seed: cfg.train.seed,
        ..BenchPlan::default()
    };
    let csv = to_csv(&run_bench(&plan));
    print!("{csv}");
    if let Some(path) = out {
        fs::write(path, &csv).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    println!("{} entries", ckpt.entries().len());
    for e in ckpt.entries() {
        let (kind, detail) = match &e.payload {
            Payload::F32(_) => ("f32", format!("{:?}", e.extents)),
            Payload::U64(v) => ("u64", format!("{v:?}")),
            Payload::Text(t) => ("utf8", format!("{} bytes", t.len())),
        };
        println!("{:<40} {kind:<5} {detail}", e.name);
    }
    println!("\n[config]\n{}", ckpt.text("config")?);
    Ok(())
}
