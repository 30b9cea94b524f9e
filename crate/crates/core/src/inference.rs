//! Chunked roll-out of a trained generator over images of any size.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::generator::{entropy_map, Generator, GeneratorInput, UnetConfig};
use crate::image_ops::Image;
use crate::nn::Phase;
use crate::substrate::{RngState, Tape};
use crate::tensor::{Shape, Tensor};
use crate::trainer::Memory;

/// Geometry of one layer on the path from input to output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeom {
    pub kernel: usize,
    pub stride: usize,
    /// Nearest-neighbour upsampling applied before the convolution.
    pub upsample: usize,
}

impl LayerGeom {
    pub fn conv(kernel: usize, stride: usize) -> Self {
        LayerGeom {
            kernel,
            stride,
            upsample: 1,
        }
    }

    pub fn up_conv(kernel: usize, factor: usize) -> Self {
        LayerGeom {
            kernel,
            stride: 1,
            upsample: factor,
        }
    }
}

/// Layers of the deepest input-to-output path of the U-Net.
pub fn unet_path(cfg: &UnetConfig) -> Vec<LayerGeom> {
    let k = cfg.kernel;
    let mut path = vec![LayerGeom::conv(k, 2); cfg.depth];
    path.extend(std::iter::repeat_n(LayerGeom::up_conv(k, 2), cfg.depth));
    path.push(LayerGeom::conv(k, 1));
    path
}

/// Receptive field by the recurrence `rf += (k-1) jump; jump *= stride`,
/// with upsampling dividing the jump.
pub fn receptive_field_of(path: &[LayerGeom]) -> usize {
    let mut rf = 1.0f64;
    let mut jump = 1.0f64;
    for l in path {
        jump /= l.upsample as f64;
        rf += (l.kernel - 1) as f64 * jump;
        jump *= l.stride as f64;
    }
    rf.ceil() as usize
}

pub fn receptive_field(cfg: &UnetConfig) -> usize {
    receptive_field_of(&unet_path(cfg))
}

/// Largest distance from an output pixel to an input pixel it depends on,
/// over every output phase. Nearest upsampling shifts the footprint off
/// centre, so this can exceed half the receptive field.
pub fn dependency_radius(cfg: &UnetConfig) -> usize {
    let path = unet_path(cfg);
    let period = cfg.alignment() as i64;
    let mut radius = 0i64;
    for o in 0..period {
        let (mut lo, mut hi) = (o, o);
        for l in path.iter().rev() {
            let r = (l.kernel / 2) as i64;
            let s = l.stride as i64;
            lo = lo * s - r;
            hi = hi * s + r;
            if l.upsample > 1 {
                let f = l.upsample as i64;
                lo = lo.div_euclid(f);
                hi = hi.div_euclid(f);
            }
        }
        radius = radius.max(o - lo).max(hi - o);
    }
    radius as usize
}

/// Axis-aligned window `[row, row+height) x [col, col+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Rect {
            row,
            col,
            height,
            width,
        }
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.row >= self.row
            && other.col >= self.col
            && other.row + other.height <= self.row + self.height
            && other.col + other.width <= self.col + self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    /// Window fed to the generator, in frame coordinates.
    pub source: Rect,
    /// Output pixels kept from this chunk, in image coordinates.
    pub core: Rect,
}

/// How an image is split for inference. The frame is the image padded by
/// reflection to the network alignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub image: (usize, usize),
    pub frame: (usize, usize),
    pub core: usize,
    pub halo: usize,
    pub chunks: Vec<Chunk>,
}

fn round_up(x: usize, a: usize) -> usize {
    x.div_ceil(a) * a
}

/// Halo for a configuration: at least half the receptive field and the
/// dependency radius, rounded up to the alignment.
pub fn halo(cfg: &UnetConfig) -> usize {
    let need = receptive_field(cfg).div_ceil(2).max(dependency_radius(cfg));
    round_up(need, cfg.alignment())
}

/// Split an image of `extent` (rows, cols) into cores of `core` pixels with
/// a halo; `core == 0` (or a core covering the image) gives one chunk.
pub fn plan_chunks(extent: (usize, usize), core: usize, cfg: &UnetConfig) -> Result<ChunkPlan> {
    let (h, w) = extent;
    if h == 0 || w == 0 {
        return Err(Error::invalid("plan_chunks", "empty image"));
    }
    let a = cfg.alignment();
    let frame = (round_up(h, a), round_up(w, a));
    let halo = halo(cfg);
    if core == 0 || (core >= frame.0 && core >= frame.1) {
        return Ok(ChunkPlan {
            image: extent,
            frame,
            core: frame.0.max(frame.1),
            halo,
            chunks: vec![Chunk {
                source: Rect::new(0, 0, frame.0, frame.1),
                core: Rect::new(0, 0, h, w),
            }],
        });
    }
    if core % a != 0 {
        let lower = core / a * a;
        let upper = lower + a;
        let hint = if lower > 0 {
            format!("{lower} or {upper}")
        } else {
            upper.to_string()
        };
        return Err(Error::Config(format!(
            "chunk core {core} is not a multiple of {a} (2^depth); nearest feasible: {hint}"
        )));
    }
    let mut chunks = Vec::new();
    for r in (0..frame.0).step_by(core) {
        for c in (0..frame.1).step_by(core) {
            let top = r.saturating_sub(halo);
            let left = c.saturating_sub(halo);
            let bottom = (r + core + halo).min(frame.0);
            let right = (c + core + halo).min(frame.1);
            chunks.push(Chunk {
                source: Rect::new(top, left, bottom - top, right - left),
                core: Rect::new(r, c, core.min(h - r), core.min(w - c)),
            });
        }
    }
    Ok(ChunkPlan {
        image: extent,
        frame,
        core,
        halo,
        chunks,
    })
}

impl ChunkPlan {
    /// Plan geometry as text, one chunk per line.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "image {} {}\nframe {} {}\ncore {}\nhalo {}\nchunks {}\n",
            self.image.0,
            self.image.1,
            self.frame.0,
            self.frame.1,
            self.core,
            self.halo,
            self.chunks.len()
        );
        for c in &self.chunks {
            let (s_, k) = (c.source, c.core);
            let _ = writeln!(
                s,
                "chunk source {} {} {} {} core {} {} {} {}",
                s_.row, s_.col, s_.height, s_.width, k.row, k.col, k.height, k.width
            );
        }
        s
    }
}

/// The five output maps, each `1 x C x H x W` at the image extents.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceMaps {
    pub image: Tensor,
    pub memory: Tensor,
    pub parametric: Tensor,
    pub alpha: Tensor,
    pub entropy: Tensor,
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub maps: InferenceMaps,
    /// Largest tape footprint of any chunk, in bytes.
    pub peak_tape_bytes: usize,
}

fn paste(dst: &mut Tensor, src: &Tensor, from: (usize, usize), to: (usize, usize), size: (usize, usize)) {
    for c in 0..src.shape().c() {
        for y in 0..size.0 {
            for x in 0..size.1 {
                *dst.at_mut(0, c, to.0 + y, to.1 + x) = src.at(0, c, from.0 + y, from.1 + x);
            }
        }
    }
}

/// Run the generator in eval mode chunk by chunk. `memory` must span the
/// plan's frame; `noise` (`1 x K x 1 x 1`) is shared by every chunk.
pub fn infer_full(
    gen: &mut Generator,
    content: &Image,
    memory: &Memory,
    noise: &Tensor,
    plan: &ChunkPlan,
) -> Result<Inference> {
    let (h, w) = plan.image;
    if (content.height(), content.width()) != (h, w) {
        return Err(Error::shape(
            "infer_full",
            format!("content {}x{} for a plan of {h}x{w}", content.height(), content.width()),
        ));
    }
    if memory.extent() != plan.frame {
        return Err(Error::shape(
            "infer_full",
            format!("memory {:?} for frame {:?}", memory.extent(), plan.frame),
        ));
    }
    let n = gen.config().templates;
    let frame = content.to_rgb().pad_reflect_to(plan.frame.0, plan.frame.1)?;
    let blank = |c| Tensor::zeros(Shape::new(1, c, h, w));
    let mut maps = InferenceMaps {
        image: blank(3),
        memory: blank(3),
        parametric: blank(3),
        alpha: blank(1),
        entropy: blank(1),
    };
    let mut peak = 0;
    gen.store_mut().set_frozen(true);
    let result = (|| {
        for chunk in &plan.chunks {
            let s = chunk.source;
            let patch = frame.crop(s.row, s.col, s.height, s.width)?.to_tensor();
            let (templates, coords) = memory.crop((s.row, s.col), (s.height, s.width))?;
            let input = GeneratorInput {
                content: &patch,
                coords: &coords,
                templates: templates.as_ref(),
                noise,
            };
            let mut tape = Tape::new();
            let out = gen.generate(&mut tape, &input, Phase::Eval)?;
            peak = peak.max(tape.value_bytes());
            let part = out.maps(&tape);
            let entropy = match &part.mixture {
                Some(m) if n > 1 => entropy_map(m),
                _ => Tensor::zeros(part.alpha.shape()),
            };
            let k = chunk.core;
            let from = (k.row - s.row, k.col - s.col);
            let to = (k.row, k.col);
            let size = (k.height, k.width);
            paste(&mut maps.image, &part.image, from, to, size);
            paste(&mut maps.memory, &part.memory, from, to, size);
            paste(&mut maps.parametric, &part.parametric, from, to, size);
            paste(&mut maps.alpha, &part.alpha, from, to, size);
            paste(&mut maps.entropy, &entropy, from, to, size);
        }
        Ok(())
    })();
    gen.store_mut().set_frozen(false);
    result?;
    for (name, t) in [("image", &maps.image), ("alpha", &maps.alpha)] {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("inferred {name}")));
        }
    }
    Ok(Inference {
        maps,
        peak_tape_bytes: peak,
    })
}

/// Replay record: plan geometry and the noise stream position.
pub fn sidecar(plan: &ChunkPlan, noise_rng: &RngState) -> String {
    format!(
        "{}rng seed {} counter {}\n",
        plan.describe(),
        noise_rng.seed(),
        noise_rng.counter()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(depth: usize, kernel: usize) -> UnetConfig {
        UnetConfig {
            depth,
            kernel,
            ..UnetConfig::default()
        }
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field_of(&[LayerGeom::conv(5, 1)]), 5);
        assert_eq!(receptive_field_of(&[LayerGeom::conv(5, 2), LayerGeom::conv(5, 1)]), 13);
        // hand recurrence: encoder 5, 13, 29, 61; decoder +32, +16, +8, +4; head +4
        assert_eq!(receptive_field(&cfg(4, 5)), 125);
        assert_eq!(receptive_field(&cfg(2, 5)), 29);
    }

    #[test]
    fn receptive_field_grows_with_depth() {
        for k in [3, 5, 7] {
            let rfs: Vec<usize> = (2..7).map(|d| receptive_field(&cfg(d, k))).collect();
            assert!(rfs.windows(2).all(|p| p[0] <= p[1]), "{rfs:?}");
        }
    }

    #[test]
    fn radius_covers_half_field() {
        for d in 2..6 {
            let c = cfg(d, 5);
            assert!(dependency_radius(&c) >= receptive_field(&c) / 2);
        }
    }

    #[test]
    fn small_image_single_chunk() {
        let p = plan_chunks((40, 50), 128, &cfg(2, 5)).unwrap();
        assert_eq!(p.chunks.len(), 1);
        assert_eq!(p.frame, (40, 52));
        assert_eq!(p.chunks[0].core, Rect::new(0, 0, 40, 50));
    }

    #[test]
    fn four_cores_with_clipped_windows() {
        let c = cfg(3, 5);
        let p = plan_chunks((256, 256), 128, &c).unwrap();
        assert_eq!(p.halo % 8, 0);
        assert!(p.halo < 128);
        assert_eq!(p.chunks.len(), 4);
        let h = p.halo;
        assert_eq!(p.chunks[0].source, Rect::new(0, 0, 128 + h, 128 + h));
        assert_eq!(p.chunks[3].source, Rect::new(128 - h, 128 - h, 128 + h, 128 + h));
    }

    #[test]
    fn infeasible_core_names_alternatives() {
        let err = plan_chunks((256, 256), 100, &cfg(4, 5)).unwrap_err().to_string();
        assert!(err.contains("96 or 112"), "{err}");
    }

    proptest! {
        #[test]
        fn cores_tile_the_image(h in 1usize..200, w in 1usize..200, k in 1usize..6) {
            let c = cfg(2, 5);
            let p = plan_chunks((h, w), 4 * k, &c).unwrap();
            let mut hits = vec![0u8; h * w];
            let frame = Rect::new(0, 0, p.frame.0, p.frame.1);
            for ch in &p.chunks {
                prop_assert!(frame.contains(&ch.source));
                prop_assert!(ch.source.contains(&ch.core));
                prop_assert_eq!(ch.source.row % 4, 0);
                prop_assert_eq!(ch.source.height % 4, 0);
                prop_assert_eq!(ch.source.width % 4, 0);
                for y in ch.core.row..ch.core.row + ch.core.height {
                    for x in ch.core.col..ch.core.col + ch.core.width {
                        hits[y * w + x] += 1;
                    }
                }
            }
            prop_assert!(hits.iter().all(|&n| n == 1));
        }
    }
}
