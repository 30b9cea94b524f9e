use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image_ops::Image;
use crate::substrate::RngState;
use crate::template_memory::{CoordField, MemoryBank};
use crate::tensor::{Shape, Tensor};

/// How memory crops relate to content crops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// The memory crop sits at the content crop's coordinates.
    Aligned,
    /// Memory crop coordinates are drawn separately.
    Independent,
}

impl fmt::Display for CropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CropMode::Aligned => "aligned",
            CropMode::Independent => "independent",
        })
    }
}

impl FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(CropMode::Aligned),
            "independent" => Ok(CropMode::Independent),
            other => Err(Error::Config(format!("unknown crop mode {other:?} (aligned|independent)"))),
        }
    }
}

/// The memory as seen by the sampler: templates (absent when N = 0) and the
/// global coordinate field.
#[derive(Clone, Debug)]
pub struct Memory {
    bank: Option<MemoryBank>,
    coords: CoordField,
}

impl Memory {
    pub fn new(bank: Option<MemoryBank>, extent: (usize, usize)) -> Self {
        let coords = match &bank {
            Some(b) => b.coords().clone(),
            None => CoordField::grid(extent.0, extent.1),
        };
        Memory { bank, coords }
    }

    pub fn bank(&self) -> Option<&MemoryBank> {
        self.bank.as_ref()
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.coords.height(), self.coords.width())
    }

    /// Template stack (when there is memory) and ψ of one window.
    pub fn crop(&self, top_left: (usize, usize), size: (usize, usize)) -> Result<(Option<Tensor>, Tensor)> {
        match &self.bank {
            Some(b) => {
                let (t, psi) = b.crop_with_coords(top_left, size)?;
                Ok((Some(t), psi.into_tensor()))
            }
            None => Ok((None, self.coords.crop(top_left.0, top_left.1, size.0, size.1)?.into_tensor())),
        }
    }
}

/// One training minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub content: Tensor,
    pub style: Tensor,
    pub templates: Option<Tensor>,
    pub coords: Tensor,
    /// (image index, row, col) of every content crop.
    pub content_at: Vec<(usize, usize, usize)>,
    pub style_at: Vec<(usize, usize, usize)>,
    /// (row, col) of every memory crop.
    pub memory_at: Vec<(usize, usize)>,
}

fn eligible(images: &[Image], patch: usize, what: &str) -> Result<Vec<usize>> {
    let ok: Vec<usize> = images
        .iter()
        .enumerate()
        .filter(|(i, img)| {
            let fits = img.height() >= patch && img.width() >= patch;
            if !fits {
                log::warn!(
                    "{what} image {i} ({}x{}) is smaller than the {patch}px patch; skipped",
                    img.height(),
                    img.width()
                );
            }
            fits
        })
        .map(|(i, _)| i)
        .collect();
    if ok.is_empty() {
        return Err(Error::Config(format!("no {what} image is at least {patch}x{patch}")));
    }
    Ok(ok)
}

fn draw_window(rng: &mut RngState, h: usize, w: usize, patch: usize) -> (usize, usize) {
    (rng.below(h - patch + 1), rng.below(w - patch + 1))
}

fn stack_crops(images: &[Image], at: &[(usize, usize, usize)], patch: usize) -> Result<Tensor> {
    let crops = at
        .iter()
        .map(|&(i, r, c)| Ok(images[i].to_rgb().crop(r, c, patch, patch)?.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&crops)
}

/// Uniform random crops of content, style and memory.
pub fn sample_batch(
    contents: &[Image],
    styles: &[Image],
    memory: &Memory,
    patch: usize,
    batch: usize,
    mode: CropMode,
    rng: &mut RngState,
) -> Result<Batch> {
    if batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    let content_ok = eligible(contents, patch, "content")?;
    let style_ok = eligible(styles, patch, "style")?;
    let (mh, mw) = memory.extent();
    if mh < patch || mw < patch {
        return Err(Error::Config(format!("memory {mh}x{mw} is smaller than the {patch}px patch")));
    }
    let mut content_at = Vec::with_capacity(batch);
    let mut style_at = Vec::with_capacity(batch);
    let mut memory_at = Vec::with_capacity(batch);
    for _ in 0..batch {
        let ci = content_ok[rng.below(content_ok.len())];
        let (r, c) = draw_window(rng, contents[ci].height(), contents[ci].width(), patch);
        content_at.push((ci, r, c));
        let si = style_ok[rng.below(style_ok.len())];
        let (sr, sc) = draw_window(rng, styles[si].height(), styles[si].width(), patch);
        style_at.push((si, sr, sc));
        memory_at.push(match mode {
            CropMode::Aligned => {
                if r + patch > mh || c + patch > mw {
                    return Err(Error::Config(format!(
                        "memory {mh}x{mw} does not cover content image {ci} for aligned crops"
                    )));
                }
                (r, c)
            }
            CropMode::Independent => draw_window(rng, mh, mw, patch),
        });
    }
    let content = stack_crops(contents, &content_at, patch)?;
    let style = stack_crops(styles, &style_at, patch)?;
    let mut templates = Vec::with_capacity(batch);
    let mut coords = Vec::with_capacity(batch);
    for &at in &memory_at {
        let (t, psi) = memory.crop(at, (patch, patch))?;
        templates.extend(t);
        coords.push(psi);
    }
    let templates = if templates.is_empty() {
        None
    } else {
        Some(Tensor::stack(&templates)?)
    };
    let coords = Tensor::stack(&coords)?;
    debug_assert_eq!(coords.shape(), Shape::new(batch, 2, patch, patch));
    Ok(Batch {
        content,
        style,
        templates,
        coords,
        content_at,
        style_at,
        memory_at,
    })
}
