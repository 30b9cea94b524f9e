//! Non-parametric memory: style images tiled into templates under random
//! coordinate offsets, and coordinate-tracked cropping of those templates.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image_ops::{save_image, Image};
use crate::substrate::RngState;
use crate::tensor::{Shape, Tensor};

/// How coordinates outside `[-1, 1]` are folded back into it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TileMode {
    /// Period-2 modular reduction: `1 + e` becomes `-1 + e`.
    Wrap,
    /// Triangle-wave reflection: `1 + e` becomes `1 - e`.
    Mirror,
}

impl fmt::Display for TileMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TileMode::Wrap => "wrap",
            TileMode::Mirror => "mirror",
        })
    }
}

impl FromStr for TileMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wrap" => Ok(TileMode::Wrap),
            "mirror" => Ok(TileMode::Mirror),
            other => Err(Error::Config(format!("unknown tile mode {other:?} (wrap|mirror)"))),
        }
    }
}

/// Map any real coordinate into `[-1, 1]`. Values already inside are
/// returned unchanged in both modes.
pub fn fold_coordinate(c: f64, mode: TileMode) -> f64 {
    if (-1.0..=1.0).contains(&c) {
        return c;
    }
    match mode {
        TileMode::Wrap => (c + 1.0).rem_euclid(2.0) - 1.0,
        TileMode::Mirror => {
            let t = (c + 1.0).rem_euclid(4.0);
            if t <= 2.0 {
                t - 1.0
            } else {
                3.0 - t
            }
        }
    }
}

/// Per-pixel template coordinates, `1 x 2 x H x W`: channel 0 is the row
/// coordinate, channel 1 the column coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordField(Tensor);

impl CoordField {
    /// The regular grid spanning `[-1, 1]^2` at `h x w`: corners are exactly
    /// ±1 and spacing is uniform.
    pub fn grid(h: usize, w: usize) -> Self {
        CoordField(Tensor::from_fn(Shape::new(1, 2, h, w), |_, c, y, x| {
            if c == 0 {
                grid_coordinate(y, h) as f32
            } else {
                grid_coordinate(x, w) as f32
            }
        }))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n() != 1 || s.c() != 2 {
            return Err(Error::shape("coord_field", format!("expected 1x2xHxW, got {s}")));
        }
        Ok(CoordField(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape().h()
    }

    pub fn width(&self) -> usize {
        self.0.shape().w()
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<CoordField> {
        Ok(CoordField(self.0.crop(row, col, h, w)?))
    }
}

/// Coordinate of pixel `i` of `n` on a grid whose first and last pixel
/// centres sit at -1 and +1 (extended linearly past the ends).
fn grid_coordinate(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Continuous pixel position of a folded coordinate along an axis of `n`.
fn coordinate_to_pixel(c: f64, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let p = (c + 1.0) * 0.5 * (n - 1) as f64;
    let r = p.round();
    // land exactly on pixel centres despite rounding in the coordinates
    if (p - r).abs() < 1e-4 {
        r
    } else {
        p.clamp(0.0, (n - 1) as f64)
    }
}

/// Bilinear read of every channel at a (row, col) coordinate pair.
fn sample_bilinear(image: &Image, cy: f64, cx: f64, mode: TileMode, out: &mut [f32]) {
    let (h, w) = (image.height(), image.width());
    let py = coordinate_to_pixel(fold_coordinate(cy, mode), h);
    let px = coordinate_to_pixel(fold_coordinate(cx, mode), w);
    let (y0, x0) = (py.floor() as usize, px.floor() as usize);
    let (fy, fx) = ((py - y0 as f64) as f32, (px - x0 as f64) as f32);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    for (c, o) in out.iter_mut().enumerate() {
        let v00 = image.get(c, y0, x0);
        *o = if fy == 0.0 && fx == 0.0 {
            v00
        } else {
            let v01 = image.get(c, y0, x1);
            let v10 = image.get(c, y1, x0);
            let v11 = image.get(c, y1, x1);
            (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
        };
    }
}

/// Bilinear resampling of `image` at folded coordinates; output extents
/// are the coordinate field's.
pub fn grid_sample(image: &Image, coords: &CoordField, mode: TileMode) -> Result<Image> {
    let (h, w) = (coords.height(), coords.width());
    let ch = image.channels();
    let mut data = vec![0.0; ch * h * w];
    let mut px = vec![0.0; ch];
    let t = coords.tensor();
    for y in 0..h {
        for x in 0..w {
            sample_bilinear(image, t.at(0, 0, y, x) as f64, t.at(0, 1, y, x) as f64, mode, &mut px);
            for c in 0..ch {
                data[(c * h + y) * w + x] = px[c];
            }
        }
    }
    Image::new(ch, h, w, data)
}

/// Tile one style image into an `h x w` template shifted by `offset`
/// (row, col) in coordinate units. One style pixel spans one template
/// pixel.
pub fn tile_style(style: &Image, offset: (f64, f64), h: usize, w: usize, mode: TileMode) -> Result<Image> {
    let style = style.to_rgb();
    let (sh, sw) = (style.height(), style.width());
    let mut data = vec![0.0; 3 * h * w];
    let mut px = [0.0f32; 3];
    for y in 0..h {
        let cy = offset.0 + grid_coordinate(y, sh);
        for x in 0..w {
            let cx = offset.1 + grid_coordinate(x, sw);
            sample_bilinear(&style, cy, cx, mode, &mut px);
            for c in 0..3 {
                data[(c * h + y) * w + x] = px[c];
            }
        }
    }
    Image::new(3, h, w, data)
}

/// N tiled style templates of identical extents, with the global
/// coordinate field of the tiling. Immutable once built.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    templates: Vec<Image>,
    offsets: Vec<(f64, f64)>,
    sources: Vec<usize>,
    mode: TileMode,
    height: usize,
    width: usize,
    coords: CoordField,
}

impl MemoryBank {
    fn assemble(
        styles: &[Image],
        offsets: Vec<(f64, f64)>,
        sources: Vec<usize>,
        extent: (usize, usize),
        mode: TileMode,
    ) -> Result<Self> {
        let (height, width) = extent;
        let templates = offsets
            .iter()
            .zip(&sources)
            .map(|(&off, &s)| {
                let style = styles.get(s).ok_or_else(|| {
                    Error::invalid("memory", format!("source {s} but only {} styles", styles.len()))
                })?;
                tile_style(style, off, height, width, mode)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MemoryBank {
            templates,
            offsets,
            sources,
            mode,
            height,
            width,
            coords: CoordField::grid(height, width),
        })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn mode(&self) -> TileMode {
        self.mode
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn templates(&self) -> &[Image] {
        &self.templates
    }

    pub fn offsets(&self) -> &[(f64, f64)] {
        &self.offsets
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    /// ψ over the whole bank.
    pub fn coords(&self) -> &CoordField {
        &self.coords
    }

    /// The stacked crops of all templates (`1 x 3N x h x w`, template-major)
    /// and the coordinates of the cropped window.
    pub fn crop_with_coords(&self, top_left: (usize, usize), size: (usize, usize)) -> Result<(Tensor, CoordField)> {
        let (row, col) = top_left;
        let (h, w) = size;
        if row + h > self.height || col + w > self.width {
            return Err(Error::shape(
                "crop_with_coords",
                format!(
                    "window {h}x{w} at ({row},{col}) outside bank {}x{}",
                    self.height, self.width
                ),
            ));
        }
        let mut data = Vec::with_capacity(3 * self.len() * h * w);
        for t in &self.templates {
            for c in 0..3 {
                for y in row..row + h {
                    for x in col..col + w {
                        data.push(t.get(c, y, x));
                    }
                }
            }
        }
        let stack = Tensor::from_vec(Shape::new(1, 3 * self.len(), h, w), data)?;
        Ok((stack, self.coords.crop(row, col, h, w)?))
    }

    /// Plain-text description sufficient to rebuild the bank from the same
    /// style images.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# memory bank manifest").unwrap();
        writeln!(s, "mode {}", self.mode).unwrap();
        writeln!(s, "extent {} {}", self.height, self.width).unwrap();
        writeln!(s, "count {}", self.len()).unwrap();
        for (n, ((oy, ox), src)) in self.offsets.iter().zip(&self.sources).enumerate() {
            writeln!(s, "template {n} source {src} offset {oy:?} {ox:?}").unwrap();
        }
        s
    }

    /// Rebuild from a manifest produced by [`MemoryBank::manifest`].
    pub fn from_manifest(styles: &[Image], manifest: &str) -> Result<Self> {
        let bad = |line: &str| Error::Config(format!("malformed manifest line {line:?}"));
        let (mut mode, mut extent, mut count) = (None, None, None);
        let mut offsets = Vec::new();
        let mut sources = Vec::new();
        for line in manifest.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["mode", m] => mode = Some(m.parse::<TileMode>()?),
                ["extent", h, w] => {
                    extent = Some((h.parse().map_err(|_| bad(line))?, w.parse().map_err(|_| bad(line))?))
                }
                ["count", n] => count = Some(n.parse::<usize>().map_err(|_| bad(line))?),
                ["template", n, "source", s, "offset", oy, ox] => {
                    if n.parse::<usize>().ok() != Some(offsets.len()) {
                        return Err(bad(line));
                    }
                    sources.push(s.parse().map_err(|_| bad(line))?);
                    offsets.push((oy.parse().map_err(|_| bad(line))?, ox.parse().map_err(|_| bad(line))?));
                }
                _ => return Err(bad(line)),
            }
        }
        let (Some(mode), Some(extent), Some(count)) = (mode, extent, count) else {
            return Err(Error::Config("manifest lacks mode, extent or count".into()));
        };
        if count != offsets.len() {
            return Err(Error::Config(format!("manifest lists {} of {count} templates", offsets.len())));
        }
        MemoryBank::assemble(styles, offsets, sources, extent, mode)
    }

    /// Write `template_NNNN.png` files and `manifest.txt` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (n, t) in self.templates.iter().enumerate() {
            save_image(t, dir.join(format!("template_{n:04}.png")))?;
        }
        let path = dir.join("manifest.txt");
        std::fs::write(&path, self.manifest()).map_err(|e| Error::io(path, e))
    }
}

/// Build N templates of `target` extents (rows, cols). Style images are
/// assigned round-robin for the first pass and at random afterwards; each
/// template gets an offset drawn uniformly from `[-1, 1]^2`.
pub fn build_memory(
    styles: &[Image],
    n: usize,
    target: (usize, usize),
    mode: TileMode,
    rng: &mut RngState,
) -> Result<MemoryBank> {
    if styles.is_empty() {
        return Err(Error::invalid("build_memory", "no style images"));
    }
    if n == 0 {
        return Err(Error::invalid("build_memory", "need at least one template"));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::invalid("build_memory", "empty target extent"));
    }
    let mut offsets = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    for i in 0..n {
        sources.push(if i < styles.len() { i } else { rng.below(styles.len()) });
        offsets.push((rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)));
    }
    MemoryBank::assemble(styles, offsets, sources, target, mode)
}

/// Bank with explicit offsets, e.g. for controlled comparisons.
pub fn build_memory_with_offsets(
    styles: &[Image],
    offsets: Vec<(f64, f64)>,
    target: (usize, usize),
    mode: TileMode,
) -> Result<MemoryBank> {
    if styles.is_empty() {
        return Err(Error::invalid("build_memory", "no style images"));
    }
    let sources = (0..offsets.len()).map(|i| i % styles.len()).collect();
    MemoryBank::assemble(styles, offsets, sources, target, mode)
}
