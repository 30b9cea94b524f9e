use std::fmt;

use crate::error::{Error, Result};
use crate::image_ops::{gaussian_kernel, LUMA};
use crate::nn::Conv;
use crate::substrate::{Padding, ParamStore, RngState, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Transform under which content reconstruction is measured.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CorrespondenceKind {
    /// Greyscale, then Gaussian blur with reflect padding.
    GaussianGrey { sigma: f32 },
    /// Greyscale, then box downsampling.
    DownsampleGrey { factor: usize },
    /// A small 1x1 network reconstructing the content from the output.
    LearnedReconstruction,
}

impl fmt::Display for CorrespondenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorrespondenceKind::GaussianGrey { sigma } => write!(f, "gaussian_grey(sigma={sigma})"),
            CorrespondenceKind::DownsampleGrey { factor } => write!(f, "downsample_grey(factor={factor})"),
            CorrespondenceKind::LearnedReconstruction => f.write_str("learned_reconstruction"),
        }
    }
}

/// Channels of the hidden layer of the reconstruction network.
const REC_HIDDEN: usize = 8;

#[derive(Clone, Debug)]
struct Reconstruction {
    store: ParamStore,
    layers: [Conv; 2],
}

/// A correspondence map φ together with the trainable state of the learned
/// variant.
#[derive(Clone, Debug)]
pub struct CorrespondenceMap {
    kind: CorrespondenceKind,
    rec: Option<Reconstruction>,
}

impl CorrespondenceMap {
    pub fn new(kind: CorrespondenceKind, rng: &mut RngState) -> Result<Self> {
        let rec = match kind {
            CorrespondenceKind::GaussianGrey { sigma } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!("correspondence sigma must be positive, got {sigma}")));
                }
                None
            }
            CorrespondenceKind::DownsampleGrey { factor } => {
                if factor == 0 {
                    return Err(Error::Config("correspondence factor must be positive".into()));
                }
                None
            }
            CorrespondenceKind::LearnedReconstruction => {
                let mut store = ParamStore::new();
                let layers = [
                    Conv::new(&mut store, rng, "rec0", 3, REC_HIDDEN, 1, 1, true),
                    Conv::new(&mut store, rng, "rec1", REC_HIDDEN, 3, 1, 1, true),
                ];
                Some(Reconstruction { store, layers })
            }
        };
        Ok(CorrespondenceMap { kind, rec })
    }

    pub fn kind(&self) -> CorrespondenceKind {
        self.kind
    }

    /// Parameters of the learned map, if any.
    pub fn store(&self) -> Option<&ParamStore> {
        self.rec.as_ref().map(|r| &r.store)
    }

    pub fn store_mut(&mut self) -> Option<&mut ParamStore> {
        self.rec.as_mut().map(|r| &mut r.store)
    }

    fn grey(tape: &mut Tape, x: Var) -> Result<Var> {
        let k = tape.constant(Tensor::from_vec(Shape::new(1, 3, 1, 1), LUMA.to_vec())?);
        tape.conv2d(x, k, None, 1, Padding::Zero)
    }

    /// φ applied to an RGB batch. For the learned map this is the
    /// reconstruction network.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.kind {
            CorrespondenceKind::GaussianGrey { sigma } => {
                let g = Self::grey(tape, x)?;
                let k1 = gaussian_kernel(sigma)?;
                let n = k1.len();
                let k2 = Tensor::from_fn(Shape::new(1, 1, n, n), |_, _, y, x| k1[y] * k1[x]);
                let k = tape.constant(k2);
                tape.conv2d(g, k, None, 1, Padding::Reflect)
            }
            CorrespondenceKind::DownsampleGrey { factor } => {
                let g = Self::grey(tape, x)?;
                tape.avg_pool(g, factor)
            }
            CorrespondenceKind::LearnedReconstruction => {
                let rec = self.rec.as_ref().expect("learned map carries its network");
                let h = rec.layers[0].forward(tape, &rec.store, x)?;
                let h = tape.leaky_relu(h, 0.2);
                rec.layers[1].forward(tape, &rec.store, h)
            }
        }
    }

    /// Mean squared error between φ(I_c) and φ(I); for the learned map,
    /// between I_c and φ_rec(I).
    pub fn content_loss(&self, tape: &mut Tape, content: Var, image: Var) -> Result<Var> {
        let (cs, is) = (tape.shape(content), tape.shape(image));
        if cs != is {
            return Err(Error::shape("content_loss", format!("content {cs} vs image {is}")));
        }
        match self.kind {
            CorrespondenceKind::LearnedReconstruction => {
                let r = self.apply(tape, image)?;
                tape.mse(content, r)
            }
            _ => {
                let a = self.apply(tape, content)?;
                let b = self.apply(tape, image)?;
                tape.mse(a, b)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds() -> [CorrespondenceKind; 3] {
        [
            CorrespondenceKind::GaussianGrey { sigma: 1.5 },
            CorrespondenceKind::DownsampleGrey { factor: 4 },
            CorrespondenceKind::LearnedReconstruction,
        ]
    }

    fn loss(map: &CorrespondenceMap, c: &Tensor, i: &Tensor) -> f32 {
        let mut tape = Tape::new();
        let (cv, iv) = (tape.constant(c.clone()), tape.constant(i.clone()));
        let l = map.content_loss(&mut tape, cv, iv).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn identical_images_have_zero_loss_for_fixed_maps() {
        let mut rng = RngState::new(3);
        let x = Tensor::from_fn(Shape::new(2, 3, 8, 8), |_, _, _, _| rng.uniform_range(-1.0, 1.0) as f32);
        for kind in &kinds()[..2] {
            let map = CorrespondenceMap::new(*kind, &mut rng).unwrap();
            assert_eq!(loss(&map, &x, &x), 0.0);
        }
    }

    #[test]
    fn downsample_single_element() {
        let mut rng = RngState::new(0);
        let map = CorrespondenceMap::new(CorrespondenceKind::DownsampleGrey { factor: 4 }, &mut rng).unwrap();
        let c = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let i = Tensor::full(Shape::new(1, 3, 4, 4), 0.5);
        assert!((loss(&map, &c, &i) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn gaussian_loss_ignores_common_shift() {
        let mut rng = RngState::new(4);
        let map = CorrespondenceMap::new(CorrespondenceKind::GaussianGrey { sigma: 1.0 }, &mut rng).unwrap();
        let c = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, _, _, _| rng.uniform_range(-0.5, 0.5) as f32);
        let i = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, _, _, _| rng.uniform_range(-0.5, 0.5) as f32);
        let a = loss(&map, &c, &i);
        let b = loss(&map, &c.map(|v| v + 0.3), &i.map(|v| v + 0.3));
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-5 * a.max(1e-3), "{a} vs {b}");
    }

    #[test]
    fn learned_map_is_small_and_nonnegative() {
        let mut rng = RngState::new(5);
        let map = CorrespondenceMap::new(CorrespondenceKind::LearnedReconstruction, &mut rng).unwrap();
        assert_eq!(map.store().unwrap().num_weights(), 3 * 8 + 8 + 8 * 3 + 3);
        let x = Tensor::from_fn(Shape::new(1, 3, 4, 4), |_, _, _, _| rng.uniform_range(-1.0, 1.0) as f32);
        assert!(loss(&map, &x, &x) >= 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut rng = RngState::new(0);
        assert!(CorrespondenceMap::new(CorrespondenceKind::GaussianGrey { sigma: 0.0 }, &mut rng).is_err());
        assert!(CorrespondenceMap::new(CorrespondenceKind::DownsampleGrey { factor: 0 }, &mut rng).is_err());
    }
}
