//! Minimal reverse-mode differentiable array engine.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! accumulates gradients into leaf nodes. Parameters live outside the tape in
//! a [`ParamStore`] and are copied in as leaves; [`Tape::flush_grads`] moves
//! the accumulated leaf gradients back into the store.

mod adam;
mod conv;
mod elementwise;
mod norm;
mod param;
mod reduce;
mod rng;

pub use adam::Adam;
pub use conv::{conv2d_output_extent, Padding};
pub use elementwise::{blend_pixel, Activation};
pub use norm::{BatchNormStats, NormMode, VARIANCE_FLOOR};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub(crate) use reduce::box_average;
pub use reduce::mix_templates_forward;
pub use rng::RngState;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Local derivative of one recorded operation.
pub(crate) trait Backward {
    fn inputs(&self) -> &[Var];

    /// Gradients w.r.t. each input, aligned with [`Backward::inputs`]. Entries
    /// whose `needs` flag is false may be returned as `None`.
    fn backward(&self, ctx: &Ctx<'_>, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>>;
}

/// Read access to recorded values during the backward pass.
pub(crate) struct Ctx<'a> {
    nodes: &'a [Node],
    output: usize,
}

impl Ctx<'_> {
    pub(crate) fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn output(&self) -> &Tensor {
        &self.nodes[self.output].value
    }
}

enum Origin {
    Constant,
    Input,
    Param { store: u32, index: usize },
    Op(Box<dyn Backward>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    origin: Origin,
}

/// Record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    live_bytes: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values. Used to bound working memory of
    /// chunked inference.
    pub fn value_bytes(&self) -> usize {
        self.live_bytes
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, origin: Origin) -> Var {
        self.live_bytes += value.len() * std::mem::size_of::<f32>();
        self.nodes.push(Node {
            value,
            requires_grad,
            origin,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Data that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Origin::Constant)
    }

    /// A leaf whose gradient is tracked and readable through [`Tape::grad`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, true, Origin::Input)
    }

    /// Copy a parameter onto the tape. Frozen stores yield constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        if store.is_frozen() {
            self.constant(p.value.clone())
        } else {
            self.push(
                p.value.clone(),
                true,
                Origin::Param {
                    store: store.tag(),
                    index: id.index(),
                },
            )
        }
    }

    pub(crate) fn push_op(&mut self, value: Tensor, op: impl Backward + 'static) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        if requires_grad {
            self.push(value, true, Origin::Op(Box::new(op)))
        } else {
            self.push(value, false, Origin::Constant)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (input or parameter), if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    /// Reverse pass from a scalar. Gradients add onto whatever earlier passes
    /// left in the leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {shape}"),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            match &self.nodes[i].origin {
                Origin::Constant => {}
                Origin::Input | Origin::Param { .. } => match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                },
                Origin::Op(op) => {
                    let inputs = op.inputs();
                    let needs: Vec<bool> =
                        inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let ctx = Ctx {
                        nodes: &self.nodes,
                        output: i,
                    };
                    let contributions = op.backward(&ctx, &grad, &needs);
                    for ((v, need), g) in inputs.iter().zip(&needs).zip(contributions) {
                        let (true, Some(g)) = (*need, g) else {
                            continue;
                        };
                        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
                        match &mut grads[v.0] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Move parameter gradients belonging to `store` out of the tape and add
    /// them onto the store's accumulators.
    pub fn flush_grads(&mut self, store: &mut ParamStore) {
        let tag = store.tag();
        for (node, slot) in self.nodes.iter().zip(self.leaf_grads.iter_mut()) {
            if let Origin::Param { store: s, index } = node.origin {
                if s == tag {
                    if let Some(g) = slot.take() {
                        store.params_mut()[index].grad.add_assign(&g);
                    }
                }
            }
        }
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}
