//! Finite-difference checks of every differentiable substrate operation.

mod common;

use common::grad_suite::{self, OP_TOL, SEEDS};
use famos_core::{Shape, Tensor};

fn check(name: &str, case: fn(u64) -> f64) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let e = case(seed);
        assert!(e < OP_TOL, "{name}: seed {seed} relative error {e:.3e}");
        worst = worst.max(e);
    }
    eprintln!("{name}: worst relative error {worst:.2e}");
}

macro_rules! op_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                check(stringify!($name), grad_suite::$name);
            }
        )*
    };
}

op_tests!(
    conv2d_zero,
    conv2d_reflect,
    conv2d_strided,
    conv2d_pointwise,
    upsample_conv,
    batch_norm_train,
    batch_norm_eval,
    relu,
    leaky_relu,
    sigmoid,
    tanh,
    softmax_channels,
    mix_templates,
    blend,
    concat_slice_arithmetic,
    scalar_reductions,
    log_losses,
    entropy_channels,
    total_variation,
    avg_pool,
    conv_batchnorm_leaky,
);

#[test]
fn backward_examples() {
    let mut tape = famos_core::Tape::new();
    let x = tape.input(Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, h, w| (c + h + w) as f32 - 1.3));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    // repeated passes accumulate
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));

    let mut tape = famos_core::Tape::new();
    let x = tape.input(Tensor::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 6.0);

    let mut tape = famos_core::Tape::new();
    let x = tape.input(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    assert!(tape.backward(x).is_err());
}
