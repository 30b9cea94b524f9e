//! Timings for the template mixing step against full spatial attention.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::substrate::{mix_templates_forward, RngState};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    /// `mix_templates` or `full_attention`.
    pub op: &'static str,
    pub templates: usize,
    pub height: usize,
    pub width: usize,
    pub reps: usize,
    /// Median seconds per call.
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "op,n,height,width,reps,seconds";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.9}",
            self.op, self.templates, self.height, self.width, self.reps, self.seconds
        )
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Random softmax mixture (`1 x N x H x W`) and templates (`1 x 3N x H x W`).
pub fn random_inputs(n: usize, h: usize, w: usize, rng: &mut RngState) -> (Tensor, Tensor) {
    let mut mix = Tensor::from_fn(Shape::new(1, n, h, w), |_, _, _, _| (rng.uniform_range(-2.0, 2.0) as f32).exp());
    let plane = h * w;
    let data = mix.sample_mut(0);
    for p in 0..plane {
        let z: f32 = (0..n).map(|k| data[k * plane + p]).sum();
        for k in 0..n {
            data[k * plane + p] /= z;
        }
    }
    let templates = Tensor::from_fn(Shape::new(1, 3 * n, h, w), |_, _, _, _| rng.uniform_range(-1.0, 1.0) as f32);
    (mix, templates)
}

/// Every output pixel attends to every (template, position) pair, scored by
/// the product of mixture weights at the query and key positions. Quadratic
/// in the number of pixels.
pub fn full_attention(mix: &Tensor, templates: &Tensor) -> Tensor {
    let s = mix.shape();
    let (n, plane) = (s.c(), s.plane());
    let a = mix.sample(0);
    let t = templates.sample(0);
    let mut out = Tensor::zeros(Shape::new(1, 3, s.h(), s.w()));
    let mut scores = vec![0.0f32; n * plane];
    for p in 0..plane {
        let mut top = f32::NEG_INFINITY;
        for k in 0..n {
            let qa = a[k * plane + p];
            for q in 0..plane {
                let v = qa * a[k * plane + q];
                scores[k * plane + q] = v;
                top = top.max(v);
            }
        }
        let mut z = 0.0f32;
        for v in &mut scores {
            *v = (*v - top).exp();
            z += *v;
        }
        let o = out.sample_mut(0);
        for c in 0..3 {
            let mut acc = 0.0f32;
            for k in 0..n {
                let src = &t[(3 * k + c) * plane..(3 * k + c + 1) * plane];
                let w = &scores[k * plane..(k + 1) * plane];
                acc += w.iter().zip(src).map(|(w, s)| w * s).sum::<f32>();
            }
            o[c * plane + p] = acc / z;
        }
    }
    out
}

/// Bytes touched between timed calls, larger than a typical L2.
const EVICT_BYTES: usize = 16 << 20;

/// Median of `reps` timed calls, after one warm-up call. Before each call a
/// large buffer is swept so inputs are not served from a private cache
/// that only small N fit in; inside the network the inputs were just
/// produced by other layers.
fn time<F: FnMut()>(mut f: F, reps: usize) -> f64 {
    let mut evict = vec![0u8; EVICT_BYTES];
    f();
    let mut samples: Vec<Duration> = (0..reps)
        .map(|i| {
            for line in evict.chunks_mut(64) {
                line[0] = line[0].wrapping_add(i as u8);
            }
            black_box(&evict);
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .collect();
    samples.sort();
    samples[reps / 2].as_secs_f64()
}

pub struct BenchPlan {
    pub templates: Vec<usize>,
    pub extent: (usize, usize),
    pub reps: usize,
    /// Extent and N of the full-attention reference; `None` skips it.
    pub reference: Option<((usize, usize), usize)>,
    pub seed: u64,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            templates: vec![8, 16, 32, 64],
            extent: (64, 64),
            reps: 51,
            reference: Some(((32, 32), 8)),
            seed: 0,
        }
    }
}

pub fn run_bench(plan: &BenchPlan) -> Vec<BenchRow> {
    let mut rng = RngState::new(plan.seed);
    let (h, w) = plan.extent;
    let mut rows = Vec::new();
    for &n in &plan.templates {
        let (mix, templates) = random_inputs(n, h, w, &mut rng);
        let seconds = time(
            || {
                black_box(mix_templates_forward(black_box(&mix), black_box(&templates)).unwrap());
            },
            plan.reps,
        );
        rows.push(BenchRow {
            op: "mix_templates",
            templates: n,
            height: h,
            width: w,
            reps: plan.reps,
            seconds,
        });
    }
    if let Some(((rh, rw), n)) = plan.reference {
        let (mix, templates) = random_inputs(n, rh, rw, &mut rng);
        let reps = 3;
        let seconds = time(
            || {
                black_box(full_attention(black_box(&mix), black_box(&templates)));
            },
            reps,
        );
        rows.push(BenchRow {
            op: "full_attention",
            templates: n,
            height: rh,
            width: rw,
            reps,
            seconds,
        });
    }
    rows
}
