//! Single-precision inference.
//!
//! Deployed tabular models usually run in float32. Inputs are rounded to
//! `f32` on entry, so a perturbation smaller than the spacing of floats
//! around an attribute value vanishes before the first layer; this is what
//! makes very small finite-difference steps useless against such models.
//! Dot products accumulate with fused multiply-adds in every path.

use super::{Activation, MlpModel, PAR_MIN_ROWS};
use crate::exec::Execution;

/// Rows evaluated together by the batch kernel (one 512-bit register).
const LANES: usize = 16;
const BLOCK: usize = 4;
const WIDE: usize = 8;

#[inline]
fn sigmoid_f32(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn apply(act: Activation, z: f32) -> f32 {
    match act {
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Activation::Sigmoid => sigmoid_f32(z),
        Activation::Identity => z,
    }
}

#[derive(Clone, Debug)]
struct Layer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f32>,
    packed: Vec<f32>,
    bias: Vec<f32>,
    activation: Activation,
}

impl Layer {
    fn row(&self, j: usize) -> &[f32] {
        &self.weights[j * self.in_dim..(j + 1) * self.in_dim]
    }

    fn eval_row(&self, input: &[f32], out: &mut Vec<f32>) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { self.eval_row_fma(input, out) };
        }
        self.eval_row_generic(input, out)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "fma")]
    unsafe fn eval_row_fma(&self, input: &[f32], out: &mut Vec<f32>) {
        self.eval_row_generic(input, out)
    }

    #[inline(always)]
    fn eval_row_generic(&self, input: &[f32], out: &mut Vec<f32>) {
        out.clear();
        for j in 0..self.out_dim {
            let mut acc = 0.0f32;
            for (w, x) in self.row(j).iter().zip(input) {
                acc = w.mul_add(*x, acc);
            }
            out.push(apply(self.activation, acc + self.bias[j]));
        }
    }

    #[inline(always)]
    fn finish_lanes(&self, j: usize, acc: &[f32; LANES], out: &mut [f32]) {
        let b = self.bias[j];
        for (d, a) in out[j * LANES..(j + 1) * LANES].iter_mut().zip(acc) {
            *d = apply(self.activation, a + b);
        }
    }

    /// Per-lane operation order matches [`Layer::eval_row`], fused
    /// multiply-adds included.
    fn eval_lanes(&self, input: &[f32], out: &mut Vec<f32>) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { self.eval_lanes_avx512(input, out) };
        }
        self.eval_lanes_portable(input, out)
    }

    fn eval_lanes_portable(&self, input: &[f32], out: &mut Vec<f32>) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { self.eval_lanes_fma(input, out) };
        }
        self.eval_lanes_generic(input, out)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "fma")]
    unsafe fn eval_lanes_fma(&self, input: &[f32], out: &mut Vec<f32>) {
        self.eval_lanes_generic(input, out)
    }

    #[inline(always)]
    fn eval_lanes_generic(&self, input: &[f32], out: &mut Vec<f32>) {
        out.clear();
        out.resize(self.out_dim * LANES, 0.0);
        for j in 0..self.out_dim {
            let mut acc = [0.0f32; LANES];
            for (&w, xs) in self.row(j).iter().zip(input.chunks_exact(LANES)) {
                let xs: &[f32; LANES] = xs.try_into().expect("lane chunk");
                for r in 0..LANES {
                    acc[r] = w.mul_add(xs[r], acc[r]);
                }
            }
            self.finish_lanes(j, &acc, out);
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn eval_lanes_avx512(&self, input: &[f32], out: &mut Vec<f32>) {
        assert_eq!(input.len(), self.in_dim * LANES);
        out.clear();
        out.resize(self.out_dim * LANES, 0.0);
        let mut packed = self.packed.as_slice();
        for (j, width) in block_plan(self.out_dim) {
            let (w, rest) = packed.split_at(width * self.in_dim);
            packed = rest;
            // SAFETY: avx512f is enabled for this function.
            unsafe {
                match width {
                    WIDE => self.block_avx512::<WIDE>(input, w, j, out),
                    BLOCK => self.block_avx512::<BLOCK>(input, w, j, out),
                    _ => self.block_avx512::<1>(input, w, j, out),
                }
            }
        }
    }

    /// Outputs `j..j + B` for 16 lanes, one accumulator register each.
    /// `w` holds their weights interleaved by input index.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    #[inline]
    unsafe fn block_avx512<const B: usize>(&self, input: &[f32], w: &[f32], j: usize, out: &mut [f32]) {
        use std::arch::x86_64::*;
        let mut a = [_mm512_setzero_ps(); B];
        for (wk, xk) in w.chunks_exact(B).zip(input.chunks_exact(LANES)) {
            // SAFETY: `xk` holds 16 values.
            let x = unsafe { _mm512_loadu_ps(xk.as_ptr()) };
            for (acc, &wb) in a.iter_mut().zip(wk) {
                *acc = _mm512_fmadd_ps(_mm512_set1_ps(wb), x, *acc);
            }
        }
        let mut lanes = [0.0f32; LANES];
        for (b, v) in a.iter().enumerate() {
            // SAFETY: `lanes` holds 16 values.
            unsafe { _mm512_storeu_ps(lanes.as_mut_ptr(), *v) };
            self.finish_lanes(j + b, &lanes, out);
        }
    }
}

/// Output groups `(first, width)` evaluated together by the batch kernel.
fn block_plan(out_dim: usize) -> impl Iterator<Item = (usize, usize)> {
    let wide = out_dim / WIDE * WIDE;
    let block = wide + (out_dim - wide) / BLOCK * BLOCK;
    (0..wide)
        .step_by(WIDE)
        .map(|j| (j, WIDE))
        .chain((wide..block).step_by(BLOCK).map(|j| (j, BLOCK)))
        .chain((block..out_dim).map(|j| (j, 1)))
}

/// Weights regrouped by [`block_plan`]: within a group, the weights of its
/// outputs for input `k` are adjacent.
fn pack(weights: &[f32], in_dim: usize, out_dim: usize) -> Vec<f32> {
    let mut packed = Vec::with_capacity(weights.len());
    for (j, width) in block_plan(out_dim) {
        for k in 0..in_dim {
            packed.extend((j..j + width).map(|o| weights[o * in_dim + k]));
        }
    }
    packed
}

thread_local! {
    /// Lane buffers reused across chunks evaluated on the same thread.
    static SCRATCH: std::cell::RefCell<(Vec<f32>, Vec<f32>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// A float32 copy of an [`MlpModel`].
#[derive(Clone, Debug)]
pub(crate) struct SingleModel {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl SingleModel {
    pub(crate) fn new(model: &MlpModel) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                let weights: Vec<f32> = l.weights.iter().map(|&w| w as f32).collect();
                Layer {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    packed: pack(&weights, l.in_dim(), l.out_dim()),
                    weights,
                    bias: l.bias().iter().map(|&b| b as f32).collect(),
                    activation: l.activation(),
                }
            })
            .collect();
        SingleModel {
            input_dim: model.input_dim(),
            layers,
        }
    }

    fn predict_row(&self, x: &[f64]) -> f64 {
        let mut cur: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.eval_row(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        f64::from(cur[0])
    }

    fn predict_lanes(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        if rows.len() == 1 {
            return vec![self.predict_row(&rows[0])];
        }
        SCRATCH.with_borrow_mut(|(cur, next)| {
            cur.clear();
            cur.resize(self.input_dim * LANES, 0.0);
            for (r, row) in rows.iter().enumerate() {
                for (d, &v) in cur[r..].iter_mut().step_by(LANES).zip(row) {
                    *d = v as f32;
                }
            }
            for layer in &self.layers {
                layer.eval_lanes(cur, next);
                std::mem::swap(cur, next);
            }
            cur[..rows.len()].iter().map(|&v| f64::from(v)).collect()
        })
    }

    /// Rows must already be dimension-checked.
    pub(crate) fn predict_batch(&self, batch: &[Vec<f64>], exec: Execution) -> Vec<f64> {
        match batch.len() {
            0 => Vec::new(),
            1 => vec![self.predict_row(&batch[0])],
            n => {
                let chunks: Vec<&[Vec<f64>]> = batch.chunks(LANES).collect();
                let exec = if n >= PAR_MIN_ROWS {
                    exec
                } else {
                    Execution::Sequential
                };
                exec.map(&chunks, |_, rows| self.predict_lanes(rows))
                    .into_iter()
                    .flatten()
                    .collect()
            }
        }
    }
}
