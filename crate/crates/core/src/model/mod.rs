//! Fully-connected binary classifiers and handles for querying them.
//!
//! An [`MlpModel`] is a stack of dense layers ending in a single sigmoid
//! unit, so its output is the confidence of label 1. Every row of a batch is
//! evaluated with exactly the same floating-point operation order as a
//! single-row call, which keeps batched and unbatched predictions bitwise
//! equal.

mod external;
mod handle;
mod single;

pub use external::{serve, ProcessSpec, DEFAULT_TIMEOUT};
pub use handle::ModelHandle;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// Rows evaluated together by the batch kernel.
const LANES: usize = 16;
/// Output units evaluated together by the batch kernel.
const BLOCK: usize = 4;

/// Batches at least this large are split across the thread pool.
const PAR_MIN_ROWS: usize = 64;

/// Clamp applied to confidences before taking logs in the loss.
pub const LOSS_EPS: f64 = 1e-12;

/// Arithmetic used for forward passes of an in-process model. Exact
/// gradients are always computed in double precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// ReLU uses 0 at the kink.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One dense layer. Weights are stored row-major, `out_dim × in_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer", into = "RawLayer")]
pub struct LayerSpec {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

impl TryFrom<RawLayer> for LayerSpec {
    type Error = Error;

    fn try_from(raw: RawLayer) -> Result<Self> {
        LayerSpec::from_rows(raw.weights, raw.bias, raw.activation)
    }
}

impl From<LayerSpec> for RawLayer {
    fn from(layer: LayerSpec) -> Self {
        RawLayer {
            weights: layer.weight_rows(),
            bias: layer.bias,
            activation: layer.activation,
        }
    }
}

impl LayerSpec {
    /// Builds a layer from `out_dim` weight rows. Only the layer-local
    /// invariants are checked here; chaining is checked by [`MlpModel::new`].
    pub fn from_rows(rows: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let out_dim = rows.len();
        let in_dim = rows.first().map_or(0, Vec::len);
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::Model("layer with an empty weight matrix".into()));
        }
        let mut weights = Vec::with_capacity(out_dim * in_dim);
        for (j, row) in rows.into_iter().enumerate() {
            if row.len() != in_dim {
                return Err(Error::Model(format!(
                    "ragged weight matrix: row {j} has {} entries, row 0 has {in_dim}",
                    row.len()
                )));
            }
            weights.extend(row);
        }
        Ok(LayerSpec {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.in_dim + inp]
    }

    pub fn weight_rows(&self) -> Vec<Vec<f64>> {
        self.weights.chunks(self.in_dim).map(<[f64]>::to_vec).collect()
    }

    fn row(&self, out: usize) -> &[f64] {
        &self.weights[out * self.in_dim..(out + 1) * self.in_dim]
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.bias.len() != self.out_dim {
            return Err(Error::Shape {
                layer: index,
                what: "bias",
                expected: self.out_dim,
                actual: self.bias.len(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                layer: index,
                what: "weights",
            });
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite {
                layer: index,
                what: "bias",
            });
        }
        Ok(())
    }

    /// Single-row affine map plus activation. Accumulation runs over the
    /// inputs in index order, then the bias is added.
    fn eval_row(&self, input: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        pre.clear();
        out.clear();
        for j in 0..self.out_dim {
            let mut acc = 0.0;
            for (w, x) in self.row(j).iter().zip(input) {
                acc += w * x;
            }
            let z = acc + self.bias[j];
            pre.push(z);
            out.push(self.activation.apply(z));
        }
    }

    /// Evaluates `LANES` rows at once. `input` is input-major
    /// (`in_dim × LANES`), as is `out` (`out_dim × LANES`). Each lane sees
    /// the same operation order as [`LayerSpec::eval_row`], and multiplies
    /// and adds are rounded separately, so the wide variants below give
    /// bitwise the same results.
    fn eval_lanes(&self, input: &[f64], out: &mut Vec<f64>) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: the feature was detected at runtime.
                return unsafe { self.eval_lanes_avx512(input, out) };
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                return unsafe { self.eval_lanes_avx2(input, out) };
            }
        }
        self.eval_lanes_portable(input, out)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn eval_lanes_avx512(&self, input: &[f64], out: &mut Vec<f64>) {
        use std::arch::x86_64::*;
        const _: () = assert!(LANES == 16);
        assert_eq!(input.len(), self.in_dim * LANES);
        out.clear();
        out.resize(self.out_dim * LANES, 0.0);
        let n = self.in_dim;
        let xp = input.as_ptr();
        let mut acc = [[0.0f64; LANES]; BLOCK];
        let mut j = 0;
        while j + BLOCK <= self.out_dim {
            let w: [&[f64]; BLOCK] = std::array::from_fn(|b| self.row(j + b));
            let mut a = [_mm512_setzero_pd(); 2 * BLOCK];
            for k in 0..n {
                // SAFETY: k < in_dim and input holds in_dim × 16 values.
                let (x0, x1) = unsafe { (_mm512_loadu_pd(xp.add(k * LANES)), _mm512_loadu_pd(xp.add(k * LANES + 8))) };
                for b in 0..BLOCK {
                    let wb = _mm512_set1_pd(w[b][k]);
                    a[2 * b] = _mm512_add_pd(a[2 * b], _mm512_mul_pd(wb, x0));
                    a[2 * b + 1] = _mm512_add_pd(a[2 * b + 1], _mm512_mul_pd(wb, x1));
                }
            }
            for b in 0..BLOCK {
                // SAFETY: each accumulator row holds 16 values.
                unsafe {
                    _mm512_storeu_pd(acc[b].as_mut_ptr(), a[2 * b]);
                    _mm512_storeu_pd(acc[b].as_mut_ptr().add(8), a[2 * b + 1]);
                }
                self.finish_lanes(j + b, &acc[b], out);
            }
            j += BLOCK;
        }
        for j in j..self.out_dim {
            let row = self.row(j);
            let (mut a0, mut a1) = (_mm512_setzero_pd(), _mm512_setzero_pd());
            for (k, &w) in row.iter().enumerate() {
                let wb = _mm512_set1_pd(w);
                // SAFETY: as above.
                let (x0, x1) = unsafe { (_mm512_loadu_pd(xp.add(k * LANES)), _mm512_loadu_pd(xp.add(k * LANES + 8))) };
                a0 = _mm512_add_pd(a0, _mm512_mul_pd(wb, x0));
                a1 = _mm512_add_pd(a1, _mm512_mul_pd(wb, x1));
            }
            // SAFETY: as above.
            unsafe {
                _mm512_storeu_pd(acc[0].as_mut_ptr(), a0);
                _mm512_storeu_pd(acc[0].as_mut_ptr().add(8), a1);
            }
            self.finish_lanes(j, &acc[0], out);
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn eval_lanes_avx2(&self, input: &[f64], out: &mut Vec<f64>) {
        self.eval_lanes_portable(input, out)
    }

    #[inline(always)]
    fn eval_lanes_portable(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.out_dim * LANES, 0.0);
        for j in 0..self.out_dim {
            let mut acc = [0.0f64; LANES];
            for (&w, xs) in self.row(j).iter().zip(input.chunks_exact(LANES)) {
                let xs: &[f64; LANES] = xs.try_into().expect("lane chunk");
                for r in 0..LANES {
                    acc[r] += w * xs[r];
                }
            }
            self.finish_lanes(j, &acc, out);
        }
    }

    #[inline(always)]
    fn finish_lanes(&self, j: usize, acc: &[f64; LANES], out: &mut [f64]) {
        let b = self.bias[j];
        for (d, a) in out[j * LANES..(j + 1) * LANES].iter_mut().zip(acc) {
            *d = self.activation.apply(a + b);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct MlpModel {
    input_dim: usize,
    layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    input_dim: usize,
    layers: Vec<LayerSpec>,
}

impl TryFrom<RawModel> for MlpModel {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        MlpModel::new(raw.input_dim, raw.layers)
    }
}

impl From<MlpModel> for RawModel {
    fn from(m: MlpModel) -> Self {
        RawModel {
            input_dim: m.input_dim,
            layers: m.layers,
        }
    }
}

impl MlpModel {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        let mut expected = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim != expected {
                return Err(Error::Shape {
                    layer: i,
                    what: "input dimension",
                    expected,
                    actual: layer.in_dim,
                });
            }
            layer.validate(i)?;
            expected = layer.out_dim;
        }
        let last = layers.len() - 1;
        if expected != 1 {
            return Err(Error::Shape {
                layer: last,
                what: "output dimension",
                expected: 1,
                actual: expected,
            });
        }
        if layers[last].activation != Activation::Sigmoid {
            return Err(Error::Model(format!(
                "layer {last}: output activation must be sigmoid, got {:?}",
                layers[last].activation
            )));
        }
        Ok(MlpModel { input_dim, layers })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Validation errors surface through serde as custom messages; parse
        // the raw form first so shape errors keep their structured variant.
        let raw: RawModel = serde_json::from_str(text)?;
        MlpModel::try_from(raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialisation cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                actual: len,
            });
        }
        Ok(())
    }

    /// Confidence of label 1 for a single input.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(self.predict_unchecked(x))
    }

    fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let mut pre = Vec::new();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.eval_row(&cur, &mut pre, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    /// Confidences for a batch of rows.
    pub fn predict_batch(&self, batch: &[Vec<f64>], exec: Execution) -> Result<Vec<f64>> {
        for row in batch {
            self.check_dim(row.len())?;
        }
        match batch.len() {
            0 => Ok(Vec::new()),
            1 => Ok(vec![self.predict_unchecked(&batch[0])]),
            n => {
                let chunks: Vec<&[Vec<f64>]> = batch.chunks(LANES).collect();
                let exec = if n >= PAR_MIN_ROWS {
                    exec
                } else {
                    Execution::Sequential
                };
                let parts = exec.map(&chunks, |_, rows| self.predict_lanes(rows));
                Ok(parts.into_iter().flatten().collect())
            }
        }
    }

    fn predict_lanes(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        if rows.len() == 1 {
            return vec![self.predict_unchecked(&rows[0])];
        }
        let mut cur = vec![0.0; self.input_dim * LANES];
        for (r, row) in rows.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                cur[k * LANES + r] = v;
            }
        }
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.eval_lanes(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur.truncate(rows.len());
        cur
    }

    /// Forward pass keeping pre-activations and activations of every layer.
    fn trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let mut pre = Vec::new();
            let mut out = Vec::new();
            layer.eval_row(acts.last().unwrap(), &mut pre, &mut out);
            pres.push(pre);
            acts.push(out);
        }
        (pres, acts)
    }

    /// Propagates `d(output)/d(z_last)`-style seed back to the input, given
    /// a scalar multiplier on `d(confidence)`.
    fn backprop(&self, pres: &[Vec<f64>], acts: &[Vec<f64>], upstream: f64) -> Vec<f64> {
        // delta holds d(objective)/d(activation) of the current layer.
        let mut delta = vec![upstream];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let dz: Vec<f64> = (0..layer.out_dim)
                .map(|j| delta[j] * layer.activation.derivative(pres[i][j], acts[i + 1][j]))
                .collect();
            let mut prev = vec![0.0; layer.in_dim];
            for (j, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(layer.row(j)) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
        delta
    }

    /// Gradient of the raw confidence `F(x)` with respect to the input.
    pub fn confidence_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let (pres, acts) = self.trace(x);
        Ok(self.backprop(&pres, &acts, 1.0))
    }

    /// Gradient of the predicted-class confidence: `∇F(x)` when the label is
    /// 1, `∇(1 − F(x))` otherwise.
    pub fn output_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let (pres, acts) = self.trace(x);
        let conf = acts.last().unwrap()[0];
        let sign = if conf > 0.5 { 1.0 } else { -1.0 };
        Ok(self.backprop(&pres, &acts, sign))
    }

    /// Binary cross-entropy between the confidence and `label`, with the
    /// confidence clamped into `[LOSS_EPS, 1 − LOSS_EPS]`.
    pub fn loss(&self, x: &[f64], label: u8) -> Result<f64> {
        let p = self.predict(x)?.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        Ok(if label == 1 { -p.ln() } else { -(1.0 - p).ln() })
    }

    /// Gradient of [`MlpModel::loss`] with respect to the input.
    pub fn loss_gradient(&self, x: &[f64], label: u8) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let (pres, acts) = self.trace(x);
        let p = acts.last().unwrap()[0].clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        let dloss = if label == 1 { -1.0 / p } else { 1.0 / (1.0 - p) };
        Ok(self.backprop(&pres, &acts, dloss))
    }
}

impl MlpModel {
    /// A randomly initialised network: ReLU hidden layers of the given
    /// widths and a sigmoid output unit. Weights are uniform in
    /// `±sqrt(6 / fan_in)`, biases uniform in `±0.1`.
    pub fn random(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        let widths = hidden.iter().copied().chain(std::iter::once(1));
        let n_layers = hidden.len() + 1;
        for (i, width) in widths.enumerate() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let rows = (0..width)
                .map(|_| (0..fan_in).map(|_| rng.random_range(-bound..bound)).collect())
                .collect();
            let bias = (0..width).map(|_| rng.random_range(-0.1..0.1)).collect();
            let act = if i + 1 == n_layers {
                Activation::Sigmoid
            } else {
                Activation::Relu
            };
            layers.push(LayerSpec::from_rows(rows, bias, act)?);
            fan_in = width;
        }
        MlpModel::new(input_dim, layers)
    }
}

/// Label convention shared by every component: 1 iff confidence > 0.5.
#[inline]
pub fn label_of(confidence: f64) -> u8 {
    u8::from(confidence > 0.5)
}
