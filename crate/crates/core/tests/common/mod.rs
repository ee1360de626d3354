//! Shared fixtures: a synthetic census-like desk benchmark, a small MLP
//! trainer, and helpers that write fixture files for config-driven runs.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zofair::experiment::ExperimentConfig;
use zofair::model::{label_of, sigmoid};
use zofair::schema::write_dataset;
use zofair::{Activation, AttributeSpec, DatasetSchema, Instance, LayerSpec, MlpModel};

/// Hidden widths of the desk model: six dense layers in total.
pub const DESK_HIDDEN: [usize; 5] = [64, 32, 16, 8, 4];
pub const DESK_ROWS: usize = 1000;
pub const DESK_SEED: u64 = 20240607;

pub fn desk_schema() -> DatasetSchema {
    let a = |n: &str, lo, hi| AttributeSpec::new(n, lo, hi, false);
    DatasetSchema::new(vec![
        a("age", 1, 9),
        a("workclass", 0, 7),
        a("education", 0, 15),
        a("education_num", 1, 16),
        a("marital_status", 0, 6),
        a("occupation", 0, 13),
        a("relationship", 0, 5),
        a("race", 0, 4),
        AttributeSpec::new("sex", 0, 1, true),
        a("capital_gain", 0, 19),
        a("capital_loss", 0, 19),
        a("hours_per_week", 1, 10),
        a("native_country", 0, 40),
    ])
    .expect("valid desk schema")
}

/// Census-like rows whose labels depend partly on `sex`.
pub fn desk_dataset(rows: usize, seed: u64) -> (Vec<Instance>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let age = rng.random_range(1..=9i64);
        let workclass = rng.random_range(0..=7i64);
        let education_num = rng.random_range(1..=16i64);
        let education = (education_num - 1 + rng.random_range(-1..=1i64)).clamp(0, 15);
        let marital = rng.random_range(0..=6i64);
        let occupation = rng.random_range(0..=13i64);
        let relationship = rng.random_range(0..=5i64);
        let race = rng.random_range(0..=4i64);
        let sex = rng.random_range(0..=1i64);
        let capital_gain = if rng.random_bool(0.8) { 0 } else { rng.random_range(1..=19i64) };
        let capital_loss = if rng.random_bool(0.9) { 0 } else { rng.random_range(1..=19i64) };
        let hours = rng.random_range(1..=10i64);
        let country = rng.random_range(0..=40i64);

        let score = 0.45 * (education_num as f64 - 10.0)
            + 0.5 * (hours as f64 - 5.5)
            + 0.35 * (age as f64 - 5.0)
            + 0.25 * capital_gain as f64
            - 0.1 * capital_loss as f64
            + if marital == 2 { 0.8 } else { -0.6 }
            + if occupation < 6 { 0.5 } else { 0.0 }
            + 1.5 * sex as f64 * if occupation < 9 { 1.0 } else { 0.3 }
            - 1.2;
        let noise: f64 = rng.random_range(-1.0..1.0);
        let label = u8::from(score + noise > 0.0);
        data.push(Instance::new(vec![
            age,
            workclass,
            education,
            education_num,
            marital,
            occupation,
            relationship,
            race,
            sex,
            capital_gain,
            capital_loss,
            hours,
            country,
        ]));
        labels.push(label);
    }
    (data, labels)
}

struct Dense {
    inp: usize,
    out: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    mw: Vec<f64>,
    vw: Vec<f64>,
    mb: Vec<f64>,
    vb: Vec<f64>,
    gw: Vec<f64>,
    gb: Vec<f64>,
}

impl Dense {
    fn new(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inp as f64).sqrt();
        Dense {
            inp,
            out,
            w: (0..inp * out).map(|_| rng.random_range(-bound..bound)).collect(),
            b: vec![0.01; out],
            mw: vec![0.0; inp * out],
            vw: vec![0.0; inp * out],
            mb: vec![0.0; out],
            vb: vec![0.0; out],
            gw: vec![0.0; inp * out],
            gb: vec![0.0; out],
        }
    }
}

/// Mini-batch Adam on binary cross-entropy. Hidden layers use ReLU, the
/// output unit a sigmoid. Inputs are used unscaled, as the search sees them.
pub fn train_mlp(data: &[Instance], labels: &[u8], hidden: &[usize], epochs: usize, seed: u64) -> MlpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![data[0].len()];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let mut layers: Vec<Dense> = dims.windows(2).map(|d| Dense::new(d[0], d[1], &mut rng)).collect();
    let xs: Vec<Vec<f64>> = data.iter().map(Instance::to_real).collect();
    let (lr, b1, b2, eps): (f64, f64, f64, f64) = (2e-3, 0.9, 0.999, 1e-8);
    let batch = 32;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut t = 0i32;
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            for l in layers.iter_mut() {
                l.gw.iter_mut().for_each(|g| *g = 0.0);
                l.gb.iter_mut().for_each(|g| *g = 0.0);
            }
            for &idx in chunk {
                let mut acts = vec![xs[idx].clone()];
                for (li, l) in layers.iter().enumerate() {
                    let a = acts.last().unwrap();
                    let last = li + 1 == layers.len();
                    let next: Vec<f64> = (0..l.out)
                        .map(|o| {
                            let z = l.w[o * l.inp..(o + 1) * l.inp].iter().zip(a).map(|(w, x)| w * x).sum::<f64>()
                                + l.b[o];
                            if last {
                                sigmoid(z)
                            } else {
                                z.max(0.0)
                            }
                        })
                        .collect();
                    acts.push(next);
                }
                let p = acts.last().unwrap()[0];
                let mut delta = vec![p - f64::from(labels[idx])];
                for li in (0..layers.len()).rev() {
                    let l = &mut layers[li];
                    let a = &acts[li];
                    let mut prev = vec![0.0; l.inp];
                    for o in 0..l.out {
                        let d = delta[o];
                        if d == 0.0 {
                            continue;
                        }
                        l.gb[o] += d;
                        for k in 0..l.inp {
                            l.gw[o * l.inp + k] += d * a[k];
                            prev[k] += d * l.w[o * l.inp + k];
                        }
                    }
                    if li > 0 {
                        for (k, p) in prev.iter_mut().enumerate() {
                            if a[k] <= 0.0 {
                                *p = 0.0;
                            }
                        }
                    }
                    delta = prev;
                }
            }
            t += 1;
            let scale = 1.0 / chunk.len() as f64;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            for l in layers.iter_mut() {
                let step = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                    for i in 0..p.len() {
                        let g = g[i] * scale;
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                };
                step(&mut l.w, &l.gw, &mut l.mw, &mut l.vw);
                step(&mut l.b, &l.gb, &mut l.mb, &mut l.vb);
            }
        }
    }
    let n = layers.len();
    let specs = layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let rows = l.w.chunks(l.inp).map(<[f64]>::to_vec).collect();
            let act = if i + 1 == n { Activation::Sigmoid } else { Activation::Relu };
            LayerSpec::from_rows(rows, l.b, act).expect("trained layer")
        })
        .collect();
    MlpModel::new(dims[0], specs).expect("trained model")
}

pub fn accuracy(model: &MlpModel, data: &[Instance], labels: &[u8]) -> f64 {
    let hits = data
        .iter()
        .zip(labels)
        .filter(|(x, &y)| label_of(model.predict(&x.to_real()).unwrap()) == y)
        .count();
    hits as f64 / data.len() as f64
}

pub struct Desk {
    pub schema: DatasetSchema,
    pub data: Vec<Instance>,
    pub labels: Vec<u8>,
    pub model: MlpModel,
}

/// The trained desk benchmark, built once per test binary.
pub fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let schema = desk_schema();
        let (data, labels) = desk_dataset(DESK_ROWS, DESK_SEED);
        let model = train_mlp(&data, &labels, &DESK_HIDDEN, 60, DESK_SEED);
        Desk {
            schema,
            data,
            labels,
            model,
        }
    })
}

/// Writes schema, dataset and model files into `dir`.
pub fn write_fixture(dir: &Path, schema: &DatasetSchema, data: &[Instance], model: &MlpModel) -> (PathBuf, PathBuf, PathBuf) {
    let schema_path = dir.join("schema.json");
    let data_path = dir.join("data.csv");
    let model_path = dir.join("model.json");
    std::fs::write(&schema_path, schema.to_json()).unwrap();
    write_dataset(std::fs::File::create(&data_path).unwrap(), schema, data).unwrap();
    model.save(&model_path).unwrap();
    (schema_path, data_path, model_path)
}

/// A desk-scale config (g_num = l_num = 100) over fixture files in `dir`.
pub fn desk_config(dir: &Path) -> ExperimentConfig {
    let d = desk();
    let (schema, dataset, model) = write_fixture(dir, &d.schema, &d.data, &d.model);
    let mut text = serde_json::json!({
        "model": model,
        "schema": schema,
        "dataset": dataset,
        "global": {"global_num": 100},
        "local": {"local_num": 100},
        "rounds": 1,
        "rng_seed": 7,
        "output_dir": dir.join("out"),
    })
    .to_string();
    text.push('\n');
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    ExperimentConfig::load(&path).unwrap()
}
