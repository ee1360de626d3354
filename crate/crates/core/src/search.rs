//! Two-phase search for individual discriminatory instances.
//!
//! The global phase walks round-robin seeds across the decision boundary
//! using momentum-accumulated gradients of an instance and its most
//! dissimilar protected-attribute variant. The local phase takes every
//! discriminatory seed and applies single-attribute ±1 steps, picking
//! attributes with probability inversely proportional to their gradient
//! saliency so that the label tends to survive.
//!
//! Seeds are independent units of work. With [`Execution::Parallel`] they run
//! on the rayon pool, each local-phase worker drawing from its own ChaCha
//! stream (the seed index), and results are merged in seed order, so the
//! output is identical to a sequential run.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, round_robin_seeds};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gradient::{compute_gradient, EstimationConfig, GradientKind, GradientSource, GradientVector};
use crate::model::ModelHandle;
use crate::schema::{clip, evaluate_pairs, is_discriminatory, DatasetSchema, Instance};

/// Added to saliencies before taking reciprocals.
pub const SALIENCY_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub decay: f64,
    pub max_iter: usize,
    pub global_step: f64,
    pub cluster_num: usize,
    pub global_num: usize,
    pub perturbation_size: f64,
    pub gradient_source: GradientSource,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            decay: 0.5,
            max_iter: 10,
            global_step: 1.0,
            cluster_num: 4,
            global_num: 1000,
            perturbation_size: 1.0,
            gradient_source: GradientSource::ZeroOrder,
            execution: Execution::default(),
        }
    }
}

impl GlobalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::Config(format!("decay {} outside [0, 1]", self.decay)));
        }
        if self.max_iter == 0 || self.cluster_num == 0 || self.global_num == 0 {
            return Err(Error::Config(
                "max_iter, cluster_num and global_num must be at least 1".into(),
            ));
        }
        if !(self.global_step.is_finite() && self.global_step > 0.0) {
            return Err(Error::Config("global_step must be positive".into()));
        }
        EstimationConfig::new(self.perturbation_size).map(|_| ())
    }

    fn estimation(&self) -> EstimationConfig {
        EstimationConfig {
            perturbation_size: self.perturbation_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    pub local_num: usize,
    pub update_interval: usize,
    pub local_step: f64,
    pub perturbation_size: f64,
    pub gradient_source: GradientSource,
    /// Base of the per-seed RNG streams. Experiment runs set it per round.
    #[serde(skip)]
    pub rng_seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            local_num: 1000,
            update_interval: 5,
            local_step: 1.0,
            perturbation_size: 1.0,
            gradient_source: GradientSource::ZeroOrder,
            rng_seed: 0,
            execution: Execution::default(),
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_num == 0 || self.update_interval == 0 {
            return Err(Error::Config(
                "local_num and update_interval must be at least 1".into(),
            ));
        }
        if !(self.local_step.is_finite() && self.local_step > 0.0) {
            return Err(Error::Config("local_step must be positive".into()));
        }
        EstimationConfig::new(self.perturbation_size).map(|_| ())
    }

    fn estimation(&self) -> EstimationConfig {
        EstimationConfig {
            perturbation_size: self.perturbation_size,
        }
    }
}

/// Per-phase counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseStats {
    /// Global: seeds processed. Local: perturbation iterations.
    pub attempts: u64,
    /// Attempts that produced a discriminatory instance, duplicates included.
    pub successes: u64,
    /// Global: search iterations over all seeds. Local: equals `attempts`.
    pub iterations: u64,
    /// Model batch invocations issued during the phase.
    pub invocations: u64,
    /// Set when the phase stopped early on a model error.
    pub aborted: Option<String>,
}

impl PhaseStats {
    pub fn success_rate(&self) -> f64 {
        ratio(self.successes, self.attempts)
    }
}

pub(crate) fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct OrderedSet {
    items: Vec<Instance>,
    origins: Vec<usize>,
    #[serde(skip)]
    seen: HashSet<Instance>,
}

impl OrderedSet {
    fn insert(&mut self, x: Instance, origin: usize) -> bool {
        if self.seen.contains(&x) {
            return false;
        }
        self.seen.insert(x.clone());
        self.items.push(x);
        self.origins.push(origin);
        true
    }
}

/// Deduplicated discriminatory instances with their provenance.
///
/// `global_origins[i]` is the index (into `seeds`) of the seed that led to
/// `global_ids[i]`; `local_origins[i]` is the index into `global_ids` of the
/// seed whose neighbourhood produced `local_ids[i]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiscriminatoryStore {
    pub seeds: Vec<Instance>,
    global: OrderedSet,
    local: OrderedSet,
    pub global_stats: PhaseStats,
    pub local_stats: PhaseStats,
}

impl DiscriminatoryStore {
    pub fn global_ids(&self) -> &[Instance] {
        &self.global.items
    }

    pub fn global_origins(&self) -> &[usize] {
        &self.global.origins
    }

    pub fn local_ids(&self) -> &[Instance] {
        &self.local.items
    }

    pub fn local_origins(&self) -> &[usize] {
        &self.local.origins
    }

    /// Merges local-phase results into a store holding global results.
    pub fn absorb_local(&mut self, local: DiscriminatoryStore) {
        self.local = local.local;
        self.local_stats = local.local_stats;
    }

    pub fn is_aborted(&self) -> bool {
        self.global_stats.aborted.is_some() || self.local_stats.aborted.is_some()
    }
}

fn sign(v: f64) -> i64 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// `−sign(grad1[a])` on non-protected attributes where both gradients have
/// the same sign, 0 elsewhere.
pub fn global_direction(
    grad1: &GradientVector,
    grad2: &GradientVector,
    schema: &DatasetSchema,
) -> Vec<i64> {
    let mut dir = vec![0; grad1.len()];
    for &a in schema.unprotected() {
        let s = sign(grad1[a]);
        if s == sign(grad2[a]) {
            dir[a] = -s;
        }
    }
    dir
}

/// Selection probabilities ∝ `1 / (|grad1[a]| + |grad2[a]| + ε)` over
/// non-protected attributes; protected attributes get 0.
pub fn attribute_probabilities(
    grad1: &GradientVector,
    grad2: &GradientVector,
    schema: &DatasetSchema,
) -> Vec<f64> {
    let mut w = vec![0.0; grad1.len()];
    for &a in schema.unprotected() {
        let saliency = grad1[a].abs() + grad2[a].abs();
        w[a] = 1.0 / (saliency + SALIENCY_EPS);
    }
    let total: f64 = w.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        // Non-finite gradients; fall back to uniform over non-protected.
        let u = 1.0 / schema.unprotected().len() as f64;
        w.iter_mut().for_each(|v| *v = 0.0);
        for &a in schema.unprotected() {
            w[a] = u;
        }
        return w;
    }
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Variant maximising `|F(x) − F(x')|`; the first in order wins ties.
pub fn select_counterpart(handle: &ModelHandle, x: &Instance, variants: &[Instance]) -> Result<Instance> {
    if variants.is_empty() {
        return Err(Error::NoCounterpart);
    }
    let mut batch = Vec::with_capacity(variants.len() + 1);
    batch.push(x.to_real());
    batch.extend(variants.iter().map(Instance::to_real));
    let confs = handle.forward(&batch)?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in confs[1..].iter().enumerate() {
        let d = (confs[0] - c).abs();
        if d > best.1 {
            best = (i, d);
        }
    }
    Ok(variants[best.0].clone())
}

/// Among similar instances with a different label, the one farthest from
/// `x` in output.
pub fn find_pair(handle: &ModelHandle, x: &Instance, schema: &DatasetSchema) -> Result<Instance> {
    let eval = evaluate_pairs(handle, x, schema)?;
    let own = eval.label();
    let idx = eval
        .farthest(|c| crate::model::label_of(c) != own)
        .ok_or(Error::NoCounterpart)?;
    Ok(eval.variants[idx].clone())
}

struct GlobalSeedOutcome {
    found: Option<Instance>,
    iterations: u64,
}

fn global_seed(
    handle: &ModelHandle,
    seed: &Instance,
    schema: &DatasetSchema,
    cfg: &GlobalConfig,
) -> Result<GlobalSeedOutcome> {
    let est = cfg.estimation();
    let n = seed.len();
    let mut x = seed.clone();
    let mut grad1 = GradientVector::zeros(n, GradientKind::ZeroOrderVectored);
    let mut grad2 = GradientVector::zeros(n, GradientKind::ZeroOrderVectored);
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let eval = evaluate_pairs(handle, &x, schema)?;
        if eval.first_flip().is_some() {
            return Ok(GlobalSeedOutcome {
                found: Some(x),
                iterations,
            });
        }
        let Some(idx) = eval.farthest(|_| true) else {
            break;
        };
        let counterpart = &eval.variants[idx];
        let g1 = compute_gradient(handle, &x.to_real(), cfg.gradient_source, &est)?;
        let g2 = compute_gradient(handle, &counterpart.to_real(), cfg.gradient_source, &est)?;
        grad1.decayed_add(cfg.decay, &g1);
        grad2.decayed_add(cfg.decay, &g2);
        let direction = global_direction(&grad1, &grad2, schema);
        let moved: Vec<f64> = x
            .values()
            .iter()
            .zip(&direction)
            .map(|(&v, &d)| v as f64 + cfg.global_step * d as f64)
            .collect();
        let next = clip(&moved, schema);
        debug_assert!(schema.protected().iter().all(|&p| next[p] == x[p]));
        x = next;
    }
    Ok(GlobalSeedOutcome {
        found: None,
        iterations,
    })
}

/// Clusters `data`, draws `global_num` round-robin seeds and searches each
/// for up to `max_iter` iterations.
///
/// A model error stops the phase: results from seeds before the failing one
/// are kept and the error is recorded in `global_stats.aborted`.
pub fn global_generation(
    handle: &ModelHandle,
    data: &[Instance],
    schema: &DatasetSchema,
    cfg: &GlobalConfig,
    rng_seed: u64,
) -> Result<DiscriminatoryStore> {
    cfg.validate()?;
    for x in data {
        schema.validate(x)?;
    }
    let clusters = kmeans(data, cfg.cluster_num, rng_seed, cfg.execution)?;
    let seeds = round_robin_seeds(&clusters, data, cfg.global_num);
    let before = handle.invocations();
    let outcomes = cfg
        .execution
        .map(&seeds, |_, seed| global_seed(handle, seed, schema, cfg));

    let mut store = DiscriminatoryStore {
        seeds,
        ..Default::default()
    };
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                store.global_stats.attempts += 1;
                store.global_stats.iterations += o.iterations;
                if let Some(x) = o.found {
                    store.global_stats.successes += 1;
                    store.global.insert(x, i);
                }
            }
            Err(e) => {
                log::error!("global phase stopped at seed {i}: {e}");
                store.global_stats.aborted = Some(e.to_string());
                break;
            }
        }
    }
    store.global_stats.invocations = handle.invocations() - before;
    Ok(store)
}

struct LocalSeedOutcome {
    hits: Vec<Instance>,
    iterations: u64,
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn local_seed(
    handle: &ModelHandle,
    seed: &Instance,
    index: usize,
    schema: &DatasetSchema,
    cfg: &LocalConfig,
) -> Result<LocalSeedOutcome> {
    let est = cfg.estimation();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(index as u64);

    let mut x = seed.clone();
    let mut probs: Vec<f64> = Vec::new();
    let mut suc_iter = cfg.update_interval;
    let mut hits = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.local_num {
        if suc_iter >= cfg.update_interval {
            let pair = match find_pair(handle, &x, schema) {
                Ok(p) => p,
                Err(Error::NoCounterpart) => {
                    log::warn!("local seed {index} is not discriminatory; skipping");
                    break;
                }
                Err(e) => return Err(e),
            };
            let g1 = compute_gradient(handle, &x.to_real(), cfg.gradient_source, &est)?;
            let g2 = compute_gradient(handle, &pair.to_real(), cfg.gradient_source, &est)?;
            probs = attribute_probabilities(&g1, &g2, schema);
            suc_iter = 0;
        }
        suc_iter += 1;
        iterations += 1;

        let a = sample_index(&probs, &mut rng);
        let step = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let mut moved = x.to_real();
        moved[a] += step * cfg.local_step;
        let candidate = clip(&moved, schema);
        debug_assert!(schema.protected().iter().all(|&p| candidate[p] == x[p]));

        if is_discriminatory(handle, &candidate, schema)?.is_some() {
            hits.push(candidate.clone());
            x = candidate;
        } else {
            // Undo this step and force fresh probabilities next iteration.
            suc_iter = cfg.update_interval;
        }
    }
    Ok(LocalSeedOutcome { hits, iterations })
}

/// Runs `local_num` perturbation iterations around every seed.
///
/// Successful steps accumulate; a failed step is undone. Returns a store
/// whose local part is filled in, origins pointing into `seeds`.
pub fn local_generation(
    handle: &ModelHandle,
    seeds: &[Instance],
    schema: &DatasetSchema,
    cfg: &LocalConfig,
) -> Result<DiscriminatoryStore> {
    cfg.validate()?;
    for x in seeds {
        schema.validate(x)?;
    }
    let before = handle.invocations();
    let outcomes = cfg
        .execution
        .map(seeds, |i, seed| local_seed(handle, seed, i, schema, cfg));

    let mut store = DiscriminatoryStore::default();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                store.local_stats.attempts += o.iterations;
                store.local_stats.iterations += o.iterations;
                store.local_stats.successes += o.hits.len() as u64;
                for x in o.hits {
                    store.local.insert(x, i);
                }
            }
            Err(e) => {
                log::error!("local phase stopped at seed {i}: {e}");
                store.local_stats.aborted = Some(e.to_string());
                break;
            }
        }
    }
    store.local_stats.invocations = handle.invocations() - before;
    Ok(store)
}
