//! Configuration-driven experiment drivers and report emission.
//!
//! Reports are split in two files: `report.json` holds everything that is a
//! deterministic function of the configuration (counts, rates, invocation
//! totals, config echo) and `timing.json` holds measured wall-clock figures.
//! Two runs with the same configuration therefore produce byte-identical
//! `report.json` and instance files.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gradient::{
    cosine_similarity, estimate_gradient_naive, estimate_gradient_vectored, loss_gradient_at_prediction,
    EstimationConfig, GradientKind, GradientVector,
};
use crate::model::{label_of, MlpModel, ModelHandle, Precision, ProcessSpec};
use crate::pca::project_2d;
use crate::schema::{evaluate_pairs, is_discriminatory, load_dataset, write_dataset, DatasetSchema, Instance};
use crate::search::{
    attribute_probabilities, global_direction, global_generation, local_generation, ratio, GlobalConfig,
    LocalConfig, PhaseStats,
};
use crate::VERSION;

fn default_rounds() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_timeout() -> f64 {
    crate::model::DEFAULT_TIMEOUT.as_secs_f64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model file; mutually exclusive with `external_command`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// argv of an external scoring process.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_command: Option<Vec<String>>,
    #[serde(default = "default_timeout")]
    pub external_timeout_secs: f64,
    /// Forward-pass arithmetic of an in-process model.
    #[serde(default)]
    pub precision: Precision,
    pub schema: PathBuf,
    pub dataset: PathBuf,
    #[serde(default)]
    pub global: GlobalConfig,
    #[serde(default)]
    pub local: LocalConfig,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub execution: Execution,
}

impl ExperimentConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.model.as_mut() {
            resolve(m);
        }
        resolve(&mut cfg.schema);
        resolve(&mut cfg.dataset);
        resolve(&mut cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        match (&self.model, &self.external_command) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set either `model` or `external_command`, not both".into(),
                ))
            }
            (None, None) => return Err(Error::Config("no model configured".into())),
            (Some(m), None) if !m.exists() => {
                return Err(Error::Config(format!("model file {} not found", m.display())))
            }
            (None, Some(_)) if self.precision != Precision::F64 => {
                return Err(Error::Config(
                    "precision applies to in-process models; external oracles choose their own".into(),
                ))
            }
            _ => {}
        }
        for p in [&self.schema, &self.dataset] {
            if !p.exists() {
                return Err(Error::Config(format!("{} not found", p.display())));
            }
        }
        if !(self.external_timeout_secs.is_finite() && self.external_timeout_secs > 0.0) {
            return Err(Error::Config("external_timeout_secs must be positive".into()));
        }
        self.global.validate()?;
        self.local.validate()
    }

    /// Sets the execution mode on this config and its phase configs.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.execution = exec;
        self.global.execution = exec;
        self.local.execution = exec;
        self
    }

    /// Sets the perturbation size of both phases.
    pub fn with_perturbation_size(mut self, h: f64) -> Self {
        self.global.perturbation_size = h;
        self.local.perturbation_size = h;
        self
    }

    pub fn load_schema(&self) -> Result<DatasetSchema> {
        DatasetSchema::load(&self.schema)
    }

    pub fn load_data(&self, schema: &DatasetSchema) -> Result<Vec<Instance>> {
        load_dataset(&self.dataset, schema)
    }

    pub fn open_handle(&self, input_dim: usize) -> Result<ModelHandle> {
        if let Some(path) = &self.model {
            let model = MlpModel::load(path)?;
            if model.input_dim() != input_dim {
                return Err(Error::Dimension {
                    expected: input_dim,
                    actual: model.input_dim(),
                });
            }
            return Ok(ModelHandle::in_process(model)
                .with_execution(self.execution)
                .with_precision(self.precision));
        }
        let argv = self.external_command.as_ref().expect("validated");
        let spec = ProcessSpec::from_argv(argv)?.timeout(Duration::from_secs_f64(self.external_timeout_secs));
        ModelHandle::connect_external(&spec, input_dim)
    }
}

/// Counts for one phase of one round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCounts {
    /// Successful attempts, duplicates included.
    pub raw: u64,
    /// Distinct instances found.
    pub unique: u64,
    pub attempts: u64,
    pub iterations: u64,
    pub invocations: u64,
    /// `raw / attempts`.
    pub success_rate: f64,
    /// `unique / attempts`.
    pub unique_success_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl PhaseCounts {
    fn from_stats(stats: &PhaseStats, unique: usize) -> Self {
        PhaseCounts {
            raw: stats.successes,
            unique: unique as u64,
            attempts: stats.attempts,
            iterations: stats.iterations,
            invocations: stats.invocations,
            success_rate: stats.success_rate(),
            unique_success_rate: ratio(unique as u64, stats.attempts),
            aborted: stats.aborted.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: usize,
    pub rng_seed: u64,
    pub global: PhaseCounts,
    pub local: PhaseCounts,
    /// Distinct instances over both phases.
    pub total_unique: u64,
    /// Stored instances that failed fresh re-verification.
    pub reverify_failures: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateOutcome {
    /// Union sizes over rounds.
    pub global_unique: u64,
    pub local_unique: u64,
    pub total_unique: u64,
    /// Sums over rounds.
    pub global_raw: u64,
    pub local_raw: u64,
    pub invocations: u64,
    /// Means over rounds.
    pub global_success_rate: f64,
    pub local_success_rate: f64,
    pub global_unique_success_rate: f64,
    pub local_unique_success_rate: f64,
}

/// The deterministic part of a generation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub version: String,
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundOutcome>,
    pub aggregate: AggregateOutcome,
    /// True iff every round completed and every stored instance re-verified.
    pub verified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub round: usize,
    pub global_seconds: f64,
    pub local_seconds: f64,
    /// `unique / seconds` for each phase and for both together.
    pub global_speed: f64,
    pub local_speed: f64,
    pub total_speed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub rounds: Vec<RoundTiming>,
    pub total_seconds: f64,
    /// Aggregate distinct instances per second over all rounds.
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub outcome: RunOutcome,
    pub timing: RunTiming,
}

/// A finished generation run: report plus the instance unions over rounds.
#[derive(Clone, Debug)]
pub struct GenerateRun {
    pub report: RunReport,
    pub schema: DatasetSchema,
    pub global_ids: Vec<Instance>,
    pub local_ids: Vec<Instance>,
}

fn speed(count: u64, seconds: f64) -> f64 {
    if seconds > 0.0 {
        count as f64 / seconds
    } else {
        0.0
    }
}

fn push_unique(set: &mut HashSet<Instance>, list: &mut Vec<Instance>, items: &[Instance]) {
    for x in items {
        if set.insert(x.clone()) {
            list.push(x.clone());
        }
    }
}

/// Runs global then local generation for every round.
///
/// Round `r` uses seed `rng_seed + r` for clustering and local sampling.
/// After each round every stored instance is re-checked with fresh queries.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<GenerateRun> {
    config.validate()?;
    let schema = config.load_schema()?;
    let data = config.load_data(&schema)?;
    let handle = config.open_handle(schema.len())?;
    run_generate(config, &schema, &data, &handle)
}

/// [`cmd_generate`] against an already opened handle and loaded data.
pub fn run_generate(
    config: &ExperimentConfig,
    schema: &DatasetSchema,
    data: &[Instance],
    handle: &ModelHandle,
) -> Result<GenerateRun> {
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut timings = Vec::with_capacity(config.rounds);
    let (mut gset, mut lset, mut tset) = (HashSet::new(), HashSet::new(), HashSet::new());
    let (mut global_ids, mut local_ids, mut all_ids) = (Vec::new(), Vec::new(), Vec::new());
    let mut agg = AggregateOutcome::default();
    let mut verified = true;
    let started = Instant::now();

    for r in 0..config.rounds {
        let seed = config.rng_seed.wrapping_add(r as u64);
        let mut global_cfg = config.global.clone();
        global_cfg.execution = config.execution;
        let mut local_cfg = config.local.clone();
        local_cfg.execution = config.execution;
        local_cfg.rng_seed = seed;

        let t0 = Instant::now();
        let mut store = global_generation(handle, data, schema, &global_cfg, seed)?;
        let global_seconds = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let local = if store.global_stats.aborted.is_none() {
            local_generation(handle, store.global_ids(), schema, &local_cfg)?
        } else {
            Default::default()
        };
        let local_seconds = t1.elapsed().as_secs_f64();
        store.absorb_local(local);

        let mut round_all: Vec<Instance> = store.global_ids().to_vec();
        let seen: HashSet<&Instance> = round_all.iter().collect();
        let extra: Vec<Instance> = store
            .local_ids()
            .iter()
            .filter(|x| !seen.contains(x))
            .cloned()
            .collect();
        round_all.extend(extra);

        let failures = config
            .execution
            .try_map(&round_all, |_, x| is_discriminatory(handle, x, schema).map(|w| w.is_none()))?
            .into_iter()
            .filter(|&failed| failed)
            .count() as u64;
        if failures > 0 {
            log::error!("round {r}: {failures} stored instances failed re-verification");
        }
        verified &= failures == 0 && !store.is_aborted();

        let global = PhaseCounts::from_stats(&store.global_stats, store.global_ids().len());
        let local = PhaseCounts::from_stats(&store.local_stats, store.local_ids().len());
        agg.global_raw += global.raw;
        agg.local_raw += local.raw;
        agg.invocations += global.invocations + local.invocations;
        agg.global_success_rate += global.success_rate / config.rounds as f64;
        agg.local_success_rate += local.success_rate / config.rounds as f64;
        agg.global_unique_success_rate += global.unique_success_rate / config.rounds as f64;
        agg.local_unique_success_rate += local.unique_success_rate / config.rounds as f64;

        timings.push(RoundTiming {
            round: r,
            global_seconds,
            local_seconds,
            global_speed: speed(global.unique, global_seconds),
            local_speed: speed(local.unique, local_seconds),
            total_speed: speed(round_all.len() as u64, global_seconds + local_seconds),
        });
        rounds.push(RoundOutcome {
            round: r,
            rng_seed: seed,
            total_unique: round_all.len() as u64,
            global,
            local,
            reverify_failures: failures,
        });
        push_unique(&mut gset, &mut global_ids, store.global_ids());
        push_unique(&mut lset, &mut local_ids, store.local_ids());
        push_unique(&mut tset, &mut all_ids, &round_all);
    }

    agg.global_unique = global_ids.len() as u64;
    agg.local_unique = local_ids.len() as u64;
    agg.total_unique = all_ids.len() as u64;
    let phase_seconds: f64 = timings.iter().map(|t| t.global_seconds + t.local_seconds).sum();
    let timing = RunTiming {
        speed: speed(agg.total_unique, phase_seconds),
        total_seconds: started.elapsed().as_secs_f64(),
        rounds: timings,
    };
    Ok(GenerateRun {
        report: RunReport {
            outcome: RunOutcome {
                version: VERSION.to_string(),
                config: config.clone(),
                rounds,
                aggregate: agg,
                verified,
            },
            timing,
        },
        schema: schema.clone(),
        global_ids,
        local_ids,
    })
}

/// One generation run per perturbation size, all with the same seeds.
pub fn cmd_sweep(config: &ExperimentConfig, h_values: &[f64]) -> Result<Vec<(f64, GenerateRun)>> {
    if h_values.is_empty() {
        return Err(Error::Config("sweep needs at least one perturbation size".into()));
    }
    config.validate()?;
    let schema = config.load_schema()?;
    let data = config.load_data(&schema)?;
    let handle = config.open_handle(schema.len())?;
    h_values
        .iter()
        .map(|&h| {
            let cfg = config.clone().with_perturbation_size(h);
            cfg.global.validate()?;
            run_generate(&cfg, &schema, &data, &handle).map(|run| (h, run))
        })
        .collect()
}

/// Wall-clock seconds spent computing all gradients of one method.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodTimings {
    pub zero_order_naive: f64,
    pub zero_order_vectored: f64,
    pub backprop_output: f64,
    pub backprop_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub method: GradientKind,
    pub index: usize,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientValidationReport {
    pub version: String,
    pub perturbation_size: f64,
    /// Dataset row indices of the sampled instances.
    pub samples: Vec<usize>,
    /// Zero-order vs exact output gradient, one per sample.
    pub gradient_similarity: Vec<f64>,
    /// Global-phase direction vectors from both gradient kinds, for samples
    /// whose most dissimilar pair is not already discriminatory.
    pub direction_similarity: Vec<f64>,
    pub direction_skipped: usize,
    /// Local-phase attribute probabilities from both gradient kinds.
    pub probability_similarity: Vec<f64>,
    pub mean_gradient_similarity: f64,
    pub mean_direction_similarity: f64,
    pub mean_probability_similarity: f64,
    /// Gradient computation time per method over all samples.
    pub gradient_seconds: MethodTimings,
    /// Pair gradients plus direction construction, per method.
    pub direction_seconds: MethodTimings,
    /// Pair gradients plus probability construction, per method.
    pub probability_seconds: MethodTimings,
    pub pca_explained_variance: Vec<f64>,
    pub pca: Vec<PcaPoint>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}

/// Picks `count` distinct row indices (all rows when `count` covers the
/// dataset), in sampling order.
pub fn sample_rows(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, len, count).into_vec()
}

/// Compares zero-order estimates with exact gradients on sampled instances.
pub fn cmd_validate_gradients(config: &ExperimentConfig, sample_count: usize) -> Result<GradientValidationReport> {
    config.validate()?;
    if config.model.is_none() {
        return Err(Error::Unsupported(
            "gradient validation needs an in-process model file; external oracles have no exact gradients".into(),
        ));
    }
    let schema = config.load_schema()?;
    let data = config.load_data(&schema)?;
    let handle = config.open_handle(schema.len())?;
    validate_gradients(&handle, &schema, &data, config.global.perturbation_size, sample_count, config.rng_seed, config.execution)
}

/// [`cmd_validate_gradients`] against an already opened in-process handle.
pub fn validate_gradients(
    handle: &ModelHandle,
    schema: &DatasetSchema,
    data: &[Instance],
    perturbation_size: f64,
    sample_count: usize,
    seed: u64,
    exec: Execution,
) -> Result<GradientValidationReport> {
    if handle.model().is_none() {
        return Err(Error::Unsupported("gradient validation needs an in-process model".into()));
    }
    if sample_count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let est = EstimationConfig::new(perturbation_size)?;
    let samples = sample_rows(data.len(), sample_count, seed);
    let points: Vec<Vec<f64>> = samples.iter().map(|&i| data[i].to_real()).collect();

    // Gradient timings: one sequential pass per method.
    let (estimated, t_vec) = timed(|| {
        points
            .iter()
            .map(|x| estimate_gradient_vectored(handle, x, &est))
            .collect::<Result<Vec<_>>>()
    })?;
    let (_, t_naive) = timed(|| {
        points
            .iter()
            .map(|x| estimate_gradient_naive(handle, x, &est))
            .collect::<Result<Vec<_>>>()
    })?;
    let (exact, t_out) = timed(|| points.iter().map(|x| handle.output_gradient(x)).collect::<Result<Vec<_>>>())?;
    let (loss, t_loss) = timed(|| {
        points
            .iter()
            .map(|x| loss_gradient_at_prediction(handle, x))
            .collect::<Result<Vec<_>>>()
    })?;

    let gradient_similarity = estimated
        .iter()
        .zip(&exact)
        .map(|(e, g)| cosine_similarity(&e.components, g))
        .collect::<Result<Vec<_>>>()?;

    // Pairs: the most output-dissimilar protected variant of each sample.
    let pairs: Vec<(Instance, Instance, bool)> = exec.try_map(&samples, |_, &i| {
        let x = &data[i];
        let eval = evaluate_pairs(handle, x, schema)?;
        let idx = eval.farthest(|_| true).ok_or(Error::NoCounterpart)?;
        let flips = label_of(eval.variant_confidences[idx]) != eval.label();
        Ok::<_, Error>((x.clone(), eval.variants[idx].clone(), flips))
    })?;

    let zo = |x: &Instance| estimate_gradient_vectored(handle, &x.to_real(), &est);
    let bp = |x: &Instance| {
        handle
            .output_gradient(&x.to_real())
            .map(|g| GradientVector::new(g, GradientKind::BackpropOutput))
    };

    let non_disc: Vec<&(Instance, Instance, bool)> = pairs.iter().filter(|p| !p.2).collect();
    let direction_skipped = pairs.len() - non_disc.len();
    let directions = |grad: &dyn Fn(&Instance) -> Result<GradientVector>| -> Result<Vec<Vec<f64>>> {
        non_disc
            .iter()
            .map(|(a, b, _)| {
                let d = global_direction(&grad(a)?, &grad(b)?, schema);
                Ok(d.into_iter().map(|v| v as f64).collect())
            })
            .collect()
    };
    let (dir_est, t_dir_est) = timed(|| directions(&zo))?;
    let (dir_exact, t_dir_exact) = timed(|| directions(&bp))?;
    let direction_similarity = dir_est
        .iter()
        .zip(&dir_exact)
        .map(|(a, b)| cosine_similarity(a, b))
        .collect::<Result<Vec<_>>>()?;

    let probabilities = |grad: &dyn Fn(&Instance) -> Result<GradientVector>| -> Result<Vec<Vec<f64>>> {
        pairs
            .iter()
            .map(|(a, b, _)| Ok(attribute_probabilities(&grad(a)?, &grad(b)?, schema)))
            .collect()
    };
    let (prob_est, t_prob_est) = timed(|| probabilities(&zo))?;
    let (prob_exact, t_prob_exact) = timed(|| probabilities(&bp))?;
    let probability_similarity = prob_est
        .iter()
        .zip(&prob_exact)
        .map(|(a, b)| cosine_similarity(a, b))
        .collect::<Result<Vec<_>>>()?;

    let mut pooled: Vec<Vec<f64>> = Vec::with_capacity(points.len() * 3);
    pooled.extend(estimated.iter().map(|g| g.components.clone()));
    pooled.extend(exact.iter().cloned());
    pooled.extend(loss.iter().cloned());
    let projection = project_2d(&pooled)?;
    let n = points.len();
    let pca = projection
        .coordinates
        .iter()
        .enumerate()
        .map(|(i, c)| PcaPoint {
            method: match i / n {
                0 => GradientKind::ZeroOrderVectored,
                1 => GradientKind::BackpropOutput,
                _ => GradientKind::BackpropLoss,
            },
            index: i % n,
            pc1: c[0],
            pc2: c[1],
        })
        .collect();

    Ok(GradientValidationReport {
        version: VERSION.to_string(),
        perturbation_size,
        mean_gradient_similarity: mean(&gradient_similarity),
        mean_direction_similarity: mean(&direction_similarity),
        mean_probability_similarity: mean(&probability_similarity),
        samples,
        gradient_similarity,
        direction_similarity,
        direction_skipped,
        probability_similarity,
        gradient_seconds: MethodTimings {
            zero_order_naive: t_naive,
            zero_order_vectored: t_vec,
            backprop_output: t_out,
            backprop_loss: t_loss,
        },
        direction_seconds: MethodTimings {
            zero_order_vectored: t_dir_est,
            backprop_output: t_dir_exact,
            ..Default::default()
        },
        probability_seconds: MethodTimings {
            zero_order_vectored: t_prob_est,
            backprop_output: t_prob_exact,
            ..Default::default()
        },
        pca_explained_variance: projection.explained_variance,
        pca,
    })
}

/// Widths of the generated models measured by [`cmd_invocation_bench`].
pub const BENCH_WIDTHS: [usize; 3] = [8, 16, 137];

/// Hidden layers of generated benchmark models (six dense layers in total).
pub const BENCH_HIDDEN: [usize; 5] = [64, 32, 16, 8, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvocationBenchRow {
    /// `config` for the configured model, `generated` otherwise.
    pub model: String,
    pub attributes: usize,
    pub precision: Precision,
    pub repetitions: usize,
    pub naive_invocations: u64,
    pub vectored_invocations: u64,
    /// Mean seconds per gradient.
    pub naive_seconds: f64,
    pub vectored_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backprop_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvocationBenchReport {
    pub version: String,
    pub rows: Vec<InvocationBenchRow>,
}

/// Measures invocation counts and timings of one estimate per method.
///
/// Fails if the naive estimator does not use exactly `n + 1` invocations or
/// the vectored one exactly 2.
pub fn bench_handle(
    handle: &ModelHandle,
    label: &str,
    point: &[f64],
    repetitions: usize,
    est: &EstimationConfig,
) -> Result<InvocationBenchRow> {
    let n = point.len();
    let reps = repetitions.max(1);

    let before = handle.invocations();
    estimate_gradient_naive(handle, point, est)?;
    let naive_invocations = handle.invocations() - before;
    let before = handle.invocations();
    estimate_gradient_vectored(handle, point, est)?;
    let vectored_invocations = handle.invocations() - before;
    if naive_invocations != n as u64 + 1 || vectored_invocations != 2 {
        return Err(Error::Protocol(format!(
            "invocation count violated: naive {naive_invocations} (want {}), vectored {vectored_invocations} (want 2)",
            n + 1
        )));
    }

    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(estimate_gradient_naive(handle, point, est)?);
    }
    let naive_seconds = t.elapsed().as_secs_f64() / reps as f64;
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(estimate_gradient_vectored(handle, point, est)?);
    }
    let vectored_seconds = t.elapsed().as_secs_f64() / reps as f64;
    let backprop_seconds = match handle.model() {
        Some(_) => {
            let t = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(handle.output_gradient(point)?);
            }
            Some(t.elapsed().as_secs_f64() / reps as f64)
        }
        None => None,
    };
    Ok(InvocationBenchRow {
        model: label.to_string(),
        attributes: n,
        precision: handle.precision(),
        repetitions: reps,
        naive_invocations,
        vectored_invocations,
        naive_seconds,
        vectored_seconds,
        backprop_seconds,
    })
}

/// Invocation counts and timings for the configured model and for
/// generated models of [`BENCH_WIDTHS`] attributes.
pub fn cmd_invocation_bench(config: &ExperimentConfig, repetitions: usize) -> Result<InvocationBenchReport> {
    config.validate()?;
    let schema = config.load_schema()?;
    let data = config.load_data(&schema)?;
    let est = EstimationConfig::new(config.global.perturbation_size)?;
    let handle = config.open_handle(schema.len())?;
    let point = data
        .first()
        .map(Instance::to_real)
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    let mut rows = vec![bench_handle(&handle, "config", &point, repetitions, &est)?];
    for (i, &n) in BENCH_WIDTHS.iter().enumerate() {
        let model = MlpModel::random(n, &BENCH_HIDDEN, config.rng_seed.wrapping_add(i as u64))?;
        let h = ModelHandle::in_process(model)
            .with_execution(config.execution)
            .with_precision(config.precision);
        let x: Vec<f64> = (0..n).map(|j| (j % 5) as f64).collect();
        rows.push(bench_handle(&h, "generated", &x, repetitions, &est)?);
    }
    Ok(InvocationBenchReport {
        version: VERSION.to_string(),
        rows,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn write_instances(path: &Path, schema: &DatasetSchema, rows: &[Instance]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(std::io::BufWriter::new(file), schema, rows)
}

pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const GLOBAL_INSTANCES_FILE: &str = "instances_global.csv";
pub const LOCAL_INSTANCES_FILE: &str = "instances_local.csv";
pub const ROUNDS_FILE: &str = "rounds.csv";

/// Writes `report.json`, `timing.json`, both instance CSVs and the
/// per-round series `rounds.csv` into `dir`.
pub fn emit_reports(run: &GenerateRun, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join(REPORT_FILE), &run.report.outcome)?;
    write_json(&dir.join(TIMING_FILE), &run.report.timing)?;
    write_instances(&dir.join(GLOBAL_INSTANCES_FILE), &run.schema, &run.global_ids)?;
    write_instances(&dir.join(LOCAL_INSTANCES_FILE), &run.schema, &run.local_ids)?;
    let mut csv = String::from(
        "round,global_unique,local_unique,total_unique,global_success_rate,local_success_rate,global_seconds,local_seconds,total_speed\n",
    );
    for (o, t) in run.report.outcome.rounds.iter().zip(&run.report.timing.rounds) {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            o.round,
            o.global.unique,
            o.local.unique,
            o.total_unique,
            o.global.success_rate,
            o.local.success_rate,
            t.global_seconds,
            t.local_seconds,
            t.total_speed
        ));
    }
    write_file(&dir.join(ROUNDS_FILE), csv)
}

/// Reads back the two report files written by [`emit_reports`].
pub fn read_report(dir: &Path) -> Result<RunReport> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    Ok(RunReport {
        outcome: serde_json::from_str(&read(REPORT_FILE)?)?,
        timing: serde_json::from_str(&read(TIMING_FILE)?)?,
    })
}

/// Writes one sub-directory per sweep entry (`h_00`, `h_01`, …), a
/// `sweep.json` index and the `sweep.csv` curve series.
pub fn emit_sweep(runs: &[(f64, GenerateRun)], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    #[derive(Serialize)]
    struct Entry<'a> {
        perturbation_size: f64,
        directory: String,
        aggregate: &'a AggregateOutcome,
        speed: f64,
    }
    let mut index = Vec::new();
    let mut csv = String::from(
        "perturbation_size,round,global_unique,local_unique,total_unique,global_success_rate,local_success_rate,total_speed\n",
    );
    for (i, (h, run)) in runs.iter().enumerate() {
        let sub = format!("h_{i:02}");
        emit_reports(run, &dir.join(&sub))?;
        index.push(Entry {
            perturbation_size: *h,
            directory: sub,
            aggregate: &run.report.outcome.aggregate,
            speed: run.report.timing.speed,
        });
        for (o, t) in run.report.outcome.rounds.iter().zip(&run.report.timing.rounds) {
            csv.push_str(&format!(
                "{h:e},{},{},{},{},{},{},{}\n",
                o.round,
                o.global.unique,
                o.local.unique,
                o.total_unique,
                o.global.success_rate,
                o.local.success_rate,
                t.total_speed
            ));
        }
    }
    write_json(&dir.join("sweep.json"), &index)?;
    write_file(&dir.join("sweep.csv"), csv)
}

/// Writes `validation.json`, `similarity.csv` and `pca.csv`.
pub fn emit_validation(report: &GradientValidationReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("validation.json"), report)?;
    let mut sim = String::from("metric,value\n");
    for (name, values) in [
        ("gradient", &report.gradient_similarity),
        ("direction", &report.direction_similarity),
        ("probability", &report.probability_similarity),
    ] {
        for v in values {
            sim.push_str(&format!("{name},{v}\n"));
        }
    }
    write_file(&dir.join("similarity.csv"), sim)?;
    let mut pca = String::from("method,index,pc1,pc2\n");
    for p in &report.pca {
        let method = serde_json::to_value(p.method)?;
        pca.push_str(&format!("{},{},{},{}\n", method.as_str().unwrap_or(""), p.index, p.pc1, p.pc2));
    }
    write_file(&dir.join("pca.csv"), pca)
}

/// Writes `bench.json` and `bench.csv`.
pub fn emit_bench(report: &InvocationBenchReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("bench.json"), report)?;
    let mut csv = String::from(
        "model,attributes,naive_invocations,vectored_invocations,naive_seconds,vectored_seconds,backprop_seconds\n",
    );
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.model,
            r.attributes,
            r.naive_invocations,
            r.vectored_invocations,
            r.naive_seconds,
            r.vectored_seconds,
            r.backprop_seconds.map(|s| s.to_string()).unwrap_or_default()
        ));
    }
    write_file(&dir.join("bench.csv"), csv)
}
