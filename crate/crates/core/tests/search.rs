use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zofair::schema::{is_discriminatory, similar_set};
use zofair::search::{
    attribute_probabilities, find_pair, global_direction, global_generation, local_generation, select_counterpart,
    SALIENCY_EPS,
};
use zofair::{
    Activation, AttributeSpec, DatasetSchema, DiscriminatoryStore, Error, Execution, GlobalConfig, GradientKind,
    GradientSource, GradientVector, Instance, LayerSpec, LocalConfig, MlpModel, ModelHandle,
};

fn schema() -> DatasetSchema {
    DatasetSchema::new(vec![
        AttributeSpec::new("a", 0, 9, false),
        AttributeSpec::new("b", 0, 6, false),
        AttributeSpec::new("g", 0, 1, true),
        AttributeSpec::new("c", 1, 8, false),
        AttributeSpec::new("r", 0, 2, true),
        AttributeSpec::new("d", 0, 4, false),
    ])
    .unwrap()
}

fn random_rows(s: &DatasetSchema, rows: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| Instance::new(s.attributes().iter().map(|a| rng.random_range(a.domain_min..=a.domain_max)).collect()))
        .collect()
}

fn gv(v: &[f64]) -> GradientVector {
    GradientVector::new(v.to_vec(), GradientKind::BackpropOutput)
}

fn global_cfg(num: usize, source: GradientSource) -> GlobalConfig {
    GlobalConfig {
        global_num: num,
        gradient_source: source,
        ..Default::default()
    }
}

fn local_cfg(num: usize, source: GradientSource, seed: u64) -> LocalConfig {
    LocalConfig {
        local_num: num,
        gradient_source: source,
        rng_seed: seed,
        ..Default::default()
    }
}

/// A random network whose label depends noticeably on the protected bits.
fn biased_model(seed: u64) -> MlpModel {
    let base = MlpModel::random(6, &[12, 6], seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let first = &base.layers()[0];
    let mut rows = first.weight_rows();
    for row in &mut rows {
        row[2] *= 4.0;
        row[4] *= 3.0;
        for v in row.iter_mut() {
            *v *= rng.random_range(0.5..1.0);
        }
    }
    let layer0 = LayerSpec::from_rows(rows, first.bias().to_vec(), first.activation()).unwrap();
    let mut layers = base.layers().to_vec();
    layers[0] = layer0;
    MlpModel::new(6, layers).unwrap()
}

fn assert_sound(handle: &ModelHandle, s: &DatasetSchema, store: &DiscriminatoryStore, local: &DiscriminatoryStore) {
    for (x, &origin) in store.global_ids().iter().zip(store.global_origins()) {
        assert!(s.contains(x));
        assert!(is_discriminatory(handle, x, s).unwrap().is_some());
        let seed = &store.seeds[origin];
        assert!(s.protected().iter().all(|&p| x[p] == seed[p]));
    }
    for (x, &origin) in local.local_ids().iter().zip(local.local_origins()) {
        assert!(s.contains(x));
        assert!(is_discriminatory(handle, x, s).unwrap().is_some());
        let seed = &store.global_ids()[origin];
        assert!(s.protected().iter().all(|&p| x[p] == seed[p]));
    }
    let g: HashSet<&Instance> = store.global_ids().iter().collect();
    assert_eq!(g.len(), store.global_ids().len());
    let l: HashSet<&Instance> = local.local_ids().iter().collect();
    assert_eq!(l.len(), local.local_ids().len());
}

#[test]
fn direction_examples() {
    let s = schema();
    let g1 = gv(&[0.3, 0.3, 0.9, 0.0, -0.2, -0.5]);
    let g2 = gv(&[0.8, -0.8, 0.9, 0.0, -0.2, -0.1]);
    assert_eq!(global_direction(&g1, &g2, &s), vec![-1, 0, 0, 0, 0, 1]);
}

#[test]
fn probabilities_examples() {
    let s = DatasetSchema::new(vec![
        AttributeSpec::new("x", 0, 3, false),
        AttributeSpec::new("p", 0, 1, true),
        AttributeSpec::new("y", 0, 3, false),
    ])
    .unwrap();
    let p = attribute_probabilities(&gv(&[0.25, 5.0, -1.0]), &gv(&[-0.75, 5.0, 2.0]), &s);
    assert_eq!(p[1], 0.0);
    let (w0, w2) = (1.0 / (1.0 + SALIENCY_EPS), 1.0 / (3.0 + SALIENCY_EPS));
    assert!((p[0] - w0 / (w0 + w2)).abs() < 1e-15);
    assert!((p[2] - w2 / (w0 + w2)).abs() < 1e-15);
    assert!((p[0] - 0.75).abs() < 1e-6 && (p[2] - 0.25).abs() < 1e-6);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    let zero = attribute_probabilities(&gv(&[0.0; 3]), &gv(&[0.0; 3]), &s);
    assert_eq!(zero, vec![0.5, 0.0, 0.5]);
}

#[test]
fn counterpart_examples() {
    let h = ModelHandle::from_fn(6, |x| [0.45, 0.4, 0.9][x[0] as usize]);
    let x = Instance::new(vec![0, 0, 0, 1, 0, 0]);
    let variants = vec![Instance::new(vec![1, 0, 1, 1, 0, 0]), Instance::new(vec![2, 0, 1, 1, 0, 0])];
    let before = h.invocations();
    assert_eq!(select_counterpart(&h, &x, &variants).unwrap(), variants[1]);
    assert_eq!(h.invocations() - before, 1);
    let constant = ModelHandle::from_fn(6, |_| 0.2);
    let all = similar_set(&x, &schema());
    assert_eq!(select_counterpart(&constant, &x, &all).unwrap(), all[0]);
}

#[test]
fn counterpart_and_pair_match_brute_force() {
    let s = schema();
    let rows = random_rows(&s, 60, 3);
    for seed in 0..10 {
        let model = biased_model(seed);
        let handle = ModelHandle::in_process(model.clone());
        for x in &rows {
            let variants = similar_set(x, &s);
            let fx = model.predict(&x.to_real()).unwrap();
            let gap = |v: &Instance| (fx - model.predict(&v.to_real()).unwrap()).abs();
            let mut best = 0;
            for i in 1..variants.len() {
                if gap(&variants[i]) > gap(&variants[best]) {
                    best = i;
                }
            }
            assert_eq!(select_counterpart(&handle, x, &variants).unwrap(), variants[best]);

            let own = u8::from(fx > 0.5);
            let flips: Vec<&Instance> = variants
                .iter()
                .filter(|v| u8::from(model.predict(&v.to_real()).unwrap() > 0.5) != own)
                .collect();
            match find_pair(&handle, x, &s) {
                Ok(p) => {
                    let top = flips.iter().map(|v| gap(v)).fold(f64::NEG_INFINITY, f64::max);
                    let first_top = flips.iter().find(|v| gap(v) == top).unwrap();
                    assert_eq!(&p, *first_top);
                }
                Err(Error::NoCounterpart) => assert!(flips.is_empty()),
                Err(e) => panic!("{e}"),
            }
        }
    }
}

#[test]
fn find_pair_single_flip() {
    let s = schema();
    // Only r = 2 flips the label.
    let h = ModelHandle::from_fn(6, |x| if x[4] == 2.0 { 0.9 } else { 0.1 });
    let x = Instance::new(vec![1, 1, 0, 1, 0, 1]);
    assert_eq!(find_pair(&h, &x, &s).unwrap(), Instance::new(vec![1, 1, 0, 1, 2, 1]));
}

#[test]
fn protected_bit_model_finds_every_seed() {
    let s = schema();
    let data = random_rows(&s, 40, 5);
    let h = ModelHandle::from_fn(6, |x| x[2]);
    let store = global_generation(&h, &data, &s, &global_cfg(10, GradientSource::ZeroOrder), 1).unwrap();
    let distinct: HashSet<&Instance> = store.seeds.iter().collect();
    assert_eq!(store.global_ids().len(), distinct.len());
    assert_eq!(store.global_stats.attempts, 10);
    assert_eq!(store.global_stats.success_rate(), 1.0);
    assert_eq!(store.global_stats.iterations, 10);

    let cfg = local_cfg(50, GradientSource::ZeroOrder, 2);
    let local = local_generation(&h, store.global_ids(), &s, &cfg).unwrap();
    assert_eq!(local.local_stats.success_rate(), 1.0);
    assert_eq!(local.local_stats.attempts, 50 * store.global_ids().len() as u64);
    assert!(!local.local_ids().is_empty());
    assert_sound(&h, &s, &store, &local);
}

#[test]
fn constant_model_finds_nothing() {
    let s = schema();
    let data = random_rows(&s, 40, 6);
    let h = ModelHandle::from_fn(6, |_| 0.8);
    let cfg = global_cfg(12, GradientSource::ZeroOrder);
    let store = global_generation(&h, &data, &s, &cfg, 1).unwrap();
    assert!(store.global_ids().is_empty());
    assert_eq!(store.global_stats.attempts, 12);
    assert_eq!(store.global_stats.iterations, 12 * cfg.max_iter as u64);
    assert_eq!(store.global_stats.success_rate(), 0.0);
}

#[test]
fn oversized_local_steps_hit_the_boundary() {
    let s = DatasetSchema::new(vec![AttributeSpec::new("p", 0, 1, true), AttributeSpec::new("v", 0, 4, false)]).unwrap();
    let h = ModelHandle::from_fn(2, |x| x[0]);
    let seeds = vec![Instance::new(vec![0, 2]), Instance::new(vec![1, 1]), Instance::new(vec![1, 3])];
    let cfg = LocalConfig {
        local_step: 10.0,
        ..local_cfg(40, GradientSource::ZeroOrder, 3)
    };
    let local = local_generation(&h, &seeds, &s, &cfg).unwrap();
    for i in 0..seeds.len() {
        let mine: Vec<&Instance> =
            local.local_ids().iter().zip(local.local_origins()).filter(|(_, &o)| o == i).map(|(x, _)| x).collect();
        assert!(mine.len() <= 2);
        assert!(mine.iter().all(|x| x[1] == 0 || x[1] == 4));
        assert!(mine.iter().all(|x| x[0] == seeds[i][0]));
    }
    // Seeds 1 and 2 share a protected value, so both reach the same two
    // boundary points; the first one to reach them keeps them.
    assert!(local.local_ids().len() <= 4);
}

#[test]
fn non_discriminatory_seed_is_skipped() {
    let s = schema();
    let h = ModelHandle::from_fn(6, |_| 0.3);
    let seeds = random_rows(&s, 3, 8);
    let local = local_generation(&h, &seeds, &s, &local_cfg(20, GradientSource::ZeroOrder, 0)).unwrap();
    assert!(local.local_ids().is_empty());
    assert_eq!(local.local_stats.attempts, 0);
}

fn run(model: &MlpModel, source: GradientSource, exec: Execution, seed: u64) -> (DiscriminatoryStore, DiscriminatoryStore) {
    let s = schema();
    let data = random_rows(&s, 200, 9);
    let h = ModelHandle::in_process(model.clone()).with_execution(exec);
    let g = GlobalConfig {
        execution: exec,
        ..global_cfg(60, source)
    };
    let store = global_generation(&h, &data, &s, &g, seed).unwrap();
    let l = LocalConfig {
        execution: exec,
        ..local_cfg(40, source, seed)
    };
    let local = local_generation(&h, store.global_ids(), &s, &l).unwrap();
    (store, local)
}

#[test]
fn search_is_sound_on_random_models() {
    let s = schema();
    let mut found = 0;
    for seed in 0..6 {
        let model = biased_model(seed);
        for source in [GradientSource::ZeroOrder, GradientSource::BackpropOutput, GradientSource::BackpropLoss] {
            let (store, local) = run(&model, source, Execution::Parallel, seed);
            let h = ModelHandle::in_process(model.clone());
            assert_sound(&h, &s, &store, &local);
            let budget = 60 * 10 * (3 + 4);
            assert!(store.global_stats.invocations <= budget);
            found += store.global_ids().len() + local.local_ids().len();
        }
    }
    assert!(found > 100, "searches found only {found} instances");
}

#[test]
fn runs_are_reproducible() {
    let model = biased_model(11);
    let a = run(&model, GradientSource::ZeroOrder, Execution::Parallel, 5);
    let b = run(&model, GradientSource::ZeroOrder, Execution::Parallel, 5);
    let c = run(&model, GradientSource::ZeroOrder, Execution::Sequential, 5);
    assert_eq!(a, b);
    assert_eq!(a, c);
    let d = run(&model, GradientSource::ZeroOrder, Execution::Parallel, 6);
    assert_ne!(a.0.seeds, d.0.seeds);
}

/// `sigmoid(w·x + b)`: forward differences share the exact gradient's signs.
fn linear_model(seed: u64) -> MlpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..6).map(|_| rng.random_range(-0.6..0.6)).collect();
    w[2] = 2.5;
    w[4] = -1.5;
    let bias = -w.iter().map(|v| v * 3.0).sum::<f64>() + 0.5;
    let layer = LayerSpec::from_rows(vec![w], vec![bias], Activation::Sigmoid).unwrap();
    MlpModel::new(6, vec![layer]).unwrap()
}

#[test]
fn gradient_sources_interchange_on_linear_models() {
    let s = schema();
    let data = random_rows(&s, 150, 12);
    for seed in 0..5 {
        let model = linear_model(seed);
        let h = ModelHandle::in_process(model);
        let base = GlobalConfig {
            perturbation_size: 1e-6,
            ..global_cfg(50, GradientSource::ZeroOrder)
        };
        let zo = global_generation(&h, &data, &s, &base, 4).unwrap();
        let bp = global_generation(
            &h,
            &data,
            &s,
            &GlobalConfig {
                gradient_source: GradientSource::BackpropOutput,
                ..base.clone()
            },
            4,
        )
        .unwrap();
        assert_eq!(zo.global_ids(), bp.global_ids());
        assert_eq!(zo.global_stats.iterations, bp.global_stats.iterations);
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let s = schema();
    let h = ModelHandle::from_fn(6, |x| x[2]);
    let bad = vec![Instance::new(vec![0, 0, 5, 1, 0, 0])];
    assert!(global_generation(&h, &bad, &s, &GlobalConfig::default(), 0).is_err());
    assert!(local_generation(&h, &bad, &s, &LocalConfig::default()).is_err());
}

#[test]
fn model_failure_aborts_with_partial_results() {
    let s = schema();
    let data = random_rows(&s, 30, 13);
    // An oracle of the wrong width fails every batch.
    let h = ModelHandle::from_fn(5, |_| 0.5);
    let cfg = GlobalConfig {
        execution: Execution::Sequential,
        ..global_cfg(5, GradientSource::ZeroOrder)
    };
    let store = global_generation(&h, &data, &s, &cfg, 0).unwrap();
    assert!(store.is_aborted());
    assert!(store.global_ids().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_are_a_distribution(
        g1 in prop::collection::vec(-5.0f64..5.0, 6),
        g2 in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let s = schema();
        let p = attribute_probabilities(&gv(&g1), &gv(&g2), &s);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for &a in s.protected() {
            prop_assert_eq!(p[a], 0.0);
        }
        prop_assert!(s.unprotected().iter().all(|&a| p[a] > 0.0));
    }

    #[test]
    fn direction_never_touches_protected(
        g1 in prop::collection::vec(-5.0f64..5.0, 6),
        g2 in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let s = schema();
        let d = global_direction(&gv(&g1), &gv(&g2), &s);
        for a in 0..6 {
            if s.is_protected(a) || (g1[a] > 0.0) != (g2[a] > 0.0) {
                prop_assert_eq!(d[a], 0);
            } else {
                prop_assert_eq!(d[a], if g1[a] > 0.0 { -1 } else if g1[a] < 0.0 { 1 } else { 0 });
            }
        }
    }
}
