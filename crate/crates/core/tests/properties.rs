use dtmamba::block::BlockStack;
use dtmamba::hazard::{self, ClassWeights, HazardParams, Outcome, RiskOutput};
use dtmamba::metrics::{auc_at, c_index, ScoredOutcome};
use dtmamba::profiler::{count_flops, count_model_params, count_params};
use dtmamba::tensor::Tensor;
use dtmamba::{BlockConfig, FusionMode, Grid, ImageConfig, Model, ModelConfig, ParamStore, ScanOrder, Visit, VisitContent};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn outcome() -> impl Strategy<Value = Outcome> {
    (1u32..10, any::<bool>()).prop_map(|(t, event)| {
        let time = t as f64 * 8.0;
        if event {
            Outcome::Event { time }
        } else {
            Outcome::Censored { follow_up: time }
        }
    })
}

fn cohort() -> impl Strategy<Value = Vec<ScoredOutcome>> {
    prop::collection::vec(
        (-4i32..5, outcome()).prop_map(|(s, outcome)| ScoredOutcome {
            score: s as f64 / 4.0,
            outcome,
        }),
        2..40,
    )
}

fn rescore(samples: &[ScoredOutcome], f: impl Fn(f64) -> f64) -> Vec<ScoredOutcome> {
    samples
        .iter()
        .map(|s| ScoredOutcome {
            score: f(s.score),
            outcome: s.outcome,
        })
        .collect()
}

proptest! {
    #[test]
    fn c_index_ignores_monotone_rescaling(samples in cohort()) {
        if let Ok(c) = c_index(&samples) {
            prop_assert_eq!(c_index(&rescore(&samples, |s| 3.0 * s.exp() + 1.0)).unwrap(), c);
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn negated_scores_reflect_the_c_index(samples in cohort()) {
        if let Ok(c) = c_index(&samples) {
            let flipped = c_index(&rescore(&samples, |s| -s)).unwrap();
            prop_assert!((c + flipped - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn auc_ignores_monotone_rescaling_and_reflects(samples in cohort(), year in 1usize..6) {
        if let Ok(a) = auc_at(&samples, year) {
            prop_assert_eq!(auc_at(&rescore(&samples, |s| s.powi(3) + s), year).unwrap(), a);
            let flipped = auc_at(&rescore(&samples, |s| -s), year).unwrap();
            prop_assert!((a + flipped - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cumulative_risk_never_decreases(logits in prop::collection::vec(-50.0f64..50.0, 2..12)) {
        let r = RiskOutput::from_logits(&logits).unwrap();
        prop_assert!(r.hazards.iter().all(|&h| h >= 0.0));
        prop_assert!(r.cumulative.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.cumulative_logits().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn loss_ignores_indeterminable_horizons(
        logits in prop::collection::vec(-5.0f64..5.0, 6),
        noise in prop::collection::vec(-5.0f64..5.0, 6),
        follow_up in 1.0f64..80.0,
    ) {
        let outcome = Outcome::Censored { follow_up };
        let weights = ClassWeights { positive: 2.0, negative: 0.5 };
        let known = (1..=5).take_while(|&k| outcome.label_at(k).is_some()).count();
        let mut changed = logits.clone();
        for (k, n) in noise.iter().enumerate().skip(known + 1) {
            changed[k] += n;
        }
        let a = hazard::loss(&RiskOutput::from_logits(&logits).unwrap(), &outcome, &weights).unwrap();
        let b = hazard::loss(&RiskOutput::from_logits(&changed).unwrap(), &outcome, &weights).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(a.is_some(), known > 0);
    }

    #[test]
    fn flops_are_linear_in_tokens(a in 1usize..5000, b in 1usize..5000, d in 1usize..64, n in 1usize..17) {
        let c = BlockConfig::new(d, n, Grid { visits: 4, height: 8, width: 8 });
        let fa = count_flops(&c, a).unwrap().total;
        let fb = count_flops(&c, b).unwrap().total;
        prop_assert_eq!(count_flops(&c, a + b).unwrap().total, fa + fb);
    }

    #[test]
    fn param_count_matches_the_registry(
        d in 1usize..6,
        n in 1usize..5,
        visits in 1usize..5,
        layers in 1usize..3,
        gate in any::<bool>(),
        mode in 0usize..3,
    ) {
        let mut c = BlockConfig::new(d, n, Grid { visits, height: 3, width: 2 });
        c.gate = gate;
        c.layers = layers;
        c.fusion = [FusionMode::Readout, FusionMode::State, FusionMode::Off][mode];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        BlockStack::new(&c, &mut store, &mut rng).unwrap();
        prop_assert_eq!(store.num_entries(), count_params(&c).unwrap().total);

        let m = ModelConfig {
            image: ImageConfig { channels: 1, height: 6, width: 4, patch: 2 },
            block: c,
            horizons: 5,
        };
        let mut store = ParamStore::new();
        Model::new(&m, &mut store, &mut rng).unwrap();
        prop_assert_eq!(store.num_entries(), count_model_params(&m).unwrap().total);
    }
}

fn small_model(order: ScanOrder, gate: bool, visits: usize, seed: u64) -> (Model, ParamStore) {
    let mut block = BlockConfig::new(3, 2, Grid { visits, height: 2, width: 2 });
    block.scan_order = order;
    block.gate = gate;
    let cfg = ModelConfig {
        image: ImageConfig { channels: 1, height: 4, width: 4, patch: 2 },
        block,
        horizons: 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store, &mut rng).unwrap();
    for id in model.param_ids() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    (model, store)
}

fn history(rng: &mut impl Rng, visits: usize) -> Vec<Visit> {
    let mut time = 0.0;
    (0..visits)
        .map(|t| {
            if t > 0 {
                time += [12.0, 18.0, 24.0, 30.0, 36.0][rng.gen_range(0..5)];
            }
            let views = (0..3)
                .map(|v| (v == 0 || rng.gen_bool(0.6)).then(|| Tensor::from_fn(&[1, 4, 4], |_| rng.gen_range(-1.0..1.0))))
                .collect();
            Visit { time, content: VisitContent::Views(views) }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn left_padding_changes_nothing(seed in any::<u64>(), visits in 1usize..5, extra in 1usize..4, inter in any::<bool>(), gate in any::<bool>()) {
        let order = if inter { ScanOrder::InterSlice } else { ScanOrder::VisitMajor };
        let (model, store) = small_model(order, gate, visits, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let h = history(&mut rng, visits);
        let tight = model.predict_prepared(&store, &model.prepare_padded(&h, visits).unwrap()).unwrap();
        for len in visits + 1..=visits + extra {
            let padded = model.predict_prepared(&store, &model.prepare_padded(&h, len).unwrap()).unwrap();
            for (a, b) in tight.embedding.iter().zip(&padded.embedding) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in tight.risk.cumulative.iter().zip(&padded.risk.cumulative) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn risk_head_output_is_monotone_for_any_embedding(z in prop::collection::vec(-10.0f64..10.0, 4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = HazardParams {
            weight: Tensor::from_fn(&[4, 6], |_| rng.gen_range(-3.0..3.0)),
            bias: Tensor::from_fn(&[6], |_| rng.gen_range(-3.0..3.0)),
        };
        let r = hazard::risk_head(&z, &params).unwrap();
        prop_assert!(r.cumulative.windows(2).all(|w| w[0] <= w[1]));
    }
}
