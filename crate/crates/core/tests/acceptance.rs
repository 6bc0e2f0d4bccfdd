//! End-to-end acceptance suite. Each test prints one `PASS`/`FAIL` line and
//! asserts the same verdict; tests share a lock so wall-clock budgets are
//! measured without contention.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::*;
use dtmamba::fusion::{clamp_kernels, fuse, FusionParams};
use dtmamba::hazard::{self, ClassWeights, HazardParams, Outcome, RiskOutput};
use dtmamba::metrics::{auc_at, c_index};
use dtmamba::profiler::{bench_throughput, count_flops, count_params, BenchConfig, ProfileConfig};
use dtmamba::scan::{discretize, inverse_softplus, selective_scan_states, ScanParams, TokenSequence};
use dtmamba::synth::{self, generate_records, CohortSpec};
use dtmamba::tensor::Tensor;
use dtmamba::train::{self, cross_validate, prepare_samples, with_threads, Ablation, Checkpoint, TrainConfig};
use dtmamba::{check_model, BlockConfig, Grid, ImageConfig, Model, ModelCheckConfig, ModelConfig, ParamStore, ScanOrder};
use dtmamba::{Visit, VisitContent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(n: usize, name: &str, pass: bool, elapsed: Duration, budget: Duration, detail: &str) {
    let on_time = elapsed <= budget;
    let ok = pass && on_time;
    println!(
        "criterion {n:>2} {name}: {} ({detail}; {:.2}s of {}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    assert!(pass, "criterion {n} {name}: {detail}");
    assert!(on_time, "criterion {n} {name}: took {elapsed:?}, budget {budget:?}");
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Scan of `d` channels and `n` states with `λ = −1`, `B = C = 1` and a
/// constant step `δ`, so that every state follows the scalar recurrence.
fn unit_scan(d: usize, n: usize, delta: f64) -> ScanParams {
    let width = d + 2 * n;
    ScanParams {
        a_log: Tensor::zeros(&[d, n]),
        w_proj: Tensor::zeros(&[d, width]),
        b_proj: Tensor::from_fn(&[width], |i| if i < d { inverse_softplus(delta) } else { 1.0 }),
        d_skip: Tensor::zeros(&[d]),
        gamma_logit: 0.0,
        tau_min: 12.0,
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn criterion_01_step_size_asymptotics() {
    let _g = lock();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, n, len) = (3, 2, 64);
    let tokens = Tensor::from_fn(&[len, d], |_| rng.gen_range(-2.0..2.0));
    let seq = TokenSequence {
        tokens: tokens.clone(),
        gaps: vec![0.0; len],
        valid: vec![true; len],
    };
    let u = |i: usize| &tokens.data()[i * d..(i + 1) * d];

    let small = selective_scan_states(&seq, &unit_scan(d, n, 1e-8)).unwrap();
    let h = |s: &Tensor, i: usize| s.data()[i * d * n..(i + 1) * d * n].to_vec();
    let mut worst_hold = 0.0f64;
    let mut hold_ok = true;
    for i in 1..len {
        let (prev, cur) = (h(&small, i - 1), h(&small, i));
        let step = norm(prev.iter().zip(&cur).map(|(a, b)| b - a));
        let scale = norm(prev.iter().copied()) + norm(u(i).iter().flat_map(|&x| std::iter::repeat_n(x, n)));
        worst_hold = worst_hold.max(step / scale);
        hold_ok &= step <= 1e-6 * scale;
    }

    let large = selective_scan_states(&seq, &unit_scan(d, n, 50.0)).unwrap();
    let mut worst_forget = 0.0f64;
    for i in 0..len {
        let cur = h(&large, i);
        for c in 0..d {
            for k in 0..n {
                // −λ⁻¹·u with λ = −1.
                worst_forget = worst_forget.max((cur[c * n + k] - u(i)[c]).abs());
            }
        }
    }
    let pass = hold_ok && worst_forget <= 1e-12;
    verdict(
        1,
        "step-size asymptotics",
        pass,
        t0.elapsed(),
        Duration::from_secs(1),
        &format!("hold ratio {worst_hold:.2e} ≤ 1e-6, forget error {worst_forget:.2e} ≤ 1e-12"),
    );
}

#[test]
fn criterion_02_zoh_exactness() {
    let _g = lock();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let lambda = -(rng.gen_range((0.01f64).ln()..(5.0f64).ln())).exp();
        let delta = (rng.gen_range((1e-4f64).ln()..(20.0f64).ln())).exp();
        let (u, h0) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        // h(δ) of h' = λh + u, h(0) = h0, written around the fixed point −u/λ.
        let exact = (h0 + u / lambda) * (lambda * delta).exp() - u / lambda;
        let (a, b) = discretize(lambda, delta).unwrap();
        worst = worst.max((a * h0 + b * u - exact).abs());

        let params = ScanParams {
            a_log: Tensor::scalar((-lambda).ln()).reshape(&[1, 1]).unwrap(),
            ..unit_scan(1, 1, delta)
        };
        let seq = TokenSequence {
            tokens: Tensor::new(vec![1, 1], vec![u]).unwrap(),
            gaps: vec![0.0],
            valid: vec![true],
        };
        let h = selective_scan_states(&seq, &params).unwrap().data()[0];
        let lambda_used = -(-lambda).ln().exp();
        let exact_from_rest = (u / lambda_used) * (lambda_used * delta).exp() - u / lambda_used;
        worst = worst.max((h - exact_from_rest).abs());
    }
    verdict(
        2,
        "ZOH exactness",
        worst <= 1e-12,
        t0.elapsed(),
        Duration::from_secs(1),
        &format!("max |discrete − analytic| {worst:.2e} ≤ 1e-12 over 1000 draws"),
    );
}

#[test]
fn criterion_03_gradient_suite() {
    let _g = lock();
    let t0 = Instant::now();
    let cfg = ModelCheckConfig::default();
    assert_eq!(
        (cfg.channels, cfg.state, cfg.visits, cfg.height, cfg.width, cfg.layers),
        (2, 2, 2, 2, 2, 2)
    );
    let check = check_model(&cfg).unwrap();
    let r = &check.report;
    verdict(
        3,
        "gradient suite",
        r.max_rel_error <= 1e-4,
        t0.elapsed(),
        Duration::from_secs(60),
        &format!(
            "max rel error {:.2e} ≤ 1e-4 over {} entries of {} tensors",
            r.max_rel_error, r.entries_checked, check.params
        ),
    );
}

#[test]
fn criterion_04_fusion_oracle() {
    let _g = lock();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.gen_range(1..5);
        let (visits, height, width) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7));
        let kernels = clamp_kernels(visits).unwrap().to_vec();
        let filters: Vec<Tensor> = kernels
            .iter()
            .map(|k| Tensor::from_fn(&[d, k[0], k[1], k[2]], |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let alpha = Tensor::from_fn(&[2], |_| rng.gen_range(-2.0..2.0));
        let x = Tensor::from_fn(&[d, visits, height, width], |_| rng.gen_range(-1.0..1.0));
        let params = FusionParams {
            kernels,
            filters: filters.clone(),
            alpha: alpha.clone(),
        };
        let got = fuse(&x, &params).unwrap();
        worst = worst.max(max_abs_diff(got.data(), fuse_oracle(&x, &filters, alpha.data()).data()));
    }
    verdict(
        4,
        "fusion oracle",
        worst <= 1e-12,
        t0.elapsed(),
        Duration::from_secs(10),
        &format!("max |fuse − neighbor sum| {worst:.2e} ≤ 1e-12 over 100 instances"),
    );
}

fn random_model(rng: &mut ChaCha8Rng, visits: usize, order: ScanOrder, gate: bool) -> (Model, ParamStore) {
    let mut block = BlockConfig::new(rng.gen_range(2..5), rng.gen_range(1..4), Grid {
        visits,
        height: 2,
        width: 2,
    });
    block.scan_order = order;
    block.gate = gate;
    let cfg = ModelConfig {
        image: ImageConfig {
            channels: 1,
            height: 4,
            width: 4,
            patch: 2,
        },
        block,
        horizons: 5,
    };
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store, rng).unwrap();
    for id in model.param_ids() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    (model, store)
}

fn random_visits(rng: &mut ChaCha8Rng, visits: usize) -> Vec<Visit> {
    let mut time = 0.0;
    (0..visits)
        .map(|t| {
            if t > 0 {
                time += [12.0, 18.0, 24.0, 30.0, 36.0][rng.gen_range(0..5)];
            }
            let views = (0..4)
                .map(|v| {
                    (v == 0 || rng.gen_bool(0.7)).then(|| Tensor::from_fn(&[1, 4, 4], |_| rng.gen_range(-1.0..1.0)))
                })
                .collect();
            Visit {
                time,
                content: VisitContent::Views(views),
            }
        })
        .collect()
}

#[test]
fn criterion_05_padding_and_masking_invariance() {
    let _g = lock();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..40 {
        let visits = rng.gen_range(1..5);
        let order = if case % 2 == 0 {
            ScanOrder::VisitMajor
        } else {
            ScanOrder::InterSlice
        };
        let (model, store) = random_model(&mut rng, visits, order, case % 3 == 0);
        let history = random_visits(&mut rng, visits);
        let base = model.predict_prepared(&store, &model.prepare_padded(&history, visits).unwrap()).unwrap();
        for len in visits + 1..=visits + 4 {
            let p = model.predict_prepared(&store, &model.prepare_padded(&history, len).unwrap()).unwrap();
            worst = worst.max(max_abs_diff(&base.embedding, &p.embedding));
            worst = worst.max(max_abs_diff(&base.risk.cumulative, &p.risk.cumulative));
        }
    }

    let mut loss_exact = true;
    let weights = ClassWeights {
        positive: 3.0,
        negative: 0.5,
    };
    for _ in 0..2000 {
        let time = rng.gen_range(1.0..90.0);
        let outcome = if rng.gen_bool(0.5) {
            Outcome::Event { time }
        } else {
            Outcome::Censored { follow_up: time }
        };
        let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let last_known = (1..=5).filter(|&k| outcome.label_at(k).is_some()).max().unwrap_or(0);
        let mut changed = logits.clone();
        for v in changed.iter_mut().skip(last_known + 1) {
            *v += rng.gen_range(-10.0..10.0);
        }
        let a = hazard::loss(&RiskOutput::from_logits(&logits).unwrap(), &outcome, &weights).unwrap();
        let b = hazard::loss(&RiskOutput::from_logits(&changed).unwrap(), &outcome, &weights).unwrap();
        loss_exact &= a == b;
    }
    verdict(
        5,
        "padding and masking invariance",
        worst <= 1e-12 && loss_exact,
        t0.elapsed(),
        Duration::from_secs(10),
        &format!("max output change under left padding {worst:.2e} ≤ 1e-12, loss exact: {loss_exact}"),
    );
}

fn fold_values(report: &dtmamba::train::CvReport) -> Vec<f64> {
    report.fold_c_index().into_iter().map(|c| c.expect("fold c-index")).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_06_gap_discrimination_experiment() {
    let _g = lock();
    let t0 = Instant::now();
    let spec = CohortSpec::default();
    let config = TrainConfig::load(&config_path("dt_experiment.json")).unwrap();
    let records = generate_records(&spec).unwrap();
    let samples = prepare_samples(&config.model, &records).unwrap();
    drop(records);
    let run = |ablation| {
        with_threads(Some(1), || cross_validate(&config, ablation, &samples, spec.folds, None))
            .unwrap()
            .unwrap()
    };
    let full = fold_values(&run(None));
    let no_dt = fold_values(&run(Some(Ablation::Dt)));
    let inter = fold_values(&run(Some(Ablation::Interslice)));

    let dt_margin = mean(&full) - mean(&no_dt);
    let dt_folds = full.iter().zip(&no_dt).filter(|(f, a)| *f - *a >= 0.02).count();
    let inter_margin = mean(&full) - mean(&inter);
    let inter_folds = full.iter().zip(&inter).filter(|(f, a)| f > a).count();
    let fmt = |v: &[f64]| v.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>().join(" ");
    println!("  full       {} mean {:.4}", fmt(&full), mean(&full));
    println!("  no Δt      {} mean {:.4}", fmt(&no_dt), mean(&no_dt));
    println!("  interslice {} mean {:.4}", fmt(&inter), mean(&inter));
    let pass = dt_margin >= 0.02 && dt_folds >= 4 && inter_margin > 0.0 && inter_folds >= 4;
    verdict(
        6,
        "Δt discrimination experiment",
        pass,
        t0.elapsed(),
        Duration::from_secs(30 * 60),
        &format!(
            "full − noΔt {dt_margin:+.4} (≥ 0.02 on {dt_folds}/5 folds), \
             full − interslice {inter_margin:+.4} (ahead on {inter_folds}/5 folds); need ≥ 4/5 each"
        ),
    );
}

#[test]
fn criterion_07_hazard_monotonicity() {
    let _g = lock();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 16;
    let params = HazardParams {
        weight: Tensor::from_fn(&[d, 6], |_| rng.gen_range(-2.0..2.0)),
        bias: Tensor::from_fn(&[6], |_| rng.gen_range(-2.0..2.0)),
    };
    let mut violations = 0;
    for _ in 0..100_000 {
        let scale = (rng.gen_range(-3.0f64..3.0)).exp();
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let r = hazard::risk_head(&z, &params).unwrap();
        violations += r.cumulative.windows(2).filter(|w| w[0] > w[1]).count();
    }
    verdict(
        7,
        "hazard monotonicity",
        violations == 0,
        t0.elapsed(),
        Duration::from_secs(5),
        &format!("{violations} decreasing steps over 10^5 embeddings"),
    );
}

#[test]
fn criterion_08_metric_oracles() {
    let _g = lock();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    let mut compared = 0;
    for _ in 0..50 {
        let n = rng.gen_range(20..=30);
        let samples = random_cohort(&mut rng, n);
        compared += 1;
        if c_index(&samples).ok() != brute_c_index(&samples) {
            mismatches += 1;
        }
        for year in 1..=5 {
            compared += 1;
            if auc_at(&samples, year).ok() != brute_auc(&samples, year) {
                mismatches += 1;
            }
        }
    }
    verdict(
        8,
        "metric oracles",
        mismatches == 0,
        t0.elapsed(),
        Duration::from_secs(10),
        &format!("{mismatches} of {compared} values differ from pair enumeration"),
    );
}

#[test]
fn criterion_09_profiler() {
    let _g = lock();
    let t0 = Instant::now();
    let cfg = ProfileConfig::default();
    let block = &cfg.block;
    let lengths = [256usize, 512, 1024, 2048, 4096];
    let f1 = count_flops(block, 1).unwrap().total;
    let affine = lengths.iter().all(|&l| count_flops(block, l).unwrap().total == f1 * l as u64)
        && lengths
            .windows(2)
            .all(|w| count_flops(block, w[0] + w[1]).unwrap().total
                == count_flops(block, w[0]).unwrap().total + count_flops(block, w[1]).unwrap().total);

    let bench = BenchConfig {
        lengths: lengths.to_vec(),
        ..BenchConfig::default()
    };
    let report = with_threads(Some(1), || bench_throughput(&bench)).unwrap().unwrap();
    for row in &report.rows {
        println!(
            "  L={:>5} median {:.4}s {:>10.0} tokens/s cv {:.3}",
            row.tokens, row.median_secs, row.tokens_per_sec, row.cv
        );
    }
    let slope_ok = (0.85..=1.15).contains(&report.slope);

    let params = count_params(block).unwrap().total as f64;
    let flops = count_flops(block, cfg.tokens).unwrap().total as f64;
    let (p_ratio, f_ratio) = (params / 1.8e6, flops / 0.32e9);
    let within = |r: f64| (0.5..=2.0).contains(&r);
    verdict(
        9,
        "profiler",
        affine && slope_ok && within(p_ratio) && within(f_ratio),
        t0.elapsed(),
        Duration::from_secs(300),
        &format!(
            "FLOPs affine: {affine}; runtime slope {:.3} in [0.85, 1.15]; \
             params {params:.0} = {p_ratio:.2}× 1.8M, FLOPs {flops:.3e} = {f_ratio:.2}× 0.32G (need within 2×)",
            report.slope
        ),
    );
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_10_determinism() {
    let _g = lock();
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let spec = CohortSpec {
        patients: 40,
        image_size: 16,
        views: 2,
        visits: [2, 4],
        folds: 2,
        seed: 10,
        ..Default::default()
    };
    let image = ImageConfig {
        channels: 1,
        height: 16,
        width: 16,
        patch: 8,
    };
    let mut config = TrainConfig::for_image(image, 4).unwrap();
    config.model.block.channels = 4;
    config.model.block.state = 4;
    config.epochs = 2;
    config.batch_size = 4;
    config.learning_rates = vec![1e-2, 3e-3];

    let run = |name: &str| {
        let data = tmp.path().join(name).join("data");
        synth::generate(&spec, &data).unwrap();
        let (_, records) = synth::load_dataset(&data).unwrap();
        let samples = prepare_samples(&config.model, &records).unwrap();
        let out = tmp.path().join(name).join("run");
        with_threads(Some(1), || cross_validate(&config, None, &samples, spec.folds, Some(&out)))
            .unwrap()
            .unwrap();
        let ckpt = Checkpoint::load(&out.join("lr1e-2").join("fold0").join("checkpoint.json")).unwrap();
        let held_out: Vec<_> = samples.into_iter().filter(|s| s.fold == 0).collect();
        let eval = train::evaluate(&ckpt.model, &ckpt.params, &held_out).unwrap();
        (tree_bytes(&tmp.path().join(name)), eval)
    };
    let (files_a, eval_a) = run("a");
    let (files_b, eval_b) = run("b");
    let differing = files_a
        .iter()
        .zip(&files_b)
        .filter(|(a, b)| a != b)
        .count()
        + files_a.len().abs_diff(files_b.len());
    let pass = differing == 0 && eval_a == eval_b;
    verdict(
        10,
        "determinism",
        pass,
        t0.elapsed(),
        Duration::from_secs(600),
        &format!(
            "{} files compared, {differing} differ; eval reports equal: {}",
            files_a.len(),
            eval_a == eval_b
        ),
    );
}
