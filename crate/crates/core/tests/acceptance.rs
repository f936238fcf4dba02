//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line per
//! criterion straight to stdout (bypassing capture) and then asserts.
//!
//! The three training criteria share one test because they share the runs.
//! On one CPU core that test takes most of an hour.

use std::cell::RefCell;
use std::io::Write;
use std::time::Instant;

use evidseg::checkpoint::Checkpoint;
use evidseg::config::RunConfig;
use evidseg::dataset::phantom_cohort;
use evidseg::evidential::{es_forward, fuse_masses, EsParams, FeatureMap, MassFunction, MassMap};
use evidseg::gradcheck::{run_suite, SuiteConfig};
use evidseg::inference::Model;
use evidseg::metrics::{binary_map, compute_metrics, confusion, evaluate_cases, ConfusionCounts};
use evidseg::model::{init_model, HeadKind};
use evidseg::objectives::{dice_loss, uncertainty_loss};
use evidseg::phantom::PhantomParams;
use evidseg::trainer::{train, Control, EpochRecord};
use evidseg::volume::{read_volume, write_volume, Modality, PatientCase, Volume};
use evidseg::{ParamSet, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestError, TestRng, TestRunner};

fn report(n: u32, name: &str, passed: bool, detail: &str) {
    let mark = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {n} [{mark}] {name}: {detail}");
    let _ = out.flush();
}

/// The failure reason without the (possibly huge) failing input.
fn outcome<T>(r: &Result<(), TestError<T>>) -> String {
    match r {
        Ok(()) => "ok".to_string(),
        Err(TestError::Fail(reason, _)) => format!("failed: {reason}"),
        Err(TestError::Abort(reason)) => format!("aborted: {reason}"),
    }
}

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

// ---------------------------------------------------------------------------
// 1. fused masses are valid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct HeadInstance {
    voxels: usize,
    channels: usize,
    protos: usize,
    features: Vec<f64>,
    prototypes: Vec<f64>,
    membership_logits: Vec<f64>,
    alpha_logits: Vec<f64>,
    gamma_roots: Vec<f64>,
}

fn head_instance() -> impl Strategy<Value = HeadInstance> {
    (1..=4usize, 1..=6usize, 1..=30usize).prop_flat_map(|(voxels, channels, protos)| {
        (
            vec(-4.0..4.0f64, voxels * channels),
            vec(-4.0..4.0f64, protos * channels),
            vec(-6.0..6.0f64, protos * 2),
            vec(-6.0..6.0f64, protos),
            vec(-2.0..2.0f64, protos),
        )
            .prop_map(move |(features, prototypes, membership_logits, alpha_logits, gamma_roots)| HeadInstance {
                voxels,
                channels,
                protos,
                features,
                prototypes,
                membership_logits,
                alpha_logits,
                gamma_roots,
            })
    })
}

fn eval_head(h: &HeadInstance) -> MassMap {
    let params = EsParams {
        prototypes: Tensor::new(vec![h.protos, h.channels], h.prototypes.clone()).unwrap(),
        membership_logits: Tensor::new(vec![h.protos, 2], h.membership_logits.clone()).unwrap(),
        alpha_logits: Tensor::new(vec![h.protos], h.alpha_logits.clone()).unwrap(),
        gamma_roots: Tensor::new(vec![h.protos], h.gamma_roots.clone()).unwrap(),
    };
    let features = FeatureMap::new([h.voxels, 1, 1], h.channels, h.features.clone()).unwrap();
    es_forward(&features, &params).unwrap()
}

#[test]
fn mass_validity() {
    let t0 = Instant::now();
    let worst = RefCell::new((0.0f64, f64::INFINITY, 0usize));
    let result = runner(10_000).run(&head_instance(), |h| {
        let map = eval_head(&h);
        let mut w = worst.borrow_mut();
        for m in &map.masses {
            let sum = m.m_a + m.m_b + m.m_omega;
            w.0 = w.0.max((sum - 1.0).abs());
            w.1 = w.1.min(m.m_a.min(m.m_b).min(m.m_omega));
            w.2 += 1;
            prop_assert!(m.m_a >= 0.0 && m.m_b >= 0.0 && m.m_omega >= 0.0, "negative mass {m:?}");
            prop_assert!((sum - 1.0).abs() <= 1e-9, "sum {sum}");
        }
        Ok(())
    });
    let secs = t0.elapsed().as_secs_f64();
    let (dev, min, voxels) = *worst.borrow();
    let passed = result.is_ok() && secs < 60.0;
    report(
        1,
        "mass validity",
        passed,
        &format!("10000 instances ({voxels} voxels), max |sum-1| {dev:.1e}, min mass {min:.1e}, {secs:.1}s; {}", outcome(&result)),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 2. closed-form fusion against power-set combination
// ---------------------------------------------------------------------------

/// Masses indexed by subset bitmask: bit 0 is lymphoma, bit 1 background.
type PowerSet = [f64; 4];

fn to_power_set(m: &MassFunction) -> PowerSet {
    [0.0, m.m_a, m.m_b, m.m_omega]
}

/// Conjunctive combination over subsets, then conflict renormalization.
fn dempster_pair(x: &PowerSet, y: &PowerSet) -> PowerSet {
    let mut out = [0.0; 4];
    for (a, &ma) in x.iter().enumerate() {
        for (b, &mb) in y.iter().enumerate() {
            out[a & b] += ma * mb;
        }
    }
    let k = out[0];
    [0.0, out[1] / (1.0 - k), out[2] / (1.0 - k), out[3] / (1.0 - k)]
}

fn power_set_fusion(ms: &[MassFunction]) -> PowerSet {
    ms[1..]
        .iter()
        .fold(to_power_set(&ms[0]), |acc, m| dempster_pair(&acc, &to_power_set(m)))
}

fn simple_bba() -> impl Strategy<Value = MassFunction> {
    (0.0..1.0f64, 0.0..=1.0f64, 0.0..=1.0f64)
        .prop_map(|(alpha, u, s)| MassFunction::new(alpha * u * s, alpha * (1.0 - u) * s, 1.0 - alpha * s))
}

fn fusion_error(ms: &[MassFunction]) -> f64 {
    let fused = fuse_masses(ms).unwrap();
    let oracle = power_set_fusion(ms);
    [fused.m_a - oracle[1], fused.m_b - oracle[2], fused.m_omega - oracle[3]]
        .iter()
        .fold(0.0f64, |acc, d| acc.max(d.abs()))
}

#[test]
fn dempster_oracle() {
    let t0 = Instant::now();
    let worst = RefCell::new(0.0f64);
    let result = runner(1_000).run(&vec(simple_bba(), 1..=6), |ms| {
        let e = fusion_error(&ms);
        let mut w = worst.borrow_mut();
        *w = w.max(e);
        prop_assert!(e <= 1e-10, "error {e:e} for {ms:?}");
        Ok(())
    });
    let m = MassFunction::new(0.35, 0.15, 0.5);
    let selfish = fuse_masses(&[m, m]).unwrap();
    let expected = [0.527933, 0.192737, 0.279330];
    let worked = [selfish.m_a, selfish.m_b, selfish.m_omega]
        .iter()
        .zip(expected)
        .all(|(v, e)| (v - e).abs() < 5e-7);
    let worked_oracle = fusion_error(&[m, m]) <= 1e-10;
    let secs = t0.elapsed().as_secs_f64();
    let passed = result.is_ok() && worked && worked_oracle && secs < 60.0;
    report(
        2,
        "Dempster oracle",
        passed,
        &format!(
            "1000 sets, max error {:.1e}; self-fusion of (0.35,0.15,0.5) = ({:.6}, {:.6}, {:.6}), {secs:.1}s; {}",
            *worst.borrow(),
            selfish.m_a,
            selfish.m_b,
            selfish.m_omega,
            outcome(&result)
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 3. gradient gate
// ---------------------------------------------------------------------------

const GATED_OPS: [&str; 9] = [
    "distance_activation",
    "bba",
    "dempster_fuse",
    "es_forward",
    "dice_loss(pignistic)",
    "dice_loss(singleton)",
    "uncertainty_loss",
    "total_loss",
    "backbone(2,4)@8^3",
];

#[test]
fn gradient_gate() {
    let t0 = Instant::now();
    let cfg = SuiteConfig::default();
    let suite = run_suite(&cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let mut notes = Vec::new();
    let mut ok = (cfg.step, cfg.tol, cfg.instances) == (1e-3, 1e-4, 20);
    for op in GATED_OPS {
        match suite.cases.iter().find(|c| c.op == op) {
            Some(c) => {
                ok &= c.passed && c.instances >= 20;
                notes.push(format!("{op} {:.1e}", c.max_error));
            }
            None => {
                ok = false;
                notes.push(format!("{op} missing"));
            }
        }
    }
    let failures: Vec<&str> = suite.failures().map(|c| c.op.as_str()).collect();
    let passed = ok && failures.is_empty() && secs < 300.0;
    report(
        3,
        "gradient gate",
        passed,
        &format!("{} ops x {} instances, {secs:.1}s; failing {failures:?}; {}", suite.cases.len(), cfg.instances, notes.join(", ")),
    );
    if !passed {
        print!("{}", suite.render());
    }
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 4-6. training on phantoms
// ---------------------------------------------------------------------------

const SEEDS: [u64; 3] = [0, 1, 2];
const TARGET_VAL_DICE: f64 = 0.80;

struct SeedRun {
    seed: u64,
    test_dice: f64,
    train_case_dice: f64,
    first_ignorance: f64,
    last_ignorance: f64,
    epochs: usize,
    es_first: Option<usize>,
    softmax_first: Option<usize>,
    softmax_epochs: usize,
}

fn first_reaching(log: &[EpochRecord]) -> Option<usize> {
    log.iter().find(|r| r.val_dice >= TARGET_VAL_DICE).map(|r| r.epoch)
}

fn select(cases: &[PatientCase], ids: &[String]) -> Vec<PatientCase> {
    ids.iter().map(|id| cases.iter().find(|c| &c.id == id).unwrap().clone()).collect()
}

fn run_seed(seed: u64) -> SeedRun {
    let mut cfg = RunConfig::default();
    cfg.train.seed = seed;
    let (cases, split) = phantom_cohort(200, [32; 3], seed, &PhantomParams::default(), cfg.data.ratios).unwrap();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (160, 20, 20));
    let (train_cases, val_cases, test_cases) =
        (select(&cases, &split.train), select(&cases, &split.val), select(&cases, &split.test));

    let es = train(&cfg, &train_cases, &val_cases, |_| Control::Continue).unwrap();
    let es_first = first_reaching(&es.log);
    let model = Model::new(cfg.clone(), es.best.params.clone());
    let metrics = evaluate_cases(&test_cases, |c| model.segment(c).map(|d| d.binary).map_err(|e| e.to_string())).unwrap();
    let train_case = &train_cases[0];
    let pred = model.segment(train_case).unwrap().binary;
    let train_case_dice = compute_metrics(&confusion(&pred, &binary_map(&train_case.mask).unwrap()).unwrap()).dice;

    // the softmax head only has to be followed until the ES head got there
    let mut soft_cfg = cfg.clone();
    soft_cfg.es.head = HeadKind::Softmax;
    let budget = es_first.unwrap_or(cfg.train.epochs);
    let soft = train(&soft_cfg, &train_cases, &val_cases, |r| {
        if r.val_dice >= TARGET_VAL_DICE || r.epoch >= budget {
            Control::Stop
        } else {
            Control::Continue
        }
    })
    .unwrap();

    SeedRun {
        seed,
        test_dice: metrics.aggregate.dice,
        train_case_dice,
        first_ignorance: es.log[0].val_mean_ignorance,
        last_ignorance: es.log.last().unwrap().val_mean_ignorance,
        epochs: es.log.len(),
        es_first,
        softmax_first: first_reaching(&soft.log),
        softmax_epochs: soft.log.len(),
    }
}

fn es_no_slower(r: &SeedRun) -> bool {
    match (r.es_first, r.softmax_first) {
        (Some(es), Some(soft)) => es <= soft,
        (Some(_), None) => true,
        (None, _) => false,
    }
}

#[test]
fn phantom_training() {
    let t0 = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let secs = t0.elapsed().as_secs_f64();

    let dice_ok = runs.iter().filter(|r| r.test_dice >= 0.85).count();
    let c4 = dice_ok >= 2;
    let dice: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} test {:.4} (train case {:.4})", r.seed, r.test_dice, r.train_case_dice))
        .collect();
    report(
        4,
        "phantom training",
        c4,
        &format!("{dice_ok}/3 seeds with test Dice >= 0.85: {}; {secs:.0}s for all runs", dice.join(", ")),
    );

    let c5 = runs.iter().all(|r| r.epochs == 50 && r.last_ignorance < 0.5 * r.first_ignorance);
    let trend: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} {:.5} -> {:.5} (ratio {:.3})", r.seed, r.first_ignorance, r.last_ignorance, r.last_ignorance / r.first_ignorance))
        .collect();
    report(5, "ignorance trend", c5, &format!("epoch 1 -> {}: {}", runs[0].epochs, trend.join(", ")));

    let conv_ok = runs.iter().filter(|r| es_no_slower(r)).count();
    let c6 = conv_ok >= 2;
    let conv: Vec<String> = runs
        .iter()
        .map(|r| {
            let soft = match r.softmax_first {
                Some(e) => e.to_string(),
                None => format!(">{}", r.softmax_epochs),
            };
            format!("seed {} ES {:?} vs softmax {soft}", r.seed, r.es_first)
        })
        .collect();
    report(
        6,
        "convergence vs softmax",
        c6,
        &format!("{conv_ok}/3 seeds where ES reaches val Dice {TARGET_VAL_DICE} no later: {}", conv.join(", ")),
    );

    assert!(c4 && c5 && c6);
}

// ---------------------------------------------------------------------------
// 7. metrics against brute-force counting
// ---------------------------------------------------------------------------

fn binary_vec(len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64]
        .prop_flat_map(move |p| vec(prop::bool::weighted(p).prop_map(u8::from), len))
}

fn map_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1..=2000usize).prop_flat_map(|len| (binary_vec(len), binary_vec(len)))
}

fn brute_force_counts(pred: &[u8], truth: &[u8]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        let (p, t) = (pred[i] == 1, truth[i] == 1);
        if p && t {
            c.tp += 1;
        } else if p {
            c.fp += 1;
        } else if t {
            c.fn_ += 1;
        } else {
            c.tn += 1;
        }
    }
    c
}

/// Reference values with the vacuous-denominator conventions spelled out.
fn reference_metrics(c: &ConfusionCounts) -> [f64; 5] {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let sens = if c.tp + c.fn_ == 0 { 1.0 } else { tp / (tp + fn_) };
    let spec = if c.tn + c.fp == 0 { 1.0 } else { tn / (tn + fp) };
    let prec = match (c.tp + c.fp, c.fn_) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => tp / (tp + fp),
    };
    let dice = if 2 * c.tp + c.fp + c.fn_ == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64
    };
    let f1 = if prec + sens == 0.0 {
        0.0
    } else {
        2.0 * prec * sens / (prec + sens)
    };
    [dice, sens, spec, prec, f1]
}

#[test]
fn metrics_oracle() {
    let worst_identity = RefCell::new(0.0f64);
    let result = runner(1_000).run(&map_pair(), |(pred, truth)| {
        let counts = confusion(&pred, &truth).unwrap();
        prop_assert_eq!(counts, brute_force_counts(&pred, &truth));
        let m = compute_metrics(&counts);
        prop_assert_eq!([m.dice, m.sensitivity, m.specificity, m.precision, m.f1], reference_metrics(&counts));
        let gap = (m.f1 - m.dice).abs();
        let mut w = worst_identity.borrow_mut();
        *w = w.max(gap);
        prop_assert!(gap <= 1e-12, "f1 {} vs dice {} for {:?}", m.f1, m.dice, counts);
        Ok(())
    });
    let passed = result.is_ok();
    report(
        7,
        "metrics oracle",
        passed,
        &format!("1000 map pairs, counts and metrics exact, max |f1-dice| {:.1e}; {}", *worst_identity.borrow(), outcome(&result)),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 8. format round trips
// ---------------------------------------------------------------------------

fn finite_f32() -> impl Strategy<Value = f32> {
    use prop::num::f32::{NEGATIVE, NORMAL, POSITIVE, SUBNORMAL, ZERO};
    POSITIVE | NEGATIVE | NORMAL | SUBNORMAL | ZERO
}

fn random_volume() -> impl Strategy<Value = Volume> {
    let modality = prop_oneof![Just(Modality::Pet), Just(Modality::Ct), Just(Modality::Mask), Just(Modality::Map)];
    ([1..=10usize, 1..=10usize, 1..=10usize], [0.05..8.0f64, 0.05..8.0f64, 0.05..8.0f64], modality).prop_flat_map(
        |(dims, spacing, modality)| {
            let n: usize = dims.iter().product();
            let voxels = if modality == Modality::Mask {
                vec(prop::bool::ANY.prop_map(f32::from), n).boxed()
            } else {
                vec(finite_f32(), n).boxed()
            };
            voxels.prop_map(move |v| Volume::new(dims, spacing, modality, v).unwrap())
        },
    )
}

fn same_bits(a: &Volume, b: &Volume) -> bool {
    a.dims == b.dims
        && a.modality == b.modality
        && a.spacing.iter().zip(&b.spacing).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.voxels.len() == b.voxels.len()
        && a.voxels.iter().zip(&b.voxels).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn params_same_bits(a: &ParamSet<f32>, b: &ParamSet<f32>) -> bool {
    a.names().eq(b.names())
        && a.iter().zip(b.iter()).all(|((_, x), (_, y))| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[test]
fn format_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.evol");
    let volumes = runner(100).run(&random_volume(), |v| {
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        prop_assert!(same_bits(&v, &back), "volume {:?} changed", v.dims);
        Ok(())
    });

    let mut cfg = RunConfig::default();
    cfg.backbone.channels = vec![2, 4];
    cfg.es.prototypes = 3;
    let base = init_model::<f32>(&cfg.backbone, HeadKind::Evidential, &cfg.es.init(), 9).unwrap();
    let sizes: Vec<usize> = base.iter().map(|(_, t)| t.data().len()).collect();
    let total: usize = sizes.iter().sum();
    let ck_path = dir.path().join("m.ckpt");
    let strategy = (vec(finite_f32(), total), 0..100usize, prop::option::of(0.0..=1.0f64));
    let checkpoints = runner(20).run(&strategy, |(values, epoch, val_dice)| {
        let mut params = base.clone();
        let mut rest = &values[..];
        for (_, t) in params.iter_mut() {
            let n = t.data().len();
            *t = Tensor::new(t.shape().to_vec(), rest[..n].to_vec()).unwrap();
            rest = &rest[n..];
        }
        let ck = Checkpoint {
            epoch,
            val_dice,
            config: cfg.clone(),
            params,
        };
        ck.save(&ck_path).unwrap();
        let back = Checkpoint::load(&ck_path).unwrap();
        prop_assert!(params_same_bits(&ck.params, &back.params));
        prop_assert_eq!(&back.config, &ck.config);
        prop_assert_eq!(back.epoch, ck.epoch);
        prop_assert_eq!(back.val_dice.map(f64::to_bits), ck.val_dice.map(f64::to_bits));
        prop_assert_eq!(back.to_bytes(), std::fs::read(&ck_path).unwrap());
        Ok(())
    });
    let passed = volumes.is_ok() && checkpoints.is_ok();
    report(
        8,
        "format round trip",
        passed,
        &format!(
            "100 volumes {}, 20 checkpoints of {total} parameters {}",
            outcome(&volumes),
            outcome(&checkpoints)
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 9. loss point values
// ---------------------------------------------------------------------------

#[test]
fn loss_point_values() {
    let d = dice_loss(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap();
    let map = MassMap::new([2, 1, 1], vec![MassFunction::new(0.2, 0.3, 0.5), MassFunction::new(0.4, 0.3, 0.3)]).unwrap();
    let u = uncertainty_loss(&map).unwrap();
    let passed = (d - 1.0 / 3.0).abs() <= 1e-6 && (u - 0.17).abs() <= 1e-12;
    report(9, "loss point values", passed, &format!("dice loss {d:.9} (1/3), uncertainty loss {u:.15} (0.17)"));
    assert!(passed);
}
