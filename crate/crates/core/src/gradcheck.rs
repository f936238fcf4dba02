//! Finite-difference verification of every backward rule.
//!
//! A check rebuilds the graph from perturbed parameters and compares the
//! central difference `(f(t + h) - f(t - h)) / 2h` with the analytic
//! gradient, element by element, always in f64.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{forward_features, init_backbone, BackboneConfig};
use crate::conv::{concat_channels, conv3d, max_pool2, upsample2};
use crate::evidential::{bba, dempster_fuse, distance_activation, es_forward_graph};
use crate::graph::{Graph, GraphError, ParamSet, Var};
use crate::model::{init_es_params, softmax_masses, EsInit};
use crate::objectives::{
    dice_loss_op, segmentation_map, total_loss_graph, uncertainty_loss_op, DiceMode,
};
use crate::ops;
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Below this magnitude the absolute error is compared instead.
pub const ABS_FLOOR: f64 = 1e-8;

/// Builds a scalar loss from parameters bound in the graph.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>) -> Result<Var, GraphError> + 'a;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeafReport {
    pub leaf: String,
    pub elements: usize,
    /// elements whose stencil crossed a ReLU or pooling breakpoint; these
    /// are differenced with every piecewise op held on its base piece
    pub kinked: usize,
    pub max_error: f64,
    pub worst_element: usize,
    pub passed: bool,
}

pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FLOOR {
        diff
    } else {
        diff / scale
    }
}

fn evaluate(build: &Builder, params: &ParamSet<f64>, fault: Option<&str>) -> Result<Graph<f64>, GraphError> {
    let mut g = Graph::new();
    g.inject_fault(fault);
    g.bind(params)?;
    let out = build(&mut g)?;
    g.forward_eval(out)?;
    Ok(g)
}

fn loss(build: &Builder, params: &ParamSet<f64>, frozen: Option<&[usize]>) -> Result<(f64, Vec<usize>), GraphError> {
    let mut g = Graph::new();
    if let Some(state) = frozen {
        g.replay_branches(state.to_vec());
    }
    g.bind(params)?;
    let out = build(&mut g)?;
    let v = g.forward_eval(out)?;
    Ok((v, g.branch_state()))
}

/// Checks every element of one leaf.
pub fn finite_difference_check(
    build: &Builder,
    params: &ParamSet<f64>,
    leaf: &str,
    step: f64,
    tol: f64,
) -> Result<LeafReport, GraphError> {
    check_leaves(build, params, &[leaf], step, tol, None).map(|mut v| v.remove(0))
}

/// Checks the listed leaves (all leaves when empty). `fault` names an op
/// whose backward is deliberately corrupted.
pub fn check_leaves(
    build: &Builder,
    params: &ParamSet<f64>,
    leaves: &[&str],
    step: f64,
    tol: f64,
    fault: Option<&str>,
) -> Result<Vec<LeafReport>, GraphError> {
    let base = evaluate(build, params, fault)?;
    let grads = base.backward_gradients()?;
    let branch = base.branch_state();
    let names: Vec<String> = if leaves.is_empty() {
        params.names().cloned().collect()
    } else {
        leaves.iter().map(|s| s.to_string()).collect()
    };
    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        let analytic = grads.get(&name).ok_or_else(|| GraphError::UnknownParam(name.clone()))?;
        let mut probe = params.clone();
        let mut max_error = 0.0f64;
        let mut worst = 0;
        let mut kinked = 0;
        for k in 0..analytic.len() {
            let orig = params.get(&name).expect("present").data()[k];
            let mut stencil = |frozen: Option<&[usize]>| -> Result<_, GraphError> {
                probe.get_mut(&name).expect("present").data_mut()[k] = orig + step;
                let up = loss(build, &probe, frozen)?;
                probe.get_mut(&name).expect("present").data_mut()[k] = orig - step;
                let down = loss(build, &probe, frozen)?;
                probe.get_mut(&name).expect("present").data_mut()[k] = orig;
                Ok((up, down))
            };
            let ((mut up, up_branch), (mut down, down_branch)) = stencil(None)?;
            if up_branch != branch || down_branch != branch {
                kinked += 1;
                ((up, _), (down, _)) = stencil(Some(&branch))?;
            }
            let numeric = (up - down) / (2.0 * step);
            let e = gradient_error(analytic.data()[k], numeric);
            if e > max_error || e.is_nan() {
                max_error = e;
                worst = k;
            }
        }
        reports.push(LeafReport {
            leaf: name,
            elements: analytic.len(),
            kinked,
            max_error,
            worst_element: worst,
            passed: max_error <= tol,
        });
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub op: String,
    pub instances: usize,
    pub elements: usize,
    pub kinked: usize,
    pub max_error: f64,
    /// leaf and instance of the largest error
    pub worst: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub step: f64,
    pub tol: f64,
    pub cases: Vec<CaseReport>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn render(&self) -> String {
        let mut s = format!("gradient check (step {:e}, tol {:e})\n", self.step, self.tol);
        s.push_str(&format!(
            "{:<24} {:>9} {:>9} {:>7} {:>12}  {:<6} worst\n",
            "op", "instances", "elements", "kinked", "max_error", "result"
        ));
        for c in &self.cases {
            s.push_str(&format!(
                "{:<24} {:>9} {:>9} {:>7} {:>12.3e}  {:<6} {}\n",
                c.op,
                c.instances,
                c.elements,
                c.kinked,
                c.max_error,
                if c.passed { "pass" } else { "FAIL" },
                c.worst
            ));
        }
        s.push_str(if self.passed { "all checks passed\n" } else { "gradient check FAILED\n" });
        s
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseReport> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub instances: usize,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
    pub fault: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
            seed: 0,
            fault: None,
        }
    }
}

type CaseFn = fn(&mut ChaCha8Rng, usize) -> (ParamSet<f64>, Box<Builder<'static>>);

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64_slice(shape, &v).expect("shape")
}

/// Values at least `gap` apart from each other and from zero, so that a
/// perturbation of one step never reorders them or flips a sign.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5 - n as f64 / 2.0) * gap).collect();
    for k in (1..n).rev() {
        levels.swap(k, rng.random_range(0..=k));
    }
    let v: Vec<f64> = levels.iter().map(|&x| if x.abs() < gap / 2.0 { x + gap } else { x }).collect();
    Tensor::from_f64_slice(shape, &v).expect("shape")
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
    Tensor::from_f64_slice(shape, &v).expect("shape")
}

/// `sum(x * w)` with a fixed random weight, so every output element
/// contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph<f64>, x: Var, w: &Tensor<f64>) -> Result<Var, GraphError> {
    let w = g.constant(w.clone());
    let p = ops::mul(g, x, w)?;
    Ok(ops::sum(g, p))
}

fn params(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (k, v) in entries {
        p.insert(k, v);
    }
    p
}

fn case_affine(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let k = rng.random_range(-2.0..2.0);
    let p = params(vec![("x", uniform(rng, &[3, 4], -1.0, 1.0)), ("y", uniform(rng, &[3, 4], -1.0, 1.0))]);
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    (p, Box::new(move |g| {
        let (x, y) = (g.param_var("x")?, g.param_var("y")?);
        let kx = ops::scale(g, x, k);
        let a = ops::add(g, kx, y)?;
        let b = ops::sub(g, a, x)?;
        let sq = ops::square(g, b);
        weighted_sum(g, sq, &w)
    }))
}

fn case_products(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let p = params(vec![("x", uniform(rng, &[5], -2.0, 2.0)), ("y", uniform(rng, &[5], -2.0, 2.0))]);
    let w = uniform(rng, &[5], -1.0, 1.0);
    (p, Box::new(move |g| {
        let (x, y) = (g.param_var("x")?, g.param_var("y")?);
        let xy = ops::mul(g, x, y)?;
        let xyx = ops::mul(g, xy, x)?;
        weighted_sum(g, xyx, &w)
    }))
}

fn case_exp(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let p = params(vec![("x", uniform(rng, &[6], -2.0, 2.0))]);
    let w = uniform(rng, &[6], -1.0, 1.0);
    (p, Box::new(move |g| {
        let x = g.param_var("x")?;
        let e = ops::exp(g, x);
        weighted_sum(g, e, &w)
    }))
}

fn case_log(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let p = params(vec![("x", uniform(rng, &[6], 0.2, 3.0))]);
    let w = uniform(rng, &[6], -1.0, 1.0);
    (p, Box::new(move |g| {
        let x = g.param_var("x")?;
        let l = ops::log(g, x);
        weighted_sum(g, l, &w)
    }))
}

fn case_square(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let p = params(vec![("x", uniform(rng, &[6], -2.0, 2.0))]);
    let w = uniform(rng, &[6], -1.0, 1.0);
    (p, Box::new(move |g| {
        let x = g.param_var("x")?;
        let s = ops::square(g, x);
        weighted_sum(g, s, &w)
    }))
}

fn case_sigmoid(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let p = params(vec![("x", uniform(rng, &[6], -4.0, 4.0))]);
    let w = uniform(rng, &[6], -1.0, 1.0);
    (p, Box::new(move |g| {
        let x = g.param_var("x")?;
        let s = ops::sigmoid_op(g, x);
        weighted_sum(g, s, &w)
    }))
}

fn case_softmax(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let p = params(vec![("x", uniform(rng, &[3, 4], -3.0, 3.0))]);
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    (p, Box::new(move |g| {
        let x = g.param_var("x")?;
        let s = ops::softmax_last(g, x);
        weighted_sum(g, s, &w)
    }))
}

fn case_relu(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let p = params(vec![("x", separated(rng, &[10], 0.05))]);
    let w = uniform(rng, &[10], -1.0, 1.0);
    (p, Box::new(move |g| {
        let x = g.param_var("x")?;
        let r = ops::relu(g, x);
        let s = ops::square(g, r);
        weighted_sum(g, s, &w)
    }))
}

fn case_reductions(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let p = params(vec![("x", uniform(rng, &[2, 5], -2.0, 2.0))]);
    (p, Box::new(move |g| {
        let x = g.param_var("x")?;
        let s = ops::square(g, x);
        let m = ops::mean(g, s);
        let t = ops::sum(g, x);
        let t2 = ops::square(g, t);
        ops::add(g, m, t2)
    }))
}

fn case_conv(rng: &mut ChaCha8Rng, i: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let k = if i % 2 == 0 { 3 } else { 1 };
    let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let dims = [rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(2..=4)];
    let p = params(vec![
        ("x", uniform(rng, &[2, ci, dims[0], dims[1], dims[2]], -1.0, 1.0)),
        ("w", uniform(rng, &[co, ci, k, k, k], -1.0, 1.0)),
        ("b", uniform(rng, &[co], -1.0, 1.0)),
    ]);
    let w = uniform(rng, &[2, co, dims[0], dims[1], dims[2]], -1.0, 1.0);
    (p, Box::new(move |g| {
        let (x, wv, b) = (g.param_var("x")?, g.param_var("w")?, g.param_var("b")?);
        let y = conv3d(g, x, wv, b)?;
        let y2 = ops::square(g, y);
        weighted_sum(g, y2, &w)
    }))
}

fn case_pool_upsample(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let p = params(vec![("x", separated(rng, &[1, 2, 4, 4, 2], 0.05))]);
    let w = uniform(rng, &[1, 2, 4, 4, 2], -1.0, 1.0);
    (p, Box::new(move |g| {
        let x = g.param_var("x")?;
        let pooled = max_pool2(g, x)?;
        let up = upsample2(g, pooled)?;
        let y = ops::mul(g, up, x)?;
        weighted_sum(g, y, &w)
    }))
}

fn case_concat(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let p = params(vec![
        ("a", uniform(rng, &[2, 1, 2, 2, 2], -1.0, 1.0)),
        ("b", uniform(rng, &[2, 2, 2, 2, 2], -1.0, 1.0)),
    ]);
    let w = uniform(rng, &[2, 3, 2, 2, 2], -1.0, 1.0);
    (p, Box::new(move |g| {
        let (a, b) = (g.param_var("a")?, g.param_var("b")?);
        let c = concat_channels(g, a, b)?;
        let c2 = ops::square(g, c);
        weighted_sum(g, c2, &w)
    }))
}

fn case_distance(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    // features and prototypes sit on opposite sides of the origin and the
    // weights are positive, so no gradient component cancels to near zero
    let (c, i) = (rng.random_range(1..=4), rng.random_range(1..=6));
    let p = params(vec![
        ("x", uniform(rng, &[2, c, 2, 2, 1], 0.1, 0.5)),
        ("p", uniform(rng, &[i, c], -0.5, -0.1)),
        ("gamma", uniform(rng, &[i], 0.01, 0.1)),
    ]);
    let w = uniform(rng, &[2, 4, i], 0.5, 1.5);
    (p, Box::new(move |g| {
        let (x, pv, gm) = (g.param_var("x")?, g.param_var("p")?, g.param_var("gamma")?);
        let s = distance_activation(g, x, pv, gm)?;
        weighted_sum(g, s, &w)
    }))
}

fn case_bba(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let i = rng.random_range(1..=6);
    let p = params(vec![
        ("s", uniform(rng, &[3, i], 0.0, 1.0)),
        ("alpha", uniform(rng, &[i], 0.05, 0.95)),
        ("u", uniform(rng, &[i, 2], 0.0, 1.0)),
    ]);
    let w = uniform(rng, &[3, i, 3], -1.0, 1.0);
    (p, Box::new(move |g| {
        let (s, a, u) = (g.param_var("s")?, g.param_var("alpha")?, g.param_var("u")?);
        let m = bba(g, s, a, u)?;
        weighted_sum(g, m, &w)
    }))
}

/// Random simple mass functions; every other instance uses enough
/// prototypes to exercise the log-space products.
fn case_fuse(rng: &mut ChaCha8Rng, inst: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let i = if inst % 2 == 0 { rng.random_range(1..=6) } else { rng.random_range(17..=24) };
    let mut m = Vec::with_capacity(4 * i * 3);
    for _ in 0..4 * i {
        let strength = rng.random_range(0.05..0.9);
        let u = rng.random_range(0.0..1.0);
        m.extend([strength * u, strength * (1.0 - u), 1.0 - strength]);
    }
    let p = params(vec![("m", Tensor::from_f64_slice(&[4, i, 3], &m).expect("shape"))]);
    let w = uniform(rng, &[4, 3], -1.0, 1.0);
    (p, Box::new(move |g| {
        let mv = g.param_var("m")?;
        let f = dempster_fuse(g, mv)?;
        weighted_sum(g, f, &w)
    }))
}

/// ES parameters plus constant features; the feature gradient path is
/// covered by the distance and backbone cases.
fn es_instance(rng: &mut ChaCha8Rng) -> (ParamSet<f64>, Tensor<f64>, [usize; 3]) {
    let c = rng.random_range(1..=4);
    let init = EsInit {
        prototypes: rng.random_range(1..=6),
        alpha: rng.random_range(0.2..0.8),
        gamma: rng.random_range(0.01..0.1),
    };
    let mut p = init_es_params::<f64>(&init, c, rng.random()).to_params();
    // move away from the symmetric start so every parameter matters; the
    // gamma roots stay at their positive initial value
    for (name, t) in p.iter_mut() {
        if name == crate::evidential::GAMMA_ROOTS {
            continue;
        }
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p.insert(crate::evidential::PROTOTYPES, uniform(rng, &[init.prototypes, c], -0.3, 0.3));
    let dims = [2, 2, 2];
    let x = uniform(rng, &[2, c, dims[0], dims[1], dims[2]], -0.3, 0.3);
    (p, x, dims)
}

fn case_es_forward(rng: &mut ChaCha8Rng, inst: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let (p, x, dims) = es_instance(rng);
    let n: usize = dims.iter().product();
    // positive weights on one focal set per instance, rotating through
    // {a}, {b} and omega; signed weights over all three cancel too easily
    let mut w = uniform(rng, &[2, n, 3], 0.5, 1.5);
    for (k, v) in w.data_mut().iter_mut().enumerate() {
        if k % 3 != inst % 3 {
            *v = 0.0;
        }
    }
    (p, Box::new(move |g| {
        let x = g.constant(x.clone());
        let m = es_forward_graph(g, x)?;
        weighted_sum(g, m, &w)
    }))
}

fn dice_case(rng: &mut ChaCha8Rng, mode: DiceMode) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let (p, x, dims) = es_instance(rng);
    let truth = binary(rng, &[2, dims.iter().product()]);
    (p, Box::new(move |g| {
        let x = g.constant(x.clone());
        let m = es_forward_graph(g, x)?;
        let s = segmentation_map(g, m, mode)?;
        let t = g.constant(truth.clone());
        dice_loss_op(g, s, t)
    }))
}

fn case_dice_pignistic(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    dice_case(rng, DiceMode::Pignistic)
}

fn case_dice_singleton(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    dice_case(rng, DiceMode::Singleton)
}

fn case_uncertainty(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let (p, x, _) = es_instance(rng);
    (p, Box::new(move |g| {
        let x = g.constant(x.clone());
        let m = es_forward_graph(g, x)?;
        uncertainty_loss_op(g, m)
    }))
}

fn case_total(rng: &mut ChaCha8Rng, inst: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let (p, x, dims) = es_instance(rng);
    let truth = binary(rng, &[2, dims.iter().product()]);
    // a visible penalty weight so the regularizer gradient is checked too
    let lambda = rng.random_range(0.01..0.5);
    let mode = if inst % 2 == 0 { DiceMode::Pignistic } else { DiceMode::Singleton };
    (p, Box::new(move |g| {
        let x = g.constant(x.clone());
        let m = es_forward_graph(g, x)?;
        let t = g.constant(truth.clone());
        Ok(total_loss_graph(g, m, t, lambda, mode)?.total)
    }))
}

fn case_softmax_head(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let p = params(vec![("z", uniform(rng, &[2, 2, 2, 2, 1], -2.0, 2.0))]);
    let truth = binary(rng, &[2, 4]);
    (p, Box::new(move |g| {
        let z = g.param_var("z")?;
        let m = softmax_masses(g, z)?;
        let s = segmentation_map(g, m, DiceMode::Pignistic)?;
        let t = g.constant(truth.clone());
        dice_loss_op(g, s, t)
    }))
}

/// The tiny backbone on an `8^3` two-channel input.
fn case_backbone(rng: &mut ChaCha8Rng, _: usize) -> (ParamSet<f64>, Box<Builder<'static>>) {
    let cfg = BackboneConfig {
        channels: vec![2, 4],
        ..Default::default()
    };
    let mut p = init_backbone::<f64>(&cfg, rng.random()).expect("valid config");
    // nonzero biases so no unit sits exactly at a ReLU kink
    for (name, t) in p.iter_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let input = uniform(rng, &[1, 2, 8, 8, 8], 0.0, 1.0);
    let w = uniform(rng, &[1, 2, 8, 8, 8], -1.0, 1.0);
    (p, Box::new(move |g| {
        let x = g.constant(input.clone());
        let f = forward_features(g, &cfg, x).map_err(|e| match e {
            crate::backbone::BackboneError::Graph(e) => e,
            other => GraphError::Numerical {
                op: "backbone",
                detail: other.to_string(),
            },
        })?;
        weighted_sum(g, f, &w)
    }))
}

pub const SUITE: &[(&str, CaseFn)] = &[
    ("affine", case_affine),
    ("products", case_products),
    ("exp", case_exp),
    ("log", case_log),
    ("square", case_square),
    ("sigmoid", case_sigmoid),
    ("softmax", case_softmax),
    ("relu", case_relu),
    ("reductions", case_reductions),
    ("conv3d", case_conv),
    ("max_pool+upsample", case_pool_upsample),
    ("concat", case_concat),
    ("distance_activation", case_distance),
    ("bba", case_bba),
    ("dempster_fuse", case_fuse),
    ("es_forward", case_es_forward),
    ("dice_loss(pignistic)", case_dice_pignistic),
    ("dice_loss(singleton)", case_dice_singleton),
    ("uncertainty_loss", case_uncertainty),
    ("total_loss", case_total),
    ("softmax_head", case_softmax_head),
    ("backbone(2,4)@8^3", case_backbone),
];

/// Runs one named case over `instances` random draws.
pub fn run_case(name: &str, case: CaseFn, cfg: &SuiteConfig) -> Result<CaseReport, GraphError> {
    let mut rng = rng_for(cfg.seed, &format!("gradcheck.{name}"));
    let mut report = CaseReport {
        op: name.to_string(),
        instances: cfg.instances,
        elements: 0,
        kinked: 0,
        max_error: 0.0,
        worst: String::new(),
        passed: true,
    };
    for inst in 0..cfg.instances {
        let (params, build) = case(&mut rng, inst);
        let leaves = check_leaves(build.as_ref(), &params, &[], cfg.step, cfg.tol, cfg.fault.as_deref())?;
        for l in leaves {
            report.elements += l.elements;
            report.kinked += l.kinked;
            if l.max_error > report.max_error || l.max_error.is_nan() || report.worst.is_empty() {
                report.max_error = l.max_error;
                report.worst = format!("{}[{}] in instance {inst}", l.leaf, l.worst_element);
            }
            report.passed &= l.passed;
        }
    }
    Ok(report)
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport, GraphError> {
    let cases = SUITE
        .iter()
        .map(|&(name, case)| run_case(name, case, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let passed = cases.iter().all(|c| c.passed);
    Ok(SuiteReport {
        step: cfg.step,
        tol: cfg.tol,
        cases,
        passed,
    })
}
