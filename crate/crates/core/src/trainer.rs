//! Patch-based Adam training. Each epoch ends with a validation pass and the
//! best validation Dice is kept.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{concat_modalities, stack_batch, BackboneError};
use crate::checkpoint::Checkpoint;
use crate::config::{AdamConfig, ConfigError, RunConfig};
use crate::evidential::{decide, EsParams};
use crate::gradcheck::{run_suite, SuiteConfig, SuiteReport};
use crate::graph::{Gradients, Graph, GraphError, ParamSet};
use crate::inference::{crop_channels, crop_grid, sliding_window_masses, InferenceError};
use crate::metrics::{binary_map, compute_metrics, confusion, MetricsError};
use crate::model::{forward_masses, init_model, HeadKind};
use crate::objectives::{dice_loss_op, segmentation_map, total_loss_graph, LossBreakdown};
use crate::seed::rng_for;
use crate::tensor::{Real, Tensor, TensorError};
use crate::volume::{PatientCase, VolumeError};

/// Random instances per case in the pre-training gradient gate.
pub const GATE_INSTANCES: usize = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("gradient check gate failed\n{0}")]
    Gradcheck(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },
    #[error("parameter `{name}`: {detail}")]
    Param { name: String, detail: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    /// Gradient or loss trouble, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::Gradcheck(_) | TrainError::NonFinite { .. })
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub t: u64,
    m: ParamSet<F>,
    v: ParamSet<F>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let mut m = ParamSet::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Self {
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient.
pub fn adam_step<F: Real>(
    params: &mut ParamSet<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let param_err = |detail: String| TrainError::Param {
            name: name.clone(),
            detail,
        };
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(param_err("missing from optimizer state".into()));
        };
        let g = grads.get(name);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(param_err(format!("gradient shape {:?} vs {:?}", g.shape(), p.shape())));
            }
        }
        if m.shape() != p.shape() {
            return Err(param_err(format!("state shape {:?} vs {:?}", m.shape(), p.shape())));
        }
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
            let mi = cfg.beta1 * md[i].as_f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * vd[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
            md[i] = F::lit(mi);
            vd[i] = F::lit(vi);
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            pd[i] = F::lit(pd[i].as_f64() - step);
        }
    }
    Ok(())
}

/// A case turned into network input plus flat mask.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub id: String,
    pub dims: [usize; 3],
    /// normalized `[2, X, Y, Z]`
    pub input: Tensor<f32>,
    pub mask: Vec<u8>,
    /// flat indices of lesion voxels
    pub lesion: Vec<usize>,
}

impl PreparedCase {
    pub fn new(case: &PatientCase) -> Result<Self, TrainError> {
        let mask = binary_map(&case.mask)?;
        let lesion = mask.iter().enumerate().filter(|(_, &m)| m == 1).map(|(i, _)| i).collect();
        Ok(Self {
            id: case.id.clone(),
            dims: case.dims(),
            input: concat_modalities(&case.pet, &case.ct)?,
            mask,
            lesion,
        })
    }
}

/// Patch origin: centred (as far as the borders allow) on a random lesion
/// voxel with probability `fg`, uniform otherwise.
fn patch_origin(case: &PreparedCase, size: [usize; 3], fg: f64, rng: &mut ChaCha8Rng) -> [usize; 3] {
    let [_, y, z] = case.dims;
    let centred = !case.lesion.is_empty() && rng.random::<f64>() < fg;
    if centred {
        let v = case.lesion[rng.random_range(0..case.lesion.len())];
        let c = [v / (y * z), (v / z) % y, v % z];
        [0, 1, 2].map(|a| c[a].saturating_sub(size[a] / 2).min(case.dims[a] - size[a]))
    } else {
        [0, 1, 2].map(|a| rng.random_range(0..=case.dims[a] - size[a]))
    }
}

/// Losses averaged over an epoch's steps, plus validation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_u: f64,
    pub loss_reg: f64,
    pub total: f64,
    pub val_dice: f64,
    /// mean `m_omega` over validation voxels
    pub val_mean_ignorance: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// parameters of the epoch with the best validation Dice
    pub best: Checkpoint,
    pub last: ParamSet<f32>,
    pub log: Vec<EpochRecord>,
    pub gate: Option<SuiteReport>,
}

/// The finite-difference suite on a few instances per case.
pub fn gradcheck_gate() -> Result<SuiteReport, GraphError> {
    run_suite(&SuiteConfig {
        instances: GATE_INSTANCES,
        ..Default::default()
    })
}

struct Validation {
    dice: f64,
    mean_ignorance: f64,
}

fn validate(cfg: &RunConfig, params: &ParamSet<f32>, cases: &[PreparedCase]) -> Result<Validation, TrainError> {
    let rows = cases
        .par_iter()
        .map(|c| {
            let map = sliding_window_masses(
                params,
                &cfg.backbone,
                cfg.es.head,
                &c.input,
                cfg.eval.window,
                cfg.eval.stride,
            )?;
            let d = decide(&map, cfg.eval.decision);
            let dice = compute_metrics(&confusion(&d.binary, &c.mask)?).dice;
            Ok((dice, map.mean_ignorance()))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let n = rows.len() as f64;
    Ok(Validation {
        dice: rows.iter().map(|r| r.0).sum::<f64>() / n,
        mean_ignorance: rows.iter().map(|r| r.1).sum::<f64>() / n,
    })
}

fn check_constraints(params: &ParamSet<f32>) {
    if let Ok(es) = EsParams::from_params(params) {
        let u = es.memberships();
        debug_assert!(u.chunks(2).all(|p| (p[0] + p[1] - 1.0).abs() < 1e-5));
        debug_assert!(es.alphas().iter().all(|&a| a > 0.0 && a < 1.0));
    }
}

/// One optimizer step on a batch. Returns the loss breakdown.
fn train_step(
    cfg: &RunConfig,
    params: &mut ParamSet<f32>,
    adam: &mut AdamState<f32>,
    input: Tensor<f32>,
    truth: Tensor<f32>,
) -> Result<LossBreakdown, GraphError> {
    let mut g = Graph::new();
    g.bind(params)?;
    let x = g.constant(input);
    let masses = forward_masses(&mut g, &cfg.backbone, cfg.es.head, x).map_err(|e| match e {
        BackboneError::Graph(e) => e,
        other => GraphError::Numerical {
            op: "forward_masses",
            detail: other.to_string(),
        },
    })?;
    let t = g.constant(truth);
    let (out, breakdown): (_, Box<dyn Fn(&Graph<f32>) -> LossBreakdown>) = match cfg.es.head {
        HeadKind::Evidential => {
            let lv = total_loss_graph(&mut g, masses, t, cfg.loss.lambda as f32, cfg.loss.dice_mode)?;
            (lv.total, Box::new(move |g| lv.breakdown(g)))
        }
        HeadKind::Softmax => {
            let s = segmentation_map(&mut g, masses, cfg.loss.dice_mode)?;
            let d = dice_loss_op(&mut g, s, t)?;
            let b = move |g: &Graph<f32>| {
                let v = g.value(d).item() as f64;
                LossBreakdown {
                    loss_d: v,
                    total: v,
                    ..Default::default()
                }
            };
            (d, Box::new(b))
        }
    };
    g.forward_eval(out)?;
    let grads = g.backward_gradients()?;
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
        return Err(GraphError::Numerical {
            op: "backward",
            detail: format!("non-finite gradient for `{name}`"),
        });
    }
    adam_step(params, &grads, adam, cfg.train.lr, &cfg.train.adam).map_err(|e| GraphError::Numerical {
        op: "adam",
        detail: e.to_string(),
    })?;
    Ok(breakdown(&g))
}

/// Trains from scratch. `on_epoch` sees every record as it is produced and
/// may end the run early.
pub fn train<C>(
    cfg: &RunConfig,
    train_cases: &[PatientCase],
    val_cases: &[PatientCase],
    mut on_epoch: C,
) -> Result<TrainOutcome, TrainError>
where
    C: FnMut(&EpochRecord) -> Control,
{
    cfg.validate()?;
    if train_cases.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_cases.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let gate = if cfg.train.gradcheck_gate {
        let report = gradcheck_gate()?;
        if !report.passed {
            return Err(TrainError::Gradcheck(report.render()));
        }
        Some(report)
    } else {
        None
    };

    let train_set = train_cases.iter().map(PreparedCase::new).collect::<Result<Vec<_>, _>>()?;
    let val_set = val_cases.iter().map(PreparedCase::new).collect::<Result<Vec<_>, _>>()?;
    let patch = cfg.data.patch_dims;
    for c in &train_set {
        cfg.backbone.check_dims([0, 1, 2].map(|a| patch[a].min(c.dims[a])))?;
    }

    let seed = cfg.train.seed;
    let mut params = init_model::<f32>(&cfg.backbone, cfg.es.head, &cfg.es.init(), seed)?;
    let mut adam = AdamState::new(&params);
    let mut log = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<(usize, f64, ParamSet<f32>)> = None;

    for epoch in 1..=cfg.train.epochs {
        let mut rng = rng_for(seed, &format!("train.epoch.{epoch}"));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        for batch in order.chunks(cfg.train.batch_size) {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut truth = Vec::new();
            for &i in batch {
                let c = &train_set[i];
                let size = [0, 1, 2].map(|a| patch[a].min(c.dims[a]));
                let origin = patch_origin(c, size, cfg.data.foreground_patch_fraction, &mut rng);
                inputs.push(crop_channels(&c.input, origin, size)?);
                truth.extend(crop_grid(&c.mask, c.dims, origin, size).into_iter().map(f32::from));
            }
            let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
            let x = stack_batch(&refs)?;
            let n = truth.len() / batch.len();
            let t = Tensor::new(vec![batch.len(), n], truth)?;
            let b = train_step(cfg, &mut params, &mut adam, x, t).map_err(|e| TrainError::NonFinite {
                epoch,
                step: steps + 1,
                detail: e.to_string(),
            })?;
            check_constraints(&params);
            sum.loss_d += b.loss_d;
            sum.loss_u += b.loss_u;
            sum.loss_reg += b.loss_reg;
            sum.total += b.total;
            steps += 1;
        }
        let k = steps as f64;
        let val = validate(cfg, &params, &val_set)?;
        let record = EpochRecord {
            epoch,
            loss_d: sum.loss_d / k,
            loss_u: sum.loss_u / k,
            loss_reg: sum.loss_reg / k,
            total: sum.total / k,
            val_dice: val.dice,
            val_mean_ignorance: val.mean_ignorance,
        };
        if best.as_ref().is_none_or(|b| record.val_dice > b.1) {
            best = Some((epoch, record.val_dice, params.clone()));
        }
        let control = on_epoch(&record);
        log.push(record);
        if control == Control::Stop {
            break;
        }
    }

    let (epoch, val_dice, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: Checkpoint {
            epoch,
            val_dice: Some(val_dice),
            config: cfg.clone(),
            params: best_params,
        },
        last: params,
        log,
        gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f32) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(v));
        p
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar_params(1.0).cast::<f64>();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &scalar_params(1.0).cast(), &mut s, 1e-3, &AdamConfig::default()).unwrap();
        // m_hat = v_hat = g = 1, so the step is lr / (1 + eps)
        let moved = 1.0 - p.get("theta").unwrap().item();
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{moved}");
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = scalar_params(0.25);
        let mut s = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &scalar_params(3.0), &mut s, 0.0, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.get("theta").unwrap().item(), 0.25);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = scalar_params(0.25);
        let mut s = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &scalar_params(0.0), &mut s, 1e-3, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.get("theta").unwrap().item(), 0.25);
    }

    #[test]
    fn steady_gradient_step_tends_to_lr() {
        let mut p: ParamSet<f64> = ParamSet::new();
        p.insert("a", Tensor::scalar(0.0));
        p.insert("b", Tensor::scalar(0.0));
        let mut g = ParamSet::new();
        g.insert("a", Tensor::scalar(-0.3));
        g.insert("b", Tensor::scalar(5.0));
        let mut s = AdamState::new(&p);
        let mut last = (0.0, 0.0);
        for _ in 0..1000 {
            let before = (p.get("a").unwrap().item(), p.get("b").unwrap().item());
            adam_step(&mut p, &g, &mut s, 1e-3, &AdamConfig::default()).unwrap();
            last = (p.get("a").unwrap().item() - before.0, p.get("b").unwrap().item() - before.1);
        }
        assert!((last.0 - 1e-3).abs() < 1e-6);
        assert!((last.1 + 1e-3).abs() < 1e-6);
    }

    #[test]
    fn gradient_shape_mismatch_is_an_error() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        let mut g = ParamSet::new();
        g.insert("theta", Tensor::zeros(&[2]));
        assert!(matches!(
            adam_step(&mut p, &g, &mut s, 1e-3, &AdamConfig::default()),
            Err(TrainError::Param { .. })
        ));
    }
}
