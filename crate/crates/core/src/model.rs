//! Backbone plus head. Two heads are supported: the evidential head, and a
//! two-class softmax head used as a baseline. Both emit per-voxel masses
//! `[B, N, 3]`; the softmax head puts no mass on ignorance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_features, init_backbone, BackboneConfig, BackboneError};
use crate::conv::conv3d;
use crate::evidential::{
    es_forward_graph, EsParams, ALPHA_LOGITS, GAMMA_ROOTS, MEMBERSHIP_LOGITS, PROTOTYPES,
};
use crate::graph::{Graph, GraphError, Op, ParamSet, Var};
use crate::seed::rng_for;
use crate::tensor::{Real, Tensor, TensorError};

pub const SOFTMAX_WEIGHT: &str = "softmax.weight";
pub const SOFTMAX_BIAS: &str = "softmax.bias";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Evidential,
    Softmax,
}

/// Initial values of the evidential head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsInit {
    pub prototypes: usize,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for EsInit {
    fn default() -> Self {
        Self {
            prototypes: 20,
            alpha: 0.5,
            gamma: 0.01,
        }
    }
}

impl EsInit {
    pub fn validate(&self) -> Result<(), String> {
        if self.prototypes == 0 {
            return Err("es.prototypes must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("es.alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(format!("es.gamma must be nonnegative, got {}", self.gamma));
        }
        Ok(())
    }
}

/// Prototypes uniform in `[-1, 1]`, near-uniform memberships, and the given
/// initial `alpha` and `gamma`.
pub fn init_es_params<F: Real>(init: &EsInit, feature_dim: usize, seed: u64) -> EsParams<F> {
    let mut rng = rng_for(seed, "init.es");
    let i = init.prototypes;
    let protos: Vec<f64> = (0..i * feature_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let member: Vec<f64> = (0..i * 2).map(|_| rng.random_range(-0.1..=0.1)).collect();
    let alpha_logit = (init.alpha / (1.0 - init.alpha)).ln();
    let t = |shape: &[usize], v: &[f64]| Tensor::from_f64_slice(shape, v).expect("shape");
    EsParams {
        prototypes: t(&[i, feature_dim], &protos),
        membership_logits: t(&[i, 2], &member),
        alpha_logits: Tensor::full(&[i], F::lit(alpha_logit)),
        gamma_roots: Tensor::full(&[i], F::lit(init.gamma.sqrt())),
    }
}

/// `(name, shape)` of every parameter of a model.
pub fn model_param_shapes(backbone: &BackboneConfig, head: HeadKind, es: &EsInit) -> Vec<(String, Vec<usize>)> {
    let mut shapes = backbone.param_shapes();
    let c = backbone.feature_dim();
    match head {
        HeadKind::Evidential => {
            let i = es.prototypes;
            shapes.push((PROTOTYPES.to_string(), vec![i, c]));
            shapes.push((MEMBERSHIP_LOGITS.to_string(), vec![i, 2]));
            shapes.push((ALPHA_LOGITS.to_string(), vec![i]));
            shapes.push((GAMMA_ROOTS.to_string(), vec![i]));
        }
        HeadKind::Softmax => {
            shapes.push((SOFTMAX_WEIGHT.to_string(), vec![2, c, 1, 1, 1]));
            shapes.push((SOFTMAX_BIAS.to_string(), vec![2]));
        }
    }
    shapes
}

pub fn init_model<F: Real>(
    backbone: &BackboneConfig,
    head: HeadKind,
    es: &EsInit,
    seed: u64,
) -> Result<ParamSet<F>, BackboneError> {
    let mut p = init_backbone(backbone, seed)?;
    let c = backbone.feature_dim();
    match head {
        HeadKind::Evidential => p.extend(init_es_params(es, c, seed).to_params()),
        HeadKind::Softmax => {
            let mut rng = rng_for(seed, "init.softmax");
            let bound = (6.0 / c as f64).sqrt();
            let w: Vec<f64> = (0..2 * c).map(|_| rng.random_range(-bound..bound)).collect();
            p.insert(SOFTMAX_WEIGHT, Tensor::from_f64_slice(&[2, c, 1, 1, 1], &w).expect("shape"));
            p.insert(SOFTMAX_BIAS, Tensor::zeros(&[2]));
        }
    }
    Ok(p)
}

struct SoftmaxMasses {
    inputs: [Var; 1],
}

impl<F: Real> Op<F> for SoftmaxMasses {
    fn name(&self) -> &'static str {
        "softmax_masses"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        graph: &Graph<F>,
        output: &Tensor<F>,
        grad: &Tensor<F>,
        _wants: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let shape = graph.shape(self.inputs[0]).to_vec();
        let n: usize = shape[2..].iter().product();
        let mut gz = vec![F::zero(); shape.iter().product()];
        for b in 0..shape[0] {
            for v in 0..n {
                let o = (b * n + v) * 3;
                let p = output.data()[o];
                let d = (grad.data()[o] - grad.data()[o + 1]) * p * (F::one() - p);
                gz[b * 2 * n + v] = d;
                gz[b * 2 * n + n + v] = -d;
            }
        }
        vec![Some(Tensor::new(shape, gz).expect("shape"))]
    }
}

/// Two-channel logits `[B, 2, X, Y, Z]` to masses `(p, 1 - p, 0)`.
pub fn softmax_masses<F: Real>(g: &mut Graph<F>, logits: Var) -> Result<Var, GraphError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 5 || shape[1] != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_masses",
            detail: format!("expected [B, 2, X, Y, Z], got {shape:?}"),
        }
        .into());
    }
    let n: usize = shape[2..].iter().product();
    let z = g.value(logits).data();
    let mut out = Vec::with_capacity(shape[0] * n * 3);
    for b in 0..shape[0] {
        for v in 0..n {
            let p = crate::ops::sigmoid(z[b * 2 * n + v] - z[b * 2 * n + n + v]);
            out.extend([p, F::one() - p, F::zero()]);
        }
    }
    let value = Tensor::new(vec![shape[0], n, 3], out)?;
    Ok(g.record(SoftmaxMasses { inputs: [logits] }, value))
}

/// Per-voxel masses `[B, N, 3]` for input `[B, in_channels, X, Y, Z]`,
/// reading parameters bound in `g`.
pub fn forward_masses<F: Real>(
    g: &mut Graph<F>,
    backbone: &BackboneConfig,
    head: HeadKind,
    input: Var,
) -> Result<Var, BackboneError> {
    let features = forward_features(g, backbone, input)?;
    Ok(match head {
        HeadKind::Evidential => es_forward_graph(g, features)?,
        HeadKind::Softmax => {
            let w = g.param_var(SOFTMAX_WEIGHT)?;
            let b = g.param_var(SOFTMAX_BIAS)?;
            let logits = conv3d(g, features, w, b)?;
            softmax_masses(g, logits)?
        }
    })
}

/// Inference helper: masses for a batch, parameters taken from `params`.
pub fn predict_masses<F: Real>(
    params: &ParamSet<F>,
    backbone: &BackboneConfig,
    head: HeadKind,
    input: Tensor<F>,
) -> Result<Tensor<F>, BackboneError> {
    let mut g = Graph::new();
    g.bind(params)?;
    let x = g.constant(input);
    let m = forward_masses(&mut g, backbone, head, x)?;
    if !g.value(m).all_finite() {
        return Err(GraphError::NonFinite {
            node: m.index(),
            op: "forward_masses",
        }
        .into());
    }
    Ok(g.value(m).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn es_init_matches_requested_values() {
        let es: EsParams<f64> = init_es_params(&EsInit::default(), 4, 0);
        assert_eq!(es.prototypes.shape(), [20, 4]);
        assert!(es.prototypes.data().iter().all(|v| v.abs() <= 1.0));
        assert!(es.alphas().iter().all(|a| (a - 0.5).abs() < 1e-12));
        assert!(es.gammas().iter().all(|g| (g - 0.01).abs() < 1e-12));
        assert!(es.memberships().iter().all(|u| (u - 0.5).abs() < 0.1));
    }

    #[test]
    fn both_heads_emit_valid_masses() {
        let bb = BackboneConfig {
            channels: vec![2, 4],
            ..Default::default()
        };
        let x = Tensor::full(&[1, 2, 8, 8, 8], 0.3f64);
        for head in [HeadKind::Evidential, HeadKind::Softmax] {
            let p = init_model::<f64>(&bb, head, &EsInit::default(), 5).unwrap();
            let m = predict_masses(&p, &bb, head, x.clone()).unwrap();
            assert_eq!(m.shape(), [1, 512, 3]);
            for v in m.data().chunks(3) {
                assert!(v.iter().all(|&x| x >= 0.0));
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            if head == HeadKind::Softmax {
                assert!(m.data().chunks(3).all(|v| v[2] == 0.0));
            }
        }
    }

    #[test]
    fn heads_own_distinct_params() {
        let bb = BackboneConfig::default();
        let es = init_model::<f32>(&bb, HeadKind::Evidential, &EsInit::default(), 0).unwrap();
        let sm = init_model::<f32>(&bb, HeadKind::Softmax, &EsInit::default(), 0).unwrap();
        for name in [PROTOTYPES, ALPHA_LOGITS, GAMMA_ROOTS] {
            assert!(es.get(name).is_some() && sm.get(name).is_none());
        }
        assert!(sm.get(SOFTMAX_WEIGHT).is_some());
        for (p, head) in [(&es, HeadKind::Evidential), (&sm, HeadKind::Softmax)] {
            let shapes = model_param_shapes(&bb, head, &EsInit::default());
            assert_eq!(shapes.len(), p.len());
            for (name, shape) in shapes {
                assert_eq!(p.get(&name).unwrap().shape(), shape.as_slice());
            }
        }
        // identical backbone for identical seeds
        assert_eq!(es.get("backbone.head.weight"), sm.get("backbone.head.weight"));
    }
}
