//! Training objective: soft Dice loss, uncertainty loss on the ignorance
//! mass, and an L1 penalty on the prototype evidence strengths.

use serde::{Deserialize, Serialize};

use crate::evidential::{MassMap, ALPHA_LOGITS};
use crate::graph::{Graph, GraphError, Op, Var};
use crate::ops;
use crate::tensor::{Real, Tensor, TensorError};

/// Smoothing added to both numerator and denominator of the Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

/// Which per-voxel quantity plays the role of the soft segmentation `S`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceMode {
    /// `S = m({a}) + m(Omega) / 2`
    #[default]
    Pignistic,
    /// `S = m({a})`
    Singleton,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_d: f64,
    pub loss_u: f64,
    pub loss_reg: f64,
    pub total: f64,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("segmentation has {seg} voxels but ground truth has {truth}")]
    DimMismatch { seg: usize, truth: usize },
    #[error("uncertainty loss over an empty map")]
    Empty,
}

/// `1 - (2 sum(S G) + eps) / (sum(S) + sum(G) + eps)`.
pub fn dice_loss<F: Real>(seg: &[F], truth: &[F]) -> Result<F, ObjectiveError> {
    if seg.len() != truth.len() {
        return Err(ObjectiveError::DimMismatch {
            seg: seg.len(),
            truth: truth.len(),
        });
    }
    let (inter, denom) = dice_terms(seg, truth);
    Ok(F::one() - (F::lit(2.0) * inter + F::lit(DICE_EPS)) / denom)
}

fn dice_terms<F: Real>(seg: &[F], truth: &[F]) -> (F, F) {
    let mut inter = F::zero();
    let mut total = F::zero();
    for (&s, &g) in seg.iter().zip(truth) {
        inter += s * g;
        total += s + g;
    }
    (inter, total + F::lit(DICE_EPS))
}

/// Mean squared ignorance mass.
pub fn uncertainty_loss(map: &MassMap) -> Result<f64, ObjectiveError> {
    if map.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    Ok(map.masses.iter().map(|m| m.m_omega * m.m_omega).sum::<f64>() / map.len() as f64)
}

pub fn segmentation_values(map: &MassMap, mode: DiceMode) -> Vec<f64> {
    map.masses
        .iter()
        .map(|m| match mode {
            DiceMode::Pignistic => m.pignistic(),
            DiceMode::Singleton => m.m_a,
        })
        .collect()
}

/// Loss decomposition for one volume; `alphas` are the squashed evidence
/// strengths.
pub fn total_loss(
    map: &MassMap,
    truth: &[f64],
    alphas: &[f64],
    lambda: f64,
    mode: DiceMode,
) -> Result<LossBreakdown, ObjectiveError> {
    let loss_d = dice_loss(&segmentation_values(map, mode), truth)?;
    let loss_u = uncertainty_loss(map)?;
    let loss_reg = lambda * alphas.iter().map(|a| a.abs()).sum::<f64>();
    Ok(LossBreakdown {
        loss_d,
        loss_u,
        loss_reg,
        total: loss_d + loss_u + loss_reg,
    })
}

// ---------------------------------------------------------------------------
// Graph operations
// ---------------------------------------------------------------------------

struct SegmentationMap {
    inputs: [Var; 1],
    mode: DiceMode,
}

impl<F: Real> Op<F> for SegmentationMap {
    fn name(&self) -> &'static str {
        match self.mode {
            DiceMode::Pignistic => "pignistic_map",
            DiceMode::Singleton => "singleton_map",
        }
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        graph: &Graph<F>,
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _wants: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let shape = graph.shape(self.inputs[0]).to_vec();
        let half = F::lit(0.5);
        let mut d = Vec::with_capacity(grad.len() * 3);
        for &g in grad.data() {
            match self.mode {
                DiceMode::Pignistic => d.extend([g, F::zero(), half * g]),
                DiceMode::Singleton => d.extend([g, F::zero(), F::zero()]),
            }
        }
        vec![Some(Tensor::new(shape, d).expect("shape"))]
    }
}

/// Soft lymphoma map `[...]` from fused masses `[..., 3]`.
pub fn segmentation_map<F: Real>(g: &mut Graph<F>, masses: Var, mode: DiceMode) -> Result<Var, GraphError> {
    let shape = g.shape(masses).to_vec();
    if shape.last() != Some(&3) || shape.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "segmentation_map",
            detail: format!("expected [..., 3], got {shape:?}"),
        }
        .into());
    }
    let half = F::lit(0.5);
    let data = g
        .value(masses)
        .data()
        .chunks(3)
        .map(|m| match mode {
            DiceMode::Pignistic => m[0] + half * m[2],
            DiceMode::Singleton => m[0],
        })
        .collect();
    let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
    Ok(g.record(SegmentationMap { inputs: [masses], mode }, value))
}

struct DiceLoss {
    inputs: [Var; 2],
}

impl<F: Real> Op<F> for DiceLoss {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        graph: &Graph<F>,
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        wants: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let seg = graph.value(self.inputs[0]);
        let truth = graph.value(self.inputs[1]);
        let batch = seg.shape()[0];
        let per = seg.len() / batch;
        let k = grad.item() / F::lit(batch as f64);
        let two = F::lit(2.0);
        let mut d = Vec::with_capacity(seg.len());
        for (s, t) in seg.data().chunks(per).zip(truth.data().chunks(per)) {
            let (inter, denom) = dice_terms(s, t);
            let num = two * inter + F::lit(DICE_EPS);
            let d2 = denom * denom;
            d.extend(t.iter().map(|&gv| -k * (two * gv * denom - num) / d2));
        }
        vec![Some(Tensor::new(seg.shape().to_vec(), d).expect("shape")), wants[1].then(|| Tensor::zeros(truth.shape()))]
    }
}

/// Batch-averaged soft Dice loss; `seg` and `truth` are `[B, ...]`.
pub fn dice_loss_op<F: Real>(g: &mut Graph<F>, seg: Var, truth: Var) -> Result<Var, GraphError> {
    let (s, t) = (g.value(seg), g.value(truth));
    if s.shape() != t.shape() || s.shape().is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "dice_loss",
            detail: format!("{:?} vs {:?}", s.shape(), t.shape()),
        }
        .into());
    }
    let batch = s.shape()[0];
    let per = s.len() / batch;
    let mut acc = F::zero();
    for (sv, tv) in s.data().chunks(per).zip(t.data().chunks(per)) {
        acc += dice_loss(sv, tv).expect("equal chunks");
    }
    let value = Tensor::scalar(acc / F::lit(batch as f64));
    Ok(g.record(DiceLoss { inputs: [seg, truth] }, value))
}

struct UncertaintyLoss {
    inputs: [Var; 1],
}

impl<F: Real> Op<F> for UncertaintyLoss {
    fn name(&self) -> &'static str {
        "uncertainty_loss"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        graph: &Graph<F>,
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _wants: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let m = graph.value(self.inputs[0]);
        let n = F::lit((m.len() / 3) as f64);
        let k = F::lit(2.0) * grad.item() / n;
        let mut d = Vec::with_capacity(m.len());
        for v in m.data().chunks(3) {
            d.extend([F::zero(), F::zero(), k * v[2]]);
        }
        vec![Some(Tensor::new(m.shape().to_vec(), d).expect("shape"))]
    }
}

/// Mean of `m(Omega)^2` over all voxels of fused masses `[..., 3]`.
pub fn uncertainty_loss_op<F: Real>(g: &mut Graph<F>, masses: Var) -> Result<Var, GraphError> {
    let m = g.value(masses);
    if m.shape().last() != Some(&3) {
        return Err(TensorError::ShapeMismatch {
            op: "uncertainty_loss",
            detail: format!("expected [..., 3], got {:?}", m.shape()),
        }
        .into());
    }
    let n = m.len() / 3;
    let s: F = m.data().chunks(3).map(|v| v[2] * v[2]).sum();
    let value = Tensor::scalar(s / F::lit(n as f64));
    Ok(g.record(UncertaintyLoss { inputs: [masses] }, value))
}

/// Graph nodes of the three loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss_d: Var,
    pub loss_u: Var,
    pub loss_reg: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<F: Real>(&self, g: &Graph<F>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().as_f64();
        LossBreakdown {
            loss_d: v(self.loss_d),
            loss_u: v(self.loss_u),
            loss_reg: v(self.loss_reg),
            total: v(self.total),
        }
    }
}

/// `loss_d + loss_u + lambda * sum(alpha)` on fused masses `[B, N, 3]` and
/// ground truth `[B, N]`. Reads the alpha logits bound in `g`.
pub fn total_loss_graph<F: Real>(
    g: &mut Graph<F>,
    masses: Var,
    truth: Var,
    lambda: F,
    mode: DiceMode,
) -> Result<LossVars, GraphError> {
    let seg = segmentation_map(g, masses, mode)?;
    let loss_d = dice_loss_op(g, seg, truth)?;
    let loss_u = uncertainty_loss_op(g, masses)?;
    let alpha_logits = g.param_var(ALPHA_LOGITS)?;
    let alphas = ops::sigmoid_op(g, alpha_logits);
    // alphas are in (0, 1), so the L1 norm is their plain sum
    let l1 = ops::sum(g, alphas);
    let loss_reg = ops::scale(g, l1, lambda);
    let du = ops::add(g, loss_d, loss_u)?;
    let total = ops::add(g, du, loss_reg)?;
    Ok(LossVars {
        loss_d,
        loss_u,
        loss_reg,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidential::MassFunction;

    #[test]
    fn dice_loss_examples() {
        let perfect: f64 = dice_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!(perfect.abs() < 1e-6);
        let partial: f64 = dice_loss(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((partial - 1.0 / 3.0).abs() < 1e-6);
        let empty: f64 = dice_loss(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(empty, 0.0);
        assert!(dice_loss(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn dice_loss_bounded() {
        let all_wrong: f64 = dice_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(all_wrong <= 1.0 && all_wrong > 0.999);
    }

    fn omega_map(omegas: &[f64]) -> MassMap {
        let masses = omegas
            .iter()
            .map(|&o| MassFunction::new((1.0 - o) / 2.0, (1.0 - o) / 2.0, o))
            .collect();
        MassMap::new([omegas.len(), 1, 1], masses).unwrap()
    }

    #[test]
    fn uncertainty_loss_examples() {
        assert_eq!(uncertainty_loss(&omega_map(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(uncertainty_loss(&omega_map(&[1.0, 1.0, 1.0])).unwrap(), 1.0);
        let v = uncertainty_loss(&omega_map(&[0.5, 0.3])).unwrap();
        assert!((v - 0.17).abs() < 1e-12);
        let empty = MassMap {
            dims: [0, 0, 0],
            masses: vec![],
        };
        assert_eq!(uncertainty_loss(&empty), Err(ObjectiveError::Empty));
    }

    #[test]
    fn total_loss_decomposition() {
        let map = omega_map(&[1.0; 4]);
        let b = total_loss(&map, &[0.0; 4], &[0.5; 20], 0.0, DiceMode::Pignistic).unwrap();
        assert_eq!(b.loss_u, 1.0);
        assert_eq!(b.loss_reg, 0.0);
        assert_eq!(b.total, b.loss_d + 1.0);

        let b = total_loss(&map, &[0.0; 4], &[0.5; 20], 1e-5, DiceMode::Pignistic).unwrap();
        assert!((b.loss_reg - 1e-4).abs() < 1e-18);
        assert!((b.total - (b.loss_d + b.loss_u + b.loss_reg)).abs() < 1e-12);
    }

    #[test]
    fn graph_dice_matches_plain() {
        let seg = [0.2, 0.9, 0.4, 0.0, 1.0, 0.3];
        let truth = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let mut g = Graph::<f64>::new();
        let s = g.param("s", Tensor::from_f64_slice(&[2, 3], &seg).unwrap()).unwrap();
        let t = g.constant(Tensor::from_f64_slice(&[2, 3], &truth).unwrap());
        let l = dice_loss_op(&mut g, s, t).unwrap();
        let expect = (dice_loss(&seg[..3], &truth[..3]).unwrap() + dice_loss(&seg[3..], &truth[3..]).unwrap()) / 2.0;
        assert!((g.forward_eval(l).unwrap() - expect).abs() < 1e-15);
    }
}
