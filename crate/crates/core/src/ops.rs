//! Elementwise tensor ops and their reductions.

use crate::graph::{Graph, GraphError, Op, Var};
use crate::tensor::{ensure_same_shape, Real, Tensor};

#[derive(Clone, Copy, Debug)]
enum UnaryKind<F> {
    Scale(F),
    Square,
    Exp,
    Log,
    Sigmoid,
    Relu,
}

struct Unary<F> {
    kind: UnaryKind<F>,
    inputs: [Var; 1],
}

impl<F: Real> Op<F> for Unary<F> {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Scale(_) => "scale",
            UnaryKind::Square => "square",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Relu => "relu",
        }
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
        let x = graph.value(self.inputs[0]).data();
        let y = output.data();
        let g = grad.data();
        let two = F::lit(2.0);
        let d: Vec<F> = match self.kind {
            UnaryKind::Scale(k) => g.iter().map(|&g| g * k).collect(),
            UnaryKind::Square => x.iter().zip(g).map(|(&x, &g)| two * x * g).collect(),
            UnaryKind::Exp => y.iter().zip(g).map(|(&y, &g)| y * g).collect(),
            UnaryKind::Log => x.iter().zip(g).map(|(&x, &g)| g / x).collect(),
            UnaryKind::Sigmoid => y
                .iter()
                .zip(g)
                .map(|(&y, &g)| y * (F::one() - y) * g)
                .collect(),
            UnaryKind::Relu => x
                .iter()
                .zip(g)
                .map(|(&x, &g)| if x > F::zero() { g } else { F::zero() })
                .collect(),
        };
        vec![Some(Tensor::new(grad.shape().to_vec(), d).expect("shape preserved"))]
    }

    fn branch_state(&self, graph: &Graph<F>, out: &mut Vec<usize>) {
        if let UnaryKind::Relu = self.kind {
            let x = graph.value(self.inputs[0]).data();
            out.extend(x.iter().map(|&v| (v > F::zero()) as usize));
        }
    }
}

fn unary<F: Real>(g: &mut Graph<F>, x: Var, kind: UnaryKind<F>) -> Var {
    let value = {
        let v = g.value(x);
        match kind {
            UnaryKind::Scale(k) => v.map(|a| a * k),
            UnaryKind::Square => v.map(|a| a * a),
            UnaryKind::Exp => v.map(F::exp),
            UnaryKind::Log => v.map(F::ln),
            UnaryKind::Sigmoid => v.map(sigmoid),
            UnaryKind::Relu => v.map(|a| a.max(F::zero())),
        }
    };
    g.record(Unary { kind, inputs: [x] }, value)
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn scale<F: Real>(g: &mut Graph<F>, x: Var, k: F) -> Var {
    unary(g, x, UnaryKind::Scale(k))
}

pub fn square<F: Real>(g: &mut Graph<F>, x: Var) -> Var {
    unary(g, x, UnaryKind::Square)
}

pub fn exp<F: Real>(g: &mut Graph<F>, x: Var) -> Var {
    unary(g, x, UnaryKind::Exp)
}

pub fn log<F: Real>(g: &mut Graph<F>, x: Var) -> Var {
    unary(g, x, UnaryKind::Log)
}

pub fn sigmoid_op<F: Real>(g: &mut Graph<F>, x: Var) -> Var {
    unary(g, x, UnaryKind::Sigmoid)
}

pub fn relu<F: Real>(g: &mut Graph<F>, x: Var) -> Var {
    let n = g.value(x).len();
    match g.next_branches(n) {
        Some(mask) if mask.len() == n => {
            let value = Tensor::new(
                g.shape(x).to_vec(),
                g.value(x)
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&v, &on)| if on == 1 { v } else { F::zero() })
                    .collect(),
            )
            .expect("shape preserved");
            g.record(
                Unary {
                    kind: UnaryKind::Relu,
                    inputs: [x],
                },
                value,
            )
        }
        _ => unary(g, x, UnaryKind::Relu),
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinaryKind,
    inputs: [Var; 2],
}

impl<F: Real> Op<F> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
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
        wants: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        match self.kind {
            BinaryKind::Add => vec![Some(grad.clone()), Some(grad.clone())],
            BinaryKind::Sub => vec![Some(grad.clone()), Some(grad.map(|v| -v))],
            BinaryKind::Mul => {
                let a = graph.value(self.inputs[0]);
                let b = graph.value(self.inputs[1]);
                let prod = |other: &Tensor<F>| {
                    let d = other
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&o, &g)| o * g)
                        .collect();
                    Tensor::new(grad.shape().to_vec(), d).expect("shape preserved")
                };
                vec![wants[0].then(|| prod(b)), wants[1].then(|| prod(a))]
            }
        }
    }
}

fn binary<F: Real>(g: &mut Graph<F>, a: Var, b: Var, kind: BinaryKind) -> Result<Var, GraphError> {
    let (va, vb) = (g.value(a), g.value(b));
    let name = <Binary as Op<F>>::name(&Binary { kind, inputs: [a, b] });
    ensure_same_shape(name, va, vb)?;
    let f: fn(F, F) -> F = match kind {
        BinaryKind::Add => |x, y| x + y,
        BinaryKind::Sub => |x, y| x - y,
        BinaryKind::Mul => |x, y| x * y,
    };
    let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
    let value = Tensor::new(va.shape().to_vec(), data)?;
    Ok(g.record(Binary { kind, inputs: [a, b] }, value))
}

pub fn add<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Result<Var, GraphError> {
    binary(g, a, b, BinaryKind::Add)
}

pub fn sub<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Result<Var, GraphError> {
    binary(g, a, b, BinaryKind::Sub)
}

pub fn mul<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Result<Var, GraphError> {
    binary(g, a, b, BinaryKind::Mul)
}

struct Reduce {
    mean: bool,
    inputs: [Var; 1],
}

impl<F: Real> Op<F> for Reduce {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
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
        let x = graph.value(self.inputs[0]);
        let mut g = grad.item();
        if self.mean {
            g /= F::lit(x.len() as f64);
        }
        vec![Some(Tensor::full(x.shape(), g))]
    }
}

pub fn sum<F: Real>(g: &mut Graph<F>, x: Var) -> Var {
    let v = g.value(x).sum();
    g.record(
        Reduce {
            mean: false,
            inputs: [x],
        },
        Tensor::scalar(v),
    )
}

pub fn mean<F: Real>(g: &mut Graph<F>, x: Var) -> Var {
    let t = g.value(x);
    let v = t.sum() / F::lit(t.len() as f64);
    g.record(
        Reduce {
            mean: true,
            inputs: [x],
        },
        Tensor::scalar(v),
    )
}

/// Exponential normalization along the last axis.
struct SoftmaxLast {
    inputs: [Var; 1],
}

pub fn softmax_rows<F: Real>(data: &[F], width: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(width) {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let e: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: F = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

impl<F: Real> Op<F> for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        _graph: &Graph<F>,
        output: &Tensor<F>,
        grad: &Tensor<F>,
        _wants: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let width = *output.shape().last().unwrap_or(&1);
        let mut d = Vec::with_capacity(output.len());
        for (y, g) in output.data().chunks(width).zip(grad.data().chunks(width)) {
            let dot: F = y.iter().zip(g).map(|(&y, &g)| y * g).sum();
            d.extend(y.iter().zip(g).map(|(&y, &g)| y * (g - dot)));
        }
        vec![Some(Tensor::new(output.shape().to_vec(), d).expect("shape preserved"))]
    }
}

pub fn softmax_last<F: Real>(g: &mut Graph<F>, x: Var) -> Var {
    let t = g.value(x);
    let width = *t.shape().last().unwrap_or(&1);
    let value = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), width)).expect("shape preserved");
    g.record(SoftmaxLast { inputs: [x] }, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(sigmoid(0.0_f64), 0.5);
        assert!(sigmoid(-800.0_f64) >= 0.0);
        assert!((sigmoid(3.0_f64) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&[1.0_f64, 2.0, 3.0, -1.0, 0.0, 1000.0], 3);
        assert!((s[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((s[3..].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(s[5] > 0.999);
    }

    #[test]
    fn relu_blocks_negative_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_f64_slice(&[3], &[-1.0, 0.5, 2.0]).unwrap()).unwrap();
        let r = relu(&mut g, x);
        let s = sum(&mut g, r);
        assert_eq!(g.forward_eval(s).unwrap(), 2.5);
        let gr = g.backward_gradients().unwrap();
        assert_eq!(gr.get("x").unwrap().data(), &[0.0, 1.0, 1.0]);
    }
}
