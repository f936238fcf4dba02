//! Evidential segmentation head.
//!
//! Each voxel's feature vector is compared with `I` learnable prototypes.
//! Prototype `i` contributes a simple mass function on the frame
//! `{lymphoma, background}`:
//!
//! ```text
//! m_i({k}) = alpha_i * u_ik * exp(-gamma_i * d_i^2)
//! m_i(Omega) = 1 - alpha_i * exp(-gamma_i * d_i^2)
//! ```
//!
//! and the `I` mass functions are combined with the normalized Dempster rule.
//! For simple mass functions on a two-element frame the combination has a
//! closed form, evaluated here in O(I) per voxel:
//!
//! ```text
//! mu(a) = prod(m_i(a) + m_i(Omega)) - prod(m_i(Omega))
//! mu(b) = prod(m_i(b) + m_i(Omega)) - prod(m_i(Omega))
//! mu(Omega) = prod(m_i(Omega))
//! ```
//!
//! followed by normalization by the sum of the three. Class index 0 is
//! lymphoma (`a`), class index 1 is background (`b`).
//!
//! Constrained quantities are reparameterized so that optimization is
//! unconstrained: memberships come from a softmax over free logits,
//! `alpha_i` from a logistic squashing of a logit, and `gamma_i = eta_i^2`.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, GraphError, Op, ParamSet, Var};
use crate::ops;
use crate::tensor::{Real, Tensor, TensorError};

/// Above this many prototypes the fusion products are accumulated in log
/// space.
pub const LOG_SPACE_PROTOTYPES: usize = 16;

/// Smallest admissible Dempster normalizer.
pub const MIN_NORMALIZER: f64 = 1e-300;

pub const PROTOTYPES: &str = "es.prototypes";
pub const MEMBERSHIP_LOGITS: &str = "es.membership_logits";
pub const ALPHA_LOGITS: &str = "es.alpha_logits";
pub const GAMMA_ROOTS: &str = "es.gamma_roots";

/// Mass function on `{a, b}`: lymphoma, background, and ignorance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassFunction {
    pub m_a: f64,
    pub m_b: f64,
    pub m_omega: f64,
}

impl MassFunction {
    pub fn new(m_a: f64, m_b: f64, m_omega: f64) -> Self {
        Self { m_a, m_b, m_omega }
    }

    pub fn vacuous() -> Self {
        Self::new(0.0, 0.0, 1.0)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let all_nonneg = self.m_a >= 0.0 && self.m_b >= 0.0 && self.m_omega >= 0.0;
        all_nonneg && (self.m_a + self.m_b + self.m_omega - 1.0).abs() <= tol
    }

    /// Pignistic probability of lymphoma.
    pub fn pignistic(&self) -> f64 {
        self.m_a + 0.5 * self.m_omega
    }

    /// Normalized Dempster combination of two mass functions on the frame.
    pub fn combine(&self, other: &MassFunction) -> Result<MassFunction, EvidentialError> {
        let a = self.m_a * other.m_a + self.m_a * other.m_omega + self.m_omega * other.m_a;
        let b = self.m_b * other.m_b + self.m_b * other.m_omega + self.m_omega * other.m_b;
        let o = self.m_omega * other.m_omega;
        let z = a + b + o;
        if z <= MIN_NORMALIZER {
            return Err(EvidentialError::TotalConflict);
        }
        Ok(MassFunction::new(a / z, b / z, o / z))
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EvidentialError {
    #[error("feature dimension {features} does not match prototype dimension {prototypes}")]
    DimensionMismatch { features: usize, prototypes: usize },
    #[error("total conflict: Dempster normalizer vanished")]
    TotalConflict,
    #[error("no mass functions to combine")]
    Empty,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Per-voxel feature vectors, channel-major: `values[c * N + n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    pub dims: [usize; 3],
    pub channels: usize,
    pub values: Vec<F>,
}

impl<F: Real> FeatureMap<F> {
    pub fn new(dims: [usize; 3], channels: usize, values: Vec<F>) -> Result<Self, TensorError> {
        let n = dims.iter().product::<usize>() * channels;
        if n != values.len() {
            return Err(TensorError::LengthMismatch {
                shape: vec![channels, dims[0], dims[1], dims[2]],
                expected: n,
                actual: values.len(),
            });
        }
        Ok(Self {
            dims,
            channels,
            values,
        })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// `[1, C, X, Y, Z]` tensor view for graph use.
    pub fn to_tensor(&self) -> Tensor<F> {
        let [x, y, z] = self.dims;
        Tensor::new(vec![1, self.channels, x, y, z], self.values.clone()).expect("validated")
    }
}

/// Per-voxel fused mass functions, voxel index `(x * Y + y) * Z + z`.
#[derive(Clone, Debug, PartialEq)]
pub struct MassMap {
    pub dims: [usize; 3],
    pub masses: Vec<MassFunction>,
}

impl MassMap {
    pub fn new(dims: [usize; 3], masses: Vec<MassFunction>) -> Result<Self, TensorError> {
        let n: usize = dims.iter().product();
        if n != masses.len() {
            return Err(TensorError::LengthMismatch {
                shape: dims.to_vec(),
                expected: n,
                actual: masses.len(),
            });
        }
        Ok(Self { dims, masses })
    }

    /// From a `[..., 3]` tensor whose leading dims multiply to the voxel count.
    pub fn from_tensor<F: Real>(dims: [usize; 3], t: &Tensor<F>) -> Result<Self, TensorError> {
        let masses = t
            .data()
            .chunks(3)
            .map(|m| MassFunction::new(m[0].as_f64(), m[1].as_f64(), m[2].as_f64()))
            .collect();
        Self::new(dims, masses)
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn mean_ignorance(&self) -> f64 {
        self.masses.iter().map(|m| m.m_omega).sum::<f64>() / self.masses.len().max(1) as f64
    }
}

/// ES parameters in their unconstrained form.
#[derive(Clone, Debug, PartialEq)]
pub struct EsParams<F> {
    /// `[I, C]`
    pub prototypes: Tensor<F>,
    /// `[I, 2]`; softmax over the last axis gives `u_ik`.
    pub membership_logits: Tensor<F>,
    /// `[I]`; logistic squashing gives `alpha_i`.
    pub alpha_logits: Tensor<F>,
    /// `[I]`; squaring gives `gamma_i`.
    pub gamma_roots: Tensor<F>,
}

impl<F: Real> EsParams<F> {
    pub fn prototype_count(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn alphas(&self) -> Vec<F> {
        self.alpha_logits.data().iter().map(|&v| ops::sigmoid(v)).collect()
    }

    pub fn gammas(&self) -> Vec<F> {
        self.gamma_roots.data().iter().map(|&v| v * v).collect()
    }

    /// Row-major `[I, 2]` memberships.
    pub fn memberships(&self) -> Vec<F> {
        ops::softmax_rows(self.membership_logits.data(), 2)
    }

    pub fn to_params(&self) -> ParamSet<F> {
        let mut p = ParamSet::new();
        p.insert(PROTOTYPES, self.prototypes.clone());
        p.insert(MEMBERSHIP_LOGITS, self.membership_logits.clone());
        p.insert(ALPHA_LOGITS, self.alpha_logits.clone());
        p.insert(GAMMA_ROOTS, self.gamma_roots.clone());
        p
    }

    pub fn from_params(p: &ParamSet<F>) -> Result<Self, GraphError> {
        let get = |name: &str| {
            p.get(name)
                .cloned()
                .ok_or_else(|| GraphError::UnknownParam(name.to_string()))
        };
        let es = Self {
            prototypes: get(PROTOTYPES)?,
            membership_logits: get(MEMBERSHIP_LOGITS)?,
            alpha_logits: get(ALPHA_LOGITS)?,
            gamma_roots: get(GAMMA_ROOTS)?,
        };
        es.validate()?;
        Ok(es)
    }

    fn validate(&self) -> Result<(), TensorError> {
        let i = self.prototypes.shape().first().copied().unwrap_or(0);
        let ok = self.prototypes.shape().len() == 2
            && self.membership_logits.shape() == [i, 2]
            && self.alpha_logits.shape() == [i]
            && self.gamma_roots.shape() == [i];
        if ok {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op: "es_params",
                detail: format!(
                    "prototypes {:?}, memberships {:?}, alpha {:?}, gamma {:?}",
                    self.prototypes.shape(),
                    self.membership_logits.shape(),
                    self.alpha_logits.shape(),
                    self.gamma_roots.shape()
                ),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// `s[b, n, i] = exp(-gamma_i * ||x[b, :, n] - p_i||^2)` for features laid
/// out `[B, C, N]`.
pub fn distance_activation_kernel<F: Real>(
    features: &[F],
    batch: usize,
    channels: usize,
    prototypes: &[F],
    gammas: &[F],
) -> Vec<F> {
    let n_vox = features.len() / (batch * channels);
    let n_proto = gammas.len();
    let mut s = vec![F::zero(); batch * n_vox * n_proto];
    let mut x = vec![F::zero(); channels];
    for b in 0..batch {
        let fb = &features[b * channels * n_vox..][..channels * n_vox];
        for n in 0..n_vox {
            for (c, xc) in x.iter_mut().enumerate() {
                *xc = fb[c * n_vox + n];
            }
            let row = &mut s[(b * n_vox + n) * n_proto..][..n_proto];
            for (i, si) in row.iter_mut().enumerate() {
                let p = &prototypes[i * channels..][..channels];
                let d2: F = x.iter().zip(p).map(|(&a, &q)| (a - q) * (a - q)).sum();
                *si = (-gammas[i] * d2).exp();
            }
        }
    }
    s
}

/// Per-prototype masses `[..., I, 3]` from activations `[..., I]`.
pub fn bba_kernel<F: Real>(s: &[F], alphas: &[F], memberships: &[F]) -> Vec<F> {
    let n_proto = alphas.len();
    let mut m = Vec::with_capacity(s.len() * 3);
    for row in s.chunks(n_proto) {
        for (i, &si) in row.iter().enumerate() {
            let w = alphas[i] * si;
            m.push(w * memberships[2 * i]);
            m.push(w * memberships[2 * i + 1]);
            m.push(F::one() - w);
        }
    }
    m
}

/// Scaled products of one voxel's `(m_a + m_omega)`, `(m_b + m_omega)` and
/// `m_omega` terms. The common scale cancels in every normalized quantity.
#[derive(Clone, Copy, Debug)]
struct Products<F> {
    pa: F,
    pb: F,
    po: F,
    /// natural log of the common scale that was divided out
    log_scale: F,
}

/// `ln(prod(terms))` for nonnegative terms. Terms are multiplied directly
/// and the running product is folded into the log sum before it can
/// underflow, so only a handful of logarithms are taken.
fn log_product(terms: impl Iterator<Item = f64>) -> f64 {
    const FLUSH: f64 = 1e-150;
    let (mut acc, mut l) = (1.0f64, 0.0f64);
    for t in terms {
        if t < FLUSH {
            l += t.ln();
        } else {
            acc *= t;
            if acc < FLUSH {
                l += acc.ln();
                acc = 1.0;
            }
        }
    }
    l + acc.ln()
}

fn products<F: Real>(m: &[F]) -> Products<F> {
    let n_proto = m.len() / 3;
    if n_proto <= LOG_SPACE_PROTOTYPES {
        let (mut pa, mut pb, mut po) = (F::one(), F::one(), F::one());
        for mi in m.chunks(3) {
            pa *= mi[0] + mi[2];
            pb *= mi[1] + mi[2];
            po *= mi[2];
        }
        Products {
            pa,
            pb,
            po,
            log_scale: F::zero(),
        }
    } else {
        let la = F::lit(log_product(m.chunks(3).map(|mi| (mi[0] + mi[2]).as_f64())));
        let lb = F::lit(log_product(m.chunks(3).map(|mi| (mi[1] + mi[2]).as_f64())));
        let lo = F::lit(log_product(m.chunks(3).map(|mi| mi[2].as_f64())));
        let top = la.max(lb);
        if top == F::neg_infinity() {
            return Products {
                pa: F::zero(),
                pb: F::zero(),
                po: F::zero(),
                log_scale: F::zero(),
            };
        }
        Products {
            pa: (la - top).exp(),
            pb: (lb - top).exp(),
            po: (lo - top).exp(),
            log_scale: top,
        }
    }
}

fn normalizer_ok<F: Real>(p: &Products<F>, z: F) -> bool {
    if !(z > F::zero()) {
        return false;
    }
    z.as_f64().ln() + p.log_scale.as_f64() > MIN_NORMALIZER.ln()
}

/// Closed-form Dempster fusion over the second-to-last axis: `[..., I, 3]`
/// to `[..., 3]`.
pub fn fuse_kernel<F: Real>(masses: &[F], n_proto: usize) -> Result<Vec<F>, EvidentialError> {
    if n_proto == 0 {
        return Err(EvidentialError::Empty);
    }
    let mut out = Vec::with_capacity(masses.len() / n_proto);
    for m in masses.chunks(3 * n_proto) {
        let p = products(m);
        let z = p.pa + p.pb - p.po;
        if !normalizer_ok(&p, z) {
            return Err(EvidentialError::TotalConflict);
        }
        out.push((p.pa - p.po) / z);
        out.push((p.pb - p.po) / z);
        out.push(p.po / z);
    }
    Ok(out)
}

/// Product of one term kind over all prototypes but `skip`, scaled by
/// `exp(-log_scale)`.
fn product_without<F: Real>(m: &[F], term: impl Fn(&[F]) -> F, skip: usize, log_scale: F, log_space: bool) -> F {
    let rest = m.chunks(3).enumerate().filter(|&(j, _)| j != skip).map(|(_, mi)| term(mi));
    if log_space {
        let l = log_product(rest.map(|t| t.as_f64()));
        F::lit((l - log_scale.as_f64()).exp())
    } else {
        rest.fold(F::one(), |acc, t| acc * t)
    }
}

fn fuse_backward_voxel<F: Real>(m: &[F], y: &[F], g: &[F], out: &mut [F]) {
    let n_proto = m.len() / 3;
    let p = products(m);
    let z = p.pa + p.pb - p.po;
    let gy = g[0] * y[0] + g[1] * y[1] + g[2] * y[2];
    let h_a = (g[0] - gy) / z;
    let h_b = (g[1] - gy) / z;
    let h_o = (g[2] - g[0] - g[1] + gy) / z;
    let log_space = n_proto > LOG_SPACE_PROTOTYPES;
    // a zero term needs the explicit product of the others
    let excl = |term: fn(&[F]) -> F, total: F, i: usize| -> F {
        let t = term(&m[3 * i..3 * i + 3]);
        if t > F::zero() {
            total / t
        } else {
            product_without(m, term, i, p.log_scale, log_space)
        }
    };
    for i in 0..n_proto {
        let ga = h_a * excl(|mi| mi[0] + mi[2], p.pa, i);
        let gb = h_b * excl(|mi| mi[1] + mi[2], p.pb, i);
        let go = h_o * excl(|mi| mi[2], p.po, i);
        out[3 * i] = ga;
        out[3 * i + 1] = gb;
        out[3 * i + 2] = ga + gb + go;
    }
}

// ---------------------------------------------------------------------------
// Graph operations
// ---------------------------------------------------------------------------

struct DistanceActivation {
    inputs: [Var; 3],
    batch: usize,
    channels: usize,
}

impl<F: Real> Op<F> for DistanceActivation {
    fn name(&self) -> &'static str {
        "distance_activation"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        graph: &Graph<F>,
        output: &Tensor<F>,
        grad: &Tensor<F>,
        wants: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let feats = graph.value(self.inputs[0]);
        let protos = graph.value(self.inputs[1]);
        let gammas = graph.value(self.inputs[2]).data();
        let (nb, nc, ni) = (self.batch, self.channels, gammas.len());
        let nv = feats.len() / (nb * nc);
        let (fx, pd, s, gs) = (feats.data(), protos.data(), output.data(), grad.data());
        let two = F::lit(2.0);

        let mut gx = vec![F::zero(); fx.len()];
        let mut gp = vec![F::zero(); pd.len()];
        let mut gg = vec![F::zero(); ni];
        let mut x = vec![F::zero(); nc];
        let mut gxv = vec![F::zero(); nc];
        for b in 0..nb {
            let base = b * nc * nv;
            for n in 0..nv {
                for c in 0..nc {
                    x[c] = fx[base + c * nv + n];
                }
                gxv.fill(F::zero());
                let row = (b * nv + n) * ni;
                for i in 0..ni {
                    let w = gs[row + i] * s[row + i];
                    if w == F::zero() {
                        continue;
                    }
                    let p = &pd[i * nc..][..nc];
                    let mut d2 = F::zero();
                    let k = two * gammas[i] * w;
                    for c in 0..nc {
                        let diff = x[c] - p[c];
                        d2 += diff * diff;
                        gxv[c] -= k * diff;
                        gp[i * nc + c] += k * diff;
                    }
                    gg[i] -= w * d2;
                }
                for c in 0..nc {
                    gx[base + c * nv + n] = gxv[c];
                }
            }
        }
        vec![
            wants[0].then(|| Tensor::new(feats.shape().to_vec(), gx).expect("shape")),
            wants[1].then(|| Tensor::new(protos.shape().to_vec(), gp).expect("shape")),
            wants[2].then(|| Tensor::new(vec![ni], gg).expect("shape")),
        ]
    }
}

/// Distance activation. `features` is `[B, C, spatial...]`, `prototypes`
/// `[I, C]`, `gammas` `[I]`; result is `[B, N, I]`.
pub fn distance_activation<F: Real>(
    g: &mut Graph<F>,
    features: Var,
    prototypes: Var,
    gammas: Var,
) -> Result<Var, GraphError> {
    let fshape = g.shape(features).to_vec();
    let pshape = g.shape(prototypes).to_vec();
    let (nb, nc) = match (fshape.as_slice(), pshape.as_slice()) {
        ([nb, nc, ..], [ni, pc]) if fshape.len() >= 3 && nc == pc && g.shape(gammas) == [*ni] => (*nb, *nc),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "distance_activation",
                detail: format!(
                    "features {fshape:?}, prototypes {pshape:?}, gammas {:?}",
                    g.shape(gammas)
                ),
            }
            .into())
        }
    };
    let ni = pshape[0];
    let nv: usize = fshape[2..].iter().product();
    let s = distance_activation_kernel(
        g.value(features).data(),
        nb,
        nc,
        g.value(prototypes).data(),
        g.value(gammas).data(),
    );
    let value = Tensor::new(vec![nb, nv, ni], s)?;
    Ok(g.record(
        DistanceActivation {
            inputs: [features, prototypes, gammas],
            batch: nb,
            channels: nc,
        },
        value,
    ))
}

struct Bba {
    inputs: [Var; 3],
}

impl<F: Real> Op<F> for Bba {
    fn name(&self) -> &'static str {
        "bba"
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
        let s = graph.value(self.inputs[0]);
        let alphas = graph.value(self.inputs[1]).data();
        let u = graph.value(self.inputs[2]).data();
        let ni = alphas.len();
        let gm = grad.data();
        let mut gs = vec![F::zero(); s.len()];
        let mut ga = vec![F::zero(); ni];
        let mut gu = vec![F::zero(); 2 * ni];
        for (j, &sj) in s.data().iter().enumerate() {
            let i = j % ni;
            let (g_a, g_b, g_o) = (gm[3 * j], gm[3 * j + 1], gm[3 * j + 2]);
            let inner = u[2 * i] * g_a + u[2 * i + 1] * g_b - g_o;
            gs[j] = alphas[i] * inner;
            ga[i] += sj * inner;
            gu[2 * i] += alphas[i] * sj * g_a;
            gu[2 * i + 1] += alphas[i] * sj * g_b;
        }
        vec![
            wants[0].then(|| Tensor::new(s.shape().to_vec(), gs).expect("shape")),
            wants[1].then(|| Tensor::new(vec![ni], ga).expect("shape")),
            wants[2].then(|| Tensor::new(vec![ni, 2], gu).expect("shape")),
        ]
    }
}

/// Basic belief assignment: `s` `[..., I]`, `alphas` `[I]`, `memberships`
/// `[I, 2]` to masses `[..., I, 3]` ordered (lymphoma, background, Omega).
pub fn bba<F: Real>(g: &mut Graph<F>, s: Var, alphas: Var, memberships: Var) -> Result<Var, GraphError> {
    let sshape = g.shape(s).to_vec();
    let ni = *sshape.last().unwrap_or(&0);
    if g.shape(alphas) != [ni] || g.shape(memberships) != [ni, 2] {
        return Err(TensorError::ShapeMismatch {
            op: "bba",
            detail: format!(
                "activations {sshape:?}, alphas {:?}, memberships {:?}",
                g.shape(alphas),
                g.shape(memberships)
            ),
        }
        .into());
    }
    let m = bba_kernel(g.value(s).data(), g.value(alphas).data(), g.value(memberships).data());
    let mut shape = sshape;
    shape.push(3);
    let value = Tensor::new(shape, m)?;
    Ok(g.record(
        Bba {
            inputs: [s, alphas, memberships],
        },
        value,
    ))
}

struct DempsterFuse {
    inputs: [Var; 1],
    prototypes: usize,
}

impl<F: Real> Op<F> for DempsterFuse {
    fn name(&self) -> &'static str {
        "dempster_fuse"
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
        let m = graph.value(self.inputs[0]);
        let k = 3 * self.prototypes;
        let mut gm = vec![F::zero(); m.len()];
        for (((mv, y), g), out) in m
            .data()
            .chunks(k)
            .zip(output.data().chunks(3))
            .zip(grad.data().chunks(3))
            .zip(gm.chunks_mut(k))
        {
            fuse_backward_voxel(mv, y, g, out);
        }
        vec![Some(Tensor::new(m.shape().to_vec(), gm).expect("shape"))]
    }
}

/// Dempster fusion over the prototype axis: `[..., I, 3]` to `[..., 3]`.
pub fn dempster_fuse<F: Real>(g: &mut Graph<F>, masses: Var) -> Result<Var, GraphError> {
    let shape = g.shape(masses).to_vec();
    if shape.len() < 2 || shape[shape.len() - 1] != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "dempster_fuse",
            detail: format!("expected [..., I, 3], got {shape:?}"),
        }
        .into());
    }
    let ni = shape[shape.len() - 2];
    let fused = fuse_kernel(g.value(masses).data(), ni).map_err(|e| GraphError::Numerical {
        op: "dempster_fuse",
        detail: e.to_string(),
    })?;
    let mut out_shape = shape[..shape.len() - 2].to_vec();
    out_shape.push(3);
    let value = Tensor::new(out_shape, fused)?;
    Ok(g.record(
        DempsterFuse {
            inputs: [masses],
            prototypes: ni,
        },
        value,
    ))
}

/// Full head on bound parameters (see [`PROTOTYPES`] and friends): features
/// `[B, C, X, Y, Z]` to fused masses `[B, N, 3]`.
pub fn es_forward_graph<F: Real>(g: &mut Graph<F>, features: Var) -> Result<Var, GraphError> {
    let protos = g.param_var(PROTOTYPES)?;
    let member_logits = g.param_var(MEMBERSHIP_LOGITS)?;
    let alpha_logits = g.param_var(ALPHA_LOGITS)?;
    let gamma_roots = g.param_var(GAMMA_ROOTS)?;
    let alphas = ops::sigmoid_op(g, alpha_logits);
    let gammas = ops::square(g, gamma_roots);
    let memberships = ops::softmax_last(g, member_logits);
    let s = distance_activation(g, features, protos, gammas)?;
    let m = bba(g, s, alphas, memberships)?;
    dempster_fuse(g, m)
}

/// Inference-only evaluation of the head.
pub fn es_forward<F: Real>(features: &FeatureMap<F>, params: &EsParams<F>) -> Result<MassMap, EvidentialError> {
    if features.channels != params.feature_dim() {
        return Err(EvidentialError::DimensionMismatch {
            features: features.channels,
            prototypes: params.feature_dim(),
        });
    }
    let s = distance_activation_kernel(
        &features.values,
        1,
        features.channels,
        params.prototypes.data(),
        &params.gammas(),
    );
    let m = bba_kernel(&s, &params.alphas(), &params.memberships());
    let fused = fuse_kernel(&m, params.prototype_count())?;
    let masses = fused
        .chunks(3)
        .map(|v| MassFunction::new(v[0].as_f64(), v[1].as_f64(), v[2].as_f64()))
        .collect();
    Ok(MassMap::new(features.dims, masses).expect("one mass per voxel"))
}

/// Fuses a list of mass functions with the closed form.
pub fn fuse_masses(masses: &[MassFunction]) -> Result<MassFunction, EvidentialError> {
    let flat: Vec<f64> = masses.iter().flat_map(|m| [m.m_a, m.m_b, m.m_omega]).collect();
    let v = fuse_kernel(&flat, masses.len())?;
    Ok(MassFunction::new(v[0], v[1], v[2]))
}

/// Mass function induced by one prototype at squared distance `d2`.
pub fn prototype_mass(alpha: f64, gamma: f64, membership: [f64; 2], d2: f64) -> MassFunction {
    let s = (-gamma * d2).exp();
    MassFunction::new(alpha * membership[0] * s, alpha * membership[1] * s, 1.0 - alpha * s)
}

// ---------------------------------------------------------------------------
// Decisions
// ---------------------------------------------------------------------------

/// How a fused mass is turned into a binary lymphoma / background label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// lymphoma iff `m_a + m_omega / 2 > 0.5`
    #[default]
    Pignistic,
    /// lymphoma iff `m_a > m_b`
    Singleton,
}

impl DecisionRule {
    pub fn is_lymphoma(self, m: &MassFunction) -> bool {
        match self {
            DecisionRule::Pignistic => m.pignistic() > 0.5,
            DecisionRule::Singleton => m.m_a > m.m_b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ThreeWay {
    Background = 0,
    Lymphoma = 1,
    Ignorance = 2,
}

impl ThreeWay {
    /// Largest of the three masses; ignorance wins ties, then background.
    pub fn of(m: &MassFunction) -> Self {
        if m.m_omega >= m.m_a && m.m_omega >= m.m_b {
            ThreeWay::Ignorance
        } else if m.m_a > m.m_b {
            ThreeWay::Lymphoma
        } else {
            ThreeWay::Background
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub dims: [usize; 3],
    /// 1 = lymphoma
    pub binary: Vec<u8>,
    pub three_way: Vec<ThreeWay>,
    /// raw `m_omega` per voxel
    pub uncertainty: Vec<f64>,
}

pub fn decide(map: &MassMap, rule: DecisionRule) -> Decision {
    Decision {
        dims: map.dims,
        binary: map.masses.iter().map(|m| rule.is_lymphoma(m) as u8).collect(),
        three_way: map.masses.iter().map(ThreeWay::of).collect(),
        uncertainty: map.masses.iter().map(|m| m.m_omega).collect(),
    }
}
