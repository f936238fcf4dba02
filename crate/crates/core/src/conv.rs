//! Volumetric layers over `[batch, channels, X, Y, Z]` tensors: same-padded
//! cubic convolution, 2x max pooling, 2x nearest upsampling, and channel
//! concatenation.

use rayon::prelude::*;

use crate::graph::{Graph, GraphError, Op, Var};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dims5 {
    b: usize,
    c: usize,
    x: usize,
    y: usize,
    z: usize,
}

impl Dims5 {
    fn of(op: &'static str, t: &Tensor<impl Real>) -> Result<Self, TensorError> {
        match *t.shape() {
            [b, c, x, y, z] => Ok(Self { b, c, x, y, z }),
            ref s => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected [batch, channels, X, Y, Z], got {s:?}"),
            }),
        }
    }

    fn spatial(&self) -> usize {
        self.x * self.y * self.z
    }
}

const BLOCK: usize = 512;

#[inline]
fn axpy<F: Real>(out: &mut [F], inp: &[F], w: F) {
    for (o, &i) in out.iter_mut().zip(inp) {
        *o += w * i;
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    // independent lanes let the compiler vectorize the reduction
    let mut lanes = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut acc = lanes.iter().copied().sum::<F>();
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    acc
}

/// Zero-padded flat layout of one spatial plane. With every plane padded by
/// `k / 2`, a kernel tap is a constant flat offset, so each tap reduces to
/// one long contiguous pass. Pad positions inside the pass produce values
/// that are never read back.
#[derive(Clone, Copy)]
struct Padded {
    d: Dims5,
    pad: usize,
    py: usize,
    pz: usize,
    /// flat size of one padded plane
    size: usize,
    /// flat index of the first interior voxel
    start: usize,
    /// span from the first to the last interior voxel, inclusive
    len: usize,
}

impl Padded {
    fn new(d: Dims5, k: usize) -> Self {
        let pad = k / 2;
        let (px, py, pz) = (d.x + 2 * pad, d.y + 2 * pad, d.z + 2 * pad);
        let flat = |x: usize, y: usize, z: usize| (x * py + y) * pz + z;
        let start = flat(pad, pad, pad);
        Self {
            d,
            pad,
            py,
            pz,
            size: px * py * pz,
            start,
            len: flat(d.x + pad - 1, d.y + pad - 1, d.z + pad - 1) + 1 - start,
        }
    }

    fn taps(&self, k: usize) -> Vec<isize> {
        let p = self.pad as isize;
        let (py, pz) = (self.py as isize, self.pz as isize);
        let mut t = Vec::with_capacity(k * k * k);
        for kx in 0..k as isize {
            for ky in 0..k as isize {
                for kz in 0..k as isize {
                    t.push(((kx - p) * py + (ky - p)) * pz + (kz - p));
                }
            }
        }
        t
    }

    fn pad_plane<F: Real>(&self, plane: &[F], out: &mut [F]) {
        out.fill(F::zero());
        let (d, p) = (self.d, self.pad);
        for x in 0..d.x {
            for y in 0..d.y {
                let src = (x * d.y + y) * d.z;
                let dst = ((x + p) * self.py + y + p) * self.pz + p;
                out[dst..dst + d.z].copy_from_slice(&plane[src..src + d.z]);
            }
        }
    }

    fn crop_plane<F: Real>(&self, padded: &[F], out: &mut [F]) {
        let (d, p) = (self.d, self.pad);
        for x in 0..d.x {
            for y in 0..d.y {
                let dst = (x * d.y + y) * d.z;
                let src = ((x + p) * self.py + y + p) * self.pz + p;
                out[dst..dst + d.z].copy_from_slice(&padded[src..src + d.z]);
            }
        }
    }

    /// Every `(batch, channel)` plane of `data`, padded.
    fn pad_all<F: Real>(&self, data: &[F], planes: usize) -> Vec<F> {
        let s = self.d.spatial();
        let mut out = vec![F::zero(); planes * self.size];
        out.par_chunks_mut(self.size)
            .zip(data.par_chunks(s))
            .for_each(|(o, i)| self.pad_plane(i, o));
        out
    }

}

fn conv_forward<F: Real>(x: &[F], d: Dims5, w: &[F], bias: &[F], co: usize, k: usize) -> Vec<F> {
    let s = d.spatial();
    let kk = k * k * k;
    let pd = Padded::new(d, k);
    let taps = pd.taps(k);
    let xp = pd.pad_all(x, d.b * d.c);
    let mut out = vec![F::zero(); d.b * co * s];
    out.par_chunks_mut(s).enumerate().for_each(|(bc, o)| {
        let (b, c) = (bc / co, bc % co);
        let mut acc = vec![F::zero(); pd.size];
        // blocked so the accumulator stays cache resident across taps
        for lo in (pd.start..pd.start + pd.len).step_by(BLOCK) {
            let hi = (lo + BLOCK).min(pd.start + pd.len);
            for ci in 0..d.c {
                let inp = &xp[(b * d.c + ci) * pd.size..][..pd.size];
                let wk = &w[(c * d.c + ci) * kk..][..kk];
                for (&wv, &t) in wk.iter().zip(&taps) {
                    let i0 = (lo as isize + t) as usize;
                    axpy(&mut acc[lo..hi], &inp[i0..i0 + hi - lo], wv);
                }
            }
        }
        pd.crop_plane(&acc, o);
        for v in o.iter_mut() {
            *v += bias[c];
        }
    });
    out
}

fn conv_grad_input<F: Real>(gout: &[F], d: Dims5, w: &[F], co: usize, k: usize) -> Vec<F> {
    let s = d.spatial();
    let kk = k * k * k;
    let pd = Padded::new(d, k);
    let taps = pd.taps(k);
    let gp = pd.pad_all(gout, d.b * co);
    let mut gx = vec![F::zero(); d.b * d.c * s];
    gx.par_chunks_mut(s).enumerate().for_each(|(bc, gi)| {
        let (b, ci) = (bc / d.c, bc % d.c);
        let mut acc = vec![F::zero(); pd.size];
        // gather form of the scatter grad_in[n + tap] += w * grad_out[n];
        // pads of grad_out are zero, so reading them is harmless
        for lo in (pd.start..pd.start + pd.len).step_by(BLOCK) {
            let hi = (lo + BLOCK).min(pd.start + pd.len);
            for c in 0..co {
                let go = &gp[(b * co + c) * pd.size..][..pd.size];
                let wk = &w[(c * d.c + ci) * kk..][..kk];
                for (&wv, &t) in wk.iter().zip(&taps) {
                    let i0 = (lo as isize - t) as usize;
                    axpy(&mut acc[lo..hi], &go[i0..i0 + hi - lo], wv);
                }
            }
        }
        pd.crop_plane(&acc, gi);
    });
    gx
}

fn conv_grad_weight<F: Real>(gout: &[F], x: &[F], d: Dims5, co: usize, k: usize) -> Vec<F> {
    let kk = k * k * k;
    let pd = Padded::new(d, k);
    let taps = pd.taps(k);
    let xp = pd.pad_all(x, d.b * d.c);
    // zero pads in the output gradient mask out the junk positions
    let gp = pd.pad_all(gout, d.b * co);
    let mut gw = vec![F::zero(); co * d.c * kk];
    gw.par_chunks_mut(kk).enumerate().for_each(|(cc, gwk)| {
        let (c, ci) = (cc / d.c, cc % d.c);
        for b in 0..d.b {
            let go = &gp[(b * co + c) * pd.size..][..pd.size];
            let inp = &xp[(b * d.c + ci) * pd.size..][..pd.size];
            for lo in (pd.start..pd.start + pd.len).step_by(BLOCK) {
                let hi = (lo + BLOCK).min(pd.start + pd.len);
                for (g, &t) in gwk.iter_mut().zip(&taps) {
                    let i0 = (lo as isize + t) as usize;
                    *g += dot(&go[lo..hi], &inp[i0..i0 + hi - lo]);
                }
            }
        }
    });
    gw
}

struct Conv3d {
    inputs: [Var; 3],
    dims: Dims5,
    out_channels: usize,
    kernel: usize,
}

impl<F: Real> Op<F> for Conv3d {
    fn name(&self) -> &'static str {
        "conv3d"
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
        let x = graph.value(self.inputs[0]);
        let w = graph.value(self.inputs[1]);
        let (d, co, k) = (self.dims, self.out_channels, self.kernel);
        let gx = wants[0].then(|| {
            Tensor::new(x.shape().to_vec(), conv_grad_input(grad.data(), d, w.data(), co, k)).expect("shape")
        });
        let gw = wants[1].then(|| {
            Tensor::new(w.shape().to_vec(), conv_grad_weight(grad.data(), x.data(), d, co, k)).expect("shape")
        });
        let gb = wants[2].then(|| {
            let s = d.spatial();
            let mut gb = vec![F::zero(); co];
            for (bc, chunk) in grad.data().chunks(s).enumerate() {
                gb[bc % co] += chunk.iter().copied().sum();
            }
            Tensor::new(vec![co], gb).expect("shape")
        });
        vec![gx, gw, gb]
    }
}

/// Same-padded convolution. `weight` is `[out, in, k, k, k]` with odd `k`,
/// `bias` is `[out]`.
pub fn conv3d<F: Real>(g: &mut Graph<F>, x: Var, weight: Var, bias: Var) -> Result<Var, GraphError> {
    let d = Dims5::of("conv3d", g.value(x))?;
    let (co, k) = match *g.shape(weight) {
        [co, ci, k, k1, k2] if ci == d.c && k == k1 && k == k2 && k % 2 == 1 => (co, k),
        ref s => {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                detail: format!("weight {s:?} incompatible with {} input channels", d.c),
            }
            .into())
        }
    };
    if g.shape(bias) != [co] {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            detail: format!("bias {:?} for {co} output channels", g.shape(bias)),
        }
        .into());
    }
    let data = conv_forward(
        g.value(x).data(),
        d,
        g.value(weight).data(),
        g.value(bias).data(),
        co,
        k,
    );
    let value = Tensor::new(vec![d.b, co, d.x, d.y, d.z], data)?;
    Ok(g.record(
        Conv3d {
            inputs: [x, weight, bias],
            dims: d,
            out_channels: co,
            kernel: k,
        },
        value,
    ))
}

struct MaxPool2 {
    inputs: [Var; 1],
    argmax: Vec<usize>,
}

impl<F: Real> Op<F> for MaxPool2 {
    fn name(&self) -> &'static str {
        "max_pool"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn branch_state(&self, _graph: &Graph<F>, out: &mut Vec<usize>) {
        out.extend_from_slice(&self.argmax);
    }

    fn backward(
        &self,
        graph: &Graph<F>,
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _wants: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let shape = graph.shape(self.inputs[0]).to_vec();
        let mut gx = Tensor::zeros(&shape);
        let d = gx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] += g;
        }
        vec![Some(gx)]
    }
}

/// 2x2x2 max pooling with stride 2. Ties go to the first voxel in row-major
/// order.
pub fn max_pool2<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var, GraphError> {
    let d = Dims5::of("max_pool", g.value(x))?;
    if d.x % 2 + d.y % 2 + d.z % 2 != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "max_pool",
            detail: format!("spatial dims ({}, {}, {}) not even", d.x, d.y, d.z),
        }
        .into());
    }
    let (hx, hy, hz) = (d.x / 2, d.y / 2, d.z / 2);
    let n = d.b * d.c * hx * hy * hz;
    if let Some(argmax) = g.next_branches(n).filter(|a| a.len() == n && a.iter().all(|&i| i < d.b * d.c * d.spatial())) {
        let src = g.value(x).data();
        let out = argmax.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(vec![d.b, d.c, hx, hy, hz], out)?;
        return Ok(g.record(MaxPool2 { inputs: [x], argmax }, value));
    }
    let src = g.value(x).data();
    let mut out = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for bc in 0..d.b * d.c {
        let base = bc * d.spatial();
        for px in 0..hx {
            for py in 0..hy {
                for pz in 0..hz {
                    let mut best = base + ((2 * px) * d.y + 2 * py) * d.z + 2 * pz;
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                let i = base + ((2 * px + dx) * d.y + 2 * py + dy) * d.z + 2 * pz + dz;
                                if src[i] > src[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
    }
    let value = Tensor::new(vec![d.b, d.c, hx, hy, hz], out)?;
    Ok(g.record(MaxPool2 { inputs: [x], argmax }, value))
}

struct Upsample2 {
    inputs: [Var; 1],
    dims: Dims5,
}

impl<F: Real> Op<F> for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        _graph: &Graph<F>,
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _wants: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let d = self.dims;
        let mut gx = Tensor::zeros(&[d.b, d.c, d.x, d.y, d.z]);
        let gd = gx.data_mut();
        let (ux, uy, uz) = (2 * d.x, 2 * d.y, 2 * d.z);
        let g = grad.data();
        for bc in 0..d.b * d.c {
            let ib = bc * d.spatial();
            let ob = bc * ux * uy * uz;
            for x in 0..ux {
                for y in 0..uy {
                    for z in 0..uz {
                        gd[ib + ((x / 2) * d.y + y / 2) * d.z + z / 2] += g[ob + (x * uy + y) * uz + z];
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Nearest-neighbour 2x upsampling on every spatial axis.
pub fn upsample2<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var, GraphError> {
    let d = Dims5::of("upsample", g.value(x))?;
    let (ux, uy, uz) = (2 * d.x, 2 * d.y, 2 * d.z);
    let src = g.value(x).data();
    let mut out = Vec::with_capacity(d.b * d.c * ux * uy * uz);
    for bc in 0..d.b * d.c {
        let ib = bc * d.spatial();
        for x in 0..ux {
            for y in 0..uy {
                let row = ib + ((x / 2) * d.y + y / 2) * d.z;
                for z in 0..uz {
                    out.push(src[row + z / 2]);
                }
            }
        }
    }
    let value = Tensor::new(vec![d.b, d.c, ux, uy, uz], out)?;
    Ok(g.record(Upsample2 { inputs: [x], dims: d }, value))
}

struct ConcatChannels {
    inputs: [Var; 2],
    first: Dims5,
    second_channels: usize,
}

impl<F: Real> Op<F> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        _graph: &Graph<F>,
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        wants: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let d = self.first;
        let (c1, c2, s) = (d.c, self.second_channels, d.spatial());
        let mut ga = Vec::with_capacity(d.b * c1 * s);
        let mut gb = Vec::with_capacity(d.b * c2 * s);
        for chunk in grad.data().chunks((c1 + c2) * s) {
            ga.extend_from_slice(&chunk[..c1 * s]);
            gb.extend_from_slice(&chunk[c1 * s..]);
        }
        vec![
            wants[0].then(|| Tensor::new(vec![d.b, c1, d.x, d.y, d.z], ga).expect("shape")),
            wants[1].then(|| Tensor::new(vec![d.b, c2, d.x, d.y, d.z], gb).expect("shape")),
        ]
    }
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Result<Var, GraphError> {
    let da = Dims5::of("concat", g.value(a))?;
    let db = Dims5::of("concat", g.value(b))?;
    if (da.b, da.x, da.y, da.z) != (db.b, db.x, db.y, db.z) {
        return Err(TensorError::ShapeMismatch {
            op: "concat",
            detail: format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        }
        .into());
    }
    let s = da.spatial();
    let (va, vb) = (g.value(a).data(), g.value(b).data());
    let mut out = Vec::with_capacity(va.len() + vb.len());
    for i in 0..da.b {
        out.extend_from_slice(&va[i * da.c * s..(i + 1) * da.c * s]);
        out.extend_from_slice(&vb[i * db.c * s..(i + 1) * db.c * s]);
    }
    let value = Tensor::new(vec![da.b, da.c + db.c, da.x, da.y, da.z], out)?;
    Ok(g.record(
        ConcatChannels {
            inputs: [a, b],
            first: da,
            second_channels: db.c,
        },
        value,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    /// Direct definition of same-padded correlation, one output voxel at a time.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
        let [nb, ci, nx, ny, nz] = x.shape().try_into().unwrap();
        let [co, _, k, _, _] = w.shape().try_into().unwrap();
        let pad = (k / 2) as isize;
        let mut out = Vec::new();
        for bi in 0..nb {
            for c in 0..co {
                for px in 0..nx as isize {
                    for py in 0..ny as isize {
                        for pz in 0..nz as isize {
                            let mut acc = b[c];
                            for i in 0..ci {
                                for kx in 0..k as isize {
                                    for ky in 0..k as isize {
                                        for kz in 0..k as isize {
                                            let (qx, qy, qz) = (px + kx - pad, py + ky - pad, pz + kz - pad);
                                            if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize {
                                                continue;
                                            }
                                            let xi = (((bi * ci + i) * nx + qx as usize) * ny + qy as usize) * nz + qz as usize;
                                            let wi = (((c * ci + i) * k + kx as usize) * k + ky as usize) * k + kz as usize;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            out.push(acc);
                        }
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], k: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i as f64) * k).sin()).collect();
        Tensor::from_f64_slice(shape, &v).unwrap()
    }

    #[test]
    fn conv_matches_direct_definition() {
        let x = ramp(&[2, 3, 4, 5, 6], 0.37);
        let w = ramp(&[2, 3, 3, 3, 3], 1.1);
        let b = [0.25, -0.5];
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let bv = g.constant(Tensor::from_f64_slice(&[2], &b).unwrap());
        let y = conv3d(&mut g, xv, wv, bv).unwrap();
        let expect = conv_naive(&x, &w, &b);
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(conv3d(&mut g, x, w, b).is_err());
    }

    #[test]
    fn pool_then_upsample_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", ramp(&[1, 2, 4, 4, 4], 0.9)).unwrap();
        let p = max_pool2(&mut g, x).unwrap();
        assert_eq!(g.shape(p), &[1, 2, 2, 2, 2]);
        let u = upsample2(&mut g, p).unwrap();
        assert_eq!(g.shape(u), &[1, 2, 4, 4, 4]);
        let s = ops::sum(&mut g, u);
        g.forward_eval(s).unwrap();
        // each pooled max feeds 8 upsampled voxels
        let grad = g.backward_gradients().unwrap();
        let gx = grad.get("x").unwrap();
        assert_eq!(gx.sum(), 8.0 * 16.0);
        assert_eq!(gx.data().iter().filter(|&&v| v != 0.0).count(), 16);
    }

    #[test]
    fn pool_rejects_odd_dims() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 4, 4]));
        assert!(max_pool2(&mut g, x).is_err());
    }

    #[test]
    fn concat_orders_channels() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[2, 1, 2, 2, 2], 1.0));
        let b = g.constant(Tensor::full(&[2, 2, 2, 2, 2], 2.0));
        let c = concat_channels(&mut g, a, b).unwrap();
        let v = g.value(c);
        assert_eq!(v.shape(), &[2, 3, 2, 2, 2]);
        assert_eq!(&v.data()[..8], &[1.0; 8]);
        assert_eq!(&v.data()[8..24], &[2.0; 16]);
        assert_eq!(&v.data()[24..32], &[1.0; 8]);
    }
}
