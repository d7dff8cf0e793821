//! Graph-free forward and backward kernels.
//!
//! Everything here is a pure function of its arguments; the tape in
//! `graph.rs` records which kernel produced a node and replays the matching
//! backward kernel.

use super::pairs::{PairList, Segments};
use super::tensor::numel;
use super::{Scalar, Tensor};
use crate::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn mat_dims(t: &Tensor<impl Scalar>, trans: bool) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    let (batch, r, c) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => return Err(Error::Invalid(format!("matmul operand must be rank 2 or 3, got {s:?}"))),
    };
    Ok(if trans { (batch, c, r) } else { (batch, r, c) })
}

/// Batched matrix product `op(a)·op(b)` where `op` optionally transposes
/// the trailing two axes. Both operands must share the same rank (2 or 3)
/// and batch size.
pub fn bmm<S: Scalar>(a: &Tensor<S>, ta: bool, b: &Tensor<S>, tb: bool) -> Result<Tensor<S>> {
    let (ba, m, k) = mat_dims(a, ta)?;
    let (bb, k2, n) = mat_dims(b, tb)?;
    if a.rank() != b.rank() || ba != bb || k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let a_cols = a.last_dim();
    let b_cols = b.last_dim();
    let a_strides = if ta { (1, a_cols) } else { (a_cols, 1) };
    let b_strides = if tb { (1, b_cols) } else { (b_cols, 1) };
    let mut out = vec![S::zero(); ba * m * n];
    let (sa, sb) = (m * k, k * n);
    for i in 0..ba {
        S::gemm(
            m,
            k,
            n,
            &a.data()[i * sa..(i + 1) * sa],
            a_strides,
            &b.data()[i * sb..(i + 1) * sb],
            b_strides,
            S::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            (n, 1),
        );
    }
    let shape = if a.rank() == 2 { vec![m, n] } else { vec![ba, m, n] };
    Ok(Tensor::raw(shape, out))
}

/// Splits a shape around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len().max(1) {
        return Err(Error::Invalid(format!("axis {axis} invalid for shape {shape:?}")));
    }
    if shape.is_empty() {
        return Ok((1, 1, 1));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = S::neg_infinity();
            for j in 0..n {
                mx = mx.max(src[base + j * inner]);
            }
            let mut total = S::zero();
            for j in 0..n {
                let e = (src[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                out[base + j * inner] /= total;
            }
        }
    }
    Ok(Tensor::raw(x.shape().to_vec(), out))
}

/// `dx = y ⊙ (g − Σ_axis g⊙y)` given the softmax output `y`.
pub fn softmax_backward<S: Scalar>(y: &Tensor<S>, g: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, n, inner) = axis_split(y.shape(), axis).expect("validated in forward");
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![S::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: S = (0..n).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
            for j in 0..n {
                let p = base + j * inner;
                dx[p] = yd[p] * (gd[p] - dot);
            }
        }
    }
    Tensor::raw(y.shape().to_vec(), dx)
}

pub struct LayerNormOut<S> {
    pub out: Tensor<S>,
    pub xhat: Tensor<S>,
    pub rstd: Vec<S>,
}

pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<LayerNormOut<S>> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let cs = S::of(c as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / c);
    for row in x.rows() {
        let mean = row.iter().copied().sum::<S>() / cs;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cs;
        let r = S::one() / (var + eps).sqrt();
        rstd.push(r);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            xhat.push(h);
            out.push(h * gamma.data()[j] + beta.data()[j]);
        }
    }
    Ok(LayerNormOut {
        out: Tensor::raw(x.shape().to_vec(), out),
        xhat: Tensor::raw(x.shape().to_vec(), xhat),
        rstd,
    })
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward<S: Scalar>(
    g: &Tensor<S>,
    xhat: &Tensor<S>,
    rstd: &[S],
    gamma: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let c = xhat.last_dim();
    let cs = S::of(c as f64);
    let mut dx = vec![S::zero(); g.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    let gm = gamma.data();
    for (r, ((grow, hrow), dxrow)) in g
        .rows()
        .zip(xhat.rows())
        .zip(dx.chunks_exact_mut(c))
        .enumerate()
    {
        let mut mean_dh = S::zero();
        let mut mean_dh_h = S::zero();
        for j in 0..c {
            let dh = grow[j] * gm[j];
            mean_dh += dh;
            mean_dh_h += dh * hrow[j];
            dgamma[j] += grow[j] * hrow[j];
            dbeta[j] += grow[j];
        }
        mean_dh /= cs;
        mean_dh_h /= cs;
        for j in 0..c {
            let dh = grow[j] * gm[j];
            dxrow[j] = rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
        }
    }
    (
        Tensor::raw(g.shape().to_vec(), dx),
        Tensor::raw(vec![c], dgamma),
        Tensor::raw(vec![c], dbeta),
    )
}

/// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let u = S::of(SQRT_2_OVER_PI) * (x + S::of(GELU_CUBIC) * x * x * x);
    half * x * (S::one() + u.tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let k = S::of(SQRT_2_OVER_PI);
    let a = S::of(GELU_CUBIC);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + S::of(3.0) * a * x * x)
}

fn hwc(x: &Tensor<impl Scalar>, op: &str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Geometry(format!("{op} expects an h×w×c tensor, got {s:?}"))),
    }
}

fn pooled_extent(len: usize, k: usize, stride: usize, pad: usize, op: &str) -> Result<usize> {
    if k == 0 || stride == 0 || len + 2 * pad < k || !(len + 2 * pad - k).is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "{op}: extent {len} with kernel {k}, stride {stride}, pad {pad} does not tile evenly"
        )));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

pub fn avg_pool2d<S: Scalar>(x: &Tensor<S>, k: usize, stride: usize) -> Result<Tensor<S>> {
    let (h, w, c) = hwc(x, "avg_pool2d")?;
    let oh = pooled_extent(h, k, stride, 0, "avg_pool2d")?;
    let ow = pooled_extent(w, k, stride, 0, "avg_pool2d")?;
    let inv = S::one() / S::of((k * k) as f64);
    let src = x.data();
    let mut out = vec![S::zero(); oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for ky in 0..k {
                for kx in 0..k {
                    let (y, xx) = (oy * stride + ky, ox * stride + kx);
                    let s = &src[(y * w + xx) * c..(y * w + xx + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
    }
    Ok(Tensor::raw(vec![oh, ow, c], out))
}

pub fn avg_pool2d_backward<S: Scalar>(
    g: &Tensor<S>,
    in_shape: &[usize],
    k: usize,
    stride: usize,
) -> Tensor<S> {
    let (w, c) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (g.shape()[0], g.shape()[1]);
    let inv = S::one() / S::of((k * k) as f64);
    let mut dx = vec![S::zero(); numel(in_shape)];
    for oy in 0..oh {
        for ox in 0..ow {
            let gs = &g.data()[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for ky in 0..k {
                for kx in 0..k {
                    let (y, xx) = (oy * stride + ky, ox * stride + kx);
                    for (d, &v) in dx[(y * w + xx) * c..(y * w + xx + 1) * c].iter_mut().zip(gs) {
                        *d += v * inv;
                    }
                }
            }
        }
    }
    Tensor::raw(in_shape.to_vec(), dx)
}

/// Geometry of a 2-D convolution over an `h×w×c_in` input with a
/// `kh×kw×c_in×c_out` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>, stride: usize, pad: usize) -> Result<Self> {
        let (h, w, cin) = hwc(x, "conv2d")?;
        let (kh, kw, kc, cout) = match kernel.shape() {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(Error::Geometry(format!("conv2d kernel must be kh×kw×cin×cout, got {s:?}"))),
        };
        if kc != cin {
            return Err(Error::shape("conv2d", x.shape(), kernel.shape()));
        }
        let oh = pooled_extent(h, kh, stride, pad, "conv2d")?;
        let ow = pooled_extent(w, kw, stride, pad, "conv2d")?;
        Ok(ConvGeom { h, w, cin, kh, kw, cout, stride, pad, oh, ow })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Unfolds input patches into an `(oh·ow)×(kh·kw·cin)` matrix; padding reads as zero.
pub fn im2col<S: Scalar>(x: &Tensor<S>, g: &ConvGeom) -> Tensor<S> {
    let patch = g.patch();
    let mut cols = vec![S::zero(); g.oh * g.ow * patch];
    let src = x.data();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * patch..(oy * g.ow + ox + 1) * patch];
            for ky in 0..g.kh {
                let y = (oy * g.stride + ky) as isize - g.pad as isize;
                if y < 0 || y >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let xx = (ox * g.stride + kx) as isize - g.pad as isize;
                    if xx < 0 || xx >= g.w as isize {
                        continue;
                    }
                    let s = (y as usize * g.w + xx as usize) * g.cin;
                    let d = (ky * g.kw + kx) * g.cin;
                    row[d..d + g.cin].copy_from_slice(&src[s..s + g.cin]);
                }
            }
        }
    }
    Tensor::raw(vec![g.oh * g.ow, patch], cols)
}

pub fn col2im<S: Scalar>(cols: &Tensor<S>, g: &ConvGeom) -> Tensor<S> {
    let patch = g.patch();
    let mut dx = vec![S::zero(); g.h * g.w * g.cin];
    let src = cols.data();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &src[(oy * g.ow + ox) * patch..(oy * g.ow + ox + 1) * patch];
            for ky in 0..g.kh {
                let y = (oy * g.stride + ky) as isize - g.pad as isize;
                if y < 0 || y >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let xx = (ox * g.stride + kx) as isize - g.pad as isize;
                    if xx < 0 || xx >= g.w as isize {
                        continue;
                    }
                    let d = (y as usize * g.w + xx as usize) * g.cin;
                    let s = (ky * g.kw + kx) * g.cin;
                    for (o, &v) in dx[d..d + g.cin].iter_mut().zip(&row[s..s + g.cin]) {
                        *o += v;
                    }
                }
            }
        }
    }
    Tensor::raw(vec![g.h, g.w, g.cin], dx)
}

/// Cross-correlation plus optional bias. Returns the output and the im2col
/// matrix (kept for the backward pass).
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<S>, Tensor<S>, ConvGeom)> {
    let g = ConvGeom::new(x, kernel, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d bias", b.shape(), &[g.cout]));
        }
    }
    let cols = im2col(x, &g);
    let wmat = Tensor::raw(vec![g.patch(), g.cout], kernel.data().to_vec());
    let mut out = bmm(&cols, false, &wmat, false)?.into_data();
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(g.cout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok((Tensor::raw(vec![g.oh, g.ow, g.cout], out), cols, g))
}

pub fn permute<S: Scalar>(x: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Invalid(format!("bad permutation {perm:?} for rank {rank}")));
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Tensor::raw(out_shape, out))
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Source taps of one output coordinate under align-corners-false bilinear
/// resampling: (low index, high index, weight of high).
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, if hi == lo { 0.0 } else { src - lo as f64 })
        })
        .collect()
}

pub fn bilinear_resize<S: Scalar>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (h, w, c) = hwc(x, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Geometry("bilinear_resize target must be positive".into()));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let src = x.data();
    let mut out = vec![S::zero(); out_h * out_w * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let dst = &mut out[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let wgt = S::of(wy * wx);
                    if wgt == S::zero() {
                        continue;
                    }
                    let s = &src[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d += wgt * v;
                    }
                }
            }
        }
    }
    Ok(Tensor::raw(vec![out_h, out_w, c], out))
}

pub fn bilinear_backward<S: Scalar>(g: &Tensor<S>, in_shape: &[usize]) -> Tensor<S> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (out_h, out_w) = (g.shape()[0], g.shape()[1]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = vec![S::zero(); h * w * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let gs = &g.data()[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let wgt = S::of(wy * wx);
                    if wgt == S::zero() {
                        continue;
                    }
                    for (d, &v) in dx[(yy * w + xx) * c..(yy * w + xx + 1) * c].iter_mut().zip(gs) {
                        *d += wgt * v;
                    }
                }
            }
        }
    }
    Tensor::raw(in_shape.to_vec(), dx)
}

/// Softmax within each segment of the last axis, independently for every
/// leading row.
pub fn segment_softmax<S: Scalar>(x: &Tensor<S>, segs: &Segments) -> Result<Tensor<S>> {
    let e = x.last_dim();
    if segs.span() != e {
        return Err(Error::shape("segment_softmax", x.shape(), &[segs.span()]));
    }
    let mut out = vec![S::zero(); x.len()];
    for (row, orow) in x.rows().zip(out.chunks_exact_mut(e)) {
        for seg in segs.iter() {
            let mx = seg.iter().fold(S::neg_infinity(), |m, &i| m.max(row[i as usize]));
            let mut total = S::zero();
            for &i in seg {
                let v = (row[i as usize] - mx).exp();
                orow[i as usize] = v;
                total += v;
            }
            for &i in seg {
                orow[i as usize] /= total;
            }
        }
    }
    Ok(Tensor::raw(x.shape().to_vec(), out))
}

pub fn segment_softmax_backward<S: Scalar>(y: &Tensor<S>, g: &Tensor<S>, segs: &Segments) -> Tensor<S> {
    let e = y.last_dim();
    let mut dx = vec![S::zero(); y.len()];
    for ((yr, gr), dr) in y.rows().zip(g.rows()).zip(dx.chunks_exact_mut(e)) {
        for seg in segs.iter() {
            let dot: S = seg.iter().map(|&i| yr[i as usize] * gr[i as usize]).sum();
            for &i in seg {
                let i = i as usize;
                dr[i] = yr[i] * (gr[i] - dot);
            }
        }
    }
    Tensor::raw(y.shape().to_vec(), dx)
}

fn token_rows(x: &Tensor<impl Scalar>, n: usize, what: &str) -> Result<usize> {
    let c = x.last_dim();
    if x.rank() < 2 || x.len() / c != n {
        return Err(Error::Geometry(format!(
            "{what}: expected {n} tokens, got tensor {:?}",
            x.shape()
        )));
    }
    Ok(c)
}

/// Per-head scaled dot products for every (left, right) pair:
/// `out[h, e] = scale · ⟨q[left_e, head h], k[right_e, head h]⟩`.
pub fn pair_dot<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, pairs: &PairList, heads: usize, scale: S) -> Result<Tensor<S>> {
    let c = token_rows(q, pairs.n_left(), "pair_dot queries")?;
    if token_rows(k, pairs.n_right(), "pair_dot keys")? != c || heads == 0 || c % heads != 0 {
        return Err(Error::shape("pair_dot", q.shape(), k.shape()));
    }
    let d = c / heads;
    let e = pairs.len();
    let mut out = vec![S::zero(); heads * e];
    let (qd, kd) = (q.data(), k.data());
    for (p, (&l, &r)) in pairs.left().iter().zip(pairs.right()).enumerate() {
        let qr = &qd[l as usize * c..(l as usize + 1) * c];
        let kr = &kd[r as usize * c..(r as usize + 1) * c];
        for h in 0..heads {
            let s: S = qr[h * d..(h + 1) * d].iter().zip(&kr[h * d..(h + 1) * d]).map(|(&a, &b)| a * b).sum();
            out[h * e + p] = s * scale;
        }
    }
    Ok(Tensor::raw(vec![heads, e], out))
}

/// Returns (dq, dk) for [`pair_dot`].
pub fn pair_dot_backward<S: Scalar>(
    g: &Tensor<S>,
    q: &Tensor<S>,
    k: &Tensor<S>,
    pairs: &PairList,
    heads: usize,
    scale: S,
) -> (Tensor<S>, Tensor<S>) {
    let c = q.last_dim();
    let d = c / heads;
    let e = pairs.len();
    let mut dq = vec![S::zero(); q.len()];
    let mut dk = vec![S::zero(); k.len()];
    let (qd, kd, gd) = (q.data(), k.data(), g.data());
    for (p, (&l, &r)) in pairs.left().iter().zip(pairs.right()).enumerate() {
        let (l, r) = (l as usize, r as usize);
        for h in 0..heads {
            let gv = gd[h * e + p] * scale;
            if gv == S::zero() {
                continue;
            }
            for j in h * d..(h + 1) * d {
                dq[l * c + j] += gv * kd[r * c + j];
                dk[r * c + j] += gv * qd[l * c + j];
            }
        }
    }
    (
        Tensor::raw(q.shape().to_vec(), dq),
        Tensor::raw(k.shape().to_vec(), dk),
    )
}

/// Weighted per-head sum of right-side values into left-side tokens:
/// `out[left_e, head h] += w[h, e] · v[right_e, head h]`.
pub fn pair_aggregate<S: Scalar>(w: &Tensor<S>, v: &Tensor<S>, pairs: &PairList) -> Result<Tensor<S>> {
    let c = token_rows(v, pairs.n_right(), "pair_aggregate values")?;
    let (heads, e) = match w.shape() {
        &[h, e] => (h, e),
        s => return Err(Error::Geometry(format!("pair_aggregate weights must be heads×pairs, got {s:?}"))),
    };
    if e != pairs.len() || c % heads != 0 {
        return Err(Error::shape("pair_aggregate", w.shape(), v.shape()));
    }
    let d = c / heads;
    let mut out = vec![S::zero(); pairs.n_left() * c];
    let (wd, vd) = (w.data(), v.data());
    for (p, (&l, &r)) in pairs.left().iter().zip(pairs.right()).enumerate() {
        let (l, r) = (l as usize, r as usize);
        for h in 0..heads {
            let wv = wd[h * e + p];
            for j in h * d..(h + 1) * d {
                out[l * c + j] += wv * vd[r * c + j];
            }
        }
    }
    Ok(Tensor::raw(vec![pairs.n_left(), c], out))
}

/// Returns (dw, dv) for [`pair_aggregate`].
pub fn pair_aggregate_backward<S: Scalar>(
    g: &Tensor<S>,
    w: &Tensor<S>,
    v: &Tensor<S>,
    pairs: &PairList,
) -> (Tensor<S>, Tensor<S>) {
    let c = v.last_dim();
    let heads = w.shape()[0];
    let e = pairs.len();
    let d = c / heads;
    let mut dw = vec![S::zero(); w.len()];
    let mut dv = vec![S::zero(); v.len()];
    let (wd, vd, gd) = (w.data(), v.data(), g.data());
    for (p, (&l, &r)) in pairs.left().iter().zip(pairs.right()).enumerate() {
        let (l, r) = (l as usize, r as usize);
        for h in 0..heads {
            let wv = wd[h * e + p];
            let mut acc = S::zero();
            for j in h * d..(h + 1) * d {
                acc += gd[l * c + j] * vd[r * c + j];
                dv[r * c + j] += wv * gd[l * c + j];
            }
            dw[h * e + p] = acc;
        }
    }
    (
        Tensor::raw(w.shape().to_vec(), dw),
        Tensor::raw(v.shape().to_vec(), dv),
    )
}

/// Spreads left-side rows to right-side rows through per-pair weights:
/// `out[right_e] += w[e] · src[left_e]`. With row-stochastic weights per
/// right index this is a sparse convex-combination upsampling.
pub fn pair_spread<S: Scalar>(w: &Tensor<S>, src: &Tensor<S>, pairs: &PairList) -> Result<Tensor<S>> {
    let c = token_rows(src, pairs.n_left(), "pair_spread source")?;
    if w.len() != pairs.len() {
        return Err(Error::shape("pair_spread", w.shape(), &[pairs.len()]));
    }
    let mut out = vec![S::zero(); pairs.n_right() * c];
    let sd = src.data();
    for ((&l, &r), &wv) in pairs.left().iter().zip(pairs.right()).zip(w.data()) {
        let (l, r) = (l as usize, r as usize);
        for (o, &s) in out[r * c..(r + 1) * c].iter_mut().zip(&sd[l * c..(l + 1) * c]) {
            *o += wv * s;
        }
    }
    Ok(Tensor::raw(vec![pairs.n_right(), c], out))
}

/// Returns (dw, dsrc) for [`pair_spread`].
pub fn pair_spread_backward<S: Scalar>(
    g: &Tensor<S>,
    w: &Tensor<S>,
    src: &Tensor<S>,
    pairs: &PairList,
) -> (Tensor<S>, Tensor<S>) {
    let c = src.last_dim();
    let mut dw = vec![S::zero(); w.len()];
    let mut dsrc = vec![S::zero(); src.len()];
    let (sd, gd) = (src.data(), g.data());
    for (p, ((&l, &r), &wv)) in pairs.left().iter().zip(pairs.right()).zip(w.data()).enumerate() {
        let (l, r) = (l as usize, r as usize);
        let mut acc = S::zero();
        for j in 0..c {
            acc += gd[r * c + j] * sd[l * c + j];
            dsrc[l * c + j] += wv * gd[r * c + j];
        }
        dw[p] = acc;
    }
    (
        Tensor::raw(w.shape().to_vec(), dw),
        Tensor::raw(src.shape().to_vec(), dsrc),
    )
}

/// Mean softmax cross-entropy over rows of `logits` (last axis = classes).
/// Returns (loss, probabilities).
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[u32]) -> Result<(S, Tensor<S>)> {
    let c = logits.last_dim();
    let n = logits.len() / c;
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Label { label: bad as usize, classes: c });
    }
    let probs = softmax(logits, logits.rank().max(1) - 1)?;
    let mut loss = S::zero();
    for (row, &l) in logits.rows().zip(labels) {
        // log-sum-exp form keeps saturated logits exact
        let mx = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
        loss += lse - row[l as usize];
    }
    Ok((loss / S::of(n as f64), probs))
}
