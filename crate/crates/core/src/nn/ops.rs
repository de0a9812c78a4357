//! Forward and backward kernels for the differentiable primitives.
//!
//! Every kernel is a pure function of tensors. Feature maps are `H×W×C`,
//! token matrices `N×C`; "rows" always means the last axis.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn map3<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: format!("{op} expects an H×W×C map"),
        }),
    }
}

/// `x · w + b` over the last axis of `x`; leading axes are kept.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.last_dim() != w.shape()[0] {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    let (n, out) = (x.lead_len(), w.shape()[1]);
    if b.shape() != [out] {
        return Err(Error::dim("linear bias", w.shape(), b.shape()));
    }
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    gemm(x.mat(), w.mat(), T::one(), MatMut::row_major(&mut y, n, out));
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = out;
    Ok(Tensor::from_parts(shape, y))
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, inp, out) = (x.lead_len(), w.shape()[0], w.shape()[1]);
    let mut dx = vec![T::zero(); n * inp];
    gemm(dy.mat(), w.mat().t(), T::zero(), MatMut::row_major(&mut dx, n, inp));
    let mut dw = vec![T::zero(); inp * out];
    gemm(x.mat().t(), dy.mat(), T::zero(), MatMut::row_major(&mut dw, inp, out));
    let mut db = vec![T::zero(); out];
    for row in dy.data().chunks_exact(out) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![inp, out], dw),
        Tensor::from_parts(vec![out], db),
    )
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    let inv = total.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    let m = y.last_dim();
    for row in y.data_mut().chunks_exact_mut(m) {
        softmax_in_place(row);
    }
    y
}

fn softmax_backward_row<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((o, &p), &g) in dx.iter_mut().zip(y).zip(dy) {
        *o = p * (g - dot);
    }
}

pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let m = y.last_dim();
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), out) in y
        .data()
        .chunks_exact(m)
        .zip(dy.data().chunks_exact(m))
        .zip(dx.chunks_exact_mut(m))
    {
        softmax_backward_row(yr, gr, out);
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Saved state for [`layer_norm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Per-row standardization with population variance, then `gamma·x̂ + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let inv_d = T::c(1.0 / d as f64);
    let eps = T::c(eps);
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.lead_len());
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = (var + eps).sqrt().recip();
        rstd.push(r);
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            let h = (v - mean) * r;
            xhat.push(h);
            y.push(g * h + b);
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        LayerNormCache {
            xhat: Tensor::from_parts(shape, xhat),
            rstd,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.len();
    let dn = T::c(d as f64);
    let mut dx = Vec::with_capacity(dy.len());
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for ((xh, g), &r) in cache
        .xhat
        .data()
        .chunks_exact(d)
        .zip(dy.data().chunks_exact(d))
        .zip(&cache.rstd)
    {
        let mut sum = T::zero();
        let mut sum_xh = T::zero();
        for j in 0..d {
            dgamma[j] = dgamma[j] + g[j] * xh[j];
            dbeta[j] = dbeta[j] + g[j];
            dxhat[j] = g[j] * gamma.data()[j];
            sum = sum + dxhat[j];
            sum_xh = sum_xh + dxhat[j] * xh[j];
        }
        let k = r / dn;
        for j in 0..d {
            dx.push(k * (dn * dxhat[j] - sum - xh[j] * sum_xh));
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgamma),
        Tensor::from_parts(vec![d], dbeta),
    )
}

const GELU_K: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let u = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_K) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::c(SQRT_2_OVER_PI);
    let k = T::c(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::c(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * k * x * x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |v, g| gelu_grad_scalar(v) * g)
        .expect("gelu grad shape")
}

/// Per-channel 3×3 cross-correlation, stride 1, zero padding 1.
/// `kernels` is C×3×3, `bias` is C.
pub fn dwconv3x3<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = map3(x, "dwconv3x3")?;
    if kernels.shape() != [c, 3, 3] || bias.shape() != [c] {
        return Err(Error::dim("dwconv3x3", x.shape(), kernels.shape()));
    }
    // Kernel taps re-laid out tap-major so the channel loop is contiguous.
    let taps: Vec<T> = (0..9)
        .flat_map(|t| (0..c).map(move |ch| (t, ch)))
        .map(|(t, ch)| kernels.data()[ch * 9 + t])
        .collect();
    let xd = x.data();
    let mut y = Vec::with_capacity(x.len());
    for i in 0..h {
        for j in 0..w {
            let start = y.len();
            y.extend_from_slice(bias.data());
            let out = &mut y[start..];
            for di in 0..3 {
                let Some(si) = (i + di).checked_sub(1).filter(|&v| v < h) else { continue };
                for dj in 0..3 {
                    let Some(sj) = (j + dj).checked_sub(1).filter(|&v| v < w) else { continue };
                    let src = &xd[(si * w + sj) * c..][..c];
                    let k = &taps[(di * 3 + dj) * c..][..c];
                    for ((o, &s), &kk) in out.iter_mut().zip(src).zip(k) {
                        *o = *o + s * kk;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], y))
}

/// Returns `(dx, dkernels, dbias)`.
pub fn dwconv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let gd = dy.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk_taps = vec![T::zero(); 9 * c];
    let mut db = vec![T::zero(); c];
    for i in 0..h {
        for j in 0..w {
            let g = &gd[(i * w + j) * c..][..c];
            for (acc, &v) in db.iter_mut().zip(g) {
                *acc = *acc + v;
            }
            for di in 0..3 {
                let Some(si) = (i + di).checked_sub(1).filter(|&v| v < h) else { continue };
                for dj in 0..3 {
                    let Some(sj) = (j + dj).checked_sub(1).filter(|&v| v < w) else { continue };
                    let tap = di * 3 + dj;
                    let base = (si * w + sj) * c;
                    for ch in 0..c {
                        let k = kernels.data()[ch * 9 + tap];
                        dx[base + ch] = dx[base + ch] + k * g[ch];
                        dk_taps[tap * c + ch] = dk_taps[tap * c + ch] + xd[base + ch] * g[ch];
                    }
                }
            }
        }
    }
    let dk = (0..c * 9).map(|idx| dk_taps[(idx % 9) * c + idx / 9]).collect();
    (
        Tensor::from_parts(vec![h, w, c], dx),
        Tensor::from_parts(vec![c, 3, 3], dk),
        Tensor::from_parts(vec![c], db),
    )
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Non-overlapping `s×s` window means. Extents that `s` does not divide are
/// zero-padded at the bottom/right; the divisor stays `s²`.
pub fn avgpool_window<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (h, w, c) = map3(x, "avgpool_window")?;
    if s == 0 {
        return Err(Error::config("window size must be at least 1"));
    }
    let (ph, pw) = (ceil_div(h, s), ceil_div(w, s));
    let mut y = vec![T::zero(); ph * pw * c];
    let xd = x.data();
    for i in 0..h {
        for j in 0..w {
            let dst = ((i / s) * pw + j / s) * c;
            let src = &xd[(i * w + j) * c..][..c];
            for (o, &v) in y[dst..dst + c].iter_mut().zip(src) {
                *o = *o + v;
            }
        }
    }
    let inv = T::c(1.0 / (s * s) as f64);
    for v in y.iter_mut() {
        *v = *v * inv;
    }
    Ok(Tensor::from_parts(vec![ph, pw, c], y))
}

pub fn avgpool_window_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize, s: usize) -> Tensor<T> {
    let (pw, c) = (dy.shape()[1], dy.shape()[2]);
    let inv = T::c(1.0 / (s * s) as f64);
    let gd = dy.data();
    let mut dx = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let src = &gd[((i / s) * pw + j / s) * c..][..c];
            dx.extend(src.iter().map(|&g| g * inv));
        }
    }
    Tensor::from_parts(vec![h, w, c], dx)
}

/// Split a map into `⌈H/s⌉·⌈W/s⌉` windows of `s²` tokens (`nW×s²×C`),
/// windows and tokens both row-major, zero-padding bottom/right.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (h, w, c) = map3(x, "window_partition")?;
    if s == 0 {
        return Err(Error::config("window size must be at least 1"));
    }
    let (gh, gw) = (ceil_div(h, s), ceil_div(w, s));
    let mut out = vec![T::zero(); gh * gw * s * s * c];
    let xd = x.data();
    for i in 0..h {
        for j in 0..w {
            let win = (i / s) * gw + j / s;
            let tok = (i % s) * s + j % s;
            let dst = (win * s * s + tok) * c;
            out[dst..dst + c].copy_from_slice(&xd[(i * w + j) * c..][..c]);
        }
    }
    Ok(Tensor::from_parts(vec![gh * gw, s * s, c], out))
}

/// Inverse of [`window_partition`]: reassemble an `h×w` map, dropping padding.
pub fn window_reverse<T: Scalar>(windows: &Tensor<T>, h: usize, w: usize, s: usize) -> Result<Tensor<T>> {
    let (gh, gw) = (ceil_div(h, s), ceil_div(w, s));
    let c = windows.last_dim();
    if windows.len() != gh * gw * s * s * c {
        return Err(Error::dim("window_reverse", windows.shape(), &[h, w, s]));
    }
    let wd = windows.data();
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let win = (i / s) * gw + j / s;
            let tok = (i % s) * s + j % s;
            out.extend_from_slice(&wd[(win * s * s + tok) * c..][..c]);
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Gather each non-overlapping `p×p` patch into one token of `p²·C` features
/// ordered (row-in-patch, column-in-patch, channel).
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (h, w, c) = map3(x, "space_to_depth")?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!("{h}×{w} map is not divisible into {p}×{p} patches")));
    }
    let (oh, ow) = (h / p, w / p);
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..oh {
        for j in 0..ow {
            for di in 0..p {
                let row = (i * p + di) * w + j * p;
                out.extend_from_slice(&xd[row * c..(row + p) * c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, p * p * c], out))
}

pub fn depth_to_space<T: Scalar>(y: &Tensor<T>, p: usize) -> Tensor<T> {
    let (oh, ow, pc) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let c = pc / (p * p);
    let (h, w) = (oh * p, ow * p);
    let mut out = vec![T::zero(); y.len()];
    let yd = y.data();
    for i in 0..oh {
        for j in 0..ow {
            let tok = &yd[(i * ow + j) * pc..][..pc];
            for di in 0..p {
                let row = (i * p + di) * w + j * p;
                out[row * c..(row + p) * c].copy_from_slice(&tok[di * p * c..(di + 1) * p * c]);
            }
        }
    }
    Tensor::from_parts(vec![h, w, c], out)
}

/// Concatenate along the last axis; all leading shapes must agree.
pub fn concat_last<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::config("nothing to concatenate"))?;
    let lead = &first.shape()[..first.rank() - 1];
    let mut total = 0;
    for p in parts {
        if &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::dim("concat", first.shape(), p.shape()));
        }
        total += p.last_dim();
    }
    let rows = first.lead_len();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let d = p.last_dim();
            out.extend_from_slice(&p.data()[r * d..(r + 1) * d]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, out))
}

/// Slice `[start, start+len)` of the last axis.
pub fn slice_last<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.lead_len() * len);
    for row in x.data().chunks_exact(d) {
        out.extend_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = len;
    Tensor::from_parts(shape, out)
}

/// Mean over all leading axes: `[.., C] → [C]`.
pub fn mean_tokens<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.last_dim();
    let mut acc = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    let inv = T::c(1.0 / x.lead_len() as f64);
    Tensor::from_parts(vec![c], acc.into_iter().map(|v| v * inv).collect())
}

/// Shape of one grouped multi-head attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnLayout {
    /// Independent attention problems (windows); each has its own queries and keys.
    pub groups: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub head_dim: usize,
}

impl AttnLayout {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn check<T: Scalar>(&self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        let d = self.width();
        let q_ok = q.last_dim() == d && q.lead_len() == self.groups * self.queries;
        let kv_ok = k.last_dim() == d && k.lead_len() == self.groups * self.keys && k.shape() == v.shape();
        if !q_ok {
            return Err(Error::dim("attention queries", q.shape(), &[self.groups * self.queries, d]));
        }
        if !kv_ok {
            return Err(Error::dim("attention keys/values", k.shape(), v.shape()));
        }
        Ok(())
    }

    /// Strided view of head `h` of group `g` in a `(groups·rows)×(heads·head_dim)` matrix.
    fn head<'a, T>(&self, data: &'a [T], g: usize, h: usize, rows: usize) -> MatRef<'a, T> {
        let d = self.width();
        let start = g * rows * d + h * self.head_dim;
        MatRef {
            data: &data[start..],
            rows,
            cols: self.head_dim,
            rs: d,
            cs: 1,
        }
    }

    fn head_mut<'a, T>(&self, data: &'a mut [T], g: usize, h: usize, rows: usize) -> MatMut<'a, T> {
        let d = self.width();
        let start = g * rows * d + h * self.head_dim;
        MatMut {
            data: &mut data[start..],
            rows,
            cols: self.head_dim,
            rs: d,
            cs: 1,
        }
    }
}

/// Scaled dot-product attention run independently per group and head.
///
/// `q` is `(groups·queries)×(heads·head_dim)`, `k`/`v` are
/// `(groups·keys)×(heads·head_dim)`; head `h` owns columns
/// `h·head_dim..(h+1)·head_dim`. Returns the output (same layout as `q`)
/// and the attention probabilities, `groups×heads×queries×keys`.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: AttnLayout,
    scale: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    layout.check(q, k, v)?;
    let mut probs = vec![T::zero(); layout.groups * layout.heads * layout.queries * layout.keys];
    let out = attend_heads(q, k, v, layout, scale, &mut probs, true);
    Ok((out, probs))
}

/// [`attention`] without keeping the probabilities.
pub fn attention_values<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: AttnLayout,
    scale: T,
) -> Result<Tensor<T>> {
    layout.check(q, k, v)?;
    let mut scratch = vec![T::zero(); layout.queries * layout.keys];
    Ok(attend_heads(q, k, v, layout, scale, &mut scratch, false))
}

fn attend_heads<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: AttnLayout,
    scale: T,
    probs: &mut [T],
    keep: bool,
) -> Tensor<T> {
    let AttnLayout { groups, heads, queries, keys, .. } = layout;
    let block = queries * keys;
    let mut out = vec![T::zero(); q.len()];
    for g in 0..groups {
        for h in 0..heads {
            let offset = if keep { (g * heads + h) * block } else { 0 };
            let p = &mut probs[offset..][..block];
            let qh = layout.head(q.data(), g, h, queries);
            let kh = layout.head(k.data(), g, h, keys);
            gemm(qh, kh.t(), T::zero(), MatMut::row_major(p, queries, keys));
            for row in p.chunks_exact_mut(keys) {
                for s in row.iter_mut() {
                    *s = *s * scale;
                }
                softmax_in_place(row);
            }
            let vh = layout.head(v.data(), g, h, keys);
            gemm(
                MatRef::row_major(p, queries, keys),
                vh,
                T::zero(),
                layout.head_mut(&mut out, g, h, queries),
            );
        }
    }
    Tensor::from_parts(q.shape().to_vec(), out)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    layout: AttnLayout,
    scale: T,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let AttnLayout { groups, heads, queries, keys, .. } = layout;
    let block = queries * keys;
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); block];
    let mut ds = vec![T::zero(); block];
    for g in 0..groups {
        for h in 0..heads {
            let p = &probs[(g * heads + h) * block..][..block];
            let p_mat = MatRef::row_major(p, queries, keys);
            let doh = layout.head(dout.data(), g, h, queries);
            gemm(p_mat.t(), doh, T::zero(), layout.head_mut(&mut dv, g, h, keys));
            let vh = layout.head(v.data(), g, h, keys);
            gemm(doh, vh.t(), T::zero(), MatMut::row_major(&mut dp, queries, keys));
            for ((pr, gr), sr) in p
                .chunks_exact(keys)
                .zip(dp.chunks_exact(keys))
                .zip(ds.chunks_exact_mut(keys))
            {
                softmax_backward_row(pr, gr, sr);
                for s in sr.iter_mut() {
                    *s = *s * scale;
                }
            }
            let ds_mat = MatRef::row_major(&ds, queries, keys);
            let kh = layout.head(k.data(), g, h, keys);
            gemm(ds_mat, kh, T::zero(), layout.head_mut(&mut dq, g, h, queries));
            let qh = layout.head(q.data(), g, h, queries);
            gemm(ds_mat.t(), qh, T::zero(), layout.head_mut(&mut dk, g, h, keys));
        }
    }
    (
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(v.shape().to_vec(), dv),
    )
}

/// Softmax cross-entropy of one logit vector against a class index, using
/// log-sum-exp. Returns the loss and the softmax probabilities.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(T, Vec<T>)> {
    let n = logits.len();
    if label >= n {
        return Err(Error::config(format!("label {label} out of range for {n} classes")));
    }
    let max = logits.data().iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    let probs = logits.data().iter().map(|&v| (v - lse).exp()).collect();
    Ok((lse - logits.data()[label], probs))
}
