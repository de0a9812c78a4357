//! Loop-level reference implementations. Nothing here calls the library's
//! kernels; tensors are only used as containers.
#![allow(dead_code)]

use litv2::attention::{BranchParams, SraParams};
use litv2::nn::LinearParams;
use litv2::{Scalar, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn rows<T: Scalar>(x: &Tensor<T>) -> Mat {
    let d = *x.shape().last().unwrap();
    x.data().chunks(d).map(|r| r.iter().map(|v| v.f64()).collect()).collect()
}

pub fn from_rows(shape: &[usize], m: &Mat) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), m.iter().flatten().copied().collect()).unwrap()
}

pub fn linear<T: Scalar>(x: &Mat, p: &LinearParams<T>) -> Mat {
    let (din, dout) = (p.w.shape()[0], p.w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout)
                .map(|o| {
                    let mut acc = p.b.data()[o].f64();
                    for (i, xi) in row.iter().enumerate() {
                        acc += xi * p.w.data()[i * dout + o].f64();
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Multi-head scaled dot-product attention with each head's score matrix
/// built explicitly.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let width = q[0].len();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; width]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let scores: Mat = q
            .iter()
            .map(|qi| {
                k.iter()
                    .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() * scale)
                    .collect()
            })
            .collect();
        for (i, srow) in scores.iter().enumerate() {
            let max = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = srow.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = e.iter().zip(v).map(|(a, vj)| a / z * vj[c]).sum();
            }
        }
    }
    out
}

pub fn cross<T: Scalar>(xq: &Mat, xkv: &Mat, p: &BranchParams<T>, heads: usize) -> Mat {
    let q = linear(xq, &p.q);
    let k = linear(xkv, &p.k);
    let v = linear(xkv, &p.v);
    linear(&attention(&q, &k, &v, heads), &p.o)
}

pub fn msa<T: Scalar>(x: &Mat, p: &BranchParams<T>, heads: usize) -> Mat {
    cross(x, x, p, heads)
}

fn dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    (x.shape()[0], x.shape()[1], x.shape()[2])
}

fn pixel<T: Scalar>(x: &Tensor<T>, i: usize, j: usize) -> Vec<f64> {
    let (h, w, c) = dims(x);
    if i < h && j < w {
        (0..c).map(|ch| x.data()[(i * w + j) * c + ch].f64()).collect()
    } else {
        vec![0.0; c]
    }
}

/// Attention inside each `s×s` window of the zero-padded map.
pub fn hifi<T: Scalar>(x: &Tensor<T>, p: &BranchParams<T>, s: usize, heads: usize) -> Tensor<f64> {
    let (h, w, _) = dims(x);
    let width = p.o.w.shape()[1];
    let mut out = vec![vec![0.0; width]; h * w];
    for wi in 0..h.div_ceil(s) {
        for wj in 0..w.div_ceil(s) {
            let mut coords = Vec::new();
            let mut toks = Vec::new();
            for di in 0..s {
                for dj in 0..s {
                    let (i, j) = (wi * s + di, wj * s + dj);
                    coords.push((i, j));
                    toks.push(pixel(x, i, j));
                }
            }
            let y = msa(&toks, p, heads);
            for ((i, j), row) in coords.into_iter().zip(y) {
                if i < h && j < w {
                    out[i * w + j] = row;
                }
            }
        }
    }
    from_rows(&[h, w, width], &out)
}

/// Window means of the zero-padded map, divisor `s²`.
pub fn pooled<T: Scalar>(x: &Tensor<T>, s: usize) -> Mat {
    let (h, w, c) = dims(x);
    let mut out = Vec::new();
    for wi in 0..h.div_ceil(s) {
        for wj in 0..w.div_ceil(s) {
            let mut acc = vec![0.0; c];
            for di in 0..s {
                for dj in 0..s {
                    for (a, v) in acc.iter_mut().zip(pixel(x, wi * s + di, wj * s + dj)) {
                        *a += v;
                    }
                }
            }
            out.push(acc.into_iter().map(|a| a / (s * s) as f64).collect());
        }
    }
    out
}

/// Queries from every position, keys and values from the pooled map.
pub fn lofi<T: Scalar>(x: &Tensor<T>, p: &BranchParams<T>, s: usize, heads: usize) -> Tensor<f64> {
    let (h, w, _) = dims(x);
    let y = cross(&rows(x), &pooled(x, s), p, heads);
    from_rows(&[h, w, p.o.w.shape()[1]], &y)
}

/// Spatial reduction: each `r×r` patch flattened (row, column, channel) and
/// projected.
pub fn sra<T: Scalar>(x: &Tensor<T>, p: &SraParams<T>, r: usize, heads: usize) -> Tensor<f64> {
    let (h, w, c) = dims(x);
    let mut patches = Vec::new();
    for pi in 0..h / r {
        for pj in 0..w / r {
            let mut v = Vec::with_capacity(r * r * c);
            for di in 0..r {
                for dj in 0..r {
                    v.extend(pixel(x, pi * r + di, pj * r + dj));
                }
            }
            patches.push(v);
        }
    }
    let reduced = linear(&patches, &p.reduce);
    let y = cross(&rows(x), &reduced, &p.attn, heads);
    from_rows(&[h, w, c], &y)
}

/// Patch embedding: `p×p` patches flattened (row, column, channel).
pub fn patch_embed<T: Scalar>(x: &Tensor<T>, lin: &LinearParams<T>, p: usize) -> Tensor<f64> {
    let (h, w, c) = dims(x);
    let mut patches = Vec::new();
    for pi in 0..h / p {
        for pj in 0..w / p {
            let mut v = Vec::with_capacity(p * p * c);
            for di in 0..p {
                for dj in 0..p {
                    v.extend(pixel(x, pi * p + di, pj * p + dj));
                }
            }
            patches.push(v);
        }
    }
    from_rows(&[h / p, w / p, lin.w.shape()[1]], &linear(&patches, lin))
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Naive DFT by the double sum over all input cells for every output bin.
pub fn dft2_naive(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (mut re, mut im) = (vec![0.0; h * w], vec![0.0; h * w]);
    for u in 0..h {
        for v in 0..w {
            for m in 0..h {
                for n in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((u * m) as f64 / h as f64 + (v * n) as f64 / w as f64);
                    let val = x.data()[m * w + n];
                    re[u * w + v] += val * ang.cos();
                    im[u * w + v] += val * ang.sin();
                }
            }
        }
    }
    (re, im)
}
