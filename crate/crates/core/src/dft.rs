//! Direct 2-D discrete Fourier transform for small grids.
//!
//! Grids here are at most a few dozen cells per side and rarely powers of
//! two, so the transform is evaluated by direct summation, one axis at a time,
//! with twiddles reduced modulo the axis length.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// H×W complex grid, row-major, split into real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexGrid {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        let i = row * self.width + col;
        (self.re[i], self.im[i])
    }

    pub fn norm_sqr(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).collect()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }
}

/// `(cos, -sin)` of `2π k / n` for k in 0..n.
fn twiddles(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / n as f64;
            (theta.cos(), -theta.sin())
        })
        .collect()
}

/// In-place DFT of `len` complex values spaced `stride` apart.
fn dft_axis(re: &mut [f64], im: &mut [f64], start: usize, stride: usize, len: usize, tw: &[(f64, f64)]) {
    let src_re: Vec<f64> = (0..len).map(|t| re[start + t * stride]).collect();
    let src_im: Vec<f64> = (0..len).map(|t| im[start + t * stride]).collect();
    for k in 0..len {
        let (mut acc_re, mut acc_im) = (0.0, 0.0);
        for t in 0..len {
            let (c, s) = tw[(k * t) % len];
            acc_re += src_re[t] * c - src_im[t] * s;
            acc_im += src_re[t] * s + src_im[t] * c;
        }
        re[start + k * stride] = acc_re;
        im[start + k * stride] = acc_im;
    }
}

/// `F[u][v] = Σ X[h][w] exp(-2πi (uh/H + vw/W))` for a 2-D real tensor.
pub fn dft2<T: Scalar>(x: &Tensor<T>) -> Result<ComplexGrid> {
    if x.rank() != 2 {
        return Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: "dft2 expects an H×W grid".into(),
        });
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let mut grid = ComplexGrid {
        height: h,
        width: w,
        re: x.to_f64_vec(),
        im: vec![0.0; h * w],
    };
    let tw_w = twiddles(w);
    for row in 0..h {
        dft_axis(&mut grid.re, &mut grid.im, row * w, 1, w, &tw_w);
    }
    let tw_h = twiddles(h);
    for col in 0..w {
        dft_axis(&mut grid.re, &mut grid.im, col, w, h, &tw_h);
    }
    Ok(grid)
}

/// Rotate rows by ⌊H/2⌋ and columns by ⌊W/2⌋ so the DC bin lands at
/// `(⌊H/2⌋, ⌊W/2⌋)`.
pub fn fftshift2(f: &ComplexGrid) -> ComplexGrid {
    let (h, w) = (f.height, f.width);
    let mut out = ComplexGrid::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let dst = ((r + h / 2) % h) * w + (c + w / 2) % w;
            out.re[dst] = f.re[r * w + c];
            out.im[dst] = f.im[r * w + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    /// Straight quadruple loop over the definition.
    fn naive_dft2(x: &Tensor<f64>) -> ComplexGrid {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let mut out = ComplexGrid::zeros(h, w);
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let phase = -std::f64::consts::TAU
                            * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                        let val = x.data()[r * w + c];
                        re += val * phase.cos();
                        im += val * phase.sin();
                    }
                }
                out.re[u * w + v] = re;
                out.im[u * w + v] = im;
            }
        }
        out
    }

    #[test]
    fn constant_grid_is_pure_dc() {
        let x = Tensor::<f64>::full(&[5, 7], 2.5);
        let f = dft2(&x).unwrap();
        assert!((f.re[0] - 2.5 * 35.0).abs() < 1e-9);
        let mag = f.magnitude();
        assert!(mag[1..].iter().all(|m| *m < 1e-9));
    }

    #[test]
    fn single_cell() {
        let x = Tensor::<f64>::full(&[1, 1], -3.0);
        let f = dft2(&x).unwrap();
        assert_eq!((f.re[0], f.im[0]), (-3.0, 0.0));
    }

    #[test]
    fn cosine_along_width_hits_two_bins() {
        let (h, w) = (4, 8);
        let x = Tensor::<f64>::from_fn(&[h, w], |i| {
            (std::f64::consts::TAU * (i % w) as f64 / w as f64).cos()
        });
        let f = dft2(&x).unwrap();
        let oracle = naive_dft2(&x);
        let mag = f.magnitude();
        for (i, m) in mag.iter().enumerate() {
            if i == 1 || i == w - 1 {
                assert!((m - (h * w) as f64 / 2.0).abs() < 1e-9);
            } else {
                assert!(*m < 1e-9, "bin {i} = {m}");
            }
            assert!((f.re[i] - oracle.re[i]).abs() < 1e-12);
            assert!((f.im[i] - oracle.im[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_and_parseval_on_random_grids() {
        for seed in 0..5 {
            let mut rng = RngState::new(seed);
            let x = rng.normal_tensor::<f64>(&[14, 14], 1.0);
            let f = dft2(&x).unwrap();
            let oracle = naive_dft2(&x);
            for i in 0..196 {
                assert!((f.re[i] - oracle.re[i]).abs() <= 1e-12);
                assert!((f.im[i] - oracle.im[i]).abs() <= 1e-12);
            }
            let spatial: f64 = x.data().iter().map(|v| v * v).sum();
            let spectral: f64 = f.norm_sqr().iter().sum::<f64>() / 196.0;
            assert!(((spatial - spectral) / spatial).abs() <= 1e-9);
        }
    }

    #[test]
    fn shift_half_rotation() {
        let g = ComplexGrid {
            height: 2,
            width: 2,
            re: vec![1.0, 2.0, 3.0, 4.0],
            im: vec![0.0; 4],
        };
        assert_eq!(fftshift2(&g).re, vec![4.0, 3.0, 2.0, 1.0]);
        let single = ComplexGrid {
            height: 1,
            width: 1,
            re: vec![9.0],
            im: vec![1.0],
        };
        assert_eq!(fftshift2(&single), single);
    }

    #[test]
    fn shift_is_involution_on_even_dims() {
        let mut rng = RngState::new(1);
        let g = ComplexGrid {
            height: 6,
            width: 4,
            re: (0..24).map(|_| rng.normal()).collect(),
            im: (0..24).map(|_| rng.normal()).collect(),
        };
        assert_eq!(fftshift2(&fftshift2(&g)), g);
    }

    #[test]
    fn shift_moves_dc_to_center() {
        let x = Tensor::<f64>::full(&[5, 6], 1.0);
        let shifted = fftshift2(&dft2(&x).unwrap());
        let (re, _) = shifted.at(2, 3);
        assert!((re - 30.0).abs() < 1e-9);
    }
}
