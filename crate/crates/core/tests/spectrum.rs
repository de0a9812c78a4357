mod common;

use common::oracle;
use litv2::dft::{dft2, fftshift2};
use litv2::nn::Graph;
use litv2::spectrum::*;
use litv2::train::gen_freq_dataset;
use litv2::{RngState, Tensor};
use proptest::prelude::*;

#[test]
fn dft_matches_double_sum() {
    for seed in 0..20 {
        let x = RngState::new(seed).normal_tensor::<f64>(&[14, 14], 1.0);
        let f = dft2(&x).unwrap();
        let (re, im) = oracle::dft2_naive(&x);
        let scale = x.data().iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        for i in 0..196 {
            assert!((f.re[i] - re[i]).abs() / scale <= 1e-12 && (f.im[i] - im[i]).abs() / scale <= 1e-12);
        }
    }
}

#[test]
fn parseval() {
    for seed in 0..20 {
        let x = RngState::new(seed).normal_tensor::<f64>(&[14, 14], 1.0);
        let spatial: f64 = x.data().iter().map(|v| v * v).sum();
        let freq: f64 = dft2(&x).unwrap().norm_sqr().iter().sum::<f64>() / 196.0;
        assert!((spatial - freq).abs() / spatial <= 1e-9);
    }
}

#[test]
fn checkerboard_energy_sits_far_from_center() {
    let x = Tensor::from_fn(&[8, 8, 1], |i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 });
    let raw = dft2(&channel_plane(&x, 0).unwrap()).unwrap();
    assert!((raw.at(4, 4).0 - 64.0).abs() < 1e-9);
    let p = power_spectrum(&channel_plane(&x, 0).unwrap()).unwrap();
    assert!((p.data()[0] - 4096.0).abs() < 1e-6);
    let e = band_energy(&p, default_radius(8, 8)).unwrap();
    assert!(e.low < 1e-12 * e.high);
}

#[test]
fn constant_map_is_all_dc() {
    let x = Tensor::<f64>::full(&[6, 6, 1], 2.0);
    let m = magnitude_map(std::slice::from_ref(&x), 0).unwrap();
    assert!((m.grid.data()[3 * 6 + 3] - 72f64.ln()).abs() < 1e-12);
    let e = map_band_energy(&x, default_radius(6, 6)).unwrap();
    assert!(e.high_share() < 1e-20);
}

fn upsample2(x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let pw = w.div_ceil(2);
    Tensor::from_fn(&[h, w, 1], |i| x.data()[(i / w / 2) * pw + (i % w) / 2])
}

#[test]
fn pooling_is_low_pass() {
    for seed in 0..50 {
        let x = RngState::new(seed).normal_tensor::<f64>(&[14, 14, 1], 1.0);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let pooled = g.avgpool_window(xv, 2).unwrap();
        let up = upsample2(g.value(pooled), 14, 14);
        let r = default_radius(14, 14);
        let before = map_band_energy(&x, r).unwrap().high_share();
        let after = map_band_energy(&up, r).unwrap().high_share();
        assert!(after <= before, "seed {seed}: {after} > {before}");
    }
}

#[test]
fn high_frequency_class_mean_has_more_high_band_energy() {
    let data = gen_freq_dataset(0, 200).unwrap();
    let mut means = [Tensor::<f64>::zeros(&[32, 32, 3]), Tensor::<f64>::zeros(&[32, 32, 3])];
    for s in &data {
        means[s.label].accumulate(&s.image).unwrap();
    }
    let r = default_radius(32, 32);
    let shares: Vec<f64> = means.iter().map(|m| map_band_energy(m, r).unwrap().high_share()).collect();
    assert!(shares[1] > shares[0], "{shares:?}");
}

#[test]
fn gray_levels() {
    let g = to_gray(&Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
    assert_eq!(g, vec![0, 255, 255, 0]);
    assert_eq!(to_gray(&Tensor::full(&[3, 3], 5.0)), vec![0; 9]);
}

#[test]
fn emitted_files() {
    let dir = tempfile::tempdir().unwrap();
    let x = RngState::new(2).normal_tensor::<f64>(&[5, 7, 3], 1.0);
    let m = magnitude_map(&[x], 1).unwrap();
    let files = emit_map(&m, dir.path().join("hifi"), "1").unwrap();
    assert_eq!(read_csv_grid(&files[0]).unwrap(), m.grid);
    let pgm = std::fs::read(&files[1]).unwrap();
    let header = b"P5\n7 5\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(&pgm[header.len()..], to_gray(&m.grid).as_slice());
}

#[test]
fn radius_bounds() {
    let p = Tensor::<f64>::full(&[4, 4], 1.0);
    assert!(band_energy(&p, 0.0).is_err());
    assert!(band_energy(&p, max_center_distance(4, 4)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bands_partition_energy(h in 2usize..12, w in 2usize..12, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let x = RngState::new(seed).normal_tensor::<f64>(&[h, w], 1.0);
        let p = power_spectrum(&x).unwrap();
        let e = band_energy(&p, frac * max_center_distance(h, w)).unwrap();
        let total = p.sum();
        prop_assert!((e.total() - total).abs() <= 1e-9 * total);
    }

    #[test]
    fn magnitude_map_ignores_batch_order(n in 2usize..6, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let batch: Vec<Tensor<f64>> = (0..n).map(|_| rng.normal_tensor(&[4, 5, 2], 1.0)).collect();
        let mut rev = batch.clone();
        rev.reverse();
        let a = magnitude_map(&batch, 1).unwrap().grid;
        let b = magnitude_map(&rev, 1).unwrap().grid;
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        let dup = magnitude_map(&[batch[0].clone(), batch[0].clone()], 0).unwrap().grid;
        prop_assert!(dup.max_abs_diff(&magnitude_map(&batch[..1], 0).unwrap().grid).unwrap() <= 1e-12);
    }

    #[test]
    fn shift_centers_dc(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let x = RngState::new(seed).normal_tensor::<f64>(&[h, w], 1.0);
        let f = dft2(&x).unwrap();
        let s = fftshift2(&f);
        prop_assert_eq!(s.at(h / 2, w / 2), f.at(0, 0));
    }
}
