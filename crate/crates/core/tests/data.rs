//! Mask generators, normalization and the synthetic generator against
//! independent counts and sample statistics.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use stgin::data::{
    apply_mask, nonrandom_missing_mask, normalize, random_missing_mask, synth_generate, synth_signal, Mask,
    NormScheme, TrafficTensor, UnitTag,
};
use stgin::Tensor2D;

#[test]
fn random_mask_count_is_rounded_rate_times_size() {
    for (n, t, rate) in [(207, 288, 0.3), (20, 576, 0.3), (7, 13, 0.5), (3, 3, 0.1)] {
        let expected = (rate * (n * t) as f64).round() as usize;
        for seed in 0..5 {
            assert_eq!(random_missing_mask(n, t, rate, seed).unwrap().missing_count(), expected);
        }
    }
}

#[test]
fn nonrandom_mask_blanks_whole_rows() {
    for (n, rate, rows) in [(207, 0.1, 21), (4, 0.5, 2), (20, 0.2, 4)] {
        let m = nonrandom_missing_mask(n, 50, rate, 3).unwrap();
        let blank: Vec<usize> = (0..n).filter(|&i| (0..50).all(|j| !m.get(i, j))).collect();
        let full = (0..n).filter(|&i| (0..50).all(|j| m.get(i, j))).count();
        assert_eq!(blank.len(), rows);
        assert_eq!(full, n - rows);
    }
    assert!(nonrandom_missing_mask(4, 10, 0.1, 0).is_err());
}

#[test]
fn random_masks_show_no_row_bias() {
    let (n, t, rate) = (100, 288, 0.3);
    let chi = ChiSquared::new((n - 1) as f64).unwrap();
    for seed in 0..50 {
        let m = random_missing_mask(n, t, rate, seed).unwrap();
        let expected = m.missing_count() as f64 / n as f64;
        let stat: f64 = (0..n)
            .map(|i| {
                let observed = (0..t).filter(|&j| !m.get(i, j)).count() as f64;
                (observed - expected).powi(2) / expected
            })
            .sum();
        let p = 1.0 - chi.cdf(stat);
        assert!(p > 0.001, "seed {seed}: chi-square {stat:.1}, p = {p:.2e}");
    }
}

#[test]
fn generators_are_deterministic_per_seed() {
    assert_eq!(random_missing_mask(30, 40, 0.4, 9).unwrap(), random_missing_mask(30, 40, 0.4, 9).unwrap());
    assert_ne!(random_missing_mask(30, 40, 0.4, 9).unwrap(), random_missing_mask(30, 40, 0.4, 10).unwrap());
    assert_eq!(nonrandom_missing_mask(30, 4, 0.2, 1).unwrap(), nonrandom_missing_mask(30, 4, 0.2, 1).unwrap());
    let a = synth_generate(6, 40, 4, 1.5).unwrap();
    let b = synth_generate(6, 40, 4, 1.5).unwrap();
    assert_eq!(a.tensor, b.tensor);
}

#[test]
fn apply_mask_zeroes_and_is_idempotent() {
    let x = TrafficTensor::fully_observed(Tensor2D::from_fn(3, 4, |i, j| (i * 4 + j) as f64 + 1.0), UnitTag::Speed)
        .unwrap();
    let mut held = Mask::all_observed(3, 4);
    for j in 0..4 {
        held.set(1, j, false);
    }
    held.set(0, 2, false);
    let once = apply_mask(&x, &held).unwrap();
    assert_eq!(once.values.row(1), &[0.0; 4]);
    assert_eq!(once.values[(0, 2)], 0.0);
    assert_eq!(once.values[(2, 3)], x.values[(2, 3)]);
    assert_eq!(apply_mask(&once, &held).unwrap(), once);
    assert_eq!(apply_mask(&x, &Mask::all_observed(3, 4)).unwrap(), x);
    // The caller's ground truth is untouched.
    assert_eq!(x.values[(1, 0)], 5.0);
}

#[test]
fn minmax_uses_observed_entries_only() {
    let values = Tensor2D::from_rows(&[[20.0, 0.0, 45.0], [70.0, 30.0, 0.0]]).unwrap();
    let mask = Mask::from_vec(2, 3, vec![true, false, true, true, true, false]).unwrap();
    let x = TrafficTensor::new(values, mask, UnitTag::Speed, (0..3).map(|k| k * 300).collect()).unwrap();
    let (norm, params) = normalize(&x, NormScheme::MinMax).unwrap();
    assert_eq!(norm.values[(0, 0)], 0.0);
    assert_eq!(norm.values[(1, 0)], 1.0);
    assert!((norm.values[(0, 2)] - 0.5).abs() < 1e-15);
    let back = params.denormalize(&norm);
    for (k, &obs) in x.mask.as_slice().iter().enumerate() {
        if obs {
            assert!((back.values.as_slice()[k] - x.values.as_slice()[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn minmax_of_zero_to_ten() {
    let x = TrafficTensor::fully_observed(Tensor2D::from_fn(1, 11, |_, j| j as f64), UnitTag::Speed).unwrap();
    let (norm, _) = normalize(&x, NormScheme::MinMax).unwrap();
    for j in 0..11 {
        assert!((norm.values[(0, j)] - j as f64 / 10.0).abs() < 1e-15);
    }
    let constant = TrafficTensor::fully_observed(Tensor2D::filled(2, 3, 4.0), UnitTag::Speed).unwrap();
    assert!(normalize(&constant, NormScheme::MinMax).is_err());
}

#[test]
fn synthetic_noise_has_requested_std() {
    let ds = synth_generate(20, 576, 1, 2.0).unwrap();
    let resid: Vec<f64> =
        ds.tensor.values.as_slice().iter().zip(ds.clean.as_slice()).map(|(a, b)| a - b).collect();
    let mean = resid.iter().sum::<f64>() / resid.len() as f64;
    let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64).sqrt();
    assert!((std - 2.0).abs() / 2.0 < 0.05, "empirical std {std}");
}

#[test]
fn noiseless_neighbours_differ_by_a_phase_step() {
    let (n, t) = (8, 288);
    let ds = synth_generate(n, t, 0, 0.0).unwrap();
    assert_eq!(ds.tensor.values, synth_signal(n, t));
    let two_pi = 2.0 * std::f64::consts::PI;
    for i in 0..n {
        let phase = two_pi * i as f64 / n as f64;
        for s in [0usize, 17, 200] {
            let s_f = s as f64;
            let want = 50.0 + 15.0 * (two_pi * s_f / 288.0 + phase).sin() + 5.0 * (two_pi * s_f / 36.0 + 2.0 * phase).sin();
            assert!((ds.tensor.values[(i, s)] - want).abs() < 1e-12);
        }
    }
}
