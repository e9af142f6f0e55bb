//! Classical imputers against brute-force recomputation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgin::baselines::{impute_average, impute_mean, impute_svd, SvdConfig};
use stgin::data::Mask;
use stgin::Tensor2D;

fn random_instance(rng: &mut ChaCha8Rng) -> (Tensor2D, Mask) {
    let n = rng.random_range(1..=6);
    let t = rng.random_range(1..=12);
    let values = Tensor2D::from_fn(n, t, |_, _| rng.random_range(0.0..80.0));
    let rate = rng.random_range(0.1..0.9);
    let mut observed: Vec<bool> = (0..n * t).map(|_| !rng.random_bool(rate)).collect();
    if !observed.iter().any(|&o| o) {
        observed[0] = true;
    }
    (values, Mask::from_vec(n, t, observed).unwrap())
}

fn observed_mean(values: &Tensor2D, mask: &Mask, cells: impl Iterator<Item = (usize, usize)>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, j) in cells {
        if mask.get(i, j) {
            sum += values[(i, j)];
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

#[test]
fn average_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..100 {
        let (values, mask) = random_instance(&mut rng);
        let (n, t) = values.shape();
        let global = observed_mean(&values, &mask, (0..n).flat_map(|i| (0..t).map(move |j| (i, j)))).unwrap();
        let got = impute_average(&values, &mask).unwrap();
        for i in 0..n {
            for j in 0..t {
                let want = if mask.get(i, j) {
                    values[(i, j)]
                } else {
                    observed_mean(&values, &mask, (0..n).map(|r| (r, j))).unwrap_or(global)
                };
                assert_eq!(got[(i, j)], want, "({i}, {j})");
            }
        }
    }
}

#[test]
fn mean_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..100 {
        let (values, mask) = random_instance(&mut rng);
        let (n, t) = values.shape();
        let day = rng.random_range(1..=5);
        let global = observed_mean(&values, &mask, (0..n).flat_map(|i| (0..t).map(move |j| (i, j)))).unwrap();
        let got = impute_mean(&values, &mask, day).unwrap();
        for i in 0..n {
            for j in 0..t {
                let start = j / day * day;
                let end = (start + day).min(t);
                let want = if mask.get(i, j) {
                    values[(i, j)]
                } else {
                    observed_mean(&values, &mask, (start..end).map(|s| (i, s))).unwrap_or(global)
                };
                assert_eq!(got[(i, j)], want, "({i}, {j}) with {day}-step days");
            }
        }
    }
}

#[test]
fn svd_recovers_rank_one_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..5 {
        let (n, t) = (12, 30);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let v: Vec<f64> = (0..t).map(|_| rng.random_range(0.5..2.0)).collect();
        let truth = Tensor2D::from_fn(n, t, |i, j| u[i] * v[j]);
        let mask = stgin::data::random_missing_mask(n, t, 0.2, rng.random()).unwrap();
        let input = Tensor2D::from_fn(n, t, |i, j| if mask.get(i, j) { truth[(i, j)] } else { 0.0 });
        let cfg = SvdConfig { rank: Some(1), max_iterations: 5000, tol: 1e-12 };
        let out = impute_svd(&input, &mask, &cfg).unwrap();
        let worst = (0..n * t)
            .filter(|&k| !mask.as_slice()[k])
            .map(|k| (out.values.as_slice()[k] - truth.as_slice()[k]).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "worst missing-entry error {worst:e} after {} iterations", out.iterations);
    }
}

#[test]
fn observed_entries_pass_through_every_imputer() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let values = Tensor2D::from_fn(6, 20, |_, _| rng.random_range(0.0..10.0));
    let mask = stgin::data::random_missing_mask(6, 20, 0.3, 1).unwrap();
    let svd = impute_svd(&values, &mask, &SvdConfig { rank: Some(2), ..SvdConfig::default() }).unwrap().values;
    for out in [impute_average(&values, &mask).unwrap(), impute_mean(&values, &mask, 5).unwrap(), svd] {
        for (k, &obs) in mask.as_slice().iter().enumerate() {
            if obs {
                assert_eq!(out.as_slice()[k], values.as_slice()[k]);
            }
        }
    }
}
