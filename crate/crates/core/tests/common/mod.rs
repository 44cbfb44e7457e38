//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use fairlime::blackbox::OracleModel;
use fairlime::dataset::{FeatureKind, FeatureStats};
use fairlime::fair::GridSpec;
use fairlime::{BlackBoxModel, KernelConfig, Neighborhood, TabularDataset};
use ndarray::{array, Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Random two-feature problem `(group, x)` explained with a group-dependent
/// threshold oracle. The neighborhood holds 100 to 200 samples around a
/// center placed between the thresholds.
pub fn two_feature_instance(seed: u64) -> (Neighborhood, Array1<f64>) {
    let mut r = fairlime::rng::seeded(seed);
    let t0: f64 = r.random_range(-0.5..0.5);
    let t1 = t0 + r.random_range(0.3..1.0);
    let p: f64 = r.random_range(0.3..0.7);
    let n = r.random_range(100..=200usize);
    let c: f64 = r.random_range(t0 - 0.3..t1 + 0.3);
    let gc = f64::from(u8::from(r.random::<f64>() < p));
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut samples = Array2::zeros((n, 2));
    for mut row in samples.rows_mut() {
        row[0] = f64::from(u8::from(r.random::<f64>() < p));
        row[1] = c + unit.sample(&mut r);
    }
    let f = BlackBoxModel::Oracle(OracleModel {
        n_features: 2,
        group_col: 0,
        feature: 1,
        thresholds: [t0, t1],
    });
    let stats = FeatureStats {
        means: vec![p, c],
        stds: vec![(p * (1.0 - p)).sqrt(), 1.0],
        binary_freq: vec![Some(p), None],
        kinds: vec![FeatureKind::Binary, FeatureKind::Continuous],
        group_col: 0,
    };
    let center = array![gc, c];
    let nb = Neighborhood::from_samples(center.clone(), samples, &stats, &f, KernelConfig::default_width(2), seed)
        .unwrap();
    (nb, center)
}

/// Grid used against [`two_feature_instance`] problems.
pub fn two_feature_grid() -> GridSpec {
    GridSpec {
        weight_ranges: vec![(-1.0, 1.0)],
        intercept_range: (-1.0, 2.0),
        resolution: 0.01,
    }
}

/// `n` rows of `(g, x)` labeled by `x + 0.8 g > 0.3`, with a margin of 0.1
/// kept free of points.
pub fn separable_dataset(n: usize, seed: u64) -> TabularDataset {
    let mut r = fairlime::rng::seeded(seed);
    let unit = Normal::new(0.0, 1.5).unwrap();
    let mut data = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let g = f64::from(u8::from(r.random::<f64>() < 0.4));
        let x: f64 = unit.sample(&mut r);
        let m = x + 0.8 * g - 0.3;
        if m.abs() < 0.1 {
            continue;
        }
        data[[i, 0]] = g;
        data[[i, 1]] = x;
        labels.push(u8::from(m > 0.0));
        i += 1;
    }
    TabularDataset::new(vec!["g".into(), "x".into()], data, 0, Some(("y".into(), labels))).unwrap()
}

/// Central difference of `f` at `x` along every coordinate.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
