//! Sparse linear surrogates fitted on a perturbation neighborhood.
//!
//! The vanilla explanation selects `k` features by greedy forward selection on
//! weighted squared error and then solves weighted least squares on the
//! selected columns. Regression targets are the black-box scores.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::blackbox::{BlackBoxModel, THRESHOLD};
use crate::dataset::FeatureStats;
use crate::error::{Error, Result};
use crate::fair;
use crate::neighborhood::{sample_neighborhood, KernelConfig, Neighborhood};

/// Ridge damping added to the weighted covariance matrix for conditioning.
/// It is not part of the complexity term.
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSurrogate {
    pub weights: Array1<f64>,
    pub intercept: f64,
    /// Indices of the nonzero weights.
    pub active_set: Vec<usize>,
}

impl LinearSurrogate {
    pub fn new(weights: Array1<f64>, intercept: f64) -> Self {
        let active_set = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(j, _)| j)
            .collect();
        Self {
            weights,
            intercept,
            active_set,
        }
    }

    /// All-zero weights with the given intercept.
    pub fn constant(n_features: usize, intercept: f64) -> Self {
        Self::new(Array1::zeros(n_features), intercept)
    }

    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    /// `w . z + b` without dimension checks; for hot loops over validated data.
    pub(crate) fn raw_score(&self, z: ArrayView1<'_, f64>) -> f64 {
        self.weights.dot(&z) + self.intercept
    }
}

/// Unclipped linear score `w . z + b`.
pub fn surrogate_score(g: &LinearSurrogate, z: ArrayView1<'_, f64>) -> Result<f64> {
    if z.len() != g.n_features() {
        return Err(Error::Dimension {
            expected: g.n_features(),
            got: z.len(),
        });
    }
    Ok(g.raw_score(z))
}

pub fn surrogate_predict(g: &LinearSurrogate, z: ArrayView1<'_, f64>) -> Result<u8> {
    Ok(u8::from(surrogate_score(g, z)? >= THRESHOLD))
}

/// Kernel-weighted mean squared error between black-box scores and surrogate
/// scores.
pub fn fidelity_loss(g: &LinearSurrogate, nb: &Neighborhood) -> Result<f64> {
    if nb.is_empty() {
        return Err(Error::InvalidConfig("empty neighborhood".into()));
    }
    if nb.n_features() != g.n_features() {
        return Err(Error::Dimension {
            expected: nb.n_features(),
            got: g.n_features(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((z, &w), &y) in nb.samples.rows().into_iter().zip(&nb.weights).zip(&nb.f_scores) {
        let r = y - g.raw_score(z);
        num += w * r * r;
        den += w;
    }
    Ok(num / den)
}

/// Number of nonzero weights.
pub fn complexity(g: &LinearSurrogate) -> usize {
    g.weights.iter().filter(|&&w| w != 0.0).count()
}

/// Value `t` of `feature` at which the surrogate crosses the classification
/// threshold while every other feature sits at `center`.
pub fn implied_boundary(g: &LinearSurrogate, feature: usize, center: ArrayView1<'_, f64>) -> Result<f64> {
    if center.len() != g.n_features() || feature >= g.n_features() {
        return Err(Error::Dimension {
            expected: g.n_features(),
            got: center.len().max(feature + 1),
        });
    }
    let wf = g.weights[feature];
    if wf == 0.0 {
        return Err(Error::ZeroWeight { feature });
    }
    let rest: f64 = g
        .weights
        .iter()
        .zip(center.iter())
        .enumerate()
        .filter(|(j, _)| *j != feature)
        .map(|(_, (w, c))| w * c)
        .sum();
    Ok((THRESHOLD - g.intercept - rest) / wf)
}

/// Kernel-weighted first and second moments of a neighborhood, normalized by
/// the total weight. Any subset regression is solved from these.
#[derive(Debug, Clone)]
pub struct WeightedMoments {
    pub x_mean: Vec<f64>,
    pub y_mean: f64,
    /// Weighted covariance of the features.
    pub sxx: DMatrix<f64>,
    /// Weighted covariance of each feature with the target.
    pub sxy: DVector<f64>,
    /// Weighted variance of the target.
    pub syy: f64,
}

impl WeightedMoments {
    pub fn of(nb: &Neighborhood) -> Result<Self> {
        if nb.is_empty() {
            return Err(Error::InvalidConfig("empty neighborhood".into()));
        }
        let d = nb.n_features();
        let total: f64 = nb.weights.iter().sum();
        let mut x_mean = vec![0.0; d];
        let mut y_mean = 0.0;
        for ((z, &w), &y) in nb.samples.rows().into_iter().zip(&nb.weights).zip(&nb.f_scores) {
            for j in 0..d {
                x_mean[j] += w * z[j];
            }
            y_mean += w * y;
        }
        x_mean.iter_mut().for_each(|m| *m /= total);
        y_mean /= total;

        let mut sxx = DMatrix::zeros(d, d);
        let mut sxy = DVector::zeros(d);
        let mut syy = 0.0;
        let mut c = vec![0.0; d];
        for ((z, &w), &y) in nb.samples.rows().into_iter().zip(&nb.weights).zip(&nb.f_scores) {
            for j in 0..d {
                c[j] = z[j] - x_mean[j];
            }
            let yc = y - y_mean;
            for a in 0..d {
                sxy[a] += w * c[a] * yc;
                for b in a..d {
                    sxx[(a, b)] += w * c[a] * c[b];
                }
            }
            syy += w * yc * yc;
        }
        for a in 0..d {
            for b in a..d {
                sxx[(a, b)] /= total;
                sxx[(b, a)] = sxx[(a, b)];
            }
            sxy[a] /= total;
        }
        Ok(Self {
            x_mean,
            y_mean,
            sxx,
            sxy,
            syy: syy / total,
        })
    }

    /// Ridge-damped regression restricted to `subset`. Returns the
    /// coefficients (aligned with `subset`) and the weighted mean squared
    /// error of the fit.
    pub fn solve(&self, subset: &[usize]) -> Result<(Vec<f64>, f64)> {
        let k = subset.len();
        if k == 0 {
            return Ok((Vec::new(), self.syy));
        }
        let a = DMatrix::from_fn(k, k, |r, c| {
            self.sxx[(subset[r], subset[c])] + if r == c { RIDGE } else { 0.0 }
        });
        let rhs = DVector::from_fn(k, |r, _| self.sxy[subset[r]]);
        let chol = a.cholesky().ok_or(Error::RankDeficient)?;
        let beta = chol.solve(&rhs);
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::RankDeficient);
        }
        let sub_sxx = DMatrix::from_fn(k, k, |r, c| self.sxx[(subset[r], subset[c])]);
        let mse = self.syy - 2.0 * beta.dot(&rhs) + (sub_sxx * &beta).dot(&beta);
        Ok((beta.iter().copied().collect(), mse.max(0.0)))
    }

    /// Surrogate over `n_features` with the solved coefficients on `subset`.
    pub fn surrogate(&self, subset: &[usize], n_features: usize) -> Result<LinearSurrogate> {
        let (beta, _) = self.solve(subset)?;
        let mut weights = Array1::zeros(n_features);
        let mut intercept = self.y_mean;
        for (&j, &b) in subset.iter().zip(&beta) {
            weights[j] = b;
            intercept -= b * self.x_mean[j];
        }
        Ok(LinearSurrogate::new(weights, intercept))
    }
}

/// Greedy forward selection: repeatedly add the feature whose inclusion gives
/// the lowest weighted squared error, until `k` features are chosen. Ties go
/// to the lower index.
pub fn forward_select(m: &WeightedMoments, k: usize) -> Result<Vec<usize>> {
    let d = m.x_mean.len();
    let mut chosen: Vec<usize> = Vec::with_capacity(k.min(d));
    while chosen.len() < k.min(d) {
        let mut best: Option<(f64, usize)> = None;
        for j in (0..d).filter(|j| !chosen.contains(j)) {
            let mut trial = chosen.clone();
            trial.push(j);
            let (_, mse) = m.solve(&trial)?;
            if best.is_none_or(|(b, _)| mse < b) {
                best = Some((mse, j));
            }
        }
        chosen.push(best.expect("candidate available").1);
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    /// Weighted squared error `L`.
    pub fidelity: f64,
    /// Number of nonzero weights.
    pub complexity: f64,
    /// Hard demographic-parity mismatch on the neighborhood; `None` when the
    /// neighborhood holds a single group.
    pub psi: Option<f64>,
    /// Sigmoid-relaxed mismatch, reported only by the fair solver.
    pub psi_smooth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub surrogate: LinearSurrogate,
    pub center: Array1<f64>,
    /// Features chosen by forward selection (a superset of the active set).
    pub selected_features: Vec<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: Option<f64>,
    pub n_perturbations: usize,
    pub seed: u64,
    pub objective: ObjectiveBreakdown,
    pub restart_count: usize,
}

impl Explanation {
    /// `L + lambda1 * Omega + lambda2 * psi` with the hard mismatch (0 when
    /// undefined).
    pub fn objective_value(&self) -> f64 {
        self.objective.fidelity
            + self.lambda1 * self.objective.complexity
            + self.lambda2 * self.objective.psi.unwrap_or(0.0)
    }
}

/// Fit the vanilla surrogate on an existing neighborhood.
pub fn lime_fit(nb: &Neighborhood, k: usize) -> Result<(LinearSurrogate, Vec<usize>)> {
    if k == 0 {
        return Err(Error::InvalidConfig("sparsity budget k must be at least 1".into()));
    }
    let m = WeightedMoments::of(nb)?;
    let selected = forward_select(&m, k)?;
    let g = m.surrogate(&selected, nb.n_features())?;
    Ok((g, selected))
}

/// Vanilla explanation on an existing neighborhood.
pub fn lime_explain_on(nb: &Neighborhood, k: usize) -> Result<Explanation> {
    let (g, selected) = lime_fit(nb, k)?;
    let psi = fair::psi_hard(&nb.f_preds, &g, nb).ok();
    Ok(Explanation {
        objective: ObjectiveBreakdown {
            fidelity: fidelity_loss(&g, nb)?,
            complexity: complexity(&g) as f64,
            psi,
            psi_smooth: None,
        },
        surrogate: g,
        center: nb.center.clone(),
        selected_features: selected,
        lambda1: 0.0,
        lambda2: 0.0,
        tau: None,
        n_perturbations: nb.len(),
        seed: nb.seed,
        restart_count: 0,
    })
}

/// Sample a neighborhood of `x` and fit the vanilla surrogate with at most
/// `k` features.
pub fn lime_explain(
    f: &BlackBoxModel,
    x: ArrayView1<'_, f64>,
    stats: &FeatureStats,
    kc: &KernelConfig,
    k: usize,
    seed: u64,
) -> Result<Explanation> {
    if k == 0 {
        return Err(Error::InvalidConfig("sparsity budget k must be at least 1".into()));
    }
    let nb = sample_neighborhood(x, stats, f, kc, seed)?;
    lime_explain_on(&nb, k)
}
