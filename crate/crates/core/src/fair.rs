//! Fairness-preserving surrogates.
//!
//! The fair objective adds a demographic-parity mismatch penalty to the
//! surrogate fit:
//!
//! ```text
//! J(g) = L(f, g, pi_x) + lambda1 * Omega(g) + lambda2 * psi(f, g)
//! psi  = |DP(f) - DP(g)|,  DP = P(pred = 1 | group 1) - P(pred = 1 | group 0)
//! ```
//!
//! evaluated on the perturbation neighborhood. `psi` is piecewise constant in
//! the surrogate parameters, so the solver works in three stages on the
//! feature set chosen by the vanilla fit:
//!
//! 1. multi-restart gradient descent on `L + lambda2 * psi_smooth`, where the
//!    0/1 surrogate decisions are relaxed to `sigmoid((score - 0.5) / tau)`;
//!    tau is annealed from the configured value down to a tenth of it and one
//!    restart always starts at the vanilla solution;
//! 2. an exact polish on the hard objective of the vanilla solution, of each
//!    restart's final endpoint and of the best point of a profile scan (non-group
//!    weights rescaled, group intercepts solved exactly). The polish uses exact
//!    line searches (breakpoint sweeps) along coordinates and random
//!    directions, plus an exact joint move of the two per-group intercepts
//!    when the sensitive attribute is among the selected features;
//! 3. selection of the candidate with the lowest hard objective. The vanilla
//!    solution is always a candidate, so the result never has a higher hard
//!    objective than it.
//!
//! [`grid_search_oracle`] is an exhaustive reference solver for at most two
//! active features, used to validate the solver.

use ndarray::{Array1, ArrayView1};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blackbox::{sigmoid, BlackBoxModel, THRESHOLD};
use crate::dataset::FeatureStats;
use crate::error::{Error, Result};
use crate::metrics::demographic_parity;
use crate::neighborhood::{sample_neighborhood, KernelConfig, Neighborhood};
use crate::rng;
use crate::surrogate::{
    complexity, fidelity_loss, lime_explain_on, lime_fit, Explanation, LinearSurrogate, ObjectiveBreakdown,
};

/// Multipliers applied to `tau` in successive descent stages.
pub const TAU_SCHEDULE: [f64; 4] = [1.0, 0.4, 0.2, 0.1];
/// Standard deviation of the restart perturbation, in standardized
/// coordinates.
pub const RESTART_NOISE: f64 = 0.1;
/// The polish stops once a full pass improves the hard objective by less
/// than this fraction.
pub const POLISH_TOL: f64 = 1e-6;
/// Factors applied to each non-group weight of the vanilla solution by the
/// profile scan.
pub const PROFILE_MULTIPLIERS: [f64; 10] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.1, 1.2, 1.3, 1.4, 1.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairObjectiveConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Sigmoid temperature on the score scale.
    pub tau: f64,
    /// Gradient steps per restart, split evenly over [`TAU_SCHEDULE`].
    pub steps: usize,
    /// Initial step length of the backtracking line search.
    pub step_size: f64,
    pub restarts: usize,
    /// Maximum passes of the exact polish per candidate (0 disables it).
    pub polish_sweeps: usize,
    /// How many neighborhoods to draw before giving up on getting both
    /// groups.
    pub max_neighborhood_attempts: usize,
    pub seed: u64,
}

impl Default for FairObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 5.0,
            tau: 0.05,
            steps: 40,
            step_size: 1.0,
            restarts: 3,
            polish_sweeps: 12,
            max_neighborhood_attempts: 10,
            seed: 0,
        }
    }
}

impl FairObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) || !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad("lambda1 and lambda2 must be nonnegative");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.steps == 0 || self.restarts == 0 || self.max_neighborhood_attempts == 0 {
            return bad("steps, restarts and max_neighborhood_attempts must be positive");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiMode {
    Hard,
    Smooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiBreakdown {
    pub dp_blackbox: f64,
    pub dp_surrogate_hard: f64,
    pub dp_surrogate_smooth: f64,
    pub psi_hard: f64,
    pub psi_smooth: f64,
    pub tau: f64,
    pub mode: PsiMode,
}

impl PsiBreakdown {
    /// The mismatch selected by `mode`.
    pub fn value(&self) -> f64 {
        match self.mode {
            PsiMode::Hard => self.psi_hard,
            PsiMode::Smooth => self.psi_smooth,
        }
    }
}

/// Group means of a per-sample quantity. Callers guarantee both groups are
/// present.
fn group_gap(values: impl Iterator<Item = f64>, groups: &[u8], counts: [usize; 2]) -> f64 {
    let mut sums = [0.0; 2];
    for (v, &g) in values.zip(groups) {
        sums[g as usize] += v;
    }
    sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64
}

/// Demographic-parity mismatch between black-box predictions and the
/// surrogate on the neighborhood samples, in both hard and sigmoid-relaxed
/// form.
pub fn psi(f_preds: &[u8], g: &LinearSurrogate, nb: &Neighborhood, tau: f64, mode: PsiMode) -> Result<PsiBreakdown> {
    if f_preds.len() != nb.len() {
        return Err(Error::Dimension {
            expected: nb.len(),
            got: f_preds.len(),
        });
    }
    if g.n_features() != nb.n_features() {
        return Err(Error::Dimension {
            expected: nb.n_features(),
            got: g.n_features(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("tau must be positive".into()));
    }
    let dp_blackbox = demographic_parity(f_preds, &nb.groups)?;
    let counts = nb.group_counts();
    let scores: Vec<f64> = nb.samples.rows().into_iter().map(|z| g.raw_score(z)).collect();
    let dp_surrogate_hard = group_gap(
        scores.iter().map(|&s| if s >= THRESHOLD { 1.0 } else { 0.0 }),
        &nb.groups,
        counts,
    );
    let dp_surrogate_smooth = group_gap(
        scores.iter().map(|&s| sigmoid((s - THRESHOLD) / tau)),
        &nb.groups,
        counts,
    );
    Ok(PsiBreakdown {
        dp_blackbox,
        dp_surrogate_hard,
        dp_surrogate_smooth,
        psi_hard: (dp_blackbox - dp_surrogate_hard).abs(),
        psi_smooth: (dp_blackbox - dp_surrogate_smooth).abs(),
        tau,
        mode,
    })
}

/// Hard mismatch only.
pub fn psi_hard(f_preds: &[u8], g: &LinearSurrogate, nb: &Neighborhood) -> Result<f64> {
    psi(f_preds, g, nb, 1.0, PsiMode::Hard).map(|p| p.psi_hard)
}

/// Exact objective `L + lambda1 * Omega + lambda2 * psi_hard`.
pub fn exact_objective(g: &LinearSurrogate, nb: &Neighborhood, lambda1: f64, lambda2: f64) -> Result<f64> {
    let psi = if lambda2 > 0.0 {
        psi_hard(&nb.f_preds, g, nb)?
    } else {
        0.0
    };
    Ok(fidelity_loss(g, nb)? + lambda1 * complexity(g) as f64 + lambda2 * psi)
}

/// Smooth objective `L + lambda2 * psi_smooth` at the configured tau.
pub fn smoothed_objective(g: &LinearSurrogate, nb: &Neighborhood, f_preds: &[u8], cfg: &FairObjectiveConfig) -> Result<f64> {
    let p = psi(f_preds, g, nb, cfg.tau, PsiMode::Smooth)?;
    Ok(fidelity_loss(g, nb)? + cfg.lambda2 * p.psi_smooth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothGradient {
    pub weights: Array1<f64>,
    pub intercept: f64,
}

/// Gradient of [`smoothed_objective`] with respect to every weight and the
/// intercept. The absolute value uses the subgradient
/// `sign(dp_blackbox - dp_surrogate_smooth)` with `sign(0) = 0`.
pub fn smoothed_objective_gradient(
    g: &LinearSurrogate,
    nb: &Neighborhood,
    f_preds: &[u8],
    cfg: &FairObjectiveConfig,
) -> Result<SmoothGradient> {
    if f_preds.len() != nb.len() {
        return Err(Error::Dimension {
            expected: nb.len(),
            got: f_preds.len(),
        });
    }
    let cols: Vec<usize> = (0..nb.n_features()).collect();
    let problem = Problem::new(nb, f_preds, &cols, cfg.lambda1, cfg.lambda2)?;
    let theta = problem.theta_of(g);
    let grad = problem.smooth_grad(&theta, cfg.tau);
    let d = nb.n_features();
    Ok(SmoothGradient {
        weights: Array1::from_iter(grad[..d].iter().copied()),
        intercept: grad[d],
    })
}

// ---------------------------------------------------------------------------
// Solver internals.

/// The objective restricted to a set of feature columns. Parameters are
/// `theta = [w_cols..., b]` in raw feature units.
struct Problem<'a> {
    cols: Vec<usize>,
    n_features: usize,
    /// Selected columns, row-major `n x p`.
    x: Vec<f64>,
    n: usize,
    p: usize,
    y: &'a [f64],
    /// Kernel weights normalized to sum to one.
    w: Vec<f64>,
    groups: &'a [u8],
    counts: [usize; 2],
    dp_f: f64,
    lambda1: f64,
    lambda2: f64,
    /// Position of the sensitive attribute within `cols`.
    group_pos: Option<usize>,
    /// Per-column mean and spread of the samples, for preconditioning.
    mean: Vec<f64>,
    spread: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(nb: &'a Neighborhood, f_preds: &[u8], cols: &[usize], lambda1: f64, lambda2: f64) -> Result<Self> {
        let dp_f = demographic_parity(f_preds, &nb.groups)?;
        let n = nb.len();
        let p = cols.len();
        let mut x = Vec::with_capacity(n * p);
        for z in nb.samples.rows() {
            x.extend(cols.iter().map(|&j| z[j]));
        }
        let total: f64 = nb.weights.iter().sum();
        let w = nb.weights.iter().map(|v| v / total).collect();
        let mut mean = vec![0.0; p];
        let mut spread = vec![0.0; p];
        for c in 0..p {
            let m = (0..n).map(|i| x[i * p + c]).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (x[i * p + c] - m).powi(2)).sum::<f64>() / n as f64;
            mean[c] = m;
            spread[c] = if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 };
        }
        Ok(Self {
            cols: cols.to_vec(),
            n_features: nb.n_features(),
            x,
            n,
            p,
            y: &nb.f_scores,
            w,
            groups: &nb.groups,
            counts: nb.group_counts(),
            dp_f,
            lambda1,
            lambda2,
            group_pos: cols.iter().position(|&j| j == nb.group_col),
            mean,
            spread,
        })
    }

    fn theta_of(&self, g: &LinearSurrogate) -> Vec<f64> {
        let mut t: Vec<f64> = self.cols.iter().map(|&j| g.weights[j]).collect();
        t.push(g.intercept);
        t
    }

    fn surrogate(&self, theta: &[f64]) -> LinearSurrogate {
        let mut weights = Array1::zeros(self.n_features);
        for (c, &j) in self.cols.iter().enumerate() {
            weights[j] = theta[c];
        }
        LinearSurrogate::new(weights, theta[self.p])
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    fn scores(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(theta)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + theta[self.p]
            })
            .collect()
    }

    fn fidelity(&self, scores: &[f64]) -> f64 {
        scores
            .iter()
            .zip(self.y)
            .zip(&self.w)
            .map(|((s, y), w)| w * (y - s) * (y - s))
            .sum()
    }

    fn psi_from_counts(&self, positives: [usize; 2]) -> f64 {
        let dp = positives[1] as f64 / self.counts[1] as f64 - positives[0] as f64 / self.counts[0] as f64;
        (self.dp_f - dp).abs()
    }

    fn omega(&self, theta: &[f64]) -> f64 {
        theta[..self.p].iter().filter(|&&v| v != 0.0).count() as f64
    }

    fn exact(&self, theta: &[f64]) -> f64 {
        let s = self.scores(theta);
        let mut pos = [0usize; 2];
        for (&si, &g) in s.iter().zip(self.groups) {
            if si >= THRESHOLD {
                pos[g as usize] += 1;
            }
        }
        self.fidelity(&s) + self.lambda1 * self.omega(theta) + self.lambda2 * self.psi_from_counts(pos)
    }

    fn smooth_dp(&self, scores: &[f64], tau: f64) -> f64 {
        group_gap(
            scores.iter().map(|&s| sigmoid((s - THRESHOLD) / tau)),
            self.groups,
            self.counts,
        )
    }

    fn smooth(&self, theta: &[f64], tau: f64) -> f64 {
        let s = self.scores(theta);
        self.fidelity(&s) + self.lambda2 * (self.dp_f - self.smooth_dp(&s, tau)).abs()
    }

    fn smooth_grad(&self, theta: &[f64], tau: f64) -> Vec<f64> {
        let p = self.p;
        let s = self.scores(theta);
        let mut grad = vec![0.0; p + 1];
        let gap = self.dp_f - self.smooth_dp(&s, tau);
        let sign = if gap > 0.0 {
            1.0
        } else if gap < 0.0 {
            -1.0
        } else {
            0.0
        };
        let inv = [1.0 / self.counts[0] as f64, 1.0 / self.counts[1] as f64];
        for i in 0..self.n {
            let row = self.row(i);
            // dL/ds_i
            let mut ds = -2.0 * self.w[i] * (self.y[i] - s[i]);
            if sign != 0.0 && self.lambda2 > 0.0 {
                let e = sigmoid((s[i] - THRESHOLD) / tau);
                let de = e * (1.0 - e) / tau;
                let g = self.groups[i] as usize;
                let ddp = if g == 1 { de * inv[1] } else { -de * inv[0] };
                ds += -self.lambda2 * sign * ddp;
            }
            for c in 0..p {
                grad[c] += ds * row[c];
            }
            grad[p] += ds;
        }
        grad
    }

    // Preconditioned coordinates: w_c = u_c / spread_c,
    // b = u_b - sum_c u_c * mean_c / spread_c.
    fn to_raw(&self, u: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; self.p + 1];
        let mut b = u[self.p];
        for c in 0..self.p {
            t[c] = u[c] / self.spread[c];
            b -= u[c] * self.mean[c] / self.spread[c];
        }
        t[self.p] = b;
        t
    }

    fn to_pre(&self, t: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.p + 1];
        let mut b = t[self.p];
        for c in 0..self.p {
            u[c] = t[c] * self.spread[c];
            b += t[c] * self.mean[c];
        }
        u[self.p] = b;
        u
    }

    fn grad_to_pre(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p + 1];
        for c in 0..self.p {
            out[c] = (g[c] - self.mean[c] * g[self.p]) / self.spread[c];
        }
        out[self.p] = g[self.p];
        out
    }

    /// Raw-space direction for a preconditioned direction.
    fn dir_to_raw(&self, du: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.p + 1];
        let mut b = du[self.p];
        for c in 0..self.p {
            d[c] = du[c] / self.spread[c];
            b -= du[c] * self.mean[c] / self.spread[c];
        }
        d[self.p] = b;
        d
    }

    /// Backtracking gradient descent on the smooth objective, in
    /// preconditioned coordinates. Returns the final raw parameters.
    fn descend(&self, start: &[f64], tau: f64, steps: usize, step0: f64, restart: usize) -> Result<Vec<f64>> {
        let mut u = self.to_pre(start);
        let mut f = self.smooth(&self.to_raw(&u), tau);
        if !f.is_finite() {
            return Err(Error::Divergence { restart });
        }
        let mut step = step0;
        for _ in 0..steps {
            let g = self.grad_to_pre(&self.smooth_grad(&self.to_raw(&u), tau));
            let gg: f64 = g.iter().map(|v| v * v).sum();
            if !gg.is_finite() {
                return Err(Error::Divergence { restart });
            }
            if gg < 1e-24 {
                break;
            }
            let accepted = loop {
                let cand: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - step * b).collect();
                let fc = self.smooth(&self.to_raw(&cand), tau);
                if fc.is_finite() && fc <= f - 1e-4 * step * gg {
                    break Some((cand, fc));
                }
                step *= 0.5;
                if step < 1e-12 {
                    break None;
                }
            };
            match accepted {
                Some((cand, fc)) => {
                    u = cand;
                    f = fc;
                    step = (step * 2.0).min(1e6);
                }
                None => break,
            }
        }
        Ok(self.to_raw(&u))
    }

    /// Exact minimization of the hard objective along `theta + t * d`.
    /// Returns the improved point and value, or `None` when no candidate
    /// beats `current`.
    fn line_search(&self, theta: &[f64], d: &[f64], current: f64, zero_at: Option<f64>) -> Option<(Vec<f64>, f64)> {
        let s = self.scores(theta);
        let a = self.scores_linear(d);
        // L(t) = qa t^2 + qb t + l0
        let mut qa = 0.0;
        let mut qb = 0.0;
        let mut l0 = 0.0;
        for i in 0..self.n {
            let r = self.y[i] - s[i];
            qa += self.w[i] * a[i] * a[i];
            qb -= 2.0 * self.w[i] * r * a[i];
            l0 += self.w[i] * r * r;
        }
        let t_star = if qa > 0.0 { -qb / (2.0 * qa) } else { 0.0 };

        // Penalties are nonnegative, so an improving step needs L(t) < current.
        // Only breakpoints inside that window matter.
        let (w_lo, w_hi) = if qa > 0.0 {
            let slack = (current - l0).max(0.0);
            let half = (qb * qb + 4.0 * qa * slack).sqrt() / (2.0 * qa);
            let pad = 1e-9 * (t_star.abs() + half).max(1.0);
            (t_star - half - pad, t_star + half + pad)
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        };

        // Counts just above w_lo, and breakpoints inside the window.
        let mut pos = [0usize; 2];
        let mut events: Vec<(f64, usize, bool)> = Vec::new();
        for i in 0..self.n {
            let g = self.groups[i] as usize;
            if a[i] == 0.0 {
                if s[i] >= THRESHOLD {
                    pos[g] += 1;
                }
                continue;
            }
            let t = (THRESHOLD - s[i]) / a[i];
            let up = a[i] > 0.0;
            if !t.is_finite() {
                continue;
            }
            if (up && t <= w_lo) || (!up && t > w_lo) {
                pos[g] += 1;
            }
            if t > w_lo && t < w_hi {
                events.push((t, g, up));
            }
        }
        events.sort_unstable_by(|x, y| x.0.total_cmp(&y.0));

        let eval_interval = |lo: f64, hi: f64| -> f64 {
            let margin = |v: f64| 1e-9 * v.abs().max(1.0);
            if lo.is_finite() && hi.is_finite() {
                if hi - lo <= margin(lo) + margin(hi) {
                    0.5 * (lo + hi)
                } else {
                    t_star.clamp(lo + margin(lo), hi - margin(hi))
                }
            } else if lo.is_finite() {
                t_star.max(lo + margin(lo))
            } else if hi.is_finite() {
                t_star.min(hi - margin(hi))
            } else {
                t_star
            }
        };

        let q = |t: f64, pos: [usize; 2]| qa * t * t + qb * t + self.lambda2 * self.psi_from_counts(pos);
        let mut best_t: Option<(f64, f64)> = None;
        let mut consider = |t: f64, val: f64| {
            if best_t.is_none_or(|(_, v)| val < v) {
                best_t = Some((t, val));
            }
        };
        let mut lo = w_lo;
        let mut k = 0;
        loop {
            let hi = if k < events.len() { events[k].0 } else { w_hi };
            if hi > lo || (lo == f64::NEG_INFINITY && hi == f64::NEG_INFINITY) {
                let t = eval_interval(lo, hi);
                consider(t, q(t, pos));
            }
            if k >= events.len() {
                break;
            }
            // apply every event at this breakpoint
            let at = events[k].0;
            while k < events.len() && events[k].0 == at {
                let (_, g, up) = events[k];
                if up {
                    pos[g] += 1;
                } else {
                    pos[g] -= 1;
                }
                k += 1;
            }
            lo = at;
        }

        let mut candidates: Vec<f64> = best_t.map(|(t, _)| vec![t]).unwrap_or_default();
        if let Some(z) = zero_at {
            candidates.push(z);
        }
        let mut out: Option<(Vec<f64>, f64)> = None;
        for t in candidates {
            let cand: Vec<f64> = theta.iter().zip(d).map(|(a, b)| a + t * b).collect();
            let cand = match zero_at {
                Some(z) if t == z => {
                    // land exactly on zero for the coordinate being moved
                    let mut c = cand;
                    for (ci, di) in c.iter_mut().zip(d) {
                        if *di != 0.0 && ci.abs() < 1e-12 {
                            *ci = 0.0;
                        }
                    }
                    c
                }
                _ => cand,
            };
            let val = self.exact(&cand);
            let bar = out.as_ref().map_or(current, |o| o.1);
            if val.is_finite() && val < bar - 1e-15 {
                out = Some((cand, val));
            }
        }
        out
    }

    /// `X d_w + d_b` for a direction.
    fn scores_linear(&self, d: &[f64]) -> Vec<f64> {
        self.scores(d)
    }

    /// Exact joint minimization over the two per-group intercepts
    /// `c0 = b` and `c1 = b + w_group`, other weights fixed.
    fn group_block(&self, theta: &[f64], current: f64) -> Option<(Vec<f64>, f64)> {
        let gp = self.group_pos?;
        let p = self.p;
        let mut per_group: [Vec<(f64, f64, f64)>; 2] = [Vec::new(), Vec::new()];
        for i in 0..self.n {
            let row = self.row(i);
            let base: f64 = (0..p).filter(|&c| c != gp).map(|c| row[c] * theta[c]).sum();
            per_group[self.groups[i] as usize].push((THRESHOLD - base, self.y[i] - base, self.w[i]));
        }
        // For each group: best (value, intercept) for every positive count.
        let mut tables: [Vec<(f64, f64)>; 2] = [Vec::new(), Vec::new()];
        for (g, items) in per_group.iter_mut().enumerate() {
            let (mut qa, mut qb) = (0.0, 0.0);
            for &(_, r, w) in items.iter() {
                qa += w;
                qb -= 2.0 * w * r;
            }
            let c_star = if qa > 0.0 { -qb / (2.0 * qa) } else { 0.0 };
            items.sort_unstable_by(|x, y| x.0.total_cmp(&y.0));
            let m = items.len();
            let margin = |v: f64| 1e-9 * v.abs().max(1.0);
            let mut table = vec![(f64::INFINITY, 0.0); m + 1];
            for (k, slot) in table.iter_mut().enumerate() {
                // k positives: taus[k-1] <= c < taus[k]
                let lo = if k == 0 { f64::NEG_INFINITY } else { items[k - 1].0 };
                let hi = if k == m { f64::INFINITY } else { items[k].0 };
                if k > 0 && k < m && hi <= lo {
                    continue;
                }
                let c = if lo.is_finite() && hi.is_finite() {
                    if hi - lo <= margin(lo) + margin(hi) {
                        continue;
                    }
                    c_star.clamp(lo + margin(lo), hi - margin(hi))
                } else if lo.is_finite() {
                    c_star.max(lo + margin(lo))
                } else if hi.is_finite() {
                    c_star.min(hi - margin(hi))
                } else {
                    c_star
                };
                *slot = (qa * c * c + qb * c, c);
            }
            tables[g] = table;
        }
        let [t0, t1] = &tables;
        let (n0, n1) = (self.counts[0] as f64, self.counts[1] as f64);
        // psi = |k0/n0 - (k1/n1 - dp_f)|; minimize Q0[k0] + lambda2 |x_k0 - a| for
        // each target a = k1/n1 - dp_f via prefix/suffix minima.
        let lam = self.lambda2;
        let m0 = t0.len();
        let mut pre = vec![(f64::INFINITY, 0usize); m0];
        let mut suf = vec![(f64::INFINITY, 0usize); m0];
        for k in 0..m0 {
            let v = t0[k].0 - lam * (k as f64 / n0);
            pre[k] = if k > 0 && pre[k - 1].0 <= v { pre[k - 1] } else { (v, k) };
        }
        for k in (0..m0).rev() {
            let v = t0[k].0 + lam * (k as f64 / n0);
            suf[k] = if k + 1 < m0 && suf[k + 1].0 < v { suf[k + 1] } else { (v, k) };
        }
        let mut best: Option<(f64, usize, usize)> = None;
        let mut ptr = 0usize; // first k0 with x_k0 > a
        for (k1, &(q1, _)) in t1.iter().enumerate() {
            if !q1.is_finite() {
                continue;
            }
            let a = k1 as f64 / n1 - self.dp_f;
            while ptr < m0 && (ptr as f64 / n0) <= a {
                ptr += 1;
            }
            let mut cands = Vec::with_capacity(2);
            if ptr > 0 {
                let (v, k0) = pre[ptr - 1];
                cands.push((v + lam * a, k0));
            }
            if ptr < m0 {
                let (v, k0) = suf[ptr];
                cands.push((v - lam * a, k0));
            }
            for (v, k0) in cands {
                let total = v + q1;
                if total.is_finite() && best.is_none_or(|b| total < b.0) {
                    best = Some((total, k0, k1));
                }
            }
        }
        let (_, k0, k1) = best?;
        let (c0, c1) = (t0[k0].1, t1[k1].1);
        let mut cand = theta.to_vec();
        cand[gp] = c1 - c0;
        cand[p] = c0;
        let val = self.exact(&cand);
        (val.is_finite() && val < current - 1e-15).then_some((cand, val))
    }

    /// Rescale each non-group weight of `theta` by [`PROFILE_MULTIPLIERS`] and
    /// solve the group intercepts exactly at every value. Returns the best
    /// point found, if it improves on `theta`.
    fn profile_scan(&self, theta: &[f64]) -> Option<(Vec<f64>, f64)> {
        let gp = self.group_pos?;
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut bar = self.exact(theta);
        for c in (0..self.p).filter(|&c| c != gp && theta[c] != 0.0) {
            for m in PROFILE_MULTIPLIERS {
                let mut t = theta.to_vec();
                t[c] *= m;
                let current = self.exact(&t);
                let (t, v) = self.group_block(&t, current).unwrap_or((t, current));
                if v < bar {
                    bar = v;
                    best = Some((t, v));
                }
            }
        }
        best
    }

    /// Passes of exact moves: the group intercepts, every coordinate, and
    /// `p + 1` random directions. Stops when a pass gains less than
    /// [`POLISH_TOL`] or after `sweeps` passes.
    fn polish(&self, start: &[f64], sweeps: usize, rng: &mut rng::Rng) -> (Vec<f64>, f64) {
        let mut theta = start.to_vec();
        let mut value = self.exact(&theta);
        let p = self.p;
        for _ in 0..sweeps {
            let before = value;
            if let Some((t, v)) = self.group_block(&theta, value) {
                theta = t;
                value = v;
            }
            for c in 0..=p {
                let mut d = vec![0.0; p + 1];
                d[c] = 1.0;
                let zero_at = (c < p && theta[c] != 0.0).then(|| -theta[c]);
                if let Some((t, v)) = self.line_search(&theta, &d, value, zero_at) {
                    theta = t;
                    value = v;
                }
            }
            for _ in 0..=p {
                let du: Vec<f64> = (0..=p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let d = self.dir_to_raw(&du);
                if let Some((t, v)) = self.line_search(&theta, &d, value, None) {
                    theta = t;
                    value = v;
                }
            }
            if before - value <= POLISH_TOL * before.abs().max(1e-3) {
                break;
            }
        }
        (theta, value)
    }
}

/// Orders candidates by hard objective, then by the largest absolute weight,
/// then lexicographically.
fn better(a: (&[f64], f64), b: (&[f64], f64), p: usize) -> bool {
    if a.1 != b.1 {
        return a.1 < b.1;
    }
    let norm = |t: &[f64]| t[..p].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (na, nb) = (norm(a.0), norm(b.0));
    if na != nb {
        return na < nb;
    }
    a.0.iter().zip(b.0).find(|(x, y)| x != y).is_some_and(|(x, y)| x < y)
}

/// Fair explanation on an existing neighborhood. With `lambda2 = 0` this is
/// exactly [`lime_explain_on`].
pub fn fair_explain_on(nb: &Neighborhood, k: usize, cfg: &FairObjectiveConfig) -> Result<Explanation> {
    cfg.validate()?;
    if cfg.lambda2 == 0.0 {
        let mut e = lime_explain_on(nb, k)?;
        e.lambda1 = cfg.lambda1;
        return Ok(e);
    }
    if !nb.has_both_groups() {
        return Err(Error::SingleGroupNeighborhood { attempts: 1 });
    }
    let (vanilla, selected) = lime_fit(nb, k)?;
    let problem = Problem::new(nb, &nb.f_preds, &selected, cfg.lambda1, cfg.lambda2)?;
    let theta_v = problem.theta_of(&vanilla);

    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, nb.seed));
    let per_stage = (cfg.steps / TAU_SCHEDULE.len()).max(1);
    let mut endpoints: Vec<Vec<f64>> = Vec::new();
    for restart in 0..cfg.restarts {
        let mut theta = if restart == 0 {
            theta_v.clone()
        } else {
            let u: Vec<f64> = problem
                .to_pre(&theta_v)
                .iter()
                .map(|v| v + RESTART_NOISE * rng.sample::<f64, _>(StandardNormal))
                .collect();
            problem.to_raw(&u)
        };
        for mult in TAU_SCHEDULE {
            theta = problem.descend(&theta, cfg.tau * mult, per_stage, cfg.step_size, restart)?;
            endpoints.push(theta.clone());
        }
    }

    let mut candidates: Vec<Vec<f64>> = vec![theta_v.clone()];
    candidates.extend(endpoints.iter().cloned());
    if cfg.polish_sweeps > 0 {
        // polish the vanilla start and the last endpoint of every restart
        let stages = TAU_SCHEDULE.len();
        let mut starts: Vec<Vec<f64>> = std::iter::once(theta_v.clone())
            .chain(endpoints.chunks(stages).map(|c| c[stages - 1].clone()))
            .collect();
        if let Some((t, _)) = problem.profile_scan(&theta_v) {
            starts.push(t);
        }
        for c in &starts {
            candidates.push(problem.polish(c, cfg.polish_sweeps, &mut rng).0);
        }
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for c in candidates {
        let exact = problem.exact(&c);
        if !exact.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(bt, bv)| better((&c, exact), (bt, *bv), problem.p)) {
            best = Some((c, exact));
        }
    }
    let (theta, _) = best.expect("vanilla candidate always qualifies");
    let g = problem.surrogate(&theta);
    let breakdown = psi(&nb.f_preds, &g, nb, cfg.tau, PsiMode::Hard)?;
    Ok(Explanation {
        objective: ObjectiveBreakdown {
            fidelity: fidelity_loss(&g, nb)?,
            complexity: complexity(&g) as f64,
            psi: Some(breakdown.psi_hard),
            psi_smooth: Some(breakdown.psi_smooth),
        },
        surrogate: g,
        center: nb.center.clone(),
        selected_features: selected,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        tau: Some(cfg.tau),
        n_perturbations: nb.len(),
        seed: nb.seed,
        restart_count: cfg.restarts,
    })
}

/// Draw neighborhoods until one holds both groups (seed, then seeds derived
/// from it), at most `attempts` times.
pub fn sample_two_group_neighborhood(
    x: ArrayView1<'_, f64>,
    stats: &FeatureStats,
    f: &BlackBoxModel,
    kc: &KernelConfig,
    seed: u64,
    attempts: usize,
) -> Result<Neighborhood> {
    for attempt in 0..attempts {
        let s = if attempt == 0 {
            seed
        } else {
            rng::derive_seed(seed, attempt as u64)
        };
        let nb = sample_neighborhood(x, stats, f, kc, s)?;
        if nb.has_both_groups() {
            return Ok(nb);
        }
    }
    Err(Error::SingleGroupNeighborhood { attempts })
}

/// Sample a neighborhood of `x` and solve the fair objective on it.
///
/// With `lambda2 = 0` the result is identical to
/// [`lime_explain`](crate::surrogate::lime_explain) with the same seed.
pub fn fair_lime_explain(
    f: &BlackBoxModel,
    x: ArrayView1<'_, f64>,
    stats: &FeatureStats,
    kc: &KernelConfig,
    cfg: &FairObjectiveConfig,
    k: usize,
    seed: u64,
) -> Result<Explanation> {
    cfg.validate()?;
    if cfg.lambda2 == 0.0 {
        let nb = sample_neighborhood(x, stats, f, kc, seed)?;
        return fair_explain_on(&nb, k, cfg);
    }
    let nb = sample_two_group_neighborhood(x, stats, f, kc, seed, cfg.max_neighborhood_attempts)?;
    fair_explain_on(&nb, k, cfg)
}

// ---------------------------------------------------------------------------
// Exhaustive reference solver.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Range per active weight, in the order of the selected features. A
    /// single range is reused for every weight.
    pub weight_ranges: Vec<(f64, f64)>,
    pub intercept_range: (f64, f64),
    pub resolution: f64,
}

impl GridSpec {
    /// Grid points are integer multiples of the resolution inside `range`,
    /// so 0 is hit exactly whenever it is in range.
    pub fn axis(&self, range: (f64, f64)) -> Vec<f64> {
        let lo = (range.0 / self.resolution).ceil() as i64;
        let hi = (range.1 / self.resolution).floor() as i64;
        (lo..=hi).map(|k| k as f64 * self.resolution).collect()
    }

    fn weight_range(&self, c: usize) -> (f64, f64) {
        self.weight_ranges
            .get(c)
            .or_else(|| self.weight_ranges.last())
            .copied()
            .unwrap_or((0.0, 0.0))
    }
}

/// Exhaustive search of `L + lambda1 * Omega + lambda2 * psi_hard` over a grid
/// of (weights on the selected features, intercept). Feature selection is the
/// same greedy step as the vanilla fit. Ties go to the smaller largest
/// absolute weight, then lexicographic order.
pub fn grid_search_oracle(
    x: ArrayView1<'_, f64>,
    nb: &Neighborhood,
    k: usize,
    cfg: &FairObjectiveConfig,
    grid: &GridSpec,
) -> Result<Explanation> {
    if !(grid.resolution > 0.0) || grid.weight_ranges.is_empty() {
        return Err(Error::InvalidConfig("grid needs a positive resolution and weight ranges".into()));
    }
    let (_, selected) = lime_fit(nb, k)?;
    if selected.len() > 2 {
        return Err(Error::ActiveSetTooLarge { got: selected.len() });
    }
    if cfg.lambda2 > 0.0 && !nb.has_both_groups() {
        return Err(Error::SingleGroupNeighborhood { attempts: 1 });
    }
    let n = nb.len();
    let total: f64 = nb.weights.iter().sum();
    let counts = nb.group_counts();
    let dp_f = if cfg.lambda2 > 0.0 {
        demographic_parity(&nb.f_preds, &nb.groups)?
    } else {
        0.0
    };
    let axes: Vec<Vec<f64>> = (0..selected.len()).map(|c| grid.axis(grid.weight_range(c))).collect();
    let b_axis = grid.axis(grid.intercept_range);
    if b_axis.is_empty() || axes.iter().any(Vec::is_empty) {
        return Err(Error::InvalidConfig("empty grid axis".into()));
    }

    // Enumerate weight combinations as an odometer.
    let mut idx = vec![0usize; selected.len()];
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut base = vec![0.0; n];
    let mut thresholds: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    loop {
        let wv: Vec<f64> = idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect();
        for (i, z) in nb.samples.rows().into_iter().enumerate() {
            base[i] = selected.iter().zip(&wv).map(|(&j, w)| w * z[j]).sum();
        }
        // L(b) = S2 - 2 b S1 + b^2 S0 with residuals r = y - base
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let w = nb.weights[i] / total;
            let r = nb.f_scores[i] - base[i];
            s0 += w;
            s1 += w * r;
            s2 += w * r * r;
        }
        let omega = wv.iter().filter(|&&v| v != 0.0).count() as f64;
        for g in 0..2 {
            thresholds[g].clear();
        }
        for i in 0..n {
            thresholds[nb.groups[i] as usize].push(THRESHOLD - base[i]);
        }
        thresholds[0].sort_by(f64::total_cmp);
        thresholds[1].sort_by(f64::total_cmp);
        let mut ptr = [0usize; 2];
        for &b in &b_axis {
            for g in 0..2 {
                while ptr[g] < thresholds[g].len() && thresholds[g][ptr[g]] <= b {
                    ptr[g] += 1;
                }
            }
            let psi = if cfg.lambda2 > 0.0 {
                let dp = ptr[1] as f64 / counts[1] as f64 - ptr[0] as f64 / counts[0] as f64;
                (dp_f - dp).abs()
            } else {
                0.0
            };
            let value = s2 - 2.0 * b * s1 + b * b * s0 + cfg.lambda1 * omega + cfg.lambda2 * psi;
            let mut theta = wv.clone();
            theta.push(b);
            if best
                .as_ref()
                .is_none_or(|(bt, bv)| better((&theta, value), (bt, *bv), selected.len()))
            {
                best = Some((theta, value));
            }
        }
        // advance odometer
        let mut c = 0;
        while c < idx.len() {
            idx[c] += 1;
            if idx[c] < axes[c].len() {
                break;
            }
            idx[c] = 0;
            c += 1;
        }
        if c == idx.len() {
            break;
        }
    }
    let (theta, _) = best.expect("grid is non-empty");
    let mut weights = Array1::zeros(nb.n_features());
    for (c, &j) in selected.iter().enumerate() {
        weights[j] = theta[c];
    }
    let g = LinearSurrogate::new(weights, theta[selected.len()]);
    let psi_value = if nb.has_both_groups() {
        Some(psi_hard(&nb.f_preds, &g, nb)?)
    } else {
        None
    };
    Ok(Explanation {
        objective: ObjectiveBreakdown {
            fidelity: fidelity_loss(&g, nb)?,
            complexity: complexity(&g) as f64,
            psi: psi_value,
            psi_smooth: None,
        },
        surrogate: g,
        center: x.to_owned(),
        selected_features: selected,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        tau: None,
        n_perturbations: nb.len(),
        seed: nb.seed,
        restart_count: 0,
    })
}
