//! Boundary and perturbation-count experiments, and report emission.
//!
//! The boundary study explains the two-threshold oracle at a panel of points
//! straddling both thresholds and reads the decision boundary each surrogate
//! implies on `x1`. The sweep compares the hard mismatch of vanilla and fair
//! explanations as the neighborhood size grows, with both variants fitted on
//! the same neighborhoods.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blackbox::{BlackBoxModel, OracleModel};
use crate::dataset::{feature_stats, generate_synthetic, group_means, SyntheticConfig, TabularDataset, SYNTH_X1};
use crate::error::{Error, Result};
use crate::fair::{fair_explain_on, sample_two_group_neighborhood, FairObjectiveConfig};
use crate::neighborhood::KernelConfig;
use crate::rng;
use crate::surrogate::{implied_boundary, lime_explain};

/// Number of `x1` values in the boundary panel, per group.
pub const PANEL_POINTS: usize = 9;
/// `x1` interval covered by the boundary panel.
pub const PANEL_RANGE: (f64, f64) = (4.5, 6.5);
/// Default fixed subsample size for the sweep.
pub const SWEEP_POINTS: usize = 200;

/// `n_features` for small synthetic problems, 5 otherwise.
pub fn default_sparsity(n_features: usize) -> usize {
    if n_features <= 3 {
        n_features
    } else {
        5
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// `x1` values of the boundary panel.
pub fn panel_x1() -> Vec<f64> {
    let (lo, hi) = PANEL_RANGE;
    (0..PANEL_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (PANEL_POINTS - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedBoundary {
    pub seed: u64,
    /// Mean implied boundary over the panel centers of group 0 and group 1.
    pub group_means: [f64; 2],
    /// Share of group 0 and group 1 in the generated data.
    pub group_shares: [f64; 2],
    /// Share-weighted combination of the two group means.
    pub boundary: f64,
    /// Panel centers whose surrogate had zero weight on `x1`.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub scenario: SyntheticConfig,
    pub kernel: KernelConfig,
    pub sparsity: usize,
    pub panel_x1: Vec<f64>,
    pub per_seed: Vec<SeedBoundary>,
    pub mean_boundary: f64,
    pub std_boundary: f64,
    pub majority_boundary: f64,
    pub minority_boundary: f64,
    pub midpoint: f64,
    pub closer_to_majority: bool,
    /// Degenerate surrogates summed over seeds; excluded from the means.
    pub degenerate_total: usize,
}

impl BoundaryReport {
    pub fn boundaries(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.boundary).collect()
    }
}

/// Run the boundary study.
///
/// For every seed the scenario is regenerated with that seed, the oracle is
/// explained at [`PANEL_POINTS`] values of `x1` for each group (with `x0` at
/// the group's mean), and the implied `x1` boundaries are averaged per group.
/// The seed's boundary weights the two group averages by their population
/// shares, so it describes a typical explained point.
pub fn run_boundary_experiment(
    cfg: &SyntheticConfig,
    kc: &KernelConfig,
    seeds: &[u64],
    k: usize,
) -> Result<BoundaryReport> {
    if seeds.len() < 5 {
        return Err(Error::InvalidConfig(format!(
            "boundary study needs at least 5 seeds, got {}",
            seeds.len()
        )));
    }
    cfg.validate()?;
    kc.validate()?;
    let xs = panel_x1();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let scen = SyntheticConfig { seed, ..cfg.clone() };
        let ds = generate_synthetic(&scen)?;
        let f = BlackBoxModel::Oracle(OracleModel::for_synthetic(&scen));
        let stats = feature_stats(&ds)?;
        let x1 = ds.feature_index(SYNTH_X1).expect("synthetic layout");
        let groups = ds.groups();
        let n1 = groups.iter().filter(|&&g| g == 1).count();
        let shares = [
            (groups.len() - n1) as f64 / groups.len() as f64,
            n1 as f64 / groups.len() as f64,
        ];
        let mut gm = [f64::NAN; 2];
        let mut degenerate = 0;
        for grp in 0..2u8 {
            let base = group_means(&ds, grp).ok_or(Error::DegenerateSplit {
                fraction: cfg.minority_fraction,
                n_rows: cfg.n_rows,
            })?;
            let mut found = Vec::with_capacity(xs.len());
            for (i, &v) in xs.iter().enumerate() {
                let mut center: Array1<f64> = base.clone();
                center[ds.group_col()] = f64::from(grp);
                center[x1] = v;
                let s = rng::derive_seed(seed, (u64::from(grp) << 32) | i as u64);
                let e = lime_explain(&f, center.view(), &stats, kc, k, s)?;
                match implied_boundary(&e.surrogate, x1, center.view()) {
                    Ok(t) => found.push(t),
                    Err(Error::ZeroWeight { .. }) => degenerate += 1,
                    Err(e) => return Err(e),
                }
            }
            gm[grp as usize] = mean_std(&found).0;
        }
        let boundary = match (gm[0].is_nan(), gm[1].is_nan()) {
            (false, false) => shares[0] * gm[0] + shares[1] * gm[1],
            (true, false) => gm[1],
            (false, true) => gm[0],
            (true, true) => f64::NAN,
        };
        per_seed.push(SeedBoundary {
            seed,
            group_means: gm,
            group_shares: shares,
            boundary,
            degenerate,
        });
    }
    let valid: Vec<f64> = per_seed.iter().map(|s| s.boundary).filter(|b| !b.is_nan()).collect();
    let (mean, std) = mean_std(&valid);
    let majority = cfg.boundary_majority;
    let minority = cfg.boundary_minority;
    Ok(BoundaryReport {
        scenario: cfg.clone(),
        kernel: kc.clone(),
        sparsity: k,
        panel_x1: xs,
        degenerate_total: per_seed.iter().map(|s| s.degenerate).sum(),
        per_seed,
        mean_boundary: mean,
        std_boundary: std,
        majority_boundary: majority,
        minority_boundary: minority,
        midpoint: 0.5 * (majority + minority),
        closer_to_majority: (mean - majority).abs() < (mean - minority).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Fair,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Fair => "fair",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub count: usize,
    pub variant: Variant,
    /// Mean hard mismatch over the explained points, one entry per seed.
    pub per_seed: Vec<f64>,
    pub mean_psi: f64,
    pub std_psi: f64,
    /// Explanations that entered the per-seed means, summed over seeds.
    pub n_explanations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub lambda2: f64,
    pub sparsity: usize,
    pub points: Vec<usize>,
    pub cells: Vec<SweepCell>,
    /// Per count: (point, seed) pairs skipped because no neighborhood held
    /// both groups.
    pub skips: Vec<usize>,
}

impl SweepReport {
    pub fn cell(&self, count: usize, variant: Variant) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.count == count && c.variant == variant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub sparsity: usize,
    pub kernel_width: f64,
    /// Size of the fixed point subsample; `None` explains every row.
    pub max_points: Option<usize>,
    /// Seed of the point subsample.
    pub subsample_seed: u64,
}

/// Rows explained by the sweep: all of them, or a fixed seeded subsample in
/// ascending order.
pub fn sweep_points(n_rows: usize, max_points: Option<usize>, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_rows).collect();
    if let Some(m) = max_points {
        if m < n_rows {
            idx.shuffle(&mut rng::seeded(seed));
            idx.truncate(m);
            idx.sort_unstable();
        }
    }
    idx
}

/// Perturbation-count sweep. For each count, seed and point one neighborhood
/// holding both groups is drawn and explained twice: with `lambda2 = 0` and
/// with `cfg.lambda2`. Per seed, the hard mismatch is averaged over points;
/// cells report the mean and standard deviation of those averages.
pub fn run_perturbation_sweep(
    ds: &TabularDataset,
    f: &BlackBoxModel,
    sc: &SweepConfig,
    cfg: &FairObjectiveConfig,
) -> Result<SweepReport> {
    if sc.counts.is_empty() || sc.counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("counts must be nonempty and strictly ascending".into()));
    }
    if sc.counts[0] < 50 {
        return Err(Error::InvalidConfig(format!("counts must be at least 50, got {}", sc.counts[0])));
    }
    if sc.seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    cfg.validate()?;
    let stats = feature_stats(ds)?;
    let points = sweep_points(ds.n_rows(), sc.max_points, sc.subsample_seed);
    let vanilla_cfg = FairObjectiveConfig { lambda2: 0.0, ..cfg.clone() };
    let mut cells = Vec::new();
    let mut skips = Vec::new();
    for &count in &sc.counts {
        let kc = KernelConfig {
            width: sc.kernel_width,
            ..KernelConfig::new(ds.n_features(), count)
        };
        let mut per_seed = [Vec::new(), Vec::new()];
        let mut n_expl = [0usize; 2];
        let mut skipped = 0;
        for &seed in &sc.seeds {
            let mut sums = [0.0; 2];
            let mut n = 0usize;
            for &i in &points {
                let s = rng::derive_seed(rng::derive_seed(seed, count as u64), i as u64);
                let nb = match sample_two_group_neighborhood(
                    ds.row(i),
                    &stats,
                    f,
                    &kc,
                    s,
                    cfg.max_neighborhood_attempts,
                ) {
                    Ok(nb) => nb,
                    Err(Error::SingleGroupNeighborhood { .. }) => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let v = fair_explain_on(&nb, sc.sparsity, &vanilla_cfg)?;
                let fe = fair_explain_on(&nb, sc.sparsity, cfg)?;
                sums[0] += v.objective.psi.expect("both groups present");
                sums[1] += fe.objective.psi.expect("both groups present");
                n += 1;
            }
            if n > 0 {
                for (v, s) in per_seed.iter_mut().zip(sums) {
                    v.push(s / n as f64);
                }
                n_expl[0] += n;
                n_expl[1] += n;
            }
        }
        for (vi, variant) in [Variant::Vanilla, Variant::Fair].into_iter().enumerate() {
            let (mean, std) = mean_std(&per_seed[vi]);
            cells.push(SweepCell {
                count,
                variant,
                per_seed: per_seed[vi].clone(),
                mean_psi: mean,
                std_psi: std,
                n_explanations: n_expl[vi],
            });
        }
        skips.push(skipped);
    }
    Ok(SweepReport {
        counts: sc.counts.clone(),
        seeds: sc.seeds.clone(),
        lambda2: cfg.lambda2,
        sparsity: sc.sparsity,
        points,
        cells,
        skips,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Csv,
    SvgLines,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "svg-lines" | "svg" => Ok(ReportFormat::SvgLines),
            other => Err(Error::UnsupportedFormat(other.to_string())),
        }
    }
}

impl ReportFormat {
    /// Format implied by a file extension, if any.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            "svg" => Some(ReportFormat::SvgLines),
            _ => None,
        }
    }
}

/// A report that can be written by [`emit_report`].
pub trait Report: Serialize {
    fn to_csv(&self) -> Result<String>;
    fn to_svg(&self) -> Result<String>;
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<memory>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl Report for SweepReport {
    fn to_csv(&self) -> Result<String> {
        csv_string(
            &["count", "variant", "mean_psi", "std_psi", "n_seeds", "n_explanations", "skips"],
            self.cells.iter().map(|c| {
                let skips = self
                    .counts
                    .iter()
                    .position(|&k| k == c.count)
                    .map_or(0, |i| self.skips[i]);
                vec![
                    c.count.to_string(),
                    c.variant.as_str().to_string(),
                    c.mean_psi.to_string(),
                    c.std_psi.to_string(),
                    c.per_seed.len().to_string(),
                    c.n_explanations.to_string(),
                    skips.to_string(),
                ]
            }),
        )
    }

    fn to_svg(&self) -> Result<String> {
        let series: Vec<(&str, Vec<(f64, f64)>)> = [Variant::Vanilla, Variant::Fair]
            .into_iter()
            .map(|v| {
                let pts = self
                    .cells
                    .iter()
                    .filter(|c| c.variant == v)
                    .map(|c| (c.count as f64, c.mean_psi))
                    .collect();
                (v.as_str(), pts)
            })
            .collect();
        Ok(line_chart("perturbations", "mean hard psi", &series))
    }
}

impl Report for BoundaryReport {
    fn to_csv(&self) -> Result<String> {
        csv_string(
            &["seed", "boundary", "group0_mean", "group1_mean", "group0_share", "degenerate"],
            self.per_seed.iter().map(|s| {
                vec![
                    s.seed.to_string(),
                    s.boundary.to_string(),
                    s.group_means[0].to_string(),
                    s.group_means[1].to_string(),
                    s.group_shares[0].to_string(),
                    s.degenerate.to_string(),
                ]
            }),
        )
    }

    fn to_svg(&self) -> Result<String> {
        let pts = self
            .per_seed
            .iter()
            .enumerate()
            .map(|(i, s)| (i as f64, s.boundary))
            .collect();
        Ok(line_chart("seed index", "implied x1 boundary", &[("boundary", pts)]))
    }
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn line_chart(x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let all = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (SVG_W - 2.0 * MARGIN);
    let sy = |y: f64| SVG_H - MARGIN - (y - y0) / (y1 - y0) * (SVG_H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let (l, r, t, b) = (MARGIN, SVG_W - MARGIN, MARGIN, SVG_H - MARGIN);
    let _ = writeln!(s, r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        SVG_W / 2.0,
        SVG_H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0
    );
    let _ = writeln!(s, r#"<text x="{l}" y="{}" font-size="10">{x0}</text>"#, b + 14.0);
    let _ = writeln!(s, r#"<text x="{r}" y="{}" font-size="10" text-anchor="end">{x1}</text>"#, b + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{b}" font-size="10" text-anchor="end">{y0:.4}</text>"#, l - 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{t}" font-size="10" text-anchor="end">{y1:.4}</text>"#, l - 4.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" points="{}"><title>{name}</title></polyline>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{name}</text>"#,
            r - 60.0,
            t + 14.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Render `report` in `format`.
pub fn render_report<R: Report>(report: &R, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::SvgLines => report.to_svg(),
    }
}

/// Write `report` to `path` in `format`.
pub fn emit_report<R: Report>(report: &R, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = render_report(report, format)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SyntheticConfig;

    fn small_sweep(lambda2: f64) -> SweepReport {
        let scen = SyntheticConfig {
            n_rows: 300,
            ..Default::default()
        };
        let ds = generate_synthetic(&scen).unwrap();
        let f = BlackBoxModel::Oracle(OracleModel::for_synthetic(&scen));
        let sc = SweepConfig {
            counts: vec![60, 120],
            seeds: vec![1, 2],
            sparsity: 3,
            kernel_width: KernelConfig::default_width(3),
            max_points: Some(6),
            subsample_seed: 0,
        };
        let cfg = FairObjectiveConfig {
            lambda2,
            steps: 40,
            ..Default::default()
        };
        run_perturbation_sweep(&ds, &f, &sc, &cfg).unwrap()
    }

    #[test]
    fn panel_is_evenly_spaced() {
        let xs = panel_x1();
        assert_eq!(xs.len(), 9);
        assert_eq!(xs[0], 4.5);
        assert_eq!(xs[8], 6.5);
        assert_eq!(xs[4], 5.5);
    }

    #[test]
    fn sparsity_defaults() {
        assert_eq!(default_sparsity(3), 3);
        assert_eq!(default_sparsity(2), 2);
        assert_eq!(default_sparsity(12), 5);
    }

    #[test]
    fn sweep_points_fixed_subsample() {
        let a = sweep_points(1000, Some(200), 3);
        assert_eq!(a.len(), 200);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, sweep_points(1000, Some(200), 3));
        assert_eq!(sweep_points(50, Some(200), 3), (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn zero_penalty_variants_are_identical() {
        let r = small_sweep(0.0);
        for &c in &r.counts {
            let v = r.cell(c, Variant::Vanilla).unwrap();
            let f = r.cell(c, Variant::Fair).unwrap();
            assert_eq!(v.per_seed, f.per_seed);
        }
    }

    #[test]
    fn sweep_cells_share_seed_counts() {
        let r = small_sweep(5.0);
        assert_eq!(r.cells.len(), 4);
        let n = r.cells[0].per_seed.len();
        assert!(r.cells.iter().all(|c| c.per_seed.len() == n));
    }

    #[test]
    fn sweep_rejects_bad_counts() {
        let scen = SyntheticConfig {
            n_rows: 100,
            ..Default::default()
        };
        let ds = generate_synthetic(&scen).unwrap();
        let f = BlackBoxModel::Oracle(OracleModel::for_synthetic(&scen));
        let mut sc = SweepConfig {
            counts: vec![200, 100],
            seeds: vec![1],
            sparsity: 3,
            kernel_width: 1.0,
            max_points: Some(2),
            subsample_seed: 0,
        };
        let cfg = FairObjectiveConfig::default();
        assert!(run_perturbation_sweep(&ds, &f, &sc, &cfg).is_err());
        sc.counts = vec![20, 100];
        assert!(run_perturbation_sweep(&ds, &f, &sc, &cfg).is_err());
    }

    #[test]
    fn report_formats() {
        let r = small_sweep(5.0);
        let json = render_report(&r, ReportFormat::Json).unwrap();
        let back: SweepReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let csv = render_report(&r, ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 1 + r.counts.len() * 2);
        let svg = render_report(&r, ReportFormat::SvgLines).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(matches!("png".parse::<ReportFormat>(), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn boundary_needs_five_seeds() {
        let kc = KernelConfig::new(3, 100);
        let e = run_boundary_experiment(&SyntheticConfig::default(), &kc, &[1, 2, 3], 3);
        assert!(matches!(e, Err(Error::InvalidConfig(_))));
    }
}
