//! Command-line front end: synthesize data, train a black-box, explain and
//! audit single rows, and run the sweep and boundary experiments.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use fairlime::blackbox::{self, OracleModel, TrainConfig};
use fairlime::dataset::{self, feature_stats, SYNTH_GROUP, SYNTH_LABEL, SYNTH_X0, SYNTH_X1};
use fairlime::experiments::{
    default_sparsity, emit_report, run_boundary_experiment, run_perturbation_sweep, sweep_points, ReportFormat,
    SweepConfig, SWEEP_POINTS,
};
use fairlime::fair::{self, sample_two_group_neighborhood};
use fairlime::metrics::{self, fairness_mismatch, MetricKind};
use fairlime::neighborhood::sample_neighborhood;
use fairlime::surrogate::Explanation;
use fairlime::{BlackBoxModel, Error, FairObjectiveConfig, KernelConfig, Result, SyntheticConfig, TabularDataset};

#[derive(Parser)]
#[command(name = "fairlime", version, about = "Fairness-aware local surrogate explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-group synthetic scenario with oracle labels.
    Synth(SynthArgs),
    /// Train the three-layer perceptron on a labeled CSV.
    Train(TrainArgs),
    /// Explain one row.
    Explain(ExplainArgs),
    /// Audit fairness preservation of explanations over many rows.
    Audit(AuditArgs),
    /// Mean fairness mismatch of vanilla and fair explanations per
    /// perturbation count.
    Sweep(SweepArgs),
    /// Implied decision boundary of explanations on the synthetic scenario.
    Boundary(BoundaryArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0.27)]
    minority_frac: f64,
    #[arg(long, default_value_t = 5.0)]
    boundary_majority: f64,
    #[arg(long, default_value_t = 6.0)]
    boundary_minority: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_std: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Sensitive attribute column (values 0/1).
    #[arg(long, default_value = SYNTH_GROUP)]
    group: String,
    /// Label column; omitted from the model inputs.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 8])]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SolverArgs {
    /// Model file, or `oracle` for the synthetic two-threshold rule.
    #[arg(long)]
    model: String,
    /// Fairness penalty weight; 0 gives vanilla explanations.
    #[arg(long, default_value_t = 0.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    /// Sparsity budget; defaults to all features up to 3, else 5.
    #[arg(long)]
    k: Option<usize>,
    /// Kernel width; defaults to 0.75 * sqrt(n_features).
    #[arg(long)]
    width: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Zero-based data row.
    #[arg(long)]
    row: usize,
    #[arg(long, default_value_t = 1000)]
    perturbations: usize,
    /// Tolerance for the counterfactual check; no verdict without it.
    #[arg(long)]
    cf_tolerance: Option<f64>,
    /// Also write the neighborhood samples to this CSV.
    #[arg(long)]
    dump_neighborhood: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// dp, eo, eop or pp. Labeled metrics are evaluated only over the audited
    /// rows (global scope); per-row audits always use demographic parity on
    /// the neighborhood.
    #[arg(long, default_value = "dp")]
    metric: String,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 500)]
    perturbations: usize,
    /// Audit a fixed seeded subsample of this many rows.
    #[arg(long)]
    max_rows: Option<usize>,
    #[arg(long)]
    cf_tolerance: Option<f64>,
    /// JSON Lines: one document per row, then a summary document.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model file, or `oracle`.
    #[arg(long, default_value = "oracle")]
    model: String,
    #[arg(long, value_delimiter = ',', default_values_t = [100, 200, 500, 1000, 2000])]
    counts: Vec<usize>,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long)]
    k: Option<usize>,
    /// Size of the fixed row subsample; 0 explains every row.
    #[arg(long, default_value_t = SWEEP_POINTS)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
    /// json, csv or svg-lines; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct BoundaryArgs {
    #[arg(long, default_value_t = 0.27)]
    minority_frac: f64,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 5000)]
    perturbations: usize,
    #[arg(long, default_value_t = 5.0)]
    boundary_majority: f64,
    #[arg(long, default_value_t = 6.0)]
    boundary_minority: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_std: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    format: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Explain(a) => explain(a),
        Command::Audit(a) => audit(a),
        Command::Sweep(a) => sweep(a),
        Command::Boundary(a) => boundary(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_data(a: &DataArgs) -> Result<TabularDataset> {
    dataset::load_csv(&a.data, &a.group, a.label.as_deref())
}

fn load_blackbox(spec: &str, ds: &TabularDataset) -> Result<BlackBoxModel> {
    let model = if spec == "oracle" {
        let names = ds.feature_names();
        let expected = [SYNTH_GROUP, SYNTH_X0, SYNTH_X1];
        if names.len() != 3 || names.iter().zip(expected).any(|(a, b)| a != b) {
            return Err(Error::InvalidConfig(format!(
                "the oracle needs features {expected:?}, data has {names:?}"
            )));
        }
        BlackBoxModel::Oracle(OracleModel::for_synthetic(&SyntheticConfig::default()))
    } else {
        blackbox::load_model(spec)?
    };
    if model.n_features() != ds.n_features() {
        return Err(Error::Dimension {
            expected: ds.n_features(),
            got: model.n_features(),
        });
    }
    Ok(model)
}

fn solver_config(s: &SolverArgs) -> Result<FairObjectiveConfig> {
    let cfg = FairObjectiveConfig {
        lambda1: s.lambda1,
        lambda2: s.lambda2,
        tau: s.tau,
        seed: s.seed,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn kernel(ds: &TabularDataset, s: &SolverArgs, n_samples: usize) -> Result<KernelConfig> {
    let mut kc = KernelConfig::new(ds.n_features(), n_samples);
    if let Some(w) = s.width {
        kc.width = w;
    }
    kc.validate()?;
    Ok(kc)
}

fn format_for(path: &Path, explicit: Option<&str>) -> Result<ReportFormat> {
    match explicit {
        Some(f) => f.parse(),
        None => ReportFormat::from_path(path).ok_or_else(|| {
            Error::UnsupportedFormat(path.extension().and_then(|e| e.to_str()).unwrap_or("").to_string())
        }),
    }
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| io_error(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_rows: a.n,
        minority_fraction: a.minority_frac,
        boundary_majority: a.boundary_majority,
        boundary_minority: a.boundary_minority,
        noise_std: a.noise_std,
        seed: a.seed,
        ..Default::default()
    };
    let ds = dataset::generate_synthetic(&cfg)?;
    let oracle = BlackBoxModel::Oracle(OracleModel::for_synthetic(&cfg));
    let labels = oracle.predict_rows(ds.features().view())?;
    let ds = ds.with_labels(SYNTH_LABEL, labels)?;
    dataset::write_csv(&ds, &a.out)
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let hidden: [usize; 2] = a
        .hidden
        .as_slice()
        .try_into()
        .map_err(|_| Error::InvalidConfig("--hidden takes exactly two widths".into()))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        hidden_widths: hidden,
        seed: a.seed,
    };
    let model = blackbox::train_mlp(&ds, &cfg)?;
    let preds = model.predict_rows(ds.features().view())?;
    let labels = ds.labels().ok_or(Error::MissingLabels)?;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    blackbox::save_model(&model, &a.model)?;
    eprintln!("training accuracy {:.4}", correct as f64 / labels.len() as f64);
    Ok(())
}

/// Flat JSON view of an explanation with feature names attached.
#[derive(Serialize)]
struct ExplanationDoc {
    row: usize,
    weights: serde_json::Map<String, serde_json::Value>,
    intercept: f64,
    active_features: Vec<String>,
    selected_features: Vec<String>,
    lambda1: f64,
    lambda2: f64,
    tau: Option<f64>,
    fidelity: f64,
    complexity: f64,
    psi_hard: Option<f64>,
    psi_smooth: Option<f64>,
    dp_blackbox: Option<f64>,
    dp_surrogate: Option<f64>,
    restart_count: usize,
    n_perturbations: usize,
    seed: u64,
}

fn explanation_doc(
    row: usize,
    e: &Explanation,
    names: &[String],
    dps: Option<(f64, f64)>,
) -> ExplanationDoc {
    let g = &e.surrogate;
    ExplanationDoc {
        row,
        weights: names
            .iter()
            .zip(g.weights.iter())
            .map(|(n, &w)| (n.clone(), json!(w)))
            .collect(),
        intercept: g.intercept,
        active_features: g.active_set.iter().map(|&j| names[j].clone()).collect(),
        selected_features: e.selected_features.iter().map(|&j| names[j].clone()).collect(),
        lambda1: e.lambda1,
        lambda2: e.lambda2,
        tau: e.tau,
        fidelity: e.objective.fidelity,
        complexity: e.objective.complexity,
        psi_hard: e.objective.psi,
        psi_smooth: e.objective.psi_smooth,
        dp_blackbox: dps.map(|d| d.0),
        dp_surrogate: dps.map(|d| d.1),
        restart_count: e.restart_count,
        n_perturbations: e.n_perturbations,
        seed: e.seed,
    }
}

/// Explanation of one row together with its neighborhood-level DP audit.
struct RowAudit {
    explanation: Explanation,
    local: Option<metrics::MismatchReport>,
    counterfactual: metrics::CounterfactualReport,
    sensitive: metrics::SensitiveImportance,
    /// Surrogate decision at the row itself.
    e_pred: u8,
}

fn audit_row(
    ds: &TabularDataset,
    f: &BlackBoxModel,
    stats: &dataset::FeatureStats,
    kc: &KernelConfig,
    cfg: &FairObjectiveConfig,
    k: usize,
    row: usize,
    epsilon: f64,
    cf_tolerance: Option<f64>,
    dump: Option<&Path>,
) -> Result<RowAudit> {
    let x = ds.row(row);
    let seed = fairlime::rng::derive_seed(cfg.seed, row as u64);
    let nb = if cfg.lambda2 > 0.0 {
        sample_two_group_neighborhood(x, stats, f, kc, seed, cfg.max_neighborhood_attempts)?
    } else {
        sample_neighborhood(x, stats, f, kc, seed)?
    };
    if let Some(p) = dump {
        nb.write_csv(ds.feature_names(), p)?;
    }
    let explanation = fair::fair_explain_on(&nb, k, cfg)?;
    let g = &explanation.surrogate;
    let local = if nb.has_both_groups() {
        let e_preds: Vec<u8> = nb
            .samples
            .rows()
            .into_iter()
            .map(|z| fairlime::surrogate::surrogate_predict(g, z))
            .collect::<Result<_>>()?;
        Some(fairness_mismatch(
            MetricKind::DemographicParity,
            &nb.f_preds,
            &e_preds,
            &nb.groups,
            None,
            epsilon,
        )?)
    } else {
        None
    };
    let counterfactual = metrics::counterfactual_check(f, &explanation, x, ds.group_col(), cf_tolerance)?;
    let sensitive = metrics::sensitive_importance(&explanation, ds.group_col())?;
    let e_pred = fairlime::surrogate::surrogate_predict(g, x)?;
    Ok(RowAudit {
        explanation,
        local,
        counterfactual,
        sensitive,
        e_pred,
    })
}

fn row_json(row: usize, ds: &TabularDataset, r: &RowAudit) -> serde_json::Value {
    let dps = r.local.as_ref().map(|m| (m.m_blackbox, m.m_surrogate));
    json!({
        "row": row,
        "explanation": explanation_doc(row, &r.explanation, ds.feature_names(), dps),
        "local_mismatch": r.local,
        "counterfactual": r.counterfactual,
        "sensitive_importance": r.sensitive,
    })
}

fn explain(a: ExplainArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    if a.row >= ds.n_rows() {
        return Err(Error::InvalidConfig(format!(
            "row {} out of range for {} rows",
            a.row,
            ds.n_rows()
        )));
    }
    let f = load_blackbox(&a.solver.model, &ds)?;
    let cfg = solver_config(&a.solver)?;
    let kc = kernel(&ds, &a.solver, a.perturbations)?;
    let stats = feature_stats(&ds)?;
    let k = a.solver.k.unwrap_or_else(|| default_sparsity(ds.n_features()));
    let r = audit_row(
        &ds,
        &f,
        &stats,
        &kc,
        &cfg,
        k,
        a.row,
        0.0,
        a.cf_tolerance,
        a.dump_neighborhood.as_deref(),
    )?;
    let mut doc = row_json(a.row, &ds, &r);
    if let Some(o) = doc.as_object_mut() {
        o.remove("local_mismatch");
        if let Some(m) = &r.local {
            o.insert("psi_breakdown".into(), json!({
                "dp_blackbox": m.m_blackbox,
                "dp_surrogate_hard": m.m_surrogate,
                "psi_hard": m.mismatch,
            }));
        }
    }
    write_text(a.out.as_deref(), &(serde_json::to_string_pretty(&doc)? + "\n"))
}

fn audit(a: AuditArgs) -> Result<()> {
    let metric: MetricKind = a.metric.parse()?;
    let ds = load_data(&a.data)?;
    let f = load_blackbox(&a.solver.model, &ds)?;
    let cfg = solver_config(&a.solver)?;
    let kc = kernel(&ds, &a.solver, a.perturbations)?;
    let stats = feature_stats(&ds)?;
    let k = a.solver.k.unwrap_or_else(|| default_sparsity(ds.n_features()));
    if metric.needs_labels() && ds.labels().is_none() {
        return Err(Error::MissingLabels);
    }
    let rows = sweep_points(ds.n_rows(), a.max_rows, a.solver.seed);

    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_error(p, e))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let path = a.out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut f_preds = Vec::with_capacity(rows.len());
    let mut e_preds = Vec::with_capacity(rows.len());
    let mut mismatches = Vec::new();
    let mut preserved = 0usize;
    let mut single_group = 0usize;
    let mut discrepancies = Vec::with_capacity(rows.len());
    for &row in &rows {
        let r = audit_row(&ds, &f, &stats, &kc, &cfg, k, row, a.epsilon, a.cf_tolerance, None)?;
        match &r.local {
            Some(m) => {
                mismatches.push(m.mismatch);
                preserved += usize::from(m.preserved);
            }
            None => single_group += 1,
        }
        discrepancies.push(r.counterfactual.discrepancy);
        f_preds.push(f.predict(ds.row(row))?);
        e_preds.push(r.e_pred);
        let line = serde_json::to_string(&row_json(row, &ds, &r))?;
        writeln!(out, "{line}").map_err(|e| io_error(&path, e))?;
    }
    let groups: Vec<u8> = rows.iter().map(|&i| ds.groups()[i]).collect();
    let labels: Option<Vec<u8>> = ds.labels().map(|y| rows.iter().map(|&i| y[i]).collect());
    let global = fairness_mismatch(metric, &f_preds, &e_preds, &groups, labels.as_deref(), a.epsilon);
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let summary = json!({
        "summary": {
            "rows": rows.len(),
            "metric": metric,
            "epsilon": a.epsilon,
            "lambda2": cfg.lambda2,
            "local_metric": MetricKind::DemographicParity,
            "local_mean_mismatch": mean(&mismatches),
            "local_max_mismatch": mismatches.iter().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
            "local_preserved": preserved,
            "local_single_group": single_group,
            "counterfactual_mean_discrepancy": mean(&discrepancies),
            "global": match &global {
                Ok(r) => json!(r),
                Err(e) => json!({ "error": e.to_string() }),
            },
        }
    });
    writeln!(out, "{}", serde_json::to_string(&summary)?).map_err(|e| io_error(&path, e))?;
    out.flush().map_err(|e| io_error(&path, e))?;
    global.map(|_| ())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let format = format_for(&a.out, a.format.as_deref())?;
    let ds = load_data(&a.data)?;
    let f = load_blackbox(&a.model, &ds)?;
    let cfg = FairObjectiveConfig {
        lambda2: a.lambda2,
        tau: a.tau,
        seed: a.seed,
        ..Default::default()
    };
    let sc = SweepConfig {
        counts: a.counts,
        seeds: (a.seed..a.seed + a.seeds).collect(),
        sparsity: a.k.unwrap_or_else(|| default_sparsity(ds.n_features())),
        kernel_width: KernelConfig::default_width(ds.n_features()),
        max_points: (a.points > 0).then_some(a.points),
        subsample_seed: a.seed,
    };
    let report = run_perturbation_sweep(&ds, &f, &sc, &cfg)?;
    emit_report(&report, format, &a.out)
}

fn boundary(a: BoundaryArgs) -> Result<()> {
    let format = format_for(&a.out, a.format.as_deref())?;
    let cfg = SyntheticConfig {
        n_rows: a.n,
        minority_fraction: a.minority_frac,
        boundary_majority: a.boundary_majority,
        boundary_minority: a.boundary_minority,
        noise_std: a.noise_std,
        ..Default::default()
    };
    let kc = KernelConfig::new(3, a.perturbations);
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let report = run_boundary_experiment(&cfg, &kc, &seeds, 3)?;
    emit_report(&report, format, &a.out)
}
