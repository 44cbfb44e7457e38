//! Black-box classifiers with a uniform scoring interface.
//!
//! Three variants are supported: a group-conditional threshold oracle, a
//! logistic model and a three-layer perceptron (two rectified hidden layers and
//! a sigmoid output) trained by mini-batch gradient descent on binary
//! cross-entropy. All variants score into `[0, 1]` and classify at 0.5.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{SyntheticConfig, TabularDataset};
use crate::error::{Error, Result};
use crate::rng;

/// Classification threshold shared by black-boxes and surrogates.
pub const THRESHOLD: f64 = 0.5;

/// Learning rate below which full-batch training is expected to decrease the
/// loss monotonically on standardized inputs.
pub const STABLE_FULL_BATCH_LR: f64 = 0.05;

const FORMAT_HEADER: &str = "fairlime-model";
const FORMAT_VERSION: &str = "1";

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Oracle,
    Logistic,
    Mlp3,
}

impl ModelKind {
    fn tag(self) -> &'static str {
        match self {
            ModelKind::Oracle => "oracle",
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp3 => "mlp3",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "oracle" => Some(ModelKind::Oracle),
            "logistic" => Some(ModelKind::Logistic),
            "mlp3" => Some(ModelKind::Mlp3),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Predicts 1 iff `x[feature]` strictly exceeds the threshold of the row's
/// group.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleModel {
    pub n_features: usize,
    pub group_col: usize,
    pub feature: usize,
    /// Thresholds for group 0 and group 1.
    pub thresholds: [f64; 2],
}

impl OracleModel {
    /// Oracle matching the columns and boundaries of
    /// [`generate_synthetic`](crate::dataset::generate_synthetic).
    pub fn for_synthetic(cfg: &SyntheticConfig) -> Self {
        Self {
            n_features: 3,
            group_col: 0,
            feature: 2,
            thresholds: cfg.thresholds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Array1<f64>,
    pub intercept: f64,
}

/// Three-layer perceptron. Inputs are standardized with the stored
/// `input_mean`/`input_std` before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp3 {
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
    /// `hidden1 x n_features`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `hidden2 x hidden1`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_out: Array1<f64>,
    pub b_out: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlackBoxModel {
    Oracle(OracleModel),
    Logistic(LogisticModel),
    Mlp3(Mlp3),
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// Hard 0/1 decision of the group-conditional threshold oracle.
pub fn oracle_predict(model: &OracleModel, x: ArrayView1<'_, f64>) -> Result<u8> {
    check_dim(model.n_features, x.len())?;
    let g = x[model.group_col];
    let threshold = if g == 0.0 {
        model.thresholds[0]
    } else if g == 1.0 {
        model.thresholds[1]
    } else {
        return Err(Error::NonBinaryGroup { value: g });
    };
    Ok(u8::from(x[model.feature] > threshold))
}

impl BlackBoxModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            BlackBoxModel::Oracle(_) => ModelKind::Oracle,
            BlackBoxModel::Logistic(_) => ModelKind::Logistic,
            BlackBoxModel::Mlp3(_) => ModelKind::Mlp3,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            BlackBoxModel::Oracle(m) => m.n_features,
            BlackBoxModel::Logistic(m) => m.weights.len(),
            BlackBoxModel::Mlp3(m) => m.input_mean.len(),
        }
    }

    /// Probability of the positive class.
    pub fn score(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        check_dim(self.n_features(), x.len())?;
        Ok(match self {
            BlackBoxModel::Oracle(m) => f64::from(oracle_predict(m, x)?),
            BlackBoxModel::Logistic(m) => sigmoid(m.weights.dot(&x) + m.intercept),
            BlackBoxModel::Mlp3(m) => sigmoid(m.forward(x).logit),
        })
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> Result<u8> {
        Ok(u8::from(self.score(x)? >= THRESHOLD))
    }

    /// Scores for every row of a matrix.
    pub fn score_rows(&self, rows: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        rows.axis_iter(Axis(0)).map(|r| self.score(r)).collect()
    }

    pub fn predict_rows(&self, rows: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
        rows.axis_iter(Axis(0)).map(|r| self.predict(r)).collect()
    }
}

struct Forward {
    input: Array1<f64>,
    z1: Array1<f64>,
    h1: Array1<f64>,
    z2: Array1<f64>,
    h2: Array1<f64>,
    logit: f64,
}

fn relu(z: &Array1<f64>) -> Array1<f64> {
    z.mapv(|v| v.max(0.0))
}

/// Gradient of the mean cross-entropy with respect to every [`Mlp3`]
/// parameter, with the same shapes as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_out: Array1<f64>,
    pub b_out: f64,
}

impl MlpGradient {
    /// Parameters in the order used by [`Mlp3::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.extend(self.b2.iter());
        v.extend(self.w_out.iter());
        v.push(self.b_out);
        v
    }
}

impl Mlp3 {
    pub fn hidden_widths(&self) -> [usize; 2] {
        [self.w1.nrows(), self.w2.nrows()]
    }

    fn forward(&self, x: ArrayView1<'_, f64>) -> Forward {
        let input = (&x - &self.input_mean) / &self.input_std;
        let z1 = self.w1.dot(&input) + &self.b1;
        let h1 = relu(&z1);
        let z2 = self.w2.dot(&h1) + &self.b2;
        let h2 = relu(&z2);
        let logit = self.w_out.dot(&h2) + self.b_out;
        Forward {
            input,
            z1,
            h1,
            z2,
            h2,
            logit,
        }
    }

    /// Flattened parameters: `w1` (row-major), `b1`, `w2`, `b2`, `w_out`,
    /// `b_out`.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.extend(self.b2.iter());
        v.extend(self.w_out.iter());
        v.push(self.b_out);
        v
    }

    /// Inverse of [`Mlp3::params`].
    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        for v in self.w1.iter_mut() {
            *v = it.next().expect("parameter count");
        }
        for v in self.b1.iter_mut() {
            *v = it.next().expect("parameter count");
        }
        for v in self.w2.iter_mut() {
            *v = it.next().expect("parameter count");
        }
        for v in self.b2.iter_mut() {
            *v = it.next().expect("parameter count");
        }
        for v in self.w_out.iter_mut() {
            *v = it.next().expect("parameter count");
        }
        self.b_out = it.next().expect("parameter count");
    }

    fn apply_step(&mut self, g: &MlpGradient, lr: f64) {
        self.w1.scaled_add(-lr, &g.w1);
        self.b1.scaled_add(-lr, &g.b1);
        self.w2.scaled_add(-lr, &g.w2);
        self.b2.scaled_add(-lr, &g.b2);
        self.w_out.scaled_add(-lr, &g.w_out);
        self.b_out -= lr * g.b_out;
    }
}

fn check_batch(model: &Mlp3, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    check_dim(model.input_mean.len(), x.ncols())?;
    check_dim(x.nrows(), y.len())
}

/// Mean binary cross-entropy of the model on a labeled batch.
pub fn mlp_loss(model: &Mlp3, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<f64> {
    check_batch(model, x, y)?;
    let total: f64 = x
        .axis_iter(Axis(0))
        .zip(y)
        .map(|(row, &label)| {
            let z = model.forward(row).logit;
            softplus(z) - f64::from(label) * z
        })
        .sum();
    Ok(total / x.nrows() as f64)
}

/// Backpropagated gradient of [`mlp_loss`].
pub fn mlp_gradient(model: &Mlp3, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<MlpGradient> {
    check_batch(model, x, y)?;
    let m = x.nrows() as f64;
    let mut g = MlpGradient {
        w1: Array2::zeros(model.w1.raw_dim()),
        b1: Array1::zeros(model.b1.len()),
        w2: Array2::zeros(model.w2.raw_dim()),
        b2: Array1::zeros(model.b2.len()),
        w_out: Array1::zeros(model.w_out.len()),
        b_out: 0.0,
    };
    for (row, &label) in x.axis_iter(Axis(0)).zip(y) {
        let fw = model.forward(row);
        let dz3 = (sigmoid(fw.logit) - f64::from(label)) / m;
        g.w_out.scaled_add(dz3, &fw.h2);
        g.b_out += dz3;
        let dz2 = Array1::from_shape_fn(fw.z2.len(), |k| {
            if fw.z2[k] > 0.0 {
                dz3 * model.w_out[k]
            } else {
                0.0
            }
        });
        outer_add(&mut g.w2, &dz2, &fw.h1);
        g.b2 += &dz2;
        let dh1 = model.w2.t().dot(&dz2);
        let dz1 = Array1::from_shape_fn(fw.z1.len(), |k| if fw.z1[k] > 0.0 { dh1[k] } else { 0.0 });
        outer_add(&mut g.w1, &dz1, &fw.input);
        g.b1 += &dz1;
    }
    Ok(g)
}

fn outer_add(target: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (mut row, &ai) in target.rows_mut().into_iter().zip(a) {
        if ai != 0.0 {
            row.scaled_add(ai, b);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_widths: [usize; 2],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.1,
            batch_size: 32,
            hidden_widths: [16, 8],
            seed: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::InvalidConfig(
                "batch_size and hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// He-initialized network for the given input statistics. Biases start at 0.
pub fn init_mlp(
    input_mean: Array1<f64>,
    input_std: Array1<f64>,
    hidden_widths: [usize; 2],
    rng: &mut rng::Rng,
) -> Mlp3 {
    let d = input_mean.len();
    let [h1, h2] = hidden_widths;
    let mut gauss = |rows: usize, cols: usize, var: f64| {
        let n = Normal::new(0.0, var.sqrt()).expect("positive variance");
        Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
    };
    let w1 = gauss(h1, d, 2.0 / d as f64);
    let w2 = gauss(h2, h1, 2.0 / h1 as f64);
    let w_out = gauss(1, h2, 1.0 / h2 as f64).into_shape_with_order(h2).expect("vector");
    Mlp3 {
        input_mean,
        input_std,
        w1,
        b1: Array1::zeros(h1),
        w2,
        b2: Array1::zeros(h2),
        w_out,
        b_out: 0.0,
    }
}

/// Train the three-layer perceptron; see [`train_mlp_with_history`].
pub fn train_mlp(ds: &TabularDataset, cfg: &TrainConfig) -> Result<BlackBoxModel> {
    train_mlp_with_history(ds, cfg).map(|(m, _)| BlackBoxModel::Mlp3(m))
}

/// Mini-batch gradient descent on mean binary cross-entropy.
///
/// Rows are reshuffled every epoch with the config seed. Returns the model
/// and the full-data loss before training followed by the loss after each
/// epoch. With `epochs = 0` the model is exactly its random initialization.
pub fn train_mlp_with_history(ds: &TabularDataset, cfg: &TrainConfig) -> Result<(Mlp3, Vec<f64>)> {
    cfg.validate()?;
    let labels = ds.labels().ok_or(Error::MissingLabels)?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives < 2 || labels.len() - positives < 2 {
        return Err(Error::SingleClass);
    }
    let x = ds.features();
    let mean = x.mean_axis(Axis(0)).expect("non-empty dataset");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });

    let mut rng = rng::seeded(cfg.seed);
    let mut model = init_mlp(mean, std, cfg.hidden_widths, &mut rng);
    let mut history = vec![mlp_loss(&model, x.view(), labels)?];
    let mut order: Vec<usize> = (0..ds.n_rows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bx = x.select(Axis(0), chunk);
            let by: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let g = mlp_gradient(&model, bx.view(), &by)?;
            model.apply_step(&g, cfg.learning_rate);
        }
        history.push(mlp_loss(&model, x.view(), labels)?);
    }
    Ok((model, history))
}

// ---------------------------------------------------------------------------
// Plain-text model files.

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_vec(out: &mut String, key: &str, v: impl IntoIterator<Item = f64>) {
    let items: Vec<String> = v.into_iter().map(fmt_f64).collect();
    out.push_str(&format!("{key} {} {}\n", items.len(), items.join(" ")));
}

fn push_mat(out: &mut String, key: &str, m: &Array2<f64>) {
    let items: Vec<String> = m.iter().copied().map(fmt_f64).collect();
    out.push_str(&format!("{key} {} {} {}\n", m.nrows(), m.ncols(), items.join(" ")));
}

/// Serialize to the versioned key-value text format (17 significant digits).
pub fn model_to_string(model: &BlackBoxModel) -> String {
    let mut out = format!("{FORMAT_HEADER} {FORMAT_VERSION}\nvariant {}\n", model.kind());
    match model {
        BlackBoxModel::Oracle(m) => {
            out.push_str(&format!("n_features {}\n", m.n_features));
            out.push_str(&format!("group_col {}\n", m.group_col));
            out.push_str(&format!("feature {}\n", m.feature));
            push_vec(&mut out, "thresholds", m.thresholds);
        }
        BlackBoxModel::Logistic(m) => {
            push_vec(&mut out, "weights", m.weights.iter().copied());
            out.push_str(&format!("intercept {}\n", fmt_f64(m.intercept)));
        }
        BlackBoxModel::Mlp3(m) => {
            push_vec(&mut out, "input_mean", m.input_mean.iter().copied());
            push_vec(&mut out, "input_std", m.input_std.iter().copied());
            push_mat(&mut out, "w1", &m.w1);
            push_vec(&mut out, "b1", m.b1.iter().copied());
            push_mat(&mut out, "w2", &m.w2);
            push_vec(&mut out, "b2", m.b2.iter().copied());
            push_vec(&mut out, "w_out", m.w_out.iter().copied());
            out.push_str(&format!("b_out {}\n", fmt_f64(m.b_out)));
        }
    }
    out
}

pub fn save_model(model: &BlackBoxModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BlackBoxModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text)
}

/// Load a model file and require a specific variant.
pub fn load_model_as(path: impl AsRef<Path>, expected: ModelKind) -> Result<BlackBoxModel> {
    let model = load_model(path)?;
    if model.kind() != expected {
        return Err(Error::ModelVariant {
            expected: expected.to_string(),
            found: model.kind().to_string(),
        });
    }
    Ok(model)
}

struct Fields<'a> {
    entries: Vec<(usize, &'a str, Vec<&'a str>)>,
    n_lines: usize,
}

fn format_err(line: usize, message: impl Into<String>) -> Error {
    Error::ModelFormat {
        line,
        message: message.into(),
    }
}

impl<'a> Fields<'a> {
    fn get(&self, key: &str) -> Result<(usize, &[&'a str])> {
        self.entries
            .iter()
            .find(|(_, k, _)| *k == key)
            .map(|(l, _, v)| (*l, v.as_slice()))
            .ok_or_else(|| format_err(self.n_lines + 1, format!("missing field `{key}`")))
    }

    fn float(&self, key: &str) -> Result<f64> {
        let (line, v) = self.get(key)?;
        match v {
            [x] => parse_f64(x, line),
            _ => Err(format_err(line, format!("`{key}` expects one value"))),
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let (line, v) = self.get(key)?;
        match v {
            [x] => x
                .parse()
                .map_err(|_| format_err(line, format!("`{key}` is not an integer"))),
            _ => Err(format_err(line, format!("`{key}` expects one value"))),
        }
    }

    fn vector(&self, key: &str) -> Result<Array1<f64>> {
        let (line, v) = self.get(key)?;
        let (len, rest) = v
            .split_first()
            .ok_or_else(|| format_err(line, format!("`{key}` has no length")))?;
        let len: usize = len
            .parse()
            .map_err(|_| format_err(line, format!("`{key}` length is not an integer")))?;
        if rest.len() != len {
            return Err(format_err(
                line,
                format!("`{key}` declares {len} values, found {}", rest.len()),
            ));
        }
        rest.iter().map(|x| parse_f64(x, line)).collect()
    }

    fn matrix(&self, key: &str) -> Result<Array2<f64>> {
        let (line, v) = self.get(key)?;
        if v.len() < 2 {
            return Err(format_err(line, format!("`{key}` has no shape")));
        }
        let dims: Vec<usize> = v[..2]
            .iter()
            .map(|d| d.parse().map_err(|_| format_err(line, "bad matrix shape")))
            .collect::<Result<_>>()?;
        let values: Vec<f64> = v[2..].iter().map(|x| parse_f64(x, line)).collect::<Result<_>>()?;
        Array2::from_shape_vec((dims[0], dims[1]), values).map_err(|_| {
            format_err(
                line,
                format!("`{key}` declares {}x{} values, found {}", dims[0], dims[1], v.len() - 2),
            )
        })
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| format_err(line, format!("`{s}` is not a number")))
}

/// Parse the text produced by [`model_to_string`].
pub fn parse_model(text: &str) -> Result<BlackBoxModel> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| format_err(1, "empty model file"))?;
    let mut head = first.split_whitespace();
    if head.next() != Some(FORMAT_HEADER) {
        return Err(format_err(1, "missing model header"));
    }
    let version = head.next().unwrap_or("");
    if version != FORMAT_VERSION {
        return Err(Error::ModelVersion {
            found: version.to_string(),
        });
    }
    let mut fields = Fields {
        entries: Vec::new(),
        n_lines: text.lines().count(),
    };
    for (i, line) in lines {
        let mut toks = line.split_whitespace();
        let key = toks.next().expect("non-empty line");
        fields.entries.push((i + 1, key, toks.collect()));
    }
    let (line, variant) = fields.get("variant")?;
    let kind = match variant {
        [tag] => ModelKind::from_tag(tag)
            .ok_or_else(|| format_err(line, format!("unknown variant `{tag}`")))?,
        _ => return Err(format_err(line, "`variant` expects one value")),
    };
    let model = match kind {
        ModelKind::Oracle => {
            let t = fields.vector("thresholds")?;
            if t.len() != 2 {
                return Err(format_err(fields.get("thresholds")?.0, "oracle needs 2 thresholds"));
            }
            let m = OracleModel {
                n_features: fields.usize("n_features")?,
                group_col: fields.usize("group_col")?,
                feature: fields.usize("feature")?,
                thresholds: [t[0], t[1]],
            };
            if m.group_col >= m.n_features || m.feature >= m.n_features {
                return Err(format_err(fields.get("feature")?.0, "column index out of range"));
            }
            BlackBoxModel::Oracle(m)
        }
        ModelKind::Logistic => BlackBoxModel::Logistic(LogisticModel {
            weights: fields.vector("weights")?,
            intercept: fields.float("intercept")?,
        }),
        ModelKind::Mlp3 => {
            let m = Mlp3 {
                input_mean: fields.vector("input_mean")?,
                input_std: fields.vector("input_std")?,
                w1: fields.matrix("w1")?,
                b1: fields.vector("b1")?,
                w2: fields.matrix("w2")?,
                b2: fields.vector("b2")?,
                w_out: fields.vector("w_out")?,
                b_out: fields.float("b_out")?,
            };
            let d = m.input_mean.len();
            let consistent = m.input_std.len() == d
                && m.w1.ncols() == d
                && m.b1.len() == m.w1.nrows()
                && m.w2.ncols() == m.w1.nrows()
                && m.b2.len() == m.w2.nrows()
                && m.w_out.len() == m.w2.nrows();
            if !consistent {
                return Err(format_err(fields.n_lines, "inconsistent layer shapes"));
            }
            BlackBoxModel::Mlp3(m)
        }
    };
    Ok(model)
}
