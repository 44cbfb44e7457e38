//! Tabular datasets with a binary sensitive attribute.
//!
//! A [`TabularDataset`] keeps the model inputs (which include the sensitive
//! group column) separate from the optional ground-truth label. Datasets are
//! read from and written to CSV with a single header row, and the two-group
//! boundary scenario can be synthesized with [`generate_synthetic`].

use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Column names emitted by [`generate_synthetic`].
pub const SYNTH_GROUP: &str = "g";
pub const SYNTH_X0: &str = "x0";
pub const SYNTH_X1: &str = "x1";
/// Label column name used when oracle labels are attached to synthetic data.
pub const SYNTH_LABEL: &str = "y";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    feature_names: Vec<String>,
    features: Array2<f64>,
    group_col: usize,
    label_name: Option<String>,
    labels: Option<Vec<u8>>,
    feature_kinds: Vec<FeatureKind>,
}

fn is_binary_value(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

fn infer_kinds(features: &Array2<f64>) -> Vec<FeatureKind> {
    features
        .axis_iter(Axis(1))
        .map(|col| {
            if col.iter().all(|&v| is_binary_value(v)) {
                FeatureKind::Binary
            } else {
                FeatureKind::Continuous
            }
        })
        .collect()
}

impl TabularDataset {
    /// Build a dataset, validating the group column and labels.
    ///
    /// Row numbers in errors are 1-based data rows (the header is not counted).
    pub fn new(
        feature_names: Vec<String>,
        features: Array2<f64>,
        group_col: usize,
        labels: Option<(String, Vec<u8>)>,
    ) -> Result<Self> {
        if feature_names.len() != features.ncols() {
            return Err(Error::Dimension {
                expected: features.ncols(),
                got: feature_names.len(),
            });
        }
        if group_col >= features.ncols() {
            return Err(Error::InvalidConfig(format!(
                "group column index {group_col} out of range for {} features",
                features.ncols()
            )));
        }
        for (i, &v) in features.column(group_col).iter().enumerate() {
            if !is_binary_value(v) {
                return Err(Error::InvalidGroupValue { row: i + 1, value: v });
            }
        }
        let (label_name, labels) = match labels {
            Some((name, l)) => {
                if l.len() != features.nrows() {
                    return Err(Error::Dimension {
                        expected: features.nrows(),
                        got: l.len(),
                    });
                }
                if let Some((i, &v)) = l.iter().enumerate().find(|(_, &v)| v > 1) {
                    return Err(Error::InvalidLabelValue {
                        row: i + 1,
                        value: v as f64,
                    });
                }
                (Some(name), Some(l))
            }
            None => (None, None),
        };
        let feature_kinds = infer_kinds(&features);
        Ok(Self {
            feature_names,
            features,
            group_col,
            label_name,
            labels,
            feature_kinds,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn feature_kinds(&self) -> &[FeatureKind] {
        &self.feature_kinds
    }

    pub fn group_col(&self) -> usize {
        self.group_col
    }

    /// The sensitive-attribute column as 0/1 bytes.
    pub fn groups(&self) -> Vec<u8> {
        self.features
            .column(self.group_col)
            .iter()
            .map(|&v| v as u8)
            .collect()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn label_name(&self) -> Option<&str> {
        self.label_name.as_deref()
    }

    /// Replace (or attach) the label column.
    pub fn with_labels(self, name: impl Into<String>, labels: Vec<u8>) -> Result<Self> {
        Self::new(
            self.feature_names,
            self.features,
            self.group_col,
            Some((name.into(), labels)),
        )
    }

    /// Dataset restricted to the given row indices, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let features = self.features.select(Axis(0), idx);
        let labels = self
            .labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i]).collect::<Vec<_>>());
        Self {
            feature_names: self.feature_names.clone(),
            feature_kinds: infer_kinds(&features),
            features,
            group_col: self.group_col,
            label_name: self.label_name.clone(),
            labels,
        }
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let t = raw.trim();
    t.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::NonNumeric {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        })
}

/// Read a comma-separated file with one header row and numeric cells.
///
/// The label column, when named, is split off from the features; every other
/// column (including the group column) is a model input.
pub fn load_csv(
    path: impl AsRef<Path>,
    group_col_name: &str,
    label_col_name: Option<&str>,
) -> Result<TabularDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let group_pos = find(group_col_name)?;
    let label_pos = label_col_name.map(find).transpose()?;
    if label_pos == Some(group_pos) {
        return Err(Error::InvalidConfig(
            "group and label must be different columns".into(),
        ));
    }

    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| Some(c) != label_pos).collect();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut n_rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != header.len() {
            return Err(Error::Dimension {
                expected: header.len(),
                got: record.len(),
            });
        }
        for &c in &feature_cols {
            let v = parse_cell(&record[c], row, &header[c])?;
            if c == group_pos && !is_binary_value(v) {
                return Err(Error::InvalidGroupValue { row, value: v });
            }
            values.push(v);
        }
        if let Some(lp) = label_pos {
            let v = parse_cell(&record[lp], row, &header[lp])?;
            if !is_binary_value(v) {
                return Err(Error::InvalidLabelValue { row, value: v });
            }
            labels.push(v as u8);
        }
        n_rows += 1;
    }
    let features = Array2::from_shape_vec((n_rows, feature_cols.len()), values)
        .expect("row-major buffer matches shape");
    let names: Vec<String> = feature_cols.iter().map(|&c| header[c].clone()).collect();
    let group_col = feature_cols
        .iter()
        .position(|&c| c == group_pos)
        .expect("group column is a feature");
    let labels = label_col_name.map(|n| (n.to_string(), labels));
    TabularDataset::new(names, features, group_col, labels)
}

/// Write the dataset as CSV: feature columns in order, then the label column
/// if present. Floats use the shortest representation that parses back to
/// the same value.
pub fn write_csv(ds: &TabularDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<&str> = ds.feature_names.iter().map(String::as_str).collect();
    if let Some(name) = ds.label_name() {
        header.push(name);
    }
    w.write_record(&header)?;
    for i in 0..ds.n_rows() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = ds.labels() {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parameters of the two-group boundary scenario.
///
/// The minority group is coded 0 and uses `boundary_minority`; the majority
/// group is coded 1 and uses `boundary_majority`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_rows: usize,
    pub minority_fraction: f64,
    pub boundary_majority: f64,
    pub boundary_minority: f64,
    pub x0_group_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_rows: 10_000,
            minority_fraction: 0.27,
            boundary_majority: 5.0,
            boundary_minority: 6.0,
            x0_group_shift: 2.0,
            noise_std: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.minority_fraction > 0.0 && self.minority_fraction <= 0.5) {
            return Err(Error::InvalidConfig(format!(
                "minority_fraction must lie in (0, 0.5], got {}",
                self.minority_fraction
            )));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            )));
        }
        if self.n_rows < 10 {
            return Err(Error::InvalidConfig(format!(
                "n_rows must be at least 10, got {}",
                self.n_rows
            )));
        }
        if !(self.boundary_majority.is_finite()
            && self.boundary_minority.is_finite()
            && self.x0_group_shift.is_finite())
        {
            return Err(Error::InvalidConfig("boundaries and shift must be finite".into()));
        }
        Ok(())
    }

    /// Range of the uniform component of `x1`: three units beyond both
    /// boundaries.
    pub fn x1_range(&self) -> (f64, f64) {
        let lo = self.boundary_majority.min(self.boundary_minority) - 3.0;
        let hi = self.boundary_majority.max(self.boundary_minority) + 3.0;
        (lo, hi)
    }

    /// Decision threshold on `x1` for group 0 and group 1.
    pub fn thresholds(&self) -> [f64; 2] {
        [self.boundary_minority, self.boundary_majority]
    }
}

/// Sample the scenario: `g ~ Bernoulli`, minority (probability
/// `minority_fraction`) coded 0; `x0 ~ N(shift * g, 1)`;
/// `x1 ~ U[x1_range] + N(0, noise_std^2)`. No label column is attached.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<TabularDataset> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let (lo, hi) = cfg.x1_range();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    let uniform = Uniform::new(lo, hi).expect("non-empty x1 range");
    let mut data = Array2::zeros((cfg.n_rows, 3));
    for mut row in data.rows_mut() {
        let g = if rng.random::<f64>() < cfg.minority_fraction {
            0.0
        } else {
            1.0
        };
        row[0] = g;
        row[1] = cfg.x0_group_shift * g + unit.sample(&mut rng);
        row[2] = uniform.sample(&mut rng) + noise.sample(&mut rng);
    }
    TabularDataset::new(
        vec![SYNTH_GROUP.into(), SYNTH_X0.into(), SYNTH_X1.into()],
        data,
        0,
        None,
    )
}

/// Per-feature summary statistics used to define the perturbation
/// distribution and the distance scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub means: Vec<f64>,
    /// Sample standard deviations (n - 1 denominator).
    pub stds: Vec<f64>,
    /// Frequency of value 1 for binary features, `None` for continuous ones.
    pub binary_freq: Vec<Option<f64>>,
    pub kinds: Vec<FeatureKind>,
    pub group_col: usize,
}

impl FeatureStats {
    pub fn n_features(&self) -> usize {
        self.means.len()
    }

    pub fn is_constant(&self, j: usize) -> bool {
        self.stds[j] == 0.0
    }
}

pub fn feature_stats(ds: &TabularDataset) -> Result<FeatureStats> {
    let n = ds.n_rows();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, got: n });
    }
    let mut means = Vec::with_capacity(ds.n_features());
    let mut stds = Vec::with_capacity(ds.n_features());
    let mut binary_freq = Vec::with_capacity(ds.n_features());
    for (j, col) in ds.features.axis_iter(Axis(1)).enumerate() {
        let mean = col.sum() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        means.push(mean);
        stds.push((ss / (n - 1) as f64).sqrt());
        binary_freq.push(match ds.feature_kinds[j] {
            FeatureKind::Binary => Some(col.iter().filter(|&&v| v == 1.0).count() as f64 / n as f64),
            FeatureKind::Continuous => None,
        });
    }
    Ok(FeatureStats {
        means,
        stds,
        binary_freq,
        kinds: ds.feature_kinds.clone(),
        group_col: ds.group_col,
    })
}

/// Number of training rows for a split: `floor(fraction * n)`, with a 1e-9
/// allowance so that e.g. `0.29 * 100` counts as 29.
pub fn train_rows(train_fraction: f64, n_rows: usize) -> usize {
    (train_fraction * n_rows as f64 + 1e-9).floor() as usize
}

/// Random disjoint train/test partition. Both halves keep the original row
/// order; the remainder after [`train_rows`] goes to the test split.
pub fn split(
    ds: &TabularDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(TabularDataset, TabularDataset)> {
    let n = ds.n_rows();
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::DegenerateSplit {
            fraction: train_fraction,
            n_rows: n,
        });
    }
    let n_train = train_rows(train_fraction, n);
    if n_train == 0 || n_train >= n {
        return Err(Error::DegenerateSplit {
            fraction: train_fraction,
            n_rows: n,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let (train, test) = idx.split_at_mut(n_train);
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.select_rows(train), ds.select_rows(test)))
}

/// Column means of a feature matrix restricted to rows where the group column
/// equals `group`.
pub fn group_means(ds: &TabularDataset, group: u8) -> Option<Array1<f64>> {
    let idx: Vec<usize> = ds
        .groups()
        .iter()
        .enumerate()
        .filter(|(_, &g)| g == group)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return None;
    }
    ds.features.select(Axis(0), &idx).mean_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_four_row_csv() {
        let f = write_tmp("g,x0,x1,y\n0,1.5,4.0,0\n0,2.0,6.5,1\n1,0.5,5.5,1\n1,-1,3,0\n");
        let ds = load_csv(f.path(), "g", Some("y")).unwrap();
        assert_eq!(ds.group_col(), 0);
        assert_eq!(ds.n_rows(), 4);
        assert_eq!(ds.n_features(), 3);
        let groups = ds.groups();
        assert_eq!(groups.iter().filter(|&&g| g == 0).count(), 2);
        assert_eq!(groups.iter().filter(|&&g| g == 1).count(), 2);
        assert_eq!(ds.labels().unwrap(), &[0, 1, 1, 0]);
        assert_eq!(ds.feature_kinds()[0], FeatureKind::Binary);
        assert_eq!(ds.feature_kinds()[1], FeatureKind::Continuous);
    }

    #[test]
    fn group_value_two_is_rejected_with_row() {
        let f = write_tmp("g,x0\n0,1\n2,1\n");
        match load_csv(f.path(), "g", None) {
            Err(Error::InvalidGroupValue { row, value }) => {
                assert_eq!(row, 2);
                assert_eq!(value, 2.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_row_and_column() {
        let f = write_tmp("g,x0\n0,1\n1,abc\n");
        match load_csv(f.path(), "g", None) {
            Err(Error::NonNumeric { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "x0");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_file() {
        let f = write_tmp("g,x0\n0,1\n");
        assert!(matches!(
            load_csv(f.path(), "race", None),
            Err(Error::MissingColumn(c)) if c == "race"
        ));
        assert!(matches!(
            load_csv(f.path(), "g", Some("label")),
            Err(Error::MissingColumn(_))
        ));
        assert!(matches!(
            load_csv("/nonexistent/data.csv", "g", None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn stats_constant_binary_and_hand_arithmetic() {
        let ds = TabularDataset::new(
            vec!["g".into(), "c".into(), "b".into(), "v".into()],
            array![[0., 1., 0., 2.], [1., 1., 0., 4.], [1., 1., 1., 6.]],
            0,
            None,
        )
        .unwrap();
        let st = feature_stats(&ds).unwrap();
        assert_eq!(st.means[1], 1.0);
        assert_eq!(st.stds[1], 0.0);
        assert!(st.is_constant(1));
        assert_relative_eq!(st.means[3], 4.0);
        assert_relative_eq!(st.stds[3], 2.0);
        assert_eq!(st.binary_freq[3], None);

        let ds = TabularDataset::new(
            vec!["g".into()],
            array![[0.], [0.], [1.], [1.]],
            0,
            None,
        )
        .unwrap();
        assert_eq!(feature_stats(&ds).unwrap().binary_freq[0], Some(0.5));
    }

    #[test]
    fn stats_need_two_rows() {
        let ds = TabularDataset::new(vec!["g".into()], array![[0.]], 0, None).unwrap();
        assert!(matches!(feature_stats(&ds), Err(Error::TooFewRows { .. })));
    }

    fn ten_rows() -> TabularDataset {
        let data = Array2::from_shape_fn((10, 2), |(i, j)| if j == 0 { (i % 2) as f64 } else { i as f64 });
        TabularDataset::new(vec!["g".into(), "x".into()], data, 0, Some(("y".into(), vec![0, 1, 0, 1, 1, 0, 0, 1, 1, 0])))
            .unwrap()
    }

    #[test]
    fn split_partitions_rows() {
        let ds = ten_rows();
        let (tr, te) = split(&ds, 0.8, 3).unwrap();
        assert_eq!((tr.n_rows(), te.n_rows()), (8, 2));
        let mut ids: Vec<i64> = tr
            .features()
            .column(1)
            .iter()
            .chain(te.features().column(1).iter())
            .map(|&v| v as i64)
            .collect();
        ids.sort();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        assert_eq!(tr.group_col(), 0);
        assert!(tr.labels().is_some());

        let again = split(&ds, 0.8, 3).unwrap();
        assert_eq!(again.0, tr);
        assert_eq!(again.1, te);
    }

    #[test]
    fn split_rounding_rule() {
        let ds = ten_rows();
        let (tr, te) = split(&ds, 0.99, 1).unwrap();
        assert_eq!((tr.n_rows(), te.n_rows()), (9, 1));
        assert_eq!(train_rows(0.29, 100), 29);
        assert!(matches!(split(&ds, 0.05, 1), Err(Error::DegenerateSplit { .. })));
        assert!(matches!(split(&ds, 1.0, 1), Err(Error::DegenerateSplit { .. })));
    }

    #[test]
    fn synthetic_minority_share_and_determinism() {
        let cfg = SyntheticConfig {
            n_rows: 10_000,
            minority_fraction: 0.27,
            seed: 7,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let minority = ds.groups().iter().filter(|&&g| g == 0).count() as f64 / 10_000.0;
        assert!((minority - 0.27).abs() < 0.02, "minority share {minority}");
        assert_eq!(generate_synthetic(&cfg).unwrap(), ds);

        let half = generate_synthetic(&SyntheticConfig {
            minority_fraction: 0.5,
            ..cfg.clone()
        })
        .unwrap();
        let share = half.groups().iter().filter(|&&g| g == 0).count() as f64 / 10_000.0;
        assert!((share - 0.5).abs() < 0.02);
    }

    #[test]
    fn synthetic_config_validation() {
        let bad = [
            SyntheticConfig { minority_fraction: 0.0, ..Default::default() },
            SyntheticConfig { minority_fraction: 0.6, ..Default::default() },
            SyntheticConfig { noise_std: 0.0, ..Default::default() },
            SyntheticConfig { n_rows: 9, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn x0_is_shifted_by_group() {
        let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let m0 = group_means(&ds, 0).unwrap();
        let m1 = group_means(&ds, 1).unwrap();
        assert!((m1[1] - m0[1] - 2.0).abs() < 0.15);
    }
}
