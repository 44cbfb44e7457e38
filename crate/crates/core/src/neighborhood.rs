//! Perturbation neighborhoods around an instance.
//!
//! Continuous features are perturbed with Gaussian noise scaled by the
//! training standard deviation; binary features (the sensitive attribute
//! included, unless frozen) are redrawn from their training frequency. Each
//! sample is weighted by an exponential kernel on the standardized Euclidean
//! distance to the instance.

use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blackbox::{BlackBoxModel, THRESHOLD};
use crate::dataset::{FeatureKind, FeatureStats};
use crate::error::{Error, Result};
use crate::rng;

/// Standard deviation used in place of an exact zero, both for perturbing and
/// for standardizing distances.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    EuclideanStandardized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub width: f64,
    pub n_samples: usize,
    pub distance: Distance,
    /// Keep the sensitive attribute at the instance's value instead of
    /// resampling it.
    pub freeze_group: bool,
}

impl KernelConfig {
    /// `width = 0.75 * sqrt(n_features)`.
    pub fn default_width(n_features: usize) -> f64 {
        0.75 * (n_features as f64).sqrt()
    }

    pub fn new(n_features: usize, n_samples: usize) -> Self {
        Self {
            width: Self::default_width(n_features),
            n_samples,
            distance: Distance::EuclideanStandardized,
            freeze_group: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::InvalidConfig(format!("kernel width must be positive, got {}", self.width)));
        }
        if self.n_samples < 10 {
            return Err(Error::InvalidConfig(format!(
                "n_samples must be at least 10, got {}",
                self.n_samples
            )));
        }
        Ok(())
    }
}

/// `exp(-d^2 / width^2)`
pub fn kernel_weight(distance: f64, width: f64) -> f64 {
    (-(distance * distance) / (width * width)).exp()
}

/// Euclidean distance after dividing each coordinate difference by the
/// (floored) feature standard deviation.
pub fn standardized_distance(x: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>, stds: &[f64]) -> f64 {
    x.iter()
        .zip(z.iter())
        .zip(stds)
        .map(|((a, b), s)| ((a - b) / s.max(STD_FLOOR)).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub center: Array1<f64>,
    pub samples: Array2<f64>,
    pub weights: Vec<f64>,
    pub f_scores: Vec<f64>,
    pub f_preds: Vec<u8>,
    pub groups: Vec<u8>,
    pub group_col: usize,
    pub seed: u64,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.samples.ncols()
    }

    /// Sample counts of group 0 and group 1.
    pub fn group_counts(&self) -> [usize; 2] {
        let ones = self.groups.iter().filter(|&&g| g == 1).count();
        [self.groups.len() - ones, ones]
    }

    pub fn has_both_groups(&self) -> bool {
        let [n0, n1] = self.group_counts();
        n0 > 0 && n1 > 0
    }

    /// Build a neighborhood from explicit samples, evaluating the black-box
    /// and the kernel. Used by [`sample_neighborhood`] and by tests that need
    /// hand-placed samples.
    pub fn from_samples(
        center: Array1<f64>,
        samples: Array2<f64>,
        stats: &FeatureStats,
        f: &BlackBoxModel,
        width: f64,
        seed: u64,
    ) -> Result<Self> {
        let d = stats.n_features();
        if center.len() != d {
            return Err(Error::Dimension { expected: d, got: center.len() });
        }
        if samples.ncols() != d {
            return Err(Error::Dimension { expected: d, got: samples.ncols() });
        }
        let g = stats.group_col;
        let mut weights = Vec::with_capacity(samples.nrows());
        let mut groups = Vec::with_capacity(samples.nrows());
        for z in samples.rows() {
            weights.push(kernel_weight(standardized_distance(center.view(), z, &stats.stds), width));
            let gv = z[g];
            if gv != 0.0 && gv != 1.0 {
                return Err(Error::NonBinaryGroup { value: gv });
            }
            groups.push(gv as u8);
        }
        let f_scores = f.score_rows(samples.view())?;
        let f_preds = f_scores.iter().map(|&s| u8::from(s >= THRESHOLD)).collect();
        Ok(Self {
            center,
            samples,
            weights,
            f_scores,
            f_preds,
            groups,
            group_col: g,
            seed,
        })
    }

    /// Write samples with weight and black-box score columns, for debugging.
    pub fn write_csv(&self, feature_names: &[String], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header: Vec<String> = feature_names.to_vec();
        header.extend(["weight".into(), "f_score".into()]);
        w.write_record(&header)?;
        for (i, z) in self.samples.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = z.iter().map(|v| v.to_string()).collect();
            rec.push(self.weights[i].to_string());
            rec.push(self.f_scores[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Draw `kc.n_samples` perturbations of `x` and evaluate `f` on them.
///
/// Random draws are made sample by sample, feature by feature, from a ChaCha
/// stream seeded with `seed`.
pub fn sample_neighborhood(
    x: ArrayView1<'_, f64>,
    stats: &FeatureStats,
    f: &BlackBoxModel,
    kc: &KernelConfig,
    seed: u64,
) -> Result<Neighborhood> {
    kc.validate()?;
    let d = stats.n_features();
    if x.len() != d {
        return Err(Error::Dimension { expected: d, got: x.len() });
    }
    if f.n_features() != d {
        return Err(Error::Dimension { expected: d, got: f.n_features() });
    }
    let g = stats.group_col;
    let mut rng = rng::seeded(seed);
    let noise: Vec<Normal<f64>> = stats
        .stds
        .iter()
        .map(|&s| Normal::new(0.0, s.max(STD_FLOOR)).expect("positive std"))
        .collect();
    let mut samples = Array2::zeros((kc.n_samples, d));
    for mut z in samples.rows_mut() {
        for j in 0..d {
            z[j] = if j == g && kc.freeze_group {
                x[j]
            } else {
                match (stats.kinds[j], stats.binary_freq[j]) {
                    (FeatureKind::Binary, Some(p)) => f64::from(u8::from(rng.random::<f64>() < p)),
                    _ => x[j] + noise[j].sample(&mut rng),
                }
            };
        }
    }
    Neighborhood::from_samples(x.to_owned(), samples, stats, f, kc.width, seed)
}

/// Copy of `x` with the sensitive attribute inverted.
pub fn flip_group(x: ArrayView1<'_, f64>, group_col: usize) -> Result<Array1<f64>> {
    if group_col >= x.len() {
        return Err(Error::Dimension { expected: group_col + 1, got: x.len() });
    }
    let mut out = x.to_owned();
    out[group_col] = match x[group_col] {
        v if v == 0.0 => 1.0,
        v if v == 1.0 => 0.0,
        v => return Err(Error::NonBinaryGroup { value: v }),
    };
    Ok(out)
}
