//! Datasets: the synthetic linear task, CSV tables, IDX image files,
//! shuffled splits and train-split standardisation.

mod csv_io;
mod idx;

pub use csv_io::{load_csv, save_csv};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{RngStream, Tensor};

/// Regression targets or class labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Real(Tensor),
    Labels { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(t) => t.rows(),
            Targets::Labels { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Real(t) => Targets::Real(t.select_rows(indices)),
            Targets::Labels { labels, classes } => Targets::Labels {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        }
    }

    pub fn as_real(&self) -> Result<&Tensor> {
        match self {
            Targets::Real(t) => Ok(t),
            Targets::Labels { .. } => Err(Error::Data("expected real-valued targets".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Targets,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(x: Tensor, y: Targets) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(Error::Dimension {
                op: "Dataset::new",
                left: x.shape().to_vec(),
                right: vec![y.len()],
            });
        }
        let feature_names = (0..x.cols()).map(|i| format!("x{i}")).collect();
        Ok(Self {
            x,
            y,
            feature_names,
            target_name: "y".into(),
            split: SplitTag::Full,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: self.y.select(indices),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            split,
        }
    }
}

/// `y = 2x + 8 + ε`, `x ~ Uniform(x_range)`, `ε ~ N(0, 1)`.
pub fn synth_generate(n: usize, seed: u64, x_range: (f64, f64)) -> Result<Dataset> {
    synth_generate_with_noise(n, seed, x_range, 1.0)
}

pub fn synth_generate_with_noise(n: usize, seed: u64, x_range: (f64, f64), noise_std: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Argument("synthetic dataset needs n >= 1".into()));
    }
    let mut rng = RngStream::new(seed);
    let x = rng.uniform_range(&[n, 1], x_range.0, x_range.1);
    let noise = rng.gaussian(&[n, 1], 0.0, noise_std)?;
    let y = x.zip_map(&noise, |xi, e| 2.0 * xi + 8.0 + e)?;
    Dataset::new(x, Targets::Real(y))
}

/// Shuffled train/val/test split. Fractions must sum to 1.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let n = dataset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::new(seed).shuffle(&mut idx);
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let counts = [n_train, n_val, n - n_train - n_val];
    for (i, (&c, &f)) in counts.iter().zip(&fractions).enumerate() {
        if c == 0 && f > 0.0 {
            return Err(Error::Data(format!(
                "split {i} would be empty: fraction {f} of {n} rows"
            )));
        }
    }
    let (a, rest) = idx.split_at(n_train);
    let (b, c) = rest.split_at(n_val);
    Ok((
        dataset.subset(a, SplitTag::Train),
        dataset.subset(b, SplitTag::Val),
        dataset.subset(c, SplitTag::Test),
    ))
}

/// Per-column mean and standard deviation (population), for standardising.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits column statistics; constant columns get std 1.
    pub fn fit(t: &Tensor) -> Self {
        let (rows, cols) = (t.rows(), t.cols());
        let mut mean = vec![0.0; cols];
        for i in 0..rows {
            for (m, v) in mean.iter_mut().zip(t.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows.max(1) as f64);
        let mut var = vec![0.0; cols];
        for i in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / rows.max(1) as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(cols: usize) -> Self {
        Self {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
        }
    }

    fn columnwise(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let cols = self.mean.len();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % cols;
            *v = f(*v, self.mean[c], self.std[c]);
        }
        out
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        self.columnwise(t, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        self.columnwise(t, |v, m, s| v * s + m)
    }

    /// Maps variances from standardised to original units.
    pub fn invert_variance(&self, t: &Tensor) -> Tensor {
        self.columnwise(t, |v, _, s| v * s * s)
    }
}

/// Statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalisation {
    pub features: Standardizer,
    /// Present when regression targets were standardised too.
    pub targets: Option<Standardizer>,
}

impl Normalisation {
    pub fn fit(train: &Dataset, standardise_targets: bool) -> Self {
        let targets = match (&train.y, standardise_targets) {
            (Targets::Real(y), true) => Some(Standardizer::fit(y)),
            _ => None,
        };
        Self {
            features: Standardizer::fit(&train.x),
            targets,
        }
    }

    pub fn apply(&self, d: &Dataset) -> Dataset {
        let y = match (&d.y, &self.targets) {
            (Targets::Real(y), Some(s)) => Targets::Real(s.apply(y)),
            (y, _) => y.clone(),
        };
        Dataset {
            x: self.features.apply(&d.x),
            y,
            ..d.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synth_noise_free_is_exact_line() {
        let d = synth_generate_with_noise(50, 1, (-1.0, 1.0), 0.0).unwrap();
        let y = d.y.as_real().unwrap();
        for i in 0..50 {
            let x = d.x.get2(i, 0);
            assert!((-1.0..=1.0).contains(&x));
            assert_eq!(y.get2(i, 0) - (2.0 * x + 8.0), 0.0);
        }
    }

    #[test]
    fn synth_residual_moments() {
        let d = synth_generate(10_000, 2, (-1.0, 1.0)).unwrap();
        let y = d.y.as_real().unwrap();
        let r = y.zip_map(&d.x, |yi, xi| yi - 2.0 * xi - 8.0).unwrap();
        assert!(r.mean().abs() < 0.03);
        assert!((r.variance().sqrt() - 1.0).abs() < 0.03);
        assert_eq!(d, synth_generate(10_000, 2, (-1.0, 1.0)).unwrap());
    }

    #[test]
    fn split_whole_and_errors() {
        let d = synth_generate(10, 3, (-1.0, 1.0)).unwrap();
        let (tr, va, te) = split(&d, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(tr.len(), 10);
        assert!(va.is_empty() && te.is_empty());
        let tiny = synth_generate(2, 3, (-1.0, 1.0)).unwrap();
        assert!(matches!(split(&tiny, [0.8, 0.1, 0.1], 1), Err(Error::Data(_))));
        assert!(matches!(split(&d, [0.5, 0.1, 0.1], 1), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_exhaustive_and_seeded(n in 3usize..200, a in 0.1f64..0.8, seed in 0u64..100) {
            let b = (1.0 - a) / 2.0;
            let x = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
            let d = Dataset::new(x.clone(), Targets::Real(x)).unwrap();
            if let Ok((tr, va, te)) = split(&d, [a, b, 1.0 - a - b], seed) {
                let mut all: Vec<usize> = tr.x.data().iter().chain(va.x.data()).chain(te.x.data()).map(|v| *v as usize).collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                let again = split(&d, [a, b, 1.0 - a - b], seed).unwrap();
                prop_assert_eq!(again.0, tr);
            }
        }

        #[test]
        fn standardise_round_trip(seed in 0u64..100, rows in 2usize..40, cols in 1usize..5) {
            let mut rng = RngStream::new(seed);
            let t = rng.gaussian(&[rows, cols], 3.0, 5.0).unwrap();
            let s = Standardizer::fit(&t);
            let back = s.invert(&s.apply(&t));
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalisation_uses_train_statistics() {
        let d = synth_generate(100, 4, (-1.0, 1.0)).unwrap();
        let (tr, _, te) = split(&d, [0.5, 0.0, 0.5], 4).unwrap();
        let norm = Normalisation::fit(&tr, true);
        let ntr = norm.apply(&tr);
        assert!(ntr.x.mean().abs() < 1e-12);
        let nte = norm.apply(&te);
        let expect = (te.x.get2(0, 0) - norm.features.mean[0]) / norm.features.std[0];
        assert_eq!(nte.x.get2(0, 0), expect);
    }
}
