//! Monte-Carlo predictive sampling, the epistemic / aleatoric decomposition
//! and calibration curves built on centred Gaussian predictive intervals.

use std::io::Write;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::ndcore::{RngStream, Tensor};
use crate::objective::softmax;

/// Stacked per-sample predictive means and aleatoric variances, `[S, B, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSamples {
    pub means: Tensor,
    pub variances: Tensor,
}

impl PredictiveSamples {
    /// Stacks per-sample `[B, D]` means and variances.
    pub fn from_samples(means: &[Tensor], variances: &[Tensor]) -> Result<Self> {
        let first = means
            .first()
            .ok_or_else(|| Error::Argument("at least one sample is required".into()))?;
        if means.len() != variances.len() {
            return Err(Error::Argument(format!(
                "{} mean samples but {} variance samples",
                means.len(),
                variances.len()
            )));
        }
        let (b, d) = (first.rows(), first.cols());
        let mut m = Vec::with_capacity(means.len() * b * d);
        let mut v = Vec::with_capacity(means.len() * b * d);
        for (mi, vi) in means.iter().zip(variances) {
            first.expect_same_shape(mi, "PredictiveSamples::from_samples")?;
            first.expect_same_shape(vi, "PredictiveSamples::from_samples")?;
            if let Some(bad) = vi.data().iter().find(|&&x| x < 0.0) {
                return Err(Error::Argument(format!("negative variance {bad}")));
            }
            m.extend_from_slice(mi.data());
            v.extend_from_slice(vi.data());
        }
        let shape = vec![means.len(), b, d];
        Ok(Self {
            means: Tensor::new(shape.clone(), m)?,
            variances: Tensor::new(shape, v)?,
        })
    }

    pub fn samples(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn batch(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.means.shape()[2]
    }

    /// Maps means and variances from standardised target units back to the
    /// original units.
    pub fn denormalise(&self, targets: &Standardizer) -> Self {
        Self {
            means: targets.invert(&self.means),
            variances: targets.invert_variance(&self.variances),
        }
    }
}

/// Per-point variance components, each `[B, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyDecomposition {
    /// Mean over samples of the predictive means.
    pub mean: Tensor,
    pub epistemic_var: Tensor,
    pub aleatoric_var: Tensor,
    pub predictive_var: Tensor,
}

impl UncertaintyDecomposition {
    pub fn epistemic_std(&self) -> Tensor {
        self.epistemic_var.map(f64::sqrt)
    }

    pub fn aleatoric_std(&self) -> Tensor {
        self.aleatoric_var.map(f64::sqrt)
    }

    pub fn predictive_std(&self) -> Tensor {
        self.predictive_var.map(f64::sqrt)
    }

    /// Writes `x, mean, epistemic_std, aleatoric_std, predictive_std` rows.
    /// Multi-column inputs and outputs get `_j` suffixes.
    pub fn write_csv(&self, x: &Tensor, w: &mut impl Write) -> Result<()> {
        if x.rows() != self.mean.rows() {
            return Err(Error::Dimension {
                op: "UncertaintyDecomposition::write_csv",
                left: x.shape().to_vec(),
                right: self.mean.shape().to_vec(),
            });
        }
        let suffixed = |name: &str, n: usize| -> Vec<String> {
            if n == 1 {
                vec![name.to_string()]
            } else {
                (0..n).map(|j| format!("{name}_{j}")).collect()
            }
        };
        let d = self.mean.cols();
        let mut header = suffixed("x", x.cols());
        for name in ["mean", "epistemic_std", "aleatoric_std", "predictive_std"] {
            header.extend(suffixed(name, d));
        }
        writeln!(w, "{}", header.join(","))?;
        let cols = [
            self.mean.clone(),
            self.epistemic_std(),
            self.aleatoric_std(),
            self.predictive_std(),
        ];
        for i in 0..x.rows() {
            let mut fields: Vec<String> = x.row(i).iter().map(f64::to_string).collect();
            for c in &cols {
                fields.extend(c.row(i).iter().map(f64::to_string));
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// One independent RNG substream per sample, forked in order.
fn sample_streams(rng: &mut RngStream, s: usize) -> Vec<RngStream> {
    (0..s).map(|_| rng.fork()).collect()
}

/// Runs `s` stochastic forward passes with fresh masks. Aleatoric variance is
/// `1/τ` for homoscedastic models and the head's output otherwise.
pub fn mc_predict(model: &Model, x: &Tensor, s: usize, rng: &mut RngStream) -> Result<PredictiveSamples> {
    if s == 0 {
        return Err(Error::Argument("sample count must be at least 1".into()));
    }
    let streams = sample_streams(rng, s);
    let outputs: Vec<(Tensor, Tensor)> = streams
        .into_par_iter()
        .map(|mut r| {
            let out = model.predict(x, &mut r)?;
            let var = match out.log_var {
                Some(lv) => lv.map(f64::exp),
                None => Tensor::full(out.mean.shape(), (-model.log_tau).exp()),
            };
            Ok((out.mean, var))
        })
        .collect::<Result<_>>()?;
    let (means, vars): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
    PredictiveSamples::from_samples(&means, &vars)
}

/// Epistemic variance is the population variance of the sampled means,
/// aleatoric variance the average sampled variance; predictive is their sum.
pub fn decompose(samples: &PredictiveSamples) -> Result<UncertaintyDecomposition> {
    let s = samples.samples();
    if s < 2 {
        return Err(Error::Argument(format!(
            "decomposition needs at least 2 samples, got {s}"
        )));
    }
    let (b, d) = (samples.batch(), samples.outputs());
    let per = b * d;
    let means = samples.means.data();
    let vars = samples.variances.data();
    let sf = s as f64;
    let mut mean = vec![0.0; per];
    let mut alea = vec![0.0; per];
    for k in 0..s {
        for j in 0..per {
            mean[j] += means[k * per + j];
            alea[j] += vars[k * per + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= sf);
    alea.iter_mut().for_each(|a| *a /= sf);
    let mut epi = vec![0.0; per];
    for k in 0..s {
        for j in 0..per {
            let dev = means[k * per + j] - mean[j];
            epi[j] += dev * dev;
        }
    }
    epi.iter_mut().for_each(|e| *e /= sf);
    let pred: Vec<f64> = epi.iter().zip(&alea).map(|(e, a)| e + a).collect();
    let shape = vec![b, d];
    Ok(UncertaintyDecomposition {
        mean: Tensor::new(shape.clone(), mean)?,
        epistemic_var: Tensor::new(shape.clone(), epi)?,
        aleatoric_var: Tensor::new(shape.clone(), alea)?,
        predictive_var: Tensor::new(shape, pred)?,
    })
}

/// Samples summed per parallel task; partial sums are combined in order.
const CHUNK: usize = 16;

/// Softmax probabilities averaged over `s` mask samples.
pub fn classification_predict(model: &Model, x: &Tensor, s: usize, rng: &mut RngStream) -> Result<Tensor> {
    if s == 0 {
        return Err(Error::Argument("sample count must be at least 1".into()));
    }
    let streams = sample_streams(rng, s);
    let partials: Vec<Tensor> = streams
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Tensor::zeros(&[x.rows(), model.output_dim()]);
            for r in chunk {
                let probs = softmax(&model.predict(x, &mut r.clone())?.mean);
                acc = acc.add(&probs)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut acc = Tensor::zeros(&[x.rows(), model.output_dim()]);
    for p in &partials {
        acc = acc.add(p)?;
    }
    Ok(acc.scale(1.0 / s as f64))
}

/// Row-wise argmax.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            t.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub level: f64,
    /// Fraction of points inside the centred interval of mass `level`.
    pub empirical: f64,
    /// Points whose smallest covering interval is this level's.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurve {
    pub bins: Vec<CalibrationBin>,
    /// Root-mean-square of `empirical − level` over the requested levels.
    pub rmse: f64,
}

impl CalibrationCurve {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "level,empirical,count")?;
        for b in &self.bins {
            writeln!(w, "{},{},{}", b.level, b.empirical, b.count)?;
        }
        writeln!(w, "# rmse,{}", self.rmse)?;
        Ok(())
    }
}

/// Half-width, in standard deviations, of the centred Gaussian interval of mass `q`.
pub fn interval_half_width(q: f64) -> f64 {
    if q >= 1.0 {
        f64::INFINITY
    } else {
        Normal::standard().inverse_cdf(0.5 * (1.0 + q))
    }
}

/// Evenly spaced levels `1/k, 2/k, …, 1`.
pub fn default_levels(k: usize) -> Vec<f64> {
    (1..=k).map(|i| i as f64 / k as f64).collect()
}

/// Coverage of centred Gaussian predictive intervals at each level.
///
/// `means` and `targets` must match the decomposition's shape; every element
/// is one evaluated point. Levels must be increasing in (0, 1]. Level 1 is
/// appended when absent so that bin counts cover every point; an appended
/// level does not enter the RMSE.
pub fn calibration_curve(
    decomp: &UncertaintyDecomposition,
    means: &Tensor,
    targets: &Tensor,
    levels: &[f64],
) -> Result<CalibrationCurve> {
    means.expect_same_shape(targets, "calibration_curve")?;
    if means.len() != decomp.predictive_var.len() {
        return Err(Error::Dimension {
            op: "calibration_curve",
            left: means.shape().to_vec(),
            right: decomp.predictive_var.shape().to_vec(),
        });
    }
    if levels.is_empty() {
        return Err(Error::Argument("no calibration levels given".into()));
    }
    if levels.iter().any(|&q| !(q > 0.0 && q <= 1.0)) || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument(format!(
            "levels must be strictly increasing in (0, 1], got {levels:?}"
        )));
    }
    let requested = levels.len();
    let mut all = levels.to_vec();
    if *all.last().unwrap() < 1.0 {
        all.push(1.0);
    }
    let widths: Vec<f64> = all.iter().map(|&q| interval_half_width(q)).collect();

    let mut counts = vec![0usize; all.len()];
    for (i, ((&m, &y), &v)) in means
        .data()
        .iter()
        .zip(targets.data())
        .zip(decomp.predictive_var.data())
        .enumerate()
    {
        if !(v > 0.0) {
            return Err(Error::DegenerateInterval { index: i });
        }
        let a = (y - m).abs() / v.sqrt();
        let bin = widths.partition_point(|&z| z < a);
        counts[bin] += 1;
    }
    let n = means.len().max(1) as f64;
    let mut covered = 0;
    let bins: Vec<CalibrationBin> = all
        .iter()
        .zip(&counts)
        .map(|(&level, &count)| {
            covered += count;
            CalibrationBin {
                level,
                empirical: covered as f64 / n,
                count,
            }
        })
        .collect();
    let mse = bins[..requested]
        .iter()
        .map(|b| (b.empirical - b.level).powi(2))
        .sum::<f64>()
        / requested as f64;
    Ok(CalibrationCurve { bins, rmse: mse.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ModelConfig;
    use proptest::prelude::*;

    fn model(seed: u64, hetero: bool) -> Model {
        let mut cfg = ModelConfig::mlp(2, vec![8, 8], 1);
        cfg.heteroscedastic = hetero;
        Model::new(&cfg, &mut RngStream::new(seed)).unwrap()
    }

    fn samples_from(means: &[Vec<f64>], vars: &[Vec<f64>]) -> PredictiveSamples {
        let t = |v: &Vec<f64>| Tensor::new(vec![v.len(), 1], v.clone()).unwrap();
        PredictiveSamples::from_samples(
            &means.iter().map(t).collect::<Vec<_>>(),
            &vars.iter().map(t).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn hand_cases() {
        let s = samples_from(&[vec![0.0], vec![2.0]], &[vec![0.0], vec![0.0]]);
        let d = decompose(&s).unwrap();
        assert_eq!(d.epistemic_var.data(), &[1.0]);
        assert_eq!(d.aleatoric_var.data(), &[0.0]);
        assert_eq!(d.predictive_var.data(), &[1.0]);

        let s = samples_from(&vec![vec![1.5]; 4], &vec![vec![0.7]; 4]);
        let d = decompose(&s).unwrap();
        assert_eq!(d.epistemic_var.data(), &[0.0]);
        assert!((d.aleatoric_var.data()[0] - 0.7).abs() < 1e-15);
        assert!((d.predictive_var.data()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn single_sample_is_refused() {
        let mut rng = RngStream::new(1);
        let s = mc_predict(&model(1, false), &Tensor::zeros(&[3, 2]), 1, &mut rng).unwrap();
        assert!(matches!(decompose(&s), Err(Error::Argument(_))));
        assert!(mc_predict(&model(1, false), &Tensor::zeros(&[3, 2]), 0, &mut rng).is_err());
    }

    #[test]
    fn five_samples_match_two_pass_oracle() {
        let mut rng = RngStream::new(9);
        let means: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.next_gaussian() * 3.0).collect()).collect();
        let vars: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.next_open01()).collect()).collect();
        let d = decompose(&samples_from(&means, &vars)).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = means.iter().map(|m| m[j]).collect();
            let mu = col.iter().sum::<f64>() / 5.0;
            let var = col.iter().map(|c| (c - mu).powi(2)).sum::<f64>() / 5.0;
            let alea = vars.iter().map(|v| v[j]).sum::<f64>() / 5.0;
            assert!((d.epistemic_var.data()[j] - var).abs() < 1e-12);
            assert!((d.aleatoric_var.data()[j] - alea).abs() < 1e-12);
            assert!((d.mean.data()[j] - mu).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_limit_has_no_epistemic_variance() {
        let mut m = model(2, false);
        for l in m.all_layers_mut() {
            if let Some(d) = l.dropout.as_mut() {
                d.p_logit = -20.0;
            }
        }
        let x = RngStream::new(3).gaussian(&[6, 2], 0.0, 1.0).unwrap();
        let s = mc_predict(&m, &x, 20, &mut RngStream::new(4)).unwrap();
        let d = decompose(&s).unwrap();
        assert!(d.epistemic_var.data().iter().all(|&v| v < 1e-24));
        let expected = (-m.log_tau).exp();
        assert!(d.aleatoric_var.data().iter().all(|&v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn heteroscedastic_variances_are_positive_and_vary() {
        let m = model(5, true);
        let x = RngStream::new(3).gaussian(&[6, 2], 0.0, 1.0).unwrap();
        let s = mc_predict(&m, &x, 4, &mut RngStream::new(4)).unwrap();
        assert!(s.variances.data().iter().all(|&v| v > 0.0));
        let first = s.variances.data()[0];
        assert!(s.variances.data().iter().any(|&v| v != first));
    }

    #[test]
    fn sample_mean_within_mc_standard_error() {
        let m = model(6, false);
        let x = RngStream::new(3).gaussian(&[5, 2], 0.0, 1.0).unwrap();
        let small = decompose(&mc_predict(&m, &x, 200, &mut RngStream::new(7)).unwrap()).unwrap();
        let big = decompose(&mc_predict(&m, &x, 10_000, &mut RngStream::new(8)).unwrap()).unwrap();
        for j in 0..5 {
            let bound = 3.0 * big.epistemic_var.data()[j].sqrt() / 200f64.sqrt();
            let gap = (small.mean.data()[j] - big.mean.data()[j]).abs();
            assert!(gap <= bound, "{j}: {gap} > {bound}");
        }
    }

    #[test]
    fn mc_predict_is_seed_stable() {
        let m = model(6, true);
        let x = RngStream::new(3).gaussian(&[5, 2], 0.0, 1.0).unwrap();
        let a = mc_predict(&m, &x, 16, &mut RngStream::new(7)).unwrap();
        let b = mc_predict(&m, &x, 16, &mut RngStream::new(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn denormalise_scales_means_and_variances() {
        let s = samples_from(&[vec![1.0], vec![-1.0]], &[vec![1.0], vec![4.0]]);
        let st = Standardizer { mean: vec![10.0], std: vec![2.0] };
        let d = s.denormalise(&st);
        assert_eq!(d.means.data(), &[12.0, 8.0]);
        assert_eq!(d.variances.data(), &[4.0, 16.0]);
    }

    #[test]
    fn classification_rows_sum_to_one_and_match_deterministic_limit() {
        let mut cfg = ModelConfig::mlp(4, vec![16], 5);
        cfg.p_init = crate::layers::PInit::Fixed(0.3);
        let mut m = Model::new(&cfg, &mut RngStream::new(2)).unwrap();
        let x = RngStream::new(3).gaussian(&[7, 4], 0.0, 1.0).unwrap();
        let probs = classification_predict(&m, &x, 30, &mut RngStream::new(4)).unwrap();
        for i in 0..7 {
            assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for l in m.all_layers_mut() {
            if let Some(d) = l.dropout.as_mut() {
                d.p_logit = -30.0;
            }
        }
        let probs = classification_predict(&m, &x, 10, &mut RngStream::new(4)).unwrap();
        let single = softmax(&m.predict(&x, &mut RngStream::new(5)).unwrap().mean);
        for (a, b) in probs.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn gaussian_case(b: usize, inflate: f64) -> (UncertaintyDecomposition, Tensor, Tensor) {
        let mut rng = RngStream::new(21);
        let mean = rng.gaussian(&[b, 1], 0.0, 2.0).unwrap();
        let var = Tensor::new(vec![b, 1], (0..b).map(|_| 0.1 + rng.next_open01()).collect()).unwrap();
        let y = Tensor::new(
            vec![b, 1],
            mean.data()
                .iter()
                .zip(var.data())
                .map(|(m, v)| m + v.sqrt() * rng.next_gaussian())
                .collect(),
        )
        .unwrap();
        let pred = var.scale(inflate * inflate);
        let d = UncertaintyDecomposition {
            mean: mean.clone(),
            epistemic_var: Tensor::zeros(&[b, 1]),
            aleatoric_var: pred.clone(),
            predictive_var: pred,
        };
        (d, mean, y)
    }

    #[test]
    fn self_consistent_targets_are_calibrated() {
        let (d, m, y) = gaussian_case(10_000, 1.0);
        let c = calibration_curve(&d, &m, &y, &default_levels(10)).unwrap();
        assert!(c.rmse < 0.02, "{}", c.rmse);
        assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), 10_000);
        assert_eq!(c.bins.last().unwrap().empirical, 1.0);
    }

    #[test]
    fn inflated_std_is_over_conservative() {
        let (d, m, y) = gaussian_case(10_000, 10.0);
        let levels = [0.2, 0.4, 0.6, 0.8];
        let c = calibration_curve(&d, &m, &y, &levels).unwrap();
        assert!(c.bins.iter().all(|b| b.empirical > 0.98), "{:?}", c.bins);
        assert_eq!(c.bins.len(), 5);
        assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), 10_000);
    }

    #[test]
    fn calibration_errors() {
        let (mut d, m, y) = gaussian_case(10, 1.0);
        assert!(calibration_curve(&d, &m, &y, &[0.5, 0.3]).is_err());
        assert!(calibration_curve(&d, &m, &y, &[0.0, 0.3]).is_err());
        d.predictive_var.data_mut()[4] = 0.0;
        assert!(matches!(
            calibration_curve(&d, &m, &y, &[0.5]),
            Err(Error::DegenerateInterval { index: 4 })
        ));
    }

    #[test]
    fn csv_exports() {
        let s = samples_from(&[vec![0.0, 1.0], vec![2.0, 1.0]], &[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let d = decompose(&s).unwrap();
        let x = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        let mut out = Vec::new();
        d.write_csv(&x, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "x,mean,epistemic_std,aleatoric_std,predictive_std\n-1,1,1,1,1.4142135623730951\n1,1,0,1,1\n"
        );
    }

    proptest! {
        #[test]
        fn additivity_and_permutation_invariance(
            vals in prop::collection::vec((-50.0f64..50.0, 0.0f64..10.0), 12),
            rot in 0usize..4,
        ) {
            let means: Vec<Vec<f64>> = vals.chunks(3).map(|c| c.iter().map(|v| v.0).collect()).collect();
            let vars: Vec<Vec<f64>> = vals.chunks(3).map(|c| c.iter().map(|v| v.1).collect()).collect();
            let d = decompose(&samples_from(&means, &vars)).unwrap();
            for j in 0..3 {
                let gap = d.predictive_var.data()[j] - (d.epistemic_var.data()[j] + d.aleatoric_var.data()[j]);
                prop_assert!(gap.abs() <= 1e-12);
                prop_assert!(d.epistemic_var.data()[j] >= 0.0 && d.aleatoric_var.data()[j] >= 0.0);
            }
            let mut pm = means.clone();
            let mut pv = vars.clone();
            pm.rotate_left(rot);
            pv.rotate_left(rot);
            pm.swap(0, 3);
            pv.swap(0, 3);
            let e = decompose(&samples_from(&pm, &pv)).unwrap();
            for j in 0..3 {
                let scale = 1.0 + d.epistemic_var.data()[j].abs();
                prop_assert!((d.epistemic_var.data()[j] - e.epistemic_var.data()[j]).abs() <= 1e-12 * scale);
                prop_assert!((d.aleatoric_var.data()[j] - e.aleatoric_var.data()[j]).abs() <= 1e-12 * scale);
            }
        }
    }
}
