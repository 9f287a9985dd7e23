use std::fmt::Write as _;

use crate::data::{load_csv, split, Normalisation};
use crate::error::{Error, Result};
use crate::experiments::{
    derive_seed, join, mean, mean_vec, p_headers, p_init_of, train_cell, CellStatus, ExperimentSpec, OutDir,
};
use crate::layers::{Model, ModelConfig};
use crate::ndcore::{RngStream, Tensor};
use crate::objective::ObjectiveConfig;
use crate::uncertainty::{mc_predict, PredictiveSamples};

const PURPOSE_SPLIT: u64 = 8;
const PURPOSE_INIT: u64 = 9;
const PURPOSE_TRAIN: u64 = 10;
const PURPOSE_PREDICT: u64 = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressCell {
    pub lengthscale: f64,
    pub seed: u64,
    pub split: usize,
    pub status: CellStatus,
    /// Test RMSE of the MC predictive mean, in target units.
    pub rmse: f64,
    /// Test negative log predictive density per point, in target units.
    pub nll: f64,
    /// Fitted observation precision in target units.
    pub tau: f64,
    pub ps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressReport {
    pub cells: Vec<RegressCell>,
}

impl RegressReport {
    pub fn mean_rmse(&self) -> f64 {
        mean(&self.ok().map(|c| c.rmse).collect::<Vec<_>>())
    }

    pub fn mean_nll(&self) -> f64 {
        mean(&self.ok().map(|c| c.nll).collect::<Vec<_>>())
    }

    fn ok(&self) -> impl Iterator<Item = &RegressCell> {
        self.cells.iter().filter(|c| c.status == CellStatus::Ok)
    }
}

/// `−mean_i log( (1/S) Σ_s N(y_i; μ_si, σ²_si) )`.
pub(crate) fn mc_gaussian_nll(samples: &PredictiveSamples, y: &Tensor) -> f64 {
    let (s, per) = (samples.samples(), samples.batch() * samples.outputs());
    let means = samples.means.data();
    let vars = samples.variances.data();
    let mut total = 0.0;
    let mut logs = vec![0.0; s];
    for (j, &yj) in y.data().iter().enumerate() {
        for (k, l) in logs.iter_mut().enumerate() {
            let (m, v) = (means[k * per + j], vars[k * per + j]);
            *l = -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (yj - m) * (yj - m) / v);
        }
        let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = hi + logs.iter().map(|l| (l - hi).exp()).sum::<f64>().ln();
        total -= lse - (s as f64).ln();
    }
    total / y.len() as f64
}

/// Random train/test splits of a CSV table; trains on standardised data and
/// reports denormalised test RMSE and log predictive density per split.
pub fn run_regress(spec: &ExperimentSpec) -> Result<RegressReport> {
    spec.validate()?;
    let path = spec
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("regress needs --data <csv file>".into()))?;
    let data = load_csv(path, spec.target.as_deref(), b',')?;
    let mut out = OutDir::create(&spec.out_dir)?;
    let fractions = [1.0 - spec.test_fraction, 0.0, spec.test_fraction];
    let mut cells = Vec::new();
    for &l in &spec.lengthscales {
        for &seed in &spec.seeds {
            for i in 0..spec.splits {
                let id = i as u64;
                let (train, _, test) = split(&data, fractions, derive_seed(seed, PURPOSE_SPLIT, &[id]))?;
                let norm = Normalisation::fit(&train, true);
                let train_n = norm.apply(&train);
                let mut cfg = ModelConfig::mlp(data.x.cols(), vec![spec.widths[0]; spec.depth], 1);
                cfg.temperature = spec.temperature;
                cfg.p_init = p_init_of(spec.p_inits.first().copied());
                let model = Model::new(&cfg, &mut RngStream::new(derive_seed(seed, PURPOSE_INIT, &[id])))?;
                let obj = ObjectiveConfig::regression(train.len(), l, spec.precision_mode);
                let tc = spec.train_config(train.len(), derive_seed(seed, PURPOSE_TRAIN, &[id]));
                let (model, trace) = match train_cell(model, &train_n, &obj, &tc)? {
                    Ok(r) => r,
                    Err(status) => {
                        cells.push(RegressCell {
                            lengthscale: l,
                            seed,
                            split: i,
                            status,
                            rmse: f64::NAN,
                            nll: f64::NAN,
                            tau: f64::NAN,
                            ps: Vec::new(),
                        });
                        continue;
                    }
                };
                out.write_trace(&format!("traces/regress_l{l}_s{seed}_split{i}.csv"), &trace)?;
                let target_scale = norm.targets.as_ref().map_or(1.0, |t| t.std[0]);
                let mut rng = RngStream::new(derive_seed(seed, PURPOSE_PREDICT, &[id]));
                let mut samples = mc_predict(&model, &norm.features.apply(&test.x), spec.mc_samples, &mut rng)?;
                if let Some(t) = &norm.targets {
                    samples = samples.denormalise(t);
                }
                let y = test.y.as_real()?;
                let s = samples.samples();
                let per = y.len();
                let mut pred = vec![0.0; per];
                for k in 0..s {
                    for (p, m) in pred.iter_mut().zip(&samples.means.data()[k * per..(k + 1) * per]) {
                        *p += m / s as f64;
                    }
                }
                let sq: f64 = pred.iter().zip(y.data()).map(|(p, t)| (p - t) * (p - t)).sum();
                cells.push(RegressCell {
                    lengthscale: l,
                    seed,
                    split: i,
                    status: CellStatus::Ok,
                    rmse: (sq / per as f64).sqrt(),
                    nll: mc_gaussian_nll(&samples, y),
                    tau: model.log_tau.exp() / (target_scale * target_scale),
                    ps: trace.converged_ps(),
                });
            }
        }
    }
    let layers = spec.depth + 1;
    let mut s = format!("lengthscale,seed,split,status,rmse,nll,tau,{}\n", p_headers(layers));
    for c in &cells {
        let metrics = if c.ps.is_empty() {
            ",".repeat(2 + layers)
        } else {
            format!("{},{}", join(&[c.rmse, c.nll, c.tau]), join(&c.ps))
        };
        let _ = writeln!(s, "{},{},{},{},{}", c.lengthscale, c.seed, c.split, c.status, metrics);
    }
    for &l in &spec.lengthscales {
        let ok: Vec<&RegressCell> = cells
            .iter()
            .filter(|c| c.lengthscale == l && c.status == CellStatus::Ok)
            .collect();
        let m = |f: fn(&RegressCell) -> f64| mean(&ok.iter().map(|c| f(c)).collect::<Vec<_>>());
        let ps = mean_vec(&ok.iter().map(|c| c.ps.as_slice()).collect::<Vec<_>>());
        let _ = writeln!(
            s,
            "{l},mean,mean,ok={},{},{}",
            ok.len(),
            join(&[m(|c| c.rmse), m(|c| c.nll), m(|c| c.tau)]),
            join(&ps)
        );
    }
    out.write("regress.csv", s.as_bytes())?;
    out.finish(spec)?;
    Ok(RegressReport { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mc_nll_of_single_gaussian_matches_closed_form() {
        let m = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let v = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let s = PredictiveSamples::from_samples(&[m.clone(), m], &[v.clone(), v]).unwrap();
        let y = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        let expected = 0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() + 0.25;
        assert!((mc_gaussian_nll(&s, &y) - expected).abs() < 1e-12);
    }
}
