use std::fmt::Write as _;

use crate::error::Result;
use crate::experiments::synth::{predict_decomposed, synth_test_set, PURPOSE_PREDICT};
use crate::experiments::{derive_seed, train_synth_model, CellStatus, ExperimentSpec, OutDir};
use crate::ndcore::{RngStream, Tensor};
use crate::uncertainty::{calibration_curve, default_levels, CalibrationCurve};

const PURPOSE_SELF_TARGETS: u64 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateCell {
    pub lengthscale: f64,
    pub n: usize,
    pub seed: u64,
    pub status: CellStatus,
    /// Curve against held-out targets.
    pub model: Option<CalibrationCurve>,
    /// Curve against targets drawn from the model's own predictive Gaussians.
    pub self_consistent: Option<CalibrationCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateReport {
    pub cells: Vec<CalibrateCell>,
}

fn curve_csv(c: &CalibrationCurve) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    c.write_csv(&mut buf)?;
    Ok(buf)
}

/// Trains synthetic models and measures calibration of their centred
/// Gaussian predictive intervals at levels 0.1, 0.2, …, 1.0.
pub fn run_calibrate(spec: &ExperimentSpec) -> Result<CalibrateReport> {
    spec.validate()?;
    let mut out = OutDir::create(&spec.out_dir)?;
    let levels = default_levels(10);
    let mut cells = Vec::new();
    for &l in &spec.lengthscales {
        for &n in &spec.n_grid {
            for &seed in &spec.seeds {
                let m = match train_synth_model(spec, l, n, seed, None)? {
                    Ok(m) => m,
                    Err(status) => {
                        cells.push(CalibrateCell {
                            lengthscale: l,
                            n,
                            seed,
                            status,
                            model: None,
                            self_consistent: None,
                        });
                        continue;
                    }
                };
                let name = format!("l{l}_n{n}_s{seed}");
                out.write_trace(&format!("traces/calibrate_{name}.csv"), &m.trace)?;
                let test = synth_test_set(spec, seed)?;
                let d = predict_decomposed(&m, &test, spec.mc_samples, derive_seed(seed, PURPOSE_PREDICT, &[n as u64]))?;
                let model_curve = calibration_curve(&d, &d.mean, test.y.as_real()?, &levels)?;

                let mut rng = RngStream::new(derive_seed(seed, PURPOSE_SELF_TARGETS, &[n as u64]));
                let drawn: Vec<f64> = d
                    .mean
                    .data()
                    .iter()
                    .zip(d.predictive_var.data())
                    .map(|(m, v)| m + v.sqrt() * rng.next_gaussian())
                    .collect();
                let drawn = Tensor::new(d.mean.shape().to_vec(), drawn)?;
                let self_curve = calibration_curve(&d, &d.mean, &drawn, &levels)?;

                out.write(&format!("calibration/model_{name}.csv"), &curve_csv(&model_curve)?)?;
                out.write(&format!("calibration/self_{name}.csv"), &curve_csv(&self_curve)?)?;
                cells.push(CalibrateCell {
                    lengthscale: l,
                    n,
                    seed,
                    status: CellStatus::Ok,
                    model: Some(model_curve),
                    self_consistent: Some(self_curve),
                });
            }
        }
    }
    let mut s = String::from("lengthscale,n,seed,status,model_rmse,self_rmse\n");
    for c in &cells {
        let rmse = |c: &Option<CalibrationCurve>| c.as_ref().map_or(String::new(), |c| c.rmse.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.lengthscale,
            c.n,
            c.seed,
            c.status,
            rmse(&c.model),
            rmse(&c.self_consistent)
        );
    }
    out.write("calibration.csv", s.as_bytes())?;
    out.finish(spec)?;
    Ok(CalibrateReport { cells })
}
