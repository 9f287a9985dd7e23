use std::fmt::Write as _;

use crate::data::{synth_generate, Dataset, Normalisation, SplitTag};
use crate::error::Result;
use crate::experiments::{
    derive_seed, join, mean, mean_vec, p_headers, p_init_label, p_init_of, train_cell, CellStatus, ExperimentSpec,
    OutDir,
};
use crate::layers::{Model, ModelConfig};
use crate::ndcore::RngStream;
use crate::objective::{ObjectiveConfig, PrecisionMode};
use crate::train::TrainTrace;
use crate::uncertainty::{calibration_curve, decompose, default_levels, mc_predict, UncertaintyDecomposition};

pub(crate) const X_RANGE: (f64, f64) = (-1.0, 1.0);

const PURPOSE_TRAIN_DATA: u64 = 1;
const PURPOSE_TEST_DATA: u64 = 2;
const PURPOSE_INIT: u64 = 3;
const PURPOSE_TRAIN: u64 = 4;
pub(crate) const PURPOSE_PREDICT: u64 = 5;

/// A trained synthetic-task model with the statistics needed to map its
/// predictions back to data units.
#[derive(Debug, Clone)]
pub struct SynthModel {
    pub model: Model,
    pub norm: Normalisation,
    pub trace: TrainTrace,
}

/// Held-out points from the generating distribution, sorted by `x`.
pub(crate) fn synth_test_set(spec: &ExperimentSpec, seed: u64) -> Result<Dataset> {
    let d = synth_generate(spec.test_size.max(1), derive_seed(seed, PURPOSE_TEST_DATA, &[]), X_RANGE)?;
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d.x.data()[a].total_cmp(&d.x.data()[b]));
    Ok(d.subset(&order, SplitTag::Test))
}

/// Trains one synthetic cell. Divergence is returned as a status.
pub fn train_synth_model(
    spec: &ExperimentSpec,
    lengthscale: f64,
    n: usize,
    seed: u64,
    p_init: Option<f64>,
) -> Result<std::result::Result<SynthModel, CellStatus>> {
    let n64 = n as u64;
    let train = synth_generate(n, derive_seed(seed, PURPOSE_TRAIN_DATA, &[n64]), X_RANGE)?;
    let norm = Normalisation::fit(&train, true);
    let train = norm.apply(&train);

    let mut cfg = ModelConfig::mlp(1, vec![spec.widths[0]; spec.depth], 1);
    cfg.temperature = spec.temperature;
    cfg.p_init = p_init_of(p_init);
    cfg.heteroscedastic = spec.precision_mode == PrecisionMode::HeteroscedasticHead;
    let model = Model::new(&cfg, &mut RngStream::new(derive_seed(seed, PURPOSE_INIT, &[n64])))?;

    let obj = ObjectiveConfig::regression(n, lengthscale, spec.precision_mode);
    let tc = spec.train_config(n, derive_seed(seed, PURPOSE_TRAIN, &[n64]));
    Ok(train_cell(model, &train, &obj, &tc)?.map(|(model, trace)| SynthModel { model, norm, trace }))
}

/// Monte-Carlo decomposition in data units.
pub(crate) fn predict_decomposed(
    m: &SynthModel,
    test: &Dataset,
    samples: usize,
    seed: u64,
) -> Result<UncertaintyDecomposition> {
    let x = m.norm.features.apply(&test.x);
    let mut rng = RngStream::new(seed);
    let mut s = mc_predict(&m.model, &x, samples, &mut rng)?;
    if let Some(t) = &m.norm.targets {
        s = s.denormalise(t);
    }
    decompose(&s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCell {
    pub lengthscale: f64,
    pub n: usize,
    pub seed: u64,
    pub p_init: Option<f64>,
    pub status: CellStatus,
    /// Test-set averages of the per-point standard deviations.
    pub epistemic_std: f64,
    pub aleatoric_std: f64,
    pub predictive_std: f64,
    /// Largest `|predictive − (epistemic + aleatoric)|` over test points.
    pub max_additivity_gap: f64,
    pub test_rmse: f64,
    pub calibration_rmse: f64,
    /// Converged drop probability per wrapped layer, variance head last.
    pub ps: Vec<f64>,
    pub mean_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthAggregate {
    pub lengthscale: f64,
    pub n: usize,
    pub p_init: Option<f64>,
    pub cells_ok: usize,
    pub epistemic_std: f64,
    pub aleatoric_std: f64,
    pub predictive_std: f64,
    pub max_additivity_gap: f64,
    pub test_rmse: f64,
    pub calibration_rmse: f64,
    pub ps: Vec<f64>,
    pub mean_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthReport {
    pub cells: Vec<SynthCell>,
    pub aggregates: Vec<SynthAggregate>,
}

impl SynthReport {
    pub fn aggregate(&self, n: usize, p_init: Option<f64>) -> Option<&SynthAggregate> {
        self.aggregates.iter().find(|a| a.n == n && a.p_init == p_init)
    }
}

fn cell_name(l: f64, n: usize, seed: u64, p_init: Option<f64>) -> String {
    let mut s = format!("l{l}_n{n}_s{seed}");
    if let Some(p) = p_init {
        let _ = write!(s, "_p{p}");
    }
    s
}

fn synth_cell(spec: &ExperimentSpec, out: &mut OutDir, l: f64, n: usize, seed: u64, p_init: Option<f64>) -> Result<SynthCell> {
    let failed = |status| SynthCell {
        lengthscale: l,
        n,
        seed,
        p_init,
        status,
        epistemic_std: f64::NAN,
        aleatoric_std: f64::NAN,
        predictive_std: f64::NAN,
        max_additivity_gap: f64::NAN,
        test_rmse: f64::NAN,
        calibration_rmse: f64::NAN,
        ps: Vec::new(),
        mean_p: f64::NAN,
    };
    let m = match train_synth_model(spec, l, n, seed, p_init)? {
        Ok(m) => m,
        Err(status) => return Ok(failed(status)),
    };
    let name = cell_name(l, n, seed, p_init);
    out.write_trace(&format!("traces/synth_{name}.csv"), &m.trace)?;

    let test = synth_test_set(spec, seed)?;
    let d = predict_decomposed(&m, &test, spec.mc_samples, derive_seed(seed, PURPOSE_PREDICT, &[n as u64]))?;
    let mut buf = Vec::new();
    d.write_csv(&test.x, &mut buf)?;
    out.write(&format!("decomposition/synth_{name}.csv"), &buf)?;

    let y = test.y.as_real()?;
    let gap = d
        .predictive_var
        .data()
        .iter()
        .zip(d.epistemic_var.data())
        .zip(d.aleatoric_var.data())
        .map(|((p, e), a)| (p - (e + a)).abs())
        .fold(0.0, f64::max);
    let rmse = (d.mean.sub(y)?.sum_squares() / y.len() as f64).sqrt();
    let cal = calibration_curve(&d, &d.mean, y, &default_levels(10))?;
    let ps = m.trace.converged_ps();
    Ok(SynthCell {
        lengthscale: l,
        n,
        seed,
        p_init,
        status: CellStatus::Ok,
        epistemic_std: d.epistemic_std().mean(),
        aleatoric_std: d.aleatoric_std().mean(),
        predictive_std: d.predictive_std().mean(),
        max_additivity_gap: gap,
        test_rmse: rmse,
        calibration_rmse: cal.rmse,
        mean_p: mean(&ps),
        ps,
    })
}

fn aggregate(cells: &[&SynthCell]) -> SynthAggregate {
    let ok: Vec<&&SynthCell> = cells.iter().filter(|c| c.status == CellStatus::Ok).collect();
    let avg = |f: fn(&SynthCell) -> f64| mean(&ok.iter().map(|c| f(c)).collect::<Vec<_>>());
    let ps = mean_vec(&ok.iter().map(|c| c.ps.as_slice()).collect::<Vec<_>>());
    SynthAggregate {
        lengthscale: cells[0].lengthscale,
        n: cells[0].n,
        p_init: cells[0].p_init,
        cells_ok: ok.len(),
        epistemic_std: avg(|c| c.epistemic_std),
        aleatoric_std: avg(|c| c.aleatoric_std),
        predictive_std: avg(|c| c.predictive_std),
        max_additivity_gap: ok.iter().map(|c| c.max_additivity_gap).fold(0.0, f64::max),
        test_rmse: avg(|c| c.test_rmse),
        calibration_rmse: avg(|c| c.calibration_rmse),
        mean_p: mean(&ps),
        ps,
    }
}

fn layer_count(spec: &ExperimentSpec) -> usize {
    spec.depth + 1 + usize::from(spec.precision_mode == PrecisionMode::HeteroscedasticHead)
}

fn render(spec: &ExperimentSpec, report: &SynthReport) -> String {
    let layers = layer_count(spec);
    let mut s = format!(
        "lengthscale,n,seed,p_init,status,epistemic_std,aleatoric_std,predictive_std,max_additivity_gap,test_rmse,calibration_rmse,mean_p,{}\n",
        p_headers(layers)
    );
    let metrics = |v: [f64; 7], ps: &[f64]| {
        if ps.is_empty() {
            ",".repeat(6 + layers)
        } else {
            format!("{},{}", join(&v), join(ps))
        }
    };
    for c in &report.cells {
        let v = [
            c.epistemic_std,
            c.aleatoric_std,
            c.predictive_std,
            c.max_additivity_gap,
            c.test_rmse,
            c.calibration_rmse,
            c.mean_p,
        ];
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.lengthscale,
            c.n,
            c.seed,
            p_init_label(c.p_init),
            c.status,
            metrics(v, &c.ps)
        );
    }
    for a in &report.aggregates {
        let v = [
            a.epistemic_std,
            a.aleatoric_std,
            a.predictive_std,
            a.max_additivity_gap,
            a.test_rmse,
            a.calibration_rmse,
            a.mean_p,
        ];
        let _ = writeln!(
            s,
            "{},{},mean,{},ok={},{}",
            a.lengthscale,
            a.n,
            p_init_label(a.p_init),
            a.cells_ok,
            metrics(v, &a.ps)
        );
    }
    s
}

/// Trains every (length-scale, N, initialisation, seed) cell and evaluates
/// the uncertainty decomposition on held-out data from the same
/// distribution. Diverged cells are recorded and skipped.
pub fn run_synth(spec: &ExperimentSpec) -> Result<SynthReport> {
    spec.validate()?;
    let mut out = OutDir::create(&spec.out_dir)?;
    let mut cells = Vec::new();
    for &l in &spec.lengthscales {
        for &n in &spec.n_grid {
            for p_init in spec.p_init_grid() {
                for &seed in &spec.seeds {
                    cells.push(synth_cell(spec, &mut out, l, n, seed, p_init)?);
                }
            }
        }
    }
    let mut aggregates = Vec::new();
    for &l in &spec.lengthscales {
        for &n in &spec.n_grid {
            for p_init in spec.p_init_grid() {
                let group: Vec<&SynthCell> = cells
                    .iter()
                    .filter(|c| c.lengthscale == l && c.n == n && c.p_init == p_init)
                    .collect();
                aggregates.push(aggregate(&group));
            }
        }
    }
    let report = SynthReport { cells, aggregates };
    out.write("synth.csv", render(spec, &report).as_bytes())?;
    out.finish(spec)?;
    Ok(report)
}
