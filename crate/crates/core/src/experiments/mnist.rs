use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{load_idx, Dataset, Targets};
use crate::error::{Error, Result};
use crate::experiments::{
    derive_seed, join, mean, p_headers, p_init_label, p_init_of, train_cell, CellStatus, ExperimentSpec, OutDir,
    DATA_DIR_ENV,
};
use crate::layers::{Model, ModelConfig};
use crate::ndcore::RngStream;
use crate::objective::ObjectiveConfig;
use crate::uncertainty::{argmax_rows, classification_predict};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

const PURPOSE_INIT: u64 = 12;
const PURPOSE_TRAIN: u64 = 13;
const PURPOSE_PREDICT: u64 = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct MnistCell {
    pub lengthscale: f64,
    pub n: usize,
    pub width: usize,
    pub seed: u64,
    pub p_init: Option<f64>,
    pub status: CellStatus,
    pub accuracy: f64,
    /// Mean negative log of the MC-averaged probability of the true class.
    pub nll: f64,
    /// Converged drop probability per wrapped layer, input layer first.
    pub ps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnistReport {
    pub cells: Vec<MnistCell>,
}

/// Directory holding the IDX files: `spec.data`, else the environment variable.
pub fn mnist_dir(spec: &ExperimentSpec) -> Result<PathBuf> {
    spec.data
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::Config(format!("mnist needs --data <dir> or {DATA_DIR_ENV}")))
}

fn labels(d: &Dataset) -> &[usize] {
    match &d.y {
        Targets::Labels { labels, .. } => labels,
        Targets::Real(_) => &[],
    }
}

/// Trains MLPs on the first `n` training images for every (length-scale,
/// N, width, initialisation, seed) cell and scores MC-averaged predictions
/// on the first `test_size` test images.
pub fn run_mnist(spec: &ExperimentSpec) -> Result<MnistReport> {
    spec.validate()?;
    let dir = mnist_dir(spec)?;
    let n_max = *spec.n_grid.iter().max().unwrap_or(&0);
    let full = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS), Some(n_max))?;
    if full.len() < n_max {
        return Err(Error::Data(format!(
            "requested {n_max} training images but only {} are available",
            full.len()
        )));
    }
    let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS), Some(spec.test_size.max(1)))?;
    let mut out = OutDir::create(&spec.out_dir)?;
    let mut cells = Vec::new();
    for &l in &spec.lengthscales {
        for &n in &spec.n_grid {
            let idx: Vec<usize> = (0..n).collect();
            let train = full.subset(&idx, crate::data::SplitTag::Train);
            for &width in &spec.widths {
                for p_init in spec.p_init_grid() {
                    for &seed in &spec.seeds {
                        let cell_id = [n as u64, width as u64];
                        let mut cfg = ModelConfig::mlp(train.x.cols(), vec![width; spec.depth], 10);
                        cfg.temperature = spec.temperature;
                        cfg.p_init = p_init_of(p_init);
                        let model = Model::new(&cfg, &mut RngStream::new(derive_seed(seed, PURPOSE_INIT, &cell_id)))?;
                        let obj = ObjectiveConfig::classification(n, l);
                        let tc = spec.train_config(n, derive_seed(seed, PURPOSE_TRAIN, &cell_id));
                        let mut cell = MnistCell {
                            lengthscale: l,
                            n,
                            width,
                            seed,
                            p_init,
                            status: CellStatus::Ok,
                            accuracy: f64::NAN,
                            nll: f64::NAN,
                            ps: Vec::new(),
                        };
                        let (model, trace) = match train_cell(model, &train, &obj, &tc)? {
                            Ok(r) => r,
                            Err(status) => {
                                cell.status = status;
                                cells.push(cell);
                                continue;
                            }
                        };
                        let mut name = format!("l{l}_n{n}_w{width}_s{seed}");
                        if let Some(p) = p_init {
                            let _ = write!(name, "_p{p}");
                        }
                        out.write_trace(&format!("traces/mnist_{name}.csv"), &trace)?;
                        let mut rng = RngStream::new(derive_seed(seed, PURPOSE_PREDICT, &cell_id));
                        let probs = classification_predict(&model, &test.x, spec.mc_samples, &mut rng)?;
                        let truth = labels(&test);
                        let hits = argmax_rows(&probs).iter().zip(truth).filter(|(a, b)| a == b).count();
                        cell.accuracy = hits as f64 / truth.len() as f64;
                        cell.nll = mean(
                            &truth
                                .iter()
                                .enumerate()
                                .map(|(i, &c)| -probs.get2(i, c).max(f64::MIN_POSITIVE).ln())
                                .collect::<Vec<_>>(),
                        );
                        cell.ps = trace.converged_ps();
                        cells.push(cell);
                    }
                }
            }
        }
    }
    let layers = spec.depth + 1;
    let mut s = format!("lengthscale,n,width,seed,p_init,status,accuracy,nll,{}\n", p_headers(layers));
    for c in &cells {
        let metrics = if c.ps.is_empty() {
            ",".repeat(1 + layers)
        } else {
            format!("{},{}", join(&[c.accuracy, c.nll]), join(&c.ps))
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.lengthscale,
            c.n,
            c.width,
            c.seed,
            p_init_label(c.p_init),
            c.status,
            metrics
        );
    }
    out.write("mnist.csv", s.as_bytes())?;
    out.finish(spec)?;
    Ok(MnistReport { cells })
}
