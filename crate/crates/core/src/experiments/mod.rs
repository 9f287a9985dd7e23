//! Experiment harnesses behind the `cdrop` binary. Every run writes CSV
//! tables plus a `manifest.json` holding the resolved [`ExperimentSpec`];
//! rerunning from the manifest reproduces every output byte for byte.

mod calibrate;
mod gradcheck;
mod mnist;
mod regress;
mod synth;

pub use calibrate::{run_calibrate, CalibrateCell, CalibrateReport};
pub use gradcheck::{run_gradcheck, GradcheckReport, GradcheckVariant};
pub use mnist::{mnist_dir, run_mnist, MnistCell, MnistReport, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
pub use regress::{run_regress, RegressCell, RegressReport};
pub use synth::{run_synth, train_synth_model, SynthAggregate, SynthCell, SynthModel, SynthReport};

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::PInit;
use crate::ndcore::RngStream;
use crate::objective::PrecisionMode;
use crate::train::{TrainConfig, TrainTrace};

/// Environment variable naming the directory that holds the MNIST IDX files.
pub const DATA_DIR_ENV: &str = "CDROP_DATA_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Gradcheck,
    Synth,
    Regress,
    Mnist,
    Calibrate,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::Gradcheck => "gradcheck",
            Task::Synth => "synth",
            Task::Regress => "regress",
            Task::Mnist => "mnist",
            Task::Calibrate => "calibrate",
        };
        f.write_str(s)
    }
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub task: Task,
    pub seeds: Vec<u64>,
    /// Training-set sizes.
    pub n_grid: Vec<usize>,
    /// Hidden width grid; tasks without a width grid use the first entry.
    pub widths: Vec<usize>,
    /// Number of hidden layers.
    pub depth: usize,
    /// Epochs per cell; when absent, enough epochs to reach `steps`.
    pub epochs: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    /// Length-scale grid.
    pub lengthscales: Vec<f64>,
    pub temperature: f64,
    pub precision_mode: PrecisionMode,
    /// Initial drop probabilities to sweep; empty means the random default.
    pub p_inits: Vec<f64>,
    /// Held-out points for synthetic tasks, test images for MNIST.
    pub test_size: usize,
    /// Random train/test splits for CSV regression.
    pub splits: usize,
    pub test_fraction: f64,
    /// CSV file (regress) or IDX directory (mnist).
    pub data: Option<PathBuf>,
    /// Target column for CSV regression; the last column when absent.
    pub target: Option<String>,
    pub log_every: usize,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// Defaults for `task`.
    pub fn for_task(task: Task) -> Self {
        let base = Self {
            task,
            seeds: vec![0],
            n_grid: vec![10_000],
            widths: vec![64],
            depth: 3,
            epochs: None,
            steps: 10_000,
            batch_size: 128,
            learning_rate: 1e-3,
            mc_samples: 200,
            lengthscales: vec![1e-2],
            temperature: crate::layers::DEFAULT_TEMPERATURE,
            precision_mode: PrecisionMode::HeteroscedasticHead,
            p_inits: Vec::new(),
            test_size: 1000,
            splits: 20,
            test_fraction: 0.1,
            data: None,
            target: None,
            log_every: 10,
            out_dir: PathBuf::from("runs").join(task.to_string()),
        };
        match task {
            Task::Gradcheck => Self {
                widths: vec![8],
                depth: 2,
                batch_size: 4,
                precision_mode: PrecisionMode::HomoscedasticMapem,
                ..base
            },
            Task::Synth => Self {
                seeds: vec![0, 1, 2],
                n_grid: vec![10, 100, 1000, 10_000],
                ..base
            },
            Task::Regress => Self {
                widths: vec![50],
                depth: 2,
                precision_mode: PrecisionMode::HomoscedasticMapem,
                ..base
            },
            Task::Mnist => Self {
                widths: vec![128],
                steps: 4000,
                precision_mode: PrecisionMode::Fixed,
                test_size: 10_000,
                ..base
            },
            Task::Calibrate => Self {
                test_size: 10_000,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = [
            ("seeds", self.seeds.is_empty()),
            ("n-grid", self.n_grid.is_empty()),
            ("widths", self.widths.is_empty()),
            ("lengthscale", self.lengthscales.is_empty()),
        ];
        if let Some((name, _)) = nonempty.iter().find(|(_, empty)| *empty) {
            return Err(Error::Config(format!("{name} list is empty")));
        }
        if self.n_grid.contains(&0) || self.widths.contains(&0) {
            return Err(Error::Config("grid sizes and widths must be positive".into()));
        }
        if self.batch_size == 0 || self.mc_samples < 2 || self.log_every == 0 {
            return Err(Error::Config(
                "batch size and log interval must be positive and mc-samples at least 2".into(),
            ));
        }
        if self.epochs.is_none() && self.steps == 0 {
            return Err(Error::Config("either epochs or a positive step budget is required".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("learning rate and temperature must be positive".into()));
        }
        if self.lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("length-scales must be positive".into()));
        }
        if self.p_inits.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Config("initial drop probabilities must lie in (0, 1)".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Training configuration for a cell with `n` rows.
    pub fn train_config(&self, n: usize, seed: u64) -> TrainConfig {
        let mut tc = TrainConfig {
            batch_size: self.batch_size.min(n),
            learning_rate: self.learning_rate,
            seed,
            log_every: self.log_every,
            ..TrainConfig::default()
        };
        tc.epochs = self.epochs.unwrap_or_else(|| tc.epochs_for_steps(n, self.steps));
        tc
    }

    /// Initialisations to sweep, `None` standing for the random default.
    pub(crate) fn p_init_grid(&self) -> Vec<Option<f64>> {
        if self.p_inits.is_empty() {
            vec![None]
        } else {
            self.p_inits.iter().copied().map(Some).collect()
        }
    }
}

pub(crate) fn p_init_of(p: Option<f64>) -> PInit {
    p.map_or_else(PInit::default, PInit::Fixed)
}

pub(crate) fn p_init_label(p: Option<f64>) -> String {
    p.map_or_else(|| "default".to_string(), |p| p.to_string())
}

/// Deterministic sub-seed for one purpose within a cell.
pub(crate) fn derive_seed(seed: u64, purpose: u64, cell: &[u64]) -> u64 {
    let mut stream = purpose;
    for &c in cell {
        stream = stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ c;
    }
    RngStream::with_stream(seed, stream).next_u64()
}

/// Outcome of training one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Diverged { step: usize },
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellStatus::Ok => f.write_str("ok"),
            CellStatus::Diverged { step } => write!(f, "diverged@{step}"),
        }
    }
}

/// Collects output files under one directory and writes the manifest last.
pub(crate) struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    pub(crate) fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub(crate) fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, bytes)?;
        self.files.push(rel.to_string());
        Ok(())
    }

    pub(crate) fn write_trace(&mut self, rel: &str, trace: &TrainTrace) -> Result<()> {
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        self.write(rel, &buf)
    }

    pub(crate) fn finish(mut self, spec: &ExperimentSpec) -> Result<Vec<PathBuf>> {
        let manifest = Manifest {
            program: "cdrop".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            spec: spec.clone(),
            outputs: self.files.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.root.join(MANIFEST_FILE), text)?;
        self.files.push(MANIFEST_FILE.into());
        Ok(self.files.iter().map(|f| self.root.join(f)).collect())
    }
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub program: String,
    pub version: String,
    pub spec: ExperimentSpec,
    /// Output files relative to the run directory, in write order.
    pub outputs: Vec<String>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Report of any task.
#[derive(Debug, Clone)]
pub enum RunReport {
    Gradcheck(GradcheckReport),
    Synth(SynthReport),
    Regress(RegressReport),
    Mnist(MnistReport),
    Calibrate(CalibrateReport),
}

/// Runs the task named in `spec`, writing outputs to `spec.out_dir`.
pub fn run(spec: &ExperimentSpec) -> Result<RunReport> {
    spec.validate()?;
    Ok(match spec.task {
        Task::Gradcheck => RunReport::Gradcheck(run_gradcheck(spec)?),
        Task::Synth => RunReport::Synth(run_synth(spec)?),
        Task::Regress => RunReport::Regress(run_regress(spec)?),
        Task::Mnist => RunReport::Mnist(run_mnist(spec)?),
        Task::Calibrate => RunReport::Calibrate(run_calibrate(spec)?),
    })
}

/// Reruns the configuration stored in a manifest, optionally into another directory.
pub fn replay(manifest: &Path, out_dir: Option<&Path>) -> Result<RunReport> {
    let mut spec = read_manifest(manifest)?.spec;
    if let Some(dir) = out_dir {
        spec.out_dir = dir.to_path_buf();
    }
    run(&spec)
}

/// Joins floats with commas using shortest round-trip formatting.
pub(crate) fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Element-wise mean of equal-length vectors.
pub(crate) fn mean_vec(rows: &[&[f64]]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect()
}

pub(crate) fn p_headers(count: usize) -> String {
    (0..count).map(|i| format!("p_layer_{i}")).collect::<Vec<_>>().join(",")
}

/// Trains and maps divergence to a cell status; other errors propagate.
pub(crate) fn train_cell(
    model: crate::layers::Model,
    data: &crate::data::Dataset,
    obj: &crate::objective::ObjectiveConfig,
    tc: &TrainConfig,
) -> Result<std::result::Result<(crate::layers::Model, TrainTrace), CellStatus>> {
    match crate::train::train(model, data, obj, tc) {
        Ok(r) => Ok(Ok(r)),
        Err(Error::Training { step, .. }) => Ok(Err(CellStatus::Diverged { step })),
        Err(e) => Err(e),
    }
}
