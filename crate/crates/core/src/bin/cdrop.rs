//! Experiment runner. Each run writes CSV tables and a `manifest.json`
//! into `--out-dir`; `--manifest` reruns a recorded configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use concrete_dropout::experiments::{self, ExperimentSpec, RunReport, Task, DATA_DIR_ENV};
use concrete_dropout::objective::PrecisionMode;
use concrete_dropout::{Error, ErrorClass};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Gradcheck,
    Synth,
    Regress,
    Mnist,
    Calibrate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Mapem,
    Heteroscedastic,
    Fixed,
}

#[derive(Debug, Parser)]
#[command(name = "cdrop", version, about = "Concrete dropout experiments")]
struct Cli {
    #[arg(long, value_enum, required_unless_present = "manifest")]
    task: Option<TaskArg>,
    /// Rerun the configuration recorded in a manifest.
    #[arg(long, conflicts_with = "task")]
    manifest: Option<PathBuf>,
    #[arg(long = "seeds", visible_alias = "seed", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Step budget per cell, used when --epochs is absent.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// One or more length-scales; several values run a grid.
    #[arg(long, value_delimiter = ',')]
    lengthscale: Option<Vec<f64>>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum)]
    precision_mode: Option<PrecisionArg>,
    /// Initial drop probabilities to sweep.
    #[arg(long, value_delimiter = ',')]
    p_init: Option<Vec<f64>>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    /// CSV file for regress, IDX directory for mnist.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Cli {
    fn spec(self) -> ExperimentSpec {
        let task = match self.task.expect("clap enforces --task without --manifest") {
            TaskArg::Gradcheck => Task::Gradcheck,
            TaskArg::Synth => Task::Synth,
            TaskArg::Regress => Task::Regress,
            TaskArg::Mnist => Task::Mnist,
            TaskArg::Calibrate => Task::Calibrate,
        };
        let mut s = ExperimentSpec::for_task(task);
        macro_rules! set {
            ($($field:ident <- $arg:expr),* $(,)?) => {
                $(if let Some(v) = $arg { s.$field = v; })*
            };
        }
        set!(
            seeds <- self.seeds,
            n_grid <- self.n_grid,
            widths <- self.widths,
            depth <- self.depth,
            steps <- self.steps,
            batch_size <- self.batch,
            learning_rate <- self.lr,
            mc_samples <- self.mc_samples,
            lengthscales <- self.lengthscale,
            temperature <- self.temperature,
            p_inits <- self.p_init,
            test_size <- self.test_size,
            splits <- self.splits,
            log_every <- self.log_every,
            out_dir <- self.out_dir,
        );
        s.epochs = self.epochs.or(s.epochs);
        s.target = self.target.or(s.target);
        if let Some(p) = self.precision_mode {
            s.precision_mode = match p {
                PrecisionArg::Mapem => PrecisionMode::HomoscedasticMapem,
                PrecisionArg::Heteroscedastic => PrecisionMode::HeteroscedasticHead,
                PrecisionArg::Fixed => PrecisionMode::Fixed,
            };
        }
        s.data = self.data.or(s.data);
        if s.data.is_none() && task == Task::Mnist {
            s.data = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        }
        s
    }
}

fn summarise(report: &RunReport) {
    match report {
        RunReport::Gradcheck(r) => {
            for v in &r.variants {
                println!(
                    "gradcheck {:<16} seed {} max rel err {:.3e} ({})",
                    v.name,
                    v.seed,
                    v.report.max_rel_err(),
                    if v.report.passed() { "pass" } else { "FAIL" }
                );
            }
        }
        RunReport::Synth(r) => {
            for a in &r.aggregates {
                println!(
                    "synth l={} N={:<6} epistemic {:.4} aleatoric {:.4} predictive {:.4} mean p {:.4} ps {:?}",
                    a.lengthscale, a.n, a.epistemic_std, a.aleatoric_std, a.predictive_std, a.mean_p, a.ps
                );
            }
        }
        RunReport::Regress(r) => {
            println!("regress splits {} rmse {:.4} nll {:.4}", r.cells.len(), r.mean_rmse(), r.mean_nll());
        }
        RunReport::Mnist(r) => {
            for c in &r.cells {
                println!(
                    "mnist l={} N={} width {} seed {} {} accuracy {:.4} ps {:?}",
                    c.lengthscale, c.n, c.width, c.seed, c.status, c.accuracy, c.ps
                );
            }
        }
        RunReport::Calibrate(r) => {
            for c in &r.cells {
                let rmse = |c: &Option<_>| c.as_ref().map_or(f64::NAN, |c: &concrete_dropout::uncertainty::CalibrationCurve| c.rmse);
                println!(
                    "calibrate N={} seed {} {} model rmse {:.4} self rmse {:.4}",
                    c.n,
                    c.seed,
                    c.status,
                    rmse(&c.model),
                    rmse(&c.self_consistent)
                );
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(ErrorClass::Argument as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.manifest.clone() {
        Some(path) => experiments::replay(&path, cli.out_dir.as_deref()),
        None => experiments::run(&cli.spec()),
    };
    match result {
        Ok(report) => {
            summarise(&report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.class() as i32 as u8
}
