use std::fmt::Write as _;

use crate::data::Targets;
use crate::error::Result;
use crate::experiments::{derive_seed, ExperimentSpec, OutDir};
use crate::layers::{Model, ModelConfig};
use crate::ndcore::RngStream;
use crate::objective::{ObjectiveConfig, PrecisionMode};
use crate::train::{grad_check, GradCheckReport};

pub const GRADCHECK_H: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckVariant {
    pub name: &'static str,
    pub seed: u64,
    pub rtol: f64,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub variants: Vec<GradcheckVariant>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.variants.iter().all(|v| v.report.passed())
    }
}

/// Finite-difference checks of the full objective for a dense-only model,
/// a Concrete-dropout model with MAP-EM precision and a heteroscedastic model.
pub fn run_gradcheck(spec: &ExperimentSpec) -> Result<GradcheckReport> {
    spec.validate()?;
    let mut out = OutDir::create(&spec.out_dir)?;
    let width = spec.widths[0];
    let (d_in, batch) = (3, spec.batch_size);
    let variants: [(&'static str, bool, PrecisionMode, f64); 3] = [
        ("dense", false, PrecisionMode::HomoscedasticMapem, 1e-6),
        ("concrete", true, PrecisionMode::HomoscedasticMapem, 1e-4),
        ("heteroscedastic", true, PrecisionMode::HeteroscedasticHead, 1e-4),
    ];
    let mut results = Vec::new();
    let mut csv = String::from("variant,seed,group,params,max_rel_err,max_abs_err,passed\n");
    for &seed in &spec.seeds {
        for (i, &(name, concrete, mode, rtol)) in variants.iter().enumerate() {
            let mut rng = RngStream::new(derive_seed(seed, 7, &[i as u64]));
            let mut cfg = ModelConfig::mlp(d_in, vec![width; spec.depth], 1);
            cfg.concrete = concrete;
            cfg.temperature = spec.temperature;
            cfg.heteroscedastic = mode == PrecisionMode::HeteroscedasticHead;
            let model = Model::new(&cfg, &mut rng)?;
            let x = rng.gaussian(&[batch, d_in], 0.0, 1.0)?;
            let y = Targets::Real(rng.gaussian(&[batch, 1], 0.0, 1.0)?);
            let obj = ObjectiveConfig::regression(10 * batch, spec.lengthscales[0], mode);
            let report = grad_check(&model, &x, &y, &obj, GRADCHECK_H, rtol, rng.next_u64())?;
            for g in &report.groups {
                let _ = writeln!(
                    csv,
                    "{name},{seed},{},{},{:e},{:e},{}",
                    g.name,
                    g.params,
                    g.max_rel_err,
                    g.max_abs_err,
                    g.max_rel_err < rtol
                );
            }
            results.push(GradcheckVariant { name, seed, rtol, report });
        }
    }
    out.write("gradcheck.csv", csv.as_bytes())?;
    out.finish(spec)?;
    Ok(GradcheckReport { variants: results })
}
