use std::collections::BTreeMap;

use crate::data::Targets;
use crate::error::Result;
use crate::layers::{Model, NoiseSource};
use crate::ndcore::{RngStream, Tensor};
use crate::objective::{elbo_loss, elbo_loss_and_grad, ObjectiveConfig};

/// Worst-case agreement for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub params: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub h: f64,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GroupReport> {
        self.groups.iter().filter(|g| g.max_rel_err >= self.rtol).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// Largest error within groups whose name contains `pattern`.
    pub fn max_rel_err_matching(&self, pattern: &str) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.name.contains(pattern))
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,params,max_rel_err,max_abs_err,passed\n");
        for g in &self.groups {
            s.push_str(&format!(
                "{},{},{:e},{:e},{}\n",
                g.name,
                g.params,
                g.max_rel_err,
                g.max_abs_err,
                g.max_rel_err < self.rtol
            ));
        }
        s
    }
}

/// Relative error with a floor on the denominator so that parameters with
/// an exactly-zero gradient (dead ReLU units) compare on absolute error.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of the objective with central differences.
///
/// One mask realisation is drawn from `seed` and replayed for every
/// evaluation, so both sides differentiate the same sampled loss.
pub fn grad_check(
    model: &Model,
    x: &Tensor,
    targets: &Targets,
    obj: &ObjectiveConfig,
    h: f64,
    rtol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut m = model.clone();
    obj.configure(&mut m);
    let mut rng = RngStream::new(seed);
    m.forward(x, NoiseSource::Sample(&mut rng))?;
    let noise = m.recorded_noise();

    let (_, grads) = elbo_loss_and_grad(&mut m, x, targets, obj, NoiseSource::Replay(&noise))?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .slices(&m)
        .into_iter()
        .map(|(n, s)| (n, s.to_vec()))
        .collect();

    let mut groups = BTreeMap::new();
    let mut order = Vec::new();
    for (slot, (name, values)) in analytic.iter().enumerate() {
        let mut worst = (0.0f64, 0.0f64);
        for (k, &a) in values.iter().enumerate() {
            let original = m.params_mut()[slot].1[k];
            m.params_mut()[slot].1[k] = original + h;
            let plus = elbo_loss(&mut m, x, targets, obj, NoiseSource::Replay(&noise))?.loss;
            m.params_mut()[slot].1[k] = original - h;
            let minus = elbo_loss(&mut m, x, targets, obj, NoiseSource::Replay(&noise))?.loss;
            m.params_mut()[slot].1[k] = original;
            let numeric = (plus - minus) / (2.0 * h);
            worst.0 = worst.0.max(relative_error(a, numeric));
            worst.1 = worst.1.max((a - numeric).abs());
        }
        order.push(name.clone());
        groups.insert(name.clone(), (values.len(), worst));
    }
    let groups = order
        .into_iter()
        .map(|name| {
            let (params, (rel, abs)) = groups[&name];
            GroupReport {
                name,
                params,
                max_rel_err: rel,
                max_abs_err: abs,
            }
        })
        .collect();
    Ok(GradCheckReport { groups, h, rtol })
}
