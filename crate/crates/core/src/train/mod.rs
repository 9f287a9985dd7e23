//! Minibatch training of all variational parameters, MAP-EM updates of the
//! global precision, training traces and finite-difference gradient checks.

mod gradcheck;
mod optim;

pub use gradcheck::{grad_check, GradCheckReport, GroupReport};
pub use optim::{adam_step, sgd_step, AdamParams, AdamSlot, Optimiser, OptimiserKind};

use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Model, NoiseSource};
use crate::ndcore::{RngStream, Tensor};
use crate::objective::{
    elbo_loss_and_grad, mapem_tau_converge, mapem_tau_step, regulariser_with_grad, ObjectiveConfig,
    PrecisionMode,
};

/// Alternation between variational updates and precision updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEmSchedule {
    /// Gradient steps on `log τ` after every epoch.
    pub tau_steps: usize,
    pub tau_lr: f64,
    /// Mask samples used to estimate the expected squared residual.
    pub residual_samples: usize,
    /// Run the last M-step to convergence.
    pub final_converge: bool,
    pub final_residual_samples: usize,
}

impl Default for MapEmSchedule {
    fn default() -> Self {
        Self {
            tau_steps: 10,
            tau_lr: 0.5,
            residual_samples: 1,
            final_converge: true,
            final_residual_samples: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimiser: OptimiserKind,
    pub adam: AdamParams,
    pub log_every: usize,
    pub mapem: MapEmSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            optimiser: OptimiserKind::Adam,
            adam: AdamParams::default(),
            log_every: 10,
            mapem: MapEmSchedule::default(),
        }
    }
}

impl TrainConfig {
    /// Epoch count giving at least `steps` optimiser steps on `n` rows.
    pub fn epochs_for_steps(&self, n: usize, steps: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size.min(n).max(1));
        steps.div_ceil(per_epoch).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub ps: Vec<f64>,
    pub log_tau: f64,
}

/// Logged training history.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub total_steps: usize,
    pub wall_clock: Duration,
}

impl TrainTrace {
    /// Per-layer drop probabilities averaged over the last 5% of logged rows.
    pub fn converged_ps(&self) -> Vec<f64> {
        let Some(last) = self.rows.last() else {
            return Vec::new();
        };
        let k = self.rows.len().div_ceil(20).max(1);
        let tail = &self.rows[self.rows.len() - k..];
        (0..last.ps.len())
            .map(|j| tail.iter().map(|r| r.ps[j]).sum::<f64>() / k as f64)
            .collect()
    }

    /// CSV with columns `step, loss, p_layer_0..p_layer_{L-1}, log_tau`.
    /// Wall-clock time is not written, keeping the file reproducible.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let layers = self.rows.first().map_or(0, |r| r.ps.len());
        let mut header = vec!["step".to_string(), "loss".to_string()];
        header.extend((0..layers).map(|i| format!("p_layer_{i}")));
        header.push("log_tau".into());
        writeln!(w, "{}", header.join(","))?;
        for r in &self.rows {
            let mut fields = vec![r.step.to_string(), r.loss.to_string()];
            fields.extend(r.ps.iter().map(f64::to_string));
            fields.push(r.log_tau.to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// `sqrt(mean over samples of (y − f)²)` per target element, from fresh masks.
pub fn expected_residuals(model: &Model, data: &Dataset, samples: usize, rng: &mut RngStream) -> Result<Tensor> {
    let y = data.y.as_real()?;
    let mut acc = vec![0.0; y.len()];
    for _ in 0..samples.max(1) {
        let pred = model.predict(&data.x, rng)?;
        for ((a, yi), fi) in acc.iter_mut().zip(y.data()).zip(pred.mean.data()) {
            *a += (yi - fi) * (yi - fi);
        }
    }
    let s = samples.max(1) as f64;
    Tensor::new(vec![y.len()], acc.into_iter().map(|a| (a / s).sqrt()).collect())
}

fn validate(data: &Dataset, obj: &ObjectiveConfig, cfg: &TrainConfig) -> Result<()> {
    obj.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if obj.n != data.len() {
        return Err(Error::Config(format!(
            "objective N = {} but the training set has {} rows",
            obj.n,
            data.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::Config(format!(
            "batch size {} must lie in 1..={}",
            cfg.batch_size,
            data.len()
        )));
    }
    if !(cfg.learning_rate > 0.0) || cfg.log_every == 0 {
        return Err(Error::Config("learning rate and log interval must be positive".into()));
    }
    Ok(())
}

/// Trains `model` on `data`. Every step uses a single mask sample; the
/// precision is updated between epochs in MAP-EM mode.
pub fn train(mut model: Model, data: &Dataset, obj: &ObjectiveConfig, cfg: &TrainConfig) -> Result<(Model, TrainTrace)> {
    validate(data, obj, cfg)?;
    let started = Instant::now();
    obj.configure(&mut model);
    let mut root = RngStream::new(cfg.seed);
    let mut shuffle_rng = root.fork();
    let mut noise_rng = root.fork();
    let mut em_rng = root.fork();

    let mut optimiser = Optimiser::new(cfg.optimiser, cfg.learning_rate, cfg.adam);
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mapem = obj.precision_mode == PrecisionMode::HomoscedasticMapem;

    for _ in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let x = data.x.select_rows(batch);
            let y = data.y.select(batch);
            let (elbo, grads) = elbo_loss_and_grad(&mut model, &x, &y, obj, NoiseSource::Sample(&mut noise_rng))
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Training { step, loss: f64::NAN },
                    other => other,
                })?;
            if !elbo.loss.is_finite() {
                return Err(Error::Training { step, loss: elbo.loss });
            }
            optimiser.step(&mut model, &grads, |name| name != "log_tau");
            if step % cfg.log_every == 0 {
                trace.rows.push(TraceRow {
                    step,
                    loss: elbo.loss,
                    ps: model.dropout_ps(),
                    log_tau: model.log_tau,
                });
            }
            step += 1;
        }
        if mapem {
            let r = expected_residuals(&model, data, cfg.mapem.residual_samples, &mut em_rng)?;
            model.log_tau = mapem_tau_step(&r, obj.tau_prior, model.log_tau, cfg.mapem.tau_steps, cfg.mapem.tau_lr)?;
        }
    }
    if mapem && cfg.mapem.final_converge {
        let r = expected_residuals(&model, data, cfg.mapem.final_residual_samples, &mut em_rng)?;
        model.log_tau = mapem_tau_converge(&r, obj.tau_prior, model.log_tau, 1e-12)?;
    }
    trace.total_steps = step;
    trace.wall_clock = started.elapsed();
    Ok((model, trace))
}

/// Minimises the summed layer regularisers alone with Adam, updating only
/// the drop-probability logits. Returns the final drop probabilities.
pub fn minimise_regulariser(model: &mut Model, steps: usize, lr: f64) -> Vec<f64> {
    let mut optimiser = Optimiser::new(OptimiserKind::Adam, lr, AdamParams::default());
    for _ in 0..steps {
        let (_, grads) = regulariser_with_grad(model);
        optimiser.step(model, &grads, |name| name.ends_with(".p_logit"));
    }
    model.dropout_ps()
}
