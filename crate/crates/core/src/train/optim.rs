use serde::{Deserialize, Serialize};

use crate::layers::{Model, ModelGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimiserKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter slice.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(params: &mut [f64], grads: &[f64], slot: &mut AdamSlot, step: u64, lr: f64, hp: &AdamParams) {
    debug_assert_eq!(params.len(), grads.len());
    let c1 = 1.0 - hp.beta1.powi(step as i32);
    let c2 = 1.0 - hp.beta2.powi(step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut slot.m).zip(&mut slot.v) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// Optimiser over the named parameter slices of a [`Model`].
#[derive(Debug, Clone)]
pub struct Optimiser {
    kind: OptimiserKind,
    lr: f64,
    hp: AdamParams,
    slots: Vec<AdamSlot>,
    steps: u64,
}

impl Optimiser {
    pub fn new(kind: OptimiserKind, lr: f64, hp: AdamParams) -> Self {
        Self {
            kind,
            lr,
            hp,
            slots: Vec::new(),
            steps: 0,
        }
    }

    /// Updates every parameter whose name passes `trainable`.
    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, trainable: impl Fn(&str) -> bool) {
        let grad_slices = grads.slices(model);
        let params = model.params_mut();
        if self.slots.is_empty() {
            self.slots = params.iter().map(|(_, p)| AdamSlot::new(p.len())).collect();
        }
        self.steps += 1;
        for (((name, p), (_, g)), slot) in params.into_iter().zip(&grad_slices).zip(&mut self.slots) {
            if !trainable(&name) {
                continue;
            }
            match self.kind {
                OptimiserKind::Adam => adam_step(p, g, slot, self.steps, self.lr, &self.hp),
                OptimiserKind::Sgd => sgd_step(p, g, self.lr),
            }
        }
    }
}
