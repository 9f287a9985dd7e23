//! Likelihoods, the per-layer KL regulariser, the stochastic variational
//! objective and the MAP-EM update for the observation precision.
//!
//! Layer regulariser coefficients are stored in KL units: the objective is
//! `mean NLL + (1/N) Σ_layers KL_l` with
//! `KL_l = w·‖M‖²/(1−p) + d·K·(p log p + (1−p) log(1−p))`.
//! For the Euclidean loss `w = l_eff²/2, d = 1`; for cross-entropy
//! `w = l_eff², d = 1`. The reference coefficients
//! `l_eff²/(τN)` and `2/(τN)` (`1/(τN)` for cross-entropy) used with a mean
//! squared error loss are the same pair rescaled by `2/(τN)` (resp.
//! `1/(τN)`), so both parameterisations share the ratio `l_eff²/2`
//! (resp. `l_eff²`) and produce the same optimum.

use serde::{Deserialize, Serialize};

use crate::data::Targets;
use crate::error::{Error, Result};
use crate::layers::{softplus, ConcreteDropoutLayer, LayerGrads, Model, ModelGrads, NoiseSource, DROPOUT_EPS};
use crate::ndcore::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    /// Global precision fitted by MAP-EM under a Gamma prior.
    HomoscedasticMapem,
    /// Per-point log-variance predicted by a second output head.
    HeteroscedasticHead,
    /// Global precision held at its initial value.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Euclidean,
    CrossEntropy,
}

/// Gamma prior on the precision, shape–rate parameterisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for GammaPrior {
    fn default() -> Self {
        Self {
            shape: 0.1,
            rate: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegCoefficients {
    pub weight_reg: f64,
    pub dropout_reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Dataset size.
    pub n: usize,
    /// Prior length-scale constant `l`.
    pub lengthscale: f64,
    pub precision_mode: PrecisionMode,
    pub tau_prior: GammaPrior,
    pub loss_kind: LossKind,
}

impl ObjectiveConfig {
    pub fn regression(n: usize, lengthscale: f64, precision_mode: PrecisionMode) -> Self {
        Self {
            n,
            lengthscale,
            precision_mode,
            tau_prior: GammaPrior::default(),
            loss_kind: LossKind::Euclidean,
        }
    }

    pub fn classification(n: usize, lengthscale: f64) -> Self {
        Self {
            n,
            lengthscale,
            precision_mode: PrecisionMode::Fixed,
            tau_prior: GammaPrior::default(),
            loss_kind: LossKind::CrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("dataset size N must be positive".into()));
        }
        if !(self.lengthscale > 0.0) {
            return Err(Error::Config(format!(
                "length-scale must be positive, got {}",
                self.lengthscale
            )));
        }
        Ok(())
    }

    /// `l · sqrt(K_in)`.
    pub fn effective_lengthscale(&self, fan_in: usize) -> f64 {
        self.lengthscale * (fan_in as f64).sqrt()
    }

    fn dropout_factor(&self) -> f64 {
        match self.loss_kind {
            LossKind::Euclidean => 2.0,
            LossKind::CrossEntropy => 1.0,
        }
    }

    /// Coefficients for a mean-squared-error (or plain cross-entropy) loss:
    /// `l_eff²/(τN)` and `2/(τN)`, the factor 2 dropped for cross-entropy.
    pub fn reference_coefficients(&self, fan_in: usize, tau: f64) -> RegCoefficients {
        let l = self.effective_lengthscale(fan_in);
        let tn = tau * self.n as f64;
        RegCoefficients {
            weight_reg: l * l / tn,
            dropout_reg: self.dropout_factor() / tn,
        }
    }

    /// Coefficients in KL units, used by [`elbo_loss`].
    pub fn kl_coefficients(&self, fan_in: usize) -> RegCoefficients {
        let l = self.effective_lengthscale(fan_in);
        RegCoefficients {
            weight_reg: l * l / self.dropout_factor(),
            dropout_reg: 1.0,
        }
    }

    /// Writes [`kl_coefficients`](Self::kl_coefficients) into every layer.
    pub fn configure(&self, model: &mut Model) {
        for layer in model.all_layers_mut() {
            let c = self.kl_coefficients(layer.input_dim());
            layer.weight_reg = c.weight_reg;
            layer.dropout_reg = c.dropout_reg;
        }
    }
}

/// Entropy of a Bernoulli(p) variable in nats; `p` is clamped to `[eps, 1-eps]`.
pub fn bernoulli_entropy(p: f64) -> f64 {
    let p = p.clamp(DROPOUT_EPS, 1.0 - DROPOUT_EPS);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

/// `w·‖M‖²/(1−p) + d·K·(p log p + (1−p) log(1−p))` with `K` the input width.
/// Plain dense layers contribute `w·‖M‖²`.
pub fn layer_kl_regulariser(layer: &ConcreteDropoutLayer) -> f64 {
    let sq = layer.dense.weight.sum_squares();
    match layer.dropout {
        None => layer.weight_reg * sq,
        Some(d) => {
            let logit = d.p_logit;
            let p = d.p();
            let log_p = -softplus(-logit);
            let log_q = -softplus(logit);
            let neg_entropy = p * log_p + (1.0 - p) * log_q;
            // 1/(1-p) = 1 + e^logit
            layer.weight_reg * sq * (1.0 + logit.exp())
                + layer.dropout_reg * layer.input_dim() as f64 * neg_entropy
        }
    }
}

/// Gradient of [`layer_kl_regulariser`] with respect to `M` and `p_logit`.
pub fn layer_kl_grad(layer: &ConcreteDropoutLayer) -> LayerGrads {
    let (scale, p_logit) = match layer.dropout {
        None => (1.0, 0.0),
        Some(d) => {
            let logit = d.p_logit;
            let p = d.p();
            let sq = layer.dense.weight.sum_squares();
            let k = layer.input_dim() as f64;
            // d/dp [w S/(1-p)] · p(1-p) = w S p/(1-p);  d/dp [-H(p)] = logit
            let g = layer.weight_reg * sq * logit.exp() + layer.dropout_reg * k * logit * p * (1.0 - p);
            (1.0 + logit.exp(), g)
        }
    };
    LayerGrads {
        weight: layer.dense.weight.scale(2.0 * layer.weight_reg * scale),
        bias: Tensor::zeros(layer.dense.bias.shape()),
        p_logit,
    }
}

/// Log-variance argument of [`gaussian_nll`].
#[derive(Debug, Clone, Copy)]
pub enum LogVariance<'a> {
    Scalar(f64),
    PerPoint(&'a Tensor),
}

/// Mean over rows of the summed per-output Gaussian negative log-likelihood
/// `0.5·exp(−s)(y−f)² + 0.5·s + 0.5·ln 2π`.
pub fn gaussian_nll(y: &Tensor, f: &Tensor, log_var: LogVariance<'_>) -> Result<f64> {
    Ok(gaussian_nll_with_grad(y, f, log_var)?.0)
}

/// [`gaussian_nll`] with gradients with respect to `f` and the log-variance.
/// The scalar log-variance gradient is returned as a 1-element tensor.
pub fn gaussian_nll_with_grad(
    y: &Tensor,
    f: &Tensor,
    log_var: LogVariance<'_>,
) -> Result<(f64, Tensor, Tensor)> {
    y.expect_same_shape(f, "gaussian_nll")?;
    if let LogVariance::PerPoint(s) = log_var {
        y.expect_same_shape(s, "gaussian_nll")?;
    }
    let rows = y.rows().max(1) as f64;
    let mut total = 0.0;
    let mut grad_f = vec![0.0; y.len()];
    let mut grad_s = vec![0.0; y.len()];
    for i in 0..y.len() {
        let s = match log_var {
            LogVariance::Scalar(s) => s,
            LogVariance::PerPoint(t) => t.data()[i],
        };
        let prec = (-s).exp();
        let r = y.data()[i] - f.data()[i];
        total += 0.5 * prec * r * r + 0.5 * s + HALF_LN_2PI;
        grad_f[i] = -prec * r / rows;
        grad_s[i] = (0.5 - 0.5 * prec * r * r) / rows;
    }
    let loss = total / rows;
    if !loss.is_finite() {
        return Err(Error::NonFinite("gaussian_nll"));
    }
    let grad_f = Tensor::new(f.shape().to_vec(), grad_f)?;
    let grad_s = match log_var {
        LogVariance::Scalar(_) => Tensor::scalar(grad_s.iter().sum()),
        LogVariance::PerPoint(_) => Tensor::new(y.shape().to_vec(), grad_s)?,
    };
    Ok((loss, grad_f, grad_s))
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        data.extend(log_softmax_row(logits.row(i)).into_iter().map(f64::exp));
    }
    Tensor::new(logits.shape().to_vec(), data).expect("softmax of finite logits is finite")
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "cross_entropy_nll",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let c = logits.cols();
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(Error::Data(format!("label {l} at index {i} is outside 0..{c}")));
    }
    Ok(())
}

/// Mean negative log softmax probability of the true class.
pub fn cross_entropy_nll(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    check_labels(logits, labels)?;
    let b = labels.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, &label) in labels.iter().enumerate() {
        let lsm = log_softmax_row(logits.row(i));
        total -= lsm[label];
        for (j, v) in lsm.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push((v.exp() - onehot) / b);
        }
    }
    Ok((total / b, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Value of the objective on one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Elbo {
    pub loss: f64,
    /// Mean negative log-likelihood of the batch.
    pub nll: f64,
    /// `layer_kl_regulariser` of every layer, in parameter order.
    pub per_layer_regs: Vec<f64>,
}

fn data_term(
    model: &mut Model,
    x: &Tensor,
    targets: &Targets,
    config: &ObjectiveConfig,
    noise: NoiseSource<'_>,
) -> Result<(f64, ModelGrads)> {
    if x.rows() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let out = model.forward(x, noise)?;
    match (config.loss_kind, targets) {
        (LossKind::Euclidean, Targets::Real(y)) => match config.precision_mode {
            PrecisionMode::HeteroscedasticHead => {
                let s = out.log_var.as_ref().ok_or_else(|| {
                    Error::Config("heteroscedastic mode needs a model with a variance head".into())
                })?;
                let (nll, gf, gs) = gaussian_nll_with_grad(y, &out.mean, LogVariance::PerPoint(s))?;
                Ok((nll, model.backward(&gf, Some(&gs))?))
            }
            PrecisionMode::HomoscedasticMapem | PrecisionMode::Fixed => {
                if model.is_heteroscedastic() {
                    return Err(Error::Config(
                        "homoscedastic modes need a model without a variance head".into(),
                    ));
                }
                let (nll, gf, gs) = gaussian_nll_with_grad(y, &out.mean, LogVariance::Scalar(-model.log_tau))?;
                let mut grads = model.backward(&gf, None)?;
                grads.log_tau = -gs.data()[0];
                Ok((nll, grads))
            }
        },
        (LossKind::CrossEntropy, Targets::Labels { labels, .. }) => {
            let (nll, g) = cross_entropy_with_grad(&out.mean, labels)?;
            let grads = model.backward(&g, out.log_var.as_ref().map(|s| Tensor::zeros(s.shape())).as_ref())?;
            Ok((nll, grads))
        }
        _ => Err(Error::Config("loss kind does not match the target type".into())),
    }
}

fn add_into(dst: &mut LayerGrads, src: &LayerGrads, scale: f64) {
    for (a, b) in dst.weight.data_mut().iter_mut().zip(src.weight.data()) {
        *a += scale * b;
    }
    dst.p_logit += scale * src.p_logit;
}

/// Σ of `layer_kl_regulariser` over layers and its gradient.
pub fn regulariser_with_grad(model: &Model) -> (Vec<f64>, ModelGrads) {
    let regs = model.all_layers().map(layer_kl_regulariser).collect();
    let grads = ModelGrads {
        layers: model.layers.iter().map(layer_kl_grad).collect(),
        head: model.var_head.as_ref().map(layer_kl_grad),
        log_tau: 0.0,
    };
    (regs, grads)
}

/// Single-sample estimate of `(1/M)·Σ NLL + (1/N)·Σ_layers KL_l`.
pub fn elbo_loss(
    model: &mut Model,
    x: &Tensor,
    targets: &Targets,
    config: &ObjectiveConfig,
    noise: NoiseSource<'_>,
) -> Result<Elbo> {
    Ok(elbo_loss_and_grad(model, x, targets, config, noise)?.0)
}

pub fn elbo_loss_and_grad(
    model: &mut Model,
    x: &Tensor,
    targets: &Targets,
    config: &ObjectiveConfig,
    noise: NoiseSource<'_>,
) -> Result<(Elbo, ModelGrads)> {
    config.validate()?;
    let (nll, mut grads) = data_term(model, x, targets, config, noise)?;
    let (regs, reg_grads) = regulariser_with_grad(model);
    let inv_n = 1.0 / config.n as f64;
    for (g, r) in grads.layers.iter_mut().zip(&reg_grads.layers) {
        add_into(g, r, inv_n);
    }
    if let (Some(g), Some(r)) = (grads.head.as_mut(), reg_grads.head.as_ref()) {
        add_into(g, r, inv_n);
    }
    let loss = nll + inv_n * regs.iter().sum::<f64>();
    Ok((
        Elbo {
            loss,
            nll,
            per_layer_regs: regs,
        },
        grads,
    ))
}

fn posterior_counts(residuals: &Tensor, prior: GammaPrior) -> Result<(f64, f64)> {
    let n = residuals.len() as f64;
    let c = prior.shape - 1.0 + n / 2.0;
    if !(c > 0.0) {
        return Err(Error::DegeneratePosterior(c));
    }
    Ok((c, prior.rate + 0.5 * residuals.sum_squares()))
}

/// `(N/2 + a − 1)·log τ − τ·(b + Σr²/2)`: the τ-dependent part of the
/// expected log-likelihood plus the log Gamma prior.
pub fn map_tau_objective(residuals: &Tensor, prior: GammaPrior, log_tau: f64) -> Result<f64> {
    let (c, s) = posterior_counts(residuals, prior)?;
    Ok(c * log_tau - log_tau.exp() * s)
}

/// Stationary point `τ* = (a − 1 + N/2) / (b + Σr²/2)`.
pub fn mapem_tau_closed_form(residuals: &Tensor, prior: GammaPrior) -> Result<f64> {
    let (c, s) = posterior_counts(residuals, prior)?;
    Ok(c / s)
}

/// Partial M-step: `steps` gradient-ascent steps on `log τ`, the step size
/// `lr` being scaled by `1/(a − 1 + N/2)` and each step clipped to ±1.
pub fn mapem_tau_step(
    residuals: &Tensor,
    prior: GammaPrior,
    log_tau: f64,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    let (c, s) = posterior_counts(residuals, prior)?;
    let mut lt = log_tau;
    for _ in 0..steps {
        let grad = c - lt.exp() * s;
        lt += (lr * grad / c).clamp(-1.0, 1.0);
    }
    Ok(lt)
}

/// Full M-step: gradient ascent on `log τ` until the update falls below `tol`.
pub fn mapem_tau_converge(residuals: &Tensor, prior: GammaPrior, log_tau: f64, tol: f64) -> Result<f64> {
    let (c, s) = posterior_counts(residuals, prior)?;
    let mut lt = log_tau;
    for _ in 0..100_000 {
        let step = ((c - lt.exp() * s) / c).clamp(-1.0, 1.0);
        lt += step;
        if step.abs() < tol {
            break;
        }
    }
    Ok(lt)
}
