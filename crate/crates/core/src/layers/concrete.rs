use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{matmul, matmul_nt, matmul_tn, RngStream, Tensor};

/// Clamp added inside every log of the relaxation.
pub const DROPOUT_EPS: f64 = 1e-7;

/// Default relaxation temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn relaxed_logit(p: f64, u: f64) -> f64 {
    (p + DROPOUT_EPS).ln() - (1.0 - p + DROPOUT_EPS).ln() + (u + DROPOUT_EPS).ln()
        - (1.0 - u + DROPOUT_EPS).ln()
}

/// Relaxed drop indicator `sigmoid((logit p + logit u) / t)`.
///
/// Values near 1 mean the unit is dropped. As `t → 0` this becomes the hard
/// rule "drop iff `u > 1 - p`".
pub fn concrete_drop_prob(p: f64, u: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(sigmoid(relaxed_logit(p, u) / temperature))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Identity map; also used for classification logits, where the softmax
    /// is folded into the cross-entropy loss.
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `act(x Mᵀ + b)` with `M: [out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Dimension {
                op: "DenseLayer::new",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Gaussian weights with std `1/sqrt(fan_in)`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut RngStream) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = rng
            .gaussian(&[fan_out, fan_in], 0.0, std)
            .expect("std is positive");
        Self {
            weight,
            bias: Tensor::zeros(&[fan_out]),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        let mut a = matmul_nt(x, &self.weight)?;
        a.add_row_vector(self.bias.data())?;
        Ok(a)
    }

    fn activate(&self, pre: &Tensor) -> Tensor {
        let act = self.activation;
        pre.map(|v| act.apply(v))
    }
}

/// Learnable drop probability `p = sigmoid(p_logit)` with a fixed temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcreteDropout {
    pub p_logit: f64,
    pub temperature: f64,
}

impl ConcreteDropout {
    pub fn new(p_logit: f64, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !p_logit.is_finite() {
            return Err(Error::Argument(format!(
                "need finite p_logit and positive temperature, got {p_logit}, {temperature}"
            )));
        }
        Ok(Self {
            p_logit,
            temperature,
        })
    }

    pub fn from_p(p: f64, temperature: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Argument(format!("p must lie in (0, 1), got {p}")));
        }
        Self::new((p / (1.0 - p)).ln(), temperature)
    }

    pub fn p(&self) -> f64 {
        sigmoid(self.p_logit)
    }

    /// Drops `x` with freshly sampled uniform noise.
    pub fn apply(&self, x: &Tensor, rng: &mut RngStream) -> Result<(Tensor, MaskRealisation)> {
        let u = rng.uniform(x.shape());
        self.apply_with_noise(x, u)
    }

    /// Drops `x` with the given uniform noise, `x · (1 - z) / (1 - p)`.
    pub fn apply_with_noise(&self, x: &Tensor, u: Tensor) -> Result<(Tensor, MaskRealisation)> {
        x.expect_same_shape(&u, "apply_concrete_dropout")?;
        let p = self.p();
        let t = self.temperature;
        let z_drop = u.map(|ui| sigmoid(relaxed_logit(p, ui) / t));
        let retain = 1.0 - p;
        let out = x.zip_map(&z_drop, |xi, zi| xi * (1.0 - zi) / retain)?;
        out.check_finite("apply_concrete_dropout")?;
        Ok((out, MaskRealisation { u, z_drop }))
    }
}

/// One sampled relaxed mask: the uniform noise and the drop indicators it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRealisation {
    pub u: Tensor,
    pub z_drop: Tensor,
}

/// Drops every column of `x` that feeds `layer`, checking the input width.
pub fn apply_concrete_dropout(
    x: &Tensor,
    layer: &ConcreteDropoutLayer,
    rng: &mut RngStream,
) -> Result<(Tensor, MaskRealisation)> {
    let dropout = layer
        .dropout
        .as_ref()
        .ok_or_else(|| Error::State("layer has no concrete dropout".into()))?;
    if x.shape().len() != 2 || x.cols() != layer.input_dim() {
        return Err(Error::Dimension {
            op: "apply_concrete_dropout",
            left: x.shape().to_vec(),
            right: vec![layer.input_dim()],
        });
    }
    dropout.apply(x, rng)
}

/// Where a forward pass takes its uniform noise from.
pub enum LayerNoise<'a> {
    Sample(&'a mut RngStream),
    Replay(&'a Tensor),
}

#[derive(Debug, Clone)]
struct ForwardCache {
    input: Tensor,
    mask: Option<MaskRealisation>,
    dropped: Tensor,
    pre_activation: Tensor,
}

/// Gradients of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Zero for layers without dropout.
    pub p_logit: f64,
}

impl LayerGrads {
    pub fn zeros_like(layer: &ConcreteDropoutLayer) -> Self {
        Self {
            weight: Tensor::zeros(layer.dense.weight.shape()),
            bias: Tensor::zeros(layer.dense.bias.shape()),
            p_logit: 0.0,
        }
    }
}

/// Dense layer whose input is dropped with a learnable Concrete relaxation.
///
/// `dropout = None` gives a plain dense layer. The regulariser coefficients
/// are set by [`crate::objective::ObjectiveConfig::configure`].
#[derive(Debug, Clone)]
pub struct ConcreteDropoutLayer {
    pub dense: DenseLayer,
    pub dropout: Option<ConcreteDropout>,
    pub weight_reg: f64,
    pub dropout_reg: f64,
    cache: Option<ForwardCache>,
}

impl PartialEq for ConcreteDropoutLayer {
    fn eq(&self, other: &Self) -> bool {
        self.dense == other.dense
            && self.dropout == other.dropout
            && self.weight_reg.to_bits() == other.weight_reg.to_bits()
            && self.dropout_reg.to_bits() == other.dropout_reg.to_bits()
    }
}

impl ConcreteDropoutLayer {
    pub fn new(dense: DenseLayer, dropout: Option<ConcreteDropout>) -> Self {
        Self {
            dense,
            dropout,
            weight_reg: 0.0,
            dropout_reg: 0.0,
            cache: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dense.fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.dense.fan_out()
    }

    /// Drop probability, 0 for a plain dense layer.
    pub fn p(&self) -> f64 {
        self.dropout.map_or(0.0, |d| d.p())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "ConcreteDropoutLayer::forward",
                left: x.shape().to_vec(),
                right: self.dense.weight.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn drop_input(&self, x: &Tensor, noise: LayerNoise<'_>) -> Result<(Tensor, Option<MaskRealisation>)> {
        match self.dropout {
            None => Ok((x.clone(), None)),
            Some(d) => {
                let u = match noise {
                    LayerNoise::Sample(rng) => rng.uniform(x.shape()),
                    LayerNoise::Replay(u) => u.clone(),
                };
                let (out, mask) = d.apply_with_noise(x, u)?;
                Ok((out, Some(mask)))
            }
        }
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward(&mut self, x: &Tensor, noise: LayerNoise<'_>) -> Result<Tensor> {
        self.check_input(x)?;
        let (dropped, mask) = self.drop_input(x, noise)?;
        let pre = self.dense.pre_activation(&dropped)?;
        let out = self.dense.activate(&pre);
        self.cache = Some(ForwardCache {
            input: x.clone(),
            mask,
            dropped,
            pre_activation: pre,
        });
        Ok(out)
    }

    /// Stateless stochastic forward pass.
    pub fn predict(&self, x: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
        self.check_input(x)?;
        let (dropped, _) = self.drop_input(x, LayerNoise::Sample(rng))?;
        let pre = self.dense.pre_activation(&dropped)?;
        Ok(self.dense.activate(&pre))
    }

    /// Mask recorded by the last [`forward`](Self::forward), if any.
    pub fn recorded_mask(&self) -> Option<&MaskRealisation> {
        self.cache.as_ref().and_then(|c| c.mask.as_ref())
    }

    /// Reverse pass through the last recorded forward. Returns the parameter
    /// gradients and the gradient with respect to the layer input.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<(LayerGrads, Tensor)> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        upstream.expect_same_shape(&cache.pre_activation, "ConcreteDropoutLayer::backward")?;

        let act = self.dense.activation;
        let grad_pre = upstream.zip_map(&cache.pre_activation, |g, a| g * act.derivative(a))?;
        let weight = matmul_tn(&grad_pre, &cache.dropped)?;
        let bias = grad_pre.sum_rows();
        let grad_dropped = matmul(&grad_pre, &self.dense.weight)?;

        let (grad_input, p_logit) = match (&self.dropout, &cache.mask) {
            (Some(d), Some(mask)) => {
                let p = d.p();
                let t = d.temperature;
                let retain = 1.0 - p;
                let dlogit_dp = 1.0 / (p + DROPOUT_EPS) + 1.0 / (1.0 - p + DROPOUT_EPS);
                let grad_input = grad_dropped.zip_map(&mask.z_drop, |g, z| g * (1.0 - z) / retain)?;
                // d/dp of x (1 - z) / (1 - p), z = sigmoid(logit / t)
                let mut grad_p = 0.0;
                for ((g, x), z) in grad_dropped
                    .data()
                    .iter()
                    .zip(cache.input.data())
                    .zip(mask.z_drop.data())
                {
                    let dz_dp = z * (1.0 - z) / t * dlogit_dp;
                    grad_p += g * x * (-dz_dp / retain + (1.0 - z) / (retain * retain));
                }
                (grad_input, grad_p * p * (1.0 - p))
            }
            _ => (grad_dropped, 0.0),
        };
        Ok((
            LayerGrads {
                weight,
                bias,
                p_logit,
            },
            grad_input,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(k_in: usize, k_out: usize, p_logit: Option<f64>, act: Activation, seed: u64) -> ConcreteDropoutLayer {
        let mut rng = RngStream::new(seed);
        let mut dense = DenseLayer::init(k_in, k_out, act, &mut rng);
        dense.bias = rng.gaussian(&[k_out], 0.0, 0.5).unwrap();
        ConcreteDropoutLayer::new(
            dense,
            p_logit.map(|l| ConcreteDropout::new(l, DEFAULT_TEMPERATURE).unwrap()),
        )
    }

    #[test]
    fn drop_prob_values() {
        assert_eq!(concrete_drop_prob(0.5, 0.5, 0.1).unwrap(), 0.5);
        let v = concrete_drop_prob(0.2, 0.9, 0.1).unwrap();
        // 30-digit evaluation of the eps-shifted formula: 0.99969936020623115...
        assert!((v - 0.999_699_360_206_231).abs() < 1e-12, "{v}");
        assert!(concrete_drop_prob(0.3, 0.71, 1e-6).unwrap() > 0.999);
        assert!(concrete_drop_prob(0.3, 0.69, 1e-6).unwrap() < 0.001);
        assert!(matches!(concrete_drop_prob(0.3, 0.5, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn drop_prob_is_monotone_in_u_and_p() {
        // grid kept inside the range where f64 does not saturate the sigmoid
        for t in [0.1, 0.5, 1.0] {
            for i in 1..18 {
                let a = i as f64 / 20.0;
                let b = (i + 1) as f64 / 20.0;
                assert!(concrete_drop_prob(0.3, a, t).unwrap() < concrete_drop_prob(0.3, b, t).unwrap());
                assert!(concrete_drop_prob(a, 0.4, t).unwrap() < concrete_drop_prob(b, 0.4, t).unwrap());
            }
        }
    }

    #[test]
    fn swapping_p_and_u_complements() {
        for &(p, u) in &[(0.2, 0.7), (0.45, 0.05), (0.9, 0.3)] {
            let z = concrete_drop_prob(p, u, 0.1).unwrap();
            let zc = concrete_drop_prob(1.0 - p, 1.0 - u, 0.1).unwrap();
            assert!((z + zc - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn near_zero_p_keeps_input() {
        let l = layer(5, 3, Some(-20.0), Activation::Identity, 1);
        let mut rng = RngStream::new(2);
        let x = rng.gaussian(&[4, 5], 0.0, 1.0).unwrap();
        let (out, mask) = apply_concrete_dropout(&x, &l, &mut rng).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(mask.z_drop.data().iter().all(|&z| z > 0.0 && z < 1.0));
    }

    #[test]
    fn wrong_input_width_is_dimension_error() {
        let l = layer(5, 3, Some(-1.0), Activation::Identity, 1);
        let mut rng = RngStream::new(2);
        let x = Tensor::zeros(&[2, 4]);
        assert!(matches!(apply_concrete_dropout(&x, &l, &mut rng), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hard_threshold_frequency_at_p_half() {
        let d = ConcreteDropout::from_p(0.5, 1e-6).unwrap();
        let mut rng = RngStream::new(3);
        let x = Tensor::full(&[100_000], 1.0);
        let (out, _) = d.apply(&x, &mut rng).unwrap();
        let dropped = out.data().iter().filter(|&&v| v < 0.5 / 0.5).count() as f64 / 1e5;
        assert!((dropped - 0.5).abs() < 0.01, "{dropped}");
    }

    #[test]
    fn rescaling_is_unbiased_at_low_temperature() {
        let d = ConcreteDropout::from_p(0.3, 0.1).unwrap();
        let mut rng = RngStream::new(4);
        let x = Tensor::full(&[100_000], 1.0);
        let (out, _) = d.apply(&x, &mut rng).unwrap();
        assert!((out.mean() - 1.0).abs() < 0.02, "{}", out.mean());
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut l = layer(3, 2, Some(-1.0), Activation::Relu, 5);
        l.dense.weight = Tensor::zeros(&[2, 3]);
        l.dense.bias = Tensor::zeros(&[2]);
        let mut rng = RngStream::new(6);
        let x = rng.gaussian(&[4, 3], 0.0, 1.0).unwrap();
        let y = l.forward(&x, LayerNoise::Sample(&mut rng)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_drop_limit_is_affine_map() {
        let mut l = layer(3, 2, Some(-20.0), Activation::Identity, 7);
        let mut rng = RngStream::new(8);
        let x = rng.gaussian(&[4, 3], 0.0, 1.0).unwrap();
        let y = l.forward(&x, LayerNoise::Sample(&mut rng)).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut expect = l.dense.bias.data()[j];
                for k in 0..3 {
                    expect += x.get2(i, k) * l.dense.weight.get2(j, k);
                }
                assert!((y.get2(i, j) - expect).abs() < 1e-6);
            }
        }
        // input gradient matches the dense-layer gradient upstream · M
        let g = rng.gaussian(&[4, 2], 0.0, 1.0).unwrap();
        let (_, gin) = l.backward(&g).unwrap();
        let dense_gin = matmul(&g, &l.dense.weight).unwrap();
        for (a, b) in gin.data().iter().zip(dense_gin.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut l = layer(3, 2, Some(-1.0), Activation::Relu, 9);
        assert!(matches!(l.backward(&Tensor::zeros(&[1, 2])), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_p_gradient() {
        let mut l = layer(3, 2, Some(-1.0), Activation::Relu, 10);
        let mut rng = RngStream::new(11);
        let x = rng.gaussian(&[4, 3], 0.0, 1.0).unwrap();
        l.forward(&x, LayerNoise::Sample(&mut rng)).unwrap();
        let (g, _) = l.backward(&Tensor::zeros(&[4, 2])).unwrap();
        assert_eq!(g.p_logit, 0.0);
    }

    /// Scalar loss sum(out ⊙ w) for a fixed weighting w, evaluated by a
    /// straight-line re-implementation of the layer given recorded noise.
    fn reference_loss(l: &ConcreteDropoutLayer, x: &Tensor, u: &Tensor, w: &Tensor) -> f64 {
        let (b, k_in) = (x.rows(), x.cols());
        let k_out = l.output_dim();
        let d = l.dropout.unwrap();
        let p = 1.0 / (1.0 + (-d.p_logit).exp());
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..k_out {
                let mut a = l.dense.bias.data()[j];
                for k in 0..k_in {
                    let ui = u.get2(i, k);
                    let logit = (p + 1e-7).ln() - (1.0 - p + 1e-7).ln() + (ui + 1e-7).ln() - (1.0 - ui + 1e-7).ln();
                    let z = 1.0 / (1.0 + (-logit / d.temperature).exp());
                    a += x.get2(i, k) * (1.0 - z) / (1.0 - p) * l.dense.weight.get2(j, k);
                }
                let out = if l.dense.activation == Activation::Relu { a.max(0.0) } else { a };
                total += out * w.get2(i, j);
            }
        }
        total
    }

    #[test]
    fn forward_matches_straight_line_reference_and_gradients_match_fd() {
        let mut l = layer(4, 3, Some(-0.7), Activation::Relu, 12);
        let mut rng = RngStream::new(13);
        let x = rng.gaussian(&[5, 4], 0.0, 1.0).unwrap();
        let w = rng.gaussian(&[5, 3], 0.0, 1.0).unwrap();
        let out = l.forward(&x, LayerNoise::Sample(&mut rng)).unwrap();
        let u = l.recorded_mask().unwrap().u.clone();
        let fwd: f64 = out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((fwd - reference_loss(&l, &x, &u, &w)).abs() < 1e-12);

        let (grads, gin) = l.backward(&w).unwrap();
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);

        let mut lp = l.clone();
        lp.dropout.as_mut().unwrap().p_logit += h;
        let mut lm = l.clone();
        lm.dropout.as_mut().unwrap().p_logit -= h;
        let fd = (reference_loss(&lp, &x, &u, &w) - reference_loss(&lm, &x, &u, &w)) / (2.0 * h);
        assert!(rel(fd, grads.p_logit) < 1e-4, "{fd} vs {}", grads.p_logit);

        for idx in 0..l.dense.weight.len() {
            let mut lp = l.clone();
            lp.dense.weight.data_mut()[idx] += h;
            let mut lm = l.clone();
            lm.dense.weight.data_mut()[idx] -= h;
            let fd = (reference_loss(&lp, &x, &u, &w) - reference_loss(&lm, &x, &u, &w)) / (2.0 * h);
            assert!((fd - grads.weight.data()[idx]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (reference_loss(&l, &xp, &u, &w) - reference_loss(&l, &xm, &u, &w)) / (2.0 * h);
            assert!((fd - gin.data()[idx]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
