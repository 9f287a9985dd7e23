use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::concrete::{
    Activation, ConcreteDropout, ConcreteDropoutLayer, DenseLayer, LayerGrads, LayerNoise,
    DEFAULT_TEMPERATURE,
};
use crate::ndcore::{RngStream, Tensor};

/// Initial drop probability of every wrapped layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PInit {
    /// `p_logit ~ Uniform(low, high)`.
    UniformLogit { low: f64, high: f64 },
    /// The same `p` for every layer.
    Fixed(f64),
}

impl Default for PInit {
    fn default() -> Self {
        PInit::UniformLogit {
            low: -2.0,
            high: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Wrap every layer (including the output layer) with Concrete dropout.
    pub concrete: bool,
    pub temperature: f64,
    pub p_init: PInit,
    /// Add a log-variance head sharing the trunk.
    pub heteroscedastic: bool,
}

impl ModelConfig {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            concrete: true,
            temperature: DEFAULT_TEMPERATURE,
            p_init: PInit::default(),
            heteroscedastic: false,
        }
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub mean: Tensor,
    /// Per-point predicted log-variance (heteroscedastic models only).
    pub log_var: Option<Tensor>,
}

/// Source of uniform noise for a full-model forward pass.
pub enum NoiseSource<'a> {
    Sample(&'a mut RngStream),
    /// One tensor per dropout layer, in [`Model::dropout_layers`] order.
    Replay(&'a [Tensor]),
}

/// Gradients of every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
    pub head: Option<LayerGrads>,
    pub log_tau: f64,
}

/// Multi-layer perceptron: ReLU hidden layers, identity output layer and an
/// optional log-variance head on the last hidden representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<ConcreteDropoutLayer>,
    pub var_head: Option<ConcreteDropoutLayer>,
    /// Global log precision of the Gaussian likelihood.
    pub log_tau: f64,
}

fn init_dropout(config: &ModelConfig, rng: &mut RngStream) -> Result<Option<ConcreteDropout>> {
    if !config.concrete {
        return Ok(None);
    }
    let d = match config.p_init {
        PInit::UniformLogit { low, high } => {
            let logit = low + (high - low) * rng.next_open01();
            ConcreteDropout::new(logit, config.temperature)?
        }
        PInit::Fixed(p) => ConcreteDropout::from_p(p, config.temperature)?,
    };
    Ok(Some(d))
}

impl Model {
    /// Default initial log precision (low precision, high aleatoric noise).
    pub const DEFAULT_LOG_TAU: f64 = -2.0;

    pub fn new(config: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        if config.input_dim == 0 || config.output_dim == 0 || config.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive: {} -> {:?} -> {}",
                config.input_dim, config.hidden, config.output_dim
            )));
        }
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden);
        let mut layers = Vec::with_capacity(dims.len());
        for pair in dims.windows(2) {
            let dense = DenseLayer::init(pair[0], pair[1], Activation::Relu, rng);
            layers.push(ConcreteDropoutLayer::new(dense, init_dropout(config, rng)?));
        }
        let trunk_dim = *dims.last().unwrap();
        let out = DenseLayer::init(trunk_dim, config.output_dim, Activation::Identity, rng);
        layers.push(ConcreteDropoutLayer::new(out, init_dropout(config, rng)?));
        let var_head = if config.heteroscedastic {
            let dense = DenseLayer::init(trunk_dim, config.output_dim, Activation::Identity, rng);
            Some(ConcreteDropoutLayer::new(dense, init_dropout(config, rng)?))
        } else {
            None
        };
        Ok(Self {
            layers,
            var_head,
            log_tau: Self::DEFAULT_LOG_TAU,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn is_heteroscedastic(&self) -> bool {
        self.var_head.is_some()
    }

    /// All layers in parameter order: trunk, output, then the head.
    pub fn all_layers(&self) -> impl Iterator<Item = &ConcreteDropoutLayer> {
        self.layers.iter().chain(self.var_head.iter())
    }

    pub fn all_layers_mut(&mut self) -> impl Iterator<Item = &mut ConcreteDropoutLayer> {
        self.layers.iter_mut().chain(self.var_head.iter_mut())
    }

    /// Layers that carry a Concrete dropout wrapper.
    pub fn dropout_layers(&self) -> impl Iterator<Item = &ConcreteDropoutLayer> {
        self.all_layers().filter(|l| l.dropout.is_some())
    }

    /// Current drop probability of every wrapped layer.
    pub fn dropout_ps(&self) -> Vec<f64> {
        self.dropout_layers().map(|l| l.p()).collect()
    }

    pub fn set_p(&mut self, p: f64) -> Result<()> {
        for l in self.all_layers_mut() {
            if let Some(d) = l.dropout.as_mut() {
                *d = ConcreteDropout::from_p(p, d.temperature)?;
            }
        }
        Ok(())
    }

    fn layer_noise<'a>(
        noise: &'a mut NoiseSource<'_>,
        slot: &mut usize,
        has_dropout: bool,
    ) -> Result<LayerNoise<'a>> {
        match noise {
            NoiseSource::Sample(rng) => Ok(LayerNoise::Sample(rng)),
            NoiseSource::Replay(us) => {
                if !has_dropout {
                    // never read for plain layers
                    return Ok(LayerNoise::Replay(&EMPTY));
                }
                let u = us
                    .get(*slot)
                    .ok_or_else(|| Error::State(format!("no replay noise for dropout layer {slot}")))?;
                *slot += 1;
                Ok(LayerNoise::Replay(u))
            }
        }
    }

    /// Forward pass recording masks and activations for [`backward`](Self::backward).
    pub fn forward(&mut self, x: &Tensor, mut noise: NoiseSource<'_>) -> Result<ModelOutput> {
        let mut slot = 0;
        let n = self.layers.len();
        let mut h = x.clone();
        for layer in &mut self.layers[..n - 1] {
            let has = layer.dropout.is_some();
            h = layer.forward(&h, Self::layer_noise(&mut noise, &mut slot, has)?)?;
        }
        let out_layer = &mut self.layers[n - 1];
        let has = out_layer.dropout.is_some();
        let mean = out_layer.forward(&h, Self::layer_noise(&mut noise, &mut slot, has)?)?;
        let log_var = match self.var_head.as_mut() {
            Some(head) => {
                let has = head.dropout.is_some();
                Some(head.forward(&h, Self::layer_noise(&mut noise, &mut slot, has)?)?)
            }
            None => None,
        };
        Ok(ModelOutput { mean, log_var })
    }

    /// Uniform noise recorded by the last forward pass, for replay.
    pub fn recorded_noise(&self) -> Vec<Tensor> {
        self.dropout_layers()
            .filter_map(|l| l.recorded_mask().map(|m| m.u.clone()))
            .collect()
    }

    /// Stateless stochastic forward pass with fresh masks.
    pub fn predict(&self, x: &Tensor, rng: &mut RngStream) -> Result<ModelOutput> {
        let n = self.layers.len();
        let mut h = x.clone();
        for layer in &self.layers[..n - 1] {
            h = layer.predict(&h, rng)?;
        }
        let mean = self.layers[n - 1].predict(&h, rng)?;
        let log_var = match &self.var_head {
            Some(head) => Some(head.predict(&h, rng)?),
            None => None,
        };
        Ok(ModelOutput { mean, log_var })
    }

    /// Reverse pass through the last recorded forward.
    pub fn backward(&mut self, grad_mean: &Tensor, grad_log_var: Option<&Tensor>) -> Result<ModelGrads> {
        let n = self.layers.len();
        let (out_grads, mut grad_h) = self.layers[n - 1].backward(grad_mean)?;
        let head = match (self.var_head.as_mut(), grad_log_var) {
            (Some(head), Some(g)) => {
                let (hg, gin) = head.backward(g)?;
                grad_h = grad_h.add(&gin)?;
                Some(hg)
            }
            (None, None) => None,
            _ => {
                return Err(Error::State(
                    "log-variance gradient must be given exactly when the model has a variance head".into(),
                ))
            }
        };
        let mut layers = vec![out_grads];
        for layer in self.layers[..n - 1].iter_mut().rev() {
            let (g, gin) = layer.backward(&grad_h)?;
            layers.push(g);
            grad_h = gin;
        }
        layers.reverse();
        Ok(ModelGrads {
            layers,
            head,
            log_tau: 0.0,
        })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            layers: self.layers.iter().map(LayerGrads::zeros_like).collect(),
            head: self.var_head.as_ref().map(LayerGrads::zeros_like),
            log_tau: 0.0,
        }
    }

    /// Every trainable parameter as a named mutable slice, in a fixed order
    /// shared with [`ModelGrads::slices`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        let named = self
            .layers
            .iter_mut()
            .enumerate()
            .map(|(i, l)| (format!("layer{i}"), l))
            .chain(self.var_head.iter_mut().map(|l| ("head".to_string(), l)));
        for (name, layer) in named {
            out.push((format!("{name}.weight"), layer.dense.weight.data_mut()));
            out.push((format!("{name}.bias"), layer.dense.bias.data_mut()));
            if let Some(d) = layer.dropout.as_mut() {
                out.push((format!("{name}.p_logit"), std::slice::from_mut(&mut d.p_logit)));
            }
        }
        out.push(("log_tau".to_string(), std::slice::from_mut(&mut self.log_tau)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.all_layers()
            .map(|l| l.dense.weight.len() + l.dense.bias.len() + usize::from(l.dropout.is_some()))
            .sum::<usize>()
            + 1
    }
}

static EMPTY: std::sync::LazyLock<Tensor> = std::sync::LazyLock::new(|| Tensor::zeros(&[0]));

impl ModelGrads {
    /// Gradient slices in the same order as [`Model::params_mut`].
    pub fn slices<'a>(&'a self, model: &Model) -> Vec<(String, &'a [f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        let named = self
            .layers
            .iter()
            .zip(&model.layers)
            .enumerate()
            .map(|(i, pair)| (format!("layer{i}"), pair))
            .chain(
                self.head
                    .iter()
                    .zip(model.var_head.iter())
                    .map(|pair| ("head".to_string(), pair)),
            );
        for (name, (g, layer)) in named {
            out.push((format!("{name}.weight"), g.weight.data()));
            out.push((format!("{name}.bias"), g.bias.data()));
            if layer.dropout.is_some() {
                out.push((format!("{name}.p_logit"), std::slice::from_ref(&g.p_logit)));
            }
        }
        out.push(("log_tau".to_string(), std::slice::from_ref(&self.log_tau)));
        out
    }
}
