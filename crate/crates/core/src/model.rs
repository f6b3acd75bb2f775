//! Feature extractor (MLP) followed by a growing linear classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Apply relu to the feature layer output as well as hidden layers.
    #[serde(default)]
    pub feature_relu: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

fn default_feature_dim() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_widths: default_hidden(),
            feature_dim: default_feature_dim(),
            feature_relu: false,
        }
    }
}

/// Affine map `x·W + b` with `W` stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let weight = Tensor::matrix(input, output, draw(input * output)).expect("finite init");
        let bias = Tensor::vector(draw(output)).expect("finite init");
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight)?;
        let n = self.output_dim();
        let b = self.bias.data();
        for row in y.data_mut().chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        Ok(y)
    }
}

/// `F = classifier ∘ features`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Linear>,
    classifier: Option<Linear>,
    feature_relu: bool,
}

impl Model {
    pub fn new(input_dim: usize, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || config.feature_dim == 0 || config.hidden_widths.contains(&0) {
            return Err(Error::config("model", "layer widths must be positive"));
        }
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden_widths);
        dims.push(config.feature_dim);
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Ok(Self {
            layers,
            classifier: None,
            feature_relu: config.feature_relu,
        })
    }

    pub(crate) fn from_parts(layers: Vec<Linear>, classifier: Option<Linear>, feature_relu: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Checkpoint("model without layers".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::Checkpoint("layer widths do not chain".into()));
            }
        }
        if let Some(c) = &classifier {
            if c.input_dim() != layers.last().map(Linear::output_dim).unwrap_or(0) {
                return Err(Error::Checkpoint("classifier width mismatch".into()));
            }
        }
        Ok(Self {
            layers,
            classifier,
            feature_relu,
        })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn classifier(&self) -> Option<&Linear> {
        self.classifier.as_ref()
    }

    pub fn feature_relu(&self) -> bool {
        self.feature_relu
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.as_ref().map_or(0, Linear::output_dim)
    }

    /// Appends `new_classes` classifier outputs; existing columns are kept bit for bit.
    pub fn expand_classifier(&mut self, new_classes: usize, rng: &mut impl Rng) {
        if new_classes == 0 {
            return;
        }
        let feat = self.feature_dim();
        let fresh = Linear::init(feat, new_classes, rng);
        self.classifier = Some(match self.classifier.take() {
            None => fresh,
            Some(old) => {
                let n_old = old.output_dim();
                let n = n_old + new_classes;
                let mut w = Vec::with_capacity(feat * n);
                for r in 0..feat {
                    w.extend_from_slice(&old.weight.data()[r * n_old..(r + 1) * n_old]);
                    w.extend_from_slice(&fresh.weight.data()[r * new_classes..(r + 1) * new_classes]);
                }
                let mut b = old.bias.data().to_vec();
                b.extend_from_slice(fresh.bias.data());
                Linear {
                    weight: Tensor::matrix(feat, n, w).expect("finite"),
                    bias: Tensor::vector(b).expect("finite"),
                }
            }
        });
    }

    /// Parameters in a fixed order: each layer's weight then bias, then the classifier's.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .chain(self.classifier.as_ref())
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .chain(self.classifier.as_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Records the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut bind = |l: &Linear| (tape.leaf(l.weight.clone(), trainable), tape.leaf(l.bias.clone(), trainable));
        let layers = self.layers.iter().map(&mut bind).collect();
        let classifier = self.classifier.as_ref().map(bind);
        BoundModel {
            layers,
            classifier,
            feature_relu: self.feature_relu,
        }
    }

    /// Features of the rows of `x[n × input_dim]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last || self.feature_relu {
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        if h.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "features" });
        }
        Ok(h)
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let c = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no classifier outputs yet".into()))?;
        let out = c.forward(features)?;
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "logits" });
        }
        Ok(out)
    }

    pub fn feature_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.features(&Tensor::matrix(1, x.len(), x.to_vec())?)?.into_data())
    }
}

/// A model's parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    layers: Vec<(Var, Var)>,
    classifier: Option<(Var, Var)>,
    feature_relu: bool,
}

impl BoundModel {
    /// Same order as [`Model::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        self.layers.iter().chain(self.classifier.as_ref()).flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last || self.feature_relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let (w, b) = self
            .classifier
            .ok_or_else(|| Error::InvalidArgument("model has no classifier outputs yet".into()))?;
        let z = tape.matmul(features, w)?;
        tape.add_row(z, b)
    }
}

/// Gradient-free copy of a model used as the distillation teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel(Model);

impl FrozenModel {
    pub fn model(&self) -> &Model {
        &self.0
    }

    pub fn snapshot(&self) -> FrozenModel {
        self.clone()
    }
}

impl std::ops::Deref for FrozenModel {
    type Target = Model;

    fn deref(&self) -> &Model {
        &self.0
    }
}

/// Deep copy of `model`; nothing done to `model` afterwards affects it.
pub fn snapshot(model: &Model) -> FrozenModel {
    FrozenModel(model.clone())
}
