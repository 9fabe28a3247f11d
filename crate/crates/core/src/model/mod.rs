//! AWD-LSTM style encoder with a swappable head.
//!
//! Parameters live in ordered groups `[embedding, lstm_0, …, lstm_{L-1},
//! head]`, which is also the bottom-to-top order used for freezing and for
//! discriminative learning rates.

mod encoder;
mod gradcheck;
mod heads;
mod masks;

pub use encoder::{EncoderOutput, EncoderState};
pub use gradcheck::{encoder_gradient_check, tiny_config, EncoderCheck};
pub use heads::{concat_pool, Prediction};
pub use masks::DropoutMasks;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId, Param, ParamRef, ParameterGroup, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{0}")]
    WrongHead(String),
    #[error("missing parameter tensor {0}")]
    MissingTensor(String),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("state does not match configuration: {0}")]
    StateMismatch(String),
}

impl From<ModelError> for TensorError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t,
            other => TensorError::InvalidArgument(other.to_string()),
        }
    }
}

fn default_embed_dim() -> usize {
    64
}
fn default_hidden_dim() -> usize {
    128
}
fn default_num_layers() -> usize {
    3
}
fn default_weight_drop() -> f64 {
    0.5
}
fn default_embed_drop() -> f64 {
    0.1
}
fn default_variational_drop() -> f64 {
    0.3
}
fn default_true() -> bool {
    true
}

/// Encoder sizes and dropout rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_num_layers")]
    pub num_layers: usize,
    #[serde(default = "default_weight_drop")]
    pub weight_drop_p: f64,
    #[serde(default = "default_embed_drop")]
    pub embed_drop_p: f64,
    #[serde(default = "default_variational_drop")]
    pub variational_drop_p: f64,
    #[serde(default = "default_true")]
    pub tie_weights: bool,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: default_embed_dim(),
            hidden_dim: default_hidden_dim(),
            num_layers: default_num_layers(),
            weight_drop_p: default_weight_drop(),
            embed_drop_p: default_embed_drop(),
            variational_drop_p: default_variational_drop(),
            tie_weights: true,
        }
    }

    /// Same sizes with every dropout probability at zero.
    pub fn without_dropout(mut self) -> Self {
        self.weight_drop_p = 0.0;
        self.embed_drop_p = 0.0;
        self.variational_drop_p = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.num_layers == 0
        {
            return Err(ModelError::Config("sizes must be positive".into()));
        }
        for (name, p) in [
            ("weight_drop_p", self.weight_drop_p),
            ("embed_drop_p", self.embed_drop_p),
            ("variational_drop_p", self.variational_drop_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ModelError::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Output width of layer `l`. The last layer emits `embed_dim` when the
    /// decoder is tied to the embedding.
    pub fn layer_out(&self, l: usize) -> usize {
        if l + 1 == self.num_layers && self.tie_weights {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.embed_dim
        } else {
            self.layer_out(l - 1)
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layer_out(self.num_layers - 1)
    }
}

fn default_head_hidden() -> usize {
    50
}

/// Output layer attached to the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadSpec {
    /// Language-model decoder: logits over the vocabulary.
    LmDecoder,
    /// Concat pooling → linear → ReLU → linear(n_classes).
    Classifier {
        n_classes: usize,
        #[serde(default = "default_head_hidden")]
        hidden: usize,
    },
    /// Concat pooling → linear → ReLU → linear(1) → tanh.
    Regressor {
        #[serde(default = "default_head_hidden")]
        hidden: usize,
    },
}

impl HeadSpec {
    pub fn classifier(n_classes: usize) -> Self {
        HeadSpec::Classifier {
            n_classes,
            hidden: default_head_hidden(),
        }
    }

    pub fn regressor() -> Self {
        HeadSpec::Regressor {
            hidden: default_head_hidden(),
        }
    }

    /// Width of the head output.
    pub fn output_width(&self, config: &EncoderConfig) -> usize {
        match self {
            HeadSpec::LmDecoder => config.vocab_size,
            HeadSpec::Classifier { n_classes, .. } => *n_classes,
            HeadSpec::Regressor { .. } => 1,
        }
    }

    pub fn is_pooling(&self) -> bool {
        !matches!(self, HeadSpec::LmDecoder)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            HeadSpec::LmDecoder => "lm_decoder",
            HeadSpec::Classifier { .. } => "classifier",
            HeadSpec::Regressor { .. } => "regressor",
        }
    }
}

/// Parameter nodes of one model inside one graph, indexed like the groups.
#[derive(Clone, Debug)]
pub struct Bound {
    nodes: Vec<Vec<NodeId>>,
}

impl Bound {
    pub fn get(&self, group: usize, index: usize) -> NodeId {
        self.nodes[group][index]
    }
}

/// Encoder plus exactly one head.
#[derive(Clone, Debug)]
pub struct SequenceModel {
    config: EncoderConfig,
    head: HeadSpec,
    groups: Vec<ParameterGroup>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, bound, rng)
}

fn head_params(
    config: &EncoderConfig,
    spec: &HeadSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Param>, ModelError> {
    let e = config.output_dim();
    Ok(match spec {
        HeadSpec::LmDecoder => {
            let mut ps = vec![Param::new("head.bias", Tensor::zeros(&[config.vocab_size]))];
            if !config.tie_weights {
                let b = 1.0 / (e as f64).sqrt();
                ps.push(Param::new(
                    "head.weight",
                    uniform(&[config.vocab_size, e], b, rng),
                ));
            }
            ps
        }
        HeadSpec::Classifier { .. } | HeadSpec::Regressor { .. } => {
            let (hidden, out) = match *spec {
                HeadSpec::Classifier { n_classes, hidden } => (hidden, n_classes),
                HeadSpec::Regressor { hidden } => (hidden, 1),
                HeadSpec::LmDecoder => unreachable!(),
            };
            if hidden == 0 || out == 0 {
                return Err(ModelError::Config("head widths must be positive".into()));
            }
            let fan1 = 3 * e;
            let b1 = 1.0 / (fan1 as f64).sqrt();
            let b2 = 1.0 / (hidden as f64).sqrt();
            vec![
                Param::new("head.w1", uniform(&[fan1, hidden], b1, rng)),
                Param::new("head.b1", uniform(&[hidden], b1, rng)),
                Param::new("head.w2", uniform(&[hidden, out], b2, rng)),
                Param::new("head.b2", uniform(&[out], b2, rng)),
            ]
        }
    })
}

impl SequenceModel {
    /// Fresh model with seeded uniform initialization.
    pub fn new(config: EncoderConfig, head: HeadSpec, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups = vec![ParameterGroup::new(
            "embedding",
            vec![Param::new(
                "embedding.weight",
                uniform(&[config.vocab_size, config.embed_dim], 0.1, &mut rng),
            )],
        )];
        for l in 0..config.num_layers {
            let (i, o) = (config.layer_in(l), config.layer_out(l));
            let b = 1.0 / (o as f64).sqrt();
            groups.push(ParameterGroup::new(
                format!("lstm_{l}"),
                vec![
                    Param::new(format!("lstm_{l}.w_ih"), uniform(&[i, 4 * o], b, &mut rng)),
                    Param::new(format!("lstm_{l}.w_hh"), uniform(&[o, 4 * o], b, &mut rng)),
                    Param::new(format!("lstm_{l}.bias"), uniform(&[4 * o], b, &mut rng)),
                ],
            ));
        }
        groups.push(ParameterGroup::new(
            "head",
            head_params(&config, &head, &mut rng)?,
        ));
        Ok(Self {
            config,
            head,
            groups,
        })
    }

    /// Rebuilds a model from named tensors, e.g. out of a checkpoint.
    pub fn from_tensors(
        config: EncoderConfig,
        head: HeadSpec,
        tensors: &[(String, Tensor)],
    ) -> Result<Self, ModelError> {
        let mut model = Self::new(config, head, 0)?;
        for group in &mut model.groups {
            for p in &mut group.tensors {
                let (_, t) = tensors
                    .iter()
                    .find(|(n, _)| *n == p.name)
                    .ok_or_else(|| ModelError::MissingTensor(p.name.clone()))?;
                if t.shape() != p.value.shape() {
                    return Err(ModelError::Config(format!(
                        "{}: expected shape {:?}, found {:?}",
                        p.name,
                        p.value.shape(),
                        t.shape()
                    )));
                }
                p.value = t.clone();
            }
        }
        let expected: usize = model.groups.iter().map(|g| g.tensors.len()).sum();
        if tensors.len() != expected {
            return Err(ModelError::Config(format!(
                "{} tensors supplied, model has {expected}",
                tensors.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn head(&self) -> &HeadSpec {
        &self.head
    }

    pub fn groups(&self) -> &[ParameterGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParameterGroup] {
        &mut self.groups
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }

    pub fn head_group(&self) -> usize {
        self.groups.len() - 1
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.groups
            .iter()
            .flat_map(|g| &g.tensors)
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.groups
            .iter()
            .flat_map(|g| &g.tensors)
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.groups
            .iter_mut()
            .flat_map(|g| &mut g.tensors)
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    /// SHA-256 over every encoder tensor (all groups but the head).
    pub fn encoder_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.groups[..self.head_group()]
            .iter()
            .flat_map(|g| &g.tensors)
        {
            h.update(p.name.as_bytes());
            p.value.feed_digest(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Replaces the head, leaving every encoder tensor untouched.
    pub fn swap_head(&mut self, spec: HeadSpec, seed: u64) -> Result<(), ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = head_params(&self.config, &spec, &mut rng)?;
        let head = self.head_group();
        self.groups[head] = ParameterGroup::new("head", params);
        self.head = spec;
        Ok(())
    }

    /// Marks exactly the groups in `trainable` as trainable.
    pub fn set_trainable(&mut self, trainable: &BTreeSet<usize>) {
        for (i, g) in self.groups.iter_mut().enumerate() {
            g.trainable = trainable.contains(&i);
        }
    }

    pub fn zero_grad(&mut self) {
        self.groups.iter_mut().for_each(ParameterGroup::zero_grad);
    }

    /// Adds every parameter to `g`; frozen groups enter as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let nodes = self
            .groups
            .iter()
            .enumerate()
            .map(|(gi, group)| {
                group
                    .tensors
                    .iter()
                    .enumerate()
                    .map(|(ti, p)| {
                        g.param(
                            ParamRef {
                                group: gi,
                                index: ti,
                            },
                            &p.value,
                            group.trainable,
                        )
                    })
                    .collect()
            })
            .collect();
        Bound { nodes }
    }

    /// Same as [`bind`](Self::bind) but nothing requires a gradient.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let nodes = self
            .groups
            .iter()
            .map(|group| {
                group
                    .tensors
                    .iter()
                    .map(|p| g.constant(p.value.clone()))
                    .collect()
            })
            .collect();
        Bound { nodes }
    }

    /// Binding over existing graph nodes, one per tensor in group order. Used
    /// when the graph's inputs are the parameters themselves, as in a
    /// gradient check.
    pub fn bound_from(&self, nodes: &[NodeId]) -> Bound {
        let mut it = nodes.iter().copied();
        Bound {
            nodes: self
                .groups
                .iter()
                .map(|g| g.tensors.iter().map_while(|_| it.next()).collect())
                .collect(),
        }
    }

    /// Accumulates parameter gradients from a graph after backward. Trainable
    /// tensors the loss did not reach get zero gradients.
    pub fn collect_grads(&mut self, g: &Graph) -> Result<(), ModelError> {
        for (key, grad) in g.param_grads() {
            self.groups[key.group].tensors[key.index].accumulate_grad(grad)?;
        }
        for group in self.groups.iter_mut().filter(|g| g.trainable) {
            for p in &mut group.tensors {
                if p.grad.is_none() {
                    p.grad = Some(Tensor::zeros(p.value.shape()));
                }
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.groups.iter().map(ParameterGroup::num_values).sum()
    }
}
