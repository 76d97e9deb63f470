use super::{ModelConfig, ModelError, Result};
use crate::rng::{rng_for, Stream};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub const INIT_STD: f64 = 0.02;

/// Unit of freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ParamGroup {
    TokenEmbedding,
    PositionalEmbedding,
    SegmentEmbedding,
    Layer(usize),
    /// Mean pooling has no parameters; the group exists so masks can name it.
    Pooler,
    Classifier,
    MlmHead,
}

impl ParamGroup {
    pub fn all(config: &ModelConfig) -> Vec<ParamGroup> {
        let mut out = vec![
            ParamGroup::TokenEmbedding,
            ParamGroup::PositionalEmbedding,
            ParamGroup::SegmentEmbedding,
        ];
        out.extend((0..config.num_layers).map(ParamGroup::Layer));
        out.extend([
            ParamGroup::Pooler,
            ParamGroup::Classifier,
            ParamGroup::MlmHead,
        ]);
        out
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::TokenEmbedding => f.write_str("token_embedding"),
            ParamGroup::PositionalEmbedding => f.write_str("positional_embedding"),
            ParamGroup::SegmentEmbedding => f.write_str("segment_embedding"),
            ParamGroup::Layer(i) => write!(f, "layer_{i}"),
            ParamGroup::Pooler => f.write_str("pooler"),
            ParamGroup::Classifier => f.write_str("classifier"),
            ParamGroup::MlmHead => f.write_str("mlm_head"),
        }
    }
}

impl FromStr for ParamGroup {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "token_embedding" => ParamGroup::TokenEmbedding,
            "positional_embedding" => ParamGroup::PositionalEmbedding,
            "segment_embedding" => ParamGroup::SegmentEmbedding,
            "pooler" => ParamGroup::Pooler,
            "classifier" => ParamGroup::Classifier,
            "mlm_head" => ParamGroup::MlmHead,
            _ => s
                .strip_prefix("layer_")
                .and_then(|n| n.parse().ok())
                .map(ParamGroup::Layer)
                .ok_or_else(|| ModelError::UnknownGroup(s.to_owned()))?,
        })
    }
}

impl From<ParamGroup> for String {
    fn from(g: ParamGroup) -> String {
        g.to_string()
    }
}

impl TryFrom<String> for ParamGroup {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Which training phase a freeze mask is applied for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Per-group frozen flag. Groups absent from the map are trainable.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FreezeMask {
    groups: BTreeMap<ParamGroup, bool>,
}

impl FreezeMask {
    pub fn none(config: &ModelConfig) -> Self {
        Self {
            groups: ParamGroup::all(config)
                .into_iter()
                .map(|g| (g, false))
                .collect(),
        }
    }

    /// Embeddings and the lower half of the encoder stack frozen.
    pub fn default_for(config: &ModelConfig) -> Self {
        let mut mask = Self::none(config);
        mask.set(ParamGroup::TokenEmbedding, true);
        mask.set(ParamGroup::PositionalEmbedding, true);
        mask.set(ParamGroup::SegmentEmbedding, true);
        for i in 0..config.num_layers / 2 {
            mask.set(ParamGroup::Layer(i), true);
        }
        mask
    }

    /// Everything frozen except `trainable`.
    pub fn only(config: &ModelConfig, trainable: &[ParamGroup]) -> Self {
        let mut mask = Self::none(config);
        for g in ParamGroup::all(config) {
            mask.set(g, !trainable.contains(&g));
        }
        mask
    }

    pub fn from_frozen(config: &ModelConfig, frozen: &[ParamGroup]) -> Result<Self> {
        let mut mask = Self::none(config);
        for &g in frozen {
            mask.set(g, true);
        }
        mask.validate(config)?;
        Ok(mask)
    }

    pub fn set(&mut self, group: ParamGroup, frozen: bool) {
        self.groups.insert(group, frozen);
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.groups.get(&group).copied().unwrap_or(false)
    }

    pub fn frozen_groups(&self) -> Vec<ParamGroup> {
        self.groups
            .iter()
            .filter(|(_, &f)| f)
            .map(|(g, _)| *g)
            .collect()
    }

    /// Every named group must exist in `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for g in self.groups.keys() {
            if let ParamGroup::Layer(i) = g {
                if *i >= config.num_layers {
                    return Err(ModelError::UnknownGroup(format!(
                        "{g} (model has {} layers)",
                        config.num_layers
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Name, group, shape and initialiser of every array, in storage order.
fn layout(config: &ModelConfig) -> Vec<(String, ParamGroup, Vec<usize>, Init)> {
    let (d, ff, v, k) = (
        config.d_model,
        config.d_ff,
        config.vocab_size,
        config.num_labels,
    );
    let mut out = vec![
        (
            "token_embedding".to_owned(),
            ParamGroup::TokenEmbedding,
            vec![v, d],
            Init::Normal,
        ),
        (
            "positional_embedding".to_owned(),
            ParamGroup::PositionalEmbedding,
            vec![config.max_tokens(), d],
            Init::Normal,
        ),
        (
            "segment_embedding".to_owned(),
            ParamGroup::SegmentEmbedding,
            vec![2, d],
            Init::Normal,
        ),
    ];
    for i in 0..config.num_layers {
        let g = ParamGroup::Layer(i);
        let entries: [(&str, Vec<usize>, Init); LAYER_ARRAYS] = [
            ("attention.query.weight", vec![d, d], Init::Normal),
            ("attention.query.bias", vec![d], Init::Zeros),
            ("attention.key.weight", vec![d, d], Init::Normal),
            ("attention.key.bias", vec![d], Init::Zeros),
            ("attention.value.weight", vec![d, d], Init::Normal),
            ("attention.value.bias", vec![d], Init::Zeros),
            ("attention.output.weight", vec![d, d], Init::Normal),
            ("attention.output.bias", vec![d], Init::Zeros),
            ("attention.norm.gamma", vec![d], Init::Ones),
            ("attention.norm.beta", vec![d], Init::Zeros),
            ("ffn.inner.weight", vec![d, ff], Init::Normal),
            ("ffn.inner.bias", vec![ff], Init::Zeros),
            ("ffn.outer.weight", vec![ff, d], Init::Normal),
            ("ffn.outer.bias", vec![d], Init::Zeros),
            ("ffn.norm.gamma", vec![d], Init::Ones),
            ("ffn.norm.beta", vec![d], Init::Zeros),
        ];
        out.extend(
            entries
                .into_iter()
                .map(|(n, s, init)| (format!("layer_{i}.{n}"), g, s, init)),
        );
    }
    out.extend([
        (
            "classifier.weight".to_owned(),
            ParamGroup::Classifier,
            vec![d, k],
            Init::Normal,
        ),
        (
            "classifier.bias".to_owned(),
            ParamGroup::Classifier,
            vec![k],
            Init::Zeros,
        ),
        (
            "mlm_head.weight".to_owned(),
            ParamGroup::MlmHead,
            vec![d, v],
            Init::Normal,
        ),
        (
            "mlm_head.bias".to_owned(),
            ParamGroup::MlmHead,
            vec![v],
            Init::Zeros,
        ),
    ]);
    out
}

/// `(name, shape)` of every array `config` implies, in storage order.
pub(crate) fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(config)
        .into_iter()
        .map(|(name, _, shape, _)| (name, shape))
        .collect()
}

pub(crate) const LAYER_ARRAYS: usize = 16;
pub(crate) const EMBEDDING_ARRAYS: usize = 3;

/// Offsets into [`Model::params`] for the fixed array order.
pub(crate) mod slot {
    pub const TOKEN: usize = 0;
    pub const POSITION: usize = 1;
    pub const SEGMENT: usize = 2;

    pub const Q_W: usize = 0;
    pub const Q_B: usize = 1;
    pub const K_W: usize = 2;
    pub const K_B: usize = 3;
    pub const V_W: usize = 4;
    pub const V_B: usize = 5;
    pub const O_W: usize = 6;
    pub const O_B: usize = 7;
    pub const LN1_G: usize = 8;
    pub const LN1_B: usize = 9;
    pub const FF1_W: usize = 10;
    pub const FF1_B: usize = 11;
    pub const FF2_W: usize = 12;
    pub const FF2_B: usize = 13;
    pub const LN2_G: usize = 14;
    pub const LN2_B: usize = 15;
}

/// Configuration, parameters and freeze mask of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub freeze: FreezeMask,
}

impl Model {
    /// Weights drawn from N(0, 0.02²); biases zero; norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, Stream::Init, 0, 0);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = layout(&config)
            .into_iter()
            .map(|(name, group, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Param {
                    name,
                    group,
                    shape,
                    data,
                }
            })
            .collect();
        let freeze = FreezeMask::none(&config);
        Ok(Self {
            config,
            params,
            freeze,
        })
    }

    /// Rebuilds a model from named arrays, checking each against `config`.
    pub fn from_arrays(
        config: ModelConfig,
        mut arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
        freeze: FreezeMask,
    ) -> Result<Self> {
        config.validate()?;
        freeze.validate(&config)?;
        let mut params = Vec::new();
        for (name, group, shape, _) in layout(&config) {
            let (found, data) = arrays
                .remove(&name)
                .ok_or_else(|| ModelError::MissingArray(name.clone()))?;
            if found != shape {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: shape,
                    found,
                });
            }
            params.push(Param {
                name,
                group,
                shape,
                data,
            });
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(ModelError::UnexpectedArray(extra.clone()));
        }
        Ok(Self {
            config,
            params,
            freeze,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub(crate) fn layer_slot(&self, layer: usize, offset: usize) -> usize {
        EMBEDDING_ARRAYS + layer * LAYER_ARRAYS + offset
    }

    pub(crate) fn classifier_slots(&self) -> (usize, usize) {
        let base = EMBEDDING_ARRAYS + self.config.num_layers * LAYER_ARRAYS;
        (base, base + 1)
    }

    pub(crate) fn mlm_slots(&self) -> (usize, usize) {
        let base = EMBEDDING_ARRAYS + self.config.num_layers * LAYER_ARRAYS + 2;
        (base, base + 1)
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        !self.freeze.is_frozen(self.params[index].group)
    }

    /// Installs `mask` for a training phase. Fine-tuning with a frozen
    /// classifier is refused.
    pub fn apply_freeze(&mut self, mask: FreezeMask, phase: Phase) -> Result<()> {
        mask.validate(&self.config)?;
        if phase == Phase::Finetune && mask.is_frozen(ParamGroup::Classifier) {
            return Err(ModelError::FrozenClassifier);
        }
        self.freeze = mask;
        Ok(())
    }

    /// Replaces the classifier with a freshly initialised one of `num_labels`
    /// outputs, e.g. when fine-tuning a pretrained encoder on a vocabulary of
    /// a different size.
    pub fn reset_classifier(&mut self, num_labels: usize, seed: u64) -> Result<()> {
        let mut config = self.config.clone();
        config.num_labels = num_labels;
        config.validate()?;
        let fresh = Model::init(config.clone(), seed)?;
        let (w, b) = self.classifier_slots();
        self.params[w] = fresh.params[w].clone();
        self.params[b] = fresh.params[b].clone();
        self.config = config;
        Ok(())
    }
}
