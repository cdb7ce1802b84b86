//! The forecasting network: an early-fusion scene encoder producing
//! per-ego-agent scene embeddings and a joint trajectory decoder over
//! flattened agent-time token sequences.

mod checkpoint;
mod decoder;
mod encoder;
mod features;
mod mask;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use decoder::{decoder_forward, decoder_forward_batch, FlatSequence, START_TOKEN_OFFSET};
pub use encoder::{encode_scene, encode_scene_batch, SceneEmbedding};
pub use features::{scene_features, SceneFeatures, FEATURE_DIM};
pub use mask::{
    agent_of, build_acausal_mask, build_decoder_mask, interval_for_frequency, position_of,
    step_of, DecoderMask,
};
pub use train::{agent_frame_seed, target_rows, teacher_inputs, train_step, TrainStepOutput};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numeric::Tensor;
use crate::tokenizer::MotionVocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub latent_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
}

/// Architecture plus sequence geometry for one trained model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub vocab: MotionVocabulary,
    /// Jointly modeled agents per scenario (N).
    pub num_agents: usize,
    /// Future steps per agent (T).
    pub horizon: usize,
    /// Interactive attention interval this variant is trained with;
    /// 1 keeps full-rate interaction, `>= horizon` is the marginal variant.
    pub attention_interval: usize,
}

impl ModelConfig {
    /// Laptop-scale defaults; trains in minutes on one CPU core.
    pub fn desk_scale() -> Self {
        Self {
            encoder: EncoderConfig {
                layers: 2,
                hidden: 64,
                ffn: 128,
                heads: 2,
                latent_queries: 16,
            },
            decoder: DecoderConfig {
                layers: 2,
                hidden: 64,
                ffn: 128,
                heads: 2,
            },
            vocab: MotionVocabulary::default(),
            num_agents: 2,
            horizon: 16,
            attention_interval: 1,
        }
    }

    /// The reference configuration the hyperparameters were taken from.
    /// Too large to train here; kept for completeness and config files.
    pub fn paper_scale() -> Self {
        Self {
            encoder: EncoderConfig {
                layers: 4,
                hidden: 256,
                ffn: 1024,
                heads: 4,
                latent_queries: 92,
            },
            decoder: DecoderConfig {
                layers: 4,
                hidden: 256,
                ffn: 1024,
                heads: 4,
            },
            vocab: MotionVocabulary::default(),
            num_agents: 2,
            horizon: 16,
            attention_interval: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        let contract = |msg: String| Err(CoreError::Contract(msg));
        if self.encoder.hidden % self.encoder.heads != 0 {
            return contract(format!(
                "encoder hidden {} not divisible by heads {}",
                self.encoder.hidden, self.encoder.heads
            ));
        }
        if self.decoder.hidden % self.decoder.heads != 0 {
            return contract(format!(
                "decoder hidden {} not divisible by heads {}",
                self.decoder.hidden, self.decoder.heads
            ));
        }
        for (name, v) in [
            ("encoder.layers", self.encoder.layers),
            ("encoder.ffn", self.encoder.ffn),
            ("encoder.latent_queries", self.encoder.latent_queries),
            ("decoder.layers", self.decoder.layers),
            ("decoder.ffn", self.decoder.ffn),
            ("num_agents", self.num_agents),
            ("horizon", self.horizon),
            ("attention_interval", self.attention_interval),
        ] {
            if v < 1 {
                return contract(format!("{name} must be >= 1"));
            }
        }
        Ok(())
    }

    /// Extended token-table size: vocabulary plus the start token.
    pub fn input_vocab(&self) -> usize {
        self.vocab.vocab_size() + 1
    }

    /// Flattened sequence length N * T.
    pub fn seq_len(&self) -> usize {
        self.num_agents * self.horizon
    }
}

/// Named parameter tensors in a stable order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[i]
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for every parameter of a store, keyed by name. Register once
/// per forward pass so gradients can be mapped back by parameter index.
pub struct ParamVars {
    vars: Vec<crate::numeric::Var>,
    index: std::collections::BTreeMap<String, usize>,
}

impl ParamVars {
    pub fn register(
        tape: &mut crate::numeric::Tape,
        params: &ParamStore,
        requires_grad: bool,
    ) -> Self {
        let mut vars = Vec::with_capacity(params.len());
        let mut index = std::collections::BTreeMap::new();
        for (i, (name, t)) in params.entries().enumerate() {
            vars.push(tape.leaf(t, requires_grad));
            index.insert(name.to_string(), i);
        }
        Self { vars, index }
    }

    pub fn get(&self, name: &str) -> crate::numeric::Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    /// Gradient slices in parameter-store order.
    pub fn gradients<'g>(&self, grads: &'g crate::numeric::Gradients) -> Vec<Option<&'g [f64]>> {
        self.vars.iter().map(|v| grads.get(*v)).collect()
    }
}

/// A model: configuration plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const INIT_STD: f64 = 0.02;

impl Model {
    /// Fresh parameters; layer norms start at identity, everything else
    /// Normal(0, 0.02).
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let eh = config.encoder.hidden;
        let f = FEATURE_DIM;

        let norm = |p: &mut ParamStore, name: &str, shape: Vec<usize>, rng: &mut R| {
            p.push(name, Tensor::randn(shape, INIT_STD, rng));
        };
        let ln = |p: &mut ParamStore, name: &str, d: usize| {
            p.push(format!("{name}.g"), Tensor::from_vec(vec![d], vec![1.0; d]));
            p.push(format!("{name}.b"), Tensor::zeros(vec![d]));
        };

        norm(&mut p, "enc.in_proj.w", vec![f, eh], rng);
        p.push("enc.in_proj.b", Tensor::zeros(vec![eh]));
        norm(&mut p, "enc.latents", vec![config.encoder.latent_queries, eh], rng);
        for layer in 0..config.encoder.layers {
            let base = format!("enc.layer{layer}");
            ln(&mut p, &format!("{base}.ln_q"), eh);
            if layer == 0 {
                ln(&mut p, &format!("{base}.ln_kv"), eh);
            }
            for w in ["wq", "wk", "wv", "wo"] {
                norm(&mut p, &format!("{base}.attn.{w}"), vec![eh, eh], rng);
            }
            ln(&mut p, &format!("{base}.ln_f"), eh);
            norm(&mut p, &format!("{base}.ffn.w1"), vec![eh, config.encoder.ffn], rng);
            p.push(format!("{base}.ffn.b1"), Tensor::zeros(vec![config.encoder.ffn]));
            norm(&mut p, &format!("{base}.ffn.w2"), vec![config.encoder.ffn, eh], rng);
            p.push(format!("{base}.ffn.b2"), Tensor::zeros(vec![eh]));
        }
        ln(&mut p, "enc.out_ln", eh);

        let dh = config.decoder.hidden;
        norm(&mut p, "dec.token_table", vec![config.input_vocab(), dh], rng);
        norm(&mut p, "dec.step_table", vec![config.horizon, dh], rng);
        norm(&mut p, "dec.agent_table", vec![config.num_agents, dh], rng);
        for layer in 0..config.decoder.layers {
            let base = format!("dec.layer{layer}");
            ln(&mut p, &format!("{base}.ln1"), dh);
            for w in ["wq", "wk", "wv", "wo"] {
                norm(&mut p, &format!("{base}.self_attn.{w}"), vec![dh, dh], rng);
            }
            ln(&mut p, &format!("{base}.ln2"), dh);
            norm(&mut p, &format!("{base}.cross_attn.wq"), vec![dh, dh], rng);
            norm(&mut p, &format!("{base}.cross_attn.wk"), vec![eh, dh], rng);
            norm(&mut p, &format!("{base}.cross_attn.wv"), vec![eh, dh], rng);
            norm(&mut p, &format!("{base}.cross_attn.wo"), vec![dh, dh], rng);
            ln(&mut p, &format!("{base}.ln3"), dh);
            norm(&mut p, &format!("{base}.ffn.w1"), vec![dh, config.decoder.ffn], rng);
            p.push(format!("{base}.ffn.b1"), Tensor::zeros(vec![config.decoder.ffn]));
            norm(&mut p, &format!("{base}.ffn.w2"), vec![config.decoder.ffn, dh], rng);
            p.push(format!("{base}.ffn.b2"), Tensor::zeros(vec![dh]));
        }
        ln(&mut p, "dec.out_ln", dh);
        norm(&mut p, "dec.out_proj.w", vec![dh, config.vocab.vocab_size()], rng);
        p.push("dec.out_proj.b", Tensor::zeros(vec![config.vocab.vocab_size()]));

        Ok(Self { config, params: p })
    }
}
