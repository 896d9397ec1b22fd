//! The encoder-decoder dialogue model and its parameter layout.

mod config;
mod decoder;
mod encoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DropoutGranularity, ModelConfig};
pub use decoder::DecoderLayer;
pub use encoder::{
    fusion_branch, modality_dropout_fuse, Branch, ContextEncoding, EmbeddedUtterance, EncoderLayer, Fusion,
    LayerTrace, UtteranceTrace,
};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{normal, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the initial history matrix.
pub const HISTORY_INIT_STD: f64 = 0.02;

/// All weights plus the ids that locate them in the parameter store.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f64> {
    config: ModelConfig,
    params: ParamStore<T>,
    embedding: ParamId,
    image_proj: Linear,
    history: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    output: Option<ParamId>,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialised model. The same config and seed always
    /// give the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = &config;
        let mut store = ParamStore::new();
        let embedding = store.add(
            "embedding",
            normal(rng, &[c.vocab_size, c.d_model], (c.d_model as f64).powf(-0.5)),
        )?;
        let image_proj = Linear::new(&mut store, rng, "image_proj", c.d_img, c.d_model, true)?;
        let history = store.add("history", normal(rng, &[c.h_len, c.d_model], HISTORY_INIT_STD))?;
        let encoder = (0..c.n_layers)
            .map(|l| EncoderLayer::new(&mut store, rng, &format!("encoder.{l}"), c))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..c.n_layers)
            .map(|l| DecoderLayer::new(&mut store, rng, &format!("decoder.{l}"), c))
            .collect::<Result<Vec<_>>>()?;
        let output = if c.tie_output {
            None
        } else {
            Some(store.add(
                "output",
                crate::params::xavier_uniform(rng, c.d_model, c.vocab_size),
            )?)
        };
        Ok(Model {
            config,
            params: store,
            embedding,
            image_proj,
            history,
            encoder,
            decoder,
            output,
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). Every
    /// parameter of the layout must be present with the right shape.
    pub fn from_named(config: ModelConfig, tensors: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            model.params.assign(id, t.data())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// The embedding table shared by encoder inputs, decoder inputs and
    /// (when tied) the output projection.
    pub fn embedding_param(&self) -> ParamId {
        self.embedding
    }

    /// The trainable initial history matrix.
    pub fn history_param(&self) -> ParamId {
        self.history
    }

    pub fn image_projection(&self) -> &Linear {
        &self.image_proj
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer] {
        &self.decoder
    }

    /// Freezes or unfreezes the history parameter.
    pub fn set_history_trainable(&mut self, trainable: bool) {
        self.params.set_trainable(self.history, trainable);
    }
}
