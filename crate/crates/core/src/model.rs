//! Text encoder and backbone bundled with their parameters.

use crate::backbone::{forward, init_backbone_params, ConditionBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::text::{encode_batch, init_text_params, TextConfig, Vocabulary};
use crate::tokens::TokenGrid;

pub const TEXT_PREFIX: &str = "text.";
pub const BACKBONE_PREFIX: &str = "bb.";

#[derive(Clone, Debug)]
pub struct T2iModel<S> {
    pub model: ModelConfig,
    pub text: TextConfig,
    pub vocab: Vocabulary,
    /// Pixel side of the images the grids come from.
    pub image_size: usize,
    pub params: ParamStore<S>,
}

impl<S: Scalar> T2iModel<S> {
    pub fn new(model: ModelConfig, text: TextConfig, vocab: Vocabulary, image_size: usize, seed: u64) -> Result<Self> {
        model.validate()?;
        text.validate()?;
        if text.width != model.text_width {
            return Err(Error::Config(format!(
                "text width {} does not match backbone text width {}",
                text.width, model.text_width
            )));
        }
        if vocab.len() != text.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens for a text config expecting {}",
                vocab.len(),
                text.vocab_size
            )));
        }
        let mut params = ParamStore::new();
        init_text_params(&text, &mut params, TEXT_PREFIX, seed);
        init_backbone_params(&model, &mut params, BACKBONE_PREFIX, seed.wrapping_add(1));
        Ok(Self {
            model,
            text,
            vocab,
            image_size,
            params,
        })
    }

    /// Same architecture with externally supplied parameters; the layout is checked.
    pub fn with_params(&self, params: ParamStore<S>) -> Result<Self> {
        self.params.check_layout(&params)?;
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn tokenize(&self, caption: &str) -> Vec<u32> {
        self.vocab.tokenize(caption, self.text.max_len)
    }

    pub fn null_ids(&self) -> Vec<u32> {
        self.vocab.null_ids(self.text.max_len)
    }

    pub fn fully_masked(&self) -> TokenGrid {
        TokenGrid::fully_masked(self.model.grid_h, self.model.grid_w, self.model.codebook_k)
    }

    /// Condition bundle with the training-time micro-conditions at `preference`.
    pub fn bundle(&self, preference: f64, rate: crate::schedule::MaskRate) -> ConditionBundle {
        ConditionBundle::new(self.image_size, preference, rate)
    }

    /// Logits `[B, N, K]` inside a graph.
    pub fn logits_var<'g>(
        &self,
        g: &'g Graph<S>,
        grids: &[TokenGrid],
        text_ids: &[Vec<u32>],
        bundles: &[ConditionBundle],
    ) -> Result<Var<'g, S>> {
        let text = encode_batch(g, &self.text, &self.params, TEXT_PREFIX, text_ids)?;
        forward(g, &self.model, &self.params, BACKBONE_PREFIX, grids, text, bundles)
    }

    /// Inference logits `[B, N, K]`.
    pub fn logits(&self, grids: &[TokenGrid], text_ids: &[Vec<u32>], bundles: &[ConditionBundle]) -> Result<Tensor<S>> {
        let g = Graph::inference();
        Ok((*self.logits_var(&g, grids, text_ids, bundles)?.value()).clone())
    }

    pub fn cast<T: Scalar>(&self) -> T2iModel<T> {
        T2iModel {
            model: self.model.clone(),
            text: self.text.clone(),
            vocab: self.vocab.clone(),
            image_size: self.image_size,
            params: self.params.cast(),
        }
    }
}
