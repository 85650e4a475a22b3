//! Caption vocabulary and a small trainable transformer text encoder.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::layers::{
    attend, attention_weights, feed_forward, init_feed_forward, init_layer_norm, init_linear, layer_norm, linear,
    merge_heads, split_heads,
};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const UNCOND: &str = "<uncond>";

/// Bijective token ↔ id table. Ids 0, 1, 2 are PAD, UNK and UNCOND.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;
    pub const UNCOND_ID: u32 = 2;

    /// Sentinels followed by `words` in sorted order, duplicates removed.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut sorted: Vec<String> = words.into_iter().map(|w| w.to_lowercase()).collect();
        sorted.sort();
        sorted.dedup();
        let mut tokens = vec![PAD.to_string(), UNK.to_string(), UNCOND.to_string()];
        tokens.extend(sorted.into_iter().filter(|w| ![PAD, UNK, UNCOND].contains(&w.as_str())));
        Self::from_tokens(tokens).expect("distinct tokens")
    }

    /// Vocabulary of the synthetic caption grammar.
    pub fn captions() -> Self {
        Self::from_words(crate::datagen::caption_words())
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let ids: BTreeMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        if ids.len() != tokens.len() {
            return Err(Error::Format("vocabulary contains duplicate tokens".into()));
        }
        Ok(Self { ids, tokens })
    }

    /// Rebuilds from a token → id table; ids must be exactly `0..len` with the sentinels first.
    pub fn from_table(table: &BTreeMap<String, u32>) -> Result<Self> {
        let mut tokens = vec![String::new(); table.len()];
        for (t, &id) in table {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Format(format!("vocabulary id {id} out of range")))?;
            *slot = t.clone();
        }
        if tokens.iter().any(|t| t.is_empty()) || tokens.len() < 3 {
            return Err(Error::Format("vocabulary ids are not contiguous".into()));
        }
        if tokens[0] != PAD || tokens[1] != UNK || tokens[2] != UNCOND {
            return Err(Error::Format("vocabulary sentinels are not at ids 0, 1, 2".into()));
        }
        Self::from_tokens(tokens)
    }

    pub fn table(&self) -> &BTreeMap<String, u32> {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Lowercased whitespace split, unknown words to UNK, padded or truncated to `max_len`.
    pub fn tokenize(&self, caption: &str, max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = caption
            .split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(Self::UNK_ID))
            .take(max_len)
            .collect();
        ids.resize(max_len, Self::PAD_ID);
        ids
    }

    /// `[UNCOND, PAD, ...]`.
    pub fn null_ids(&self, max_len: usize) -> Vec<u32> {
        let mut ids = vec![Self::PAD_ID; max_len];
        if let Some(first) = ids.first_mut() {
            *first = Self::UNCOND_ID;
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub max_len: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab_size: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            max_len: 16,
            width: 128,
            heads: 4,
            layers: 2,
            vocab_size: Vocabulary::captions().len(),
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "text encoder needs positive length and a width divisible by heads (got {}, {}, {})",
                self.max_len, self.width, self.heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("text vocabulary must hold the three sentinels".into()));
        }
        Ok(())
    }
}

/// Unpooled `[L, D]` sequence and its pooled `[D]` vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<S> {
    pub sequence: Tensor<S>,
    pub pooled: Tensor<S>,
}

/// Graph-level text encoding of a batch.
#[derive(Clone, Copy)]
pub struct TextVars<'g, S: Scalar> {
    /// `[B, L, D]`.
    pub sequence: Var<'g, S>,
    /// `[B, D]`.
    pub pooled: Var<'g, S>,
}

pub fn init_text_params<S: Scalar>(config: &TextConfig, p: &mut ParamStore<S>, prefix: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.width;
    p.init_normal(&format!("{prefix}tok_emb"), &[config.vocab_size, d], 0.02f64.sqrt(), &mut rng);
    p.init_normal(&format!("{prefix}pos_emb"), &[config.max_len, d], 0.02f64.sqrt(), &mut rng);
    for l in 0..config.layers {
        let n = format!("{prefix}layer{l}");
        init_layer_norm(p, &format!("{n}.ln1"), d);
        init_linear(p, &format!("{n}.qkv"), d, 3 * d, true, &mut rng);
        init_linear(p, &format!("{n}.out"), d, d, true, &mut rng);
        init_layer_norm(p, &format!("{n}.ln2"), d);
        init_feed_forward(p, &format!("{n}.ff"), d, 4 * d, &mut rng);
    }
    init_layer_norm(p, &format!("{prefix}ln_final"), d);
}

/// Encodes a batch of id sequences, each no longer than `max_len` and of equal length.
pub fn encode_batch<'g, S: Scalar>(
    g: &'g Graph<S>,
    config: &TextConfig,
    p: &ParamStore<S>,
    prefix: &str,
    batch: &[Vec<u32>],
) -> Result<TextVars<'g, S>> {
    let b = batch.len();
    let l = batch.first().map(Vec::len).ok_or_else(|| invalid!("empty text batch"))?;
    if l == 0 || l > config.max_len || batch.iter().any(|ids| ids.len() != l) {
        return Err(shape_err!("text sequences must share a length in [1, {}]", config.max_len));
    }
    let flat: Vec<usize> = batch.iter().flatten().map(|&i| i as usize).collect();
    if let Some(&bad) = flat.iter().find(|&&i| i >= config.vocab_size) {
        return Err(invalid!("token id {bad} outside vocabulary of {}", config.vocab_size));
    }
    let d = config.width;
    let tok = g.param(p, &format!("{prefix}tok_emb"))?.embedding(&flat)?.reshape(&[b, l, d])?;
    let pos = g.param(p, &format!("{prefix}pos_emb"))?.narrow(0, 0, l)?;
    let mut x = tok.add(pos)?;

    // Key-padding bias; a sequence with no content attends over all positions.
    let mut bias = vec![S::zero(); b * l];
    let mut pool = vec![S::zero(); b * l];
    for (bi, ids) in batch.iter().enumerate() {
        let content = ids.iter().filter(|&&i| i != Vocabulary::PAD_ID).count();
        let kept = if content == 0 { l } else { content };
        for (j, &id) in ids.iter().enumerate() {
            if content == 0 || id != Vocabulary::PAD_ID {
                pool[bi * l + j] = S::one() / S::of(kept as f64);
            } else {
                bias[bi * l + j] = S::of(-1e9);
            }
        }
    }
    let bias = Tensor::new(&[b, 1, 1, l], bias)?;

    for layer in 0..config.layers {
        let n = format!("{prefix}layer{layer}");
        let h = layer_norm(g, p, &format!("{n}.ln1"), x)?;
        let qkv = linear(g, p, &format!("{n}.qkv"), h)?;
        let q = split_heads(qkv.narrow(2, 0, d)?, config.heads)?;
        let k = split_heads(qkv.narrow(2, d, d)?, config.heads)?;
        let v = split_heads(qkv.narrow(2, 2 * d, d)?, config.heads)?;
        let w = attention_weights(q, k, Some(&bias))?;
        let a = linear(g, p, &format!("{n}.out"), merge_heads(attend(w, v)?)?)?;
        x = x.add(a)?;
        let h = layer_norm(g, p, &format!("{n}.ln2"), x)?;
        x = x.add(feed_forward(g, p, &format!("{n}.ff"), h)?)?;
    }
    let sequence = layer_norm(g, p, &format!("{prefix}ln_final"), x)?;
    let weights = g.constant(Tensor::new(&[b, 1, l], pool)?);
    let pooled = weights.bmm(sequence, false)?.reshape(&[b, d])?;
    Ok(TextVars { sequence, pooled })
}

/// Standalone encoder: config, vocabulary and parameters (names prefixed `text.`).
#[derive(Clone, Debug)]
pub struct TextEncoder<S> {
    pub config: TextConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<S>,
}

impl<S: Scalar> TextEncoder<S> {
    pub const PREFIX: &'static str = "text.";

    pub fn new(config: TextConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but the config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut params = ParamStore::new();
        init_text_params(&config, &mut params, Self::PREFIX, seed);
        Ok(Self { config, vocab, params })
    }

    pub fn tokenize(&self, caption: &str) -> Vec<u32> {
        self.vocab.tokenize(caption, self.config.max_len)
    }

    /// Encodes one id sequence of length at most `max_len`.
    pub fn encode(&self, ids: &[u32]) -> Result<TextEmbedding<S>> {
        Ok(self.encode_many(&[ids.to_vec()])?.remove(0))
    }

    pub fn encode_many(&self, batch: &[Vec<u32>]) -> Result<Vec<TextEmbedding<S>>> {
        let g = Graph::inference();
        let t = encode_batch(&g, &self.config, &self.params, Self::PREFIX, batch)?;
        let (seq, pooled) = (t.sequence.value(), t.pooled.value());
        let (l, d) = (seq.shape()[1], self.config.width);
        Ok((0..batch.len())
            .map(|i| TextEmbedding {
                sequence: Tensor::new(&[l, d], seq.data()[i * l * d..(i + 1) * l * d].to_vec()).expect("slice"),
                pooled: Tensor::new(&[d], pooled.data()[i * d..(i + 1) * d].to_vec()).expect("slice"),
            })
            .collect())
    }

    pub fn encode_caption(&self, caption: &str) -> Result<TextEmbedding<S>> {
        self.encode(&self.tokenize(caption))
    }

    /// Encoding of the UNCOND sentinel sequence.
    pub fn null_embedding(&self) -> Result<TextEmbedding<S>> {
        self.encode(&self.vocab.null_ids(self.config.max_len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> TextEncoder<f64> {
        TextEncoder::new(TextConfig::default(), Vocabulary::captions(), 3).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::captions();
        let ids = v.tokenize("a red circle on a blue background", 16);
        assert_eq!(ids.len(), 16);
        assert!(ids[..7].iter().all(|&i| i > Vocabulary::UNCOND_ID));
        assert!(ids[7..].iter().all(|&i| i == Vocabulary::PAD_ID));
        assert_eq!(v.tokenize("", 16), vec![Vocabulary::PAD_ID; 16]);
        assert_eq!(v.tokenize("a zebra", 4)[1], Vocabulary::UNK_ID);
        assert_eq!(v.tokenize("A RED", 2), v.tokenize("a red", 2));
    }

    #[test]
    fn vocabulary_is_bijective_and_roundtrips() {
        let v = Vocabulary::captions();
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
        assert_eq!(Vocabulary::from_table(v.table()).unwrap(), v);
    }

    #[test]
    fn deterministic_and_batch_independent() {
        let e = encoder();
        let a = e.tokenize("a small red square at the center on a blue background");
        let b = e.tokenize("a large green circle at the top-left on a white background");
        let alone = e.encode(&a).unwrap();
        let batch = e.encode_many(&[b.clone(), a.clone()]).unwrap();
        assert!(alone.pooled.max_abs_diff(&batch[1].pooled) < 1e-12);
        assert!(alone.sequence.max_abs_diff(&batch[1].sequence) < 1e-12);
        assert_eq!(alone, e.encode(&a).unwrap());
    }

    #[test]
    fn pooled_ignores_trailing_padding() {
        let e = encoder();
        let ids = e.tokenize("a small red square");
        let short = e.encode(&ids[..6]).unwrap();
        let long = e.encode(&ids).unwrap();
        assert!(short.pooled.max_abs_diff(&long.pooled) < 1e-12);
    }

    #[test]
    fn all_pad_is_finite_and_differs_from_null() {
        let e = encoder();
        let pad = e.encode(&e.tokenize("")).unwrap();
        assert!(pad.pooled.all_finite());
        let null = e.null_embedding().unwrap();
        assert_eq!(null, e.null_embedding().unwrap());
        assert!(null.pooled.max_abs_diff(&pad.pooled) > 1e-6);
    }

    #[test]
    fn swapping_content_tokens_changes_those_positions() {
        let e = encoder();
        let mut ids = e.tokenize("a red circle");
        let a = e.encode(&ids).unwrap();
        ids.swap(1, 2);
        let b = e.encode(&ids).unwrap();
        let d = e.config.width;
        for pos in [1, 2] {
            let row = |t: &TextEmbedding<f64>| t.sequence.data()[pos * d..(pos + 1) * d].to_vec();
            let diff: f64 = row(&a).iter().zip(row(&b)).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 1e-6);
        }
    }

    #[test]
    fn rejects_overlong_and_unknown_ids() {
        let e = encoder();
        assert!(e.encode(&[3; 17]).is_err());
        assert!(e.encode(&[999]).is_err());
    }
}
