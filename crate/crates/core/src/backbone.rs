//! Token-prediction transformer: embeddings, dual-stream and single-stream blocks
//! with rotary positions and QK normalization, adaptive modulation from the
//! condition vector, optional convolutional feature compression, logits head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::layers::{
    attend, attention_weights, feed_forward, init_feed_forward, init_linear, linear, merge_heads, split_heads,
};
use crate::scalar::Scalar;
use crate::schedule::{sinusoidal_embed, MaskRate, DEFAULT_MAX_PERIOD};
use crate::tensor::{concat, rope_tables, Graph, ParamStore, Tensor, Var};
use crate::text::TextVars;
use crate::tokens::TokenGrid;

/// Width of each sinusoidal micro-condition channel.
pub const MICRO_CHANNEL_WIDTH: usize = 64;
/// Number of sinusoidal channels: original h/w, crop x/y, preference, rate level.
pub const MICRO_CHANNELS: usize = 6;
pub const QK_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub mm_depth: usize,
    pub sm_depth: usize,
    #[serde(with = "crate::config::decimal")]
    pub rope_base: f64,
    pub codebook_k: usize,
    pub text_width: usize,
    pub cond_width: usize,
    pub ff_mult: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub compression_enabled: bool,
    pub compression_threshold: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            mm_depth: 2,
            sm_depth: 4,
            rope_base: 10_000.0,
            codebook_k: 256,
            text_width: 128,
            cond_width: 128,
            ff_mult: 2,
            grid_h: 8,
            grid_w: 8,
            compression_enabled: true,
            compression_threshold: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.width % (2 * self.heads) != 0 {
            return fail(format!(
                "model width {} must be divisible by twice the head count {}",
                self.width, self.heads
            ));
        }
        if self.codebook_k < 2 || self.text_width == 0 || self.cond_width == 0 || self.ff_mult == 0 {
            return fail("codebook, text, condition and feed-forward widths must be positive".into());
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return fail("token grid must be non-empty".into());
        }
        if self.compressed() && (self.grid_h % 2 != 0 || self.grid_w % 2 != 0) {
            return fail(format!("compression needs even grid extents, got {}×{}", self.grid_h, self.grid_w));
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return fail(format!("rope base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Whether the compression layers are active for this grid.
    pub fn compressed(&self) -> bool {
        self.compression_enabled && self.grid_h.min(self.grid_w) >= self.compression_threshold
    }

    /// Number of positions the transformer blocks see.
    pub fn sequence_len(&self) -> usize {
        if self.compressed() {
            self.tokens() / 4
        } else {
            self.tokens()
        }
    }
}

/// Micro-conditions and masking rate; the pooled text vector comes with the text encoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionBundle {
    pub original_h: usize,
    pub original_w: usize,
    pub crop_x: usize,
    pub crop_y: usize,
    pub preference_score: f64,
    pub rate: MaskRate,
}

impl ConditionBundle {
    pub fn new(image_size: usize, preference_score: f64, rate: MaskRate) -> Self {
        Self {
            original_h: image_size,
            original_w: image_size,
            crop_x: 0,
            crop_y: 0,
            preference_score,
            rate,
        }
    }

    pub fn with_rate(mut self, rate: MaskRate) -> Self {
        self.rate = rate;
        self
    }

    /// Concatenated sinusoidal channels, `MICRO_CHANNELS · MICRO_CHANNEL_WIDTH` values.
    pub fn features(&self) -> Vec<f64> {
        let pref = if self.preference_score.is_nan() {
            0.0
        } else {
            self.preference_score.clamp(0.0, 1.0)
        };
        [
            self.original_h as f64,
            self.original_w as f64,
            self.crop_x as f64,
            self.crop_y as f64,
            pref * 1000.0,
            self.rate.level as f64,
        ]
        .iter()
        .flat_map(|&v| sinusoidal_embed(v, MICRO_CHANNEL_WIDTH, DEFAULT_MAX_PERIOD).expect("even width"))
        .collect()
    }
}

/// Rotates consecutive pairs of `x` by `pos · base^(−2i/d)`.
pub fn rope_rotate(x: &[f64], pos: usize, base: f64) -> Result<Vec<f64>> {
    let (cos, sin) = rope_tables(&[pos], x.len(), base)?;
    Ok(x.chunks_exact(2)
        .enumerate()
        .flat_map(|(i, pair)| {
            let (c, s) = (cos[i], sin[i]);
            [pair[0] * c - pair[1] * s, pair[0] * s + pair[1] * c]
        })
        .collect())
}

fn init_stream<S: Scalar>(p: &mut ParamStore<S>, n: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.width;
    p.init_zeros(&format!("{n}.mod.w"), &[cfg.cond_width, 6 * d]);
    p.init_zeros(&format!("{n}.mod.b"), &[6 * d]);
    init_linear(p, &format!("{n}.qkv"), d, 3 * d, false, rng);
    p.init_ones(&format!("{n}.q_norm"), &[cfg.head_dim()]);
    p.init_ones(&format!("{n}.k_norm"), &[cfg.head_dim()]);
    init_linear(p, &format!("{n}.out"), d, d, true, rng);
    init_feed_forward(p, &format!("{n}.ff"), d, cfg.ff_mult * d, rng);
}

/// Backbone parameters under `prefix`.
pub fn init_backbone_params<S: Scalar>(cfg: &ModelConfig, p: &mut ParamStore<S>, prefix: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.width;
    p.init_normal(&format!("{prefix}tok_emb"), &[cfg.codebook_k + 1, d], 1.0, &mut rng);
    init_linear(p, &format!("{prefix}txt_in"), cfg.text_width, d, true, &mut rng);
    let cond_in = cfg.text_width + MICRO_CHANNELS * MICRO_CHANNEL_WIDTH;
    init_linear(p, &format!("{prefix}cond.l1"), cond_in, cfg.cond_width, true, &mut rng);
    init_linear(p, &format!("{prefix}cond.l2"), cfg.cond_width, cfg.cond_width, true, &mut rng);
    if cfg.compressed() {
        let std = 1.0 / ((d * 4) as f64).sqrt();
        p.init_normal(&format!("{prefix}compress.w"), &[d, d, 2, 2], std, &mut rng);
        p.init_zeros(&format!("{prefix}compress.b"), &[d]);
        p.init_normal(&format!("{prefix}decompress.w"), &[d, d, 2, 2], std, &mut rng);
        p.init_zeros(&format!("{prefix}decompress.b"), &[d]);
    }
    for i in 0..cfg.mm_depth {
        init_stream(p, &format!("{prefix}mm{i}.txt"), cfg, &mut rng);
        init_stream(p, &format!("{prefix}mm{i}.img"), cfg, &mut rng);
    }
    for i in 0..cfg.sm_depth {
        init_stream(p, &format!("{prefix}sm{i}.img"), cfg, &mut rng);
    }
    p.init_zeros(&format!("{prefix}final.mod.w"), &[cfg.cond_width, 2 * d]);
    p.init_zeros(&format!("{prefix}final.mod.b"), &[2 * d]);
    p.init_normal(&format!("{prefix}head.w"), &[d, cfg.codebook_k], 0.1 / (d as f64).sqrt(), &mut rng);
    p.init_zeros(&format!("{prefix}head.b"), &[cfg.codebook_k]);
}

/// Replaces every zero-initialized modulation weight with `N(0, std²)` draws; used by
/// tests that need non-trivial blocks.
pub fn randomize_modulation<S: Scalar>(p: &mut ParamStore<S>, std: f64, rng: &mut impl Rng) {
    let names: Vec<String> = p.names().filter(|n| n.contains(".mod.")).map(str::to_string).collect();
    for n in names {
        let shape = p.get(&n).expect("listed").shape().to_vec();
        p.init_normal(&n, &shape, std, rng);
    }
}

/// `[B, N, D]` embeddings of row-major flattened grids.
pub fn embed_tokens<'g, S: Scalar>(
    g: &'g Graph<S>,
    cfg: &ModelConfig,
    p: &ParamStore<S>,
    prefix: &str,
    grids: &[TokenGrid],
) -> Result<Var<'g, S>> {
    let n = cfg.tokens();
    let mut ids = Vec::with_capacity(grids.len() * n);
    for grid in grids {
        if grid.height() != cfg.grid_h || grid.width() != cfg.grid_w {
            return Err(shape_err!(
                "grid {}×{} does not match model grid {}×{}",
                grid.height(),
                grid.width(),
                cfg.grid_h,
                cfg.grid_w
            ));
        }
        if grid.codebook_size() != cfg.codebook_k {
            return Err(invalid!(
                "grid codebook size {} does not match model codebook {}",
                grid.codebook_size(),
                cfg.codebook_k
            ));
        }
        ids.extend(grid.ids());
    }
    g.param(p, &format!("{prefix}tok_emb"))?
        .embedding(&ids)?
        .reshape(&[grids.len(), n, cfg.width])
}

/// Condition vector `y = MLP([pooled text, sinusoidal micro-conditions])`, `[B, cond_width]`.
pub fn build_condition<'g, S: Scalar>(
    g: &'g Graph<S>,
    p: &ParamStore<S>,
    prefix: &str,
    pooled: Var<'g, S>,
    bundles: &[ConditionBundle],
) -> Result<Var<'g, S>> {
    let b = bundles.len();
    if pooled.shape().first() != Some(&b) {
        return Err(shape_err!("{} pooled vectors for {b} condition bundles", pooled.shape()[0]));
    }
    let feats: Vec<f64> = bundles.iter().flat_map(ConditionBundle::features).collect();
    let feats = g.constant(Tensor::from_f64(&[b, MICRO_CHANNELS * MICRO_CHANNEL_WIDTH], &feats)?);
    let x = concat(&[pooled, feats], 1)?;
    let h = linear(g, p, &format!("{prefix}cond.l1"), x)?.silu();
    linear(g, p, &format!("{prefix}cond.l2"), h)
}

/// `LN(x) · (1 + scale) + shift` with `[B, D]` modulation broadcast over the sequence.
fn modulate<'g, S: Scalar>(x: Var<'g, S>, shift: Var<'g, S>, scale: Var<'g, S>) -> Result<Var<'g, S>> {
    x.layer_norm(1e-6)?.mul(scale.add_scalar(1.0))?.add(shift)
}

/// Per-head `[B, H, L, dh]` queries and keys (RMS-normalized, before RoPE) and values
/// of stream `n` for its modulated input `h`.
pub fn stream_qkv<'g, S: Scalar>(
    g: &'g Graph<S>,
    cfg: &ModelConfig,
    p: &ParamStore<S>,
    n: &str,
    h: Var<'g, S>,
) -> Result<(Var<'g, S>, Var<'g, S>, Var<'g, S>)> {
    let d = cfg.width;
    let qkv = linear(g, p, &format!("{n}.qkv"), h)?;
    let q = split_heads(qkv.narrow(2, 0, d)?, cfg.heads)?.rms_norm(g.param(p, &format!("{n}.q_norm"))?, QK_NORM_EPS)?;
    let k = split_heads(qkv.narrow(2, d, d)?, cfg.heads)?.rms_norm(g.param(p, &format!("{n}.k_norm"))?, QK_NORM_EPS)?;
    let v = split_heads(qkv.narrow(2, 2 * d, d)?, cfg.heads)?;
    Ok((q, k, v))
}

/// One transformer block over jointly attending streams, each with its own parameters
/// under the names in `streams`. Positions run `0..ΣL` in stream order.
pub fn joint_block<'g, S: Scalar>(
    g: &'g Graph<S>,
    cfg: &ModelConfig,
    p: &ParamStore<S>,
    streams: &[&str],
    xs: &[Var<'g, S>],
    y_act: Var<'g, S>,
) -> Result<Vec<Var<'g, S>>> {
    if streams.len() != xs.len() || xs.is_empty() {
        return Err(invalid!("{} stream names for {} streams", streams.len(), xs.len()));
    }
    let d = cfg.width;
    let b = y_act.shape()[0];
    let mut mods = Vec::new();
    let (mut qs, mut ks, mut vs, mut lens) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (&n, &x) in streams.iter().zip(xs) {
        let xs_shape = x.shape();
        if xs_shape.len() != 3 || xs_shape[0] != b || xs_shape[2] != d {
            return Err(shape_err!("stream {n} must be [{b}, L, {d}], got {xs_shape:?}"));
        }
        let m = linear(g, p, &format!("{n}.mod"), y_act)?;
        let chunk: Vec<Var<'g, S>> = (0..6)
            .map(|i| m.narrow(1, i * d, d)?.reshape(&[b, 1, d]))
            .collect::<Result<_>>()?;
        let h = modulate(x, chunk[0], chunk[1])?;
        let (q, k, v) = stream_qkv(g, cfg, p, n, h)?;
        lens.push(xs_shape[1]);
        qs.push(q);
        ks.push(k);
        vs.push(v);
        mods.push(chunk);
    }
    let joined = |parts: &[Var<'g, S>]| if parts.len() == 1 { Ok(parts[0]) } else { concat(parts, 2) };
    let total: usize = lens.iter().sum();
    let positions: Vec<usize> = (0..total).collect();
    let q = joined(&qs)?.rope(&positions, cfg.rope_base)?;
    let k = joined(&ks)?.rope(&positions, cfg.rope_base)?;
    let v = joined(&vs)?;
    let o = attend(attention_weights(q, k, None)?, v)?;

    let mut out = Vec::with_capacity(xs.len());
    let mut start = 0;
    for (i, (&n, &x)) in streams.iter().zip(xs).enumerate() {
        let oi = if xs.len() == 1 { o } else { o.narrow(2, start, lens[i])? };
        start += lens[i];
        let m = &mods[i];
        let a = linear(g, p, &format!("{n}.out"), merge_heads(oi)?)?;
        let x = x.add(a.mul(m[2])?)?;
        let h = modulate(x, m[3], m[4])?;
        let x = x.add(feed_forward(g, p, &format!("{n}.ff"), h)?.mul(m[5])?)?;
        out.push(x);
    }
    Ok(out)
}

/// Dual-stream block; returns `(text, image)`.
pub fn multimodal_block<'g, S: Scalar>(
    g: &'g Graph<S>,
    cfg: &ModelConfig,
    p: &ParamStore<S>,
    name: &str,
    text: Option<Var<'g, S>>,
    image: Var<'g, S>,
    y_act: Var<'g, S>,
) -> Result<(Var<'g, S>, Var<'g, S>)> {
    let text = text.ok_or_else(|| invalid!("multimodal block {name} needs a text stream"))?;
    let txt = format!("{name}.txt");
    let img = format!("{name}.img");
    let out = joint_block(g, cfg, p, &[&txt, &img], &[text, image], y_act)?;
    Ok((out[0], out[1]))
}

pub fn singlemodal_block<'g, S: Scalar>(
    g: &'g Graph<S>,
    cfg: &ModelConfig,
    p: &ParamStore<S>,
    name: &str,
    image: Var<'g, S>,
    y_act: Var<'g, S>,
) -> Result<Var<'g, S>> {
    Ok(joint_block(g, cfg, p, &[&format!("{name}.img")], &[image], y_act)?[0])
}

fn to_spatial<'g, S: Scalar>(x: Var<'g, S>, h: usize, w: usize) -> Result<Var<'g, S>> {
    let s = x.shape();
    x.reshape(&[s[0], h, w, s[2]])?.permute(&[0, 3, 1, 2])
}

fn to_sequence<S: Scalar>(x: Var<'_, S>) -> Result<Var<'_, S>> {
    let s = x.shape();
    x.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])
}

/// Stride-2 `k=2` convolution, `[B, D, h, w]` to `[B, D, h/2, w/2]`.
pub fn compress<'g, S: Scalar>(g: &'g Graph<S>, p: &ParamStore<S>, prefix: &str, x: Var<'g, S>) -> Result<Var<'g, S>> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(shape_err!("compress needs [B, D, h, w] with even extents, got {s:?}"));
    }
    let w = g.param(p, &format!("{prefix}compress.w"))?;
    let b = g.param(p, &format!("{prefix}compress.b"))?;
    x.conv2d(w, 2, 0)?.add(b.reshape(&[s[1], 1, 1])?)
}

/// Stride-2 `k=2` transposed convolution, `[B, D, h, w]` to `[B, D, 2h, 2w]`.
pub fn decompress<'g, S: Scalar>(g: &'g Graph<S>, p: &ParamStore<S>, prefix: &str, x: Var<'g, S>) -> Result<Var<'g, S>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err!("decompress needs [B, D, h, w], got {s:?}"));
    }
    let w = g.param(p, &format!("{prefix}decompress.w"))?;
    let b = g.param(p, &format!("{prefix}decompress.b"))?;
    x.conv_transpose2d(w, 2, 0)?.add(b.reshape(&[s[1], 1, 1])?)
}

/// Logits `[B, N, K]` for a batch of grids.
pub fn forward<'g, S: Scalar>(
    g: &'g Graph<S>,
    cfg: &ModelConfig,
    p: &ParamStore<S>,
    prefix: &str,
    grids: &[TokenGrid],
    text: TextVars<'g, S>,
    bundles: &[ConditionBundle],
) -> Result<Var<'g, S>> {
    let b = grids.len();
    if bundles.len() != b || text.sequence.shape()[0] != b {
        return Err(shape_err!(
            "batch mismatch: {b} grids, {} texts, {} bundles",
            text.sequence.shape()[0],
            bundles.len()
        ));
    }
    let d = cfg.width;
    let mut x = embed_tokens(g, cfg, p, prefix, grids)?;
    let (hc, wc) = (cfg.grid_h / 2, cfg.grid_w / 2);
    if cfg.compressed() {
        x = to_sequence(compress(g, p, prefix, to_spatial(x, cfg.grid_h, cfg.grid_w)?)?)?;
    }
    let y = build_condition(g, p, prefix, text.pooled, bundles)?;
    let y_act = y.silu();
    let mut t = Some(linear(g, p, &format!("{prefix}txt_in"), text.sequence)?);
    for i in 0..cfg.mm_depth {
        let (tn, xn) = multimodal_block(g, cfg, p, &format!("{prefix}mm{i}"), t, x, y_act)?;
        t = Some(tn);
        x = xn;
    }
    for i in 0..cfg.sm_depth {
        x = singlemodal_block(g, cfg, p, &format!("{prefix}sm{i}"), x, y_act)?;
    }
    let m = linear(g, p, &format!("{prefix}final.mod"), y_act)?;
    let shift = m.narrow(1, 0, d)?.reshape(&[b, 1, d])?;
    let scale = m.narrow(1, d, d)?.reshape(&[b, 1, d])?;
    x = modulate(x, shift, scale)?;
    if cfg.compressed() {
        x = to_sequence(decompress(g, p, prefix, to_spatial(x, hc, wc)?)?)?;
    }
    linear(g, p, &format!("{prefix}head"), x)
}
