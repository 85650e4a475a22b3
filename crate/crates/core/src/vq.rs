//! Vector-quantized image autoencoder: pixels to token grids and back.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::imageio::RgbImage;
use crate::scalar::Scalar;
use crate::tensor::{clip_grad_norm, AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};
use crate::tokens::TokenGrid;

/// `(image_h / f) · (image_w / f)`.
pub fn token_count(image_h: usize, image_w: usize, f: usize) -> Result<usize> {
    if f == 0 || image_h % f != 0 || image_w % f != 0 {
        return Err(invalid!("{image_h}×{image_w} is not divisible by downsampling factor {f}"));
    }
    Ok((image_h / f) * (image_w / f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqConfig {
    pub image_size: usize,
    pub downsample_f: usize,
    pub codebook_k: usize,
    pub embed_d: usize,
    #[serde(with = "crate::config::decimal")]
    pub commitment_beta: f64,
    /// Width of the first encoder stage; deeper stages use twice this.
    pub hidden: usize,
    /// Project latents and code vectors to the sphere of radius `√D` before matching.
    pub normalize: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            downsample_f: 4,
            codebook_k: 256,
            embed_d: 64,
            commitment_beta: 0.25,
            hidden: 32,
            normalize: false,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8, 16].contains(&self.downsample_f) {
            return Err(Error::Config(format!(
                "downsampling factor must be one of 2, 4, 8, 16 (got {})",
                self.downsample_f
            )));
        }
        if self.image_size % self.downsample_f != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by {}",
                self.image_size, self.downsample_f
            )));
        }
        if self.codebook_k < 2 || self.codebook_k > u16::MAX as usize {
            return Err(Error::Config(format!("codebook size {} outside [2, 65535]", self.codebook_k)));
        }
        if self.embed_d == 0 || self.hidden == 0 {
            return Err(Error::Config("embedding and hidden widths must be positive".into()));
        }
        if !(self.commitment_beta >= 0.0 && self.commitment_beta.is_finite()) {
            return Err(Error::Config("commitment beta must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.downsample_f
    }

    fn stages(&self) -> usize {
        self.downsample_f.trailing_zeros() as usize
    }

    fn width(&self, stage: usize) -> usize {
        if stage == 0 {
            self.hidden
        } else {
            2 * self.hidden
        }
    }
}

/// `K` learned code vectors of width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S> {
    entries: Tensor<S>,
    pub usage_counts: Vec<u64>,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(entries: Tensor<S>) -> Result<Self> {
        let &[k, d] = entries.shape() else {
            return Err(shape_err!("codebook must be [K, D], got {:?}", entries.shape()));
        };
        if k < 2 || d == 0 {
            return Err(invalid!("codebook needs at least 2 entries of positive width, got {k}×{d}"));
        }
        if !entries.all_finite() {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        Ok(Self {
            entries,
            usage_counts: vec![0; k],
        })
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Tensor<S> {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> &[S] {
        let d = self.dim();
        &self.entries.data()[k * d..(k + 1) * d]
    }

    /// Nearest entry by squared Euclidean distance; the lowest index wins ties.
    pub fn nearest(&self, v: &[S]) -> (usize, S) {
        let mut best = (0, S::infinity());
        for k in 0..self.len() {
            let dist = self
                .entry(k)
                .iter()
                .zip(v)
                .map(|(&e, &x)| (e - x) * (e - x))
                .sum::<S>();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best
    }

    /// Nearest entries for each row of `[M, D]` latents.
    pub fn assign(&self, rows: &[S]) -> Vec<usize> {
        rows.chunks_exact(self.dim()).map(|v| self.nearest(v).0).collect()
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage_counts[i] += 1;
        }
    }

    pub fn used_entries(&self) -> usize {
        self.usage_counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Result of quantizing a batch of latents.
#[derive(Clone, Debug)]
pub struct Quantized<S> {
    pub grids: Vec<TokenGrid>,
    /// `[B, D, h, w]` latents snapped to their codebook entries.
    pub latents: Tensor<S>,
    /// `mean ‖sg(z) − e‖²`.
    pub codebook_loss: f64,
    /// `mean ‖z − sg(e)‖²` (unweighted).
    pub commitment_loss: f64,
}

/// Snaps every spatial vector of `[B, D, h, w]` latents to its nearest codebook entry.
pub fn quantize<S: Scalar>(latents: &Tensor<S>, codebook: &Codebook<S>) -> Result<Quantized<S>> {
    let &[b, d, h, w] = latents.shape() else {
        return Err(shape_err!("latents must be [B, D, h, w], got {:?}", latents.shape()));
    };
    if d != codebook.dim() {
        return Err(shape_err!("latent width {d} does not match codebook width {}", codebook.dim()));
    }
    let plane = h * w;
    let mut grids = Vec::with_capacity(b);
    let mut out = vec![S::zero(); latents.numel()];
    let mut sq = 0.0;
    let mut v = vec![S::zero(); d];
    for bi in 0..b {
        let mut indices = Vec::with_capacity(plane);
        for p in 0..plane {
            for c in 0..d {
                v[c] = latents.data()[(bi * d + c) * plane + p];
            }
            let (k, dist) = codebook.nearest(&v);
            sq += dist.f64();
            indices.push(k as u32);
            for (c, &e) in codebook.entry(k).iter().enumerate() {
                out[(bi * d + c) * plane + p] = e;
            }
        }
        grids.push(TokenGrid::new(h, w, codebook.len(), indices)?);
    }
    let mse = sq / latents.numel().max(1) as f64;
    Ok(Quantized {
        grids,
        latents: Tensor::new(latents.shape(), out)?,
        codebook_loss: mse,
        commitment_loss: mse,
    })
}

/// Graph-level quantizer output.
pub struct QuantizedVar<'g, S: Scalar> {
    pub indices: Vec<usize>,
    /// Straight-through latents `[B, D, h, w]`.
    pub latents: Var<'g, S>,
    pub codebook_loss: Var<'g, S>,
    pub commitment_loss: Var<'g, S>,
}

/// Quantizes inside a graph: forward value is the nearest entry, the encoder
/// receives the decoder's gradient unchanged, and the codebook learns from the
/// codebook loss only.
pub fn quantize_var<'g, S: Scalar>(z: Var<'g, S>, codebook: Var<'g, S>) -> Result<QuantizedVar<'g, S>> {
    let shape = z.shape();
    let &[b, d, h, w] = shape.as_slice() else {
        return Err(shape_err!("latents must be [B, D, h, w], got {shape:?}"));
    };
    let book = Codebook::new((*codebook.value()).clone())?;
    if book.dim() != d {
        return Err(shape_err!("latent width {d} does not match codebook width {}", book.dim()));
    }
    let rows = z.permute(&[0, 2, 3, 1])?.reshape(&[b * h * w, d])?;
    let indices = book.assign(rows.value().data());
    let e = codebook.embedding(&indices)?;
    let codebook_loss = rows.detach().sub(e)?.square().mean();
    let commitment_loss = rows.sub(e.detach())?.square().mean();
    let latents = rows
        .straight_through(e)?
        .reshape(&[b, h, w, d])?
        .permute(&[0, 3, 1, 2])?;
    Ok(QuantizedVar {
        indices,
        latents,
        codebook_loss,
        commitment_loss,
    })
}

/// Trainable VQ autoencoder.
#[derive(Clone, Debug)]
pub struct VqTokenizer<S> {
    pub config: VqConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> VqTokenizer<S> {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let conv = |p: &mut ParamStore<S>, name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut ChaCha8Rng| {
            let std = 1.0 / ((in_c * k * k) as f64).sqrt();
            p.init_normal(&format!("{name}.w"), &[out_c, in_c, k, k], std, rng);
            p.init_zeros(&format!("{name}.b"), &[out_c]);
        };
        let stages = config.stages();
        let bottom = config.width(stages);
        conv(&mut p, "enc.conv_in", config.width(0), 3, 3, &mut rng);
        for s in 0..stages {
            conv(&mut p, &format!("enc.down{s}"), config.width(s + 1), config.width(s), 4, &mut rng);
        }
        conv(&mut p, "enc.res.conv1", bottom, bottom, 3, &mut rng);
        conv(&mut p, "enc.res.conv2", bottom, bottom, 3, &mut rng);
        conv(&mut p, "enc.conv_out", config.embed_d, bottom, 1, &mut rng);

        conv(&mut p, "dec.conv_in", bottom, config.embed_d, 1, &mut rng);
        conv(&mut p, "dec.res.conv1", bottom, bottom, 3, &mut rng);
        conv(&mut p, "dec.res.conv2", bottom, bottom, 3, &mut rng);
        for s in (0..stages).rev() {
            let (in_c, out_c) = (config.width(s + 1), config.width(s));
            let std = 1.0 / ((in_c * 4) as f64).sqrt();
            p.init_normal(&format!("dec.up{s}.w"), &[in_c, out_c, 4, 4], std, &mut rng);
            p.init_zeros(&format!("dec.up{s}.b"), &[out_c]);
        }
        conv(&mut p, "dec.conv_out", 3, config.width(0), 3, &mut rng);

        let bound = 1.0 / config.codebook_k as f64;
        p.init_uniform("codebook", &[config.codebook_k, config.embed_d], bound, &mut rng);
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: VqConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        Self::new(config.clone(), 0)?.params.check_layout(&params)?;
        Ok(Self { config, params })
    }

    /// Effective codebook (normalized when the config asks for it).
    pub fn codebook(&self) -> Codebook<S> {
        let g = Graph::inference();
        let raw = g.param(&self.params, "codebook").expect("codebook parameter");
        let book = self.sphere(&g, raw).expect("codebook shape");
        Codebook::new((*book.value()).clone()).expect("valid codebook")
    }

    /// Rescales the last axis to unit RMS when `normalize` is set.
    fn sphere<'g>(&self, g: &'g Graph<S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        if !self.config.normalize {
            return Ok(x);
        }
        let ones = g.constant(Tensor::ones(&[self.config.embed_d]));
        x.rms_norm(ones, 1e-8)
    }

    fn conv<'g>(&self, g: &'g Graph<S>, name: &str, x: Var<'g, S>, stride: usize, pad: usize) -> Result<Var<'g, S>> {
        let w = g.param(&self.params, &format!("{name}.w"))?;
        let b = g.param(&self.params, &format!("{name}.b"))?;
        let channels = b.shape()[0];
        x.conv2d(w, stride, pad)?.add(b.reshape(&[channels, 1, 1])?)
    }

    fn res_block<'g>(&self, g: &'g Graph<S>, name: &str, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let h = self.conv(g, &format!("{name}.conv1"), x.silu(), 1, 1)?;
        let h = self.conv(g, &format!("{name}.conv2"), h.silu(), 1, 1)?;
        x.add(h)
    }

    /// `[B, 3, H, W]` pixels in `[0, 1]` to `[B, D, H/f, W/f]` continuous latents.
    pub fn encode_latents<'g>(&self, g: &'g Graph<S>, images: Var<'g, S>) -> Result<Var<'g, S>> {
        let x = images.affine(2.0, -1.0);
        let mut h = self.conv(g, "enc.conv_in", x, 1, 1)?;
        for s in 0..self.config.stages() {
            h = self.conv(g, &format!("enc.down{s}"), h.silu(), 2, 1)?;
        }
        h = self.res_block(g, "enc.res", h)?;
        let z = self.conv(g, "enc.conv_out", h.silu(), 1, 0)?;
        if !self.config.normalize {
            return Ok(z);
        }
        let z = self.sphere(g, z.permute(&[0, 2, 3, 1])?)?;
        z.permute(&[0, 3, 1, 2])
    }

    /// `[B, D, h, w]` latents to `[B, 3, H, W]` unclamped pixels.
    pub fn decode_latents<'g>(&self, g: &'g Graph<S>, z: Var<'g, S>) -> Result<Var<'g, S>> {
        let mut h = self.conv(g, "dec.conv_in", z, 1, 0)?;
        h = self.res_block(g, "dec.res", h)?;
        for s in (0..self.config.stages()).rev() {
            let w = g.param(&self.params, &format!("dec.up{s}.w"))?;
            let b = g.param(&self.params, &format!("dec.up{s}.b"))?;
            let channels = b.shape()[0];
            h = h.silu().conv_transpose2d(w, 2, 1)?.add(b.reshape(&[channels, 1, 1])?)?;
        }
        self.conv(g, "dec.conv_out", h.silu(), 1, 1)
    }

    /// Continuous latents for a batch, outside any training graph.
    pub fn latents(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        check_images(images, self.config.downsample_f)?;
        let g = Graph::inference();
        let x = g.constant(images.clone());
        Ok((*self.encode_latents(&g, x)?.value()).clone())
    }

    /// Encodes `[B, 3, H, W]` images with pixels in `[0, 1]` into unmasked token grids.
    pub fn encode_image(&self, images: &Tensor<S>) -> Result<Vec<TokenGrid>> {
        let z = self.latents(images)?;
        Ok(quantize(&z, &self.codebook())?.grids)
    }

    pub fn encode_rgb(&self, images: &[RgbImage]) -> Result<Vec<TokenGrid>> {
        self.encode_image(&stack_images(images)?)
    }

    /// Decodes complete grids to `[B, 3, H, W]` pixels clamped to `[0, 1]`.
    pub fn decode_tokens(&self, grids: &[TokenGrid]) -> Result<Tensor<S>> {
        let first = grids.first().ok_or_else(|| invalid!("no grids to decode"))?;
        let (h, w) = (first.height(), first.width());
        let book = self.codebook();
        let d = book.dim();
        let mut z = vec![S::zero(); grids.len() * d * h * w];
        for (b, grid) in grids.iter().enumerate() {
            if grid.height() != h || grid.width() != w {
                return Err(shape_err!("grids in a batch must share extents"));
            }
            if grid.codebook_size() != book.len() {
                return Err(invalid!(
                    "grid codebook size {} does not match tokenizer codebook {}",
                    grid.codebook_size(),
                    book.len()
                ));
            }
            if grid.masked_count() > 0 {
                return Err(invalid!("cannot decode a grid with {} masked cells", grid.masked_count()));
            }
            for p in 0..h * w {
                let e = book.entry(grid.get(p) as usize);
                for c in 0..d {
                    z[((b * d + c) * h * w) + p] = e[c];
                }
            }
        }
        let g = Graph::inference();
        let z = g.constant(Tensor::new(&[grids.len(), d, h, w], z)?);
        let out = self.decode_latents(&g, z)?.value();
        let clamped = out.data().iter().map(|&v| v.max(S::zero()).min(S::one())).collect();
        Tensor::new(out.shape(), clamped)
    }

    pub fn decode_rgb(&self, grids: &[TokenGrid]) -> Result<Vec<RgbImage>> {
        let t = self.decode_tokens(grids)?;
        unstack_images(&t)
    }

    /// Training graph for one batch: reconstruction, codebook and commitment terms.
    pub fn training_loss<'g>(&self, g: &'g Graph<S>, images: &Tensor<S>) -> Result<TokenizerLoss<'g, S>> {
        check_images(images, self.config.downsample_f)?;
        let x = g.constant(images.clone());
        let z = self.encode_latents(g, x)?;
        let codebook = self.sphere(g, g.param(&self.params, "codebook")?)?;
        let q = quantize_var(z, codebook)?;
        let recon = self.decode_latents(g, q.latents)?;
        let mse = recon.sub(x)?.square().mean();
        let total = mse
            .add(q.codebook_loss)?
            .add(q.commitment_loss.scale(self.config.commitment_beta))?;
        Ok(TokenizerLoss {
            total,
            reconstruction: mse,
            codebook: q.codebook_loss,
            commitment: q.commitment_loss,
            indices: q.indices,
        })
    }

    /// Mean squared reconstruction error of encode→decode over a set of images.
    pub fn reconstruction_mse(&self, images: &[RgbImage]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in images.chunks(32) {
            let x = stack_images::<S>(chunk)?;
            let grids = self.encode_image(&x)?;
            let y = self.decode_tokens(&grids)?;
            total += x
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| (a.f64() - b.f64()).powi(2))
                .sum::<f64>();
            count += x.numel();
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn cast<T: Scalar>(&self) -> VqTokenizer<T> {
        VqTokenizer {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

pub struct TokenizerLoss<'g, S: Scalar> {
    pub total: Var<'g, S>,
    pub reconstruction: Var<'g, S>,
    pub codebook: Var<'g, S>,
    pub commitment: Var<'g, S>,
    pub indices: Vec<usize>,
}

fn check_images<S: Scalar>(images: &Tensor<S>, f: usize) -> Result<()> {
    let &[_, c, h, w] = images.shape() else {
        return Err(shape_err!("images must be [B, 3, H, W], got {:?}", images.shape()));
    };
    if c != 3 {
        return Err(shape_err!("images must have 3 channels, got {c}"));
    }
    token_count(h, w, f)?;
    if images
        .data()
        .iter()
        .any(|v| !(v.f64() >= 0.0 && v.f64() <= 1.0))
    {
        return Err(invalid!("pixel values must lie in [0, 1]"));
    }
    Ok(())
}

/// `[B, 3, H, W]` batch from equally sized images.
pub fn stack_images<S: Scalar>(images: &[RgbImage]) -> Result<Tensor<S>> {
    let first = images.first().ok_or_else(|| invalid!("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(shape_err!("images in a batch must share extents"));
        }
        data.extend_from_slice(img.to_tensor::<S>().data());
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

pub fn unstack_images<S: Scalar>(t: &Tensor<S>) -> Result<Vec<RgbImage>> {
    let &[b, c, h, w] = t.shape() else {
        return Err(shape_err!("expected [B, 3, H, W], got {:?}", t.shape()));
    };
    let per = c * h * w;
    (0..b)
        .map(|i| RgbImage::from_tensor(&Tensor::new(&[c, h, w], t.data()[i * per..(i + 1) * per].to_vec())?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(with = "crate::config::decimal")]
    pub lr: f64,
    #[serde(with = "crate::config::decimal")]
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Initialize the codebook by k-means++ seeding on encoder latents of the data.
    pub data_init: bool,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 16,
            lr: 3e-4,
            grad_clip_norm: 1.0,
            seed: 0,
            data_init: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenizerStep {
    pub step: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl TokenizerStep {
    /// `step,loss,grad_norm`.
    pub fn log_line(&self) -> String {
        format!("{},{},{}", self.step, self.total, self.grad_norm)
    }
}

#[derive(Clone, Debug)]
pub struct TokenizerReport {
    pub curve: Vec<TokenizerStep>,
    /// Assignment counts over the training set after the final step.
    pub usage: Vec<u64>,
}

impl TokenizerReport {
    pub fn used_entries(&self) -> usize {
        self.usage.iter().filter(|&&c| c > 0).count()
    }
}

/// k-means++ seeding of the codebook from encoder latents of up to 64 images.
fn init_codebook_from_data(tok: &mut VqTokenizer<f32>, images: &[RgbImage], rng: &mut ChaCha8Rng) -> Result<()> {
    let d = tok.config.embed_d;
    let k = tok.config.codebook_k;
    let sample: Vec<RgbImage> = images.iter().take(64).cloned().collect();
    let z = tok.latents(&stack_images(&sample)?)?;
    let rows = z;
    let &[b, _, h, w] = rows.shape() else { unreachable!() };
    let plane = h * w;
    let vectors: Vec<Vec<f32>> = (0..b * plane)
        .map(|i| {
            let (bi, p) = (i / plane, i % plane);
            (0..d).map(|c| rows.data()[(bi * d + c) * plane + p]).collect()
        })
        .collect();
    let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| ((x - y) * (x - y)) as f64).sum::<f64>();
    let mut chosen: Vec<usize> = vec![rng.random_range(0..vectors.len() as u32) as usize];
    let mut nearest: Vec<f64> = vectors.iter().map(|v| dist(v, &vectors[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..vectors.len() as u32) as usize
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = nearest.len() - 1;
            for (i, &dv) in nearest.iter().enumerate() {
                if target < dv {
                    pick = i;
                    break;
                }
                target -= dv;
            }
            pick
        };
        chosen.push(next);
        for (n, v) in nearest.iter_mut().zip(&vectors) {
            *n = n.min(dist(v, &vectors[next]));
        }
    }
    let mut entries = Vec::with_capacity(k * d);
    for &c in &chosen {
        // Small jitter keeps duplicated seeds distinct.
        entries.extend(vectors[c].iter().map(|&x| x + rng.random_range(-1e-3f32..1e-3)));
    }
    tok.params.insert("codebook", Tensor::new(&[k, d], entries)?);
    Ok(())
}

/// Trains a tokenizer on `images`; returns the model and its loss curve.
pub fn train_tokenizer(
    images: &[RgbImage],
    config: &VqConfig,
    train: &TokenizerTrainConfig,
    mut on_step: impl FnMut(&TokenizerStep),
) -> Result<(VqTokenizer<f32>, TokenizerReport)> {
    if images.is_empty() {
        return Err(invalid!("tokenizer dataset is empty"));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut tok = VqTokenizer::<f32>::new(config.clone(), train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_70c0);
    if train.data_init && train.steps > 0 {
        init_codebook_from_data(&mut tok, images, &mut rng)?;
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: train.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size.min(images.len()) {
            if cursor == order.len() {
                for i in (1..order.len()).rev() {
                    let j = rng.random_range(0..=i as u32) as usize;
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch.push(images[order[cursor]].clone());
            cursor += 1;
        }
        let x = stack_images::<f32>(&batch)?;
        let g = Graph::new();
        let loss = tok.training_loss(&g, &x)?;
        let mut record = TokenizerStep {
            step,
            total: loss.total.item() as f64,
            reconstruction: loss.reconstruction.item() as f64,
            codebook: loss.codebook.item() as f64,
            commitment: loss.commitment.item() as f64,
            grad_norm: 0.0,
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "tokenizer loss at step {step}: reconstruction {}, codebook {}, commitment {}",
                record.reconstruction, record.codebook, record.commitment
            )));
        }
        let mut grads = g.backward(loss.total)?.into_param_grads();
        drop(g);
        record.grad_norm = clip_grad_norm(&mut grads, train.grad_clip_norm);
        opt.step(&mut tok.params, &grads)?;
        on_step(&record);
        curve.push(record);
    }
    let mut book = tok.codebook();
    for chunk in images.chunks(32) {
        let z = tok.latents(&stack_images(chunk)?)?;
        let q = quantize(&z, &book)?;
        let ids: Vec<usize> = q.grids.iter().flat_map(|g| g.ids()).collect();
        book.record_usage(&ids);
    }
    Ok((
        tok,
        TokenizerReport {
            curve,
            usage: book.usage_counts,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_examples() {
        assert_eq!(token_count(1024, 1024, 16).unwrap(), 4096);
        assert_eq!(token_count(32, 32, 4).unwrap(), 64);
        assert_eq!(token_count(8, 8, 8).unwrap(), 1);
        assert!(token_count(30, 32, 4).is_err());
    }

    #[test]
    fn nearest_entry_examples() {
        let book = Codebook::new(Tensor::<f64>::from_f64(&[2, 2], &[0., 0., 1., 1.]).unwrap()).unwrap();
        assert_eq!(book.nearest(&[0.9, 0.8]).0, 1);
        assert_eq!(book.nearest(&[0.5, 0.5]).0, 0);
        let (k, d) = book.nearest(&[1.0, 1.0]);
        assert_eq!((k, d), (1, 0.0));
    }

    #[test]
    fn empty_codebook_rejected() {
        assert!(Codebook::new(Tensor::<f32>::zeros(&[0, 4])).is_err());
        assert!(Codebook::new(Tensor::<f32>::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn quantize_exact_entry_has_zero_error() {
        let entries: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let book = Codebook::new(Tensor::<f64>::from_f64(&[4, 2], &entries).unwrap()).unwrap();
        // One 1×1 latent equal to entry 3 = (6, 7).
        let z = Tensor::from_f64(&[1, 2, 1, 1], &[6.0, 7.0]).unwrap();
        let q = quantize(&z, &book).unwrap();
        assert_eq!(q.grids[0].indices(), &[3]);
        assert_eq!(q.codebook_loss, 0.0);
        assert_eq!(q.latents, z);
    }

    #[test]
    fn quantize_rejects_width_mismatch() {
        let book = Codebook::new(Tensor::<f32>::zeros(&[4, 3])).unwrap();
        assert!(quantize(&Tensor::<f32>::zeros(&[1, 2, 2, 2]), &book).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(VqConfig::default().validate().is_ok());
        let bad = VqConfig {
            downsample_f: 3,
            ..VqConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = VqConfig {
            image_size: 30,
            ..VqConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encode_shape_contract_and_pixel_range() {
        let tok = VqTokenizer::<f32>::new(VqConfig::default(), 1).unwrap();
        let x = Tensor::<f32>::full(&[2, 3, 32, 32], 0.5);
        let grids = tok.encode_image(&x).unwrap();
        assert_eq!(grids.len(), 2);
        assert_eq!((grids[0].height(), grids[0].width()), (8, 8));
        assert_eq!(grids[0].masked_count(), 0);
        let bad = Tensor::<f32>::full(&[1, 3, 32, 32], 1.5);
        assert!(tok.encode_image(&bad).is_err());
    }

    #[test]
    fn decode_rejects_masked_and_is_deterministic() {
        let tok = VqTokenizer::<f32>::new(VqConfig::default(), 2).unwrap();
        let mut grid = TokenGrid::new(8, 8, 256, (0..64).map(|i| i * 3 % 256).collect()).unwrap();
        let a = tok.decode_tokens(std::slice::from_ref(&grid)).unwrap();
        let b = tok.decode_tokens(std::slice::from_ref(&grid)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 3, 32, 32]);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        grid.mask_cell(5);
        assert!(tok.decode_tokens(&[grid]).is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let img = crate::datagen::render(&crate::datagen::all_specs()[0], 32).unwrap();
        let train = TokenizerTrainConfig {
            steps: 0,
            seed: 9,
            ..Default::default()
        };
        let (tok, report) = train_tokenizer(&[img], &VqConfig::default(), &train, |_| {}).unwrap();
        assert!(report.curve.is_empty());
        assert_eq!(tok.params, VqTokenizer::<f32>::new(VqConfig::default(), 9).unwrap().params);
    }
}
