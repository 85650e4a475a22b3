//! Zero-shot editing: re-decode a masked region of an encoded image under a new caption.

use crate::error::{invalid, shape_err, Result};
use crate::imageio::RgbImage;
use crate::model::T2iModel;
use crate::sampler::{DecodeTrace, Decoder, SamplerConfig};
use crate::scalar::Scalar;
use crate::tensor::softmax_slice;
use crate::tokens::TokenGrid;
use crate::vq::VqTokenizer;

#[derive(Clone, Debug)]
pub struct EditRequest {
    pub image: RgbImage,
    /// Row-major, one entry per pixel; `true` marks the region to regenerate.
    pub region: Vec<bool>,
    pub caption: String,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug)]
pub struct EditOutput {
    pub image: RgbImage,
    pub source: TokenGrid,
    pub tokens: TokenGrid,
    pub token_mask: Vec<bool>,
    pub trace: DecodeTrace,
}

/// A token cell is masked iff any pixel of its `f × f` patch is masked.
pub fn project_mask(mask: &[bool], width: usize, height: usize, f: usize) -> Result<Vec<bool>> {
    if mask.len() != width * height {
        return Err(shape_err!("mask of {} pixels for a {width}×{height} image", mask.len()));
    }
    if f == 0 || width % f != 0 || height % f != 0 {
        return Err(invalid!("image {width}×{height} is not divisible by patch size {f}"));
    }
    let gw = width / f;
    let mut out = vec![false; gw * (height / f)];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                out[(y / f) * gw + x / f] = true;
            }
        }
    }
    if !out.contains(&true) {
        return Err(invalid!("edit region is empty"));
    }
    Ok(out)
}

/// Re-decodes the masked cells of `source` under `caption`; every other cell is kept.
/// An all-false mask returns `source` unchanged.
pub fn edit_tokens<S: Scalar>(
    model: &T2iModel<S>,
    source: &TokenGrid,
    token_mask: &[bool],
    caption: &str,
    config: &SamplerConfig,
) -> Result<(TokenGrid, DecodeTrace)> {
    let start = source.masked_with(token_mask)?;
    let decoder = Decoder::new(model, config, caption)?;
    decoder.run(&start)
}

pub fn edit<S: Scalar>(tokenizer: &VqTokenizer<S>, model: &T2iModel<S>, request: &EditRequest) -> Result<EditOutput> {
    let f = tokenizer.config.downsample_f;
    let token_mask = project_mask(&request.region, request.image.width, request.image.height, f)?;
    let source = tokenizer.encode_rgb(std::slice::from_ref(&request.image))?.remove(0);
    let (tokens, trace) = edit_tokens(model, &source, &token_mask, &request.caption, &request.sampler)?;
    let image = tokenizer.decode_rgb(std::slice::from_ref(&tokens))?.remove(0);
    Ok(EditOutput {
        image,
        source,
        tokens,
        token_mask,
        trace,
    })
}

/// Mask for editing without a user region: the `⌈ρ·N⌉` cells whose source tokens
/// the model finds least likely under `caption` from a fully masked guided pass.
/// Ties go to the lower position.
pub fn confidence_mask<S: Scalar>(
    model: &T2iModel<S>,
    source: &TokenGrid,
    caption: &str,
    strength: f64,
    config: &SamplerConfig,
) -> Result<Vec<bool>> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(invalid!("edit strength {strength} outside (0, 1]"));
    }
    if source.masked_count() != 0 {
        return Err(invalid!("source grid has masked cells"));
    }
    let n = source.len();
    let decoder = Decoder::new(model, config, caption)?;
    let (logits, _) = decoder.guided_logits(&model.fully_masked())?;
    let k = model.model.codebook_k;
    let mut probs = vec![S::zero(); k];
    let mut scored: Vec<(usize, f64)> = (0..n)
        .map(|pos| {
            probs.copy_from_slice(&logits.data()[pos * k..(pos + 1) * k]);
            softmax_slice(&mut probs);
            (pos, probs[source.get(pos) as usize].f64())
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let count = ((strength * n as f64).ceil() as usize).clamp(1, n);
    let mut mask = vec![false; n];
    for &(pos, _) in &scored[..count] {
        mask[pos] = true;
    }
    Ok(mask)
}

/// Editing without a region: remask by [`confidence_mask`] and re-decode.
pub fn edit_mask_free<S: Scalar>(
    model: &T2iModel<S>,
    source: &TokenGrid,
    caption: &str,
    strength: f64,
    config: &SamplerConfig,
) -> Result<(TokenGrid, DecodeTrace)> {
    let mask = confidence_mask(model, source, caption, strength, config)?;
    edit_tokens(model, source, &mask, caption, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{generate_tokens, tests::tiny_model};

    fn brute(mask: &[bool], w: usize, h: usize, f: usize) -> Vec<bool> {
        let mut out = Vec::new();
        for ty in 0..h / f {
            for tx in 0..w / f {
                let mut hit = false;
                for dy in 0..f {
                    for dx in 0..f {
                        hit |= mask[(ty * f + dy) * w + tx * f + dx];
                    }
                }
                out.push(hit);
            }
        }
        out
    }

    #[test]
    fn projection_examples() {
        let mut one = vec![false; 16 * 16];
        one[5 * 16 + 9] = true;
        let t = project_mask(&one, 16, 16, 4).unwrap();
        assert_eq!(t.iter().filter(|&&b| b).count(), 1);
        assert!(t[4 + 2]);
        assert!(project_mask(&vec![true; 256], 16, 16, 4).unwrap().iter().all(|&b| b));
        let checker: Vec<bool> = (0..256).map(|i| (i % 16 + i / 16) % 2 == 0).collect();
        assert_eq!(project_mask(&checker, 16, 16, 4).unwrap(), brute(&checker, 16, 16, 4));
        assert!(project_mask(&checker, 16, 16, 4).unwrap().iter().all(|&b| b));
        assert!(project_mask(&vec![false; 256], 16, 16, 4).is_err());
        assert!(project_mask(&vec![true; 255], 16, 16, 4).is_err());
        assert!(project_mask(&vec![true; 15 * 16], 15, 16, 4).is_err());
    }

    #[test]
    fn projection_is_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a: Vec<bool> = (0..64).map(|_| rng.random_bool(0.05)).collect();
            let b: Vec<bool> = a.iter().map(|&x| x || rng.random_bool(0.05)).collect();
            if let (Ok(ta), Ok(tb)) = (project_mask(&a, 8, 8, 2), project_mask(&b, 8, 8, 2)) {
                assert!(ta.iter().zip(&tb).all(|(&x, &y)| !x || y));
            }
        }
    }

    #[test]
    fn preserves_outside_region_and_counts_passes() {
        let m = tiny_model();
        let source = TokenGrid::new(4, 4, 16, (0..16).map(|i| (i * 7 % 16) as u32).collect()).unwrap();
        let mask: Vec<bool> = (0..16).map(|i| i % 5 == 0).collect();
        let cfg = SamplerConfig {
            steps: 3,
            ..SamplerConfig::default()
        };
        let (out, trace) = edit_tokens(&m, &source, &mask, "a red circle", &cfg).unwrap();
        assert_eq!(out.masked_count(), 0);
        assert_eq!(trace.forward_passes, 6);
        for p in 0..16 {
            if !mask[p] {
                assert_eq!(out.get(p), source.get(p));
            }
        }
        let (same, t0) = edit_tokens(&m, &source, &[false; 16], "a red circle", &cfg).unwrap();
        assert_eq!(same, source);
        assert_eq!(t0.forward_passes, 0);
    }

    #[test]
    fn full_mask_is_generation() {
        let m = tiny_model();
        let cfg = SamplerConfig {
            steps: 4,
            seed: 9,
            ..SamplerConfig::default()
        };
        let source = TokenGrid::new(4, 4, 16, vec![3; 16]).unwrap();
        let edited = edit_tokens(&m, &source, &[true; 16], "a blue square", &cfg).unwrap();
        assert_eq!(edited, generate_tokens(&m, "a blue square", &cfg).unwrap());
    }

    #[test]
    fn mask_free_strength() {
        let m = tiny_model();
        let source = TokenGrid::new(4, 4, 16, (0..16).map(|i| i as u32).collect()).unwrap();
        let cfg = SamplerConfig::default();
        let mask = confidence_mask(&m, &source, "a red circle", 0.3, &cfg).unwrap();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 5);
        assert!(confidence_mask(&m, &source, "a red circle", 0.0, &cfg).is_err());
        let (out, _) = edit_mask_free(&m, &source, "a red circle", 0.3, &cfg).unwrap();
        for p in (0..16).filter(|&p| !mask[p]) {
            assert_eq!(out.get(p), source.get(p));
        }
    }
}
