//! Masking-rate sampling, rate discretization, the inference unmasking schedule,
//! and sinusoidal scalar embeddings.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use crate::error::{invalid, Result};

/// Number of discrete masking-rate levels fed to the model.
pub const MASK_RATE_LEVELS: usize = 1000;

/// Default period of the slowest sinusoidal channel.
pub const DEFAULT_MAX_PERIOD: f64 = 10_000.0;

/// A masking rate together with its discrete level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskRate {
    pub r: f64,
    pub level: usize,
}

impl MaskRate {
    pub fn new(r: f64) -> Result<Self> {
        Ok(Self {
            r,
            level: discretize(r)?,
        })
    }

    /// Rate at the midpoint of a level.
    pub fn from_level(level: usize) -> Result<Self> {
        if level >= MASK_RATE_LEVELS {
            return Err(invalid!("mask-rate level {level} outside [0, {})", MASK_RATE_LEVELS));
        }
        Self::new((level as f64 + 0.5) / MASK_RATE_LEVELS as f64)
    }

    /// Rate of `masked` cells out of `total`.
    pub fn from_counts(masked: usize, total: usize) -> Result<Self> {
        if total == 0 || masked > total {
            return Err(invalid!("{masked} masked of {total} cells"));
        }
        Self::new(masked as f64 / total as f64)
    }
}

/// `floor(r · 1000)`, clamped to the top level.
pub fn discretize(r: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&r) {
        return Err(invalid!("masking rate {r} outside [0, 1]"));
    }
    Ok(((r * MASK_RATE_LEVELS as f64).floor() as usize).min(MASK_RATE_LEVELS - 1))
}

/// Truncated-arccos density `p(r) = 2/π · (1 - r²)^(-1/2)` on `[0, 1)`.
pub fn mask_rate_density(r: f64) -> f64 {
    2.0 / PI / (1.0 - r * r).sqrt()
}

/// `F(r) = 2/π · arcsin(r)`.
pub fn mask_rate_cdf(r: f64) -> f64 {
    2.0 / PI * r.clamp(0.0, 1.0).asin()
}

/// Inverse-CDF transform of a uniform draw: `r = sin(π·u/2)`.
pub fn sample_mask_rate(u: f64) -> Result<MaskRate> {
    if !(0.0..=1.0).contains(&u) {
        return Err(invalid!("uniform draw {u} outside [0, 1]"));
    }
    MaskRate::new((FRAC_PI_2 * u).sin().clamp(0.0, 1.0))
}

pub fn sample_mask_rate_with(rng: &mut impl Rng) -> MaskRate {
    sample_mask_rate(rng.random::<f64>()).expect("uniform draw in [0, 1)")
}

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((((i + 1) as f64) / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Per-step unmasking plan for `tokens` cells over `total_steps` steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferenceSchedule {
    pub total_steps: usize,
    pub tokens: usize,
    /// `masked[t]` cells remain masked after step `t`; `masked[0] == tokens`, `masked[T] == 0`.
    pub masked: Vec<usize>,
    /// `unmask[t - 1]` cells are committed at step `t`.
    pub unmask: Vec<usize>,
}

impl InferenceSchedule {
    /// Target masked fraction `γ_t = cos(π·t / 2T)`.
    pub fn gamma(&self, t: usize) -> f64 {
        cosine_gamma(t, self.total_steps)
    }

    pub fn masked_after(&self, t: usize) -> usize {
        self.masked[t]
    }

    pub fn unmask_at(&self, t: usize) -> usize {
        self.unmask[t - 1]
    }

    /// Two-column `t m_t` table.
    pub fn table(&self) -> String {
        self.masked
            .iter()
            .enumerate()
            .map(|(t, m)| format!("{t} {m}\n"))
            .collect()
    }
}

fn cosine_gamma(t: usize, total: usize) -> f64 {
    (PI * t as f64 / (2.0 * total as f64)).cos()
}

/// Steps actually run for `steps` requested over `tokens` cells: every step must
/// commit at least one cell, so the count is capped at `tokens`.
pub fn effective_steps(steps: usize, tokens: usize) -> usize {
    steps.min(tokens)
}

/// Cosine unmasking schedule: `m_t = floor(γ_t · N)`, then every step is repaired
/// to commit at least one cell by taking the deficit from the currently largest step.
pub fn cosine_schedule(total_steps: usize, tokens: usize) -> Result<InferenceSchedule> {
    if total_steps == 0 {
        return Err(invalid!("schedule needs at least one step"));
    }
    if total_steps > tokens {
        return Err(invalid!(
            "{total_steps} steps cannot each unmask at least one of {tokens} tokens"
        ));
    }
    let floor_masked: Vec<usize> = (0..=total_steps)
        .map(|t| {
            if t == total_steps {
                0
            } else {
                ((cosine_gamma(t, total_steps) * tokens as f64).floor() as usize).min(tokens)
            }
        })
        .collect();
    let mut unmask: Vec<usize> = floor_masked.windows(2).map(|w| w[0] - w[1]).collect();
    while let Some(empty) = unmask.iter().position(|&n| n == 0) {
        // Largest step, earliest on ties.
        let (donor, _) = unmask
            .iter()
            .enumerate()
            .fold((0, 0), |best, (i, &n)| if n > best.1 { (i, n) } else { best });
        unmask[donor] -= 1;
        unmask[empty] = 1;
    }
    let mut masked = Vec::with_capacity(total_steps + 1);
    let mut remaining = tokens;
    masked.push(remaining);
    for &n in &unmask {
        remaining -= n;
        masked.push(remaining);
    }
    Ok(InferenceSchedule {
        total_steps,
        tokens,
        masked,
        unmask,
    })
}

/// Interleaved `[sin(v·ω_0), cos(v·ω_0), sin(v·ω_1), ...]` with angular frequencies
/// spaced geometrically from `1` down to `2π / max_period` (the slowest channel has
/// period `max_period`).
pub fn sinusoidal_embed(value: f64, dim: usize, max_period: f64) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid!("sinusoidal embedding width must be even and positive, got {dim}"));
    }
    let half = dim / 2;
    let slowest = 2.0 * PI / max_period;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let omega = if half == 1 {
            slowest
        } else {
            slowest.powf(i as f64 / (half - 1) as f64)
        };
        let (s, c) = (value * omega).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sample_boundaries() {
        assert_eq!(sample_mask_rate(0.0).unwrap().r, 0.0);
        assert_eq!(sample_mask_rate(1.0).unwrap().r, 1.0);
        assert!(sample_mask_rate(1.5).is_err());
        assert!(sample_mask_rate(-0.1).is_err());
    }

    #[test]
    fn density_at_zero() {
        assert!((mask_rate_density(0.0) - 0.63662).abs() < 1e-5);
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(0.0).unwrap(), 0);
        assert_eq!(discretize(1.0).unwrap(), 999);
        assert_eq!(discretize(0.5).unwrap(), 500);
        assert!(discretize(1.01).is_err());
        assert!(discretize(f64::NAN).is_err());
    }

    #[test]
    fn level_midpoints_discretize_to_themselves() {
        for level in 0..MASK_RATE_LEVELS {
            assert_eq!(MaskRate::from_level(level).unwrap().level, level);
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = cosine_schedule(1, 64).unwrap();
        assert_eq!(s.unmask, vec![64]);
        assert_eq!(s.masked, vec![64, 0]);
    }

    #[test]
    fn eight_step_schedule_table() {
        let s = cosine_schedule(8, 64).unwrap();
        assert_eq!(s.masked[4], 45);
        assert!((s.gamma(4) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_too_many_steps() {
        assert!(cosine_schedule(65, 64).is_err());
        assert!(cosine_schedule(0, 64).is_err());
        assert!(cosine_schedule(64, 64).is_ok());
    }

    #[test]
    fn sinusoidal_zero_and_odd() {
        let e = sinusoidal_embed(0.0, 8, DEFAULT_MAX_PERIOD).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        assert!(sinusoidal_embed(1.0, 7, DEFAULT_MAX_PERIOD).is_err());
    }

    #[test]
    fn sinusoidal_slowest_channel_period() {
        let e = sinusoidal_embed(DEFAULT_MAX_PERIOD / (2.0 * PI), 16, DEFAULT_MAX_PERIOD).unwrap();
        assert!((e[14] - 1f64.sin()).abs() < 1e-12);
        assert!((e[15] - 1f64.cos()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn schedule_postconditions(tokens in 1usize..600, frac in 0.0f64..1.0) {
            let steps = 1 + ((tokens - 1) as f64 * frac) as usize;
            let s = cosine_schedule(steps, tokens).unwrap();
            prop_assert_eq!(s.unmask.iter().sum::<usize>(), tokens);
            prop_assert!(s.unmask.iter().all(|&n| n >= 1));
            prop_assert_eq!(s.masked[0], tokens);
            prop_assert_eq!(s.masked[steps], 0);
            prop_assert!(s.masked.windows(2).all(|w| w[0] > w[1]));
        }

        #[test]
        fn sinusoidal_distinct_values_differ(a in 0.0f64..1000.0, b in 0.0f64..1000.0) {
            prop_assume!((a - b).abs() > 1e-6);
            let ea = sinusoidal_embed(a, 64, DEFAULT_MAX_PERIOD).unwrap();
            let eb = sinusoidal_embed(b, 64, DEFAULT_MAX_PERIOD).unwrap();
            let d: f64 = ea.iter().zip(&eb).map(|(x, y)| (x - y).powi(2)).sum();
            prop_assert!(d > 0.0);
        }
    }
}
