//! Parallel iterative decoding with classifier-free guidance.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ConditionBundle;
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::T2iModel;
use crate::scalar::Scalar;
use crate::schedule::{cosine_schedule, effective_steps, InferenceSchedule, MaskRate};
use crate::tensor::{softmax_slice, Tensor};
use crate::tokens::TokenGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    #[serde(with = "crate::config::decimal")]
    pub guidance: f64,
    #[serde(with = "crate::config::decimal")]
    pub temperature: f64,
    pub seed: u64,
    /// Only `"cosine"` is supported.
    pub schedule: String,
    #[serde(with = "crate::config::decimal")]
    pub preference: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 48,
            guidance: 9.0,
            temperature: 1.0,
            seed: 0,
            schedule: "cosine".into(),
            preference: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Config(format!("guidance scale {} must be finite and ≥ 0", self.guidance)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be finite and ≥ 0", self.temperature)));
        }
        if self.schedule != "cosine" {
            return Err(Error::Config(format!("unknown schedule kind {:?}", self.schedule)));
        }
        Ok(())
    }
}

/// `g = s·c + (1 − s)·u`, i.e. `u + s·(c − u)` with exact identities at `s ∈ {0, 1}`.
pub fn cfg_mix<S: Scalar>(cond: &Tensor<S>, uncond: &Tensor<S>, s: f64) -> Result<Tensor<S>> {
    if cond.shape() != uncond.shape() {
        return Err(shape_err!(
            "guidance needs equal shapes, got {:?} and {:?}",
            cond.shape(),
            uncond.shape()
        ));
    }
    let (a, b) = (S::of(s), S::of(1.0 - s));
    let data = cond.data().iter().zip(uncond.data()).map(|(&c, &u)| a * c + b * u).collect();
    Tensor::new(cond.shape(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub masked_before: usize,
    pub committed: Vec<usize>,
    pub min_confidence: f64,
    pub rate_level: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
    pub forward_passes: usize,
}

impl DecodeTrace {
    /// CSV with columns `step,masked_before,committed,min_confidence`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,masked_before,committed,min_confidence\n");
        for r in &self.steps {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.masked_before, r.committed.len(), r.min_confidence));
        }
        out
    }
}

/// Which branches a decode evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guidance {
    /// Conditional and unconditional passes mixed by the guidance scale.
    Classifier,
    /// Unconditional pass only.
    Unconditional,
}

/// Decoder state shared across steps.
pub struct Decoder<'m, S: Scalar> {
    pub model: &'m T2iModel<S>,
    pub config: &'m SamplerConfig,
    pub text_ids: Vec<u32>,
    pub bundle: ConditionBundle,
    pub guidance: Guidance,
    forwards: Cell<usize>,
}

impl<'m, S: Scalar> Decoder<'m, S> {
    pub fn new(model: &'m T2iModel<S>, config: &'m SamplerConfig, caption: &str) -> Result<Self> {
        config.validate()?;
        let rate = MaskRate::from_level(crate::schedule::MASK_RATE_LEVELS - 1)?;
        Ok(Self {
            model,
            config,
            text_ids: model.tokenize(caption),
            bundle: model.bundle(config.preference, rate),
            guidance: Guidance::Classifier,
            forwards: Cell::new(0),
        })
    }

    pub fn forward_passes(&self) -> usize {
        self.forwards.get()
    }

    fn forward(&self, grid: &TokenGrid, ids: &[u32], bundle: ConditionBundle) -> Result<Tensor<S>> {
        self.forwards.set(self.forwards.get() + 1);
        self.model
            .logits(std::slice::from_ref(grid), &[ids.to_vec()], &[bundle])
    }

    /// Guided logits `[1, N, K]` for `grid` with the rate condition set to its masked fraction.
    pub fn guided_logits(&self, grid: &TokenGrid) -> Result<(Tensor<S>, MaskRate)> {
        let rate = MaskRate::from_counts(grid.masked_count(), grid.len())?;
        let bundle = self.bundle.with_rate(rate);
        let null = self.model.null_ids();
        let uncond = self.forward(grid, &null, bundle)?;
        let mixed = match self.guidance {
            Guidance::Unconditional => uncond,
            Guidance::Classifier => {
                let cond = self.forward(grid, &self.text_ids, bundle)?;
                cfg_mix(&cond, &uncond, self.config.guidance)?
            }
        };
        Ok((mixed, rate))
    }

    /// Step `t` (1-based): predict every masked cell, commit the `n_t` most confident.
    pub fn decode_step(
        &self,
        grid: &TokenGrid,
        schedule: &InferenceSchedule,
        t: usize,
        rng: &mut impl Rng,
    ) -> Result<(TokenGrid, StepRecord)> {
        if t == 0 || t > schedule.total_steps {
            return Err(invalid!("step {t} outside schedule of {} steps", schedule.total_steps));
        }
        let masked_before = grid.masked_count();
        if masked_before != schedule.masked_after(t - 1) {
            return Err(invalid!(
                "grid has {masked_before} masked cells, schedule expects {}",
                schedule.masked_after(t - 1)
            ));
        }
        let (logits, rate) = self.guided_logits(grid)?;
        let k = self.model.model.codebook_k;
        let tau = self.config.temperature;
        let mut candidates: Vec<(usize, u32, f64)> = Vec::with_capacity(masked_before);
        let mut probs = vec![S::zero(); k];
        for pos in (0..grid.len()).filter(|&p| grid.is_masked(p)) {
            let row = &logits.data()[pos * k..(pos + 1) * k];
            probs.copy_from_slice(row);
            softmax_slice(&mut probs);
            let token = if tau == 0.0 {
                argmax(row)
            } else {
                let mut tempered: Vec<S> = row.iter().map(|&v| v / S::of(tau)).collect();
                softmax_slice(&mut tempered);
                categorical(&tempered, rng)
            };
            candidates.push((pos, token as u32, probs[token].f64()));
        }
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let n_t = schedule.unmask_at(t);
        let mut next = grid.clone();
        let mut committed = Vec::with_capacity(n_t);
        let mut min_confidence = f64::INFINITY;
        for &(pos, token, conf) in &candidates[..n_t] {
            next.set(pos, token)?;
            committed.push(pos);
            min_confidence = min_confidence.min(conf);
        }
        committed.sort_unstable();
        Ok((
            next,
            StepRecord {
                step: t,
                masked_before,
                committed,
                min_confidence,
                rate_level: rate.level,
            },
        ))
    }

    /// Decodes every masked cell of `start`; unmasked cells are never touched.
    /// The step count is clamped to the number of masked cells, and a grid with
    /// nothing masked is returned as is.
    pub fn run(&self, start: &TokenGrid) -> Result<(TokenGrid, DecodeTrace)> {
        let masked = start.masked_count();
        if masked == 0 {
            return Ok((start.clone(), DecodeTrace::default()));
        }
        let steps = effective_steps(self.config.steps, masked);
        let schedule = cosine_schedule(steps, masked)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut grid = start.clone();
        let mut trace = DecodeTrace::default();
        let before = self.forward_passes();
        for t in 1..=steps {
            let (next, record) = self.decode_step(&grid, &schedule, t, &mut rng)?;
            grid = next;
            trace.steps.push(record);
        }
        trace.forward_passes = self.forward_passes() - before;
        Ok((grid, trace))
    }
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn categorical<S: Scalar>(probs: &[S], rng: &mut impl Rng) -> usize {
    let mut u = rng.random::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        u -= p.f64();
        if u < 0.0 {
            return i;
        }
    }
    // Rounding left mass at the tail; return the last class with nonzero probability.
    probs.iter().rposition(|&p| p > S::zero()).unwrap_or(probs.len() - 1)
}

/// Decodes a token grid for `caption` from a fully masked start.
pub fn generate_tokens<S: Scalar>(
    model: &T2iModel<S>,
    caption: &str,
    config: &SamplerConfig,
) -> Result<(TokenGrid, DecodeTrace)> {
    let decoder = Decoder::new(model, config, caption)?;
    decoder.run(&model.fully_masked())
}

/// Decodes with the unconditional branch only; the conditional pass is never evaluated.
pub fn generate_unconditional<S: Scalar>(model: &T2iModel<S>, config: &SamplerConfig) -> Result<(TokenGrid, DecodeTrace)> {
    let mut decoder = Decoder::new(model, config, "")?;
    decoder.guidance = Guidance::Unconditional;
    decoder.run(&model.fully_masked())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::backbone::{randomize_modulation, ModelConfig};
    use crate::text::{TextConfig, Vocabulary};

    pub(crate) fn tiny_model() -> T2iModel<f32> {
        let model = ModelConfig {
            width: 16,
            heads: 2,
            mm_depth: 1,
            sm_depth: 1,
            codebook_k: 16,
            text_width: 8,
            cond_width: 8,
            grid_h: 4,
            grid_w: 4,
            ..ModelConfig::default()
        };
        let text = TextConfig {
            width: 8,
            heads: 2,
            layers: 1,
            ..TextConfig::default()
        };
        let mut m = T2iModel::new(model, text, Vocabulary::captions(), 16, 5).unwrap();
        randomize_modulation(&mut m.params, 0.3, &mut ChaCha8Rng::seed_from_u64(1));
        m
    }

    #[test]
    fn cfg_mix_identities() {
        let c = Tensor::<f32>::new(&[3], vec![0.3, -1.7, 2.9]).unwrap();
        let u = Tensor::<f32>::new(&[3], vec![1.1, 0.2, -0.4]).unwrap();
        assert_eq!(cfg_mix(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_mix(&c, &u, 1.0).unwrap(), c);
        let nine = cfg_mix(&Tensor::<f32>::ones(&[1]), &Tensor::zeros(&[1]), 9.0).unwrap();
        assert_eq!(nine.data(), &[9.0]);
        assert!(cfg_mix(&c, &Tensor::zeros(&[2]), 1.0).is_err());
    }

    #[test]
    fn trajectory_matches_schedule_and_terminates() {
        let m = tiny_model();
        for steps in [1, 4, 8, 16] {
            let cfg = SamplerConfig {
                steps,
                temperature: 0.0,
                ..SamplerConfig::default()
            };
            let (grid, trace) = generate_tokens(&m, "a red circle", &cfg).unwrap();
            let schedule = cosine_schedule(steps, 16).unwrap();
            assert_eq!(grid.masked_count(), 0);
            assert_eq!(trace.forward_passes, 2 * steps);
            let mut seen = std::collections::HashSet::new();
            for r in &trace.steps {
                assert_eq!(r.masked_before, schedule.masked_after(r.step - 1));
                assert_eq!(r.committed.len(), schedule.unmask_at(r.step));
                assert_eq!(r.rate_level, MaskRate::from_counts(r.masked_before, 16).unwrap().level);
                assert!(r.committed.iter().all(|&p| seen.insert(p)));
            }
        }
    }

    #[test]
    fn committed_cells_never_change() {
        let m = tiny_model();
        let cfg = SamplerConfig {
            steps: 6,
            ..SamplerConfig::default()
        };
        let d = Decoder::new(&m, &cfg, "a blue square").unwrap();
        let schedule = cosine_schedule(6, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut grid = m.fully_masked();
        for t in 1..=6 {
            let (next, _) = d.decode_step(&grid, &schedule, t, &mut rng).unwrap();
            for p in 0..16 {
                if !grid.is_masked(p) {
                    assert_eq!(grid.get(p), next.get(p));
                }
            }
            grid = next;
        }
        assert!(d.decode_step(&grid, &schedule, 7, &mut rng).is_err());
    }

    #[test]
    fn seed_determinism_and_guidance_zero_equals_unconditional() {
        let m = tiny_model();
        let cfg = SamplerConfig {
            steps: 5,
            seed: 42,
            ..SamplerConfig::default()
        };
        let a = generate_tokens(&m, "a red circle", &cfg).unwrap();
        let b = generate_tokens(&m, "a red circle", &cfg).unwrap();
        assert_eq!(a, b);
        let s0 = SamplerConfig {
            guidance: 0.0,
            ..cfg.clone()
        };
        let (g0, _) = generate_tokens(&m, "a red circle", &s0).unwrap();
        let (gu, tu) = generate_unconditional(&m, &s0).unwrap();
        assert_eq!(g0, gu);
        assert_eq!(tu.forward_passes, 5);
    }

    #[test]
    fn greedy_consumes_no_randomness() {
        let m = tiny_model();
        let mk = |seed| SamplerConfig {
            steps: 4,
            temperature: 0.0,
            seed,
            ..SamplerConfig::default()
        };
        assert_eq!(
            generate_tokens(&m, "a red circle", &mk(1)).unwrap().0,
            generate_tokens(&m, "a red circle", &mk(2)).unwrap().0
        );
    }

    #[test]
    fn csv_header() {
        let m = tiny_model();
        let (_, trace) = generate_tokens(&m, "a red circle", &SamplerConfig { steps: 3, ..Default::default() }).unwrap();
        let csv = trace.to_csv();
        assert!(csv.starts_with("step,masked_before,committed,min_confidence\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
