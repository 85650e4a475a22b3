//! Verification suites. Every check reports a name, a status, the measured value and
//! the threshold it was held to.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{randomize_modulation, stream_qkv, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datagen::make_corpus;
use crate::editor::{edit, project_mask, EditRequest};
use crate::error::{invalid, Result};
use crate::imageio::{GrayImage, RgbImage};
use crate::layers::attention_weights;
use crate::model::T2iModel;
use crate::sampler::{cfg_mix, generate_tokens, generate_unconditional, DecodeTrace, Decoder, SamplerConfig};
use crate::schedule::{
    cosine_schedule, effective_steps, ks_distance, mask_rate_cdf, sample_mask_rate_with, MaskRate, MASK_RATE_LEVELS,
};
use crate::tensor::{concat, grad_check_params, grad_check_with, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::text::{TextConfig, Vocabulary};
use crate::tokens::{read_stream, write_stream, TokenGrid};
use crate::vq::{token_count, VqTokenizer};

pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_STEP: f64 = 1e-4;
pub const KS_LIMIT: f64 = 0.01;
pub const KS_DRAWS: usize = 100_000;
pub const ROPE_TOL: f64 = 1e-6;
pub const RATE_SENSITIVITY_MIN: f64 = 1e-4;
pub const SCHEDULE_STEPS: [usize; 5] = [1, 4, 8, 16, 48];
pub const SCHEDULE_TOKENS: [usize; 3] = [16, 64, 256];

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: String,
}

impl Check {
    pub fn below(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured < limit,
            measured,
            threshold: format!("<{limit:e}"),
        }
    }

    pub fn above(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured > limit,
            measured,
            threshold: format!(">{limit:e}"),
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured >= limit,
            measured,
            threshold: format!(">={limit}"),
        }
    }

    pub fn at_most(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured <= limit,
            measured,
            threshold: format!("<={limit}"),
        }
    }

    pub fn equals(name: impl Into<String>, measured: f64, expected: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured == expected,
            measured,
            threshold: format!("=={expected}"),
        }
    }

    /// Zero violations expected.
    pub fn none(name: impl Into<String>, violations: usize) -> Self {
        Self::equals(name, violations as f64, 0.0)
    }

    pub fn status(&self) -> &'static str {
        if self.passed {
            "PASS"
        } else {
            "FAIL"
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.measured.fract() == 0.0 && self.measured.abs() < 1e15 {
            write!(f, "{} {} {} {}", self.name, self.status(), self.measured, self.threshold)
        } else {
            write!(f, "{} {} {:.6e} {}", self.name, self.status(), self.measured, self.threshold)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Schedule,
    Grad,
    Rope,
    Sampler,
    Edit,
    Persistence,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Schedule,
        Suite::Grad,
        Suite::Rope,
        Suite::Sampler,
        Suite::Edit,
        Suite::Persistence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Schedule => "schedule",
            Suite::Grad => "grad",
            Suite::Rope => "rope",
            Suite::Sampler => "sampler",
            Suite::Edit => "edit",
            Suite::Persistence => "persistence",
        }
    }

    /// `"all"` or a comma-separated list of suite names.
    pub fn parse_selector(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',').map(|p| p.trim().parse()).collect()
    }
}

impl FromStr for Suite {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid!("unknown suite {s:?}; expected one of schedule, grad, rope, sampler, edit, persistence, all"))
    }
}

/// Untrained tokenizer and model for the pre-training suites; modulation is randomized
/// so every pathway is live.
pub struct Fixture {
    pub tokenizer: VqTokenizer<f32>,
    pub model: T2iModel<f32>,
    pub image_size: usize,
}

impl Fixture {
    pub fn untrained(cfg: &RunConfig) -> Result<Self> {
        let tokenizer = VqTokenizer::new(cfg.vq.clone(), cfg.seed)?;
        let mut model = T2iModel::new(
            cfg.model.clone(),
            cfg.text.clone(),
            Vocabulary::captions(),
            cfg.vq.image_size,
            cfg.seed,
        )?;
        randomize_modulation(&mut model.params, 0.3, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        Ok(Self {
            tokenizer,
            model,
            image_size: cfg.vq.image_size,
        })
    }
}

pub fn run(suites: &[Suite], cfg: &RunConfig) -> Result<Vec<Check>> {
    let needs_fixture = suites
        .iter()
        .any(|s| matches!(s, Suite::Sampler | Suite::Edit | Suite::Persistence));
    let fixture = if needs_fixture { Some(Fixture::untrained(cfg)?) } else { None };
    let mut out = Vec::new();
    for &suite in suites {
        let checks = match suite {
            Suite::Schedule => schedule_checks(cfg.seed)?,
            Suite::Grad => grad_checks()?,
            Suite::Rope => rope_checks(cfg.seed)?,
            Suite::Sampler => {
                let f = fixture.as_ref().expect("fixture");
                let mut c = sampler_checks(&f.tokenizer, &f.model, "a large red circle at the center on a blue background", &SCHEDULE_STEPS)?;
                let grid = f.model.fully_masked();
                let ids = f.model.tokenize("a small green square");
                c.push(Check::above(
                    "condition.rate_sensitivity",
                    rate_sensitivity(&f.model, &grid, &ids)?,
                    RATE_SENSITIVITY_MIN,
                ));
                c
            }
            Suite::Edit => {
                let f = fixture.as_ref().expect("fixture");
                edit_checks(&f.tokenizer, &f.model, 100, 1000, cfg.seed)?
            }
            Suite::Persistence => {
                let f = fixture.as_ref().expect("fixture");
                persistence_checks(&f.tokenizer, &f.model, cfg.seed)?
            }
        };
        out.extend(checks);
    }
    Ok(out)
}

pub fn schedule_checks(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..KS_DRAWS).map(|_| sample_mask_rate_with(&mut rng).r).collect();
    let ks = ks_distance(&draws, mask_rate_cdf);
    let elapsed = start.elapsed().as_secs_f64();
    checks.push(Check::below("mask_rate.ks_distance", ks, KS_LIMIT));
    checks.push(Check::below("mask_rate.runtime_s", elapsed, 1.0));

    let mut violations = 0;
    for &t in &SCHEDULE_STEPS {
        for &n in &SCHEDULE_TOKENS {
            violations += schedule_violations(effective_steps(t, n), n)?;
        }
    }
    checks.push(Check::none("schedule.validity", violations));
    let d = SamplerConfig::default();
    checks.push(Check::equals("sampler.default_steps", d.steps as f64, 48.0));
    checks.push(Check::equals("sampler.default_guidance", d.guidance, 9.0));
    checks.push(Check::equals("tokens.count_1024_f16", token_count(1024, 1024, 16)? as f64, 4096.0));
    Ok(checks)
}

/// Number of broken schedule properties for `steps` over `tokens` cells.
pub fn schedule_violations(steps: usize, tokens: usize) -> Result<usize> {
    let s = cosine_schedule(steps, tokens)?;
    let mut v = 0;
    v += usize::from(s.unmask.iter().sum::<usize>() != tokens);
    v += s.unmask.iter().filter(|&&n| n == 0).count();
    v += s.masked.windows(2).filter(|w| w[1] >= w[0]).count();
    v += usize::from(s.masked[0] != tokens || s.masked[steps] != 0);
    v += usize::from(s.unmask.len() != steps);
    Ok(v)
}

fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Deterministic irregular weights so a reduction to a scalar exercises every output entry.
fn weighted_sum<'g>(g: &'g Graph<f64>, out: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    Ok(out.mul(g.constant(Tensor::new(&shape, w)?))?.sum())
}

fn op_check<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<(String, GradCheckReport)>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let report = grad_check_with(|g, v| weighted_sum(g, f(g, v)?), inputs, GRAD_STEP, GRAD_TOL, None)?;
    Ok((name.to_string(), report))
}

/// Gradient checks at `f64` for every differentiable op and for full forward passes.
pub fn grad_reports() -> Result<Vec<(String, GradCheckReport)>> {
    grad_reports_seeded(17)
}

/// As [`grad_reports`], with op inputs drawn from `seed`.
pub fn grad_reports_seeded(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| normal_tensor(shape, &mut rng);
    let (a, b, c) = (t(&[2, 3, 4]), t(&[3, 1]), t(&[4]));
    let (m1, m2) = (t(&[3, 4]), t(&[4, 5]));
    let (b1, b2, b2t) = (t(&[2, 3, 4]), t(&[2, 4, 5]), t(&[2, 5, 4]));
    let (lw, lb) = (t(&[4, 5]), t(&[5]));
    let (cx, cw) = (t(&[1, 2, 5, 5]), t(&[3, 2, 3, 3]));
    let (tx, tw) = (t(&[1, 2, 3, 3]), t(&[2, 3, 4, 4]));
    let (sx, nx, gain) = (t(&[2, 5, 3]), t(&[3, 6]), t(&[6]));
    let (table, logits, rx) = (t(&[7, 4]), t(&[5, 6]), t(&[1, 2, 5, 4]));
    let (p1, p2) = (t(&[2, 3]), t(&[2, 2]));

    let mut out = vec![
        op_check("op.add", &[a.clone(), b.clone()], |_, v| v[0].add(v[1]))?,
        op_check("op.sub", &[a.clone(), c.clone()], |_, v| v[0].sub(v[1]))?,
        op_check("op.mul", &[a.clone(), b.clone()], |_, v| v[0].mul(v[1]))?,
        op_check("op.affine_scale_shift_square", &[a.clone()], |_, v| {
            Ok(v[0].affine(1.7, -0.3).scale(0.6).add_scalar(0.25).square())
        })?,
        op_check("op.silu", &[a.clone()], |_, v| Ok(v[0].silu()))?,
        op_check("op.gelu", &[a.clone()], |_, v| Ok(v[0].gelu()))?,
        op_check("op.sigmoid", &[a.clone()], |_, v| Ok(v[0].sigmoid()))?,
        op_check("op.tanh", &[a.clone()], |_, v| Ok(v[0].tanh()))?,
        op_check("op.exp", &[a.clone()], |_, v| Ok(v[0].exp()))?,
        op_check("op.reshape_permute", &[a.clone()], |_, v| v[0].permute(&[2, 0, 1])?.reshape(&[4, 6]))?,
        op_check("op.transpose", &[a.clone()], |_, v| v[0].transpose(0, 2))?,
        op_check("op.narrow", &[a.clone()], |_, v| v[0].narrow(1, 1, 2))?,
        op_check("op.mean", &[a.clone()], |_, v| Ok(v[0].square().mean()))?,
        op_check("op.sum_axis", &[a.clone()], |_, v| v[0].sum_axis(1))?,
        op_check("op.concat", &[p1, p2], |_, v| concat(&[v[0], v[1]], 1))?,
        op_check("op.matmul", &[m1, m2], |_, v| v[0].matmul(v[1]))?,
        op_check("op.bmm", &[b1.clone(), b2], |_, v| v[0].bmm(v[1], false))?,
        op_check("op.bmm_transposed", &[b1, b2t], |_, v| v[0].bmm(v[1], true))?,
        op_check("op.linear", &[a.clone(), lw, lb], |_, v| v[0].linear(v[1], Some(v[2])))?,
        op_check("op.conv2d", &[cx, cw], |_, v| v[0].conv2d(v[1], 2, 1))?,
        op_check("op.conv_transpose2d", &[tx, tw], |_, v| v[0].conv_transpose2d(v[1], 2, 1))?,
        op_check("op.softmax", &[sx], |_, v| v[0].softmax(1))?,
        op_check("op.layer_norm", &[nx.clone()], |_, v| v[0].layer_norm(1e-5))?,
        op_check("op.rms_norm", &[nx, gain], |_, v| v[0].rms_norm(v[1], 1e-8))?,
        op_check("op.embedding", &[table], |_, v| v[0].embedding(&[1, 3, 3, 6]))?,
        op_check("op.cross_entropy_masked", &[logits], |_, v| {
            v[0].cross_entropy_masked(&[0, 5, 2, 2, 4], &[true, false, true, true, true])
        })?,
        op_check("op.rope", &[rx], |_, v| v[0].rope(&[0, 1, 2, 7, 300], 10_000.0))?,
    ];

    for compressed in [false, true] {
        let (cfg, tcfg, params) = toy_backbone(compressed);
        let name = if compressed { "model.forward_compressed" } else { "model.forward_4_tokens" };
        let grid_side = cfg.grid_h;
        let n = cfg.tokens();
        let truth = TokenGrid::new(grid_side, grid_side, cfg.codebook_k, (0..n).map(|i| (i * 5 % 8) as u32).collect())?;
        let mask: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
        let masked = truth.masked_with(&mask)?;
        let model = T2iModel {
            model: cfg,
            text: tcfg,
            vocab: Vocabulary::captions(),
            image_size: 32,
            params: params.clone(),
        };
        let ids = vec![model.tokenize("a red circle")];
        let bundle = model.bundle(0.8, MaskRate::from_counts(masked.masked_count(), n)?);
        let report = grad_check_params(
            |g, p| {
                let m = T2iModel {
                    params: p.clone(),
                    ..model.clone()
                };
                let logits = m.logits_var(g, std::slice::from_ref(&masked), &ids, &[bundle])?;
                crate::trainer::masked_ce_loss(logits, std::slice::from_ref(&truth), std::slice::from_ref(&masked))
            },
            &params,
            &[],
            GRAD_STEP,
            GRAD_TOL,
            Some(12),
        )?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}

/// Toy backbone in `f64` with live modulation: 2×2 grid, or 4×4 with compression.
pub fn toy_backbone(compressed: bool) -> (ModelConfig, TextConfig, ParamStore<f64>) {
    let cfg = ModelConfig {
        width: 16,
        heads: 2,
        mm_depth: 1,
        sm_depth: 1,
        codebook_k: 8,
        text_width: 8,
        cond_width: 8,
        grid_h: if compressed { 4 } else { 2 },
        grid_w: if compressed { 4 } else { 2 },
        compression_threshold: 4,
        ..ModelConfig::default()
    };
    let tcfg = TextConfig {
        max_len: 4,
        width: 8,
        heads: 2,
        layers: 1,
        vocab_size: Vocabulary::captions().len(),
    };
    let mut model = T2iModel::<f64>::new(cfg.clone(), tcfg.clone(), Vocabulary::captions(), 32, 11).expect("toy config");
    randomize_modulation(&mut model.params, 0.3, &mut ChaCha8Rng::seed_from_u64(12));
    (cfg, tcfg, model.params)
}

pub fn grad_checks() -> Result<Vec<Check>> {
    let mut checks: Vec<Check> = grad_reports()?
        .into_iter()
        .map(|(name, r)| Check::below(format!("grad.{name}"), r.max_rel_error, GRAD_TOL))
        .collect();
    // Non-differentiable by design: the backward rules themselves are checked.
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0])?);
    let q = g.constant(Tensor::from_f64(&[3], &[1.0, -1.0, 2.0])?);
    let y = weighted_sum(&g, x.straight_through(q)?)?.add(weighted_sum(&g, x.detach().square())?)?;
    let grads = g.backward(y)?;
    let gx = grads.wrt(x).expect("leaf gradient");
    let expected: Vec<f64> = (0..3).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let err = gx.data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    checks.push(Check::below("grad.op.straight_through_and_detach", err, 1e-12));
    Ok(checks)
}

fn rope_one(x: &[f64], pos: usize, base: f64) -> Result<Vec<f64>> {
    let g = Graph::inference();
    let v = g.constant(Tensor::new(&[1, x.len()], x.to_vec())?).rope(&[pos], base)?;
    Ok(v.value().data().to_vec())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max deviation from the relative-position identity over `trials` random draws.
pub fn rope_relative_error(trials: usize, dim: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = ModelConfig::default().rope_base;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let q: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let k: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let i = rng.random_range(0..512usize);
        let j = rng.random_range(0..512usize);
        let lhs = dot(&rope_one(&q, i, base)?, &rope_one(&k, j, base)?);
        let rhs = if i >= j {
            dot(&rope_one(&q, i - j, base)?, &k)
        } else {
            dot(&q, &rope_one(&k, j - i, base)?)
        };
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Max change of attention weights when the query and key projections are scaled by
/// factors drawn log-uniformly from `[0.1, 10]`.
pub fn qk_norm_scale_error(seed: u64) -> Result<f64> {
    let (cfg, _, params) = toy_backbone(false);
    let stream = "bb.mm0.img";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.width;
    let weights = |p: &ParamStore<f64>, h: &Tensor<f64>| -> Result<Tensor<f64>> {
        let g = Graph::inference();
        let (q, k, _) = stream_qkv(&g, &cfg, p, stream, g.constant(h.clone()))?;
        let pos: Vec<usize> = (0..h.shape()[1]).collect();
        let w = attention_weights(q.rope(&pos, cfg.rope_base)?, k.rope(&pos, cfg.rope_base)?, None)?;
        Ok((*w.value()).clone())
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let h = normal_tensor(&[1, 6, d], &mut rng);
        let base = weights(&params, &h)?;
        let alpha = 10f64.powf(rng.random_range(-1.0..1.0));
        let beta = 10f64.powf(rng.random_range(-1.0..1.0));
        let mut scaled = params.clone();
        let w = scaled.get_mut(&format!("{stream}.qkv.w")).expect("qkv weight");
        let cols = 3 * d;
        for (idx, v) in w.data_mut().iter_mut().enumerate() {
            let col = idx % cols;
            if col < d {
                *v *= alpha;
            } else if col < 2 * d {
                *v *= beta;
            }
        }
        worst = worst.max(base.max_abs_diff(&weights(&scaled, &h)?));
    }
    Ok(worst)
}

pub fn rope_checks(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        Check::below("rope.relative_position", rope_relative_error(1000, 16, seed)?, ROPE_TOL),
        Check::below("rope.qk_norm_scale_invariance", qk_norm_scale_error(seed)?, ROPE_TOL),
    ])
}

/// Max `|Δ logits|` between the lowest and highest rate levels at a fixed input.
pub fn rate_sensitivity(model: &T2iModel<f32>, grid: &TokenGrid, ids: &[u32]) -> Result<f64> {
    let lo = model.bundle(1.0, MaskRate::from_level(0)?);
    let hi = model.bundle(1.0, MaskRate::from_level(MASK_RATE_LEVELS - 1)?);
    let a = model.logits(std::slice::from_ref(grid), &[ids.to_vec()], &[lo])?;
    let b = model.logits(std::slice::from_ref(grid), &[ids.to_vec()], &[hi])?;
    Ok(a.max_abs_diff(&b))
}

/// Violations of the decode-trace contract for a run of `steps` requested steps.
pub fn trace_violations(trace: &DecodeTrace, final_grid: &TokenGrid, steps: usize, tokens: usize) -> Result<usize> {
    let steps = effective_steps(steps, tokens);
    let schedule = cosine_schedule(steps, tokens)?;
    let mut v = usize::from(trace.steps.len() != steps);
    v += usize::from(final_grid.masked_count() != 0);
    v += usize::from(trace.forward_passes != 2 * steps);
    let mut seen = vec![false; final_grid.len()];
    for r in &trace.steps {
        v += usize::from(r.masked_before != schedule.masked_after(r.step - 1));
        v += usize::from(r.committed.len() != schedule.unmask_at(r.step));
        v += usize::from(r.rate_level != MaskRate::from_counts(r.masked_before, tokens)?.level);
        for &p in &r.committed {
            v += usize::from(std::mem::replace(&mut seen[p], true));
        }
    }
    Ok(v)
}

/// Violations of the monotone-commitment rule when stepping the decoder by hand.
fn commitment_violations(model: &T2iModel<f32>, caption: &str, config: &SamplerConfig) -> Result<usize> {
    let decoder = Decoder::new(model, config, caption)?;
    let n = model.model.tokens();
    let steps = effective_steps(config.steps, n);
    let schedule = cosine_schedule(steps, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grid = model.fully_masked();
    let mut v = 0;
    for t in 1..=steps {
        let (next, _) = decoder.decode_step(&grid, &schedule, t, &mut rng)?;
        v += (0..n).filter(|&p| !grid.is_masked(p) && grid.get(p) != next.get(p)).count();
        v += usize::from(next.masked_count() != schedule.masked_after(t));
        grid = next;
    }
    v += usize::from(decoder.decode_step(&grid, &schedule, steps + 1, &mut rng).is_ok());
    Ok(v)
}

pub fn sampler_checks(
    tokenizer: &VqTokenizer<f32>,
    model: &T2iModel<f32>,
    caption: &str,
    step_counts: &[usize],
) -> Result<Vec<Check>> {
    let n = model.model.tokens();
    let mut trajectory = 0;
    let mut commitment = 0;
    let mut forwards = 0;
    for (i, &steps) in step_counts.iter().enumerate() {
        for temperature in [0.0, 1.0] {
            let cfg = SamplerConfig {
                steps,
                temperature,
                seed: 100 + i as u64,
                ..SamplerConfig::default()
            };
            let (grid, trace) = generate_tokens(model, caption, &cfg)?;
            trajectory += trace_violations(&trace, &grid, steps, n)?;
            forwards += usize::from(trace.forward_passes != 2 * effective_steps(steps, n));
            commitment += commitment_violations(model, caption, &cfg)?;
        }
    }

    let cfg = SamplerConfig {
        steps: 8,
        seed: 7,
        ..SamplerConfig::default()
    };
    let render = |grid: &TokenGrid| -> Result<RgbImage> { Ok(tokenizer.decode_rgb(std::slice::from_ref(grid))?.remove(0)) };
    let (g1, _) = generate_tokens(model, caption, &cfg)?;
    let (g2, _) = generate_tokens(model, caption, &cfg)?;
    let determinism = usize::from(g1 != g2) + usize::from(render(&g1)?.data != render(&g2)?.data);

    let grid = g1.masked_with(&(0..n).map(|p| p % 2 == 0).collect::<Vec<_>>())?;
    let ids = model.tokenize(caption);
    let bundle = model.bundle(1.0, MaskRate::from_counts(grid.masked_count(), n)?);
    let c = model.logits(std::slice::from_ref(&grid), &[ids], &[bundle])?;
    let u = model.logits(std::slice::from_ref(&grid), &[model.null_ids()], &[bundle])?;
    let bits = |a: &Tensor<f32>, b: &Tensor<f32>| {
        a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count()
    };
    let mut identity = bits(&cfg_mix(&c, &u, 0.0)?, &u) + bits(&cfg_mix(&c, &u, 1.0)?, &c);
    let zero = SamplerConfig { guidance: 0.0, ..cfg.clone() };
    identity += usize::from(generate_tokens(model, caption, &zero)?.0 != generate_unconditional(model, &zero)?.0);

    Ok(vec![
        Check::none("sampler.trajectory", trajectory),
        Check::none("sampler.monotone_commitment", commitment),
        Check::none("sampler.forward_passes_2t", forwards),
        Check::none("sampler.seed_determinism", determinism),
        Check::none("sampler.cfg_identities", identity),
    ])
}

fn brute_force_projection(mask: &[bool], w: usize, h: usize, f: usize) -> Vec<bool> {
    let mut out = vec![false; (w / f) * (h / f)];
    for (ty, row) in out.chunks_mut(w / f).enumerate() {
        for (tx, cell) in row.iter_mut().enumerate() {
            *cell = (0..f * f).any(|i| mask[(ty * f + i / f) * w + tx * f + i % f]);
        }
    }
    out
}

fn random_region(size: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    if rng.random_bool(0.5) {
        let (x0, y0) = (rng.random_range(0..size), rng.random_range(0..size));
        let (x1, y1) = (rng.random_range(x0..size) + 1, rng.random_range(y0..size) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                mask[y * size + x] = true;
            }
        }
    } else {
        let density = rng.random_range(0.0..0.05);
        for m in mask.iter_mut() {
            *m = rng.random_bool(density);
        }
    }
    mask
}

pub fn edit_checks(
    tokenizer: &VqTokenizer<f32>,
    model: &T2iModel<f32>,
    trials: usize,
    projection_trials: usize,
    seed: u64,
) -> Result<Vec<Check>> {
    let size = tokenizer.config.image_size;
    let f = tokenizer.config.downsample_f;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xed17);
    let corpus = make_corpus(16, seed, size)?;
    let mut preservation = 0;
    let mut passes = 0;
    let mut done = 0;
    while done < trials {
        let region = random_region(size, &mut rng);
        if !region.contains(&true) {
            continue;
        }
        let sample = &corpus[rng.random_range(0..corpus.len())];
        let steps = rng.random_range(1..=8);
        let request = EditRequest {
            image: sample.image.clone(),
            region,
            caption: corpus[rng.random_range(0..corpus.len())].caption.clone(),
            sampler: SamplerConfig {
                steps,
                seed: rng.random(),
                ..SamplerConfig::default()
            },
        };
        let out = edit(tokenizer, model, &request)?;
        preservation += (0..out.source.len())
            .filter(|&p| !out.token_mask[p] && out.tokens.get(p) != out.source.get(p))
            .count();
        let region_cells = out.token_mask.iter().filter(|&&b| b).count();
        passes += usize::from(out.trace.forward_passes != 2 * effective_steps(steps, region_cells));
        done += 1;
    }

    let mut mismatches = 0;
    for _ in 0..projection_trials {
        let mask = random_region(size, &mut rng);
        let oracle = brute_force_projection(&mask, size, size, f);
        match project_mask(&mask, size, size, f) {
            Ok(t) => mismatches += usize::from(t != oracle),
            Err(_) => mismatches += usize::from(oracle.contains(&true)),
        }
    }
    Ok(vec![
        Check::none("edit.outside_region_preserved", preservation),
        Check::none("edit.forward_passes_2t", passes),
        Check::none("edit.project_mask_oracle", mismatches),
    ])
}

fn scratch_dir() -> Result<PathBuf> {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let dir = std::env::temp_dir().join(format!("mimgen-verify-{}-{nanos}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn param_bit_mismatches(a: &ParamStore<f32>, b: &ParamStore<f32>) -> usize {
    if a.names().ne(b.names()) {
        return usize::MAX;
    }
    a.iter()
        .map(|(name, t)| {
            let o = b.get(name).expect("same names");
            if o.shape() != t.shape() {
                return t.numel().max(1);
            }
            t.data().iter().zip(o.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count()
        })
        .sum()
}

pub fn persistence_checks(tokenizer: &VqTokenizer<f32>, model: &T2iModel<f32>, seed: u64) -> Result<Vec<Check>> {
    let dir = scratch_dir()?;
    let result = (|| -> Result<Vec<Check>> {
        let tok_path = dir.join("tokenizer.ckpt");
        let t2i_path = dir.join("t2i.ckpt");
        Checkpoint::from_tokenizer(tokenizer, seed)?.save(&tok_path)?;
        Checkpoint::from_t2i(model, seed)?.save(&t2i_path)?;
        let tok = Checkpoint::load(&tok_path)?;
        let t2i = Checkpoint::load(&t2i_path)?;
        let mut ckpt = usize::from(tok.to_bytes()? != std::fs::read(&tok_path)?);
        ckpt += usize::from(t2i.to_bytes()? != std::fs::read(&t2i_path)?);
        let tok = tok.into_tokenizer()?;
        let t2i = t2i.into_t2i()?;
        ckpt = ckpt.saturating_add(param_bit_mismatches(&tok.params, &tokenizer.params));
        ckpt = ckpt.saturating_add(param_bit_mismatches(&t2i.params, &model.params));
        ckpt += usize::from(tok.config != tokenizer.config || t2i.model != model.model || t2i.vocab != model.vocab);

        let samples = make_corpus(8, seed, tokenizer.config.image_size)?;
        let images: Vec<RgbImage> = samples.iter().map(|s| s.image.clone()).collect();
        let grids = tokenizer.encode_rgb(&images)?;
        let mut with_mask = grids[0].clone();
        with_mask.mask_cell(3);
        let mut all = grids.clone();
        all.push(with_mask);
        let tokens_path = dir.join("tokens.bin");
        write_stream(&tokens_path, &all)?;
        let tokens = usize::from(read_stream(&tokens_path)? != all);

        let mut files = 0;
        for (i, img) in images.iter().enumerate() {
            for ext in ["ppm", "png"] {
                let p = dir.join(format!("{i}.{ext}"));
                img.save(&p)?;
                files += usize::from(&RgbImage::load(&p)? != img);
            }
        }
        let mask = GrayImage::from_mask(5, 3, &[true, false, true, true, false, false, true, false, false, true, true, true, false, false, true])?;
        let p = dir.join("mask.pgm");
        mask.save_pgm(&p)?;
        files += usize::from(GrayImage::load_pgm(&p)? != mask);
        Ok(vec![
            Check::none("persistence.checkpoint_bit_exact", ckpt),
            Check::none("persistence.token_file_bit_exact", tokens),
            Check::none("persistence.image_files_bit_exact", files),
        ])
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_parsing() {
        assert_eq!(Suite::parse_selector("all").unwrap().len(), 6);
        assert_eq!(Suite::parse_selector("schedule").unwrap(), vec![Suite::Schedule]);
        assert_eq!(Suite::parse_selector("grad,rope").unwrap(), vec![Suite::Grad, Suite::Rope]);
        assert!(Suite::parse_selector("bogus").is_err());
    }

    #[test]
    fn check_line_format() {
        let c = Check::below("x.y", 0.5, 1.0);
        assert_eq!(c.to_string(), "x.y PASS 5.000000e-1 <1e0");
        assert_eq!(Check::none("n", 0).to_string(), "n PASS 0 ==0");
        assert!(!Check::none("z", 2).passed);
    }

    #[test]
    fn brute_projection_matches_on_a_known_mask() {
        let mut m = vec![false; 64];
        m[9] = true;
        m[63] = true;
        let b = brute_force_projection(&m, 8, 8, 4);
        assert_eq!(b, vec![true, false, false, true]);
        assert_eq!(project_mask(&m, 8, 8, 4).unwrap(), b);
    }

    #[test]
    fn schedule_suite_passes() {
        assert!(schedule_checks(0).unwrap().iter().all(|c| c.passed));
    }
}
