//! Masked-token training: sample a masking rate per item, hide that fraction of
//! cells, and fit the hidden tokens with cross-entropy.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ConditionBundle;
use crate::error::{invalid, Error, Result};
use crate::model::T2iModel;
use crate::scalar::Scalar;
use crate::schedule::{sample_mask_rate, MaskRate};
use crate::tensor::{clip_grad_norm, AdamW, AdamWConfig, Graph, Var};
use crate::tokens::TokenGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    #[serde(with = "crate::config::decimal")]
    pub lr: f64,
    #[serde(with = "crate::config::decimal")]
    pub weight_decay: f64,
    #[serde(with = "crate::config::decimal")]
    pub cond_dropout_p: f64,
    #[serde(with = "crate::config::decimal")]
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Stop once the evaluation cross-entropy falls below this (0 disables).
    #[serde(with = "crate::config::decimal")]
    pub target_eval_ce: f64,
    /// Steps between evaluations (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 1000,
            lr: 1e-4,
            weight_decay: 0.0,
            cond_dropout_p: 0.1,
            grad_clip_norm: 1.0,
            seed: 0,
            target_eval_ce: 0.0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cond_dropout_p) {
            return Err(Error::Config(format!("cond_dropout_p {} outside [0, 1)", self.cond_dropout_p)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!("grad_clip_norm {} must be positive", self.grad_clip_norm)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One tokenized training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub grid: TokenGrid,
    pub text_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub truth: Vec<TokenGrid>,
    pub masked: Vec<TokenGrid>,
    pub rates: Vec<MaskRate>,
    pub text_ids: Vec<Vec<u32>>,
    pub nulled: Vec<bool>,
    pub bundles: Vec<ConditionBundle>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn nulled_count(&self) -> usize {
        self.nulled.iter().filter(|&&n| n).count()
    }
}

/// Number of cells to hide at rate `r`: `round(r·N)` clamped to `[1, N]`.
pub fn masked_count(r: f64, n: usize) -> usize {
    ((r * n as f64).round() as usize).clamp(1, n)
}

/// Masks `masked_count(r, N)` cells chosen uniformly without replacement.
pub fn mask_grid(grid: &TokenGrid, r: f64, rng: &mut impl Rng) -> Result<TokenGrid> {
    let n = grid.len();
    if n == 0 {
        return Err(invalid!("cannot mask an empty grid"));
    }
    let count = masked_count(r, n);
    let mut cells: Vec<u32> = (0..n as u32).collect();
    for i in 0..count {
        let j = rng.random_range(i as u32..n as u32) as usize;
        cells.swap(i, j);
    }
    let mut out = grid.clone();
    for &c in &cells[..count] {
        out.mask_cell(c as usize);
    }
    Ok(out)
}

/// Builds a training batch. The rate condition is the realized masked fraction.
pub fn make_batch<S: Scalar>(
    model: &T2iModel<S>,
    items: &[&TrainItem],
    cond_dropout_p: f64,
    rng: &mut impl Rng,
) -> Result<TrainBatch> {
    let null = model.null_ids();
    let mut batch = TrainBatch {
        truth: Vec::with_capacity(items.len()),
        masked: Vec::with_capacity(items.len()),
        rates: Vec::with_capacity(items.len()),
        text_ids: Vec::with_capacity(items.len()),
        nulled: Vec::with_capacity(items.len()),
        bundles: Vec::with_capacity(items.len()),
    };
    for item in items {
        let r = sample_mask_rate(rng.random::<f64>())?.r;
        let masked = mask_grid(&item.grid, r, rng)?;
        let rate = MaskRate::from_counts(masked.masked_count(), masked.len())?;
        let drop = cond_dropout_p > 0.0 && rng.random::<f64>() < cond_dropout_p;
        let preference = rng.random_range(0.5..=1.0);
        batch.truth.push(item.grid.clone());
        batch.masked.push(masked);
        batch.rates.push(rate);
        batch.text_ids.push(if drop { null.clone() } else { item.text_ids.clone() });
        batch.nulled.push(drop);
        batch.bundles.push(model.bundle(preference, rate));
    }
    Ok(batch)
}

/// Mean cross-entropy of `[B, N, K]` (or `[N, K]`) logits over masked cells only.
pub fn masked_ce_loss<'g, S: Scalar>(logits: Var<'g, S>, truth: &[TokenGrid], masked: &[TokenGrid]) -> Result<Var<'g, S>> {
    let shape = logits.shape();
    let k = *shape.last().unwrap_or(&0);
    let rows = logits.value().numel() / k.max(1);
    let targets: Vec<usize> = truth.iter().flat_map(TokenGrid::ids).collect();
    let mask: Vec<bool> = masked.iter().flat_map(TokenGrid::mask).collect();
    if targets.len() != rows || mask.len() != rows {
        return Err(invalid!("{rows} logit rows for {} target cells", targets.len()));
    }
    logits.reshape(&[rows, k])?.cross_entropy_masked(&targets, &mask)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

impl StepStats {
    /// `step,loss,grad_norm`.
    pub fn log_line(&self) -> String {
        format!("{},{},{}", self.step, self.loss, self.grad_norm)
    }
}

/// Trainer state: model, optimizer and RNG.
pub struct Trainer<S: Scalar> {
    pub model: T2iModel<S>,
    pub config: TrainConfig,
    optimizer: AdamW<S>,
    rng: ChaCha8Rng,
    step: usize,
    /// Directory for batches that produced a non-finite loss.
    pub dump_dir: PathBuf,
    pub nulled_items: usize,
}

#[derive(Serialize)]
struct BatchDump {
    step: usize,
    truth: Vec<Vec<u32>>,
    masked: Vec<Vec<u32>>,
    rate_levels: Vec<usize>,
    text_ids: Vec<Vec<u32>>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: T2iModel<S>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamW::new(AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            }),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            step: 0,
            dump_dir: std::env::temp_dir(),
            nulled_items: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws the next batch from `items` by sampling with replacement when the
    /// batch is smaller than the dataset, otherwise by cycling through all items.
    pub fn next_batch(&mut self, items: &[TrainItem]) -> Result<TrainBatch> {
        if items.is_empty() {
            return Err(invalid!("training set is empty"));
        }
        let picks: Vec<&TrainItem> = if self.config.batch_size >= items.len() {
            (0..self.config.batch_size).map(|i| &items[i % items.len()]).collect()
        } else {
            (0..self.config.batch_size)
                .map(|_| &items[self.rng.random_range(0..items.len() as u32) as usize])
                .collect()
        };
        make_batch(&self.model, &picks, self.config.cond_dropout_p, &mut self.rng)
    }

    /// Backward, clip, AdamW update.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepStats> {
        if !self.model.params.all_finite() {
            return Err(Error::NonFinite("parameters before step".into()));
        }
        let g = Graph::new();
        let logits = self.model.logits_var(&g, &batch.masked, &batch.text_ids, &batch.bundles)?;
        let loss = masked_ce_loss(logits, &batch.truth, &batch.masked);
        let loss = match loss {
            Ok(l) if l.item().f64().is_finite() => l,
            Ok(_) | Err(Error::NonFinite(_)) => return Err(self.dump(batch)?),
            Err(e) => return Err(e),
        };
        let value = loss.item().f64();
        let mut grads = g.backward(loss)?.into_param_grads();
        drop(g);
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(self.dump(batch)?);
        }
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.nulled_items += batch.nulled_count();
        let stats = StepStats {
            step: self.step,
            loss: value,
            grad_norm,
        };
        self.step += 1;
        Ok(stats)
    }

    fn dump(&self, batch: &TrainBatch) -> Result<Error> {
        let dump = BatchDump {
            step: self.step,
            truth: batch.truth.iter().map(|g| g.indices().to_vec()).collect(),
            masked: batch.masked.iter().map(|g| g.indices().to_vec()).collect(),
            rate_levels: batch.rates.iter().map(|r| r.level).collect(),
            text_ids: batch.text_ids.clone(),
        };
        std::fs::create_dir_all(&self.dump_dir)?;
        let path = self.dump_dir.join(format!("nonfinite_batch_step{}.json", self.step));
        std::fs::write(&path, serde_json::to_string(&dump)?)?;
        Ok(Error::NonFiniteLoss {
            step: self.step,
            dump: path,
        })
    }
}

/// Rates at which [`eval_masked_ce`] probes the model.
pub const EVAL_RATES: [f64; 8] = [0.0625, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 1.0];

/// Conditional masked cross-entropy averaged over [`EVAL_RATES`], with masks drawn
/// from a fixed seed so repeated evaluations are comparable.
pub fn eval_masked_ce<S: Scalar>(model: &T2iModel<S>, items: &[TrainItem], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in items.chunks(16) {
        for &r in &EVAL_RATES {
            let truth: Vec<TokenGrid> = chunk.iter().map(|i| i.grid.clone()).collect();
            let masked = truth
                .iter()
                .map(|g| mask_grid(g, r, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let bundles: Vec<ConditionBundle> = masked
                .iter()
                .map(|m| Ok(model.bundle(1.0, MaskRate::from_counts(m.masked_count(), m.len())?)))
                .collect::<Result<_>>()?;
            let ids: Vec<Vec<u32>> = chunk.iter().map(|i| i.text_ids.clone()).collect();
            let g = Graph::inference();
            let logits = model.logits_var(&g, &masked, &ids, &bundles)?;
            total += masked_ce_loss(logits, &truth, &masked)?.item().f64();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Observer decision after a logged step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub log: Vec<StepStats>,
    pub evals: Vec<(usize, f64)>,
    pub nulled_items: usize,
}

impl TrainReport {
    pub fn final_eval(&self) -> Option<f64> {
        self.evals.last().map(|e| e.1)
    }
}

/// Full training loop. `on_step` sees every step and may stop training early.
pub fn train_t2i<S: Scalar>(
    model: T2iModel<S>,
    items: &[TrainItem],
    config: &TrainConfig,
    mut on_step: impl FnMut(&T2iModel<S>, &StepStats) -> Result<Control>,
) -> Result<(T2iModel<S>, TrainReport)> {
    for item in items {
        if item.grid.height() != model.model.grid_h || item.grid.width() != model.model.grid_w {
            return Err(invalid!("training grid extents do not match the model"));
        }
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut report = TrainReport::default();
    for step in 0..config.steps {
        let batch = trainer.next_batch(items)?;
        let stats = trainer.train_step(&batch)?;
        report.log.push(stats);
        let mut stop = on_step(&trainer.model, &stats)? == Control::Stop;
        let last = step + 1 == config.steps;
        if config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || last || stop) {
            let ce = eval_masked_ce(&trainer.model, items, config.seed ^ 0xe7a1)?;
            report.evals.push((step + 1, ce));
            if config.target_eval_ce > 0.0 && ce < config.target_eval_ce {
                stop = true;
            }
        }
        if stop {
            break;
        }
    }
    report.nulled_items = trainer.nulled_items;
    Ok((trainer.model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::tensor::Tensor;
    use crate::text::{TextConfig, Vocabulary};

    fn tiny_model() -> T2iModel<f32> {
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
        T2iModel::new(model, text, Vocabulary::captions(), 16, 3).unwrap()
    }

    fn items(m: &T2iModel<f32>, n: usize) -> Vec<TrainItem> {
        (0..n)
            .map(|i| TrainItem {
                grid: TokenGrid::new(4, 4, 16, (0..16).map(|c| ((c + i) % 16) as u32).collect()).unwrap(),
                text_ids: m.tokenize(&format!("a {} circle", ["red", "blue", "green"][i % 3])),
            })
            .collect()
    }

    #[test]
    fn forced_rates() {
        let grid = TokenGrid::new(8, 8, 16, vec![3; 64]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mask_grid(&grid, 1.0, &mut rng).unwrap().masked_count(), 64);
        assert_eq!(mask_grid(&grid, 0.0, &mut rng).unwrap().masked_count(), 1);
        let m = mask_grid(&grid, 0.5, &mut rng).unwrap();
        assert_eq!(m.masked_count(), 32);
        for p in 0..64 {
            assert!(m.is_masked(p) || m.get(p) == 3);
        }
    }

    #[test]
    fn mask_positions_are_uniform() {
        let grid = TokenGrid::new(8, 8, 16, vec![0; 64]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = [0usize; 64];
        let draws = 10_000;
        for _ in 0..draws {
            let m = mask_grid(&grid, 0.5, &mut rng).unwrap();
            for (p, h) in hits.iter_mut().enumerate() {
                *h += m.is_masked(p) as usize;
            }
        }
        for h in hits {
            assert!((h as f64 / draws as f64 - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn ce_loss_examples() {
        let g = Graph::<f64>::new();
        let truth = vec![TokenGrid::new(1, 2, 256, vec![5, 7]).unwrap()];
        let masked = vec![truth[0].masked_with(&[true, false]).unwrap()];
        let uniform = g.leaf(Tensor::zeros(&[1, 2, 256]));
        let l = masked_ce_loss(uniform, &truth, &masked).unwrap().item();
        assert!((l - 256f64.ln()).abs() < 1e-12);

        let mut onehot = vec![0.0; 512];
        onehot[5] = 1e3;
        let x = g.leaf(Tensor::new(&[1, 2, 256], onehot.clone()).unwrap());
        assert!(masked_ce_loss(x, &truth, &masked).unwrap().item() < 1e-6);

        // Perturbing the unmasked cell changes nothing.
        let base = masked_ce_loss(g.leaf(Tensor::new(&[1, 2, 256], onehot.clone()).unwrap()), &truth, &masked)
            .unwrap()
            .item();
        onehot[256 + 9] = 77.0;
        let moved = masked_ce_loss(g.leaf(Tensor::new(&[1, 2, 256], onehot).unwrap()), &truth, &masked)
            .unwrap()
            .item();
        assert_eq!(base.to_bits(), moved.to_bits());
        assert!(masked_ce_loss(g.leaf(Tensor::zeros(&[1, 2, 256])), &truth, &truth).is_err());
    }

    #[test]
    fn unmasked_logits_receive_zero_gradient() {
        let g = Graph::<f64>::new();
        let truth = vec![TokenGrid::new(1, 3, 4, vec![1, 2, 3]).unwrap()];
        let masked = vec![truth[0].masked_with(&[false, true, false]).unwrap()];
        let x = g.leaf(Tensor::from_f64(&[1, 3, 4], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2]).unwrap());
        let grads = g.backward(masked_ce_loss(x, &truth, &masked).unwrap()).unwrap();
        let gx = grads.wrt(x).unwrap().data();
        assert!(gx[..4].iter().chain(&gx[8..]).all(|&v| v == 0.0));
        assert!(gx[4..8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dropout_fraction_and_zero_dropout() {
        let m = tiny_model();
        let data = items(&m, 4);
        let refs: Vec<&TrainItem> = data.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut nulled = 0;
        let batches = 2500;
        for _ in 0..batches {
            nulled += make_batch(&m, &refs, 0.1, &mut rng).unwrap().nulled_count();
        }
        let frac = nulled as f64 / (batches * refs.len()) as f64;
        assert!((frac - 0.1).abs() < 0.02, "{frac}");
        for _ in 0..200 {
            assert_eq!(make_batch(&m, &refs, 0.0, &mut rng).unwrap().nulled_count(), 0);
        }
    }

    #[test]
    fn batch_invariants() {
        let m = tiny_model();
        let data = items(&m, 3);
        let refs: Vec<&TrainItem> = data.iter().collect();
        let b = make_batch(&m, &refs, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for i in 0..b.len() {
            let n = b.masked[i].masked_count();
            assert!(n >= 1);
            assert_eq!(b.rates[i], MaskRate::from_counts(n, 16).unwrap());
            assert_eq!(b.bundles[i].rate, b.rates[i]);
            assert!((0.5..=1.0).contains(&b.bundles[i].preference_score));
            if b.nulled[i] {
                assert_eq!(b.text_ids[i], m.null_ids());
            }
        }
    }

    #[test]
    fn zero_lr_keeps_parameters_and_runs_are_deterministic() {
        let m = tiny_model();
        let data = items(&m, 4);
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (after, _) = train_t2i(m.clone(), &data, &cfg, |_, _| Ok(Control::Continue)).unwrap();
        assert_eq!(after.params, m.params);

        let cfg = TrainConfig {
            lr: 1e-3,
            steps: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (a, ra) = train_t2i(m.clone(), &data, &cfg, |_, _| Ok(Control::Continue)).unwrap();
        let (b, rb) = train_t2i(m.clone(), &data, &cfg, |_, _| Ok(Control::Continue)).unwrap();
        assert_eq!(ra.log, rb.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn initial_loss_near_uniform_baseline() {
        let m = tiny_model();
        let data = items(&m, 4);
        let mut t = Trainer::new(m, TrainConfig::default()).unwrap();
        let b = t.next_batch(&data).unwrap();
        let s = t.train_step(&b).unwrap();
        let ln_k = 16f64.ln();
        assert!((s.loss - ln_k).abs() < 0.1 * ln_k, "{} vs {ln_k}", s.loss);
        assert_eq!(s.log_line().split(',').count(), 3);
    }

    #[test]
    fn loss_is_batch_order_invariant() {
        let m = tiny_model();
        let data = items(&m, 3);
        let refs: Vec<&TrainItem> = data.iter().collect();
        let b = make_batch(&m, &refs, 0.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let eval = |order: &[usize]| {
            let pick = |v: &Vec<TokenGrid>| order.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
            let ids: Vec<_> = order.iter().map(|&i| b.text_ids[i].clone()).collect();
            let bundles: Vec<_> = order.iter().map(|&i| b.bundles[i]).collect();
            let g = Graph::inference();
            let masked = pick(&b.masked);
            let logits = m.logits_var(&g, &masked, &ids, &bundles).unwrap();
            masked_ce_loss(logits, &pick(&b.truth), &masked).unwrap().item()
        };
        assert!((eval(&[0, 1, 2]) - eval(&[2, 0, 1])).abs() < 1e-5);
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            TrainConfig {
                cond_dropout_p: 1.0,
                ..Default::default()
            },
            TrainConfig {
                grad_clip_norm: 0.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
