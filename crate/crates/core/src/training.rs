//! Pretraining, instruction fine-tuning and preference optimization.
//!
//! Gradients are accumulated per sample over fixed-size chunks; chunks run in
//! parallel and are summed in chunk order, so a seeded run reproduces
//! regardless of the thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, PreferencePair, TokenId, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::geometry::{self, Polygon, DEFAULT_SUPERSAMPLE};
use crate::model::{Float, Group, Model, ParamStore};
use crate::synthdata::{derive_seed, CropSample};

/// Samples per gradient chunk. Part of the reduction order, so changing it
/// changes results at the rounding level.
pub const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Sft,
    Dpo,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "sft" => Ok(Stage::Sft),
            "dpo" => Ok(Stage::Dpo),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Preference temperature; only read by the DPO stage.
    pub beta: f64,
    pub trainable: Vec<Group>,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Hard cap on optimizer steps, mostly for tests.
    pub max_steps: Option<usize>,
}

impl StageConfig {
    pub fn defaults(stage: Stage) -> Self {
        let base = Self {
            stage,
            lr: 2e-4,
            batch_size: 32,
            warmup_ratio: 0.03,
            epochs: 24,
            beta: 0.5,
            trainable: Group::ALL.to_vec(),
            seed: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            max_steps: None,
        };
        match stage {
            // Sized for a 4k-scene desk run; large-batch lrs underfit here.
            Stage::Pretrain => Self {
                lr: 1e-3,
                epochs: 12,
                trainable: vec![Group::PosEmbed, Group::Projector, Group::Lm],
                ..base
            },
            Stage::Sft => Self { lr: 5e-4, epochs: 6, ..base },
            Stage::Dpo => Self { lr: 5e-7, batch_size: 8, epochs: 1, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.stage.name())));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive".into());
        }
        // negated so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("grad_clip must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn total_steps(&self, n_items: usize) -> usize {
        let per_epoch = n_items.div_ceil(self.batch_size);
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }
}

/// Linear warmup over `ceil(ratio * total)` steps from 0, then cosine decay to 0.
pub fn lr_at(step: usize, total: usize, warmup_ratio: f64, peak: f64) -> f64 {
    let warm = (warmup_ratio * total as f64).ceil() as usize;
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled weight decay Adam. Only tensors of trainable groups are touched.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: ParamStore<T>,
    v: ParamStore<T>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Float> AdamW<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64, trainable: &[Group]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let step = T::lit(lr / bc1);
        let sqrt_bc2 = T::lit(bc2.sqrt());
        for i in 0..params.len() {
            if !trainable.contains(&params.groups[i]) {
                continue;
            }
            let decay = if params.shapes[i].len() >= 2 { T::lit(lr * self.weight_decay) } else { T::zero() };
            let (p, g) = (&mut params.data[i], &grads.data[i]);
            let (m, v) = (&mut self.m.data[i], &mut self.v.data[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let pj = p[j];
                p[j] = pj - decay * pj;
                p[j] -= step * m[j] / (v[j].sqrt() / sqrt_bc2 + eps);
            }
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().to_f64().unwrap_or(f64::NAN).sqrt();
    if norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    Abort { step: usize, stage: Stage, reason: String },
}

/// Append-only training history, written as JSON lines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// Runs `f` on every item, each chunk of [`GRAD_CHUNK`] items accumulating
/// into its own buffer, then sums chunks in order.
fn accumulate<T, I, F>(model: &Model<T>, items: &[I], f: F) -> Result<(ParamStore<T>, f64)>
where
    T: Float,
    I: Sync,
    F: Fn(&I, &mut ParamStore<T>) -> Result<f64> + Sync,
{
    let parts: Vec<Result<(ParamStore<T>, f64)>> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = model.zero_grads();
            let mut loss = 0.0;
            for it in chunk {
                loss += f(it, &mut g)?;
            }
            Ok((g, loss))
        })
        .collect();
    let mut total: Option<ParamStore<T>> = None;
    let mut loss = 0.0;
    for p in parts {
        let (g, l) = p?;
        loss += l;
        match total.as_mut() {
            Some(t) => t.add_assign(&g),
            None => total = Some(g),
        }
    }
    Ok((total.unwrap_or_else(|| model.zero_grads()), loss))
}

/// Mean masked next-token loss of a batch and its gradient.
pub fn lm_batch_grads<T: Float>(
    model: &Model<T>,
    batch: &[(&CropSample, TokenSequence)],
    trainable: &[Group],
) -> Result<(ParamStore<T>, f64)> {
    let count: usize = batch.iter().map(|(_, s)| s.loss_mask[1..].iter().filter(|&&m| m).count()).sum();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let w = -1.0 / count as f64;
    accumulate(model, batch, |(sample, seq), g| {
        let (tape, lps) = model.tape(&sample.image, &[&seq.ids])?;
        let weights: Vec<T> = seq.loss_mask[1..].iter().map(|&m| if m { T::lit(w) } else { T::zero() }).collect();
        model.backward(&tape, std::slice::from_ref(&weights), g, trainable);
        Ok(lps[0].iter().zip(&weights).map(|(&l, &wt)| (l * wt).to_f64().unwrap()).sum())
    })
}

/// `-log sigmoid(z)` for the margin `z`, averaged over the batch.
pub fn dpo_loss(policy_chosen: &[f64], policy_rejected: &[f64], ref_chosen: &[f64], ref_rejected: &[f64], beta: f64) -> Result<f64> {
    let n = policy_chosen.len();
    if n == 0 || [policy_rejected.len(), ref_chosen.len(), ref_rejected.len()].iter().any(|&l| l != n) {
        return Err(Error::Shape("dpo_loss needs four equal-length non-empty inputs".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let vals = [policy_chosen[i], policy_rejected[i], ref_chosen[i], ref_rejected[i]];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dpo_loss input {i}")));
        }
        total += softplus(-dpo_margin(vals, beta));
    }
    Ok(total / n as f64)
}

fn dpo_margin([pc, pr, rc, rr]: [f64; 4], beta: f64) -> f64 {
    beta * ((pc - rc) - (pr - rr))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A preference pair bound to its image with frozen reference log-probabilities.
#[derive(Debug, Clone)]
pub struct DpoItem<'a> {
    pub image: &'a crate::synthdata::GrayImage,
    pub pair: &'a PreferencePair,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

fn answer_sum<T: Float>(lps: &[T], prompt_len: usize) -> f64 {
    lps[prompt_len - 1..].iter().map(|v| v.to_f64().unwrap()).sum()
}

/// Chosen and rejected answer log-probabilities under `model`.
pub fn pair_logprobs<T: Float>(model: &Model<T>, image: &crate::synthdata::GrayImage, pair: &PreferencePair) -> Result<(f64, f64)> {
    let (c, r) = (pair.chosen_sequence(), pair.rejected_sequence());
    let (_, lps) = model.tape(image, &[&c.ids, &r.ids])?;
    let pl = pair.prompt.len();
    Ok((answer_sum(&lps[0], pl), answer_sum(&lps[1], pl)))
}

/// Batch-mean DPO loss and its gradient for the policy.
pub fn dpo_batch_grads<T: Float>(
    model: &Model<T>,
    batch: &[DpoItem<'_>],
    beta: f64,
    trainable: &[Group],
) -> Result<(ParamStore<T>, f64)> {
    let inv_b = 1.0 / batch.len().max(1) as f64;
    accumulate(model, batch, |it, g| {
        let (c, r) = (it.pair.chosen_sequence(), it.pair.rejected_sequence());
        let (tape, lps) = model.tape(it.image, &[&c.ids, &r.ids])?;
        let pl = it.pair.prompt.len();
        let (pc, pr) = (answer_sum(&lps[0], pl), answer_sum(&lps[1], pl));
        let vals = [pc, pr, it.ref_chosen, it.ref_rejected];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sequence log-probability".into()));
        }
        let z = dpo_margin(vals, beta);
        // d softplus(-z) / dz = sigmoid(z) - 1
        let dz = (sigmoid(z) - 1.0) * inv_b;
        let weights = |seq: &TokenSequence, coef: f64| -> Vec<T> {
            (1..seq.len()).map(|j| if j >= pl { T::lit(coef) } else { T::zero() }).collect()
        };
        model.backward(&tape, &[weights(&c, beta * dz), weights(&r, -beta * dz)], g, trainable);
        Ok(softplus(-z) * inv_b)
    })
}

struct Loop<'a, T> {
    cfg: &'a StageConfig,
    model: &'a mut Model<T>,
    opt: AdamW<T>,
    log: &'a mut TrainLog,
    step: usize,
    total: usize,
}

impl<T: Float> Loop<'_, T> {
    fn apply(&mut self, mut grads: ParamStore<T>, loss: f64, started: Instant) -> Result<()> {
        if !loss.is_finite() || !grads.all_finite() {
            let reason = format!("non-finite loss or gradient (loss = {loss})");
            self.log.records.push(LogRecord::Abort { step: self.step, stage: self.cfg.stage, reason: reason.clone() });
            return Err(Error::NonFinite(reason));
        }
        let lr = lr_at(self.step, self.total, self.cfg.warmup_ratio, self.cfg.lr);
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.opt.step(&mut self.model.params, &grads, lr, &self.cfg.trainable);
        if !self.model.params.all_finite() {
            let reason = "parameters became non-finite".to_string();
            self.log.records.push(LogRecord::Abort { step: self.step, stage: self.cfg.stage, reason: reason.clone() });
            return Err(Error::NonFinite(reason));
        }
        self.log.records.push(LogRecord::Step(StepRecord {
            step: self.step,
            stage: self.cfg.stage,
            loss,
            lr,
            grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        }));
        self.step += 1;
        Ok(())
    }

    fn done(&self) -> bool {
        self.step >= self.total
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5348_5546, epoch as u64)));
    idx
}

/// Teacher-forced validation: mean masked loss and argmax accuracy on coordinate targets.
pub fn lm_validation<T: Float>(model: &Model<T>, items: &[(&CropSample, TokenSequence)]) -> Result<Vec<(String, f64)>> {
    let vocab = model.config.vocab();
    let per: Vec<Result<(f64, usize, usize, usize)>> = items
        .par_iter()
        .map(|(s, seq)| {
            let vis = model.vision_tokens(&s.image)?;
            let logits = model.forward(&vis, &seq.ids)?;
            let (mut nll, mut n, mut hit, mut coords) = (0.0, 0, 0, 0);
            for j in 1..seq.len() {
                if !seq.loss_mask[j] {
                    continue;
                }
                let row = logits.row(j - 1);
                let lp = crate::model::layers::log_softmax(row);
                nll -= lp[seq.ids[j] as usize].to_f64().unwrap();
                n += 1;
                if vocab.is_coordinate(seq.ids[j]) {
                    coords += 1;
                    hit += usize::from(crate::model::layers::argmax(row) as TokenId == seq.ids[j]);
                }
            }
            Ok((nll, n, hit, coords))
        })
        .collect();
    let (mut nll, mut n, mut hit, mut coords) = (0.0, 0, 0, 0);
    for p in per {
        let (a, b, c, d) = p?;
        nll += a;
        n += b;
        hit += c;
        coords += d;
    }
    Ok(vec![
        ("val_loss".into(), nll / n.max(1) as f64),
        ("val_coord_acc".into(), hit as f64 / coords.max(1) as f64),
    ])
}

fn check_stage(cfg: &StageConfig, want: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != want {
        return Err(Error::StageOrder(format!("config is for {} but {} was requested", cfg.stage.name(), want.name())));
    }
    Ok(())
}

fn run_lm_stage<T, F>(
    cfg: &StageConfig,
    model: &mut Model<T>,
    train: &[CropSample],
    val: &[CropSample],
    format: F,
) -> Result<TrainLog>
where
    T: Float,
    F: Fn(&CropSample, &mut ChaCha8Rng) -> Result<TokenSequence>,
{
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let vocab = model.config.vocab();
    let val_items: Vec<(&CropSample, TokenSequence)> = val
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((s, format(s, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x0056_414C, i as u64)))?)))
        .collect::<Result<_>>()?;
    let _ = &vocab;
    let mut log = TrainLog::default();
    let total = cfg.total_steps(train.len());
    let opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut lp = Loop { cfg, model, opt, log: &mut log, step: 0, total };
    for epoch in 0..cfg.epochs {
        if lp.done() {
            break;
        }
        let order = epoch_order(train.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if lp.done() {
                break;
            }
            let started = Instant::now();
            let batch: Vec<(&CropSample, TokenSequence)> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, i as u64));
                    Ok((&train[i], format(&train[i], &mut rng)?))
                })
                .collect::<Result<_>>()?;
            let (grads, loss) = lm_batch_grads(lp.model, &batch, &cfg.trainable)?;
            lp.apply(grads, loss, started)?;
        }
        if !val_items.is_empty() {
            let metrics = lm_validation(lp.model, &val_items)?;
            lp.log.records.push(LogRecord::Epoch(EpochRecord { epoch, stage: cfg.stage, metrics }));
        }
    }
    Ok(log)
}

/// Next-token training on image + contour with random start vertices.
/// Only the configured groups (by default everything but the encoder) move.
pub fn run_pretrain<T: Float>(cfg: &StageConfig, model: &mut Model<T>, train: &[CropSample], val: &[CropSample]) -> Result<TrainLog> {
    check_stage(cfg, Stage::Pretrain)?;
    let vocab = model.config.vocab();
    run_lm_stage(cfg, model, train, val, |s, rng| codec::format_pretrain(&vocab, s, rng))
}

/// Instruction fine-tuning with loss on the answer span only.
pub fn run_sft<T: Float>(cfg: &StageConfig, model: &mut Model<T>, train: &[CropSample], val: &[CropSample]) -> Result<TrainLog> {
    check_stage(cfg, Stage::Sft)?;
    let vocab = model.config.vocab();
    run_lm_stage(cfg, model, train, val, |s, _| codec::format_sft(&vocab, s))
}

/// Reference log-probabilities for every pair, computed once.
pub fn reference_logprobs<T: Float>(reference: &Model<T>, items: &[(&CropSample, &PreferencePair)]) -> Result<Vec<(f64, f64)>> {
    items.par_iter().map(|(s, p)| pair_logprobs(reference, &s.image, p)).collect()
}

/// Preference optimization of `policy` against the frozen `reference`.
/// Returns the log; the first step record's loss is the loss at identity.
pub fn run_dpo<T: Float>(
    cfg: &StageConfig,
    policy: &mut Model<T>,
    reference: &Model<T>,
    pairs: &[(&CropSample, &PreferencePair)],
) -> Result<TrainLog> {
    check_stage(cfg, Stage::Dpo)?;
    if pairs.is_empty() {
        return Err(Error::Config("no preference pairs".into()));
    }
    let refs = reference_logprobs(reference, pairs)?;
    let items: Vec<DpoItem> = pairs
        .iter()
        .zip(&refs)
        .map(|((s, p), &(rc, rr))| DpoItem { image: &s.image, pair: p, ref_chosen: rc, ref_rejected: rr })
        .collect();
    let mut log = TrainLog::default();
    let total = cfg.total_steps(items.len());
    let opt = AdamW::new(&policy.params, cfg.weight_decay);
    let mut lp = Loop { cfg, model: policy, opt, log: &mut log, step: 0, total };
    for epoch in 0..cfg.epochs {
        let order = epoch_order(items.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if lp.done() {
                break;
            }
            let started = Instant::now();
            let batch: Vec<DpoItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (grads, loss) = dpo_batch_grads(lp.model, &batch, cfg.beta, &cfg.trainable)?;
            lp.apply(grads, loss, started)?;
        }
    }
    Ok(log)
}

/// Held-out reward margins `beta * (dchosen - drejected)` of each pair.
pub fn reward_margins<T: Float>(
    policy: &Model<T>,
    reference: &Model<T>,
    pairs: &[(&CropSample, &PreferencePair)],
    beta: f64,
) -> Result<Vec<f64>> {
    let refs = reference_logprobs(reference, pairs)?;
    let pol = reference_logprobs(policy, pairs)?;
    Ok(pol.iter().zip(&refs).map(|(&(pc, pr), &(rc, rr))| dpo_margin([pc, pr, rc, rr], beta)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub iou_thresh: f64,
    pub complex_min_vertices: usize,
    /// Area fraction of the crop above which a building counts as large.
    pub large_area_frac: f64,
    pub max_corrupt: usize,
    pub insert_delta: i32,
    pub drop_iou: f64,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.8,
            complex_min_vertices: 15,
            large_area_frac: 0.25,
            max_corrupt: 3,
            insert_delta: 4,
            drop_iou: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Prediction,
    Corruption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedPair {
    pub sample_index: usize,
    pub source: PairSource,
    pub rejected_iou: f64,
    pub pair: PreferencePair,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub samples: usize,
    pub prediction_pairs: usize,
    pub corruption_pairs: usize,
    pub decode_failures: usize,
    pub dropped_near_duplicates: usize,
    /// Pairs whose longer answer would not fit the model's context.
    #[serde(default)]
    pub dropped_too_long: usize,
}

/// Corruption branch for one sample: deletion or insertion of 1..=max_corrupt vertices.
fn corrupt<R: Rng>(gt: &Polygon, cfg: &MiningConfig, size: usize, rng: &mut R) -> Result<Polygon> {
    let k = rng.random_range(1..=cfg.max_corrupt.max(1));
    let can_delete = gt.len() >= 3 + k;
    if can_delete && rng.random_bool(0.5) {
        geometry::corrupt_delete(gt, k, rng)
    } else {
        geometry::corrupt_insert(gt, k, cfg.insert_delta, (size, size), rng)
    }
}

fn is_large(gt: &Polygon, size: usize, frac: f64) -> bool {
    geometry::shoelace_signed_area(gt).abs() > frac * (size * size) as f64
}

/// Builds preference pairs from the model's own low-IoU predictions and
/// from corrupted labels of complex or large buildings.
pub fn mine_preferences<T: Float>(
    model: &Model<T>,
    samples: &[CropSample],
    cfg: &MiningConfig,
) -> Result<(Vec<MinedPair>, MiningStats)> {
    let vocab = model.config.vocab();
    let size = model.config.image_size;
    let prompt = codec::sft_prompt(&vocab);
    let refs: Vec<&crate::synthdata::GrayImage> = samples.iter().map(|s| &s.image).collect();
    let outputs = model.generate(&refs, &prompt.ids, max_answer_tokens(model, &prompt))?;
    let max_len = model.config.max_text_len();
    let mut stats = MiningStats { samples: samples.len(), ..Default::default() };
    let mut pairs = Vec::new();
    for (i, (s, ids)) in samples.iter().zip(&outputs).enumerate() {
        match decode_prediction(&vocab, ids) {
            Some(pred) => {
                let iou = geometry::polygon_iou(&pred, &s.gt, DEFAULT_SUPERSAMPLE).unwrap_or(0.0);
                if iou < cfg.iou_thresh {
                    push_pair(&mut pairs, &mut stats, &vocab, max_len, s, i, &pred, iou, PairSource::Prediction, cfg)?;
                }
            }
            None => stats.decode_failures += 1,
        }
        if s.gt.len() > cfg.complex_min_vertices || is_large(&s.gt, size, cfg.large_area_frac) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x4D49_4E45, i as u64));
            if let Ok(bad) = corrupt(&s.gt, cfg, size, &mut rng) {
                let iou = geometry::polygon_iou(&bad, &s.gt, DEFAULT_SUPERSAMPLE).unwrap_or(0.0);
                push_pair(&mut pairs, &mut stats, &vocab, max_len, s, i, &bad, iou, PairSource::Corruption, cfg)?;
            }
        }
    }
    Ok((pairs, stats))
}

fn decode_prediction(vocab: &Vocab, ids: &[TokenId]) -> Option<Polygon> {
    codec::decode_tokens(vocab, ids).ok().and_then(|p| geometry::canonicalize(&p).ok())
}

#[allow(clippy::too_many_arguments)]
fn push_pair(
    pairs: &mut Vec<MinedPair>,
    stats: &mut MiningStats,
    vocab: &Vocab,
    max_len: usize,
    s: &CropSample,
    i: usize,
    rejected: &Polygon,
    iou: f64,
    source: PairSource,
    cfg: &MiningConfig,
) -> Result<()> {
    if iou >= cfg.drop_iou {
        stats.dropped_near_duplicates += 1;
        return Ok(());
    }
    let Ok(pair) = codec::format_dpo(vocab, s, rejected) else {
        stats.decode_failures += 1;
        return Ok(());
    };
    if pair.prompt.len() + pair.chosen.len().max(pair.rejected.len()) > max_len {
        stats.dropped_too_long += 1;
        return Ok(());
    }
    match source {
        PairSource::Prediction => stats.prediction_pairs += 1,
        PairSource::Corruption => stats.corruption_pairs += 1,
    }
    pairs.push(MinedPair { sample_index: i, source, rejected_iou: iou, pair });
    Ok(())
}

/// Decoding budget: whatever context remains after the prompt.
pub fn max_answer_tokens<T: Float>(model: &Model<T>, prompt: &TokenSequence) -> usize {
    model.config.max_text_len().saturating_sub(prompt.len() - 1).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::GrayImage;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn dpo_loss_reference_values() {
        let l = dpo_loss(&[-3.0], &[-5.0], &[-3.0], &[-5.0], 0.5).unwrap();
        assert!(close(l, std::f64::consts::LN_2, 1e-12));
        let l = dpo_loss(&[2.0], &[0.0], &[0.0], &[0.0], 0.5).unwrap();
        assert!(close(l, 0.313262, 1e-6), "{l}");
        assert!(dpo_loss(&[f64::NAN], &[0.0], &[0.0], &[0.0], 0.5).is_err());
        assert!(dpo_loss(&[], &[], &[], &[], 0.5).is_err());
    }

    #[test]
    fn dpo_loss_is_monotone_in_each_ratio() {
        for c in [-4.0, -1.0, 0.0, 0.7, 3.0] {
            let f = |pc: f64, pr: f64| dpo_loss(&[pc], &[pr], &[0.0], &[0.0], 0.5).unwrap();
            let h = 1e-4;
            assert!(f(c + h, 0.3) < f(c - h, 0.3));
            assert!(f(0.3, c + h) > f(0.3, c - h));
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let total = 1000;
        let warm = (0.03f64 * total as f64).ceil() as usize;
        assert_eq!(lr_at(0, total, 0.03, 2e-4), 0.0);
        assert!(close(lr_at(warm, total, 0.03, 2e-4), 2e-4, 1e-18));
        let peak = (0..total).map(|s| lr_at(s, total, 0.03, 2e-4)).enumerate().fold((0, 0.0), |b, (i, v)| if v > b.1 { (i, v) } else { b });
        assert_eq!(peak.0, warm);
        assert!(lr_at(total - 1, total, 0.03, 2e-4) < 1e-8);
        for s in warm..total - 1 {
            assert!(lr_at(s + 1, total, 0.03, 2e-4) <= lr_at(s, total, 0.03, 2e-4));
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let m = Model::<f64>::new(ModelConfig::micro()).unwrap();
        let mut p = m.params.clone();
        let mut g = m.zero_grads();
        let i = m.layout.head_b;
        g.data[i][0] = 0.3;
        g.data[i][1] = -7.0;
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &g, 1e-2, &Group::ALL);
        assert!(close(p.data[i][0], -1e-2, 1e-9));
        assert!(close(p.data[i][1], 1e-2, 1e-9));
        assert_eq!(p.data[i][2], 0.0);
        // frozen groups stay put even with gradients
        let mut q = m.params.clone();
        let mut opt = AdamW::new(&q, 0.1);
        opt.step(&mut q, &g, 1e-2, &[Group::Encoder]);
        for (t, grp) in q.groups.iter().enumerate() {
            if *grp != Group::Encoder {
                assert_eq!(q.data[t], m.params.data[t], "{}", q.names[t]);
            }
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let m = Model::<f64>::new(ModelConfig::micro()).unwrap();
        let mut g = m.zero_grads();
        g.data[0][0] = 3.0;
        g.data[1][0] = 4.0;
        assert!(close(clip_grad_norm(&mut g, 1.0), 5.0, 1e-12));
        assert!(close(g.sq_norm().sqrt(), 1.0, 1e-12));
    }

    fn tiny_sample() -> CropSample {
        let mut img = GrayImage::filled(32, 32, 90);
        for y in 2..15 {
            for x in 2..20 {
                img.set(x, y, 200);
            }
        }
        let gt = Polygon::new(vec![(2, 2), (20, 2), (20, 15), (2, 15)]).unwrap();
        CropSample::new(img, gt, "t".into(), 1.3)
    }

    #[test]
    fn batch_loss_is_nll_on_masked_positions_and_ignores_masked_labels() {
        let m = Model::<f64>::new(ModelConfig::micro()).unwrap();
        let s = tiny_sample();
        let seq = codec::format_sft(&m.config.vocab(), &s).unwrap();
        let (_, loss) = lm_batch_grads(&m, &[(&s, seq.clone())], &Group::ALL).unwrap();

        let vis = m.vision_tokens(&s.image).unwrap();
        let logits = m.forward(&vis, &seq.ids).unwrap();
        let mut targets = seq.ids[1..].to_vec();
        targets.push(codec::PAD);
        let mut mask = seq.loss_mask[1..].to_vec();
        mask.push(false);
        let want = crate::model::nll_loss(&logits, &targets, &mask).unwrap();
        assert!(close(loss, want, 1e-9), "{loss} vs {want}");

        let mut probe = targets.clone();
        for (t, &m) in probe.iter_mut().zip(&mask) {
            if !m {
                *t = codec::EOS;
            }
        }
        let again = crate::model::nll_loss(&logits, &probe, &mask).unwrap();
        assert_eq!(again.to_bits(), want.to_bits());
    }
}
