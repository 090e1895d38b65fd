//! Two-stage optimization: group-factorized cross-entropy with warmup
//! scheduling and scheduled sampling, self-critical fine-tuning with a
//! rest-sample baseline, sequence knowledge distillation, and teacher
//! weight initialization.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{decode_caption, encode_caption, DatasetItem, Vocabulary};
use crate::decoding::{beam_decode, greedy_decode_batch, sample_decode, SampleOutput};
use crate::error::{Error, Result};
use crate::graph::{Reduction, Var};
use crate::masks::relaxed_mask;
use crate::metrics::{cider_d, evaluate, EvalReport, NGramStats};
use crate::model::{Model, RegionFeatures, Session};
use crate::rng::SplitMix64;

/// K-shifted teacher-forcing pair for one caption: the decoder sees K START
/// symbols plus every full target group but the last, and predicts the whole
/// caption (targets padded with PAD to K times the group count). Targets in
/// a final partial group stay in the output but are never fed as input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftedPair {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn k_shift(ids: &[usize], k: usize) -> Result<ShiftedPair> {
    if ids.is_empty() {
        return Err(Error::validation("cannot shift an empty caption"));
    }
    if k == 0 {
        return Err(Error::validation("group size must be at least 1"));
    }
    let t = ids.len();
    let n_groups = (t - 1) / k + 1;
    let mut targets = ids.to_vec();
    targets.resize(k * n_groups, Vocabulary::PAD);
    let mut inputs = vec![Vocabulary::START; k];
    inputs.extend_from_slice(&ids[..k * (n_groups - 1)]);
    Ok(ShiftedPair { inputs, targets })
}

/// Sum of per-token cross-entropies for one item (single decoder pass under
/// the relaxed mask) plus the number of real target tokens.
pub fn xe_item_loss(
    sess: &mut Session,
    feats: &RegionFeatures,
    inputs: &[usize],
    targets: &[usize],
) -> Result<(Var, usize)> {
    let k = sess.model().config.k_eff();
    let enc = sess.encode(feats)?;
    let mask = relaxed_mask(inputs.len(), k);
    let logits = sess.decode(inputs, enc, Some(&mask))?;
    let loss = sess
        .graph
        .cross_entropy(logits, targets, Vocabulary::PAD, Reduction::Sum)?;
    let n = targets.iter().filter(|&&t| t != Vocabulary::PAD).count();
    Ok((loss, n))
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scheduled sampling probability: 0.05 more every 5 epochs, capped.
pub fn scheduled_sampling_probability(epoch: u64, cap: f64) -> f64 {
    (0.05 * (epoch / 5) as f64).min(cap)
}

/// Replaces whole input groups (never the leading START group),
/// independently with probability `p`, by the model's own greedy prediction
/// for that group from a preliminary teacher-forced pass.
pub fn scheduled_sampling_inputs(
    model: &Model,
    feats: &RegionFeatures,
    pair: &ShiftedPair,
    p: f64,
    rng: &mut SplitMix64,
) -> Result<Vec<usize>> {
    let mut inputs = pair.inputs.clone();
    if p <= 0.0 {
        return Ok(inputs);
    }
    let k = model.config.k_eff();
    let mut sess = Session::eval(model);
    let enc = sess.encode(feats)?;
    let mask = relaxed_mask(inputs.len(), k);
    let logits_var = sess.decode(&inputs, enc, Some(&mask))?;
    let logits = sess.graph.value(logits_var);
    let n_groups = inputs.len() / k;
    for g in 1..n_groups {
        if rng.next_f64() < p {
            for r in 0..k {
                inputs[g * k + r] = argmax_row(logits.row((g - 1) * k + r));
            }
        }
    }
    Ok(inputs)
}

/// Adam with an optional Noam-style warmup schedule; `warmup = 0` keeps the
/// base rate constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn warmed_up(base_lr: f64, warmup: usize) -> OptimizerConfig {
        OptimizerConfig {
            base_lr,
            warmup,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn constant(base_lr: f64) -> OptimizerConfig {
        Self::warmed_up(base_lr, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Optimizer {
        Optimizer {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Rate at 1-based step `s`: `base * sqrt(warmup) * min(s^-1/2,
    /// s * warmup^-3/2)`, which peaks at exactly `base` when `s = warmup`.
    pub fn learning_rate(&self, s: u64) -> f64 {
        if self.config.warmup == 0 {
            return self.config.base_lr;
        }
        let w = self.config.warmup as f64;
        let s = s as f64;
        self.config.base_lr * w.sqrt() * (s.powf(-0.5)).min(s * w.powf(-1.5))
    }

    /// One Adam update. Parameters without a gradient entry are untouched.
    pub fn apply(&mut self, model: &mut Model, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.step += 1;
        let lr = self.learning_rate(self.step);
        let OptimizerConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let param = model
                .param_mut(name)
                .ok_or_else(|| Error::MissingParameter { name: name.clone() })?;
            if g.len() != param.numel() {
                return Err(Error::validation(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    param.numel()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let values = param.values_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                values[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Optimizer> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Gradients of every parameter the session's graph touched.
pub fn collect_grads(sess: &Session) -> BTreeMap<String, Vec<f64>> {
    sess.param_vars()
        .filter_map(|(name, var)| sess.graph.grad(var).map(|g| (name.clone(), g.to_vec())))
        .collect()
}

/// Leave-one-out advantages: each sample's reward minus the mean reward of
/// the other N-1 samples.
pub fn leave_one_out_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n < 2 {
        return Err(Error::validation(
            "rest-sample baseline needs at least 2 samples",
        ));
    }
    let sum: f64 = rewards.iter().sum();
    Ok(rewards
        .iter()
        .map(|&r| r - (sum - r) / (n - 1) as f64)
        .collect())
}

/// Draws N multinomial captions and scores each with CIDEr-D against the
/// item's references.
pub fn scst_sample_rewards(
    model: &Model,
    feats: &RegionFeatures,
    refs: &[String],
    vocab: &Vocabulary,
    idf: &NGramStats,
    n_samples: usize,
    temperature: f64,
    rng: &mut SplitMix64,
) -> Result<(Vec<SampleOutput>, Vec<f64>)> {
    if n_samples < 2 {
        return Err(Error::validation(
            "self-critical training needs at least 2 samples",
        ));
    }
    let cap = model.config.max_len;
    let samples: Vec<SampleOutput> = (0..n_samples)
        .map(|_| sample_decode(model, feats, temperature, cap, rng))
        .collect::<Result<_>>()?;
    let captions: Vec<String> = samples
        .iter()
        .map(|s| decode_caption(&s.tokens, vocab))
        .collect();
    let refs_per: Vec<Vec<String>> = (0..n_samples).map(|_| refs.to_vec()).collect();
    let (_, rewards) = cider_d(&captions, &refs_per, idf)?;
    Ok((samples, rewards))
}

/// Builds `-(1/N) sum_n advantage_n * sum_t log p(token_t)` on the session's
/// graph by re-running each sampled caption teacher-forced.
pub fn scst_loss_term(
    sess: &mut Session,
    feats: &RegionFeatures,
    samples: &[SampleOutput],
    advantages: &[f64],
) -> Result<Var> {
    if samples.is_empty() || samples.len() != advantages.len() {
        return Err(Error::validation(
            "scst_loss_term needs matching nonempty samples/advantages",
        ));
    }
    let k = sess.model().config.k_eff();
    let n = samples.len() as f64;
    let enc = sess.encode(feats)?;
    let mut acc: Option<Var> = None;
    for (sample, &adv) in samples.iter().zip(advantages) {
        let tokens = &sample.tokens;
        let l = tokens.len();
        let groups = l.div_ceil(k);
        let mut fed = vec![Vocabulary::START; k];
        fed.extend_from_slice(&tokens[..k * (groups - 1)]);
        let mask = relaxed_mask(fed.len(), k);
        let logits = sess.decode(&fed, enc, Some(&mask))?;
        let rows = sess.graph.slice_rows(logits, 0, l);
        let logps = sess.graph.log_softmax_gather(rows, tokens)?;
        let summed = sess.graph.sum(logps);
        let term = sess.graph.scale(summed, -adv / n);
        acc = Some(match acc {
            None => term,
            Some(a) => sess.graph.add(a, term),
        });
    }
    Ok(acc.unwrap())
}

/// Per-item SCST diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScstItemStats {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Samples, scores, and builds the self-critical loss for one item.
pub fn scst_item_loss(
    sess: &mut Session,
    feats: &RegionFeatures,
    refs: &[String],
    vocab: &Vocabulary,
    idf: &NGramStats,
    n_samples: usize,
    temperature: f64,
    rng: &mut SplitMix64,
) -> Result<(Var, ScstItemStats)> {
    let (samples, rewards) =
        scst_sample_rewards(sess.model(), feats, refs, vocab, idf, n_samples, temperature, rng)?;
    let advantages = leave_one_out_advantages(&rewards)?;
    let term = scst_loss_term(sess, feats, &samples, &advantages)?;
    Ok((term, ScstItemStats { rewards, advantages }))
}

/// Replaces every item's references with the K=1 teacher's beam output
/// (duplicated to the reference-count schema), preserving the originals in
/// `orig_refs` for evaluation.
pub fn distill_dataset(
    teacher: &Model,
    items: &[DatasetItem],
    beam_width: usize,
    vocab: &Vocabulary,
) -> Result<Vec<DatasetItem>> {
    if teacher.config.k != 1 {
        return Err(Error::validation(format!(
            "distillation requires a K=1 teacher checkpoint, got K={}",
            teacher.config.k
        )));
    }
    let cap = teacher.config.max_len;
    items
        .iter()
        .map(|item| {
            let feats = item.region_features()?;
            let out = beam_decode(teacher, &feats, beam_width, cap)?;
            let caption = decode_caption(&out.tokens, vocab);
            Ok(DatasetItem {
                id: item.id,
                features: item.features.clone(),
                refs: vec![caption; item.refs.len()],
                scene: item.scene.clone(),
                orig_refs: Some(
                    item.orig_refs
                        .clone()
                        .unwrap_or_else(|| item.refs.clone()),
                ),
            })
        })
        .collect()
}

/// Mean per-item entropy (nats) of the unigram distribution over each item's
/// reference tokens.
pub fn unigram_conditional_entropy(items: &[DatasetItem]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for item in items {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut n = 0usize;
        for r in &item.refs {
            for tok in r.split_whitespace() {
                *counts.entry(tok).or_insert(0) += 1;
                n += 1;
            }
        }
        if n == 0 {
            continue;
        }
        let h: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.ln()
            })
            .sum();
        total += h;
    }
    total / items.len() as f64
}

/// Copies every teacher parameter into the student by canonical name. The
/// configs must be identical apart from K.
pub fn init_from_teacher(student: &mut Model, teacher: &Model) -> Result<()> {
    if teacher.config.with_k(student.config.k) != student.config {
        return Err(Error::validation(
            "teacher and student configs differ beyond the group size K",
        ));
    }
    let names: Vec<String> = student.params().map(|(n, _)| n.clone()).collect();
    if teacher.params().count() != names.len() {
        return Err(Error::validation(
            "teacher and student have different parameter sets",
        ));
    }
    for name in names {
        let src = teacher
            .param(&name)
            .ok_or_else(|| Error::MissingParameter { name: name.clone() })?;
        let dst = student.param_mut(&name).unwrap();
        if src.shape() != dst.shape() {
            return Err(Error::ParameterShape {
                name,
                expected: dst.shape().to_vec(),
                found: src.shape().to_vec(),
            });
        }
        dst.values_mut().copy_from_slice(src.values());
    }
    Ok(())
}

/// Training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Xe,
    Scst,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Xe => "xe",
            Stage::Scst => "scst",
        }
    }
}

/// A dataset item preprocessed for the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub id: u64,
    pub feats: RegionFeatures,
    pub refs: Vec<String>,
    pub encoded: Vec<Vec<usize>>,
    pub eval_refs: Vec<String>,
}

pub fn prepare_items(
    items: &[DatasetItem],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TrainItem>> {
    items
        .iter()
        .map(|item| {
            if item.refs.is_empty() {
                return Err(Error::validation(format!("item {} has no references", item.id)));
            }
            Ok(TrainItem {
                id: item.id,
                feats: item.region_features()?,
                refs: item.refs.clone(),
                encoded: item
                    .refs
                    .iter()
                    .map(|r| encode_caption(r, vocab, max_len))
                    .collect(),
                eval_refs: item.eval_refs().to_vec(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    /// Train epochs `start_epoch..epochs`.
    pub epochs: u64,
    pub start_epoch: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// SCST samples per item.
    pub n_samples: usize,
    pub temperature: f64,
    pub scheduled_sampling: bool,
    pub ss_cap: f64,
}

impl Default for TrainOptions {
    fn default() -> TrainOptions {
        TrainOptions {
            epochs: 1,
            start_epoch: 0,
            batch_size: 10,
            seed: 7,
            n_samples: 5,
            temperature: 1.0,
            scheduled_sampling: false,
            ss_cap: 0.25,
        }
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: u64,
    pub loss: f64,
    pub val_bleu1: f64,
    pub val_bleu4: f64,
    pub val_rouge_l: f64,
    pub val_cider_d: f64,
    pub wall_time_s: f64,
}

/// Greedy-decodes every item and scores the captions against each item's
/// evaluation references.
pub fn evaluate_model(
    model: &Model,
    items: &[TrainItem],
    vocab: &Vocabulary,
    idf: &NGramStats,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty split"));
    }
    let cap = model.config.max_len;
    let mut captions = Vec::with_capacity(items.len());
    for chunk in items.chunks(25) {
        let refs: Vec<&RegionFeatures> = chunk.iter().map(|i| &i.feats).collect();
        let (outs, _) = greedy_decode_batch(model, &refs, cap)?;
        captions.extend(outs.iter().map(|o| decode_caption(&o.tokens, vocab)));
    }
    let refs: Vec<Vec<String>> = items.iter().map(|i| i.eval_refs.clone()).collect();
    evaluate(&captions, &refs, idf)
}

fn xe_train_batch(
    model: &mut Model,
    opt: &mut Optimizer,
    train: &[TrainItem],
    idx: &[usize],
    epoch: u64,
    opts: &TrainOptions,
    rng: &mut SplitMix64,
) -> Result<f64> {
    let k = model.config.k_eff();
    let p = if opts.scheduled_sampling {
        scheduled_sampling_probability(epoch, opts.ss_cap)
    } else {
        0.0
    };
    let mut prepared = Vec::with_capacity(idx.len());
    for &i in idx {
        let item = &train[i];
        let ids = &item.encoded[(epoch as usize + item.id as usize) % item.encoded.len()];
        let pair = k_shift(ids, k)?;
        let inputs = if p > 0.0 {
            scheduled_sampling_inputs(model, &item.feats, &pair, p, rng)?
        } else {
            pair.inputs.clone()
        };
        prepared.push((i, inputs, pair.targets));
    }

    let mut sess = Session::train(model, SplitMix64::new(rng.next_u64()));
    let mut acc: Option<Var> = None;
    let mut total_tokens = 0usize;
    for (i, inputs, targets) in &prepared {
        let (loss, n) = xe_item_loss(&mut sess, &train[*i].feats, inputs, targets)?;
        total_tokens += n;
        acc = Some(match acc {
            None => loss,
            Some(a) => sess.graph.add(a, loss),
        });
    }
    let loss = sess.graph.scale(acc.unwrap(), 1.0 / total_tokens as f64);
    let loss_val = sess.graph.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite XE loss {loss_val} at epoch {epoch}, optimizer step {}",
            opt.step() + 1
        )));
    }
    sess.graph.backward(loss)?;
    let grads = collect_grads(&sess);
    drop(sess);
    opt.apply(model, &grads)?;
    Ok(loss_val)
}

fn scst_train_batch(
    model: &mut Model,
    opt: &mut Optimizer,
    train: &[TrainItem],
    idx: &[usize],
    epoch: u64,
    vocab: &Vocabulary,
    idf: &NGramStats,
    opts: &TrainOptions,
    rng: &mut SplitMix64,
) -> Result<f64> {
    let mut sess = Session::eval(model);
    let mut acc: Option<Var> = None;
    for &i in idx {
        let item = &train[i];
        // Rewards score against the original references (eval_refs), so
        // self-critical tuning optimizes the reported metric even when the
        // XE stage ran on distilled captions.
        let (term, _) = scst_item_loss(
            &mut sess,
            &item.feats,
            &item.eval_refs,
            vocab,
            idf,
            opts.n_samples,
            opts.temperature,
            rng,
        )?;
        acc = Some(match acc {
            None => term,
            Some(a) => sess.graph.add(a, term),
        });
    }
    let loss = sess.graph.scale(acc.unwrap(), 1.0 / idx.len() as f64);
    let loss_val = sess.graph.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite SCST loss {loss_val} at epoch {epoch}, optimizer step {}",
            opt.step() + 1
        )));
    }
    sess.graph.backward(loss)?;
    let grads = collect_grads(&sess);
    drop(sess);
    opt.apply(model, &grads)?;
    Ok(loss_val)
}

/// Runs one training stage for epochs `start_epoch..epochs`. Each epoch's
/// randomness derives from `(seed, epoch)` alone, so resuming from a
/// checkpoint plus optimizer sidecar reproduces the trajectory exactly.
/// `on_epoch` fires after validation with the epoch record and the updated
/// model/optimizer (for checkpointing and logging).
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    model: &mut Model,
    opt: &mut Optimizer,
    stage: Stage,
    train: &[TrainItem],
    val: &[TrainItem],
    vocab: &Vocabulary,
    idf: &NGramStats,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord, &Model, &Optimizer) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::validation("batch size must be at least 1"));
    }
    if stage == Stage::Scst && opts.n_samples < 2 {
        return Err(Error::validation(
            "self-critical training needs at least 2 samples",
        ));
    }
    let base = SplitMix64::new(opts.seed);
    let mut records = Vec::new();
    for epoch in opts.start_epoch..opts.epochs {
        let t0 = Instant::now();
        let mut rng = base.derive(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut loss_items = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let loss_val = match stage {
                Stage::Xe => xe_train_batch(model, opt, train, chunk, epoch, opts, &mut rng)?,
                Stage::Scst => {
                    scst_train_batch(model, opt, train, chunk, epoch, vocab, idf, opts, &mut rng)?
                }
            };
            loss_sum += loss_val * chunk.len() as f64;
            loss_items += chunk.len() as f64;
        }
        let report = evaluate_model(model, val, vocab, idf)?;
        let rec = EpochRecord {
            stage: stage.as_str().to_string(),
            epoch,
            loss: loss_sum / loss_items,
            val_bleu1: report.bleu1,
            val_bleu4: report.bleu4,
            val_rouge_l: report.rouge_l,
            val_cider_d: report.cider_d,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec, model, opt)?;
        records.push(rec);
    }
    Ok(records)
}
