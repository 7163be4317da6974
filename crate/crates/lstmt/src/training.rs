//! Teacher-forced cross-entropy training and self-critical policy-
//! gradient fine-tuning.
//!
//! The SCST pseudo-loss is `-(r(sampled) - r(greedy)) * sum_t log
//! p(sampled_t)`; its gradient is the self-critical REINFORCE
//! estimator, with the model's own greedy decode as the baseline.

use crate::data::vocab::{Vocabulary, BOS, EOS, PAD, UNK_TOKEN};
use crate::decoding::{greedy_decode, DecodeConfig, Fusion, LengthNorm};
use crate::error::{Error, Result};
use crate::metrics::{bleu, meteor_lite_sentence, CiderIdf, EvalPair};
use crate::model::{
    decode_step, Captioner, CaptionerParams, FeatureSequence, Stream, TapedParams, TapedState,
    mean_pool,
};
use crate::tape::Tape;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScstReward {
    CiderD,
    Bleu4,
    MeteorLite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub stream: Stream,
    pub scst_enabled: bool,
    pub scst_epochs: usize,
    pub scst_reward: ScstReward,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 4e-4,
            optimizer: Optimizer::Adam,
            batch_size: 16,
            epochs: 10,
            grad_clip_norm: 5.0,
            seed: 0,
            stream: Stream::Rgb,
            scst_enabled: false,
            scst_epochs: 5,
            scst_reward: ScstReward::CiderD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("grad_clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

/// One (features, caption) training unit. The caption starts with BOS
/// and ends with EOS.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub features: Vec<FeatureSequence>,
    pub caption: Vec<u32>,
}

impl TrainingExample {
    pub fn features_for(&self, stream: Stream) -> Result<&FeatureSequence> {
        self.features
            .iter()
            .find(|f| f.stream == stream)
            .ok_or_else(|| Error::Config(format!("example has no {stream} stream features")))
    }

    pub fn check(&self, vocab_size: usize) -> Result<()> {
        if self.caption.len() < 2 || self.caption[0] != BOS || *self.caption.last().unwrap() != EOS
        {
            return Err(Error::Contract(
                "caption must be BOS .. EOS with length >= 2".into(),
            ));
        }
        if self.caption.iter().any(|&t| t as usize >= vocab_size) {
            return Err(Error::Vocab("caption token outside the vocabulary".into()));
        }
        Ok(())
    }
}

/// Teacher-forced negative log-likelihood, mean over non-PAD caption
/// positions.
pub fn xe_loss(model: &Captioner, example: &TrainingExample, stream: Stream) -> Result<f64> {
    let (loss, _) = xe_forward(model, example, stream, false)?;
    Ok(loss)
}

/// Loss and parameter gradients for one example.
pub fn xe_grads(
    model: &Captioner,
    example: &TrainingExample,
    stream: Stream,
) -> Result<(f64, CaptionerParams)> {
    let (loss, grads) = xe_forward(model, example, stream, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn xe_forward(
    model: &Captioner,
    example: &TrainingExample,
    stream: Stream,
    want_grads: bool,
) -> Result<(f64, Option<CaptionerParams>)> {
    example.check(model.config.vocab_size)?;
    let feats = example.features_for(stream)?;
    let mut tape = Tape::new();
    let p = TapedParams::bind(&mut tape, &model.params);
    let feats_id = tape.leaf(feats.features.clone());
    let mut state = TapedState::initial(&mut tape, &model.config, mean_pool(feats));

    let mut picked = Vec::new();
    for w in example.caption.windows(2) {
        let (input, target) = (w[0], w[1]);
        if target == PAD {
            continue;
        }
        let out = decode_step(&mut tape, &p, &model.config, &state, input, feats_id)?;
        picked.push(tape.slice(out.log_probs, target as usize, 1)?);
        state = out.state;
    }
    if picked.is_empty() {
        return Err(Error::Contract("caption has no supervised positions".into()));
    }
    let all = tape.concat(&picked)?;
    let total = tape.sum(all)?;
    let loss = tape.scale(total, -1.0 / picked.len() as f64)?;
    let loss_value = tape.value(loss).data()[0];

    if !want_grads {
        return Ok((loss_value, None));
    }
    let g = tape.backward(loss)?;
    let mut grads = CaptionerParams::zeros(&model.config);
    for ((_, slot), (_, dst)) in p.ids().into_iter().zip(grads.named_mut()) {
        *dst = g.get(slot).clone();
    }
    Ok((loss_value, Some(grads)))
}

/// Global L2 norm over a parameter-shaped gradient set.
pub fn grad_norm(grads: &CaptionerParams) -> f64 {
    grads
        .named()
        .iter()
        .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut CaptionerParams, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.named_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

fn add_scaled(acc: &mut CaptionerParams, g: &CaptionerParams, scale: f64) {
    for ((_, dst), (_, src)) in acc.named_mut().into_iter().zip(g.named()) {
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d += s * scale;
        }
    }
}

/// Optimizer state; Adam moments are kept even when SGD is selected
/// (they stay zero).
pub struct OptimizerState {
    m: CaptionerParams,
    v: CaptionerParams,
    t: u64,
}

impl OptimizerState {
    pub fn new(model: &Captioner) -> Self {
        OptimizerState {
            m: CaptionerParams::zeros(&model.config),
            v: CaptionerParams::zeros(&model.config),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut CaptionerParams,
        grads: &CaptionerParams,
        opt: Optimizer,
        lr: f64,
    ) {
        match opt {
            Optimizer::Sgd => {
                for ((_, p), (_, g)) in params.named_mut().into_iter().zip(grads.named()) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            Optimizer::Adam => {
                self.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for ((((_, p), (_, g)), (_, m)), (_, v)) in params
                    .named_mut()
                    .into_iter()
                    .zip(grads.named())
                    .zip(self.m.named_mut())
                    .zip(self.v.named_mut())
                {
                    for i in 0..g.len() {
                        let gv = g.data()[i];
                        let mv = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gv;
                        let vv = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gv * gv;
                        m.data_mut()[i] = mv;
                        v.data_mut()[i] = vv;
                        let m_hat = mv / bc1;
                        let v_hat = vv / bc2;
                        p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Per-run training history.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub scst_epoch_rewards: Vec<f64>,
}

/// Sentence-level reward used by SCST fine-tuning.
pub struct Rewarder {
    kind: ScstReward,
    idf: CiderIdf,
    vocab: Vocabulary,
}

impl Rewarder {
    /// IDF statistics come from the training references.
    pub fn new(kind: ScstReward, corpus: &[TrainingExample], vocab: &Vocabulary) -> Self {
        let docs: Vec<Vec<Vec<String>>> = corpus
            .iter()
            .map(|ex| vec![ids_to_words(&ex.caption, vocab)])
            .collect();
        Rewarder { kind, idf: CiderIdf::from_reference_docs(&docs), vocab: vocab.clone() }
    }

    /// Reward of a generated token sequence against one reference
    /// caption (both as content ids). Values are percentage-scaled to
    /// match reported metrics.
    pub fn score(&self, candidate: &[u32], reference: &[u32]) -> f64 {
        let cand = ids_to_words(candidate, &self.vocab);
        let refw = ids_to_words(reference, &self.vocab);
        let raw = match self.kind {
            ScstReward::CiderD => self.idf.score(&cand, &[refw]),
            ScstReward::MeteorLite => meteor_lite_sentence(&cand, &refw),
            ScstReward::Bleu4 => {
                let pair = EvalPair {
                    id: "scst".into(),
                    candidate: cand.join(" "),
                    references: vec![refw.join(" ")],
                };
                bleu(&[pair], 4).unwrap_or(0.0)
            }
        };
        raw * 100.0
    }
}

fn ids_to_words(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&t| t != PAD && t != BOS && t != EOS)
        .map(|&t| vocab.token(t).unwrap_or(UNK_TOKEN).to_string())
        .collect()
}

/// Output of one SCST step.
pub struct ScstStep {
    pub grads: CaptionerParams,
    pub pseudo_loss: f64,
    pub sampled: Vec<u32>,
    pub reward_sample: f64,
    pub reward_baseline: f64,
}

/// Strips BOS and a terminal EOS from a decode output.
pub fn generated_tokens(tokens: &[u32]) -> &[u32] {
    let body = if tokens.first() == Some(&BOS) { &tokens[1..] } else { tokens };
    if body.last() == Some(&EOS) {
        &body[..body.len() - 1]
    } else {
        body
    }
}

/// One self-critical step: sample a caption by multinomial sampling,
/// greedy-decode the baseline, and differentiate the pseudo-loss.
/// `reward` scores a generated sequence (BOS/terminal EOS stripped).
pub fn scst_step(
    model: &Captioner,
    features: &FeatureSequence,
    reward: &dyn Fn(&[u32]) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<ScstStep> {
    let max_len = model.config.max_caption_len;

    // baseline: greedy decode (no gradients)
    let dcfg = DecodeConfig {
        beam_width: 1,
        max_len,
        length_norm: LengthNorm::None,
        fusion: Fusion::LogMean,
    };
    let baseline = greedy_decode(&[(model, features)], &dcfg)?;
    let reward_baseline = reward(generated_tokens(&baseline.tokens));

    // sampled rollout, recorded on a tape
    let mut tape = Tape::new();
    let p = TapedParams::bind(&mut tape, &model.params);
    let feats_id = tape.leaf(features.features.clone());
    let mut state = TapedState::initial(&mut tape, &model.config, mean_pool(features));
    let mut sampled = vec![BOS];
    let mut picked = Vec::new();
    for _ in 0..max_len {
        let out = decode_step(&mut tape, &p, &model.config, &state, *sampled.last().unwrap(), feats_id)?;
        let probs: Vec<f64> = tape.value(out.log_probs).data().iter().map(|lp| lp.exp()).collect();
        let dist = WeightedIndex::new(&probs)
            .map_err(|e| Error::Numeric(format!("degenerate sampling distribution: {e}")))?;
        let tok = dist.sample(rng) as u32;
        sampled.push(tok);
        picked.push(tape.slice(out.log_probs, tok as usize, 1)?);
        state = out.state;
        if tok == EOS {
            break;
        }
    }
    let reward_sample = reward(generated_tokens(&sampled));

    let all = tape.concat(&picked)?;
    let sum_logp = tape.sum(all)?;
    let advantage = reward_sample - reward_baseline;
    let pseudo = tape.scale(sum_logp, -advantage)?;
    let pseudo_loss = tape.value(pseudo).data()[0];

    let mut grads = CaptionerParams::zeros(&model.config);
    if advantage != 0.0 {
        let g = tape.backward(pseudo)?;
        for ((_, slot), (_, dst)) in p.ids().into_iter().zip(grads.named_mut()) {
            *dst = g.get(slot).clone();
        }
    }
    Ok(ScstStep { grads, pseudo_loss, sampled, reward_sample, reward_baseline })
}

/// Trains with teacher-forced cross-entropy for `cfg.epochs`, then
/// optionally SCST fine-tunes for `cfg.scst_epochs`. Deterministic for
/// a fixed seed. Progress lines go to `log` (stdout in the CLI).
pub fn train(
    model: &mut Captioner,
    corpus: &[TrainingExample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    for ex in corpus {
        ex.check(model.config.vocab_size)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(model);
    let mut report = TrainReport::default();
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = CaptionerParams::zeros(&model.config);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let (loss, g) = xe_grads(model, &corpus[i], cfg.stream)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("NaN loss on example {i}")));
                }
                epoch_loss += loss;
                add_scaled(&mut grads, &g, inv);
            }
            clip_gradients(&mut grads, cfg.grad_clip_norm);
            opt.step(&mut model.params, &grads, cfg.optimizer, cfg.learning_rate);
        }
        let mean = epoch_loss / corpus.len() as f64;
        report.epoch_losses.push(mean);
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "epoch={epoch} split=train loss={mean:.6} wall_time_s={:.2}",
                start.elapsed().as_secs_f64()
            )?;
        }
    }

    if cfg.scst_enabled && cfg.scst_epochs > 0 {
        let rewarder = Rewarder::new(cfg.scst_reward, corpus, vocab);
        for epoch in 1..=cfg.scst_epochs {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_reward = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut grads = CaptionerParams::zeros(&model.config);
                let inv = 1.0 / batch.len() as f64;
                for &i in batch {
                    let ex = &corpus[i];
                    let feats = ex.features_for(cfg.stream)?;
                    let reference = ex.caption.clone();
                    let reward = |cand: &[u32]| rewarder.score(cand, &reference);
                    let step = scst_step(model, feats, &reward, &mut rng)?;
                    epoch_reward += step.reward_sample;
                    add_scaled(&mut grads, &step.grads, inv);
                }
                clip_gradients(&mut grads, cfg.grad_clip_norm);
                opt.step(&mut model.params, &grads, cfg.optimizer, cfg.learning_rate);
            }
            let mean = epoch_reward / corpus.len() as f64;
            report.scst_epoch_rewards.push(mean);
            if let Some(w) = log.as_deref_mut() {
                writeln!(
                    w,
                    "epoch={epoch} split=scst reward={mean:.4} wall_time_s={:.2}",
                    start.elapsed().as_secs_f64()
                )?;
            }
        }
    }
    Ok(report)
}
