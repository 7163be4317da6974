//! Greedy and beam-search caption generation, with per-step late fusion
//! of one or two captioners.
//!
//! Fusion averages the models' per-step log-softmax outputs (a
//! geometric mean of the distributions); an arithmetic mean of
//! probabilities is available behind [`Fusion::ProbMean`]. Ties in
//! argmax and beam selection break toward the lower token id.

use crate::data::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{Captioner, DecoderState, FeatureSequence};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    None,
    ByLength,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Arithmetic mean of log-probabilities.
    LogMean,
    /// Arithmetic mean of probabilities, re-logged.
    ProbMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: usize,
    pub length_norm: LengthNorm,
    pub fusion: Fusion,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 3,
            max_len: 30,
            length_norm: LengthNorm::ByLength,
            fusion: Fusion::LogMean,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// A partial caption under construction.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Token ids, starting with BOS.
    pub tokens: Vec<u32>,
    /// Sum of per-step fused log-probabilities; always <= 0.
    pub cum_log_prob: f64,
    /// One decoder state per fused model.
    pub states: Vec<DecoderState>,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated token count, BOS excluded.
    pub fn token_count(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    /// Ranking score under the configured normalization.
    pub fn score(&self, norm: LengthNorm) -> f64 {
        match norm {
            LengthNorm::None => self.cum_log_prob,
            LengthNorm::ByLength => {
                let n = self.token_count().max(1);
                self.cum_log_prob / n as f64
            }
        }
    }
}

/// Output of [`greedy_decode`].
pub struct GreedyOutput {
    /// BOS, the generated tokens, and EOS when emitted before `max_len`.
    pub tokens: Vec<u32>,
    /// Fused log-probability vector at each step.
    pub step_log_probs: Vec<Vec<f64>>,
    /// Attention weights per step, per model.
    pub attention: Vec<Vec<Vec<f64>>>,
}

fn check_group(group: &[(&Captioner, &FeatureSequence)]) -> Result<()> {
    if group.is_empty() || group.len() > 2 {
        return Err(Error::Config(format!(
            "decoding fuses 1 or 2 models, got {}",
            group.len()
        )));
    }
    let vocab = group[0].0.config.vocab_size;
    for (model, feats) in group {
        if model.config.vocab_size != vocab {
            return Err(Error::Config(format!(
                "fused models disagree on vocab_size ({} vs {vocab})",
                model.config.vocab_size
            )));
        }
        if feats.d_v() != model.config.d_v {
            return Err(Error::Config(format!(
                "features for video '{}' ({} stream) have d_v {}, model expects {}",
                feats.video_id,
                feats.stream,
                feats.d_v(),
                model.config.d_v
            )));
        }
    }
    Ok(())
}

fn initial_states(group: &[(&Captioner, &FeatureSequence)]) -> Result<Vec<DecoderState>> {
    group.iter().map(|(m, f)| m.initial_state(f)).collect()
}

/// Advances every model one step and fuses the word distributions.
fn fused_step(
    group: &[(&Captioner, &FeatureSequence)],
    states: &[DecoderState],
    token: u32,
    fusion: Fusion,
) -> Result<(Vec<DecoderState>, Vec<f64>, Vec<Vec<f64>>)> {
    let mut new_states = Vec::with_capacity(group.len());
    let mut per_model_lp: Vec<Vec<f64>> = Vec::with_capacity(group.len());
    let mut lambdas = Vec::with_capacity(group.len());
    for ((model, feats), state) in group.iter().zip(states) {
        let out = model.step(state, token, feats)?;
        new_states.push(out.state);
        per_model_lp.push(out.log_probs);
        lambdas.push(out.lambda);
    }
    let vocab = per_model_lp[0].len();
    let n = per_model_lp.len() as f64;
    let fused: Vec<f64> = match fusion {
        Fusion::LogMean => (0..vocab)
            .map(|v| per_model_lp.iter().map(|lp| lp[v]).sum::<f64>() / n)
            .collect(),
        Fusion::ProbMean => (0..vocab)
            .map(|v| (per_model_lp.iter().map(|lp| lp[v].exp()).sum::<f64>() / n).ln())
            .collect(),
    };
    Ok((new_states, fused, lambdas))
}

fn argmax_lowest_id(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode over the fused distribution; stops at EOS or `max_len`
/// generated tokens.
pub fn greedy_decode(
    group: &[(&Captioner, &FeatureSequence)],
    cfg: &DecodeConfig,
) -> Result<GreedyOutput> {
    cfg.validate()?;
    check_group(group)?;
    let mut states = initial_states(group)?;
    let mut tokens = vec![BOS];
    let mut step_log_probs = Vec::new();
    let mut attention = Vec::new();
    for _ in 0..cfg.max_len {
        let (new_states, fused, lambdas) =
            fused_step(group, &states, *tokens.last().unwrap(), cfg.fusion)?;
        states = new_states;
        let tok = argmax_lowest_id(&fused) as u32;
        tokens.push(tok);
        step_log_probs.push(fused);
        attention.push(lambdas);
        if tok == EOS {
            break;
        }
    }
    Ok(GreedyOutput { tokens, step_log_probs, attention })
}

fn cmp_hyp(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    // higher score first; ties break toward lexicographically smaller tokens
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Classic beam search over fused log-probabilities. With
/// `beam_width = 1` the top hypothesis equals [`greedy_decode`]'s
/// output token-exactly.
pub fn beam_decode(
    group: &[(&Captioner, &FeatureSequence)],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    check_group(group)?;
    let vocab = group[0].0.config.vocab_size;
    let mut beams = vec![Hypothesis {
        tokens: vec![BOS],
        cum_log_prob: 0.0,
        states: initial_states(group)?,
        finished: false,
    }];

    for _ in 0..cfg.max_len {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &beams {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let (new_states, fused, _lambdas) =
                fused_step(group, &hyp.states, *hyp.tokens.last().unwrap(), cfg.fusion)?;
            for tok in 0..vocab as u32 {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    cum_log_prob: hyp.cum_log_prob + fused[tok as usize],
                    states: new_states.clone(),
                    finished: tok == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| cmp_hyp((a.cum_log_prob, &a.tokens), (b.cum_log_prob, &b.tokens)));
        candidates.truncate(cfg.beam_width);
        beams = candidates;
    }

    beams.sort_by(|a, b| {
        cmp_hyp((a.score(cfg.length_norm), &a.tokens), (b.score(cfg.length_norm), &b.tokens))
    });
    Ok(beams)
}

/// One temporally localized event to caption.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Proposal {
    pub t_start: f64,
    pub t_end: f64,
    /// Feature-row range `[frame_start, frame_end)`.
    pub frame_start: usize,
    pub frame_end: usize,
}

#[derive(Clone, Debug)]
pub struct EventCaption {
    pub t_start: f64,
    pub t_end: f64,
    pub tokens: Vec<u32>,
}

/// Decodes one caption per proposal, independently; a bad proposal
/// yields an error entry without affecting the others. Output order
/// preserves input order.
pub fn caption_events(
    group: &[(&Captioner, &FeatureSequence)],
    proposals: &[Proposal],
    cfg: &DecodeConfig,
) -> Result<Vec<Result<EventCaption>>> {
    cfg.validate()?;
    check_group(group)?;
    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        let sliced: Result<Vec<FeatureSequence>> = group
            .iter()
            .map(|(_, f)| f.slice_rows(p.frame_start, p.frame_end))
            .collect();
        let result = sliced.and_then(|slices| {
            let sub: Vec<(&Captioner, &FeatureSequence)> = group
                .iter()
                .zip(&slices)
                .map(|((m, _), s)| (*m, s))
                .collect();
            let hyps = beam_decode(&sub, cfg)?;
            let best = hyps.into_iter().next().ok_or_else(|| {
                Error::Contract("beam search returned no hypotheses".into())
            })?;
            Ok(EventCaption { t_start: p.t_start, t_end: p.t_end, tokens: best.tokens })
        });
        out.push(result);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CaptionerParams, ModelConfig, Stream};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig { d_v: 2, d_h: 3, d_a: 2, d_e: 2, vocab_size: vocab, max_caption_len: 8 }
    }

    fn random_model(vocab: usize, seed: u64) -> Captioner {
        Captioner::init(tiny_config(vocab), seed)
    }

    fn random_feats(d_v: usize, k: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence::new("v", Stream::Rgb, Tensor::uniform(vec![k, d_v], -1.0, 1.0, &mut rng))
            .unwrap()
    }

    #[test]
    fn single_model_fusion_is_identity() {
        let m = random_model(5, 1);
        let f = random_feats(2, 3, 2);
        let cfg = DecodeConfig { max_len: 4, ..Default::default() };
        let out = greedy_decode(&[(&m, &f)], &cfg).unwrap();
        // fused log-probs equal the model's own
        let state = m.initial_state(&f).unwrap();
        let own = m.step(&state, BOS, &f).unwrap();
        for (a, b) in out.step_log_probs[0].iter().zip(&own.log_probs) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fusing_model_with_itself_is_idempotent() {
        let m = random_model(6, 3);
        let f = random_feats(2, 4, 4);
        let cfg = DecodeConfig { max_len: 6, ..Default::default() };
        let single = greedy_decode(&[(&m, &f)], &cfg).unwrap();
        let fused = greedy_decode(&[(&m, &f), (&m, &f)], &cfg).unwrap();
        assert_eq!(single.tokens, fused.tokens);
    }

    #[test]
    fn fused_distribution_is_mean_of_log_probs() {
        let m1 = random_model(5, 10);
        let m2 = random_model(5, 11);
        let f1 = random_feats(2, 3, 12);
        let f2 = random_feats(2, 3, 13);
        let cfg = DecodeConfig { max_len: 1, ..Default::default() };
        let out = greedy_decode(&[(&m1, &f1), (&m2, &f2)], &cfg).unwrap();

        let s1 = m1.initial_state(&f1).unwrap();
        let s2 = m2.initial_state(&f2).unwrap();
        let lp1 = m1.step(&s1, BOS, &f1).unwrap().log_probs;
        let lp2 = m2.step(&s2, BOS, &f2).unwrap().log_probs;
        for v in 0..5 {
            let mean = (lp1[v] + lp2[v]) / 2.0;
            assert!((out.step_log_probs[0][v] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        for seed in 0..10u64 {
            let m = random_model(5, seed);
            let f = random_feats(2, 3, seed + 100);
            let cfg = DecodeConfig { beam_width: 1, max_len: 5, ..Default::default() };
            let g = greedy_decode(&[(&m, &f)], &cfg).unwrap();
            let b = beam_decode(&[(&m, &f)], &cfg).unwrap();
            assert_eq!(b[0].tokens, g.tokens, "seed {seed}");
        }
    }

    #[test]
    fn eos_preferring_model_finishes_at_step_one() {
        let cfg = tiny_config(5);
        let mut params = CaptionerParams::zeros(&cfg);
        params.b_out.data_mut()[EOS as usize] = 25.0;
        let m = Captioner::new(cfg, params).unwrap();
        let f = random_feats(2, 3, 9);
        let dcfg = DecodeConfig::default();
        let hyps = beam_decode(&[(&m, &f)], &dcfg).unwrap();
        assert_eq!(hyps[0].tokens, vec![BOS, EOS]);
        assert!(hyps[0].finished);
        let g = greedy_decode(&[(&m, &f)], &dcfg).unwrap();
        assert_eq!(g.tokens, vec![BOS, EOS]);
    }

    #[test]
    fn greedy_never_exceeds_max_len() {
        // zero-param model never emits EOS deterministically; uniform
        // distribution argmax tie-breaks to PAD (id 0), so it runs to max_len
        let cfg = tiny_config(5);
        let m = Captioner::new(cfg.clone(), CaptionerParams::zeros(&cfg)).unwrap();
        let f = random_feats(2, 3, 5);
        let dcfg = DecodeConfig { max_len: 7, ..Default::default() };
        let g = greedy_decode(&[(&m, &f)], &dcfg).unwrap();
        assert_eq!(g.tokens.len(), 8); // BOS + 7
    }

    #[test]
    fn beam_scores_decrease_monotonically() {
        let m = random_model(5, 21);
        let f = random_feats(2, 3, 22);
        let cfg = DecodeConfig { beam_width: 3, max_len: 6, ..Default::default() };
        let hyps = beam_decode(&[(&m, &f)], &cfg).unwrap();
        for h in &hyps {
            assert!(h.cum_log_prob <= 0.0);
        }
    }

    /// Enumerates every possible token sequence and scores it exactly as
    /// the beam does; independent of the beam implementation.
    fn enumerate_best(
        m: &Captioner,
        f: &FeatureSequence,
        max_len: usize,
        norm: LengthNorm,
    ) -> (Vec<u32>, f64) {
        let vocab = m.config.vocab_size as u32;
        let mut best: Option<(Vec<u32>, f64)> = None;
        let mut stack = vec![(vec![BOS], 0.0f64, m.initial_state(f).unwrap())];
        while let Some((tokens, cum, state)) = stack.pop() {
            let done = *tokens.last().unwrap() == EOS && tokens.len() > 1;
            let len = tokens.len() - 1;
            if done || len == max_len {
                let score = match norm {
                    LengthNorm::None => cum,
                    LengthNorm::ByLength => cum / len.max(1) as f64,
                };
                let better = match &best {
                    None => true,
                    Some((bt, bs)) => {
                        score > *bs || (score == *bs && tokens < *bt)
                    }
                };
                if better {
                    best = Some((tokens, score));
                }
                continue;
            }
            let out = m.step(&state, *tokens.last().unwrap(), f).unwrap();
            for tok in 0..vocab {
                let mut t2 = tokens.clone();
                t2.push(tok);
                stack.push((t2, cum + out.log_probs[tok as usize], out.state.clone()));
            }
        }
        best.unwrap()
    }

    #[test]
    fn exhaustive_beam_matches_enumeration() {
        for seed in 0..5u64 {
            let m = random_model(3, seed + 50);
            let f = random_feats(2, 2, seed + 60);
            let cfg = DecodeConfig {
                beam_width: 27, // 3^3, never prunes
                max_len: 3,
                length_norm: LengthNorm::ByLength,
                fusion: Fusion::LogMean,
            };
            let hyps = beam_decode(&[(&m, &f)], &cfg).unwrap();
            let (best_tokens, _) = enumerate_best(&m, &f, 3, LengthNorm::ByLength);
            assert_eq!(hyps[0].tokens, best_tokens, "seed {seed}");
        }
    }

    #[test]
    fn caption_events_basics() {
        let m = random_model(5, 31);
        let f = random_feats(2, 6, 32);
        let cfg = DecodeConfig { max_len: 4, ..Default::default() };

        let empty = caption_events(&[(&m, &f)], &[], &cfg).unwrap();
        assert!(empty.is_empty());

        let p = Proposal { t_start: 0.0, t_end: 2.5, frame_start: 0, frame_end: 3 };
        let twice = caption_events(&[(&m, &f)], &[p.clone(), p.clone()], &cfg).unwrap();
        let a = twice[0].as_ref().unwrap();
        let b = twice[1].as_ref().unwrap();
        assert_eq!(a.tokens, b.tokens);

        // matches a separate single-proposal decode on the slice
        let slice = f.slice_rows(0, 3).unwrap();
        let direct = beam_decode(&[(&m, &slice)], &cfg).unwrap();
        assert_eq!(a.tokens, direct[0].tokens);

        // empty slice yields a per-proposal error, others unaffected
        let bad = Proposal { t_start: 0.0, t_end: 0.0, frame_start: 2, frame_end: 2 };
        let mixed = caption_events(&[(&m, &f)], &[bad, p], &cfg).unwrap();
        assert!(mixed[0].is_err());
        assert!(mixed[1].is_ok());
    }

    #[test]
    fn vocab_mismatch_is_config_error() {
        let m1 = random_model(5, 41);
        let m2 = random_model(6, 42);
        let f = random_feats(2, 3, 43);
        let cfg = DecodeConfig::default();
        assert!(matches!(
            greedy_decode(&[(&m1, &f), (&m2, &f)], &cfg),
            Err(Error::Config(_))
        ));
    }
}
