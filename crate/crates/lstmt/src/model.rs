//! The sentence-generation architecture: word embedding, mean-pooled
//! context, temporal attention over per-timestep features, a two-layer
//! LSTM, and a softmax word head.
//!
//! Per step, the first-layer LSTM consumes `[h2_prev, embed(w_t), v_bar]`,
//! attention scores each feature row with `w_a . tanh(W_f v_i + W_h h1)`,
//! the attended feature `v_hat = sum_i lambda_i v_i` and `h1` feed the
//! second-layer LSTM, and word logits are `W_out h2 + b_out`.

use crate::data::vocab::UNK;
use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

pub const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature dimension of each per-timestep vector.
    pub d_v: usize,
    /// LSTM hidden size (both layers).
    pub d_h: usize,
    /// Attention hidden size.
    pub d_a: usize,
    /// Word-embedding size.
    pub d_e: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_v: 2048,
            d_h: 1000,
            d_a: 512,
            d_e: 300,
            vocab_size: 4,
            max_caption_len: 30,
        }
    }
}

impl ModelConfig {
    /// Full-contract validation used on the data/CLI path. Test fixtures
    /// may build smaller raw configs directly.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_v", self.d_v),
            ("d_h", self.d_h),
            ("d_a", self.d_a),
            ("d_e", self.d_e),
            ("vocab_size", self.vocab_size),
            ("max_caption_len", self.max_caption_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocab_size must be at least 4 (PAD, BOS, EOS, UNK)".into(),
            ));
        }
        Ok(())
    }

    fn lstm1_input(&self) -> usize {
        self.d_h + self.d_e + self.d_v
    }

    fn lstm2_input(&self) -> usize {
        self.d_v + self.d_h
    }
}

/// Gate parameters of one LSTM cell, gates ordered i, f, g, o.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    /// `[4*d_h, input_size]`
    pub w: Tensor,
    /// `[4*d_h, d_h]`
    pub u: Tensor,
    /// `[4*d_h]`
    pub b: Tensor,
}

impl LstmCellParams {
    pub fn zeros(input_size: usize, d_h: usize) -> Self {
        LstmCellParams {
            w: Tensor::zeros(vec![4 * d_h, input_size]),
            u: Tensor::zeros(vec![4 * d_h, d_h]),
            b: Tensor::zeros(vec![4 * d_h]),
        }
    }

    fn init(input_size: usize, d_h: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = Tensor::uniform(vec![4 * d_h, input_size], -INIT_SCALE, INIT_SCALE, rng);
        let u = Tensor::uniform(vec![4 * d_h, d_h], -INIT_SCALE, INIT_SCALE, rng);
        let mut b = Tensor::zeros(vec![4 * d_h]);
        // forget-gate bias starts at 1.0
        for i in d_h..2 * d_h {
            b.data_mut()[i] = 1.0;
        }
        LstmCellParams { w, u, b }
    }
}

/// All learnable weights of one captioner.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionerParams {
    /// Embedding, `[d_e, vocab_size]`; column k embeds token k.
    pub w_s: Tensor,
    /// Attention score row, `[1, d_a]`.
    pub w_a: Tensor,
    /// `[d_a, d_v]`
    pub w_f: Tensor,
    /// `[d_a, d_h]`
    pub w_h: Tensor,
    pub lstm1: LstmCellParams,
    pub lstm2: LstmCellParams,
    /// `[vocab_size, d_h]`
    pub w_out: Tensor,
    /// `[vocab_size]`
    pub b_out: Tensor,
}

impl CaptionerParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        CaptionerParams {
            w_s: Tensor::zeros(vec![cfg.d_e, cfg.vocab_size]),
            w_a: Tensor::zeros(vec![1, cfg.d_a]),
            w_f: Tensor::zeros(vec![cfg.d_a, cfg.d_v]),
            w_h: Tensor::zeros(vec![cfg.d_a, cfg.d_h]),
            lstm1: LstmCellParams::zeros(cfg.lstm1_input(), cfg.d_h),
            lstm2: LstmCellParams::zeros(cfg.lstm2_input(), cfg.d_h),
            w_out: Tensor::zeros(vec![cfg.vocab_size, cfg.d_h]),
            b_out: Tensor::zeros(vec![cfg.vocab_size]),
        }
    }

    /// Uniform `[-0.08, 0.08]` init, forget biases 1.0, seeded.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CaptionerParams {
            w_s: Tensor::uniform(vec![cfg.d_e, cfg.vocab_size], -INIT_SCALE, INIT_SCALE, &mut rng),
            w_a: Tensor::uniform(vec![1, cfg.d_a], -INIT_SCALE, INIT_SCALE, &mut rng),
            w_f: Tensor::uniform(vec![cfg.d_a, cfg.d_v], -INIT_SCALE, INIT_SCALE, &mut rng),
            w_h: Tensor::uniform(vec![cfg.d_a, cfg.d_h], -INIT_SCALE, INIT_SCALE, &mut rng),
            lstm1: LstmCellParams::init(cfg.lstm1_input(), cfg.d_h, &mut rng),
            lstm2: LstmCellParams::init(cfg.lstm2_input(), cfg.d_h, &mut rng),
            w_out: Tensor::uniform(vec![cfg.vocab_size, cfg.d_h], -INIT_SCALE, INIT_SCALE, &mut rng),
            b_out: Tensor::uniform(vec![cfg.vocab_size], -INIT_SCALE, INIT_SCALE, &mut rng),
        }
    }

    /// Fixed name/tensor listing used by checkpoints, optimizers, and
    /// gradient plumbing. Order is stable.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_s", &self.w_s),
            ("w_a", &self.w_a),
            ("w_f", &self.w_f),
            ("w_h", &self.w_h),
            ("lstm1.w", &self.lstm1.w),
            ("lstm1.u", &self.lstm1.u),
            ("lstm1.b", &self.lstm1.b),
            ("lstm2.w", &self.lstm2.w),
            ("lstm2.u", &self.lstm2.u),
            ("lstm2.b", &self.lstm2.b),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_s", &mut self.w_s),
            ("w_a", &mut self.w_a),
            ("w_f", &mut self.w_f),
            ("w_h", &mut self.w_h),
            ("lstm1.w", &mut self.lstm1.w),
            ("lstm1.u", &mut self.lstm1.u),
            ("lstm1.b", &mut self.lstm1.b),
            ("lstm2.w", &mut self.lstm2.w),
            ("lstm2.u", &mut self.lstm2.u),
            ("lstm2.b", &mut self.lstm2.b),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ]
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expect: Vec<(&str, Vec<usize>)> = vec![
            ("w_s", vec![cfg.d_e, cfg.vocab_size]),
            ("w_a", vec![1, cfg.d_a]),
            ("w_f", vec![cfg.d_a, cfg.d_v]),
            ("w_h", vec![cfg.d_a, cfg.d_h]),
            ("lstm1.w", vec![4 * cfg.d_h, cfg.lstm1_input()]),
            ("lstm1.u", vec![4 * cfg.d_h, cfg.d_h]),
            ("lstm1.b", vec![4 * cfg.d_h]),
            ("lstm2.w", vec![4 * cfg.d_h, cfg.lstm2_input()]),
            ("lstm2.u", vec![4 * cfg.d_h, cfg.d_h]),
            ("lstm2.b", vec![4 * cfg.d_h]),
            ("w_out", vec![cfg.vocab_size, cfg.d_h]),
            ("b_out", vec![cfg.vocab_size]),
        ];
        for ((name, tensor), (ename, eshape)) in self.named().into_iter().zip(expect) {
            debug_assert_eq!(name, ename);
            if tensor.shape() != eshape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    tensor.shape(),
                    eshape
                )));
            }
        }
        Ok(())
    }
}

/// Which input stream a feature sequence (or trained model) belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Rgb,
    Flow,
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stream::Rgb => write!(f, "rgb"),
            Stream::Flow => write!(f, "flow"),
        }
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Stream::Rgb),
            "flow" => Ok(Stream::Flow),
            other => Err(Error::Config(format!("unknown stream '{other}' (rgb|flow)"))),
        }
    }
}

/// K per-timestep feature vectors for one stream of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub stream: Stream,
    /// `[K, d_v]`, K >= 1.
    pub features: Tensor,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, stream: Stream, features: Tensor) -> Result<Self> {
        if !features.is_matrix() || features.rows() == 0 {
            return Err(Error::Dim(format!(
                "feature sequence needs a [K, d_v] matrix with K >= 1, got {:?}",
                features.shape()
            )));
        }
        features.check_finite("feature sequence")?;
        Ok(FeatureSequence { video_id: video_id.into(), stream, features })
    }

    pub fn k(&self) -> usize {
        self.features.rows()
    }

    pub fn d_v(&self) -> usize {
        self.features.cols()
    }

    /// Rows `[start, end)` as a new sequence (for event proposals).
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<FeatureSequence> {
        if start >= end || end > self.k() {
            return Err(Error::Dim(format!(
                "empty or out-of-range slice [{start}, {end}) of K={}",
                self.k()
            )));
        }
        let d = self.d_v();
        let mut data = Vec::with_capacity((end - start) * d);
        for r in start..end {
            data.extend_from_slice(self.features.row(r));
        }
        FeatureSequence::new(
            self.video_id.clone(),
            self.stream,
            Tensor::new(vec![end - start, d], data)?,
        )
    }
}

/// Mean over the K feature rows, computed outside any tape (v_bar is a
/// constant for the whole caption).
pub fn mean_pool(features: &FeatureSequence) -> Tensor {
    let m = &features.features;
    let (k, d) = (m.rows(), m.cols());
    let mut out = vec![0.0; d];
    for r in 0..k {
        for c in 0..d {
            out[c] += m.at2(r, c);
        }
    }
    for v in &mut out {
        *v /= k as f64;
    }
    Tensor::vector(out)
}

/// Value-level per-step state of one decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h1: Tensor,
    pub c1: Tensor,
    pub h2: Tensor,
    pub c2: Tensor,
    pub v_bar: Tensor,
}

impl DecoderState {
    pub fn initial(cfg: &ModelConfig, v_bar: Tensor) -> Self {
        DecoderState {
            h1: Tensor::zeros(vec![cfg.d_h]),
            c1: Tensor::zeros(vec![cfg.d_h]),
            h2: Tensor::zeros(vec![cfg.d_h]),
            c2: Tensor::zeros(vec![cfg.d_h]),
            v_bar,
        }
    }
}

/// Parameter slots registered on a tape.
pub struct TapedParams {
    pub w_s: ValueId,
    pub w_a: ValueId,
    pub w_f: ValueId,
    pub w_h: ValueId,
    pub lstm1: TapedLstm,
    pub lstm2: TapedLstm,
    pub w_out: ValueId,
    pub b_out: ValueId,
}

pub struct TapedLstm {
    pub w: ValueId,
    pub u: ValueId,
    pub b: ValueId,
}

impl TapedParams {
    pub fn bind(tape: &mut Tape, p: &CaptionerParams) -> Self {
        TapedParams {
            w_s: tape.leaf(p.w_s.clone()),
            w_a: tape.leaf(p.w_a.clone()),
            w_f: tape.leaf(p.w_f.clone()),
            w_h: tape.leaf(p.w_h.clone()),
            lstm1: TapedLstm {
                w: tape.leaf(p.lstm1.w.clone()),
                u: tape.leaf(p.lstm1.u.clone()),
                b: tape.leaf(p.lstm1.b.clone()),
            },
            lstm2: TapedLstm {
                w: tape.leaf(p.lstm2.w.clone()),
                u: tape.leaf(p.lstm2.u.clone()),
                b: tape.leaf(p.lstm2.b.clone()),
            },
            w_out: tape.leaf(p.w_out.clone()),
            b_out: tape.leaf(p.b_out.clone()),
        }
    }

    /// Same order as [`CaptionerParams::named`].
    pub fn ids(&self) -> Vec<(&'static str, ValueId)> {
        vec![
            ("w_s", self.w_s),
            ("w_a", self.w_a),
            ("w_f", self.w_f),
            ("w_h", self.w_h),
            ("lstm1.w", self.lstm1.w),
            ("lstm1.u", self.lstm1.u),
            ("lstm1.b", self.lstm1.b),
            ("lstm2.w", self.lstm2.w),
            ("lstm2.u", self.lstm2.u),
            ("lstm2.b", self.lstm2.b),
            ("w_out", self.w_out),
            ("b_out", self.b_out),
        ]
    }
}

/// Decoder state slots on a tape.
pub struct TapedState {
    pub h1: ValueId,
    pub c1: ValueId,
    pub h2: ValueId,
    pub c2: ValueId,
    pub v_bar: ValueId,
}

impl TapedState {
    pub fn bind(tape: &mut Tape, s: &DecoderState) -> Self {
        TapedState {
            h1: tape.leaf(s.h1.clone()),
            c1: tape.leaf(s.c1.clone()),
            h2: tape.leaf(s.h2.clone()),
            c2: tape.leaf(s.c2.clone()),
            v_bar: tape.leaf(s.v_bar.clone()),
        }
    }

    pub fn initial(tape: &mut Tape, cfg: &ModelConfig, v_bar: Tensor) -> Self {
        TapedState {
            h1: tape.leaf(Tensor::zeros(vec![cfg.d_h])),
            c1: tape.leaf(Tensor::zeros(vec![cfg.d_h])),
            h2: tape.leaf(Tensor::zeros(vec![cfg.d_h])),
            c2: tape.leaf(Tensor::zeros(vec![cfg.d_h])),
            v_bar: tape.leaf(v_bar),
        }
    }
}

/// Standard LSTM update: gates i,f,g,o; `c' = f*c + i*g`, `h' = o*tanh(c')`.
pub fn lstm_cell_step(
    tape: &mut Tape,
    cell: &TapedLstm,
    x: ValueId,
    h: ValueId,
    c: ValueId,
    d_h: usize,
) -> Result<(ValueId, ValueId)> {
    let wx = tape.matvec(cell.w, x)?;
    let uh = tape.matvec(cell.u, h)?;
    let pre0 = tape.add(wx, uh)?;
    let pre = tape.add(pre0, cell.b)?;
    let i_gate = {
        let s = tape.slice(pre, 0, d_h)?;
        tape.sigmoid(s)?
    };
    let f_gate = {
        let s = tape.slice(pre, d_h, d_h)?;
        tape.sigmoid(s)?
    };
    let g_gate = {
        let s = tape.slice(pre, 2 * d_h, d_h)?;
        tape.tanh(s)?
    };
    let o_gate = {
        let s = tape.slice(pre, 3 * d_h, d_h)?;
        tape.sigmoid(s)?
    };
    let fc = tape.mul(f_gate, c)?;
    let ig = tape.mul(i_gate, g_gate)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new)?;
    let h_new = tape.mul(o_gate, tc)?;
    Ok((h_new, c_new))
}

/// First-layer step: input `[h2_prev, embed(token), v_bar]`.
pub fn lstm1_step(
    tape: &mut Tape,
    p: &TapedParams,
    cfg: &ModelConfig,
    state: &TapedState,
    token: u32,
) -> Result<(ValueId, ValueId)> {
    if token as usize >= cfg.vocab_size {
        return Err(Error::Vocab(format!(
            "token id {token} out of range for vocab_size {}",
            cfg.vocab_size
        )));
    }
    let embed = tape.gather_col(p.w_s, token as usize)?;
    let x = tape.concat(&[state.h2, embed, state.v_bar])?;
    lstm_cell_step(tape, &p.lstm1, x, state.h1, state.c1, cfg.d_h)
}

/// Attention over the K feature rows given `h1`; returns `(lambda, v_hat)`.
pub fn attention(
    tape: &mut Tape,
    p: &TapedParams,
    feats: ValueId,
    h1: ValueId,
) -> Result<(ValueId, ValueId)> {
    let k = tape.value(feats).rows();
    let wh = tape.matvec(p.w_h, h1)?;
    let mut scores = Vec::with_capacity(k);
    for i in 0..k {
        let vi = tape.gather_row(feats, i)?;
        let wf = tape.matvec(p.w_f, vi)?;
        let pre = tape.add(wf, wh)?;
        let act = tape.tanh(pre)?;
        let a = tape.matvec(p.w_a, act)?; // [1]
        scores.push(a);
    }
    let a_t = tape.concat(&scores)?;
    let lambda = tape.softmax(a_t)?;
    let v_hat = tape.weighted_row_sum(feats, lambda)?;
    Ok((lambda, v_hat))
}

/// Second-layer step: input `[v_hat, h1]`.
pub fn lstm2_step(
    tape: &mut Tape,
    p: &TapedParams,
    cfg: &ModelConfig,
    state: &TapedState,
    v_hat: ValueId,
    h1: ValueId,
) -> Result<(ValueId, ValueId)> {
    let x = tape.concat(&[v_hat, h1])?;
    lstm_cell_step(tape, &p.lstm2, x, state.h2, state.c2, cfg.d_h)
}

/// `W_out h2 + b_out`.
pub fn word_logits(tape: &mut Tape, p: &TapedParams, h2: ValueId) -> Result<ValueId> {
    let wy = tape.matvec(p.w_out, h2)?;
    tape.add(wy, p.b_out)
}

pub struct StepOutput {
    pub state: TapedState,
    pub log_probs: ValueId,
    pub lambda: ValueId,
}

/// One full decode step: lstm1 -> attention -> lstm2 -> logits -> log-softmax.
pub fn decode_step(
    tape: &mut Tape,
    p: &TapedParams,
    cfg: &ModelConfig,
    state: &TapedState,
    token: u32,
    feats: ValueId,
) -> Result<StepOutput> {
    let (h1, c1) = lstm1_step(tape, p, cfg, state, token)?;
    let (lambda, v_hat) = attention(tape, p, feats, h1)?;
    let (h2, c2) = lstm2_step(tape, p, cfg, state, v_hat, h1)?;
    let logits = word_logits(tape, p, h2)?;
    let log_probs = tape.log_softmax(logits)?;
    Ok(StepOutput {
        state: TapedState { h1, c1, h2, c2, v_bar: state.v_bar },
        log_probs,
        lambda,
    })
}

/// A configured model with parameters: the value-level entry point used
/// by decoding and evaluation.
#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: ModelConfig,
    pub params: CaptionerParams,
}

/// Value-level result of one step.
pub struct StepValues {
    pub state: DecoderState,
    pub log_probs: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Captioner {
    pub fn new(config: ModelConfig, params: CaptionerParams) -> Result<Self> {
        params.check_shapes(&config)?;
        Ok(Captioner { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let params = CaptionerParams::init(&config, seed);
        Captioner { config, params }
    }

    pub fn initial_state(&self, features: &FeatureSequence) -> Result<DecoderState> {
        if features.d_v() != self.config.d_v {
            return Err(Error::Dim(format!(
                "features have d_v {}, model expects {}",
                features.d_v(),
                self.config.d_v
            )));
        }
        Ok(DecoderState::initial(&self.config, mean_pool(features)))
    }

    /// One inference step on a throwaway tape.
    pub fn step(
        &self,
        state: &DecoderState,
        token: u32,
        features: &FeatureSequence,
    ) -> Result<StepValues> {
        let mut tape = Tape::new();
        let p = TapedParams::bind(&mut tape, &self.params);
        let feats = tape.leaf(features.features.clone());
        let s = TapedState::bind(&mut tape, state);
        let out = decode_step(&mut tape, &p, &self.config, &s, token, feats)?;
        Ok(StepValues {
            state: DecoderState {
                h1: tape.value(out.state.h1).clone(),
                c1: tape.value(out.state.c1).clone(),
                h2: tape.value(out.state.h2).clone(),
                c2: tape.value(out.state.c2).clone(),
                v_bar: tape.value(out.state.v_bar).clone(),
            },
            log_probs: tape.value(out.log_probs).data().to_vec(),
            lambda: tape.value(out.lambda).data().to_vec(),
        })
    }
}

/// Replaces unknown-token embeddings: any id >= vocab_size maps to UNK.
/// Used by callers that tolerate out-of-vocabulary ids instead of erroring.
pub fn clamp_token(token: u32, vocab_size: usize) -> u32 {
    if (token as usize) < vocab_size {
        token
    } else {
        UNK
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            d_v: 3,
            d_h: 4,
            d_a: 3,
            d_e: 2,
            vocab_size: 5,
            max_caption_len: 8,
        }
    }

    fn random_features(k: usize, d_v: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence::new(
            "v0",
            Stream::Rgb,
            Tensor::uniform(vec![k, d_v], -1.0, 1.0, &mut rng),
        )
        .unwrap()
    }

    /// Scalar, loop-based LSTM cell, independent of the tape path.
    fn scalar_lstm(
        w: &Tensor,
        u: &Tensor,
        b: &Tensor,
        x: &[f64],
        h: &[f64],
        c: &[f64],
        d_h: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut pre = vec![0.0; 4 * d_h];
        for r in 0..4 * d_h {
            let mut acc = b.data()[r];
            for (j, xv) in x.iter().enumerate() {
                acc += w.at2(r, j) * xv;
            }
            for (j, hv) in h.iter().enumerate() {
                acc += u.at2(r, j) * hv;
            }
            pre[r] = acc;
        }
        let mut h_new = vec![0.0; d_h];
        let mut c_new = vec![0.0; d_h];
        for j in 0..d_h {
            let i_g = sigmoid(pre[j]);
            let f_g = sigmoid(pre[d_h + j]);
            let g_g = pre[2 * d_h + j].tanh();
            let o_g = sigmoid(pre[3 * d_h + j]);
            c_new[j] = f_g * c[j] + i_g * g_g;
            h_new[j] = o_g * c_new[j].tanh();
        }
        (h_new, c_new)
    }

    #[test]
    fn mean_pool_examples() {
        let f = FeatureSequence::new(
            "v",
            Stream::Rgb,
            Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(mean_pool(&f).data(), &[2.0, 4.0]);

        let single = FeatureSequence::new(
            "v",
            Stream::Rgb,
            Tensor::from_rows(&[vec![0.4, -1.2, 7.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(mean_pool(&single).data(), &[0.4, -1.2, 7.0]);
    }

    #[test]
    fn mean_pool_matches_scalar_loop() {
        let f = random_features(5, 4, 9);
        let pooled = mean_pool(&f);
        for c in 0..4 {
            let mut acc = 0.0;
            for r in 0..5 {
                acc += f.features.at2(r, c);
            }
            acc /= 5.0;
            assert!((pooled.data()[c] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_feature_sequence_rejected() {
        assert!(FeatureSequence::new("v", Stream::Rgb, Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn zero_params_are_a_fixed_point() {
        let cfg = toy_config();
        let model = Captioner::new(cfg.clone(), CaptionerParams::zeros(&cfg)).unwrap();
        let f = random_features(3, cfg.d_v, 1);
        let state = model.initial_state(&f).unwrap();
        let out = model.step(&state, 1, &f).unwrap();
        assert!(out.state.h1.data().iter().all(|&v| v == 0.0));
        assert!(out.state.c1.data().iter().all(|&v| v == 0.0));
        assert!(out.state.h2.data().iter().all(|&v| v == 0.0));
        // uniform next-word distribution
        let expect = -(cfg.vocab_size as f64).ln();
        for lp in &out.log_probs {
            assert!((lp - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_is_column_selection() {
        let cfg = toy_config();
        let params = CaptionerParams::init(&cfg, 7);
        let mut tape = Tape::new();
        let p = TapedParams::bind(&mut tape, &params);
        let e = tape.gather_col(p.w_s, 3).unwrap();
        for r in 0..cfg.d_e {
            assert_eq!(tape.value(e).data()[r], params.w_s.at2(r, 3));
        }
    }

    #[test]
    fn token_out_of_range_is_vocab_error() {
        let cfg = toy_config();
        let model = Captioner::init(cfg.clone(), 3);
        let f = random_features(2, cfg.d_v, 2);
        let state = model.initial_state(&f).unwrap();
        assert!(matches!(
            model.step(&state, cfg.vocab_size as u32, &f),
            Err(Error::Vocab(_))
        ));
    }

    #[test]
    fn lstm_steps_match_scalar_oracle() {
        let cfg = toy_config();
        let params = CaptionerParams::init(&cfg, 21);
        let f = random_features(3, cfg.d_v, 22);
        let model = Captioner::new(cfg.clone(), params.clone()).unwrap();
        let mut state = model.initial_state(&f).unwrap();
        // advance one step so states are non-trivial
        state = model.step(&state, 1, &f).unwrap().state;

        let token = 2u32;
        let out = model.step(&state, token, &f).unwrap();

        // lstm1 oracle
        let v_bar = state.v_bar.data();
        let embed: Vec<f64> = (0..cfg.d_e).map(|r| params.w_s.at2(r, token as usize)).collect();
        let mut x1 = state.h2.data().to_vec();
        x1.extend_from_slice(&embed);
        x1.extend_from_slice(v_bar);
        let (h1, _c1) = scalar_lstm(
            &params.lstm1.w,
            &params.lstm1.u,
            &params.lstm1.b,
            &x1,
            state.h1.data(),
            state.c1.data(),
            cfg.d_h,
        );
        for (a, b) in out.state.h1.data().iter().zip(&h1) {
            assert!((a - b).abs() < 1e-12);
        }

        // attention oracle (scalar recomputation of the score formula)
        let mut scores = vec![0.0; f.k()];
        for (i, score) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for a in 0..cfg.d_a {
                let mut pre = 0.0;
                for c in 0..cfg.d_v {
                    pre += params.w_f.at2(a, c) * f.features.at2(i, c);
                }
                for c in 0..cfg.d_h {
                    pre += params.w_h.at2(a, c) * h1[c];
                }
                acc += params.w_a.at2(0, a) * pre.tanh();
            }
            *score = acc;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let lambda: Vec<f64> = exps.iter().map(|e| e / z).collect();
        for (a, b) in out.lambda.iter().zip(&lambda) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut v_hat = vec![0.0; cfg.d_v];
        for i in 0..f.k() {
            for (c, vh) in v_hat.iter_mut().enumerate() {
                *vh += lambda[i] * f.features.at2(i, c);
            }
        }

        // lstm2 oracle
        let mut x2 = v_hat.clone();
        x2.extend_from_slice(&h1);
        let (h2, _c2) = scalar_lstm(
            &params.lstm2.w,
            &params.lstm2.u,
            &params.lstm2.b,
            &x2,
            state.h2.data(),
            state.c2.data(),
            cfg.d_h,
        );
        for (a, b) in out.state.h2.data().iter().zip(&h2) {
            assert!((a - b).abs() < 1e-12);
        }

        // word head + log-softmax oracle
        let mut logits = params.b_out.data().to_vec();
        for (v, logit) in logits.iter_mut().enumerate() {
            for c in 0..cfg.d_h {
                *logit += params.w_out.at2(v, c) * h2[c];
            }
        }
        let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
        for (lp, logit) in out.log_probs.iter().zip(&logits) {
            assert!((lp - (logit - lse)).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_single_frame_and_identical_rows() {
        let cfg = toy_config();
        let model = Captioner::init(cfg.clone(), 4);
        let single = random_features(1, cfg.d_v, 5);
        let state = model.initial_state(&single).unwrap();
        let out = model.step(&state, 1, &single).unwrap();
        assert_eq!(out.lambda, vec![1.0]);

        let row = vec![0.2, -0.7, 1.1];
        let same = FeatureSequence::new(
            "v",
            Stream::Rgb,
            Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap(),
        )
        .unwrap();
        let state = model.initial_state(&same).unwrap();
        let out = model.step(&state, 1, &same).unwrap();
        // convexity: v_hat equals the shared row regardless of lambda; check
        // via a second step whose v_bar path is unchanged
        let s: f64 = out.lambda.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_permutation_equivariance() {
        let cfg = toy_config();
        let model = Captioner::init(cfg.clone(), 8);
        let f = random_features(4, cfg.d_v, 6);
        let state = model.initial_state(&f).unwrap();
        let out = model.step(&state, 2, &f).unwrap();

        let perm = [2usize, 0, 3, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| f.features.row(i).to_vec()).collect();
        let fp = FeatureSequence::new("v", Stream::Rgb, Tensor::from_rows(&rows).unwrap()).unwrap();
        let state_p = model.initial_state(&fp).unwrap();
        // v_bar invariant to permutation
        for (a, b) in state.v_bar.data().iter().zip(state_p.v_bar.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let out_p = model.step(&state_p, 2, &fp).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((out_p.lambda[j] - out.lambda[i]).abs() < 1e-12);
        }
        // h2 depends on v_hat; identical h2 means identical v_hat
        for (a, b) in out.state.h2.data().iter().zip(out_p.state.h2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_step_composition_is_definitional() {
        let cfg = toy_config();
        let params = CaptionerParams::init(&cfg, 13);
        let f = random_features(3, cfg.d_v, 14);

        let mut tape = Tape::new();
        let p = TapedParams::bind(&mut tape, &params);
        let feats = tape.leaf(f.features.clone());
        let s0 = TapedState::initial(&mut tape, &cfg, mean_pool(&f));
        let composed = decode_step(&mut tape, &p, &cfg, &s0, 1, feats).unwrap();

        let mut tape2 = Tape::new();
        let p2 = TapedParams::bind(&mut tape2, &params);
        let feats2 = tape2.leaf(f.features.clone());
        let s02 = TapedState::initial(&mut tape2, &cfg, mean_pool(&f));
        let (h1, _c1) = lstm1_step(&mut tape2, &p2, &cfg, &s02, 1).unwrap();
        let (_lambda, v_hat) = attention(&mut tape2, &p2, feats2, h1).unwrap();
        let (h2, _c2) = lstm2_step(&mut tape2, &p2, &cfg, &s02, v_hat, h1).unwrap();
        let logits = word_logits(&mut tape2, &p2, h2).unwrap();
        let lp = tape2.log_softmax(logits).unwrap();

        assert_eq!(tape.value(composed.log_probs).data(), tape2.value(lp).data());
    }

    #[test]
    fn teacher_forced_unroll_is_normalized() {
        let cfg = toy_config();
        let model = Captioner::init(cfg.clone(), 17);
        let f = random_features(3, cfg.d_v, 18);
        let mut state = model.initial_state(&f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..5 {
            let tok = rng.random_range(0..cfg.vocab_size as u32);
            let out = model.step(&state, tok, &f).unwrap();
            let s: f64 = out.log_probs.iter().map(|lp| lp.exp()).sum();
            assert!((s - 1.0).abs() < 1e-10);
            state = out.state;
        }
    }

    #[test]
    fn forward_determinism_fixed_seed() {
        let cfg = toy_config();
        let run = || {
            let model = Captioner::init(cfg.clone(), 23);
            let f = random_features(3, cfg.d_v, 24);
            let state = model.initial_state(&f).unwrap();
            model.step(&state, 1, &f).unwrap().log_probs
        };
        assert_eq!(run(), run());
    }
}
