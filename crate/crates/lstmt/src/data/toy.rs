//! Synthetic toy corpus with planted structure.
//!
//! Each video gets K latent word choices; timestep i's feature row is a
//! one-hot indicator of word i's content index plus bounded noise, so
//! the caption is exactly recoverable by taking the argmax coordinate
//! of each row. The rgb and flow streams are independent noisy variants
//! of the same latent rows.

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{FeatureSequence, Stream};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HOT: f64 = 1.0;
const NOISE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    /// Two entries per video: one rgb, one flow.
    pub features: Vec<FeatureSequence>,
    /// One caption per video.
    pub captions: Vec<(String, String)>,
    pub vocab: Vocabulary,
}

/// Deterministic per seed. `vocab_size` counts the four reserved tokens;
/// content words are named `w00`, `w01`, ... and require `d_v >=
/// vocab_size - 4` so each word owns a feature coordinate.
pub fn gen_toy_corpus(
    seed: u64,
    n_videos: usize,
    vocab_size: usize,
    k_range: (usize, usize),
    d_v: usize,
) -> Result<ToyCorpus> {
    if vocab_size < 5 {
        return Err(Error::Contract("toy corpus needs at least one content word".into()));
    }
    let n_content = vocab_size - 4;
    if d_v < n_content {
        return Err(Error::Contract(format!(
            "d_v {d_v} too small for {n_content} content words"
        )));
    }
    let (k_min, k_max) = k_range;
    if k_min == 0 || k_min > k_max {
        return Err(Error::Contract(format!("bad K range [{k_min}, {k_max}]")));
    }

    let words: Vec<String> = (0..n_content).map(|i| format!("w{i:02}")).collect();
    let vocab = Vocabulary::from_content_tokens(words.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(2 * n_videos);
    let mut captions = Vec::with_capacity(n_videos);
    for v in 0..n_videos {
        let video_id = format!("toy{v:04}");
        let k = rng.random_range(k_min..=k_max);
        let latent: Vec<usize> = (0..k).map(|_| rng.random_range(0..n_content)).collect();

        for stream in [Stream::Rgb, Stream::Flow] {
            let mut data = Vec::with_capacity(k * d_v);
            for &w in &latent {
                for c in 0..d_v {
                    let base = if c == w { HOT } else { 0.0 };
                    data.push(base + rng.random_range(-NOISE..NOISE));
                }
            }
            features.push(FeatureSequence::new(
                video_id.clone(),
                stream,
                Tensor::new(vec![k, d_v], data)?,
            )?);
        }

        let caption = latent.iter().map(|&w| words[w].as_str()).collect::<Vec<_>>().join(" ");
        captions.push((video_id, caption));
    }
    Ok(ToyCorpus { features, captions, vocab })
}

/// Reads the planted mapping back out of a feature sequence: the argmax
/// coordinate of each row names the word. This is the independent
/// oracle for the generator.
pub fn planted_caption(seq: &FeatureSequence, n_content: usize) -> String {
    (0..seq.k())
        .map(|r| {
            let row = seq.features.row(r);
            let best = row[..n_content]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            format!("w{best:02}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let a = gen_toy_corpus(7, 5, 12, (2, 4), 16).unwrap();
        let b = gen_toy_corpus(7, 5, 12, (2, 4), 16).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.captions, b.captions);
    }

    #[test]
    fn zero_videos_is_empty() {
        let c = gen_toy_corpus(1, 0, 12, (2, 4), 16).unwrap();
        assert!(c.features.is_empty());
        assert!(c.captions.is_empty());
    }

    #[test]
    fn planted_mapping_is_recoverable_from_both_streams() {
        let c = gen_toy_corpus(42, 10, 30, (4, 8), 32).unwrap();
        let n_content = 26;
        for seq in &c.features {
            let expected = c
                .captions
                .iter()
                .find(|(id, _)| *id == seq.video_id)
                .map(|(_, cap)| cap.clone())
                .unwrap();
            assert_eq!(planted_caption(seq, n_content), expected, "stream {}", seq.stream);
        }
    }

    #[test]
    fn d_v_too_small_rejected() {
        assert!(gen_toy_corpus(1, 2, 30, (2, 3), 8).is_err());
    }
}
