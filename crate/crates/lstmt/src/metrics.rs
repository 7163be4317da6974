//! Corpus-level caption metrics: BLEU@1-4, ROUGE-L, CIDEr-D, and
//! METEOR-lite.
//!
//! METEOR-lite is a reduced METEOR: unigram alignment by exact match
//! then by a small suffix-stripping stemmer, no synonym or paraphrase
//! tables. Reports label the column "METEOR-lite" accordingly.
//!
//! Tokenization is fixed: lowercase, punctuation characters removed,
//! whitespace split. All metrics live in `[0, 1]` internally and are
//! reported scaled by 100.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;

/// One evaluation unit: a candidate sentence and its reference set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

/// Corpus-level metric values, scaled to `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// BLEU@1 through BLEU@4.
    pub bleu: [f64; 4],
    pub meteor_lite: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

impl MetricReport {
    /// Human-readable table mirroring the usual B@1-4 / M / R / C layout.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str("  B@1     B@2     B@3     B@4     METEOR-lite  ROUGE-L  CIDEr-D\n");
        s.push_str(&format!(
            "  {:<7.2} {:<7.2} {:<7.2} {:<7.2} {:<12.2} {:<8.2} {:<7.2}\n",
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.meteor_lite,
            self.rouge_l,
            self.cider_d
        ));
        s
    }
}

/// Lowercase, strip punctuation characters, split on whitespace.
/// Applied identically to candidates and references.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace()
        .filter_map(|w| {
            let t: String = w
                .chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(|c| c.to_lowercase())
                .collect();
            if t.is_empty() {
                None
            } else {
                Some(t)
            }
        })
        .collect()
}

fn check_corpus(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Contract("metric called on an empty corpus".into()));
    }
    for p in pairs {
        if p.references.is_empty() {
            return Err(Error::Contract(format!("pair '{}' has no references", p.id)));
        }
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU@N with clipped precision, geometric mean over
/// orders 1..N, and brevity penalty from closest reference lengths
/// (ties broken toward the shorter reference).
pub fn bleu(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Contract(format!("BLEU order {n} outside 1..4")));
    }
    check_corpus(pairs)?;

    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for pair in pairs {
        let cand = tokenize(&pair.candidate);
        let refs: Vec<Vec<String>> = pair.references.iter().map(|r| tokenize(r)).collect();

        cand_len += cand.len();
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let diff = (l as i64 - cand.len() as i64).abs();
                (diff, l)
            })
            .unwrap_or(0);
        ref_len += closest;

        for order in 1..=n {
            let cc = ngram_counts(&cand, order);
            let ref_counts: Vec<HashMap<Vec<String>, usize>> =
                refs.iter().map(|r| ngram_counts(r, order)).collect();
            for (g, &c) in &cc {
                let best = ref_counts.iter().filter_map(|rc| rc.get(g)).copied().max().unwrap_or(0);
                matched[order - 1] += c.min(best);
            }
            total[order - 1] += cc.values().sum::<usize>();
        }
    }

    let mut log_sum = 0.0;
    for order in 0..n {
        if matched[order] == 0 || total[order] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[order] as f64 / total[order] as f64).ln();
    }
    let precision = (log_sum / n as f64).exp();
    if cand_len == 0 {
        return Ok(0.0);
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(precision * bp)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: LCS F-measure with beta = 1.2, max over references per
/// pair, mean over the corpus.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    check_corpus(pairs)?;
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    let mut acc = 0.0;
    for pair in pairs {
        let cand = tokenize(&pair.candidate);
        let mut best: f64 = 0.0;
        for r in &pair.references {
            let rt = tokenize(r);
            let l = lcs_len(&cand, &rt) as f64;
            if l == 0.0 || cand.is_empty() || rt.is_empty() {
                continue;
            }
            let p = l / cand.len() as f64;
            let rr = l / rt.len() as f64;
            let f = (1.0 + beta2) * p * rr / (rr + beta2 * p);
            best = best.max(f);
        }
        acc += best;
    }
    Ok(acc / pairs.len() as f64)
}

/// IDF statistics for CIDEr-D, computed once over a reference corpus.
pub struct CiderIdf {
    /// per order: gram -> idf value
    idf: Vec<HashMap<Vec<String>, f64>>,
    n_docs: usize,
    uniform: bool,
}

impl CiderIdf {
    /// `docs`: one entry per video id, each the tokenized reference set.
    pub fn from_reference_docs(docs: &[Vec<Vec<String>>]) -> Self {
        let n_docs = docs.len();
        let uniform = n_docs < 2;
        let mut idf = vec![HashMap::new(); CIDER_MAX_N];
        if uniform {
            // degenerate corpus: IDF falls back to uniform weights
            return CiderIdf { idf, n_docs, uniform };
        }
        for (order, map) in idf.iter_mut().enumerate() {
            let n = order + 1;
            let mut df: HashMap<Vec<String>, usize> = HashMap::new();
            for doc in docs {
                let mut seen: HashMap<Vec<String>, ()> = HashMap::new();
                for r in doc {
                    for (g, _) in ngram_counts(r, n) {
                        seen.entry(g).or_insert(());
                    }
                }
                for (g, ()) in seen {
                    *df.entry(g).or_insert(0) += 1;
                }
            }
            for (g, d) in df {
                map.insert(g, (n_docs as f64 / d as f64).ln());
            }
        }
        CiderIdf { idf, n_docs, uniform }
    }

    fn weight(&self, order: usize, gram: &Vec<String>) -> f64 {
        if self.uniform {
            1.0
        } else {
            self.idf[order].get(gram).copied().unwrap_or((self.n_docs as f64).ln())
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    /// CIDEr-D of one candidate against one reference set, in `[0, 1]`.
    pub fn score(&self, cand: &[String], refs: &[Vec<String>]) -> f64 {
        if refs.is_empty() {
            return 0.0;
        }
        let mut acc = 0.0;
        for r in refs {
            let mut per_n = 0.0;
            for order in 0..CIDER_MAX_N {
                let n = order + 1;
                let cc = ngram_counts(cand, n);
                let rc = ngram_counts(r, n);
                let mut num = 0.0;
                let mut norm_c = 0.0;
                let mut norm_r = 0.0;
                for (g, &c) in &cc {
                    let w = self.weight(order, g);
                    let tf_c = c as f64 * w;
                    norm_c += tf_c * tf_c;
                    if let Some(&cr) = rc.get(g) {
                        let tf_r = cr as f64 * w;
                        // count clipping: candidate counts clipped to reference counts
                        num += tf_c.min(tf_r) * tf_r;
                    }
                }
                for (g, &c) in &rc {
                    let w = self.weight(order, g);
                    let tf_r = c as f64 * w;
                    norm_r += tf_r * tf_r;
                }
                if norm_c > 0.0 && norm_r > 0.0 {
                    per_n += num / (norm_c.sqrt() * norm_r.sqrt());
                }
            }
            let delta = cand.len() as f64 - r.len() as f64;
            let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            acc += penalty * per_n / CIDER_MAX_N as f64;
        }
        acc / refs.len() as f64
    }
}

/// Corpus CIDEr-D: TF-IDF weighted n-gram cosine (n = 1..4) with count
/// clipping and a Gaussian length penalty (sigma = 6). IDF comes from
/// the reference corpus; a single-document corpus degenerates to
/// uniform weights (with a warning on stderr).
pub fn cider_d(pairs: &[EvalPair]) -> Result<f64> {
    check_corpus(pairs)?;
    let docs: Vec<Vec<Vec<String>>> = pairs
        .iter()
        .map(|p| p.references.iter().map(|r| tokenize(r)).collect())
        .collect();
    let idf = CiderIdf::from_reference_docs(&docs);
    if idf.is_uniform() {
        eprintln!("warning: CIDEr-D IDF degenerates to uniform weights (corpus has < 2 documents)");
    }
    let mut acc = 0.0;
    for (pair, doc) in pairs.iter().zip(&docs) {
        let cand = tokenize(&pair.candidate);
        acc += idf.score(&cand, doc);
    }
    Ok(acc / pairs.len() as f64)
}

/// Suffix-stripping stemmer used by the METEOR-lite stem stage.
pub fn stem(word: &str) -> String {
    for suffix in ["ing", "ed", "ly", "es", "s"] {
        if word.len() > suffix.len() + 2 && word.ends_with(suffix) {
            return word[..word.len() - suffix.len()].to_string();
        }
    }
    word.to_string()
}

/// METEOR-lite of one candidate against one reference, in `[0, 1]`.
pub fn meteor_lite_sentence(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut cand_matched = vec![false; cand.len()];
    let mut ref_matched = vec![false; reference.len()];
    let mut matches: Vec<(usize, usize)> = Vec::new();

    // stage 1: exact; stage 2: stem
    for exact in [true, false] {
        for (ci, cw) in cand.iter().enumerate() {
            if cand_matched[ci] {
                continue;
            }
            let ck = if exact { cw.clone() } else { stem(cw) };
            for (ri, rw) in reference.iter().enumerate() {
                if ref_matched[ri] {
                    continue;
                }
                let rk = if exact { rw.clone() } else { stem(rw) };
                if ck == rk {
                    cand_matched[ci] = true;
                    ref_matched[ri] = true;
                    matches.push((ci, ri));
                    break;
                }
            }
        }
    }
    let m = matches.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);

    matches.sort();
    let mut chunks = 1usize;
    for w in matches.windows(2) {
        let (c0, r0) = w[0];
        let (c1, r1) = w[1];
        if !(c1 == c0 + 1 && r1 == r0 + 1) {
            chunks += 1;
        }
    }
    let frag = chunks as f64 / m as f64;
    let penalty = METEOR_GAMMA * frag.powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

/// Corpus METEOR-lite: max over references per pair, mean over corpus.
pub fn meteor_lite(pairs: &[EvalPair]) -> Result<f64> {
    check_corpus(pairs)?;
    let mut acc = 0.0;
    for pair in pairs {
        let cand = tokenize(&pair.candidate);
        let best = pair
            .references
            .iter()
            .map(|r| meteor_lite_sentence(&cand, &tokenize(r)))
            .fold(0.0, f64::max);
        acc += best;
    }
    Ok(acc / pairs.len() as f64)
}

/// All Table-style metrics at once, scaled by 100.
pub fn evaluate(pairs: &[EvalPair]) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu: [
            bleu(pairs, 1)? * 100.0,
            bleu(pairs, 2)? * 100.0,
            bleu(pairs, 3)? * 100.0,
            bleu(pairs, 4)? * 100.0,
        ],
        meteor_lite: meteor_lite(pairs)? * 100.0,
        rouge_l: rouge_l(pairs)? * 100.0,
        cider_d: cider_d(pairs)? * 100.0,
    })
}
