//! JSON Lines readers and writers for features and captions.
//!
//! Feature files hold one object per (video, stream):
//! `{"video_id": str, "stream": "rgb"|"flow", "features": [[f64, ...], ...]}`.
//! Caption files hold `{"video_id": str, "caption": str}`, with multiple
//! lines per video allowed (multi-reference).

use crate::error::{Error, Result};
use crate::model::{FeatureSequence, Stream};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    video_id: String,
    stream: Stream,
    features: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CaptionRecord {
    video_id: String,
    caption: String,
}

fn located<P: AsRef<Path>>(path: P, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.as_ref().display()))
}

/// Loads all feature sequences from a JSON Lines file, enforcing a
/// consistent feature dimension across the whole file.
pub fn load_features<P: AsRef<Path>>(path: P) -> Result<Vec<FeatureSequence>> {
    let file = File::open(&path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut d_v: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line)
            .map_err(|e| located(&path, lineno, format!("malformed record: {e}")))?;
        if rec.features.is_empty() {
            return Err(located(&path, lineno, "feature sequence has K = 0"));
        }
        let cols = rec.features[0].len();
        if rec.features.iter().any(|r| r.len() != cols) {
            return Err(located(&path, lineno, "ragged feature rows"));
        }
        match d_v {
            None => d_v = Some(cols),
            Some(d) if d != cols => {
                return Err(located(
                    &path,
                    lineno,
                    format!("inconsistent d_v: file started with {d}, got {cols}"),
                ));
            }
            _ => {}
        }
        if rec.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(located(&path, lineno, "non-finite feature value"));
        }
        let tensor = Tensor::from_rows(&rec.features)
            .map_err(|e| located(&path, lineno, e))?;
        out.push(
            FeatureSequence::new(rec.video_id, rec.stream, tensor)
                .map_err(|e| located(&path, lineno, e))?,
        );
    }
    Ok(out)
}

pub fn save_features<P: AsRef<Path>>(path: P, seqs: &[FeatureSequence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(&path)?);
    for s in seqs {
        let rec = FeatureRecord {
            video_id: s.video_id.clone(),
            stream: s.stream,
            features: (0..s.k()).map(|r| s.features.row(r).to_vec()).collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads (video_id, caption) lines; multiple lines per video allowed.
pub fn load_captions<P: AsRef<Path>>(path: P) -> Result<Vec<(String, String)>> {
    let file = File::open(&path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(&line)
            .map_err(|e| located(&path, i + 1, format!("malformed record: {e}")))?;
        out.push((rec.video_id, rec.caption));
    }
    Ok(out)
}

pub fn save_captions<P: AsRef<Path>>(path: P, captions: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(&path)?);
    for (video_id, caption) in captions {
        let rec = CaptionRecord { video_id: video_id.clone(), caption: caption.clone() };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_features(&p).unwrap().is_empty());
    }

    #[test]
    fn single_record_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        std::fs::write(
            &p,
            r#"{"video_id":"v1","stream":"rgb","features":[[1.0,2.0,3.0],[4.0,5.0,6.0]]}"#,
        )
        .unwrap();
        let seqs = load_features(&p).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].k(), 2);
        assert_eq!(seqs[0].features.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn malformed_record_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        std::fs::write(&p, "{\"video_id\":\"v\",\"stream\":\"rgb\",\"features\":[[1.0]]}\nnot json\n")
            .unwrap();
        let err = load_features(&p).unwrap_err();
        assert!(err.to_string().contains(":2:"), "got: {err}");
    }

    #[test]
    fn inconsistent_d_v_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        std::fs::write(
            &p,
            concat!(
                "{\"video_id\":\"a\",\"stream\":\"rgb\",\"features\":[[1.0,2.0]]}\n",
                "{\"video_id\":\"b\",\"stream\":\"rgb\",\"features\":[[1.0,2.0,3.0]]}\n"
            ),
        )
        .unwrap();
        let err = load_features(&p).unwrap_err();
        assert!(err.to_string().contains("inconsistent d_v"), "got: {err}");
    }

    #[test]
    fn nan_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        std::fs::write(&p, "{\"video_id\":\"a\",\"stream\":\"rgb\",\"features\":[[1e999]]}\n")
            .unwrap();
        let err = load_features(&p).unwrap_err();
        assert!(err.to_string().contains(":1:"), "got: {err}");
    }

    #[test]
    fn feature_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let seqs: Vec<FeatureSequence> = (0..3)
            .map(|i| {
                FeatureSequence::new(
                    format!("v{i}"),
                    if i % 2 == 0 { Stream::Rgb } else { Stream::Flow },
                    Tensor::uniform(vec![2 + i, 4], -10.0, 10.0, &mut rng),
                )
                .unwrap()
            })
            .collect();
        save_features(&p, &seqs).unwrap();
        let loaded = load_features(&p).unwrap();
        assert_eq!(loaded, seqs);
    }

    #[test]
    fn caption_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let caps = vec![
            ("v1".to_string(), "a cat sits".to_string()),
            ("v1".to_string(), "the cat is sitting".to_string()),
            ("v2".to_string(), "a dog runs".to_string()),
        ];
        save_captions(&p, &caps).unwrap();
        assert_eq!(load_captions(&p).unwrap(), caps);
    }
}
