//! `lstmt` — train, caption, and evaluate the attention LSTM captioner.
//!
//! Subcommands: `gen-toy`, `train`, `caption`, `eval`. Configuration
//! comes from an optional JSON file (`--config`), dotted `--set
//! key=value` overrides, then dedicated flags, in increasing priority.
//! The fully resolved config is echoed before any work so a run can be
//! reproduced from its output alone.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use lstmt::data::{
    gen_toy_corpus, load_captions, load_checkpoint, load_features, save_captions, save_checkpoint,
    save_features, Checkpoint, CheckpointMeta, Vocabulary,
};
use lstmt::decoding::{caption_events, DecodeConfig, Proposal};
use lstmt::metrics::{evaluate, EvalPair};
use lstmt::model::{Captioner, FeatureSequence, ModelConfig, Stream};
use lstmt::training::{train, TrainConfig, TrainingExample};
use lstmt::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lstmt", version, about = "Two-layer attention LSTM video captioner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic toy corpus with planted structure.
    GenToy(GenToyArgs),
    /// Train one stream's model and write a checkpoint.
    Train(TrainArgs),
    /// Decode captions from one checkpoint or a fused pair.
    Caption(CaptionArgs),
    /// Score candidate captions against references.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file with "model", "train", "decode" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. --set train.epochs=20 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long, default_value = "toy")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    videos: usize,
    /// Total vocabulary size including the four reserved tokens.
    #[arg(long, default_value_t = 30)]
    vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    k_min: usize,
    #[arg(long, default_value_t = 8)]
    k_max: usize,
    #[arg(long, default_value_t = 32)]
    d_v: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Which stream's features to train on.
    #[arg(long)]
    stream: Option<Stream>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop caption tokens seen fewer than this many times.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
}

#[derive(Args)]
struct CaptionArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to decode with; pass twice for late fusion.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    features: PathBuf,
    /// Event proposals (JSON Lines); whole-video single event if absent.
    #[arg(long)]
    proposals: Option<PathBuf>,
    /// Dense-caption JSON Lines output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Candidate captions (JSON Lines {"video_id", "caption"}).
    #[arg(long, requires = "references", conflicts_with = "pairs")]
    candidates: Option<PathBuf>,
    /// Reference captions, multiple lines per video allowed.
    #[arg(long)]
    references: Option<PathBuf>,
    /// Pre-joined pairs ({"id", "candidate", "references": [...]}).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Optional JSON report output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything a run needs, echoed in full before any work.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    decode: DecodeConfig,
}

impl RunConfig {
    fn load(args: &ConfigArgs) -> Result<Self> {
        let mut value = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => serde_json::json!({}),
        };
        for set in &args.sets {
            apply_set(&mut value, set)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    fn echo(&self) {
        println!(
            "config {}",
            serde_json::to_string(self).expect("config serializes")
        );
    }
}

/// Applies one `a.b.c=value` override into the raw config tree. The
/// value is parsed as JSON when possible so numbers and booleans keep
/// their types; anything else is taken as a string.
fn apply_set(root: &mut serde_json::Value, set: &str) -> Result<()> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set needs key=value, got {set:?}")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--set path {path:?} crosses a non-object")))?;
        if i + 1 == keys.len() {
            map.insert(key.to_string(), parsed);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert(serde_json::json!({}));
    }
    unreachable!("split('.') yields at least one key")
}

fn ensure_parent_dir(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn cmd_gen_toy(args: GenToyArgs) -> Result<()> {
    println!(
        "config {{\"seed\":{},\"videos\":{},\"vocab_size\":{},\"k_min\":{},\"k_max\":{},\"d_v\":{}}}",
        args.seed, args.videos, args.vocab_size, args.k_min, args.k_max, args.d_v
    );
    let corpus = gen_toy_corpus(
        args.seed,
        args.videos,
        args.vocab_size,
        (args.k_min, args.k_max),
        args.d_v,
    )?;
    fs::create_dir_all(&args.out)?;
    let features_path = args.out.join("features.jsonl");
    let captions_path = args.out.join("captions.jsonl");
    save_features(&features_path, &corpus.features)?;
    save_captions(&captions_path, &corpus.captions)?;
    println!("wrote {} and {}", features_path.display(), captions_path.display());
    Ok(())
}

/// Groups feature sequences by video id, preserving first-seen order.
fn group_by_video(seqs: Vec<FeatureSequence>) -> Vec<(String, Vec<FeatureSequence>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<FeatureSequence>> = BTreeMap::new();
    for s in seqs {
        if !groups.contains_key(&s.video_id) {
            order.push(s.video_id.clone());
        }
        groups.entry(s.video_id.clone()).or_default().push(s);
    }
    order
        .into_iter()
        .map(|id| {
            let g = groups.remove(&id).expect("grouped above");
            (id, g)
        })
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(stream) = args.stream {
        cfg.train.stream = stream;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }

    let features = load_features(&args.features)?;
    let captions = load_captions(&args.captions)?;
    if features.is_empty() {
        return Err(Error::Data(format!("{}: no feature records", args.features.display())));
    }
    if captions.is_empty() {
        return Err(Error::Data(format!("{}: no caption records", args.captions.display())));
    }

    let texts: Vec<String> = captions.iter().map(|(_, c)| c.clone()).collect();
    let vocab = Vocabulary::build(&texts, args.min_count)?;
    cfg.model.vocab_size = vocab.len();
    cfg.model.d_v = features[0].d_v();
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.echo();

    let groups = group_by_video(features);
    let mut corpus = Vec::with_capacity(captions.len());
    for (video_id, caption) in &captions {
        let (_, feats) = groups
            .iter()
            .find(|(id, _)| id == video_id)
            .ok_or_else(|| Error::Data(format!("caption for {video_id} has no features")))?;
        corpus.push(TrainingExample {
            features: feats.clone(),
            caption: vocab.encode_caption(caption),
        });
    }

    let mut model = Captioner::init(cfg.model.clone(), cfg.train.seed);
    let mut stdout = std::io::stdout();
    let report = train(&mut model, &corpus, &vocab, &cfg.train, Some(&mut stdout))?;

    let meta = CheckpointMeta {
        epoch: cfg.train.epochs,
        loss: report.epoch_losses.last().copied().unwrap_or(0.0),
        seed: cfg.train.seed,
        stream: cfg.train.stream,
    };
    ensure_parent_dir(&args.out)?;
    save_checkpoint(
        &args.out,
        &Checkpoint { config: cfg.model, params: model.params, vocab, meta },
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct ProposalRecord {
    video_id: String,
    proposals: Vec<Proposal>,
}

#[derive(Serialize)]
struct EventOut {
    t_start: f64,
    t_end: f64,
    caption: String,
}

#[derive(Serialize)]
struct VideoOut {
    video_id: String,
    events: Vec<EventOut>,
}

fn load_proposals(path: &Path) -> Result<BTreeMap<String, Vec<Proposal>>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProposalRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.insert(rec.video_id, rec.proposals);
    }
    Ok(out)
}

fn cmd_caption(args: CaptionArgs) -> Result<()> {
    if args.models.len() > 2 {
        return Err(Error::Config(format!(
            "caption fuses at most 2 models, got {}",
            args.models.len()
        )));
    }
    let cfg = RunConfig::load(&args.config)?;
    cfg.decode.validate()?;
    cfg.echo();

    let mut models = Vec::new();
    for path in &args.models {
        let (model, vocab, meta) = load_checkpoint(path)?.into_captioner()?;
        models.push((model, vocab, meta));
    }
    if models.len() == 2 && models[0].1 != models[1].1 {
        return Err(Error::Config(
            "fused checkpoints have different vocabularies".into(),
        ));
    }
    let vocab = models[0].1.clone();

    let features = load_features(&args.features)?;
    let proposals = match &args.proposals {
        Some(p) => Some(load_proposals(p)?),
        None => None,
    };

    ensure_parent_dir(&args.out)?;
    let mut lines = Vec::new();
    for (video_id, seqs) in group_by_video(features) {
        // each model attends over its own stream's features
        let mut group: Vec<(&Captioner, &FeatureSequence)> = Vec::new();
        for (model, _, meta) in &models {
            let feats = seqs
                .iter()
                .find(|s| s.stream == meta.stream)
                .ok_or_else(|| {
                    Error::Data(format!("video {video_id} has no {} features", meta.stream))
                })?;
            group.push((model, feats));
        }
        let k = group[0].1.k() as f64;
        let whole = vec![Proposal {
            t_start: 0.0,
            t_end: k,
            frame_start: 0,
            frame_end: group[0].1.k(),
        }];
        let props: &[Proposal] = match &proposals {
            Some(map) => map
                .get(&video_id)
                .map(Vec::as_slice)
                .unwrap_or(&whole),
            None => &whole,
        };
        let mut events = Vec::new();
        for ev in caption_events(&group, props, &cfg.decode)? {
            let ev = ev?;
            events.push(EventOut {
                t_start: ev.t_start,
                t_end: ev.t_end,
                caption: vocab.decode(&ev.tokens),
            });
        }
        lines.push(serde_json::to_string(&VideoOut { video_id, events })
            .map_err(|e| Error::Data(e.to_string()))?);
    }
    fs::write(&args.out, lines.join("\n") + "\n")?;
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct PairRecord {
    id: String,
    candidate: String,
    references: Vec<String>,
}

fn pairs_from_files(cand_path: &Path, ref_path: &Path) -> Result<Vec<EvalPair>> {
    let candidates = load_captions(cand_path)?;
    let references = load_captions(ref_path)?;
    if candidates.is_empty() {
        return Err(Error::Data(format!("{}: no candidate captions", cand_path.display())));
    }
    let mut by_id: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (id, caption) in &references {
        by_id.entry(id).or_default().push(caption.clone());
    }
    let missing: Vec<&str> = candidates
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "candidates without references: {}",
            missing.join(", ")
        )));
    }
    Ok(candidates
        .into_iter()
        .map(|(id, caption)| EvalPair {
            references: by_id[id.as_str()].clone(),
            id,
            candidate: caption,
        })
        .collect())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let pairs = match (&args.pairs, &args.candidates, &args.references) {
        (Some(path), None, _) => {
            let text = fs::read_to_string(path)?;
            let mut pairs = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: PairRecord = serde_json::from_str(line)
                    .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
                pairs.push(EvalPair {
                    id: rec.id,
                    candidate: rec.candidate,
                    references: rec.references,
                });
            }
            pairs
        }
        (None, Some(cand), Some(refs)) => pairs_from_files(cand, refs)?,
        _ => {
            return Err(Error::Config(
                "eval needs --pairs or both --candidates and --references".into(),
            ))
        }
    };
    if pairs.is_empty() {
        return Err(Error::Data("no caption pairs to score".into()));
    }
    let report = evaluate(&pairs)?;
    print!("{}", report.table());
    if let Some(out) = &args.out {
        ensure_parent_dir(out)?;
        fs::write(
            out,
            serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))? + "\n",
        )?;
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Vocab(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Dim(_) | Error::Contract(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenToy(args) => cmd_gen_toy(args),
        Command::Train(args) => cmd_train(args),
        Command::Caption(args) => cmd_caption(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
