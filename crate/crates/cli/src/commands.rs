use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use satseg::baseline::{load_abbreviations, rule_segment, DEFAULT_TERMINATORS};
use satseg::checkpoint::Checkpoint;
use satseg::corpus::{load_corpus, make_sentence_pairs, CorpusFormat, Document, PackedChunk};
use satseg::eval::{
    asr_corrupt_eval, evaluate as score, evaluate_per_language, snap_boundaries,
    try_project_boundaries, AlignmentParams, EvalItem, EvalOptions, EvalWarning,
    DEFAULT_SCORE_FLOOR,
};
use satseg::infer::{
    char_probs, decode, segment as run_segment, DecodeConfig, ALPHA_LORA_DEFAULT, ALPHA_PRETRAINED,
    ALPHA_SM,
};
use satseg::model::{merge_lora, per_layer_lookahead, LoraSpec, ModelConfig, ModelParams};
use satseg::rng;
use satseg::tokenize::{punctuation_set, train_bpe, PunctuationSet, Tokenizer};
use satseg::train::{
    adapt_lora as run_adapt, default_threshold_grid, train_stage, tune_threshold_from_probs, Stage,
    StepRecord, TrainConfig, Warmup,
};
use satseg::Error;

use crate::args::{
    BaselineArgs, EvaluateArgs, Format, Global, LoraArgs, SegmentArgs, TokenizerArgs,
    TokenizerKind, TrainArgs, TuneArgs,
};
use crate::{CliError, CliResult};

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn read_input(path: Option<&Path>) -> CliResult<String> {
    match path {
        Some(p) if p != Path::new("-") => read_file(p),
        _ => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| io_error(Path::new("<stdin>"), e))?;
            Ok(s)
        }
    }
}

fn write_output(path: Option<&Path>, content: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, content).map_err(|e| io_error(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(content.as_bytes())
                .map_err(|e| io_error(Path::new("<stdout>"), e))
        }
    }
}

fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Usage(format!("missing required option {flag}")))
}

fn load_docs(paths: &[PathBuf], format: Option<Format>, flag: &str) -> CliResult<Vec<Document>> {
    if paths.is_empty() {
        return Err(CliError::Usage(format!("missing required option {flag}")));
    }
    let format: CorpusFormat = format.unwrap_or(Format::Jsonl).into();
    let mut docs = Vec::new();
    for p in paths {
        docs.extend(load_corpus(p, format)?);
    }
    if docs.is_empty() {
        return Err(CliError::Core(Error::Input(
            "corpus has no documents".into(),
        )));
    }
    Ok(docs)
}

/// Texts to segment: non-empty lines, or the `text` field of each JSON line.
fn read_texts(input: Option<&Path>, format: Option<Format>) -> CliResult<Vec<String>> {
    let raw = read_input(input)?;
    let origin = input.unwrap_or(Path::new("<stdin>"));
    let mut texts = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match format.unwrap_or(Format::Lines) {
            Format::Lines => texts.push(line.to_string()),
            Format::Jsonl => {
                let parse_err = |message: String| Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message,
                };
                let v: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
                let text = v.get("text").and_then(Value::as_str).ok_or_else(|| {
                    parse_err("expected an object with a string `text` field".into())
                })?;
                texts.push(text.to_string());
            }
        }
    }
    Ok(texts)
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    tokenizer: Value,
    punctuation: PunctuationSet,
}

fn load_tokenizer(path: &Path) -> CliResult<(Tokenizer, PunctuationSet)> {
    let file: TokenizerFile = serde_json::from_str(&read_file(path)?)?;
    Ok((
        Tokenizer::from_json(&file.tokenizer.to_string())?,
        file.punctuation,
    ))
}

struct Loaded {
    ckpt: Checkpoint,
    tok: Tokenizer,
    punct: PunctuationSet,
}

fn load_model(path: &Path) -> CliResult<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let tok = ckpt
        .tokenizer
        .clone()
        .ok_or_else(|| Error::Checkpoint("no tokenizer stored in checkpoint".into()))?;
    let punct = ckpt
        .punctuation
        .clone()
        .ok_or_else(|| Error::Checkpoint("no punctuation set stored in checkpoint".into()))?;
    Ok(Loaded { ckpt, tok, punct })
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Sm => "sm",
        Stage::Lora => "lora",
    }
}

fn checkpoint(
    params: ModelParams,
    tok: &Tokenizer,
    punct: &PunctuationSet,
    stage: Stage,
    threshold: Option<f64>,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(params);
    ckpt.tokenizer = Some(tok.clone());
    ckpt.punctuation = Some(punct.clone());
    ckpt.threshold = threshold;
    ckpt.metadata
        .insert("stage".into(), json!(stage_name(stage)));
    ckpt
}

/// Applies `--layers` and `--lookahead` to a loaded model.
fn inference_params(g: &Global, params: &ModelParams) -> CliResult<ModelParams> {
    let mut p = match g.layers {
        Some(k) => params.truncate_layers(k)?,
        None => params.clone(),
    };
    if let Some(n) = g.lookahead {
        p.config.lookahead_total = Some(n);
        p.config.lookahead_per_layer = Some(per_layer_lookahead(n, p.config.n_layers));
    }
    Ok(p)
}

/// Threshold from the flag or config, else the checkpoint, else the
/// preset of the stage that produced it.
fn resolve_alpha(g: &Global, ckpt: &Checkpoint) -> f64 {
    g.alpha.or(ckpt.threshold).unwrap_or_else(|| {
        match ckpt.metadata.get("stage").and_then(Value::as_str) {
            Some("pretrain") => ALPHA_PRETRAINED,
            Some("sm") => ALPHA_SM,
            _ => ALPHA_LORA_DEFAULT,
        }
    })
}

fn decode_config(
    g: &Global,
    params: &ModelParams,
    context: Option<usize>,
    alpha: f64,
) -> CliResult<DecodeConfig> {
    let context = context
        .unwrap_or(params.config.max_context)
        .min(params.config.max_context);
    let default_stride = if context > 64 {
        64
    } else {
        (context / 2).max(1)
    };
    let dec = DecodeConfig {
        alpha,
        stride: g.stride.unwrap_or(default_stride),
        context,
    };
    dec.validate()?;
    Ok(dec)
}

pub fn tokenizer_train(_g: &Global, a: TokenizerArgs) -> CliResult<()> {
    let out = require(a.out.as_deref(), "--out")?;
    let docs = load_docs(&a.corpus, a.format, "--corpus")?;
    let texts: Vec<&str> = docs
        .iter()
        .flat_map(|d| d.units.iter().map(|u| u.text.as_str()))
        .collect();
    let tok = match a.kind.unwrap_or(TokenizerKind::Bpe) {
        TokenizerKind::Bpe => train_bpe(&texts, a.vocab_size.unwrap_or(4000))?,
        TokenizerKind::Char => Tokenizer::char_level(&texts),
    };
    let mut by_language: BTreeMap<&str, String> = BTreeMap::new();
    for d in &docs {
        let s = by_language.entry(d.language.as_str()).or_default();
        for u in &d.units {
            s.push_str(&u.text);
            s.push(' ');
        }
    }
    let corpora: Vec<&String> = by_language.values().collect();
    let punct = punctuation_set(&tok, &corpora, a.punct_top_k.unwrap_or(30))?;
    let file = TokenizerFile {
        tokenizer: serde_json::from_str(&tok.to_json()?)?,
        punctuation: punct,
    };
    write_output(Some(out), &serde_json::to_string(&file)?)?;
    eprintln!(
        "vocabulary {} tokens, {} punctuation chars",
        tok.vocab_size(),
        file.punctuation.chars.len()
    );
    Ok(())
}

pub fn train(stage: Stage, g: &Global, a: TrainArgs) -> CliResult<()> {
    let out = require(a.out.clone(), "--out")?;
    let docs = load_docs(&a.corpus, a.format, "--corpus")?;
    let seed = g.seed.unwrap_or(0);
    let (params, tok, punct) = match &g.checkpoint {
        Some(path) => {
            let m = load_model(path)?;
            (m.ckpt.params, m.tok, m.punct)
        }
        None => {
            let path = require(a.tokenizer.as_deref(), "--tokenizer (or --checkpoint)")?;
            let (tok, punct) = load_tokenizer(path)?;
            let lookahead = if a.full_attention {
                None
            } else {
                Some(g.lookahead.unwrap_or(48))
            };
            let config = ModelConfig::new(
                tok.vocab_size(),
                a.dim.unwrap_or(64),
                a.n_layers.unwrap_or(2),
                a.heads.unwrap_or(4),
                a.ffn_dim.unwrap_or(256),
                a.max_context.unwrap_or(256),
                lookahead,
                punct.aux_vocab(),
            )?;
            let params = ModelParams::init(config, rng::derive_tagged(seed, "init", 0))?;
            (params, tok, punct)
        }
    };

    let mut cfg = TrainConfig::for_stage(stage);
    cfg.seed = seed;
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr_peak = a.lr.unwrap_or(cfg.lr_peak);
    if let Some(w) = a.warmup {
        cfg.warmup = Warmup::Steps(w);
    }
    cfg.context_tokens = a.context.unwrap_or(cfg.context_tokens);
    cfg.aux_loss_weight = a.aux_weight.unwrap_or(cfg.aux_loss_weight);
    cfg.weight_decay = a.weight_decay.unwrap_or(cfg.weight_decay);
    cfg.corruption.p_remove_punct = a.p_remove.unwrap_or(cfg.corruption.p_remove_punct);
    if let Some(s) = &a.schemes {
        cfg.schemes = s.iter().map(|&s| s.into()).collect();
    }
    cfg.validate()?;

    let mut log = match &a.log {
        Some(p) => Some((
            BufWriter::new(File::create(p).map_err(|e| io_error(p, e))?),
            p.clone(),
        )),
        None => None,
    };
    let every = a.checkpoint_every.filter(|&k| k > 0);
    let mut observer = |rec: &StepRecord, p: &ModelParams| -> satseg::Result<()> {
        if let Some((w, path)) = log.as_mut() {
            let line = serde_json::to_string(rec)?;
            writeln!(w, "{line}").map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
        }
        if let Some(k) = every {
            if (rec.step + 1).is_multiple_of(k) {
                let mut path = out.clone().into_os_string();
                path.push(format!(".step{}", rec.step + 1));
                checkpoint(p.clone(), &tok, &punct, stage, None).save(PathBuf::from(path))?;
            }
        }
        Ok(())
    };
    let outcome = train_stage(&params, &docs, &tok, &punct, &cfg, Some(&mut observer))?;
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| io_error(&path, e))?;
    }
    checkpoint(outcome.params, &tok, &punct, stage, None).save(&out)?;
    let losses = outcome.records.iter().map(|r| r.loss).collect::<Vec<_>>();
    let summary = json!({
        "stage": stage_name(stage),
        "steps": losses.len(),
        "first_loss": losses.first(),
        "final_loss": losses.last(),
    });
    write_output(None, &format!("{summary}\n"))
}

pub fn adapt_lora(g: &Global, a: LoraArgs) -> CliResult<()> {
    let out = require(a.out.as_deref(), "--out")?;
    let model = load_model(require(g.checkpoint.as_deref(), "--checkpoint")?)?;
    let docs = load_docs(&a.sentences, a.format, "--sentences")?;
    let spec = LoraSpec::new(a.rank.unwrap_or(16), a.scale.unwrap_or(32.0));
    let mut cfg = TrainConfig::lora();
    cfg.seed = g.seed.unwrap_or(0);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr_peak = a.lr.unwrap_or(cfg.lr_peak);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.context_tokens = a.context.unwrap_or(cfg.context_tokens);

    let mut log = match &a.log {
        Some(p) => Some((
            BufWriter::new(File::create(p).map_err(|e| io_error(p, e))?),
            p.clone(),
        )),
        None => None,
    };
    let mut observer = |rec: &StepRecord, _: &ModelParams| -> satseg::Result<()> {
        if let Some((w, path)) = log.as_mut() {
            let line = serde_json::to_string(rec)?;
            writeln!(w, "{line}").map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
        }
        Ok(())
    };
    let outcome = run_adapt(
        &model.ckpt.params,
        &docs,
        &model.tok,
        &model.punct,
        &spec,
        &cfg,
        Some(&mut observer),
    )?;
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| io_error(&path, e))?;
    }
    let params = if a.merge {
        merge_lora(&outcome.params)
    } else {
        outcome.params
    };
    checkpoint(
        params,
        &model.tok,
        &model.punct,
        Stage::Lora,
        outcome.threshold,
    )
    .save(out)?;
    let summary = json!({
        "stage": "lora",
        "steps": outcome.records.len(),
        "final_loss": outcome.records.last().map(|r| r.loss),
        "threshold": outcome.threshold,
    });
    write_output(None, &format!("{summary}\n"))
}

fn doc_chunks(docs: &[Document]) -> Vec<PackedChunk> {
    docs.iter()
        .map(|d| {
            let units: Vec<&str> = d.units.iter().map(|u| u.text.as_str()).collect();
            PackedChunk::from_units(&d.language, &units)
        })
        .collect()
}

pub fn tune_threshold(g: &Global, a: TuneArgs) -> CliResult<()> {
    let model = load_model(require(g.checkpoint.as_deref(), "--checkpoint")?)?;
    let docs = load_docs(&a.corpus, a.format, "--corpus")?;
    let params = inference_params(g, &model.ckpt.params)?;
    let dec = decode_config(g, &params, a.context, ALPHA_LORA_DEFAULT)?;
    let chunks = doc_chunks(&docs);
    let data = chunks
        .par_iter()
        .map(|c| {
            Ok((
                char_probs(&params, &model.tok, &c.text, &dec)?,
                c.boundaries.iter().copied().collect(),
            ))
        })
        .collect::<satseg::Result<Vec<(Vec<f64>, BTreeSet<usize>)>>>()?;
    let grid = a.grid.clone().unwrap_or_else(default_threshold_grid);
    let alpha = tune_threshold_from_probs(&data, &grid)?;
    if let Some(out) = &a.out {
        let mut ckpt = model.ckpt.clone();
        ckpt.threshold = Some(alpha);
        ckpt.save(out)?;
    }
    write_output(None, &format!("{}\n", json!({ "threshold": alpha })))
}

#[derive(Serialize)]
struct SegmentRecord<'a> {
    text: &'a str,
    boundaries: Vec<usize>,
    sentences: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
}

fn jsonl<T: Serialize>(records: &[T]) -> CliResult<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn segment(g: &Global, a: SegmentArgs) -> CliResult<()> {
    let model = load_model(require(g.checkpoint.as_deref(), "--checkpoint")?)?;
    let params = inference_params(g, &model.ckpt.params)?;
    let dec = decode_config(g, &params, a.context, resolve_alpha(g, &model.ckpt))?;
    let texts = read_texts(a.input.as_deref(), a.format)?;
    let results = texts
        .par_iter()
        .map(|t| run_segment(&params, &model.tok, t, &dec))
        .collect::<satseg::Result<Vec<_>>>()?;
    let records: Vec<SegmentRecord> = texts
        .iter()
        .zip(results)
        .map(|(text, r)| SegmentRecord {
            text,
            boundaries: r.boundaries,
            sentences: r.sentences,
            probs: a.probs.then_some(r.char_probs),
        })
        .collect();
    write_output(a.out.as_deref(), &jsonl(&records)?)
}

fn terminators(spec: Option<&str>) -> BTreeSet<char> {
    match spec {
        Some(s) => s.chars().collect(),
        None => DEFAULT_TERMINATORS.into_iter().collect(),
    }
}

fn abbreviations(path: Option<&Path>) -> CliResult<HashSet<String>> {
    Ok(match path {
        Some(p) => load_abbreviations(p)?,
        None => HashSet::new(),
    })
}

pub fn baseline(_g: &Global, a: BaselineArgs) -> CliResult<()> {
    let terms = terminators(a.terminators.as_deref());
    let abbrevs = abbreviations(a.abbreviations.as_deref())?;
    let texts = read_texts(a.input.as_deref(), a.format)?;
    let records = texts
        .iter()
        .map(|text| {
            let r = rule_segment(text, &terms, &abbrevs)?;
            Ok(SegmentRecord {
                text,
                boundaries: r.boundaries,
                sentences: r.sentences,
                probs: None,
            })
        })
        .collect::<satseg::Result<Vec<_>>>()?;
    write_output(a.out.as_deref(), &jsonl(&records)?)
}

/// One external prediction: explicit boundaries on `text`, or sentences
/// that are joined with single spaces.
#[derive(Deserialize)]
#[serde(untagged)]
enum Prediction {
    Marked {
        text: String,
        boundaries: Vec<usize>,
    },
    Split {
        sentences: Vec<String>,
    },
}

impl Prediction {
    fn into_marked(self) -> (String, BTreeSet<usize>) {
        match self {
            Prediction::Marked { text, boundaries } => (text, boundaries.into_iter().collect()),
            Prediction::Split { sentences } => {
                let c = PackedChunk::from_units("", &sentences);
                (c.text, c.boundaries.into_iter().collect())
            }
        }
    }
}

fn read_predictions(path: &Path) -> CliResult<Vec<(String, BTreeSet<usize>)>> {
    let raw = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p.into_marked());
    }
    Ok(out)
}

pub fn evaluate(g: &Global, a: EvaluateArgs) -> CliResult<()> {
    let model = g.checkpoint.as_deref().map(load_model).transpose()?;
    let docs = load_docs(&a.corpus, a.format, "--corpus")?;
    let docs = if a.asr {
        let punct = model.as_ref().map(|m| m.punct.clone()).unwrap_or_default();
        let (docs, warnings) = asr_corrupt_eval(&docs, &punct);
        for EvalWarning::DroppedUnit { document, unit } in warnings {
            eprintln!(
                "warning: document {document} unit {unit} is empty after stripping and was dropped"
            );
        }
        docs
    } else {
        docs
    };
    let chunks = if a.pairs {
        make_sentence_pairs(&docs, g.seed.unwrap_or(0)).chunks
    } else {
        doc_chunks(&docs)
    };
    if chunks.is_empty() {
        return Err(CliError::Core(Error::Input("nothing to evaluate".into())));
    }

    // Predicted boundaries per chunk, plus whether projection fell back.
    let preds: Vec<(BTreeSet<usize>, bool)> = if let Some(path) = &a.predictions {
        let predictions = read_predictions(path)?;
        if predictions.len() != chunks.len() {
            return Err(CliError::Core(Error::Input(format!(
                "{} predictions for {} gold sequences",
                predictions.len(),
                chunks.len()
            ))));
        }
        let params = AlignmentParams::default();
        chunks
            .par_iter()
            .zip(predictions)
            .map(|(c, (text, b))| {
                match try_project_boundaries(&text, &b, &c.text, &params, DEFAULT_SCORE_FLOOR) {
                    Some(set) => (set, false),
                    None => (BTreeSet::new(), true),
                }
            })
            .collect()
    } else if a.baseline {
        let terms = terminators(a.terminators.as_deref());
        let abbrevs = abbreviations(a.abbreviations.as_deref())?;
        chunks
            .iter()
            .map(|c| {
                Ok((
                    rule_segment(&c.text, &terms, &abbrevs)?
                        .boundaries
                        .into_iter()
                        .collect(),
                    false,
                ))
            })
            .collect::<satseg::Result<_>>()?
    } else {
        let m = model.as_ref().ok_or_else(|| {
            CliError::Usage("evaluate needs --checkpoint, --baseline or --predictions".into())
        })?;
        let params = inference_params(g, &m.ckpt.params)?;
        let dec = decode_config(g, &params, a.context, resolve_alpha(g, &m.ckpt))?;
        chunks
            .par_iter()
            .map(|c| {
                let probs = char_probs(&params, &m.tok, &c.text, &dec)?;
                Ok((
                    decode(&c.text, &probs, dec.alpha)
                        .boundaries
                        .into_iter()
                        .collect(),
                    false,
                ))
            })
            .collect::<satseg::Result<_>>()?
    };

    let mut fallbacks: BTreeMap<&str, usize> = BTreeMap::new();
    let items: Vec<EvalItem> = chunks
        .iter()
        .zip(preds)
        .map(|(c, (pred, fell_back))| {
            *fallbacks.entry(c.language.as_str()).or_default() += usize::from(fell_back);
            EvalItem {
                text: c.text.clone(),
                pred: snap_boundaries(&c.text, &pred),
                gold: c.boundaries.iter().copied().collect(),
                language: c.language.clone(),
            }
        })
        .collect();
    let opts = EvalOptions {
        include_terminal: a.include_terminal,
    };
    let tok = model.as_ref().map(|m| &m.tok);
    let report = if a.per_language {
        let mut r = evaluate_per_language(&items, tok, opts)?;
        for (lang, rep) in r.per_language.iter_mut() {
            rep.alignment_fallbacks = fallbacks.get(lang.as_str()).copied().unwrap_or(0);
        }
        serde_json::to_string_pretty(&r)?
    } else {
        let mut r = score(&items, tok, opts)?;
        r.alignment_fallbacks = fallbacks.values().sum();
        serde_json::to_string_pretty(&r)?
    };
    write_output(a.out.as_deref(), &format!("{report}\n"))
}
