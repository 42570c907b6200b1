//! Dataset ingestion, chunk packing and sentence-pair generation.
//!
//! Two on-disk formats are supported:
//!
//! * `lines`: UTF-8, one sentence per line, a blank line separates documents.
//!   Documents get the language tag [`UNKNOWN_LANGUAGE`].
//! * `jsonl`: one document per line, `{"language": "en", "units": ["Hi.", "Yes."]}`.
//!   A unit may also be an object `{"text": "...", "kind": "paragraph"}`, and a
//!   document may carry a `kind` applied to all of its plain-string units.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tokenize::{is_punctuation, Tokenizer};

pub const UNKNOWN_LANGUAGE: &str = "und";
pub const SEPARATOR: char = ' ';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    #[default]
    Sentence,
    Paragraph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    pub text: String,
    pub kind: UnitKind,
}

impl Unit {
    pub fn sentence(text: impl Into<String>) -> Self {
        Unit {
            text: text.into(),
            kind: UnitKind::Sentence,
        }
    }

    pub fn paragraph(text: impl Into<String>) -> Self {
        Unit {
            text: text.into(),
            kind: UnitKind::Paragraph,
        }
    }

    pub fn ends_in_punctuation(&self) -> bool {
        self.text.chars().last().is_some_and(is_punctuation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub language: String,
    pub units: Vec<Unit>,
}

impl Document {
    pub fn sentences<S: Into<String>>(language: &str, units: impl IntoIterator<Item = S>) -> Self {
        Document {
            language: language.to_string(),
            units: units.into_iter().map(Unit::sentence).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Lines,
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lines" => Ok(CorpusFormat::Lines),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, format, path)
}

pub fn parse_corpus(text: &str, format: CorpusFormat, origin: &Path) -> Result<Vec<Document>> {
    match format {
        CorpusFormat::Lines => Ok(parse_lines(text)),
        CorpusFormat::Jsonl => parse_jsonl(text, origin),
    }
}

pub fn parse_lines(text: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !current.is_empty() {
                docs.push(Document {
                    language: UNKNOWN_LANGUAGE.to_string(),
                    units: std::mem::take(&mut current),
                });
            }
        } else {
            current.push(Unit::sentence(line));
        }
    }
    if !current.is_empty() {
        docs.push(Document {
            language: UNKNOWN_LANGUAGE.to_string(),
            units: current,
        });
    }
    docs
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawUnit {
    Text(String),
    Full { text: String, kind: UnitKind },
}

#[derive(Deserialize)]
struct RawDocument {
    language: String,
    units: Vec<RawUnit>,
    #[serde(default)]
    kind: UnitKind,
}

pub fn parse_jsonl(text: &str, origin: &Path) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: RawDocument = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let mut units = Vec::with_capacity(raw.units.len());
        for u in raw.units {
            let (text, kind) = match u {
                RawUnit::Text(t) => (t, raw.kind),
                RawUnit::Full { text, kind } => (text, kind),
            };
            let trimmed = text.trim();
            if trimmed.is_empty() {
                return Err(parse_err("unit is empty".into()));
            }
            if trimmed.contains('\n') {
                return Err(parse_err("unit contains a newline".into()));
            }
            units.push(Unit {
                text: trimmed.to_string(),
                kind,
            });
        }
        docs.push(Document {
            language: raw.language,
            units,
        });
    }
    Ok(docs)
}

pub fn write_jsonl(docs: &[Document]) -> Result<String> {
    let mut out = String::new();
    for d in docs {
        let units: Vec<&str> = d.units.iter().map(|u| u.text.as_str()).collect();
        let kind = d.units.first().map(|u| u.kind).unwrap_or_default();
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "language": d.language,
            "units": units,
            "kind": kind,
        }))?);
        out.push('\n');
    }
    Ok(out)
}

/// Text made of units joined by single spaces; each boundary is the char
/// index of a unit's final character.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedChunk {
    pub text: String,
    pub boundaries: Vec<usize>,
    pub language: String,
}

impl PackedChunk {
    pub fn from_units<S: AsRef<str>>(language: &str, units: &[S]) -> Self {
        let mut text = String::new();
        let mut boundaries = Vec::with_capacity(units.len());
        let mut len = 0;
        for (i, u) in units.iter().enumerate() {
            if i > 0 {
                text.push(SEPARATOR);
                len += 1;
            }
            text.push_str(u.as_ref());
            len += u.as_ref().chars().count();
            boundaries.push(len - 1);
        }
        PackedChunk {
            text,
            boundaries,
            language: language.to_string(),
        }
    }

    /// Splits the text after each boundary, dropping the separator that
    /// starts every unit after the first.
    pub fn units(&self) -> Vec<String> {
        let chars: Vec<char> = self.text.chars().collect();
        let mut out = Vec::with_capacity(self.boundaries.len());
        let mut start = 0;
        for &b in &self.boundaries {
            let mut s = start;
            if s > 0 && chars.get(s) == Some(&SEPARATOR) {
                s += 1;
            }
            out.push(chars[s..=b].iter().collect());
            start = b + 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackingMode {
    Fill,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PackingConfig {
    pub context_tokens: usize,
    pub mode: PackingMode,
    pub geo_p: f64,
}

impl Default for PackingConfig {
    fn default() -> Self {
        PackingConfig {
            context_tokens: 256,
            mode: PackingMode::Fill,
            geo_p: 0.5,
        }
    }
}

impl PackingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_tokens < 8 {
            return Err(Error::Config(format!(
                "context_tokens must be at least 8, got {}",
                self.context_tokens
            )));
        }
        if !(self.geo_p > 0.0 && self.geo_p <= 1.0) {
            return Err(Error::Config(format!(
                "geo_p must be in (0, 1], got {}",
                self.geo_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CorpusWarning {
    Truncated {
        document: usize,
        unit: usize,
        tokens: usize,
    },
    TooFewUnits {
        document: usize,
    },
}

#[derive(Debug, Clone, Default)]
pub struct Packed {
    pub chunks: Vec<PackedChunk>,
    pub warnings: Vec<CorpusWarning>,
}

/// Draws `k >= 1` with `P(k) = p (1 - p)^(k - 1)`.
pub fn sample_geometric(rng: &mut rng::Rng, p: f64) -> usize {
    let mut k = 1;
    while !rng.random_bool(p) {
        k += 1;
    }
    k
}

struct Pending {
    language: String,
    units: Vec<String>,
    tokens: usize,
}

/// Packs units into chunks.
///
/// `Fill` concatenates units until the next one would exceed
/// `context_tokens`. `Geometric` puts `s` units in each chunk with `s` drawn
/// from a geometric distribution with success probability `geo_p`. Chunks
/// never mix languages. A unit longer than the context on its own is cut to
/// `context_tokens` tokens and reported.
pub fn pack_chunks(
    docs: &[Document],
    cfg: &PackingConfig,
    tok: &Tokenizer,
    seed: u64,
) -> Result<Packed> {
    cfg.validate()?;
    let mut rng = rng::rng(seed);
    let mut out = Packed::default();
    let mut pending: Option<Pending> = None;
    let mut target = match cfg.mode {
        PackingMode::Geometric => sample_geometric(&mut rng, cfg.geo_p),
        PackingMode::Fill => usize::MAX,
    };

    let flush = |pending: &mut Option<Pending>, out: &mut Packed| {
        if let Some(p) = pending.take() {
            out.chunks
                .push(PackedChunk::from_units(&p.language, &p.units));
        }
    };

    for (di, doc) in docs.iter().enumerate() {
        if pending.as_ref().is_some_and(|p| p.language != doc.language) {
            flush(&mut pending, &mut out);
            if cfg.mode == PackingMode::Geometric {
                target = sample_geometric(&mut rng, cfg.geo_p);
            }
        }
        for (ui, unit) in doc.units.iter().enumerate() {
            let mut text = unit.text.clone();
            let seq = tok.encode(&text);
            if seq.len() > cfg.context_tokens {
                let cut = seq.spans[cfg.context_tokens - 1].1;
                text = text
                    .chars()
                    .take(cut)
                    .collect::<String>()
                    .trim_end()
                    .to_string();
                out.warnings.push(CorpusWarning::Truncated {
                    document: di,
                    unit: ui,
                    tokens: seq.len(),
                });
            }
            let alone = tok.encode(&text).len();
            let joined = tok.encode(&format!("{SEPARATOR}{text}")).len();

            if cfg.mode == PackingMode::Fill {
                if let Some(p) = &pending {
                    if p.tokens + joined > cfg.context_tokens {
                        flush(&mut pending, &mut out);
                    }
                }
            }
            match &mut pending {
                Some(p) => {
                    p.tokens += joined;
                    p.units.push(text);
                }
                None => {
                    pending = Some(Pending {
                        language: doc.language.clone(),
                        units: vec![text],
                        tokens: alone,
                    })
                }
            }
            if cfg.mode == PackingMode::Geometric
                && pending.as_ref().is_some_and(|p| p.units.len() >= target)
            {
                flush(&mut pending, &mut out);
                target = sample_geometric(&mut rng, cfg.geo_p);
            }
        }
    }
    flush(&mut pending, &mut out);
    Ok(out)
}

/// Disjoint pairs of consecutive sentences within each document. An odd
/// trailing sentence is dropped; documents with fewer than two units are
/// skipped and reported.
pub fn make_sentence_pairs(docs: &[Document], _seed: u64) -> Packed {
    let mut out = Packed::default();
    for (di, doc) in docs.iter().enumerate() {
        if doc.units.len() < 2 {
            out.warnings
                .push(CorpusWarning::TooFewUnits { document: di });
            continue;
        }
        for pair in doc.units.chunks_exact(2) {
            out.chunks.push(PackedChunk::from_units(
                &doc.language,
                &[&pair[0].text, &pair[1].text],
            ));
        }
    }
    out
}

/// Drops randomly chosen units that do not end in punctuation until at most
/// `max_fraction` of the remaining units are unpunctuated. Documents left
/// without units are removed.
pub fn limit_unpunctuated(docs: &[Document], max_fraction: f64, seed: u64) -> Vec<Document> {
    let mut unpunct: Vec<(usize, usize)> = Vec::new();
    let mut n_punct = 0usize;
    for (di, d) in docs.iter().enumerate() {
        for (ui, u) in d.units.iter().enumerate() {
            if u.ends_in_punctuation() {
                n_punct += 1;
            } else {
                unpunct.push((di, ui));
            }
        }
    }
    let allowed = if max_fraction >= 1.0 {
        unpunct.len()
    } else {
        ((max_fraction * n_punct as f64) / (1.0 - max_fraction)).floor() as usize
    };
    if unpunct.len() <= allowed {
        return docs.to_vec();
    }
    let mut rng = rng::rng(seed);
    unpunct.shuffle(&mut rng);
    let dropped: std::collections::HashSet<(usize, usize)> =
        unpunct[allowed..].iter().copied().collect();
    docs.iter()
        .enumerate()
        .filter_map(|(di, d)| {
            let units: Vec<Unit> = d
                .units
                .iter()
                .enumerate()
                .filter(|(ui, _)| !dropped.contains(&(di, *ui)))
                .map(|(_, u)| u.clone())
                .collect();
            (!units.is_empty()).then(|| Document {
                language: d.language.clone(),
                units,
            })
        })
        .collect()
}

pub fn languages(docs: &[Document]) -> Vec<String> {
    let set: std::collections::BTreeSet<&str> = docs.iter().map(|d| d.language.as_str()).collect();
    set.into_iter().map(String::from).collect()
}
