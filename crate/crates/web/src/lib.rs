//! Browser demo: a lookahead mask explorer, a corruption preview next to
//! the rule baseline, and an alignment explorer for boundary projection.
//! Every export takes plain values and returns a JSON string.

use std::collections::{BTreeSet, HashSet};

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use satseg::baseline::{parse_abbreviations, rule_segment};
use satseg::corpus::PackedChunk;
use satseg::corrupt::{corrupt, CorruptionConfig, Scheme};
use satseg::eval::{
    nw_align, snap_boundaries, try_project_boundaries, AlignmentParams, DEFAULT_SCORE_FLOOR,
};
use satseg::model::{build_lookahead_mask, per_layer_lookahead};
use satseg::tokenize::{punctuation_set, Tokenizer};

fn lines(text: &str) -> Vec<&str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn mask_report(seq_len: usize, layers: usize, total: usize) -> Result<Value, String> {
    if layers == 0 || seq_len == 0 {
        return Err("sequence length and layer count must be positive".into());
    }
    if seq_len > 64 {
        return Err("keep the sequence at 64 tokens or fewer".into());
    }
    let per_layer = per_layer_lookahead(total, layers);
    let mask = build_lookahead_mask(seq_len, Some(per_layer));
    let horizon: Vec<usize> = (0..seq_len)
        .map(|i| (i + layers * per_layer).min(seq_len - 1))
        .collect();
    Ok(json!({
        "per_layer": per_layer,
        "remainder": total - per_layer * layers,
        "reach": layers * per_layer,
        "mask": mask.to_matrix(),
        "horizon": horizon,
    }))
}

fn parse_scheme(name: &str) -> Result<Scheme, String> {
    match name {
        "pretrain" => Ok(Scheme::Pretrain),
        "asr" => Ok(Scheme::SmAsr),
        "ugc" => Ok(Scheme::SmUgc),
        "clean" => Ok(Scheme::Clean),
        other => Err(format!("unknown scheme `{other}`")),
    }
}

/// Packs the sentences of `text` (one per line), corrupts them and runs
/// the rule baseline on the result.
pub fn corruption_report(text: &str, scheme: &str, seed: u64) -> Result<Value, String> {
    let units = lines(text);
    if units.is_empty() {
        return Err("enter at least one sentence".into());
    }
    let chunk = PackedChunk::from_units("demo", &units);
    let tok = Tokenizer::char_level(&[chunk.text.as_str()]);
    let punct = punctuation_set(&tok, &[chunk.text.as_str()], 30).map_err(|e| e.to_string())?;
    let cfg = CorruptionConfig::with_scheme(parse_scheme(scheme)?);
    let ex = corrupt(&chunk, &tok, &punct, &cfg, seed).map_err(|e| e.to_string())?;
    let terms: BTreeSet<char> = ['.', '!', '?'].into();
    let rule = rule_segment(&ex.text, &terms, &HashSet::new()).map_err(|e| e.to_string())?;
    let gold: BTreeSet<usize> = ex.boundaries.iter().copied().collect();
    let found = snap_boundaries(&ex.text, &rule.boundaries.iter().copied().collect())
        .intersection(&gold)
        .count();
    Ok(json!({
        "text": ex.text,
        "boundaries": ex.boundaries,
        "sentences": ex.units(),
        "rule_sentences": rule.sentences,
        "rule_found": found,
    }))
}

pub fn rule_report(text: &str, terminators: &str, abbreviations: &str) -> Result<Value, String> {
    let terms: BTreeSet<char> = terminators.chars().filter(|c| !c.is_whitespace()).collect();
    let abbrevs = parse_abbreviations(abbreviations);
    let r = rule_segment(text, &terms, &abbrevs).map_err(|e| e.to_string())?;
    Ok(json!({ "boundaries": r.boundaries, "sentences": r.sentences }))
}

/// Aligns a system's output (one sentence per line) to the reference text
/// and carries its boundaries over.
pub fn alignment_report(output: &str, reference: &str) -> Result<Value, String> {
    let units = lines(output);
    if units.is_empty() || reference.trim().is_empty() {
        return Err("both texts must be non-empty".into());
    }
    let out = PackedChunk::from_units("demo", &units);
    let params = AlignmentParams::default();
    let aln = nw_align(&out.text, reference, &params);
    let a: Vec<char> = out.text.chars().collect();
    let b: Vec<char> = reference.chars().collect();
    let (mut top, mut bottom) = (String::new(), String::new());
    for &(i, j) in &aln.columns {
        top.push(i.map_or('-', |i| a[i]));
        bottom.push(j.map_or('-', |j| b[j]));
    }
    let marks: BTreeSet<usize> = out.boundaries.iter().copied().collect();
    let projected =
        try_project_boundaries(&out.text, &marks, reference, &params, DEFAULT_SCORE_FLOOR);
    let mut sentences = Vec::new();
    if let Some(set) = &projected {
        let mut start = 0;
        for &p in set {
            sentences.push(b[start..=p].iter().collect::<String>());
            start = p + 1;
        }
        if start < b.len() {
            sentences.push(b[start..].iter().collect());
        }
    }
    Ok(json!({
        "score": aln.score,
        "floor": DEFAULT_SCORE_FLOOR * b.len() as f64 * params.match_score,
        "output_row": top,
        "reference_row": bottom,
        "projected": projected,
        "sentences": sentences,
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn lookahead_mask(seq_len: usize, layers: usize, total: usize) -> Result<String, JsError> {
    to_js(mask_report(seq_len, layers, total))
}

#[wasm_bindgen]
pub fn corrupt_preview(text: &str, scheme: &str, seed: u32) -> Result<String, JsError> {
    to_js(corruption_report(text, scheme, seed as u64))
}

#[wasm_bindgen]
pub fn rule_split(text: &str, terminators: &str, abbreviations: &str) -> Result<String, JsError> {
    to_js(rule_report(text, terminators, abbreviations))
}

#[wasm_bindgen]
pub fn align(output: &str, reference: &str) -> Result<String, JsError> {
    to_js(alignment_report(output, reference))
}
