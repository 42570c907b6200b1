//! Seeded text corruptions that keep sentence boundaries aligned with the
//! transformed text and record removed punctuation for the auxiliary head.
//!
//! Every transform works unit by unit: a unit is the text between two
//! consecutive boundaries, and every unit keeps at least one non-space
//! character, so the number of boundaries never changes.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{PackedChunk, SEPARATOR};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenize::{is_punctuation, PunctuationSet, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Pretrain,
    SmAsr,
    SmUgc,
    Clean,
}

impl Scheme {
    pub const MIXTURE: [Scheme; 3] = [Scheme::SmAsr, Scheme::SmUgc, Scheme::Clean];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    pub scheme: Scheme,
    /// Per-token removal probability of common punctuation during pretraining.
    pub p_remove_punct: f64,
    /// Probability that a pretraining sample is lowercased and fully stripped.
    pub p_full_strip_sample: f64,
    pub p_lower: f64,
    /// Probability that a user-generated-content sample loses all punctuation.
    pub p_strip_punct: f64,
    pub p_dup_trigger: f64,
    /// Ratio of successive multiplicities: `P(m = k + 1) = base * P(m = k)`, `m >= 2`.
    pub dup_geo_base: f64,
    pub p_space_remove: f64,
    pub p_space_add: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            scheme: Scheme::Pretrain,
            p_remove_punct: 0.25,
            p_full_strip_sample: 0.10,
            p_lower: 0.5,
            p_strip_punct: 0.5,
            p_dup_trigger: 0.5,
            dup_geo_base: 0.5,
            p_space_remove: 0.1,
            p_space_add: 0.1,
        }
    }
}

impl CorruptionConfig {
    pub fn with_scheme(scheme: Scheme) -> Self {
        CorruptionConfig {
            scheme,
            ..Default::default()
        }
    }

    /// A pretraining config that leaves text untouched.
    pub fn no_corruption() -> Self {
        CorruptionConfig {
            p_remove_punct: 0.0,
            p_full_strip_sample: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_remove_punct", self.p_remove_punct),
            ("p_full_strip_sample", self.p_full_strip_sample),
            ("p_lower", self.p_lower),
            ("p_strip_punct", self.p_strip_punct),
            ("p_dup_trigger", self.p_dup_trigger),
            ("p_space_remove", self.p_space_remove),
            ("p_space_add", self.p_space_add),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.dup_geo_base) {
            return Err(Error::Config(format!(
                "dup_geo_base must be in [0, 1), got {}",
                self.dup_geo_base
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedExample {
    pub text: String,
    pub boundaries: Vec<usize>,
    /// Char index -> id of the punctuation token removed right after it.
    pub aux_labels: BTreeMap<usize, u32>,
}

impl CorruptedExample {
    pub fn identity(chunk: &PackedChunk) -> Self {
        CorruptedExample {
            text: chunk.text.clone(),
            boundaries: chunk.boundaries.clone(),
            aux_labels: BTreeMap::new(),
        }
    }

    /// The text of each unit, split right after each boundary.
    pub fn units(&self) -> Vec<String> {
        let chars: Vec<char> = self.text.chars().collect();
        let mut start = 0;
        self.boundaries
            .iter()
            .map(|&b| {
                let s: String = chars[start..=b].iter().collect();
                start = b + 1;
                s
            })
            .collect()
    }
}

/// Which punctuation tokens to drop from a sample.
#[derive(Clone, Copy)]
enum Removal {
    None,
    Each(f64),
    All,
}

#[derive(Clone, Copy)]
struct Plan {
    lowercase: bool,
    removal: Removal,
    dup_trigger: f64,
    dup_base: f64,
    space_remove: f64,
    space_add: f64,
}

fn lower_char(c: char) -> char {
    let mut it = c.to_lowercase();
    match (it.next(), it.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

fn is_punct_only(text: &str) -> bool {
    !text.is_empty() && text.chars().all(is_punctuation)
}

/// Splits a chunk into unit texts, keeping the separator that precedes
/// each unit after the first. Any tail past the last boundary goes with the
/// final unit.
fn raw_units(chunk: &PackedChunk) -> Vec<String> {
    let chars: Vec<char> = chunk.text.chars().collect();
    let mut out = Vec::with_capacity(chunk.boundaries.len());
    let mut start = 0;
    for &b in &chunk.boundaries {
        out.push(chars[start..=b].iter().collect::<String>());
        start = b + 1;
    }
    if start < chars.len() {
        let tail: String = chars[start..].iter().collect();
        match out.last_mut() {
            Some(last) => last.push_str(&tail),
            None => out.push(tail),
        }
    }
    out
}

fn apply(
    chunk: &PackedChunk,
    tok: &Tokenizer,
    punct: &PunctuationSet,
    plan: Plan,
    rng: &mut rng::Rng,
) -> CorruptedExample {
    let mut out: Vec<char> = Vec::with_capacity(chunk.text.len() + 8);
    let mut boundaries = Vec::with_capacity(chunk.boundaries.len());
    let mut aux = BTreeMap::new();
    let has_boundaries = !chunk.boundaries.is_empty();

    for (ui, unit) in raw_units(chunk).iter().enumerate() {
        let mut body = unit.as_str();
        if ui > 0 {
            if let Some(rest) = body.strip_prefix(SEPARATOR) {
                body = rest;
                if !rng.random_bool(plan.space_remove) {
                    out.push(SEPARATOR);
                    if rng.random_bool(plan.space_add) {
                        out.push(SEPARATOR);
                    }
                }
            }
        }

        let seq = tok.encode(body);
        let chars: Vec<char> = body.chars().collect();
        let texts: Vec<String> = seq
            .spans
            .iter()
            .map(|&(s, e)| chars[s..e].iter().collect())
            .collect();

        let mut kept = vec![true; seq.len()];
        for (ti, (&id, text)) in seq.ids.iter().zip(&texts).enumerate() {
            let common = punct.is_punct_token(id);
            kept[ti] = match plan.removal {
                Removal::None => true,
                Removal::Each(p) => !(common && rng.random_bool(p)),
                Removal::All => !(common || is_punct_only(text)),
            };
        }
        if !kept.is_empty()
            && !kept
                .iter()
                .zip(&texts)
                .any(|(&k, t)| k && !t.trim().is_empty())
        {
            if let Some(last) = (0..kept.len()).rev().find(|&i| !texts[i].trim().is_empty()) {
                kept[last] = true;
            }
        }

        for (ti, text) in texts.iter().enumerate() {
            let id = seq.ids[ti];
            if !kept[ti] {
                if let (Some(pos), true) = (out.len().checked_sub(1), punct.is_punct_token(id)) {
                    aux.entry(pos).or_insert(id);
                }
                continue;
            }
            let copies = if is_punct_only(text)
                && plan.dup_trigger > 0.0
                && rng.random_bool(plan.dup_trigger)
            {
                let mut m = 2;
                while plan.dup_base > 0.0 && rng.random_bool(plan.dup_base) {
                    m += 1;
                }
                m
            } else {
                1
            };
            for _ in 0..copies {
                out.extend(text.chars());
            }
        }
        if has_boundaries {
            boundaries.push(out.len().saturating_sub(1));
        }
    }

    if plan.lowercase {
        for c in out.iter_mut() {
            *c = lower_char(*c);
        }
    }
    CorruptedExample {
        text: out.into_iter().collect(),
        boundaries,
        aux_labels: aux,
    }
}

/// Pretraining corruption: every common punctuation-only token is dropped
/// with probability `p_remove_punct`, except in a `p_full_strip_sample`
/// fraction of samples that are instead lowercased and lose all punctuation.
pub fn corrupt_pretrain(
    chunk: &PackedChunk,
    tok: &Tokenizer,
    punct: &PunctuationSet,
    cfg: &CorruptionConfig,
    seed: u64,
) -> Result<CorruptedExample> {
    cfg.validate()?;
    if cfg.scheme != Scheme::Pretrain {
        return Err(Error::Config(format!(
            "corrupt_pretrain called with scheme {:?}",
            cfg.scheme
        )));
    }
    let mut rng = rng::rng(seed);
    let full = rng.random_bool(cfg.p_full_strip_sample);
    let plan = Plan {
        lowercase: full,
        removal: if full {
            Removal::All
        } else if cfg.p_remove_punct > 0.0 {
            Removal::Each(cfg.p_remove_punct)
        } else {
            Removal::None
        },
        dup_trigger: 0.0,
        dup_base: 0.0,
        space_remove: 0.0,
        space_add: 0.0,
    };
    Ok(apply(chunk, tok, punct, plan, &mut rng))
}

/// Supervised-mixture corruption for `SmAsr`, `SmUgc` and `Clean`.
pub fn corrupt_sm(
    chunk: &PackedChunk,
    tok: &Tokenizer,
    punct: &PunctuationSet,
    cfg: &CorruptionConfig,
    seed: u64,
) -> Result<CorruptedExample> {
    cfg.validate()?;
    let mut rng = rng::rng(seed);
    let plan = match cfg.scheme {
        Scheme::Clean => return Ok(CorruptedExample::identity(chunk)),
        Scheme::Pretrain => {
            return Err(Error::Config(
                "corrupt_sm called with the pretrain scheme".into(),
            ));
        }
        Scheme::SmAsr => Plan {
            lowercase: true,
            removal: Removal::All,
            dup_trigger: 0.0,
            dup_base: 0.0,
            space_remove: 0.0,
            space_add: 0.0,
        },
        Scheme::SmUgc => {
            let lowercase = rng.random_bool(cfg.p_lower);
            let strip = rng.random_bool(cfg.p_strip_punct);
            Plan {
                lowercase,
                removal: if strip { Removal::All } else { Removal::None },
                dup_trigger: cfg.p_dup_trigger,
                dup_base: cfg.dup_geo_base,
                space_remove: cfg.p_space_remove,
                space_add: cfg.p_space_add,
            }
        }
    };
    Ok(apply(chunk, tok, punct, plan, &mut rng))
}

/// Dispatches on `cfg.scheme`.
pub fn corrupt(
    chunk: &PackedChunk,
    tok: &Tokenizer,
    punct: &PunctuationSet,
    cfg: &CorruptionConfig,
    seed: u64,
) -> Result<CorruptedExample> {
    match cfg.scheme {
        Scheme::Pretrain => corrupt_pretrain(chunk, tok, punct, cfg, seed),
        _ => corrupt_sm(chunk, tok, punct, cfg, seed),
    }
}

/// Uniform draw over the three supervised-mixture schemes.
pub fn sample_scheme(seed: u64) -> Scheme {
    let mut rng = rng::rng(rng::derive_tagged(seed, "scheme", 0));
    Scheme::MIXTURE[rng.random_range(0..Scheme::MIXTURE.len())]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PackedChunk;
    use crate::tokenize::{punctuation_set, train_bpe};
    use proptest::prelude::*;

    const SAMPLE: &str = "Also gut. Alles klar? Hi. Yo. Well, it's done! Wow!! (Really?) Okay.";

    fn setup() -> (Tokenizer, PunctuationSet) {
        let tok = train_bpe(&[SAMPLE, "also gut alles klar hi yo"], 80).unwrap();
        let punct = punctuation_set(&tok, &[SAMPLE], 30).unwrap();
        (tok, punct)
    }

    fn chunk(units: &[&str]) -> PackedChunk {
        PackedChunk::from_units("de", units)
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let (tok, punct) = setup();
        let c = chunk(&["Hi.", "Yo."]);
        let cfg = CorruptionConfig::no_corruption();
        let out = corrupt_pretrain(&c, &tok, &punct, &cfg, 1).unwrap();
        assert_eq!(out.text, c.text);
        assert_eq!(out.boundaries, c.boundaries);
        assert!(out.aux_labels.is_empty());
    }

    #[test]
    fn full_removal_remaps_boundaries_and_labels() {
        let (tok, punct) = setup();
        let dot = tok.id(".").unwrap();
        let c = chunk(&["Hi.", "Yo."]);
        let cfg = CorruptionConfig {
            p_remove_punct: 1.0,
            p_full_strip_sample: 0.0,
            ..Default::default()
        };
        let out = corrupt_pretrain(&c, &tok, &punct, &cfg, 9).unwrap();
        assert_eq!(out.text, "Hi Yo");
        assert_eq!(out.boundaries, [1, 4]);
        assert_eq!(out.aux_labels, BTreeMap::from([(1, dot), (4, dot)]));
    }

    #[test]
    fn full_strip_sample_lowercases() {
        let (tok, punct) = setup();
        let c = chunk(&["Also gut.", "Alles klar?"]);
        let cfg = CorruptionConfig {
            p_full_strip_sample: 1.0,
            ..Default::default()
        };
        let out = corrupt_pretrain(&c, &tok, &punct, &cfg, 2).unwrap();
        assert_eq!(out.text, "also gut alles klar");
        assert_eq!(out.boundaries, [7, 18]);
    }

    #[test]
    fn removal_rate_matches_probability() {
        let (tok, punct) = setup();
        let units: Vec<String> = (0..100).map(|_| "Hi.".to_string()).collect();
        let c = PackedChunk::from_units("en", &units);
        let cfg = CorruptionConfig::default();
        let cfg = CorruptionConfig {
            p_full_strip_sample: 0.0,
            ..cfg
        };
        let mut removed = 0;
        let mut total = 0;
        for seed in 0..100 {
            let out = corrupt_pretrain(&c, &tok, &punct, &cfg, seed).unwrap();
            total += 100;
            removed += 100 - out.text.matches('.').count();
        }
        let rate = removed as f64 / total as f64;
        assert!((0.23..=0.27).contains(&rate), "rate {rate}");
    }

    #[test]
    fn asr_scheme_example() {
        let (tok, punct) = setup();
        let c = chunk(&["Also gut.", "Alles klar?"]);
        let out = corrupt_sm(
            &c,
            &tok,
            &punct,
            &CorruptionConfig::with_scheme(Scheme::SmAsr),
            0,
        )
        .unwrap();
        assert_eq!(out.text, "also gut alles klar");
        let chars: Vec<char> = out.text.chars().collect();
        assert_eq!(out.boundaries, [7, 18]);
        assert_eq!(chars[7], 't');
        assert_eq!(chars[18], 'r');
    }

    #[test]
    fn clean_scheme_is_identity() {
        let (tok, punct) = setup();
        let c = chunk(&["Wow!!", "(Really?)", "Okay."]);
        let out = corrupt_sm(
            &c,
            &tok,
            &punct,
            &CorruptionConfig::with_scheme(Scheme::Clean),
            4,
        )
        .unwrap();
        assert_eq!(out, CorruptedExample::identity(&c));
    }

    #[test]
    fn wrong_scheme_is_rejected() {
        let (tok, punct) = setup();
        let c = chunk(&["Hi."]);
        assert!(corrupt_pretrain(
            &c,
            &tok,
            &punct,
            &CorruptionConfig::with_scheme(Scheme::SmAsr),
            0
        )
        .is_err());
        assert!(corrupt_sm(&c, &tok, &punct, &CorruptionConfig::default(), 0).is_err());
        let bad = CorruptionConfig {
            p_lower: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn duplication_multiplicity_is_geometric() {
        let (tok, punct) = setup();
        let c = chunk(&["Wow!"]);
        let cfg = CorruptionConfig {
            scheme: Scheme::SmUgc,
            p_lower: 0.0,
            p_strip_punct: 0.0,
            p_dup_trigger: 1.0,
            p_space_add: 0.0,
            p_space_remove: 0.0,
            ..Default::default()
        };
        let mut hist = BTreeMap::new();
        let n = 10_000;
        for seed in 0..n {
            let out = corrupt_sm(&c, &tok, &punct, &cfg, seed).unwrap();
            *hist.entry(out.text.matches('!').count()).or_insert(0usize) += 1;
        }
        assert!(!hist.contains_key(&1));
        for (m, expect) in [(2, 0.5), (3, 0.25), (4, 0.125)] {
            let f = hist.get(&m).copied().unwrap_or(0) as f64 / n as f64;
            assert!((f - expect).abs() < 0.02, "m={m} freq {f}");
        }
    }

    #[test]
    fn scheme_sampling() {
        assert_eq!(sample_scheme(42), sample_scheme(42));
        let reachable: std::collections::BTreeSet<Scheme> = (0..3).map(sample_scheme).collect();
        let more: std::collections::BTreeSet<Scheme> = (0..64).map(sample_scheme).collect();
        assert_eq!(more.len(), 3);
        assert!(!reachable.is_empty());
        let mut counts = BTreeMap::new();
        for s in 0..30_000 {
            *counts.entry(sample_scheme(s)).or_insert(0usize) += 1;
        }
        for (_, c) in counts {
            let f = c as f64 / 30_000.0;
            assert!((0.32..=0.35).contains(&f), "freq {f}");
        }
    }

    #[test]
    fn punctuation_only_unit_survives() {
        let (tok, punct) = setup();
        let c = chunk(&["Hi.", "!!", "Yo."]);
        let out = corrupt_sm(
            &c,
            &tok,
            &punct,
            &CorruptionConfig::with_scheme(Scheme::SmAsr),
            0,
        )
        .unwrap();
        assert_eq!(out.boundaries.len(), 3);
        assert!(out.boundaries.windows(2).all(|w| w[0] < w[1]));
    }

    fn check_invariants(
        c: &PackedChunk,
        out: &CorruptedExample,
    ) -> std::result::Result<(), TestCaseError> {
        let n = out.text.chars().count();
        prop_assert_eq!(out.boundaries.len(), c.boundaries.len());
        prop_assert!(out.boundaries.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(out.boundaries.iter().all(|&b| b < n));
        prop_assert!(out.aux_labels.keys().all(|&k| k < n));
        let units = out.units();
        prop_assert_eq!(units.len(), c.boundaries.len());
        for u in &units {
            prop_assert!(!u.trim().is_empty());
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn corruptions_preserve_boundaries(
            units in proptest::collection::vec("[A-Za-z]{1,6}( [a-z]{1,5})?[.!?,]{0,2}", 1..12),
            seed in 0u64..5000,
            scheme_ix in 0usize..4,
        ) {
            let (tok, punct) = setup();
            let c = PackedChunk::from_units("en", &units);
            let scheme = [Scheme::Pretrain, Scheme::SmAsr, Scheme::SmUgc, Scheme::Clean][scheme_ix];
            let cfg = CorruptionConfig {
                p_remove_punct: 0.5,
                p_full_strip_sample: 0.2,
                p_space_add: 0.3,
                p_space_remove: 0.3,
                ..CorruptionConfig::with_scheme(scheme)
            };
            let out = corrupt(&c, &tok, &punct, &cfg, seed).unwrap();
            check_invariants(&c, &out)?;
            prop_assert_eq!(&out, &corrupt(&c, &tok, &punct, &cfg, seed).unwrap());
        }

        #[test]
        fn removed_final_punct_moves_boundary_back(
            words in proptest::collection::vec("[a-z]{1,6}", 1..8),
        ) {
            let (tok, punct) = setup();
            let units: Vec<String> = words.iter().map(|w| format!("{w}.")).collect();
            let c = PackedChunk::from_units("en", &units);
            let cfg = CorruptionConfig {
                p_remove_punct: 1.0,
                p_full_strip_sample: 0.0,
                ..Default::default()
            };
            let out = corrupt_pretrain(&c, &tok, &punct, &cfg, 0).unwrap();
            let chars: Vec<char> = out.text.chars().collect();
            for (b, w) in out.boundaries.iter().zip(&words) {
                prop_assert_eq!(chars[*b], w.chars().last().unwrap());
                prop_assert!(out.aux_labels.contains_key(b));
            }
        }
    }
}
