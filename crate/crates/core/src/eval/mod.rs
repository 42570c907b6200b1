//! Boundary metrics, alignment-based projection and evaluation-time
//! corruption.

mod align;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Unit};
use crate::error::{Error, Result};
use crate::tokenize::{is_punctuation, PunctuationSet, Tokenizer};

pub use align::{
    nw_align, project_boundaries, score_columns, try_project_boundaries, Alignment,
    AlignmentParams, Column, DEFAULT_SCORE_FLOOR,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, other: Counts) -> Counts {
        Counts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, other: Counts) {
        *self = *self + other;
    }
}

impl Counts {
    /// Precision and recall are 1 when their denominator is empty, so a
    /// sequence with no gold and no predicted boundaries scores F1 = 1.
    pub fn scores(&self) -> Scores {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                1.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn char_counts(pred: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> Counts {
    let tp = pred.intersection(gold).count();
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

/// Moves boundaries that sit on whitespace back to the closest preceding
/// non-whitespace character, so a split taken after trailing spaces scores
/// like one on the sentence's last visible character. Boundaries inside
/// leading whitespace are dropped.
pub fn snap_boundaries(text: &str, boundaries: &BTreeSet<usize>) -> BTreeSet<usize> {
    let chars: Vec<char> = text.chars().collect();
    boundaries
        .iter()
        .filter_map(|&b| {
            (0..(b + 1).min(chars.len()))
                .rev()
                .find(|&i| !chars[i].is_whitespace())
        })
        .collect()
}

pub fn char_f1(pred: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> Scores {
    char_counts(pred, gold).scores()
}

/// Fraction of sequences whose predicted set equals the gold set.
pub fn perfect_rate(results: &[(BTreeSet<usize>, BTreeSet<usize>)]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Input(
            "perfect_rate needs at least one sequence".into(),
        ));
    }
    Ok(results.iter().filter(|(p, g)| p == g).count() as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub text: String,
    pub pred: BTreeSet<usize>,
    pub gold: BTreeSet<usize>,
    pub language: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Score the always-present boundary on the last character too.
    pub include_terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub token_f1: Option<f64>,
    pub perfect_rate: f64,
    pub counts: Counts,
    pub n_sequences: usize,
    /// Sequences whose projected boundaries fell back to the empty set.
    #[serde(default)]
    pub alignment_fallbacks: usize,
}

fn scored(set: &BTreeSet<usize>, len: usize, opts: EvalOptions) -> BTreeSet<usize> {
    if opts.include_terminal || len == 0 {
        set.clone()
    } else {
        set.iter().copied().filter(|&i| i != len - 1).collect()
    }
}

/// Micro-averaged scores over `items`. Token-level F1 is computed when a
/// tokenizer is given, restricting both sets to token-final characters.
pub fn evaluate(
    items: &[EvalItem],
    tok: Option<&Tokenizer>,
    opts: EvalOptions,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let mut counts = Counts::default();
    let mut token_counts = Counts::default();
    let mut pairs = Vec::with_capacity(items.len());
    for item in items {
        let len = item.text.chars().count();
        let pred = scored(&item.pred, len, opts);
        let gold = scored(&item.gold, len, opts);
        counts += char_counts(&pred, &gold);
        if let Some(tok) = tok {
            let ends: BTreeSet<usize> = tok
                .encode(&item.text)
                .spans
                .iter()
                .map(|&(_, e)| e - 1)
                .collect();
            let p: BTreeSet<usize> = pred.intersection(&ends).copied().collect();
            let g: BTreeSet<usize> = gold.intersection(&ends).copied().collect();
            token_counts += char_counts(&p, &g);
        }
        pairs.push((pred, gold));
    }
    let s = counts.scores();
    Ok(EvalReport {
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        token_f1: tok.map(|_| token_counts.scores().f1),
        perfect_rate: perfect_rate(&pairs)?,
        counts,
        n_sequences: items.len(),
        alignment_fallbacks: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageReport {
    pub per_language: BTreeMap<String, EvalReport>,
    pub macro_f1: f64,
    pub macro_token_f1: Option<f64>,
    pub macro_perfect_rate: f64,
}

/// One report per language plus unweighted means across languages.
pub fn evaluate_per_language(
    items: &[EvalItem],
    tok: Option<&Tokenizer>,
    opts: EvalOptions,
) -> Result<LanguageReport> {
    let mut groups: BTreeMap<&str, Vec<EvalItem>> = BTreeMap::new();
    for item in items {
        groups
            .entry(item.language.as_str())
            .or_default()
            .push(item.clone());
    }
    if groups.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let mut per_language = BTreeMap::new();
    for (lang, group) in groups {
        per_language.insert(lang.to_string(), evaluate(&group, tok, opts)?);
    }
    let n = per_language.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| per_language.values().map(f).sum::<f64>() / n;
    let macro_f1 = mean(&|r| r.f1);
    let macro_perfect_rate = mean(&|r| r.perfect_rate);
    let macro_token_f1 = tok.map(|_| mean(&|r| r.token_f1.unwrap_or(0.0)));
    Ok(LanguageReport {
        per_language,
        macro_f1,
        macro_token_f1,
        macro_perfect_rate,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalWarning {
    DroppedUnit { document: usize, unit: usize },
}

/// Lowercases every unit, deletes punctuation characters and collapses
/// whitespace. Units left empty are dropped and reported; documents left
/// empty are removed.
pub fn asr_corrupt_eval(
    docs: &[Document],
    punct: &PunctuationSet,
) -> (Vec<Document>, Vec<EvalWarning>) {
    let mut warnings = Vec::new();
    let mut out = Vec::new();
    for (di, doc) in docs.iter().enumerate() {
        let mut units = Vec::new();
        for (ui, unit) in doc.units.iter().enumerate() {
            let stripped: String = unit
                .text
                .chars()
                .filter(|&c| !(is_punctuation(c) || punct.chars.contains(&c)))
                .flat_map(char::to_lowercase)
                .collect();
            let text = stripped.split_whitespace().collect::<Vec<_>>().join(" ");
            if text.is_empty() {
                warnings.push(EvalWarning::DroppedUnit {
                    document: di,
                    unit: ui,
                });
            } else {
                units.push(Unit {
                    text,
                    kind: unit.kind,
                });
            }
        }
        if !units.is_empty() {
            out.push(Document {
                language: doc.language.clone(),
                units,
            });
        }
    }
    (out, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn snapping() {
        assert_eq!(snap_boundaries("Hi.  Yo.", &set(&[4, 7])), set(&[2, 7]));
        assert_eq!(snap_boundaries("  a", &set(&[0, 1, 2])), set(&[2]));
        assert_eq!(snap_boundaries("", &set(&[0])), set(&[]));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(char_f1(&set(&[1, 4]), &set(&[1, 4])).f1, 1.0);
        let s = char_f1(&set(&[3, 7]), &set(&[3, 9]));
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert_eq!(char_f1(&set(&[]), &set(&[3])).f1, 0.0);
        assert_eq!(char_f1(&set(&[3]), &set(&[])).f1, 0.0);
    }

    #[test]
    fn perfect_rate_examples() {
        let a = (set(&[1]), set(&[1]));
        let b = (set(&[1, 2]), set(&[1]));
        assert!(
            (perfect_rate(&[a.clone(), a.clone(), b.clone()]).unwrap() - 2.0 / 3.0).abs() < 1e-15
        );
        assert_eq!(perfect_rate(std::slice::from_ref(&a)).unwrap(), 1.0);
        assert_eq!(perfect_rate(&[b]).unwrap(), 0.0);
        assert!(perfect_rate(&[]).is_err());
    }

    #[test]
    fn terminal_boundary_is_not_scored_by_default() {
        let item = EvalItem {
            text: "ab cd".into(),
            pred: set(&[4]),
            gold: set(&[1, 4]),
            language: "x".into(),
        };
        let r = evaluate(std::slice::from_ref(&item), None, EvalOptions::default()).unwrap();
        assert_eq!(
            r.counts,
            Counts {
                tp: 0,
                fp: 0,
                fn_: 1
            }
        );
        let r = evaluate(
            &[item],
            None,
            EvalOptions {
                include_terminal: true,
            },
        )
        .unwrap();
        assert_eq!(
            r.counts,
            Counts {
                tp: 1,
                fp: 0,
                fn_: 1
            }
        );
    }

    #[test]
    fn token_f1_ignores_inner_characters() {
        let tok = Tokenizer::char_level(&["ab"]);
        let tok = crate::tokenize::train_bpe(&["ab ab ab"], tok.vocab_size() + 3).unwrap();
        let item = EvalItem {
            text: "ab ab ab".into(),
            pred: set(&[0, 4]),
            gold: set(&[1, 4]),
            language: "x".into(),
        };
        let r = evaluate(&[item], Some(&tok), EvalOptions::default()).unwrap();
        assert_eq!(r.f1, 0.5);
        assert_eq!(r.token_f1, Some(2.0 / 3.0));
    }

    #[test]
    fn per_language_macro() {
        let items = vec![
            EvalItem {
                text: "abcd".into(),
                pred: set(&[1]),
                gold: set(&[1]),
                language: "a".into(),
            },
            EvalItem {
                text: "abcd".into(),
                pred: set(&[]),
                gold: set(&[1]),
                language: "b".into(),
            },
            EvalItem {
                text: "abcd".into(),
                pred: set(&[1]),
                gold: set(&[1]),
                language: "b".into(),
            },
        ];
        let r = evaluate_per_language(&items, None, EvalOptions::default()).unwrap();
        let b = &r.per_language["b"];
        assert!((b.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.macro_f1 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(r.macro_perfect_rate, 0.75);
    }

    #[test]
    fn asr_examples() {
        let punct = PunctuationSet::default();
        let docs = vec![Document::sentences(
            "en",
            ["All right?", "so we go", "?!", "Ok ,  then."],
        )];
        let (out, warnings) = asr_corrupt_eval(&docs, &punct);
        let texts: Vec<&str> = out[0].units.iter().map(|u| u.text.as_str()).collect();
        assert_eq!(texts, ["all right", "so we go", "ok then"]);
        assert_eq!(
            warnings,
            vec![EvalWarning::DroppedUnit {
                document: 0,
                unit: 2
            }]
        );
        let (again, _) = asr_corrupt_eval(&out, &punct);
        assert_eq!(again, out);
    }

    proptest! {
        #[test]
        fn swapping_exchanges_precision_and_recall(
            a in proptest::collection::btree_set(0usize..30, 0..10),
            b in proptest::collection::btree_set(0usize..30, 0..10),
        ) {
            let x = char_f1(&a, &b);
            let y = char_f1(&b, &a);
            prop_assert_eq!(x.precision, y.recall);
            prop_assert_eq!(x.recall, y.precision);
            prop_assert!((x.f1 - y.f1).abs() < 1e-15);
            prop_assert_eq!(x.f1 == 1.0, a == b);
        }
    }
}
