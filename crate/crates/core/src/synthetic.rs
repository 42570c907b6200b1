//! A synthetic language for experiments and demos. Sentences are runs of
//! random pseudo-words; dedicated opener and closer words mark sentence
//! starts and ends, so boundaries stay recoverable once punctuation and
//! casing are gone.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Unit};
use crate::rng;

const CONSONANTS: &[char] = &[
    'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub openers: Vec<String>,
    pub middles: Vec<String>,
    pub closers: Vec<String>,
}

impl Lexicon {
    /// `size` distinct two-syllable words, a tenth of them openers and
    /// another tenth closers.
    pub fn generate(size: usize, seed: u64) -> Self {
        let mut all: Vec<String> = Vec::new();
        for &c1 in CONSONANTS {
            for &v1 in VOWELS {
                for &c2 in CONSONANTS {
                    for &v2 in VOWELS {
                        all.push([c1, v1, c2, v2].iter().collect());
                    }
                }
            }
        }
        assert!(size >= 3 && size <= all.len(), "lexicon size out of range");
        let mut rng = rng::rng(seed);
        all.shuffle(&mut rng);
        all.truncate(size);
        let k = (size / 10).max(1);
        let closers = all.split_off(size - k);
        let openers = all.split_off(size - 2 * k);
        Lexicon {
            openers,
            middles: all,
            closers,
        }
    }

    pub fn len(&self) -> usize {
        self.openers.len() + self.middles.len() + self.closers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceStyle {
    pub min_words: usize,
    pub max_words: usize,
    pub terminator: char,
    /// Probability of a mid-sentence mark after some inner word.
    pub p_inner_mark: f64,
    pub inner_mark: char,
    /// Start with an opener and end with a closer word.
    pub structured: bool,
    pub capitalize: bool,
}

impl Default for SentenceStyle {
    fn default() -> Self {
        SentenceStyle {
            min_words: 3,
            max_words: 8,
            terminator: '.',
            p_inner_mark: 0.2,
            inner_mark: ';',
            structured: true,
            capitalize: true,
        }
    }
}

impl SentenceStyle {
    /// Unstructured sentences ending in `;` with no inner marks.
    pub fn shifted() -> Self {
        SentenceStyle {
            terminator: ';',
            p_inner_mark: 0.0,
            structured: false,
            ..Self::default()
        }
    }
}

pub fn sentence(lex: &Lexicon, style: &SentenceStyle, rng: &mut rng::Rng) -> String {
    let n = rng.random_range(style.min_words.max(2)..=style.max_words.max(2));
    let mut words: Vec<String> = Vec::with_capacity(n);
    for i in 0..n {
        let pool = match (style.structured, i) {
            (true, 0) => &lex.openers,
            (true, i) if i == n - 1 => &lex.closers,
            _ => &lex.middles,
        };
        words.push(pool.choose(rng).expect("non-empty word pool").clone());
    }
    if n > 2 && rng.random_bool(style.p_inner_mark) {
        let at = rng.random_range(1..n - 1);
        words[at].push(style.inner_mark);
    }
    let mut s = words.join(" ");
    if style.capitalize {
        let first = s.remove(0);
        s.insert_str(0, &first.to_uppercase().to_string());
    }
    s.push(style.terminator);
    s
}

pub fn sentences(lex: &Lexicon, style: &SentenceStyle, n: usize, seed: u64) -> Vec<String> {
    let mut rng = rng::rng(seed);
    (0..n).map(|_| sentence(lex, style, &mut rng)).collect()
}

/// Documents of `per_doc` sentence units each.
pub fn sentence_documents(language: &str, sents: &[String], per_doc: usize) -> Vec<Document> {
    sents
        .chunks(per_doc.max(1))
        .map(|c| Document::sentences(language, c.iter().cloned()))
        .collect()
}

/// Documents whose units are paragraphs of 1 to `max_sentences`
/// consecutive sentences.
pub fn paragraph_documents(
    language: &str,
    sents: &[String],
    max_sentences: usize,
    per_doc: usize,
    seed: u64,
) -> Vec<Document> {
    let mut rng = rng::rng(seed);
    let mut paragraphs = Vec::new();
    let mut i = 0;
    while i < sents.len() {
        let k = rng
            .random_range(1..=max_sentences.max(1))
            .min(sents.len() - i);
        paragraphs.push(Unit::paragraph(sents[i..i + k].join(" ")));
        i += k;
    }
    paragraphs
        .chunks(per_doc.max(1))
        .map(|c| Document {
            language: language.to_string(),
            units: c.to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_is_disjoint() {
        let lex = Lexicon::generate(200, 1);
        assert_eq!(lex.len(), 200);
        assert_eq!((lex.openers.len(), lex.closers.len()), (20, 20));
        let mut all: Vec<&String> = lex
            .openers
            .iter()
            .chain(&lex.middles)
            .chain(&lex.closers)
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 200);
    }

    #[test]
    fn sentences_follow_style() {
        let lex = Lexicon::generate(200, 1);
        for s in sentences(&lex, &SentenceStyle::default(), 100, 2) {
            assert!(s.ends_with('.'));
            assert!(s.chars().next().unwrap().is_uppercase());
            let words: Vec<&str> = s.split(' ').collect();
            assert!((3..=8).contains(&words.len()));
            assert!(lex.openers.contains(&words[0].to_lowercase()));
            assert!(lex
                .closers
                .contains(&words.last().unwrap().trim_end_matches('.').to_string()));
        }
        for s in sentences(&lex, &SentenceStyle::shifted(), 50, 2) {
            assert!(s.ends_with(';') && s.matches(';').count() == 1);
        }
    }

    #[test]
    fn paragraphs_keep_every_sentence() {
        let lex = Lexicon::generate(50, 3);
        let sents = sentences(&lex, &SentenceStyle::default(), 31, 4);
        let docs = paragraph_documents("syn", &sents, 3, 4, 5);
        let joined: Vec<String> = docs
            .iter()
            .flat_map(|d| d.units.iter().map(|u| u.text.clone()))
            .collect();
        assert_eq!(joined.join(" "), sents.join(" "));
    }
}
