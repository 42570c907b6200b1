//! Character-level and byte-pair subword tokenizers with per-token character
//! spans, plus the punctuation vocabulary used by corruption and the
//! auxiliary head.
//!
//! Text is first split into pieces: a run of alphanumerics (with at most one
//! directly preceding space attached), a run of punctuation/symbols, or a run
//! of other whitespace. Merges never cross piece boundaries, so a sentence
//! boundary placed after a word or punctuation run is always token-final.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Char,
    Bpe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    unk_id: u32,
}

/// Token ids plus the half-open character span each token covers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
    pub text: String,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the token whose span contains character `ch`.
    pub fn token_at_char(&self, ch: usize) -> Option<usize> {
        let i = self.spans.partition_point(|&(_, end)| end <= ch);
        (i < self.spans.len() && self.spans[i].0 <= ch).then_some(i)
    }

    /// Reconstructs the text from the token spans.
    pub fn decode(&self) -> String {
        let chars: Vec<char> = self.text.chars().collect();
        self.spans
            .iter()
            .flat_map(|&(s, e)| chars[s..e].iter())
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    mode: TokenizerMode,
    vocab: BTreeMap<String, u32>,
    merges: Vec<(String, String)>,
    unk_id: u32,
}

pub fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Word,
    Space,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphanumeric()
        || matches!(
            get_general_category(c),
            GeneralCategory::NonspacingMark
                | GeneralCategory::SpacingMark
                | GeneralCategory::EnclosingMark
        )
    {
        CharClass::Word
    } else {
        CharClass::Other
    }
}

/// Splits `chars` into pre-tokenization pieces, returned as char ranges.
fn pieces(chars: &[char]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = i;
        match class_of(chars[i]) {
            CharClass::Word => {
                while i < chars.len() && class_of(chars[i]) == CharClass::Word {
                    i += 1;
                }
            }
            CharClass::Other => {
                while i < chars.len() && class_of(chars[i]) == CharClass::Other {
                    i += 1;
                }
            }
            CharClass::Space => {
                while i < chars.len() && class_of(chars[i]) == CharClass::Space {
                    i += 1;
                }
                let glue =
                    chars[i - 1] == ' ' && i < chars.len() && class_of(chars[i]) == CharClass::Word;
                if glue {
                    if i - 1 > start {
                        out.push((start, i - 1));
                    }
                    let word_start = i - 1;
                    while i < chars.len() && class_of(chars[i]) == CharClass::Word {
                        i += 1;
                    }
                    out.push((word_start, i));
                    continue;
                }
            }
        }
        out.push((start, i));
    }
    out
}

impl Tokenizer {
    fn from_parts(
        mode: TokenizerMode,
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
        unk_id: u32,
    ) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Tokenizer {
            mode,
            tokens,
            index,
            merges,
            merge_rank,
            unk_id,
        }
    }

    /// Character tokenizer whose vocabulary is every distinct character of the corpus.
    pub fn char_level<S: AsRef<str>>(corpus: &[S]) -> Self {
        let chars: BTreeSet<char> = corpus.iter().flat_map(|s| s.as_ref().chars()).collect();
        let mut tokens = vec![UNK_TOKEN.to_string()];
        tokens.extend(chars.into_iter().map(String::from));
        Self::from_parts(TokenizerMode::Char, tokens, Vec::new(), 0)
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn char_id(&self, c: char) -> u32 {
        let mut buf = [0u8; 4];
        self.index
            .get(&*c.encode_utf8(&mut buf))
            .copied()
            .unwrap_or(self.unk_id)
    }

    pub fn encode(&self, text: &str) -> TokenizedSequence {
        let chars: Vec<char> = text.chars().collect();
        let mut ids = Vec::with_capacity(chars.len());
        let mut spans = Vec::with_capacity(chars.len());
        match self.mode {
            TokenizerMode::Char => {
                for (i, &c) in chars.iter().enumerate() {
                    ids.push(self.char_id(c));
                    spans.push((i, i + 1));
                }
            }
            TokenizerMode::Bpe => {
                for (start, end) in pieces(&chars) {
                    self.encode_piece(&chars[start..end], start, &mut ids, &mut spans);
                }
            }
        }
        TokenizedSequence {
            ids,
            spans,
            text: text.to_string(),
        }
    }

    fn encode_piece(
        &self,
        piece: &[char],
        offset: usize,
        ids: &mut Vec<u32>,
        spans: &mut Vec<(usize, usize)>,
    ) {
        // (symbol text, char length)
        let mut symbols: Vec<(String, usize)> = piece.iter().map(|&c| (c.to_string(), 1)).collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_rank
                        .get(&(w[0].0.clone(), w[1].0.clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i].0 == left && &symbols[i + 1].0 == right {
                    merged.push((format!("{left}{right}"), symbols[i].1 + symbols[i + 1].1));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        let mut pos = offset;
        for (sym, len) in symbols {
            ids.push(self.index.get(&sym).copied().unwrap_or(self.unk_id));
            spans.push((pos, pos + len));
            pos += len;
        }
    }

    /// Renders ids back to text; unknown ids and the unk token render as U+FFFD.
    pub fn decode_ids(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| match self.token(id) {
                Some(t) if id != self.unk_id => t,
                _ => "\u{fffd}",
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenizerFile {
            mode: self.mode,
            vocab: self
                .tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i as u32))
                .collect(),
            merges: self.merges.clone(),
            unk_id: self.unk_id,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(json)?;
        let n = file.vocab.len();
        let mut tokens = vec![None; n];
        for (tok, id) in file.vocab {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Input(format!("tokenizer id {id} is not dense in 0..{n}")))?;
            if slot.replace(tok).is_some() {
                return Err(Error::Input(format!("tokenizer id {id} used twice")));
            }
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::Input("tokenizer ids are not dense".into())))
            .collect::<Result<_>>()?;
        if file.unk_id as usize >= n {
            return Err(Error::Input("unk_id outside vocabulary".into()));
        }
        Ok(Self::from_parts(
            file.mode,
            tokens,
            file.merges,
            file.unk_id,
        ))
    }
}

/// Trains a byte-pair tokenizer over characters. `vocab_size` counts the
/// character and merged tokens, not the unknown token.
///
/// Pairs are counted with multiplicity inside each piece; the most frequent
/// pair is merged, ties going to the lexicographically smallest pair.
/// Training stops at `vocab_size` or once no pair occurs at least twice.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Tokenizer> {
    let base = Tokenizer::char_level(corpus);
    let n_chars = base.vocab_size() - 1;
    if n_chars == 0 {
        return Err(Error::Input(
            "cannot train a tokenizer on an empty corpus".into(),
        ));
    }
    if vocab_size < n_chars {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is smaller than the {n_chars} distinct characters in the corpus"
        )));
    }

    let mut freq: HashMap<Vec<char>, u64> = HashMap::new();
    for text in corpus {
        let chars: Vec<char> = text.as_ref().chars().collect();
        for (s, e) in pieces(&chars) {
            *freq.entry(chars[s..e].to_vec()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = freq
        .into_iter()
        .map(|(w, f)| (w.iter().map(|c| c.to_string()).collect(), f))
        .collect();
    words.sort();

    let mut tokens = base.tokens.clone();
    let mut known: HashMap<String, u32> = base.index.clone();
    let mut merges = Vec::new();
    while tokens.len() - 1 < vocab_size {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += f;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), _)) = best else { break };
        let (left, right) = (l.to_string(), r.to_string());
        let joined = format!("{left}{right}");
        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == left && syms[i + 1] == right {
                    syms[i] = joined.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        if !known.contains_key(&joined) {
            known.insert(joined.clone(), tokens.len() as u32);
            tokens.push(joined);
        }
        merges.push((left, right));
    }
    Ok(Tokenizer::from_parts(TokenizerMode::Bpe, tokens, merges, 0))
}

/// Punctuation characters and the tokens made only of them. Token ids are
/// kept sorted; the auxiliary class of a token is its rank plus one, with
/// class 0 meaning "no punctuation".
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PunctuationSet {
    pub chars: BTreeSet<char>,
    pub token_ids: BTreeSet<u32>,
}

impl PunctuationSet {
    pub fn from_chars(tok: &Tokenizer, chars: BTreeSet<char>) -> Self {
        let token_ids = (0..tok.vocab_size() as u32)
            .filter(|&id| id != tok.unk_id())
            .filter(|&id| {
                let t = tok.token(id).unwrap_or_default();
                !t.is_empty() && t.chars().all(|c| chars.contains(&c))
            })
            .collect();
        PunctuationSet { chars, token_ids }
    }

    pub fn is_punct_token(&self, id: u32) -> bool {
        self.token_ids.contains(&id)
    }

    pub fn aux_vocab(&self) -> usize {
        self.token_ids.len() + 1
    }

    pub fn aux_class(&self, id: u32) -> usize {
        self.token_ids
            .iter()
            .position(|&t| t == id)
            .map_or(0, |p| p + 1)
    }

    pub fn class_token(&self, class: usize) -> Option<u32> {
        class
            .checked_sub(1)
            .and_then(|i| self.token_ids.iter().nth(i).copied())
    }
}

/// Union over corpora of each corpus's `top_k` most frequent punctuation
/// characters, with the matching punctuation-only tokens of `tok`.
pub fn punctuation_set<S: AsRef<str>>(
    tok: &Tokenizer,
    corpora: &[S],
    top_k: usize,
) -> Result<PunctuationSet> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let mut chars = BTreeSet::new();
    for corpus in corpora {
        let mut counts: HashMap<char, usize> = HashMap::new();
        for c in corpus.as_ref().chars().filter(|&c| is_punctuation(c)) {
            *counts.entry(c).or_default() += 1;
        }
        let mut ranked: Vec<(char, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        chars.extend(ranked.into_iter().take(top_k).map(|(c, _)| c));
    }
    Ok(PunctuationSet::from_chars(tok, chars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strs(tok: &Tokenizer, seq: &TokenizedSequence) -> Vec<String> {
        seq.ids
            .iter()
            .map(|&i| tok.token(i).unwrap().to_string())
            .collect()
    }

    /// Brute-force pair counter, independent of the trainer's bookkeeping.
    fn most_frequent_pair(corpus: &[&str]) -> (String, String) {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for text in corpus {
            let chars: Vec<char> = text.chars().collect();
            for (s, e) in pieces(&chars) {
                for w in chars[s..e].windows(2) {
                    *counts
                        .entry((w[0].to_string(), w[1].to_string()))
                        .or_default() += 1;
                }
            }
        }
        let max = *counts.values().max().unwrap();
        counts.into_iter().find(|(_, c)| *c == max).unwrap().0
    }

    #[test]
    fn first_merge_matches_pair_count_oracle() {
        let corpus = ["aaab", "aaab"];
        let tok = train_bpe(&corpus, 3).unwrap();
        assert_eq!(tok.merges().len(), 1);
        assert_eq!(tok.merges()[0], most_frequent_pair(&corpus));
        assert_eq!(tok.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn vocab_equal_to_chars_is_char_mode() {
        let corpus = ["hello world", "held"];
        let tok = train_bpe(&corpus, 8).unwrap();
        assert!(tok.merges().is_empty());
        let char_tok = Tokenizer::char_level(&corpus);
        let text = "hello held";
        assert_eq!(tok.encode(text).ids, char_tok.encode(text).ids);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(train_bpe(&[""], 10).is_err());
        assert!(train_bpe::<&str>(&[], 10).is_err());
    }

    #[test]
    fn vocab_below_char_count_is_an_error() {
        assert!(matches!(train_bpe(&["abc"], 2), Err(Error::Config(_))));
    }

    #[test]
    fn greedy_merge_leaves_trailing_char() {
        let tok = train_bpe(&["aaab", "aaab"], 3).unwrap();
        let seq = tok.encode("aaa");
        assert_eq!(strs(&tok, &seq), ["aa", "a"]);
        assert_eq!(seq.spans, [(0, 2), (2, 3)]);
    }

    #[test]
    fn char_mode_ids_and_spans() {
        let tok = Tokenizer::char_level(&["ab"]);
        let seq = tok.encode("ab");
        assert_eq!(seq.ids, [tok.id("a").unwrap(), tok.id("b").unwrap()]);
        assert_eq!(seq.spans, [(0, 1), (1, 2)]);
        assert!(tok.encode("").is_empty());
    }

    #[test]
    fn unknown_characters_fall_back_per_char() {
        let tok = train_bpe(&["ab ab ab"], 6).unwrap();
        let seq = tok.encode("aé€b");
        assert_eq!(seq.decode(), "aé€b");
        assert!(seq.ids.contains(&tok.unk_id()));
        assert_eq!(seq.len(), 4);
    }

    #[test]
    fn spaces_attach_to_following_word() {
        let tok = train_bpe(&["the cat. the cat. the cat."], 40).unwrap();
        let seq = tok.encode("the cat. the cat.");
        let toks = strs(&tok, &seq);
        assert!(toks.contains(&" cat".to_string()), "{toks:?}");
        assert!(toks.contains(&".".to_string()));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let tok = train_bpe(&["lorem ipsum dolor sit amet, lorem ipsum!"], 40).unwrap();
        let json = tok.to_json().unwrap();
        let back = Tokenizer::from_json(&json).unwrap();
        assert_eq!(back, tok);
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn punctuation_examples() {
        let tok = Tokenizer::char_level(&["a. b. c!", "x?"]);
        let p = punctuation_set(&tok, &["a. b. c!"], 30).unwrap();
        assert_eq!(p.chars, BTreeSet::from(['.', '!']));
        let p = punctuation_set(&tok, &["a.", "b?"], 30).unwrap();
        assert_eq!(p.chars, BTreeSet::from(['.', '?']));
        let p = punctuation_set(&tok, &["abc"], 30).unwrap();
        assert!(p.chars.is_empty() && p.token_ids.is_empty());
        assert!(punctuation_set(&tok, &["abc"], 0).is_err());
    }

    #[test]
    fn punctuation_top_k_is_per_corpus() {
        let tok = Tokenizer::char_level(&[".,!?"]);
        let p = punctuation_set(&tok, &["...,,!", "???!"], 1).unwrap();
        assert_eq!(p.chars, BTreeSet::from(['.', '?']));
    }

    #[test]
    fn aux_classes_are_dense() {
        let tok = train_bpe(&["hi!! yo. ok?"], 30).unwrap();
        let p = punctuation_set(&tok, &["hi!! yo. ok?"], 30).unwrap();
        for (rank, &id) in p.token_ids.iter().enumerate() {
            assert_eq!(p.aux_class(id), rank + 1);
            assert_eq!(p.class_token(rank + 1), Some(id));
        }
        assert_eq!(p.aux_class(tok.id("h").unwrap()), 0);
        assert_eq!(p.class_token(0), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_and_span_coverage(text in "\\PC{0,40}") {
            let tok = train_bpe(&["Hello there. How are you? I'm fine, thanks!"], 60).unwrap();
            let seq = tok.encode(&text);
            prop_assert_eq!(seq.decode(), text.clone());
            prop_assert_eq!(seq.ids.len(), seq.spans.len());
            let mut pos = 0;
            for &(s, e) in &seq.spans {
                prop_assert_eq!(s, pos);
                prop_assert!(e > s);
                pos = e;
            }
            prop_assert_eq!(pos, text.chars().count());
        }

        #[test]
        fn punct_tokens_have_no_letters_or_digits(corpus in "[a-z .,!?;:()\"-]{1,80}") {
            let tok = train_bpe(&[corpus.as_str()], 60).unwrap();
            let p = punctuation_set(&tok, &[corpus.as_str()], 30).unwrap();
            for &id in &p.token_ids {
                let t = tok.token(id).unwrap();
                prop_assert!(t.chars().all(|c| !c.is_alphanumeric()));
            }
        }
    }
}
