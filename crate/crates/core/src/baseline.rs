//! Rule-based splitter: a sentence ends at a terminator run (plus any
//! closing quotes or brackets) followed by whitespace and an uppercase
//! letter, or by the end of the text.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::infer::SegmentationResult;

pub const DEFAULT_TERMINATORS: [char; 3] = ['.', '!', '?'];

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '}' | '»' | '”' | '’')
}

/// Loads an abbreviation list: one entry per line, blank lines and lines
/// starting with `#` ignored.
pub fn load_abbreviations(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_abbreviations(&text))
}

pub fn parse_abbreviations(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

/// Boundaries sit on the last terminator or closer; whitespace that
/// follows a boundary stays with the preceding sentence. Abbreviations
/// match the word before the terminator with or without its final period.
pub fn rule_segment(
    text: &str,
    terminators: &BTreeSet<char>,
    abbreviations: &HashSet<String>,
) -> Result<SegmentationResult> {
    if terminators.is_empty() {
        return Err(Error::Config("at least one terminator is required".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut boundaries = Vec::new();
    let mut cuts = Vec::new();
    let mut i = 0;
    while i < n {
        if !terminators.contains(&chars[i]) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < n && terminators.contains(&chars[j + 1]) {
            j += 1;
        }
        while j + 1 < n && is_closer(chars[j + 1]) {
            j += 1;
        }
        let mut k = j + 1;
        while k < n && chars[k].is_whitespace() {
            k += 1;
        }
        let follows = k == n || (k > j + 1 && chars[k].is_uppercase());
        if follows && !is_abbreviation(&chars, i, j, abbreviations) {
            boundaries.push(j);
            if k < n {
                cuts.push(k);
            }
        }
        i = j + 1;
    }
    let mut sentences = Vec::new();
    let mut start = 0;
    for &c in &cuts {
        sentences.push(chars[start..c].iter().collect());
        start = c;
    }
    if start < n {
        sentences.push(chars[start..].iter().collect());
    }
    let mut char_probs = vec![0.0; n];
    for &b in &boundaries {
        char_probs[b] = 1.0;
    }
    Ok(SegmentationResult {
        char_probs,
        boundaries,
        sentences,
    })
}

fn is_abbreviation(
    chars: &[char],
    term_start: usize,
    term_end: usize,
    abbreviations: &HashSet<String>,
) -> bool {
    if abbreviations.is_empty() {
        return false;
    }
    let mut s = term_start;
    while s > 0 && !chars[s - 1].is_whitespace() {
        s -= 1;
    }
    let bare: String = chars[s..term_start].iter().collect();
    let with_dot: String = chars[s..=term_end].iter().collect();
    let first_dot: String = chars[s..=term_start].iter().collect();
    abbreviations.contains(&bare)
        || abbreviations.contains(&with_dot)
        || abbreviations.contains(&first_dot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn terms() -> BTreeSet<char> {
        DEFAULT_TERMINATORS.into_iter().collect()
    }

    fn split(text: &str, abbr: &[&str]) -> Vec<String> {
        let abbr = abbr.iter().map(|s| s.to_string()).collect();
        rule_segment(text, &terms(), &abbr).unwrap().sentences
    }

    #[test]
    fn examples() {
        assert_eq!(split("Hi. Bye.", &[]), ["Hi. ", "Bye."]);
        assert_eq!(split("Dr. Smith left.", &["Dr."]), ["Dr. Smith left."]);
        assert_eq!(split("Dr. Smith left.", &[]), ["Dr. ", "Smith left."]);
        assert_eq!(split("no terminators here", &[]), ["no terminators here"]);
        assert_eq!(
            split("He said \"Go!\" Then left?!  ", &[]),
            ["He said \"Go!\" ", "Then left?!  "]
        );
        assert_eq!(
            split("version 2.5 is out. ok", &[]),
            ["version 2.5 is out. ok"]
        );
    }

    #[test]
    fn boundaries_on_terminator_or_closer() {
        let r = rule_segment("A (b.) C.", &terms(), &HashSet::new()).unwrap();
        assert_eq!(r.boundaries, vec![5, 8]);
    }

    #[test]
    fn abbreviation_file_format() {
        let set = parse_abbreviations("# titles\nDr.\n\n  Mr.  \n");
        assert_eq!(set, ["Dr.".to_string(), "Mr.".to_string()].into());
    }

    #[test]
    fn empty_terminators_rejected() {
        assert!(rule_segment("a", &BTreeSet::new(), &HashSet::new()).is_err());
    }

    proptest! {
        #[test]
        fn lossless(text in "\\PC{0,60}") {
            let r = rule_segment(&text, &terms(), &HashSet::new()).unwrap();
            prop_assert_eq!(r.sentences.concat(), text);
        }

        #[test]
        fn stripped_text_is_one_segment(text in "[a-z ]{1,80}") {
            let r = rule_segment(&text, &terms(), &HashSet::new()).unwrap();
            prop_assert_eq!(r.sentences.len(), 1);
        }
    }
}
