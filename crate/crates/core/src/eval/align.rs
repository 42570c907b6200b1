//! Global alignment with affine gaps (Gotoh), used to carry boundaries from
//! a segmenter that rewrites its input back onto the reference text.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentParams {
    pub gap_open: f64,
    pub gap_extend: f64,
    pub match_score: f64,
    pub mismatch: f64,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        AlignmentParams {
            gap_open: -0.5,
            gap_extend: -0.5,
            match_score: 1.0,
            mismatch: -0.5,
        }
    }
}

impl AlignmentParams {
    pub fn validate(&self) -> Result<()> {
        if self.match_score <= self.mismatch {
            return Err(Error::Config(
                "match score must exceed the mismatch score".into(),
            ));
        }
        Ok(())
    }

    fn pair(&self, x: char, y: char) -> f64 {
        if x == y {
            self.match_score
        } else {
            self.mismatch
        }
    }
}

/// One alignment column: a char index of `a`, of `b`, or both.
pub type Column = (Option<usize>, Option<usize>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub columns: Vec<Column>,
    pub score: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum State {
    Diag,
    /// `b` char against a gap in `a`.
    GapA,
    /// `a` char against a gap in `b`.
    GapB,
}

/// Picks the best of three candidates, preferring earlier ones on ties.
fn best(c: [(f64, State); 3]) -> (f64, State) {
    let mut out = c[0];
    for &x in &c[1..] {
        if x.0 > out.0 {
            out = x;
        }
    }
    out
}

/// Optimal global alignment of `a` and `b` over chars. Ties prefer a
/// diagonal column, then a gap in `a`, then a gap in `b`.
pub fn nw_align(a: &str, b: &str, params: &AlignmentParams) -> Alignment {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (n, m) = (a.len(), b.len());
    let ninf = f64::NEG_INFINITY;
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    let size = (n + 1) * (m + 1);
    let mut d = vec![ninf; size];
    let mut ga = vec![ninf; size];
    let mut gb = vec![ninf; size];
    d[0] = 0.0;
    for i in 0..=n {
        for j in 0..=m {
            if i > 0 && j > 0 {
                let k = idx(i - 1, j - 1);
                d[idx(i, j)] = params.pair(a[i - 1], b[j - 1]) + d[k].max(ga[k]).max(gb[k]);
            }
            if j > 0 {
                let k = idx(i, j - 1);
                ga[idx(i, j)] = (d[k] + params.gap_open)
                    .max(ga[k] + params.gap_extend)
                    .max(gb[k] + params.gap_open);
            }
            if i > 0 {
                let k = idx(i - 1, j);
                gb[idx(i, j)] = (d[k] + params.gap_open)
                    .max(gb[k] + params.gap_extend)
                    .max(ga[k] + params.gap_open);
            }
        }
    }
    if n == 0 && m == 0 {
        return Alignment {
            columns: Vec::new(),
            score: 0.0,
        };
    }
    let end = idx(n, m);
    let (score, mut state) = best([
        (d[end], State::Diag),
        (ga[end], State::GapA),
        (gb[end], State::GapB),
    ]);

    let mut columns = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match state {
            State::Diag => {
                columns.push((Some(i - 1), Some(j - 1)));
                i -= 1;
                j -= 1;
                if i == 0 && j == 0 {
                    break;
                }
                let k = idx(i, j);
                state = best([
                    (d[k], State::Diag),
                    (ga[k], State::GapA),
                    (gb[k], State::GapB),
                ])
                .1;
            }
            State::GapA => {
                columns.push((None, Some(j - 1)));
                j -= 1;
                let k = idx(i, j);
                state = best([
                    (d[k] + params.gap_open, State::Diag),
                    (ga[k] + params.gap_extend, State::GapA),
                    (gb[k] + params.gap_open, State::GapB),
                ])
                .1;
            }
            State::GapB => {
                columns.push((Some(i - 1), None));
                i -= 1;
                let k = idx(i, j);
                state = best([
                    (d[k] + params.gap_open, State::Diag),
                    (ga[k] + params.gap_open, State::GapA),
                    (gb[k] + params.gap_extend, State::GapB),
                ])
                .1;
            }
        }
    }
    columns.reverse();
    Alignment { columns, score }
}

/// Scores an explicit column sequence under `params`.
pub fn score_columns(a: &str, b: &str, columns: &[Column], params: &AlignmentParams) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut score = 0.0;
    let mut prev: Option<(bool, bool)> = None;
    for &col in columns {
        let kind = (col.0.is_some(), col.1.is_some());
        score += match col {
            (Some(i), Some(j)) => params.pair(a[i], b[j]),
            _ if prev == Some(kind) => params.gap_extend,
            _ => params.gap_open,
        };
        prev = Some(kind);
    }
    score
}

/// Maps boundaries predicted on `output` onto char indices of `reference`.
/// A boundary on a char aligned to a gap maps to the nearest preceding
/// aligned reference char. Returns the empty set when the alignment score
/// falls below `floor * len(reference) * match`.
pub fn project_boundaries(
    output: &str,
    output_boundaries: &BTreeSet<usize>,
    reference: &str,
    params: &AlignmentParams,
    floor: f64,
) -> BTreeSet<usize> {
    try_project_boundaries(output, output_boundaries, reference, params, floor).unwrap_or_default()
}

/// Like [`project_boundaries`] but returns `None` when the alignment is
/// rejected by the score floor.
pub fn try_project_boundaries(
    output: &str,
    output_boundaries: &BTreeSet<usize>,
    reference: &str,
    params: &AlignmentParams,
    floor: f64,
) -> Option<BTreeSet<usize>> {
    let aln = nw_align(output, reference, params);
    let ref_len = reference.chars().count();
    if ref_len == 0 || aln.score < floor * ref_len as f64 * params.match_score {
        return None;
    }
    let mut to_ref = vec![None; output.chars().count()];
    let mut last_ref = None;
    for &(o, r) in &aln.columns {
        if r.is_some() {
            last_ref = r;
        }
        if let Some(o) = o {
            to_ref[o] = last_ref;
        }
    }
    Some(
        output_boundaries
            .iter()
            .filter_map(|&b| to_ref.get(b).copied().flatten())
            .collect(),
    )
}

/// Default score floor as a fraction of a perfect match.
pub const DEFAULT_SCORE_FLOOR: f64 = 0.25;
