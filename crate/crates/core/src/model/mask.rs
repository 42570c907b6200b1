//! Limited-lookahead attention masks: position `i` may attend to every past
//! position and to at most `per_layer` future positions.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    /// Exclusive upper column bound per row; allowed columns are `0..limit[i]`.
    limits: Vec<usize>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        j < self.limits[i]
    }

    /// Number of leading columns row `i` may attend to.
    #[inline]
    pub fn row_limit(&self, i: usize) -> usize {
        self.limits[i]
    }

    pub fn to_matrix(&self) -> Vec<Vec<bool>> {
        (0..self.len)
            .map(|i| (0..self.len).map(|j| self.allowed(i, j)).collect())
            .collect()
    }
}

/// `a[i][j] = 0` exactly when `j > i + per_layer`; `None` means unlimited.
pub fn build_lookahead_mask(seq_len: usize, per_layer: Option<usize>) -> AttentionMask {
    let limits = (0..seq_len)
        .map(|i| match per_layer {
            Some(n) => (i + n + 1).min(seq_len),
            None => seq_len,
        })
        .collect();
    AttentionMask {
        len: seq_len,
        limits,
    }
}

/// Splits a total lookahead evenly across `layers`, rounding down.
pub fn per_layer_lookahead(total: usize, layers: usize) -> usize {
    total / layers.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_formula() {
        let m = build_lookahead_mask(5, Some(2));
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.allowed(i, j), j <= (i + 2).min(4), "({i},{j})");
            }
        }
    }

    #[test]
    fn zero_lookahead_sees_past_and_self() {
        let m = build_lookahead_mask(4, Some(0));
        let expect = [
            [true, false, false, false],
            [true, true, false, false],
            [true, true, true, false],
            [true, true, true, true],
        ];
        let got = m.to_matrix();
        for i in 0..4 {
            assert_eq!(got[i], expect[i]);
        }
    }

    #[test]
    fn unlimited_is_all_ones() {
        let m = build_lookahead_mask(6, None);
        assert!(m.to_matrix().iter().flatten().all(|&b| b));
    }

    #[test]
    fn past_never_masked() {
        for n in [0, 1, 3, 10] {
            let m = build_lookahead_mask(12, Some(n));
            for i in 0..12 {
                for j in 0..=i {
                    assert!(m.allowed(i, j));
                }
            }
        }
    }

    #[test]
    fn lookahead_split() {
        assert_eq!(per_layer_lookahead(48, 3), 16);
        assert_eq!(per_layer_lookahead(48, 12), 4);
        assert_eq!(per_layer_lookahead(8, 3), 2);
    }
}
