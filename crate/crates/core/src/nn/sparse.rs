use alloc::vec::Vec;

/// Compressed-row sparsity pattern. Edge-valued arrays (attention scores,
/// weights) are parallel to [`SparsePattern::indices`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsePattern {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl SparsePattern {
    /// Builds a pattern from per-row neighbor lists. Each list is sorted and
    /// deduplicated.
    pub fn from_rows(n_cols: usize, rows: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for r in rows {
            let mut r = r.clone();
            r.sort_unstable();
            r.dedup();
            debug_assert!(r.iter().all(|&c| c < n_cols));
            indices.extend_from_slice(&r);
            offsets.push(indices.len());
        }
        Self {
            n_rows: rows.len(),
            n_cols,
            offsets,
            indices,
        }
    }

    /// Square pattern holding only the diagonal.
    pub fn diagonal(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            offsets: (0..=n).collect(),
            indices: (0..n).collect(),
        }
    }

    /// Returns a copy of a square pattern with every diagonal entry present.
    pub fn with_self_loops(&self) -> Self {
        let rows: Vec<Vec<usize>> = (0..self.n_rows)
            .map(|i| {
                let mut r: Vec<usize> = self.row(i).to_vec();
                r.push(i);
                r
            })
            .collect();
        Self::from_rows(self.n_cols, &rows)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn row_range(&self, i: usize) -> core::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Position of `(i, j)` in the edge arrays, if present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row(i);
        r.binary_search(&j).ok().map(|k| self.offsets[i] + k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn self_loops_are_merged_in_order() {
        let p = SparsePattern::from_rows(3, &[vec![2], vec![], vec![0, 2]]);
        let q = p.with_self_loops();
        assert_eq!(q.row(0), &[0, 2]);
        assert_eq!(q.row(1), &[1]);
        assert_eq!(q.row(2), &[0, 2]);
        assert_eq!(q.position(2, 2), Some(4));
    }
}
