//! Sparse weight representation: <index, value> pairs grouped by row,
//! magnitude pruning from dense matrices, uniform-length zero padding, and
//! lossless reconstruction back to dense form.

use serde::{Deserialize, Serialize};

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};

/// One stored weight: the column it came from and its value. Padding pairs
/// use index 0 and value +0.0; they multiply whatever activation sits at
/// column 0 by zero, so they are numerically inert yet cost a real load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexValuePair {
    pub index: u32,
    pub value: f32,
}

impl IndexValuePair {
    pub fn new(index: u32, value: f32) -> Self {
        IndexValuePair { index, value }
    }

    pub fn padding() -> Self {
        IndexValuePair { index: 0, value: 0.0 }
    }

    /// Padding is exactly +0.0; a stored -0.0 is a real (preserved) weight.
    pub fn is_padding(self) -> bool {
        self.value.to_bits() == 0
    }
}

/// How a dense matrix is thinned before conversion to pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneStrategy {
    /// Keep the ceil(density * rows * cols) largest-magnitude entries of the
    /// whole matrix. Rows end up ragged and need padding afterwards.
    Naive,
    /// Keep the ceil(density * cols) largest-magnitude entries of every row,
    /// so all rows have identical length and padding adds nothing.
    RowBalanced,
}

impl std::str::FromStr for PruneStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(PruneStrategy::Naive),
            "row-balanced" | "balanced" => Ok(PruneStrategy::RowBalanced),
            other => Err(Error::parameter(format!(
                "unknown prune strategy '{other}' (expected naive|row-balanced)"
            ))),
        }
    }
}

/// How the pairs within each row are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "vector_width")]
pub enum LayoutKind {
    /// Ascending column order, exactly as pruning produced it.
    AsPruned,
    /// Greedy bank-aware order; records the vector width it was tuned for.
    BankAware(u8),
}

impl std::fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayoutKind::AsPruned => f.write_str("as-pruned"),
            LayoutKind::BankAware(w) => write!(f, "bank-aware(w={w})"),
        }
    }
}

/// A pruned weight matrix stored as per-row pair lists. Rows may be ragged
/// until `pad_rows` is called; the executor and the binary format require
/// uniform rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLayer {
    rows: usize,
    cols: usize,
    layout: LayoutKind,
    pairs: Vec<Vec<IndexValuePair>>,
}

impl SparseLayer {
    /// Builds a layer from per-row pair lists. Every index must be inside
    /// the column range, and no row may assign two non-padding values to the
    /// same column (repeated padding at index 0 is fine).
    pub fn from_rows(cols: usize, pairs: Vec<Vec<IndexValuePair>>) -> Result<Self> {
        if cols == 0 || pairs.is_empty() {
            return Err(Error::shape(format!(
                "sparse layer needs at least 1 row and 1 column, got {}x{cols}",
                pairs.len()
            )));
        }
        let mut seen = vec![false; cols];
        for (r, row) in pairs.iter().enumerate() {
            seen.iter_mut().for_each(|s| *s = false);
            for p in row {
                if p.index as usize >= cols {
                    return Err(Error::corrupt(format!(
                        "row {r}: column index {} out of range (cols = {cols})",
                        p.index
                    )));
                }
                if !p.is_padding() {
                    let idx = p.index as usize;
                    if seen[idx] {
                        return Err(Error::corrupt(format!(
                            "row {r}: column {idx} assigned twice"
                        )));
                    }
                    seen[idx] = true;
                }
            }
        }
        Ok(SparseLayer {
            rows: pairs.len(),
            cols,
            layout: LayoutKind::AsPruned,
            pairs,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn layout(&self) -> LayoutKind {
        self.layout
    }

    pub(crate) fn set_layout(&mut self, layout: LayoutKind) {
        self.layout = layout;
    }

    pub fn row_pairs(&self, r: usize) -> &[IndexValuePair] {
        &self.pairs[r]
    }

    /// Uniform row length, or None while rows are still ragged.
    pub fn pairs_per_row(&self) -> Option<usize> {
        let n = self.pairs[0].len();
        self.pairs.iter().all(|row| row.len() == n).then_some(n)
    }

    pub fn max_row_len(&self) -> usize {
        self.pairs.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// Pairs that carry a real weight (anything whose bits are not +0.0).
    pub fn stored_weights(&self) -> usize {
        self.pairs
            .iter()
            .flat_map(|row| row.iter())
            .filter(|p| !p.is_padding())
            .count()
    }

    /// Appends (0, +0.0) pairs until every row has `n` entries.
    pub fn pad_to(&mut self, n: usize) -> Result<()> {
        if n < self.max_row_len() {
            return Err(Error::parameter(format!(
                "cannot pad rows to {n} pairs, longest row already has {}",
                self.max_row_len()
            )));
        }
        for row in &mut self.pairs {
            row.resize(n, IndexValuePair::padding());
        }
        Ok(())
    }

    /// Pads every row to the longest row's length.
    pub fn pad_rows(&mut self) {
        let n = self.max_row_len();
        self.pad_to(n).expect("padding to max row length cannot fail");
    }

    /// Expands back to a dense matrix. Padding pairs are skipped, so a
    /// stored -0.0 survives bit-exactly while padding never overwrites
    /// column 0.
    pub fn reconstruct_dense(&self) -> DenseMatrix {
        let mut data = vec![0.0f32; self.rows * self.cols];
        for (r, row) in self.pairs.iter().enumerate() {
            for p in row {
                if !p.is_padding() {
                    data[r * self.cols + p.index as usize] = p.value;
                }
            }
        }
        DenseMatrix::new(self.rows, self.cols, data)
            .expect("reconstruction shape is valid by construction")
    }
}

/// Number of entries magnitude pruning keeps out of `count` at `density`.
/// Shared with the resource model so register sizing and actual pruning
/// can never disagree on the rounding.
pub(crate) fn keep_count(density: f64, count: usize) -> usize {
    (density * count as f64).ceil() as usize
}

/// Prunes a dense matrix down to `density` (a fraction in (0, 1]) by keeping
/// the largest-magnitude entries. Ties break toward the smaller (row, col).
/// Kept pairs are listed in ascending column order within each row.
pub fn prune_dense(
    m: &DenseMatrix,
    strategy: PruneStrategy,
    density: f64,
) -> Result<SparseLayer> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::parameter(format!(
            "density must be in (0, 1], got {density}"
        )));
    }
    let (rows, cols) = (m.rows(), m.cols());
    let mut kept: Vec<Vec<IndexValuePair>> = vec![Vec::new(); rows];
    match strategy {
        PruneStrategy::Naive => {
            let mut order: Vec<(usize, usize)> = (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (r, c)))
                .collect();
            // Descending magnitude, then ascending (row, col) among ties.
            // total_cmp keeps NaN entries orderable (they sort largest).
            order.sort_by(|&(r1, c1), &(r2, c2)| {
                m.get(r2, c2)
                    .abs()
                    .total_cmp(&m.get(r1, c1).abs())
                    .then(r1.cmp(&r2))
                    .then(c1.cmp(&c2))
            });
            order.truncate(keep_count(density, rows * cols));
            for (r, c) in order {
                kept[r].push(IndexValuePair::new(c as u32, m.get(r, c)));
            }
        }
        PruneStrategy::RowBalanced => {
            let per_row = keep_count(density, cols);
            for (r, row_kept) in kept.iter_mut().enumerate() {
                let mut order: Vec<usize> = (0..cols).collect();
                order.sort_by(|&c1, &c2| {
                    m.get(r, c2)
                        .abs()
                        .total_cmp(&m.get(r, c1).abs())
                        .then(c1.cmp(&c2))
                });
                order.truncate(per_row);
                for c in order {
                    row_kept.push(IndexValuePair::new(c as u32, m.get(r, c)));
                }
            }
        }
    }
    for row in &mut kept {
        row.sort_by_key(|p| p.index);
    }
    SparseLayer::from_rows(cols, kept)
}
