//! Greedy bank-aware reordering of each row's pairs.
//!
//! Positions of a row are pre-colored: position p of row X is reserved for
//! bank (p - X) mod 32, so rows sharing a warp stagger their bank usage.
//! Each pair is placed at the next free position of its own bank's color
//! class; when that class is full the probe moves to the next bank. Only
//! the storage order changes; indices and values are untouched, so the
//! represented matrix is identical.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::schedule::SHM_BANKS;
use crate::sparse::{IndexValuePair, LayoutKind, SparseLayer};

/// Reorders one row's pairs by the greedy coloring. `row_id` is the row's
/// index in the matrix; it staggers the position classes so different rows
/// of one warp prefer different banks at the same position.
pub fn optimize_row(row: &[IndexValuePair], row_id: usize) -> Vec<IndexValuePair> {
    let n = row.len();
    if n <= 1 {
        return row.to_vec();
    }
    // next_free[b]: first unfilled position of bank b's class. Class b of
    // row X owns positions {(X + b) mod 32, +32, +64, ...}; classes
    // partition 0..n, so capacities sum to exactly n and every pair finds
    // a slot within one probe cycle over the banks.
    let mut next_free: [usize; SHM_BANKS] =
        std::array::from_fn(|b| (row_id + b) % SHM_BANKS);
    let mut out: Vec<Option<IndexValuePair>> = vec![None; n];
    for pair in row {
        let mut probe = pair.index as usize;
        let mut bank = probe % SHM_BANKS;
        let mut probes = 0;
        while next_free[bank] >= n {
            probe += 1;
            bank = probe % SHM_BANKS;
            probes += 1;
            assert!(
                probes <= SHM_BANKS,
                "coloring ran out of capacity; class accounting is broken"
            );
        }
        debug_assert!(out[next_free[bank]].is_none());
        out[next_free[bank]] = Some(*pair);
        next_free[bank] += SHM_BANKS;
    }
    out.into_iter()
        .map(|p| p.expect("all positions filled: capacities sum to row length"))
        .collect()
}

/// Applies `optimize_row` to every row of a padded layer and tags the result
/// as bank-aware for the given vector width. Pure reordering: the
/// reconstructed dense matrix is bit-identical.
pub fn optimize_layer(layer: &SparseLayer, vector_width: u8) -> Result<SparseLayer> {
    if !matches!(vector_width, 1 | 2 | 4) {
        return Err(Error::parameter(format!(
            "vector width must be 1, 2, or 4, got {vector_width}"
        )));
    }
    if layer.pairs_per_row().is_none() {
        return Err(Error::parameter(
            "layer rows are ragged; pad_rows before optimizing the layout".to_string(),
        ));
    }
    let rows: Vec<Vec<IndexValuePair>> = (0..layer.rows())
        .into_par_iter()
        .map(|r| optimize_row(layer.row_pairs(r), r))
        .collect();
    let mut out = SparseLayer::from_rows(layer.cols(), rows)?;
    out.set_layout(LayoutKind::BankAware(vector_width));
    Ok(out)
}
