//! Short-term interest selection: power-law attention mask.
//!
//! Query `i` sees key `j` when `|i − j| < win·blk`, when their block indices
//! differ by a power of two (`1, 2, 4, …`), or when `j` is one of the final
//! `blk` positions. Causal mode additionally requires `j ≤ i`.

use std::io::Write;
use std::rc::Rc;

use crate::attention::{sparse_gqa_on, HeadLayout, KeySets};
use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::numeric::{Tape, Var};

/// Row-wise visible positions of the power mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMask {
    len: usize,
    block: usize,
    window: usize,
    causal: bool,
    rows: Vec<Vec<usize>>,
}

/// The three-case visibility rule, evaluated directly.
pub fn power_rule(i: usize, j: usize, len: usize, block: usize, window: usize) -> bool {
    let span = window * block;
    if i.abs_diff(j) < span {
        return true;
    }
    let dist = (i / block).abs_diff(j / block);
    if dist > 0 && dist.is_power_of_two() {
        return true;
    }
    j + block >= len
}

impl SparseMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn causal(&self) -> bool {
        self.causal
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Visible key positions of query `i`, ascending.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_key_sets(&self) -> KeySets {
        KeySets::shared(self.rows.clone())
    }

    /// Writes `row,visible_index` lines with a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row,visible_index")?;
        for (i, row) in self.rows.iter().enumerate() {
            for j in row {
                writeln!(out, "{i},{j}")?;
            }
        }
        out.flush()
    }
}

/// Builds the mask without touching all `L²` pairs: each row collects its
/// window, its power-of-two block neighbours and the final block.
pub fn build_power_mask(len: usize, block: usize, window: usize, causal: bool) -> Result<SparseMask> {
    if len == 0 || block == 0 || window == 0 {
        return Err(Error::Config(format!(
            "power mask needs positive length, block and window (got {len}, {block}, {window})"
        )));
    }
    let span = window * block;
    let num_blocks = len.div_ceil(block);
    let last_start = len.saturating_sub(block);
    let mut rows = Vec::with_capacity(len);
    let mut row: Vec<usize> = Vec::new();
    for i in 0..len {
        row.clear();
        let hi = if causal { i } else { (i + span - 1).min(len - 1) };
        row.extend(i.saturating_sub(span - 1)..=hi);
        let bq = i / block;
        let mut step = 1usize;
        while step < num_blocks {
            if bq >= step {
                let b = bq - step;
                row.extend(b * block..((b + 1) * block).min(len));
            }
            if bq + step < num_blocks {
                let b = bq + step;
                row.extend(b * block..((b + 1) * block).min(len));
            }
            step <<= 1;
        }
        row.extend(last_start..len);
        if causal {
            row.retain(|&j| j <= i);
        }
        row.sort_unstable();
        row.dedup();
        rows.push(row.clone());
    }
    Ok(SparseMask {
        len,
        block,
        window,
        causal,
        rows,
    })
}

pub fn mask_for(len: usize, cfg: &AttentionConfig, causal: bool) -> Result<SparseMask> {
    build_power_mask(len, cfg.mask_block, cfg.window, causal)
}

/// Masked grouped-query attention over the full keys and values.
pub fn stis_attention(tape: &Tape, q: Var, k: Var, v: Var, mask: &SparseMask, cfg: &AttentionConfig) -> Result<Var> {
    let len = tape.value(q).rows();
    if mask.len() != len {
        return Err(Error::Dimension(format!(
            "mask built for length {}, sequence has {len}",
            mask.len()
        )));
    }
    let layout = HeadLayout::new(cfg.heads, cfg.kv_groups, cfg.d_head)?;
    sparse_gqa_on(tape, q, k, v, Rc::new(mask.to_key_sets()), layout)
}
