//! Sparsity and complexity accounting.

use std::collections::BTreeSet;
use std::fmt::Write;

use serde::Serialize;

use crate::config::AttentionConfig;
use crate::error::Result;
use crate::stis::{build_power_mask, SparseMask};

/// Participating interactions of one query at sequence length `len`.
///
/// `total` sums the five categories without deduplication (compressed keys,
/// selected positions, a symmetric window, one-sided power positions and the
/// last block). `deduplicated` counts the compressed keys plus the distinct
/// positions the last query actually touches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityReport {
    pub len: usize,
    pub compressed: usize,
    pub selected: usize,
    pub window: usize,
    pub power: usize,
    pub last_block: usize,
    pub total: usize,
    pub deduplicated: usize,
    pub reduction: f64,
    pub dense_flops: f64,
    pub blossom_flops: f64,
}

fn floor_log2(x: usize) -> usize {
    if x == 0 {
        0
    } else {
        x.ilog2() as usize
    }
}

pub fn count_participating(len: usize, cfg: &AttentionConfig) -> Result<SparsityReport> {
    cfg.validate()?;
    let compressed = cfg.num_comp_blocks(len);
    let selected = cfg.top_k * cfg.sel_block;
    let window = 2 * cfg.window * cfg.mask_block - 1;
    let power = floor_log2(len / cfg.mask_block) * cfg.mask_block;
    let last_block = cfg.mask_block;
    let total = compressed + selected + window + power + last_block;

    let query = len - 1;
    let mask = build_power_mask(len, cfg.mask_block, cfg.window, true)?;
    let mut union: BTreeSet<usize> = mask.row(query).iter().copied().collect();
    let blocks = cfg.num_sel_blocks(len).min(cfg.top_k);
    for b in 0..blocks {
        let start = b * cfg.sel_block;
        union.extend(start..(start + cfg.sel_block).min(len));
    }
    let deduplicated = compressed + union.len();

    let complexity = complexity_report(len, cfg.d_head, cfg);
    Ok(SparsityReport {
        len,
        compressed,
        selected,
        window,
        power,
        last_block,
        total,
        deduplicated,
        reduction: 1.0 - total as f64 / len as f64,
        dense_flops: complexity.dense,
        blossom_flops: complexity.blossom_total,
    })
}

/// Asymptotic cost expressions evaluated at concrete sizes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub len: usize,
    pub d: usize,
    /// `M²·d`
    pub compression: f64,
    /// `G·(l′·k)²·d`
    pub selection: f64,
    /// `log₂(L/b)·d`
    pub stis: f64,
    pub blossom_total: f64,
    /// `L·k·l′·d`, the cost of per-query attention over gathered blocks.
    pub gathered: f64,
    /// `L²·d`
    pub dense: f64,
}

impl ComplexityReport {
    pub fn ratio(&self) -> f64 {
        self.blossom_total / self.dense
    }
}

pub fn complexity_report(len: usize, d: usize, cfg: &AttentionConfig) -> ComplexityReport {
    let df = d as f64;
    let m = cfg.num_comp_blocks(len) as f64;
    let lk = (cfg.sel_block * cfg.top_k) as f64;
    let compression = m * m * df;
    let selection = cfg.kv_groups as f64 * lk * lk * df;
    let stis = (len as f64 / cfg.mask_block as f64).log2().max(0.0) * df;
    ComplexityReport {
        len,
        d,
        compression,
        selection,
        stis,
        blossom_total: compression + selection + stis,
        gathered: len as f64 * lk * df,
        dense: (len * len) as f64 * df,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskDensity {
    pub row_counts: Vec<usize>,
    /// Visible pairs over `L²`.
    pub density: f64,
    pub mean_row: f64,
    pub max_row: usize,
}

pub fn mask_density(mask: &SparseMask) -> MaskDensity {
    let row_counts: Vec<usize> = mask.rows().iter().map(Vec::len).collect();
    let len = mask.len().max(1) as f64;
    let nnz = mask.nnz() as f64;
    MaskDensity {
        max_row: row_counts.iter().copied().max().unwrap_or(0),
        row_counts,
        density: nnz / (len * len),
        mean_row: nnz / len,
    }
}

/// Percentage with one decimal, e.g. `89.4%`.
pub fn percent(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

/// Aligned text table with one row per length.
pub fn render_table(reports: &[SparsityReport], complexity: &[ComplexityReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6} {:>5} {:>8} {:>6} {:>5} {:>5} {:>6} {:>6} {:>9}",
        "L", "M", "selected", "window", "power", "last", "total", "dedup", "reduction"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:>6} {:>5} {:>8} {:>6} {:>5} {:>5} {:>6} {:>6} {:>9}",
            r.len,
            r.compressed,
            r.selected,
            r.window,
            r.power,
            r.last_block,
            r.total,
            r.deduplicated,
            percent(r.reduction)
        );
    }
    if !complexity.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:>6} {:>14} {:>14} {:>10} {:>14} {:>14} {:>14} {:>8}",
            "L", "M^2 d", "G(l'k)^2 d", "log(L/b) d", "blossom", "L k l' d", "L^2 d", "ratio"
        );
        for c in complexity {
            let _ = writeln!(
                out,
                "{:>6} {:>14.0} {:>14.0} {:>10.1} {:>14.0} {:>14.0} {:>14.0} {:>8.4}",
                c.len,
                c.compression,
                c.selection,
                c.stis,
                c.blossom_total,
                c.gathered,
                c.dense,
                c.ratio()
            );
        }
        let _ = writeln!(
            out,
            "note: G(l'k)^2 d is the stated selection cost; per-query gathered attention costs L k l' d, which is larger whenever L > G l' k"
        );
    }
    out
}

/// `key=value` lines, keys prefixed by `L<len>.`.
pub fn render_kv(reports: &[SparsityReport], complexity: &[ComplexityReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let p = format!("L{}", r.len);
        let _ = writeln!(out, "{p}.compressed={}", r.compressed);
        let _ = writeln!(out, "{p}.selected={}", r.selected);
        let _ = writeln!(out, "{p}.window={}", r.window);
        let _ = writeln!(out, "{p}.power={}", r.power);
        let _ = writeln!(out, "{p}.last_block={}", r.last_block);
        let _ = writeln!(out, "{p}.total={}", r.total);
        let _ = writeln!(out, "{p}.deduplicated={}", r.deduplicated);
        let _ = writeln!(out, "{p}.reduction={}", percent(r.reduction));
    }
    for c in complexity {
        let p = format!("L{}", c.len);
        let _ = writeln!(out, "{p}.cost.compression={}", c.compression);
        let _ = writeln!(out, "{p}.cost.selection={}", c.selection);
        let _ = writeln!(out, "{p}.cost.stis={}", c.stis);
        let _ = writeln!(out, "{p}.cost.blossom={}", c.blossom_total);
        let _ = writeln!(out, "{p}.cost.gathered={}", c.gathered);
        let _ = writeln!(out, "{p}.cost.dense={}", c.dense);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn published() -> AttentionConfig {
        AttentionConfig::published()
    }

    #[test]
    fn published_totals() {
        for (len, want) in [(256, 103), (512, 120), (1024, 153), (2048, 218)] {
            assert_eq!(count_participating(len, &published()).unwrap().total, want);
        }
        let r = count_participating(2048, &published()).unwrap();
        assert!((r.reduction - 0.894).abs() <= 0.0005);
        assert_eq!(percent(r.reduction), "89.4%");
    }

    #[test]
    fn totals_from_independent_formula() {
        for len in [256usize, 300, 777, 2048, 4096] {
            let m = (len - 32) / 16 + 1;
            let want = m + 4 * 16 + (2 * 8 - 1) + (len as f64).log2().floor() as usize + 1;
            assert_eq!(count_participating(len, &published()).unwrap().total, want);
        }
    }

    #[test]
    fn deduplicated_never_exceeds_total() {
        for len in [256, 512, 1024, 2048] {
            let r = count_participating(len, &published()).unwrap();
            assert!(r.deduplicated <= r.total, "{r:?}");
        }
    }

    #[test]
    fn compression_cost_arithmetic() {
        let c = complexity_report(2048, 64, &published());
        assert_eq!(c.compression, 1_032_256.0);
        assert_eq!(c.dense, 2048.0 * 2048.0 * 64.0);
        for len in [256, 512, 1024, 2048, 4096] {
            assert!(complexity_report(len, 64, &published()).ratio() < 1.0);
        }
    }

    #[test]
    fn density_cases() {
        let full = build_power_mask(8, 1, 8, false).unwrap();
        assert_eq!(mask_density(&full).density, 1.0);
        let sparse = build_power_mask(1024, 1, 1, false).unwrap();
        assert!(mask_density(&sparse).max_row <= 22);
        let cfg = published();
        let short = mask_density(&build_power_mask(256, cfg.mask_block, cfg.window, true).unwrap());
        let long = mask_density(&build_power_mask(2048, cfg.mask_block, cfg.window, true).unwrap());
        assert!(long.density < short.density);
    }

    #[test]
    fn renders_reduction() {
        let reports: Vec<_> = [256, 2048]
            .iter()
            .map(|&l| count_participating(l, &published()).unwrap())
            .collect();
        let table = render_table(&reports, &[]);
        assert!(table.contains("89.4%"));
        let kv = render_kv(&reports, &[]);
        assert!(kv.contains("L2048.total=218"));
        assert!(kv.contains("L256.total=103"));
    }
}
