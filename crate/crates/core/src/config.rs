use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparsity and architecture hyperparameters of one attention layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Compression block size `l`.
    pub comp_block: usize,
    /// Stride `s` between compression block starts.
    pub stride: usize,
    /// Selection block size `l′`.
    pub sel_block: usize,
    /// Number of selection blocks gathered per query (`k`).
    pub top_k: usize,
    /// STIS window, in mask blocks.
    pub window: usize,
    /// STIS mask block size.
    pub mask_block: usize,
    pub heads: usize,
    pub kv_groups: usize,
    pub d_model: usize,
    pub d_head: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            comp_block: 32,
            stride: 16,
            sel_block: 16,
            top_k: 4,
            window: 8,
            mask_block: 1,
            heads: 8,
            kv_groups: 2,
            d_model: 128,
            d_head: 16,
        }
    }
}

impl AttentionConfig {
    /// Settings used for the published interaction counts.
    pub fn published() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("comp_block", self.comp_block),
            ("stride", self.stride),
            ("sel_block", self.sel_block),
            ("top_k", self.top_k),
            ("window", self.window),
            ("mask_block", self.mask_block),
            ("heads", self.heads),
            ("kv_groups", self.kv_groups),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.stride > self.comp_block {
            return Err(Error::Config(format!(
                "stride {} exceeds compression block {}",
                self.stride, self.comp_block
            )));
        }
        if !self.comp_block.is_multiple_of(self.stride) || !self.sel_block.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "stride {} must divide compression block {} and selection block {}",
                self.stride, self.comp_block, self.sel_block
            )));
        }
        // l > l′ is accepted: the published settings use l = 32, l′ = 16.
        if !self.heads.is_multiple_of(self.kv_groups) {
            return Err(Error::Config(format!(
                "heads {} not divisible by kv groups {}",
                self.heads, self.kv_groups
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary encoding",
                self.d_head
            )));
        }
        Ok(())
    }

    pub fn heads_per_group(&self) -> usize {
        self.heads / self.kv_groups
    }

    /// KV group serving query head `head`.
    pub fn group_of(&self, head: usize) -> usize {
        head / self.heads_per_group()
    }

    /// Number of compression blocks for a sequence of length `len`.
    pub fn num_comp_blocks(&self, len: usize) -> usize {
        if len < self.comp_block {
            1
        } else {
            (len - self.comp_block) / self.stride + 1
        }
    }

    pub fn num_sel_blocks(&self, len: usize) -> usize {
        len.div_ceil(self.sel_block)
    }

    /// STIS window span `win × blk`.
    pub fn window_span(&self) -> usize {
        self.window * self.mask_block
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AttentionConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_divisibility() {
        let mut c = AttentionConfig::default();
        c.stride = 12;
        assert!(c.validate().is_err());
        let mut c = AttentionConfig::default();
        c.kv_groups = 3;
        assert!(c.validate().is_err());
        let mut c = AttentionConfig::default();
        c.d_head = 5;
        assert!(c.validate().is_err());
        let mut c = AttentionConfig::default();
        c.top_k = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn group_index() {
        let c = AttentionConfig::default();
        assert_eq!((c.heads, c.kv_groups), (8, 2));
        assert_eq!(c.group_of(3), 0);
        assert_eq!(c.group_of(4), 1);
    }
}
