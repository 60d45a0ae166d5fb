//! Long-term interest selection.
//!
//! Keys are cut into overlapping compression blocks, each block is squeezed
//! to one key by a small MLP, queries score the compressed keys, the scores
//! are remapped onto selection blocks, summed across the heads of a KV group,
//! and the top-k selection blocks are gathered for attention.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{sparse_gqa_on, HeadLayout, KeySets};
use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::numeric::{masked_softmax, ParamId, ParamStore, Tape, Tensor, Var};

/// Start offset of compression block `i` in the (possibly left-padded) key sequence.
fn block_start(i: usize, cfg: &AttentionConfig) -> usize {
    i * cfg.stride
}

/// Last position covered by compression block `i`, in original coordinates.
pub fn comp_block_end(i: usize, cfg: &AttentionConfig, len: usize) -> usize {
    if len < cfg.comp_block {
        len - 1
    } else {
        block_start(i, cfg) + cfg.comp_block - 1
    }
}

/// Overlapping `l × d` blocks of `keys`; block `i` covers rows `[i·s, i·s + l)`.
/// Sequences shorter than `l` are left-padded with zero rows into one block.
pub fn split_blocks(keys: &Tensor, cfg: &AttentionConfig) -> Result<Vec<Tensor>> {
    let len = keys.rows();
    if len == 0 {
        return Err(Error::Dimension("cannot split an empty key sequence".into()));
    }
    let padded = left_pad(keys, cfg.comp_block);
    Ok((0..cfg.num_comp_blocks(len))
        .map(|i| {
            let s = block_start(i, cfg);
            padded.slice_rows(s, s + cfg.comp_block)
        })
        .collect())
}

fn left_pad(keys: &Tensor, min_len: usize) -> Tensor {
    let (len, d) = (keys.rows(), keys.cols());
    if len >= min_len {
        return keys.clone();
    }
    let mut data = vec![0.0; (min_len - len) * d];
    data.extend_from_slice(keys.data());
    Tensor::new(&[min_len, d], data).expect("padded shape")
}

/// Learned block compressor: flatten `block + position_bias`, one GELU hidden
/// layer of width `d_head`, linear output of width `d_head`.
#[derive(Clone, Copy, Debug)]
pub struct CompressionMlp {
    pub pos_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    block: usize,
    d_head: usize,
}

impl CompressionMlp {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, block: usize, d_head: usize, rng: &mut R) -> Self {
        let fan_in = block * d_head;
        let mut normal = |shape: &[usize], std: f64| {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("valid std");
            Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
        };
        let pos_bias = normal(&[block, d_head], 0.02);
        let w1 = normal(&[fan_in, d_head], (1.0 / fan_in as f64).sqrt());
        let w2 = normal(&[d_head, d_head], (1.0 / d_head as f64).sqrt());
        Self {
            pos_bias: store.add(format!("{prefix}.pos_bias"), pos_bias),
            w1: store.add(format!("{prefix}.w1"), w1),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_head])),
            w2: store.add(format!("{prefix}.w2"), w2),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d_head])),
            block,
            d_head,
        }
    }

    pub fn params(&self) -> [ParamId; 5] {
        [self.pos_bias, self.w1, self.b1, self.w2, self.b2]
    }

    /// Compresses every block of `keys` (`L × d_head`) into an `M × d_head` matrix.
    pub fn compress_on(&self, tape: &Tape, store: &ParamStore, keys: Var, cfg: &AttentionConfig) -> Result<Var> {
        let kv = tape.value(keys);
        if kv.cols() != self.d_head || cfg.comp_block != self.block {
            return Err(Error::Dimension(format!(
                "compressor expects blocks of {} × {}, got keys {:?} with block {}",
                self.block,
                self.d_head,
                kv.shape(),
                cfg.comp_block
            )));
        }
        let flat = unfold_blocks(tape, keys, cfg)?;
        let x = tape.add_bias(flat, tape.param(store, self.pos_bias))?;
        let hidden = tape.affine(x, tape.param(store, self.w1), tape.param(store, self.b1))?;
        let hidden = tape.gelu(hidden);
        tape.affine(hidden, tape.param(store, self.w2), tape.param(store, self.b2))
    }

    /// Compresses one `l × d_head` block.
    pub fn compress_block(&self, store: &ParamStore, block: &Tensor) -> Result<Tensor> {
        if block.shape() != [self.block, self.d_head] {
            return Err(Error::Dimension(format!(
                "block of shape {:?}, expected [{}, {}]",
                block.shape(),
                self.block,
                self.d_head
            )));
        }
        let tape = Tape::new();
        let x = tape.constant(block.clone().reshape(&[1, self.block * self.d_head])?);
        let x = tape.add_bias(x, tape.param(store, self.pos_bias))?;
        let h = tape.affine(x, tape.param(store, self.w1), tape.param(store, self.b1))?;
        let h = tape.gelu(h);
        let out = tape.affine(h, tape.param(store, self.w2), tape.param(store, self.b2))?;
        let v = tape.value(out);
        (*v).clone().reshape(&[self.d_head])
    }
}

/// Rows of each compression block flattened side by side: `M × (l·d)`.
fn unfold_blocks(tape: &Tape, keys: Var, cfg: &AttentionConfig) -> Result<Var> {
    let kv = tape.value(keys);
    let (len, d) = (kv.rows(), kv.cols());
    let blocks = split_blocks(&kv, cfg)?;
    let m = blocks.len();
    let width = cfg.comp_block * d;
    let data: Vec<f64> = blocks.into_iter().flat_map(Tensor::into_data).collect();
    let out = Tensor::new(&[m, width], data)?;
    let pad = cfg.comp_block.saturating_sub(len);
    let (l, s) = (cfg.comp_block, cfg.stride);
    Ok(tape.record(out, &[keys], move |g| {
        let mut gk = Tensor::zeros(&[len, d]);
        for i in 0..m {
            let grow = g.row(i);
            for r in 0..l {
                let pos = i * s + r;
                if pos < pad {
                    continue;
                }
                for (acc, x) in gk.row_mut(pos - pad).iter_mut().zip(&grow[r * d..(r + 1) * d]) {
                    *acc += x;
                }
            }
        }
        vec![gk]
    }))
}

/// Compressed keys and values of one KV group.
#[derive(Clone, Debug)]
pub struct CompressedKV {
    pub keys: Tensor,
    pub values: Tensor,
}

impl CompressedKV {
    pub fn num_blocks(&self) -> usize {
        self.keys.rows()
    }
}

pub fn compress_kv(
    store: &ParamStore,
    key_mlp: &CompressionMlp,
    value_mlp: &CompressionMlp,
    keys: &Tensor,
    values: &Tensor,
    cfg: &AttentionConfig,
) -> Result<CompressedKV> {
    let tape = Tape::new();
    let ck = key_mlp.compress_on(&tape, store, tape.constant(keys.clone()), cfg)?;
    let cv = value_mlp.compress_on(&tape, store, tape.constant(values.clone()), cfg)?;
    Ok(CompressedKV {
        keys: (*tape.value(ck)).clone(),
        values: (*tape.value(cv)).clone(),
    })
}

/// Softmax of `q · k̃ / √d` over the compression blocks that end at or before
/// each query position; other blocks score 0. Returns `L × M`.
pub fn importance_scores(q: &Tensor, cmp_keys: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    let (len, m) = (q.rows(), cmp_keys.rows());
    if q.cols() != cmp_keys.cols() {
        return Err(Error::Dimension(format!(
            "query width {} vs compressed key width {}",
            q.cols(),
            cmp_keys.cols()
        )));
    }
    let logits = q.matmul_t(cmp_keys)?.scale(1.0 / (q.cols() as f64).sqrt());
    let mut mask = vec![false; len * m];
    for i in 0..len {
        for b in 0..m {
            mask[i * m + b] = comp_block_end(b, cfg, len) <= i;
        }
    }
    masked_softmax(&logits, Some(&mask), 1)
}

/// Maps compression-block scores onto selection blocks:
/// `sel[j] = Σ_{m<l′/s} Σ_{n<l/s} cmp[(l′/s)·j − m − n]`, out-of-range terms are 0.
pub fn remap_scores(cmp: &Tensor, cfg: &AttentionConfig, len: usize) -> Result<Tensor> {
    let s = cfg.stride;
    if s == 0 || !cfg.comp_block.is_multiple_of(s) || !cfg.sel_block.is_multiple_of(s) {
        return Err(Error::Config(format!(
            "stride {s} must divide compression block {} and selection block {}",
            cfg.comp_block, cfg.sel_block
        )));
    }
    let (rows, m) = (cmp.rows(), cmp.cols());
    let n_sel = cfg.num_sel_blocks(len);
    let (outer, inner) = (cfg.sel_block / s, cfg.comp_block / s);
    let mut out = Tensor::zeros(&[rows, n_sel]);
    for r in 0..rows {
        let src = cmp.row(r);
        let dst = out.row_mut(r);
        for (j, slot) in dst.iter_mut().enumerate() {
            let base = (outer * j) as isize;
            let mut acc = 0.0;
            for a in 0..outer {
                for b in 0..inner {
                    let idx = base - a as isize - b as isize;
                    if idx >= 0 && (idx as usize) < m {
                        acc += src[idx as usize];
                    }
                }
            }
            *slot = acc;
        }
    }
    Ok(out)
}

/// Sums per-head selection scores over the heads of each KV group.
pub fn aggregate_group_scores(per_head: &[Tensor], cfg: &AttentionConfig) -> Result<Vec<Tensor>> {
    if per_head.len() != cfg.heads {
        return Err(Error::Dimension(format!(
            "{} head score tensors for {} heads",
            per_head.len(),
            cfg.heads
        )));
    }
    let mut groups: Vec<Tensor> = (0..cfg.kv_groups).map(|_| Tensor::zeros(per_head[0].shape())).collect();
    for (h, scores) in per_head.iter().enumerate() {
        groups[cfg.group_of(h)].add_assign(scores);
    }
    Ok(groups)
}

/// Indices of the `k` highest scores among the first `valid` entries, ties to
/// the lower index, returned in ascending order.
pub fn select_topk(scores: &[f64], valid: usize, k: usize) -> Vec<usize> {
    let valid = valid.min(scores.len());
    let mut order: Vec<usize> = (0..valid).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Selection blocks visible to query `i`: those starting at or before `i`.
pub fn valid_sel_blocks(query: usize, cfg: &AttentionConfig) -> usize {
    query / cfg.sel_block + 1
}

/// Positions `≤ query` covered by the chosen selection blocks, ascending.
pub fn gather_positions(blocks: &[usize], query: usize, cfg: &AttentionConfig, len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(blocks.len() * cfg.sel_block);
    for &b in blocks {
        let start = b * cfg.sel_block;
        let end = ((b + 1) * cfg.sel_block).min(len).min(query + 1);
        out.extend(start..end);
    }
    out
}

/// Runs scoring, remapping, group aggregation and top-k for every query and
/// KV group. `q` is `L × (heads·d_head)` and `cmp_keys[g]` is `M × d_head`.
pub fn select_key_sets(q: &Tensor, cmp_keys: &[Tensor], cfg: &AttentionConfig) -> Result<KeySets> {
    let len = q.rows();
    let dh = cfg.d_head;
    if cmp_keys.len() != cfg.kv_groups {
        return Err(Error::Dimension(format!(
            "{} compressed key groups for {} kv groups",
            cmp_keys.len(),
            cfg.kv_groups
        )));
    }
    let per_head = (0..cfg.heads)
        .map(|h| {
            let qh = q.slice_cols(h * dh, (h + 1) * dh);
            let cmp = importance_scores(&qh, &cmp_keys[cfg.group_of(h)], cfg)?;
            remap_scores(&cmp, cfg, len)
        })
        .collect::<Result<Vec<_>>>()?;
    let shared = aggregate_group_scores(&per_head, cfg)?;
    let lists = shared
        .iter()
        .map(|scores| {
            (0..len)
                .map(|i| {
                    let blocks = select_topk(scores.row(i), valid_sel_blocks(i, cfg), cfg.top_k);
                    gather_positions(&blocks, i, cfg, len)
                })
                .collect()
        })
        .collect();
    Ok(KeySets::per_group(lists))
}

/// Key and value compressors of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LtisParams {
    pub key_mlp: CompressionMlp,
    pub value_mlp: CompressionMlp,
}

impl LtisParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        Self {
            key_mlp: CompressionMlp::init(store, &format!("{prefix}.cmp_k"), cfg.comp_block, cfg.d_head, rng),
            value_mlp: CompressionMlp::init(store, &format!("{prefix}.cmp_v"), cfg.comp_block, cfg.d_head, rng),
        }
    }

    /// Selects key sets for rotated `q`, `k` (plain values). The compressed
    /// keys feed only the discrete top-k choice.
    pub fn key_sets(&self, store: &ParamStore, q: &Tensor, k: &Tensor, cfg: &AttentionConfig) -> Result<KeySets> {
        let dh = cfg.d_head;
        let tape = Tape::new();
        let cmp = (0..cfg.kv_groups)
            .map(|g| {
                let kg = tape.constant(k.slice_cols(g * dh, (g + 1) * dh));
                let c = self.key_mlp.compress_on(&tape, store, kg, cfg)?;
                Ok((*tape.value(c)).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        select_key_sets(q, &cmp, cfg)
    }
}

/// Attention of every query over its gathered key/value rows.
pub fn ltis_attention(tape: &Tape, q: Var, k: Var, v: Var, keys: Rc<KeySets>, cfg: &AttentionConfig) -> Result<Var> {
    let layout = HeadLayout::new(cfg.heads, cfg.kv_groups, cfg.d_head)?;
    sparse_gqa_on(tape, q, k, v, keys, layout)
}
