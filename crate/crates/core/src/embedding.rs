//! Item embeddings and rotary position encoding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::SeqBatch;
use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

/// `(|V| + 1) × d` item table; row 0 is the padding row and stays zero.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable {
    pub id: ParamId,
    pub num_items: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn init<R: Rng>(store: &mut ParamStore, num_items: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let mut w = Tensor::zeros(&[num_items + 1, dim]);
        for v in w.data_mut()[dim..].iter_mut() {
            *v = normal.sample(rng);
        }
        let id = store.add("item_embedding", w);
        Self { id, num_items, dim }
    }

    pub fn rows(&self) -> usize {
        self.num_items + 1
    }

    /// Records a lookup of `ids` on the tape.
    pub fn lookup(&self, tape: &Tape, store: &ParamStore, ids: &[u32]) -> Result<Var> {
        let ids = self.check_ids(ids)?;
        let table = tape.param(store, self.id);
        tape.gather_rows(table, &ids)
    }

    /// Item rows `1..=|V|`, excluding padding, for scoring.
    pub fn item_rows(&self, tape: &Tape, store: &ParamStore) -> Result<Var> {
        let table = tape.param(store, self.id);
        tape.slice_rows(table, 1, self.rows())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&i| {
                if (i as usize) < self.rows() {
                    Ok(i as usize)
                } else {
                    Err(Error::Data(format!(
                        "item id {i} outside embedding table of {} rows",
                        self.rows()
                    )))
                }
            })
            .collect()
    }
}

/// Embeds a padded batch into a `B × L × d` tensor. Padding maps to zero vectors.
pub fn embed(batch: &SeqBatch, weights: &Tensor) -> Result<Tensor> {
    let (rows, d) = (weights.rows(), weights.cols());
    let (b, l) = (batch.batch_size(), batch.max_len());
    let mut out = Tensor::zeros(&[b, l, d]);
    for (n, &id) in batch.ids().iter().enumerate() {
        let id = id as usize;
        if id >= rows {
            return Err(Error::Data(format!(
                "item id {id} outside embedding table of {rows} rows"
            )));
        }
        if id != 0 {
            out.data_mut()[n * d..(n + 1) * d].copy_from_slice(weights.row(id));
        }
    }
    Ok(out)
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Cosine/sine tables for rotary encoding of `d_head`-wide vectors.
#[derive(Clone, Debug)]
pub struct RopeCache {
    d_head: usize,
    inv_freq: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    cached_positions: usize,
}

impl RopeCache {
    pub fn new(d_head: usize, max_positions: usize) -> Result<Self> {
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary encoding needs an even head dimension, got {d_head}"
            )));
        }
        let half = d_head / 2;
        let inv_freq: Vec<f64> = (0..half)
            .map(|i| ROPE_BASE.powf(-(2.0 * i as f64) / d_head as f64))
            .collect();
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for f in &inv_freq {
                let a = p as f64 * f;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Ok(Self {
            d_head,
            inv_freq,
            cos,
            sin,
            cached_positions: max_positions,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    fn cos_sin(&self, pos: usize, i: usize) -> (f64, f64) {
        let half = self.d_head / 2;
        if pos < self.cached_positions {
            (self.cos[pos * half + i], self.sin[pos * half + i])
        } else {
            let a = pos as f64 * self.inv_freq[i];
            (a.cos(), a.sin())
        }
    }

    /// Rotates every `d_head` slice of each row by its position's angles.
    /// `sign = -1.0` applies the inverse rotation.
    fn rotate(&self, x: &Tensor, positions: &[usize], sign: f64) -> Tensor {
        let mut out = x.clone();
        let width = x.cols();
        for (r, &pos) in positions.iter().enumerate() {
            let row = out.row_mut(r);
            for head in 0..width / self.d_head {
                let base = head * self.d_head;
                for i in 0..self.d_head / 2 {
                    let (c, s) = self.cos_sin(pos, i);
                    let s = s * sign;
                    let (a, b) = (row[base + 2 * i], row[base + 2 * i + 1]);
                    row[base + 2 * i] = a * c - b * s;
                    row[base + 2 * i + 1] = a * s + b * c;
                }
            }
        }
        out
    }

    /// Applies rotary encoding to `x` (`L × (n·d_head)`, heads side by side);
    /// `positions[r]` is the position of row `r`.
    pub fn apply(&self, x: &Tensor, positions: &[usize]) -> Result<Tensor> {
        self.check(x, positions)?;
        Ok(self.rotate(x, positions, 1.0))
    }

    fn check(&self, x: &Tensor, positions: &[usize]) -> Result<()> {
        if !x.cols().is_multiple_of(self.d_head) {
            return Err(Error::Dimension(format!(
                "row width {} is not a multiple of head dimension {}",
                x.cols(),
                self.d_head
            )));
        }
        if positions.len() != x.rows() {
            return Err(Error::Dimension(format!(
                "{} positions for {} rows",
                positions.len(),
                x.rows()
            )));
        }
        Ok(())
    }

    /// Tape version of [`RopeCache::apply`].
    pub fn apply_on(&self, tape: &Tape, x: Var, positions: &[usize]) -> Result<Var> {
        let xv = tape.value(x);
        self.check(&xv, positions)?;
        let out = self.rotate(&xv, positions, 1.0);
        let cache = self.clone();
        let positions = positions.to_vec();
        Ok(tape.record(out, &[x], move |g| vec![cache.rotate(g, &positions, -1.0)]))
    }
}
