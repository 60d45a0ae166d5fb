//! Grouped-query attention over explicit per-query key sets.
//!
//! Both sparse pathways reduce to this kernel: STIS hands it the rows of its
//! power mask, LTIS the positions gathered from its selected blocks.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numeric::{dot, Tape, Tensor, Var};

/// Visible key positions for every (KV group, query) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySets {
    len: usize,
    groups: usize,
    shared: bool,
    lists: Vec<Vec<usize>>,
}

impl KeySets {
    /// The same key list for every group; `lists[i]` serves query `i`.
    pub fn shared(lists: Vec<Vec<usize>>) -> Self {
        Self {
            len: lists.len(),
            groups: 1,
            shared: true,
            lists,
        }
    }

    /// `lists[g][i]` serves query `i` in group `g`.
    pub fn per_group(lists: Vec<Vec<Vec<usize>>>) -> Self {
        let groups = lists.len();
        let len = lists.first().map_or(0, Vec::len);
        Self {
            len,
            groups,
            shared: false,
            lists: lists.into_iter().flatten().collect(),
        }
    }

    /// Every position `j ≤ i`.
    pub fn causal(len: usize) -> Self {
        Self::shared((0..len).map(|i| (0..=i).collect()).collect())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keys(&self, group: usize, query: usize) -> &[usize] {
        if self.shared {
            &self.lists[query]
        } else {
            &self.lists[group * self.len + query]
        }
    }

    /// Total (group, query, key) triples; shared sets count once.
    pub fn total_pairs(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    fn validate(&self, len: usize, groups: usize) -> Result<()> {
        if self.len != len {
            return Err(Error::Dimension(format!(
                "key sets built for length {}, sequence has {len}",
                self.len
            )));
        }
        if !self.shared && self.groups != groups {
            return Err(Error::Dimension(format!(
                "key sets cover {} groups, attention uses {groups}",
                self.groups
            )));
        }
        if let Some(bad) = self.lists.iter().flatten().find(|&&j| j >= len) {
            return Err(Error::Dimension(format!("key position {bad} out of range {len}")));
        }
        Ok(())
    }
}

/// Head layout of a grouped-query attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub heads: usize,
    pub groups: usize,
    pub d_head: usize,
}

impl HeadLayout {
    pub fn new(heads: usize, groups: usize, d_head: usize) -> Result<Self> {
        if groups == 0 || !heads.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "heads {heads} not divisible by kv groups {groups}"
            )));
        }
        Ok(Self { heads, groups, d_head })
    }

    pub fn group_of(&self, head: usize) -> usize {
        head / (self.heads / self.groups)
    }

    fn check(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
        let l = q.rows();
        if q.cols() != self.heads * self.d_head
            || k.cols() != self.groups * self.d_head
            || v.cols() != self.groups * self.d_head
            || k.rows() != l
            || v.rows() != l
        {
            return Err(Error::Dimension(format!(
                "attention inputs q {:?}, k {:?}, v {:?} do not fit {} heads / {} groups of width {}",
                q.shape(),
                k.shape(),
                v.shape(),
                self.heads,
                self.groups,
                self.d_head
            )));
        }
        Ok(())
    }
}

/// Forward pass; returns the `L × (heads·d_head)` output and the attention
/// weights per (head, query) aligned with the key lists.
fn forward(q: &Tensor, k: &Tensor, v: &Tensor, keys: &KeySets, layout: HeadLayout) -> (Tensor, Vec<Vec<f64>>) {
    let l = q.rows();
    let dh = layout.d_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[l, layout.heads * dh]);
    let mut probs = Vec::with_capacity(layout.heads * l);
    for h in 0..layout.heads {
        let g = layout.group_of(h);
        for i in 0..l {
            let js = keys.keys(g, i);
            let qi = &q.row(i)[h * dh..(h + 1) * dh];
            let mut p: Vec<f64> = js
                .iter()
                .map(|&j| dot(qi, &k.row(j)[g * dh..(g + 1) * dh]) * scale)
                .collect();
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in p.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            let o = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
            for (x, &j) in p.iter_mut().zip(js) {
                *x /= total;
                for (oo, vv) in o.iter_mut().zip(&v.row(j)[g * dh..(g + 1) * dh]) {
                    *oo += *x * vv;
                }
            }
            probs.push(p);
        }
    }
    (out, probs)
}

/// Plain-tensor grouped-query attention (concatenated heads, no output projection).
pub fn sparse_gqa(q: &Tensor, k: &Tensor, v: &Tensor, keys: &KeySets, layout: HeadLayout) -> Result<Tensor> {
    layout.check(q, k, v)?;
    keys.validate(q.rows(), layout.groups)?;
    Ok(forward(q, k, v, keys, layout).0)
}

/// Tape version of [`sparse_gqa`]. Queries with an empty key list output zeros.
pub fn sparse_gqa_on(tape: &Tape, q: Var, k: Var, v: Var, keys: Rc<KeySets>, layout: HeadLayout) -> Result<Var> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    layout.check(&qv, &kv, &vv)?;
    keys.validate(qv.rows(), layout.groups)?;
    let (out, probs) = forward(&qv, &kv, &vv, &keys, layout);
    Ok(tape.record(out, &[q, k, v], move |g| {
        let l = qv.rows();
        let dh = layout.d_head;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(qv.shape());
        let mut gk = Tensor::zeros(kv.shape());
        let mut gv = Tensor::zeros(vv.shape());
        let mut dp = Vec::new();
        for h in 0..layout.heads {
            let grp = layout.group_of(h);
            let (hs, gs) = (h * dh, grp * dh);
            for i in 0..l {
                let js = keys.keys(grp, i);
                if js.is_empty() {
                    continue;
                }
                let p = &probs[h * l + i];
                let go = &g.row(i)[hs..hs + dh];
                dp.clear();
                dp.extend(js.iter().map(|&j| dot(go, &vv.row(j)[gs..gs + dh])));
                let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi: Vec<f64> = qv.row(i)[hs..hs + dh].to_vec();
                for ((&j, &pj), &dpj) in js.iter().zip(p).zip(dp.iter()) {
                    for (acc, x) in gv.row_mut(j)[gs..gs + dh].iter_mut().zip(go) {
                        *acc += pj * x;
                    }
                    let ds = pj * (dpj - mean) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv.row(j)[gs..gs + dh];
                    for (acc, x) in gq.row_mut(i)[hs..hs + dh].iter_mut().zip(kj) {
                        *acc += ds * x;
                    }
                    for (acc, x) in gk.row_mut(j)[gs..gs + dh].iter_mut().zip(&qi) {
                        *acc += ds * x;
                    }
                }
            }
        }
        vec![gq, gk, gv]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{dense_causal_gqa, grad_check, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn causal_sets_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(h, g) in &[(4, 2), (4, 4), (4, 1)] {
            let (l, dh) = (9, 4);
            let q = rand_t(&mut rng, &[l, h * dh]);
            let k = rand_t(&mut rng, &[l, g * dh]);
            let v = rand_t(&mut rng, &[l, g * dh]);
            let layout = HeadLayout::new(h, g, dh).unwrap();
            let got = sparse_gqa(&q, &k, &v, &KeySets::causal(l), layout).unwrap();
            let want = dense_causal_gqa(&q, &k, &v, h, g, dh).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn empty_key_list_gives_zero_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_t(&mut rng, &[2, 2]);
        let k = rand_t(&mut rng, &[2, 2]);
        let v = rand_t(&mut rng, &[2, 2]);
        let keys = KeySets::shared(vec![vec![], vec![0, 1]]);
        let out = sparse_gqa(&q, &k, &v, &keys, HeadLayout::new(1, 1, 2).unwrap()).unwrap();
        assert_eq!(out.row(0), &[0.0, 0.0]);
        assert!(out.is_finite());
    }

    #[test]
    fn mismatched_key_sets_are_rejected() {
        let q = Tensor::zeros(&[3, 2]);
        let keys = KeySets::causal(2);
        let r = sparse_gqa(&q, &q, &q, &keys, HeadLayout::new(1, 1, 2).unwrap());
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (l, h, g, dh) = (6, 4, 2, 2);
        let mut store = ParamStore::new();
        let q = store.add("q", rand_t(&mut rng, &[l, h * dh]));
        let k = store.add("k", rand_t(&mut rng, &[l, g * dh]));
        let v = store.add("v", rand_t(&mut rng, &[l, g * dh]));
        let w = rand_t(&mut rng, &[l, h * dh]);
        let lists: Vec<Vec<Vec<usize>>> = (0..g)
            .map(|grp| {
                (0..l)
                    .map(|i| (0..=i).filter(|j| (j + grp) % 2 == 0 || *j == i).collect())
                    .collect()
            })
            .collect();
        let keys = Rc::new(KeySets::per_group(lists));
        let layout = HeadLayout::new(h, g, dh).unwrap();
        let report = grad_check(
            |tape, s| {
                let o = sparse_gqa_on(
                    tape,
                    tape.param(s, q),
                    tape.param(s, k),
                    tape.param(s, v),
                    keys.clone(),
                    layout,
                )?;
                let o = tape.mul_const(o, w.clone())?;
                Ok(tape.sum(o))
            },
            &mut store,
            &[q, k, v],
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
