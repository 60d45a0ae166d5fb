//! The full recommender: embeddings, encoder stack, tied scoring, training
//! and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::AttentionConfig;
use crate::data::{EvalSplit, Split, TrainExample};
use crate::embedding::{EmbeddingTable, RopeCache};
use crate::error::{Error, Result};
use crate::fusion::{encode, BlossomLayerParams, Branches, LayerInputs, Mode, OutputParams};
use crate::metrics::{rank_metrics, sample_negatives, EvalResult, MetricAccumulator};
use crate::numeric::{dot, Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::stis::mask_for;

/// Architecture of a model; everything needed to rebuild its parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub attention: AttentionConfig,
    pub layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub branches: Branches,
    pub num_items: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.attention.heads * self.attention.d_head != self.attention.d_model {
            return Err(Error::Config(format!(
                "heads × d_head = {} must equal d_model = {}",
                self.attention.heads * self.attention.d_head,
                self.attention.d_model
            )));
        }
        if self.layers == 0 || self.max_len == 0 || self.num_items == 0 {
            return Err(Error::Config("layers, max_len and num_items must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub layers: Vec<BlossomLayerParams>,
    pub output: OutputParams,
    rope: RopeCache,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.attention.d_model;
        let embedding = EmbeddingTable::init(&mut store, config.num_items, d, &mut rng);
        let layers = (0..config.layers)
            .map(|i| BlossomLayerParams::init(&mut store, &format!("layer{i}"), &config.attention, &mut rng))
            .collect();
        let output = OutputParams::init(&mut store, d);
        let rope = RopeCache::new(config.attention.d_head, config.max_len)?;
        Ok(Self {
            config,
            store,
            embedding,
            layers,
            output,
            rope,
        })
    }

    /// Encoded hidden states (`n × d`) of one unpadded sequence, most recent
    /// `max_len` items only.
    pub fn hidden(&self, tape: &Tape, seq: &[u32], mode: &mut Mode<'_>) -> Result<Var> {
        self.hidden_in(tape, &self.store, seq, mode)
    }

    /// [`Model::hidden`] with parameter values taken from `store`.
    pub fn hidden_in(&self, tape: &Tape, store: &ParamStore, seq: &[u32], mode: &mut Mode<'_>) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::Data("cannot encode an empty sequence".into()));
        }
        let seq = &seq[seq.len().saturating_sub(self.config.max_len)..];
        let mask = mask_for(seq.len(), &self.config.attention, true)?;
        let inputs = LayerInputs {
            cfg: &self.config.attention,
            rope: &self.rope,
            mask: &mask,
            branches: self.config.branches,
        };
        let e = self.embedding.lookup(tape, store, seq)?;
        encode(tape, store, e, &self.layers, &self.output, &inputs, mode)
    }

    /// Representation of the newest position of `seq` in evaluation mode.
    pub fn user_state(&self, seq: &[u32]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let h = self.hidden(&tape, seq, &mut Mode::Eval)?;
        let h = tape.value(h);
        Ok(h.row(h.rows() - 1).to_vec())
    }

    /// Scores for items `1..=|V|` (index `i` holds item `i + 1`).
    pub fn score_items(&self, h_t: &[f64]) -> Vec<f64> {
        score_items(h_t, self.store.get(self.embedding.id))
    }

    /// Mean next-item cross-entropy over every position of `example`.
    pub fn example_loss(&self, tape: &Tape, example: &TrainExample, mode: &mut Mode<'_>) -> Result<Var> {
        self.example_loss_in(tape, &self.store, example, mode)
    }

    /// [`Model::example_loss`] with parameter values taken from `store`.
    pub fn example_loss_in(
        &self,
        tape: &Tape,
        store: &ParamStore,
        example: &TrainExample,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let h = self.hidden_in(tape, store, &example.input, mode)?;
        let n = tape.value(h).rows();
        let targets = &example.targets[example.targets.len() - n..];
        let items = self.embedding.item_rows(tape, store)?;
        let logits = tape.matmul_t(h, items)?;
        next_item_loss(tape, logits, targets)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }
}

/// Dot product of `h_t` with every non-padding row of `table`.
pub fn score_items(h_t: &[f64], table: &Tensor) -> Vec<f64> {
    (1..table.rows()).map(|i| dot(h_t, table.row(i))).collect()
}

/// Cross-entropy of item ids `targets` against logits whose column `c` scores item `c + 1`.
pub fn next_item_loss(tape: &Tape, logits: Var, targets: &[u32]) -> Result<Var> {
    let cols: Vec<usize> = targets
        .iter()
        .map(|&t| {
            if t == 0 {
                Err(Error::Data("padding id used as a training target".into()))
            } else {
                Ok(t as usize - 1)
            }
        })
        .collect::<Result<_>>()?;
    tape.cross_entropy(logits, &cols, &[])
}

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub eval_k: usize,
    pub negatives: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 2048,
            epochs: 200,
            patience: 15,
            seed: 42,
            eval_k: 10,
            negatives: 100,
            clip_norm: 5.0,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `grads[i]` belongs to parameter `i`, `None` means no gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

fn accumulate(acc: &mut [Option<Tensor>], grads: &Gradients, weight: f64) {
    for (id, g) in grads.params() {
        let slot = &mut acc[id.index()];
        match slot {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += weight * b;
                }
            }
            None => *slot = Some(g.scale(weight)),
        }
    }
}

/// Mutable optimisation state carried across epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: Adam,
    pub epoch: usize,
    pub best_ndcg: f64,
    pub best_epoch: usize,
    pub epochs_without_improvement: usize,
    pub seed: u64,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_recall: f64,
    pub valid_mrr: f64,
    pub valid_ndcg: f64,
    pub k: usize,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub logs: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// One pass of minibatch Adam over `examples`; returns the mean loss.
fn run_epoch(
    model: &mut Model,
    examples: &[TrainExample],
    tc: &TrainConfig,
    optimizer: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut total_loss = 0.0;
    let mut total_positions = 0usize;
    let pad_row = model.embedding.id.index();
    for batch in order.chunks(tc.batch_size.max(1)) {
        let positions: usize = batch
            .iter()
            .map(|&i| examples[i].input.len().min(model.config.max_len))
            .sum();
        let mut grads: Vec<Option<Tensor>> = vec![None; model.store.len()];
        for &i in batch {
            let ex = &examples[i];
            let n = ex.input.len().min(model.config.max_len);
            let tape = Tape::new();
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut mode = Mode::Train {
                dropout: model.config.dropout,
                rng: &mut dropout_rng,
            };
            let loss = model.example_loss(&tape, ex, &mut mode)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {value} after {} optimiser steps",
                    optimizer.steps()
                )));
            }
            total_loss += value * n as f64;
            total_positions += n;
            let g = tape.backward(loss)?;
            accumulate(&mut grads, &g, n as f64 / positions as f64);
        }
        if let Some(g) = grads[pad_row].as_mut() {
            g.row_mut(0).fill(0.0);
        }
        clip_global_norm(&mut grads, tc.clip_norm);
        optimizer.update(&mut model.store, &grads);
    }
    Ok(total_loss / total_positions.max(1) as f64)
}

/// Trains until `tc.epochs` or until validation NDCG@K has not improved for
/// `tc.patience` epochs; the model ends holding the best parameters.
pub fn train<F>(model: &mut Model, split: &Split, tc: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog) -> Result<()>,
{
    let examples = split.training_examples(model.config.max_len);
    if examples.is_empty() {
        return Err(Error::Data("no training sequences with at least two items".into()));
    }
    if split.num_items != model.config.num_items {
        return Err(Error::Config(format!(
            "model has {} items, dataset {}",
            model.config.num_items, split.num_items
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut state = TrainState {
        optimizer: Adam::new(&model.store, tc.lr),
        epoch: 0,
        best_ndcg: f64::NEG_INFINITY,
        best_epoch: 0,
        epochs_without_improvement: 0,
        seed: tc.seed,
    };
    let mut best = model.store.clone();
    let mut logs = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=tc.epochs {
        let train_loss = run_epoch(model, &examples, tc, &mut state.optimizer, &mut rng)?;
        let valid = evaluate(model, split, EvalSplit::Valid, tc.eval_k, tc.negatives, tc.seed)?;
        state.epoch = epoch;
        let improved = valid.ndcg_at_k > state.best_ndcg;
        if improved {
            state.best_ndcg = valid.ndcg_at_k;
            state.best_epoch = epoch;
            state.epochs_without_improvement = 0;
            best = model.store.clone();
        } else {
            state.epochs_without_improvement += 1;
        }
        let log = EpochLog {
            epoch,
            train_loss,
            valid_recall: valid.recall_at_k,
            valid_mrr: valid.mrr_at_k,
            valid_ndcg: valid.ndcg_at_k,
            k: tc.eval_k,
            best: improved,
        };
        on_epoch(&log)?;
        logs.push(log);
        if state.epochs_without_improvement >= tc.patience {
            stopped_early = true;
            break;
        }
    }
    model.store = best;
    Ok(TrainOutcome {
        state,
        logs,
        stopped_early,
    })
}

/// Per-user scorer used by [`evaluate_with`].
pub trait Scorer: Sync {
    /// Scores of `candidates` given the user's context.
    fn score(&self, context: &[u32], candidates: &[u32]) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn score(&self, context: &[u32], candidates: &[u32]) -> Result<Vec<f64>> {
        let h = self.user_state(context)?;
        let table = self.store.get(self.embedding.id);
        Ok(candidates.iter().map(|&c| dot(&h, table.row(c as usize))).collect())
    }
}

/// Ranks items by training-set frequency.
#[derive(Clone, Debug)]
pub struct Popularity {
    counts: Vec<f64>,
}

impl Popularity {
    pub fn fit(split: &Split) -> Self {
        let mut counts = vec![0.0; split.num_items + 1];
        for u in &split.users {
            for &i in &u.train {
                counts[i as usize] += 1.0;
            }
        }
        Self { counts }
    }
}

impl Scorer for Popularity {
    fn score(&self, _context: &[u32], candidates: &[u32]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|&c| self.counts[c as usize]).collect())
    }
}

/// uni-`negatives` evaluation of `scorer`; users without enough negatives are skipped.
pub fn evaluate_with<S: Scorer>(
    scorer: &S,
    split: &Split,
    which: EvalSplit,
    k: usize,
    negatives: usize,
    seed: u64,
) -> Result<EvalResult> {
    let users = &split.users;
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(users.len().max(1));
    let chunk = users.len().div_ceil(threads).max(1);
    let mut outcomes: Vec<Option<crate::metrics::RankOutcome>> = vec![None; users.len()];
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = users
            .chunks(chunk)
            .zip(outcomes.chunks_mut(chunk))
            .map(|(us, out)| {
                scope.spawn(move || -> Result<()> {
                    for (u, slot) in us.iter().zip(out.iter_mut()) {
                        let (context, target) = split.context_and_target(u, which);
                        let history: Vec<u32> = u.history().collect();
                        let Ok(negs) = sample_negatives(&history, target, split.num_items, negatives, seed, u.user)
                        else {
                            continue;
                        };
                        let mut candidates = Vec::with_capacity(negs.len() + 1);
                        candidates.push(target);
                        candidates.extend(negs);
                        let scores = scorer.score(&context, &candidates)?;
                        *slot = Some(rank_metrics(scores[0], &scores[1..], k));
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join()
                .map_err(|_| Error::Eval("evaluation worker panicked".into()))??;
        }
        Ok(())
    })?;
    let mut acc = MetricAccumulator::default();
    for o in &outcomes {
        match o {
            Some(o) => acc.add(o),
            None => acc.skip(),
        }
    }
    Ok(acc.finish(k, negatives))
}

pub fn evaluate(
    model: &Model,
    split: &Split,
    which: EvalSplit,
    k: usize,
    negatives: usize,
    seed: u64,
) -> Result<EvalResult> {
    evaluate_with(model, split, which, k, negatives, seed)
}

const CHECKPOINT_HEADER: &str = "blossomrec-checkpoint 1";

/// Text checkpoint: a version line, `key=value` architecture lines, then one
/// `param <name> <dims>` line per tensor followed by its values on one line.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let c = &model.config;
    let a = &c.attention;
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_HEADER}");
    for (k, v) in [
        ("num_items", c.num_items.to_string()),
        ("layers", c.layers.to_string()),
        ("max_len", c.max_len.to_string()),
        ("dropout", c.dropout.to_string()),
        ("branches", c.branches.to_string()),
        ("comp_block", a.comp_block.to_string()),
        ("stride", a.stride.to_string()),
        ("sel_block", a.sel_block.to_string()),
        ("top_k", a.top_k.to_string()),
        ("window", a.window.to_string()),
        ("mask_block", a.mask_block.to_string()),
        ("heads", a.heads.to_string()),
        ("kv_groups", a.kv_groups.to_string()),
        ("d_model", a.d_model.to_string()),
        ("d_head", a.d_head.to_string()),
    ] {
        let _ = writeln!(out, "{k}={v}");
    }
    for (_, name, t) in model.store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(out, "param {name} {}", dims.join(","));
        let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{}", values.join(" "));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(bad("missing or unsupported version header".into()));
    }
    let mut meta = std::collections::HashMap::new();
    let mut lines = lines.peekable();
    while let Some(line) = lines.peek() {
        if line.starts_with("param ") {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
        meta.insert(k.to_string(), v.to_string());
        lines.next();
    }
    let get = |k: &str| -> Result<&String> { meta.get(k).ok_or_else(|| bad(format!("missing `{k}`"))) };
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
    let config = ModelConfig {
        attention: AttentionConfig {
            comp_block: num("comp_block")?,
            stride: num("stride")?,
            sel_block: num("sel_block")?,
            top_k: num("top_k")?,
            window: num("window")?,
            mask_block: num("mask_block")?,
            heads: num("heads")?,
            kv_groups: num("kv_groups")?,
            d_model: num("d_model")?,
            d_head: num("d_head")?,
        },
        layers: num("layers")?,
        max_len: num("max_len")?,
        dropout: get("dropout")?.parse().map_err(|_| bad("bad `dropout`".into()))?,
        branches: get("branches")?.parse().map_err(|_| bad("bad `branches`".into()))?,
        num_items: num("num_items")?,
    };
    let mut model = Model::new(config, 0).map_err(|e| bad(e.to_string()))?;
    let mut seen = vec![false; model.store.len()];
    while let Some(line) = lines.next() {
        let mut parts = line.split(' ');
        let (Some("param"), Some(name), Some(dims)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(format!("expected a `param` line, found `{line}`")));
        };
        let id = model
            .store
            .find(name)
            .ok_or_else(|| bad(format!("unknown parameter `{name}`")))?;
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape for `{name}`"))))
            .collect::<Result<_>>()?;
        if shape != model.store.get(id).shape() {
            return Err(bad(format!(
                "`{name}` has shape {shape:?}, architecture expects {:?}",
                model.store.get(id).shape()
            )));
        }
        let values: Vec<f64> = lines
            .next()
            .unwrap_or("")
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|v| v.parse().map_err(|_| bad(format!("bad value in `{name}`"))))
            .collect::<Result<_>>()?;
        *model.store.get_mut(id) = Tensor::new(&shape, values).map_err(|e| bad(e.to_string()))?;
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let id = model.store.ids().nth(i).expect("index in range");
        return Err(bad(format!("parameter `{}` missing", model.store.name(id))));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_out_split, make_synthetic, SynthConfig};
    use crate::numeric::grad_check;

    pub(crate) fn tiny_config(num_items: usize) -> ModelConfig {
        ModelConfig {
            attention: AttentionConfig {
                comp_block: 4,
                stride: 2,
                sel_block: 2,
                top_k: 2,
                window: 2,
                mask_block: 1,
                heads: 2,
                kv_groups: 1,
                d_model: 8,
                d_head: 4,
            },
            layers: 1,
            max_len: 20,
            dropout: 0.0,
            branches: Branches::Fused,
            num_items,
        }
    }

    fn tiny_split(users: usize, seed: u64) -> Split {
        let log = make_synthetic(&SynthConfig::new(users, 30, 2, 6, 0.1, seed)).unwrap();
        leave_one_out_split(&log, 3)
    }

    #[test]
    fn scores_against_loop_oracle() {
        let model = Model::new(tiny_config(12), 1).unwrap();
        let h: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let got = model.score_items(&h);
        let table = model.store.get(model.embedding.id);
        assert_eq!(got.len(), 12);
        for (i, s) in got.iter().enumerate() {
            let mut want = 0.0;
            for j in 0..8 {
                want += h[j] * table.at(i + 1, j);
            }
            assert!((s - want).abs() < 1e-12);
        }
        assert!(model.score_items(&[0.0; 8]).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn self_similarity_with_orthonormal_rows() {
        let mut rows = vec![vec![0.0; 6]];
        for i in 0..6 {
            let mut r = vec![0.0; 6];
            r[i] = 1.0;
            rows.push(r);
        }
        let table = Tensor::from_rows(&rows).unwrap();
        let scores = score_items(table.row(5), &table);
        let best = scores.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best + 1, 5);
    }

    #[test]
    fn loss_cases() {
        let tape = Tape::new();
        let logits = tape.input(Tensor::new(&[1, 2], vec![0.3, 0.3]).unwrap());
        let l = next_item_loss(&tape, logits, &[2]).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
        let sharp = tape.input(Tensor::new(&[1, 3], vec![0.0, 80.0, 0.0]).unwrap());
        let l = next_item_loss(&tape, sharp, &[2]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-30);
        assert!(matches!(next_item_loss(&tape, sharp, &[0]), Err(Error::Data(_))));
        let uniform = tape.input(Tensor::zeros(&[2, 7]));
        let l = next_item_loss(&tape, uniform, &[1, 7]).unwrap();
        assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_three_items() {
        let mut store = ParamStore::new();
        let h = store.add("h", Tensor::new(&[2, 3], vec![0.2, -0.4, 0.9, 1.1, 0.3, -0.7]).unwrap());
        let e = store.add(
            "e",
            Tensor::new(&[3, 3], vec![0.5, 0.1, -0.2, -0.3, 0.8, 0.4, 0.6, -0.5, 0.2]).unwrap(),
        );
        let report = grad_check(
            |tape, s| {
                let logits = tape.matmul_t(tape.param(s, h), tape.param(s, e))?;
                next_item_loss(tape, logits, &[3, 1])
            },
            &mut store,
            &[h, e],
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn whole_model_gradients() {
        let model = Model::new(tiny_config(10), 3).unwrap();
        let ex = TrainExample {
            input: vec![1, 4, 2, 9, 3, 3, 7],
            targets: vec![4, 2, 9, 3, 3, 7, 10],
        };
        let mut store = model.store.clone();
        let ids = model.param_ids();
        let report = grad_check(
            |tape, s| model.example_loss_in(tape, s, &ex, &mut Mode::Eval),
            &mut store,
            &ids,
            1e-5,
            Some(40),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn adam_zero_lr_is_a_no_op_and_clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let mut adam = Adam::new(&store, 0.0);
        adam.update(&mut store, &[Some(Tensor::new(&[2], vec![3.0, 4.0]).unwrap())]);
        assert_eq!(store.get(w).data(), &[1.0, -2.0]);
        let mut g = vec![Some(Tensor::new(&[2], vec![30.0, 40.0]).unwrap())];
        assert_eq!(clip_global_norm(&mut g, 5.0), 50.0);
        assert!((g[0].as_ref().unwrap().norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let split = tiny_split(20, 5);
        let tc = TrainConfig {
            lr: 0.01,
            batch_size: 8,
            epochs: 5,
            patience: 100,
            seed: 9,
            eval_k: 10,
            negatives: 10,
            clip_norm: 5.0,
        };
        let run = || {
            let mut cfg = tiny_config(split.num_items);
            cfg.dropout = 0.2;
            let mut model = Model::new(cfg, 4).unwrap();
            let out = train(&mut model, &split, &tc, |_| Ok(())).unwrap();
            (model.store, out.logs)
        };
        let (a, logs) = run();
        let (b, logs_b) = run();
        assert!(logs[4].train_loss < logs[0].train_loss, "{logs:?}");
        assert_eq!(logs, logs_b);
        for ((_, _, x), (_, _, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let split = tiny_split(8, 2);
        let mut model = Model::new(tiny_config(split.num_items), 4).unwrap();
        let before = model.store.clone();
        let tc = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            epochs: 2,
            negatives: 5,
            ..TrainConfig::default()
        };
        train(&mut model, &split, &tc, |_| Ok(())).unwrap();
        for ((_, _, x), (_, _, y)) in before.iter().zip(model.store.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn empty_training_set_is_a_data_error() {
        let split = Split {
            users: vec![],
            dropped: 3,
            num_items: 5,
        };
        let mut model = Model::new(tiny_config(5), 0).unwrap();
        let r = train(&mut model, &split, &TrainConfig::default(), |_| Ok(()));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn early_stopping_respects_patience() {
        let split = tiny_split(10, 3);
        let mut model = Model::new(tiny_config(split.num_items), 4).unwrap();
        let tc = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            epochs: 50,
            patience: 3,
            negatives: 5,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &split, &tc, |_| Ok(())).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.logs.len(), 4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let model = Model::new(tiny_config(7), 11).unwrap();
        save_checkpoint(&model, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.config, model.config);
        for ((_, n1, x), (_, n2, y)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(x.data(), y.data());
        }
        fs::write(&p, "not a checkpoint\n").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn popularity_prefers_frequent_items() {
        let split = tiny_split(30, 8);
        let pop = Popularity::fit(&split);
        let r = evaluate_with(&pop, &split, EvalSplit::Test, 10, 10, 1).unwrap();
        assert!((0.0..=1.0).contains(&r.ndcg_at_k));
        assert_eq!(r.num_users + r.skipped, split.users.len());
    }
}
