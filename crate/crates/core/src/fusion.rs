//! Gated fusion of the two sparse pathways and the encoder stack around it.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{sparse_gqa_on, HeadLayout, KeySets};
use crate::config::AttentionConfig;
use crate::embedding::RopeCache;
use crate::error::{Error, Result};
use crate::ltis::{ltis_attention, LtisParams};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::stis::{self, SparseMask};

/// Which attention pathways feed the layer output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branches {
    #[default]
    Fused,
    LtisOnly,
    StisOnly,
}

impl std::str::FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Self::Fused),
            "ltis-only" | "ltis" => Ok(Self::LtisOnly),
            "stis-only" | "stis" => Ok(Self::StisOnly),
            other => Err(Error::Config(format!("unknown branch mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Branches {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fused => "fused",
            Self::LtisOnly => "ltis-only",
            Self::StisOnly => "stis-only",
        })
    }
}

/// Evaluation runs deterministically; training applies dropout from `rng`.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn dropout(&mut self, tape: &Tape, x: Var) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { dropout, .. } if *dropout <= 0.0 => Ok(x),
            Mode::Train { dropout, rng } => {
                let shape = tape.value(x).shape().to_vec();
                let keep = 1.0 - *dropout;
                let n: usize = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.mul_const(x, Tensor::new(&shape, mask)?)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Parameters of one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct BlossomLayerParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub gate: GateParams,
    pub ffn: FfnParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub ltis: LtisParams,
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    normal_tensor(rng, &[rows, cols], (2.0 / (rows + cols) as f64).sqrt())
}

impl BlossomLayerParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let qw = cfg.heads * cfg.d_head;
        let kw = cfg.kv_groups * cfg.d_head;
        let w_q = store.add(format!("{prefix}.w_q"), glorot(rng, d, qw));
        let w_k = store.add(format!("{prefix}.w_k"), glorot(rng, d, kw));
        let w_v = store.add(format!("{prefix}.w_v"), glorot(rng, d, kw));
        let w_o = store.add(format!("{prefix}.w_o"), glorot(rng, qw, d));
        let gate = GateParams {
            w: store.add(format!("{prefix}.gate.w"), glorot(rng, 2 * d, d)),
            b: store.add(format!("{prefix}.gate.b"), Tensor::zeros(&[d])),
        };
        let ffn = FfnParams {
            w1: store.add(format!("{prefix}.ffn.w1"), glorot(rng, d, 4 * d)),
            b1: store.add(format!("{prefix}.ffn.b1"), Tensor::zeros(&[4 * d])),
            w2: store.add(format!("{prefix}.ffn.w2"), glorot(rng, 4 * d, d)),
            b2: store.add(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d])),
        };
        let mut norm = |name: &str| NormParams {
            gamma: store.add(format!("{prefix}.{name}.gamma"), Tensor::filled(&[d], 1.0)),
            beta: store.add(format!("{prefix}.{name}.beta"), Tensor::zeros(&[d])),
        };
        let norm1 = norm("ln1");
        let norm2 = norm("ln2");
        let ltis = LtisParams::init(store, prefix, cfg, rng);
        Self {
            w_q,
            w_k,
            w_v,
            w_o,
            gate,
            ffn,
            norm1,
            norm2,
            ltis,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.gate.w,
            self.gate.b,
            self.ffn.w1,
            self.ffn.b1,
            self.ffn.w2,
            self.ffn.b2,
            self.norm1.gamma,
            self.norm1.beta,
            self.norm2.gamma,
            self.norm2.beta,
        ];
        ids.extend(self.ltis.key_mlp.params());
        ids.extend(self.ltis.value_mlp.params());
        ids
    }
}

/// Grouped-query attention over `keys`, heads concatenated and projected by `w_o`.
pub fn gqa(tape: &Tape, q: Var, k: Var, v: Var, keys: Rc<KeySets>, w_o: Var, cfg: &AttentionConfig) -> Result<Var> {
    let layout = HeadLayout::new(cfg.heads, cfg.kv_groups, cfg.d_head)?;
    let heads = sparse_gqa_on(tape, q, k, v, keys, layout)?;
    tape.matmul(heads, w_o)
}

/// `α = σ([o_ltis | o_stis]·W + b)`, output `α ⊙ o_ltis + (1 − α) ⊙ o_stis`.
/// Returns the fused output and `α`.
pub fn gated_fuse(tape: &Tape, store: &ParamStore, o_ltis: Var, o_stis: Var, gate: &GateParams) -> Result<(Var, Var)> {
    let both = tape.concat_cols(o_ltis, o_stis)?;
    let logits = tape.affine(both, tape.param(store, gate.w), tape.param(store, gate.b))?;
    let alpha = tape.sigmoid(logits);
    let diff = tape.sub(o_ltis, o_stis)?;
    let mixed = tape.mul(alpha, diff)?;
    Ok((tape.add(o_stis, mixed)?, alpha))
}

/// Per-call state shared by the layers of one sequence.
pub struct LayerInputs<'a> {
    pub cfg: &'a AttentionConfig,
    pub rope: &'a RopeCache,
    pub mask: &'a SparseMask,
    pub branches: Branches,
}

/// Blossom attention output for hidden states `h` (`L × d`).
pub fn blossom_attention(
    tape: &Tape,
    store: &ParamStore,
    h: Var,
    params: &BlossomLayerParams,
    inputs: &LayerInputs<'_>,
) -> Result<Var> {
    let cfg = inputs.cfg;
    let len = tape.value(h).rows();
    let positions: Vec<usize> = (0..len).collect();
    let q = tape.matmul(h, tape.param(store, params.w_q))?;
    let k = tape.matmul(h, tape.param(store, params.w_k))?;
    let v = tape.matmul(h, tape.param(store, params.w_v))?;
    let q = inputs.rope.apply_on(tape, q, &positions)?;
    let k = inputs.rope.apply_on(tape, k, &positions)?;
    let w_o = tape.param(store, params.w_o);

    let o_ltis = match inputs.branches {
        Branches::StisOnly => None,
        _ => {
            let sets = params.ltis.key_sets(store, &tape.value(q), &tape.value(k), cfg)?;
            let a = ltis_attention(tape, q, k, v, Rc::new(sets), cfg)?;
            Some(tape.matmul(a, w_o)?)
        }
    };
    let o_stis = match inputs.branches {
        Branches::LtisOnly => None,
        _ => {
            let a = stis::stis_attention(tape, q, k, v, inputs.mask, cfg)?;
            Some(tape.matmul(a, w_o)?)
        }
    };
    match (o_ltis, o_stis) {
        (Some(l), Some(s)) => Ok(gated_fuse(tape, store, l, s, &params.gate)?.0),
        (Some(l), None) => Ok(l),
        (None, Some(s)) => Ok(s),
        (None, None) => unreachable!("at least one branch is always active"),
    }
}

/// Post-norm residual layer: `S = LN(H + Drop(Blossom(H)))`, `H' = LN(S + Drop(FFN(S)))`.
pub fn encoder_layer(
    tape: &Tape,
    store: &ParamStore,
    h: Var,
    params: &BlossomLayerParams,
    inputs: &LayerInputs<'_>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let attn = blossom_attention(tape, store, h, params, inputs)?;
    let attn = mode.dropout(tape, attn)?;
    let s = tape.add(h, attn)?;
    let s = tape.layer_norm(
        s,
        tape.param(store, params.norm1.gamma),
        tape.param(store, params.norm1.beta),
    )?;

    let f = tape.affine(s, tape.param(store, params.ffn.w1), tape.param(store, params.ffn.b1))?;
    let f = tape.gelu(f);
    let f = tape.affine(f, tape.param(store, params.ffn.w2), tape.param(store, params.ffn.b2))?;
    let f = mode.dropout(tape, f)?;
    let out = tape.add(s, f)?;
    tape.layer_norm(
        out,
        tape.param(store, params.norm2.gamma),
        tape.param(store, params.norm2.beta),
    )
}

/// Final `H = Hᴺ·W_N + b_N` projection.
#[derive(Clone, Copy, Debug)]
pub struct OutputParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl OutputParams {
    pub fn init(store: &mut ParamStore, d: usize) -> Self {
        Self {
            w: store.add("out.w", Tensor::identity(d)),
            b: store.add("out.b", Tensor::zeros(&[d])),
        }
    }
}

/// Runs `layers.len()` encoder layers over `e`, then the output projection.
pub fn encode(
    tape: &Tape,
    store: &ParamStore,
    e: Var,
    layers: &[BlossomLayerParams],
    output: &OutputParams,
    inputs: &LayerInputs<'_>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    let mut h = e;
    for layer in layers {
        h = encoder_layer(tape, store, h, layer, inputs, mode)?;
    }
    tape.affine(h, tape.param(store, output.w), tape.param(store, output.b))
}
