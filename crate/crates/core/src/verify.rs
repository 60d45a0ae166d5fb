//! Self-checks behind the `verify` command: oracle equivalence, gradient
//! agreement, mask law and interaction counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::count_participating;
use crate::config::AttentionConfig;
use crate::data::TrainExample;
use crate::embedding::RopeCache;
use crate::error::Result;
use crate::fusion::{blossom_attention, BlossomLayerParams, Branches, LayerInputs};
use crate::numeric::{dense_causal_gqa, grad_check, ParamId, ParamStore, Tape, Tensor};
use crate::recommender::{Model, ModelConfig};
use crate::stis::{build_power_mask, mask_for, power_rule};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Configuration under which every selection block is chosen and the power
/// mask admits every causal pair.
pub fn saturated_config(len: usize, d_head: usize) -> AttentionConfig {
    AttentionConfig {
        comp_block: 4,
        stride: 2,
        sel_block: 4,
        top_k: len.div_ceil(4),
        window: len,
        mask_block: 1,
        heads: 4,
        kv_groups: 2,
        d_model: 4 * d_head,
        d_head,
    }
}

/// Max-abs difference between fused attention under a saturated
/// configuration and dense causal grouped-query attention.
pub fn dense_collapse_error(len: usize, d_head: usize, seed: u64) -> Result<f64> {
    let cfg = saturated_config(len, d_head);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = BlossomLayerParams::init(&mut store, "layer", &cfg, &mut rng);
    // Arbitrary gate: the two branches agree, so any convex weights must collapse.
    *store.get_mut(params.gate.b) = uniform(&mut rng, &[cfg.d_model]).scale(3.0);
    let h = uniform(&mut rng, &[len, cfg.d_model]);
    let rope = RopeCache::new(d_head, len)?;
    let mask = mask_for(len, &cfg, true)?;
    let inputs = LayerInputs {
        cfg: &cfg,
        rope: &rope,
        mask: &mask,
        branches: Branches::Fused,
    };
    let tape = Tape::new();
    let out = blossom_attention(&tape, &store, tape.input(h.clone()), &params, &inputs)?;

    let positions: Vec<usize> = (0..len).collect();
    let q = rope.apply(&h.matmul(store.get(params.w_q))?, &positions)?;
    let k = rope.apply(&h.matmul(store.get(params.w_k))?, &positions)?;
    let v = h.matmul(store.get(params.w_v))?;
    let dense = dense_causal_gqa(&q, &k, &v, cfg.heads, cfg.kv_groups, d_head)?.matmul(store.get(params.w_o))?;
    Ok(tape.value(out).max_abs_diff(&dense))
}

/// Named parameter groups of a model.
pub fn parameter_groups(model: &Model) -> Vec<(&'static str, Vec<ParamId>)> {
    let mut groups: Vec<(&'static str, Vec<ParamId>)> = vec![
        ("embedding", vec![model.embedding.id]),
        ("projections", vec![]),
        ("compression", vec![]),
        ("gate", vec![]),
        ("ffn", vec![]),
        ("layer_norm", vec![]),
        ("output", vec![model.output.w, model.output.b]),
    ];
    for l in &model.layers {
        groups[1].1.extend([l.w_q, l.w_k, l.w_v, l.w_o]);
        groups[2].1.extend(l.ltis.key_mlp.params());
        groups[2].1.extend(l.ltis.value_mlp.params());
        groups[3].1.extend([l.gate.w, l.gate.b]);
        groups[4].1.extend([l.ffn.w1, l.ffn.b1, l.ffn.w2, l.ffn.b2]);
        groups[5]
            .1
            .extend([l.norm1.gamma, l.norm1.beta, l.norm2.gamma, l.norm2.beta]);
    }
    groups
}

/// Small model used for gradient checks.
pub fn gradient_check_model(seed: u64) -> Result<Model> {
    let config = ModelConfig {
        attention: AttentionConfig {
            comp_block: 4,
            stride: 2,
            sel_block: 2,
            top_k: 2,
            window: 2,
            mask_block: 1,
            heads: 4,
            kv_groups: 2,
            d_model: 8,
            d_head: 2,
        },
        layers: 2,
        max_len: 16,
        dropout: 0.0,
        branches: Branches::Fused,
        num_items: 12,
    };
    Model::new(config, seed)
}

/// Relative gradient error per parameter group on a two-sequence batch.
pub fn gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64, usize)>> {
    let model = gradient_check_model(seed)?;
    let batch = [
        TrainExample {
            input: vec![3, 1, 4, 1, 5, 9, 2, 6, 5, 3],
            targets: vec![1, 4, 1, 5, 9, 2, 6, 5, 3, 5],
        },
        TrainExample {
            input: vec![2, 7, 1, 8, 2, 8],
            targets: vec![7, 1, 8, 2, 8, 12],
        },
    ];
    let mut store = model.store.clone();
    let mut out = Vec::new();
    for (name, ids) in parameter_groups(&model) {
        let report = grad_check(
            |tape, s| {
                let a = model.example_loss_in(tape, s, &batch[0], &mut crate::fusion::Mode::Eval)?;
                let b = model.example_loss_in(tape, s, &batch[1], &mut crate::fusion::Mode::Eval)?;
                let total = tape.add(a, b)?;
                Ok(tape.scale(total, 0.5))
            },
            &mut store,
            &ids,
            1e-5,
            None,
        )?;
        let entries = report.params.iter().map(|p| p.entries_checked).sum();
        out.push((name, report.max_rel_error, entries));
    }
    Ok(out)
}

/// Random `(len, block, window)` mask configurations checked against the
/// three-case rule, plus the doubling law on causal rows. Returns the number
/// of violations found.
pub fn mask_law_violations(configs: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..configs {
        let len = rng.gen_range(1..=160);
        let block = rng.gen_range(1..=6);
        let window = rng.gen_range(1..=5);
        for causal in [true, false] {
            let m = build_power_mask(len, block, window, causal)?;
            for i in 0..len {
                for j in 0..len {
                    let want = (!causal || j <= i) && power_rule(i, j, len, block, window);
                    if m.is_visible(i, j) != want {
                        violations += 1;
                    }
                }
            }
        }
        if len >= window * block {
            let last = |l: usize| -> Result<usize> { Ok(build_power_mask(l, block, window, true)?.row(l - 1).len()) };
            if last(2 * len)? > last(len)? + 2 * block {
                violations += 1;
            }
        }
    }
    Ok(violations)
}

/// All checks with their verdicts.
pub fn run_all() -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        for len in [16, 32, 64] {
            for d_head in [4, 8] {
                worst = worst.max(dense_collapse_error(len, d_head, seed)?);
            }
        }
    }
    checks.push(Check {
        name: "dense collapse".into(),
        passed: worst <= 1e-8,
        detail: format!("max abs error {worst:.3e} (limit 1e-8)"),
    });

    for (group, err, entries) in gradient_errors(7)? {
        checks.push(Check {
            name: format!("gradient {group}"),
            passed: err <= 1e-4,
            detail: format!("max rel error {err:.3e} over {entries} entries (limit 1e-4)"),
        });
    }

    let violations = mask_law_violations(50, 11)?;
    checks.push(Check {
        name: "mask law".into(),
        passed: violations == 0,
        detail: format!("{violations} violations over 50 configurations"),
    });

    let cfg = AttentionConfig::published();
    let mut totals = Vec::new();
    let mut honest = true;
    for len in [256, 512, 1024, 2048] {
        let r = count_participating(len, &cfg)?;
        honest &= r.deduplicated <= r.total;
        totals.push(r.total);
    }
    checks.push(Check {
        name: "interaction counts".into(),
        passed: totals == [103, 120, 153, 218] && honest,
        detail: format!("totals {totals:?}, deduplicated ≤ total: {honest}"),
    });
    Ok(checks)
}
