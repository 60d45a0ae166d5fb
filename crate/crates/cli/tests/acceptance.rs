//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line
//! straight to stdout, so the lines appear even when output is captured.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use blossomrec::analysis::count_participating;
use blossomrec::data::{leave_one_out_split, make_synthetic, EvalSplit, Split, SynthConfig};
use blossomrec::embedding::RopeCache;
use blossomrec::fusion::{blossom_attention, BlossomLayerParams, Branches, LayerInputs};
use blossomrec::numeric::{ParamStore, Tape, Tensor};
use blossomrec::recommender::{evaluate, evaluate_with, train, Model, ModelConfig, Popularity, TrainConfig};
use blossomrec::stis::{build_power_mask, mask_for};
use blossomrec::verify::gradient_errors;
use blossomrec::AttentionConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(n: usize, name: &str, elapsed: Duration, o: &Outcome) {
    let status = if o.passed { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {n} {name}: {status} ({:.1}s) {}\n",
        elapsed.as_secs_f64(),
        o.detail
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn timed(n: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            o.passed = false;
            o.detail
                .push_str(&format!("; exceeded {:.0}s budget", limit.as_secs_f64()));
        }
    }
    report(n, name, elapsed, &o);
    o.passed
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_blossomrec"));
    c.env_remove("BLOSSOM_SEED");
    c
}

fn published_counts() -> Outcome {
    let start = Instant::now();
    let out = cli()
        .args([
            "report",
            "--paper-defaults",
            "--lengths",
            "256,512,1024,2048",
            "--format",
            "kv",
        ])
        .output()
        .expect("cli runs");
    let runtime = start.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let value = |key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .map(str::to_string)
    };
    let totals: Vec<Option<String>> = [256, 512, 1024, 2048]
        .iter()
        .map(|l| value(&format!("L{l}.total")))
        .collect();
    let want: Vec<Option<String>> = ["103", "120", "153", "218"]
        .iter()
        .map(|s| Some(s.to_string()))
        .collect();
    let reduction = value("L2048.reduction");
    Outcome {
        passed: out.status.success()
            && totals == want
            && reduction.as_deref() == Some("89.4%")
            && runtime < Duration::from_secs(1),
        detail: format!(
            "totals {:?}, reduction at 2048 {:?}, report took {:.3}s",
            totals.iter().flatten().collect::<Vec<_>>(),
            reduction,
            runtime.as_secs_f64()
        ),
    }
}

fn rope_oracle(x: &Tensor, d_head: usize) -> Tensor {
    let mut out = x.clone();
    let heads = x.cols() / d_head;
    for p in 0..x.rows() {
        for h in 0..heads {
            for i in 0..d_head / 2 {
                let theta = p as f64 * 10000f64.powf(-2.0 * i as f64 / d_head as f64);
                let (s, c) = theta.sin_cos();
                let a = x.at(p, h * d_head + 2 * i);
                let b = x.at(p, h * d_head + 2 * i + 1);
                out.set(p, h * d_head + 2 * i, a * c - b * s);
                out.set(p, h * d_head + 2 * i + 1, a * s + b * c);
            }
        }
    }
    out
}

/// Causal grouped-query attention computed position by position.
fn dense_oracle(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, groups: usize, dh: usize) -> Tensor {
    let len = q.rows();
    let mut out = Tensor::zeros(&[len, heads * dh]);
    for h in 0..heads {
        let g = h / (heads / groups);
        for i in 0..len {
            let logits: Vec<f64> = (0..=i)
                .map(|j| (0..dh).map(|t| q.at(i, h * dh + t) * k.at(j, g * dh + t)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for t in 0..dh {
                let o: f64 = (0..=i).map(|j| w[j] / z * v.at(j, g * dh + t)).sum();
                out.set(i, h * dh + t, o);
            }
        }
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dense_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..20u64 {
        for len in [16usize, 32, 64] {
            for d_head in [4usize, 8] {
                let cfg = AttentionConfig {
                    comp_block: 4,
                    stride: 2,
                    sel_block: 4,
                    top_k: len / 4,
                    window: len,
                    mask_block: 1,
                    heads: 4,
                    kv_groups: 2,
                    d_model: 4 * d_head,
                    d_head,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let mut store = ParamStore::new();
                let params = BlossomLayerParams::init(&mut store, "l", &cfg, &mut rng);
                *store.get_mut(params.gate.b) = random_tensor(&mut rng, &[cfg.d_model]).scale(4.0);
                *store.get_mut(params.gate.w) = random_tensor(&mut rng, &[2 * cfg.d_model, cfg.d_model]);
                let h = random_tensor(&mut rng, &[len, cfg.d_model]);
                let rope = RopeCache::new(d_head, len).unwrap();
                let mask = mask_for(len, &cfg, true).unwrap();
                let inputs = LayerInputs {
                    cfg: &cfg,
                    rope: &rope,
                    mask: &mask,
                    branches: Branches::Fused,
                };
                let tape = Tape::new();
                let fused = blossom_attention(&tape, &store, tape.input(h.clone()), &params, &inputs).unwrap();
                let q = rope_oracle(&h.matmul(store.get(params.w_q)).unwrap(), d_head);
                let k = rope_oracle(&h.matmul(store.get(params.w_k)).unwrap(), d_head);
                let v = h.matmul(store.get(params.w_v)).unwrap();
                let want = dense_oracle(&q, &k, &v, 4, 2, d_head)
                    .matmul(store.get(params.w_o))
                    .unwrap();
                worst = worst.max(tape.value(fused).max_abs_diff(&want));
                cases += 1;
            }
        }
    }
    Outcome {
        passed: worst <= 1e-8,
        detail: format!("max abs error {worst:.2e} over {cases} cases (tolerance 1e-8)"),
    }
}

fn gradient_correctness() -> Outcome {
    let errors = gradient_errors(3).expect("gradient check runs");
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let groups: Vec<String> = errors.iter().map(|(g, e, n)| format!("{g}={e:.1e}/{n}")).collect();
    Outcome {
        passed: worst <= 1e-4 && errors.len() == 7,
        detail: format!("max relative error {worst:.2e} (tolerance 1e-4); {}", groups.join(" ")),
    }
}

fn rule(i: usize, j: usize, len: usize, block: usize, window: usize) -> bool {
    let bd = (i / block).abs_diff(j / block);
    i.abs_diff(j) < window * block || (bd > 0 && bd & (bd - 1) == 0) || j >= len - block.min(len)
}

fn mask_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut growth_failures = 0;
    let mut growth_checked = 0;
    for _ in 0..50 {
        let len = rng.gen_range(1..=256);
        let block = rng.gen_range(1..=8);
        let window = rng.gen_range(1..=8);
        for causal in [true, false] {
            let m = build_power_mask(len, block, window, causal).unwrap();
            for i in 0..len {
                for j in 0..len {
                    let want = (!causal || j <= i) && rule(i, j, len, block, window);
                    if m.is_visible(i, j) != want {
                        mismatches += 1;
                    }
                }
            }
        }
        // The doubling law needs an unsaturated window (L ≥ win·blk).
        if len >= window * block {
            growth_checked += 1;
            let small = build_power_mask(len, block, window, true).unwrap();
            let large = build_power_mask(2 * len, block, window, true).unwrap();
            let max = |m: &blossomrec::stis::SparseMask| m.rows().iter().map(Vec::len).max().unwrap();
            if large.row(2 * len - 1).len() > small.row(len - 1).len() + 2 * block
                || max(&large) > max(&small) + 2 * block
            {
                growth_failures += 1;
            }
        }
    }
    Outcome {
        passed: mismatches == 0 && growth_failures == 0,
        detail: format!(
            "{mismatches} rule mismatches over 50 configurations; growth law violated in {growth_failures} of {growth_checked} unsaturated configurations"
        ),
    }
}

fn synthetic_split() -> Split {
    let log = make_synthetic(&SynthConfig::new(500, 200, 4, 25, 0.1, 42)).unwrap();
    leave_one_out_split(&log, 3)
}

fn model_config(split: &Split, branches: Branches) -> ModelConfig {
    ModelConfig {
        attention: AttentionConfig {
            d_model: 32,
            d_head: 4,
            ..AttentionConfig::published()
        },
        layers: 1,
        max_len: 200,
        dropout: 0.2,
        branches,
        num_items: split.num_items,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        epochs: 20,
        patience: 20,
        seed: 42,
        ..TrainConfig::default()
    }
}

/// Test-split NDCG@10 before and after training with `branches`.
fn trained_ndcg(split: &Split, branches: Branches) -> (f64, f64) {
    let mut model = Model::new(model_config(split, branches), 42).unwrap();
    let untrained = evaluate(&model, split, EvalSplit::Test, 10, 100, 42).unwrap().ndcg_at_k;
    train(&mut model, split, &train_config(), |_| Ok(())).unwrap();
    let trained = evaluate(&model, split, EvalSplit::Test, 10, 100, 42).unwrap().ndcg_at_k;
    (untrained, trained)
}

fn learning_signal(split: &Split) -> (Outcome, f64) {
    let (untrained, trained) = trained_ndcg(split, Branches::Fused);
    let popularity = evaluate_with(&Popularity::fit(split), split, EvalSplit::Test, 10, 100, 42)
        .unwrap()
        .ndcg_at_k;
    let outcome = Outcome {
        passed: trained - untrained >= 0.05 && trained - popularity >= 0.05,
        detail: format!(
            "NDCG@10 trained {trained:.4}, untrained {untrained:.4}, popularity {popularity:.4} (margin 0.05)"
        ),
    };
    (outcome, trained)
}

fn ablation(split: &Split, fused: f64) -> Outcome {
    let (_, ltis) = trained_ndcg(split, Branches::LtisOnly);
    let (_, stis) = trained_ndcg(split, Branches::StisOnly);
    Outcome {
        passed: fused >= ltis.max(stis) - 0.01,
        detail: format!("NDCG@10 fused {fused:.4}, ltis-only {ltis:.4}, stis-only {stis:.4} (slack 0.01)"),
    }
}

fn train_cli(dir: &Path, data: &Path, tag: &str) -> Vec<u8> {
    let metrics = dir.join(format!("{tag}.jsonl"));
    let out = cli()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            dir.join(format!("{tag}.ckpt")).to_str().unwrap(),
            "--metrics",
            metrics.to_str().unwrap(),
            "--seed",
            "11",
        ])
        .args([
            "--set",
            "d_model=16",
            "--set",
            "heads=4",
            "--set",
            "layers=1",
            "--set",
            "epochs=3",
        ])
        .args(["--set", "batch_size=16", "--set", "negatives=20"])
        .output()
        .expect("cli runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fs::read(metrics).unwrap()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s.tsv");
    let synth = cli()
        .args([
            "synth",
            "--users",
            "60",
            "--items",
            "50",
            "--blocks",
            "2",
            "--block-len",
            "12",
            "--seed",
            "3",
        ])
        .args(["--out", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(synth.status.success());
    let a = train_cli(dir.path(), &data, "a");
    let b = train_cli(dir.path(), &data, "b");
    Outcome {
        passed: a == b && !a.is_empty(),
        detail: format!(
            "metric logs of {} and {} bytes, identical: {}",
            a.len(),
            b.len(),
            a == b
        ),
    }
}

fn counting_honesty() -> Outcome {
    let cfg = AttentionConfig::published();
    let mut pairs = Vec::new();
    let mut ok = true;
    for len in [256, 512, 1024, 2048] {
        let r = count_participating(len, &cfg).unwrap();
        ok &= r.deduplicated <= r.total;
        pairs.push(format!("L={len}: {}≤{}", r.deduplicated, r.total));
    }
    let out = cli()
        .args(["report", "--paper-defaults", "--format", "kv"])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    let reported = [256, 512, 1024, 2048]
        .iter()
        .all(|l| text.contains(&format!("L{l}.total=")) && text.contains(&format!("L{l}.deduplicated=")));
    Outcome {
        passed: ok && reported,
        detail: format!("{}; both counts reported: {reported}", pairs.join(", ")),
    }
}

#[test]
fn acceptance_criteria() {
    let mut passed = Vec::new();
    passed.push(timed(1, "published interaction counts", None, published_counts));
    passed.push(timed(
        2,
        "dense-oracle equivalence",
        Some(Duration::from_secs(30)),
        dense_equivalence,
    ));
    passed.push(timed(
        3,
        "gradient correctness",
        Some(Duration::from_secs(120)),
        gradient_correctness,
    ));
    passed.push(timed(4, "mask law", Some(Duration::from_secs(30)), mask_law));
    let split = synthetic_split();
    let mut fused = 0.0;
    passed.push(timed(5, "learning signal", Some(Duration::from_secs(600)), || {
        let (o, f) = learning_signal(&split);
        fused = f;
        o
    }));
    passed.push(timed(6, "ablation direction", Some(Duration::from_secs(1800)), || {
        ablation(&split, fused)
    }));
    passed.push(timed(7, "determinism", None, determinism));
    passed.push(timed(8, "counting honesty", None, counting_honesty));
    let failed: Vec<usize> = passed
        .iter()
        .enumerate()
        .filter(|(_, p)| !**p)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
