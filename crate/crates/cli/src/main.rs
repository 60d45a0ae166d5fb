use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blossomrec::analysis::{complexity_report, count_participating, render_kv, render_table};
use blossomrec::data::{
    leave_one_out_split, load_interactions, make_synthetic, EvalSplit, InteractionLog, SynthConfig,
};
use blossomrec::metrics::EvalResult;
use blossomrec::recommender::{evaluate, evaluate_with, load_checkpoint, save_checkpoint, train, Model, Popularity};
use blossomrec::run::{RunConfig, SEED_ENV};
use blossomrec::stis::build_power_mask;
use blossomrec::{verify, AttentionConfig, Error};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "blossomrec",
    version,
    about = "Sequential recommendation with fused sparse attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.01`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Interaction log (`user<TAB>item<TAB>timestamp`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Random seed; falls back to $BLOSSOM_SEED, then the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let overrides = self.overrides()?;
        let env = std::env::var(SEED_ENV).ok();
        RunConfig::resolve(self.config.as_deref(), &overrides, env.as_deref())
    }

    /// Keys set by the config file or flags.
    fn explicit_keys(&self) -> Result<Vec<String>, Error> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(io_err(p))?),
            None => None,
        };
        Ok(RunConfig::explicit_keys(text.as_deref(), &self.overrides()?))
    }

    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(d) = &self.data {
            overrides.push(("data".into(), d.display().to_string()));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        Ok(overrides)
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Kv,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Scorer {
    Model,
    Popularity,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its best checkpoint and a JSON-lines metric log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint written after training.
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        /// Per-epoch metric log (one JSON object per line).
        #[arg(long, default_value = "metrics.jsonl")]
        metrics: PathBuf,
    },
    /// Evaluate a checkpoint with sampled negatives.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Cutoff K; defaults to `eval_k`.
        #[arg(long)]
        k: Option<usize>,
        /// Rank with the checkpoint or with training-set popularity.
        #[arg(long, value_enum, default_value = "model")]
        scorer: Scorer,
    },
    /// Participating-interaction and complexity tables.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use the published sparsity settings.
        #[arg(long)]
        paper_defaults: bool,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        lengths: Vec<usize>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Width `d` in the cost expressions; defaults to `d_model`.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Write the power mask as `row,visible_index` CSV.
    DumpMask {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        len: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also show future positions.
        #[arg(long)]
        non_causal: bool,
    },
    /// Generate a block-structured synthetic interaction log.
    Synth {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value_t = 25)]
        block_len: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle, gradient, mask-law and counting checks.
    Verify,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownKey(_) => 2,
        Error::Data(_) | Error::Parse { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::Io { .. } => 5,
        _ => 1,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Loads the configured dataset; any failure to read it is a data error.
fn load_dataset(run: &RunConfig) -> Result<InteractionLog, Error> {
    let path = run
        .data
        .as_ref()
        .ok_or_else(|| Error::Data("no dataset given (use --data or `data = ...`)".into()))?;
    load_interactions(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Data(format!("cannot read {}: {source}", path.display())),
        other => other,
    })
}

fn warn_skipped(r: &EvalResult) {
    if r.skipped > 0 {
        eprintln!(
            "skipped {} users with fewer than {} candidate negatives",
            r.skipped, r.negatives
        );
    }
}

fn cmd_train(cfg: &ConfigArgs, checkpoint: &Path, metrics: &Path) -> Result<(), Error> {
    let run = cfg.resolve()?;
    let log = load_dataset(&run)?;
    let split = leave_one_out_split(&log, run.min_len);
    if split.dropped > 0 {
        eprintln!(
            "dropped {} users with fewer than {} interactions",
            split.dropped, run.min_len
        );
    }
    let mut model = Model::new(run.model_config(split.num_items), run.seed)?;
    let file = fs::File::create(metrics).map_err(io_err(metrics))?;
    let mut out = BufWriter::new(file);
    let outcome = train(&mut model, &split, &run.train_config(), |epoch| {
        let line = serde_json::to_string(epoch).map_err(|e| Error::Training(e.to_string()))?;
        writeln!(out, "{line}")
            .and_then(|_| out.flush())
            .map_err(io_err(metrics))
    })?;
    save_checkpoint(&model, checkpoint)?;
    let mapping = checkpoint.with_extension("items.tsv");
    log.items.write_mapping(&mapping)?;
    let test = evaluate(&model, &split, EvalSplit::Test, run.eval_k, run.negatives, run.seed)?;
    warn_skipped(&test);
    let summary = serde_json::json!({
        "epochs": outcome.logs.len(),
        "best_epoch": outcome.state.best_epoch,
        "best_valid_ndcg": outcome.state.best_ndcg,
        "stopped_early": outcome.stopped_early,
        "test": test,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_eval(
    cfg: &ConfigArgs,
    checkpoint: Option<&Path>,
    split_name: &str,
    k: Option<usize>,
    scorer: Scorer,
) -> Result<(), Error> {
    let run = cfg.resolve()?;
    let which: EvalSplit = split_name.parse()?;
    let log = load_dataset(&run)?;
    let split = leave_one_out_split(&log, run.min_len);
    let k = k.unwrap_or(run.eval_k);
    let result = match scorer {
        Scorer::Popularity => evaluate_with(&Popularity::fit(&split), &split, which, k, run.negatives, run.seed)?,
        Scorer::Model => {
            let path = checkpoint.ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
            let model = load_checkpoint(path)?;
            if model.config.num_items != split.num_items {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has {} items, dataset has {}",
                    model.config.num_items, split.num_items
                )));
            }
            let conflicts = run.architecture_conflicts(&cfg.explicit_keys()?, &model.config);
            if !conflicts.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "configured {} differ from the checkpoint",
                    conflicts.join(", ")
                )));
            }
            evaluate(&model, &split, which, k, run.negatives, run.seed)?
        }
    };
    warn_skipped(&result);
    let json = serde_json::to_string(&result).map_err(|e| Error::Eval(e.to_string()))?;
    println!("{json}");
    Ok(())
}

fn cmd_report(
    cfg: &ConfigArgs,
    published: bool,
    lengths: &[usize],
    format: Format,
    dim: Option<usize>,
) -> Result<(), Error> {
    let attention = if published {
        AttentionConfig::published()
    } else {
        cfg.resolve()?.attention()
    };
    let d = dim.unwrap_or(attention.d_model);
    let mut reports = Vec::new();
    let mut costs = Vec::new();
    for &len in lengths {
        if len == 0 {
            return Err(Error::Config("lengths must be positive".into()));
        }
        reports.push(count_participating(len, &attention)?);
        costs.push(complexity_report(len, d, &attention));
    }
    let text = match format {
        Format::Text => render_table(&reports, &costs),
        Format::Kv => render_kv(&reports, &costs),
    };
    print!("{text}");
    Ok(())
}

fn cmd_dump_mask(cfg: &ConfigArgs, len: usize, out: &Path, non_causal: bool) -> Result<(), Error> {
    let run = cfg.resolve()?;
    let mask = build_power_mask(len, run.mask_block, run.window, !non_causal)?;
    let file = fs::File::create(out).map_err(io_err(out))?;
    mask.write_csv(BufWriter::new(file)).map_err(io_err(out))?;
    eprintln!("wrote {} visible pairs to {}", mask.nnz(), out.display());
    Ok(())
}

fn cmd_synth(synth: SynthConfig, out: &Path) -> Result<(), Error> {
    let log = make_synthetic(&synth)?;
    log.write_tsv(out)?;
    log.items.write_mapping(&out.with_extension("items.tsv"))?;
    eprintln!(
        "wrote {} interactions for {} users to {}",
        log.records().len(),
        log.num_users(),
        out.display()
    );
    Ok(())
}

fn cmd_verify() -> Result<bool, Error> {
    let checks = verify::run_all()?;
    for c in &checks {
        println!("{c}");
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train {
            cfg,
            checkpoint,
            metrics,
        } => cmd_train(&cfg, &checkpoint, &metrics).map(|_| true),
        Command::Eval {
            cfg,
            checkpoint,
            split,
            k,
            scorer,
        } => cmd_eval(&cfg, checkpoint.as_deref(), &split, k, scorer).map(|_| true),
        Command::Report {
            cfg,
            paper_defaults,
            lengths,
            format,
            dim,
        } => cmd_report(&cfg, paper_defaults, &lengths, format, dim).map(|_| true),
        Command::DumpMask {
            cfg,
            len,
            out,
            non_causal,
        } => cmd_dump_mask(&cfg, len, &out, non_causal).map(|_| true),
        Command::Synth {
            users,
            items,
            blocks,
            block_len,
            noise,
            seed,
            out,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => ConfigArgs::default().resolve()?.seed,
            };
            cmd_synth(SynthConfig::new(users, items, blocks, block_len, noise, seed), &out).map(|_| true)
        }
        Command::Verify => cmd_verify(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
