use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use longgen_cli::settings::{parse_list, KvFile, Resolver, Settings};
use longgen_cli::task::TaskKind;
use longgen_cli::train::TrainConfig;
use longgen_cli::{bench, cost, equiv, gradcheck, toy, CliError, EXIT_FAILURE, EXIT_OK};
use longgen_core::costmodel::FlopsConvention;
use longgen_core::{Pattern, Placement};

#[derive(Parser)]
#[command(name = "longgen", version, about = "Hybrid sparse-attention desk harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV reports and checkpoints.
    #[arg(long)]
    out: Option<String>,
    /// Flat `key = value` file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    block_size: Option<usize>,
    /// full | sink:S,W | stride:K
    #[arg(long)]
    pattern: Option<Pattern>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    full_fraction: Option<f64>,
    /// top | middle | bottom | interleave
    #[arg(long)]
    placement: Option<Placement>,
}

#[derive(Subcommand)]
enum Command {
    /// Blocked kernel vs dense reference over patterns × N × D.
    Equiv {
        #[command(flatten)]
        common: Common,
        /// Pattern list, `;`-separated (e.g. `full;sink:1,2;stride:4`).
        #[arg(long)]
        patterns: Option<String>,
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Drop diagonal blocks from the kernel's layout; the suite must fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Finite-difference checks of attention and model gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Dense vs blocked forward/backward wall-clock.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        head_dim: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        include_full: bool,
    },
    /// Train toy hybrids on a synthetic task and evaluate needle accuracy.
    TrainToy {
        #[command(flatten)]
        common: Common,
        /// copy | needle
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        head_dim: Option<usize>,
        #[arg(long)]
        ffn_mult: Option<usize>,
        /// Placement list; `--placement` sets a single one.
        #[arg(long)]
        placements: Option<String>,
        /// Full-fraction list (0 = all sparse); `--full-fraction` sets a single one.
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long)]
        eval_samples: Option<usize>,
        #[arg(long)]
        log_every: Option<usize>,
        #[arg(long)]
        allow_large: bool,
    },
    /// Closed-form cost sweep over full-layer counts.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_tokens: Option<usize>,
        #[arg(long)]
        head_dim: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        full_counts: Option<String>,
        #[arg(long)]
        ffn_share: Option<f64>,
        /// exact | tile
        #[arg(long)]
        convention: Option<String>,
    },
}

struct Run {
    resolver: Resolver,
    seed: u64,
    out: PathBuf,
}

impl Run {
    fn start(common: &Common) -> Result<Self, CliError> {
        let file = match &common.config {
            Some(path) => KvFile::load(path)?,
            None => KvFile::default(),
        };
        let mut resolver = Resolver::new(file);
        let seed = resolver.pick("seed", common.seed, 0)?;
        let out: String = resolver.pick("out", common.out.clone(), "out".to_string())?;
        Ok(Self {
            resolver,
            seed,
            out: PathBuf::from(out),
        })
    }

    fn list<T>(&mut self, key: &str, flag: &Option<String>, default: Vec<T>) -> Result<Vec<T>, CliError>
    where
        T: std::str::FromStr + std::fmt::Display,
        T::Err: std::fmt::Display,
    {
        let parsed = flag
            .as_deref()
            .map(parse_list)
            .transpose()
            .map_err(|e| CliError::Usage(format!("--{key}: {e}")))?;
        self.resolver.pick_list(key, parsed, default)
    }

    fn finish(self, name: &str, outputs: &[(&str, longgen_cli::report::Csv)]) -> Result<(), CliError> {
        let mut settings: Settings = self.resolver.finish()?;
        settings.insert("command", name);
        for (file, csv) in outputs {
            let path = csv.write(&self.out, file, name, self.seed, &settings)?;
            println!("wrote {}", path.display());
        }
        Ok(())
    }
}

fn convention(s: &str) -> Result<FlopsConvention, CliError> {
    match s {
        "exact" => Ok(FlopsConvention::TokenExact),
        "tile" => Ok(FlopsConvention::Tile),
        _ => Err(CliError::Usage(format!("unknown FLOPs convention `{s}` (exact|tile)"))),
    }
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Equiv {
            common,
            patterns,
            sizes,
            dims,
            threads,
            tolerance,
            inject_fault,
        } => {
            let mut run = Run::start(&common)?;
            let d = equiv::EquivArgs::default();
            let mut default_patterns = d.patterns.clone();
            if let Some(p) = common.pattern {
                default_patterns = vec![p];
            }
            let args = equiv::EquivArgs {
                patterns: run.list("patterns", &patterns, default_patterns)?,
                sizes: run.list("sizes", &sizes, d.sizes.clone())?,
                dims: run.list("dims", &dims, d.dims.clone())?,
                block_size: run.resolver.pick("block-size", common.block_size, d.block_size)?,
                threads: run.resolver.pick("threads", threads, d.threads)?,
                tolerance: run.resolver.pick("tolerance", tolerance, d.tolerance)?,
                inject_fault: run.resolver.pick("inject-fault", inject_fault.then_some(true), false)?,
                seed: run.seed,
            };
            let report = equiv::run(&args)?;
            println!("{}", report.summary());
            run.finish("equiv", &[("equiv.csv", report.csv())])?;
            Ok(if report.passed() { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Gradcheck { common, step } => {
            let mut run = Run::start(&common)?;
            let d = gradcheck::GradcheckArgs::default();
            let args = gradcheck::GradcheckArgs {
                block_size: run.resolver.pick("block-size", common.block_size, d.block_size)?,
                pattern: run.resolver.pick("pattern", common.pattern, d.pattern)?,
                step: run.resolver.pick("step", step, d.step)?,
                seed: run.seed,
            };
            let report = gradcheck::run(&args)?;
            println!("{}", report.summary());
            run.finish("gradcheck", &[("gradcheck.csv", report.csv())])?;
            Ok(if report.passed() { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Bench {
            common,
            sizes,
            head_dim,
            reps,
            threads,
            include_full,
        } => {
            let mut run = Run::start(&common)?;
            let d = bench::BenchArgs::default();
            let args = bench::BenchArgs {
                sizes: run.list("sizes", &sizes, d.sizes.clone())?,
                pattern: run.resolver.pick("pattern", common.pattern, d.pattern)?,
                block_size: run.resolver.pick("block-size", common.block_size, d.block_size)?,
                head_dim: run.resolver.pick("head-dim", head_dim, d.head_dim)?,
                reps: run.resolver.pick("reps", reps, d.reps)?,
                threads: run.resolver.pick("threads", threads, d.threads)?,
                include_full: run.resolver.pick("include-full", include_full.then_some(true), false)?,
                seed: run.seed,
            };
            let report = bench::run(&args)?;
            println!("{}", report.summary());
            run.finish("bench", &[("bench.csv", report.csv())])?;
            Ok(EXIT_OK)
        }
        Command::TrainToy {
            common,
            task,
            seq_len,
            vocab,
            heads,
            head_dim,
            ffn_mult,
            placements,
            fractions,
            steps,
            batch,
            lr,
            warmup,
            min_len,
            clip,
            eval_samples,
            log_every,
            allow_large,
        } => {
            let mut run = Run::start(&common)?;
            let d = toy::ToyArgs::default();
            let t = TrainConfig::default();
            let default_placements = common.placement.map(|p| vec![p]).unwrap_or(d.placements.clone());
            let default_fractions = common.full_fraction.map(|f| vec![f]).unwrap_or(d.fractions.clone());
            let args = toy::ToyArgs {
                task: run.resolver.pick("task", task, d.task)?,
                seq_len: run.resolver.pick("seq-len", seq_len, d.seq_len)?,
                vocab: run.resolver.pick("vocab", vocab, d.vocab)?,
                layers: run.resolver.pick("layers", common.layers, d.layers)?,
                n_heads: run.resolver.pick("heads", heads, d.n_heads)?,
                head_dim: run.resolver.pick("head-dim", head_dim, d.head_dim)?,
                ffn_mult: run.resolver.pick("ffn-mult", ffn_mult, d.ffn_mult)?,
                block_size: run.resolver.pick("block-size", common.block_size, d.block_size)?,
                pattern: run.resolver.pick("pattern", common.pattern, d.pattern)?,
                placements: run.list("placements", &placements, default_placements)?,
                fractions: run.list("fractions", &fractions, default_fractions)?,
                train: TrainConfig {
                    steps: run.resolver.pick("steps", steps, t.steps)?,
                    batch: run.resolver.pick("batch", batch, t.batch)?,
                    peak_lr: run.resolver.pick("lr", lr, t.peak_lr)?,
                    warmup: run.resolver.pick("warmup", warmup, t.warmup)?,
                    min_len: run.resolver.pick("min-len", min_len, t.min_len)?,
                    clip: run.resolver.pick("clip", clip, t.clip)?,
                    seed: 0,
                },
                eval_samples: run.resolver.pick("eval-samples", eval_samples, d.eval_samples)?,
                far_range: None,
                seed: run.seed,
                allow_large: run.resolver.pick("allow-large", allow_large.then_some(true), false)?,
                checkpoint_dir: Some(run.out.join("checkpoints")),
                log_every: run.resolver.pick("log-every", log_every, 50)?,
            };
            let report = toy::run(&args)?;
            println!("{}", report.summary());
            run.finish("train-toy", &[("train_toy.csv", report.csv()), ("train_log.csv", report.log_csv())])?;
            Ok(EXIT_OK)
        }
        Command::Cost {
            common,
            n_tokens,
            head_dim,
            heads,
            full_counts,
            ffn_share,
            convention: conv,
        } => {
            let mut run = Run::start(&common)?;
            let d = cost::CostArgs::default();
            let conv: String = run.resolver.pick("convention", conv, "exact".to_string())?;
            let layers = run.resolver.pick("layers", common.layers, d.layers)?;
            let default_counts = match common.full_fraction {
                Some(f) => vec![(f * layers as f64 - 1e-9).ceil().max(0.0) as usize],
                None => d.full_counts.clone(),
            };
            let args = cost::CostArgs {
                n_tokens: run.resolver.pick("n-tokens", n_tokens, d.n_tokens)?,
                head_dim: run.resolver.pick("head-dim", head_dim, d.head_dim)?,
                n_heads: run.resolver.pick("heads", heads, d.n_heads)?,
                layers,
                full_counts: run.list("full-counts", &full_counts, default_counts)?,
                pattern: run.resolver.pick("pattern", common.pattern, d.pattern)?,
                block_size: run.resolver.pick("block-size", common.block_size, d.block_size)?,
                placement: run.resolver.pick("placement", common.placement, d.placement)?,
                ffn_share: run.resolver.pick("ffn-share", ffn_share, d.ffn_share)?,
                convention: convention(&conv)?,
            };
            let sweep = cost::run(&args)?;
            print!("{}", sweep.text());
            run.finish("cost", &[("cost.csv", sweep.csv())])?;
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
