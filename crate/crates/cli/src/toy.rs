//! Toy ablation over full-layer placement and fraction.
//!
//! Every cell starts from the same initial weights and sees the same
//! training stream, so cells differ only in their layer map. Besides the
//! trained cells, the all-full model is re-evaluated with each sparse cell's
//! masks imposed after training.

use std::path::PathBuf;

use longgen_core::model::save_checkpoint;
use longgen_core::{HybridModel, LayerMap, ModelConfig, Pattern, PatternSpec, Placement, RopeConfig};

use crate::report::{num, Csv};
use crate::task::{NeedlePlacement, SyntheticTask, TaskKind, DEPTH_BUCKETS};
use crate::train::{eval_set, evaluate, train, EvalReport, TrainConfig, TrainRecord};
use crate::CliError;

pub const MAX_TOY_SEQ_LEN: usize = 2048;
pub const MAX_TOY_PARAMS: usize = 5_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyArgs {
    pub task: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
    pub layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    pub block_size: usize,
    pub pattern: Pattern,
    pub placements: Vec<Placement>,
    /// Fractions of full layers per cell; 0 means every layer sparse.
    pub fractions: Vec<f64>,
    pub train: TrainConfig,
    pub eval_samples: usize,
    /// Key positions for the far-needle set; derived from the pattern when unset.
    pub far_range: Option<(usize, usize)>,
    pub seed: u64,
    pub allow_large: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Print a progress line every this many steps (0 = silent).
    pub log_every: usize,
}

impl Default for ToyArgs {
    fn default() -> Self {
        Self {
            task: TaskKind::Needle,
            seq_len: 512,
            vocab: 32,
            layers: 3,
            n_heads: 4,
            head_dim: 16,
            ffn_mult: 2,
            block_size: 16,
            pattern: Pattern::AttnSink {
                sink_blocks: 1,
                window_blocks: 2,
            },
            placements: vec![Placement::Middle],
            fractions: vec![1.0, 1.0 / 3.0, 0.0],
            train: TrainConfig::default(),
            eval_samples: 200,
            far_range: None,
            seed: 0,
            allow_large: false,
            checkpoint_dir: None,
            log_every: 0,
        }
    }
}

impl ToyArgs {
    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            n_layers: self.layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            ffn_mult: self.ffn_mult,
            vocab_size: self.vocab,
            block_size: self.block_size,
            rope: RopeConfig::new(self.head_dim, RopeConfig::DEFAULT_BASE)?,
            seed: self.seed,
            tied_embeddings: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sparse_spec(&self) -> Result<PatternSpec, CliError> {
        Ok(PatternSpec::new(self.pattern, self.block_size)?)
    }

    /// Key positions no all-sparse stack of this depth can reach from the
    /// final query: past the sink blocks and beyond `layers` windows.
    pub fn far_range(&self) -> (usize, usize) {
        if let Some(r) = self.far_range {
            return r;
        }
        let bs = self.block_size;
        let (sink, window) = match self.pattern {
            Pattern::AttnSink {
                sink_blocks,
                window_blocks,
            } => (sink_blocks, window_blocks),
            _ => (1, 1),
        };
        let lo = (sink + 1) * bs;
        let hi = self.seq_len.saturating_sub((self.layers * window + 1) * bs);
        (lo, hi.max(lo + 1))
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<(), CliError> {
        if !self.allow_large && (self.seq_len > MAX_TOY_SEQ_LEN || cfg.param_count() > MAX_TOY_PARAMS) {
            return Err(CliError::Usage(format!(
                "toy scale guard: N={} params={} (limits {MAX_TOY_SEQ_LEN}, {MAX_TOY_PARAMS}); pass --allow-large to override",
                self.seq_len,
                cfg.param_count()
            )));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(CliError::Usage(format!("full fraction {f} outside [0, 1]")));
        }
        if self.placements.is_empty() || self.fractions.is_empty() || self.eval_samples == 0 {
            return Err(CliError::Usage("need at least one placement, fraction and eval sample".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Trained,
    /// All-full weights evaluated under this cell's layer map.
    Imposed,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Trained => "trained",
            Regime::Imposed => "imposed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub placement: Placement,
    pub fraction: f64,
    pub full_layers: Vec<usize>,
    pub regime: Regime,
    /// Mean loss over the last tenth of training (NaN for imposed rows).
    pub final_loss: f64,
    pub eval: EvalReport,
    pub far: EvalReport,
}

impl CellResult {
    pub fn is_all_full(&self, layers: usize) -> bool {
        self.full_layers.len() == layers
    }
}

#[derive(Clone, Debug)]
pub struct ToyReport {
    pub cells: Vec<CellResult>,
    pub logs: Vec<(String, Vec<TrainRecord>)>,
    pub layers: usize,
}

fn cell_id(placement: Placement, fraction: f64) -> String {
    format!("{placement}-{fraction:.4}")
}

impl ToyReport {
    pub fn find(&self, n_full: usize, regime: Regime) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.full_layers.len() == n_full && c.regime == regime)
    }

    pub fn csv(&self) -> Csv {
        let mut cols = vec![
            "placement",
            "full_fraction",
            "n_full",
            "full_layers",
            "regime",
            "final_loss",
            "accuracy",
            "far_accuracy",
            "n_eval",
        ];
        const BUCKETS: [&str; DEPTH_BUCKETS] = [
            "acc_d0", "acc_d1", "acc_d2", "acc_d3", "acc_d4", "acc_d5", "acc_d6", "acc_d7", "acc_d8", "acc_d9",
        ];
        cols.extend(BUCKETS);
        let mut csv = Csv::new(&cols);
        for c in &self.cells {
            let layers: Vec<String> = c.full_layers.iter().map(|l| l.to_string()).collect();
            let mut row = vec![
                c.placement.to_string(),
                format!("{:.4}", c.fraction),
                c.full_layers.len().to_string(),
                layers.join(";"),
                c.regime.to_string(),
                if c.final_loss.is_nan() { String::new() } else { format!("{:.6}", c.final_loss) },
                format!("{:.4}", c.eval.accuracy()),
                format!("{:.4}", c.far.accuracy()),
                c.eval.total.to_string(),
            ];
            row.extend((0..DEPTH_BUCKETS).map(|b| c.eval.bucket_accuracy(b).map(|a| format!("{a:.4}")).unwrap_or_default()));
            csv.push(row);
        }
        csv
    }

    pub fn log_csv(&self) -> Csv {
        let mut csv = Csv::new(&["cell", "step", "loss", "lr", "grad_norm"]);
        for (id, log) in &self.logs {
            for r in log {
                csv.push(vec![id.clone(), r.step.to_string(), num(r.loss), num(r.lr), num(r.grad_norm)]);
            }
        }
        csv
    }

    pub fn summary(&self) -> String {
        let parts: Vec<String> = self
            .cells
            .iter()
            .map(|c| {
                format!(
                    "{} {}/{} full ({}): acc {:.3} far {:.3}",
                    c.regime,
                    c.full_layers.len(),
                    self.layers,
                    c.placement,
                    c.eval.accuracy(),
                    c.far.accuracy()
                )
            })
            .collect();
        format!("train-toy: {}", parts.join("; "))
    }
}

fn layer_map(cfg: &ModelConfig, sparse: PatternSpec, placement: Placement, fraction: f64) -> Result<LayerMap, CliError> {
    if fraction == 0.0 {
        return Ok(LayerMap::with_full_count(cfg, sparse, placement, 0)?);
    }
    Ok(longgen_core::build_layer_map(cfg, sparse, placement, fraction)?)
}

pub fn run(args: &ToyArgs) -> Result<ToyReport, CliError> {
    let cfg = args.model_config()?;
    args.validate(&cfg)?;
    let sparse = args.sparse_spec()?;
    let task = SyntheticTask {
        kind: args.task,
        seq_len: args.seq_len,
        vocab: args.vocab,
        placement: NeedlePlacement::Uniform,
    };
    task.validate()?;
    let (far_lo, far_hi) = args.far_range();
    let far_task = SyntheticTask {
        placement: NeedlePlacement::Range(far_lo, far_hi),
        ..task.clone()
    };
    let eval_examples = eval_set(&task, args.eval_samples, args.seed.wrapping_add(2));
    let far_examples = eval_set(&far_task, args.eval_samples, args.seed.wrapping_add(3));
    let train_cfg = TrainConfig {
        seed: args.seed.wrapping_add(1),
        ..args.train.clone()
    };

    // one cell per distinct layer map
    let mut maps: Vec<(Placement, f64, LayerMap)> = Vec::new();
    for &fraction in &args.fractions {
        for &placement in &args.placements {
            let map = layer_map(&cfg, sparse, placement, fraction)?;
            if !maps.iter().any(|(_, _, m)| m.specs() == map.specs()) {
                maps.push((placement, fraction, map));
            }
        }
    }

    let mut cells = Vec::new();
    let mut logs = Vec::new();
    let mut full_model: Option<HybridModel> = None;
    for (placement, fraction, map) in &maps {
        let id = cell_id(*placement, *fraction);
        let mut model = HybridModel::init(cfg.clone())?;
        let log_every = args.log_every;
        let log = train(&mut model, map, &task, &train_cfg, |r| {
            if log_every > 0 && (r.step + 1) % log_every == 0 {
                eprintln!("[{id}] step {:>5} loss {:.4} lr {:.2e}", r.step + 1, r.loss, r.lr);
            }
        })?;
        let tail = (log.len() / 10).max(1);
        let final_loss = log[log.len() - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64;
        if let Some(dir) = &args.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(dir.join(format!("{id}.lgen")), &model, map)?;
        }
        cells.push(CellResult {
            placement: *placement,
            fraction: *fraction,
            full_layers: map.full_layers(),
            regime: Regime::Trained,
            final_loss,
            eval: evaluate(&model, map, &eval_examples)?,
            far: evaluate(&model, map, &far_examples)?,
        });
        logs.push((id, log));
        if map.n_full() == cfg.n_layers {
            full_model = Some(model);
        }
    }
    if let Some(full) = &full_model {
        for (placement, fraction, map) in &maps {
            if map.n_full() == cfg.n_layers {
                continue;
            }
            cells.push(CellResult {
                placement: *placement,
                fraction: *fraction,
                full_layers: map.full_layers(),
                regime: Regime::Imposed,
                final_loss: f64::NAN,
                eval: evaluate(full, map, &eval_examples)?,
                far: evaluate(full, map, &far_examples)?,
            });
        }
    }
    Ok(ToyReport {
        cells,
        logs,
        layers: cfg.n_layers,
    })
}
