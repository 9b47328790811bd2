//! Finite-difference suites for the attention backward pass and the full
//! toy model.

use longgen_core::gradcheck::{check_attention, check_model, GroupError, DEFAULT_STEP};
use longgen_core::{build_layout, HybridModel, LayerMap, Matrix, ModelConfig, Pattern, PatternSpec, RopeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::equiv::random_matrix;
use crate::report::{sci, Csv};
use crate::CliError;

pub const ATTENTION_THRESHOLD: f64 = 1e-6;
pub const MODEL_THRESHOLD: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckArgs {
    pub seed: u64,
    pub block_size: usize,
    /// Sparse pattern of the model suite's non-full layer.
    pub pattern: Pattern,
    pub step: f64,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            seed: 0,
            block_size: 4,
            pattern: Pattern::AttnSink {
                sink_blocks: 1,
                window_blocks: 1,
            },
            step: DEFAULT_STEP,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRow {
    pub suite: &'static str,
    pub case: String,
    pub group: GroupError,
    pub threshold: f64,
}

impl GroupRow {
    pub fn passed(&self) -> bool {
        self.group.rel_err <= self.threshold
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GroupRow>,
    pub model_params: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GroupRow::passed)
    }

    pub fn worst(&self, suite: &str) -> Option<&GroupRow> {
        self.rows
            .iter()
            .filter(|r| r.suite == suite)
            .max_by(|a, b| a.group.rel_err.total_cmp(&b.group.rel_err))
    }

    pub fn csv(&self) -> Csv {
        let mut csv = Csv::new(&[
            "suite", "case", "group", "len", "max_abs_err", "scale", "rel_err", "threshold", "pass",
        ]);
        for r in &self.rows {
            csv.push(vec![
                r.suite.into(),
                r.case.clone(),
                r.group.name.clone(),
                r.group.len.to_string(),
                sci(r.group.max_abs_err),
                sci(r.group.scale),
                sci(r.group.rel_err),
                sci(r.threshold),
                r.passed().to_string(),
            ]);
        }
        csv
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "gradcheck: {} groups, {} failed",
            self.rows.len(),
            self.rows.iter().filter(|r| !r.passed()).count()
        );
        for suite in ["attention", "model"] {
            if let Some(w) = self.worst(suite) {
                out.push_str(&format!(
                    "; worst {suite} group {}/{} rel err {}",
                    w.case,
                    w.group.name,
                    sci(w.group.rel_err)
                ));
            }
        }
        out
    }
}

fn attention_cases(args: &GradcheckArgs) -> Result<Vec<GroupRow>, CliError> {
    let bs = args.block_size;
    let specs = [
        PatternSpec::full(bs),
        PatternSpec::new(args.pattern, bs)?,
        PatternSpec::attn_sink(1, 2, bs),
        PatternSpec::block_stride(2, bs),
    ];
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for spec in specs {
        // a partial last block on purpose
        let n = 4 * bs - 2;
        let d = 4;
        let layout = build_layout(&spec, spec.n_blocks(n));
        let q = random_matrix(n, d, &mut rng);
        let k = random_matrix(n, d, &mut rng);
        let v = random_matrix(n, d, &mut rng);
        let d_o = random_matrix(n, d, &mut rng);
        for g in check_attention(&q, &k, &v, &d_o, &layout, args.step)? {
            rows.push(GroupRow {
                suite: "attention",
                case: format!("{} n={n}", spec.pattern),
                group: g,
                threshold: ATTENTION_THRESHOLD,
            });
        }
    }
    // all-zero inputs: uniform attention weights
    let spec = PatternSpec::new(args.pattern, bs)?;
    let n = 3 * bs;
    let layout = build_layout(&spec, spec.n_blocks(n));
    let zero = Matrix::zeros(n, 4);
    let d_o = random_matrix(n, 4, &mut rng);
    for g in check_attention(&zero, &zero, &zero, &d_o, &layout, args.step)? {
        rows.push(GroupRow {
            suite: "attention",
            case: format!("{} zero-input", spec.pattern),
            group: g,
            threshold: ATTENTION_THRESHOLD,
        });
    }
    Ok(rows)
}

/// Two-layer, 2-head model of dimension 4 with one full and one sparse layer.
pub fn tiny_model(args: &GradcheckArgs) -> Result<(HybridModel, LayerMap), CliError> {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        head_dim: 4,
        ffn_mult: 2,
        vocab_size: 13,
        block_size: args.block_size,
        rope: RopeConfig::new(4, RopeConfig::DEFAULT_BASE)?,
        seed: args.seed,
        tied_embeddings: false,
    };
    let mut model = HybridModel::init(cfg.clone())?;
    // lift the 0.02-scale init well above the finite-difference noise floor
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    let map = LayerMap::with_full_count(
        &cfg,
        PatternSpec::new(args.pattern, args.block_size)?,
        longgen_core::Placement::Top,
        1,
    )?;
    Ok((model, map))
}

fn model_cases(args: &GradcheckArgs) -> Result<(Vec<GroupRow>, usize), CliError> {
    let (model, map) = tiny_model(args)?;
    let n = 4 * args.block_size;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(2));
    let toks: Vec<usize> = (0..=n).map(|_| rng.gen_range(0..model.config.vocab_size)).collect();
    let targets: Vec<Option<usize>> = toks[1..].iter().map(|&t| Some(t)).collect();
    let groups = check_model(&model, &map, &toks[..n], &targets, args.step)?;
    let rows = groups
        .into_iter()
        .map(|g| GroupRow {
            suite: "model",
            case: format!("2-layer {} n={n}", map.spec(0).pattern),
            group: g,
            threshold: MODEL_THRESHOLD,
        })
        .collect();
    Ok((rows, model.config.param_count()))
}

pub fn run(args: &GradcheckArgs) -> Result<GradcheckReport, CliError> {
    let mut rows = attention_cases(args)?;
    let (model_rows, model_params) = model_cases(args)?;
    rows.extend(model_rows);
    Ok(GradcheckReport { rows, model_params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let r = run(&GradcheckArgs::default()).unwrap();
        assert!(r.passed(), "{}", r.summary());
        assert!(r.model_params <= 10_000);
        assert!(r.rows.iter().any(|row| row.case.contains("zero-input")));
        assert!(r.summary().contains("worst model group"));
    }
}
