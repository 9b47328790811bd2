//! Blocked kernel vs materializing reference over a matrix of patterns,
//! lengths and head dimensions.

use longgen_core::attention::{blocked_forward_threads, dense_attention, max_relative_deviation, AttnInput};
use longgen_core::{build_layout, BlockLayout, Matrix, Pattern, PatternSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::report::{num, sci, Csv};
use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct EquivArgs {
    pub patterns: Vec<Pattern>,
    pub sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub block_size: usize,
    pub seed: u64,
    pub threads: usize,
    pub tolerance: f64,
    /// Drop the diagonal block from every row after the first (negative
    /// control: the suite must fail).
    pub inject_fault: bool,
}

impl Default for EquivArgs {
    fn default() -> Self {
        Self {
            patterns: default_patterns(),
            sizes: vec![64, 256, 1024],
            dims: vec![8, 16],
            block_size: 16,
            seed: 0,
            threads: 1,
            tolerance: 1e-10,
            inject_fault: false,
        }
    }
}

pub fn default_patterns() -> Vec<Pattern> {
    vec![
        Pattern::Full,
        Pattern::AttnSink {
            sink_blocks: 1,
            window_blocks: 2,
        },
        Pattern::AttnSink {
            sink_blocks: 1,
            window_blocks: 32,
        },
        Pattern::BlockStride { stride_blocks: 4 },
        Pattern::BlockStride { stride_blocks: 64 },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivCase {
    pub pattern: Pattern,
    pub n: usize,
    pub d: usize,
    pub max_abs_diff: f64,
    pub max_rel_dev: f64,
    pub tiles: u64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivReport {
    pub block_size: usize,
    pub cases: Vec<EquivCase>,
}

impl EquivReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> Option<&EquivCase> {
        self.cases.iter().max_by(|a, b| a.max_rel_dev.total_cmp(&b.max_rel_dev))
    }

    pub fn csv(&self) -> Csv {
        let mut csv = Csv::new(&["pattern", "n", "d", "block_size", "max_abs_diff", "max_rel_dev", "tiles", "pass"]);
        for c in &self.cases {
            csv.push(vec![
                c.pattern.to_string(),
                c.n.to_string(),
                c.d.to_string(),
                self.block_size.to_string(),
                sci(c.max_abs_diff),
                sci(c.max_rel_dev),
                c.tiles.to_string(),
                c.passed.to_string(),
            ]);
        }
        csv
    }

    pub fn summary(&self) -> String {
        let failed = self.cases.iter().filter(|c| !c.passed).count();
        match self.worst() {
            Some(w) => format!(
                "equiv: {} cases, {} failed; worst {} N={} D={} rel dev {}",
                self.cases.len(),
                failed,
                w.pattern,
                w.n,
                w.d,
                num(w.max_rel_dev)
            ),
            None => "equiv: no cases".into(),
        }
    }
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn faulty(layout: &BlockLayout) -> BlockLayout {
    let rows = (0..layout.n_blocks())
        .map(|qb| {
            layout
                .row(qb)
                .iter()
                .copied()
                .filter(|&kb| qb == 0 || kb != qb)
                .collect()
        })
        .collect();
    BlockLayout::from_rows_unchecked(layout.block_size(), rows)
}

pub fn run(args: &EquivArgs) -> Result<EquivReport, CliError> {
    let mut cases = Vec::new();
    for (pi, &pattern) in args.patterns.iter().enumerate() {
        let spec = PatternSpec::new(pattern, args.block_size)?;
        for (ni, &n) in args.sizes.iter().enumerate() {
            if n > longgen_core::attention::DENSE_REFERENCE_CAP {
                return Err(CliError::Usage(format!(
                    "N={n} exceeds the dense reference cap {}",
                    longgen_core::attention::DENSE_REFERENCE_CAP
                )));
            }
            let layout = build_layout(&spec, spec.n_blocks(n));
            let kernel_layout = if args.inject_fault { faulty(&layout) } else { layout.clone() };
            for (di, &d) in args.dims.iter().enumerate() {
                let case_seed = args.seed ^ ((pi as u64) << 40 | (ni as u64) << 20 | di as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
                let q = random_matrix(n, d, &mut rng);
                let k = random_matrix(n, d, &mut rng);
                let v = random_matrix(n, d, &mut rng);
                let (reference, _) = dense_attention(&AttnInput::new(&q, &k, &v, &layout))?;
                let (blocked, saved) =
                    blocked_forward_threads(&AttnInput::new(&q, &k, &v, &kernel_layout), args.threads)?;
                let rel = max_relative_deviation(&blocked, &reference);
                cases.push(EquivCase {
                    pattern,
                    n,
                    d,
                    max_abs_diff: blocked.max_abs_diff(&reference),
                    max_rel_dev: rel,
                    tiles: saved.tiles_visited,
                    passed: rel <= args.tolerance,
                });
            }
        }
    }
    Ok(EquivReport {
        block_size: args.block_size,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_matrix_passes() {
        let args = EquivArgs {
            sizes: vec![16, 40],
            dims: vec![4],
            block_size: 8,
            ..EquivArgs::default()
        };
        let r = run(&args).unwrap();
        assert_eq!(r.cases.len(), 5 * 2);
        assert!(r.passed(), "{}", r.summary());
        assert_eq!(r.csv().rows.len(), 10);
    }

    #[test]
    fn fault_is_detected() {
        let args = EquivArgs {
            sizes: vec![32],
            dims: vec![4],
            block_size: 8,
            inject_fault: true,
            ..EquivArgs::default()
        };
        assert!(!run(&args).unwrap().passed());
    }

    #[test]
    fn cap_is_a_usage_error() {
        let args = EquivArgs {
            sizes: vec![8192],
            ..EquivArgs::default()
        };
        assert!(matches!(run(&args), Err(CliError::Usage(_))));
    }
}
