//! Wall-clock comparison of the blocked kernels against the dense
//! streaming baseline, which scores every causal pair and masks afterwards.

use std::time::Instant;

use longgen_core::attention::{
    blocked_backward_threads, blocked_forward_threads, dense_streaming_backward, dense_streaming_forward,
    AttnInput,
};
use longgen_core::costmodel::{predicted_tiles, visible_pairs};
use longgen_core::{build_layout, Pattern, PatternSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::equiv::random_matrix;
use crate::report::{num, Csv};
use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchArgs {
    pub sizes: Vec<usize>,
    pub pattern: Pattern,
    pub block_size: usize,
    pub head_dim: usize,
    pub reps: usize,
    pub threads: usize,
    pub seed: u64,
    /// Also time the blocked kernel on the full causal layout.
    pub include_full: bool,
}

impl Default for BenchArgs {
    fn default() -> Self {
        Self {
            sizes: vec![1024, 4096, 16384],
            pattern: Pattern::AttnSink {
                sink_blocks: 1,
                window_blocks: 32,
            },
            block_size: 64,
            head_dim: 16,
            reps: 5,
            threads: 1,
            seed: 0,
            include_full: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub pattern: Pattern,
    pub implementation: &'static str,
    pub fwd_ms: f64,
    pub bwd_ms: f64,
    pub tiles: u64,
    /// Forward attention-core FLOPs (`4·pairs·D`) the implementation performs.
    pub flops_est: f64,
}

impl BenchRow {
    pub fn total_ms(&self) -> f64 {
        self.fwd_ms + self.bwd_ms
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    fn find(&self, n: usize, implementation: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.n == n && r.implementation == implementation)
    }

    /// Dense over blocked forward+backward time at length `n`.
    pub fn speedup(&self, n: usize) -> Option<f64> {
        Some(self.find(n, "dense")?.total_ms() / self.find(n, "blocked")?.total_ms())
    }

    pub fn csv(&self) -> Csv {
        let mut csv = Csv::new(&["N", "pattern", "impl", "fwd_ms", "bwd_ms", "tiles", "flops_est"]);
        for r in &self.rows {
            csv.push(vec![
                r.n.to_string(),
                r.pattern.to_string(),
                r.implementation.into(),
                format!("{:.3}", r.fwd_ms),
                format!("{:.3}", r.bwd_ms),
                r.tiles.to_string(),
                num(r.flops_est),
            ]);
        }
        csv
    }

    pub fn summary(&self) -> String {
        let mut sizes: Vec<usize> = self.rows.iter().map(|r| r.n).collect();
        sizes.dedup();
        let parts: Vec<String> = sizes
            .iter()
            .filter_map(|&n| self.speedup(n).map(|s| format!("N={n}: {s:.2}x")))
            .collect();
        format!("bench: dense/blocked fwd+bwd speedup {}", parts.join(", "))
    }
}

/// Median of `reps` timed runs after one discarded warm-up run.
fn median_ms(reps: usize, mut f: impl FnMut() -> Result<(), CliError>) -> Result<f64, CliError> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

pub fn run(args: &BenchArgs) -> Result<BenchReport, CliError> {
    if args.reps == 0 || args.threads == 0 {
        return Err(CliError::Usage("reps and threads must be at least 1".into()));
    }
    let spec = PatternSpec::new(args.pattern, args.block_size)?;
    let full = PatternSpec::full(args.block_size);
    let d = args.head_dim;
    let mut rows = Vec::new();
    for &n in &args.sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ n as u64);
        let q = random_matrix(n, d, &mut rng);
        let k = random_matrix(n, d, &mut rng);
        let v = random_matrix(n, d, &mut rng);
        let d_o = random_matrix(n, d, &mut rng);
        let layout = build_layout(&spec, spec.n_blocks(n));
        let full_layout = build_layout(&full, full.n_blocks(n));
        let sparse_in = AttnInput::new(&q, &k, &v, &layout);
        let full_in = AttnInput::new(&q, &k, &v, &full_layout);
        let tile_flops = |s: &PatternSpec| {
            (predicted_tiles(s, n) * (args.block_size * args.block_size) as u64) as f64 * 4.0 * d as f64
        };

        let (_, saved) = dense_streaming_forward(&sparse_in)?;
        let fwd_ms = median_ms(args.reps, || dense_streaming_forward(&sparse_in).map(drop).map_err(Into::into))?;
        let bwd_ms = median_ms(args.reps, || {
            dense_streaming_backward(&sparse_in, &saved, &d_o).map(drop).map_err(Into::into)
        })?;
        rows.push(BenchRow {
            n,
            pattern: args.pattern,
            implementation: "dense",
            fwd_ms,
            bwd_ms,
            tiles: 0,
            flops_est: visible_pairs(&full, n) as f64 * 4.0 * d as f64,
        });

        let blocked = |input: &AttnInput, s: &PatternSpec, name: &'static str| -> Result<BenchRow, CliError> {
            let (_, saved) = blocked_forward_threads(input, args.threads)?;
            let fwd_ms = median_ms(args.reps, || {
                blocked_forward_threads(input, args.threads).map(drop).map_err(Into::into)
            })?;
            let bwd_ms = median_ms(args.reps, || {
                blocked_backward_threads(input, &saved, &d_o, args.threads).map(drop).map_err(Into::into)
            })?;
            Ok(BenchRow {
                n,
                pattern: s.pattern,
                implementation: name,
                fwd_ms,
                bwd_ms,
                tiles: saved.tiles_visited,
                flops_est: tile_flops(s),
            })
        };
        rows.push(blocked(&sparse_in, &spec, "blocked")?);
        if args.include_full {
            rows.push(blocked(&full_in, &full, "blocked-full")?);
        }
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_has_every_row() {
        let args = BenchArgs {
            sizes: vec![128, 256],
            block_size: 16,
            pattern: Pattern::AttnSink {
                sink_blocks: 1,
                window_blocks: 2,
            },
            reps: 1,
            include_full: true,
            ..BenchArgs::default()
        };
        let r = run(&args).unwrap();
        assert_eq!(r.rows.len(), 6);
        assert_eq!(r.csv().rows.len(), 6);
        assert!(r.speedup(256).unwrap() > 0.0);
        let blocked = r.find(256, "blocked").unwrap();
        assert_eq!(blocked.tiles, predicted_tiles(&PatternSpec::attn_sink(1, 2, 16), 256));
    }

    #[test]
    fn median_of_odd_and_even() {
        let mut calls = 0;
        median_ms(4, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 5);
    }
}
