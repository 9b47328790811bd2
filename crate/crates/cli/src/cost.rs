//! Cost sweep over full-layer counts, as CSV plus a text table.

use longgen_core::costmodel::{layer_costs, predicted_speedup, CostConfig, CostReport, FlopsConvention, Speedups};
use longgen_core::{Pattern, PatternSpec, Placement};

use crate::report::{num, table, Csv};
use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct CostArgs {
    pub n_tokens: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub layers: usize,
    pub full_counts: Vec<usize>,
    pub pattern: Pattern,
    pub block_size: usize,
    pub placement: Placement,
    pub ffn_share: f64,
    pub convention: FlopsConvention,
}

impl Default for CostArgs {
    /// Llama2-7B geometry at 128K tokens, swept over 5, 7, 12 and 32 full layers.
    fn default() -> Self {
        Self {
            n_tokens: 131_072,
            head_dim: 128,
            n_heads: 32,
            layers: 32,
            full_counts: vec![5, 7, 12, 32],
            pattern: Pattern::AttnSink {
                sink_blocks: 1,
                window_blocks: 32,
            },
            block_size: 64,
            placement: Placement::Middle,
            ffn_share: 0.0,
            convention: FlopsConvention::TokenExact,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub config: CostConfig,
    pub report: CostReport,
    pub speedups: Speedups,
    pub full_layers: Vec<usize>,
}

impl CostRow {
    pub fn config_id(&self) -> String {
        format!("L{}F{}", self.config.n_layers(), self.config.l_full)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostSweep {
    pub rows: Vec<CostRow>,
}

pub fn run(args: &CostArgs) -> Result<CostSweep, CliError> {
    let spec = PatternSpec::new(args.pattern, args.block_size)?;
    let mut rows = Vec::new();
    for &l_full in &args.full_counts {
        if l_full > args.layers {
            return Err(CliError::Usage(format!("{l_full} full layers exceed {} layers", args.layers)));
        }
        let config = CostConfig {
            convention: args.convention,
            ffn_share: args.ffn_share,
            ..CostConfig::new(args.n_tokens, args.head_dim, args.n_heads, l_full, args.layers - l_full, spec)
        };
        rows.push(CostRow {
            report: layer_costs(&config)?,
            speedups: predicted_speedup(&config)?,
            full_layers: args.placement.full_layers(args.layers, l_full),
            config,
        });
    }
    Ok(CostSweep { rows })
}

/// `0-3,7,9-11` style listing of sorted indices.
pub fn ranges(idx: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && idx[j + 1] == idx[j] + 1 {
            j += 1;
        }
        parts.push(if i == j {
            idx[i].to_string()
        } else {
            format!("{}-{}", idx[i], idx[j])
        });
        i = j + 1;
    }
    parts.join(",")
}

impl CostSweep {
    pub fn row(&self, l_full: usize) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.config.l_full == l_full)
    }

    pub fn csv(&self) -> Csv {
        let mut csv = Csv::new(&[
            "config_id",
            "N",
            "L_full",
            "L_sparse",
            "pattern",
            "kv_bytes",
            "kv_ratio",
            "train_ratio",
            "prefill_ratio",
            "predicted_speedups",
        ]);
        for r in &self.rows {
            let s = &r.speedups;
            csv.push(vec![
                r.config_id(),
                r.config.n_tokens.to_string(),
                r.config.l_full.to_string(),
                r.config.l_sparse.to_string(),
                r.config.spec.pattern.to_string(),
                r.report.kv_bytes().to_string(),
                num(r.report.ratios.kv),
                num(r.report.ratios.train),
                num(r.report.ratios.prefill),
                format!("train={:.4};prefill={:.4};decode={:.4}", s.training, s.prefill, s.decode),
            ]);
        }
        csv
    }

    /// Per-layer costs for full and sparse layers, the sweep, and the
    /// retained KV blocks each layer keeps at the final position.
    pub fn text(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.rows.first() else {
            return out;
        };
        let c = &first.config;
        let per = |total: f64, layers: usize| if layers == 0 { 0.0 } else { total / layers as f64 };
        let sample = self.rows.iter().find(|r| r.config.l_full > 0 && r.config.l_sparse > 0).unwrap_or(first);
        let r = &sample.report;
        let (lf, ls) = (sample.config.l_full, sample.config.l_sparse);
        out.push_str(&format!(
            "Per-layer cost, N={} D={} heads={} sparse={} (block {})\n",
            c.n_tokens, c.head_dim, c.n_heads, c.spec.pattern, c.spec.block_size
        ));
        out.push_str(&table(
            &["layer", "train_flops", "kv_bytes", "prefill_flops"],
            &[
                vec![
                    "full".into(),
                    format!("{:.4e}", per(r.train_flops_full, lf)),
                    (r.kv_bytes_full / lf.max(1) as u64).to_string(),
                    format!("{:.4e}", per(r.prefill_flops_full, lf)),
                ],
                vec![
                    "sparse".into(),
                    format!("{:.4e}", per(r.train_flops_sparse, ls)),
                    (r.kv_bytes_sparse / ls.max(1) as u64).to_string(),
                    format!("{:.4e}", per(r.prefill_flops_sparse, ls)),
                ],
            ],
        ));
        out.push('\n');
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|row| {
                vec![
                    row.config_id(),
                    format!("{:.2}", row.report.kv_bytes() as f64 / 1e9),
                    format!("{:.5}", row.report.ratios.kv),
                    format!("{:.1}%", 100.0 * row.report.kv_reduction()),
                    format!("{:.5}", row.report.ratios.train),
                    format!("{:.3}x", row.speedups.training),
                    format!("{:.3}x", row.speedups.prefill),
                    format!("{:.3}x", row.speedups.decode),
                ]
            })
            .collect();
        out.push_str(&table(
            &["config", "kv_GB", "kv_ratio", "kv_saved", "train_ratio", "train_ub", "prefill_ub", "decode_ub"],
            &rows,
        ));
        out.push_str("(*_ub: FLOPs/bytes upper bounds, not wall-clock predictions)\n");
        for row in &self.rows {
            out.push_str(&format!("\nretained KV blocks at the last position, {}\n", row.config_id()));
            out.push_str(&self.listing(row));
        }
        out
    }

    fn listing(&self, row: &CostRow) -> String {
        let c = &row.config;
        let last = (c.n_tokens - 1) / c.spec.block_size;
        let n_layers = c.n_layers();
        let mut out = String::new();
        for l in 0..n_layers {
            let spec = if row.full_layers.contains(&l) {
                PatternSpec::full(c.spec.block_size)
            } else {
                c.spec
            };
            out.push_str(&format!(
                "layer {l:>3} {:<12} blocks=[{}]\n",
                spec.pattern.to_string(),
                ranges(&spec.row_blocks(last))
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn llama_geometry_sweep() {
        let s = run(&CostArgs::default()).unwrap();
        assert_eq!(s.rows.len(), 4);
        assert!((s.row(12).unwrap().report.ratios.kv - 0.385).abs() < 0.01);
        assert!((s.row(12).unwrap().report.kv_reduction() - 0.615).abs() < 0.001);
        assert_eq!(s.row(32).unwrap().report.ratios.kv, 1.0);
        assert!((s.row(5).unwrap().report.ratios.kv - 0.170).abs() < 0.001);
        let text = s.text();
        assert!(text.contains("blocks=[0,2016-2047]"));
        assert!(text.contains("blocks=[0-2047]"));
        assert_eq!(s.csv().column("config_id"), vec!["L32F5", "L32F7", "L32F12", "L32F32"]);
    }

    #[test]
    fn range_listing() {
        assert_eq!(ranges(&[0, 1, 2, 5, 7, 8]), "0-2,5,7-8");
        assert_eq!(ranges(&[]), "");
    }

    #[test]
    fn too_many_full_layers() {
        let args = CostArgs {
            full_counts: vec![40],
            ..CostArgs::default()
        };
        assert!(matches!(run(&args), Err(CliError::Usage(_))));
    }
}
