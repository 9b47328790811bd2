//! CSV artifacts with a reproducibility header.
//!
//! ```text
//! # tool=longgen 0.1.0
//! # command=equiv
//! # seed=42
//! # config_hash=<sha256>
//! # generated_unix=1760000000
//! col_a,col_b
//! ...
//! ```
//!
//! Only the `generated_unix` line changes between identical reruns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::settings::Settings;
use crate::{CliError, TOOL_NAME, TOOL_VERSION};

#[derive(Clone, Debug, PartialEq)]
pub struct Csv {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Column values by name, for tests and summaries.
    pub fn column(&self, name: &str) -> Vec<&str> {
        let Some(i) = self.columns.iter().position(|c| *c == name) else {
            return Vec::new();
        };
        self.rows.iter().map(|r| r[i].as_str()).collect()
    }

    pub fn render(&self, command: &str, seed: u64, settings: &Settings, unix_time: u64) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# tool={TOOL_NAME} {TOOL_VERSION}");
        let _ = writeln!(out, "# command={command}");
        let _ = writeln!(out, "# seed={seed}");
        let _ = writeln!(out, "# config_hash={}", settings.hash());
        let _ = writeln!(out, "# generated_unix={unix_time}");
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| escape(c)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Writes `<dir>/<name>` and returns the path.
    pub fn write(
        &self,
        dir: &Path,
        name: &str,
        command: &str,
        seed: u64,
        settings: &Settings,
    ) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(name);
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        std::fs::write(&path, self.render(command, seed, settings, now))?;
        Ok(path)
    }
}

fn escape(cell: &str) -> String {
    if cell.contains([',', '"', '\n']) {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

/// Float formatting shared by every CSV: shortest round-trip form.
pub fn num(x: f64) -> String {
    format!("{x}")
}

/// Scientific notation for error magnitudes.
pub fn sci(x: f64) -> String {
    format!("{x:.3e}")
}

/// Fixed-width text table.
pub fn table(columns: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = columns.iter().map(|c| c.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        padded.join("  ")
    };
    let mut out = line(columns.to_vec());
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_quoting() {
        let mut csv = Csv::new(&["pattern", "value"]);
        csv.push(vec!["sink:1,2".into(), num(0.5)]);
        let text = csv.render("equiv", 9, &Settings::default(), 123);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], format!("# tool=longgen {TOOL_VERSION}"));
        assert_eq!(lines[2], "# seed=9");
        assert!(lines[3].starts_with("# config_hash="));
        assert_eq!(lines[4], "# generated_unix=123");
        assert_eq!(lines[5], "pattern,value");
        assert_eq!(lines[6], "\"sink:1,2\",0.5");
        assert_eq!(csv.column("value"), vec!["0.5"]);
    }

    #[test]
    fn reruns_differ_only_in_timestamp() {
        let mut csv = Csv::new(&["a"]);
        csv.push(vec!["1".into()]);
        let s = Settings::default();
        let a = csv.render("cost", 1, &s, 5);
        let b = csv.render("cost", 1, &s, 6);
        let diff: Vec<(&str, &str)> = a.lines().zip(b.lines()).filter(|(x, y)| x != y).collect();
        assert_eq!(diff.len(), 1);
        assert!(diff[0].0.starts_with("# generated_unix="));
    }

    #[test]
    fn table_alignment() {
        let t = table(&["a", "bbb"], &[vec!["10".into(), "2".into()]]);
        assert_eq!(t, " a  bbb\n10    2\n");
    }
}
