//! `step,loss,recall` CSV.

use std::path::{Path, PathBuf};

use crate::fsutil::atomic_write;

pub const HEADER: &str = "step,loss,recall";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub recall: f64,
}

/// Accumulates rows and rewrites the whole file on every flush, so the
/// file on disk is always a complete CSV.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    path: PathBuf,
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new(path: &Path) -> Self {
        Self {
            path: path.to_path_buf(),
            rows: Vec::new(),
        }
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.recall));
        }
        s
    }

    pub fn flush(&self) -> std::io::Result<()> {
        atomic_write(&self.path, self.render().as_bytes())
    }
}

pub fn parse(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(format!("expected header `{HEADER}`"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || format!("line {}: malformed row `{line}`", i + 2);
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(MetricsRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                recall: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
