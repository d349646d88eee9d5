//! Metrics records and the delimited text files they are persisted in.
//!
//! Metrics file columns, in order:
//!
//! ```text
//! step, dev_<module 1>, …, dev_<module |L|>, projection_rate, train_loss, retention_loss, shift_loss
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a parsed file
//! reproduces the original records exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    /// Root-sum-of-squares deviation per module, in stack order.
    pub module_deviations: Vec<f64>,
    /// Fraction of trainable groups whose update was projected at this step.
    pub projection_rate: f64,
    pub train_loss: f64,
    pub retention_loss: f64,
    pub shift_loss: f64,
}

impl MetricsRecord {
    pub fn total_deviation(&self) -> f64 {
        self.module_deviations.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

const TRAILING: [&str; 4] = ["projection_rate", "train_loss", "retention_loss", "shift_loss"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub module_names: Vec<String>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsTable {
    pub fn header(&self) -> String {
        let mut cols = vec!["step".to_string()];
        cols.extend(self.module_names.iter().map(|m| format!("dev_{m}")));
        cols.extend(TRAILING.iter().map(|s| s.to_string()));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.records {
            write!(out, "{}", r.step).unwrap();
            for d in &r.module_deviations {
                write!(out, ",{d}").unwrap();
            }
            writeln!(
                out,
                ",{},{},{},{}",
                r.projection_rate, r.train_loss, r.retention_loss, r.shift_loss
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            what: "metrics file",
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 1 + TRAILING.len() + 1 || cols[0] != "step" || cols[cols.len() - 4..] != TRAILING {
            return Err(err(1, format!("unexpected header `{header}`")));
        }
        let module_names = cols[1..cols.len() - 4]
            .iter()
            .map(|c| {
                c.strip_prefix("dev_")
                    .map(str::to_string)
                    .ok_or_else(|| err(1, format!("column `{c}` is not a deviation column")))
            })
            .collect::<Result<Vec<_>>>()?;
        let modules = module_names.len();

        let mut records = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(err(
                    lineno,
                    format!("expected {} fields, found {}", cols.len(), fields.len()),
                ));
            }
            let step = fields[0]
                .parse::<usize>()
                .map_err(|e| err(lineno, format!("step `{}`: {e}", fields[0])))?;
            let nums = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| err(lineno, format!("value `{f}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            records.push(MetricsRecord {
                step,
                module_deviations: nums[..modules].to_vec(),
                projection_rate: nums[modules],
                train_loss: nums[modules + 1],
                retention_loss: nums[modules + 2],
                shift_loss: nums[modules + 3],
            });
        }
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(err(records.len() + 1, "file truncated (no trailing newline)".into()));
        }
        Ok(Self { module_names, records })
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Write `table` to `path`; the file is byte-identical for identical records.
pub fn emit_metrics(table: &MetricsTable, path: &Path) -> Result<()> {
    if table.records.is_empty() {
        return Err(Error::Contract("no metrics records to emit".into()));
    }
    std::fs::write(path, table.to_csv()).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricsTable::from_csv(&text)
}

/// One row of a freeze ablation or scheduler sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub steps: usize,
    pub train_loss: f64,
    pub retention_loss: f64,
    pub shift_loss: f64,
    pub total_deviation: f64,
    pub module_deviations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub module_names: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,steps,train_loss,retention_loss,shift_loss,total_deviation");
        for m in &self.module_names {
            write!(out, ",dev_{m}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{}",
                r.label, r.steps, r.train_loss, r.retention_loss, r.shift_loss, r.total_deviation
            )
            .unwrap();
            for d in &r.module_deviations {
                write!(out, ",{d}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(records: Vec<MetricsRecord>) -> MetricsTable {
        MetricsTable {
            module_names: vec!["a".into(), "b".into()],
            records,
        }
    }

    fn record(step: usize, x: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            module_deviations: vec![x, 2.0 * x],
            projection_rate: 0.25,
            train_loss: 1.0 / 3.0,
            retention_loss: x * 1e-17,
            shift_loss: 12345.678,
        }
    }

    #[test]
    fn header_and_line_count() {
        let t = table((0..3).map(|i| record(i * 10, i as f64)).collect());
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(
            csv.lines().next().unwrap(),
            "step,dev_a,dev_b,projection_rate,train_loss,retention_loss,shift_loss"
        );
    }

    #[test]
    fn truncated_file_reports_line() {
        let csv = table(vec![record(0, 1.0), record(5, 2.0)]).to_csv();
        let cut = &csv[..csv.len() - 8];
        match MetricsTable::from_csv(cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_rejected() {
        assert!(MetricsTable::from_csv("").is_err());
        assert!(MetricsTable::from_csv("step,foo\n").is_err());
        assert!(MetricsTable::from_csv("step,x,projection_rate,train_loss,retention_loss,shift_loss\n").is_err());
    }

    #[test]
    fn emit_requires_records() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_metrics(&table(vec![]), &dir.path().join("m.csv")).is_err());
        let missing = dir.path().join("no/such/dir/m.csv");
        match emit_metrics(&table(vec![record(0, 1.0)]), &missing) {
            Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("no/such/dir")),
            other => panic!("expected I/O error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn csv_roundtrip_is_exact(
            rows in prop::collection::vec(
                (0usize..100_000, prop::array::uniform6(prop::num::f64::NORMAL | prop::num::f64::ZERO)),
                1..20,
            )
        ) {
            let records: Vec<MetricsRecord> = rows
                .into_iter()
                .map(|(step, v)| MetricsRecord {
                    step,
                    module_deviations: vec![v[0].abs(), v[1].abs()],
                    projection_rate: v[2],
                    train_loss: v[3],
                    retention_loss: v[4],
                    shift_loss: v[5],
                })
                .collect();
            let t = table(records);
            let parsed = MetricsTable::from_csv(&t.to_csv()).unwrap();
            prop_assert_eq!(&parsed, &t);
            prop_assert_eq!(parsed.to_csv(), t.to_csv());
        }
    }
}
