use std::fmt::Write as _;

use proxtune::MetricsTable;

const BARS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];

/// Two whitespace-separated columns: step and the module's deviation.
pub fn module_series(table: &MetricsTable, module: usize) -> String {
    let mut out = String::from("# step deviation\n");
    for r in &table.records {
        writeln!(out, "{} {}", r.step, r.module_deviations[module]).unwrap();
    }
    out
}

/// One bar per record, scaled to the largest deviation of any module.
fn sparkline(values: impl Iterator<Item = f64>, max: f64) -> String {
    values
        .map(|v| {
            if max > 0.0 {
                BARS[((v / max) * (BARS.len() - 1) as f64).round() as usize]
            } else {
                BARS[0]
            }
        })
        .collect()
}

pub fn render(table: &MetricsTable) -> String {
    let last = table.records.last().expect("caller checked for records");
    let width = table.module_names.iter().map(String::len).max().unwrap_or(0).max(6);
    let max = table
        .records
        .iter()
        .flat_map(|r| r.module_deviations.iter().copied())
        .fold(0.0, f64::max);

    let mut out = String::new();
    writeln!(out, "final step {}", last.step).unwrap();
    writeln!(out, "{:<width$}  {:>12}  per-step", "module", "deviation").unwrap();
    for (i, name) in table.module_names.iter().enumerate() {
        let line = sparkline(table.records.iter().map(|r| r.module_deviations[i]), max);
        writeln!(out, "{name:<width$}  {:>12.6}  {line}", last.module_deviations[i]).unwrap();
    }
    writeln!(
        out,
        "train {:.6e}  retention {:.6e}  shift {:.6e}  total deviation {:.6}",
        last.train_loss,
        last.retention_loss,
        last.shift_loss,
        last.total_deviation()
    )
    .unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proxtune::MetricsRecord;

    fn table() -> MetricsTable {
        let rec = |step, a, b| MetricsRecord {
            step,
            module_deviations: vec![a, b],
            projection_rate: 0.0,
            train_loss: 1.0,
            retention_loss: 1.0,
            shift_loss: 1.0,
        };
        MetricsTable {
            module_names: vec!["early".into(), "late".into()],
            records: vec![rec(0, 0.0, 0.0), rec(10, 0.5, 1.0), rec(20, 1.0, 2.0)],
        }
    }

    #[test]
    fn modules_in_stack_order() {
        let text = render(&table());
        let early = text.find("early").unwrap();
        let late = text.find("late ").unwrap();
        assert!(early < late);
        assert!(text.contains("▁▃▅"));
        assert!(text.contains("▁▅█"));
    }

    #[test]
    fn series_has_one_line_per_record() {
        let s = module_series(&table(), 1);
        assert_eq!(s, "# step deviation\n0 0\n10 1\n20 2\n");
    }
}
