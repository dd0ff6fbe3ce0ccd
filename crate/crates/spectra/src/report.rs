//! Markdown tables from step logs, ratio tables and evaluation reports.

use std::path::Path;

use crate::error::{self, Error, Result};
use crate::pipeline::EvalReport;

fn row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn rule(n: usize) -> String {
    row(&vec!["---".to_string(); n])
}

/// Formats a number the way the tables show it: four decimals, or the raw
/// text when it does not parse.
fn cell(s: &str) -> String {
    match s.parse::<f64>() {
        Ok(v) if s.contains('.') || s.contains('e') => format!("{v:.4}"),
        _ => s.to_string(),
    }
}

/// A CSV file as a Markdown table; the key column is kept verbatim. Longer files keep `max_rows` rows spread
/// evenly, always including the first and last.
pub fn csv_table(text: &str, max_rows: usize) -> Result<String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::config("empty CSV"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let body: Vec<&str> = lines.collect();
    let keep: Vec<usize> = if body.len() <= max_rows.max(2) {
        (0..body.len()).collect()
    } else {
        let m = max_rows.max(2);
        let mut idx: Vec<usize> = (0..m).map(|i| i * (body.len() - 1) / (m - 1)).collect();
        idx.dedup();
        idx
    };
    let mut out = row(&header) + &rule(header.len());
    for i in keep {
        let cells: Vec<String> = body[i]
            .split(',')
            .enumerate()
            .map(|(j, c)| if j == 0 { c.to_string() } else { cell(c) })
            .collect();
        out.push_str(&row(&cells));
    }
    Ok(out)
}

/// One row per report; metric columns are the union in first-seen order.
pub fn reports_table(reports: &[EvalReport]) -> String {
    let mut metrics: Vec<String> = Vec::new();
    for r in reports {
        for k in r.metrics.keys() {
            if !metrics.contains(k) {
                metrics.push(k.clone());
            }
        }
    }
    let mut header = vec!["task".to_string(), "dataset".to_string()];
    header.extend(metrics.iter().cloned());
    header.push("checkpoint".into());
    let mut out = row(&header) + &rule(header.len());
    for r in reports {
        let mut cells = vec![r.task.clone(), r.dataset.clone()];
        for m in &metrics {
            cells.push(r.metric(m).map_or_else(String::new, |v| format!("{:.2}", 100.0 * v)));
        }
        cells.push(r.model_checkpoint_hash.clone());
        out.push_str(&row(&cells));
    }
    out
}

/// Renders each input by extension: `.csv` files become tables, `.json`
/// evaluation reports are gathered into one table (metrics in percent).
pub fn render(inputs: &[&Path], max_rows: usize) -> Result<String> {
    let mut out = String::new();
    let mut reports = Vec::new();
    for p in inputs {
        match p.extension().and_then(|e| e.to_str()) {
            Some("csv") => {
                out.push_str(&format!("### {}\n\n", p.display()));
                out.push_str(&csv_table(&error::read_string(p)?, max_rows)?);
                out.push('\n');
            }
            Some("json") => reports.push(EvalReport::load(p)?),
            _ => return Err(Error::config(format!("{}: expected a .csv or .json file", p.display()))),
        }
    }
    if !reports.is_empty() {
        out.push_str("### evaluation\n\n");
        out.push_str(&reports_table(&reports));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_table() {
        let t = csv_table("m,top1\n0,0.5\n0.5,0.625\n1,0.75\n", 20).unwrap();
        assert_eq!(t, "| m | top1 |\n| --- | --- |\n| 0 | 0.5000 |\n| 0.5 | 0.6250 |\n| 1 | 0.7500 |\n");
    }

    #[test]
    fn long_logs_are_thinned() {
        let mut csv = String::from("step,total\n");
        for i in 0..100 {
            csv.push_str(&format!("{i},{}.0\n", 100 - i));
        }
        let t = csv_table(&csv, 5).unwrap();
        assert_eq!(t.lines().count(), 7);
        assert!(t.contains("| 99 | 1.0000 |"));
    }
}
