//! Plain-text tables for evaluation and ablation reports.

use std::fmt::Write;

use cirlab_core::retrieval::EvalReport;
use cirlab_core::train::AblationReport;

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

pub fn eval_table(r: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "benchmark {}  queries {}  index {}", r.benchmark.name(), r.n_queries, r.index_size).unwrap();
    writeln!(s, "{:>4}  {:>9}  {:>9}  {:>9}", "k", "R@k", "R_s@k", "mAP@k").unwrap();
    for row in &r.rows {
        writeln!(
            s,
            "{:>4}  {:>9}  {:>9}  {:>9}",
            row.k,
            cell(Some(row.recall)),
            cell(row.subset_recall),
            cell(Some(row.map))
        )
        .unwrap();
    }
    s
}

/// One line per arm with seed-averaged metrics.
pub fn ablation_table(r: &AblationReport) -> String {
    let width = r.rows.iter().map(|row| row.arm.name.len()).max().unwrap_or(3).max(3);
    let mut s = String::new();
    write!(s, "{:<width$}  seeds", "arm").unwrap();
    for k in &r.ks {
        write!(s, "  {:>9}", format!("R@{k}")).unwrap();
    }
    for k in &r.ks {
        write!(s, "  {:>9}", format!("mAP@{k}")).unwrap();
    }
    s.push('\n');
    for row in &r.rows {
        write!(s, "{:<width$}  {:>5}", row.arm.name, row.seeds.len()).unwrap();
        for v in row.mean_recall.iter().chain(&row.mean_map) {
            write!(s, "  {:>9}", cell(Some(*v))).unwrap();
        }
        s.push('\n');
    }
    s
}
