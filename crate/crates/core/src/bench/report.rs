use std::fmt::Write as _;

use crate::bench::curves::accuracy_curve_csv;
use crate::bench::sweep::{BenchRecord, SweepReport};
use crate::compress::Technique;
use crate::kernels::Algorithm;

pub const CSV_HEADER: &str =
    "variant,technique,level,algorithm,tuned,median_ns,runs,compression_ratio,expected_speedup,achieved_fraction,top1";

/// Rendered sweep outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub markdown: String,
    pub csv: String,
    /// Accuracy curves measured while choosing prune levels; header only
    /// when levels were fixed.
    pub curves_csv: String,
}

fn csv_row(r: &BenchRecord) -> String {
    format!(
        "{},{},{},{},{},{:.1},{},{:.6},{:.6},{:.6},{:.6}",
        r.variant,
        r.technique.name(),
        r.technique.level().map(|l| l.to_string()).unwrap_or_default(),
        r.algorithm,
        r.tuned,
        r.median_ns,
        r.runs,
        r.compression_ratio,
        r.expected_speedup,
        r.achieved_fraction,
        r.top1
    )
}

fn tuning(tuned: bool) -> &'static str {
    if tuned {
        "Tuned"
    } else {
        "Untuned"
    }
}

fn ordered<T: PartialEq + Copy>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for t in items {
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

/// Fastest record among `records` matching `keep`; ties go to the first.
fn fastest(records: &[BenchRecord], keep: impl Fn(&BenchRecord) -> bool) -> Option<&BenchRecord> {
    records.iter().filter(|r| keep(r)).fold(None, |best: Option<&BenchRecord>, r| match best {
        Some(b) if b.median_ns <= r.median_ns => Some(b),
        _ => Some(r),
    })
}

fn micros(ns: f64) -> String {
    format!("{:.3}", ns / 1_000.0)
}

fn percent(f: f64) -> String {
    format!("{:.1}%", f * 100.0)
}

fn table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out.push('\n');
}

/// Renders the CSV of all records and a Markdown report: a latency grid,
/// the fastest algorithm per technique, the fastest technique per
/// algorithm, the overall fastest combination, and expected versus achieved
/// speedup. All tables are derived from the records alone; error cells are
/// listed separately.
pub fn summarize(report: &SweepReport) -> Summary {
    let records = &report.records;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in records {
        csv.push_str(&csv_row(r));
        csv.push('\n');
    }

    let techniques: Vec<Technique> = ordered(records.iter().map(|r| r.technique));
    let algorithms: Vec<Algorithm> = ordered(records.iter().map(|r| r.algorithm));
    let states: Vec<bool> = ordered(records.iter().map(|r| r.tuned));

    let mut md = String::new();
    let _ = writeln!(md, "# Sweep report: {}\n", report.model);
    let _ = writeln!(
        md,
        "Baseline top-1 {:.3}. Latencies are medians in microseconds at batch size 1. \
         Prune levels are applied to the unpruned model without fine-tuning.\n",
        report.baseline_top1
    );
    for c in &report.levels {
        let how = match c.elbow {
            Some(e) if e.flagged => format!("no level within {} of baseline; least compressed level used", report.drop_threshold),
            Some(e) => format!("elbow at top-1 {:.3} (drop threshold {})", e.accuracy, report.drop_threshold),
            None => "fixed".to_string(),
        };
        let _ = writeln!(md, "- {} pruning level {}: {how}", c.kind.name(), c.level);
    }
    if !report.levels.is_empty() {
        md.push('\n');
    }

    md.push_str("## Latency\n\nBest time per tuning state in bold.\n\n");
    let mut header = vec!["Technique".to_string()];
    for &t in &states {
        for a in &algorithms {
            header.push(format!("{} ({})", a.label(), tuning(t).to_lowercase()));
        }
    }
    let best: Vec<(bool, f64)> =
        states.iter().filter_map(|&t| fastest(records, |r| r.tuned == t).map(|r| (t, r.median_ns))).collect();
    let rows: Vec<Vec<String>> = techniques
        .iter()
        .map(|tech| {
            let mut row = vec![tech.to_string()];
            for &t in &states {
                for a in &algorithms {
                    let cell = records.iter().find(|r| r.technique == *tech && r.algorithm == *a && r.tuned == t);
                    row.push(match cell {
                        Some(r) if best.contains(&(t, r.median_ns)) => format!("**{}**", micros(r.median_ns)),
                        Some(r) => micros(r.median_ns),
                        None => "error".to_string(),
                    });
                }
            }
            row
        })
        .collect();
    table(&mut md, &header, &rows);

    md.push_str("## Fastest algorithm per technique\n\n");
    let mut header = vec!["Tuning".to_string()];
    header.extend(techniques.iter().map(|t| t.short().to_string()));
    let rows: Vec<Vec<String>> = states
        .iter()
        .map(|&t| {
            let mut row = vec![tuning(t).to_string()];
            row.extend(techniques.iter().map(|tech| {
                fastest(records, |r| r.tuned == t && r.technique == *tech).map_or("-".into(), |r| r.algorithm.label().to_string())
            }));
            row
        })
        .collect();
    table(&mut md, &header, &rows);

    md.push_str("## Fastest technique per algorithm\n\n");
    let mut header = vec!["Tuning".to_string()];
    header.extend(algorithms.iter().map(|a| a.label().to_string()));
    let rows: Vec<Vec<String>> = states
        .iter()
        .map(|&t| {
            let mut row = vec![tuning(t).to_string()];
            row.extend(algorithms.iter().map(|a| {
                fastest(records, |r| r.tuned == t && r.algorithm == *a).map_or("-".into(), |r| r.technique.short().to_string())
            }));
            row
        })
        .collect();
    table(&mut md, &header, &rows);

    md.push_str("## Overall fastest\n\n");
    let header = vec!["Tuning".to_string(), "Combination".to_string(), "Median (us)".to_string()];
    let rows: Vec<Vec<String>> = states
        .iter()
        .filter_map(|&t| {
            fastest(records, |r| r.tuned == t).map(|r| {
                vec![tuning(t).to_string(), format!("{}+{}", r.technique.short(), r.algorithm.label()), micros(r.median_ns)]
            })
        })
        .collect();
    table(&mut md, &header, &rows);

    md.push_str("## Expected vs achieved speedup\n\nAchieved speedup uses the fastest algorithm for each technique against the fastest dense time.\n\n");
    let header: Vec<String> = ["Technique", "Tuning", "Compression", "Top-1", "Expected", "Achieved", "Of expected"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for tech in &techniques {
        for &t in &states {
            if let Some(r) = fastest(records, |r| r.tuned == t && r.technique == *tech) {
                rows.push(vec![
                    tech.to_string(),
                    tuning(t).to_string(),
                    percent(r.compression_ratio),
                    format!("{:.3}", r.top1),
                    format!("{:.1}x", r.expected_speedup),
                    format!("{:.2}x", r.speedup()),
                    percent(r.achieved_fraction),
                ]);
            }
        }
    }
    table(&mut md, &header, &rows);

    if !report.errors.is_empty() {
        md.push_str("## Failed cells\n\n");
        let header: Vec<String> = ["Variant", "Algorithm", "Tuning", "Reason"].iter().map(|s| s.to_string()).collect();
        let rows: Vec<Vec<String>> = report
            .errors
            .iter()
            .map(|e| vec![e.variant.clone(), e.algorithm.label().to_string(), tuning(e.tuned).to_string(), e.reason.replace('|', "/")])
            .collect();
        table(&mut md, &header, &rows);
    }

    Summary { markdown: md, csv, curves_csv: accuracy_curve_csv(&report.curves) }
}
