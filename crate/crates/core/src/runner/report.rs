//! Markdown and CSV rendering of aggregates, one section per model.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use super::aggregate::{AggregateResult, Reduction};
use crate::cascade::display_name;
use crate::metrics::Metric;
use crate::stats::Summary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown report format `{other}` (expected markdown or csv)")),
        }
    }
}

/// `m.xx ± s.xx`, flagged when only one sample exists; `n/a` for missing cells.
pub fn format_cell(summary: Option<&Summary>) -> String {
    match summary {
        None => "n/a".into(),
        Some(s) if s.is_degenerate() => format!("{:.2} ± {:.2} (n=1)", s.mean, s.std),
        Some(s) => format!("{:.2} ± {:.2}", s.mean, s.std),
    }
}

/// Indices of the best rows for `metric`: max mean for EQ and Regard, min
/// for Perplexity. Every tied row is returned. Missing cells never win.
pub fn best_rows(rows: &[&AggregateResult], metric: Metric) -> BTreeSet<usize> {
    let means: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.get(metric).map(|s| (i, s.mean)))
        .filter(|(_, m)| !m.is_nan())
        .collect();
    let best = means
        .iter()
        .map(|(_, m)| *m)
        .reduce(|a, b| if metric.higher_is_better() { a.max(b) } else { a.min(b) });
    match best {
        Some(b) => means.iter().filter(|(_, m)| *m == b).map(|(i, _)| *i).collect(),
        None => BTreeSet::new(),
    }
}

fn sections(aggregates: &[AggregateResult]) -> Vec<(&str, Vec<&AggregateResult>)> {
    let mut out: Vec<(&str, Vec<&AggregateResult>)> = Vec::new();
    for a in aggregates {
        match out.iter_mut().find(|(m, _)| *m == a.model_name) {
            Some((_, rows)) => rows.push(a),
            None => out.push((&a.model_name, vec![a])),
        }
    }
    out
}

/// Renders aggregates in input order; [`super::aggregate`] already returns
/// them sorted by model and strategy.
pub fn render_report(aggregates: &[AggregateResult], format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => render_markdown(aggregates),
        ReportFormat::Csv => render_csv(aggregates),
    }
}

fn render_markdown(aggregates: &[AggregateResult]) -> String {
    let mut out = String::new();
    let reduction = aggregates.first().map(|a| a.reduction).unwrap_or(Reduction::RunMeans);
    let _ = writeln!(out, "# Results\n");
    let _ = writeln!(out, "Cells: {}. Best per metric in bold.\n", reduction.describe());
    for (model, rows) in sections(aggregates) {
        let _ = writeln!(out, "## {model}\n");
        let _ = writeln!(out, "| Method | Empathy Quotient ↑ | Regard ↑ | Perplexity ↓ |");
        let _ = writeln!(out, "| --- | --- | --- | --- |");
        let best: Vec<BTreeSet<usize>> = Metric::ALL.iter().map(|m| best_rows(&rows, *m)).collect();
        for (i, row) in rows.iter().enumerate() {
            let _ = write!(out, "| {} |", display_name(&row.strategy_name));
            for (k, metric) in Metric::ALL.iter().enumerate() {
                let cell = format_cell(row.get(*metric));
                if best[k].contains(&i) {
                    let _ = write!(out, " **{cell}** |");
                } else {
                    let _ = write!(out, " {cell} |");
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

fn render_csv(aggregates: &[AggregateResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["model", "method", "Empathy Quotient", "Regard", "Perplexity"];
    w.write_record(header).expect("in-memory write");
    for a in aggregates {
        let mut row = vec![a.model_name.clone(), display_name(&a.strategy_name)];
        row.extend(Metric::ALL.iter().map(|m| format_cell(a.get(*m))));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn s(mean: f64, std: f64) -> Option<Summary> {
        Some(Summary { mean, std, n: 10 })
    }

    fn row(model: &str, strategy: &str, eq: f64, rg: f64, ppl: f64) -> AggregateResult {
        AggregateResult {
            model_name: model.into(),
            strategy_name: strategy.into(),
            reduction: Reduction::RunMeans,
            eq: s(eq, 0.01),
            regard: s(rg, 0.01),
            perplexity: s(ppl, 0.1),
        }
    }

    #[test]
    fn cell_format() {
        assert_eq!(format_cell(s(0.891, 0.0149).as_ref()), "0.89 ± 0.01");
        assert_eq!(format_cell(s(-0.125, 0.03).as_ref()), "-0.12 ± 0.03");
        assert_eq!(
            format_cell(Some(&Summary {
                mean: 0.5,
                std: 0.0,
                n: 1
            })),
            "0.50 ± 0.00 (n=1)"
        );
        assert_eq!(format_cell(None), "n/a");
    }

    #[test]
    fn single_strategy_bolds_everything() {
        let report = render_report(&[row("m", "ecn", 0.9, 0.2, 12.0)], ReportFormat::Markdown);
        assert!(report.contains("| ECN | **0.90 ± 0.01** | **0.20 ± 0.01** | **12.00 ± 0.10** |"));
    }

    #[test]
    fn ties_bold_all() {
        let rows = [row("m", "standard", 0.9, 0.2, 12.0), row("m", "ecn", 0.9, 0.1, 13.0)];
        let refs: Vec<&AggregateResult> = rows.iter().collect();
        assert_eq!(best_rows(&refs, Metric::Eq), BTreeSet::from([0, 1]));
        assert_eq!(best_rows(&refs, Metric::Regard), BTreeSet::from([0]));
        assert_eq!(best_rows(&refs, Metric::Perplexity), BTreeSet::from([0]));
    }

    #[test]
    fn missing_cells_never_bold() {
        let mut a = row("m", "standard", 0.9, 0.2, 12.0);
        a.perplexity = None;
        let b = row("m", "ecn", 0.8, 0.1, 30.0);
        let refs = [&a, &b];
        assert_eq!(best_rows(&refs, Metric::Perplexity), BTreeSet::from([1]));
        let report = render_report(&[a.clone(), b.clone()], ReportFormat::Markdown);
        assert!(report.contains("| n/a |"));
    }

    #[test]
    fn csv_layout() {
        let csv = render_report(&[row("gpt-4", "basic_empathy", 0.95, 0.41, 15.92)], ReportFormat::Csv);
        assert_eq!(
            csv,
            "model,method,Empathy Quotient,Regard,Perplexity\ngpt-4,Basic Empathy Prompt,0.95 ± 0.01,0.41 ± 0.01,15.92 ± 0.10\n"
        );
    }

    proptest! {
        #[test]
        fn bolding_invariant_under_shift(
            means in prop::collection::vec(-64i32..64, 1..8),
            shift in -1024i32..1024,
        ) {
            // Quarter-integer means keep the shifted comparison exact.
            let rows: Vec<AggregateResult> = means
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let v = *m as f64 / 4.0;
                    row("m", &format!("s{i}"), v, v, v)
                })
                .collect();
            let shifted: Vec<AggregateResult> = rows
                .iter()
                .map(|r| {
                    let c = shift as f64 / 4.0;
                    let mut r = r.clone();
                    for cell in [&mut r.eq, &mut r.regard, &mut r.perplexity] {
                        if let Some(s) = cell.as_mut() {
                            s.mean += c;
                        }
                    }
                    r
                })
                .collect();
            let a: Vec<&AggregateResult> = rows.iter().collect();
            let b: Vec<&AggregateResult> = shifted.iter().collect();
            for m in Metric::ALL {
                prop_assert_eq!(best_rows(&a, m), best_rows(&b, m));
            }
        }
    }
}
