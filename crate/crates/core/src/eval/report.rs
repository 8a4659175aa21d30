//! Renders evaluation and training-resource reports as GitHub pipe
//! tables plus a machine-readable JSON payload.
//!
//! F1 tables: one row per (model label, context mode), one column per
//! dataset, best score per mode/dataset group in bold. Resource tables:
//! fixed metric rows, one column per (dataset, run label), lowest value
//! per metric/dataset group in bold. Bold markers only appear when a
//! group has at least two entries to compare.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EvalError, EvalMode, EvalReport};
use crate::adapters::TrainingReport;

/// One column of the resource table, in display units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceColumn {
    pub label: String,
    pub dataset: String,
    pub trainable_params_m: f64,
    pub training_time_min: f64,
    pub gpu_memory_gb: Option<f64>,
    pub perplexity: Option<f64>,
}

impl From<&TrainingReport> for ResourceColumn {
    fn from(report: &TrainingReport) -> Self {
        Self {
            label: report.label.clone(),
            dataset: report.dataset.clone(),
            trainable_params_m: report.trainable_params as f64 / 1e6,
            training_time_min: report.wall_time_s / 60.0,
            gpu_memory_gb: report.peak_memory_bytes.map(|b| b as f64 / 1e9),
            perplexity: report.perplexity,
        }
    }
}

/// Input to [`render_report`]; a single call renders one kind only.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyReport {
    Eval(EvalReport),
    Resource(ResourceColumn),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    /// GitHub-flavored markdown.
    pub text: String,
    /// The same table as structured data.
    pub json: serde_json::Value,
}

pub fn render_report(reports: &[AnyReport]) -> Result<RenderedReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let any_eval = reports.iter().any(|r| matches!(r, AnyReport::Eval(_)));
    let any_resource = reports.iter().any(|r| matches!(r, AnyReport::Resource(_)));
    if any_eval && any_resource {
        return Err(EvalError::MixedReportKinds);
    }
    if any_eval {
        let evals: Vec<&EvalReport> = reports
            .iter()
            .map(|r| match r {
                AnyReport::Eval(e) => e,
                AnyReport::Resource(_) => unreachable!("kinds checked above"),
            })
            .collect();
        render_f1_table(&evals)
    } else {
        let columns: Vec<&ResourceColumn> = reports
            .iter()
            .map(|r| match r {
                AnyReport::Resource(c) => c,
                AnyReport::Eval(_) => unreachable!("kinds checked above"),
            })
            .collect();
        render_resource_table(&columns)
    }
}

/// First-appearance order with deduplication.
fn appearance_order<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = Vec::new();
    for item in items {
        if !seen.iter().any(|s: &String| s == item) {
            seen.push(item.to_string());
        }
    }
    seen
}

fn render_f1_table(reports: &[&EvalReport]) -> Result<RenderedReport, EvalError> {
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[..i] {
            if a.model_label == b.model_label && a.mode == b.mode && a.dataset == b.dataset {
                return Err(EvalError::DuplicateCell {
                    label: a.model_label.clone(),
                    mode: a.mode.to_string(),
                    dataset: a.dataset.clone(),
                });
            }
        }
    }
    let mut datasets: Vec<String> =
        appearance_order(reports.iter().map(|r| r.dataset.as_str()));
    datasets.sort();
    let labels = appearance_order(reports.iter().map(|r| r.model_label.as_str()));
    // Rows: golden contexts first, then labels in input order.
    let mut rows: Vec<(EvalMode, &String)> = Vec::new();
    for mode in [EvalMode::Golden, EvalMode::Rag] {
        for label in &labels {
            if reports.iter().any(|r| r.mode == mode && &r.model_label == label) {
                rows.push((mode, label));
            }
        }
    }
    let cell = |mode: EvalMode, label: &str, dataset: &str| -> Option<&EvalReport> {
        reports
            .iter()
            .find(|r| r.mode == mode && r.model_label == label && r.dataset == dataset)
            .copied()
    };

    let mut text = String::from("## Reader F1\n\n");
    text.push_str(&format!("| Model | {} |\n", datasets.join(" | ")));
    text.push_str(&format!("| --- |{}\n", " --- |".repeat(datasets.len())));
    let mut json_rows = Vec::new();
    for &(mode, label) in &rows {
        let mut cells = Vec::new();
        let mut json_cells = serde_json::Map::new();
        for dataset in &datasets {
            let entry = cell(mode, label, dataset);
            // Bold competes only among valid reports in this mode/dataset group.
            let group: Vec<f64> = rows
                .iter()
                .filter(|&&(m, _)| m == mode)
                .filter_map(|&(m, l)| cell(m, l, dataset))
                .filter(|r| !r.invalid)
                .map(|r| r.macro_f1)
                .collect();
            let best = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let rendered = match entry {
                None => "-".to_string(),
                Some(r) => {
                    let score = format!("{:.2}", r.macro_f1);
                    if r.invalid {
                        format!("{score} (invalid)")
                    } else if group.len() >= 2 && r.macro_f1 == best {
                        format!("**{score}**")
                    } else {
                        score
                    }
                }
            };
            cells.push(rendered);
            json_cells.insert(
                dataset.clone(),
                match entry {
                    None => serde_json::Value::Null,
                    Some(r) => json!({"macro_f1": r.macro_f1, "invalid": r.invalid}),
                },
            );
        }
        text.push_str(&format!(
            "| {} + {} | {} |\n",
            label,
            mode.table_suffix(),
            cells.join(" | ")
        ));
        json_rows.push(json!({
            "label": label,
            "mode": mode,
            "cells": json_cells,
        }));
    }

    let mut json = json!({
        "kind": "f1_table",
        "datasets": datasets,
        "rows": json_rows,
    });
    if let Some(footer) = delta_footer(reports, &labels) {
        text.push('\n');
        text.push_str(&footer.0);
        text.push('\n');
        json["delta"] = footer.1;
    }
    Ok(RenderedReport { text, json })
}

/// With exactly two model labels, the average gap of the second over the
/// first across all mode/dataset cells both scored — reported both in
/// F1 points and as a percentage of the first label's score, since the
/// two summaries differ and either may be wanted.
fn delta_footer(
    reports: &[&EvalReport],
    labels: &[String],
) -> Option<(String, serde_json::Value)> {
    let [base, treat] = labels else {
        return None;
    };
    let mut absolute = Vec::new();
    let mut relative = Vec::new();
    for mode in [EvalMode::Golden, EvalMode::Rag] {
        for b in reports.iter().filter(|r| r.mode == mode && &r.model_label == base) {
            let Some(t) = reports
                .iter()
                .find(|r| r.mode == mode && &r.model_label == treat && r.dataset == b.dataset)
            else {
                continue;
            };
            if b.invalid || t.invalid {
                continue;
            }
            absolute.push(t.macro_f1 - b.macro_f1);
            if b.macro_f1 != 0.0 {
                relative.push(100.0 * (t.macro_f1 - b.macro_f1) / b.macro_f1);
            }
        }
    }
    if absolute.is_empty() {
        return None;
    }
    let abs_mean = absolute.iter().sum::<f64>() / absolute.len() as f64;
    let rel_mean = (!relative.is_empty())
        .then(|| relative.iter().sum::<f64>() / relative.len() as f64);
    let mut line = format!(
        "Average delta ({treat} vs {base}): {abs_mean:+.2} F1 absolute over {} paired cells",
        absolute.len()
    );
    if let Some(rel) = rel_mean {
        line.push_str(&format!(", {rel:+.2}% relative"));
    }
    line.push('.');
    let json = json!({
        "base": base,
        "treatment": treat,
        "absolute_mean": abs_mean,
        "relative_mean_percent": rel_mean,
        "paired_cells": absolute.len(),
    });
    Some((line, json))
}

fn render_resource_table(columns: &[&ResourceColumn]) -> Result<RenderedReport, EvalError> {
    for (i, a) in columns.iter().enumerate() {
        for b in &columns[..i] {
            if a.label == b.label && a.dataset == b.dataset {
                return Err(EvalError::DuplicateCell {
                    label: a.label.clone(),
                    mode: "train".to_string(),
                    dataset: a.dataset.clone(),
                });
            }
        }
    }
    let mut datasets: Vec<String> =
        appearance_order(columns.iter().map(|c| c.dataset.as_str()));
    datasets.sort();
    // Column order: dataset alphabetical, labels in first-appearance order
    // within each dataset.
    let mut ordered: Vec<&ResourceColumn> = Vec::new();
    for dataset in &datasets {
        for column in columns.iter().filter(|c| &c.dataset == dataset) {
            ordered.push(column);
        }
    }

    let mut text = String::from("## Fine-tuning resources\n\n");
    let headers: Vec<String> = ordered
        .iter()
        .map(|c| format!("{} ({})", c.dataset, c.label))
        .collect();
    text.push_str(&format!("| Metric | {} |\n", headers.join(" | ")));
    text.push_str(&format!("| --- |{}\n", " --- |".repeat(ordered.len())));

    struct MetricRow {
        name: &'static str,
        value: fn(&ResourceColumn) -> Option<f64>,
        format: fn(f64) -> String,
    }
    let metric_rows = [
        MetricRow {
            name: "Trainable Params (M)",
            value: |c| Some(c.trainable_params_m),
            format: |v| trim_decimal(v, 6),
        },
        MetricRow {
            name: "Training time (min)",
            value: |c| Some(c.training_time_min),
            format: |v| trim_decimal(v, 6),
        },
        MetricRow {
            name: "GPU Memory (GB)",
            value: |c| c.gpu_memory_gb,
            format: |v| format!("{v:.1}"),
        },
        MetricRow {
            name: "Perplexity",
            value: |c| c.perplexity,
            format: format_perplexity,
        },
    ];
    for row in &metric_rows {
        let mut cells = Vec::new();
        for column in &ordered {
            // Lower is better for every resource metric.
            let group: Vec<f64> = ordered
                .iter()
                .filter(|c| c.dataset == column.dataset)
                .filter_map(|c| (row.value)(c))
                .collect();
            let best = group.iter().cloned().fold(f64::INFINITY, f64::min);
            cells.push(match (row.value)(column) {
                None => "-".to_string(),
                Some(v) => {
                    let rendered = (row.format)(v);
                    if group.len() >= 2 && v == best {
                        format!("**{rendered}**")
                    } else {
                        rendered
                    }
                }
            });
        }
        text.push_str(&format!("| {} | {} |\n", row.name, cells.join(" | ")));
    }

    let json = json!({
        "kind": "resource_table",
        "columns": ordered.iter().map(|c| serde_json::to_value(c).expect("plain struct")).collect::<Vec<_>>(),
    });
    Ok(RenderedReport { text, json })
}

/// Formats with up to `max_decimals` places, trimming trailing zeros:
/// whole numbers print bare (8100 → "8100", 0.001656 → "0.001656").
fn trim_decimal(value: f64, max_decimals: usize) -> String {
    let mut s = format!("{value:.max_decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// Perplexities print with two or three decimals: three when the third
/// is significant (1.075), two otherwise (1.20).
fn format_perplexity(value: f64) -> String {
    let mut s = format!("{value:.3}");
    if s.ends_with('0') {
        s.pop();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_report(label: &str, mode: EvalMode, dataset: &str, macro_f1: f64) -> AnyReport {
        AnyReport::Eval(EvalReport {
            model_label: label.into(),
            mode,
            dataset: dataset.into(),
            n: 100,
            skipped: 0,
            invalid: false,
            macro_f1,
            latency_mean_s: 0.0,
            latency_p95_s: 0.0,
            per_example: vec![],
            skips: vec![],
        })
    }

    /// Published-results grid: two models on five datasets in both
    /// context modes, columns alphabetical, winners bold per group.
    #[test]
    fn f1_grid_renders_bold_winners_and_alphabetical_columns() {
        let g = EvalMode::Golden;
        let r = EvalMode::Rag;
        let reports = vec![
            eval_report("Llama3.1-8B", g, "HotPotQA", 41.95),
            eval_report("Llama3.1-8B", g, "NewsQA", 46.93),
            eval_report("Llama3.1-8B", g, "NarrativeQA", 59.25),
            eval_report("Llama3.1-8B", g, "PubMedQA", 77.00),
            eval_report("Llama3.1-8B", g, "WebGLM-QA", 18.34),
            eval_report("CRAFT", g, "HotPotQA", 48.21),
            eval_report("CRAFT", g, "NewsQA", 47.14),
            eval_report("CRAFT", g, "NarrativeQA", 64.54),
            eval_report("CRAFT", g, "PubMedQA", 79.67),
            eval_report("CRAFT", g, "WebGLM-QA", 36.59),
            eval_report("Llama3.1-8B", r, "HotPotQA", 19.60),
            eval_report("Llama3.1-8B", r, "NewsQA", 20.80),
            eval_report("Llama3.1-8B", r, "NarrativeQA", 35.60),
            eval_report("Llama3.1-8B", r, "PubMedQA", 73.00),
            eval_report("Llama3.1-8B", r, "WebGLM-QA", 22.00),
            eval_report("CRAFT", r, "HotPotQA", 44.70),
            eval_report("CRAFT", r, "NewsQA", 30.10),
            eval_report("CRAFT", r, "NarrativeQA", 47.20),
            eval_report("CRAFT", r, "PubMedQA", 75.00),
            eval_report("CRAFT", r, "WebGLM-QA", 39.00),
        ];
        let rendered = render_report(&reports).unwrap();
        let text = &rendered.text;
        assert!(
            text.contains("| Model | HotPotQA | NarrativeQA | NewsQA | PubMedQA | WebGLM-QA |"),
            "columns must sort alphabetically:\n{text}"
        );
        assert!(text.contains(
            "| Llama3.1-8B + Golden | 41.95 | 59.25 | 46.93 | 77.00 | 18.34 |"
        ));
        assert!(text.contains(
            "| CRAFT + Golden | **48.21** | **64.54** | **47.14** | **79.67** | **36.59** |"
        ));
        assert!(text.contains(
            "| Llama3.1-8B + RAG | 19.60 | 35.60 | 20.80 | 73.00 | 22.00 |"
        ));
        assert!(text.contains(
            "| CRAFT + RAG | **44.70** | **47.20** | **30.10** | **75.00** | **39.00** |"
        ));
        let golden_pos = text.find("+ Golden").unwrap();
        let rag_pos = text.find("+ RAG").unwrap();
        assert!(golden_pos < rag_pos, "golden rows come first");
        assert_eq!(rendered.json["kind"], "f1_table");
        assert_eq!(
            rendered.json["rows"][1]["cells"]["HotPotQA"]["macro_f1"],
            48.21
        );
    }

    #[test]
    fn two_label_footer_reports_absolute_and_relative_means() {
        let reports = vec![
            eval_report("Llama3.1-8B", EvalMode::Golden, "HotPotQA", 41.95),
            eval_report("Llama3.1-8B", EvalMode::Golden, "NewsQA", 46.93),
            eval_report("Llama3.1-8B", EvalMode::Golden, "NarrativeQA", 59.25),
            eval_report("Llama3.1-8B", EvalMode::Golden, "PubMedQA", 77.00),
            eval_report("Llama3.1-8B", EvalMode::Golden, "WebGLM-QA", 18.34),
            eval_report("CRAFT", EvalMode::Golden, "HotPotQA", 48.21),
            eval_report("CRAFT", EvalMode::Golden, "NewsQA", 47.14),
            eval_report("CRAFT", EvalMode::Golden, "NarrativeQA", 64.54),
            eval_report("CRAFT", EvalMode::Golden, "PubMedQA", 79.67),
            eval_report("CRAFT", EvalMode::Golden, "WebGLM-QA", 36.59),
            eval_report("Llama3.1-8B", EvalMode::Rag, "HotPotQA", 19.60),
            eval_report("Llama3.1-8B", EvalMode::Rag, "NewsQA", 20.80),
            eval_report("Llama3.1-8B", EvalMode::Rag, "NarrativeQA", 35.60),
            eval_report("Llama3.1-8B", EvalMode::Rag, "PubMedQA", 73.00),
            eval_report("Llama3.1-8B", EvalMode::Rag, "WebGLM-QA", 22.00),
            eval_report("CRAFT", EvalMode::Rag, "HotPotQA", 44.70),
            eval_report("CRAFT", EvalMode::Rag, "NewsQA", 30.10),
            eval_report("CRAFT", EvalMode::Rag, "NarrativeQA", 47.20),
            eval_report("CRAFT", EvalMode::Rag, "PubMedQA", 75.00),
            eval_report("CRAFT", EvalMode::Rag, "WebGLM-QA", 39.00),
        ];
        let rendered = render_report(&reports).unwrap();
        assert!(
            rendered.text.contains(
                "Average delta (CRAFT vs Llama3.1-8B): +9.77 F1 absolute over 10 paired cells, +41.26% relative."
            ),
            "footer missing or wrong:\n{}",
            rendered.text
        );
        assert_eq!(rendered.json["delta"]["paired_cells"], 10);
        let abs = rendered.json["delta"]["absolute_mean"].as_f64().unwrap();
        assert!((abs - 9.768).abs() < 1e-9);
    }

    #[test]
    fn single_report_renders_without_bold_or_footer() {
        let rendered =
            render_report(&[eval_report("solo", EvalMode::Golden, "HotPotQA", 50.0)]).unwrap();
        assert!(rendered.text.contains("| solo + Golden | 50.00 |"));
        assert!(!rendered.text.contains("**"));
        assert!(!rendered.text.contains("Average delta"));
    }

    #[test]
    fn invalid_reports_are_marked_and_never_bold() {
        let mut weak = eval_report("weak", EvalMode::Golden, "D", 90.0);
        if let AnyReport::Eval(e) = &mut weak {
            e.invalid = true;
        }
        let reports = vec![
            weak,
            eval_report("strong", EvalMode::Golden, "D", 60.0),
            eval_report("mid", EvalMode::Golden, "D", 55.0),
        ];
        let rendered = render_report(&reports).unwrap();
        assert!(rendered.text.contains("| weak + Golden | 90.00 (invalid) |"));
        assert!(rendered.text.contains("| strong + Golden | **60.00** |"));
    }

    #[test]
    fn missing_cells_render_as_dashes() {
        let reports = vec![
            eval_report("a", EvalMode::Golden, "D1", 10.0),
            eval_report("a", EvalMode::Golden, "D2", 20.0),
            eval_report("b", EvalMode::Golden, "D1", 30.0),
        ];
        let rendered = render_report(&reports).unwrap();
        assert!(rendered.text.contains("| b + Golden | **30.00** | - |"));
        // D2 has a single valid entry, so no bold there.
        assert!(rendered.text.contains("| a + Golden | 10.00 | 20.00 |"));
    }

    #[test]
    fn duplicate_cells_and_mixed_kinds_are_rejected() {
        let dup = vec![
            eval_report("a", EvalMode::Golden, "D", 1.0),
            eval_report("a", EvalMode::Golden, "D", 2.0),
        ];
        assert!(matches!(
            render_report(&dup).unwrap_err(),
            EvalError::DuplicateCell { .. }
        ));
        let mixed = vec![
            eval_report("a", EvalMode::Golden, "D", 1.0),
            AnyReport::Resource(ResourceColumn {
                label: "a".into(),
                dataset: "D".into(),
                trainable_params_m: 1.0,
                training_time_min: 1.0,
                gpu_memory_gb: None,
                perplexity: None,
            }),
        ];
        assert!(matches!(
            render_report(&mixed).unwrap_err(),
            EvalError::MixedReportKinds
        ));
        assert!(matches!(render_report(&[]).unwrap_err(), EvalError::NoReports));
    }

    fn resource(
        label: &str,
        dataset: &str,
        params_m: f64,
        time_min: f64,
        mem_gb: f64,
        ppl: f64,
    ) -> AnyReport {
        AnyReport::Resource(ResourceColumn {
            label: label.into(),
            dataset: dataset.into(),
            trainable_params_m: params_m,
            training_time_min: time_min,
            gpu_memory_gb: Some(mem_gb),
            perplexity: Some(ppl),
        })
    }

    /// Published resource comparison: full fine-tuning vs adapters on
    /// three datasets; every metric reads lower-is-better.
    #[test]
    fn resource_grid_renders_reference_values() {
        let reports = vec![
            resource("RAFT", "HotPotQA", 8100.0, 180.0, 40.5, 1.20),
            resource("CRAFT", "HotPotQA", 168.0, 9.0, 21.0, 1.24),
            resource("RAFT", "NewsQA", 8100.0, 240.0, 40.5, 1.075),
            resource("CRAFT", "NewsQA", 168.0, 41.0, 32.0, 1.12),
            resource("RAFT", "NarrativeQA", 8100.0, 100.0, 40.5, 1.65),
            resource("CRAFT", "NarrativeQA", 168.0, 19.0, 26.0, 1.57),
        ];
        let rendered = render_report(&reports).unwrap();
        let text = &rendered.text;
        assert!(text.contains(
            "| Metric | HotPotQA (RAFT) | HotPotQA (CRAFT) | NarrativeQA (RAFT) | NarrativeQA (CRAFT) | NewsQA (RAFT) | NewsQA (CRAFT) |"
        ));
        assert!(text.contains(
            "| Trainable Params (M) | 8100 | **168** | 8100 | **168** | 8100 | **168** |"
        ));
        assert!(text.contains(
            "| Training time (min) | 180 | **9** | 100 | **19** | 240 | **41** |"
        ));
        assert!(text.contains(
            "| GPU Memory (GB) | 40.5 | **21.0** | 40.5 | **26.0** | 40.5 | **32.0** |"
        ));
        assert!(text.contains(
            "| Perplexity | **1.20** | 1.24 | 1.65 | **1.57** | **1.075** | 1.12 |"
        ));
        assert_eq!(rendered.json["kind"], "resource_table");
        assert_eq!(rendered.json["columns"][0]["label"], "RAFT");
        assert_eq!(rendered.json["columns"][0]["trainable_params_m"], 8100.0);
    }

    #[test]
    fn resource_columns_from_training_reports_convert_units() {
        let report = TrainingReport {
            label: "tiny".into(),
            dataset: "demo".into(),
            mode: crate::adapters::TrainMode::Lora,
            trainable_params: 1_656,
            total_params: 100_000,
            wall_time_s: 4.2,
            peak_memory_bytes: Some(2_500_000),
            memory_method: "tracked".into(),
            initial_train_loss: 5.0,
            final_train_loss: 3.0,
            perplexity: Some(20.085),
        };
        let column = ResourceColumn::from(&report);
        assert!((column.trainable_params_m - 0.001656).abs() < 1e-12);
        assert!((column.training_time_min - 0.07).abs() < 1e-12);
        assert!((column.gpu_memory_gb.unwrap() - 0.0025).abs() < 1e-12);
        let rendered = render_report(&[AnyReport::Resource(column)]).unwrap();
        assert!(rendered.text.contains("| Trainable Params (M) | 0.001656 |"));
        assert!(rendered.text.contains("| Training time (min) | 0.07 |"));
        assert!(rendered.text.contains("| GPU Memory (GB) | 0.0 |"));
        assert!(rendered.text.contains("| Perplexity | 20.085 |"));
        assert!(!rendered.text.contains("**"), "single column has no comparison");
    }

    #[test]
    fn absent_resource_metrics_render_as_dashes() {
        let reports = vec![
            AnyReport::Resource(ResourceColumn {
                label: "a".into(),
                dataset: "D".into(),
                trainable_params_m: 10.0,
                training_time_min: 5.0,
                gpu_memory_gb: None,
                perplexity: Some(1.5),
            }),
            AnyReport::Resource(ResourceColumn {
                label: "b".into(),
                dataset: "D".into(),
                trainable_params_m: 20.0,
                training_time_min: 2.0,
                gpu_memory_gb: Some(1.0),
                perplexity: None,
            }),
        ];
        let rendered = render_report(&reports).unwrap();
        assert!(rendered.text.contains("| GPU Memory (GB) | - | 1.0 |"));
        assert!(rendered.text.contains("| Perplexity | 1.50 | - |"));
        // Params compare across the pair; 10 < 20 wins.
        assert!(rendered.text.contains("| Trainable Params (M) | **10** | 20 |"));
    }

    #[test]
    fn number_formats_match_display_conventions() {
        assert_eq!(trim_decimal(8100.0, 6), "8100");
        assert_eq!(trim_decimal(0.001656, 6), "0.001656");
        assert_eq!(trim_decimal(9.0, 6), "9");
        assert_eq!(format_perplexity(1.2), "1.20");
        assert_eq!(format_perplexity(1.075), "1.075");
        assert_eq!(format_perplexity(1.24), "1.24");
        assert_eq!(format_perplexity(1.0), "1.00");
    }
}
