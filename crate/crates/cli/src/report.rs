use std::fmt::Write as _;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use tokadapt::morpho::{efficiency_projection, project_reports, EfficiencyProjection, TokenizerReport};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    #[default]
    Text,
    Csv,
}

/// Where a row's token ratio came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioSource {
    /// Token totals over the same running-text sample.
    Sample,
    /// Mean tokens per word over the evaluation records.
    TokensPerWord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub tokenizer: String,
    pub vocab_size: usize,
    pub root_integrity: f64,
    pub mean_tokens_per_word: f64,
    pub median_tokens_per_word: f64,
    /// Relative to the first report; absent when only one report is given.
    pub projection: Option<(EfficiencyProjection, RatioSource)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

/// Builds the comparison table; projections are relative to `reports[0]`.
pub fn build_table(reports: &[TokenizerReport]) -> ReportTable {
    let mut warnings = Vec::new();
    if let Some(first) = reports.first() {
        if reports.iter().any(|r| r.dataset_hash != first.dataset_hash) {
            warnings.push("reports were computed on different evaluation datasets; comparison may be misleading".into());
        }
    }
    let baseline = reports.first();
    let rows = reports
        .iter()
        .map(|r| {
            let projection = baseline.filter(|_| reports.len() >= 2).and_then(|b| projection(b, r));
            if reports.len() >= 2 && projection.is_none() {
                warnings.push(format!("no token totals to project {} against {}", r.tokenizer_name, reports[0].tokenizer_name));
            }
            ReportRow {
                tokenizer: r.tokenizer_name.clone(),
                vocab_size: r.vocab_size,
                root_integrity: r.mean_root_integrity,
                mean_tokens_per_word: r.tokens_per_word.mean,
                median_tokens_per_word: r.tokens_per_word.median,
                projection,
            }
        })
        .collect();
    ReportTable { rows, warnings }
}

fn projection(old: &TokenizerReport, new: &TokenizerReport) -> Option<(EfficiencyProjection, RatioSource)> {
    if let Ok(p) = project_reports(old, new) {
        return Some((p, RatioSource::Sample));
    }
    // Fixed-point totals keep the ratio exact to 1e-6 tokens per word.
    let scale = 1e6;
    let (a, b) = (old.tokens_per_word.mean * scale, new.tokens_per_word.mean * scale);
    if a < 1.0 || b < 1.0 {
        return None;
    }
    let mut p = efficiency_projection(a.round() as u64, b.round() as u64).ok()?;
    p.label = "projection from mean tokens per word (not a measurement)".into();
    Some((p, RatioSource::TokensPerWord))
}

pub fn render(table: &ReportTable, format: TableFormat) -> String {
    let with_projection = table.rows.iter().any(|r| r.projection.is_some());
    let mut header = vec!["tokenizer", "vocab_size", "root_integrity", "mean_tokens_per_word", "median_tokens_per_word"];
    if with_projection {
        header.extend(["token_ratio", "projected_speedup_percent", "ratio_source"]);
    }
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut cells = vec![
                r.tokenizer.clone(),
                r.vocab_size.to_string(),
                format!("{:.4}", r.root_integrity),
                format!("{:.3}", r.mean_tokens_per_word),
                format!("{:.1}", r.median_tokens_per_word),
            ];
            if with_projection {
                match &r.projection {
                    Some((p, src)) => cells.extend([
                        format!("{:.4}", p.token_ratio),
                        format!("{:.1}", p.projected_speedup_percent),
                        match src {
                            RatioSource::Sample => "sample".into(),
                            RatioSource::TokensPerWord => "tokens_per_word".into(),
                        },
                    ]),
                    None => cells.extend(["n/a".into(), "n/a".into(), "n/a".into()]),
                }
            }
            cells
        })
        .collect();

    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            for w in &table.warnings {
                let _ = writeln!(out, "# WARNING: {w}");
            }
            let _ = writeln!(out, "{}", header.join(","));
            for r in rows {
                let escaped: Vec<String> = r.iter().map(|c| csv_cell(c)).collect();
                let _ = writeln!(out, "{}", escaped.join(","));
            }
        }
        TableFormat::Text => {
            for w in &table.warnings {
                let _ = writeln!(out, "WARNING: {w}");
            }
            if !table.warnings.is_empty() {
                out.push('\n');
            }
            let widths: Vec<usize> = (0..header.len())
                .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0))
                .collect();
            let line = |cells: &[String]| -> String {
                let padded: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, &w))| {
                        let pad = w - c.chars().count();
                        if i == 0 {
                            format!("{c}{}", " ".repeat(pad))
                        } else {
                            format!("{}{c}", " ".repeat(pad))
                        }
                    })
                    .collect();
                padded.join("  ").trim_end().to_string()
            };
            let head: Vec<String> = header.iter().map(|s| s.to_string()).collect();
            let _ = writeln!(out, "{}", line(&head));
            let _ = writeln!(out, "{}", widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
            for r in &rows {
                let _ = writeln!(out, "{}", line(r));
            }
        }
    }
    out
}

fn csv_cell(c: &str) -> String {
    if c.contains([',', '"', '\n']) {
        format!("\"{}\"", c.replace('"', "\"\""))
    } else {
        c.to_string()
    }
}
