//! `agefer report`: merge evaluations and heatmaps from one or more runs
//! into a single deterministic comparative HTML document.

use std::path::{Path, PathBuf};

use agefer::manifest::{AgeGroup, Expression};
use agefer::metrics::GroupMetricsReport;
use agefer::render::{bar_chart_svg, confusion_matrix_svg, html_document, html_escape, BarChart};
use base64::Engine;
use clap::Args;
use serde::Serialize;

use crate::common::{
    io_err, load_run_config, read_json, record_artifacts, write_json, Result, RunConfig,
    EVALUATION_JSON, PANEL_FILE,
};

#[derive(Args)]
pub struct ReportArgs {
    /// Repeatable run directory; order fixes the column/series order.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// Output HTML file; a JSON summary is written next to it.
    #[arg(long)]
    out: PathBuf,
}

struct RunInputs {
    label: String,
    dir: PathBuf,
    config: RunConfig,
    evaluation: GroupMetricsReport,
    panel_png: Option<Vec<u8>>,
}

/// One comparison-table row, also serialized as the JSON summary.
#[derive(Serialize)]
struct SummaryRow {
    run: String,
    variant: String,
    group: String,
    macro_f1: f64,
    macro_f1_std: Option<f64>,
    macro_f1_excl_surprise: f64,
    n_folds: usize,
}

pub fn run(args: ReportArgs) -> Result<()> {
    let mut runs = Vec::with_capacity(args.runs.len());
    for dir in &args.runs {
        let config = load_run_config(dir)?;
        let evaluation: GroupMetricsReport = read_json(&dir.join(EVALUATION_JSON))?;
        let panel_path = dir.join(PANEL_FILE);
        let panel_png = if panel_path.exists() {
            Some(std::fs::read(&panel_path).map_err(|e| io_err(&panel_path, e))?)
        } else {
            None
        };
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        runs.push(RunInputs {
            label,
            dir: dir.clone(),
            config,
            evaluation,
            panel_png,
        });
    }

    let summary = summary_rows(&runs);
    let html = build_html(&runs, &summary)?;
    std::fs::write(&args.out, &html).map_err(|e| io_err(&args.out, e))?;
    let json_path = args.out.with_extension("json");
    write_json(&json_path, &summary)?;
    if let Some(run_dir) = args.out.parent().filter(|p| args.runs.iter().any(|r| r == p)) {
        let rel = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned());
        let files: Vec<String> = [rel(&args.out), rel(&json_path)].into_iter().flatten().collect();
        record_artifacts(run_dir, &files)?;
    }
    println!("wrote {} and {}", args.out.display(), json_path.display());
    Ok(())
}

fn summary_rows(runs: &[RunInputs]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &group in &AgeGroup::ALL {
        for run in runs {
            if let Some(metrics) = run.evaluation.groups.get(&group) {
                rows.push(SummaryRow {
                    run: run.label.clone(),
                    variant: run.config.train.variant.name().to_string(),
                    group: group.name().to_string(),
                    macro_f1: metrics.macro_f1,
                    macro_f1_std: run
                        .evaluation
                        .std
                        .as_ref()
                        .and_then(|s| s.get(&group))
                        .map(|s| s.macro_f1),
                    macro_f1_excl_surprise: metrics.macro_f1_excl_surprise,
                    n_folds: run.evaluation.n_folds,
                });
            }
        }
    }
    rows
}

fn build_html(runs: &[RunInputs], summary: &[SummaryRow]) -> Result<String> {
    let mut sections = Vec::new();

    // Run configurations.
    let mut cfg = String::from(
        "<h2>Runs</h2>\n<table>\n<tr><th>run</th><th>variant</th><th>weighting</th>\
         <th>folds</th><th>widths</th><th>learning rate</th><th>max epochs</th><th>seed</th></tr>\n",
    );
    for run in runs {
        let t = &run.config.train;
        cfg.push_str(&format!(
            "<tr><td>{}</td><td>{}</td><td>{:?}</td><td>{}</td><td>{:?}</td><td>{}</td><td>{}</td><td>{}</td></tr>\n",
            html_escape(&run.label),
            t.variant.name(),
            t.strategy(),
            t.folds,
            t.widths,
            t.learning_rate,
            t.max_epochs,
            t.seed
        ));
    }
    cfg.push_str("</table>\n");
    sections.push(cfg);

    // Headline macro-F1 chart per age group.
    let group_labels: Vec<String> = AgeGroup::ALL.iter().map(|g| g.name().to_string()).collect();
    let series_labels: Vec<String> = runs.iter().map(|r| r.label.clone()).collect();
    let macro_values: Vec<Vec<f64>> = runs
        .iter()
        .map(|run| {
            AgeGroup::ALL
                .iter()
                .map(|g| run.evaluation.groups.get(g).map_or(0.0, |m| m.macro_f1))
                .collect()
        })
        .collect();
    let chart = bar_chart_svg(&BarChart {
        title: "Macro F1 by age group".into(),
        group_labels: group_labels.clone(),
        series_labels: series_labels.clone(),
        values: macro_values,
        y_max: 1.0,
    })?;
    sections.push(format!("<h2>Macro F1</h2>\n<figure>{chart}</figure>\n"));

    // Comparison table.
    let mut table = String::from(
        "<h2>Comparison</h2>\n<table>\n<tr><th>group</th><th>run</th><th>variant</th>\
         <th>macro F1</th><th>std</th><th>macro F1 excl. surprise</th><th>folds</th></tr>\n",
    );
    for row in summary {
        table.push_str(&format!(
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{:.4}</td><td>{}</td><td>{:.4}</td><td>{}</td></tr>\n",
            html_escape(&row.group),
            html_escape(&row.run),
            html_escape(&row.variant),
            row.macro_f1,
            row.macro_f1_std.map_or("-".to_string(), |s| format!("{s:.4}")),
            row.macro_f1_excl_surprise,
            row.n_folds
        ));
    }
    table.push_str("</table>\n");
    sections.push(table);

    // Per-expression F1 chart for each age group.
    let expression_labels: Vec<String> = Expression::ALL.iter().map(|e| e.name().to_string()).collect();
    let mut f1_section = String::from("<h2>Per-expression F1</h2>\n");
    for &group in &AgeGroup::ALL {
        if !runs.iter().any(|r| r.evaluation.groups.contains_key(&group)) {
            continue;
        }
        let values: Vec<Vec<f64>> = runs
            .iter()
            .map(|run| match run.evaluation.groups.get(&group) {
                Some(m) => m.per_class_f1.iter().map(|f| f.value).collect(),
                None => vec![0.0; Expression::COUNT],
            })
            .collect();
        let chart = bar_chart_svg(&BarChart {
            title: format!("F1 per expression: {}", group.name()),
            group_labels: expression_labels.clone(),
            series_labels: series_labels.clone(),
            values,
            y_max: 1.0,
        })?;
        f1_section.push_str(&format!("<figure>{chart}</figure>\n"));
    }
    sections.push(f1_section);

    // Row-normalized confusion matrices.
    let mut confusion = String::from("<h2>Row-normalized confusion</h2>\n");
    for run in runs {
        for (&group, metrics) in &run.evaluation.groups {
            let svg = confusion_matrix_svg(
                &format!("{} / {}", run.label, group.name()),
                &expression_labels,
                &metrics.normalized,
            )?;
            confusion.push_str(&format!("<figure>{svg}</figure>\n"));
        }
    }
    sections.push(confusion);

    // Saliency panels, embedded so the report is self-contained.
    let mut panels = String::from("<h2>Saliency heatmap panels</h2>\n");
    let mut any_panel = false;
    for run in runs {
        if let Some(png) = &run.panel_png {
            any_panel = true;
            let b64 = base64::engine::general_purpose::STANDARD.encode(png);
            panels.push_str(&format!(
                "<figure><figcaption>{} ({})</figcaption>\
                 <img alt=\"saliency panel\" src=\"data:image/png;base64,{b64}\"></figure>\n",
                html_escape(&run.label),
                html_escape(&run.dir.display().to_string()),
            ));
        }
    }
    if any_panel {
        panels.push_str(
            "<p>Rows: neutral, happiness, sadness, surprise, fear, anger, disgust. \
             Columns: children, adults, elderly. Grey tiles had no samples.</p>\n",
        );
        sections.push(panels);
    }

    Ok(html_document("Expression recognition audit", &sections))
}
