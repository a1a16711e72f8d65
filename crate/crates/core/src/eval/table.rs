use std::collections::BTreeMap;

use super::{group_label, Metric, MetricsReport};

fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = vec![line(header)];
    out.push(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.extend(rows.iter().map(|r| line(r)));
    out.join("\n") + "\n"
}

fn metric_cell(metric: Metric, value: Option<f64>) -> String {
    match (metric, value) {
        (_, None) => "-".into(),
        (Metric::Aes, Some(v)) => format!("{v:.2}"),
        (_, Some(v)) => format!("{v:.4}"),
    }
}

/// Group rows with columns AES / CLIP-T / DS / D&C-DS.
pub fn render_metrics_table(report: &MetricsReport) -> String {
    let mut header = vec!["Group".to_string(), "Scenes".to_string()];
    header.extend(Metric::ALL.iter().map(|m| m.label().to_string()));
    let rows: Vec<Vec<String>> = report
        .groups
        .iter()
        .map(|g| {
            let mut row = vec![g.group.clone(), g.scenes.to_string()];
            row.extend(Metric::ALL.iter().map(|m| metric_cell(*m, g.means.get(m).copied())));
            row
        })
        .collect();
    render(&header, &rows)
}

/// One row per model, one percentage column per subject count 0..=3.
pub fn render_accuracy_table(rows: &[(String, BTreeMap<usize, f64>)]) -> String {
    let mut header = vec!["Model".to_string()];
    header.extend((0..=3).map(group_label));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(model, pct)| {
            let mut row = vec![model.clone()];
            row.extend((0..=3).map(|k| pct.get(&k).map_or("-".into(), |v| format!("{v:.2}"))));
            row
        })
        .collect();
    render(&header, &body)
}
