//! Aligned text tables and CSV for evaluation reports.

use protoadapt_core::EvalReport;

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn reports_table(reports: &[EvalReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut header = vec!["stage".to_string(), "seed".into(), "accuracy".into(), "mAP".into()];
    header.extend(first.class_names.iter().map(|c| format!("AP[{c}]")));
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![
            r.stage.clone(),
            r.episode.seed.to_string(),
            format!("{:.4}", r.accuracy),
            format!("{:.4}", r.map),
        ];
        row.extend(r.per_class_ap.iter().map(|v| fmt_ap(*v)));
        rows.push(row);
    }
    align(&rows)
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, cell)| if i == 0 { format!("{cell:<w$}", w = widths[i]) } else { format!("{cell:>w$}", w = widths[i]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per report: stage, episode, fingerprints, accuracy, mAP, per-class AP.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    let mut header: Vec<String> = ["stage", "n_way", "k_shot", "n_bg", "seed", "episode_fingerprint", "config_fingerprint", "accuracy", "map"]
        .map(String::from)
        .to_vec();
    header.extend(first.class_names.iter().map(|c| format!("ap_{c}")));
    out.push_str(&header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(","));
    out.push('\n');
    for r in reports {
        let mut row = vec![
            r.stage.clone(),
            r.episode.n_way.to_string(),
            r.episode.k_shot.to_string(),
            r.episode.n_bg.to_string(),
            r.episode.seed.to_string(),
            r.episode_fingerprint.clone(),
            r.config_fingerprint.clone(),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.map),
        ];
        row.extend(r.per_class_ap.iter().map(|v| v.map_or_else(String::new, |x| format!("{x:.6}"))));
        out.push_str(&row.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}
