//! Report writers: evaluation JSON, per-event ROC tables and plots, and the
//! grid sweep in JSON/CSV/HTML form.
//!
//! Output is a pure function of the documents passed in — no timestamps,
//! no environment probes — so reruns over identical inputs produce
//! byte-identical files.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::RocCurve;
use crate::pipeline::{EvalDoc, EvalRun, GridDoc};

/// Pretty-printed JSON with a trailing newline, creating parent directories.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Maps a free-form name onto a filesystem-safe token.
fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes one CSV per (run, event) ROC curve under `out_dir/roc` and one SVG
/// per run under `out_dir/plots`.
pub fn write_roc_artifacts(out_dir: &Path, doc: &EvalDoc) -> Result<()> {
    let roc_dir = out_dir.join("roc");
    let plot_dir = out_dir.join("plots");
    fs::create_dir_all(&roc_dir)?;
    fs::create_dir_all(&plot_dir)?;
    for run in &doc.runs {
        let stem = format!("{}__{}", run.feature_slug, run.classifier);
        for outcome in &run.report.outcomes {
            if let Some(curve) = &outcome.curve {
                let path = roc_dir.join(format!("{stem}__{}.csv", sanitize(&outcome.event)));
                write_roc_csv(&path, curve)?;
            }
        }
        fs::write(plot_dir.join(format!("{stem}.svg")), roc_svg(run))?;
    }
    Ok(())
}

/// One ROC curve as `fpr,tpr,threshold` rows; the curve's starting vertex has
/// no threshold (nothing is flagged positive) and gets an empty field.
pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    writer
        .write_record(["fpr", "tpr", "threshold"])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for point in &curve.points {
        let threshold = point.threshold.map(|t| t.to_string()).unwrap_or_default();
        writer
            .write_record([point.fpr.to_string(), point.tpr.to_string(), threshold])
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    writer.flush()?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f6fb2", "#d9541e", "#2a8f5c", "#8e44ad", "#c2233c", "#2c3e50", "#b7950b", "#13838f",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Self-contained SVG with every event's ROC curve for one run.
fn roc_svg(run: &EvalRun) -> String {
    const X0: f64 = 64.0;
    const Y0: f64 = 40.0;
    const W: f64 = 320.0;
    const H: f64 = 320.0;
    let width = 600.0;
    let height = Y0 + H + 52.0;

    let x = |fpr: f64| X0 + fpr * W;
    let y = |tpr: f64| Y0 + (1.0 - tpr) * H;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    s.push_str(&format!(
        "  <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{X0}\" y=\"24\" font-size=\"13\" fill=\"#222\">{}</text>\n",
        xml_escape(&format!("{} / {}", run.feature, run.classifier))
    ));

    // Gridlines and tick labels every 0.25.
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        s.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{Y0}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            x(f),
            x(f),
            Y0 + H
        ));
        s.push_str(&format!(
            "  <line x1=\"{X0}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            y(f),
            X0 + W,
            y(f)
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"#555\" \
             text-anchor=\"middle\">{f:.2}</text>\n",
            x(f),
            Y0 + H + 16.0
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"#555\" \
             text-anchor=\"end\">{f:.2}</text>\n",
            X0 - 6.0,
            y(f) + 3.0
        ));
    }
    // Chance diagonal.
    s.push_str(&format!(
        "  <line x1=\"{X0}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{Y0}\" stroke=\"#aaa\" \
         stroke-dasharray=\"4 4\"/>\n",
        Y0 + H,
        X0 + W
    ));
    // Frame.
    s.push_str(&format!(
        "  <rect x=\"{X0}\" y=\"{Y0}\" width=\"{W}\" height=\"{H}\" fill=\"none\" \
         stroke=\"#333\"/>\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#333\" \
         text-anchor=\"middle\">false positive rate</text>\n",
        X0 + W / 2.0,
        Y0 + H + 36.0
    ));
    s.push_str(&format!(
        "  <text x=\"16\" y=\"{:.1}\" font-size=\"11\" fill=\"#333\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.1})\">true positive rate</text>\n",
        Y0 + H / 2.0,
        Y0 + H / 2.0
    ));

    let mut legend_y = Y0 + 10.0;
    for (i, outcome) in run.report.outcomes.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(curve) = &outcome.curve {
            let points: Vec<String> = curve
                .points
                .iter()
                .map(|p| format!("{:.2},{:.2}", x(p.fpr), y(p.tpr)))
                .collect();
            s.push_str(&format!(
                "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
                 stroke-width=\"1.6\"/>\n",
                points.join(" ")
            ));
        }
        let label = match outcome.auc {
            Some(auc) => format!("{} (AUC {auc:.4})", outcome.event),
            None => format!("{} (undefined)", outcome.event),
        };
        let lx = X0 + W + 16.0;
        s.push_str(&format!(
            "  <line x1=\"{lx}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" \
             stroke-width=\"3\"/>\n",
            legend_y - 3.0,
            lx + 18.0,
            legend_y - 3.0
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{legend_y}\" font-size=\"11\" fill=\"#222\">{}</text>\n",
            lx + 24.0,
            xml_escape(&label)
        ));
        legend_y += 16.0;
    }
    s.push_str("</svg>\n");
    s
}

/// Grid as a feature × classifier matrix. AUC cells use six decimals; failed
/// cells carry their full diagnostic text (the csv writer quotes as needed).
pub fn write_grid_csv(path: &Path, doc: &GridDoc) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let mut header = vec!["feature".to_string(), "backbone".to_string()];
    header.extend(doc.classifier_labels.iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;

    let cols = doc.classifier_labels.len().max(1);
    for row in doc.cells.chunks(cols) {
        let mut record = vec![row[0].feature.clone(), row[0].backbone.clone()];
        for cell in row {
            record.push(match (cell.auc, &cell.diagnostic) {
                (Some(auc), _) => format!("{auc:.6}"),
                (None, Some(diag)) => format!("diagnostic: {diag}"),
                (None, None) => "diagnostic: undefined".to_string(),
            });
        }
        writer
            .write_record(&record)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    writer.flush()?;
    Ok(())
}

fn html_escape(s: &str) -> String {
    xml_escape(s).replace('\'', "&#39;")
}

/// Background shade for an AUC cell: white at or below 0.5, saturating to
/// green at 1.0.
fn auc_shade(auc: f64) -> String {
    let t = ((auc - 0.5) * 2.0).clamp(0.0, 1.0);
    let blend = |from: f64, to: f64| (from + t * (to - from)).round() as u8;
    format!("rgb({},{},{})", blend(255.0, 76.0), blend(255.0, 175.0), blend(255.0, 110.0))
}

/// Grid as a standalone shaded HTML table.
pub fn write_grid_html(path: &Path, doc: &GridDoc) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut s = String::new();
    s.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    s.push_str("<title>Feature × classifier grid</title>\n<style>\n");
    s.push_str(
        "body{font-family:sans-serif;margin:2rem;color:#1a1a1a}\n\
         table{border-collapse:collapse}\n\
         th,td{border:1px solid #bbb;padding:0.35rem 0.6rem;font-size:0.9rem}\n\
         th{background:#f0f0f0;text-align:left}\n\
         td.auc{text-align:right;font-variant-numeric:tabular-nums}\n\
         td.diag{background:#eee;color:#555;font-size:0.8rem;max-width:22rem}\n\
         p.meta{color:#555;font-size:0.85rem}\n",
    );
    s.push_str("</style>\n</head>\n<body>\n<h1>Feature × classifier grid</h1>\n");
    s.push_str(&format!(
        "<p class=\"meta\">averaging: {} · seed: {} · repeats: {} · manifest digest: {}</p>\n",
        doc.averaging, doc.seed, doc.repeats, doc.manifest_digest
    ));
    s.push_str("<table>\n<thead>\n<tr><th>feature</th><th>backbone</th>");
    for label in &doc.classifier_labels {
        s.push_str(&format!("<th>{}</th>", html_escape(label)));
    }
    s.push_str("</tr>\n</thead>\n<tbody>\n");

    let cols = doc.classifier_labels.len().max(1);
    for row in doc.cells.chunks(cols) {
        s.push_str(&format!(
            "<tr><td>{}</td><td>{}</td>",
            html_escape(&row[0].feature),
            html_escape(&row[0].backbone)
        ));
        for cell in row {
            match (cell.auc, &cell.diagnostic) {
                (Some(auc), _) => {
                    let spread = match cell.spread {
                        Some(sp) if doc.repeats > 1 => format!(" ±{:.4}", sp / 2.0),
                        _ => String::new(),
                    };
                    s.push_str(&format!(
                        "<td class=\"auc\" style=\"background:{}\">{auc:.4}{spread}</td>",
                        auc_shade(auc)
                    ));
                }
                (None, diag) => {
                    let text = diag.as_deref().unwrap_or("undefined");
                    s.push_str(&format!("<td class=\"diag\">{}</td>", html_escape(text)));
                }
            }
        }
        s.push_str("</tr>\n");
    }
    s.push_str("</tbody>\n</table>\n");
    s.push_str("<p class=\"meta\">backbone digests: ");
    let digests: Vec<String> = doc
        .backbone_digests
        .iter()
        .map(|(name, digest)| format!("{} = {}", html_escape(name), &digest[..16.min(digest.len())]))
        .collect();
    s.push_str(&html_escape(&digests.join(" · ")));
    s.push_str("</p>\n</body>\n</html>\n");
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::RocPoint;

    fn demo_curve() -> RocCurve {
        RocCurve {
            event: "aurora".into(),
            points: vec![
                RocPoint { fpr: 0.0, tpr: 0.0, threshold: None },
                RocPoint { fpr: 0.0, tpr: 1.0, threshold: Some(0.9) },
                RocPoint { fpr: 1.0, tpr: 1.0, threshold: Some(0.1) },
            ],
        }
    }

    #[test]
    fn roc_csv_has_header_and_empty_start_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_roc_csv(&path, &demo_curve()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "fpr,tpr,threshold");
        assert_eq!(lines[1], "0,0,");
        assert_eq!(lines[2], "0,1,0.9");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn shade_is_white_at_chance_and_green_at_one() {
        assert_eq!(auc_shade(0.3), "rgb(255,255,255)");
        assert_eq!(auc_shade(0.5), "rgb(255,255,255)");
        assert_eq!(auc_shade(1.0), "rgb(76,175,110)");
    }

    #[test]
    fn sanitize_keeps_word_characters() {
        assert_eq!(sanitize("demo_a-1"), "demo_a-1");
        assert_eq!(sanitize("a b/c"), "a_b_c");
    }
}
