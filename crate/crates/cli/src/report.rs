//! Markdown summary of whatever stages have produced artifacts.

use std::fmt::Write as _;
use std::path::Path;

use dfcvae::train::SWEEP_REPORT_FILE;

use crate::commands::{
    ANALYSIS_DIR, CLASSIFY_DIR, FIGURES_DIR, METRICS_FILE, REVIEW_FILE, SELECTED_FILE, SEPARATION_FILE,
};
use crate::error::Result;

pub const REPORT_FILE: &str = "report.md";

/// Written report plus the sections that could not be filled.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutcome {
    pub text: String,
    pub missing: Vec<&'static str>,
}

fn read_table(path: &Path) -> Option<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).ok()?;
    let header = r.headers().ok()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.ok().map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Option<Vec<Vec<String>>>>()?;
    Some((header, rows))
}

fn cell(s: &str) -> String {
    if s.contains(['.', 'e', 'E']) {
        if let Ok(v) = s.parse::<f64>() {
            return format!("{v:.4}");
        }
    }
    s.to_string()
}

fn markdown_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for row in rows {
        let cells: Vec<String> = row.iter().map(|c| cell(c)).collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    out.push('\n');
}

fn figure(out: &mut String, run_dir: &Path, rel: &str, caption: &str) {
    if run_dir.join(rel).is_file() {
        let _ = writeln!(out, "![{caption}]({rel})\n");
    } else {
        let _ = writeln!(out, "_Figure missing: `{rel}`_\n");
    }
}

fn absent(out: &mut String, what: &str) {
    let _ = writeln!(out, "> **Section absent:** {what}\n");
}

/// Column values of `name` in a table, parsed as latent sizes.
fn sizes(table: &(Vec<String>, Vec<Vec<String>>), name: &str) -> Vec<usize> {
    let Some(col) = table.0.iter().position(|h| h == name) else {
        return Vec::new();
    };
    let mut v: Vec<usize> = table.1.iter().filter_map(|r| r.get(col)?.parse().ok()).collect();
    v.dedup();
    v
}

/// Builds `report.md` from the artifacts present in `run_dir`. Sections
/// whose inputs are missing are flagged in place and listed at the top.
/// The output depends only on the artifacts, so regeneration is idempotent.
pub fn write_report(run_dir: &Path, name: &str) -> Result<ReportOutcome> {
    let mut missing = Vec::new();
    let mut body = String::new();

    let sweep = read_table(&run_dir.join(SWEEP_REPORT_FILE));
    body.push_str("## Training\n\n");
    match &sweep {
        Some((h, rows)) => {
            let keep = ["latent_size", "status", "best_epoch", "val_total", "val_feat", "val_kl"];
            let idx: Vec<usize> = keep.iter().filter_map(|k| h.iter().position(|x| x == k)).collect();
            let header: Vec<String> = idx.iter().map(|&i| h[i].clone()).collect();
            let rows: Vec<Vec<String>> = rows.iter().map(|r| idx.iter().map(|&i| r[i].clone()).collect()).collect();
            markdown_table(&mut body, &header, &rows);
            figure(&mut body, run_dir, &format!("{FIGURES_DIR}/loss_curves.png"), "loss curves");
            figure(&mut body, run_dir, &format!("{FIGURES_DIR}/loss_vs_nl.png"), "best validation loss vs nl");
        }
        None => {
            missing.push("training");
            absent(&mut body, &format!("no `{SWEEP_REPORT_FILE}`; run `train` or `sweep`."));
        }
    }

    body.push_str("## Reconstruction similarity\n\n");
    match &sweep {
        Some((h, rows)) => {
            let (nl, ssim) = (h.iter().position(|x| x == "latent_size"), h.iter().position(|x| x == "mean_ssim"));
            if let (Some(nl), Some(ssim)) = (nl, ssim) {
                let rows: Vec<Vec<String>> = rows.iter().map(|r| vec![r[nl].clone(), r[ssim].clone()]).collect();
                markdown_table(&mut body, &["latent_size".into(), "mean_ssim".into()], &rows);
            }
            figure(&mut body, run_dir, &format!("{FIGURES_DIR}/ssim_vs_nl.png"), "mean SSIM vs nl");
            for nl in sizes(sweep.as_ref().expect("matched"), "latent_size") {
                figure(&mut body, run_dir, &format!("nl{nl}/{REVIEW_FILE}"), &format!("review nl={nl}"));
            }
        }
        None => {
            missing.push("reconstruction");
            absent(&mut body, "needs the sweep report.");
        }
    }

    body.push_str("## Cluster separation\n\n");
    match read_table(&run_dir.join(ANALYSIS_DIR).join(SEPARATION_FILE)) {
        Some(t) => {
            markdown_table(&mut body, &t.0, &t.1);
            for row in &t.1 {
                let (nl, k) = (&row[0], &row[1]);
                figure(
                    &mut body,
                    run_dir,
                    &format!("{ANALYSIS_DIR}/nl{nl}/scatter_k{k}.png"),
                    &format!("UMAP nl={nl} k={k}"),
                );
            }
        }
        None => {
            missing.push("clusters");
            absent(&mut body, &format!("no `{ANALYSIS_DIR}/{SEPARATION_FILE}`; run `analyze`."));
        }
    }

    body.push_str("## Classification\n\n");
    match read_table(&run_dir.join(CLASSIFY_DIR).join(METRICS_FILE)) {
        Some(t) => {
            markdown_table(&mut body, &t.0, &t.1);
            if let Some(sel) = read_table(&run_dir.join(CLASSIFY_DIR).join(SELECTED_FILE)) {
                body.push_str("Selected by cross-validation:\n\n");
                markdown_table(&mut body, &sel.0, &sel.1);
            }
            figure(&mut body, run_dir, &format!("{CLASSIFY_DIR}/roc_overlay.png"), "ROC curves");
            figure(&mut body, run_dir, &format!("{CLASSIFY_DIR}/metric_trends.png"), "metric trends");
        }
        None => {
            missing.push("classification");
            absent(&mut body, &format!("no `{CLASSIFY_DIR}/{METRICS_FILE}`; run `classify`."));
        }
    }

    let mut text = format!("# Run report: {name}\n\n");
    if missing.is_empty() {
        text.push_str("All stages present.\n\n");
    } else {
        let _ = writeln!(text, "Missing sections: {}.\n", missing.join(", "));
    }
    text.push_str(&body);
    std::fs::write(run_dir.join(REPORT_FILE), &text)?;
    Ok(ReportOutcome { text, missing })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_run_flags_every_section() {
        let dir = tempfile::tempdir().unwrap();
        let out = write_report(dir.path(), "x").unwrap();
        assert_eq!(out.missing, vec!["training", "reconstruction", "clusters", "classification"]);
        assert!(out.text.contains("Section absent"));
        assert_eq!(std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap(), out.text);
    }

    #[test]
    fn only_classification_missing_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        std::fs::write(
            p.join(SWEEP_REPORT_FILE),
            "latent_size,status,best_epoch,val_total,val_feat,val_kl,mean_ssim,checkpoint,error\n\
             4,ok,2,0.123456,0.1,1.5,0.51,nl4/checkpoint.bin,\n",
        )
        .unwrap();
        std::fs::create_dir_all(p.join(ANALYSIS_DIR)).unwrap();
        std::fs::write(p.join(ANALYSIS_DIR).join(SEPARATION_FILE), "nl,k,silhouette\n4,4,0.25\n").unwrap();
        let a = write_report(p, "x").unwrap();
        assert_eq!(a.missing, vec!["classification"]);
        assert!(a.text.contains("| 4 | ok | 2 | 0.1235 |"), "{}", a.text);
        assert!(a.text.contains("| 4 | 0.5100 |"));
        let b = write_report(p, "x").unwrap();
        assert_eq!(a, b);
    }
}
