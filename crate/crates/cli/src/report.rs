use std::fmt::Write as _;

use anyhow::Context as _;
use fairrec_core::evaluation::MetricsReport;

use crate::{write_json, write_text, CliError, CliResult, Context, EXIT_NO_REPORTS};

/// Parses every `metrics-*.json` in `dir`, skipping unreadable files with a
/// warning. Sorted by dataset, then model name.
pub fn collect_reports(dir: &std::path::Path) -> CliResult<Vec<MetricsReport>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))
        .map_err(|error| CliError { code: EXIT_NO_REPORTS, error })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("metrics-") && name.ends_with(".json")
        })
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for path in paths {
        match std::fs::read_to_string(&path).map_err(anyhow::Error::from).and_then(|s| Ok(serde_json::from_str::<MetricsReport>(&s)?)) {
            Ok(r) => reports.push(r),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    reports.sort_by(|a, b| a.dataset.cmp(&b.dataset).then_with(|| a.model.cmp(&b.model)));
    Ok(reports)
}

pub fn cmd_report(ctx: &Context) -> CliResult<()> {
    let reports = collect_reports(&ctx.out)?;
    if reports.is_empty() {
        return Err(CliError {
            code: EXIT_NO_REPORTS,
            error: anyhow::anyhow!("no metric reports in {}", ctx.out.display()),
        });
    }
    write_json(&ctx.out_path("report.json"), &reports)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
    let mut tsv = String::from("dataset\tmodel\tn_eval\tmse\tmae\tf_stat\tf_p_value\tauc\tndcg\tk\tkl\n");
    for r in &reports {
        writeln!(
            tsv,
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.dataset,
            r.model,
            r.n_eval,
            r.mse,
            r.mae,
            opt(r.fairness_f.map(|f| f.f)),
            r.fairness_f.map_or_else(|| "NA".to_string(), |f| format!("{:.4e}", f.p_value)),
            opt(r.auc),
            opt(r.ndcg_at_k),
            r.k,
            opt(r.kl),
        )
        .unwrap();
    }
    write_text(&ctx.out_path("report.tsv"), &tsv)?;
    Ok(())
}
