use std::fmt::Write as _;

use fairrec_core::data::{contingency_table, Dataset, SegmentKey};
use fairrec_core::stats::{anova_two_way, chi2_independence, format_p_value, segment_means, AnovaResult, Chi2Result};
use serde::Serialize;

use crate::{write_json, write_text, CliResult, Context};

#[derive(Debug, Clone, Serialize)]
pub struct PeriodTest {
    pub period: String,
    pub n: u64,
    pub dropped_unknown: usize,
    pub result: Option<Chi2Result>,
    /// Why the test could not be run.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutcomeAnova {
    pub outcome: String,
    pub result: Option<AnovaResult>,
    pub error: Option<String>,
}

/// Year buckets from edges: `(label, min_year, max_year)`.
pub fn year_buckets(edges: &[i32]) -> Vec<(String, i32, i32)> {
    let mut edges = edges.to_vec();
    edges.sort_unstable();
    edges.dedup();
    if edges.is_empty() {
        return Vec::new();
    }
    let mut out = vec![(format!("<={}", edges[0] - 1), i32::MIN, edges[0] - 1)];
    for w in edges.windows(2) {
        let label = if w[1] - w[0] == 1 { w[0].to_string() } else { format!("{}-{}", w[0], w[1] - 1) };
        out.push((label, w[0], w[1] - 1));
    }
    let last = *edges.last().unwrap();
    out.push((format!(">={last}"), last, i32::MAX));
    out
}

fn period_test(ds: &Dataset, label: &str, subset: &[usize]) -> PeriodTest {
    let mut out = PeriodTest { period: label.to_string(), n: 0, dropped_unknown: 0, result: None, error: None };
    match contingency_table(ds, subset) {
        Ok(table) => {
            out.n = table.grand_total();
            out.dropped_unknown = table.dropped_unknown;
            match chi2_independence(&table.as_f64()) {
                Ok(r) => out.result = Some(r),
                Err(e) => out.error = Some(e.to_string()),
            }
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

fn outcome_anova(outcome: &str, values: &[(f64, SegmentKey)]) -> OutcomeAnova {
    match anova_two_way(values) {
        Ok(r) => OutcomeAnova { outcome: outcome.into(), result: Some(r), error: None },
        Err(e) => OutcomeAnova { outcome: outcome.into(), result: None, error: Some(e.to_string()) },
    }
}

pub fn cmd_analyze(ctx: &Context) -> CliResult<()> {
    let data = ctx.load_data()?;
    let ds = &data.dataset;
    let user_label = |m: usize| ds.vocab_user().label(Some(m)).to_string();
    let item_label = |n: usize| ds.vocab_item().label(Some(n)).to_string();

    // contingency with expected counts and deviations
    let all = ds.all_indices();
    let overall = period_test(ds, "all", &all);
    let table = contingency_table(ds, &all).map_err(anyhow::Error::from)?;
    let mut tsv = String::from("user_group\titem_group\tcount\texpected\tdeviation\n");
    for m in 0..table.n_rows() {
        for n in 0..table.n_cols() {
            let (expected, deviation) = overall
                .result
                .as_ref()
                .map_or((f64::NAN, f64::NAN), |r| (r.expected[m][n], r.deviations[m][n]));
            writeln!(tsv, "{}\t{}\t{}\t{expected:.3}\t{deviation:.3}", user_label(m), item_label(n), table.counts[m][n]).unwrap();
        }
    }
    write_text(&ctx.out_path("contingency.tsv"), &tsv)?;

    let mut tests = vec![overall];
    for (label, lo, hi) in year_buckets(&ctx.config.analyze.year_edges) {
        let subset: Vec<usize> = all.iter().copied().filter(|&k| (lo..=hi).contains(&ds.year_of(k))).collect();
        tests.push(period_test(ds, &label, &subset));
    }
    let mut tsv = String::from("period\tn\tchi2\tdof\tp_value\tp_display\n");
    for t in &tests {
        match &t.result {
            Some(r) => writeln!(tsv, "{}\t{}\t{:.3}\t{}\t{:.6e}\t{}", t.period, t.n, r.statistic, r.dof, r.p_value, format_p_value(r.p_value)),
            None => writeln!(tsv, "{}\t{}\tNA\tNA\tNA\tNA", t.period, t.n),
        }
        .unwrap();
    }
    write_text(&ctx.out_path("chi2.tsv"), &tsv)?;
    write_json(&ctx.out_path("chi2.json"), &tests)?;

    // outcomes by segment; unknown identities are left out
    let mut ratings = Vec::new();
    let mut fits = Vec::new();
    for (k, x) in ds.interactions().iter().enumerate() {
        if let Some(key) = ds.segment_of_interaction(k) {
            ratings.push((x.rating, key));
            if let Some(fit) = x.fit {
                fits.push((fit.as_outcome(), key));
            }
        }
    }
    let mut outcomes = vec![("rating", ratings)];
    if ds.has_fit() {
        outcomes.push(("fit", fits));
    }

    let anovas: Vec<OutcomeAnova> = outcomes.iter().map(|(name, v)| outcome_anova(name, v)).collect();
    let mut tsv = String::from("outcome\teffect\tss\tdof_num\tdof_den\tF\tp_value\tp_display\n");
    for a in &anovas {
        if let Some(r) = &a.result {
            for (effect, t) in [("product", &r.product), ("user", &r.user), ("product:user", &r.interaction)] {
                writeln!(
                    tsv,
                    "{}\t{effect}\t{:.4}\t{}\t{}\t{:.4}\t{:.6e}\t{}",
                    a.outcome,
                    t.ss,
                    t.dof_num,
                    t.dof_den,
                    t.f,
                    t.p_value,
                    format_p_value(t.p_value)
                )
                .unwrap();
            }
        }
    }
    write_text(&ctx.out_path("anova.tsv"), &tsv)?;
    write_json(&ctx.out_path("anova.json"), &anovas)?;

    let mut tsv = String::from("outcome\tuser_group\titem_group\tcount\tmean\tstd_err\tci95_half_width\n");
    for (name, values) in &outcomes {
        for c in segment_means(values).cells {
            writeln!(
                tsv,
                "{name}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                user_label(c.key.m),
                item_label(c.key.n),
                c.count,
                c.mean,
                c.std_err,
                c.ci_half_width
            )
            .unwrap();
        }
    }
    write_text(&ctx.out_path("segment_means.tsv"), &tsv)?;
    Ok(())
}
