use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context as _;
use fairrec_core::evaluation::{evaluate, MetricsReport};
use fairrec_core::recommenders::{load_model, save_model, Model, ModelHeader, ModelKind};
use fairrec_core::training::{config_hash, grid_search, train_model, GridRow, GridSpec, LossConfig, ModelSpec, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{display_name, slug};
use crate::{
    sweep_threads, train_failure, write_json, write_text, CliError, CliResult, Context, ExitCode, LoadedData,
    EXIT_INPUT, EXIT_MISSING_ARTIFACT,
};

/// Sidecar written next to a model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: String,
    pub dataset: String,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub config_hash: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

pub fn cmd_synth(ctx: &Context) -> CliResult<()> {
    let cfg = ctx.config.synth.clone().unwrap_or_default();
    let seeded = match ctx.config.synth {
        Some(_) => cfg,
        None => fairrec_core::synthetic::SynthConfig { seed: ctx.config.train.seed, ..cfg },
    };
    let ds = fairrec_core::synthetic::generate(&seeded).exit_code(EXIT_INPUT)?;
    let path = ctx.out_path("synthetic.csv");
    ds.write_csv(&path).map_err(anyhow::Error::from)?;
    log::info!("wrote {} interactions to {}", ds.len(), path.display());
    Ok(())
}

fn fit_and_save(ctx: &Context, data: &LoadedData, spec: &ModelSpec, train: &TrainConfig, stem: &str) -> CliResult<(Model, TrainSummary)> {
    let (model, history) = train_model(&data.dataset, &data.split, spec, train).map_err(train_failure)?;
    let hash = config_hash(&(spec, train));
    let header = ModelHeader::for_model(&model, train.seed, hash.clone());
    save_model(&ctx.out_path(&format!("{stem}.bin")), &header, &model).map_err(anyhow::Error::from)?;
    let mut lines = Vec::new();
    history.write_json_lines(&mut lines)?;
    std::fs::write(ctx.out_path(&format!("{stem}.history.jsonl")), lines)?;
    let summary = TrainSummary {
        model: display_name(spec),
        dataset: data.name.clone(),
        spec: *spec,
        train: *train,
        config_hash: hash,
        best_epoch: history.best_epoch,
        epochs_run: history.epochs.len(),
        stopped_early: history.stopped_early,
    };
    write_json(&ctx.out_path(&format!("{stem}.json")), &summary)?;
    Ok((model, summary))
}

pub fn cmd_train(ctx: &Context) -> CliResult<()> {
    let data = ctx.load_data()?;
    let spec = ctx.config.model_spec();
    let (_, summary) = fit_and_save(ctx, &data, &spec, &ctx.config.train, "model")?;
    log::info!("trained {} (best epoch {})", summary.model, summary.best_epoch);
    Ok(())
}

fn evaluate_and_write(ctx: &Context, data: &LoadedData, model: &Model, name: &str) -> CliResult<MetricsReport> {
    let report = evaluate(model, name, &data.dataset, &data.name, &data.split.train, &data.split.test, &ctx.config.eval_options())
        .exit_code(EXIT_INPUT)?;
    write_json(&ctx.out_path(&format!("metrics-{}.json", slug(name))), &report)?;
    let ds = &data.dataset;
    let mut tsv = String::from("user_group\titem_group\tdiff\n");
    for (m, row) in report.diff_matrix.iter().enumerate() {
        for (n, cell) in row.iter().enumerate() {
            let v = cell.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
            writeln!(tsv, "{}\t{}\t{v}", ds.vocab_user().label(Some(m)), ds.vocab_item().label(Some(n))).unwrap();
        }
    }
    write_text(&ctx.out_path(&format!("diff-{}.tsv", slug(name))), &tsv)?;
    Ok(report)
}

pub fn cmd_evaluate(ctx: &Context, model_path: Option<&Path>) -> CliResult<()> {
    let path = model_path.map(Path::to_path_buf).unwrap_or_else(|| ctx.out_path("model.bin"));
    if !path.exists() {
        return Err(anyhow::anyhow!("no model at {}; run train first", path.display())).exit_code(EXIT_MISSING_ARTIFACT);
    }
    let (header, model) = load_model(&path)
        .with_context(|| format!("cannot read model {}", path.display()))
        .exit_code(EXIT_MISSING_ARTIFACT)?;
    let data = ctx.load_data()?;
    if header.n_users != data.dataset.n_users() || header.n_items != data.dataset.n_items() {
        return Err(anyhow::anyhow!(
            "model was trained on {} users x {} items but the dataset has {} x {}",
            header.n_users,
            header.n_items,
            data.dataset.n_users(),
            data.dataset.n_items()
        ))
        .exit_code(EXIT_INPUT);
    }
    let name = std::fs::read_to_string(path.with_extension("json"))
        .ok()
        .and_then(|s| serde_json::from_str::<TrainSummary>(&s).ok())
        .map(|s| s.model)
        .unwrap_or_else(|| default_name(header.kind));
    evaluate_and_write(ctx, &data, &model, &name)?;
    Ok(())
}

fn default_name(kind: ModelKind) -> String {
    match kind {
        ModelKind::Mf => "MF",
        ModelKind::PoissonMf => "PoissonMF",
        ModelKind::ItemCf => "itemCF",
        ModelKind::UserCf => "userCF",
    }
    .to_string()
}

#[derive(Debug, Clone, Serialize)]
struct Selection {
    model: String,
    config: LossConfig,
    validation: GridRow,
}

/// Poisson L2 weight with the lowest validation MSE.
fn select_poisson_lambda(data: &LoadedData, lambdas: &[f64], train: &TrainConfig, threads: usize) -> CliResult<f64> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(anyhow::Error::from)?;
    let scored: Vec<(f64, f64)> = pool.install(|| {
        lambdas
            .par_iter()
            .map(|&lambda| {
                let (_, history) = train_model(&data.dataset, &data.split, &ModelSpec::PoissonMf { lambda }, train)?;
                Ok((lambda, history.best().map_or(f64::INFINITY, |b| b.validation_mse)))
            })
            .collect::<Result<Vec<_>, _>>()
    })
    .map_err(train_failure)?;
    let best = scored.iter().fold(scored[0], |best, &c| if c.1 < best.1 { c } else { best });
    Ok(best.0)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

pub fn cmd_sweep(ctx: &Context) -> CliResult<()> {
    let data = ctx.load_data()?;
    let sweep = &ctx.config.sweep;
    let train = &ctx.config.train;
    if sweep.lambdas.is_empty() {
        return Err(CliError { code: EXIT_INPUT, error: anyhow::anyhow!("sweep.lambdas is empty") });
    }
    let threads = sweep_threads();
    log::info!("sweeping with {threads} worker(s)");

    let mut rows: Vec<(String, MetricsReport, String)> = Vec::new();
    if sweep.baselines {
        let lambda = select_poisson_lambda(&data, &sweep.lambdas, train, threads)?;
        let baselines = [
            ModelSpec::ItemCf { k: ctx.config.model.neighbors },
            ModelSpec::UserCf { k: ctx.config.model.neighbors },
            ModelSpec::PoissonMf { lambda },
        ];
        for spec in baselines {
            let name = display_name(&spec);
            let (model, _) = fit_and_save(ctx, &data, &spec, train, &format!("model-{}", slug(&name)))?;
            let report = evaluate_and_write(ctx, &data, &model, &name)?;
            let detail = match spec {
                ModelSpec::PoissonMf { lambda } => format!("lambda={lambda}"),
                ModelSpec::ItemCf { k } | ModelSpec::UserCf { k } => format!("neighbors={k}"),
                ModelSpec::Mf { .. } => String::new(),
            };
            rows.push((name, report, detail));
        }
    }

    let mut selections = Vec::new();
    for &variant in &sweep.variants {
        let spec = GridSpec {
            variant,
            lambdas: sweep.lambdas.clone(),
            alphas: sweep.alphas.clone(),
            kappas: sweep.kappas.clone(),
            accuracy: sweep.accuracy,
            fairness: sweep.fairness,
            k: ctx.config.eval.k,
        };
        let outcome = grid_search(&data.dataset, &data.split, &spec, train, threads).map_err(train_failure)?;
        let mut tsv = Vec::new();
        outcome.write_tsv(&mut tsv)?;
        std::fs::write(ctx.out_path(&format!("grid-{}.tsv", variant.name())), tsv)?;

        let chosen = *outcome.selected_row();
        let model_spec = ModelSpec::Mf { loss: chosen.config };
        let name = display_name(&model_spec);
        let (model, _) = fit_and_save(ctx, &data, &model_spec, train, &format!("model-{}", slug(&name)))?;
        let report = evaluate_and_write(ctx, &data, &model, &name)?;
        let c = chosen.config;
        let detail = match variant {
            fairrec_core::training::LossVariant::Plain => format!("lambda={}", c.lambda),
            v if v.uses_alpha() => format!("lambda={} alpha={} kappa={}", c.lambda, c.alpha, c.kappa),
            _ => format!("lambda={} kappa={}", c.lambda, c.kappa),
        };
        rows.push((name.clone(), report, detail));
        selections.push(Selection { model: name, config: c, validation: chosen });
    }
    write_json(&ctx.out_path("selection.json"), &selections)?;

    let order = ["itemCF", "userCF", "PoissonMF", "MF", "MF(reweighted)", "MF(corr.value)", "MF(corr.error)"];
    rows.sort_by_key(|(name, _, _)| order.iter().position(|o| o == name).unwrap_or(order.len()));
    let k = ctx.config.eval.k;
    let mut tsv = format!("model\tmse\tmae\tf_stat\tf_p_value\tauc\tndcg@{k}\tkl\tconfig\n");
    for (name, r, detail) in &rows {
        writeln!(
            tsv,
            "{name}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}\t{}\t{detail}",
            r.mse,
            r.mae,
            fmt_opt(r.fairness_f.map(|f| f.f)),
            r.fairness_f.map_or_else(|| "NA".to_string(), |f| format!("{:.4e}", f.p_value)),
            fmt_opt(r.auc),
            fmt_opt(r.ndcg_at_k),
            fmt_opt(r.kl),
        )
        .unwrap();
    }
    write_text(&ctx.out_path("comparison.tsv"), &tsv)?;
    Ok(())
}
