use std::path::{Path, PathBuf};

use anyhow::Context;
use fairrec_core::data::ColumnSchema;
use fairrec_core::evaluation::{EvalOptions, ReferenceSet, DEFAULT_K};
use fairrec_core::recommenders::{ModelKind, DEFAULT_NEIGHBORS};
use fairrec_core::synthetic::SynthConfig;
use fairrec_core::training::{
    AccuracyCriterion, FairnessCriterion, Kappa, LossConfig, LossVariant, ModelSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};

/// Everything a run needs. Every section is optional; an empty file gives
/// the default protocol.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    /// Used when no dataset path is given.
    pub synth: Option<SynthConfig>,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub analyze: AnalyzeSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    /// Label used in reports; defaults to the file stem.
    pub name: Option<String>,
    pub columns: ColumnSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Neighborhood size for the neighbor models.
    pub neighbors: usize,
    /// Poisson factorization L2 weight.
    pub poisson_lambda: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::Mf, neighbors: DEFAULT_NEIGHBORS, poisson_lambda: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub reference: ReferenceSet,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { k: DEFAULT_K, reference: ReferenceSet::Positives }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// First year of each bucket after the first: `[2015, 2016, 2017]` gives
    /// `<=2014`, `2015`, `2016`, `>=2017`.
    pub year_edges: Vec<i32>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self { year_edges: vec![2015, 2016, 2017] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub variants: Vec<LossVariant>,
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub kappas: Vec<Kappa>,
    pub accuracy: AccuracyCriterion,
    pub fairness: FairnessCriterion,
    /// Also fit the neighbor and Poisson baselines.
    pub baselines: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            variants: vec![LossVariant::Plain, LossVariant::Reweighted, LossVariant::CorrValue, LossVariant::CorrError],
            lambdas: vec![0.01, 0.1, 1.0, 10.0],
            alphas: vec![0.5, 1.0, 5.0, 10.0],
            kappas: Kappa::default_grid(),
            accuracy: AccuracyCriterion::Rating,
            fairness: FairnessCriterion::ErrorF,
            baselines: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.eval.k >= 1, "eval.k must be at least 1");
        anyhow::ensure!(self.model.neighbors >= 1, "model.neighbors must be at least 1");
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { k: self.eval.k, reference: self.eval.reference, seed: self.train.seed }
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.model.kind {
            ModelKind::Mf => ModelSpec::Mf { loss: self.loss },
            ModelKind::PoissonMf => ModelSpec::PoissonMf { lambda: self.model.poisson_lambda },
            ModelKind::ItemCf => ModelSpec::ItemCf { k: self.model.neighbors },
            ModelKind::UserCf => ModelSpec::UserCf { k: self.model.neighbors },
        }
    }

    /// Applies a `--seed` override to training and generation.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        if let Some(s) = self.synth.as_mut() {
            s.seed = seed;
        }
    }
}

/// Display name of a model in comparison tables.
pub fn display_name(spec: &ModelSpec) -> String {
    match spec {
        ModelSpec::Mf { loss } => match loss.variant {
            LossVariant::Plain => "MF".into(),
            LossVariant::CorrError => "MF(corr.error)".into(),
            LossVariant::CorrValue => "MF(corr.value)".into(),
            LossVariant::Reweighted => "MF(reweighted)".into(),
        },
        ModelSpec::PoissonMf { .. } => "PoissonMF".into(),
        ModelSpec::ItemCf { .. } => "itemCF".into(),
        ModelSpec::UserCf { .. } => "userCF".into(),
    }
}

/// File-name-safe form of a display name.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.eval.k, 10);
        assert_eq!(cfg.sweep.kappas.len(), 5);
        assert_eq!(cfg.analyze.year_edges, vec![2015, 2016, 2017]);
    }

    #[test]
    fn sections_parse() {
        let cfg = ExperimentConfig::parse(
            r#"
            [data]
            path = "ratings.csv"
            [data.columns]
            user_attr = "user_body_shape"
            [model]
            kind = "mf"
            [loss]
            variant = "corr_error"
            alpha = 1.0
            kappa = "(0,0,1)"
            [train]
            max_epochs = 3
            [sweep]
            kappas = ["(1,0,0)", "(1,1,1)"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.data.columns.user_attr, "user_body_shape");
        assert_eq!(cfg.data.columns.item_id, "item_id");
        assert_eq!(cfg.loss.kappa, Kappa::new(false, false, true));
        assert_eq!(cfg.loss.lambda, 0.1);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.train.batch_size, 512);
        assert_eq!(display_name(&cfg.model_spec()), "MF(corr.error)");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::parse("[eval]\nk = 0").is_err());
        assert!(ExperimentConfig::parse("[loss]\nkappa = \"(2,0,0)\"").is_err());
        assert!(ExperimentConfig::parse("[nonsense]\nx = 1").is_err());
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("MF(corr.error)"), "mf-corr-error");
        assert_eq!(slug("itemCF"), "itemcf");
    }
}
