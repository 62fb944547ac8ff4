use std::fmt::Write as _;

use serde::Serialize;

use super::{predict_corpus, score};
use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{train, TrainConfig};

/// Channel switches for one ablation arm.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub name: String,
    pub use_coref: bool,
    pub use_role: bool,
    pub use_discourse: bool,
}

impl Variant {
    fn new(name: &str, use_coref: bool, use_role: bool, use_discourse: bool) -> Self {
        Variant {
            name: name.into(),
            use_coref,
            use_role,
            use_discourse,
        }
    }

    pub fn full() -> Self {
        Self::new("full", true, true, true)
    }

    /// Without coreference-aware encoding.
    pub fn without_cae() -> Self {
        Self::new("w/o-CAE", false, true, true)
    }

    /// Without the interlocutor-property channel's role matrix.
    pub fn without_ipm() -> Self {
        Self::new("w/o-IPM", true, false, true)
    }

    /// Without the discourse-dependency mask.
    pub fn without_ddm() -> Self {
        Self::new("w/o-DDM", true, true, false)
    }

    /// All structure removed: three plain transformer channels.
    pub fn without_all() -> Self {
        Self::new("w/o-all", false, false, false)
    }

    /// The five named arms.
    pub fn all() -> Vec<Self> {
        vec![
            Self::full(),
            Self::without_cae(),
            Self::without_ipm(),
            Self::without_ddm(),
            Self::without_all(),
        ]
    }

    /// Looks up an arm by name, ignoring case.
    pub fn parse(name: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|v| v.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{name}' (expected full, w/o-CAE, w/o-IPM, w/o-DDM or w/o-all)"
                ))
            })
    }

    pub fn apply(&self, config: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_coref: self.use_coref,
            use_role: self.use_role,
            use_discourse: self.use_discourse,
            ..config.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub em: Vec<f64>,
    pub f1: Vec<f64>,
    pub mean_em: f64,
    pub mean_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:>7} {:>7}  per-seed F1", "variant", "EM", "F1").unwrap();
        for r in &self.rows {
            let per: Vec<String> = r.f1.iter().map(|f| format!("{f:.2}")).collect();
            writeln!(
                s,
                "{:<10} {:>7.2} {:>7.2}  {}",
                r.variant,
                r.mean_em,
                r.mean_f1,
                per.join(" ")
            )
            .unwrap();
        }
        s
    }
}

/// Trains every variant once per seed with otherwise identical settings and
/// scores it on `test`. Training runs for the configured epochs without
/// dev-based selection.
pub fn run_ablation(
    train_corpus: &[Dialogue],
    test_corpus: &[Dialogue],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    if variants.len() < 2 {
        return Err(Error::Config("an ablation needs at least two variants".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let config = v.apply(model_config);
        let (mut em, mut f1) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let tc = TrainConfig {
                seed,
                ..train_config.clone()
            };
            let out = train(train_corpus, None, &config, &tc, None)?;
            let preds = predict_corpus(&out.model, &out.vocab, test_corpus)?;
            let report = score(&preds, test_corpus)?;
            log::info!("{} seed {seed}: EM {:.2} F1 {:.2}", v.name, report.em, report.f1);
            em.push(report.em);
            f1.push(report.f1);
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        rows.push(AblationRow {
            variant: v.name.clone(),
            seeds: seeds.to_vec(),
            mean_em: mean(&em),
            mean_f1: mean(&f1),
            em,
            f1,
        });
    }
    Ok(AblationTable { rows })
}
