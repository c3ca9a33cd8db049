//! Experiment configuration: a JSON document, then command-line overrides.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use mildrop::data::{load_bags, synth_generate, Dataset, SynthSpec};
use mildrop::dropout::{DropConfig, GammaMode, Mechanism, SmallBagPolicy, Strategy};
use mildrop::experiment::CvSpec;
use mildrop::metrics::StdConvention;
use mildrop::models::{ModelConfig, PoolingKind};
use mildrop::optim::{DecayStyle, TrainConfig};
use mildrop::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Canonical bag CSV; takes precedence over `synth`.
    pub data: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    /// Label used in reports; defaults to the data file stem.
    pub dataset_name: Option<String>,
    pub model: ModelConfig,
    pub dropout: DropConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub standardize: bool,
    pub std_convention: StdConvention,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cv = CvSpec::default();
        Self {
            data: None,
            synth: None,
            dataset_name: None,
            model: cv.model,
            dropout: DropConfig::none(),
            train: cv.train,
            folds: cv.folds,
            repeats: cv.repeats,
            seed: cv.seed,
            standardize: cv.standardize,
            std_convention: cv.std_convention,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.data, &self.synth) {
            (Some(path), _) => load_bags(path),
            (None, Some(spec)) => Ok(synth_generate(spec)?.dataset),
            (None, None) => Err(Error::Config(
                "no dataset: pass --data or give `data`/`synth` in the config".into(),
            )),
        }
    }

    pub fn dataset_label(&self) -> String {
        if let Some(name) = &self.dataset_name {
            return name.clone();
        }
        match &self.data {
            Some(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
            None => "synthetic".into(),
        }
    }

    pub fn cv_spec(&self) -> CvSpec {
        CvSpec {
            dataset_name: self.dataset_label(),
            model: self.model.clone(),
            train: TrainConfig {
                dropout: self.dropout.clone(),
                ..self.train.clone()
            },
            folds: self.folds,
            repeats: self.repeats,
            seed: self.seed,
            standardize: self.standardize,
            std_convention: self.std_convention,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolingArg {
    Abmil,
    AbmilGated,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MechanismArg {
    None,
    DropNeuron,
    DropInstance,
    AttentionGuided,
    MilDropout,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StrategyArg {
    Top,
    Bottom,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GammaArg {
    Nominal,
    Deduplicated,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SmallBagArg {
    Strict,
    Clamp,
    Skip,
}

/// Flags shared by every experiment command. Each one overrides the
/// matching field of the JSON config.
#[derive(Args, Clone, Debug, Default)]
pub struct ExperimentArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Canonical bag CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Name used in reports.
    #[arg(long)]
    pub dataset_name: Option<String>,
    #[arg(long, value_enum)]
    pub model: Option<PoolingArg>,
    #[arg(long, value_enum)]
    pub mechanism: Option<MechanismArg>,
    /// Drop probability for drop_neuron / drop_instance.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub g: Option<usize>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    pub gamma: Option<GammaArg>,
    /// What to do when K(1+G) does not fit a bag.
    #[arg(long, value_enum)]
    pub small_bags: Option<SmallBagArg>,
    /// Disable rescaling of kept activations (1/(1-p), or gamma for MIL-Dropout).
    #[arg(long)]
    pub no_inverted_scaling: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Add weight decay to the gradient instead of shrinking weights.
    #[arg(long)]
    pub coupled_decay: bool,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip per-fold feature standardization.
    #[arg(long)]
    pub no_standardize: bool,
    /// Report std/sqrt(n) instead of the sample std.
    #[arg(long)]
    pub standard_error: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ExperimentArgs {
    /// Reads `--config` (if any) and applies the flags on top.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = &self.data {
            c.data = Some(d.clone());
        }
        if let Some(n) = &self.dataset_name {
            c.dataset_name = Some(n.clone());
        }
        if let Some(m) = self.model {
            c.model.pooling = match m {
                PoolingArg::Abmil => PoolingKind::Abmil,
                PoolingArg::AbmilGated => PoolingKind::AbmilGated,
            };
        }
        if let Some(m) = self.mechanism {
            c.dropout.mechanism = match m {
                MechanismArg::None => Mechanism::None,
                MechanismArg::DropNeuron => Mechanism::DropNeuron,
                MechanismArg::DropInstance => Mechanism::DropInstance,
                MechanismArg::AttentionGuided => Mechanism::AttentionGuided,
                MechanismArg::MilDropout => Mechanism::MilDropout,
            };
        }
        if let Some(p) = self.p {
            c.dropout.p = p;
        }
        if let Some(k) = self.k {
            c.dropout.k = k;
        }
        if let Some(g) = self.g {
            c.dropout.g = g;
        }
        if let Some(s) = self.strategy {
            c.dropout.strategy = match s {
                StrategyArg::Top => Strategy::Top,
                StrategyArg::Bottom => Strategy::Bottom,
                StrategyArg::Random => Strategy::Random,
            };
        }
        if let Some(g) = self.gamma {
            c.dropout.gamma = match g {
                GammaArg::Nominal => GammaMode::Nominal,
                GammaArg::Deduplicated => GammaMode::Deduplicated,
            };
        }
        if let Some(s) = self.small_bags {
            c.dropout.small_bags = match s {
                SmallBagArg::Strict => SmallBagPolicy::Strict,
                SmallBagArg::Clamp => SmallBagPolicy::Clamp,
                SmallBagArg::Skip => SmallBagPolicy::Skip,
            };
        }
        if self.no_inverted_scaling {
            c.dropout.inverted_scaling = false;
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            c.train.learning_rate = lr;
        }
        if let Some(wd) = self.weight_decay {
            c.train.weight_decay = wd;
        }
        if self.coupled_decay {
            c.train.decay = DecayStyle::Coupled;
        }
        if let Some(f) = self.folds {
            c.folds = f;
        }
        if let Some(r) = self.repeats {
            c.repeats = r;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if self.no_standardize {
            c.standardize = false;
        }
        if self.standard_error {
            c.std_convention = StdConvention::StandardError;
        }
        if let Some(o) = &self.out {
            c.out = Some(o.clone());
        }
        // The top-level block wins; mirror it so written configs agree.
        c.train.dropout = c.dropout.clone();
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"folds": 4, "seed": 9, "dropout": {"mechanism": "mil_dropout", "k": 3, "g": 2}}"#,
        )
        .unwrap();
        let args = ExperimentArgs {
            config: Some(path),
            k: Some(1),
            ..Default::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!((c.folds, c.seed, c.dropout.k, c.dropout.g), (4, 9, 1, 2));
        assert_eq!(c.dropout.mechanism, Mechanism::MilDropout);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"fold": 4}"#).unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn missing_dataset_is_config_error() {
        assert!(matches!(ExperimentConfig::default().dataset(), Err(Error::Config(_))));
    }
}
