//! Repeated k-fold cross-validation and (K, G) sweeps.

use serde::{Deserialize, Serialize};

use crate::data::{kfold_splits, Bag, Dataset, Standardizer};
use crate::dropout::Mechanism;
use crate::metrics::{evaluate, CVReport, FoldRecord, ReportMeta, StdConvention};
use crate::models::{ModelConfig, ModelParams};
use crate::optim::{train, History, TrainConfig};
use crate::parallel::{self, Parallelism};
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvSpec {
    pub dataset_name: String,
    /// `input_dim` is taken from the dataset.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub repeats: usize,
    /// Root seed; `train.seed` is ignored in favour of per-fold streams.
    pub seed: u64,
    pub standardize: bool,
    pub std_convention: StdConvention,
}

impl Default for CvSpec {
    fn default() -> Self {
        Self {
            dataset_name: "dataset".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            folds: 10,
            repeats: 5,
            seed: 0,
            standardize: true,
            std_convention: StdConvention::Sample,
        }
    }
}

impl CvSpec {
    pub fn validate_for(&self, dataset: &Dataset) -> Result<()> {
        dataset.check_trainable()?;
        let mut model = self.model.clone();
        model.input_dim = dataset.dim;
        model.validate()?;
        self.train.validate()?;
        self.train.dropout.validate_for_bag_size(dataset.min_bag_size())?;
        if self.repeats < 1 {
            return Err(Error::config("need at least 1 repeat"));
        }
        Ok(())
    }

    pub fn meta(&self) -> ReportMeta {
        let d = &self.train.dropout;
        let (k, g) = match d.mechanism {
            Mechanism::MilDropout => (Some(d.k), Some(d.g)),
            Mechanism::AttentionGuided => (Some(d.k), None),
            _ => (None, None),
        };
        ReportMeta {
            dataset: self.dataset_name.clone(),
            model: self.model.pooling.name().to_string(),
            mechanism: d.mechanism.name().to_string(),
            k,
            g,
            seed: self.seed,
            repeats: self.repeats,
            folds: self.folds,
            standardized: self.standardize,
        }
    }
}

/// Everything one fold produced.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldOutput {
    pub record: FoldRecord,
    pub history: History,
    pub params: ModelParams,
}

/// Trains on `train_bags` and evaluates on `test_bags` with the given seeds.
pub fn run_fold(
    train_bags: &[Bag],
    test_bags: &[Bag],
    spec: &CvSpec,
    init_seed: u64,
    train_seed: u64,
) -> Result<(ModelParams, History, crate::metrics::RunMetrics)> {
    let (train_bags, test_bags) = if spec.standardize {
        let st = Standardizer::fit(train_bags);
        (st.apply_all(train_bags), st.apply_all(test_bags))
    } else {
        (train_bags.to_vec(), test_bags.to_vec())
    };
    let mut model = spec.model.clone();
    model.input_dim = train_bags.first().map_or(0, Bag::dim);
    let init = ModelParams::init(&model, &mut seed::rng(init_seed))?;
    let config = TrainConfig {
        seed: train_seed,
        ..spec.train.clone()
    };
    let (params, history) = train(&train_bags, init, &config)?;
    let metrics = evaluate(&params, &test_bags)?;
    Ok((params, history, metrics))
}

/// `(repeat, fold)` keys in run order.
pub fn fold_keys(spec: &CvSpec) -> Vec<(usize, usize)> {
    (0..spec.repeats)
        .flat_map(|r| (0..spec.folds).map(move |f| (r, f)))
        .collect()
}

/// Runs every fold; individual failures are returned in place.
pub fn run_folds(dataset: &Dataset, spec: &CvSpec, mode: Parallelism) -> Result<Vec<Result<FoldOutput>>> {
    spec.validate_for(dataset)?;
    let plan = kfold_splits(&dataset.labels(), spec.folds, spec.repeats, spec.seed)?;
    let outputs = parallel::map(fold_keys(spec), mode, |(r, f)| {
        let train_idx = plan.train_indices(r, f);
        let train_bags = dataset.subset(&train_idx);
        let test_bags = dataset.subset(plan.test_indices(r, f));
        let init_seed = seed::derive(spec.seed, "init", &[r as u64, f as u64]);
        let train_seed = seed::derive(spec.seed, "train", &[r as u64, f as u64]);
        log::info!("{}: repeat {r} fold {f}", spec.dataset_name);
        let (params, history, metrics) = run_fold(&train_bags, &test_bags, spec, init_seed, train_seed)
            .map_err(|e| annotate(e, r, f))?;
        Ok(FoldOutput {
            record: FoldRecord {
                repeat: r,
                fold: f,
                init_seed,
                train_seed,
                n_train: train_idx.len(),
                metrics,
            },
            history,
            params,
        })
    });
    Ok(outputs)
}

fn annotate(e: Error, repeat: usize, fold: usize) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("repeat {repeat} fold {fold}: {m}")),
        other => other,
    }
}

/// Cross-validation that fails on the first fold error.
pub fn run_cv(dataset: &Dataset, spec: &CvSpec, mode: Parallelism) -> Result<(CVReport, Vec<FoldOutput>)> {
    let outputs = run_folds(dataset, spec, mode)?.into_iter().collect::<Result<Vec<_>>>()?;
    let records = outputs.iter().map(|o| o.record.clone()).collect();
    let report = CVReport::new(spec.meta(), records, spec.std_convention)?;
    Ok((report, outputs))
}

/// One (K, G) cell of an ablation sweep.
#[derive(Debug)]
pub struct AblationCell {
    pub k: usize,
    pub g: usize,
    pub result: Result<CVReport>,
}

/// Cartesian sweep over `ks x gs` with MIL-Dropout; failed cells are kept.
pub fn run_ablation(
    dataset: &Dataset,
    spec: &CvSpec,
    ks: &[usize],
    gs: &[usize],
    mode: Parallelism,
) -> Result<Vec<AblationCell>> {
    if ks.is_empty() || gs.is_empty() {
        return Err(Error::config("K and G lists must be non-empty"));
    }
    let mut cells = Vec::with_capacity(ks.len() * gs.len());
    for &k in ks {
        for &g in gs {
            let mut cell_spec = spec.clone();
            cell_spec.train.dropout.mechanism = Mechanism::MilDropout;
            cell_spec.train.dropout.k = k;
            cell_spec.train.dropout.g = g;
            let result = run_cv(dataset, &cell_spec, mode)
                .map(|(report, _)| report)
                .inspect_err(|e| log::warn!("cell K={k} G={g} failed: {e}"));
            cells.push(AblationCell { k, g, result });
        }
    }
    Ok(cells)
}
