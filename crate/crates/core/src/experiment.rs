//! Train/evaluate composition shared by the CLI and the test suites.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{evaluate, EvaluationReport, ScorecardBin};
use crate::features::FeatureMatrix;
use crate::model::{fit_gbt, random_search, undersample, CvReport, HyperParams, SearchSpace, TreeEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub split_seed: u64,
    pub sample_seed: u64,
    pub search_seed: u64,
    pub synth_seed: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::all(0)
    }
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            split_seed: seed,
            sample_seed: seed,
            search_seed: seed,
            synth_seed: seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub test_fraction: f64,
    pub n_candidates: usize,
    pub folds: usize,
    pub space: SearchSpace,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            test_fraction: 0.2,
            n_candidates: 10,
            folds: 10,
            space: SearchSpace::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
    pub balanced_train: FeatureMatrix,
    pub params: HyperParams,
    pub cv: CvReport,
    pub model: TreeEnsemble,
}

/// Stratified split, undersampling of the training side only, random
/// search on the balanced training rows and a final fit with the winner.
pub fn train(matrix: &FeatureMatrix, cfg: &TrainConfig, seeds: &Seeds) -> Result<TrainOutcome> {
    let (train, test) = matrix.split(cfg.test_fraction, seeds.split_seed)?;
    let balanced_train = undersample(&train, seeds.sample_seed)?;
    let (params, cv) = random_search(
        &balanced_train,
        &cfg.space,
        cfg.n_candidates,
        cfg.folds,
        seeds.search_seed,
    )?;
    let model = fit_gbt(&balanced_train, &params, seeds.search_seed)?;
    Ok(TrainOutcome {
        train,
        test,
        balanced_train,
        params,
        cv,
        model,
    })
}

pub fn train_and_evaluate(
    matrix: &FeatureMatrix,
    cfg: &TrainConfig,
    seeds: &Seeds,
) -> Result<(TrainOutcome, EvaluationReport, Vec<ScorecardBin>)> {
    let outcome = train(matrix, cfg, seeds)?;
    let (report, bins) = evaluate(&outcome.model, &outcome.test)?;
    Ok((outcome, report, bins))
}
