//! Patient-level cross-validation of regularizer modes on phantom cases.

use serde::{Deserialize, Serialize};

use crate::dataset::{build_sim_set, CaseData, SimSetSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate_case, make_folds, EvalRecord, FoldPlan};
use crate::rng::derive_seed;
use crate::sim::SurrogateConfig;
use crate::training::{register, train_in_memory, RegularizerMode, TrainConfig, TrainData};
use crate::transform::{AffineRanges, DisplacementField};

/// Mode tag of the untrained baseline.
pub const IDENTITY: &str = "identity";

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub folds: usize,
    pub seed: u64,
    pub modes: Vec<RegularizerMode>,
    /// Template for every run; the fold overrides `seed`, `train_cases`
    /// and `regularizer_mode`.
    pub train: TrainConfig,
    pub sim_patients: usize,
    pub sim_per_patient: usize,
    pub surrogate: SurrogateConfig,
}

impl ExperimentConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            folds: 4,
            seed,
            modes: vec![RegularizerMode::Adversarial, RegularizerMode::Bending, RegularizerMode::None],
            train: TrainConfig::desk(),
            sim_patients: 16,
            sim_per_patient: 8,
            surrogate: SurrogateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub test_ids: Vec<String>,
    /// Held-out cases, for the identity baseline and every mode.
    pub held_out: Vec<EvalRecord>,
    /// Unaugmented training cases, for every mode.
    pub training: Vec<EvalRecord>,
}

fn mean_of(records: &[EvalRecord], mode: &str, f: fn(&EvalRecord) -> f64) -> Option<f64> {
    let v: Vec<f64> = records.iter().filter(|r| r.mode == mode).map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl FoldOutcome {
    pub fn held_out_tre(&self, mode: &str) -> Option<f64> {
        mean_of(&self.held_out, mode, |r| r.tre)
    }

    pub fn held_out_dsc(&self, mode: &str) -> Option<f64> {
        mean_of(&self.held_out, mode, |r| r.dsc)
    }

    pub fn training_dsc(&self, mode: &str) -> Option<f64> {
        mean_of(&self.training, mode, |r| r.dsc)
    }
}

fn score(cases: &[&CaseData], mode: &str, field: impl Fn(&CaseData) -> Result<DisplacementField>) -> Result<Vec<EvalRecord>> {
    cases.iter().map(|c| evaluate_case(c, &field(c)?, mode)).collect()
}

/// Train every mode on the training part of fold `k` and score the
/// held-out and training cases.
pub fn run_fold(
    cfg: &ExperimentConfig,
    cases: &[CaseData],
    plan: &FoldPlan,
    k: usize,
    mut progress: impl FnMut(&str),
) -> Result<FoldOutcome> {
    let test_ids = plan.folds.get(k).ok_or_else(|| Error::InvalidArgument(format!("no fold {k}")))?.clone();
    let (test, train): (Vec<&CaseData>, Vec<&CaseData>) = cases.iter().partition(|c| test_ids.contains(&c.id));
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(format!("fold {k} leaves no training or no test cases")));
    }
    let train_owned: Vec<CaseData> = train.iter().map(|c| (*c).clone()).collect();
    let grid = *train[0].grid();
    let seed = derive_seed(cfg.seed, &[k as u64]);

    let sims = if cfg.modes.contains(&RegularizerMode::Adversarial) {
        let spec = SimSetSpec {
            patients: cfg.sim_patients,
            per_patient: cfg.sim_per_patient,
            seed: derive_seed(seed, &[0x5135]),
            surrogate: cfg.surrogate.clone(),
            train_grid: grid,
            augment: AffineRanges::default_for(&grid),
        };
        let pool: Vec<_> = train.iter().map(|c| c.fixed_gland.clone()).collect();
        let (fields, stats) = build_sim_set(&spec, &pool)?;
        progress(&format!("fold {k}: {} simulated fields", fields.len()));
        Some((fields.iter().map(|f| stats.normalize(f)).collect::<Vec<_>>(), stats))
    } else {
        None
    };

    let mut held_out = score(&test, IDENTITY, |c| Ok(DisplacementField::zeros(*c.grid())))?;
    let mut training = Vec::new();
    for &mode in &cfg.modes {
        let tc = TrainConfig {
            seed,
            regularizer_mode: mode,
            train_cases: train.iter().map(|c| c.id.clone()).collect(),
            grid_shape: grid.shape(),
            grid_spacing: grid.spacing()[0],
            ..cfg.train.clone()
        };
        let (data, stats) = match (&sims, mode) {
            (Some((n, s)), RegularizerMode::Adversarial) => (TrainData { cases: &train_owned, sims: n }, Some(*s)),
            _ => (TrainData { cases: &train_owned, sims: &[] }, None),
        };
        let state = train_in_memory(&tc, &data, stats, |_, _| Ok(()))?;
        let tag = mode.as_str();
        let reg = |c: &CaseData| register(&state.reg, &c.moving, &c.fixed).map(|r| r.composed);
        held_out.extend(score(&test, tag, reg)?);
        training.extend(score(&train, tag, reg)?);
        progress(&format!("fold {k}: {tag} trained for {} steps", tc.total_steps));
    }
    Ok(FoldOutcome { fold: k, test_ids, held_out, training })
}

/// Every fold of a `cfg.folds`-fold split of `cases`.
pub fn cross_validate(cfg: &ExperimentConfig, cases: &[CaseData], mut progress: impl FnMut(&str)) -> Result<Vec<FoldOutcome>> {
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let plan = make_folds(&ids, cfg.folds, cfg.seed)?;
    (0..cfg.folds).map(|k| run_fold(cfg, cases, &plan, k, &mut progress)).collect()
}
