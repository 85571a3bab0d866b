//! Synthetic versions of the bias-mitigation experiments: datasets at the default
//! sizes, the hyperparameter-selection protocol, and the runs behind the
//! forgetting table, the Pareto sweep, the label-shift stress test, the
//! claim-only bias probe and the data ablation.
//!
//! Selection follows one recipe throughout. Unregularized fine-tuning is
//! cross-validated over learning rate and epochs. Each regularizer's λ grid
//! is then rescaled by [`calibrate_lambda_scale`] against that FT
//! configuration and cross-validated over learning rate, λ and epochs.
//! All selection runs start from the first seed's base model.

use serde::{Deserialize, Serialize};

use crate::continual::{RegularizerConfig, RegularizerKind};
use crate::data::{
    generate_biased_original, generate_single_label_challenge, generate_symmetric_counterfactual, Dataset,
    GeneratorConfig,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy, frontier_dominates, pareto_frontier, ParetoPoint};
use crate::model::{Classifier, Init, ModelDims};
use crate::train::{
    ablation_sweep, calibrate_lambda_scale, cv_selected_points, fit_bases, grid_search_cv, hyperparameter_sweep,
    run_conditions, train, AblationResult, BaseModels, Condition, CvTable, ExperimentData, FinetuneConfig,
    LambdaCalibration, RunResult, SweepGrid, SweepPoint, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalogConfig {
    /// Original-task corpus; its seed drives original-train.
    pub generator: GeneratorConfig,
    pub original_test_size: usize,
    pub original_test_seed: u64,
    /// Symmetric pairs (two instances each) in FT-train and FT-test.
    pub ft_pairs: usize,
    pub ft_train_seed: u64,
    pub ft_test_seed: u64,
    pub challenge_size: usize,
    pub challenge_train_seed: u64,
    pub challenge_test_seed: u64,
    pub seeds: Vec<u64>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub base_train: TrainConfig,
    /// Starting point for every fine-tuning configuration.
    pub finetune: FinetuneConfig,
    /// Multiplier taking the standard learning-rate grid to this model.
    pub lr_scale: f64,
    /// Candidate λ-grid multipliers, ascending.
    pub lambda_scales: Vec<f64>,
    pub min_gain_kept: f64,
    pub k_folds: usize,
    pub epochs_max: usize,
    pub ablation_sizes: Vec<usize>,
}

impl Default for AnalogConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            original_test_size: 2000,
            original_test_seed: 1,
            ft_pairs: 350,
            ft_train_seed: 2,
            ft_test_seed: 3,
            challenge_size: 1000,
            challenge_train_seed: 4,
            challenge_test_seed: 5,
            seeds: vec![1, 2, 3, 4, 5],
            embed_dim: 16,
            hidden_dim: 32,
            base_train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            lr_scale: 5.0,
            lambda_scales: (-10..=0).map(|k| 10f64.powi(k)).collect(),
            min_gain_kept: 0.9,
            k_folds: 5,
            epochs_max: 8,
            ablation_sizes: vec![25, 50, 75, 100, 250, 400, 500, 600, 700],
        }
    }
}

impl AnalogConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.base_train.validate()?;
        self.finetune.validate()?;
        if self.seeds.len() < 2 {
            return Err(Error::InvalidConfig(
                "at least 2 seeds are needed for statistics".into(),
            ));
        }
        if self.lr_scale <= 0.0 || !self.lr_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lr_scale must be > 0, got {}",
                self.lr_scale
            )));
        }
        Ok(())
    }

    fn dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_classes: 3,
        }
    }

    fn grid(&self, lambda_scale: f64) -> SweepGrid {
        SweepGrid {
            epochs_max: self.epochs_max,
            k_folds: self.k_folds,
            ..SweepGrid::scaled(self.lr_scale, lambda_scale)
        }
    }

    fn base_finetune(&self) -> FinetuneConfig {
        let mut cfg = self.finetune.clone();
        cfg.train.seed = self.seeds[0];
        cfg
    }
}

/// The symmetric task and the single-label task share the original splits.
#[derive(Debug, Clone)]
pub struct AnalogData {
    pub main: ExperimentData,
    pub challenge: ExperimentData,
}

pub fn build_data(cfg: &AnalogConfig) -> Result<AnalogData> {
    cfg.validate()?;
    let original_train = generate_biased_original(&cfg.generator)?;
    let original_test = generate_biased_original(&GeneratorConfig {
        seed: cfg.original_test_seed,
        n_instances: cfg.original_test_size,
        ..cfg.generator.clone()
    })?;
    let ft_train = generate_symmetric_counterfactual(&original_train, cfg.ft_pairs, cfg.ft_train_seed)?;
    let ft_test = generate_symmetric_counterfactual(&original_train, cfg.ft_pairs, cfg.ft_test_seed)?;
    let challenge = |seed| {
        generate_single_label_challenge(&GeneratorConfig {
            seed,
            n_instances: cfg.challenge_size,
            ..cfg.generator.clone()
        })
    };
    let main = ExperimentData {
        original_train,
        original_dev: None,
        original_test,
        ft_train,
        ft_test,
    };
    let challenge = ExperimentData {
        ft_train: challenge(cfg.challenge_train_seed)?,
        ft_test: challenge(cfg.challenge_test_seed)?,
        ..main.clone()
    };
    main.validate()?;
    challenge.validate()?;
    Ok(AnalogData { main, challenge })
}

pub fn fit_analog_bases(data: &AnalogData, cfg: &AnalogConfig) -> Result<BaseModels> {
    let dims = cfg.dims(data.main.original_train.vocab.len());
    fit_bases(&data.main, &cfg.seeds, dims, &cfg.base_train)
}

/// Outcome of the selection recipe on one fine-tuning task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub ft: FinetuneConfig,
    pub ft_l2: FinetuneConfig,
    pub ft_ewc: FinetuneConfig,
    pub l2_calibration: LambdaCalibration,
    pub ewc_calibration: LambdaCalibration,
    /// `(condition, table)` for ft, ft_l2 and ft_ewc.
    pub cv: Vec<(String, CvTable)>,
}

impl Selection {
    pub fn grid(&self, kind: RegularizerKind, cfg: &AnalogConfig) -> SweepGrid {
        match kind {
            RegularizerKind::None => SweepGrid {
                lambdas: vec![0.0],
                ..cfg.grid(1.0)
            },
            RegularizerKind::L2 => cfg.grid(self.l2_calibration.scale),
            RegularizerKind::Ewc => cfg.grid(self.ewc_calibration.scale),
        }
    }

    pub fn conditions(&self) -> Vec<Condition> {
        vec![
            Condition::original(),
            Condition::merged(),
            Condition::finetune("ft", self.ft.clone()),
            Condition::finetune("ft_l2", self.ft_l2.clone()),
            Condition::finetune("ft_ewc", self.ft_ewc.clone()),
        ]
    }
}

fn with_kind(base: &FinetuneConfig, kind: RegularizerKind) -> FinetuneConfig {
    FinetuneConfig {
        regularizer: RegularizerConfig {
            kind,
            lambda: 0.0,
            ..base.regularizer
        },
        ..base.clone()
    }
}

pub fn select_hyperparameters(data: &ExperimentData, bases: &BaseModels, cfg: &AnalogConfig) -> Result<Selection> {
    let base = bases
        .get(cfg.seeds[0])
        .ok_or_else(|| Error::InvalidConfig("no base model for the selection seed".into()))?;
    let start = cfg.base_finetune();
    let plain = with_kind(&start, RegularizerKind::None);
    let ft_grid = SweepGrid {
        lambdas: vec![0.0],
        ..cfg.grid(1.0)
    };
    let (ft, ft_table) = grid_search_cv(base, &data.ft_train, &data.original_train, &ft_grid, &plain)?;
    let calibrate = |kind| {
        calibrate_lambda_scale(
            base,
            &data.ft_train,
            &data.original_train,
            &with_kind(&ft, kind),
            &cfg.lambda_scales,
            cfg.k_folds,
            cfg.min_gain_kept,
        )
    };
    let l2_calibration = calibrate(RegularizerKind::L2)?;
    let ewc_calibration = calibrate(RegularizerKind::Ewc)?;
    let (ft_l2, l2_table) = grid_search_cv(
        base,
        &data.ft_train,
        &data.original_train,
        &cfg.grid(l2_calibration.scale),
        &with_kind(&start, RegularizerKind::L2),
    )?;
    let (ft_ewc, ewc_table) = grid_search_cv(
        base,
        &data.ft_train,
        &data.original_train,
        &cfg.grid(ewc_calibration.scale),
        &with_kind(&start, RegularizerKind::Ewc),
    )?;
    Ok(Selection {
        ft,
        ft_l2,
        ft_ewc,
        l2_calibration,
        ewc_calibration,
        cv: vec![
            ("ft".into(), ft_table),
            ("ft_l2".into(), l2_table),
            ("ft_ewc".into(), ewc_table),
        ],
    })
}

/// Original, merged, FT, FT+L2 and FT+EWC on every seed.
pub fn forgetting_table(data: &ExperimentData, bases: &BaseModels, selection: &Selection) -> Result<Vec<RunResult>> {
    run_conditions(data, bases, &selection.conditions())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoSweep {
    /// One point per (lr, λ) setting, at its cross-validated epoch count.
    pub ft_points: Vec<SweepPoint>,
    pub l2_points: Vec<SweepPoint>,
    pub ewc_points: Vec<SweepPoint>,
    pub ft_frontier: Vec<ParetoPoint>,
    pub l2_frontier: Vec<ParetoPoint>,
    pub ewc_frontier: Vec<ParetoPoint>,
    pub ewc_dominates_ft: bool,
    pub l2_dominates_ft: bool,
}

pub fn to_pareto_points(name: &str, points: &[SweepPoint]) -> Vec<ParetoPoint> {
    points
        .iter()
        .map(|p| {
            ParetoPoint::new(
                p.original_acc,
                p.ft_acc,
                format!("{name} lr={} lambda={} epochs={}", p.learning_rate, p.lambda, p.epochs),
            )
        })
        .collect()
}

/// Every (lr, λ) setting of each condition's grid, trained for the epoch
/// count its cross-validation chose and evaluated on the test sets (means
/// over seeds), with the resulting frontiers.
pub fn pareto_sweep(
    data: &ExperimentData,
    bases: &BaseModels,
    selection: &Selection,
    cfg: &AnalogConfig,
) -> Result<ParetoSweep> {
    let start = cfg.base_finetune();
    let sweep = |kind, name: &str| -> Result<Vec<SweepPoint>> {
        let all = hyperparameter_sweep(data, bases, &selection.grid(kind, cfg), &with_kind(&start, kind))?;
        let (_, table) = selection
            .cv
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidConfig(format!("selection has no CV table for {name}")))?;
        cv_selected_points(&all, table)
    };
    let ft_points = sweep(RegularizerKind::None, "ft")?;
    let l2_points = sweep(RegularizerKind::L2, "ft_l2")?;
    let ewc_points = sweep(RegularizerKind::Ewc, "ft_ewc")?;
    let ft_frontier = pareto_frontier(&to_pareto_points("ft", &ft_points))?;
    let l2_frontier = pareto_frontier(&to_pareto_points("ft_l2", &l2_points))?;
    let ewc_frontier = pareto_frontier(&to_pareto_points("ft_ewc", &ewc_points))?;
    Ok(ParetoSweep {
        ewc_dominates_ft: frontier_dominates(&ewc_frontier, &ft_frontier)?,
        l2_dominates_ft: frontier_dominates(&l2_frontier, &ft_frontier)?,
        ft_points,
        l2_points,
        ewc_points,
        ft_frontier,
        l2_frontier,
        ewc_frontier,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelShift {
    pub ft: FinetuneConfig,
    pub ewc: FinetuneConfig,
    pub calibration: LambdaCalibration,
    pub cv: CvTable,
    /// original, ft, ft_ewc.
    pub results: Vec<RunResult>,
}

/// Fine-tuning on a single-label set. FT reuses the learning rate selected
/// on the symmetric task and runs the full epoch budget (every setting fits
/// a single-label set perfectly, so cross-validation cannot pick epochs).
/// FT+EWC keeps those and takes λ from cross-validation on the challenge,
/// after calibrating the λ grid there.
pub fn label_shift(
    challenge: &ExperimentData,
    bases: &BaseModels,
    selection: &Selection,
    cfg: &AnalogConfig,
) -> Result<LabelShift> {
    let base = bases
        .get(cfg.seeds[0])
        .ok_or_else(|| Error::InvalidConfig("no base model for the selection seed".into()))?;
    let mut ft = with_kind(&cfg.base_finetune(), RegularizerKind::None);
    ft.train.learning_rate = selection.ft.train.learning_rate;
    ft.train.epochs = cfg.epochs_max;
    let ewc_start = with_kind(&ft, RegularizerKind::Ewc);
    let calibration = calibrate_lambda_scale(
        base,
        &challenge.ft_train,
        &challenge.original_train,
        &ewc_start,
        &cfg.lambda_scales,
        cfg.k_folds,
        cfg.min_gain_kept,
    )?;
    let grid = SweepGrid {
        learning_rates: vec![ft.train.learning_rate],
        ..cfg.grid(calibration.scale)
    };
    let (_, cv) = grid_search_cv(base, &challenge.ft_train, &challenge.original_train, &grid, &ewc_start)?;
    let lambda = cv
        .best_where(|r| r.epochs == cfg.epochs_max)
        .map(|r| r.lambda)
        .expect("grid has full-length rows");
    let mut ewc = ewc_start;
    ewc.regularizer.lambda = lambda;
    let results = run_conditions(
        challenge,
        bases,
        &[
            Condition::original(),
            Condition::finetune("ft", ft.clone()),
            Condition::finetune("ft_ewc", ewc.clone()),
        ],
    )?;
    Ok(LabelShift {
        ft,
        ewc,
        calibration,
        cv,
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProbe {
    /// Per seed: claim-only accuracy on the biased original test.
    pub original_test: Vec<f64>,
    /// Per seed: claim-only accuracy on the symmetric FT-test.
    pub ft_test: Vec<f64>,
    /// Per seed: the full pair model on the same two sets.
    pub pair_original_test: Vec<f64>,
    pub pair_ft_test: Vec<f64>,
}

/// Trains a claim-only classifier per seed and scores it next to the pair
/// models.
pub fn bias_probe(data: &ExperimentData, bases: &BaseModels, cfg: &AnalogConfig) -> Result<BiasProbe> {
    use rayon::prelude::*;
    let dims = cfg.dims(data.original_train.vocab.len());
    let claim_only: Vec<Classifier> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut m = Classifier::claim_only(dims, Init::Random { seed })?;
            train(
                &mut m,
                &data.original_train,
                None,
                &TrainConfig {
                    seed,
                    ..cfg.base_train.clone()
                },
                &[],
            )?;
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let score =
        |models: &[&Classifier], ds: &Dataset| -> Result<Vec<f64>> { models.iter().map(|m| accuracy(m, ds)).collect() };
    let co: Vec<&Classifier> = claim_only.iter().collect();
    let pair: Vec<&Classifier> = bases.models.iter().map(|(_, m)| m).collect();
    Ok(BiasProbe {
        original_test: score(&co, &data.original_test)?,
        ft_test: score(&co, &data.ft_test)?,
        pair_original_test: score(&pair, &data.original_test)?,
        pair_ft_test: score(&pair, &data.ft_test)?,
    })
}

/// Nested FT-train subsamples for original, FT, FT+L2 and FT+EWC.
pub fn data_ablation(
    data: &ExperimentData,
    bases: &BaseModels,
    selection: &Selection,
    cfg: &AnalogConfig,
) -> Result<Vec<AblationResult>> {
    let conditions: Vec<Condition> = selection
        .conditions()
        .into_iter()
        .filter(|c| c.name != "merged")
        .collect();
    ablation_sweep(data, bases, &cfg.ablation_sizes, &conditions)
}
