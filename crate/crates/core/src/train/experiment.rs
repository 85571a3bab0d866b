use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{finetune, train, FinetuneConfig, History, Monitor, TrainConfig};
use crate::continual::{RegularizerConfig, RegularizerKind};
use crate::data::{kfold, merge, Dataset};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{BiasModelConfig, Classifier, Init, ModelDims};

/// λ grid used for the large pretrained models; rescale before use.
pub const STANDARD_LAMBDAS: [f64; 10] = [1e6, 2e6, 4e6, 8e6, 1e7, 2e7, 4e7, 6e7, 8e7, 1e8];

/// FT-train sizes for the data ablation.
pub const STANDARD_ABLATION_SIZES: [usize; 12] = [25, 50, 75, 100, 250, 400, 500, 600, 700, 800, 900, 1000];

/// Short content hash of any serializable configuration.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(content_hash(&serde_json::to_vec(value)?))
}

/// Short SHA-256 of raw bytes, in the same form as [`config_hash`].
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// The four splits every experiment reads.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub original_train: Dataset,
    /// Held-out original data for early stopping of base training.
    pub original_dev: Option<Dataset>,
    pub original_test: Dataset,
    pub ft_train: Dataset,
    pub ft_test: Dataset,
}

impl ExperimentData {
    pub fn validate(&self) -> Result<()> {
        let parts = [
            ("original_train", Some(&self.original_train)),
            ("original_dev", self.original_dev.as_ref()),
            ("original_test", Some(&self.original_test)),
            ("ft_train", Some(&self.ft_train)),
            ("ft_test", Some(&self.ft_test)),
        ];
        for (name, ds) in parts {
            let Some(ds) = ds else { continue };
            ds.validate()?;
            if ds.is_empty() {
                return Err(Error::InvalidConfig(format!("{name} is empty")));
            }
            if ds.vocab != self.original_train.vocab || ds.num_classes != self.original_train.num_classes {
                return Err(Error::VocabMismatch(format!(
                    "{name} does not share the original vocabulary"
                )));
            }
        }
        Ok(())
    }

    fn monitors(&self) -> [Monitor<'_>; 2] {
        [
            Monitor {
                name: "original_test",
                data: &self.original_test,
            },
            Monitor {
                name: "ft_test",
                data: &self.ft_test,
            },
        ]
    }

    fn with_ft_train(&self, ft_train: Dataset) -> Self {
        Self {
            ft_train,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConditionKind {
    /// The base model, untouched.
    Original,
    /// A fresh model trained once on original-train ∪ FT-train.
    Merged,
    /// The base model fine-tuned on FT-train.
    Finetune { config: FinetuneConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    #[serde(flatten)]
    pub kind: ConditionKind,
}

impl Condition {
    pub fn original() -> Self {
        Self {
            name: "original".into(),
            kind: ConditionKind::Original,
        }
    }

    pub fn merged() -> Self {
        Self {
            name: "merged".into(),
            kind: ConditionKind::Merged,
        }
    }

    pub fn finetune(name: impl Into<String>, config: FinetuneConfig) -> Self {
        Self {
            name: name.into(),
            kind: ConditionKind::Finetune { config },
        }
    }

    /// Plain fine-tuning with `base`'s optimizer settings.
    pub fn ft(base: &FinetuneConfig) -> Self {
        Self::finetune(
            "ft",
            with_parts(base, RegularizerConfig::none(), BiasModelConfig::default()),
        )
    }

    pub fn ft_l2(base: &FinetuneConfig, lambda: f64) -> Self {
        Self::finetune(
            "ft_l2",
            with_parts(base, RegularizerConfig::l2(lambda), BiasModelConfig::default()),
        )
    }

    pub fn ft_ewc(base: &FinetuneConfig, lambda: f64) -> Self {
        let reg = RegularizerConfig {
            lambda,
            kind: RegularizerKind::Ewc,
            ..base.regularizer
        };
        Self::finetune("ft_ewc", with_parts(base, reg, BiasModelConfig::default()))
    }

    /// Fine-tuning with a bias model and an optional regularizer; named
    /// `poe`, `dfl`, `poe_ewc`, ...
    pub fn debiased(base: &FinetuneConfig, bias: BiasModelConfig, reg: RegularizerConfig) -> Self {
        let mode = format!("{:?}", bias.mode).to_lowercase();
        let name = match reg.kind {
            RegularizerKind::None => mode,
            k => format!("{mode}_{}", format!("{k:?}").to_lowercase()),
        };
        Self::finetune(name, with_parts(base, reg, bias))
    }

    pub fn finetune_config(&self) -> Option<&FinetuneConfig> {
        match &self.kind {
            ConditionKind::Finetune { config } => Some(config),
            _ => None,
        }
    }
}

fn with_parts(base: &FinetuneConfig, regularizer: RegularizerConfig, bias: BiasModelConfig) -> FinetuneConfig {
    FinetuneConfig {
        regularizer,
        bias,
        ..base.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochAccuracy {
    pub epoch: usize,
    pub original_test_acc: f64,
    pub ft_test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub original_test_acc: f64,
    pub ft_test_acc: f64,
    pub history: Vec<EpochAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub condition: String,
    pub config_hash: String,
    pub config: Condition,
    pub seeds: Vec<SeedResult>,
}

impl RunResult {
    pub fn original_accs(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.original_test_acc).collect()
    }

    pub fn ft_accs(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.ft_test_acc).collect()
    }
}

/// One base model per seed, trained on the original task.
#[derive(Debug, Clone)]
pub struct BaseModels {
    pub dims: ModelDims,
    pub train: TrainConfig,
    pub models: Vec<(u64, Classifier)>,
    pub histories: Vec<History>,
}

impl BaseModels {
    pub fn seeds(&self) -> Vec<u64> {
        self.models.iter().map(|(s, _)| *s).collect()
    }

    pub fn get(&self, seed: u64) -> Option<&Classifier> {
        self.models.iter().find(|(s, _)| *s == seed).map(|(_, m)| m)
    }
}

fn train_fresh(
    dims: ModelDims,
    data: &Dataset,
    dev: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
    monitors: &[Monitor],
) -> Result<(Classifier, History)> {
    let mut model = Classifier::pair(dims, Init::Random { seed })?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let history = train(&mut model, data, dev, &cfg, monitors)?;
    Ok((model, history))
}

/// Trains a base model per seed (initialization and shuffling both follow
/// the seed).
pub fn fit_bases(data: &ExperimentData, seeds: &[u64], dims: ModelDims, cfg: &TrainConfig) -> Result<BaseModels> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("no seeds".into()));
    }
    data.validate()?;
    let fitted: Vec<(Classifier, History)> = seeds
        .par_iter()
        .map(|&seed| train_fresh(dims, &data.original_train, data.original_dev.as_ref(), cfg, seed, &[]))
        .collect::<Result<_>>()?;
    let (models, histories): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    Ok(BaseModels {
        dims,
        train: cfg.clone(),
        models: seeds.iter().copied().zip(models).collect(),
        histories,
    })
}

fn epoch_accuracies(h: &History) -> Vec<EpochAccuracy> {
    h.epochs
        .iter()
        .map(|e| {
            let get = |n: &str| e.monitors.iter().find(|(k, _)| k == n).map_or(f64::NAN, |(_, v)| *v);
            EpochAccuracy {
                epoch: e.epoch,
                original_test_acc: get("original_test"),
                ft_test_acc: get("ft_test"),
            }
        })
        .collect()
}

/// Runs `condition` for one seed and returns the evaluated model.
fn run_one(
    data: &ExperimentData,
    bases: &BaseModels,
    condition: &Condition,
    seed: u64,
) -> Result<(SeedResult, Classifier)> {
    let base = bases
        .get(seed)
        .ok_or_else(|| Error::InvalidConfig(format!("no base model for seed {seed}")))?;
    let monitors = data.monitors();
    let (model, history) = match &condition.kind {
        ConditionKind::Original => (base.clone(), vec![]),
        ConditionKind::Merged => {
            let merged = merge(&data.original_train, &data.ft_train)?;
            let (m, h) = train_fresh(
                bases.dims,
                &merged,
                data.original_dev.as_ref(),
                &bases.train,
                seed,
                &monitors,
            )?;
            (m, epoch_accuracies(&h))
        }
        ConditionKind::Finetune { config } => {
            let mut m = base.clone();
            let mut cfg = config.clone();
            cfg.train.seed = seed;
            let h = finetune(&mut m, &data.ft_train, &data.original_train, &cfg, &monitors)?;
            (m, epoch_accuracies(&h))
        }
    };
    let result = SeedResult {
        seed,
        original_test_acc: accuracy(&model, &data.original_test)?,
        ft_test_acc: accuracy(&model, &data.ft_test)?,
        history,
    };
    Ok((result, model))
}

/// Runs one condition on one seed's base model.
pub fn run_single(data: &ExperimentData, bases: &BaseModels, condition: &Condition, seed: u64) -> Result<SeedResult> {
    run_one(data, bases, condition, seed).map(|(r, _)| r)
}

/// Hash identifying a condition together with the base models it starts from.
pub fn condition_hash(condition: &Condition, bases: &BaseModels) -> Result<String> {
    config_hash(&(condition, &bases.dims, &bases.train))
}

/// Every condition on every seed's base model; results are in condition
/// order with seeds in base-model order.
pub fn run_conditions(data: &ExperimentData, bases: &BaseModels, conditions: &[Condition]) -> Result<Vec<RunResult>> {
    if bases.models.len() < 2 {
        return Err(Error::InvalidConfig(
            "at least 2 seeds are needed for statistics".into(),
        ));
    }
    data.validate()?;
    let seeds = bases.seeds();
    let jobs: Vec<(usize, u64)> = (0..conditions.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let mut done: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(c, s)| run_one(data, bases, &conditions[c], s).map(|(r, _)| r))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(conditions.len());
    for c in conditions.iter().rev() {
        let seeds = done.split_off(done.len() - seeds.len());
        out.push(RunResult {
            condition: c.name.clone(),
            config_hash: condition_hash(c, bases)?,
            config: c.clone(),
            seeds,
        });
    }
    out.reverse();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub size: usize,
    pub results: Vec<RunResult>,
}

/// Fine-tunes on nested subsamples of FT-train. Each seed fixes one
/// permutation; size `s` uses its first `s` entries (kept in the original
/// order), so smaller subsets are contained in larger ones.
pub fn ablation_sweep(
    data: &ExperimentData,
    bases: &BaseModels,
    sizes: &[usize],
    conditions: &[Condition],
) -> Result<Vec<AblationResult>> {
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("no ablation sizes".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("ablation sizes must be strictly ascending".into()));
    }
    let n = data.ft_train.len();
    if let Some(&s) = sizes.iter().find(|&&s| s > n || s == 0) {
        return Err(Error::InvalidConfig(format!(
            "ablation size {s} outside 1..={n} (FT-train size)"
        )));
    }
    if bases.models.len() < 2 {
        return Err(Error::InvalidConfig(
            "at least 2 seeds are needed for statistics".into(),
        ));
    }
    let seeds = bases.seeds();
    let perms: Vec<Vec<usize>> = seeds
        .iter()
        .map(|&s| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(s ^ 0xa076_1d64_78bd_642f));
            p
        })
        .collect();
    let mut jobs = vec![];
    for (si, _) in sizes.iter().enumerate() {
        for ci in 0..conditions.len() {
            for k in 0..seeds.len() {
                jobs.push((si, ci, k));
            }
        }
    }
    let done: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(si, ci, k)| {
            let mut idx = perms[k][..sizes[si]].to_vec();
            idx.sort_unstable();
            let sub = data.with_ft_train(data.ft_train.subset(&idx));
            run_one(&sub, bases, &conditions[ci], seeds[k]).map(|(r, _)| r)
        })
        .collect::<Result<_>>()?;
    let mut it = done.into_iter();
    let mut out = vec![];
    for &size in sizes {
        let mut results = vec![];
        for c in conditions {
            results.push(RunResult {
                condition: c.name.clone(),
                config_hash: condition_hash(c, bases)?,
                config: c.clone(),
                seeds: it.by_ref().take(seeds.len()).collect(),
            });
        }
        out.push(AblationResult { size, results });
    }
    Ok(out)
}

// Keeps products like 6e-4 * 5 from printing as 0.0029999999999999996.
fn round12(v: f64) -> f64 {
    format!("{v:.11e}").parse().expect("formatted float")
}

/// Hyperparameter grid for cross-validation and sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub learning_rates: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub epochs_max: usize,
    pub k_folds: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self::scaled(1.0, 1.0)
    }
}

impl SweepGrid {
    /// The standard grids, with learning rates and λ multiplied by the
    /// given factors.
    pub fn scaled(lr_scale: f64, lambda_scale: f64) -> Self {
        Self {
            learning_rates: [2e-4, 4e-4, 6e-4].iter().map(|v| round12(v * lr_scale)).collect(),
            lambdas: STANDARD_LAMBDAS.iter().map(|v| round12(v * lambda_scale)).collect(),
            epochs_max: 8,
            k_folds: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.lambdas.is_empty() {
            return Err(Error::InvalidConfig("sweep grid lists must be non-empty".into()));
        }
        if self.epochs_max == 0 {
            return Err(Error::InvalidConfig("epochs_max must be >= 1".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::InvalidConfig("k_folds must be >= 2".into()));
        }
        Ok(())
    }

    /// `(lr, λ)` pairs, learning rate outermost.
    pub fn configs(&self) -> Vec<(f64, f64)> {
        self.learning_rates
            .iter()
            .flat_map(|&lr| self.lambdas.iter().map(move |&l| (lr, l)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub learning_rate: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub fold_accs: Vec<f64>,
    pub mean_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub rows: Vec<CvRow>,
    pub best: usize,
}

impl CvTable {
    /// Best row among those accepted by `keep`, by the same rule as the
    /// overall selection.
    pub fn best_where(&self, keep: impl Fn(&CvRow) -> bool) -> Option<&CvRow> {
        best_row(&self.rows, keep).map(|i| &self.rows[i])
    }
}

/// Highest mean accuracy; ties go to the smaller λ, then the smaller
/// learning rate, then fewer epochs.
fn best_row(rows: &[CvRow], keep: impl Fn(&CvRow) -> bool) -> Option<usize> {
    let key = |r: &CvRow| (r.lambda, r.learning_rate, r.epochs);
    (0..rows.len()).filter(|&i| keep(&rows[i])).reduce(|b, i| {
        let (rb, ri) = (&rows[b], &rows[i]);
        let better = ri.mean_acc > rb.mean_acc
            || (ri.mean_acc == rb.mean_acc && key(ri).partial_cmp(&key(rb)) == Some(std::cmp::Ordering::Less));
        if better {
            i
        } else {
            b
        }
    })
}

fn config_at(base: &FinetuneConfig, lr: f64, lambda: f64, epochs: usize) -> FinetuneConfig {
    let mut cfg = base.clone();
    cfg.train.learning_rate = lr;
    cfg.train.epochs = epochs;
    cfg.regularizer.lambda = lambda;
    cfg
}

/// k-fold cross-validation of (lr, λ, epochs) on FT-train, starting every
/// fold from `base`. Every epoch count up to `epochs_max` is scored from
/// the same run. The best mean validation accuracy wins; ties go to the
/// smaller λ, then the smaller learning rate, then fewer epochs.
pub fn grid_search_cv(
    base: &Classifier,
    ft_train: &Dataset,
    original: &Dataset,
    grid: &SweepGrid,
    base_cfg: &FinetuneConfig,
) -> Result<(FinetuneConfig, CvTable)> {
    grid.validate()?;
    base_cfg.validate()?;
    let folds = kfold(ft_train, grid.k_folds, base_cfg.train.seed)?;
    let configs = grid.configs();
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..folds.len()).map(move |f| (c, f)))
        .collect();
    let curves: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let (lr, lambda) = configs[c];
            let (train_fold, val_fold) = &folds[f];
            let mut m = base.clone();
            let cfg = config_at(base_cfg, lr, lambda, grid.epochs_max);
            let mon = [Monitor {
                name: "validation",
                data: val_fold,
            }];
            let h = finetune(&mut m, train_fold, original, &cfg, &mon)?;
            Ok(h.epochs.iter().map(|e| e.monitors[0].1).collect())
        })
        .collect::<Result<_>>()?;
    let mut rows = vec![];
    for (c, &(lr, lambda)) in configs.iter().enumerate() {
        for e in 0..grid.epochs_max {
            let fold_accs: Vec<f64> = (0..folds.len()).map(|f| curves[c * folds.len() + f][e]).collect();
            let mean_acc = fold_accs.iter().sum::<f64>() / fold_accs.len() as f64;
            rows.push(CvRow {
                learning_rate: lr,
                lambda,
                epochs: e + 1,
                fold_accs,
                mean_acc,
            });
        }
    }
    let best = best_row(&rows, |_| true).expect("non-empty grid");
    let r = &rows[best];
    let chosen = config_at(base_cfg, r.learning_rate, r.lambda, r.epochs);
    Ok((chosen, CvTable { rows, best }))
}

/// One hyperparameter setting evaluated on the test sets, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub learning_rate: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub original_acc: f64,
    pub ft_acc: f64,
    pub per_seed: Vec<(f64, f64)>,
}

/// Fine-tunes every (lr, λ) of `grid` on the full FT-train for each base
/// model and records test accuracies after every epoch up to `epochs_max`.
pub fn hyperparameter_sweep(
    data: &ExperimentData,
    bases: &BaseModels,
    grid: &SweepGrid,
    base_cfg: &FinetuneConfig,
) -> Result<Vec<SweepPoint>> {
    grid.validate()?;
    data.validate()?;
    let configs = grid.configs();
    let seeds = bases.seeds();
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let runs: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let (lr, lambda) = configs[c];
            let cond = Condition::finetune("sweep", config_at(base_cfg, lr, lambda, grid.epochs_max));
            run_one(data, bases, &cond, s).map(|(r, _)| r)
        })
        .collect::<Result<_>>()?;
    let mut points = vec![];
    for (c, &(lr, lambda)) in configs.iter().enumerate() {
        let runs = &runs[c * seeds.len()..(c + 1) * seeds.len()];
        for e in 0..grid.epochs_max {
            let per_seed: Vec<(f64, f64)> = runs
                .iter()
                .map(|r| (r.history[e].original_test_acc, r.history[e].ft_test_acc))
                .collect();
            let k = per_seed.len() as f64;
            points.push(SweepPoint {
                learning_rate: lr,
                lambda,
                epochs: e + 1,
                original_acc: per_seed.iter().map(|p| p.0).sum::<f64>() / k,
                ft_acc: per_seed.iter().map(|p| p.1).sum::<f64>() / k,
                per_seed,
            });
        }
    }
    Ok(points)
}

/// One point per (lr, λ) of `table`'s grid: the sweep point at the epoch
/// count cross-validation chose for that setting.
pub fn cv_selected_points(points: &[SweepPoint], table: &CvTable) -> Result<Vec<SweepPoint>> {
    let mut out: Vec<SweepPoint> = vec![];
    for p in points {
        if out
            .iter()
            .any(|q| q.learning_rate == p.learning_rate && q.lambda == p.lambda)
        {
            continue;
        }
        let row = table
            .best_where(|r| r.learning_rate == p.learning_rate && r.lambda == p.lambda)
            .ok_or_else(|| {
                Error::InvalidConfig(format!("no CV rows for lr={} lambda={}", p.learning_rate, p.lambda))
            })?;
        let chosen = points
            .iter()
            .find(|q| q.learning_rate == p.learning_rate && q.lambda == p.lambda && q.epochs == row.epochs)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "sweep has no point for lr={} lambda={} epochs={}",
                    p.learning_rate, p.lambda, row.epochs
                ))
            })?;
        out.push(chosen.clone());
    }
    Ok(out)
}

/// Outcome of [`calibrate_lambda_scale`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCalibration {
    pub kind: RegularizerKind,
    /// Chosen multiplier for [`STANDARD_LAMBDAS`].
    pub scale: f64,
    /// Validation accuracy of the untouched model and of unregularized
    /// fine-tuning, averaged over folds.
    pub base_acc: f64,
    pub ft_acc: f64,
    /// `(scale, fraction of the fine-tuning gain kept at the smallest λ)`.
    pub tried: Vec<(f64, f64)>,
}

/// Finds the multiplier that maps the standard λ grid onto this model.
///
/// Scales are tried in ascending order. For each, the smallest grid value
/// is fine-tuned with `base_cfg` on every cross-validation fold of FT-train
/// and compared with unregularized fine-tuning. The chosen scale is the
/// largest one at which that λ still keeps at least `min_gain_kept` of the
/// validation-accuracy gain, so the grid starts at barely-regularized
/// fine-tuning and reaches two orders of magnitude stronger.
pub fn calibrate_lambda_scale(
    base: &Classifier,
    ft_train: &Dataset,
    original: &Dataset,
    base_cfg: &FinetuneConfig,
    scales: &[f64],
    k_folds: usize,
    min_gain_kept: f64,
) -> Result<LambdaCalibration> {
    if base_cfg.regularizer.kind == RegularizerKind::None {
        return Err(Error::InvalidConfig("calibration needs a regularizer kind".into()));
    }
    if scales.is_empty() || scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "calibration scales must be non-empty and ascending".into(),
        ));
    }
    let folds = kfold(ft_train, k_folds, base_cfg.train.seed)?;
    let fold_acc = |cfg: Option<&FinetuneConfig>| -> Result<f64> {
        let accs: Vec<f64> = folds
            .par_iter()
            .map(|(tr, va)| {
                let mut m = base.clone();
                if let Some(cfg) = cfg {
                    finetune(&mut m, tr, original, cfg, &[])?;
                }
                accuracy(&m, va)
            })
            .collect::<Result<_>>()?;
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    };
    let base_acc = fold_acc(None)?;
    let mut plain = base_cfg.clone();
    plain.regularizer = RegularizerConfig::none();
    let ft_acc = fold_acc(Some(&plain))?;
    if ft_acc <= base_acc {
        return Err(Error::InvalidConfig(format!(
            "fine-tuning does not improve validation accuracy ({ft_acc} <= {base_acc}); nothing to calibrate against"
        )));
    }
    let bottom = STANDARD_LAMBDAS.iter().copied().fold(f64::MAX, f64::min);
    let mut tried: Vec<(f64, f64)> = vec![];
    for &scale in scales {
        let mut cfg = base_cfg.clone();
        cfg.regularizer.lambda = bottom * scale;
        let kept = (fold_acc(Some(&cfg))? - base_acc) / (ft_acc - base_acc);
        tried.push((scale, kept));
        if kept < min_gain_kept {
            break;
        }
    }
    let chosen = tried
        .iter()
        .take_while(|(_, kept)| *kept >= min_gain_kept)
        .last()
        .map(|(s, _)| *s);
    match chosen {
        Some(scale) => Ok(LambdaCalibration {
            kind: base_cfg.regularizer.kind,
            scale,
            base_acc,
            ft_acc,
            tried,
        }),
        None => Err(Error::InvalidConfig(format!(
            "even the smallest scale {} regularizes too strongly",
            scales[0]
        ))),
    }
}
