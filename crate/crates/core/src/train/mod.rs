//! Training loops: base training, regularized fine-tuning, and the
//! experiment drivers built on them.

mod experiment;
mod optim;

pub use experiment::{
    ablation_sweep, calibrate_lambda_scale, condition_hash, config_hash, content_hash, cv_selected_points, fit_bases,
    grid_search_cv, hyperparameter_sweep, run_conditions, run_single, AblationResult, BaseModels, Condition,
    ConditionKind, CvRow, CvTable, EpochAccuracy, ExperimentData, LambdaCalibration, RunResult, SeedResult, SweepGrid,
    SweepPoint, STANDARD_ABLATION_SIZES, STANDARD_LAMBDAS,
};
pub use optim::{Optimizer, OptimizerState};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::continual::{
    estimate_fisher_diagonal, record_elastic_penalty, regularized_loss, FisherDiagonal, ParameterSnapshot,
    RegularizerConfig, RegularizerKind,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{BiasModelConfig, Classifier, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds mini-batch shuffling (and Fisher sampling when fine-tuning).
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Rescale the full gradient to this L2 norm when it is larger.
    pub gradient_norm_clip: Option<f64>,
    /// Stop after this many epochs without a new best held-out accuracy and
    /// restore the best parameters.
    pub early_stopping_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 8,
            batch_size: 64,
            seed: 0,
            optimizer: Optimizer::adam(),
            gradient_norm_clip: Some(10.0),
            early_stopping_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.gradient_norm_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidConfig(format!("gradient_norm_clip must be > 0, got {c}")));
            }
        }
        if self.early_stopping_patience == Some(0) {
            return Err(Error::InvalidConfig("early_stopping_patience must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub regularizer: RegularizerConfig,
    pub bias: BiasModelConfig,
    /// Use at most this many FT-train instances (a seeded subsample).
    pub ft_train_size: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            regularizer: RegularizerConfig::default(),
            bias: BiasModelConfig::default(),
            ft_train_size: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.regularizer.validate()?;
        self.bias.validate()?;
        if self.ft_train_size == Some(0) {
            return Err(Error::InvalidConfig("ft_train_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A dataset evaluated after every epoch.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub name: &'a str,
    pub data: &'a Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean regularization term over the epoch's batches (0 without one).
    pub mean_penalty: f64,
    pub fisher_recomputed: bool,
    /// Mean Fisher entry in use during the epoch.
    pub fisher_mean: Option<f64>,
    pub validation_acc: Option<f64>,
    pub monitors: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Epoch whose parameters were kept (the last one unless early stopping
    /// restored an earlier best).
    pub best_epoch: usize,
}

struct Penalty<'a> {
    snapshot: &'a ParameterSnapshot,
    fisher: &'a FisherDiagonal,
    lambda: f64,
}

/// Runs one epoch of mini-batch steps; returns (mean loss, mean penalty).
fn run_epoch(
    model: &mut Classifier,
    data: &Dataset,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    penalty: Option<&Penalty>,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let (mut loss_sum, mut pen_sum, mut batches) = (0.0, 0.0, 0usize);
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<_> = chunk.iter().map(|&i| &data.instances[i]).collect();
        let mut g = Graph::new();
        let vars = model.params().bind(&mut g);
        let task = model.record_training_loss(&mut g, &vars, &batch)?;
        let (loss, pen_value) = match penalty {
            Some(p) => {
                let n = p.snapshot.params().len();
                let pen = record_elastic_penalty(&mut g, &vars[..n], p.snapshot, p.fisher, p.lambda)?;
                let v = g.scalar(pen)?;
                (regularized_loss(&mut g, task, pen)?, v)
            }
            None => (task, 0.0),
        };
        let value = g.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                batch: b + 1,
                loss: value,
            });
        }
        let grads = g.backward(loss)?;
        let mut flat: Vec<Vec<f64>> = vars
            .iter()
            .zip(model.params().iter())
            .map(|(v, (_, t))| grads.get_or_zeros(*v, t.numel()))
            .collect();
        if let Some(clip) = cfg.gradient_norm_clip {
            let norm = flat.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                flat.iter_mut().flatten().for_each(|x| *x *= s);
            }
        }
        state.step(model.params_mut(), &flat, cfg.learning_rate)?;
        if !model.params().is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                batch: b + 1,
                loss: f64::NAN,
            });
        }
        loss_sum += value;
        pen_sum += pen_value;
        batches += 1;
    }
    Ok((loss_sum / batches as f64, pen_sum / batches as f64))
}

fn evaluate_monitors(model: &Classifier, monitors: &[Monitor]) -> Result<Vec<(String, f64)>> {
    monitors
        .iter()
        .map(|m| Ok((m.name.to_string(), accuracy(model, m.data)?)))
        .collect()
}

fn describe_accs(rec: Option<&EpochRecord>) -> String {
    let Some(rec) = rec else { return String::new() };
    let mut out = String::new();
    if let Some(v) = rec.validation_acc {
        out += &format!(", validation acc {v:.4}");
    }
    for (name, v) in &rec.monitors {
        out += &format!(", {name} acc {v:.4}");
    }
    out
}

/// Trains `model` on `data`. With `early_stopping_patience` set, `validation`
/// is required and the best-scoring parameters are kept.
pub fn train(
    model: &mut Classifier,
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
    monitors: &[Monitor],
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training data"));
    }
    if cfg.early_stopping_patience.is_some() && validation.is_none() {
        return Err(Error::InvalidConfig("early stopping needs a validation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(cfg.optimizer, model.params());
    let mut history = History::default();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    for epoch in 0..cfg.epochs {
        let (mean_loss, _) = run_epoch(model, data, cfg, &mut state, &mut rng, epoch, None)?;
        let validation_acc = validation.map(|v| accuracy(model, v)).transpose()?;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            mean_penalty: 0.0,
            fisher_recomputed: false,
            fisher_mean: None,
            validation_acc,
            monitors: evaluate_monitors(model, monitors)?,
        });
        info!(
            "epoch {}: loss {:.4}{}",
            epoch + 1,
            mean_loss,
            describe_accs(history.epochs.last())
        );
        history.best_epoch = epoch + 1;
        if let (Some(patience), Some(acc)) = (cfg.early_stopping_patience, validation_acc) {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch + 1, model.params().clone()));
            } else if epoch + 1 - best.as_ref().map_or(0, |b| b.1) >= patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, epoch, params)) = best {
        *model.params_mut() = params;
        history.best_epoch = epoch;
    }
    Ok(history)
}

/// Seeded subsample of at most `cap` instances (the whole set when `None`).
pub fn cap_dataset(data: &Dataset, cap: Option<usize>, seed: u64) -> Dataset {
    match cap {
        Some(n) if n < data.len() => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(n);
            idx.sort_unstable();
            data.subset(&idx)
        }
        _ => data.clone(),
    }
}

fn fisher_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64 + 1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Regularization state at the end of fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneState {
    /// Main-model parameters on entry.
    pub anchor: ParameterSnapshot,
    /// Weights of the last epoch's penalty (`None` without a regularizer).
    pub fisher: Option<FisherDiagonal>,
}

/// Fine-tunes `model` on `ft_train`, penalizing movement away from the
/// parameters it had on entry. EWC Fisher estimates are drawn from
/// `original`. When the configured bias mode needs a claim-only expert and
/// the model has none, one is attached first; the expert is not penalized.
pub fn finetune(
    model: &mut Classifier,
    ft_train: &Dataset,
    original: &Dataset,
    cfg: &FinetuneConfig,
    monitors: &[Monitor],
) -> Result<History> {
    finetune_with_state(model, ft_train, original, cfg, monitors).map(|(h, _)| h)
}

/// [`finetune`], also returning the anchor and Fisher weights.
pub fn finetune_with_state(
    model: &mut Classifier,
    ft_train: &Dataset,
    original: &Dataset,
    cfg: &FinetuneConfig,
    monitors: &[Monitor],
) -> Result<(History, FinetuneState)> {
    cfg.validate()?;
    if ft_train.is_empty() {
        return Err(Error::EmptyDataset("FT-train"));
    }
    let reg = &cfg.regularizer;
    if reg.kind == RegularizerKind::Ewc && original.is_empty() {
        return Err(Error::EmptyDataset("original data for Fisher estimation"));
    }
    let data = cap_dataset(ft_train, cfg.ft_train_size, cfg.train.seed);

    let mut main = ParamSet::new();
    let n_main = model.main_len();
    for (name, t) in model.params().iter().take(n_main) {
        main.push(name, t.clone());
    }
    let anchor = ParameterSnapshot::from_params(main);
    let anchor_sum = anchor.checksum();
    if *model.bias() != cfg.bias {
        model.set_bias(cfg.bias, cfg.train.seed ^ 0x5851_f42d_4c95_7f2d)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut state = OptimizerState::new(cfg.train.optimizer, model.params());
    let mut fisher = match reg.kind {
        RegularizerKind::L2 => Some(FisherDiagonal::ones_like(anchor.params())),
        _ => None,
    };
    let mut history = History::default();
    for epoch in 0..cfg.train.epochs {
        let mut recomputed = false;
        if reg.kind == RegularizerKind::Ewc && (epoch == 0 || reg.recompute_each_epoch) {
            let full = estimate_fisher_diagonal(
                &*model,
                original,
                reg.fisher_sample_size,
                fisher_seed(cfg.train.seed, epoch),
            )?;
            let mut values = ParamSet::new();
            for (name, t) in full.values().iter().take(anchor.params().len()) {
                values.push(name, t.clone());
            }
            let f = FisherDiagonal::from_values(values, full.sample_size, full.source.clone())?;
            info!(
                "epoch {}: recomputed Fisher on {} instances (mean {:.3e}, max {:.3e})",
                epoch + 1,
                f.sample_size,
                f.mean(),
                f.max()
            );
            fisher = Some(f);
            recomputed = true;
        }
        let penalty = fisher.as_ref().map(|f| Penalty {
            snapshot: &anchor,
            fisher: f,
            lambda: reg.lambda,
        });
        let (mean_loss, mean_penalty) =
            run_epoch(model, &data, &cfg.train, &mut state, &mut rng, epoch, penalty.as_ref())?;
        if anchor.checksum() != anchor_sum {
            return Err(Error::Checkpoint(
                "parameter snapshot changed during fine-tuning".into(),
            ));
        }
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            mean_penalty,
            fisher_recomputed: recomputed,
            fisher_mean: fisher
                .as_ref()
                .filter(|_| reg.kind == RegularizerKind::Ewc)
                .map(FisherDiagonal::mean),
            validation_acc: None,
            monitors: evaluate_monitors(model, monitors)?,
        });
        info!(
            "epoch {}: loss {:.4}, penalty {:.4}{}",
            epoch + 1,
            mean_loss,
            mean_penalty,
            describe_accs(history.epochs.last())
        );
        history.best_epoch = epoch + 1;
    }
    Ok((history, FinetuneState { anchor, fisher }))
}
