//! Experiment manifests: dataset and checkpoint paths plus every setting a
//! manifest-driven command needs.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ewc_core::checkpoint::{Checkpoint, CheckpointProvenance};
use ewc_core::continual::RegularizerKind;
use ewc_core::data::{read_jsonl, Dataset};
use ewc_core::model::ModelDims;
use ewc_core::train::{
    config_hash, fit_bases, BaseModels, Condition, ExperimentData, FinetuneConfig, History, SweepGrid, TrainConfig,
};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::store::{file_digest, read_json, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 32,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub original_train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_dev: Option<PathBuf>,
    pub original_test: PathBuf,
    pub ft_train: PathBuf,
    pub ft_test: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Trained base models by seed. Seeds without one get a base model
    /// trained on original-train with `base_train`.
    #[serde(default)]
    pub base_checkpoints: BTreeMap<u64, PathBuf>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub base_train: TrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    /// Conditions for `report` and `ablate`. Empty means original, merged
    /// and ft, plus ft_l2 and ft_ewc at the fine-tuning λ when it is positive.
    #[serde(default)]
    pub conditions: Vec<Condition>,
    #[serde(default)]
    pub grid: SweepGrid,
    #[serde(default)]
    pub ablation_sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Manifest = read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for p in [
            &mut m.original_train,
            &mut m.original_test,
            &mut m.ft_train,
            &mut m.ft_test,
        ] {
            resolve(p);
        }
        m.original_dev.iter_mut().for_each(resolve);
        m.base_checkpoints.values_mut().for_each(resolve);
        m.output_dir.iter_mut().for_each(resolve);
        m.validate()
            .with_context(|| format!("invalid manifest {}", path.display()))?;
        Ok(m)
    }

    fn inputs(&self) -> Vec<(String, &Path)> {
        let mut out = vec![
            ("original_train".to_string(), self.original_train.as_path()),
            ("original_test".to_string(), self.original_test.as_path()),
            ("ft_train".to_string(), self.ft_train.as_path()),
            ("ft_test".to_string(), self.ft_test.as_path()),
        ];
        if let Some(p) = &self.original_dev {
            out.push(("original_dev".into(), p));
        }
        for (seed, p) in &self.base_checkpoints {
            out.push((format!("base_checkpoint_{seed}"), p));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let missing: Vec<String> = self
            .inputs()
            .into_iter()
            .filter(|(_, p)| !p.is_file())
            .map(|(k, p)| format!("{k} ({})", p.display()))
            .collect();
        ensure!(missing.is_empty(), "missing input files: {}", missing.join(", "));
        ensure!(!self.seeds.is_empty(), "no seeds");
        let mut seen = HashSet::new();
        for s in &self.seeds {
            ensure!(seen.insert(s), "seed {s} listed twice");
        }
        for s in self.base_checkpoints.keys() {
            ensure!(
                self.seeds.contains(s),
                "base checkpoint for seed {s}, which is not in seeds"
            );
        }
        self.base_train.validate()?;
        self.finetune.validate()?;
        self.grid.validate()?;
        let mut names = HashSet::new();
        for c in &self.conditions {
            ensure!(
                !c.name.is_empty()
                    && c.name
                        .chars()
                        .all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-'),
                "condition name {:?} must be non-empty ASCII letters, digits, '_' or '-'",
                c.name
            );
            ensure!(names.insert(&c.name), "condition {:?} listed twice", c.name);
            if let Some(cfg) = c.finetune_config() {
                cfg.validate()?;
            }
        }
        Ok(())
    }

    /// The manifest with paths replaced by content hashes of the files they
    /// name, so run directories follow content rather than location.
    pub fn fingerprint(&self) -> Result<Value> {
        let mut v = serde_json::to_value(self)?;
        let obj = v.as_object_mut().expect("manifest serializes to an object");
        for key in [
            "original_train",
            "original_dev",
            "original_test",
            "ft_train",
            "ft_test",
            "base_checkpoints",
            "output_dir",
        ] {
            obj.remove(key);
        }
        let mut inputs = serde_json::Map::new();
        for (k, p) in self.inputs() {
            inputs.insert(k, json!(file_digest(p)?));
        }
        obj.insert("inputs".into(), Value::Object(inputs));
        Ok(v)
    }

    pub fn conditions(&self) -> Vec<Condition> {
        if !self.conditions.is_empty() {
            return self.conditions.clone();
        }
        let mut out = vec![
            Condition::original(),
            Condition::merged(),
            Condition::ft(&self.finetune),
        ];
        let lambda = self.finetune.regularizer.lambda;
        if lambda > 0.0 {
            out.push(Condition::ft_l2(&self.finetune, lambda));
            out.push(Condition::ft_ewc(&self.finetune, lambda));
        }
        out
    }

    pub fn load_data(&self) -> Result<ExperimentData> {
        let read =
            |p: &Path| -> Result<Dataset> { read_jsonl(p).with_context(|| format!("cannot load {}", p.display())) };
        let data = ExperimentData {
            original_train: read(&self.original_train)?,
            original_dev: self.original_dev.as_deref().map(read).transpose()?,
            original_test: read(&self.original_test)?,
            ft_train: read(&self.ft_train)?,
            ft_test: read(&self.ft_test)?,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn dims(&self, data: &ExperimentData) -> ModelDims {
        ModelDims {
            vocab_size: data.original_train.vocab.len(),
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            num_classes: data.original_train.num_classes,
        }
    }

    /// Base model per seed: from `base_checkpoints`, from an earlier run in
    /// `run`, or trained now and saved under `run/bases/`.
    pub fn bases(&self, data: &ExperimentData, run: &RunDir) -> Result<BaseModels> {
        let dims = self.dims(data);
        let train_hash = config_hash(&(dims, &self.base_train, file_digest(&self.original_train)?))?;
        let fitted: Vec<_> = self
            .seeds
            .par_iter()
            .map(|&seed| -> Result<_> {
                if let Some(p) = self.base_checkpoints.get(&seed) {
                    let m = Checkpoint::load(p)
                        .with_context(|| format!("cannot load base checkpoint {}", p.display()))?
                        .classifier()?;
                    if *m.dims() != dims {
                        bail!(
                            "base checkpoint {} has dims {:?}, expected {:?}",
                            p.display(),
                            m.dims(),
                            dims
                        );
                    }
                    return Ok((m, History::default()));
                }
                let path = run.file(format!("bases/seed-{seed}.json"));
                let hash = format!("{train_hash}-{seed}");
                if path.exists() {
                    let ckpt = Checkpoint::load(&path)?;
                    if ckpt.provenance.config.get("hash") != Some(&json!(hash)) {
                        bail!(
                            "{} was trained with a different configuration; remove it to retrain",
                            path.display()
                        );
                    }
                    info!("reusing base model {}", path.display());
                    return Ok((ckpt.classifier()?, History::default()));
                }
                info!("training base model for seed {seed}");
                let mut one = fit_bases(data, &[seed], dims, &self.base_train)?;
                let (_, model) = one.models.pop().expect("one base model");
                let history = one.histories.pop().unwrap_or_default();
                let prov = CheckpointProvenance {
                    seed,
                    config: json!({ "hash": hash, "train": self.base_train }),
                    datasets: vec![self.original_train.display().to_string()],
                    parent: None,
                };
                Checkpoint::new(&model, prov).save(&path)?;
                Ok((model, history))
            })
            .collect::<Result<_>>()?;
        let (models, histories): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
        Ok(BaseModels {
            dims,
            train: self.base_train.clone(),
            models: self.seeds.iter().copied().zip(models).collect(),
            histories,
        })
    }

    /// Fine-tuning config for `kind` with the grid search's starting seed.
    pub fn finetune_for(&self, kind: RegularizerKind) -> FinetuneConfig {
        let mut cfg = self.finetune.clone();
        cfg.regularizer.kind = kind;
        cfg.train.seed = self.seeds[0];
        cfg
    }
}
