//! Single-run commands: data generation, training and fine-tuning.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ewc_core::checkpoint::{Checkpoint, CheckpointProvenance};
use ewc_core::continual::RegularizerKind;
use ewc_core::data::{
    claim_label_mutual_information, generate_biased_original, generate_single_label_challenge,
    generate_symmetric_counterfactual, read_jsonl, write_jsonl, Dataset, GeneratorConfig, Provenance, LABEL_NAMES,
};
use ewc_core::eval::format_sig;
use ewc_core::model::{Architecture, BiasModelConfig, Classifier, Init, ModelDims};
use ewc_core::train::{self as tr, FinetuneConfig, History, Monitor, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::store::{file_digest, output_root, read_json, write_atomic, RunDir};
use crate::{usage_error, Arch, DataKind, FinetuneArgs, GenDataArgs, TrainArgs, TrainOverrides};

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(b) = args.bias_strength {
        cfg.bias_strength = b;
    }
    if args.rules_from.is_some() && args.kind != DataKind::Symmetric {
        return Err(usage_error("--rules-from only applies to --kind symmetric"));
    }
    let ds = match args.kind {
        DataKind::Original => {
            cfg.n_instances = args.n.unwrap_or(cfg.n_instances);
            generate_biased_original(&cfg)?
        }
        DataKind::SingleLabel => {
            cfg.n_instances = args.n.unwrap_or(1000);
            generate_single_label_challenge(&cfg)?
        }
        DataKind::Symmetric => {
            let n = args.n.unwrap_or(700);
            if n == 0 || n % 2 != 0 {
                return Err(usage_error(format!(
                    "--n must be a positive even number for --kind symmetric (instances come in pairs), got {n}"
                )));
            }
            let base = match &args.rules_from {
                Some(p) => read_jsonl(p).with_context(|| format!("cannot load {}", p.display()))?,
                None => rules_only(&cfg)?,
            };
            generate_symmetric_counterfactual(&base, n / 2, cfg.seed)?
        }
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_jsonl(&ds, &args.out).with_context(|| format!("cannot write {}", args.out.display()))?;
    let mi = claim_label_mutual_information(&ds)?;
    println!("wrote {} instances to {}", ds.len(), args.out.display());
    println!("claim-label mutual information: {mi:.6} bits");
    Ok(())
}

/// An empty corpus carrying `cfg` as its generation rules.
fn rules_only(cfg: &GeneratorConfig) -> Result<Dataset> {
    let layout = cfg.layout()?;
    Ok(Dataset::new(
        layout.vocab,
        LABEL_NAMES.len(),
        Provenance {
            generator: "original".into(),
            seed: cfg.seed,
            config: Some(cfg.clone()),
            notes: vec![],
        },
    ))
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides) {
    if let Some(v) = o.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.clip {
        cfg.gradient_norm_clip = Some(v);
    }
}

fn load(path: &Path) -> Result<Dataset> {
    read_jsonl(path).with_context(|| format!("cannot load {}", path.display()))
}

fn describe(path: &Path, ds: &Dataset) -> String {
    format!(
        "{}: {} seed {}, {} instances",
        path.display(),
        ds.provenance.generator,
        ds.provenance.seed,
        ds.len()
    )
}

/// `--out` or `<run dir>/checkpoint.json`, and the history CSV beside it.
fn output_paths(
    out: Option<&Path>,
    history: Option<&Path>,
    root: Option<&Path>,
    command: &str,
    config: &serde_json::Value,
) -> Result<(PathBuf, PathBuf)> {
    let ckpt = match out {
        Some(p) => p.to_path_buf(),
        None => RunDir::open(&output_root(root, None), command, config)?.file("checkpoint.json"),
    };
    let hist = match history {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = ckpt
                .file_stem()
                .map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
            ckpt.with_file_name(format!("{stem}.history.csv"))
        }
    };
    Ok((ckpt, hist))
}

fn write_history(path: &Path, h: &History) -> Result<()> {
    let mut w = csv::Writer::from_writer(vec![]);
    let monitor_names: Vec<&str> = h
        .epochs
        .first()
        .map_or(vec![], |e| e.monitors.iter().map(|(n, _)| n.as_str()).collect());
    let mut header = vec![
        "epoch",
        "mean_loss",
        "mean_penalty",
        "fisher_recomputed",
        "fisher_mean",
        "validation_acc",
    ];
    let acc_cols: Vec<String> = monitor_names.iter().map(|n| format!("{n}_acc")).collect();
    header.extend(acc_cols.iter().map(String::as_str));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(format_sig).unwrap_or_default();
    for e in &h.epochs {
        let mut row = vec![
            e.epoch.to_string(),
            format_sig(e.mean_loss),
            format_sig(e.mean_penalty),
            e.fisher_recomputed.to_string(),
            opt(e.fisher_mean),
            opt(e.validation_acc),
        ];
        row.extend(e.monitors.iter().map(|(_, v)| format_sig(*v)));
        w.write_record(&row)?;
    }
    write_atomic(path, &w.into_inner()?)
}

/// `train --config`: optimizer settings plus the model shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainSpec {
    #[serde(flatten)]
    train: TrainConfig,
    architecture: Architecture,
    embed_dim: usize,
    hidden_dim: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            architecture: Architecture::Pair,
            embed_dim: 16,
            hidden_dim: 32,
        }
    }
}

pub fn train(args: &TrainArgs, root: Option<&Path>) -> Result<()> {
    let mut spec: TrainSpec = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainSpec::default(),
    };
    apply_overrides(&mut spec.train, &args.train);
    if args.patience.is_some() {
        spec.train.early_stopping_patience = args.patience;
    }
    if let Some(a) = args.architecture {
        spec.architecture = match a {
            Arch::Pair => Architecture::Pair,
            Arch::ClaimOnly => Architecture::ClaimOnly,
        };
    }
    spec.embed_dim = args.embed_dim.unwrap_or(spec.embed_dim);
    spec.hidden_dim = args.hidden_dim.unwrap_or(spec.hidden_dim);
    if spec.train.early_stopping_patience.is_some() && args.dev.is_none() {
        return Err(usage_error("early stopping needs --dev"));
    }
    spec.train.validate()?;

    let data = load(&args.data)?;
    let dev = args.dev.as_deref().map(load).transpose()?;
    let dims = ModelDims {
        vocab_size: data.vocab.len(),
        embed_dim: spec.embed_dim,
        hidden_dim: spec.hidden_dim,
        num_classes: data.num_classes,
    };
    let mut model = Classifier::new(
        spec.architecture,
        dims,
        BiasModelConfig::default(),
        Init::Random { seed: spec.train.seed },
    )?;
    let run_cfg = json!({
        "spec": spec,
        "data": file_digest(&args.data)?,
        "dev": args.dev.as_deref().map(file_digest).transpose()?,
    });
    let (ckpt_path, hist_path) = output_paths(args.out.as_deref(), args.history.as_deref(), root, "train", &run_cfg)?;

    let history = tr::train(&mut model, &data, dev.as_ref(), &spec.train, &[])?;
    let mut datasets = vec![describe(&args.data, &data)];
    if let (Some(p), Some(d)) = (&args.dev, &dev) {
        datasets.push(describe(p, d));
    }
    let prov = CheckpointProvenance {
        seed: spec.train.seed,
        config: serde_json::to_value(&spec)?,
        datasets,
        parent: None,
    };
    Checkpoint::new(&model, prov).save(&ckpt_path)?;
    write_history(&hist_path, &history)?;
    println!("wrote checkpoint {}", ckpt_path.display());
    println!("wrote history {}", hist_path.display());
    Ok(())
}

pub fn finetune(args: &FinetuneArgs, root: Option<&Path>) -> Result<()> {
    let mut cfg: FinetuneConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => FinetuneConfig::default(),
    };
    apply_overrides(&mut cfg.train, &args.train);
    if let Some(r) = args.regularizer {
        cfg.regularizer.kind = r.into();
    }
    if let Some(l) = args.lambda {
        if cfg.regularizer.kind == RegularizerKind::None && l != 0.0 {
            return Err(usage_error("--lambda needs --regularizer l2 or ewc"));
        }
        cfg.regularizer.lambda = l;
    }
    if let Some(n) = args.fisher_samples {
        cfg.regularizer.fisher_sample_size = n;
    }
    if args.fisher_once {
        cfg.regularizer.recompute_each_epoch = false;
    }
    if args.ft_train_size.is_some() {
        cfg.ft_train_size = args.ft_train_size;
    }
    let ewc = cfg.regularizer.kind == RegularizerKind::Ewc;
    if ewc && args.original.is_none() {
        return Err(usage_error(
            "--regularizer ewc needs --original (the Fisher is estimated on original-task data)",
        ));
    }
    cfg.validate()?;

    let parent = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;
    let mut model = parent.classifier()?;
    let ft_train = load(&args.ft_train)?;
    if ft_train.vocab.len() != model.dims().vocab_size {
        bail!(
            "{} has {} vocabulary entries but the checkpoint expects {}",
            args.ft_train.display(),
            ft_train.vocab.len(),
            model.dims().vocab_size
        );
    }
    let original = match &args.original {
        Some(p) => load(p)?,
        None => Dataset::new(
            ft_train.vocab.clone(),
            ft_train.num_classes,
            Provenance::external("none"),
        ),
    };
    let ft_test = args.ft_test.as_deref().map(load).transpose()?;
    let original_test = args.original_test.as_deref().map(load).transpose()?;
    let mut monitors = vec![];
    if let Some(d) = &original_test {
        monitors.push(Monitor {
            name: "original_test",
            data: d,
        });
    }
    if let Some(d) = &ft_test {
        monitors.push(Monitor {
            name: "ft_test",
            data: d,
        });
    }

    let digest = |p: &Option<PathBuf>| p.as_deref().map(file_digest).transpose();
    let run_cfg = json!({
        "finetune": cfg,
        "checkpoint": parent.checksum,
        "ft_train": file_digest(&args.ft_train)?,
        "original": digest(&args.original)?,
        "ft_test": digest(&args.ft_test)?,
        "original_test": digest(&args.original_test)?,
    });
    let (ckpt_path, hist_path) =
        output_paths(args.out.as_deref(), args.history.as_deref(), root, "finetune", &run_cfg)?;

    let (history, state) = tr::finetune_with_state(&mut model, &ft_train, &original, &cfg, &monitors)?;
    let mut datasets = vec![describe(&args.ft_train, &ft_train)];
    if let Some(p) = &args.original {
        datasets.push(describe(p, &original));
    }
    let prov = CheckpointProvenance {
        seed: cfg.train.seed,
        config: serde_json::to_value(&cfg)?,
        datasets,
        parent: Some(format!("{} ({})", args.checkpoint.display(), parent.checksum)),
    };
    // L2 weights are all ones; only EWC weights are worth keeping
    let fisher = state.fisher.filter(|_| ewc);
    Checkpoint::new(&model, prov)
        .with_anchor(state.anchor, fisher)
        .save(&ckpt_path)?;
    write_history(&hist_path, &history)?;
    println!("wrote checkpoint {}", ckpt_path.display());
    println!("wrote history {}", hist_path.display());
    Ok(())
}
