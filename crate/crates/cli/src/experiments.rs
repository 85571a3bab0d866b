//! Manifest-driven commands that fan out over seeds and hyperparameters.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ewc_core::continual::RegularizerKind;
use ewc_core::eval::{
    emit_ablation_report, emit_report, format_sig, frontier_dominates, pareto_frontier, AccuracyStats, ParetoPoint,
    ReportOptions, Summary,
};
use ewc_core::train::{
    ablation_sweep, condition_hash, config_hash, cv_selected_points, grid_search_cv, hyperparameter_sweep, run_single,
    CvTable, FinetuneConfig, RunResult, SeedResult, SweepPoint, STANDARD_ABLATION_SIZES,
};
use log::{info, warn};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;

use crate::manifest::Manifest;
use crate::store::{file_digest, output_root, write_atomic, write_json, RunDir};
use crate::{usage_error, AblateArgs, ParetoArgs, ReportArgs, SweepArgs};

fn kind_name(kind: RegularizerKind) -> &'static str {
    match kind {
        RegularizerKind::None => "ft",
        RegularizerKind::L2 => "ft_l2",
        RegularizerKind::Ewc => "ft_ewc",
    }
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(w.into_inner()?)
}

pub fn sweep(args: &SweepArgs, root: Option<&Path>) -> Result<()> {
    let m = Manifest::load(&args.manifest)?;
    let kind: RegularizerKind = args.regularizer.map_or(m.finetune.regularizer.kind, Into::into);
    let mut grid = m.grid.clone();
    if let Some(e) = args.epochs_max {
        grid.epochs_max = e;
    }
    if let Some(k) = args.k_folds {
        grid.k_folds = k;
    }
    if kind == RegularizerKind::None {
        grid.lambdas = vec![0.0];
    }
    grid.validate().map_err(usage_error)?;
    let base_cfg = m.finetune_for(kind);
    let run = RunDir::open(
        &output_root(root, m.output_dir.as_deref()),
        "sweep",
        &json!({ "manifest": m.fingerprint()?, "regularizer": kind, "grid": grid }),
    )?;
    let data = m.load_data()?;
    let bases = m.bases(&data, &run)?;
    let (_, base) = &bases.models[0];
    let hash = config_hash(&(&grid, &base_cfg, base.params().checksum()))?;

    info!(
        "cross-validating {} (lr, lambda) settings x {} epochs x {} folds",
        grid.configs().len(),
        grid.epochs_max,
        grid.k_folds
    );
    let table: CvTable = run.cached("cv.json", &hash, || {
        Ok(grid_search_cv(base, &data.ft_train, &data.original_train, &grid, &base_cfg)?.1)
    })?;
    let k = grid.k_folds;
    let mut header = vec!["learning_rate", "lambda", "epochs", "mean_acc"];
    let fold_cols: Vec<String> = (1..=k).map(|f| format!("fold_{f}")).collect();
    header.extend(fold_cols.iter().map(String::as_str));
    let row = |r: &ewc_core::train::CvRow| {
        let mut v = vec![
            format_sig(r.learning_rate),
            format_sig(r.lambda),
            r.epochs.to_string(),
            format_sig(r.mean_acc),
        ];
        v.extend(r.fold_accs.iter().map(|a| format_sig(*a)));
        v
    };
    write_atomic(
        &run.file("cv_epochs.csv"),
        &csv_bytes(&header, table.rows.iter().map(row).collect())?,
    )?;
    // one row per (lr, λ) at its best epoch count
    let per_config: Vec<Vec<String>> = grid
        .configs()
        .iter()
        .map(|&(lr, l)| {
            row(table
                .best_where(|r| r.learning_rate == lr && r.lambda == l)
                .expect("grid row"))
        })
        .collect();
    write_atomic(&run.file("cv_table.csv"), &csv_bytes(&header, per_config)?)?;
    let best = &table.rows[table.best];
    let mut chosen: FinetuneConfig = base_cfg.clone();
    chosen.train.learning_rate = best.learning_rate;
    chosen.train.epochs = best.epochs;
    chosen.regularizer.lambda = best.lambda;
    write_json(&run.file("best_config.json"), &chosen)?;
    println!(
        "selected lr={} lambda={} epochs={} (cv accuracy {:.4})",
        format_sig(best.learning_rate),
        format_sig(best.lambda),
        best.epochs,
        best.mean_acc
    );

    info!(
        "evaluating every grid point on the test sets over {} seeds",
        bases.models.len()
    );
    let points: Vec<SweepPoint> = run.cached("points.json", &config_hash(&(&hash, bases.seeds()))?, || {
        Ok(hyperparameter_sweep(&data, &bases, &grid, &base_cfg)?)
    })?;
    let point_rows = |points: &[SweepPoint]| -> Vec<Vec<String>> {
        points
            .iter()
            .map(|p| {
                vec![
                    kind_name(kind).to_string(),
                    format_sig(p.learning_rate),
                    format_sig(p.lambda),
                    p.epochs.to_string(),
                    format_sig(p.original_acc),
                    format_sig(p.ft_acc),
                ]
            })
            .collect()
    };
    let header = [
        "condition",
        "learning_rate",
        "lambda",
        "epochs",
        "original_acc",
        "ft_acc",
    ];
    write_atomic(
        &run.file("sweep_points_all.csv"),
        &csv_bytes(&header, point_rows(&points))?,
    )?;
    let selected = cv_selected_points(&points, &table)?;
    write_atomic(
        &run.file("sweep_points.csv"),
        &csv_bytes(&header, point_rows(&selected))?,
    )?;
    println!("wrote {}", run.path.display());
    Ok(())
}

pub fn ablate(args: &AblateArgs, root: Option<&Path>) -> Result<()> {
    let m = Manifest::load(&args.manifest)?;
    ensure!(m.seeds.len() >= 2, "ablate needs at least 2 seeds for its error bars");
    let data = m.load_data()?;
    let n = data.ft_train.len();
    let sizes = match (&args.sizes, m.ablation_sizes.is_empty()) {
        (Some(s), _) => s.clone(),
        (None, false) => m.ablation_sizes.clone(),
        (None, true) => {
            let fit: Vec<usize> = STANDARD_ABLATION_SIZES.iter().copied().filter(|&s| s <= n).collect();
            if fit.len() < STANDARD_ABLATION_SIZES.len() {
                warn!(
                    "FT-train has {n} instances; using the {} standard sizes up to it",
                    fit.len()
                );
            }
            fit
        }
    };
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(usage_error("--sizes must be positive and strictly ascending"));
    }
    if let Some(s) = sizes.iter().find(|&&s| s > n) {
        bail!("ablation size {s} exceeds the {n} FT-train instances");
    }
    let conditions = m.conditions();
    let run = RunDir::open(
        &output_root(root, m.output_dir.as_deref()),
        "ablate",
        &json!({ "manifest": m.fingerprint()?, "sizes": sizes, "conditions": conditions }),
    )?;
    let bases = m.bases(&data, &run)?;
    let hash = config_hash(&(&sizes, &conditions, bases.seeds()))?;
    info!(
        "{} sizes x {} conditions x {} seeds",
        sizes.len(),
        conditions.len(),
        bases.models.len()
    );
    let results = run.cached("ablation.json", &hash, || {
        Ok(ablation_sweep(&data, &bases, &sizes, &conditions)?)
    })?;
    let files = emit_ablation_report(&results, &run.path)?;
    println!("{:>6}  {:<12} {:>10} {:>10}", "size", "condition", "ft_acc", "orig_acc");
    for a in &results {
        for r in &a.results {
            let ft = AccuracyStats::from_values(&r.ft_accs())?;
            let orig = AccuracyStats::from_values(&r.original_accs())?;
            println!(
                "{:>6}  {:<12} {:>10.4} {:>10.4}",
                a.size, r.condition, ft.mean, orig.mean
            );
        }
    }
    println!("wrote {} and {}", files.csv.display(), files.summary.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PointRow {
    condition: String,
    learning_rate: f64,
    lambda: f64,
    epochs: usize,
    original_acc: f64,
    ft_acc: f64,
}

fn read_points(path: &Path) -> Result<Vec<ParetoPoint>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = vec![];
    for row in r.deserialize() {
        let p: PointRow = row.with_context(|| format!("bad row in {}", path.display()))?;
        out.push(ParetoPoint::new(
            p.original_acc,
            p.ft_acc,
            format!(
                "{} lr={} lambda={} epochs={}",
                p.condition, p.learning_rate, p.lambda, p.epochs
            ),
        ));
    }
    ensure!(!out.is_empty(), "{} has no points", path.display());
    Ok(out)
}

pub fn pareto(args: &ParetoArgs, root: Option<&Path>) -> Result<()> {
    let mut inputs = vec![("ft_ewc", &args.ewc), ("ft", &args.ft)];
    if let Some(l2) = &args.l2 {
        inputs.push(("ft_l2", l2));
    }
    let digests: Vec<(&str, String)> = inputs
        .iter()
        .map(|(n, p)| Ok((*n, file_digest(p)?)))
        .collect::<Result<_>>()?;
    let run = RunDir::open(&output_root(root, None), "pareto", &json!({ "inputs": digests }))?;
    let mut frontiers = vec![];
    let mut rows = vec![];
    for (name, path) in &inputs {
        let f = pareto_frontier(&read_points(path)?)?;
        println!("{name} frontier ({} points):", f.len());
        for p in &f {
            println!("  original {:.4}  ft {:.4}  {}", p.x, p.y, p.label);
            rows.push(vec![
                name.to_string(),
                format_sig(p.x),
                format_sig(p.y),
                p.label.clone(),
            ]);
        }
        frontiers.push(f);
    }
    write_atomic(
        &run.file("frontier.csv"),
        &csv_bytes(&["condition", "original_acc", "ft_acc", "label"], rows)?,
    )?;
    let dominance = frontier_dominates(&frontiers[0], &frontiers[1])?;
    let mut summary = json!({ "ewc_dominates_ft": dominance });
    println!("dominance={dominance}");
    if frontiers.len() == 3 {
        let l2 = frontier_dominates(&frontiers[2], &frontiers[1])?;
        summary["l2_dominates_ft"] = json!(l2);
        println!("l2_dominance={l2}");
    }
    write_json(&run.file("dominance.json"), &summary)?;
    Ok(())
}

pub fn report(args: &ReportArgs, root: Option<&Path>) -> Result<()> {
    let m = Manifest::load(&args.manifest)?;
    ensure!(m.seeds.len() >= 2, "report needs at least 2 seeds for its t-tests");
    let conditions = m.conditions();
    let run = RunDir::open(
        &output_root(root, m.output_dir.as_deref()),
        "report",
        &json!({ "manifest": m.fingerprint()?, "conditions": conditions }),
    )?;
    let data = m.load_data()?;
    let bases = m.bases(&data, &run)?;
    let seeds = bases.seeds();
    let jobs: Vec<(usize, u64)> = (0..conditions.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let done: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let cond = &conditions[c];
            let hash = condition_hash(cond, &bases)?;
            run.cached(&format!("runs/{}/seed-{s}.json", cond.name), &hash, || {
                info!("running {} on seed {s}", cond.name);
                Ok(run_single(&data, &bases, cond, s)?)
            })
        })
        .collect::<Result<_>>()?;
    let mut it = done.into_iter();
    let results: Vec<RunResult> = conditions
        .iter()
        .map(|c| {
            Ok(RunResult {
                condition: c.name.clone(),
                config_hash: condition_hash(c, &bases)?,
                config: c.clone(),
                seeds: it.by_ref().take(seeds.len()).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let opts = ReportOptions::default();
    let files = emit_report(&results, &run.path, &opts)?;
    print_summary(&Summary::build(&results, &opts)?);
    println!("wrote {} and {}", files.csv.display(), files.summary.display());
    Ok(())
}

fn print_summary(s: &Summary) {
    println!("{:<12} {:>22} {:>22}", "condition", "original_acc", "ft_acc");
    for c in &s.conditions {
        let cell = |m: &ewc_core::eval::MetricSummary| format!("{:.4} ± {:.4} {}", m.mean, m.std, m.markers);
        println!("{:<12} {:>22} {:>22}", c.condition, cell(&c.original), cell(&c.ft));
    }
}
