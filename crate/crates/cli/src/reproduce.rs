//! `reproduce-paper-analogs`: every acceptance check on the synthetic setup,
//! one pass/fail line each.

use std::path::Path;
use std::time::Instant;

use anyhow::Result;
use ewc_core::analogs::{
    bias_probe, build_data, data_ablation, fit_analog_bases, forgetting_table, label_shift, pareto_sweep,
    select_hyperparameters, AnalogConfig, AnalogData, BiasProbe, LabelShift, ParetoSweep, Selection,
};
use ewc_core::autodiff::{finite_diff_gradient, Graph};
use ewc_core::continual::{
    elastic_penalty, estimate_fisher_diagonal, l2_penalty, record_elastic_penalty, regularized_loss, FisherDiagonal,
    ParameterSnapshot, RegularizerConfig,
};
use ewc_core::data::{
    claim_label_mutual_information, cue_label, generate_biased_original, generate_single_label_challenge,
    generate_symmetric_counterfactual, Dataset, GeneratorConfig,
};
use ewc_core::eval::{emit_ablation_report, emit_report, pareto_frontier, unpaired_t_test, ParetoPoint, ReportOptions};
use ewc_core::model::{Architecture, BiasModelConfig, Classifier, Init, ModelDims, ParamSet};
use ewc_core::train::{config_hash, finetune, AblationResult, BaseModels, FinetuneConfig, RunResult, TrainConfig};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::store::{output_root, read_json, write_atomic, write_json, RunDir};
use crate::ReproduceArgs;

struct Check {
    id: u8,
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
    limit: f64,
}

impl Check {
    fn line(&self) -> String {
        let within = self.seconds <= self.limit;
        format!(
            "{} {:>2} {}: {} [{:.1}s, limit {:.0}s{}]",
            if self.passed && within { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds,
            self.limit,
            if within { "" } else { ", over time" }
        )
    }

    fn ok(&self) -> bool {
        self.passed && self.seconds <= self.limit
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn tiny_corpus(n: usize, seed: u64) -> Result<Dataset> {
    Ok(generate_biased_original(&GeneratorConfig {
        seed,
        n_instances: n,
        vocab_size: 14,
        n_topics: 2,
        cues_per_label: 1,
        claim_filler: (1, 2),
        evidence_filler: (1, 3),
        ..Default::default()
    })?)
}

/// Training loss plus an EWC penalty, as one scalar.
fn penalized_loss(
    m: &Classifier,
    data: &Dataset,
    anchor: &ParameterSnapshot,
    fisher: &FisherDiagonal,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let batch: Vec<_> = data.instances.iter().collect();
    let mut g = Graph::new();
    let vars = m.params().bind(&mut g);
    let task = m.record_training_loss(&mut g, &vars, &batch)?;
    let pen = record_elastic_penalty(&mut g, &vars, anchor, fisher, 0.7)?;
    let loss = regularized_loss(&mut g, task, pen)?;
    let grads = g.backward(loss)?;
    let flat = vars
        .iter()
        .zip(m.params().iter())
        .map(|(v, (_, t))| grads.get_or_zeros(*v, t.numel()))
        .collect();
    Ok((g.scalar(loss)?, flat))
}

fn check_gradients() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut max_params = 0;
    for i in 0..100u64 {
        let data = tiny_corpus(4, i)?;
        let arch = if i % 2 == 0 {
            Architecture::Pair
        } else {
            Architecture::ClaimOnly
        };
        let dims = ModelDims {
            vocab_size: data.vocab.len(),
            embed_dim: 3 + (i % 3) as usize,
            hidden_dim: 3 + (i % 4) as usize,
            num_classes: 3,
        };
        let m = Classifier::new(arch, dims, BiasModelConfig::default(), Init::Random { seed: i })?;
        max_params = max_params.max(m.params().numel());
        let other = Classifier::new(arch, dims, BiasModelConfig::default(), Init::Random { seed: i + 1000 })?;
        let anchor = ParameterSnapshot::from_params(other.params().clone());
        let mut f = other.params().clone();
        f.tensors_mut()
            .flat_map(|t| t.data_mut().iter_mut())
            .for_each(|v| *v = *v * *v);
        let fisher = FisherDiagonal::from_values(f, 1, "check")?;
        let (_, grads) = penalized_loss(&m, &data, &anchor, &fisher)?;
        for (k, (name, t)) in m.params().iter().enumerate() {
            let fd = finite_diff_gradient(
                |probe| {
                    let mut p = m.clone();
                    *p.params_mut().get_mut(name).expect("param") = probe.clone();
                    Ok(penalized_loss(&p, &data, &anchor, &fisher)
                        .map_err(|e| ewc_core::Error::InvalidConfig(e.to_string()))?
                        .0)
                },
                t,
                1e-5,
            )?;
            let err = grads[k]
                .iter()
                .zip(fd.data())
                .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-2))
                .fold(0.0, f64::max);
            worst = worst.max(err);
        }
    }
    Ok((
        worst <= 1e-6 && max_params <= 500,
        format!("max relative error {worst:.2e} over 100 models of at most {max_params} parameters (tolerance 1e-6)"),
    ))
}

fn check_fisher() -> Result<(bool, String)> {
    let data = tiny_corpus(30, 3)?;
    let dims = ModelDims {
        vocab_size: data.vocab.len(),
        embed_dim: 4,
        hidden_dim: 5,
        num_classes: 3,
    };
    let m = Classifier::pair(dims, Init::Random { seed: 5 })?;
    let mut worst = 0.0f64;
    for (n, seed) in [(1usize, 0u64), (4, 1), (10, 2)] {
        let est = estimate_fisher_diagonal(&m, &data, n, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..data.len())).collect();
        let mut sums: Vec<Vec<f64>> = m.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        for &k in &picks {
            let inst = &data.instances[k];
            let mut g = Graph::new();
            let vars = m.params().bind(&mut g);
            let lp = m.record_log_probs(&mut g, &vars, &[inst])?;
            let nll = g.nll(lp, &[inst.label], None)?;
            let grads = g.backward(nll)?;
            for (s, (v, (_, t))) in sums.iter_mut().zip(vars.iter().zip(m.params().iter())) {
                for (x, d) in s.iter_mut().zip(grads.get_or_zeros(*v, t.numel())) {
                    *x += d * d;
                }
            }
        }
        for ((_, t), s) in est.values().iter().zip(&sums) {
            for (a, b) in t.data().iter().zip(s) {
                worst = worst.max((a - b / n as f64).abs());
            }
        }
    }
    Ok((
        worst <= 1e-12,
        format!("max |estimate - brute force| {worst:.1e} for n in {{1, 4, 10}} (tolerance 1e-12)"),
    ))
}

fn check_reductions() -> Result<(bool, String)> {
    let data = tiny_corpus(60, 7)?;
    let dims = ModelDims {
        vocab_size: data.vocab.len(),
        embed_dim: 4,
        hidden_dim: 5,
        num_classes: 3,
    };
    let mut bitwise = true;
    for seed in 0..20 {
        let theta = Classifier::pair(dims, Init::Random { seed })?;
        let anchor = Classifier::pair(dims, Init::Random { seed: seed + 100 })?;
        let snap = ParameterSnapshot::from_params(anchor.params().clone());
        let ones = FisherDiagonal::ones_like(theta.params());
        let lambda = 0.5 + seed as f64 * 1e5;
        let a = elastic_penalty(theta.params(), &snap, &ones, lambda)?;
        let b = l2_penalty(theta.params(), &snap, lambda)?;
        bitwise &= a.to_bits() == b.to_bits();
    }
    let mut same = true;
    let base = Classifier::pair(dims, Init::Random { seed: 3 })?;
    for epochs in 1..=3 {
        let run = |reg: RegularizerConfig| -> Result<ParamSet> {
            let mut m = base.clone();
            let cfg = FinetuneConfig {
                train: TrainConfig {
                    learning_rate: 5e-3,
                    epochs,
                    batch_size: 8,
                    seed: 11,
                    ..Default::default()
                },
                regularizer: reg,
                ..Default::default()
            };
            finetune(&mut m, &data, &data, &cfg, &[])?;
            Ok(m.params().clone())
        };
        let plain = run(RegularizerConfig::none())?;
        same &= run(RegularizerConfig::ewc(0.0))? == plain && run(RegularizerConfig::l2(0.0))? == plain;
    }
    Ok((
        bitwise && same,
        format!("EWC with unit Fisher equals L2 bitwise: {bitwise}; lambda = 0 trajectories equal plain FT: {same}"),
    ))
}

fn check_unit_value() -> Result<(bool, String)> {
    let mut theta = ParamSet::new();
    theta.push("w", ewc_core::autodiff::Tensor::vector(vec![1.0, 2.0]));
    let snap = ParameterSnapshot::from_params({
        let mut p = ParamSet::new();
        p.push("w", ewc_core::autodiff::Tensor::vector(vec![0.0, 0.0]));
        p
    });
    let mut f = ParamSet::new();
    f.push("w", ewc_core::autodiff::Tensor::vector(vec![1.0, 0.5]));
    let v = elastic_penalty(&theta, &snap, &FisherDiagonal::from_values(f, 1, "unit")?, 2.0)?;
    Ok((v == 3.0, format!("penalty = {v} (expected exactly 3)")))
}

fn check_statistics() -> Result<(bool, String)> {
    let t = unpaired_t_test(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0])?;
    let t_ok = (t.t + 1.224745).abs() <= 1e-6 && (t.p - 0.2878).abs() <= 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let points: Vec<ParetoPoint> = (0..1000)
        .map(|i| ParetoPoint::new(rng.gen::<f64>(), rng.gen::<f64>(), i.to_string()))
        .collect();
    let fast: Vec<String> = pareto_frontier(&points)?.into_iter().map(|p| p.label).collect();
    let brute: Vec<String> = points
        .iter()
        .filter(|p| {
            !points
                .iter()
                .any(|q| q.x >= p.x && q.y >= p.y && (q.x > p.x || q.y > p.y))
        })
        .map(|p| p.label.clone())
        .collect();
    Ok((
        t_ok && fast == brute,
        format!(
            "t = {:.6}, p = {:.4}; frontier of 1000 points matches brute force: {} ({} points)",
            t.t,
            t.p,
            fast == brute,
            fast.len()
        ),
    ))
}

fn check_generators() -> Result<(bool, String)> {
    let cfg = GeneratorConfig::default();
    let original = generate_biased_original(&cfg)?;
    let symmetric = generate_symmetric_counterfactual(&original, 350, 2)?;
    let challenge = generate_single_label_challenge(&GeneratorConfig {
        n_instances: 1000,
        ..cfg.clone()
    })?;
    let deterministic = generate_biased_original(&cfg)? == original
        && generate_symmetric_counterfactual(&original, 350, 2)? == symmetric
        && generate_single_label_challenge(&GeneratorConfig {
            n_instances: 1000,
            ..cfg.clone()
        })? == challenge;
    let mi_sym = claim_label_mutual_information(&symmetric)?;
    let mi_orig = claim_label_mutual_information(&original)?;
    Ok((
        mi_sym <= 0.01 && mi_orig >= 0.3 && deterministic,
        format!("symmetric MI {mi_sym:.4} bits (<= 0.01), biased MI {mi_orig:.4} bits (>= 0.3), deterministic: {deterministic}"),
    ))
}

fn result<'a>(results: &'a [RunResult], name: &str) -> Result<&'a RunResult> {
    results
        .iter()
        .find(|r| r.condition == name)
        .ok_or_else(|| anyhow::anyhow!("no {name} condition in results"))
}

fn judge_forgetting(results: &[RunResult]) -> Result<(bool, String)> {
    let (ft, l2, ewc, orig) = (
        result(results, "ft")?,
        result(results, "ft_l2")?,
        result(results, "ft_ewc")?,
        result(results, "original")?,
    );
    let o = |r: &RunResult| mean(&r.original_accs());
    let f = |r: &RunResult| mean(&r.ft_accs());
    let p_orig = unpaired_t_test(&ewc.original_accs(), &ft.original_accs())?.p;
    let p_ft = unpaired_t_test(&ewc.ft_accs(), &ft.ft_accs())?.p;
    let retention = o(ewc) > o(ft) && p_orig < 0.05 && o(ewc) > o(l2);
    let gain = (f(ewc) - f(ft)).abs() <= 0.03 && (f(ewc) >= f(ft) || p_ft > 0.05);
    let bias = f(orig) <= f(ft) - 0.10;
    Ok((
        retention && gain && bias,
        format!(
            "original acc ewc {:.4} / l2 {:.4} / ft {:.4} (ewc vs ft p={:.4}); FT-test ewc {:.4} vs ft {:.4} (p={:.4}); untreated FT-test {:.4}",
            o(ewc),
            o(l2),
            o(ft),
            p_orig,
            f(ewc),
            f(ft),
            p_ft,
            f(orig)
        ),
    ))
}

fn judge_pareto(p: &ParetoSweep) -> (bool, String) {
    let best = |pts: &[ParetoPoint]| pts.iter().map(|q| q.y).fold(f64::MIN, f64::max);
    (
        p.ewc_dominates_ft,
        format!(
            "EWC frontier dominates FT: {} ({} vs {} frontier points; best FT-test ewc {:.4}, ft {:.4})",
            p.ewc_dominates_ft,
            p.ewc_frontier.len(),
            p.ft_frontier.len(),
            best(&p.ewc_frontier),
            best(&p.ft_frontier)
        ),
    )
}

fn judge_label_shift(ls: &LabelShift, classes: usize) -> Result<(bool, String)> {
    let ft = mean(&result(&ls.results, "ft")?.original_accs());
    let ewc = mean(&result(&ls.results, "ft_ewc")?.original_accs());
    let chance = 1.0 / classes as f64;
    Ok((
        ft < chance + 0.10 && ewc >= ft + 0.15,
        format!(
            "original acc after single-label FT {ft:.4} (must be < {:.4}), FT+EWC {ewc:.4} at lambda {} (must be >= {:.4})",
            chance + 0.10,
            ls.ewc.regularizer.lambda,
            ft + 0.15
        ),
    ))
}

/// Cue token if present, else the most frequent training label.
fn majority_rule_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let hist = train.label_histogram();
    let majority = (0..hist.len())
        .max_by_key(|&i| (hist[i], std::cmp::Reverse(i)))
        .unwrap_or(0);
    let hits = test
        .instances
        .iter()
        .filter(|i| cue_label(&test.vocab, &i.claim).unwrap_or(majority) == i.label)
        .count();
    hits as f64 / test.len() as f64
}

fn judge_probe(p: &BiasProbe, data: &AnalogData) -> (bool, String) {
    let orig = mean(&p.original_test);
    let ft = mean(&p.ft_test);
    let oracle = majority_rule_accuracy(&data.main.original_train, &data.main.original_test);
    (
        orig >= 0.55 && ft <= 0.55 && oracle >= 0.55,
        format!("claim-only acc on biased test {orig:.4} (>= 0.55; cue-rule oracle {oracle:.4}), on symmetric test {ft:.4} (<= 0.55)"),
    )
}

fn judge_ablation(ab: &[AblationResult]) -> Result<(bool, String)> {
    let mut monotone = true;
    let mut worst_drop = 0.0f64;
    let names: Vec<String> = ab[0].results.iter().map(|r| r.condition.clone()).collect();
    for name in &names {
        let mut best = f64::MIN;
        for a in ab {
            let m = mean(&result(&a.results, name)?.ft_accs());
            worst_drop = worst_drop.max(best - m);
            monotone &= m >= best - 0.02;
            best = best.max(m);
        }
    }
    let mut ordered = true;
    let mut worst_gap = f64::MAX;
    for a in ab {
        let gap =
            mean(&result(&a.results, "ft_ewc")?.original_accs()) - mean(&result(&a.results, "ft")?.original_accs());
        worst_gap = worst_gap.min(gap);
        if gap < 0.0 {
            ordered = false;
            info!("size {}: FT+EWC original accuracy is {:.4} below FT", a.size, -gap);
        }
    }
    Ok((
        monotone && ordered,
        format!(
            "largest FT-test drop below an earlier size {:.4} (tolerance 0.02); smallest FT+EWC minus FT original acc {:+.4} (must be >= 0)",
            worst_drop.max(0.0),
            worst_gap
        ),
    ))
}

pub fn run(args: &ReproduceArgs, root: Option<&Path>) -> Result<bool> {
    let cfg: AnalogConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => AnalogConfig::default(),
    };
    cfg.validate()?;
    let only: Vec<u8> = args.only.clone().unwrap_or_else(|| (1..=11).collect());
    let run = RunDir::open(&output_root(root, None), "reproduce", &json!({ "config": cfg }))?;
    let hash = config_hash(&cfg)?;

    // experiment checks share data, base models and the selection; each is
    // charged for the time those took
    let t = Instant::now();
    let needs_selection = only.iter().any(|i| [5, 6, 7, 11].contains(i));
    let setup = if needs_selection || only.contains(&8) {
        info!("building data and base models");
        let data = build_data(&cfg)?;
        let bases = fit_analog_bases(&data, &cfg)?;
        Some((data, bases))
    } else {
        None
    };
    let setup_secs = t.elapsed().as_secs_f64();
    let selection = match (&setup, needs_selection) {
        (Some((data, bases)), true) => {
            info!("selecting hyperparameters");
            let sel = run.cached("selection.json", &hash, || {
                Ok(select_hyperparameters(&data.main, bases, &cfg)?)
            })?;
            write_json(&run.file("selection_configs.json"), &sel.conditions())?;
            Some(sel)
        }
        _ => None,
    };
    let selection_secs = t.elapsed().as_secs_f64();
    let parts = || -> Result<(&AnalogData, &BaseModels, &Selection)> {
        match (&setup, &selection) {
            (Some((d, b)), Some(s)) => Ok((d, b, s)),
            _ => anyhow::bail!("experiment setup missing"),
        }
    };

    let mut checks = vec![];
    for id in 1..=11u8 {
        if !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let (name, limit, (passed, detail), shared): (&str, f64, (bool, String), f64) = match id {
            1 => ("gradient correctness", 30.0, check_gradients()?, 0.0),
            2 => ("Fisher oracle", 5.0, check_fisher()?, 0.0),
            3 => ("reduction identities", 60.0, check_reductions()?, 0.0),
            4 => ("penalty unit value", 1.0, check_unit_value()?, 0.0),
            5 => {
                let (data, bases, sel) = parts()?;
                let results = run.cached("forgetting.json", &hash, || {
                    Ok(forgetting_table(&data.main, bases, sel)?)
                })?;
                emit_report(&results, run.file("forgetting"), &ReportOptions::default())?;
                (
                    "forgetting ordering",
                    600.0,
                    judge_forgetting(&results)?,
                    selection_secs,
                )
            }
            6 => {
                let (data, bases, sel) = parts()?;
                let p = run.cached("pareto.json", &hash, || Ok(pareto_sweep(&data.main, bases, sel, &cfg)?))?;
                write_pareto_points(&run, &p)?;
                ("Pareto dominance", 1200.0, judge_pareto(&p), selection_secs)
            }
            7 => {
                let (data, bases, sel) = parts()?;
                let ls = run.cached("label_shift.json", &hash, || {
                    Ok(label_shift(&data.challenge, bases, sel, &cfg)?)
                })?;
                emit_report(&ls.results, run.file("label_shift"), &ReportOptions::default())?;
                let classes = data.main.original_test.num_classes;
                (
                    "label-shift forgetting",
                    300.0,
                    judge_label_shift(&ls, classes)?,
                    selection_secs,
                )
            }
            8 => {
                let (data, bases) = setup
                    .as_ref()
                    .map(|(d, b)| (d, b))
                    .ok_or_else(|| anyhow::anyhow!("setup missing"))?;
                let p = run.cached("bias_probe.json", &hash, || Ok(bias_probe(&data.main, bases, &cfg)?))?;
                ("claim-only bias probe", 180.0, judge_probe(&p, data), setup_secs)
            }
            9 => ("statistics oracle", 60.0, check_statistics()?, 0.0),
            10 => ("data generators", 60.0, check_generators()?, 0.0),
            _ => {
                let (data, bases, sel) = parts()?;
                let ab = run.cached("ablation.json", &hash, || {
                    Ok(data_ablation(&data.main, bases, sel, &cfg)?)
                })?;
                emit_ablation_report(&ab, run.file("ablation"))?;
                ("ablation curves", 900.0, judge_ablation(&ab)?, selection_secs)
            }
        };
        let check = Check {
            id,
            name,
            passed,
            detail,
            seconds: shared + t.elapsed().as_secs_f64(),
            limit,
        };
        println!("{}", check.line());
        checks.push(check);
    }
    let text: String = checks.iter().map(|c| c.line() + "\n").collect();
    write_atomic(&run.file("acceptance.txt"), text.as_bytes())?;
    let passed = checks.iter().filter(|c| c.ok()).count();
    println!(
        "{passed}/{} checks passed; artifacts in {}",
        checks.len(),
        run.path.display()
    );
    Ok(passed == checks.len())
}

fn write_pareto_points(run: &RunDir, p: &ParetoSweep) -> Result<()> {
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record([
        "condition",
        "learning_rate",
        "lambda",
        "epochs",
        "original_acc",
        "ft_acc",
        "on_frontier",
    ])?;
    for (name, pts, frontier) in [
        ("ft", &p.ft_points, &p.ft_frontier),
        ("ft_l2", &p.l2_points, &p.l2_frontier),
        ("ft_ewc", &p.ewc_points, &p.ewc_frontier),
    ] {
        for q in pts {
            let on = frontier.iter().any(|f| f.x == q.original_acc && f.y == q.ft_acc);
            w.write_record([
                name.to_string(),
                q.learning_rate.to_string(),
                q.lambda.to_string(),
                q.epochs.to_string(),
                q.original_acc.to_string(),
                q.ft_acc.to_string(),
                on.to_string(),
            ])?;
        }
    }
    write_atomic(&run.file("pareto_points.csv"), &w.into_inner()?)?;
    Ok(())
}
