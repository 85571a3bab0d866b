use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::*;
use crate::data::{Instance, Provenance, Vocab};
use crate::model::{Init, ModelDims};
use crate::train::{Condition, RunResult, SeedResult};

#[test]
fn accuracy_counts_matches() {
    assert_eq!(accuracy_of(&[0, 1, 2, 1], &[0, 1, 2, 2]).unwrap(), 0.75);
    assert_eq!(accuracy_of(&[1, 1], &[1, 1]).unwrap(), 1.0);
    assert!(accuracy_of(&[], &[]).is_err());
    assert!(accuracy_of(&[0], &[0, 1]).is_err());
}

#[test]
fn accuracy_of_constant_model_is_class_share() {
    // zero output layer: uniform scores, argmax ties go to class 0
    let m = Classifier::pair(ModelDims::new(4), Init::Zeros).unwrap();
    let mut ds = Dataset::new(Vocab::from_tokens(["a", "b", "c", "d"]), 3, Provenance::external("t"));
    for (i, label) in [0, 1, 2, 0].into_iter().enumerate() {
        ds.instances.push(Instance {
            id: i.to_string(),
            claim: vec![i],
            evidence: vec![3 - i],
            label,
        });
    }
    assert_eq!(accuracy(&m, &ds).unwrap(), 0.5);
    ds.instances.clear();
    assert!(matches!(accuracy(&m, &ds), Err(Error::EmptyDataset(_))));
}

#[test]
fn stats_use_sample_std() {
    let s = AccuracyStats::from_values(&[0.8, 0.9, 1.0]).unwrap();
    assert_abs_diff_eq!(s.mean, 0.9, epsilon = 1e-15);
    assert_abs_diff_eq!(s.std, 0.1, epsilon = 1e-15);
    assert_eq!(s.n, 3);
    assert_eq!(AccuracyStats::from_values(&[0.5]).unwrap().std, 0.0);
    assert!(AccuracyStats::from_values(&[]).is_err());
}

#[test]
fn t_test_reference_value() {
    let r = unpaired_t_test(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
    // pooled s² = 1, se = sqrt(2/3)
    assert_abs_diff_eq!(r.t, -1.0 / (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(r.t, -1.224745, epsilon = 1e-6);
    assert_eq!(r.df, 4.0);
    assert_abs_diff_eq!(r.p, 0.2878, epsilon = 1e-3);
    let oracle = 2.0 * StudentsT::new(0.0, 1.0, 4.0).unwrap().cdf(r.t);
    assert_abs_diff_eq!(r.p, oracle, epsilon = 1e-9);
}

#[test]
fn t_test_degenerate_cases() {
    let same = unpaired_t_test(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
    assert_eq!((same.t, same.p), (0.0, 1.0));
    let apart = unpaired_t_test(&[0.5, 0.5], &[0.7, 0.7]).unwrap();
    assert_eq!(apart.p, 0.0);
    assert_eq!(apart.t, f64::NEG_INFINITY);
    let ident = unpaired_t_test(&[0.1, 0.4, 0.3], &[0.1, 0.4, 0.3]).unwrap();
    assert_eq!((ident.t, ident.p), (0.0, 1.0));
    assert!(unpaired_t_test(&[1.0], &[1.0, 2.0]).is_err());
    assert!(unpaired_t_test(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
}

#[test]
fn welch_matches_independent_oracle() {
    let a = [0.81, 0.84, 0.79, 0.86, 0.83];
    let b = [0.70, 0.92, 0.75, 0.88, 0.65];
    let r = unpaired_t_test_with(&a, &b, Variance::Welch).unwrap();
    let (ma, mb) = (a.iter().sum::<f64>() / 5.0, b.iter().sum::<f64>() / 5.0);
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / 4.0;
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / 4.0;
    let se2 = va / 5.0 + vb / 5.0;
    let df = se2 * se2 / ((va / 5.0).powi(2) / 4.0 + (vb / 5.0).powi(2) / 4.0);
    assert_abs_diff_eq!(r.t, (ma - mb) / se2.sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(r.df, df, epsilon = 1e-9);
    let oracle = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(r.t.abs()));
    assert_abs_diff_eq!(r.p, oracle, epsilon = 1e-8);
    assert_eq!(r.variance, Variance::Welch);
}

#[test]
fn incomplete_beta_known_values() {
    assert_eq!(regularized_incomplete_beta(0.0, 2.0, 3.0), 0.0);
    assert_eq!(regularized_incomplete_beta(1.0, 2.0, 3.0), 1.0);
    // I_x(1, 1) = x; I_x(a, 1) = x^a
    assert_abs_diff_eq!(regularized_incomplete_beta(0.3, 1.0, 1.0), 0.3, epsilon = 1e-12);
    assert_abs_diff_eq!(regularized_incomplete_beta(0.6, 3.0, 1.0), 0.216, epsilon = 1e-12);
    // symmetry I_x(a, b) = 1 − I_{1−x}(b, a)
    let (x, a, b) = (0.37, 2.5, 0.5);
    assert_abs_diff_eq!(
        regularized_incomplete_beta(x, a, b),
        1.0 - regularized_incomplete_beta(1.0 - x, b, a),
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(ln_gamma(5.0), 24f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), epsilon = 1e-12);
}

fn pt(x: f64, y: f64) -> ParetoPoint {
    ParetoPoint::new(x, y, format!("{x},{y}"))
}

#[test]
fn frontier_examples() {
    assert_eq!(pareto_frontier(&[pt(0.5, 0.5)]).unwrap(), vec![pt(0.5, 0.5)]);
    let f = pareto_frontier(&[pt(0.8, 0.7), pt(0.7, 0.9), pt(0.6, 0.6)]).unwrap();
    assert_eq!(f, vec![pt(0.8, 0.7), pt(0.7, 0.9)]);
    // exact duplicates do not dominate each other
    let f = pareto_frontier(&[pt(0.5, 0.5), pt(0.5, 0.5), pt(0.5, 0.4)]).unwrap();
    assert_eq!(f.len(), 2);
    assert!(pareto_frontier(&[]).is_err());
}

#[test]
fn dominance_examples() {
    let f = vec![pt(0.8, 0.7), pt(0.7, 0.9)];
    assert!(frontier_dominates(&f, &f).unwrap());
    assert!(frontier_dominates(&[pt(1.0, 1.0)], &[pt(0.2, 0.9), pt(0.99, 0.1)]).unwrap());
    assert!(!frontier_dominates(&[pt(0.8, 0.7)], &f).unwrap());
    assert!(frontier_dominates(&[], &f).is_err());
}

fn brute_force_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    points
        .iter()
        .filter(|p| !points.iter().any(|q| q.dominates(p)))
        .cloned()
        .collect()
}

#[test]
fn frontier_matches_brute_force_on_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for round in 0..20 {
        // coarse grids force ties on one or both axes
        let grid = [10.0, 100.0, 1e6][round % 3];
        let points: Vec<ParetoPoint> = (0..1000)
            .map(|_| {
                pt(
                    (rng.gen::<f64>() * grid).round() / grid,
                    (rng.gen::<f64>() * grid).round() / grid,
                )
            })
            .collect();
        assert_eq!(pareto_frontier(&points).unwrap(), brute_force_frontier(&points));
    }
}

proptest! {
    #[test]
    fn frontier_properties(raw in prop::collection::vec((0u8..20, 0u8..20), 1..60)) {
        let points: Vec<ParetoPoint> = raw.iter().map(|&(x, y)| pt(x as f64 / 20.0, y as f64 / 20.0)).collect();
        let f = pareto_frontier(&points).unwrap();
        for a in &f {
            for b in &f {
                prop_assert!(!a.dominates(b));
            }
        }
        prop_assert_eq!(pareto_frontier(&f).unwrap(), f.clone());
        prop_assert!(frontier_dominates(&f, &points).unwrap());
    }

    #[test]
    fn t_test_symmetry_and_shift(
        a in prop::collection::vec(0.0f64..1.0, 2..8),
        b in prop::collection::vec(0.0f64..1.0, 2..8),
        shift in -0.5f64..0.5,
    ) {
        let r = unpaired_t_test(&a, &b).unwrap();
        let s = unpaired_t_test(&b, &a).unwrap();
        prop_assert!((r.t + s.t).abs() <= 1e-9 * (1.0 + r.t.abs()));
        prop_assert!((r.p - s.p).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.p));
        let a2: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + shift).collect();
        let u = unpaired_t_test(&a2, &b2).unwrap();
        prop_assert!((u.t - r.t).abs() <= 1e-6 * (1.0 + r.t.abs()));
        prop_assert!((u.p - r.p).abs() <= 1e-6);
    }

    #[test]
    fn p_decreases_with_abs_t(t1 in 0.0f64..8.0, dt in 0.0f64..4.0, df in 1.0f64..30.0) {
        let (p1, p2) = (t_two_sided_p(t1, df), t_two_sided_p(t1 + dt, df));
        prop_assert!(p2 <= p1 + 1e-12);
        let oracle = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t1));
        prop_assert!((p1 - oracle).abs() <= 1e-8);
    }
}

fn run(name: &str, orig: &[f64], ft: &[f64]) -> RunResult {
    RunResult {
        condition: name.into(),
        config_hash: format!("hash-{name}"),
        config: Condition::original(),
        seeds: orig
            .iter()
            .zip(ft)
            .enumerate()
            .map(|(i, (&o, &f))| SeedResult {
                seed: i as u64 + 1,
                original_test_acc: o,
                ft_test_acc: f,
                history: vec![],
            })
            .collect(),
    }
}

fn sample_results() -> Vec<RunResult> {
    vec![
        run(
            "original",
            &[0.88, 0.89, 0.885, 0.887, 0.884],
            &[0.70, 0.72, 0.69, 0.71, 0.70],
        ),
        run(
            "ft",
            &[0.85, 0.856, 0.858, 0.853, 0.86],
            &[0.93, 0.925, 0.935, 0.93, 0.928],
        ),
        run(
            "ft_l2",
            &[0.866, 0.87, 0.868, 0.864, 0.872],
            &[0.929, 0.93, 0.927, 0.931, 0.926],
        ),
        run(
            "ft_ewc",
            &[0.884, 0.88, 0.889, 0.878, 0.89],
            &[0.924, 0.93, 0.918, 0.926, 0.922],
        ),
    ]
}

#[test]
fn report_rows_markers_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let results = sample_results();
    let files = emit_report(&results, dir.path(), &ReportOptions::default()).unwrap();
    let csv = std::fs::read_to_string(&files.csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "condition,seed,original_acc,ft_acc,config_hash");
    assert_eq!(lines.len(), 1 + 4 * 5);
    assert_eq!(lines[1], "original,1,0.88,0.7,hash-original");

    let summary: Summary = serde_json::from_str(&std::fs::read_to_string(&files.summary).unwrap()).unwrap();
    let ewc = summary.conditions.iter().find(|c| c.condition == "ft_ewc").unwrap();
    // better than FT and FT+L2 on the original task, and than original on FT-test
    assert_eq!(ewc.original.markers, "*†");
    assert!(ewc.ft.markers.contains('#'));
    let ft_vs_ewc = summary
        .comparisons
        .iter()
        .find(|c| c.a == "ft" && c.b == "ft_ewc" && c.metric == "ft")
        .unwrap();
    // worse than FT on FT-test, not significantly: the ♦ marker
    if !ft_vs_ewc.significant {
        assert!(ewc.ft.markers.contains('♦'));
    }
    for c in &summary.conditions {
        for m in [&c.original, &c.ft] {
            for sym in ["*", "†", "#"] {
                if m.markers.contains(sym) {
                    let reference = match sym {
                        "*" => "ft",
                        "†" => "ft_l2",
                        _ => "original",
                    };
                    let metric = if std::ptr::eq(m, &c.original) { "original" } else { "ft" };
                    let cmp = summary
                        .comparisons
                        .iter()
                        .find(|x| {
                            x.metric == metric
                                && ((x.a == c.condition && x.b == reference)
                                    || (x.b == c.condition && x.a == reference))
                        })
                        .unwrap();
                    assert!(cmp.p < 0.05);
                }
            }
        }
    }
    assert_eq!(summary.comparisons.len(), 6 * 2);

    let first = (
        std::fs::read(&files.csv).unwrap(),
        std::fs::read(&files.summary).unwrap(),
    );
    emit_report(&results, dir.path(), &ReportOptions::default()).unwrap();
    assert_eq!(
        first,
        (
            std::fs::read(&files.csv).unwrap(),
            std::fs::read(&files.summary).unwrap()
        )
    );
}

#[test]
fn report_quotes_fields_and_rejects_empty() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = sample_results();
    r[0].condition = "odd, \"name\"".into();
    let files = emit_report(&r, dir.path(), &ReportOptions::default()).unwrap();
    let csv = std::fs::read_to_string(files.csv).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("\"odd, \"\"name\"\"\",1,"));
    assert!(emit_report(&[], dir.path(), &ReportOptions::default()).is_err());
    let blocked = dir.path().join("file");
    std::fs::write(&blocked, "x").unwrap();
    assert!(emit_report(&r, blocked.join("sub"), &ReportOptions::default()).is_err());
}

#[test]
fn significant_digits() {
    assert_eq!(format_sig(0.1 + 0.2), "0.3");
    assert_eq!(format_sig(2.0 / 3.0), "0.666666666667");
    assert_eq!(format_sig(1.0), "1");
    assert_eq!(format_sig(123456.7890123456), "123456.789012");
}

#[test]
fn ablation_report_columns() {
    let dir = tempfile::tempdir().unwrap();
    let results = vec![
        crate::train::AblationResult {
            size: 25,
            results: sample_results(),
        },
        crate::train::AblationResult {
            size: 50,
            results: sample_results(),
        },
    ];
    let files = emit_ablation_report(&results, dir.path()).unwrap();
    let raw = std::fs::read_to_string(files.csv).unwrap();
    assert!(raw.starts_with("size,condition,seed,ft_acc_solid,original_acc_dashed,config_hash\n"));
    assert_eq!(raw.lines().count(), 1 + 2 * 4 * 5);
    let plot = std::fs::read_to_string(files.summary).unwrap();
    assert!(plot.starts_with("size,condition,ft_mean_solid,ft_std_solid,original_mean_dashed,original_std_dashed\n"));
    assert_eq!(plot.lines().count(), 1 + 2 * 4);
}
