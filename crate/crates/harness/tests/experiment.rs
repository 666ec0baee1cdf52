use std::path::Path;

use dacctl::config::ExperimentConfig;
use dacctl::experiment::{comparator_csv_name, learner_csv_name, run_experiment};
use dacctl_core::learners::Variant;

fn config(horizon: usize, replicas: usize) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.horizon = horizon;
    cfg.replicas = replicas;
    cfg
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn regret_recomputed_from_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(300, 3);
    let outcome = run_experiment(&cfg, tmp.path()).unwrap();
    let n = cfg.replicas as f64;
    let best: Vec<Vec<f64>> = (0..cfg.replicas)
        .map(|r| column(&tmp.path().join(comparator_csv_name(r)), "best_linear"))
        .collect();
    for v in &outcome.report.variants {
        let learner: Vec<Vec<f64>> = (0..cfg.replicas)
            .map(|r| column(&tmp.path().join(learner_csv_name(r, v.variant)), "cost"))
            .collect();
        let mut acc = 0.0;
        let mut series = Vec::new();
        for t in 0..cfg.horizon {
            let l = learner.iter().map(|c| c[t]).sum::<f64>() / n;
            let c = best.iter().map(|c| c[t]).sum::<f64>() / n;
            acc += l - c;
            series.push(acc);
        }
        assert_eq!(series, v.regret_series);
        assert_eq!(acc, v.final_regret);

        let tsv = std::fs::read_to_string(tmp.path().join(format!("regret_{}.tsv", v.variant))).unwrap();
        let mut rows = tsv.lines();
        assert_eq!(rows.next().unwrap(), "T\tregret\tlog2_fit\tsqrt_fit\tregret_se");
        for row in rows {
            let f: Vec<&str> = row.split('\t').collect();
            let t: usize = f[0].parse().unwrap();
            assert_eq!(f[1].parse::<f64>().unwrap(), series[t - 1]);
        }
    }
}

#[test]
fn seed_changes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(128, 2);
    run_experiment(&cfg, &tmp.path().join("a")).unwrap();
    cfg.noise.seed += 1;
    run_experiment(&cfg, &tmp.path().join("b")).unwrap();
    let name = comparator_csv_name(0);
    let a = std::fs::read(tmp.path().join("a").join(&name)).unwrap();
    let b = std::fs::read(tmp.path().join("b").join(&name)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn ong_regret_within_twice_ogd() {
    let tmp = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&config(4096, 4), tmp.path()).unwrap();
    let final_regret = |want: Variant| {
        outcome
            .report
            .variants
            .iter()
            .find(|v| v.variant == want)
            .unwrap()
            .final_regret
    };
    let (ogd, ong) = (final_regret(Variant::Ogd), final_regret(Variant::Ong));
    assert!(ogd > 0.0);
    assert!(ong.abs() <= 2.0 * ogd.abs(), "ogd {ogd}, ong {ong}");
}

#[test]
fn surrogate_gap_of_learner_run_within_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&config(1024, 1), tmp.path()).unwrap();
    for v in &outcome.report.variants {
        assert!(v.surrogate_check.within_bound, "{:?}", v.surrogate_check);
    }
}
