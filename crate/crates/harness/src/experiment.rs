//! Runs learners and comparators over replicas and writes the result files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dacctl_core::lds::StageCost;
use dacctl_core::learners::{default_horizon, run_online_control, ControlProblem, RunLog, StepSchedule, Variant};
use dacctl_core::linalg::{min_eigenvalue_sym, nested_rows};
use dacctl_core::policy::{DacPolicy, PolicyClass};
use dacctl_core::surrogate::{write_matrix_file, SurrogateModel};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::comparators::{best_linear_comparator, dac_per_step, offline_best_dac, LinearComparator, LinearEvaluator};
use crate::config::{ExperimentConfig, Setup};
use crate::error::{HarnessError, Result};
use crate::report::{cumulative_regret, mean_series, regret_table, standard_error, FitDiagnostics, RegretRow};
use crate::sufficiency::{surrogate_vs_realized, ClassConstants, GapReport};

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub replicas: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.noise.seed = s;
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = Some(o.clone());
        }
        if let Some(v) = self.variant {
            cfg.variants = vec![v];
        }
        if let Some(r) = self.replicas {
            cfg.replicas = r;
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SetupSummary {
    pub dx: usize,
    pub du: usize,
    pub k_fixed: Vec<Vec<f64>>,
    pub kappa: f64,
    pub gamma: f64,
    pub kappa_b: f64,
    pub sigma_sq: f64,
    pub h: usize,
    pub class_radii: Vec<f64>,
    pub p_gram_min_eigenvalue: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OfflineDacSummary {
    pub mean_total: f64,
    pub mean_surrogate: f64,
    pub iterations: usize,
    pub gradient_mapping: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparatorSummary {
    pub best_linear: LinearComparator,
    pub fixed_k_mean_total: f64,
    pub offline_dac: Option<OfflineDacSummary>,
    pub best_linear_mean_costs: Vec<f64>,
    pub fixed_k_mean_costs: Vec<f64>,
    pub offline_dac_mean_costs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub h: usize,
    pub schedule: StepSchedule,
    pub mean_total: f64,
    /// Average per-step cost over the whole run.
    pub mean_step_cost: f64,
    pub final_regret: f64,
    pub final_regret_se: f64,
    /// Learner average per-step cost over the offline DAC one.
    pub cost_ratio_to_offline_dac: Option<f64>,
    pub regret_vs_offline_dac: Option<f64>,
    pub fits: FitDiagnostics,
    pub table: Vec<RegretRow>,
    /// Replica 0.
    pub surrogate_check: GapReport,
    pub learner_mean_costs: Vec<f64>,
    pub regret_series: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegretReport {
    pub config: ExperimentConfig,
    pub setup: SetupSummary,
    pub comparators: ComparatorSummary,
    pub variants: Vec<VariantReport>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: RegretReport,
    pub files: Vec<PathBuf>,
}

struct LearnerColumns {
    costs: Vec<f64>,
    x_norm: Vec<f64>,
    u_norm: Vec<f64>,
    eta: Vec<f64>,
}

impl LearnerColumns {
    fn from_log(log: &RunLog) -> Self {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Self {
            costs: log.records.iter().map(|r| r.cost).collect(),
            x_norm: log.records.iter().map(|r| norm(&r.x)).collect(),
            u_norm: log.records.iter().map(|r| norm(&r.u)).collect(),
            eta: log.records.iter().map(|r| r.eta).collect(),
        }
    }
}

struct ReplicaResult {
    learners: Vec<LearnerColumns>,
    best_linear: Vec<f64>,
    fixed_k: Vec<f64>,
    offline_dac: Option<Vec<f64>>,
    /// Replica 0 only.
    first: Option<FirstReplica>,
}

/// Snapshots, final policy, schedule and memory length of one learner run.
type LearnerTrace = (Vec<(usize, DacPolicy)>, DacPolicy, StepSchedule, usize);

struct FirstReplica {
    gaps: Vec<GapReport>,
    logs: Vec<LearnerTrace>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| HarnessError::Numeric(format!("serialization failed: {e}")))
}

fn learner_csv(cols: &LearnerColumns) -> String {
    let mut s = String::from("t,cost,x_norm,u_norm,eta\n");
    for t in 0..cols.costs.len() {
        let _ = writeln!(s, "{},{},{},{},{}", t, cols.costs[t], cols.x_norm[t], cols.u_norm[t], cols.eta[t]);
    }
    s
}

fn comparator_csv(r: &ReplicaResult) -> String {
    let mut s = String::from("t,best_linear,fixed_k");
    s.push_str(if r.offline_dac.is_some() { ",offline_dac\n" } else { "\n" });
    for t in 0..r.best_linear.len() {
        let _ = write!(s, "{},{},{}", t, r.best_linear[t], r.fixed_k[t]);
        if let Some(d) = &r.offline_dac {
            let _ = write!(s, ",{}", d[t]);
        }
        s.push('\n');
    }
    s
}

pub fn learner_csv_name(replica: usize, variant: Variant) -> String {
    format!("replica_{replica:03}_{variant}.csv")
}

pub fn comparator_csv_name(replica: usize) -> String {
    format!("replica_{replica:03}_comparators.csv")
}

/// Memory length used by the learners and the offline DAC comparator.
pub fn resolved_h(cfg: &ExperimentConfig, setup: &Setup) -> usize {
    cfg.learner
        .h
        .unwrap_or_else(|| default_horizon(cfg.horizon, setup.cert.kappa, setup.cert.gamma))
}

pub fn class_constants(cfg: &ExperimentConfig, setup: &Setup) -> ClassConstants {
    ClassConstants {
        kappa: setup.cert.kappa,
        gamma: setup.cert.gamma,
        kappa_b: setup.sys.kappa_b(),
        w: cfg.noise.radius,
    }
}

/// Runs every replica and variant and writes all outputs under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let setup = cfg.build()?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let (dx, du) = (setup.sys.dx(), setup.sys.du());
    let h = resolved_h(cfg, &setup);
    let class = PolicyClass::from_certificate(h, setup.cert.kappa, setup.cert.gamma, setup.sys.kappa_b(), du, dx)?;
    let model = SurrogateModel::new(&setup.sys, &setup.k_fixed, &setup.noise_model, h)?;
    log::info!("H = {h}, kappa = {}, gamma = {}", setup.cert.kappa, setup.cert.gamma);

    let noises: Vec<Vec<DVector<f64>>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| cfg.noise_realization(&setup.noise_model, r))
        .collect();
    let best = best_linear_comparator(&setup.sys, &noises, &setup.costs, &cfg.comparator)?;
    let k_star = best.gain();
    log::info!("best linear gain {:?}, mean total {}", best.k, best.mean_total);
    let quadratic = setup.costs.iter().all(|c| c.quadratic().is_some());
    let offline = if cfg.comparator.offline_dac && quadratic {
        Some(offline_best_dac(&model, &setup.costs, &class)?)
    } else {
        None
    };
    let consts = class_constants(cfg, &setup);
    let prob = ControlProblem {
        sys: &setup.sys,
        k_fixed: &setup.k_fixed,
        cert: &setup.cert,
        noise_model: &setup.noise_model,
    };
    let eval = LinearEvaluator::new(&setup.sys, &setup.costs);

    let replicas: Vec<ReplicaResult> = noises
        .par_iter()
        .enumerate()
        .map(|(r, noise)| -> Result<ReplicaResult> {
            let mut learners = Vec::with_capacity(cfg.variants.len());
            let mut first = (r == 0).then(|| FirstReplica {
                gaps: Vec::new(),
                logs: Vec::new(),
            });
            for &variant in &cfg.variants {
                let mut lc = cfg.learner_config(variant);
                lc.h = Some(h);
                lc.record_history = r == 0;
                let log = run_online_control(&prob, noise, &setup.costs, &lc)?;
                let cols = LearnerColumns::from_log(&log);
                write_file(&out_dir.join(learner_csv_name(r, variant)), &learner_csv(&cols))?;
                if let Some(f) = first.as_mut() {
                    f.gaps.push(surrogate_vs_realized(&log, &model, &setup.costs, &consts)?);
                    f.logs.push((log.snapshots, log.final_policy, log.schedule, log.h));
                }
                learners.push(cols);
            }
            let res = ReplicaResult {
                learners,
                best_linear: eval.per_step(&k_star, noise)?,
                fixed_k: eval.per_step(&setup.k_fixed, noise)?,
                offline_dac: offline
                    .as_ref()
                    .map(|o| dac_per_step(&setup.sys, &setup.k_fixed, &o.policy, noise, &setup.costs))
                    .transpose()?,
                first,
            };
            write_file(&out_dir.join(comparator_csv_name(r)), &comparator_csv(&res))?;
            Ok(res)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut files: Vec<PathBuf> = Vec::new();
    for r in 0..cfg.replicas {
        for &v in &cfg.variants {
            files.push(out_dir.join(learner_csv_name(r, v)));
        }
        files.push(out_dir.join(comparator_csv_name(r)));
    }

    let t_len = cfg.horizon;
    let collect = |f: &dyn Fn(&ReplicaResult) -> &Vec<f64>| -> Vec<Vec<f64>> { replicas.iter().map(|r| f(r).clone()).collect() };
    let best_costs = collect(&|r| &r.best_linear);
    let best_mean = mean_series(&best_costs);
    let fixed_mean = mean_series(&collect(&|r| &r.fixed_k));
    let offline_mean = offline
        .as_ref()
        .map(|_| mean_series(&replicas.iter().map(|r| r.offline_dac.clone().expect("offline")).collect::<Vec<_>>()));
    let first = replicas[0].first.as_ref().expect("replica 0");
    let fit_from = 1usize << cfg.report.fit_min_log2;

    let mut variants = Vec::new();
    for (vi, &variant) in cfg.variants.iter().enumerate() {
        let per_rep: Vec<Vec<f64>> = replicas.iter().map(|r| r.learners[vi].costs.clone()).collect();
        let mean = mean_series(&per_rep);
        let regret = cumulative_regret(&mean, &best_mean);
        let per_rep_regret: Vec<Vec<f64>> = per_rep.iter().zip(&best_costs).map(|(l, c)| cumulative_regret(l, c)).collect();
        let (table, fits) = regret_table(&regret, &per_rep_regret, fit_from);
        let total: f64 = mean.iter().sum();
        let offline_total = offline_mean.as_ref().map(|m| m.iter().sum::<f64>());
        let (snapshots, final_policy, schedule, _) = &first.logs[vi];
        let finals: Vec<f64> = per_rep_regret.iter().map(|v| v[t_len - 1]).collect();

        let mut tsv = String::from("T\tregret\tlog2_fit\tsqrt_fit\tregret_se\n");
        for row in &table {
            let _ = writeln!(tsv, "{}\t{}\t{}\t{}\t{}", row.t, row.regret, row.log_squared_fit, row.sqrt_fit, row.regret_se);
        }
        let tsv_path = out_dir.join(format!("regret_{variant}.tsv"));
        write_file(&tsv_path, &tsv)?;
        files.push(tsv_path);

        #[derive(Serialize)]
        struct PolicyFile<'a> {
            config: &'a ExperimentConfig,
            variant: Variant,
            h: usize,
            snapshots: Vec<Snapshot<'a>>,
            final_policy: &'a DacPolicy,
        }
        #[derive(Serialize)]
        struct Snapshot<'a> {
            t: usize,
            policy: &'a DacPolicy,
        }
        let pf = PolicyFile {
            config: cfg,
            variant,
            h,
            snapshots: snapshots.iter().map(|(t, p)| Snapshot { t: *t, policy: p }).collect(),
            final_policy,
        };
        let pol_path = out_dir.join(format!("policies_{variant}.json"));
        write_file(&pol_path, &to_json(&pf)?)?;
        files.push(pol_path);

        variants.push(VariantReport {
            variant,
            h,
            schedule: *schedule,
            mean_total: total,
            mean_step_cost: total / t_len as f64,
            final_regret: regret[t_len - 1],
            final_regret_se: standard_error(&finals),
            cost_ratio_to_offline_dac: offline_total.map(|o| total / o),
            regret_vs_offline_dac: offline_total.map(|o| total - o),
            fits,
            table,
            surrogate_check: first.gaps[vi].clone(),
            learner_mean_costs: mean,
            regret_series: regret,
        });
    }

    let report = RegretReport {
        config: cfg.clone(),
        setup: SetupSummary {
            dx,
            du,
            k_fixed: nested_rows(&setup.k_fixed),
            kappa: setup.cert.kappa,
            gamma: setup.cert.gamma,
            kappa_b: setup.sys.kappa_b(),
            sigma_sq: setup.noise_model.sigma_sq(),
            h,
            class_radii: class.radii().to_vec(),
            p_gram_min_eigenvalue: min_eigenvalue_sym(model.p_gram()),
        },
        comparators: ComparatorSummary {
            fixed_k_mean_total: fixed_mean.iter().sum(),
            offline_dac: offline.as_ref().map(|o| OfflineDacSummary {
                mean_total: offline_mean.as_ref().expect("offline").iter().sum(),
                mean_surrogate: o.mean_surrogate,
                iterations: o.iterations,
                gradient_mapping: o.gradient_mapping,
            }),
            best_linear: best,
            best_linear_mean_costs: best_mean,
            fixed_k_mean_costs: fixed_mean,
            offline_dac_mean_costs: offline_mean,
        },
        variants,
    };
    let report_path = out_dir.join("report.json");
    write_file(&report_path, &to_json(&report)?)?;
    files.push(report_path);
    let gram_path = out_dir.join("p_gram.bin");
    write_matrix_file(&gram_path, model.p_gram()).map_err(|e| HarnessError::io(&gram_path, e))?;
    files.push(gram_path);
    Ok(ExperimentOutcome { report, files })
}
