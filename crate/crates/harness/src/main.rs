use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dacctl::comparators::{best_linear_comparator, offline_best_dac};
use dacctl::config::ExperimentConfig;
use dacctl::error::{HarnessError, Result};
use dacctl::experiment::{resolved_h, run_experiment, Overrides};
use dacctl::verify::{verify_suite, Status, VerifyOptions};
use dacctl_core::learners::Variant;
use dacctl_core::linalg::{max_eigenvalue_sym, min_eigenvalue_sym};
use dacctl_core::policy::PolicyClass;
use dacctl_core::spectral::convexity_floor;
use dacctl_core::surrogate::{read_matrix_file, write_matrix_file, SurrogateModel};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dacctl", version, about = "Online control with disturbance-action policies")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    replicas: Option<usize>,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum VariantArg {
    Ogd,
    Ong,
}

#[derive(Subcommand)]
enum Command {
    /// Run learners and comparators and write CSV/JSON/TSV outputs.
    Run(Common),
    /// Run the numerical verification suite and print a JSON report.
    Verify {
        #[arg(long)]
        reduced: bool,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the best linear gain and the offline DAC policy only.
    Comparator(Common),
    /// Summarize E[J^T J] for a config, or read a saved matrix.
    InspectGram {
        #[arg(long, conflicts_with = "file")]
        config: Option<PathBuf>,
        #[arg(long)]
        file: Option<PathBuf>,
        /// Write the matrix for `--config` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    let ov = Overrides {
        seed: common.seed,
        out_dir: common.out.clone(),
        variant: common.variant.map(|v| match v {
            VariantArg::Ogd => Variant::Ogd,
            VariantArg::Ong => Variant::Ong,
        }),
        replicas: common.replicas,
    };
    ov.apply(&mut cfg)?;
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn cmd_run(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let outcome = run_experiment(&cfg, &out)?;
    let summary: Vec<_> = outcome
        .report
        .variants
        .iter()
        .map(|v| {
            json!({
                "variant": v.variant,
                "h": v.h,
                "mean_step_cost": v.mean_step_cost,
                "final_regret": v.final_regret,
                "final_regret_se": v.final_regret_se,
                "cost_ratio_to_offline_dac": v.cost_ratio_to_offline_dac,
                "ratio_strictly_decreasing": v.fits.ratio_strictly_decreasing,
                "rss_ratio": v.fits.rss_ratio,
            })
        })
        .collect();
    print_json(&json!({ "out_dir": out, "variants": summary }));
    Ok(())
}

fn cmd_comparator(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let setup = cfg.build()?;
    let noises: Vec<_> = (0..cfg.replicas)
        .map(|r| cfg.noise_realization(&setup.noise_model, r))
        .collect();
    let best = best_linear_comparator(&setup.sys, &noises, &setup.costs, &cfg.comparator)?;
    let h = resolved_h(&cfg, &setup);
    let class = PolicyClass::from_certificate(h, setup.cert.kappa, setup.cert.gamma, setup.sys.kappa_b(), setup.sys.du(), setup.sys.dx())?;
    let model = SurrogateModel::new(&setup.sys, &setup.k_fixed, &setup.noise_model, h)?;
    let offline = offline_best_dac(&model, &setup.costs, &class)?;
    print_json(&json!({ "h": h, "best_linear": best, "offline_dac": offline }));
    Ok(())
}

fn gram_summary(p: &nalgebra::DMatrix<f64>) -> serde_json::Value {
    json!({
        "rows": p.nrows(),
        "cols": p.ncols(),
        "lambda_min": min_eigenvalue_sym(p),
        "lambda_max": max_eigenvalue_sym(p),
        "trace": p.trace(),
    })
}

fn cmd_inspect(config: Option<&Path>, file: Option<&Path>, out: Option<&Path>) -> Result<()> {
    match (config, file) {
        (_, Some(f)) => {
            let p = read_matrix_file(f).map_err(|e| HarnessError::io(f, e))?;
            print_json(&gram_summary(&p));
        }
        (Some(c), None) => {
            let cfg = ExperimentConfig::load(c)?;
            let setup = cfg.build()?;
            let h = resolved_h(&cfg, &setup);
            let model = SurrogateModel::new(&setup.sys, &setup.k_fixed, &setup.noise_model, h)?;
            let mut v = gram_summary(model.p_gram());
            v["h"] = json!(h);
            v["floor"] = json!(convexity_floor(setup.cert.kappa, setup.cert.gamma, setup.noise_model.sigma_sq()));
            if let Some(o) = out {
                write_matrix_file(o, model.p_gram()).map_err(|e| HarnessError::io(o, e))?;
                v["written"] = json!(o);
            }
            print_json(&v);
        }
        (None, None) => return Err(HarnessError::Config("inspect-gram needs --config or --file".into())),
    }
    Ok(())
}

fn cmd_verify(reduced: bool, seed: u64, out: Option<&Path>) -> Result<()> {
    let rep = verify_suite(VerifyOptions { reduced, seed })?;
    let text = serde_json::to_string_pretty(&rep).expect("serializable");
    println!("{text}");
    if let Some(o) = out {
        std::fs::write(o, &text).map_err(|e| HarnessError::io(o, e))?;
    }
    if rep.overall == Status::Fail {
        let failed: Vec<_> = rep.checks.iter().filter(|c| c.status == Status::Fail).map(|c| c.name.as_str()).collect();
        return Err(HarnessError::Verification(failed.join(", ")));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Run(c) => cmd_run(c),
        Command::Comparator(c) => cmd_comparator(c),
        Command::Verify { reduced, seed, out } => cmd_verify(*reduced, *seed, out.as_deref()),
        Command::InspectGram { config, file, out } => cmd_inspect(config.as_deref(), file.as_deref(), out.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
