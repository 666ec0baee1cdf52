//! Numerical checks of the spectral and surrogate bounds, emitted as one report.

use std::time::Instant;

use dacctl_core::lds::{CostFunction, LinearSystem, NoiseModel};
use dacctl_core::linalg::{max_abs, min_eigenvalue_sym, spectral_norm};
use dacctl_core::policy::DacPolicy;
use dacctl_core::rng::substream;
use dacctl_core::spectral::{
    assemble_inverse, certify_strong_convexity, g_matrix_multidim, g_psi, g_psi_report, inf_norm_c, inverse_coefficients,
    y_matrix,
};
use dacctl_core::stability::{certify, closed_loop, default_gain, StabilityCertificate};
use dacctl_core::surrogate::{monte_carlo_gram, surrogate_cost_and_grad, EvalMode, SurrogateModel};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    pub cases: usize,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub threshold: f64,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    fn skipped(name: &str) -> Self {
        Self {
            name: name.into(),
            status: Status::Skipped,
            cases: 0,
            worst: 0.0,
            threshold: 0.0,
            detail: "skipped by the reduced sweep".into(),
            seconds: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

fn finish(name: &str, ok: bool, cases: usize, worst: f64, threshold: f64, detail: String, start: Instant) -> CheckResult {
    CheckResult {
        name: name.into(),
        status: if ok { Status::Pass } else { Status::Fail },
        cases,
        worst,
        threshold,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub overall: Status,
    pub reduced: bool,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub reduced: bool,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { reduced: false, seed: 2024 }
    }
}

/// `n` points in the disc `|psi| <= 0.95`, plus the origin and boundary points.
pub fn psi_sweep(n: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = substream(seed, "psi_sweep", 0);
    let mut out = vec![
        Complex64::new(0.0, 0.0),
        Complex64::new(0.95, 0.0),
        Complex64::new(-0.95, 0.0),
        Complex64::new(0.0, 0.95),
    ];
    while out.len() < n {
        let r = 0.95 * rng.random::<f64>().sqrt();
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        out.push(Complex64::from_polar(r, th));
    }
    out.truncate(n);
    out
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct InverseStats {
    pub cases: usize,
    pub worst_residual: f64,
    pub coefficient_violations: usize,
    pub min_lambda: f64,
}

/// Analytic inverse residual, coefficient bounds and `lambda_min(G(psi))`.
pub fn inverse_sweep(psis: &[Complex64], hs: &[usize]) -> Result<InverseStats> {
    let mut s = InverseStats {
        min_lambda: f64::INFINITY,
        ..Default::default()
    };
    for &psi in psis {
        for &h in hs {
            let rep = g_psi_report(psi, h)?;
            s.cases += 1;
            s.worst_residual = s.worst_residual.max(rep.inverse_residual);
            if !rep.coefficients_bounded() {
                s.coefficient_violations += 1;
            }
            s.min_lambda = s.min_lambda.min(rep.lambda_min);
        }
    }
    Ok(s)
}

pub const INVERSE_TOL: f64 = 1e-9;
pub const LAMBDA_FLOOR: f64 = 0.25;
pub const EIG_SLACK: f64 = 1e-10;

pub fn inverse_check(psis: &[Complex64], hs: &[usize]) -> Result<CheckResult> {
    let start = Instant::now();
    let s = inverse_sweep(psis, hs)?;
    let ok = s.worst_residual <= INVERSE_TOL && s.coefficient_violations == 0;
    Ok(finish(
        "g_psi_inverse",
        ok,
        s.cases,
        s.worst_residual,
        INVERSE_TOL,
        format!("coefficient bound violations: {}", s.coefficient_violations),
        start,
    ))
}

pub fn lambda_floor_check(psis: &[Complex64], hs: &[usize]) -> Result<CheckResult> {
    let start = Instant::now();
    let mut min_l = f64::INFINITY;
    let mut cases = 0;
    for &psi in psis {
        for &h in hs {
            min_l = min_l.min(dacctl_core::linalg::min_eigenvalue_herm(&g_psi(psi, h)?));
            cases += 1;
        }
    }
    Ok(finish(
        "g_psi_lambda_min",
        min_l >= LAMBDA_FLOOR - EIG_SLACK,
        cases,
        min_l,
        LAMBDA_FLOOR - EIG_SLACK,
        "smallest eigenvalue over the sweep".into(),
        start,
    ))
}

/// Flipping the sign of `b` in the analytic inverse must be caught.
pub fn mutation_check() -> Result<CheckResult> {
    let start = Instant::now();
    let psi = Complex64::new(0.5, 0.3);
    let h = 8;
    let mut c = inverse_coefficients(psi, h)?;
    c.b = -c.b;
    let g = g_psi(psi, h)?;
    let res = inf_norm_c(&(&g * assemble_inverse(&c, h) - dacctl_core::linalg::CMatrix::identity(h, h)));
    Ok(finish(
        "flipped_b_mutation_detected",
        res > INVERSE_TOL,
        1,
        res,
        INVERSE_TOL,
        "residual of the mutated inverse must exceed the tolerance".into(),
        start,
    ))
}

/// A random plant with its Riccati gain and certificate.
#[derive(Debug, Clone)]
pub struct Instance {
    pub sys: LinearSystem,
    pub k: DMatrix<f64>,
    pub cert: StabilityCertificate,
    pub noise: NoiseModel,
    pub h: usize,
}

/// `n` random certified systems with `dx, du <= max_dim` and `H <= max_h`.
pub fn random_instances(n: usize, seed: u64, max_dim: usize, max_h: usize) -> Vec<Instance> {
    let mut rng = substream(seed, "verify_systems", 0);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let dx = rng.random_range(1..=max_dim);
        let du = rng.random_range(1..=max_dim);
        let scale = rng.random_range(0.3..1.2);
        let a = DMatrix::from_fn(dx, dx, |_, _| rng.random_range(-1.0..1.0) * scale);
        let b = DMatrix::from_fn(dx, du, |_, _| rng.random_range(-1.0..1.0));
        let h = rng.random_range(1..=max_h);
        let w = rng.random_range(0.5..2.0);
        let rademacher = rng.random_bool(0.5);
        let Ok(sys) = LinearSystem::new(a, b, None) else { continue };
        let Ok(k) = default_gain(&sys) else { continue };
        let Ok(cert) = certify(&sys, &k, None) else { continue };
        let noise = if rademacher {
            NoiseModel::scaled_rademacher(dx, w)
        } else {
            NoiseModel::sphere_uniform(dx, w)
        }
        .expect("positive radius");
        out.push(Instance { sys, k, cert, noise, h });
    }
    out
}

fn random_policy<R: Rng>(rng: &mut R, h: usize, du: usize, dx: usize, scale: f64) -> DacPolicy {
    DacPolicy::from_blocks(
        (0..h)
            .map(|_| DMatrix::from_fn(du, dx, |_, _| rng.random_range(-scale..scale)))
            .collect(),
    )
    .expect("non-empty")
}

fn random_spd<R: Rng>(rng: &mut R, n: usize, floor: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let m = &g * g.transpose() + DMatrix::identity(n, n) * floor;
    (&m + m.transpose()) * 0.5
}

/// Random offset quadratic cost with `Q, R >= alpha I`; returns the cost and `alpha`.
fn random_cost<R: Rng>(rng: &mut R, dx: usize, du: usize) -> (CostFunction, f64) {
    let alpha = rng.random_range(0.2..2.0);
    let q = random_spd(rng, dx, alpha);
    let r = random_spd(rng, du, alpha);
    let xr = DVector::from_fn(dx, |_, _| rng.random_range(-0.5..0.5));
    let ur = DVector::from_fn(du, |_, _| rng.random_range(-0.5..0.5));
    (CostFunction::offset_quadratic(q, r, xr, ur, alpha).expect("valid weights"), alpha)
}

fn model_of(inst: &Instance) -> Result<SurrogateModel> {
    Ok(SurrogateModel::new(&inst.sys, &inst.k, &inst.noise, inst.h)?)
}

/// `lambda_min(E[J^T J]) >= gamma^2 sigma^2 / (36 kappa^10)`.
pub fn strong_convexity_check(instances: &[Instance]) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst = f64::INFINITY;
    let mut fails = 0;
    let mut vacuous = 0;
    for inst in instances {
        let rep = certify_strong_convexity(&inst.sys, &inst.k, &inst.cert, &inst.noise, inst.h)?;
        worst = worst.min(rep.lambda_min - rep.floor);
        if !rep.pass {
            fails += 1;
        }
        if rep.vacuous_floor {
            vacuous += 1;
        }
    }
    Ok(finish(
        "gram_strong_convexity",
        fails == 0,
        instances.len(),
        worst,
        -EIG_SLACK,
        format!("min (lambda_min - floor); {fails} failures; {vacuous} instances with a vacuous floor"),
        start,
    ))
}

/// Closed-form surrogate Hessian against `alpha E[J^T J]`.
pub fn hessian_check(instances: &[Instance], seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = substream(seed, "hessian_costs", 0);
    let mut worst = f64::INFINITY;
    for inst in instances {
        let model = model_of(inst)?;
        let (cost, alpha) = random_cost(&mut rng, inst.sys.dx(), inst.sys.du());
        let hf = model.quadratic_surrogate(&cost)?.hessian();
        worst = worst.min(min_eigenvalue_sym(&(hf - model.p_gram() * alpha)));
    }
    Ok(finish(
        "surrogate_hessian_floor",
        worst >= -1e-8,
        instances.len(),
        worst,
        -1e-8,
        "min eigenvalue of H_f - alpha E[J^T J]".into(),
        start,
    ))
}

/// Sampled `E[J^T J]` against the closed form, relative Frobenius error.
pub fn mc_gram_check(instances: &[Instance], n: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for (i, inst) in instances.iter().enumerate() {
        let model = model_of(inst)?;
        let mc = monte_carlo_gram(&model, n, seed ^ i as u64);
        worst = worst.max((&mc - model.p_gram()).norm() / model.p_gram().norm());
    }
    Ok(finish(
        "monte_carlo_gram",
        worst <= 0.05,
        instances.len(),
        worst,
        0.05,
        format!("relative Frobenius error at N = {n}"),
        start,
    ))
}

/// Gram assembled from Kronecker blocks against the per-slot moments.
pub fn gram_consistency_check(instances: &[Instance]) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for inst in instances {
        let model = model_of(inst)?;
        let unit = CostFunction::spherical(1.0, inst.sys.dx(), inst.sys.du(), 1.0, 1.0)?;
        let quad = model.quadratic_surrogate(&unit)?.quad;
        worst = worst.max(max_abs(&(quad - model.p_gram())) / (1.0 + max_abs(model.p_gram())));
    }
    Ok(finish(
        "gram_assembly_consistency",
        worst <= 1e-10,
        instances.len(),
        worst,
        1e-10,
        "max relative entry difference".into(),
        start,
    ))
}

/// `|Y| <= kappa^2 / gamma` and `lambda_min(G_I) >= 1 / (4 kappa^4)`.
pub fn y_and_g_checks(instances: &[Instance]) -> Result<(CheckResult, CheckResult)> {
    let start = Instant::now();
    let (mut worst_y, mut worst_g) = (f64::NEG_INFINITY, f64::INFINITY);
    for inst in instances {
        let at = closed_loop(&inst.sys, &inst.k)?;
        let (kappa, gamma) = (inst.cert.kappa, inst.cert.gamma);
        let y = spectral_norm(&y_matrix(&at, inst.h));
        worst_y = worst_y.max(y / (kappa * kappa / gamma));
        let dx = inst.sys.dx();
        let g = min_eigenvalue_sym(&g_matrix_multidim(&at, &DMatrix::identity(dx, dx), inst.h));
        worst_g = worst_g.min(g - 1.0 / (4.0 * kappa.powi(4)));
    }
    let y = finish(
        "y_norm_bound",
        worst_y <= 1.0 + 1e-12,
        instances.len(),
        worst_y,
        1.0,
        "max |Y| gamma / kappa^2".into(),
        start,
    );
    let g = finish(
        "g_identity_lambda_floor",
        worst_g >= -EIG_SLACK,
        instances.len(),
        worst_g,
        -EIG_SLACK,
        "min lambda_min(G_I) - 1/(4 kappa^4)".into(),
        start,
    );
    Ok((y, g))
}

/// Scalar check `|Y + Y^T| <= 2 / gamma`.
pub fn scalar_y_check(n: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = substream(seed, "scalar_y", 0);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..n {
        let a = rng.random_range(-0.99..0.99);
        let h = rng.random_range(1..=64);
        let y = y_matrix(&DMatrix::from_element(1, 1, a), h);
        let gamma = 1.0 - f64::abs(a);
        worst = worst.max(spectral_norm(&(&y + y.transpose())) * gamma / 2.0);
    }
    Ok(finish(
        "scalar_y_symmetric_bound",
        worst <= 1.0 + 1e-12,
        n,
        worst,
        1.0,
        "max |Y + Y^T| gamma / 2".into(),
        start,
    ))
}

/// Closed-form surrogate gradient against central differences of its value.
pub fn gradient_fd_check(instances: &[Instance], seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = substream(seed, "gradient_fd", 0);
    let mut worst = 0.0_f64;
    for inst in instances {
        let model = model_of(inst)?;
        let (dx, du) = (inst.sys.dx(), inst.sys.du());
        let (cost, _) = random_cost(&mut rng, dx, du);
        let m = random_policy(&mut rng, inst.h, du, dx, 0.3);
        let q = model.quadratic_surrogate(&cost)?;
        let g = surrogate_cost_and_grad(&cost, &m, &model, EvalMode::ClosedForm)?.grad;
        let mv = m.vectorize();
        let step = 1e-2;
        let fd = DVector::from_fn(mv.len(), |i, _| {
            let mut p = mv.clone();
            let mut n = mv.clone();
            p[i] += step;
            n[i] -= step;
            (q.value(&p) - q.value(&n)) / (2.0 * step)
        });
        worst = worst.max((&fd - &g).norm() / g.norm().max(1e-300));
    }
    Ok(finish(
        "gradient_finite_difference",
        worst <= 1e-8,
        instances.len(),
        worst,
        1e-8,
        "relative error of the closed-form gradient".into(),
        start,
    ))
}

/// Sampled gradient within three standard errors (in norm) of the closed form.
pub fn gradient_mc_check(instances: &[Instance], n: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = substream(seed, "gradient_mc", 0);
    let mut worst = 0.0_f64;
    for (i, inst) in instances.iter().enumerate() {
        let model = model_of(inst)?;
        let (dx, du) = (inst.sys.dx(), inst.sys.du());
        let (cost, _) = random_cost(&mut rng, dx, du);
        let m = random_policy(&mut rng, inst.h, du, dx, 0.3);
        let cf = surrogate_cost_and_grad(&cost, &m, &model, EvalMode::ClosedForm)?.grad;
        let mc = surrogate_cost_and_grad(&cost, &m, &model, EvalMode::MonteCarlo { n, seed: seed ^ i as u64 })?;
        let se = mc.grad_se.expect("sampled mode").norm();
        worst = worst.max((&mc.grad - &cf).norm() / se.max(1e-300));
    }
    Ok(finish(
        "gradient_monte_carlo",
        worst <= 3.0,
        instances.len(),
        worst,
        3.0,
        format!("max |mc - closed form| / |standard error| at N = {n}"),
        start,
    ))
}

/// The whole suite. Any failing check makes `overall` FAIL.
pub fn verify_suite(opts: VerifyOptions) -> Result<VerifyReport> {
    let seed = opts.seed;
    let (n_psi, hs, n_sys, n_sys_y): (usize, Vec<usize>, usize, usize) = if opts.reduced {
        (20, vec![3, 8, 16, 32], 20, 20)
    } else {
        (200, (3..=32).collect(), 100, 200)
    };
    let psis = psi_sweep(n_psi, seed);
    let mut checks = vec![inverse_check(&psis, &hs)?, mutation_check()?];
    let mut floor = lambda_floor_check(&psis, &hs)?;
    if opts.reduced {
        checks.push(floor);
        checks.push(CheckResult::skipped("g_psi_lambda_min_h64"));
    } else {
        let edge = lambda_floor_check(&psi_sweep(16, seed ^ 64), &[64])?;
        floor.detail = format!("{}; H = 64 edge cases: {}", floor.detail, edge.worst);
        checks.push(floor);
        checks.push(CheckResult {
            name: "g_psi_lambda_min_h64".into(),
            ..edge
        });
    }
    let inst = random_instances(n_sys, seed, 3, 8);
    checks.push(strong_convexity_check(&inst)?);
    checks.push(hessian_check(&inst, seed)?);
    checks.push(gram_consistency_check(&inst)?);
    if opts.reduced {
        checks.push(CheckResult::skipped("monte_carlo_gram"));
    } else {
        checks.push(mc_gram_check(&inst[..10], 100_000, seed)?);
    }
    let inst_y = random_instances(n_sys_y, seed ^ 0x5eed, 3, 16);
    let (y, g) = y_and_g_checks(&inst_y)?;
    checks.push(y);
    checks.push(g);
    checks.push(scalar_y_check(200, seed)?);
    checks.push(gradient_fd_check(&inst[..20.min(inst.len())], seed)?);
    if opts.reduced {
        checks.push(CheckResult::skipped("gradient_monte_carlo"));
    } else {
        checks.push(gradient_mc_check(&inst[..20], 10_000, seed)?);
    }
    let overall = if checks.iter().any(|c| c.status == Status::Fail) {
        Status::Fail
    } else {
        Status::Pass
    };
    Ok(VerifyReport {
        overall,
        reduced: opts.reduced,
        seed,
        checks,
    })
}
