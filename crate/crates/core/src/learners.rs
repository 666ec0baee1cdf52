//! Online gradient and online natural gradient over disturbance-action
//! policies, and the generic OGD-with-memory loop.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::lds::{recover_disturbance, step, LinearSystem, NoiseModel, StageCost};
use crate::linalg::min_eigenvalue_sym;
use crate::policy::{
    action, project_euclidean, DacPolicy, DisturbanceRing, PolicyClass, WeightedProjectionOptions, WeightedProjector,
};
use crate::spectral::convexity_floor;
use crate::stability::StabilityCertificate;
use crate::surrogate::{surrogate_cost_and_grad, EvalMode, SurrogateModel};

/// Largest memory length the default rule will pick.
pub const H_CAP: usize = 64;

/// `ceil(log(T kappa^2) / gamma)`, at least 1 and at most [`H_CAP`].
pub fn default_horizon(t: usize, kappa: f64, gamma: f64) -> usize {
    let raw = ((t as f64 * kappa * kappa).ln() / gamma).ceil();
    let h = if raw.is_finite() && raw >= 1.0 { raw as usize } else { 1 };
    if h > H_CAP {
        log::warn!("memory length {h} exceeds cap {H_CAP}; using {H_CAP}");
        H_CAP
    } else {
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `eta_t = 1 / (lambda max(1, t - H))`.
    OgdStronglyConvex { lambda: f64, h: usize },
    /// `eta_t = 1 / (alpha max(1, t))`.
    Ong { alpha: f64 },
}

impl StepSchedule {
    pub fn eta(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::OgdStronglyConvex { lambda, h } => 1.0 / (lambda * t.saturating_sub(h).max(1) as f64),
            StepSchedule::Ong { alpha } => 1.0 / (alpha * t.max(1) as f64),
        }
    }
}

/// Cached factorization of `E[J^T J]` and its projection metric.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    chol: Cholesky<f64, Dyn>,
    projector: Option<WeightedProjector>,
}

impl Preconditioner {
    /// `weighted = false` projects in the Euclidean metric after the solve.
    pub fn new(p_gram: &DMatrix<f64>, class: &PolicyClass, weighted: bool) -> Result<Self> {
        let chol = p_gram
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("preconditioner"))?;
        let projector = if weighted {
            Some(WeightedProjector::new(p_gram, class, WeightedProjectionOptions::default())?)
        } else {
            None
        };
        Ok(Self { chol, projector })
    }

    pub fn solve(&self, g: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(g)
    }
}

#[derive(Debug, Clone)]
pub struct LearnerState {
    pub t: usize,
    pub m: DacPolicy,
    pub ring: DisturbanceRing,
    pub schedule: StepSchedule,
    pub class: PolicyClass,
    pub preconditioner: Option<Preconditioner>,
}

impl LearnerState {
    /// Starts from the zero policy.
    pub fn new(class: PolicyClass, schedule: StepSchedule, preconditioner: Option<Preconditioner>) -> Self {
        let m = DacPolicy::zeros(class.h(), class.du(), class.dx());
        let ring = DisturbanceRing::new(class.h(), class.dx());
        Self {
            t: 0,
            m,
            ring,
            schedule,
            class,
            preconditioner,
        }
    }

    fn check_grad(&self, g: &DVector<f64>) -> Result<()> {
        if g.len() != self.class.dim() {
            return Err(dim_err("learner gradient", self.class.dim(), g.len()));
        }
        Ok(())
    }
}

/// `M <- Pi(M - eta_t grad)` in the Euclidean metric. Returns `eta_t`.
pub fn ogd_step(state: &mut LearnerState, grad: &DVector<f64>) -> Result<f64> {
    state.check_grad(grad)?;
    let eta = state.schedule.eta(state.t);
    let (h, du, dx) = (state.class.h(), state.class.du(), state.class.dx());
    let moved = DacPolicy::devectorize(&(state.m.vectorize() - grad * eta), h, du, dx)?;
    state.m = project_euclidean(&moved, &state.class);
    state.t += 1;
    Ok(eta)
}

/// `M <- Pi_P(M - eta_t P^{-1} grad)`. Returns `eta_t`.
pub fn ong_step(state: &mut LearnerState, grad: &DVector<f64>) -> Result<f64> {
    state.check_grad(grad)?;
    let pre = state
        .preconditioner
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("natural gradient step needs a preconditioner".into()))?;
    let eta = state.schedule.eta(state.t);
    let (h, du, dx) = (state.class.h(), state.class.du(), state.class.dx());
    let moved = DacPolicy::devectorize(&(state.m.vectorize() - pre.solve(grad) * eta), h, du, dx)?;
    state.m = match &pre.projector {
        Some(p) => p.project(&moved)?,
        None => project_euclidean(&moved, &state.class),
    };
    state.t += 1;
    Ok(eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ogd,
    Ong,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Ogd => "ogd",
            Variant::Ong => "ong",
        })
    }
}

/// How the OGD strong-convexity constant is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum LambdaChoice {
    /// `alpha sigma^2 gamma^2 / (36 kappa^10)`.
    Theory,
    /// `2 alpha lambda_min(E[J^T J])`, the actual curvature of the surrogate.
    Measured,
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct LearnerConfig {
    pub variant: Variant,
    /// Memory length; `None` picks [`default_horizon`].
    pub h: Option<usize>,
    pub lambda: LambdaChoice,
    /// ONG schedule constant; `None` uses `2 alpha`, the Hessian floor of the costs.
    pub ong_alpha: Option<f64>,
    /// ONG projects in the `E[J^T J]` metric unless this is set.
    pub ong_euclidean_projection: bool,
    /// Windows per step for costs without a closed form.
    pub mc_samples: usize,
    pub mc_seed: u64,
    /// Keep every `M_t`, needed for the non-stationary surrogate check.
    pub record_history: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ogd,
            h: None,
            lambda: LambdaChoice::Theory,
            ong_alpha: None,
            ong_euclidean_projection: false,
            mc_samples: 2000,
            mc_seed: 0,
            record_history: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub cost: f64,
    /// Step size applied after this step; zero while the policy is held.
    pub eta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunLog {
    pub variant: Variant,
    pub h: usize,
    pub schedule: StepSchedule,
    pub records: Vec<StepRecord>,
    /// `(t, M_t)` at `t = 0` and every power of two.
    pub snapshots: Vec<(usize, DacPolicy)>,
    /// `M_t` used at every step, when requested.
    #[serde(skip)]
    pub history: Option<Vec<DacPolicy>>,
    pub final_policy: DacPolicy,
}

impl RunLog {
    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost).collect()
    }

    pub fn total_cost(&self) -> f64 {
        self.records.iter().map(|r| r.cost).sum()
    }
}

/// Everything the learner loop needs about the plant and the fixed gain.
pub struct ControlProblem<'a> {
    pub sys: &'a LinearSystem,
    pub k_fixed: &'a DMatrix<f64>,
    pub cert: &'a StabilityCertificate,
    pub noise_model: &'a NoiseModel,
}

/// Learner parameters resolved for a given problem and horizon.
pub struct ResolvedLearner {
    pub h: usize,
    pub class: PolicyClass,
    pub model: SurrogateModel,
    pub schedule: StepSchedule,
}

pub fn resolve_learner<C: StageCost>(
    prob: &ControlProblem<'_>,
    costs: &[C],
    cfg: &LearnerConfig,
    alpha: f64,
) -> Result<ResolvedLearner> {
    let cert = prob.cert;
    let h = cfg.h.unwrap_or_else(|| default_horizon(costs.len(), cert.kappa, cert.gamma));
    if h == 0 {
        return Err(Error::InvalidParameter("memory length must be >= 1".into()));
    }
    let (dx, du) = (prob.sys.dx(), prob.sys.du());
    let class = PolicyClass::from_certificate(h, cert.kappa, cert.gamma, prob.sys.kappa_b(), du, dx)?;
    let model = SurrogateModel::new(prob.sys, prob.k_fixed, prob.noise_model, h)?;
    let schedule = match cfg.variant {
        Variant::Ogd => {
            let lambda = match cfg.lambda {
                LambdaChoice::Theory => alpha * convexity_floor(cert.kappa, cert.gamma, prob.noise_model.sigma_sq()),
                LambdaChoice::Measured => 2.0 * alpha * min_eigenvalue_sym(model.p_gram()),
                LambdaChoice::Fixed(l) => l,
            };
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(Error::InvalidParameter(format!("OGD lambda must be positive, got {lambda}")));
            }
            StepSchedule::OgdStronglyConvex { lambda, h }
        }
        Variant::Ong => StepSchedule::Ong {
            alpha: cfg.ong_alpha.unwrap_or(2.0 * alpha),
        },
    };
    Ok(ResolvedLearner { h, class, model, schedule })
}

fn is_snapshot_time(t: usize) -> bool {
    t == 0 || t.is_power_of_two()
}

/// Runs the learner against realized disturbances `noise` and costs `costs`.
///
/// The policy is held at zero for the first `H` steps; from then on the
/// gradient of the expected surrogate cost at the current policy drives an
/// OGD or ONG update after each step.
pub fn run_online_control<C: StageCost>(
    prob: &ControlProblem<'_>,
    noise: &[DVector<f64>],
    costs: &[C],
    cfg: &LearnerConfig,
) -> Result<RunLog> {
    if noise.len() != costs.len() || noise.is_empty() {
        return Err(dim_err("run_online_control: cost sequence", noise.len(), costs.len()));
    }
    let alpha = costs_alpha(costs);
    let resolved = resolve_learner(prob, costs, cfg, alpha)?;
    let ResolvedLearner { h, class, model, schedule } = resolved;
    let pre = match cfg.variant {
        Variant::Ong => Some(Preconditioner::new(model.p_gram(), &class, !cfg.ong_euclidean_projection)?),
        Variant::Ogd => None,
    };
    let mut state = LearnerState::new(class, schedule, pre);
    let quadratic = costs.iter().all(|c| c.quadratic().is_some());
    let sys = prob.sys;
    let mut x = DVector::zeros(sys.dx());
    let mut records = Vec::with_capacity(noise.len());
    let mut snapshots = Vec::new();
    let mut history = cfg.record_history.then(|| Vec::with_capacity(noise.len()));
    for (t, (w_t, cost)) in noise.iter().zip(costs).enumerate() {
        if is_snapshot_time(t) {
            snapshots.push((t, state.m.clone()));
        }
        if let Some(hist) = history.as_mut() {
            hist.push(state.m.clone());
        }
        let u = action(&state.m, prob.k_fixed, &x, &state.ring);
        let x_next = step(sys, &x, &u, w_t)?;
        let c = cost.value(&x, &u);
        let w = recover_disturbance(sys, &x, &u, &x_next)?;
        state.ring.push(w.clone());
        let eta = if t >= h {
            let mode = if quadratic {
                EvalMode::ClosedForm
            } else {
                EvalMode::MonteCarlo {
                    n: cfg.mc_samples,
                    seed: cfg.mc_seed ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                }
            };
            let grad = surrogate_cost_and_grad(cost, &state.m, &model, mode)?.grad;
            state.t = t;
            match cfg.variant {
                Variant::Ogd => ogd_step(&mut state, &grad)?,
                Variant::Ong => ong_step(&mut state, &grad)?,
            }
        } else {
            0.0
        };
        if !x_next.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("state diverged at step {t}")));
        }
        records.push(StepRecord {
            t,
            x: x.iter().copied().collect(),
            u: u.iter().copied().collect(),
            w: w.iter().copied().collect(),
            cost: c,
            eta,
        });
        x = x_next;
    }
    Ok(RunLog {
        variant: cfg.variant,
        h,
        schedule,
        records,
        snapshots,
        history,
        final_policy: state.m,
    })
}

/// Smallest weight eigenvalue over the sequence; `1` if no cost is quadratic.
fn costs_alpha<C: StageCost>(costs: &[C]) -> f64 {
    let a = costs
        .iter()
        .filter_map(|c| c.quadratic().map(|q| quadratic_alpha(&q)))
        .fold(f64::INFINITY, f64::min);
    if a.is_finite() {
        a
    } else {
        1.0
    }
}

fn quadratic_alpha(q: &crate::lds::QuadraticForm) -> f64 {
    match q {
        crate::lds::QuadraticForm::Spherical { r } => *r,
        crate::lds::QuadraticForm::Full { q, r, .. } => min_eigenvalue_sym(q).min(min_eigenvalue_sym(r)),
    }
}

/// OGD on unary losses: `x_{t+1} = Pi(x_t - eta_t grad_t(x_t))` with
/// `eta_t = 1 / (lambda max(1, t - H))`, `t = 1..=T`. Returns `x_1 .. x_{T+1}`.
pub fn ogd_with_memory<G, P>(
    mut grad: G,
    project: P,
    x1: DVector<f64>,
    lambda: f64,
    h: usize,
    horizon: usize,
) -> Vec<DVector<f64>>
where
    G: FnMut(usize, &DVector<f64>) -> DVector<f64>,
    P: Fn(&DVector<f64>) -> DVector<f64>,
{
    let sched = StepSchedule::OgdStronglyConvex { lambda, h };
    let mut xs = Vec::with_capacity(horizon + 1);
    xs.push(x1);
    for t in 1..=horizon {
        let x = xs.last().expect("non-empty");
        let g = grad(t, x);
        let next = project(&(x - g * sched.eta(t)));
        xs.push(next);
    }
    xs
}
