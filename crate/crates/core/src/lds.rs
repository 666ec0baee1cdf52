//! Linear dynamics, disturbance models, stage costs and exact rollouts.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{min_eigenvalue_sym, spectral_norm};
use crate::rng::substream;

/// `x_{t+1} = A x_t + B u_t + w_t`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    kappa_b: f64,
}

impl LinearSystem {
    /// Builds a system; `kappa_b` defaults to `||B||` and must dominate it.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, kappa_b: Option<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() == 0 {
            return Err(dim_err("LinearSystem::A", "square, non-empty", format!("{}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(dim_err("LinearSystem::B", format!("{}x_", a.nrows()), format!("{}x{}", b.nrows(), b.ncols())));
        }
        let norm_b = spectral_norm(&b);
        let kappa_b = kappa_b.unwrap_or(norm_b);
        if !(kappa_b.is_finite() && kappa_b >= norm_b * (1.0 - 1e-12)) {
            return Err(Error::InvalidParameter(format!("kappa_B = {kappa_b} is below ||B|| = {norm_b}")));
        }
        Ok(Self { a, b, kappa_b })
    }

    pub fn scalar(a: f64, b: f64) -> Self {
        Self::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b), None).expect("scalar system")
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn dx(&self) -> usize {
        self.a.nrows()
    }
    pub fn du(&self) -> usize {
        self.b.ncols()
    }
    pub fn kappa_b(&self) -> f64 {
        self.kappa_b
    }

    fn check_state(&self, ctx: &'static str, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dx() {
            return Err(dim_err(ctx, self.dx(), v.len()));
        }
        Ok(())
    }

    fn check_action(&self, ctx: &'static str, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.du() {
            return Err(dim_err(ctx, self.du(), v.len()));
        }
        Ok(())
    }
}

/// One transition of the dynamics.
pub fn step(sys: &LinearSystem, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    sys.check_state("step: x", x)?;
    sys.check_action("step: u", u)?;
    sys.check_state("step: w", w)?;
    Ok(sys.a() * x + sys.b() * u + w)
}

/// Inverts [`step`]: the disturbance that carried `x_t` to `x_next` under `u_t`.
pub fn recover_disturbance(
    sys: &LinearSystem,
    x_t: &DVector<f64>,
    u_t: &DVector<f64>,
    x_next: &DVector<f64>,
) -> Result<DVector<f64>> {
    sys.check_state("recover_disturbance: x_t", x_t)?;
    sys.check_action("recover_disturbance: u_t", u_t)?;
    sys.check_state("recover_disturbance: x_next", x_next)?;
    Ok(x_next - sys.a() * x_t - sys.b() * u_t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    SphereUniform,
    ScaledRademacher,
    TruncatedGaussian { base_std: f64 },
}

/// Bounded, zero-mean, i.i.d. disturbance distribution with its covariance.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    kind: NoiseKind,
    dim: usize,
    radius: f64,
    sigma: DMatrix<f64>,
    sigma_sq: f64,
}

/// Draws used to estimate the truncated-Gaussian covariance.
pub const TRUNCATED_GAUSSIAN_COV_SAMPLES: usize = 1_000_000;

impl NoiseModel {
    fn analytic(kind: NoiseKind, dim: usize, radius: f64) -> Result<Self> {
        if dim == 0 || !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise needs dim >= 1 and W > 0 (dim={dim}, W={radius})")));
        }
        let var = radius * radius / dim as f64;
        Ok(Self {
            kind,
            dim,
            radius,
            sigma: DMatrix::identity(dim, dim) * var,
            sigma_sq: var,
        })
    }

    /// Uniform on the sphere of radius `W`; covariance `(W^2/d) I`.
    pub fn sphere_uniform(dim: usize, radius: f64) -> Result<Self> {
        Self::analytic(NoiseKind::SphereUniform, dim, radius)
    }

    /// Independent `+-W/sqrt(d)` coordinates; covariance `(W^2/d) I`.
    pub fn scaled_rademacher(dim: usize, radius: f64) -> Result<Self> {
        Self::analytic(NoiseKind::ScaledRademacher, dim, radius)
    }

    /// `N(0, base_std^2 I)` rejected outside the ball of radius `W`. The
    /// covariance has no closed form and is estimated once from a seeded
    /// Monte-Carlo run of [`TRUNCATED_GAUSSIAN_COV_SAMPLES`] draws.
    pub fn truncated_gaussian(dim: usize, radius: f64, base_std: f64, seed: u64) -> Result<Self> {
        if !(base_std > 0.0 && base_std.is_finite()) {
            return Err(Error::InvalidParameter(format!("base_std must be positive, got {base_std}")));
        }
        let mut model = Self::analytic(NoiseKind::TruncatedGaussian { base_std }, dim, radius)?;
        let mut rng = substream(seed, "truncated_gaussian_covariance", 0);
        let mut acc = DMatrix::<f64>::zeros(dim, dim);
        for _ in 0..TRUNCATED_GAUSSIAN_COV_SAMPLES {
            let w = model.sample(&mut rng);
            acc.ger(1.0, &w, &w, 1.0);
        }
        acc /= TRUNCATED_GAUSSIAN_COV_SAMPLES as f64;
        model.sigma_sq = min_eigenvalue_sym(&acc);
        model.sigma = acc;
        Ok(model)
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    /// Almost-sure norm bound `W`.
    pub fn radius(&self) -> f64 {
        self.radius
    }
    /// `E[w w^T]`.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    /// `lambda_min(Sigma)`.
    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.dim;
        match self.kind {
            NoiseKind::SphereUniform => loop {
                let g = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
                let n = g.norm();
                if n > 1e-300 {
                    return g * (self.radius / n);
                }
            },
            NoiseKind::ScaledRademacher => {
                let s = self.radius / (d as f64).sqrt();
                DVector::from_fn(d, |_, _| if rng.random::<bool>() { s } else { -s })
            }
            NoiseKind::TruncatedGaussian { base_std } => loop {
                let g = DVector::<f64>::from_fn(d, |_, _| base_std * rng.sample::<f64, _>(StandardNormal));
                if g.norm() <= self.radius {
                    return g;
                }
            },
        }
    }

    /// `n` independent draws.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<DVector<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Quadratic data exposed by costs that admit a closed-form surrogate.
#[derive(Debug, Clone)]
pub enum QuadraticForm {
    /// `r (|x|^2 + |u|^2)`.
    Spherical { r: f64 },
    /// `(x - x_ref)^T Q (x - x_ref) + (u - u_ref)^T R (u - u_ref)`.
    Full {
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        x_ref: DVector<f64>,
        u_ref: DVector<f64>,
    },
}

/// A per-step convex cost `c_t(x, u)`.
pub trait StageCost: Send + Sync {
    fn dims(&self) -> (usize, usize);
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
    /// `Some` for the quadratic family, enabling closed-form surrogates.
    fn quadratic(&self) -> Option<QuadraticForm> {
        None
    }
}

#[derive(Debug, Clone)]
pub enum CostKind {
    GeneralQuadratic { q: DMatrix<f64>, r: DMatrix<f64> },
    Spherical { r: f64, dx: usize, du: usize },
    OffsetQuadratic {
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        x_ref: DVector<f64>,
        u_ref: DVector<f64>,
    },
}

/// Strongly convex quadratic-family stage cost.
///
/// Costs are written without a factor of one half, so `alpha` bounds the
/// weight matrices (`Q, R >= alpha I`) and the Hessian is at least `2 alpha`.
#[derive(Debug, Clone)]
pub struct CostFunction {
    kind: CostKind,
    alpha: f64,
}

fn check_weight(name: &str, m: &DMatrix<f64>, alpha: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidParameter(format!("{name} must be square")));
    }
    if crate::linalg::max_abs(&(m - m.transpose())) > 1e-12 * (1.0 + crate::linalg::max_abs(m)) {
        return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
    }
    let lmin = min_eigenvalue_sym(m);
    if lmin < alpha * (1.0 - 1e-12) {
        return Err(Error::InvalidParameter(format!("{name} has lambda_min {lmin} < alpha {alpha}")));
    }
    Ok(())
}

impl CostFunction {
    pub fn general_quadratic(q: DMatrix<f64>, r: DMatrix<f64>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter("alpha must be positive".into()));
        }
        check_weight("Q", &q, alpha)?;
        check_weight("R", &r, alpha)?;
        Ok(Self {
            kind: CostKind::GeneralQuadratic { q, r },
            alpha,
        })
    }

    /// `r (|x|^2 + |u|^2)` with `r` in `[alpha, beta]`.
    pub fn spherical(r: f64, dx: usize, du: usize, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= beta) {
            return Err(Error::InvalidParameter(format!("need 0 < alpha <= beta, got {alpha}, {beta}")));
        }
        if !(r >= alpha && r <= beta) {
            return Err(Error::InvalidParameter(format!("r = {r} outside [{alpha}, {beta}]")));
        }
        Ok(Self {
            kind: CostKind::Spherical { r, dx, du },
            alpha,
        })
    }

    pub fn offset_quadratic(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        x_ref: DVector<f64>,
        u_ref: DVector<f64>,
        alpha: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter("alpha must be positive".into()));
        }
        check_weight("Q", &q, alpha)?;
        check_weight("R", &r, alpha)?;
        if x_ref.len() != q.nrows() || u_ref.len() != r.nrows() {
            return Err(dim_err("offset_quadratic refs", format!("{}/{}", q.nrows(), r.nrows()), format!("{}/{}", x_ref.len(), u_ref.len())));
        }
        Ok(Self {
            kind: CostKind::OffsetQuadratic { q, r, x_ref, u_ref },
            alpha,
        })
    }

    pub fn kind(&self) -> &CostKind {
        &self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Largest weight eigenvalue (`||Q||`, `||R||`, or `r`).
    pub fn weight_norm(&self) -> f64 {
        match &self.kind {
            CostKind::Spherical { r, .. } => *r,
            CostKind::GeneralQuadratic { q, r } | CostKind::OffsetQuadratic { q, r, .. } => {
                spectral_norm(q).max(spectral_norm(r))
            }
        }
    }

    /// A constant `G` with `|grad c| <= G D` whenever `|x|, |u| <= D`.
    pub fn grad_bound(&self, d: f64) -> f64 {
        let base = 2.0 * self.weight_norm();
        match &self.kind {
            CostKind::OffsetQuadratic { x_ref, u_ref, .. } => {
                let off = x_ref.norm().max(u_ref.norm());
                base * (1.0 + off / d.max(f64::MIN_POSITIVE))
            }
            _ => base,
        }
    }
}

impl StageCost for CostFunction {
    fn dims(&self) -> (usize, usize) {
        match &self.kind {
            CostKind::Spherical { dx, du, .. } => (*dx, *du),
            CostKind::GeneralQuadratic { q, r } | CostKind::OffsetQuadratic { q, r, .. } => (q.nrows(), r.nrows()),
        }
    }

    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        match &self.kind {
            CostKind::Spherical { r, .. } => r * (x.norm_squared() + u.norm_squared()),
            CostKind::GeneralQuadratic { q, r } => x.dot(&(q * x)) + u.dot(&(r * u)),
            CostKind::OffsetQuadratic { q, r, x_ref, u_ref } => {
                let dx = x - x_ref;
                let du = u - u_ref;
                dx.dot(&(q * &dx)) + du.dot(&(r * &du))
            }
        }
    }

    fn gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match &self.kind {
            CostKind::Spherical { r, .. } => (x * (2.0 * r), u * (2.0 * r)),
            CostKind::GeneralQuadratic { q, r } => ((q * x) * 2.0, (r * u) * 2.0),
            CostKind::OffsetQuadratic { q, r, x_ref, u_ref } => ((q * (x - x_ref)) * 2.0, (r * (u - u_ref)) * 2.0),
        }
    }

    fn quadratic(&self) -> Option<QuadraticForm> {
        Some(match &self.kind {
            CostKind::Spherical { r, .. } => QuadraticForm::Spherical { r: *r },
            CostKind::GeneralQuadratic { q, r } => QuadraticForm::Full {
                q: q.clone(),
                r: r.clone(),
                x_ref: DVector::zeros(q.nrows()),
                u_ref: DVector::zeros(r.nrows()),
            },
            CostKind::OffsetQuadratic { q, r, x_ref, u_ref } => QuadraticForm::Full {
                q: q.clone(),
                r: r.clone(),
                x_ref: x_ref.clone(),
                u_ref: u_ref.clone(),
            },
        })
    }
}

/// Something that picks `u_t` from the current state.
pub trait Controller {
    fn act(&mut self, t: usize, x: &DVector<f64>) -> DVector<f64>;
    /// Called after the transition to `x_next` is observed.
    fn observe(&mut self, _t: usize, _x: &DVector<f64>, _u: &DVector<f64>, _x_next: &DVector<f64>) {}
}

/// `u = -K x`.
#[derive(Debug, Clone)]
pub struct LinearController {
    pub k: DMatrix<f64>,
}

impl Controller for LinearController {
    fn act(&mut self, _t: usize, x: &DVector<f64>) -> DVector<f64> {
        -(&self.k * x)
    }
}

/// Realized path. `states` has one more entry than the other sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    pub per_step_costs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_cost(&self) -> f64 {
        self.per_step_costs.iter().sum()
    }

    /// Max abs deviation when the stored path is re-run through [`step`].
    pub fn replay_error(&self, sys: &LinearSystem) -> f64 {
        let mut err = self.states[0].amax();
        for t in 0..self.len() {
            let next = sys.a() * &self.states[t] + sys.b() * &self.actions[t] + &self.disturbances[t];
            err = err.max((next - &self.states[t + 1]).amax());
        }
        err
    }
}

/// Runs `controller` from `x_0 = 0` for `noise.len()` steps.
pub fn rollout<C: StageCost>(
    sys: &LinearSystem,
    controller: &mut dyn Controller,
    noise: &[DVector<f64>],
    costs: &[C],
) -> Result<Trajectory> {
    if noise.len() != costs.len() {
        return Err(dim_err("rollout: cost sequence", noise.len(), costs.len()));
    }
    let horizon = noise.len();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut per_step_costs = Vec::with_capacity(horizon);
    let mut x = DVector::zeros(sys.dx());
    for (t, w) in noise.iter().enumerate() {
        let u = controller.act(t, &x);
        sys.check_action("rollout: controller output", &u)?;
        let x_next = step(sys, &x, &u, w)?;
        per_step_costs.push(costs[t].value(&x, &u));
        controller.observe(t, &x, &u, &x_next);
        states.push(std::mem::replace(&mut x, x_next));
        actions.push(u);
    }
    states.push(x);
    Ok(Trajectory {
        states,
        actions,
        disturbances: noise.to_vec(),
        per_step_costs,
    })
}
