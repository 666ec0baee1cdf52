//! Offline comparators: the best fixed linear gain and the best fixed DAC policy.

use dacctl_core::lds::{rollout, CostFunction, CostKind, LinearController, LinearSystem, StageCost};
use dacctl_core::linalg::max_eigenvalue_sym;
use dacctl_core::policy::{project_euclidean, DacController, DacPolicy, PolicyClass};
use dacctl_core::stability::{certify, dare_gain};
use dacctl_core::surrogate::{QuadraticSurrogate, SurrogateModel};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ComparatorSpec;
use crate::error::{HarnessError, Result};

/// Scalar cost `q (x - xr)^2 + r (u - ur)^2`, used by the allocation-free path.
#[derive(Debug, Clone, Copy)]
struct ScalarCost {
    q: f64,
    r: f64,
    xr: f64,
    ur: f64,
}

fn scalar_cost(c: &CostFunction) -> ScalarCost {
    match c.kind() {
        CostKind::Spherical { r, .. } => ScalarCost {
            q: *r,
            r: *r,
            xr: 0.0,
            ur: 0.0,
        },
        CostKind::GeneralQuadratic { q, r } => ScalarCost {
            q: q[(0, 0)],
            r: r[(0, 0)],
            xr: 0.0,
            ur: 0.0,
        },
        CostKind::OffsetQuadratic { q, r, x_ref, u_ref } => ScalarCost {
            q: q[(0, 0)],
            r: r[(0, 0)],
            xr: x_ref[0],
            ur: u_ref[0],
        },
    }
}

/// Per-step cost of `u = -K x` on a fixed cost sequence.
#[derive(Debug, Clone)]
pub struct LinearEvaluator<'a> {
    sys: &'a LinearSystem,
    costs: &'a [CostFunction],
    scalar: Option<(f64, f64, Vec<ScalarCost>)>,
}

impl<'a> LinearEvaluator<'a> {
    pub fn new(sys: &'a LinearSystem, costs: &'a [CostFunction]) -> Self {
        let scalar = (sys.dx() == 1 && sys.du() == 1)
            .then(|| (sys.a()[(0, 0)], sys.b()[(0, 0)], costs.iter().map(scalar_cost).collect()));
        Self { sys, costs, scalar }
    }

    pub fn per_step(&self, k: &DMatrix<f64>, noise: &[DVector<f64>]) -> Result<Vec<f64>> {
        if noise.len() != self.costs.len() {
            return Err(HarnessError::Numeric(format!(
                "noise has {} steps but there are {} costs",
                noise.len(),
                self.costs.len()
            )));
        }
        if let Some((a, b, sc)) = &self.scalar {
            let k = k[(0, 0)];
            let mut x = 0.0;
            let mut out = Vec::with_capacity(noise.len());
            for (c, w) in sc.iter().zip(noise) {
                let u = -k * x;
                let (ex, eu) = (x - c.xr, u - c.ur);
                out.push(c.q * ex * ex + c.r * eu * eu);
                x = a * x + b * u + w[0];
            }
            return Ok(out);
        }
        let mut ctl = LinearController { k: k.clone() };
        Ok(rollout(self.sys, &mut ctl, noise, self.costs)?.per_step_costs)
    }

    pub fn total(&self, k: &DMatrix<f64>, noise: &[DVector<f64>]) -> Result<f64> {
        Ok(self.per_step(k, noise)?.iter().sum())
    }

    /// Mean total over replicas, summed in replica order.
    pub fn mean_total(&self, k: &DMatrix<f64>, noises: &[Vec<DVector<f64>>]) -> Result<f64> {
        let mut acc = 0.0;
        for n in noises {
            acc += self.total(k, n)?;
        }
        Ok(acc / noises.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Grid,
    CoordinateDescent,
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearComparator {
    pub k: Vec<Vec<f64>>,
    /// Mean over replicas of the total cost over `T` steps.
    pub mean_total: f64,
    pub method: SearchMethod,
    pub evaluated: usize,
    pub gamma: f64,
}

impl LinearComparator {
    pub fn gain(&self) -> DMatrix<f64> {
        dacctl_core::linalg::from_nested_rows(&self.k).expect("rectangular")
    }
}

fn certified_margin(sys: &LinearSystem, k: &DMatrix<f64>) -> Option<f64> {
    certify(sys, k, None).ok().map(|c| c.gamma)
}

/// Lower cost wins; costs within `1e-12` relative tie and the smaller gain wins.
fn better(a: (f64, f64), b: (f64, f64)) -> bool {
    let tol = 1e-12 * a.0.abs().max(b.0.abs());
    if (a.0 - b.0).abs() <= tol {
        a.1 < b.1
    } else {
        a.0 < b.0
    }
}

/// Golden-section minimization of `f` on `[lo, hi]`.
pub fn golden_min<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, iters: usize) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Gain entries to search over, with the per-axis grid.
fn grid_axes(sys: &LinearSystem, center: &DMatrix<f64>, spec: &ComparatorSpec) -> Vec<Vec<f64>> {
    let n = spec.grid_points;
    let lin = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect() };
    if sys.dx() == 1 && sys.du() == 1 {
        // |a - b k| <= 1 - min_gamma
        let (a, b) = (sys.a()[(0, 0)], sys.b()[(0, 0)]);
        let m = 1.0 - spec.min_gamma;
        let (e1, e2) = ((a - m) / b, (a + m) / b);
        return vec![lin(e1.min(e2), e1.max(e2))];
    }
    (0..center.len())
        .map(|e| {
            let c = center[e_pos(e, center.ncols())];
            lin(c - spec.grid_half_width, c + spec.grid_half_width)
        })
        .collect()
}

fn averaged_weights(costs: &[CostFunction], dx: usize, du: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut q = DMatrix::zeros(dx, dx);
    let mut r = DMatrix::zeros(du, du);
    for c in costs {
        match c.kind() {
            CostKind::Spherical { r: s, .. } => {
                q += DMatrix::identity(dx, dx) * *s;
                r += DMatrix::identity(du, du) * *s;
            }
            CostKind::GeneralQuadratic { q: cq, r: cr } | CostKind::OffsetQuadratic { q: cq, r: cr, .. } => {
                q += cq;
                r += cr;
            }
        }
    }
    let n = costs.len().max(1) as f64;
    (q / n, r / n)
}

/// Best fixed linear gain on the given noise realizations (common random numbers).
pub fn best_linear_comparator(
    sys: &LinearSystem,
    noises: &[Vec<DVector<f64>>],
    costs: &[CostFunction],
    spec: &ComparatorSpec,
) -> Result<LinearComparator> {
    if noises.is_empty() {
        return Err(HarnessError::Numeric("no noise realizations".into()));
    }
    if sys.dx() * sys.du() <= 2 {
        grid_search(sys, noises, costs, spec)
    } else {
        coordinate_descent(sys, noises, costs, spec)
    }
}

fn riccati_start(sys: &LinearSystem, costs: &[CostFunction]) -> Result<DMatrix<f64>> {
    let (q, r) = averaged_weights(costs, sys.dx(), sys.du());
    Ok(dare_gain(sys, &q, &r)?)
}

pub fn grid_search(
    sys: &LinearSystem,
    noises: &[Vec<DVector<f64>>],
    costs: &[CostFunction],
    spec: &ComparatorSpec,
) -> Result<LinearComparator> {
    let eval = LinearEvaluator::new(sys, costs);
    let (du, dx) = (sys.du(), sys.dx());
    let center = riccati_start(sys, costs).unwrap_or_else(|_| DMatrix::zeros(du, dx));
    let axes = grid_axes(sys, &center, spec);
    let total: usize = axes.iter().map(Vec::len).product();
    let candidates: Vec<DMatrix<f64>> = (0..total)
        .map(|mut idx| {
            let mut vals = Vec::with_capacity(axes.len());
            for ax in &axes {
                vals.push(ax[idx % ax.len()]);
                idx /= ax.len();
            }
            DMatrix::from_row_slice(du, dx, &vals)
        })
        .collect();
    let scored: Vec<Option<(f64, f64)>> = candidates
        .par_iter()
        .map(|k| {
            let g = certified_margin(sys, k)?;
            if g < spec.min_gamma {
                return None;
            }
            eval.mean_total(k, noises).ok().filter(|c| c.is_finite()).map(|c| (c, k.norm()))
        })
        .collect();
    let mut best: Option<(usize, (f64, f64))> = None;
    for (i, s) in scored.iter().enumerate() {
        if let Some(s) = s {
            if best.is_none_or(|(_, b)| better(*s, b)) {
                best = Some((i, *s));
            }
        }
    }
    let (idx, (mut cost, _)) = best.ok_or_else(|| HarnessError::Numeric("no certified gain in the search region".into()))?;
    let mut k = candidates[idx].clone();
    let evaluated = scored.iter().filter(|s| s.is_some()).count();
    if spec.refine {
        for (e, ax) in axes.iter().enumerate() {
            let step = ax[1] - ax[0];
            let (lo, hi) = (ax[0].max(k[e_pos(e, dx)] - step), ax[ax.len() - 1].min(k[e_pos(e, dx)] + step));
            let objective = |v: f64| {
                let mut kk = k.clone();
                kk[e_pos(e, dx)] = v;
                match certified_margin(sys, &kk) {
                    Some(g) if g >= spec.min_gamma => eval.mean_total(&kk, noises).unwrap_or(f64::INFINITY),
                    _ => f64::INFINITY,
                }
            };
            let (v, c) = golden_min(objective, lo, hi, 40);
            if c < cost {
                k[e_pos(e, dx)] = v;
                cost = c;
            }
        }
    }
    let gamma = certified_margin(sys, &k).unwrap_or(0.0);
    Ok(LinearComparator {
        k: dacctl_core::linalg::nested_rows(&k),
        mean_total: cost,
        method: SearchMethod::Grid,
        evaluated,
        gamma,
    })
}

/// Row-major entry `e` of a `du x dx` gain as an (row, col) index.
fn e_pos(e: usize, dx: usize) -> (usize, usize) {
    (e / dx, e % dx)
}

/// Riccati gain of the time-averaged weights, polished by coordinate descent.
pub fn coordinate_descent(
    sys: &LinearSystem,
    noises: &[Vec<DVector<f64>>],
    costs: &[CostFunction],
    spec: &ComparatorSpec,
) -> Result<LinearComparator> {
    let eval = LinearEvaluator::new(sys, costs);
    let dx = sys.dx();
    let mut evaluated = 0usize;
    let mut objective = |k: &DMatrix<f64>| -> f64 {
        evaluated += 1;
        match certified_margin(sys, k) {
            Some(g) if g >= spec.min_gamma => eval.mean_total(k, noises).unwrap_or(f64::INFINITY),
            _ => f64::INFINITY,
        }
    };
    let mut k = riccati_start(sys, costs)?;
    let mut cost = objective(&k);
    if !cost.is_finite() {
        return Err(HarnessError::Numeric(
            "Riccati gain of the averaged cost does not certify with the required margin".into(),
        ));
    }
    let scale = k.amax().max(1.0);
    for sweep in 0..spec.cd_sweeps {
        let delta = 0.5 * scale * 0.7f64.powi(sweep as i32);
        for e in 0..k.len() {
            let pos = e_pos(e, dx);
            let center = k[pos];
            let (v, c) = golden_min(
                |v| {
                    let mut kk = k.clone();
                    kk[pos] = v;
                    objective(&kk)
                },
                center - delta,
                center + delta,
                30,
            );
            if c < cost {
                k[pos] = v;
                cost = c;
            }
        }
    }
    let gamma = certified_margin(sys, &k).unwrap_or(0.0);
    Ok(LinearComparator {
        k: dacctl_core::linalg::nested_rows(&k),
        mean_total: cost,
        method: SearchMethod::CoordinateDescent,
        evaluated,
        gamma,
    })
}

/// Minimizer of the summed surrogate over the policy class.
#[derive(Debug, Clone, Serialize)]
pub struct OfflineDac {
    pub policy: DacPolicy,
    /// `(1/n) sum_t f_t(M*)` over the steps included in the objective.
    pub mean_surrogate: f64,
    pub iterations: usize,
    pub gradient_mapping: f64,
}

pub const OFFLINE_TOL: f64 = 1e-8;
pub const OFFLINE_MAX_ITERS: usize = 100_000;

/// Averaged closed-form surrogate over `t >= H` (all steps if `T <= H`).
pub fn aggregate_surrogate(model: &SurrogateModel, costs: &[CostFunction]) -> Result<QuadraticSurrogate> {
    let start = if costs.len() > model.h() { model.h() } else { 0 };
    let used = &costs[start..];
    let mut agg = QuadraticSurrogate::zeros(model.dim());
    let w = 1.0 / used.len() as f64;
    for c in used {
        if c.quadratic().is_none() {
            return Err(HarnessError::Config("offline DAC comparator needs quadratic-family costs".into()));
        }
        agg.add_scaled(&model.quadratic_surrogate(c)?, w);
    }
    Ok(agg)
}

pub fn offline_best_dac(model: &SurrogateModel, costs: &[CostFunction], class: &PolicyClass) -> Result<OfflineDac> {
    let agg = aggregate_surrogate(model, costs)?;
    minimize_over_class(&agg, class, &DacPolicy::zeros(class.h(), class.du(), class.dx()))
}

/// Projected gradient with step `1/L` until the gradient mapping is at most [`OFFLINE_TOL`].
pub fn minimize_over_class(f: &QuadraticSurrogate, class: &PolicyClass, start: &DacPolicy) -> Result<OfflineDac> {
    let (h, du, dx) = (class.h(), class.du(), class.dx());
    let lip = 2.0 * max_eigenvalue_sym(&f.quad);
    if !(lip > 0.0 && lip.is_finite()) {
        return Err(HarnessError::Numeric(format!("surrogate curvature {lip} is not positive")));
    }
    let mut m = project_euclidean(start, class).vectorize();
    let mut mapping = f64::INFINITY;
    for it in 0..OFFLINE_MAX_ITERS {
        let g = f.grad(&m);
        let next = project_euclidean(&DacPolicy::devectorize(&(&m - g / lip), h, du, dx)?, class).vectorize();
        mapping = lip * (&next - &m).norm();
        m = next;
        if mapping <= OFFLINE_TOL {
            return Ok(OfflineDac {
                mean_surrogate: f.value(&m),
                policy: DacPolicy::devectorize(&m, h, du, dx)?,
                iterations: it + 1,
                gradient_mapping: mapping,
            });
        }
    }
    Err(HarnessError::Numeric(format!(
        "offline DAC did not converge in {OFFLINE_MAX_ITERS} iterations (gradient mapping {mapping:e}, L = {lip:e})"
    )))
}

/// Realized per-step cost of a fixed DAC policy.
pub fn dac_per_step(
    sys: &LinearSystem,
    k_fixed: &DMatrix<f64>,
    policy: &DacPolicy,
    noise: &[DVector<f64>],
    costs: &[CostFunction],
) -> Result<Vec<f64>> {
    let mut ctl = DacController::new(sys, k_fixed.clone(), policy.clone());
    Ok(rollout(sys, &mut ctl, noise, costs)?.per_step_costs)
}
