//! How well truncated surrogates and truncated DAC policies track the real thing.

use dacctl_core::lds::{CostFunction, LinearSystem, StageCost};
use dacctl_core::learners::RunLog;
use dacctl_core::policy::{linear_to_dac, DacPolicy};
use dacctl_core::surrogate::{psi_nonstationary, SurrogateModel};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::comparators::{dac_per_step, LinearEvaluator};
use crate::error::{HarnessError, Result};

/// Constants of the class the bounds are evaluated for.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClassConstants {
    pub kappa: f64,
    pub gamma: f64,
    pub kappa_b: f64,
    /// Noise bound `W`.
    pub w: f64,
}

impl ClassConstants {
    fn tau(&self) -> f64 {
        self.kappa.powi(3) * self.kappa_b
    }

    /// Bound `D` on states and actions under any policy of the memory-`h` class.
    pub fn diameter(&self, h: usize) -> f64 {
        let (k, g, w) = (self.kappa, self.gamma, self.w);
        let tau = self.tau();
        let decay = 1.0 - k * k * (1.0 - g).powi(h as i32 + 1);
        w * k.powi(3) * (1.0 + h as f64 * self.kappa_b * tau) / (g * decay) + tau * w / g
    }

    /// `2 T G D^2 kappa^3 (1 - gamma)^{H+1}`.
    pub fn surrogate_bound(&self, t: usize, g: f64, h: usize) -> f64 {
        let d = self.diameter(h);
        2.0 * t as f64 * g * d * d * self.kappa.powi(3) * (1.0 - self.gamma).powi(h as i32 + 1)
    }

    /// `2 T G D W H kappa_B^2 kappa^5 (1 - gamma)^H / gamma`.
    pub fn sufficiency_bound(&self, t: usize, g: f64, h: usize) -> f64 {
        let d = self.diameter(h);
        2.0 * t as f64 * g * d * self.w * h as f64 * self.kappa_b.powi(2) * self.kappa.powi(5) * (1.0 - self.gamma).powi(h as i32)
            / self.gamma
    }
}

/// Largest `G` with `|grad c_t| <= G D` over the sequence.
pub fn gradient_constant(costs: &[CostFunction], d: f64) -> f64 {
    costs.iter().map(|c| c.grad_bound(d)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub h: usize,
    pub surrogate_total: f64,
    pub realized_total: f64,
    pub gap: f64,
    pub bound: f64,
    pub within_bound: bool,
}

/// Realized states, actions and disturbances of one run.
pub struct Path<'a> {
    pub states: &'a [DVector<f64>],
    pub actions: &'a [DVector<f64>],
    pub noise: &'a [DVector<f64>],
}

/// Pathwise `|sum_t f_t(M_{t-H..t}) - sum_t c_t(x_t, u_t)|`, where the
/// surrogate state is rebuilt from the last `2H` realized disturbances and the
/// policies in force over the last `H` steps.
pub fn surrogate_vs_realized_path(
    model: &SurrogateModel,
    policies: &[DacPolicy],
    path: &Path<'_>,
    costs: &[CostFunction],
    consts: &ClassConstants,
) -> Result<GapReport> {
    let t_len = costs.len();
    if policies.len() != t_len || path.states.len() < t_len || path.actions.len() != t_len || path.noise.len() != t_len {
        return Err(HarnessError::Numeric("surrogate check: run length mismatch".into()));
    }
    let h = model.h();
    let (a_tilde, b, k) = (model.a_tilde(), model.b(), model.k_fixed());
    let dx = model.dx();
    let zero = DVector::zeros(dx);
    let w_at = |s: isize| if s < 0 { &zero } else { &path.noise[s as usize] };
    let mut cache: Option<(DacPolicy, Vec<DMatrix<f64>>)> = None;
    let (mut surrogate_total, mut realized_total, mut diff) = (0.0, 0.0, 0.0);
    for t in 0..t_len {
        let window: Vec<DacPolicy> = (0..h)
            .map(|j| {
                let s = t as isize - h as isize + j as isize;
                policies[s.max(0) as usize].clone()
            })
            .collect();
        let stationary = window.iter().all(|p| p == &window[0]);
        let hit = stationary && cache.as_ref().is_some_and(|(p, _)| p == &window[0]);
        let mut fresh = Vec::new();
        if !hit {
            let list = (0..2 * h)
                .map(|i| psi_nonstationary(&window, i, a_tilde, b))
                .collect::<dacctl_core::Result<Vec<_>>>()?;
            if stationary {
                cache = Some((window[0].clone(), list));
            } else {
                fresh = list;
            }
        }
        let psis: &[DMatrix<f64>] = if stationary { &cache.as_ref().expect("cached").1 } else { &fresh };
        let mut y = DVector::zeros(dx);
        for (i, p) in psis.iter().enumerate() {
            y.gemv(1.0, p, w_at(t as isize - 1 - i as isize), 1.0);
        }
        let mut v = -(k * &y);
        for (i, blk) in policies[t].blocks().iter().enumerate() {
            v.gemv(1.0, blk, w_at(t as isize - 1 - i as isize), 1.0);
        }
        let (s, r) = (costs[t].value(&y, &v), costs[t].value(&path.states[t], &path.actions[t]));
        surrogate_total += s;
        realized_total += r;
        // summed per step so tiny gaps are not lost to cancellation of the totals
        diff += s - r;
    }
    let g = gradient_constant(costs, consts.diameter(h));
    let bound = consts.surrogate_bound(t_len, g, h);
    let gap = diff.abs();
    Ok(GapReport {
        h,
        surrogate_total,
        realized_total,
        gap,
        bound,
        within_bound: gap <= bound,
    })
}

/// [`surrogate_vs_realized_path`] on a learner run that kept its policy history.
pub fn surrogate_vs_realized(
    log: &RunLog,
    model: &SurrogateModel,
    costs: &[CostFunction],
    consts: &ClassConstants,
) -> Result<GapReport> {
    let history = log
        .history
        .as_ref()
        .ok_or_else(|| HarnessError::Numeric("run log has no policy history".into()))?;
    let to_vec = |v: &[f64]| DVector::from_column_slice(v);
    let states: Vec<_> = log.records.iter().map(|r| to_vec(&r.x)).collect();
    let actions: Vec<_> = log.records.iter().map(|r| to_vec(&r.u)).collect();
    let noise: Vec<_> = log.records.iter().map(|r| to_vec(&r.w)).collect();
    let path = Path {
        states: &states,
        actions: &actions,
        noise: &noise,
    };
    surrogate_vs_realized_path(model, history, &path, costs, consts)
}

pub type StatesAndActions = (Vec<DVector<f64>>, Vec<DVector<f64>>);

/// Realized path of a fixed DAC policy.
pub fn stationary_path(
    sys: &LinearSystem,
    k_fixed: &DMatrix<f64>,
    policy: &DacPolicy,
    noise: &[DVector<f64>],
    costs: &[CostFunction],
) -> Result<StatesAndActions> {
    let mut ctl = dacctl_core::policy::DacController::new(sys, k_fixed.clone(), policy.clone());
    let traj = dacctl_core::lds::rollout(sys, &mut ctl, noise, costs)?;
    Ok((traj.states, traj.actions))
}

#[derive(Debug, Clone, Serialize)]
pub struct SufficiencyReport {
    pub h: usize,
    pub dac_mean_total: f64,
    pub linear_mean_total: f64,
    pub gap: f64,
    pub bound: f64,
    pub within_bound: bool,
}

/// Cost of `K*` against its length-`h` DAC imitation, on shared noise.
pub fn dac_vs_linear_gap(
    sys: &LinearSystem,
    k_fixed: &DMatrix<f64>,
    k_star: &DMatrix<f64>,
    h: usize,
    noises: &[Vec<DVector<f64>>],
    costs: &[CostFunction],
    consts: &ClassConstants,
) -> Result<SufficiencyReport> {
    let m = linear_to_dac(k_fixed, k_star, sys, h)?;
    let eval = LinearEvaluator::new(sys, costs);
    let (mut dac, mut lin, mut diff) = (0.0, 0.0, 0.0);
    for n in noises {
        let d = dac_per_step(sys, k_fixed, &m, n, costs)?;
        let l = eval.per_step(k_star, n)?;
        dac += d.iter().sum::<f64>();
        lin += l.iter().sum::<f64>();
        diff += d.iter().zip(&l).map(|(a, b)| a - b).sum::<f64>();
    }
    let r = noises.len() as f64;
    let (dac, lin) = (dac / r, lin / r);
    let g = gradient_constant(costs, consts.diameter(h));
    let bound = consts.sufficiency_bound(costs.len(), g, h);
    let gap = (diff / r).abs();
    Ok(SufficiencyReport {
        h,
        dac_mean_total: dac,
        linear_mean_total: lin,
        gap,
        bound,
        within_bound: gap <= bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dacctl_core::lds::NoiseModel;

    fn consts() -> ClassConstants {
        ClassConstants {
            kappa: 1.0,
            gamma: 0.5,
            kappa_b: 1.0,
            w: 1.0,
        }
    }

    #[test]
    fn diameter_hand_value() {
        // h = 1: (1 + 1) / (0.5 (1 - 0.25)) + 2
        assert!((consts().diameter(1) - (2.0 / 0.375 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_gap_is_zero() {
        let sys = LinearSystem::scalar(0.9, 1.0);
        let k = DMatrix::from_element(1, 1, 0.4);
        let noise_model = NoiseModel::scaled_rademacher(1, 1.0).unwrap();
        let model = SurrogateModel::new(&sys, &k, &noise_model, 3).unwrap();
        let costs: Vec<_> = (0..30).map(|_| CostFunction::spherical(1.0, 1, 1, 1.0, 1.0).unwrap()).collect();
        let noise = vec![DVector::zeros(1); 30];
        let policy = DacPolicy::from_blocks(vec![DMatrix::from_element(1, 1, 0.1); 3]).unwrap();
        let (states, actions) = stationary_path(&sys, &k, &policy, &noise, &costs).unwrap();
        let path = Path {
            states: &states,
            actions: &actions,
            noise: &noise,
        };
        let rep = surrogate_vs_realized_path(&model, &vec![policy; 30], &path, &costs, &consts()).unwrap();
        assert_eq!(rep.surrogate_total, 0.0);
        assert_eq!(rep.realized_total, 0.0);
    }
}
