//! Experiment configuration (TOML) and its validation.

use std::path::{Path, PathBuf};

use dacctl_core::lds::{CostFunction, LinearSystem, NoiseModel};
use dacctl_core::learners::{LambdaChoice, LearnerConfig, Variant};
use dacctl_core::linalg::from_nested_rows;
use dacctl_core::rng::substream;
use dacctl_core::stability::{certify, default_gain, StabilityCertificate};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, HarnessError, Result};

fn default_replicas() -> usize {
    20
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Ogd, Variant::Ong]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of steps `T`.
    pub horizon: usize,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub system: SystemSpec,
    pub noise: NoiseSpec,
    pub cost: CostSpec,
    #[serde(default)]
    pub learner: LearnerSpec,
    #[serde(default)]
    pub comparator: ComparatorSpec,
    #[serde(default)]
    pub report: ReportSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_b: Option<f64>,
    /// Stabilizing gain; the Riccati gain for `Q = R = I` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_fixed: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKindName {
    SphereUniform,
    ScaledRademacher,
    TruncatedGaussian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKindName,
    /// Bound `W` on `|w_t|`.
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_std: Option<f64>,
    /// Root seed for every random stream of the run.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKindName {
    Spherical,
    Quadratic,
    Offset,
}

/// Per-step scale applied to the base weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScaleSequence {
    /// `scales[t mod len]`.
    Cycle { scales: Vec<f64> },
    /// Independent uniform draws from `[low, high]`.
    Uniform { low: f64, high: f64 },
}

impl Default for ScaleSequence {
    fn default() -> Self {
        ScaleSequence::Cycle { scales: vec![1.0] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub kind: CostKindName,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_ref: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_ref: Option<Vec<f64>>,
    #[serde(default)]
    pub sequence: ScaleSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaName {
    Theory,
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Named(LambdaName),
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMetric {
    Weighted,
    Euclidean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    pub lambda: LambdaSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ong_alpha: Option<f64>,
    pub ong_projection: ProjectionMetric,
    pub mc_samples: usize,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self {
            h: None,
            lambda: LambdaSpec::Named(LambdaName::Theory),
            ong_alpha: None,
            ong_projection: ProjectionMetric::Weighted,
            mc_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparatorSpec {
    /// Grid points per gain entry.
    pub grid_points: usize,
    /// Candidates must certify with at least this margin.
    pub min_gamma: f64,
    /// Golden-section polish around the best grid cell.
    pub refine: bool,
    pub cd_sweeps: usize,
    /// Half-width of the search box for two-entry gains.
    pub grid_half_width: f64,
    pub offline_dac: bool,
}

impl Default for ComparatorSpec {
    fn default() -> Self {
        Self {
            grid_points: 201,
            min_gamma: 0.02,
            refine: true,
            cd_sweeps: 20,
            grid_half_width: 2.0,
            offline_dac: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSpec {
    /// Fits and the monotonicity check use `T >= 2^fit_min_log2`.
    pub fit_min_log2: u32,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self { fit_min_log2: 10 }
    }
}

/// The plant, noise and costs built from a validated config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub sys: LinearSystem,
    pub noise_model: NoiseModel,
    pub k_fixed: DMatrix<f64>,
    pub cert: StabilityCertificate,
    pub costs: Vec<CostFunction>,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = from_nested_rows(rows).ok_or_else(|| HarnessError::Config(format!("{name}: ragged rows")))?;
    if m.is_empty() {
        return Err(HarnessError::Config(format!("{name}: empty matrix")));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(HarnessError::Config(format!("{name}: non-finite entry")));
    }
    Ok(m)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Checks that do not need the plant to be built.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if self.replicas == 0 {
            return bad("replicas must be positive".into());
        }
        if self.variants.is_empty() {
            return bad("at least one variant is required".into());
        }
        if !(self.noise.radius > 0.0 && self.noise.radius.is_finite()) {
            return bad(format!("noise radius must be positive, got {}", self.noise.radius));
        }
        if self.noise.kind == NoiseKindName::TruncatedGaussian && self.noise.base_std.is_none() {
            return bad("truncated_gaussian noise needs base_std".into());
        }
        if self.cost.alpha.is_nan() || self.cost.alpha <= 0.0 {
            return bad(format!("cost alpha must be positive, got {}", self.cost.alpha));
        }
        if let Some(beta) = self.cost.beta {
            if beta.is_nan() || beta < self.cost.alpha {
                return bad(format!("cost beta {beta} below alpha {}", self.cost.alpha));
            }
        }
        match &self.cost.sequence {
            ScaleSequence::Cycle { scales } => {
                if scales.is_empty() || !scales.iter().all(|s| *s > 0.0 && s.is_finite()) {
                    return bad("cost scales must be a non-empty list of positive numbers".into());
                }
            }
            ScaleSequence::Uniform { low, high } => {
                if !(*low > 0.0 && low <= high && high.is_finite()) {
                    return bad(format!("cost scale range [{low}, {high}] is invalid"));
                }
            }
        }
        if let Some(h) = self.learner.h {
            if h == 0 || h > dacctl_core::learners::H_CAP {
                return bad(format!("learner h must be in 1..={}", dacctl_core::learners::H_CAP));
            }
        }
        if let LambdaSpec::Value(v) = self.learner.lambda {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("lambda must be positive, got {v}"));
            }
        }
        if self.learner.mc_samples < 2 {
            return bad("mc_samples must be at least 2".into());
        }
        if self.comparator.grid_points < 2 {
            return bad("grid_points must be at least 2".into());
        }
        if !(self.comparator.min_gamma > 0.0 && self.comparator.min_gamma <= 1.0) {
            return bad("min_gamma must be in (0, 1]".into());
        }
        if let Some(x0) = &self.system.initial_state {
            if x0.iter().any(|v| *v != 0.0) {
                return bad("only the zero initial state is supported".into());
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.noise.seed
    }

    /// Builds the plant, certifies the fixed gain and materializes the cost sequence.
    pub fn build(&self) -> Result<Setup> {
        let a = matrix("system.a", &self.system.a)?;
        let b = matrix("system.b", &self.system.b)?;
        let sys = LinearSystem::new(a, b, self.system.kappa_b).map_err(config_err("system"))?;
        let (dx, du) = (sys.dx(), sys.du());
        if let Some(x0) = &self.system.initial_state {
            if x0.len() != dx {
                return Err(HarnessError::Config(format!("initial_state has length {}, expected {dx}", x0.len())));
            }
        }
        let k_fixed = match &self.system.k_fixed {
            Some(rows) => matrix("system.k_fixed", rows)?,
            None => default_gain(&sys).map_err(config_err("default gain"))?,
        };
        if k_fixed.shape() != (du, dx) {
            return Err(HarnessError::Config(format!("k_fixed must be {du}x{dx}")));
        }
        let cert = certify(&sys, &k_fixed, None).map_err(config_err("k_fixed certification"))?;
        let w = self.noise.radius;
        let noise_model = match self.noise.kind {
            NoiseKindName::SphereUniform => NoiseModel::sphere_uniform(dx, w),
            NoiseKindName::ScaledRademacher => NoiseModel::scaled_rademacher(dx, w),
            NoiseKindName::TruncatedGaussian => {
                NoiseModel::truncated_gaussian(dx, w, self.noise.base_std.unwrap_or(1.0), self.noise.seed)
            }
        }
        .map_err(config_err("noise"))?;
        let costs = self.build_costs(dx, du, &cert)?;
        Ok(Setup {
            sys,
            noise_model,
            k_fixed,
            cert,
            costs,
        })
    }

    fn scales(&self) -> Vec<f64> {
        let t = self.horizon;
        match &self.cost.sequence {
            ScaleSequence::Cycle { scales } => (0..t).map(|i| scales[i % scales.len()]).collect(),
            ScaleSequence::Uniform { low, high } => {
                let mut rng = substream(self.noise.seed, "cost_scales", 0);
                (0..t)
                    .map(|_| if low == high { *low } else { rng.random_range(*low..=*high) })
                    .collect()
            }
        }
    }

    fn build_costs(&self, dx: usize, du: usize, cert: &StabilityCertificate) -> Result<Vec<CostFunction>> {
        let spec = &self.cost;
        let alpha = spec.alpha;
        let scales = self.scales();
        match spec.kind {
            CostKindName::Spherical => {
                let beta = spec
                    .beta
                    .ok_or_else(|| HarnessError::Config("spherical costs need beta".into()))?;
                scales
                    .iter()
                    .map(|&r| CostFunction::spherical(r, dx, du, alpha, beta).map_err(config_err("cost")))
                    .collect()
            }
            CostKindName::Quadratic | CostKindName::Offset => {
                let q = matrix("cost.q", spec.q.as_deref().unwrap_or_default())?;
                let r = matrix("cost.r", spec.r.as_deref().unwrap_or_default())?;
                let (xr, ur) = if spec.kind == CostKindName::Offset {
                    let xr = DVector::from_vec(spec.x_ref.clone().unwrap_or_else(|| vec![0.0; dx]));
                    let ur = DVector::from_vec(spec.u_ref.clone().unwrap_or_else(|| vec![0.0; du]));
                    let cap = self.noise.radius / cert.gamma;
                    if xr.norm() > cap || ur.norm() > cap {
                        return Err(HarnessError::Config(format!("offsets must have norm at most W / gamma = {cap}")));
                    }
                    (Some(xr), Some(ur))
                } else {
                    (None, None)
                };
                let mut out = Vec::with_capacity(scales.len());
                for &s in &scales {
                    let (qs, rs) = (&q * s, &r * s);
                    if let Some(beta) = spec.beta {
                        let top = dacctl_core::linalg::max_eigenvalue_sym(&qs).max(dacctl_core::linalg::max_eigenvalue_sym(&rs));
                        if top > beta * (1.0 + 1e-12) {
                            return Err(HarnessError::Config(format!("scaled weights exceed beta = {beta}")));
                        }
                    }
                    let c = match (&xr, &ur) {
                        (Some(xr), Some(ur)) => CostFunction::offset_quadratic(qs, rs, xr.clone(), ur.clone(), alpha),
                        _ => CostFunction::general_quadratic(qs, rs, alpha),
                    }
                    .map_err(config_err("cost"))?;
                    out.push(c);
                }
                Ok(out)
            }
        }
    }

    pub fn learner_config(&self, variant: Variant) -> LearnerConfig {
        LearnerConfig {
            variant,
            h: self.learner.h,
            lambda: match self.learner.lambda {
                LambdaSpec::Named(LambdaName::Theory) => LambdaChoice::Theory,
                LambdaSpec::Named(LambdaName::Measured) => LambdaChoice::Measured,
                LambdaSpec::Value(v) => LambdaChoice::Fixed(v),
            },
            ong_alpha: self.learner.ong_alpha,
            ong_euclidean_projection: self.learner.ong_projection == ProjectionMetric::Euclidean,
            mc_samples: self.learner.mc_samples,
            mc_seed: substream_seed(self.noise.seed, "surrogate_mc"),
            record_history: false,
        }
    }

    /// Disturbance realization of replica `r`, shared by learner and comparators.
    pub fn noise_realization(&self, model: &NoiseModel, replica: usize) -> Vec<DVector<f64>> {
        let mut rng = substream(self.noise.seed, "noise", replica as u64);
        model.sample_noise(&mut rng, self.horizon)
    }
}

fn substream_seed(seed: u64, purpose: &str) -> u64 {
    substream(seed, purpose, 0).random()
}
