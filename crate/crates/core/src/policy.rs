//! Disturbance-action policies, their feasible set and projections.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{dim_err, Error, Result};
use crate::lds::{recover_disturbance, Controller, LinearSystem};
use crate::linalg::{from_nested_rows, max_eigenvalue_sym, mat_pow, nested_rows};

/// `u_t = -K x_t + sum_{i=1}^{H} M^{[i-1]} w_{t-i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DacPolicy {
    blocks: Vec<DMatrix<f64>>,
}

impl DacPolicy {
    pub fn zeros(h: usize, du: usize, dx: usize) -> Self {
        Self {
            blocks: vec![DMatrix::zeros(du, dx); h],
        }
    }

    pub fn from_blocks(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::InvalidParameter("a policy needs at least one block".into()));
        };
        let shape = first.shape();
        if let Some(bad) = blocks.iter().find(|b| b.shape() != shape) {
            return Err(dim_err("DacPolicy blocks", format!("{shape:?}"), format!("{:?}", bad.shape())));
        }
        Ok(Self { blocks })
    }

    pub fn h(&self) -> usize {
        self.blocks.len()
    }
    pub fn du(&self) -> usize {
        self.blocks[0].nrows()
    }
    pub fn dx(&self) -> usize {
        self.blocks[0].ncols()
    }
    /// Length of [`Self::vectorize`].
    pub fn dim(&self) -> usize {
        self.h() * self.du() * self.dx()
    }
    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }
    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }

    /// Blocks in ascending order, each flattened row by row: entry `(a, b)`
    /// of block `l` lands at `l*du*dx + a*dx + b`.
    pub fn vectorize(&self) -> DVector<f64> {
        let (du, dx) = (self.du(), self.dx());
        let mut v = DVector::zeros(self.dim());
        for (l, m) in self.blocks.iter().enumerate() {
            for a in 0..du {
                for b in 0..dx {
                    v[l * du * dx + a * dx + b] = m[(a, b)];
                }
            }
        }
        v
    }

    pub fn devectorize(v: &DVector<f64>, h: usize, du: usize, dx: usize) -> Result<Self> {
        if h == 0 || v.len() != h * du * dx {
            return Err(dim_err("devectorize", h * du * dx, v.len()));
        }
        let blocks = (0..h)
            .map(|l| DMatrix::from_fn(du, dx, |a, b| v[l * du * dx + a * dx + b]))
            .collect();
        Ok(Self { blocks })
    }

    /// Largest spectral norm of any block.
    pub fn max_block_norm(&self) -> f64 {
        self.blocks.iter().map(block_norm).fold(0.0, f64::max)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyRepr {
    blocks: Vec<Vec<Vec<f64>>>,
}

impl Serialize for DacPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PolicyRepr {
            blocks: self.blocks.iter().map(nested_rows).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DacPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PolicyRepr::deserialize(d)?;
        let blocks = repr
            .blocks
            .iter()
            .map(|b| from_nested_rows(b).ok_or_else(|| serde::de::Error::custom("ragged block")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        DacPolicy::from_blocks(blocks).map_err(serde::de::Error::custom)
    }
}

fn block_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 || m.ncols() == 1 {
        m.norm()
    } else {
        m.singular_values().max()
    }
}

/// Product of spectral-norm balls `|M^{[i]}| <= r_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyClass {
    radii: Vec<f64>,
    du: usize,
    dx: usize,
}

impl PolicyClass {
    /// Radii `kappa^3 kappa_B (1 - gamma)^{i+1}` for blocks `i = 0..h`.
    pub fn from_certificate(h: usize, kappa: f64, gamma: f64, kappa_b: f64, du: usize, dx: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidParameter(format!("policy class needs gamma in (0, 1), got {gamma}")));
        }
        if !(kappa_b > 0.0) {
            return Err(Error::InvalidParameter("policy class needs kappa_B > 0".into()));
        }
        let scale = kappa.powi(3) * kappa_b;
        Self::from_radii((0..h).map(|i| scale * (1.0 - gamma).powi(i as i32 + 1)).collect(), du, dx)
    }

    pub fn from_radii(radii: Vec<f64>, du: usize, dx: usize) -> Result<Self> {
        if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidParameter(format!("radii must be positive and finite: {radii:?}")));
        }
        Ok(Self { radii, du, dx })
    }

    pub fn h(&self) -> usize {
        self.radii.len()
    }
    pub fn du(&self) -> usize {
        self.du
    }
    pub fn dx(&self) -> usize {
        self.dx
    }
    pub fn radii(&self) -> &[f64] {
        &self.radii
    }
    pub fn dim(&self) -> usize {
        self.h() * self.du * self.dx
    }

    fn check(&self, m: &DacPolicy) -> Result<()> {
        if m.h() != self.h() || m.du() != self.du || m.dx() != self.dx {
            return Err(dim_err(
                "policy vs class",
                format!("{}x{}x{}", self.h(), self.du, self.dx),
                format!("{}x{}x{}", m.h(), m.du(), m.dx()),
            ));
        }
        Ok(())
    }

    /// Largest `|M^{[i]}| - r_i` (non-positive when feasible).
    pub fn violation(&self, m: &DacPolicy) -> f64 {
        m.blocks
            .iter()
            .zip(&self.radii)
            .map(|(b, r)| block_norm(b) - r)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, m: &DacPolicy, slack: f64) -> bool {
        self.violation(m) <= slack
    }
}

/// The last `H` disturbances, newest first, zero before the first push.
#[derive(Debug, Clone)]
pub struct DisturbanceRing {
    buf: VecDeque<DVector<f64>>,
    cap: usize,
}

impl DisturbanceRing {
    pub fn new(cap: usize, dx: usize) -> Self {
        Self {
            buf: std::iter::repeat_n(DVector::zeros(dx), cap).collect(),
            cap,
        }
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn push(&mut self, w: DVector<f64>) {
        if self.cap == 0 {
            return;
        }
        self.buf.pop_back();
        self.buf.push_front(w);
    }

    /// `w_{t-i}` for `i` in `1..=H`.
    pub fn lag(&self, i: usize) -> &DVector<f64> {
        &self.buf[i - 1]
    }

    /// `w_{t-1}, ..., w_{t-H}`.
    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.buf.iter()
    }
}

pub fn action(m: &DacPolicy, k_fixed: &DMatrix<f64>, x: &DVector<f64>, ring: &DisturbanceRing) -> DVector<f64> {
    let mut u = -(k_fixed * x);
    for (block, w) in m.blocks.iter().zip(ring.iter()) {
        u.gemv(1.0, block, w, 1.0);
    }
    u
}

fn clip_block(m: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
    if m.nrows() == 1 || m.ncols() == 1 {
        let n = m.norm();
        return if n > r { m * (r / n) } else { m.clone() };
    }
    let svd = m.clone().svd(true, true);
    // rounding in the SVD round trip must not trigger a second clip
    if svd.singular_values.max() <= r * (1.0 + 1e-12) {
        return m.clone();
    }
    let u = svd.u.expect("U");
    let vt = svd.v_t.expect("V^T");
    let s = svd.singular_values.map(|x| x.min(r));
    u * DMatrix::from_diagonal(&s) * vt
}

/// Euclidean projection: clip each block's singular values at its radius.
pub fn project_euclidean(m: &DacPolicy, class: &PolicyClass) -> DacPolicy {
    debug_assert!(class.check(m).is_ok());
    DacPolicy {
        blocks: m.blocks.iter().zip(&class.radii).map(|(b, r)| clip_block(b, *r)).collect(),
    }
}

fn clip_slice(v: &DVector<f64>, du: usize, dx: usize, r: f64) -> DVector<f64> {
    let m = DMatrix::from_fn(du, dx, |a, b| v[a * dx + b]);
    let c = clip_block(&m, r);
    DVector::from_fn(du * dx, |k, _| c[(k / dx, k % dx)])
}

#[derive(Debug, Clone)]
struct BlockMetric {
    /// Schur complement of the block in `P`.
    s: DMatrix<f64>,
    lipschitz: f64,
    /// `P_rr^{-1} P_ri`.
    coupling: DMatrix<f64>,
}

/// Settings for the P-metric projection.
#[derive(Debug, Clone, Copy)]
pub struct WeightedProjectionOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for WeightedProjectionOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_sweeps: 500,
        }
    }
}

/// Projection onto the policy class in the norm `|v|_P = sqrt(v^T P v)`, with
/// the per-block Schur complements cached.
#[derive(Debug, Clone)]
pub struct WeightedProjector {
    class: PolicyClass,
    metrics: Vec<BlockMetric>,
    opts: WeightedProjectionOptions,
}

fn rest_indices(n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..lo).chain(hi..n).collect()
}

impl WeightedProjector {
    pub fn new(p: &DMatrix<f64>, class: &PolicyClass, opts: WeightedProjectionOptions) -> Result<Self> {
        let n = class.dim();
        if p.shape() != (n, n) {
            return Err(dim_err("project_weighted: P", format!("{n}x{n}"), format!("{:?}", p.shape())));
        }
        let p = crate::linalg::symmetrize(p);
        if p.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("projection metric"));
        }
        let bs = class.du * class.dx;
        let mut metrics = Vec::with_capacity(class.h());
        for i in 0..class.h() {
            let (lo, hi) = (i * bs, (i + 1) * bs);
            let rest = rest_indices(n, lo, hi);
            let p_ii = p.view((lo, lo), (bs, bs)).into_owned();
            let (s, coupling) = if rest.is_empty() {
                (p_ii, DMatrix::zeros(0, bs))
            } else {
                let p_rr = p.select_rows(&rest).select_columns(&rest);
                let p_ri = p.select_rows(&rest).columns(lo, bs).into_owned();
                let chol = p_rr.cholesky().ok_or(Error::NotPositiveDefinite("projection metric"))?;
                let coupling = chol.solve(&p_ri);
                (crate::linalg::symmetrize(&(p_ii - p_ri.transpose() * &coupling)), coupling)
            };
            let lipschitz = 2.0 * max_eigenvalue_sym(&s);
            metrics.push(BlockMetric { s, lipschitz, coupling });
        }
        Ok(Self {
            class: class.clone(),
            metrics,
            opts,
        })
    }

    /// Nearest point of the `i`-th constraint set, other blocks free.
    fn project_onto(&self, i: usize, z: &DVector<f64>) -> DVector<f64> {
        let (du, dx) = (self.class.du, self.class.dx);
        let bs = du * dx;
        let lo = i * bs;
        let r = self.class.radii[i];
        let z_i = z.rows(lo, bs).into_owned();
        let x_i = if block_norm(&DMatrix::from_fn(du, dx, |a, b| z_i[a * dx + b])) <= r {
            return z.clone();
        } else if bs == 1 {
            clip_slice(&z_i, 1, 1, r)
        } else {
            self.ball_in_metric(i, &z_i)
        };
        let delta = &x_i - &z_i;
        let mut out = z.clone();
        out.rows_mut(lo, bs).copy_from(&x_i);
        let shift = &self.metrics[i].coupling * &delta;
        for (k, idx) in rest_indices(z.len(), lo, lo + bs).into_iter().enumerate() {
            out[idx] -= shift[k];
        }
        out
    }

    /// argmin over `|X| <= r` of `|X - Z|_S^2`, by accelerated projected gradient.
    fn ball_in_metric(&self, i: usize, z: &DVector<f64>) -> DVector<f64> {
        let (du, dx) = (self.class.du, self.class.dx);
        let r = self.class.radii[i];
        let m = &self.metrics[i];
        let step = 1.0 / m.lipschitz;
        let mut x = clip_slice(z, du, dx, r);
        let mut y = x.clone();
        let mut t = 1.0_f64;
        for _ in 0..20_000 {
            let grad = (&m.s * (&y - z)) * 2.0;
            let next = clip_slice(&(&y - grad * step), du, dx, r);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let moved = (&next - &x).amax();
            y = &next + (&next - &x) * ((t - 1.0) / t_next);
            x = next;
            t = t_next;
            if moved <= 1e-15 * (1.0 + r) {
                break;
            }
        }
        x
    }

    pub fn project(&self, m: &DacPolicy) -> Result<DacPolicy> {
        self.class.check(m)?;
        if self.class.contains(m, 0.0) {
            return Ok(m.clone());
        }
        let h = self.class.h();
        let z = m.vectorize();
        let mut x = z.clone();
        let mut incr = vec![DVector::<f64>::zeros(z.len()); h];
        for _ in 0..self.opts.max_sweeps {
            let start = x.clone();
            for (i, p_i) in incr.iter_mut().enumerate() {
                let shifted = &x + &*p_i;
                let y = self.project_onto(i, &shifted);
                *p_i = shifted - &y;
                x = y;
            }
            if (&x - &start).amax() <= self.opts.tol {
                break;
            }
        }
        let out = DacPolicy::devectorize(&x, h, self.class.du, self.class.dx)?;
        Ok(project_euclidean(&out, &self.class))
    }
}

/// One-shot P-metric projection.
pub fn project_weighted(m: &DacPolicy, class: &PolicyClass, p: &DMatrix<f64>) -> Result<DacPolicy> {
    WeightedProjector::new(p, class, WeightedProjectionOptions::default())?.project(m)
}

/// The DAC policy that imitates the linear controller `K*` on top of `K_fixed`:
/// `M^{[i]} = (K_fixed - K*) (A - B K*)^i`.
pub fn linear_to_dac(k_fixed: &DMatrix<f64>, k_star: &DMatrix<f64>, sys: &LinearSystem, h: usize) -> Result<DacPolicy> {
    let acl = crate::stability::closed_loop(sys, k_star)?;
    crate::stability::closed_loop(sys, k_fixed)?;
    let diff = k_fixed - k_star;
    let blocks = (0..h).map(|i| &diff * mat_pow(&acl, i)).collect();
    DacPolicy::from_blocks(blocks)
}

/// Fixed-policy DAC controller that reconstructs disturbances online.
#[derive(Debug, Clone)]
pub struct DacController<'a> {
    pub sys: &'a LinearSystem,
    pub k_fixed: DMatrix<f64>,
    pub policy: DacPolicy,
    pub ring: DisturbanceRing,
}

impl<'a> DacController<'a> {
    pub fn new(sys: &'a LinearSystem, k_fixed: DMatrix<f64>, policy: DacPolicy) -> Self {
        let ring = DisturbanceRing::new(policy.h(), sys.dx());
        Self {
            sys,
            k_fixed,
            policy,
            ring,
        }
    }
}

impl Controller for DacController<'_> {
    fn act(&mut self, _t: usize, x: &DVector<f64>) -> DVector<f64> {
        action(&self.policy, &self.k_fixed, x, &self.ring)
    }

    fn observe(&mut self, _t: usize, x: &DVector<f64>, u: &DVector<f64>, x_next: &DVector<f64>) {
        let w = recover_disturbance(self.sys, x, u, x_next).expect("dimensions checked by rollout");
        self.ring.push(w);
    }
}
