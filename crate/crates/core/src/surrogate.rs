//! Transfer matrices, the surrogate state/action, its Jacobian in the policy
//! and the exact and sampled surrogate cost.
//!
//! A window holds `w_0 .. w_{2H-1}`. The surrogate state is the state reached
//! after `H` closed-loop steps from rest:
//! `y = sum_{k=1}^{H} A^{k-1} (B v_k + w_{2H-k})` with
//! `v_k = sum_{i=1}^{H} M^{[i-1]} w_{2H-i-k}`, and the action is
//! `v = -K y + v_0`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::lds::{LinearSystem, NoiseModel, QuadraticForm, StageCost};
use crate::linalg::{block_reversal, powers, symmetrize};
use crate::policy::DacPolicy;
use crate::rng::substream;
use crate::spectral::{f_matrix, g_matrix_multidim, kron_identity};
use crate::stability::closed_loop;

/// Non-stationary transfer matrix for `policies = [M_{t-h}, ..., M_t]`:
/// `A^i 1{i<=h} + sum_{j=0}^{h} A^j B M_{t-j}^{[i-j-1]} 1{1 <= i-j <= H}`.
pub fn psi_nonstationary(policies: &[DacPolicy], i: usize, a_tilde: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let Some(first) = policies.first() else {
        return Err(Error::InvalidParameter("psi needs at least one policy".into()));
    };
    let hh = first.h();
    let h = policies.len() - 1;
    if i > hh + h {
        return Err(Error::IndexOutOfRange {
            context: "psi_nonstationary",
            index: i,
            lo: 0,
            hi: hh + h,
        });
    }
    let dx = a_tilde.nrows();
    let mut out = if i <= h {
        crate::linalg::mat_pow(a_tilde, i)
    } else {
        DMatrix::zeros(dx, dx)
    };
    let mut a_pow_b = b.clone();
    for j in 0..=h.min(i) {
        if i > j && i - j <= hh {
            out += &a_pow_b * policies[h - j].block(i - j - 1);
        }
        a_pow_b = a_tilde * a_pow_b;
    }
    Ok(out)
}

/// `Psi_i(M_0, ..., M_H)` for `i` in `0..=2H`.
pub fn psi(m_args: &[DacPolicy], i: usize, a_tilde: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let hh = m_args.first().map_or(0, DacPolicy::h);
    if m_args.len() != hh + 1 {
        return Err(dim_err("psi: policy arguments", hh + 1, m_args.len()));
    }
    if i > 2 * hh {
        return Err(Error::IndexOutOfRange {
            context: "psi",
            index: i,
            lo: 0,
            hi: 2 * hh,
        });
    }
    psi_nonstationary(m_args, i, a_tilde, b)
}

/// Exactly `2H` disturbances `w_0 .. w_{2H-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseWindow {
    w: Vec<DVector<f64>>,
}

impl NoiseWindow {
    pub fn new(w: Vec<DVector<f64>>, h: usize) -> Result<Self> {
        if h == 0 || w.len() != 2 * h {
            return Err(dim_err("NoiseWindow", 2 * h, w.len()));
        }
        Ok(Self { w })
    }

    pub fn zeros(h: usize, dx: usize) -> Self {
        Self {
            w: vec![DVector::zeros(dx); 2 * h],
        }
    }

    pub fn sample<R: Rng + ?Sized>(model: &NoiseModel, rng: &mut R, h: usize) -> Self {
        Self {
            w: model.sample_noise(rng, 2 * h),
        }
    }

    pub fn h(&self) -> usize {
        self.w.len() / 2
    }

    pub fn get(&self, s: usize) -> &DVector<f64> {
        &self.w[s]
    }

    pub fn as_slice(&self) -> &[DVector<f64>] {
        &self.w
    }
}

/// Surrogate state and action from the `H` policies in force while the state
/// evolves (oldest first) and the policy that picks the action.
pub fn surrogate_pair(
    state_policies: &[DacPolicy],
    action_policy: &DacPolicy,
    window: &NoiseWindow,
    a_tilde: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k_fixed: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let h = window.h();
    if state_policies.len() != h || action_policy.h() != h {
        return Err(dim_err("surrogate_pair: policies", h, state_policies.len()));
    }
    let mut y = DVector::zeros(a_tilde.nrows());
    for i in 0..2 * h {
        y += psi_nonstationary(state_policies, i, a_tilde, b)? * window.get(2 * h - 1 - i);
    }
    let mut v = -(k_fixed * &y);
    for i in 1..=h {
        v += action_policy.block(i - 1) * window.get(2 * h - i);
    }
    Ok((y, v))
}

/// Per-slot linear maps: `z(M) = sum_s (C_s (x) w_s^T) vec(M) + sum_s g_s w_s`.
///
/// `cmat[s]` is `(dx+du) x (H du)`, column `l du + a` for entry row `a` of
/// block `l`; `g[s]` is `(dx+du) x dx`.
#[derive(Debug, Clone)]
pub struct SlotCoefficients {
    pub cmat: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
}

pub fn slot_coefficients(a_tilde: &DMatrix<f64>, b: &DMatrix<f64>, k: &DMatrix<f64>, h: usize) -> SlotCoefficients {
    let (dx, du) = (b.nrows(), b.ncols());
    let pw = powers(a_tilde, h);
    let apb: Vec<DMatrix<f64>> = pw.iter().map(|p| p * b).collect();
    let mut cmat = vec![DMatrix::zeros(dx + du, h * du); 2 * h];
    let mut g = vec![DMatrix::zeros(dx + du, dx); 2 * h];
    for (s, c) in cmat.iter_mut().enumerate() {
        for l in 0..h {
            let lag = 2 * h - l - 1;
            if lag > s && lag - s <= h {
                let kk = lag - s;
                let top = apb[kk - 1].clone();
                let bottom = -(k * &top);
                for a in 0..du {
                    c.view_mut((0, l * du + a), (dx, 1)).copy_from(&top.column(a));
                    c.view_mut((dx, l * du + a), (du, 1)).copy_from(&bottom.column(a));
                }
            }
            if s == lag {
                for a in 0..du {
                    c[(dx + a, l * du + a)] += 1.0;
                }
            }
        }
    }
    for (s, gs) in g.iter_mut().enumerate() {
        let kk = 2 * h - s;
        if (1..=h).contains(&kk) {
            gs.view_mut((0, 0), (dx, dx)).copy_from(&pw[kk - 1]);
            gs.view_mut((dx, 0), (du, dx)).copy_from(&(-(k * &pw[kk - 1])));
        }
    }
    SlotCoefficients { cmat, g }
}

impl SlotCoefficients {
    pub fn h(&self) -> usize {
        self.cmat.len() / 2
    }

    /// `J` for one window, rows `[y; v]`.
    pub fn jacobian(&self, window: &NoiseWindow) -> DMatrix<f64> {
        let dx = window.get(0).len();
        let (rows, cols) = self.cmat[0].shape();
        let mut j = DMatrix::zeros(rows, cols * dx);
        for (s, c) in self.cmat.iter().enumerate() {
            let w = window.get(s);
            for col in 0..cols {
                for bi in 0..dx {
                    if w[bi] != 0.0 {
                        let mut dst = j.column_mut(col * dx + bi);
                        dst.axpy(w[bi], &c.column(col), 1.0);
                    }
                }
            }
        }
        j
    }

    /// `z(0)`, the policy-independent part of `[y; v]`.
    pub fn intercept(&self, window: &NoiseWindow) -> DVector<f64> {
        let mut z = DVector::zeros(self.g[0].nrows());
        for (s, g) in self.g.iter().enumerate() {
            z.gemv(1.0, g, window.get(s), 1.0);
        }
        z
    }
}

/// `J` for one window.
pub fn jacobian(window: &NoiseWindow, sys: &LinearSystem, k_fixed: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let acl = closed_loop(sys, k_fixed)?;
    Ok(slot_coefficients(&acl, sys.b(), k_fixed, window.h()).jacobian(window))
}

/// `z(0)` for one window.
pub fn intercept(window: &NoiseWindow, sys: &LinearSystem, k_fixed: &DMatrix<f64>) -> Result<DVector<f64>> {
    let acl = closed_loop(sys, k_fixed)?;
    Ok(slot_coefficients(&acl, sys.b(), k_fixed, window.h()).intercept(window))
}

/// `E[J^T J]` assembled from the Toeplitz/Kronecker aggregates
/// `[(I (x) B^T) G_I (I (x) B) + F] (x) Sigma`, in the policy-block order of
/// the vectorization (the aggregates index blocks newest-first, hence the
/// block reversal).
pub fn expected_gram(sys: &LinearSystem, k_fixed: &DMatrix<f64>, h: usize, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if h == 0 {
        return Err(Error::InvalidParameter("H must be >= 1".into()));
    }
    if sigma.shape() != (sys.dx(), sys.dx()) {
        return Err(dim_err("expected_gram: Sigma", sys.dx(), sigma.nrows()));
    }
    let acl = closed_loop(sys, k_fixed)?;
    let b = sys.b();
    let du = sys.du();
    let ib = kron_identity(h, b);
    let g_i = g_matrix_multidim(&acl, &DMatrix::identity(sys.dx(), sys.dx()), h);
    let inner = ib.transpose() * g_i * &ib + f_matrix(&acl, b, k_fixed, h);
    let perm = block_reversal(h, du);
    let inner = &perm * inner * perm.transpose();
    Ok(symmetrize(&inner.kronecker(sigma)))
}

/// Weight of `z = [y; v]` in a quadratic cost.
fn weight_of(q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let (dx, du) = (q.nrows(), r.nrows());
    let mut c = DMatrix::zeros(dx + du, dx + du);
    c.view_mut((0, 0), (dx, dx)).copy_from(q);
    c.view_mut((dx, dx), (du, du)).copy_from(r);
    c
}

/// `f(m) = m^T quad m + 2 lin^T m + constant` over `m = vec(M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSurrogate {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
}

impl QuadraticSurrogate {
    pub fn zeros(n: usize) -> Self {
        Self {
            quad: DMatrix::zeros(n, n),
            lin: DVector::zeros(n),
            constant: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn value(&self, m: &DVector<f64>) -> f64 {
        m.dot(&(&self.quad * m)) + 2.0 * self.lin.dot(m) + self.constant
    }

    pub fn grad(&self, m: &DVector<f64>) -> DVector<f64> {
        (&self.quad * m + &self.lin) * 2.0
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        &self.quad * 2.0
    }

    pub fn add_scaled(&mut self, other: &QuadraticSurrogate, s: f64) {
        self.quad += &other.quad * s;
        self.lin += &other.lin * s;
        self.constant += other.constant * s;
    }
}

/// Everything needed to evaluate surrogate costs for one `(A, B, K, H, noise)`.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    h: usize,
    a_tilde: DMatrix<f64>,
    b: DMatrix<f64>,
    k_fixed: DMatrix<f64>,
    noise: NoiseModel,
    slots: SlotCoefficients,
    p_gram: DMatrix<f64>,
    unit: QuadraticSurrogate,
}

impl SurrogateModel {
    pub fn new(sys: &LinearSystem, k_fixed: &DMatrix<f64>, noise: &NoiseModel, h: usize) -> Result<Self> {
        if noise.dim() != sys.dx() {
            return Err(dim_err("SurrogateModel: noise", sys.dx(), noise.dim()));
        }
        let a_tilde = closed_loop(sys, k_fixed)?;
        let p_gram = expected_gram(sys, k_fixed, h, noise.sigma())?;
        let slots = slot_coefficients(&a_tilde, sys.b(), k_fixed, h);
        let mut model = Self {
            h,
            a_tilde,
            b: sys.b().clone(),
            k_fixed: k_fixed.clone(),
            noise: noise.clone(),
            slots,
            p_gram,
            unit: QuadraticSurrogate::zeros(0),
        };
        let n = model.b.nrows() + model.b.ncols();
        model.unit = model.moments(&DMatrix::identity(n, n));
        Ok(model)
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn a_tilde(&self) -> &DMatrix<f64> {
        &self.a_tilde
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn k_fixed(&self) -> &DMatrix<f64> {
        &self.k_fixed
    }
    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        self.noise.sigma()
    }
    /// `E[J^T J]`.
    pub fn p_gram(&self) -> &DMatrix<f64> {
        &self.p_gram
    }
    pub fn slots(&self) -> &SlotCoefficients {
        &self.slots
    }
    pub fn dx(&self) -> usize {
        self.b.nrows()
    }
    pub fn du(&self) -> usize {
        self.b.ncols()
    }
    /// Length of `vec(M)`.
    pub fn dim(&self) -> usize {
        self.h * self.dx() * self.du()
    }

    /// `E[J^T C J]`, `E[J^T C z(0)]` and `E[z(0)^T C z(0)]` for weight `c`.
    fn moments(&self, c: &DMatrix<f64>) -> QuadraticSurrogate {
        let sigma = self.noise.sigma();
        let cols = self.slots.cmat[0].ncols();
        let mut gamma = DMatrix::zeros(cols, cols);
        let mut hmat = DMatrix::zeros(cols, self.dx());
        let mut constant = 0.0;
        for (cm, g) in self.slots.cmat.iter().zip(&self.slots.g) {
            let ct_c = cm.transpose() * c;
            gamma += &ct_c * cm;
            hmat += &ct_c * g * sigma;
            constant += (g.transpose() * c * g * sigma).trace();
        }
        let dx = self.dx();
        let lin = DVector::from_fn(cols * dx, |idx, _| hmat[(idx / dx, idx % dx)]);
        QuadraticSurrogate {
            quad: symmetrize(&gamma.kronecker(sigma)),
            lin,
            constant,
        }
    }

    /// Closed-form `f(M) = E[c(y(M), v(M))]` for a quadratic-family cost.
    pub fn quadratic_surrogate(&self, cost: &dyn StageCost) -> Result<QuadraticSurrogate> {
        match cost.quadratic().ok_or(Error::NonQuadraticCost)? {
            QuadraticForm::Spherical { r } => {
                let mut out = QuadraticSurrogate::zeros(self.dim());
                out.add_scaled(&self.unit, r);
                Ok(out)
            }
            QuadraticForm::Full { q, r, x_ref, u_ref } => {
                if q.nrows() != self.dx() || r.nrows() != self.du() {
                    return Err(dim_err("quadratic_surrogate: cost", format!("{}/{}", self.dx(), self.du()), format!("{}/{}", q.nrows(), r.nrows())));
                }
                let c = weight_of(&q, &r);
                let mut out = self.moments(&c);
                let zbar = DVector::from_iterator(self.dx() + self.du(), x_ref.iter().chain(u_ref.iter()).copied());
                out.constant += zbar.dot(&(&c * &zbar));
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    ClosedForm,
    MonteCarlo { n: usize, seed: u64 },
}

/// Surrogate value and gradient in `vec(M)`; sampled modes carry standard errors.
#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub value_se: Option<f64>,
    pub grad_se: Option<DVector<f64>>,
}

pub fn surrogate_cost_and_grad(
    cost: &dyn StageCost,
    m: &DacPolicy,
    model: &SurrogateModel,
    mode: EvalMode,
) -> Result<SurrogateEval> {
    if m.h() != model.h() || m.du() != model.du() || m.dx() != model.dx() {
        return Err(dim_err("surrogate_cost_and_grad: policy", model.dim(), m.dim()));
    }
    let mv = m.vectorize();
    match mode {
        EvalMode::ClosedForm => {
            let q = model.quadratic_surrogate(cost)?;
            Ok(SurrogateEval {
                value: q.value(&mv),
                grad: q.grad(&mv),
                value_se: None,
                grad_se: None,
            })
        }
        EvalMode::MonteCarlo { n, seed } => {
            if n < 2 {
                return Err(Error::InvalidParameter("Monte-Carlo needs n >= 2".into()));
            }
            let dx = model.dx();
            let mut rng = substream(seed, "surrogate_windows", 0);
            let (mut s1, mut s2) = (0.0, 0.0);
            let mut g1 = DVector::zeros(mv.len());
            let mut g2 = DVector::zeros(mv.len());
            for _ in 0..n {
                let win = NoiseWindow::sample(model.noise(), &mut rng, model.h());
                let j = model.slots.jacobian(&win);
                let z = &j * &mv + model.slots.intercept(&win);
                let (x, u) = (z.rows(0, dx).into_owned(), z.rows(dx, model.du()).into_owned());
                let c = cost.value(&x, &u);
                let (gx, gu) = cost.gradient(&x, &u);
                let gz = DVector::from_iterator(z.len(), gx.iter().chain(gu.iter()).copied());
                let g = j.tr_mul(&gz);
                s1 += c;
                s2 += c * c;
                g2 += g.component_mul(&g);
                g1 += g;
            }
            let nf = n as f64;
            let mean = s1 / nf;
            let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
            let gmean = g1 / nf;
            let gvar = (g2 / nf - gmean.component_mul(&gmean)).map(|v| v.max(0.0) * nf / (nf - 1.0));
            Ok(SurrogateEval {
                value: mean,
                value_se: Some((var / nf).sqrt()),
                grad_se: Some(gvar.map(|v| (v / nf).sqrt())),
                grad: gmean,
            })
        }
    }
}

/// Sample average of `J^T J` over `n` windows.
pub fn monte_carlo_gram(model: &SurrogateModel, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = substream(seed, "gram_windows", 0);
    let dim = model.dim();
    let mut acc = DMatrix::zeros(dim, dim);
    for _ in 0..n {
        let win = NoiseWindow::sample(model.noise(), &mut rng, model.h());
        let j = model.slots.jacobian(&win);
        acc.gemm_tr(1.0, &j, &j, 1.0);
    }
    acc / n as f64
}

const GRAM_MAGIC: &[u8; 8] = b"DACGRAM1";

/// Dense binary matrix: magic, rows and cols as little-endian `u64`, then
/// row-major little-endian `f64`.
pub fn write_matrix<W: Write>(mut out: W, m: &DMatrix<f64>) -> std::io::Result<()> {
    out.write_all(GRAM_MAGIC)?;
    out.write_all(&(m.nrows() as u64).to_le_bytes())?;
    out.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut inp: R) -> std::io::Result<DMatrix<f64>> {
    let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
    let mut magic = [0u8; 8];
    inp.read_exact(&mut magic)?;
    if &magic != GRAM_MAGIC {
        return Err(bad("not a matrix file"));
    }
    let mut word = [0u8; 8];
    inp.read_exact(&mut word)?;
    let rows = usize::try_from(u64::from_le_bytes(word)).map_err(|_| bad("row count"))?;
    inp.read_exact(&mut word)?;
    let cols = usize::try_from(u64::from_le_bytes(word)).map_err(|_| bad("column count"))?;
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            inp.read_exact(&mut word)?;
            m[(i, j)] = f64::from_le_bytes(word);
        }
    }
    Ok(m)
}

pub fn write_matrix_file(path: &Path, m: &DMatrix<f64>) -> std::io::Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_matrix(&mut w, m)?;
    w.flush()
}

pub fn read_matrix_file(path: &Path) -> std::io::Result<DMatrix<f64>> {
    read_matrix(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::CostFunction;
    use crate::linalg::{min_eigenvalue_sym, spectral_norm};
    use crate::policy::{action, DisturbanceRing};
    use crate::spectral::{g_psi, y_matrix};
    use nalgebra::dvector;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn scalar_policy(vals: &[f64]) -> DacPolicy {
        DacPolicy::from_blocks(vals.iter().map(|v| m1(*v)).collect()).unwrap()
    }

    fn random_policy<R: Rng>(rng: &mut R, h: usize, du: usize, dx: usize) -> DacPolicy {
        let v = DVector::from_fn(h * du * dx, |_, _| rng.random_range(-0.5..0.5));
        DacPolicy::devectorize(&v, h, du, dx).unwrap()
    }

    struct Instance {
        sys: LinearSystem,
        k: DMatrix<f64>,
    }

    fn random_instance<R: Rng>(rng: &mut R, dx: usize, du: usize) -> Instance {
        loop {
            let a = DMatrix::from_fn(dx, dx, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(dx, du, |_, _| rng.random_range(-1.0..1.0));
            let sys = LinearSystem::new(a, b, None).unwrap();
            if let Ok(k) = crate::stability::default_gain(&sys) {
                return Instance { sys, k };
            }
        }
    }

    #[test]
    fn psi_examples() {
        let a = m1(0.5);
        let b = m1(1.0);
        let zeros = vec![DacPolicy::zeros(2, 1, 1); 3];
        let want = [1.0, 0.5, 0.25, 0.0, 0.0];
        for (i, w) in want.iter().enumerate() {
            assert!((psi(&zeros, i, &a, &b).unwrap()[(0, 0)] - w).abs() < 1e-15);
        }
        assert!(psi(&zeros, 5, &a, &b).is_err());
        // two-step unroll: x_2 = w_1 + (0.5 + m) w_0 + 0.5 m w_{-1}
        let m = 0.3;
        let st = vec![scalar_policy(&[m]); 2];
        let got: Vec<f64> = (0..3).map(|i| psi(&st, i, &a, &b).unwrap()[(0, 0)]).collect();
        assert!((got[0] - 1.0).abs() < 1e-15);
        assert!((got[1] - (0.5 + m)).abs() < 1e-15);
        assert!((got[2] - 0.5 * m).abs() < 1e-15);
    }

    #[test]
    fn psi_is_affine() {
        let mut rng = substream(1, "psi_lin", 0);
        let inst = random_instance(&mut rng, 3, 2);
        let acl = closed_loop(&inst.sys, &inst.k).unwrap();
        let h = 4;
        for _ in 0..20 {
            let m: Vec<DacPolicy> = (0..=h).map(|_| random_policy(&mut rng, h, 2, 3)).collect();
            let m2: Vec<DacPolicy> = (0..=h).map(|_| random_policy(&mut rng, h, 2, 3)).collect();
            let sum: Vec<DacPolicy> = m
                .iter()
                .zip(&m2)
                .map(|(x, y)| DacPolicy::devectorize(&(x.vectorize() + y.vectorize()), h, 2, 3).unwrap())
                .collect();
            let zero = vec![DacPolicy::zeros(h, 2, 3); h + 1];
            for i in 0..=2 * h {
                let lhs = psi(&sum, i, &acl, inst.sys.b()).unwrap();
                let rhs = psi(&m, i, &acl, inst.sys.b()).unwrap() + psi(&m2, i, &acl, inst.sys.b()).unwrap()
                    - psi(&zero, i, &acl, inst.sys.b()).unwrap();
                assert!((lhs - rhs).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn psi_nonstationary_examples() {
        let a = m1(0.5);
        let b = m1(1.0);
        let st = vec![scalar_policy(&[0.2, -0.1]); 3];
        for i in 0..=4 {
            assert_eq!(psi_nonstationary(&st, i, &a, &b).unwrap(), psi(&st, i, &a, &b).unwrap());
        }
        let only = vec![DacPolicy::zeros(2, 1, 1)];
        assert_eq!(psi_nonstationary(&only, 0, &a, &b).unwrap()[(0, 0)], 1.0);
        assert_eq!(psi_nonstationary(&only, 1, &a, &b).unwrap()[(0, 0)], 0.0);
        // staircase: M_{t-1} = p, M_t = q, H = 1, h = 1. Unrolling
        // x_{t+1} = a x_t + q w_{t-1} + w_t and x_t = a x_{t-1} + p w_{t-2} + w_{t-1}
        // gives coefficients 1, a + q, a p on w_t, w_{t-1}, w_{t-2}.
        let (p, q, av) = (0.7, -0.3, 0.5);
        let pol = vec![scalar_policy(&[p]), scalar_policy(&[q])];
        let c: Vec<f64> = (0..3).map(|i| psi_nonstationary(&pol, i, &m1(av), &b).unwrap()[(0, 0)]).collect();
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert!((c[1] - (av + q)).abs() < 1e-15);
        assert!((c[2] - av * p).abs() < 1e-15);
        assert!(psi_nonstationary(&pol, 3, &m1(av), &b).is_err());
    }

    /// Literal simulation: start at rest at step H with the ring holding
    /// `w_{H-1}, .., w_0`, run H closed-loop DAC steps, then pick the action.
    fn rollout_oracle(
        sys: &LinearSystem,
        k: &DMatrix<f64>,
        state_policies: &[DacPolicy],
        action_policy: &DacPolicy,
        win: &NoiseWindow,
    ) -> (DVector<f64>, DVector<f64>) {
        let h = win.h();
        let mut ring = DisturbanceRing::new(h, sys.dx());
        for s in 0..h {
            ring.push(win.get(s).clone());
        }
        let mut x = DVector::zeros(sys.dx());
        for (step, pol) in state_policies.iter().enumerate() {
            let u = action(pol, k, &x, &ring);
            let w = win.get(h + step).clone();
            x = sys.a() * &x + sys.b() * u + &w;
            ring.push(w);
        }
        let u = action(action_policy, k, &x, &ring);
        (x, u)
    }

    #[test]
    fn surrogate_pair_examples() {
        let sys = LinearSystem::scalar(0.9, 1.0);
        let k = m1(0.4);
        let acl = closed_loop(&sys, &k).unwrap();
        let h = 3;
        let pol = scalar_policy(&[0.2, -0.1, 0.05]);
        let st = vec![pol.clone(); h];
        let (y, v) = surrogate_pair(&st, &pol, &NoiseWindow::zeros(h, 1), &acl, sys.b(), &k).unwrap();
        assert_eq!((y[0], v[0]), (0.0, 0.0));

        let mut rng = substream(2, "pair", 0);
        let noise = NoiseModel::scaled_rademacher(1, 1.0).unwrap();
        let win = NoiseWindow::sample(&noise, &mut rng, h);
        let zero = DacPolicy::zeros(h, 1, 1);
        let a5 = m1(0.9);
        let (y, v) = surrogate_pair(&vec![zero.clone(); h], &zero, &win, &a5, sys.b(), &DMatrix::zeros(1, 1)).unwrap();
        let want: f64 = (0..h).map(|i| 0.9f64.powi(i as i32) * win.get(2 * h - 1 - i)[0]).sum();
        assert!((y[0] - want).abs() < 1e-14);
        assert_eq!(v[0], 0.0);

        let (y, v) = surrogate_pair(&st, &pol, &win, &acl, sys.b(), &k).unwrap();
        let (yo, vo) = rollout_oracle(&sys, &k, &st, &pol, &win);
        assert!((y[0] - yo[0]).abs() <= 1e-10 && (v[0] - vo[0]).abs() <= 1e-10);
    }

    #[test]
    fn surrogate_pair_matches_rollout_nonstationary() {
        let mut rng = substream(3, "pair_ns", 0);
        let inst = random_instance(&mut rng, 3, 2);
        let acl = closed_loop(&inst.sys, &inst.k).unwrap();
        let noise = NoiseModel::sphere_uniform(3, 1.0).unwrap();
        for h in 1..6 {
            let st: Vec<DacPolicy> = (0..h).map(|_| random_policy(&mut rng, h, 2, 3)).collect();
            let act = random_policy(&mut rng, h, 2, 3);
            let win = NoiseWindow::sample(&noise, &mut rng, h);
            let (y, v) = surrogate_pair(&st, &act, &win, &acl, inst.sys.b(), &inst.k).unwrap();
            let (yo, vo) = rollout_oracle(&inst.sys, &inst.k, &st, &act, &win);
            assert!((y - yo).amax() <= 1e-10 && (v - vo).amax() <= 1e-10);
        }
    }

    fn z_of(model: &SurrogateModel, m: &DacPolicy, win: &NoiseWindow) -> DVector<f64> {
        let st = vec![m.clone(); model.h()];
        let (y, v) = surrogate_pair(&st, m, win, model.a_tilde(), model.b(), model.k_fixed()).unwrap();
        DVector::from_iterator(y.len() + v.len(), y.iter().chain(v.iter()).copied())
    }

    #[test]
    fn jacobian_is_the_exact_slope() {
        let mut rng = substream(4, "jac", 0);
        let inst = random_instance(&mut rng, 2, 2);
        let noise = NoiseModel::sphere_uniform(2, 1.0).unwrap();
        let h = 4;
        let model = SurrogateModel::new(&inst.sys, &inst.k, &noise, h).unwrap();
        for _ in 0..100 {
            let win = NoiseWindow::sample(&noise, &mut rng, h);
            let j = jacobian(&win, &inst.sys, &inst.k).unwrap();
            let z0 = intercept(&win, &inst.sys, &inst.k).unwrap();
            let m = random_policy(&mut rng, h, 2, 2);
            let z = z_of(&model, &m, &win);
            assert!((&z - (&j * m.vectorize() + &z0)).amax() <= 1e-12);
            assert!((z_of(&model, &DacPolicy::zeros(h, 2, 2), &win) - &z0).amax() <= 1e-14);
        }
        // central differences along a random direction
        let win = NoiseWindow::sample(&noise, &mut rng, h);
        let j = jacobian(&win, &inst.sys, &inst.k).unwrap();
        let m = random_policy(&mut rng, h, 2, 2);
        let e = random_policy(&mut rng, h, 2, 2);
        let eps = 1e-3;
        let plus = DacPolicy::devectorize(&(m.vectorize() + e.vectorize() * eps), h, 2, 2).unwrap();
        let minus = DacPolicy::devectorize(&(m.vectorize() - e.vectorize() * eps), h, 2, 2).unwrap();
        let fd = (z_of(&model, &plus, &win) - z_of(&model, &minus, &win)) / (2.0 * eps);
        let exact = &j * e.vectorize();
        assert!((&fd - &exact).norm() <= 1e-8 * exact.norm());
    }

    #[test]
    fn jacobian_small_cases() {
        // K = 0: the action rows are J_{v_0} alone
        let sys = LinearSystem::new(DMatrix::identity(2, 2) * 0.5, DMatrix::from_row_slice(2, 1, &[1.0, -1.0]), None).unwrap();
        let win = NoiseWindow::new(vec![dvector![1.0, 2.0], dvector![3.0, 4.0], dvector![5.0, 6.0], dvector![7.0, 8.0]], 2).unwrap();
        let j = jacobian(&win, &sys, &DMatrix::zeros(1, 2)).unwrap();
        // block l = 0 pairs with w_3, block l = 1 with w_2
        assert_eq!(j.row(2).iter().copied().collect::<Vec<_>>(), vec![7.0, 8.0, 5.0, 6.0]);
        // scalar H = 1: J = (B w_0 ; w_1)
        let s1 = LinearSystem::scalar(0.5, 2.0);
        let w1 = NoiseWindow::new(vec![dvector![0.3], dvector![-0.7]], 1).unwrap();
        let j1 = jacobian(&w1, &s1, &m1(0.0)).unwrap();
        assert!((j1[(0, 0)] - 0.6).abs() < 1e-15 && (j1[(1, 0)] + 0.7).abs() < 1e-15);
    }

    fn moment_gram(model: &SurrogateModel) -> DMatrix<f64> {
        let n = model.dx() + model.du();
        model.moments(&DMatrix::identity(n, n)).quad
    }

    #[test]
    fn expected_gram_examples() {
        let sys = LinearSystem::scalar(0.5, 1.0);
        let g = expected_gram(&sys, &m1(0.0), 1, &m1(1.0)).unwrap();
        assert!((g[(0, 0)] - 2.0).abs() < 1e-15);
        // K = 0: the action part alone is I (x) Sigma
        let sys2 = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.0, 0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            None,
        )
        .unwrap();
        let noise = NoiseModel::sphere_uniform(2, 1.0).unwrap();
        let model = SurrogateModel::new(&sys2, &DMatrix::zeros(2, 2), &noise, 3).unwrap();
        let mut action_part = DMatrix::zeros(12, 12);
        for cm in &model.slots().cmat {
            let bottom = cm.rows(2, 2).into_owned();
            action_part += (bottom.transpose() * &bottom).kronecker(noise.sigma());
        }
        assert!((action_part - DMatrix::<f64>::identity(6, 6).kronecker(noise.sigma())).amax() < 1e-15);
    }

    #[test]
    fn expected_gram_matches_slot_moments_and_scalar_form() {
        let mut rng = substream(5, "gram", 0);
        for _ in 0..30 {
            let dx = rng.random_range(1..=3);
            let du = rng.random_range(1..=3);
            let h = rng.random_range(1..=6);
            let inst = random_instance(&mut rng, dx, du);
            let noise = NoiseModel::sphere_uniform(dx, 1.3).unwrap();
            let model = SurrogateModel::new(&inst.sys, &inst.k, &noise, h).unwrap();
            let g = model.p_gram();
            assert!((g - g.transpose()).amax() <= 1e-12);
            assert!((g - moment_gram(&model)).amax() <= 1e-10 * (1.0 + g.amax()));
        }
        let sys = LinearSystem::scalar(0.9, 1.0);
        let k = m1(0.4);
        let h = 7;
        let p = expected_gram(&sys, &k, h, &m1(1.0)).unwrap();
        let acl = m1(0.5);
        let gmat = crate::spectral::g_matrix_multidim(&acl, &m1(1.0), h);
        let f = crate::spectral::f_matrix(&acl, sys.b(), &k, h);
        assert!((p - (f + gmat)).amax() <= 1e-12);
        let g = g_psi(num_complex::Complex64::new(0.5, 0.0), h).unwrap();
        assert!(crate::linalg::max_abs_c(&(crate::linalg::to_complex(&crate::spectral::g_matrix_multidim(&acl, &m1(1.0), h)) - g)) < 1e-14);
        assert!(spectral_norm(&y_matrix(&acl, h)) <= 2.0);
    }

    #[test]
    fn monte_carlo_gram_converges() {
        let mut rng = substream(6, "mcgram", 0);
        let inst = random_instance(&mut rng, 2, 2);
        let noise = NoiseModel::scaled_rademacher(2, 1.0).unwrap();
        let model = SurrogateModel::new(&inst.sys, &inst.k, &noise, 4).unwrap();
        let exact = model.p_gram().clone();
        let errs: Vec<f64> = [1_000usize, 10_000, 100_000]
            .iter()
            .map(|&n| {
                // average over seeds to steady the slope estimate
                (0..8).map(|s| (monte_carlo_gram(&model, n, s) - &exact).norm()).sum::<f64>() / 8.0
            })
            .collect();
        assert!(errs[2] / exact.norm() <= 0.05);
        let slope = (errs[2].ln() - errs[0].ln()) / (100f64.ln());
        assert!((slope + 0.5).abs() <= 0.1, "slope {slope}, errs {errs:?}");
    }

    #[test]
    fn closed_form_surrogate_examples() {
        let sys = LinearSystem::scalar(0.5, 1.0);
        let noise = NoiseModel::scaled_rademacher(1, 1.0).unwrap();
        let model = SurrogateModel::new(&sys, &m1(0.0), &noise, 2).unwrap();
        let cost = CostFunction::spherical(1.0, 1, 1, 1.0, 1.0).unwrap();
        let ev = surrogate_cost_and_grad(&cost, &DacPolicy::zeros(2, 1, 1), &model, EvalMode::ClosedForm).unwrap();
        // E[y^2] = 1 + 0.25 with v = 0
        assert!((ev.value - 1.25).abs() < 1e-14);
    }

    #[test]
    fn closed_form_gradient_matches_differences() {
        let mut rng = substream(7, "grad", 0);
        let inst = random_instance(&mut rng, 2, 2);
        let noise = NoiseModel::sphere_uniform(2, 1.0).unwrap();
        let h = 3;
        let model = SurrogateModel::new(&inst.sys, &inst.k, &noise, h).unwrap();
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let cost = CostFunction::offset_quadratic(q, DMatrix::identity(2, 2) * 1.5, dvector![0.2, -0.1], dvector![0.05, 0.0], 0.9).unwrap();
        let quad = model.quadratic_surrogate(&cost).unwrap();
        for m in [DacPolicy::zeros(h, 2, 2), random_policy(&mut rng, h, 2, 2)] {
            let mv = m.vectorize();
            let g = quad.grad(&mv);
            let eps = 1e-4;
            let fd = DVector::from_fn(mv.len(), |i, _| {
                let mut p = mv.clone();
                let mut n = mv.clone();
                p[i] += eps;
                n[i] -= eps;
                (quad.value(&p) - quad.value(&n)) / (2.0 * eps)
            });
            assert!((&fd - &g).norm() <= 1e-9 * g.norm().max(1.0), "{}", (&fd - &g).norm());
        }
        // Hessian floor: H_f >= alpha E[J^T J]
        let gap = quad.hessian() - model.p_gram() * cost.alpha();
        assert!(min_eigenvalue_sym(&gap) >= -1e-8);
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        let mut rng = substream(8, "mc", 0);
        let inst = random_instance(&mut rng, 2, 1);
        let noise = NoiseModel::sphere_uniform(2, 1.0).unwrap();
        let h = 3;
        let model = SurrogateModel::new(&inst.sys, &inst.k, &noise, h).unwrap();
        let cost = CostFunction::general_quadratic(DMatrix::identity(2, 2) * 1.2, m1(1.7), 1.0).unwrap();
        let m = random_policy(&mut rng, h, 1, 2);
        let cf = surrogate_cost_and_grad(&cost, &m, &model, EvalMode::ClosedForm).unwrap();
        let mc = surrogate_cost_and_grad(&cost, &m, &model, EvalMode::MonteCarlo { n: 100_000, seed: 3 }).unwrap();
        assert!((cf.value - mc.value).abs() <= 3.0 * mc.value_se.unwrap());
        // unbiased gradient: mean of 20 seeds within 3 SE of the exact one
        let runs: Vec<SurrogateEval> = (0..20)
            .map(|s| surrogate_cost_and_grad(&cost, &m, &model, EvalMode::MonteCarlo { n: 2_000, seed: 100 + s }).unwrap())
            .collect();
        let mean = runs.iter().fold(DVector::zeros(m.dim()), |a, r| a + &r.grad) / 20.0;
        let se = runs.iter().fold(DVector::zeros(m.dim()), |a, r| a + r.grad_se.as_ref().unwrap()) / 20.0 / 20f64.sqrt();
        for i in 0..m.dim() {
            assert!((mean[i] - cf.grad[i]).abs() <= 3.0 * se[i] + 1e-12, "coord {i}");
        }
    }

    struct SoftAbs;
    impl StageCost for SoftAbs {
        fn dims(&self) -> (usize, usize) {
            (1, 1)
        }
        fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
            (1.0 + x[0] * x[0]).sqrt() + u[0] * u[0]
        }
        fn gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
            (dvector![x[0] / (1.0 + x[0] * x[0]).sqrt()], dvector![2.0 * u[0]])
        }
    }

    #[test]
    fn closed_form_rejects_non_quadratic_costs() {
        let sys = LinearSystem::scalar(0.5, 1.0);
        let noise = NoiseModel::scaled_rademacher(1, 1.0).unwrap();
        let model = SurrogateModel::new(&sys, &m1(0.0), &noise, 2).unwrap();
        let m = DacPolicy::zeros(2, 1, 1);
        let e = surrogate_cost_and_grad(&SoftAbs, &m, &model, EvalMode::ClosedForm).unwrap_err();
        assert!(matches!(e, Error::NonQuadraticCost));
        assert!(surrogate_cost_and_grad(&SoftAbs, &m, &model, EvalMode::MonteCarlo { n: 100, seed: 1 }).is_ok());
    }

    #[test]
    fn matrix_file_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3.0, f64::MIN_POSITIVE, 5.0, 6.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[..8], b"DACGRAM1");
        assert_eq!(buf.len(), 8 + 16 + 6 * 8);
        assert_eq!(read_matrix(buf.as_slice()).unwrap(), m);
        assert!(read_matrix(&b"NOTAGRAM"[..]).is_err());
    }
}
