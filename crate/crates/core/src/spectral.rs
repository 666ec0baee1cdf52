//! Toeplitz/Kronecker constructions behind the strong-convexity floor and
//! their numerical certification.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lds::{LinearSystem, NoiseModel};
use crate::linalg::{min_eigenvalue_herm, min_eigenvalue_sym, powers, CMatrix};
use crate::stability::StabilityCertificate;

/// `[T_m]_{ij} = 1` iff `i - j = m`.
pub fn toeplitz_indicator(m: i64, h: usize) -> DMatrix<f64> {
    DMatrix::from_fn(h, h, |i, j| if i as i64 - j as i64 == m { 1.0 } else { 0.0 })
}

fn check_psi(psi: Complex64) -> Result<()> {
    if !(psi.norm() < 1.0) {
        return Err(Error::InvalidParameter(format!("|psi| = {} must be < 1", psi.norm())));
    }
    Ok(())
}

/// `sum_{i=1}^{h} |psi|^{2(i-1)}`.
pub fn s_psi(psi: Complex64, h: usize) -> Result<f64> {
    check_psi(psi)?;
    if h == 0 {
        return Err(Error::InvalidParameter("h must be >= 1".into()));
    }
    let r = psi.norm_sqr();
    Ok((1.0 - r.powi(h as i32)) / (1.0 - r))
}

/// `sum_{k1,k2=1}^{H} T_{k1-k2} conj(psi)^{k1-1} psi^{k2-1}`, assembled entrywise
/// as `S(H - |i-j|) psi^{j-i}` above the diagonal and its conjugate below.
pub fn g_psi(psi: Complex64, h: usize) -> Result<CMatrix> {
    check_psi(psi)?;
    let mut g = CMatrix::zeros(h, h);
    for i in 0..h {
        for j in i..h {
            let d = j - i;
            let v = psi.powu(d as u32) * s_psi(psi, h - d)?;
            g[(i, j)] = v;
            g[(j, i)] = v.conj();
        }
    }
    Ok(g)
}

/// Entries of the tridiagonal-plus-corners inverse of `G(psi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InverseCoefficients {
    pub a: f64,
    #[serde(serialize_with = "ser_complex")]
    pub b: Complex64,
    pub alpha: f64,
    #[serde(serialize_with = "ser_complex")]
    pub beta: Complex64,
}

fn ser_complex<S: serde::Serializer>(z: &Complex64, s: S) -> std::result::Result<S::Ok, S::Error> {
    [z.re, z.im].serialize(s)
}

pub fn inverse_coefficients(psi: Complex64, h: usize) -> Result<InverseCoefficients> {
    check_psi(psi)?;
    let r = psi.norm_sqr();
    let rh = r.powi(h as i32);
    let rh1 = r.powi(h as i32 + 1);
    let rh2 = r.powi(h as i32 + 2);
    Ok(InverseCoefficients {
        a: (1.0 + r) / (1.0 + rh),
        b: -psi / (1.0 + rh),
        alpha: (1.0 - rh2) / ((1.0 - rh1) * (1.0 + rh)),
        beta: psi.conj().powu(h as u32) * psi * ((1.0 - r) / ((1.0 - rh1) * (1.0 + rh))),
    })
}

/// Lays the coefficients out on the stencil: `b` above and `conj(b)` below
/// the diagonal, `alpha` at both diagonal ends, `conj(beta)` top-right and
/// `beta` bottom-left.
pub fn assemble_inverse(c: &InverseCoefficients, h: usize) -> CMatrix {
    let mut m = CMatrix::zeros(h, h);
    for i in 0..h {
        m[(i, i)] = Complex64::new(c.a, 0.0);
        if i + 1 < h {
            m[(i, i + 1)] = c.b;
            m[(i + 1, i)] = c.b.conj();
        }
    }
    m[(0, 0)] = Complex64::new(c.alpha, 0.0);
    m[(h - 1, h - 1)] = Complex64::new(c.alpha, 0.0);
    m[(0, h - 1)] += c.beta.conj();
    m[(h - 1, 0)] += c.beta;
    m
}

/// Inverse of `G(psi)`; `H < 3` falls back to a direct solve because the
/// band and corner entries collide. The flag reports the fallback.
pub fn g_psi_inverse_analytic(psi: Complex64, h: usize) -> Result<(CMatrix, bool)> {
    if h < 3 {
        let inv = g_psi(psi, h)?
            .try_inverse()
            .ok_or_else(|| Error::Numeric("G(psi) is singular".into()))?;
        return Ok((inv, true));
    }
    Ok((assemble_inverse(&inverse_coefficients(psi, h)?, h), false))
}

/// `max_i sum_j |M_ij|`.
pub fn inf_norm_c(m: &CMatrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct GPsiReport {
    #[serde(serialize_with = "ser_complex")]
    pub psi: Complex64,
    pub h: usize,
    pub lambda_min: f64,
    pub inverse_residual: f64,
    pub coefficients: InverseCoefficients,
    pub fallback: bool,
}

impl GPsiReport {
    pub fn coefficients_bounded(&self) -> bool {
        let c = &self.coefficients;
        c.a.abs() <= 2.0 && c.alpha.abs() <= 2.0 && c.b.norm() <= 1.0 && c.beta.norm() <= 1.0
    }
}

pub fn g_psi_report(psi: Complex64, h: usize) -> Result<GPsiReport> {
    let g = g_psi(psi, h)?;
    let (inv, fallback) = g_psi_inverse_analytic(psi, h)?;
    let residual = inf_norm_c(&(&g * inv - CMatrix::identity(h, h)));
    Ok(GPsiReport {
        psi,
        h,
        lambda_min: min_eigenvalue_herm(&g),
        inverse_residual: residual,
        coefficients: inverse_coefficients(psi, h)?,
        fallback,
    })
}

/// `sum_{k1,k2} T_{k1-k2} (x) (A^T)^{k1-1} P A^{k2-1}`.
pub fn g_matrix_multidim(a_tilde: &DMatrix<f64>, p: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let d = a_tilde.nrows();
    let pw = powers(a_tilde, h);
    let mut out = DMatrix::zeros(h * d, h * d);
    for k1 in 0..h {
        let left = pw[k1].transpose() * p;
        for (k2, pk2) in pw.iter().enumerate() {
            let term = &left * pk2;
            // T_{k1-k2} fills blocks (i, j) with i - j = k1 - k2
            for i in 0..h {
                let j = i as i64 - (k1 as i64 - k2 as i64);
                if (0..h as i64).contains(&j) {
                    let mut blk = out.view_mut((i * d, j as usize * d), (d, d));
                    blk += &term;
                }
            }
        }
    }
    out
}

/// `sum_{k=1}^{H} T_{-k} (x) A^{k-1}`: block `(i, i+k)` holds `A^{k-1}`.
pub fn y_matrix(a_tilde: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let d = a_tilde.nrows();
    let pw = powers(a_tilde, h);
    let mut out = DMatrix::zeros(h * d, h * d);
    for k in 1..=h {
        for i in 0..h {
            let j = i + k;
            if j < h {
                out.view_mut((i * d, j * d), (d, d)).copy_from(&pw[k - 1]);
            }
        }
    }
    out
}

/// `I_n (x) M`.
pub fn kron_identity(n: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::<f64>::identity(n, n).kronecker(m)
}

/// `(I (x) B^T) G_{K^T K} (I (x) B) - (I (x) K) Y (I (x) B) - [..]^T + I`.
pub fn f_matrix(a_tilde: &DMatrix<f64>, b: &DMatrix<f64>, k: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let du = b.ncols();
    let ib = kron_identity(h, b);
    let ik = kron_identity(h, k);
    let g_kk = g_matrix_multidim(a_tilde, &(k.transpose() * k), h);
    let cross = &ik * y_matrix(a_tilde, h) * &ib;
    ib.transpose() * g_kk * &ib - &cross - cross.transpose() + DMatrix::identity(h * du, h * du)
}

#[derive(Debug, Clone, Serialize)]
pub struct StrongConvexityReport {
    pub lambda_min: f64,
    pub floor: f64,
    pub pass: bool,
    pub kappa: f64,
    pub gamma: f64,
    pub sigma_sq: f64,
    /// Which case of the proof applies: `3 |B| kappa / gamma >= 1`.
    pub large_b_branch: bool,
    /// The floor is too small to say anything (below `1e-6 lambda_min`).
    pub vacuous_floor: bool,
}

/// `gamma^2 sigma^2 / (36 kappa^10)`.
pub fn convexity_floor(kappa: f64, gamma: f64, sigma_sq: f64) -> f64 {
    gamma * gamma * sigma_sq / (36.0 * kappa.powi(10))
}

/// Compares `lambda_min(E[J^T J])` against the floor implied by the certificate.
pub fn certify_strong_convexity(
    sys: &LinearSystem,
    k_fixed: &DMatrix<f64>,
    cert: &StabilityCertificate,
    noise: &NoiseModel,
    h: usize,
) -> Result<StrongConvexityReport> {
    let gram = crate::surrogate::expected_gram(sys, k_fixed, h, noise.sigma())?;
    let lambda_min = min_eigenvalue_sym(&gram);
    let floor = convexity_floor(cert.kappa, cert.gamma, noise.sigma_sq());
    let norm_b = crate::linalg::spectral_norm(sys.b());
    Ok(StrongConvexityReport {
        lambda_min,
        floor,
        pass: lambda_min >= floor - 1e-10,
        kappa: cert.kappa,
        gamma: cert.gamma,
        sigma_sq: noise.sigma_sq(),
        large_b_branch: 3.0 * norm_b * cert.kappa / cert.gamma >= 1.0,
        vacuous_floor: floor < 1e-6 * lambda_min,
    })
}
