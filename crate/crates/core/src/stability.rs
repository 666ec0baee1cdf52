//! Diagonal strong stability certificates and a Riccati-based default gain.

use nalgebra::{DMatrix, Schur};
use num_complex::Complex64;
use serde::ser::{Serialize, SerializeStruct, Serializer};

use crate::error::{dim_err, Error, Result, StabilityFailure};
use crate::lds::LinearSystem;
use crate::linalg::{spectral_norm, spectral_norm_c, to_complex, CMatrix};

/// Eigenvector matrices with a larger condition number count as defective.
pub const DEFECTIVE_CONDITION: f64 = 1e12;
const CLUSTER_TOL: f64 = 1e-6;
const DARE_TOL: f64 = 1e-12;
const DARE_MAX_ITER: usize = 100_000;
const DARE_BLOWUP: f64 = 1e12;

/// `A - BK = Q L Q^{-1}` with `L` diagonal.
#[derive(Debug, Clone)]
pub struct StabilityCertificate {
    pub q: CMatrix,
    /// Diagonal of `L`, sorted by descending modulus.
    pub l: Vec<Complex64>,
    pub kappa: f64,
    pub gamma: f64,
    /// `|Q L Q^{-1} - (A - BK)|_F`.
    pub reconstruction_error: f64,
    pub condition_number: f64,
}

impl StabilityCertificate {
    pub fn l_matrix(&self) -> CMatrix {
        CMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.l.clone()))
    }

    pub fn q_inverse(&self) -> CMatrix {
        self.q.clone().try_inverse().expect("certified Q is invertible")
    }
}

fn pair(z: &Complex64) -> [f64; 2] {
    [z.re, z.im]
}

impl Serialize for StabilityCertificate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let q: Vec<Vec<[f64; 2]>> = (0..self.q.nrows())
            .map(|i| (0..self.q.ncols()).map(|j| pair(&self.q[(i, j)])).collect())
            .collect();
        let l: Vec<[f64; 2]> = self.l.iter().map(pair).collect();
        let mut st = s.serialize_struct("StabilityCertificate", 6)?;
        st.serialize_field("q", &q)?;
        st.serialize_field("l", &l)?;
        st.serialize_field("kappa", &self.kappa)?;
        st.serialize_field("gamma", &self.gamma)?;
        st.serialize_field("reconstruction_error", &self.reconstruction_error)?;
        st.serialize_field("condition_number", &self.condition_number)?;
        st.end()
    }
}

/// `A - B K`.
pub fn closed_loop(sys: &LinearSystem, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if k.nrows() != sys.du() || k.ncols() != sys.dx() {
        return Err(dim_err("closed_loop: K", format!("{}x{}", sys.du(), sys.dx()), format!("{}x{}", k.nrows(), k.ncols())));
    }
    Ok(sys.a() - sys.b() * k)
}

fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let schur = Schur::try_new(m.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::Numeric("Schur decomposition did not converge".into()))?;
    let mut ev: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| {
        b.norm()
            .total_cmp(&a.norm())
            .then(b.re.total_cmp(&a.re))
            .then(b.im.total_cmp(&a.im))
    });
    Ok(ev)
}

/// Unit-norm vector with its first non-negligible entry real and positive.
fn normalize_phase(v: &mut nalgebra::DVector<Complex64>) {
    let n = v.norm();
    if n == 0.0 {
        return;
    }
    *v /= Complex64::new(n, 0.0);
    if let Some(z) = v.iter().find(|z| z.norm() > 1e-12).copied() {
        let phase = z.conj() / z.norm();
        *v *= phase;
    }
}

fn eigenbasis(m: &DMatrix<f64>, ev: &[Complex64]) -> CMatrix {
    let n = m.nrows();
    let mc = to_complex(m);
    // group numerically coincident eigenvalues so each cluster gets an
    // orthonormal basis of the approximate null space
    let mut clusters: Vec<(Complex64, usize)> = Vec::new();
    for z in ev {
        match clusters
            .iter_mut()
            .find(|(c, _)| (c - z).norm() <= CLUSTER_TOL * c.norm().max(1.0))
        {
            Some(c) => c.1 += 1,
            None => clusters.push((*z, 1)),
        }
    }
    let mut cols = Vec::with_capacity(n);
    for (lambda, mult) in clusters {
        let shifted = &mc - CMatrix::identity(n, n) * lambda;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        for &i in idx.iter().take(mult) {
            let mut v = v_t.row(i).adjoint();
            normalize_phase(&mut v);
            cols.push(v);
        }
    }
    CMatrix::from_columns(&cols)
}

/// Certifies `(kappa, gamma)`-diagonal strong stability of `K` for `sys`.
///
/// With `requested = Some((kappa, gamma))` the certificate must also be at
/// least that tight.
pub fn certify(sys: &LinearSystem, k: &DMatrix<f64>, requested: Option<(f64, f64)>) -> Result<StabilityCertificate> {
    let acl = closed_loop(sys, k)?;
    let ev = eigenvalues(&acl)?;
    if ev.iter().any(|z| !z.norm().is_finite() || z.norm() >= 1.0) {
        return Err(Error::Stability(StabilityFailure::Unstable));
    }
    let q = eigenbasis(&acl, &ev);
    let sv = q.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition_number <= DEFECTIVE_CONDITION) {
        return Err(Error::Stability(StabilityFailure::Defective));
    }
    let q_inv = q
        .clone()
        .try_inverse()
        .ok_or(Error::Stability(StabilityFailure::Defective))?;
    let acl_c = to_complex(&acl);
    let diag = &q_inv * &acl_c * &q;
    let l: Vec<Complex64> = (0..diag.nrows()).map(|i| diag[(i, i)]).collect();
    let lm = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(l.clone()));
    let reconstruction_error = (&q * lm * &q_inv - &acl_c).norm();
    if reconstruction_error > 1e-8 * acl.norm() + 1e-14 {
        return Err(Error::Stability(StabilityFailure::Defective));
    }
    let rho = l.iter().fold(0.0_f64, |a, z| a.max(z.norm()));
    if rho >= 1.0 {
        return Err(Error::Stability(StabilityFailure::Unstable));
    }
    let kappa = 1.0_f64
        .max(spectral_norm(k))
        .max(spectral_norm_c(&q))
        .max(spectral_norm_c(&q_inv));
    let cert = StabilityCertificate {
        q,
        l,
        kappa,
        gamma: 1.0 - rho,
        reconstruction_error,
        condition_number,
    };
    if let Some((kr, gr)) = requested {
        if cert.kappa > kr || cert.gamma < gr {
            return Err(Error::Stability(StabilityFailure::OutsideRequested));
        }
    }
    Ok(cert)
}

/// LQR gain for weights `(q, r)` by fixed-point iteration of the discrete
/// Riccati recursion, started at `P = q`.
pub fn dare_gain(sys: &LinearSystem, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, b) = (sys.a(), sys.b());
    if q.shape() != (sys.dx(), sys.dx()) || r.shape() != (sys.du(), sys.du()) {
        return Err(dim_err("dare_gain: weights", format!("{0}x{0}/{1}x{1}", sys.dx(), sys.du()), format!("{:?}/{:?}", q.shape(), r.shape())));
    }
    let unstabilizable = || Error::Stability(StabilityFailure::Unstabilizable);
    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let s = r + b.transpose() * p * b;
        let chol = s.cholesky().ok_or(Error::NotPositiveDefinite("R + B^T P B"))?;
        Ok(chol.solve(&(b.transpose() * p * a)))
    };
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let k = gain(&p)?;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        let next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|x| x.is_finite()) || next.norm() > DARE_BLOWUP {
            return Err(unstabilizable());
        }
        let change = (&next - &p).norm();
        p = next;
        if change <= DARE_TOL * p.norm() {
            return gain(&p);
        }
    }
    Err(unstabilizable())
}

/// Unit-weight LQR gain, accepted only if it certifies.
pub fn default_gain(sys: &LinearSystem) -> Result<DMatrix<f64>> {
    let k = dare_gain(sys, &DMatrix::identity(sys.dx(), sys.dx()), &DMatrix::identity(sys.du(), sys.du()))?;
    certify(sys, &k, None)?;
    Ok(k)
}
