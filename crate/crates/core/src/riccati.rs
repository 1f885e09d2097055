//! Continuous algebraic Riccati equation by Newton-Kleinman iteration.
//!
//! `AᵀP + PA − P B r⁻¹ Bᵀ P + Q = 0`, single scalar effort weight `r`.
//! The initial stabilizing gain comes from Bass' shifted-Lyapunov construction,
//! so no pole placement is needed.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct CareOptions {
    pub max_iterations: usize,
    /// Stop once the residual drops below this.
    pub tolerance: f64,
    /// Largest residual still accepted when iteration stalls at roundoff.
    pub accept: f64,
}

impl Default for CareOptions {
    fn default() -> Self {
        CareOptions { max_iterations: 200, tolerance: 1e-10, accept: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Solve `AᵀX + XA = −C` for `X`.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let m = kron(&eye, &at) + kron(&at, &eye);
    let rhs = DMatrix::from_column_slice(n * n, 1, (-c).as_slice());
    let x = m.lu().solve(&rhs).ok_or(Error::Singular("lyapunov operator"))?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: f64, p: &DMatrix<f64>) -> f64 {
    let res = a.transpose() * p + p * a - p * b * b.transpose() * p / r + q;
    res.norm()
}

/// Bass' construction: `K = Bᵀ Z⁻¹` with `(A + βI)Z + Z(A + βI)ᵀ = 2BBᵀ` stabilizes `A − BK`
/// whenever `(A, B)` is controllable and `−(A + βI)` is Hurwitz.
fn initial_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let beta = a.norm() + 1.0;
    let shifted = a + DMatrix::<f64>::identity(n, n) * beta;
    // solve_lyapunov handles MᵀX + XM = −C; here M = −(A + βI)ᵀ and C = 2BBᵀ.
    let m = -shifted.transpose();
    let z = solve_lyapunov(&m, &(b * b.transpose() * 2.0))?;
    let zinv = z.try_inverse().ok_or(Error::Singular("controllability gramian (uncontrollable pair?)"))?;
    Ok(b.transpose() * zinv)
}

pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: f64,
    opts: &CareOptions,
) -> Result<CareSolution> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.nrows() });
    }
    if r <= 0.0 || !r.is_finite() {
        return Err(Error::InvalidArgument(format!("effort weight must be positive, got {r}")));
    }
    let mut k = initial_gain(a, b)?;
    let mut best: Option<CareSolution> = None;
    for it in 1..=opts.max_iterations {
        let acl = a - b * &k;
        let p = solve_lyapunov(&acl, &(q + k.transpose() * &k * r))?;
        k = b.transpose() * &p / r;
        let residual = care_residual(a, b, q, r, &p);
        if !residual.is_finite() {
            break;
        }
        let improved = best.as_ref().map_or(true, |s| residual < s.residual * 0.999);
        let done = residual < opts.tolerance;
        if improved || done {
            best = Some(CareSolution { p, gain: k.clone(), residual, iterations: it });
        }
        if done || (!improved && best.as_ref().is_some_and(|s| s.residual < opts.accept)) {
            break;
        }
    }
    match best {
        Some(s) if s.residual < opts.accept => Ok(s),
        Some(s) => Err(Error::RiccatiNonConvergence { residual: s.residual }),
        None => Err(Error::RiccatiNonConvergence { residual: f64::NAN }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_closed_form() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let zero = DMatrix::from_element(1, 1, 0.0);
        let s = solve_care(&zero, &one, &one, 1.0, &CareOptions::default()).unwrap();
        assert!((s.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((s.gain[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_unstable_plant() {
        // a = 2, b = 1, q = 3, r = 1: p² − 4p − 3 = 0 → p = 2 + √7
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::from_element(1, 1, 3.0);
        let s = solve_care(&a, &b, &q, 1.0, &CareOptions::default()).unwrap();
        assert!((s.p[(0, 0)] - (2.0 + 7f64.sqrt())).abs() < 1e-10);
    }

    #[test]
    fn double_integrator() {
        // known: Q = I, r = 1 → P = [[√3, 1], [1, √3]]
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let s = solve_care(&a, &b, &q, 1.0, &CareOptions::default()).unwrap();
        let r3 = 3f64.sqrt();
        assert!((s.p[(0, 0)] - r3).abs() < 1e-10);
        assert!((s.p[(0, 1)] - 1.0).abs() < 1e-10);
        assert!((s.p[(1, 1)] - r3).abs() < 1e-10);
    }

    #[test]
    fn lyapunov_solution_satisfies_equation() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, 0.0, -3.0, 1.0, 0.5, 0.0, -2.0]);
        let c = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 3.0]);
        let x = solve_lyapunov(&a, &c).unwrap();
        let res = a.transpose() * &x + &x * &a + &c;
        assert!(res.norm() < 1e-12);
    }

    #[test]
    fn uncontrollable_pair_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let q = DMatrix::identity(2, 2);
        assert!(solve_care(&a, &b, &q, 1.0, &CareOptions::default()).is_err());
    }
}
