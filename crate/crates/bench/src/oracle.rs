//! Reference solutions for supported problem families.

use ibpd::operators::ProxFunction;
use ibpd::Error;
use nalgebra::{DMatrix, DVector};

use crate::error::{BenchError, Result};
use crate::reference::DenseComposite;
use crate::spec::Problem;

/// Iteration cap of the iterative oracles.
pub const ORACLE_ITERS: usize = 1_000_000;

/// Stop once successive iterates differ by at most this much.
const ORACLE_STEP_TOL: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    /// Normal equations solved by a dense factorization.
    ClosedForm,
    /// Proximal gradient with step `1/Lip`.
    ProximalGradient,
    /// Deterministic primal-dual iteration with conservative steps.
    PrimalDual,
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub x: DVector<f64>,
    pub y: Option<DVector<f64>>,
    /// Gradient norm (closed form) or fixed-point residual (iterative).
    pub residual: f64,
    pub iterations: usize,
    pub method: OracleMethod,
    pub objective: f64,
}

fn unsupported(msg: &str) -> BenchError {
    BenchError::core("oracle", Error::Unsupported(msg.into()))
}

fn smooth_g(g: &ProxFunction) -> Option<(f64, Option<&Vec<f64>>)> {
    match g {
        ProxFunction::Zero => Some((0.0, None)),
        ProxFunction::SquaredL2 { weight, center } => Some((*weight, center.as_ref())),
        _ => None,
    }
}

/// `(Q, c)` with `∇(h + Σ g_k ∘ L_k)(x) = Qx + c` when every `g_k` is a weighted square.
fn smooth_part(d: &DenseComposite) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let m = d.m();
    let mut w = DVector::zeros(m);
    let mut center = DVector::zeros(m);
    for (r, g) in &d.g {
        let (wk, ck) = smooth_g(g)?;
        for (i, idx) in r.clone().enumerate() {
            w[idx] = wk;
            center[idx] = ck.map_or(0.0, |c| c[i]);
        }
    }
    let wl = DMatrix::from_diagonal(&w) * &d.l;
    let q = &d.hq + d.l.transpose() * &wl;
    let c = &d.hc - d.l.transpose() * w.component_mul(&center);
    Some(((&q + q.transpose()) * 0.5, c))
}

/// Solves a composite problem with every `l_k = ι_{0}`: closed form when it is an
/// unconstrained quadratic, proximal gradient when only `f` is nonsmooth, and a long
/// deterministic primal-dual run otherwise. General inclusions are not supported.
pub fn oracle_solve(problem: &Problem) -> Result<OracleSolution> {
    let prob = problem
        .composite()
        .ok_or_else(|| unsupported("no reference solver for general monotone inclusions"))?;
    if prob.lstar().iter().any(|l| !l.is_zero()) {
        return Err(unsupported("reference solvers need every l_k = ι_{0}"));
    }
    let d = DenseComposite::from_problem(prob).map_err(|e| BenchError::core("oracle", e))?;
    match smooth_part(&d) {
        Some((q, c)) if prob.f().iter().all(|f| *f == ProxFunction::Zero) => closed_form(&d, &q, &c),
        Some((q, c)) => proximal_gradient(&d, &q, &c),
        None => primal_dual(&d),
    }
}

fn closed_form(d: &DenseComposite, q: &DMatrix<f64>, c: &DVector<f64>) -> Result<OracleSolution> {
    let chol = q
        .clone()
        .cholesky()
        .ok_or_else(|| unsupported("quadratic is not positive definite"))?;
    let x = chol.solve(&(-c));
    let residual = (q * &x + c).norm();
    Ok(OracleSolution {
        objective: d.objective(&x),
        x,
        y: None,
        residual,
        iterations: 0,
        method: OracleMethod::ClosedForm,
    })
}

fn proximal_gradient(d: &DenseComposite, q: &DMatrix<f64>, c: &DVector<f64>) -> Result<OracleSolution> {
    let lip = q.symmetric_eigenvalues().max();
    if !(lip > 0.0) {
        return Err(unsupported("smooth part has no curvature"));
    }
    let gamma = 1.0 / lip;
    let steps = DVector::from_element(d.n(), gamma);
    let mut x = DVector::zeros(d.n());
    let mut iterations = ORACLE_ITERS;
    for it in 1..=ORACLE_ITERS {
        let next = d.prox_f(&(&x - (q * &x + c) * gamma), &steps);
        let diff = (&next - &x).amax();
        x = next;
        if diff <= ORACLE_STEP_TOL {
            iterations = it;
            break;
        }
    }
    let residual = (&x - d.prox_f(&(&x - (q * &x + c) * gamma), &steps)).norm() / gamma;
    Ok(OracleSolution {
        objective: d.objective(&x),
        x,
        y: None,
        residual,
        iterations,
        method: OracleMethod::ProximalGradient,
    })
}

fn primal_dual(d: &DenseComposite) -> Result<OracleSolution> {
    let norm = d.l.clone().svd(false, false).singular_values.max();
    let lip = if d.hq.iter().all(|&v| v == 0.0) {
        0.0
    } else {
        d.hq.symmetric_eigenvalues().max()
    };
    // 1/τ − σ‖L‖² = (‖L‖ + Lip)/0.99 − ‖L‖ > Lip/2
    let sigma = 1.0 / norm;
    let tau = 0.99 / (norm + lip);
    let f = DVector::from_element(d.n(), tau);
    let r = DVector::from_element(d.m(), sigma);
    let mut x = DVector::zeros(d.n());
    let mut y = DVector::zeros(d.m());
    let mut iterations = ORACLE_ITERS;
    for it in 1..=ORACLE_ITERS {
        let (xn, yn) = d.primal_dual_step(&x, &y, &f, &r, 1.0);
        let diff = (&xn - &x).amax().max((&yn - &y).amax());
        x = xn;
        y = yn;
        if diff <= ORACLE_STEP_TOL {
            iterations = it;
            break;
        }
    }
    let (rp, rd) = d.residuals(&x, &y, &f, &r);
    Ok(OracleSolution {
        objective: d.objective(&x),
        x,
        y: Some(y),
        residual: rp.max(rd),
        iterations,
        method: OracleMethod::PrimalDual,
    })
}
