//! Dense deterministic primal-dual loops, written directly on full matrices with their own
//! prox formulas. They share no code with the block solvers and serve as references.

use ibpd::operators::{GradientKind, ProxFunction, SmoothGradient};
use ibpd::pd::CompositeProblem;
use ibpd::Error;
use nalgebra::{DMatrix, DVector};
use std::ops::Range;

/// `prox_{s f}` on coordinate `i` of a block.
pub fn prox_scalar(f: &ProxFunction, i: usize, v: f64, s: f64) -> f64 {
    match f {
        ProxFunction::Zero => v,
        ProxFunction::L1 { weight } => {
            let t = s * weight;
            if v > t {
                v - t
            } else if v < -t {
                v + t
            } else {
                0.0
            }
        }
        ProxFunction::SquaredL2 { weight, center } => {
            let c = center.as_ref().map_or(0.0, |c| c[i]);
            (v + s * weight * c) / (1.0 + s * weight)
        }
        ProxFunction::Box { lower, upper } => v.max(*lower).min(*upper),
        ProxFunction::Singleton { point } => point.as_ref().map_or(0.0, |c| c[i]),
    }
}

/// `prox_{s f*}` on coordinate `i`, by the Moreau decomposition.
pub fn conj_prox_scalar(f: &ProxFunction, i: usize, v: f64, s: f64) -> f64 {
    v - s * prox_scalar(f, i, v / s, 1.0 / s)
}

/// A composite problem flattened to dense data.
#[derive(Debug, Clone)]
pub struct DenseComposite {
    pub l: DMatrix<f64>,
    pub f: Vec<(Range<usize>, ProxFunction)>,
    pub g: Vec<(Range<usize>, ProxFunction)>,
    /// `h(x) = ½⟨x, Qx⟩ + ⟨c, x⟩ + h0` with block-diagonal `Q`.
    pub hq: DMatrix<f64>,
    pub hc: DVector<f64>,
    pub h0: f64,
    /// `∇l*(y) = Dy + d`.
    pub dq: DMatrix<f64>,
    pub dc: DVector<f64>,
}

fn quadratic_parts(
    terms: &[SmoothGradient],
    ranges: &[Range<usize>],
    n: usize,
) -> Result<(DMatrix<f64>, DVector<f64>, f64), Error> {
    let mut q = DMatrix::zeros(n, n);
    let mut c = DVector::zeros(n);
    let mut c0 = 0.0;
    for (t, r) in terms.iter().zip(ranges) {
        match t.kind() {
            GradientKind::Zero { .. } => {}
            GradientKind::Quadratic { q: qb, c: cb, constant } => {
                q.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(qb);
                c.rows_mut(r.start, r.len()).copy_from_slice(cb);
                c0 += constant;
            }
            GradientKind::Custom { .. } => {
                return Err(Error::Unsupported("dense reference needs quadratic smooth terms".into()))
            }
        }
    }
    Ok((q, c, c0))
}

impl DenseComposite {
    pub fn from_problem(prob: &CompositeProblem) -> Result<Self, Error> {
        let l = prob.linear();
        let (cols, rows) = (l.col_layout(), l.row_layout());
        let cr: Vec<_> = (0..cols.num_blocks()).map(|j| cols.range(j)).collect();
        let rr: Vec<_> = (0..rows.num_blocks()).map(|k| rows.range(k)).collect();
        let (hq, hc, h0) = quadratic_parts(prob.h(), &cr, cols.total_dim())?;
        let (dq, dc, _) = quadratic_parts(prob.lstar(), &rr, rows.total_dim())?;
        Ok(Self {
            l: l.to_dense(),
            f: cr.iter().cloned().zip(prob.f().iter().cloned()).collect(),
            g: rr.iter().cloned().zip(prob.g().iter().cloned()).collect(),
            hq,
            hc,
            h0,
            dq,
            dc,
        })
    }

    pub fn n(&self) -> usize {
        self.l.ncols()
    }

    pub fn m(&self) -> usize {
        self.l.nrows()
    }

    pub fn grad_h(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.hq * x + &self.hc
    }

    pub fn grad_lstar(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.dq * y + &self.dc
    }

    /// `prox_f` in the metric `diag(steps)⁻¹`.
    pub fn prox_f(&self, v: &DVector<f64>, steps: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for (r, f) in &self.f {
            for (i, idx) in r.clone().enumerate() {
                out[idx] = prox_scalar(f, i, v[idx], steps[idx]);
            }
        }
        out
    }

    /// `prox_{g*}` in the metric `diag(steps)⁻¹`.
    pub fn prox_gconj(&self, v: &DVector<f64>, steps: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for (r, g) in &self.g {
            for (i, idx) in r.clone().enumerate() {
                out[idx] = conj_prox_scalar(g, i, v[idx], steps[idx]);
            }
        }
        out
    }

    /// `Σ f_j + h + Σ g_k(Lx)`, assuming every `l_k = ι_{0}`.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let lx = &self.l * x;
        let mut v = 0.5 * x.dot(&(&self.hq * x)) + self.hc.dot(x) + self.h0;
        for (r, f) in &self.f {
            v += f.value(&x.as_slice()[r.clone()]);
        }
        for (r, g) in &self.g {
            v += g.value(&lx.as_slice()[r.clone()]);
        }
        v
    }

    /// One primal-then-dual step with relaxation `λ`:
    /// `z = prox_f(x − F(L*y + ∇h(x)))`, `s = prox_{g*}(y + R(L(2z − x) − ∇l*(y)))`.
    pub fn primal_dual_step(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        f: &DVector<f64>,
        r: &DVector<f64>,
        lambda: f64,
    ) -> (DVector<f64>, DVector<f64>) {
        let v = x - f.component_mul(&(self.l.transpose() * y + self.grad_h(x)));
        let z = self.prox_f(&v, f);
        let u = y + r.component_mul(&(&self.l * (&z * 2.0 - x) - self.grad_lstar(y)));
        let s = self.prox_gconj(&u, r);
        (x + (z - x) * lambda, y + (s - y) * lambda)
    }

    /// One dual-then-primal step for `f ≡ 0`:
    /// `z = x − F∇h(x)`, `s = prox_{g*}(y + R(L(z − FL*y) − ∇l*(y)))`, `x⁺ = z − FL*s`.
    pub fn smooth_step(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        f: &DVector<f64>,
        r: &DVector<f64>,
        lambda: f64,
    ) -> (DVector<f64>, DVector<f64>) {
        let z = x - f.component_mul(&self.grad_h(x));
        let u = y + r.component_mul(&(&self.l * (&z - f.component_mul(&(self.l.transpose() * y))) - self.grad_lstar(y)));
        let s = self.prox_gconj(&u, r);
        let xt = &z - f.component_mul(&(self.l.transpose() * &s));
        (x + (xt - x) * lambda, y + (s - y) * lambda)
    }

    /// `(‖x − prox_f(x − F(L*y + ∇h(x)))‖, ‖y − prox_{g*}(y + R(Lx − ∇l*(y)))‖)`.
    pub fn residuals(&self, x: &DVector<f64>, y: &DVector<f64>, f: &DVector<f64>, r: &DVector<f64>) -> (f64, f64) {
        let v = x - f.component_mul(&(self.l.transpose() * y + self.grad_h(x)));
        let u = y + r.component_mul(&(&self.l * x - self.grad_lstar(y)));
        ((x - self.prox_f(&v, f)).norm(), (y - self.prox_gconj(&u, r)).norm())
    }
}
