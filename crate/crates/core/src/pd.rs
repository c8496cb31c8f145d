//! Preconditioned randomized inertial forward-backward and primal-dual splitting.
//!
//! The primal-dual iterations solve coupled inclusions
//!
//! ```text
//! 0 ∈ A_j x_j + C_j x_j + Σ_k L_{k,j}* y_k          (j = 1..p)
//! 0 ∈ B_k⁻¹ y_k + D̃_k⁻¹ y_k − Σ_j L_{k,j} x_j        (k = 1..q)
//! ```
//!
//! with diagonal preconditioners `F` (primal) and `R` (dual). Block `j` of the primal
//! update reads only the dual blocks `k ∈ 𝕃_j*` in its column of `L`, and dual block `k`
//! reads only the primal blocks `j ∈ 𝕃_k` in its row; activation masks must respect this
//! coupling so that no block reads a value that was not computed in the same iteration.

use std::fmt;

use crate::block::{relax_active, Coupling, MaskSampler, PlanMode, SamplingPlan, StepInfo};
use crate::error::{Error, Result};
use crate::hilbert::{
    operator_norm_estimate, BlockLayout, BlockVector, DiagonalPreconditioner,
    LinearBlockOperator, POWER_ITERATION_CAP, POWER_ITERATION_TOL,
};
use crate::km::{
    ensure_finite, full_residual, validate_schedule, FixedPointRow, InertialSchedule, RunOutcome,
    RunState, StopRule,
};
use crate::block::ActivationMask;
use crate::operators::{BlockMap, DualResolvent, ProxFunction, Resolvent, SmoothGradient};

/// Primal slot `j`: resolvent of `A_j` and the cocoercive `C_j`.
#[derive(Debug, Clone)]
pub struct PrimalSlot {
    pub resolvent: Resolvent,
    pub smooth: SmoothGradient,
}

/// Dual slot `k`: resolvent of `B_k⁻¹` and the single-valued `D̃_k⁻¹`.
#[derive(Debug, Clone)]
pub struct DualSlot {
    pub resolvent: DualResolvent,
    pub smooth: SmoothGradient,
}

#[derive(Debug, Clone)]
pub struct MonotoneBlockProblem {
    primal: Vec<PrimalSlot>,
    dual: Vec<DualSlot>,
    l: LinearBlockOperator,
}

impl MonotoneBlockProblem {
    pub fn new(primal: Vec<PrimalSlot>, dual: Vec<DualSlot>, l: LinearBlockOperator) -> Result<Self> {
        let (cols, rows) = (l.col_layout(), l.row_layout());
        if primal.len() != cols.num_blocks() || dual.len() != rows.num_blocks() {
            return Err(Error::invalid(format!(
                "{} primal and {} dual slots for a {}×{} block operator",
                primal.len(),
                dual.len(),
                rows.num_blocks(),
                cols.num_blocks()
            )));
        }
        for (j, slot) in primal.iter().enumerate() {
            let d = cols.dim(j);
            slot.resolvent
                .check(d)
                .map_err(|e| Error::invalid(format!("primal slot {j}: {e}")))?;
            if slot.smooth.dim() != d {
                return Err(Error::invalid(format!(
                    "primal slot {j}: smooth term has dimension {} but the block has {d}",
                    slot.smooth.dim()
                )));
            }
        }
        for (k, slot) in dual.iter().enumerate() {
            let d = rows.dim(k);
            slot.resolvent
                .check(d)
                .map_err(|e| Error::invalid(format!("dual slot {k}: {e}")))?;
            if slot.smooth.dim() != d {
                return Err(Error::invalid(format!(
                    "dual slot {k}: smooth term has dimension {} but the block has {d}",
                    slot.smooth.dim()
                )));
            }
        }
        Ok(Self { primal, dual, l })
    }

    pub fn p(&self) -> usize {
        self.primal.len()
    }

    pub fn q(&self) -> usize {
        self.dual.len()
    }

    pub fn primal_layout(&self) -> &BlockLayout {
        self.l.col_layout()
    }

    pub fn dual_layout(&self) -> &BlockLayout {
        self.l.row_layout()
    }

    pub fn linear(&self) -> &LinearBlockOperator {
        &self.l
    }

    pub fn primal_slot(&self, j: usize) -> &PrimalSlot {
        &self.primal[j]
    }

    pub fn dual_slot(&self, k: usize) -> &DualSlot {
        &self.dual[k]
    }

    fn check_prec(&self, prec: &DiagonalPreconditioner) -> Result<()> {
        if prec.primal().layout() != self.primal_layout() || prec.dual().layout() != self.dual_layout() {
            return Err(Error::LayoutMismatch {
                expected: [self.primal_layout().block_dims(), self.dual_layout().block_dims()].concat(),
                found: [prec.primal().layout().block_dims(), prec.dual().layout().block_dims()].concat(),
            });
        }
        Ok(())
    }
}

/// `min Σ_j f_j(x_j) + h_j(x_j) + Σ_k (g_k □ l_k)(Σ_j L_{k,j} x_j)`, stored together with
/// its inclusion form (`A = ∂f`, `C = ∇h`, `B = ∂g`, `D̃⁻¹ = ∇l*`).
#[derive(Debug, Clone)]
pub struct CompositeProblem {
    f: Vec<ProxFunction>,
    h: Vec<SmoothGradient>,
    g: Vec<ProxFunction>,
    lstar: Vec<SmoothGradient>,
    inclusion: MonotoneBlockProblem,
}

impl CompositeProblem {
    pub fn new(
        f: Vec<ProxFunction>,
        h: Vec<SmoothGradient>,
        g: Vec<ProxFunction>,
        lstar: Vec<SmoothGradient>,
        l: LinearBlockOperator,
    ) -> Result<Self> {
        if f.len() != h.len() || g.len() != lstar.len() {
            return Err(Error::invalid(format!(
                "slot counts disagree: {} f, {} h, {} g, {} l*",
                f.len(),
                h.len(),
                g.len(),
                lstar.len()
            )));
        }
        let primal = f
            .iter()
            .zip(&h)
            .map(|(f, h)| PrimalSlot {
                resolvent: Resolvent::Subdifferential(f.clone()),
                smooth: h.clone(),
            })
            .collect();
        let dual = g
            .iter()
            .zip(&lstar)
            .map(|(g, l)| DualSlot {
                resolvent: DualResolvent::Conjugate(g.clone()),
                smooth: l.clone(),
            })
            .collect();
        let inclusion = MonotoneBlockProblem::new(primal, dual, l)?;
        Ok(Self {
            f,
            h,
            g,
            lstar,
            inclusion,
        })
    }

    pub fn inclusion(&self) -> &MonotoneBlockProblem {
        &self.inclusion
    }

    pub fn linear(&self) -> &LinearBlockOperator {
        self.inclusion.linear()
    }

    pub fn f(&self) -> &[ProxFunction] {
        &self.f
    }

    pub fn h(&self) -> &[SmoothGradient] {
        &self.h
    }

    pub fn g(&self) -> &[ProxFunction] {
        &self.g
    }

    pub fn lstar(&self) -> &[SmoothGradient] {
        &self.lstar
    }

    /// True when every `f_j ≡ 0`, the case handled by the smooth algorithm.
    pub fn is_smooth(&self) -> bool {
        self.f.iter().all(|f| *f == ProxFunction::Zero)
    }

    fn infimal_convolution_trivial(&self) -> bool {
        self.lstar.iter().all(|l| l.is_zero())
    }

    /// Primal objective, available when every `l_k = ι_{0}` (so `g □ l = g`).
    pub fn objective(&self, x: &BlockVector) -> Option<f64> {
        if !self.infimal_convolution_trivial() {
            return None;
        }
        let lx = self.linear().apply(x).ok()?;
        let mut v = 0.0;
        for j in 0..self.f.len() {
            v += self.f[j].value(x.block(j)) + self.h[j].value(x.block(j));
        }
        for k in 0..self.g.len() {
            v += self.g[k].value(lx.block(k));
        }
        Some(v)
    }

    /// Dual objective `Σ_j (f_j + h_j)*(−(L*y)_j) + Σ_k g_k*(y_k)`, when every conjugate
    /// is available in closed form and every `l_k = ι_{0}`.
    pub fn dual_objective(&self, y: &BlockVector) -> Option<f64> {
        if !self.infimal_convolution_trivial() {
            return None;
        }
        let lty = self.linear().apply_adjoint(y).ok()?;
        let mut v = 0.0;
        for j in 0..self.f.len() {
            let u: Vec<f64> = lty.block(j).iter().map(|a| -a).collect();
            v += if self.h[j].is_zero() {
                self.f[j].conjugate_value(&u)
            } else if self.f[j] == ProxFunction::Zero {
                self.h[j].conjugate_value(&u)?
            } else {
                return None;
            };
        }
        for k in 0..self.g.len() {
            v += self.g[k].conjugate_value(y.block(k));
        }
        Some(v)
    }
}

/// Cumulative operator evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    /// Resolvent or prox evaluations, one per block.
    pub prox: u64,
    /// Evaluations of nonzero gradients, one per block.
    pub grad: u64,
    /// Dense block products with `L_{k,j}` or its adjoint.
    pub linop: u64,
}

/// Joint primal-dual iteration state.
#[derive(Debug, Clone)]
pub struct PDState {
    pub x_prev: BlockVector,
    pub x_curr: BlockVector,
    pub y_prev: BlockVector,
    pub y_curr: BlockVector,
    /// Index `n` of the current iterate; starts at 1.
    pub iteration: usize,
    pub evals: EvalCounts,
    /// `‖x_{n+1} − x_n‖² + ‖y_{n+1} − y_n‖²` per step.
    pub step_sq_history: Vec<f64>,
}

impl PDState {
    pub fn new(x0: BlockVector, y0: BlockVector) -> Self {
        Self::with_history(x0.clone(), x0, y0.clone(), y0)
    }

    pub fn with_history(x0: BlockVector, x1: BlockVector, y0: BlockVector, y1: BlockVector) -> Self {
        Self {
            x_prev: x0,
            x_curr: x1,
            y_prev: y0,
            y_curr: y1,
            iteration: 1,
            evals: EvalCounts::default(),
            step_sq_history: Vec::new(),
        }
    }

    fn check(&self, prob: &MonotoneBlockProblem) -> Result<()> {
        for (v, layout) in [
            (&self.x_prev, prob.primal_layout()),
            (&self.x_curr, prob.primal_layout()),
            (&self.y_prev, prob.dual_layout()),
            (&self.y_curr, prob.dual_layout()),
        ] {
            if v.layout() != layout {
                return Err(Error::LayoutMismatch {
                    expected: layout.block_dims().to_vec(),
                    found: v.layout().block_dims().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn advance(&mut self, x: BlockVector, y: BlockVector) {
        let dx = x.distance(&self.x_curr).unwrap_or(f64::NAN);
        let dy = y.distance(&self.y_curr).unwrap_or(f64::NAN);
        self.step_sq_history.push(dx * dx + dy * dy);
        self.x_prev = std::mem::replace(&mut self.x_curr, x);
        self.y_prev = std::mem::replace(&mut self.y_curr, y);
        self.iteration += 1;
    }

    pub fn squared_step_partial_sums(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.step_sq_history
            .iter()
            .map(|s| {
                acc += s;
                acc
            })
            .collect()
    }
}

fn extrapolate(curr: &BlockVector, prev: &BlockVector, alpha: f64) -> BlockVector {
    let mut w = curr.clone();
    if alpha != 0.0 {
        for (wi, &pi) in w.data_mut().iter_mut().zip(prev.data()) {
            *wi += alpha * (*wi - pi);
        }
    }
    w
}

fn check_mask(mask: &ActivationMask, prob: &MonotoneBlockProblem) -> Result<()> {
    if mask.len() != prob.p() + prob.q() {
        return Err(Error::Plan(format!(
            "mask has {} bits but the problem has {} primal and {} dual blocks",
            mask.len(),
            prob.p(),
            prob.q()
        )));
    }
    Ok(())
}

fn finite(v: &[f64], iteration: usize, what: impl FnOnce() -> String) -> Result<()> {
    if v.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            iteration,
            what: what(),
        })
    }
}

/// What one primal-dual step did.
#[derive(Debug, Clone)]
pub struct PdStepInfo {
    pub mask: ActivationMask,
    pub alpha: f64,
    pub lambda: f64,
}

/// One step of the inclusion algorithm with the given mask:
///
/// ```text
/// w_j = x_j + α_n (x_j − x_j⁻)
/// z_j = J_{F_j A_j}(w_j − F_j(Σ_{k∈𝕃_j*} L_{k,j}* y_k + C_j w_j))          if ε_j
/// x_j⁺ = w_j + ε_j λ_n (z_j − w_j)
/// h_k = y_k + α_n (y_k − y_k⁻)
/// s_k = J_{R_k B_k⁻¹}(h_k + R_k(Σ_{j∈𝕃_k} L_{k,j}(2z_j − w_j) − D̃_k⁻¹ h_k))  if ε_{p+k}
/// y_k⁺ = h_k + ε_{p+k} λ_n (s_k − h_k)
/// ```
pub fn pd_inclusion_step(
    state: &mut PDState,
    s: &InertialSchedule,
    mask: &ActivationMask,
    prob: &MonotoneBlockProblem,
    prec: &DiagonalPreconditioner,
) -> Result<PdStepInfo> {
    check_mask(mask, prob)?;
    let (p, q) = (prob.p(), prob.q());
    let l = prob.linear();
    let n = state.iteration;
    let (alpha, lambda) = (s.alpha(n), s.lambda(n));
    let w = extrapolate(&state.x_curr, &state.x_prev, alpha);
    let h = extrapolate(&state.y_curr, &state.y_prev, alpha);
    let mut x_next = w.clone();
    // holds 2z_j − w_j for the primal blocks computed this iteration
    let mut reflected = BlockVector::zeros(prob.primal_layout());
    let mut computed = vec![false; p];
    let f = prec.primal();
    for j in 0..p {
        if !mask.is_active(j) {
            continue;
        }
        let slot = prob.primal_slot(j);
        let wj = w.block(j);
        let mut v = vec![0.0; wj.len()];
        state.evals.linop += l.col_adjoint_add(j, &state.y_curr, &mut v) as u64;
        if !slot.smooth.is_zero() {
            slot.smooth.gradient_add(wj, &mut v);
            state.evals.grad += 1;
        }
        let fj = f.block(j);
        let arg: Vec<f64> = wj.iter().zip(&v).zip(fj).map(|((a, b), c)| a - c * b).collect();
        let mut z = vec![0.0; wj.len()];
        slot.resolvent.apply_diag(&arg, fj, &mut z)?;
        state.evals.prox += 1;
        finite(&z, n, || format!("primal block {j}"))?;
        for (((xo, ro), &zi), &wi) in x_next
            .block_mut(j)
            .iter_mut()
            .zip(reflected.block_mut(j).iter_mut())
            .zip(&z)
            .zip(wj)
        {
            *xo = wi + lambda * (zi - wi);
            *ro = 2.0 * zi - wi;
        }
        computed[j] = true;
    }
    let mut y_next = h.clone();
    let r = prec.dual();
    for k in 0..q {
        if !mask.is_active(p + k) {
            continue;
        }
        if let Some(&j) = l.row_support(k).iter().find(|&&j| !computed[j]) {
            return Err(Error::CouplingViolation {
                iteration: n,
                dual: k,
                primal: j,
            });
        }
        let slot = prob.dual_slot(k);
        let hk = h.block(k);
        let mut u = vec![0.0; hk.len()];
        state.evals.linop += l.row_apply_add(k, &reflected, &mut u) as u64;
        if !slot.smooth.is_zero() {
            let g = slot.smooth.gradient(hk);
            u.iter_mut().zip(&g).for_each(|(a, b)| *a -= b);
            state.evals.grad += 1;
        }
        let rk = r.block(k);
        let arg: Vec<f64> = hk.iter().zip(&u).zip(rk).map(|((a, b), c)| a + c * b).collect();
        let mut sk = vec![0.0; hk.len()];
        slot.resolvent.apply_diag(&arg, rk, &mut sk)?;
        state.evals.prox += 1;
        finite(&sk, n, || format!("dual block {k}"))?;
        for ((yo, &si), &hi) in y_next.block_mut(k).iter_mut().zip(&sk).zip(hk) {
            *yo = hi + lambda * (si - hi);
        }
    }
    state.advance(x_next, y_next);
    Ok(PdStepInfo {
        mask: mask.clone(),
        alpha,
        lambda,
    })
}

/// The inclusion step with `A = ∂f`, `C = ∇h`, `B = ∂g`, `D̃⁻¹ = ∇l*`; the primal
/// resolvent is `prox_f` in the `F⁻¹` metric and the dual one is `prox_{g*}` in the `R⁻¹`
/// metric.
pub fn pd_optimization_step(
    state: &mut PDState,
    s: &InertialSchedule,
    mask: &ActivationMask,
    prob: &CompositeProblem,
    prec: &DiagonalPreconditioner,
) -> Result<PdStepInfo> {
    pd_inclusion_step(state, s, mask, prob.inclusion(), prec)
}

/// One step of the smooth algorithm (every `f_j ≡ 0`), dual update first:
///
/// ```text
/// ξ_j = max{ε_{p+k} : k ∈ 𝕃_j*}
/// w_j = x_j + α_n (x_j − x_j⁻),   z_j = ξ_j (w_j − F_j ∇h_j(w_j))
/// h_k = y_k + α_n (y_k − y_k⁻)
/// s_k = prox_{g_k*}(h_k + R_k(Σ_{j∈𝕃_k} L_{k,j}(z_j − F_j Σ_{k'∈𝕃_j*} L_{k',j}* y_k') − ∇l_k*(h_k)))  if ε_{p+k}
/// y_k⁺ = h_k + ε_{p+k} λ_n (s_k − h_k)
/// x_j⁺ = w_j + ε_j λ_n (z_j − F_j Σ_{k∈𝕃_j*} L_{k,j}* s_k − w_j)
/// ```
pub fn pd_smooth_step(
    state: &mut PDState,
    s: &InertialSchedule,
    mask: &ActivationMask,
    prob: &CompositeProblem,
    prec: &DiagonalPreconditioner,
) -> Result<PdStepInfo> {
    if !prob.is_smooth() {
        return Err(Error::Unsupported(
            "the smooth primal-dual step needs every f_j ≡ 0".into(),
        ));
    }
    let inc = prob.inclusion();
    check_mask(mask, inc)?;
    let (p, q) = (inc.p(), inc.q());
    let l = inc.linear();
    let n = state.iteration;
    let (alpha, lambda) = (s.alpha(n), s.lambda(n));
    let f = prec.primal();
    let r = prec.dual();

    let xi: Vec<bool> = (0..p)
        .map(|j| l.col_support(j).iter().any(|&k| mask.is_active(p + k)))
        .collect();
    let w = extrapolate(&state.x_curr, &state.x_prev, alpha);
    let h = extrapolate(&state.y_curr, &state.y_prev, alpha);
    let mut z = BlockVector::zeros(inc.primal_layout());
    // z_j − F_j (L* y_n)_j, needed by the active dual rows
    let mut shifted = BlockVector::zeros(inc.primal_layout());
    for j in 0..p {
        if !xi[j] {
            continue;
        }
        let wj = w.block(j);
        let fj = f.block(j);
        let hj = &prob.h()[j];
        let mut g = vec![0.0; wj.len()];
        if !hj.is_zero() {
            hj.gradient_add(wj, &mut g);
            state.evals.grad += 1;
        }
        for (((zo, &wi), &gi), &fi) in z.block_mut(j).iter_mut().zip(wj).zip(&g).zip(fj) {
            *zo = wi - fi * gi;
        }
        let mut lty = vec![0.0; wj.len()];
        state.evals.linop += l.col_adjoint_add(j, &state.y_curr, &mut lty) as u64;
        for (((so, &zi), &ti), &fi) in shifted.block_mut(j).iter_mut().zip(z.block(j)).zip(&lty).zip(fj) {
            *so = zi - fi * ti;
        }
        finite(z.block(j), n, || format!("primal forward block {j}"))?;
    }

    let mut s_vec = BlockVector::zeros(inc.dual_layout());
    let mut y_next = h.clone();
    for k in 0..q {
        if !mask.is_active(p + k) {
            continue;
        }
        let hk = h.block(k);
        let mut u = vec![0.0; hk.len()];
        state.evals.linop += l.row_apply_add(k, &shifted, &mut u) as u64;
        let lk = &prob.lstar()[k];
        if !lk.is_zero() {
            let g = lk.gradient(hk);
            u.iter_mut().zip(&g).for_each(|(a, b)| *a -= b);
            state.evals.grad += 1;
        }
        let rk = r.block(k);
        let arg: Vec<f64> = hk.iter().zip(&u).zip(rk).map(|((a, b), c)| a + c * b).collect();
        prob.g()[k].conjugate_prox_diag(&arg, rk, s_vec.block_mut(k));
        state.evals.prox += 1;
        finite(s_vec.block(k), n, || format!("dual block {k}"))?;
        for ((yo, &si), &hi) in y_next.block_mut(k).iter_mut().zip(s_vec.block(k)).zip(hk) {
            *yo = hi + lambda * (si - hi);
        }
    }

    let mut x_next = w.clone();
    for j in 0..p {
        if !mask.is_active(j) {
            continue;
        }
        if let Some(&k) = l.col_support(j).iter().find(|&&k| !mask.is_active(p + k)) {
            return Err(Error::CouplingViolation {
                iteration: n,
                dual: k,
                primal: j,
            });
        }
        let wj = w.block(j);
        let mut lts = vec![0.0; wj.len()];
        state.evals.linop += l.col_adjoint_add(j, &s_vec, &mut lts) as u64;
        for ((((xo, &wi), &zi), &ti), &fi) in x_next
            .block_mut(j)
            .iter_mut()
            .zip(wj)
            .zip(z.block(j))
            .zip(&lts)
            .zip(f.block(j))
        {
            *xo = wi + lambda * (zi - fi * ti - wi);
        }
    }
    state.advance(x_next, y_next);
    Ok(PdStepInfo {
        mask: mask.clone(),
        alpha,
        lambda,
    })
}

/// Outcome of the step-size gate `min{ν, τ̃(1 − ‖R½LF½‖²)} > ½` together with the
/// separate requirement `‖R½LF½‖ < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    /// `min_j` cocoercivity of `F_j½ C_j F_j½`.
    pub nu: f64,
    /// `min_k` cocoercivity of `R_k½ D̃_k⁻¹ R_k½`.
    pub tau_tilde: f64,
    pub norm: f64,
    pub min_expr: f64,
    pub passes_half: bool,
    pub norm_below_one: bool,
}

impl ConditionReport {
    pub fn passed(&self) -> bool {
        self.passes_half && self.norm_below_one
    }
}

impl fmt::Display for ConditionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "min{{ν, τ̃(1 − ‖R½LF½‖²)}} = {:.6} with ν = {}, τ̃ = {}, ‖R½LF½‖ = {:.6} ({} the 1/2 threshold, norm {} 1)",
            self.min_expr,
            self.nu,
            self.tau_tilde,
            self.norm,
            if self.passes_half { "passes" } else { "fails" },
            if self.norm_below_one { "below" } else { "not below" },
        )
    }
}

/// Evaluates the gate from its three ingredients.
pub fn condition_from_parts(nu: f64, tau_tilde: f64, norm: f64) -> ConditionReport {
    let slack = 1.0 - norm * norm;
    let second = if tau_tilde.is_infinite() {
        if slack > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    } else {
        tau_tilde * slack
    };
    let min_expr = nu.min(second);
    ConditionReport {
        nu,
        tau_tilde,
        norm,
        min_expr,
        passes_half: min_expr > 0.5,
        norm_below_one: norm < 1.0,
    }
}

pub fn check_condition(prob: &MonotoneBlockProblem, prec: &DiagonalPreconditioner) -> Result<ConditionReport> {
    prob.check_prec(prec)?;
    let nu = (0..prob.p())
        .map(|j| prob.primal_slot(j).smooth.scaled_cocoercivity(prec.primal().block(j)))
        .fold(f64::INFINITY, f64::min);
    let tau_tilde = (0..prob.q())
        .map(|k| prob.dual_slot(k).smooth.scaled_cocoercivity(prec.dual().block(k)))
        .fold(f64::INFINITY, f64::min);
    let norm = operator_norm_estimate(prob.linear(), prec, POWER_ITERATION_CAP, POWER_ITERATION_TOL)?;
    Ok(condition_from_parts(nu, tau_tilde, norm))
}

/// Which side of a primal-dual mask is derived from the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingDirection {
    /// Active dual `k` forces every primal `j ∈ 𝕃_k` active (inclusion and optimization).
    PrimalFollowsDual,
    /// Active primal `j` forces every dual `k ∈ 𝕃_j*` active (smooth algorithm).
    DualFollowsPrimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdAlgorithm {
    Inclusion,
    Optimization,
    Smooth,
}

impl PdAlgorithm {
    pub fn coupling(self) -> CouplingDirection {
        match self {
            PdAlgorithm::Inclusion | PdAlgorithm::Optimization => CouplingDirection::PrimalFollowsDual,
            PdAlgorithm::Smooth => CouplingDirection::DualFollowsPrimal,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PdAlgorithm::Inclusion => "pd-inclusion",
            PdAlgorithm::Optimization => "pd-opt",
            PdAlgorithm::Smooth => "pd-smooth",
        }
    }
}

fn coupling_for(l: &LinearBlockOperator, direction: CouplingDirection, minimal: bool) -> Coupling {
    let p = l.col_layout().num_blocks();
    let q = l.row_layout().num_blocks();
    match direction {
        CouplingDirection::PrimalFollowsDual => Coupling {
            leaders: (p..p + q).collect(),
            followers: (0..p)
                .map(|j| (j, l.col_support(j).iter().map(|&k| p + k).collect()))
                .collect(),
            minimal,
        },
        CouplingDirection::DualFollowsPrimal => Coupling {
            leaders: (0..p).collect(),
            followers: (0..q).map(|k| (p + k, l.row_support(k).to_vec())).collect(),
            minimal,
        },
    }
}

/// Derives a plan over `p + q` blocks in which the dependent side is computed from the
/// sampled side through the sparsity of `L`. In minimal mode a dependent bit is exactly
/// the maximum of its support; otherwise the base draw's own bit is OR-ed in.
pub fn enforce_coupling(
    plan: &SamplingPlan,
    l: &LinearBlockOperator,
    direction: CouplingDirection,
    minimal: bool,
) -> Result<SamplingPlan> {
    let m = l.col_layout().num_blocks() + l.row_layout().num_blocks();
    if plan.num_blocks() != m {
        return Err(Error::Plan(format!(
            "plan covers {} blocks but the problem has {m}",
            plan.num_blocks()
        )));
    }
    if matches!(plan.mode(), PlanMode::Coupled { .. }) {
        return Err(Error::Plan("plan is already coupled".into()));
    }
    SamplingPlan::new(
        PlanMode::Coupled {
            base: Box::new(plan.mode().clone()),
            coupling: coupling_for(l, direction, minimal),
        },
        plan.seed(),
    )
}

/// Whether every mask the plan can produce satisfies the activation inclusion.
pub fn plan_respects_coupling(
    plan: &SamplingPlan,
    l: &LinearBlockOperator,
    direction: CouplingDirection,
) -> bool {
    let p = l.col_layout().num_blocks();
    let needed = coupling_for(l, direction, true);
    match plan.mode() {
        PlanMode::Full { .. } => true,
        PlanMode::Coupled { coupling, .. } => {
            let mut leaders = coupling.leaders.clone();
            leaders.sort_unstable();
            leaders == needed.leaders
                && needed.followers.iter().all(|(f, support)| {
                    coupling
                        .followers
                        .iter()
                        .find(|(g, _)| g == f)
                        .is_some_and(|(_, have)| support.iter().all(|s| have.contains(s)))
                })
        }
        PlanMode::ExplicitTable { m, entries } => entries.iter().filter(|e| e.1 > 0.0).all(|&(bits, _)| {
            let mask: Vec<bool> = (0..*m).map(|i| bits >> i & 1 == 1).collect();
            mask_respects_coupling(&mask, l, direction, p)
        }),
        _ => plan.marginals().iter().all(|&v| v == 1.0),
    }
}

/// Per-draw check of the activation inclusion.
pub fn mask_respects_coupling(
    mask: &[bool],
    l: &LinearBlockOperator,
    direction: CouplingDirection,
    p: usize,
) -> bool {
    let q = l.row_layout().num_blocks();
    match direction {
        CouplingDirection::PrimalFollowsDual => {
            (0..q).all(|k| !mask[p + k] || l.row_support(k).iter().all(|&j| mask[j]))
        }
        CouplingDirection::DualFollowsPrimal => {
            (0..p).all(|j| !mask[j] || l.col_support(j).iter().all(|&k| mask[p + k]))
        }
    }
}

/// Fixed-point residuals of a primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `‖x − J_{FA}(x − F(L*y + Cx))‖`.
    pub primal: f64,
    /// `‖y − J_{RB⁻¹}(y + R(Lx − D̃⁻¹y))‖`.
    pub dual: f64,
    pub objective: Option<f64>,
    /// Primal plus dual objective, nonnegative and zero exactly at saddle points.
    pub gap: Option<f64>,
}

pub fn residuals(
    x: &BlockVector,
    y: &BlockVector,
    prob: &MonotoneBlockProblem,
    prec: &DiagonalPreconditioner,
) -> Result<Residuals> {
    prob.check_prec(prec)?;
    let l = prob.linear();
    let lty = l.apply_adjoint(y)?;
    let lx = l.apply(x)?;
    let mut primal = 0.0;
    for j in 0..prob.p() {
        let slot = prob.primal_slot(j);
        let xj = x.block(j);
        let mut v = lty.block(j).to_vec();
        slot.smooth.gradient_add(xj, &mut v);
        let fj = prec.primal().block(j);
        let arg: Vec<f64> = xj.iter().zip(&v).zip(fj).map(|((a, b), c)| a - c * b).collect();
        let mut z = vec![0.0; xj.len()];
        slot.resolvent.apply_diag(&arg, fj, &mut z)?;
        primal += xj.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let mut dual = 0.0;
    for k in 0..prob.q() {
        let slot = prob.dual_slot(k);
        let yk = y.block(k);
        let g = slot.smooth.gradient(yk);
        let rk = prec.dual().block(k);
        let arg: Vec<f64> = yk
            .iter()
            .zip(lx.block(k))
            .zip(&g)
            .zip(rk)
            .map(|(((a, b), c), r)| a + r * (b - c))
            .collect();
        let mut s = vec![0.0; yk.len()];
        slot.resolvent.apply_diag(&arg, rk, &mut s)?;
        dual += yk.iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(Residuals {
        primal: primal.sqrt(),
        dual: dual.sqrt(),
        objective: None,
        gap: None,
    })
}

/// Residuals plus the objective and duality gap where available.
pub fn composite_residuals(
    x: &BlockVector,
    y: &BlockVector,
    prob: &CompositeProblem,
    prec: &DiagonalPreconditioner,
) -> Result<Residuals> {
    let mut r = residuals(x, y, prob.inclusion(), prec)?;
    r.objective = prob.objective(x);
    r.gap = match (r.objective, prob.dual_objective(y)) {
        (Some(a), Some(b)) => Some(a + b),
        _ => None,
    };
    Ok(r)
}

/// Settings for a primal-dual run.
#[derive(Debug, Clone)]
pub struct PdConfig {
    pub schedule: InertialSchedule,
    pub plan: SamplingPlan,
    pub stop: StopRule,
    pub override_condition: bool,
}

/// One recorded row of a primal-dual run.
#[derive(Debug, Clone, PartialEq)]
pub struct PdRow {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// `NaN` when the objective is not available.
    pub objective: f64,
    pub active_primal: usize,
    pub active_dual: usize,
    pub evals_prox: u64,
    pub evals_grad: u64,
    pub evals_linop: u64,
}

#[derive(Debug, Clone)]
pub struct PdOutcome {
    pub state: PDState,
    pub converged: bool,
    pub trace: Vec<PdRow>,
    pub condition: ConditionReport,
    pub final_residuals: Residuals,
}

/// Starting point `(x₀, x₁, y₀, y₁)`; the second iterate defaults to the first.
#[derive(Debug, Clone)]
pub struct PdStart {
    pub x0: BlockVector,
    pub x1: Option<BlockVector>,
    pub y0: BlockVector,
    pub y1: Option<BlockVector>,
}

impl PdStart {
    pub fn zeros(prob: &MonotoneBlockProblem) -> Self {
        Self {
            x0: BlockVector::zeros(prob.primal_layout()),
            x1: None,
            y0: BlockVector::zeros(prob.dual_layout()),
            y1: None,
        }
    }

    fn into_state(self) -> PDState {
        let x1 = self.x1.unwrap_or_else(|| self.x0.clone());
        let y1 = self.y1.unwrap_or_else(|| self.y0.clone());
        PDState::with_history(self.x0, x1, self.y0, y1)
    }
}

fn run_pd(
    inclusion: &MonotoneBlockProblem,
    composite: Option<&CompositeProblem>,
    algo: PdAlgorithm,
    prec: &DiagonalPreconditioner,
    start: PdStart,
    cfg: &PdConfig,
) -> Result<PdOutcome> {
    cfg.stop.check()?;
    validate_schedule(&cfg.schedule, cfg.stop.max_iters).into_result()?;
    inclusion.check_prec(prec)?;
    let mut state = start.into_state();
    state.check(inclusion)?;
    let condition = check_condition(inclusion, prec)?;
    if !condition.passed() && !cfg.override_condition {
        return Err(Error::Condition(Box::new(condition)));
    }
    let (p, q) = (inclusion.p(), inclusion.q());
    if cfg.plan.num_blocks() != p + q {
        return Err(Error::Plan(format!(
            "plan covers {} blocks but the problem has {} primal and {} dual blocks",
            cfg.plan.num_blocks(),
            p,
            q
        )));
    }
    let direction = algo.coupling();
    if !plan_respects_coupling(&cfg.plan, inclusion.linear(), direction) {
        return Err(Error::Config(format!(
            "{} needs a plan coupled with {:?}; derive one with enforce_coupling",
            algo.name(),
            direction
        )));
    }
    let diagnostics = |x: &BlockVector, y: &BlockVector| match composite {
        Some(c) => composite_residuals(x, y, c, prec),
        None => residuals(x, y, inclusion, prec),
    };
    let mut sampler = cfg.plan.sampler();
    let mut trace = Vec::new();
    let stop = cfg.stop;
    for steps in 1..=stop.max_iters {
        let mask = sampler.sample();
        let info = match (algo, composite) {
            (PdAlgorithm::Smooth, Some(c)) => pd_smooth_step(&mut state, &cfg.schedule, &mask, c, prec)?,
            (PdAlgorithm::Smooth, None) => {
                return Err(Error::Unsupported(
                    "the smooth algorithm needs a composite problem".into(),
                ))
            }
            _ => pd_inclusion_step(&mut state, &cfg.schedule, &mask, inclusion, prec)?,
        };
        if stop.is_check_point(steps) {
            let r = diagnostics(&state.x_curr, &state.y_curr)?;
            trace.push(PdRow {
                iteration: steps,
                primal_residual: r.primal,
                dual_residual: r.dual,
                objective: r.objective.unwrap_or(f64::NAN),
                active_primal: (0..p).filter(|&j| info.mask.is_active(j)).count(),
                active_dual: (p..p + q).filter(|&k| info.mask.is_active(k)).count(),
                evals_prox: state.evals.prox,
                evals_grad: state.evals.grad,
                evals_linop: state.evals.linop,
            });
            if r.primal.max(r.dual) <= stop.tol {
                return Ok(PdOutcome {
                    state,
                    converged: true,
                    trace,
                    condition,
                    final_residuals: r,
                });
            }
        }
    }
    let final_residuals = diagnostics(&state.x_curr, &state.y_curr)?;
    Ok(PdOutcome {
        state,
        converged: false,
        trace,
        condition,
        final_residuals,
    })
}

/// Runs the inclusion algorithm; stops when both fixed-point residuals are below `tol`.
pub fn solve_inclusion(
    prob: &MonotoneBlockProblem,
    prec: &DiagonalPreconditioner,
    start: PdStart,
    cfg: &PdConfig,
) -> Result<PdOutcome> {
    run_pd(prob, None, PdAlgorithm::Inclusion, prec, start, cfg)
}

/// Runs the optimization or smooth algorithm on a composite problem.
pub fn solve_composite(
    prob: &CompositeProblem,
    algo: PdAlgorithm,
    prec: &DiagonalPreconditioner,
    start: PdStart,
    cfg: &PdConfig,
) -> Result<PdOutcome> {
    if algo == PdAlgorithm::Smooth && !prob.is_smooth() {
        return Err(Error::Unsupported(
            "the smooth algorithm needs every f_j ≡ 0".into(),
        ));
    }
    run_pd(prob.inclusion(), Some(prob), algo, prec, start, cfg)
}

/// Resolvent `J_{θ L̃ A}` of a block-separable `A` with diagonal `L̃`, evaluated per block.
pub trait BlockResolvent: Send + Sync {
    fn layout(&self) -> &BlockLayout;
    fn eval_block(&self, i: usize, theta: f64, x: &BlockVector, out: &mut [f64]) -> Result<()>;
}

/// `A = A_1 ⊕ … ⊕ A_m` with `L̃ = diag(metric)`.
#[derive(Debug, Clone)]
pub struct SeparableResolvent {
    pub metric: BlockVector,
    pub parts: Vec<Resolvent>,
}

impl SeparableResolvent {
    pub fn new(metric: BlockVector, parts: Vec<Resolvent>) -> Result<Self> {
        if parts.len() != metric.num_blocks() {
            return Err(Error::invalid("one resolvent per block is required"));
        }
        if metric.data().iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::invalid("metric entries must be positive"));
        }
        for (i, r) in parts.iter().enumerate() {
            r.check(metric.layout().dim(i))?;
        }
        Ok(Self { metric, parts })
    }
}

impl BlockResolvent for SeparableResolvent {
    fn layout(&self) -> &BlockLayout {
        self.metric.layout()
    }

    fn eval_block(&self, i: usize, theta: f64, x: &BlockVector, out: &mut [f64]) -> Result<()> {
        let steps: Vec<f64> = self.metric.block(i).iter().map(|d| theta * d).collect();
        self.parts[i].apply_diag(x.block(i), &steps, out)
    }
}

/// `J_{θL̃A}` frozen at one `θ` and exposed as a block map.
pub struct ResolventMap<'a> {
    pub resolvent: &'a dyn BlockResolvent,
    pub theta: f64,
}

impl BlockMap for ResolventMap<'_> {
    fn layout(&self) -> &BlockLayout {
        self.resolvent.layout()
    }

    fn eval_block(&self, i: usize, x: &BlockVector, out: &mut [f64]) {
        if self.resolvent.eval_block(i, self.theta, x, out).is_err() {
            out.iter_mut().for_each(|o| *o = f64::NAN);
        }
    }
}

/// The forward map `I − θ L̃B`.
pub struct ForwardMap<'a> {
    pub forward: &'a dyn BlockMap,
    pub theta: f64,
}

impl BlockMap for ForwardMap<'_> {
    fn layout(&self) -> &BlockLayout {
        self.forward.layout()
    }

    fn eval_block(&self, i: usize, x: &BlockVector, out: &mut [f64]) {
        out.copy_from_slice(self.eval(x).block(i));
    }

    fn eval(&self, x: &BlockVector) -> BlockVector {
        let z = self.forward.eval(x);
        let mut u = x.clone();
        for (ui, zi) in u.data_mut().iter_mut().zip(z.data()) {
            *ui -= self.theta * zi;
        }
        u
    }
}

/// Checks `0 < θ < 2μ`.
pub fn check_theta(theta: f64, mu: f64) -> Result<()> {
    if theta > 0.0 && theta < 2.0 * mu && theta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "step θ = {theta} is outside (0, 2μ) with μ = {mu}"
        )))
    }
}

/// Default forward step: `θ = μ`, or 1 when the forward term vanishes (`μ = ∞`).
pub fn default_theta(mu: f64) -> f64 {
    if mu.is_finite() {
        mu
    } else {
        1.0
    }
}

/// One forward-backward step: `z_n = L̃B(w_n)`, then active blocks are relaxed towards
/// `J_{θL̃A}(w_n − θ z_n)`.
#[allow(clippy::too_many_arguments)]
pub fn fb_step(
    state: &mut RunState,
    s: &InertialSchedule,
    sampler: &mut MaskSampler,
    resolvent: &dyn BlockResolvent,
    forward: &dyn BlockMap,
    mu: f64,
    theta: f64,
) -> Result<StepInfo> {
    check_theta(theta, mu)?;
    let n = state.iteration;
    let (alpha, lambda) = (s.alpha(n), s.lambda(n));
    let mask = sampler.sample();
    let w = state.extrapolate(alpha);
    ensure_finite(&w, n, "extrapolated point w_n")?;
    let u = ForwardMap { forward, theta }.eval(&w);
    ensure_finite(&u, n, "forward point w_n − θ z_n")?;
    let t = ResolventMap { resolvent, theta };
    let block_evals = relax_active(state, w.clone(), &u, &mask, lambda, &t)?;
    Ok(StepInfo {
        w,
        mask,
        block_evals,
        full_evals: 1,
        alpha,
        lambda,
    })
}

/// Runs the randomized inertial forward-backward method; `θ` defaults to `μ`.
#[allow(clippy::too_many_arguments)]
pub fn run_fb(
    x0: BlockVector,
    x1: Option<BlockVector>,
    s: &InertialSchedule,
    plan: &SamplingPlan,
    resolvent: &dyn BlockResolvent,
    forward: &dyn BlockMap,
    mu: f64,
    theta: Option<f64>,
    stop: StopRule,
) -> Result<RunOutcome> {
    let theta = theta.unwrap_or_else(|| default_theta(mu));
    check_theta(theta, mu)?;
    stop.check()?;
    validate_schedule(s, stop.max_iters).into_result()?;
    if plan.num_blocks() != x0.num_blocks() {
        return Err(Error::Plan(format!(
            "plan covers {} blocks but the state has {}",
            plan.num_blocks(),
            x0.num_blocks()
        )));
    }
    let v = ForwardMap { forward, theta };
    let t = ResolventMap { resolvent, theta };
    let full = crate::block::ComposedMap { v: &v, t: &t };
    let mut state = RunState::new(x0, x1, plan.seed())?;
    let mut sampler = plan.sampler();
    let mut trace = Vec::new();
    let mut evals = 0u64;
    for steps in 1..=stop.max_iters {
        let info = fb_step(&mut state, s, &mut sampler, resolvent, forward, mu, theta)?;
        evals += info.block_evals as u64;
        if stop.is_check_point(steps) {
            let residual_w = full_residual(&full, &info.w);
            trace.push(FixedPointRow {
                iteration: steps,
                residual_w,
                residual_x: full_residual(&full, &state.x_curr),
                step_norm: *state.step_norm_history.last().unwrap(),
                alpha: info.alpha,
                lambda: info.lambda,
                active_blocks: info.mask.active_count(),
                mask_bits: info.mask.to_u64().unwrap_or(0),
                block_evals: evals,
            });
            if residual_w <= stop.tol {
                return Ok(RunOutcome {
                    state,
                    converged: true,
                    trace,
                });
            }
        }
    }
    Ok(RunOutcome {
        state,
        converged: false,
        trace,
    })
}
