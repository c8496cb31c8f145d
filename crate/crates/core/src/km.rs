//! Inertial Krasnosel'skii–Mann iteration and its parameter feasibility rules.
//!
//! One step reads
//!
//! ```text
//! w_n     = x_n + α_n (x_n − x_{n−1})
//! x_{n+1} = w_n + λ_n (T w_n − w_n)
//! ```
//!
//! and is admissible when `α_1 = 0`, `α_n` is nondecreasing and capped by `α < 1`,
//! `δ > (α²(1+α) + ατ)/(1−α²)` and `λ ≤ λ_n ≤ λ̄(α, τ, δ)` with
//! `λ̄ = (δ − α[α(1+α) + αδ + τ]) / (δ[1 + α(1+α) + αδ + τ])`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hilbert::BlockVector;
use crate::operators::BlockMap;

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_RAMP: usize = 50;

/// Lower bound that `δ` must strictly exceed.
pub fn delta_lower(alpha: f64, tau: f64) -> f64 {
    (alpha * alpha * (1.0 + alpha) + alpha * tau) / (1.0 - alpha * alpha)
}

/// Ceiling `λ̄(α, τ, δ)` on the relaxation parameters.
pub fn lambda_upper(alpha: f64, tau: f64, delta: f64) -> f64 {
    let inner = alpha * (1.0 + alpha) + alpha * delta + tau;
    (delta - alpha * inner) / (delta * (1.0 + inner))
}

/// The `δ` maximising `λ̄(α, τ, ·)` on its admissible half-line (golden-section search in
/// `log δ`). For `α = 0` the ceiling does not depend on `δ` and `1` is returned.
pub fn best_delta(alpha: f64, tau: f64) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    let lo = delta_lower(alpha, tau);
    let (mut a, mut b) = ((lo * (1.0 + 1e-9)).ln(), (lo.max(1.0) * 1e4).ln());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let f = |t: f64| lambda_upper(alpha, tau, t.exp());
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    for _ in 0..200 {
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    (0.5 * (a + b)).exp()
}

#[derive(Clone)]
pub enum AlphaRule {
    /// `α_n = min(α, (n−1)α/len)`.
    Ramp { len: usize },
    /// `α_1 = 0`, `α_n = α` afterwards.
    Step,
    Custom(Arc<dyn Fn(usize) -> f64 + Send + Sync>),
}

#[derive(Clone)]
pub enum LambdaRule {
    Constant(f64),
    Custom(Arc<dyn Fn(usize) -> f64 + Send + Sync>),
}

impl fmt::Debug for AlphaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaRule::Ramp { len } => write!(f, "Ramp({len})"),
            AlphaRule::Step => write!(f, "Step"),
            AlphaRule::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl fmt::Debug for LambdaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaRule::Constant(l) => write!(f, "Constant({l})"),
            LambdaRule::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Inertia and relaxation parameters `(α, τ, δ, α_n, λ_n, λ)`.
#[derive(Debug, Clone)]
pub struct InertialSchedule {
    pub alpha_cap: f64,
    pub tau: f64,
    pub delta: f64,
    pub alpha_rule: AlphaRule,
    pub lambda_rule: LambdaRule,
    pub lambda_floor: f64,
}

impl InertialSchedule {
    /// Plain relaxed iteration: `α ≡ 0`, constant `λ`, `τ = 0.1`, `δ = 1`.
    pub fn plain(lambda: f64) -> Self {
        Self::inertial(0.0, lambda, 1.0)
    }

    /// Ramped inertia up to `alpha`, constant `λ`, default `τ`.
    pub fn inertial(alpha: f64, lambda: f64, delta: f64) -> Self {
        Self {
            alpha_cap: alpha,
            tau: DEFAULT_TAU,
            delta,
            alpha_rule: AlphaRule::Ramp { len: DEFAULT_RAMP },
            lambda_rule: LambdaRule::Constant(lambda),
            lambda_floor: lambda,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_alpha_rule(mut self, rule: AlphaRule) -> Self {
        self.alpha_rule = rule;
        self
    }

    pub fn with_lambda_rule(mut self, rule: LambdaRule) -> Self {
        self.lambda_rule = rule;
        self
    }

    pub fn with_lambda_floor(mut self, floor: f64) -> Self {
        self.lambda_floor = floor;
        self
    }

    pub fn alpha(&self, n: usize) -> f64 {
        match &self.alpha_rule {
            AlphaRule::Custom(f) => f(n),
            _ if n <= 1 => 0.0,
            AlphaRule::Ramp { len } => {
                if *len == 0 {
                    self.alpha_cap
                } else {
                    self.alpha_cap.min((n - 1) as f64 * self.alpha_cap / *len as f64)
                }
            }
            AlphaRule::Step => self.alpha_cap,
        }
    }

    pub fn lambda(&self, n: usize) -> f64 {
        match &self.lambda_rule {
            LambdaRule::Constant(l) => *l,
            LambdaRule::Custom(f) => f(n),
        }
    }

    pub fn lambda_ceiling(&self) -> f64 {
        lambda_upper(self.alpha_cap, self.tau, self.delta)
    }
}

/// First violated constraint found by a schedule check.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleViolation {
    AlphaCap { alpha: f64 },
    NonPositive { name: &'static str, value: f64 },
    Delta { delta: f64, required: f64 },
    AlphaStart { value: f64 },
    AlphaDecreasing { n: usize, previous: f64, value: f64 },
    AlphaAboveCap { n: usize, value: f64, cap: f64 },
    LambdaRange { n: usize, value: f64 },
    InfeasibleWindow { floor: f64, ceiling: f64 },
    LambdaBelowFloor { n: usize, value: f64, floor: f64 },
    LambdaAboveCeiling { n: usize, value: f64, ceiling: f64 },
    AveragedWindow { n: usize, value: f64, lower: f64, upper: f64 },
    AveragedInfeasible { n: usize, lower: f64, upper: f64 },
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ScheduleViolation::*;
        match self {
            AlphaCap { alpha } => write!(f, "inertia cap α = {alpha} must lie in [0, 1)"),
            NonPositive { name, value } => write!(f, "{name} = {value} must be positive"),
            Delta { delta, required } => write!(
                f,
                "δ = {delta} violates δ > (α²(1+α) + ατ)/(1−α²) = {required}"
            ),
            AlphaStart { value } => write!(f, "α_1 = {value} but the first inertia must be 0"),
            AlphaDecreasing { n, previous, value } => {
                write!(f, "α_{n} = {value} < α_{} = {previous}: inertia must be nondecreasing", n - 1)
            }
            AlphaAboveCap { n, value, cap } => write!(f, "α_{n} = {value} exceeds the cap α = {cap}"),
            LambdaRange { n, value } => write!(f, "λ_{n} = {value} must lie in (0, 1]"),
            InfeasibleWindow { floor, ceiling } => write!(
                f,
                "infeasible schedule: floor λ = {floor} exceeds the ceiling (δ − α[α(1+α)+αδ+τ])/(δ[1+α(1+α)+αδ+τ]) = {ceiling}"
            ),
            LambdaBelowFloor { n, value, floor } => {
                write!(f, "λ_{n} = {value} is below the floor λ = {floor}")
            }
            LambdaAboveCeiling { n, value, ceiling } => write!(
                f,
                "λ_{n} = {value} exceeds (δ − α[α(1+α)+αδ+τ])/(δ[1+α(1+α)+αδ+τ]) = {ceiling}"
            ),
            AveragedWindow { n, value, lower, upper } => write!(
                f,
                "λ_{n} = {value} lies outside the averaged window [{lower}, {upper}]"
            ),
            AveragedInfeasible { n, lower, upper } => write!(
                f,
                "infeasible averaged window at n = {n}: lower bound {lower} exceeds upper bound {upper}"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleReport {
    pub horizon: usize,
    pub violation: Option<ScheduleViolation>,
}

impl ScheduleReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }

    pub fn into_result(self) -> Result<()> {
        match self.violation {
            None => Ok(()),
            Some(v) => Err(Error::Schedule(v)),
        }
    }
}

fn check_constants(s: &InertialSchedule) -> Option<ScheduleViolation> {
    use ScheduleViolation::*;
    if !(0.0..1.0).contains(&s.alpha_cap) {
        return Some(AlphaCap { alpha: s.alpha_cap });
    }
    for (name, value) in [("τ", s.tau), ("δ", s.delta), ("λ", s.lambda_floor)] {
        if !(value > 0.0 && value.is_finite()) {
            return Some(NonPositive { name, value });
        }
    }
    let required = delta_lower(s.alpha_cap, s.tau);
    if !(s.delta > required) {
        return Some(Delta { delta: s.delta, required });
    }
    None
}

fn check_alpha(s: &InertialSchedule, n: usize, previous: f64) -> Option<ScheduleViolation> {
    use ScheduleViolation::*;
    let a = s.alpha(n);
    if n == 1 && a != 0.0 {
        return Some(AlphaStart { value: a });
    }
    if a < previous || a.is_nan() {
        return Some(AlphaDecreasing { n, previous, value: a });
    }
    if a > s.alpha_cap || a < 0.0 {
        return Some(AlphaAboveCap { n, value: a, cap: s.alpha_cap });
    }
    None
}

/// Checks every constraint at each `n ≤ horizon`; reports the first failure.
pub fn validate_schedule(s: &InertialSchedule, horizon: usize) -> ScheduleReport {
    use ScheduleViolation::*;
    let report = |violation| ScheduleReport { horizon, violation };
    if let Some(v) = check_constants(s) {
        return report(Some(v));
    }
    let ceiling = s.lambda_ceiling();
    if s.lambda_floor > ceiling {
        return report(Some(InfeasibleWindow { floor: s.lambda_floor, ceiling }));
    }
    let mut previous = 0.0;
    for n in 1..=horizon.max(1) {
        if let Some(v) = check_alpha(s, n, previous) {
            return report(Some(v));
        }
        previous = s.alpha(n);
        let l = s.lambda(n);
        if !(l > 0.0 && l <= 1.0) {
            return report(Some(LambdaRange { n, value: l }));
        }
        if l < s.lambda_floor {
            return report(Some(LambdaBelowFloor { n, value: l, floor: s.lambda_floor }));
        }
        if l > ceiling {
            return report(Some(LambdaAboveCeiling { n, value: l, ceiling }));
        }
    }
    report(None)
}

/// Schedule check for a `β_n`-averaged family run directly on `T`.
///
/// `λ_n` must lie in `[b/β_n, (1−b)/β_n]`, and the effective relaxation `ϑ_n = β_n λ_n`
/// of the nonexpansive core must satisfy the plain window `λ ≤ ϑ_n ≤ λ̄`.
pub fn validate_averaged_schedule(
    s: &InertialSchedule,
    beta: &dyn Fn(usize) -> f64,
    b: f64,
    horizon: usize,
) -> ScheduleReport {
    use ScheduleViolation::*;
    let report = |violation| ScheduleReport { horizon, violation };
    if !(b > 0.0 && b < 1.0) {
        return report(Some(NonPositive { name: "b (must lie in (0, 1))", value: b }));
    }
    if let Some(v) = check_constants(s) {
        return report(Some(v));
    }
    let ceiling = s.lambda_ceiling();
    if s.lambda_floor > ceiling {
        return report(Some(InfeasibleWindow { floor: s.lambda_floor, ceiling }));
    }
    let mut previous = 0.0;
    for n in 1..=horizon.max(1) {
        if let Some(v) = check_alpha(s, n, previous) {
            return report(Some(v));
        }
        previous = s.alpha(n);
        let bn = beta(n);
        if !(bn > 0.0 && bn <= 1.0) {
            return report(Some(NonPositive { name: "β_n (must lie in (0, 1])", value: bn }));
        }
        let lower = (b / bn).max(s.lambda_floor / bn);
        let upper = ((1.0 - b) / bn).min(ceiling / bn);
        if lower > upper {
            return report(Some(AveragedInfeasible { n, lower, upper }));
        }
        let l = s.lambda(n);
        if !(l >= lower && l <= upper) {
            return report(Some(AveragedWindow { n, value: l, lower, upper }));
        }
    }
    report(None)
}

/// Iteration state `(x_{n−1}, x_n)` plus diagnostics histories.
#[derive(Debug, Clone)]
pub struct RunState {
    pub x_prev: BlockVector,
    pub x_curr: BlockVector,
    /// Index `n` of `x_curr`; starts at 1.
    pub iteration: usize,
    pub rng_seed: u64,
    /// `‖T w_n − w_n‖` per step.
    pub residual_history: Vec<f64>,
    /// `‖x_{n+1} − x_n‖` per step.
    pub step_norm_history: Vec<f64>,
}

impl RunState {
    pub fn new(x0: BlockVector, x1: Option<BlockVector>, rng_seed: u64) -> Result<Self> {
        let x1 = match x1 {
            Some(x1) => {
                x0.ensure_same_layout(&x1)?;
                x1
            }
            None => x0.clone(),
        };
        Ok(Self {
            x_prev: x0,
            x_curr: x1,
            iteration: 1,
            rng_seed,
            residual_history: Vec::new(),
            step_norm_history: Vec::new(),
        })
    }

    /// `w_n = x_n + α (x_n − x_{n−1})`.
    pub fn extrapolate(&self, alpha: f64) -> BlockVector {
        let mut w = self.x_curr.clone();
        if alpha != 0.0 {
            for (wi, &pi) in w.data_mut().iter_mut().zip(self.x_prev.data()) {
                *wi += alpha * (*wi - pi);
            }
        }
        w
    }

    /// Moves `x_next` in as the new current point and records the step length.
    pub(crate) fn advance(&mut self, x_next: BlockVector, residual: f64) {
        let step = x_next.distance(&self.x_curr).unwrap_or(f64::NAN);
        self.residual_history.push(residual);
        self.step_norm_history.push(step);
        self.x_prev = std::mem::replace(&mut self.x_curr, x_next);
        self.iteration += 1;
    }

    /// Partial sums of `‖x_{n+1} − x_n‖²`.
    pub fn squared_step_partial_sums(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.step_norm_history
            .iter()
            .map(|s| {
                acc += s * s;
                acc
            })
            .collect()
    }
}

pub(crate) fn ensure_finite(v: &BlockVector, iteration: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            iteration,
            what: what.to_string(),
        })
    }
}

/// One inertial KM step with the full operator.
pub fn km_step(state: &mut RunState, s: &InertialSchedule, t: &dyn BlockMap) -> Result<()> {
    let n = state.iteration;
    let (alpha, lambda) = (s.alpha(n), s.lambda(n));
    let w = state.extrapolate(alpha);
    let tw = t.eval(&w);
    ensure_finite(&tw, n, "operator value T(w_n)")?;
    let mut x_next = w.clone();
    for ((xi, &wi), &ti) in x_next.data_mut().iter_mut().zip(w.data()).zip(tw.data()) {
        *xi = wi + lambda * (ti - wi);
    }
    let res = tw.distance(&w)?;
    state.advance(x_next, res);
    Ok(())
}

/// Stopping rule: stop once the full residual `‖T w_n − w_n‖ ≤ tol`, checked every
/// `check_every` steps, or after `max_iters` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub tol: f64,
    pub max_iters: usize,
    pub check_every: usize,
}

impl StopRule {
    pub fn new(tol: f64, max_iters: usize) -> Self {
        Self {
            tol,
            max_iters,
            check_every: 1,
        }
    }

    pub fn every(mut self, check_every: usize) -> Self {
        self.check_every = check_every;
        self
    }

    pub(crate) fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 || self.check_every == 0 {
            return Err(Error::Config(format!(
                "stopping rule needs tol > 0, max_iters ≥ 1 and check_every ≥ 1 (got {}, {}, {})",
                self.tol, self.max_iters, self.check_every
            )));
        }
        Ok(())
    }

    pub(crate) fn is_check_point(&self, steps: usize) -> bool {
        steps % self.check_every == 0 || steps == self.max_iters
    }
}

/// One recorded row of a fixed-point run.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointRow {
    /// Steps completed.
    pub iteration: usize,
    /// `‖T w_n − w_n‖` at the `w_n` of the last step.
    pub residual_w: f64,
    /// `‖T x_{n+1} − x_{n+1}‖` at the new iterate.
    pub residual_x: f64,
    pub step_norm: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub active_blocks: usize,
    pub mask_bits: u64,
    /// Cumulative per-block operator evaluations on the iteration path.
    pub block_evals: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: RunState,
    pub converged: bool,
    pub trace: Vec<FixedPointRow>,
}

pub(crate) fn full_residual(t: &dyn BlockMap, x: &BlockVector) -> f64 {
    let tx = t.eval(x);
    tx.distance(x).unwrap_or(f64::NAN)
}

pub(crate) fn full_mask_bits(m: usize) -> u64 {
    if m >= 64 {
        u64::MAX
    } else {
        (1u64 << m) - 1
    }
}

/// Runs inertial KM from `(x0, x1)` until the stopping rule fires.
pub fn run_km(
    x0: BlockVector,
    x1: Option<BlockVector>,
    s: &InertialSchedule,
    t: &dyn BlockMap,
    stop: StopRule,
) -> Result<RunOutcome> {
    stop.check()?;
    validate_schedule(s, stop.max_iters).into_result()?;
    let m = x0.num_blocks();
    let mut state = RunState::new(x0, x1, 0)?;
    let mut trace = Vec::new();
    let mut evals = 0u64;
    for steps in 1..=stop.max_iters {
        let n = state.iteration;
        km_step(&mut state, s, t)?;
        evals += m as u64;
        if stop.is_check_point(steps) {
            let residual_w = *state.residual_history.last().unwrap();
            trace.push(FixedPointRow {
                iteration: steps,
                residual_w,
                residual_x: full_residual(t, &state.x_curr),
                step_norm: *state.step_norm_history.last().unwrap(),
                alpha: s.alpha(n),
                lambda: s.lambda(n),
                active_blocks: m,
                mask_bits: full_mask_bits(m),
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
