//! Run configuration and orchestration of every solver behind one entry point.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ibpd::block::{run_block_fixed_point, ComposedMap, SamplingPlan};
use ibpd::hilbert::{operator_norm_estimate, POWER_ITERATION_CAP, POWER_ITERATION_TOL};
use ibpd::km::{best_delta, lambda_upper, run_km, InertialSchedule, StopRule, DEFAULT_TAU};
use ibpd::operators::{FullMap, ProxFunction, Resolvent};
use ibpd::pd::{
    check_condition, enforce_coupling, plan_respects_coupling, run_fb, solve_composite, solve_inclusion,
    ConditionReport, ForwardMap, PdAlgorithm, PdConfig, PdOutcome, PdStart, ResolventMap, SeparableResolvent,
};
use ibpd::{BlockVector, DiagonalPreconditioner, Error};

use crate::error::{BenchError, Result};
use crate::spec::{LoadedProblem, Problem};
use crate::trace::{fixed_point_trace, primal_dual_trace, TraceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Km,
    BlockKm,
    Fb,
    PdInclusion,
    PdOpt,
    PdSmooth,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Km,
        Algorithm::BlockKm,
        Algorithm::Fb,
        Algorithm::PdInclusion,
        Algorithm::PdOpt,
        Algorithm::PdSmooth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Km => "km",
            Algorithm::BlockKm => "block-km",
            Algorithm::Fb => "fb",
            Algorithm::PdInclusion => "pd-inclusion",
            Algorithm::PdOpt => "pd-opt",
            Algorithm::PdSmooth => "pd-smooth",
        }
    }

    fn primal_dual(self) -> Option<PdAlgorithm> {
        match self {
            Algorithm::PdInclusion => Some(PdAlgorithm::Inclusion),
            Algorithm::PdOpt => Some(PdAlgorithm::Optimization),
            Algorithm::PdSmooth => Some(PdAlgorithm::Smooth),
            _ => None,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm {s:?}; expected one of km, block-km, fb, pd-inclusion, pd-opt, pd-smooth"))
    }
}

/// Activation plan as written on the command line: `full`, `single`,
/// `bernoulli:<q>` or `bernoulli:<q1>,<q2>,…`, `table:<bits>=<prob>,…`.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanSpec {
    Full,
    Single,
    Bernoulli(Vec<f64>),
    Table(Vec<(u64, f64)>),
}

impl FromStr for PlanSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (mode, params) = s.split_once(':').unwrap_or((s, ""));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("bad number {v:?} in plan: {e}"));
        match mode {
            "full" if params.is_empty() => Ok(PlanSpec::Full),
            "single" if params.is_empty() => Ok(PlanSpec::Single),
            "bernoulli" => {
                let q = params.split(',').map(num).collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(PlanSpec::Bernoulli(q))
            }
            "table" => {
                let entries = params
                    .split(',')
                    .map(|e| {
                        let (b, p) = e.split_once('=').ok_or_else(|| format!("table entry {e:?} is not bits=prob"))?;
                        let bits = b.trim().parse::<u64>().map_err(|err| format!("bad mask {b:?}: {err}"))?;
                        Ok((bits, num(p)?))
                    })
                    .collect::<std::result::Result<Vec<_>, String>>()?;
                Ok(PlanSpec::Table(entries))
            }
            _ => Err(format!("unknown plan {s:?}; expected full, single, bernoulli:<q> or table:<bits>=<p>,…")),
        }
    }
}

impl PlanSpec {
    pub fn build(&self, m: usize, seed: u64) -> std::result::Result<SamplingPlan, Error> {
        match self {
            PlanSpec::Full => SamplingPlan::full(m, seed),
            PlanSpec::Single => SamplingPlan::uniform_single(m, seed),
            PlanSpec::Bernoulli(q) if q.len() == 1 => SamplingPlan::bernoulli(vec![q[0]; m], seed),
            PlanSpec::Bernoulli(q) => SamplingPlan::bernoulli(q.clone(), seed),
            PlanSpec::Table(e) => SamplingPlan::table(m, e.clone(), seed),
        }
    }
}

/// Everything a run needs besides the problem.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub alpha: f64,
    pub tau: f64,
    /// Defaults to the `δ` that maximizes the relaxation ceiling.
    pub delta: Option<f64>,
    /// Defaults to 0.9 without inertia and to 90% of the ceiling with it.
    pub lambda: Option<f64>,
    pub plan: PlanSpec,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub check_every: usize,
    pub override_condition: bool,
    /// Couple primal-dual plans minimally rather than OR-ing in the sampled bits.
    pub minimal_coupling: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::PdOpt,
            alpha: 0.0,
            tau: DEFAULT_TAU,
            delta: None,
            lambda: None,
            plan: PlanSpec::Full,
            seed: 0,
            max_iters: 100_000,
            tol: 1e-8,
            check_every: 10,
            override_condition: false,
            minimal_coupling: false,
        }
    }
}

impl RunConfig {
    pub fn schedule(&self) -> InertialSchedule {
        if self.alpha == 0.0 {
            return InertialSchedule::plain(self.lambda.unwrap_or(0.9)).with_tau(self.tau);
        }
        let delta = self.delta.unwrap_or_else(|| best_delta(self.alpha, self.tau));
        let lambda = self
            .lambda
            .unwrap_or_else(|| 0.9 * lambda_upper(self.alpha, self.tau, delta));
        InertialSchedule::inertial(self.alpha, lambda, delta).with_tau(self.tau)
    }

    pub fn stop(&self) -> StopRule {
        StopRule::new(self.tol, self.max_iters).every(self.check_every)
    }

    fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 || self.check_every == 0 {
            return Err(BenchError::core(
                "run",
                Error::Config(format!(
                    "need tol > 0, max_iters ≥ 1 and check_every ≥ 1 (got {}, {}, {})",
                    self.tol, self.max_iters, self.check_every
                )),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub algorithm: Algorithm,
    pub converged: bool,
    /// Steps taken.
    pub iterations: usize,
    /// Fixed-point residual for `km`, `block-km`, `fb`; primal residual otherwise.
    pub primal_residual: f64,
    /// `NaN` for the fixed-point algorithms.
    pub dual_residual: f64,
    pub objective: Option<f64>,
    pub wall_ms: f64,
    pub evals_prox: u64,
    pub evals_grad: u64,
    pub evals_linop: u64,
    pub block_evals: u64,
    pub trace_kind: TraceKind,
    pub trace: String,
    pub x: BlockVector,
    pub y: Option<BlockVector>,
    /// Partial sums of the squared step lengths.
    pub step_partial_sums: Vec<f64>,
    pub condition: Option<ConditionReport>,
}

impl RunReport {
    pub fn summary_line(&self) -> String {
        format!(
            "algo={} converged={} iterations={} primal_residual={:e} dual_residual={:e} wall_ms={:.1} evals_prox={} evals_grad={} evals_linop={} block_evals={}",
            self.algorithm,
            self.converged,
            self.iterations,
            self.primal_residual,
            self.dual_residual,
            self.wall_ms,
            self.evals_prox,
            self.evals_grad,
            self.evals_linop,
            self.block_evals,
        )
    }
}

/// The forward-backward operator pair of a composite problem whose `g_k` are weighted
/// squares: `A = ∂f` and `B = ∇h + L*∇g(L·)`, with `μ` the inverse Lipschitz bound of `B`.
struct ForwardBackward {
    resolvent: SeparableResolvent,
    forward: FullMap<Box<dyn Fn(&BlockVector) -> BlockVector + Send + Sync>>,
    mu: f64,
}

fn forward_backward(problem: &Problem) -> Result<ForwardBackward> {
    let unsupported = |m: &str| BenchError::core("run", Error::Unsupported(m.into()));
    let prob = problem
        .composite()
        .ok_or_else(|| unsupported("fixed-point algorithms need a composite problem"))?;
    if prob.lstar().iter().any(|l| !l.is_zero()) {
        return Err(unsupported("fixed-point algorithms need every l_k = ι_{0}"));
    }
    let mut weights = Vec::new();
    for g in prob.g() {
        match g {
            ProxFunction::Zero => weights.push((0.0, None)),
            ProxFunction::SquaredL2 { weight, center } => weights.push((*weight, center.clone())),
            _ => return Err(unsupported("fixed-point algorithms need every g_k smooth (zero or a weighted square)")),
        }
    }
    let l = prob.linear().clone();
    let cols = l.col_layout().clone();
    let ident = DiagonalPreconditioner::identity(&cols, l.row_layout());
    let norm = operator_norm_estimate(&l, &ident, POWER_ITERATION_CAP, POWER_ITERATION_TOL)
        .map_err(|e| BenchError::core("run", e))?;
    let wmax = weights.iter().map(|w| w.0).fold(0.0, f64::max);
    let hmax = prob.h().iter().map(|h| h.lipschitz()).fold(0.0, f64::max);
    let lip = hmax + wmax * norm * norm;
    let mu = if lip > 0.0 { 1.0 / lip } else { f64::INFINITY };
    let h = prob.h().to_vec();
    let layout = cols.clone();
    let eval: Box<dyn Fn(&BlockVector) -> BlockVector + Send + Sync> = Box::new(move |x: &BlockVector| {
        let mut lx = l.apply(x).expect("layout checked");
        for (k, (w, c)) in weights.iter().enumerate() {
            for (i, v) in lx.block_mut(k).iter_mut().enumerate() {
                *v = w * (*v - c.as_ref().map_or(0.0, |c| c[i]));
            }
        }
        let mut out = l.apply_adjoint(&lx).expect("layout checked");
        for (j, hj) in h.iter().enumerate() {
            hj.gradient_add(x.block(j), out.block_mut(j));
        }
        out
    });
    let resolvent = SeparableResolvent::new(
        BlockVector::filled(&layout, 1.0),
        prob.f().iter().cloned().map(Resolvent::Subdifferential).collect(),
    )
    .map_err(|e| BenchError::core("run", e))?;
    Ok(ForwardBackward {
        resolvent,
        forward: FullMap::new(&layout, eval),
        mu,
    })
}

/// Runs the configured algorithm on a loaded problem.
pub fn run(cfg: &RunConfig, loaded: &LoadedProblem) -> Result<RunReport> {
    cfg.check()?;
    let started = Instant::now();
    let schedule = cfg.schedule();
    let stop = cfg.stop();
    let inc = loaded.problem.inclusion();
    if let Some(algo) = cfg.algorithm.primal_dual() {
        let (p, q) = (inc.p(), inc.q());
        let mut plan = cfg.plan.build(p + q, cfg.seed).map_err(|e| BenchError::core("block-engine", e))?;
        if !plan_respects_coupling(&plan, inc.linear(), algo.coupling()) {
            plan = enforce_coupling(&plan, inc.linear(), algo.coupling(), cfg.minimal_coupling)
                .map_err(|e| BenchError::core("pd-solver", e))?;
        }
        let pd_cfg = PdConfig {
            schedule,
            plan,
            stop,
            override_condition: cfg.override_condition,
        };
        let start = PdStart::zeros(inc);
        let outcome: PdOutcome = match (algo, &loaded.problem) {
            (PdAlgorithm::Inclusion, _) => solve_inclusion(inc, &loaded.prec, start, &pd_cfg),
            (_, Problem::Composite(c)) => solve_composite(c, algo, &loaded.prec, start, &pd_cfg),
            (_, Problem::Inclusion(_)) => Err(Error::Config(format!(
                "{} needs a composite problem; use pd-inclusion",
                cfg.algorithm
            ))),
        }
        .map_err(|e| BenchError::core("pd-solver", e))?;
        let st = &outcome.state;
        return Ok(RunReport {
            algorithm: cfg.algorithm,
            converged: outcome.converged,
            iterations: st.iteration - 1,
            primal_residual: outcome.final_residuals.primal,
            dual_residual: outcome.final_residuals.dual,
            objective: outcome.final_residuals.objective,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            evals_prox: st.evals.prox,
            evals_grad: st.evals.grad,
            evals_linop: st.evals.linop,
            block_evals: st.evals.prox,
            trace_kind: TraceKind::PrimalDual,
            trace: primal_dual_trace(&outcome.trace),
            x: st.x_curr.clone(),
            y: Some(st.y_curr.clone()),
            step_partial_sums: st.squared_step_partial_sums(),
            condition: Some(outcome.condition),
        });
    }

    let fbo = forward_backward(&loaded.problem)?;
    let theta = ibpd::pd::default_theta(fbo.mu);
    let x0 = BlockVector::zeros(inc.primal_layout());
    let p = inc.p();
    let plan = cfg.plan.build(p, cfg.seed).map_err(|e| BenchError::core("block-engine", e))?;
    let v = ForwardMap {
        forward: &fbo.forward,
        theta,
    };
    let t = ResolventMap {
        resolvent: &fbo.resolvent,
        theta,
    };
    let fb_map = ComposedMap { v: &v, t: &t };
    let outcome = match cfg.algorithm {
        Algorithm::Km => {
            if !plan.is_full() {
                return Err(BenchError::core(
                    "km-engine",
                    Error::Config("km updates every block; use block-km for a sampling plan".into()),
                ));
            }
            run_km(x0, None, &schedule, &fb_map, stop).map_err(|e| BenchError::core("km-engine", e))?
        }
        Algorithm::BlockKm => run_block_fixed_point(x0, None, &schedule, &plan, &fb_map, stop)
            .map_err(|e| BenchError::core("block-engine", e))?,
        _ => run_fb(x0, None, &schedule, &plan, &fbo.resolvent, &fbo.forward, fbo.mu, Some(theta), stop)
            .map_err(|e| BenchError::core("pd-solver", e))?,
    };
    let last = outcome.trace.last();
    let condition = check_condition(inc, &loaded.prec).ok();
    let x = outcome.state.x_curr.clone();
    let objective = loaded.problem.composite().and_then(|c| c.objective(&x));
    Ok(RunReport {
        algorithm: cfg.algorithm,
        converged: outcome.converged,
        iterations: outcome.state.iteration - 1,
        primal_residual: last.map_or(f64::NAN, |r| r.residual_w),
        dual_residual: f64::NAN,
        objective,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        evals_prox: last.map_or(0, |r| r.block_evals),
        evals_grad: 0,
        evals_linop: 0,
        block_evals: last.map_or(0, |r| r.block_evals),
        trace_kind: TraceKind::FixedPoint,
        trace: fixed_point_trace(&outcome.trace),
        x,
        y: None,
        step_partial_sums: outcome.state.squared_step_partial_sums(),
        condition,
    })
}

/// Checks the schedule and, for the primal-dual algorithms, the step-size condition,
/// without running anything.
pub fn validate(cfg: &RunConfig, loaded: &LoadedProblem) -> Result<Vec<String>> {
    cfg.check()?;
    let mut lines = Vec::new();
    let s = cfg.schedule();
    ibpd::km::validate_schedule(&s, cfg.max_iters)
        .into_result()
        .map_err(|e| BenchError::core("km-engine", e))?;
    lines.push(format!(
        "schedule ok: α = {}, τ = {}, δ = {}, λ = {} ≤ ceiling {}",
        s.alpha_cap,
        s.tau,
        s.delta,
        s.lambda(1),
        s.lambda_ceiling()
    ));
    let inc = loaded.problem.inclusion();
    let report = check_condition(inc, &loaded.prec).map_err(|e| BenchError::core("pd-solver", e))?;
    lines.push(format!("condition: {report}"));
    if cfg.algorithm.primal_dual().is_some() && !report.passed() && !cfg.override_condition {
        return Err(BenchError::core("pd-solver", Error::Condition(Box::new(report))));
    }
    Ok(lines)
}
