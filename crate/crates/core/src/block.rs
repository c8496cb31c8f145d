//! Random block activation and block-coordinate fixed-point iterations.
//!
//! Each step extrapolates every block, draws an activation mask `ε_n` from a fixed plan on
//! `{0,1}^m \ {0}`, and relaxes only the active blocks:
//!
//! ```text
//! x_{i,n+1} = w_{i,n} + ε_{i,n} λ_n (T_i(w_n) − w_{i,n})
//! ```
//!
//! Inactive blocks keep `w_{i,n}` and their operator components are never evaluated.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hilbert::{BlockLayout, BlockVector};
use crate::km::{
    ensure_finite, full_residual, validate_averaged_schedule, validate_schedule, FixedPointRow,
    InertialSchedule, RunOutcome, RunState, StopRule,
};
use crate::operators::{compose_averaged, AveragedOperator, BlockMap};

/// Largest block count an explicit probability table may cover.
pub const MAX_TABLE_BLOCKS: usize = 64;

/// One draw `ε_n ∈ {0,1}^m \ {0}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationMask {
    bits: Vec<bool>,
}

impl ActivationMask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::invalid("activation mask must have at least one active block"));
        }
        Ok(Self { bits })
    }

    pub fn full(m: usize) -> Self {
        Self { bits: vec![true; m] }
    }

    /// Bit `i` of `bits` is block `i`.
    pub fn from_u64(m: usize, bits: u64) -> Result<Self> {
        if m > 64 {
            return Err(Error::invalid("integer bitsets cover at most 64 blocks"));
        }
        Self::new((0..m).map(|i| bits >> i & 1 == 1).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_u64(&self) -> Option<u64> {
        if self.bits.len() > 64 {
            return None;
        }
        Some(
            self.bits
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &b)| if b { acc | 1 << i } else { acc }),
        )
    }
}

impl fmt::Display for ActivationMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            write!(f, "{}", if b { '1' } else { '0' })?;
        }
        Ok(())
    }
}

/// Dependent bits computed from sampled bits: follower `f` is active whenever one of the
/// leaders in its support is. In minimal mode that is the only way a follower activates
/// and draws with no active leader are rejected; otherwise the follower's own base bit is
/// OR-ed in.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub leaders: Vec<usize>,
    pub followers: Vec<(usize, Vec<usize>)>,
    pub minimal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanMode {
    /// Every block on every iteration.
    Full { m: usize },
    /// Independent bits with raw probabilities `q_i`, conditioned on a nonzero draw.
    IndependentBernoulli { q: Vec<f64> },
    /// Exactly one block, uniformly.
    UniformSingle { m: usize },
    /// Explicit distribution over masks given as integer bitsets.
    ExplicitTable { m: usize, entries: Vec<(u64, f64)> },
    Coupled { base: Box<PlanMode>, coupling: Coupling },
}

/// A distribution on activation masks together with the seed of its stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    mode: PlanMode,
    seed: u64,
}

fn plan_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Plan(msg.into()))
}

impl PlanMode {
    fn num_blocks(&self) -> usize {
        match self {
            PlanMode::Full { m } | PlanMode::UniformSingle { m } | PlanMode::ExplicitTable { m, .. } => *m,
            PlanMode::IndependentBernoulli { q } => q.len(),
            PlanMode::Coupled { base, .. } => base.num_blocks(),
        }
    }

    fn check(&self) -> Result<()> {
        let m = self.num_blocks();
        if m == 0 {
            return plan_err("a sampling plan needs at least one block");
        }
        match self {
            PlanMode::Full { .. } | PlanMode::UniformSingle { .. } => Ok(()),
            PlanMode::IndependentBernoulli { q } => {
                match q.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v <= 1.0)) {
                    Some((i, v)) => plan_err(format!(
                        "activation probability q_{i} = {v} is outside (0, 1]"
                    )),
                    None => Ok(()),
                }
            }
            PlanMode::ExplicitTable { m, entries } => {
                if *m > MAX_TABLE_BLOCKS {
                    return plan_err(format!(
                        "explicit tables cover at most {MAX_TABLE_BLOCKS} blocks, got {m}"
                    ));
                }
                let mut total = 0.0;
                for &(bits, p) in entries {
                    if !(p >= 0.0 && p.is_finite()) {
                        return plan_err(format!("mask {bits:#b} has invalid probability {p}"));
                    }
                    if bits == 0 && p > 0.0 {
                        return plan_err("the all-zero mask has positive probability");
                    }
                    if *m < 64 && bits >> m != 0 {
                        return plan_err(format!("mask {bits:#b} addresses blocks beyond m = {m}"));
                    }
                    total += p;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return plan_err(format!("table probabilities sum to {total}, not 1"));
                }
                self.check_marginals()
            }
            PlanMode::Coupled { base, coupling } => {
                if matches!(**base, PlanMode::Coupled { .. }) {
                    return plan_err("couplings cannot be nested");
                }
                base.check()?;
                let mut seen = vec![false; m];
                let idx = coupling.leaders.iter().chain(coupling.followers.iter().map(|(f, _)| f));
                for &i in idx {
                    if i >= m || seen[i] {
                        return plan_err(format!(
                            "coupling must partition the {m} blocks (index {i} repeated or out of range)"
                        ));
                    }
                    seen[i] = true;
                }
                if seen.iter().any(|s| !s) || coupling.leaders.is_empty() {
                    return plan_err("coupling must partition the blocks with at least one leader");
                }
                for (f, support) in &coupling.followers {
                    if let Some(l) = support.iter().find(|l| !coupling.leaders.contains(l)) {
                        return plan_err(format!("support of block {f} names non-leader {l}"));
                    }
                }
                if coupling.minimal {
                    let reach = match &**base {
                        PlanMode::Full { .. } | PlanMode::IndependentBernoulli { .. } | PlanMode::UniformSingle { .. } => true,
                        PlanMode::ExplicitTable { entries, .. } => entries
                            .iter()
                            .any(|&(bits, p)| p > 0.0 && coupling.leaders.iter().any(|&l| bits >> l & 1 == 1)),
                        PlanMode::Coupled { .. } => false,
                    };
                    if !reach {
                        return plan_err("no mask of the base plan activates a leader block");
                    }
                }
                self.check_marginals()
            }
        }
    }

    fn check_marginals(&self) -> Result<()> {
        match self.marginals().iter().enumerate().find(|(_, &p)| !(p > 0.0)) {
            Some((i, _)) => plan_err(format!("block {i} has zero activation probability")),
            None => Ok(()),
        }
    }

    fn marginals(&self) -> Vec<f64> {
        match self {
            PlanMode::Full { m } => vec![1.0; *m],
            PlanMode::UniformSingle { m } => vec![1.0 / *m as f64; *m],
            PlanMode::IndependentBernoulli { q } => {
                let nonzero = 1.0 - q.iter().map(|v| 1.0 - v).product::<f64>();
                q.iter().map(|v| v / nonzero).collect()
            }
            PlanMode::ExplicitTable { m, entries } => {
                let mut out = vec![0.0; *m];
                for &(bits, p) in entries {
                    for (i, o) in out.iter_mut().enumerate() {
                        if bits >> i & 1 == 1 {
                            *o += p;
                        }
                    }
                }
                out
            }
            PlanMode::Coupled { base, coupling } => coupled_marginals(base, coupling),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<bool> {
        match self {
            PlanMode::Full { m } => vec![true; *m],
            PlanMode::UniformSingle { m } => {
                let k = rng.gen_range(0..*m);
                (0..*m).map(|i| i == k).collect()
            }
            PlanMode::IndependentBernoulli { q } => loop {
                let bits: Vec<bool> = q.iter().map(|&v| rng.gen::<f64>() < v).collect();
                if bits.iter().any(|&b| b) {
                    break bits;
                }
            },
            PlanMode::ExplicitTable { m, entries } => {
                let u = rng.gen::<f64>();
                let mut acc = 0.0;
                let mut pick = None;
                for &(bits, p) in entries {
                    if p > 0.0 {
                        pick = Some(bits);
                        acc += p;
                        if u < acc {
                            break;
                        }
                    }
                }
                let bits = pick.expect("validated table has positive mass");
                (0..*m).map(|i| bits >> i & 1 == 1).collect()
            }
            PlanMode::Coupled { base, coupling } => loop {
                let raw = base.sample(rng);
                if coupling.minimal && !coupling.leaders.iter().any(|&l| raw[l]) {
                    continue;
                }
                break couple(&raw, coupling);
            },
        }
    }
}

impl Coupling {
    /// Derived mask bits for one raw draw.
    pub fn apply(&self, raw: &[bool]) -> Vec<bool> {
        let mut bits = raw.to_vec();
        for (f, support) in &self.followers {
            let driven = support.iter().any(|&l| raw[l]);
            bits[*f] = driven || (!self.minimal && raw[*f]);
        }
        bits
    }
}

fn couple(raw: &[bool], c: &Coupling) -> Vec<bool> {
    c.apply(raw)
}

fn coupled_marginals(base: &PlanMode, c: &Coupling) -> Vec<f64> {
    let m = base.num_blocks();
    let mut out = vec![0.0; m];
    match base {
        PlanMode::Full { .. } => out.iter_mut().for_each(|o| *o = 1.0),
        PlanMode::IndependentBernoulli { q } => {
            let off = |idx: &mut dyn Iterator<Item = &usize>| idx.map(|&i| 1.0 - q[i]).product::<f64>();
            // draws are conditioned on the event that keeps the derived mask nonzero
            let norm = if c.minimal {
                1.0 - off(&mut c.leaders.iter())
            } else {
                1.0 - q.iter().map(|v| 1.0 - v).product::<f64>()
            };
            for &l in &c.leaders {
                out[l] = q[l] / norm;
            }
            for (f, support) in &c.followers {
                let none = off(&mut support.iter());
                let own = if c.minimal { 1.0 } else { 1.0 - q[*f] };
                out[*f] = (1.0 - own * none) / norm;
            }
        }
        PlanMode::UniformSingle { .. } => {
            let denom = if c.minimal { c.leaders.len() } else { m } as f64;
            for &l in &c.leaders {
                out[l] = 1.0 / denom;
            }
            for (f, support) in &c.followers {
                let own = if c.minimal { 0.0 } else { 1.0 };
                out[*f] = (support.len() as f64 + own) / denom;
            }
        }
        PlanMode::ExplicitTable { entries, .. } => {
            let mut mass = 0.0;
            for &(bits, p) in entries {
                let raw: Vec<bool> = (0..m).map(|i| bits >> i & 1 == 1).collect();
                if p == 0.0 || (c.minimal && !c.leaders.iter().any(|&l| raw[l])) {
                    continue;
                }
                mass += p;
                for (o, b) in out.iter_mut().zip(couple(&raw, c)) {
                    if b {
                        *o += p;
                    }
                }
            }
            out.iter_mut().for_each(|o| *o /= mass);
        }
        PlanMode::Coupled { .. } => unreachable!("nested couplings are rejected"),
    }
    out
}

impl SamplingPlan {
    pub fn new(mode: PlanMode, seed: u64) -> Result<Self> {
        mode.check()?;
        Ok(Self { mode, seed })
    }

    pub fn full(m: usize, seed: u64) -> Result<Self> {
        Self::new(PlanMode::Full { m }, seed)
    }

    pub fn bernoulli(q: Vec<f64>, seed: u64) -> Result<Self> {
        Self::new(PlanMode::IndependentBernoulli { q }, seed)
    }

    pub fn uniform_single(m: usize, seed: u64) -> Result<Self> {
        Self::new(PlanMode::UniformSingle { m }, seed)
    }

    pub fn table(m: usize, entries: Vec<(u64, f64)>, seed: u64) -> Result<Self> {
        Self::new(PlanMode::ExplicitTable { m, entries }, seed)
    }

    pub fn mode(&self) -> &PlanMode {
        &self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            mode: self.mode.clone(),
            seed,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.mode.num_blocks()
    }

    pub fn is_full(&self) -> bool {
        match &self.mode {
            PlanMode::Full { .. } => true,
            PlanMode::Coupled { base, .. } => matches!(**base, PlanMode::Full { .. }),
            _ => self.marginals().iter().all(|&p| p == 1.0),
        }
    }

    /// Exact marginals `p_i = P[ε_i = 1]`.
    pub fn marginals(&self) -> Vec<f64> {
        self.mode.marginals()
    }

    /// A fresh mask stream; it depends only on the plan and its seed.
    pub fn sampler(&self) -> MaskSampler {
        MaskSampler {
            mode: self.mode.clone(),
            rng: ChaCha8Rng::seed_from_u64(self.seed),
        }
    }
}

/// Deterministic stream of i.i.d. masks for one run.
#[derive(Debug, Clone)]
pub struct MaskSampler {
    mode: PlanMode,
    rng: ChaCha8Rng,
}

impl MaskSampler {
    pub fn sample(&mut self) -> ActivationMask {
        ActivationMask {
            bits: self.mode.sample(&mut self.rng),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.mode.num_blocks()
    }
}

/// Draws one mask from a stream built on the plan.
pub fn sample_mask(sampler: &mut MaskSampler) -> ActivationMask {
    sampler.sample()
}

/// What a single block step did.
#[derive(Debug, Clone)]
pub struct StepInfo {
    /// The extrapolated point `w_n`.
    pub w: BlockVector,
    pub mask: ActivationMask,
    /// Per-block operator evaluations performed.
    pub block_evals: usize,
    /// Whole-operator evaluations performed (the preprocessor of a composed step).
    pub full_evals: usize,
    pub alpha: f64,
    pub lambda: f64,
}

fn check_mask_len(mask: &ActivationMask, layout: &BlockLayout) -> Result<()> {
    if mask.len() != layout.num_blocks() {
        return plan_err(format!(
            "plan has {} blocks but the state has {}",
            mask.len(),
            layout.num_blocks()
        ));
    }
    Ok(())
}

/// Relaxes the active blocks of `w` towards `T_i(point)`.
pub(crate) fn relax_active(
    state: &mut RunState,
    w: BlockVector,
    point: &BlockVector,
    mask: &ActivationMask,
    lambda: f64,
    t: &dyn BlockMap,
) -> Result<usize> {
    check_mask_len(mask, w.layout())?;
    let n = state.iteration;
    let mut x_next = w.clone();
    let mut buf = Vec::new();
    let mut evals = 0;
    let mut res = 0.0;
    for i in mask.active() {
        buf.clear();
        buf.resize(w.layout().dim(i), 0.0);
        t.eval_block(i, point, &mut buf);
        evals += 1;
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: n,
                what: format!("block {i} of the operator value"),
            });
        }
        for ((xi, &wi), &ti) in x_next.block_mut(i).iter_mut().zip(w.block(i)).zip(&buf) {
            res += (ti - wi) * (ti - wi);
            *xi = wi + lambda * (ti - wi);
        }
    }
    // the recorded residual covers the active blocks only
    state.advance(x_next, res.sqrt());
    Ok(evals)
}

/// One step with an explicit mask; used by the sampled steps and by tests.
pub fn block_step_with_mask(
    state: &mut RunState,
    s: &InertialSchedule,
    mask: ActivationMask,
    t: &dyn BlockMap,
) -> Result<StepInfo> {
    let n = state.iteration;
    let (alpha, lambda) = (s.alpha(n), s.lambda(n));
    let w = state.extrapolate(alpha);
    ensure_finite(&w, n, "extrapolated point w_n")?;
    let block_evals = relax_active(state, w.clone(), &w, &mask, lambda, t)?;
    Ok(StepInfo {
        w,
        mask,
        block_evals,
        full_evals: 0,
        alpha,
        lambda,
    })
}

/// One randomized block-coordinate step for a quasinonexpansive family `T`.
pub fn block_fixed_point_step(
    state: &mut RunState,
    s: &InertialSchedule,
    sampler: &mut MaskSampler,
    t: &dyn BlockMap,
) -> Result<StepInfo> {
    let mask = sampler.sample();
    block_step_with_mask(state, s, mask, t)
}

/// One step run directly on a `β`-averaged `T` with relaxation `λ_n`; equivalent to
/// relaxing the nonexpansive core `V` by `β λ_n`.
pub fn averaged_block_step(
    state: &mut RunState,
    s: &InertialSchedule,
    sampler: &mut MaskSampler,
    t: &AveragedOperator,
) -> Result<StepInfo> {
    block_fixed_point_step(state, s, sampler, t)
}

/// One step of `z_n = V(w_n)` followed by block updates with `T_i(z_n)`.
/// Passing `None` for `V` skips the preprocessor.
pub fn composed_block_step(
    state: &mut RunState,
    s: &InertialSchedule,
    sampler: &mut MaskSampler,
    v: Option<&dyn BlockMap>,
    t: &dyn BlockMap,
) -> Result<StepInfo> {
    let n = state.iteration;
    let (alpha, lambda) = (s.alpha(n), s.lambda(n));
    let mask = sampler.sample();
    let w = state.extrapolate(alpha);
    ensure_finite(&w, n, "extrapolated point w_n")?;
    let (z, full_evals) = match v {
        Some(v) => {
            let z = v.eval(&w);
            ensure_finite(&z, n, "preprocessed point z_n")?;
            (z, 1)
        }
        None => (w.clone(), 0),
    };
    let block_evals = relax_active(state, w.clone(), &z, &mask, lambda, t)?;
    Ok(StepInfo {
        w,
        mask,
        block_evals,
        full_evals,
        alpha,
        lambda,
    })
}

/// `T ∘ V` as a block map.
pub struct ComposedMap<'a> {
    pub v: &'a dyn BlockMap,
    pub t: &'a dyn BlockMap,
}

impl BlockMap for ComposedMap<'_> {
    fn layout(&self) -> &BlockLayout {
        self.t.layout()
    }

    fn eval_block(&self, i: usize, x: &BlockVector, out: &mut [f64]) {
        self.t.eval_block(i, &self.v.eval(x), out)
    }

    fn eval(&self, x: &BlockVector) -> BlockVector {
        self.t.eval(&self.v.eval(x))
    }
}

fn drive(
    x0: BlockVector,
    x1: Option<BlockVector>,
    plan: &SamplingPlan,
    stop: StopRule,
    full_map: &dyn BlockMap,
    mut step: impl FnMut(&mut RunState, &mut MaskSampler) -> Result<StepInfo>,
) -> Result<RunOutcome> {
    stop.check()?;
    if plan.num_blocks() != x0.num_blocks() {
        return plan_err(format!(
            "plan covers {} blocks but the state has {}",
            plan.num_blocks(),
            x0.num_blocks()
        ));
    }
    let mut state = RunState::new(x0, x1, plan.seed())?;
    let mut sampler = plan.sampler();
    let mut trace = Vec::new();
    let mut evals = 0u64;
    for steps in 1..=stop.max_iters {
        let info = step(&mut state, &mut sampler)?;
        evals += info.block_evals as u64;
        if stop.is_check_point(steps) {
            // diagnostic full evaluations, off the iteration path
            let residual_w = full_residual(full_map, &info.w);
            trace.push(FixedPointRow {
                iteration: steps,
                residual_w,
                residual_x: full_residual(full_map, &state.x_curr),
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

/// Runs randomized block-coordinate inertial KM on a quasinonexpansive `T`.
pub fn run_block_fixed_point(
    x0: BlockVector,
    x1: Option<BlockVector>,
    s: &InertialSchedule,
    plan: &SamplingPlan,
    t: &dyn BlockMap,
    stop: StopRule,
) -> Result<RunOutcome> {
    validate_schedule(s, stop.max_iters).into_result()?;
    drive(x0, x1, plan, stop, t, |st, sm| block_fixed_point_step(st, s, sm, t))
}

/// Runs the block iteration on a `β`-averaged `T`, checking the averaged window with `b`.
pub fn run_averaged_block(
    x0: BlockVector,
    x1: Option<BlockVector>,
    s: &InertialSchedule,
    plan: &SamplingPlan,
    t: &AveragedOperator,
    b: f64,
    stop: StopRule,
) -> Result<RunOutcome> {
    let beta = t.beta();
    validate_averaged_schedule(s, &|_| beta, b, stop.max_iters).into_result()?;
    drive(x0, x1, plan, stop, t, |st, sm| averaged_block_step(st, s, sm, t))
}

/// Runs the composed iteration `z_n = V(w_n)`, blocks of `T(z_n)`, whose schedule is checked
/// against the averagedness constant of `T ∘ V`.
pub fn run_composed_block(
    x0: BlockVector,
    x1: Option<BlockVector>,
    s: &InertialSchedule,
    plan: &SamplingPlan,
    v: Option<&AveragedOperator>,
    t: &AveragedOperator,
    b: f64,
    stop: StopRule,
) -> Result<RunOutcome> {
    let eta = match v {
        Some(v) if v.beta() < 1.0 && t.beta() < 1.0 => compose_averaged(t.beta(), v.beta())?,
        Some(_) => 1.0,
        None => t.beta(),
    };
    validate_averaged_schedule(s, &|_| eta, b, stop.max_iters).into_result()?;
    match v {
        Some(v) => {
            let full = ComposedMap { v, t };
            drive(x0, x1, plan, stop, &full, |st, sm| {
                composed_block_step(st, s, sm, Some(v), t)
            })
        }
        None => drive(x0, x1, plan, stop, t, |st, sm| composed_block_step(st, s, sm, None, t)),
    }
}
