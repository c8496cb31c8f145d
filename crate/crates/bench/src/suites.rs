//! Seeded benchmark suites.
//!
//! Each suite generates a problem from a seed, solves it once with an oracle, and runs the
//! grid {inertia off, on} × {full activation, Bernoulli(1/2) sampling}. A cell records the
//! median iterations and evaluation counts over the seeds, a suite-specific quality check
//! against the oracle, the plateau of the squared-step partial sums, and whether the
//! library step reproduces the dense deterministic loop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ibpd::block::ActivationMask;
use ibpd::hilbert::BlockLayout;
use ibpd::km::InertialSchedule;
use ibpd::pd::{pd_inclusion_step, pd_optimization_step, pd_smooth_step, PDState};
use ibpd::{BlockVector, LinearBlockOperator};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{BenchError, Result};
use crate::oracle::{oracle_solve, OracleSolution};
use crate::reference::DenseComposite;
use crate::run::{run, Algorithm, PlanSpec, RunConfig, RunReport};
use crate::spec::{
    build_problem, linear_entries, CompositeDual, CompositePrimal, DualResolventSpec, InclusionDual,
    InclusionPrimal, LoadedProblem, ProblemSpec, ProxSpec, ResolventSpec, SlotsSpec, SmoothSpec,
    SPEC_SCHEMA_VERSION,
};

/// Steps compared in the deterministic-reduction check.
pub const REDUCTION_STEPS: usize = 200;
pub const REDUCTION_TOL: f64 = 1e-12;
/// Window and threshold of the squared-step plateau check.
pub const PLATEAU_WINDOW: usize = 100;
pub const PLATEAU_TOL: f64 = 1e-10;

const RIDGE_WEIGHT: f64 = 1.0;
const TV_WEIGHT: f64 = 0.5;
const INERTIA: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Ridge,
    Lasso,
    Tv1d,
    ProjectionFeasibility,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Ridge, Suite::Lasso, Suite::Tv1d, Suite::ProjectionFeasibility];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ridge => "ridge",
            Suite::Lasso => "lasso",
            Suite::Tv1d => "tv1d",
            Suite::ProjectionFeasibility => "projection-feasibility",
        }
    }

    pub fn algorithm(self) -> Algorithm {
        match self {
            Suite::Ridge => Algorithm::PdSmooth,
            Suite::Lasso | Suite::Tv1d => Algorithm::PdOpt,
            Suite::ProjectionFeasibility => Algorithm::PdInclusion,
        }
    }

    /// Stopping tolerance on the fixed-point residuals.
    pub fn tol(self) -> f64 {
        match self {
            Suite::Ridge | Suite::Lasso => 1e-11,
            Suite::Tv1d => 1e-10,
            Suite::ProjectionFeasibility => 1e-9,
        }
    }

    /// Threshold of the quality measure.
    pub fn quality_tol(self) -> f64 {
        match self {
            Suite::Ridge => 1e-8,
            Suite::Lasso | Suite::Tv1d | Suite::ProjectionFeasibility => 1e-6,
        }
    }

    pub fn quality_name(self) -> &'static str {
        match self {
            Suite::Ridge => "dist_to_closed_form",
            Suite::Lasso => "objective_gap",
            Suite::Tv1d => "dist_to_reference",
            Suite::ProjectionFeasibility => "max_violation",
        }
    }

    pub fn spec(self, seed: u64) -> ProblemSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Suite::Ridge => least_squares_spec(&mut rng, "ridge", ProxSpec::Zero, RIDGE_WEIGHT),
            Suite::Lasso => lasso_spec(&mut rng),
            Suite::Tv1d => tv1d_spec(&mut rng),
            Suite::ProjectionFeasibility => feasibility_spec(&mut rng),
        }
    }

    pub fn problem(self, seed: u64) -> Result<LoadedProblem> {
        build_problem(&self.spec(seed), Path::new("."))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite {s:?}; expected ridge, lasso, tv1d or projection-feasibility"))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn cut(m: &DMatrix<f64>, dual: &[usize], primal: &[usize]) -> LinearBlockOperator {
    let rows = BlockLayout::new(dual.to_vec()).expect("suite layout");
    let cols = BlockLayout::new(primal.to_vec()).expect("suite layout");
    LinearBlockOperator::from_dense(rows, cols, m).expect("suite operator has no empty row or column")
}

fn composite_spec(
    name: &str,
    l: &LinearBlockOperator,
    primal: Vec<CompositePrimal>,
    dual: Vec<CompositeDual>,
) -> ProblemSpec {
    ProblemSpec {
        schema_version: SPEC_SCHEMA_VERSION,
        name: name.into(),
        primal_blocks: l.col_layout().block_dims().to_vec(),
        dual_blocks: l.row_layout().block_dims().to_vec(),
        linear: linear_entries(l),
        problem: SlotsSpec::Composite { primal, dual },
        preconditioner: None,
    }
}

const PRIMAL: [usize; 2] = [5, 5];
const DUAL: [usize; 2] = [10, 10];

/// `f(x) + (w/2)‖x‖² + ½‖Kx − b‖²` with `K` 20×10, posed as `g_k = ½‖· − b_k‖²`, `L = K`.
fn least_squares_spec(rng: &mut ChaCha8Rng, name: &str, f: ProxSpec, ridge: f64) -> ProblemSpec {
    let k = gaussian(rng, 20, 10);
    let b: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
    ls_spec_from(name, &k, &b, f, ridge)
}

fn ls_spec_from(name: &str, k: &DMatrix<f64>, b: &[f64], f: ProxSpec, ridge: f64) -> ProblemSpec {
    let l = cut(k, &DUAL, &PRIMAL);
    let h = if ridge > 0.0 {
        SmoothSpec::SquaredL2 {
            weight: ridge,
            center: None,
        }
    } else {
        SmoothSpec::Zero
    };
    let primal = PRIMAL
        .iter()
        .map(|_| CompositePrimal {
            f: f.clone(),
            h: h.clone(),
        })
        .collect();
    let dual = (0..DUAL.len())
        .map(|i| CompositeDual {
            g: ProxSpec::SquaredL2 {
                weight: 1.0,
                center: Some(b[10 * i..10 * (i + 1)].to_vec()),
            },
            lstar: SmoothSpec::Zero,
        })
        .collect();
    composite_spec(name, &l, primal, dual)
}

/// `μ‖x‖₁ + ½‖Kx − b‖²` with `μ = 0.1‖Kᵀb‖∞`.
fn lasso_spec(rng: &mut ChaCha8Rng) -> ProblemSpec {
    let k = gaussian(rng, 20, 10);
    let b: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
    let mu = 0.1 * (k.transpose() * DVector::from_column_slice(&b)).amax();
    ls_spec_from("lasso", &k, &b, ProxSpec::L1 { weight: mu }, 0.0)
}

/// `½‖x − s‖² + μ‖Dx‖₁` on a noisy piecewise-constant signal of length 50. The two primal
/// halves are coupled only through the middle difference, which gets its own dual block.
fn tv1d_spec(rng: &mut ChaCha8Rng) -> ProblemSpec {
    let n = 50;
    let levels: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let signal: Vec<f64> = (0..n)
        .map(|i| levels[i / 10] + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let d = DMatrix::from_fn(n - 1, n, |r, c| {
        if c == r {
            -1.0
        } else if c == r + 1 {
            1.0
        } else {
            0.0
        }
    });
    let l = cut(&d, &[24, 1, 24], &[25, 25]);
    let primal = (0..2)
        .map(|j| CompositePrimal {
            f: ProxSpec::SquaredL2 {
                weight: 1.0,
                center: Some(signal[25 * j..25 * (j + 1)].to_vec()),
            },
            h: SmoothSpec::Zero,
        })
        .collect();
    let dual = (0..3)
        .map(|_| CompositeDual {
            g: ProxSpec::L1 { weight: TV_WEIGHT },
            lstar: SmoothSpec::Zero,
        })
        .collect();
    composite_spec("tv1d", &l, primal, dual)
}

/// Find `x ∈ [1, 2]¹⁰` with `Lx ∈ [−r, r]²⁰`, `r = 0.1`. The rows of `L` are nearly
/// orthogonal to a hidden point `x̄` of the box with `|Lx̄| ≤ r/2`, so the feasible set is
/// a thin tube around `x̄` and the origin is infeasible.
fn feasibility_spec(rng: &mut ChaCha8Rng) -> ProblemSpec {
    let r = 0.1;
    let g = gaussian(rng, 20, 10);
    let hidden = DVector::from_fn(10, |_, _| rng.gen_range(1.0..2.0));
    let offset = DVector::from_fn(20, |_, _| rng.gen_range(-0.5 * r..0.5 * r));
    let unit = &hidden / hidden.norm_squared();
    let l = &g - (&g * &hidden) * unit.transpose() + &offset * unit.transpose();
    let l = cut(&l, &DUAL, &PRIMAL);
    let primal = PRIMAL
        .iter()
        .map(|_| InclusionPrimal {
            resolvent: ResolventSpec::Subdifferential {
                f: ProxSpec::Box { lower: 1.0, upper: 2.0 },
            },
            smooth: SmoothSpec::Zero,
        })
        .collect();
    let dual = DUAL
        .iter()
        .map(|_| InclusionDual {
            resolvent: DualResolventSpec::Conjugate {
                g: ProxSpec::Box { lower: -r, upper: r },
            },
            smooth: SmoothSpec::Zero,
        })
        .collect();
    ProblemSpec {
        schema_version: SPEC_SCHEMA_VERSION,
        name: "projection-feasibility".into(),
        primal_blocks: PRIMAL.to_vec(),
        dual_blocks: DUAL.to_vec(),
        linear: linear_entries(&l),
        problem: SlotsSpec::Inclusion { primal, dual },
        preconditioner: None,
    }
}

/// The composite problem with the same iteration as an inclusion whose slots are all
/// subdifferentials of proxable functions with zero smooth parts.
pub fn composite_twin(spec: &ProblemSpec) -> Option<ProblemSpec> {
    let SlotsSpec::Inclusion { primal, dual } = &spec.problem else {
        return Some(spec.clone());
    };
    let primal = primal
        .iter()
        .map(|s| match (&s.resolvent, &s.smooth) {
            (ResolventSpec::Subdifferential { f }, h) => Some(CompositePrimal {
                f: f.clone(),
                h: h.clone(),
            }),
            _ => None,
        })
        .collect::<Option<Vec<_>>>()?;
    let dual = dual
        .iter()
        .map(|s| match (&s.resolvent, &s.smooth) {
            (DualResolventSpec::Conjugate { g }, l) => Some(CompositeDual {
                g: g.clone(),
                lstar: l.clone(),
            }),
            _ => None,
        })
        .collect::<Option<Vec<_>>>()?;
    Some(ProblemSpec {
        problem: SlotsSpec::Composite { primal, dual },
        ..spec.clone()
    })
}

fn seeded_point(layout: &BlockLayout, rng: &mut ChaCha8Rng) -> BlockVector {
    let data = (0..layout.total_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    BlockVector::from_vec(layout, data).expect("sized from the layout")
}

/// Largest componentwise gap, over `steps` deterministic full steps from a seeded start,
/// between the library step of `algo` and the dense reference loop.
pub fn deterministic_reduction(loaded: &LoadedProblem, algo: Algorithm, steps: usize, seed: u64) -> Result<f64> {
    let core = |e| BenchError::core("pd-solver", e);
    let twin = composite_twin(&loaded.spec)
        .ok_or_else(|| core(ibpd::Error::Unsupported("no dense reference for this inclusion".into())))?;
    let twin = build_problem(&twin, Path::new("."))?;
    let comp = twin.problem.composite().expect("twin is composite");
    let dense = DenseComposite::from_problem(comp).map_err(core)?;
    let inc = loaded.problem.inclusion();
    let prec = &loaded.prec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = seeded_point(inc.primal_layout(), &mut rng);
    let y0 = seeded_point(inc.dual_layout(), &mut rng);
    let lambda = 0.9;
    let schedule = InertialSchedule::plain(lambda);
    let mask = ActivationMask::full(inc.p() + inc.q());
    let f = DVector::from_column_slice(prec.primal().data());
    let r = DVector::from_column_slice(prec.dual().data());
    let mut x = DVector::from_column_slice(x0.data());
    let mut y = DVector::from_column_slice(y0.data());
    let mut state = PDState::new(x0, y0);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        (x, y) = match algo {
            Algorithm::PdSmooth => {
                pd_smooth_step(&mut state, &schedule, &mask, comp, prec).map_err(core)?;
                dense.smooth_step(&x, &y, &f, &r, lambda)
            }
            Algorithm::PdOpt => {
                pd_optimization_step(&mut state, &schedule, &mask, comp, prec).map_err(core)?;
                dense.primal_dual_step(&x, &y, &f, &r, lambda)
            }
            Algorithm::PdInclusion => {
                pd_inclusion_step(&mut state, &schedule, &mask, inc, prec).map_err(core)?;
                dense.primal_dual_step(&x, &y, &f, &r, lambda)
            }
            _ => return Err(core(ibpd::Error::Unsupported(format!("{algo} is not primal-dual")))),
        };
        let gap = state
            .x_curr
            .data()
            .iter()
            .zip(x.iter())
            .chain(state.y_curr.data().iter().zip(y.iter()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap);
    }
    Ok(worst)
}

/// Relative growth of the squared-step partial sums over the last `PLATEAU_WINDOW` steps.
pub fn plateau_growth(partial_sums: &[f64]) -> f64 {
    let Some(&end) = partial_sums.last() else {
        return f64::NAN;
    };
    if partial_sums.len() <= PLATEAU_WINDOW {
        return f64::INFINITY;
    }
    let start = partial_sums[partial_sums.len() - 1 - PLATEAU_WINDOW];
    if end == 0.0 {
        0.0
    } else {
        (end - start) / end
    }
}

/// The suite-specific quality measure of a finished run.
pub fn quality(suite: Suite, loaded: &LoadedProblem, oracle: Option<&OracleSolution>, report: &RunReport) -> f64 {
    let x = DVector::from_column_slice(report.x.data());
    match suite {
        Suite::Ridge | Suite::Tv1d => oracle.map_or(f64::NAN, |o| (&x - &o.x).norm()),
        Suite::Lasso => {
            let Some(o) = oracle else { return f64::NAN };
            let comp = loaded.problem.composite().expect("lasso is composite");
            match DenseComposite::from_problem(comp) {
                Ok(d) => (d.objective(&x) - o.objective).abs(),
                Err(_) => f64::NAN,
            }
        }
        Suite::ProjectionFeasibility => feasibility_violation(loaded, &x),
    }
}

/// `max(dist_∞(x, C), dist_∞(Lx, D))` for the box constraints of the feasibility suite.
fn feasibility_violation(loaded: &LoadedProblem, x: &DVector<f64>) -> f64 {
    let SlotsSpec::Inclusion { primal, dual } = &loaded.spec.problem else {
        return f64::NAN;
    };
    let inc = loaded.problem.inclusion();
    let out = |v: f64, lo: f64, hi: f64| (lo - v).max(v - hi).max(0.0);
    let mut worst: f64 = 0.0;
    let cols = inc.primal_layout();
    for (j, s) in primal.iter().enumerate() {
        if let ResolventSpec::Subdifferential { f: ProxSpec::Box { lower, upper } } = &s.resolvent {
            for i in cols.range(j) {
                worst = worst.max(out(x[i], *lower, *upper));
            }
        }
    }
    let lx = inc.linear().to_dense() * x;
    let rows = inc.dual_layout();
    for (k, s) in dual.iter().enumerate() {
        if let DualResolventSpec::Conjugate { g: ProxSpec::Box { lower, upper } } = &s.resolvent {
            for i in rows.range(k) {
                worst = worst.max(out(lx[i], *lower, *upper));
            }
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellKey {
    pub inertial: bool,
    pub sampling: bool,
}

impl CellKey {
    pub const ALL: [CellKey; 4] = [
        CellKey { inertial: false, sampling: false },
        CellKey { inertial: true, sampling: false },
        CellKey { inertial: false, sampling: true },
        CellKey { inertial: true, sampling: true },
    ];

    pub fn config(self, suite: Suite, seed: u64) -> RunConfig {
        RunConfig {
            algorithm: suite.algorithm(),
            alpha: if self.inertial { INERTIA } else { 0.0 },
            plan: if self.sampling {
                PlanSpec::Bernoulli(vec![0.5])
            } else {
                PlanSpec::Full
            },
            seed,
            tol: suite.tol(),
            ..RunConfig::default()
        }
    }
}

/// One `(suite, cell, seed)` run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub evals_prox: u64,
    pub evals_grad: u64,
    pub evals_linop: u64,
    pub quality: f64,
    pub plateau: f64,
    pub trace: String,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn quality_ok(&self, suite: Suite) -> bool {
        self.quality <= suite.quality_tol()
    }

    pub fn plateau_ok(&self) -> bool {
        self.plateau < PLATEAU_TOL
    }
}

#[derive(Debug, Clone)]
pub struct CellSummary {
    pub suite: Suite,
    pub key: CellKey,
    pub runs: Vec<RunRecord>,
    /// Worst gap of the deterministic-reduction check across seeds.
    pub reduction_gap: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl CellSummary {
    pub fn converged(&self) -> usize {
        self.runs.iter().filter(|r| r.converged).count()
    }

    pub fn median_iterations(&self) -> f64 {
        median(self.runs.iter().map(|r| r.iterations as f64).collect())
    }

    fn median_of(&self, f: impl Fn(&RunRecord) -> u64) -> f64 {
        median(self.runs.iter().map(|r| f(r) as f64).collect())
    }

    pub fn worst_quality(&self) -> f64 {
        self.runs.iter().map(|r| r.quality).fold(0.0, |a: f64, b| if b.is_nan() { b } else { a.max(b) })
    }

    pub fn quality_ok(&self) -> bool {
        self.runs.iter().all(|r| r.quality_ok(self.suite))
    }

    /// Plateau of every converged run.
    pub fn plateau_ok(&self) -> bool {
        self.runs.iter().filter(|r| r.converged).all(RunRecord::plateau_ok)
    }

    pub fn reduction_ok(&self) -> bool {
        self.reduction_gap <= REDUCTION_TOL
    }

    pub fn passed(&self) -> bool {
        self.converged() == self.runs.len() && self.quality_ok() && self.plateau_ok() && self.reduction_ok()
    }
}

/// Plateau of a converged run, measured on the `PLATEAU_WINDOW` steps that follow its
/// stopping point: the run is replayed from the same seed and continued, so its first
/// steps are bit-identical and the window never straddles the transient of a short run.
pub fn run_plateau(cfg: &RunConfig, loaded: &LoadedProblem, report: &RunReport) -> f64 {
    if !report.converged {
        return plateau_growth(&report.step_partial_sums);
    }
    let extended = RunConfig {
        tol: f64::MIN_POSITIVE,
        max_iters: report.iterations + PLATEAU_WINDOW,
        ..cfg.clone()
    };
    match run(&extended, loaded) {
        Ok(r) => plateau_growth(&r.step_partial_sums),
        Err(_) => f64::NAN,
    }
}

fn run_cell(suite: Suite, key: CellKey, seed: u64, loaded: &LoadedProblem, oracle: Option<&OracleSolution>) -> RunRecord {
    let cfg = key.config(suite, seed);
    match run(&cfg, loaded) {
        Ok(report) => RunRecord {
            seed,
            converged: report.converged,
            iterations: report.iterations,
            evals_prox: report.evals_prox,
            evals_grad: report.evals_grad,
            evals_linop: report.evals_linop,
            quality: quality(suite, loaded, oracle, &report),
            plateau: run_plateau(&cfg, loaded, &report),
            trace: report.trace,
            error: None,
        },
        Err(e) => RunRecord {
            seed,
            converged: false,
            iterations: 0,
            evals_prox: 0,
            evals_grad: 0,
            evals_linop: 0,
            quality: f64::NAN,
            plateau: f64::NAN,
            trace: String::new(),
            error: Some(e.to_string()),
        },
    }
}

/// Runs a suite over the seeds and the cells in `cells`; cells are independent and run in
/// parallel, and the result order follows `cells` then `seeds`.
pub fn benchmark_cells(suite: Suite, seeds: &[u64], cells: &[CellKey]) -> Result<Vec<CellSummary>> {
    let prepared = seeds
        .par_iter()
        .map(|&seed| {
            let loaded = suite.problem(seed)?;
            let oracle = match suite {
                Suite::ProjectionFeasibility => None,
                _ => Some(oracle_solve(&loaded.problem)?),
            };
            let gap = deterministic_reduction(&loaded, suite.algorithm(), REDUCTION_STEPS, seed)?;
            Ok((seed, loaded, oracle, gap))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..prepared.len()).map(move |s| (c, s)))
        .collect();
    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let (seed, loaded, oracle, _) = &prepared[s];
            run_cell(suite, cells[c], *seed, loaded, oracle.as_ref())
        })
        .collect();
    let reduction_gap = prepared.iter().map(|p| p.3).fold(0.0, f64::max);
    let mut records = records.into_iter();
    Ok(cells
        .iter()
        .map(|&key| CellSummary {
            suite,
            key,
            runs: records.by_ref().take(prepared.len()).collect(),
            reduction_gap,
        })
        .collect())
}

pub fn benchmark(suite: Suite, seeds: &[u64]) -> Result<Vec<CellSummary>> {
    benchmark_cells(suite, seeds, &CellKey::ALL)
}

pub const TABLE_COLUMNS: [&str; 14] = [
    "suite",
    "inertial",
    "sampling",
    "seeds",
    "converged",
    "median_iterations",
    "median_evals_prox",
    "median_evals_grad",
    "median_evals_linop",
    "quality_measure",
    "worst_quality",
    "plateau_ok",
    "reduction_ok",
    "passed",
];

/// The summary table as CSV, one row per cell.
pub fn summary_table(cells: &[CellSummary]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_COLUMNS).expect("in-memory write");
    for c in cells {
        let on = |b: bool| if b { "on" } else { "off" };
        w.write_record([
            c.suite.name().to_string(),
            on(c.key.inertial).to_string(),
            on(c.key.sampling).to_string(),
            c.runs.len().to_string(),
            c.converged().to_string(),
            c.median_iterations().to_string(),
            c.median_of(|r| r.evals_prox).to_string(),
            c.median_of(|r| r.evals_grad).to_string(),
            c.median_of(|r| r.evals_linop).to_string(),
            c.suite.quality_name().to_string(),
            format!("{:e}", c.worst_quality()),
            c.plateau_ok().to_string(),
            c.reduction_ok().to_string(),
            c.passed().to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
}
