//! Acceptance gate: one line per criterion, nonzero exit if any fails.

use std::process::ExitCode;
use std::time::Instant;

use ibpd::block::SamplingPlan;
use ibpd::hilbert::{operator_norm_estimate, BlockLayout, POWER_ITERATION_CAP, POWER_ITERATION_TOL};
use ibpd::km::{lambda_upper, validate_schedule, InertialSchedule};
use ibpd::operators::{compose_averaged, DualResolvent, ProxFunction, Resolvent, SmoothGradient};
use ibpd::pd::{check_condition, enforce_coupling, mask_respects_coupling, CompositeProblem, CouplingDirection};
use ibpd::{BlockVector, DiagonalPreconditioner, LinearBlockOperator};
use ibpd_bench::run::{run, Algorithm, PlanSpec, RunConfig};
use ibpd_bench::suites::{benchmark, benchmark_cells, deterministic_reduction, CellKey, Suite, REDUCTION_STEPS};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The relaxation ceiling and the inertia requirement written out directly.
fn ceiling_formula(a: f64, t: f64, d: f64) -> f64 {
    let inner = a * (1.0 + a) + a * d + t;
    (d - a * inner) / (d * (1.0 + inner))
}

fn delta_formula(a: f64, t: f64) -> f64 {
    (a * a * (1.0 + a) + a * t) / (1.0 - a * a)
}

fn feasibility() -> Verdict {
    let base = lambda_upper(0.0, 0.1, 1.0);
    let base_ok = (base - 1.0 / 1.1).abs() <= 1e-15;
    let accept = validate_schedule(&InertialSchedule::plain(0.9), 1000).passed();
    let reject = !validate_schedule(&InertialSchedule::plain(0.95), 1000).passed();
    let mut r = rng(1);
    let mut disagreements = 0;
    for _ in 0..200 {
        let a = r.gen_range(0.0..0.9);
        let t = r.gen_range(0.01..1.0);
        let d = r.gen_range(0.01..3.0);
        let lambda = r.gen_range(0.01..1.0);
        let s = InertialSchedule::inertial(a, lambda, d).with_tau(t);
        let ceiling = ceiling_formula(a, t, d);
        let expect = d > delta_formula(a, t) && lambda <= ceiling;
        let value_ok = (lambda_upper(a, t, d) - ceiling).abs() <= 1e-15 * ceiling.abs().max(1.0);
        if validate_schedule(&s, 200).passed() != expect || !value_ok {
            disagreements += 1;
        }
    }
    verdict(
        base_ok && accept && reject && disagreements == 0,
        format!(
            "ceiling(0, 0.1, 1) − 1/1.1 = {:e}; λ = 0.9 accepted: {accept}, λ = 0.95 rejected: {reject}; {disagreements}/200 disagreements",
            base - 1.0 / 1.1
        ),
    )
}

fn reduction() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    let cases = [
        (Suite::Lasso, Algorithm::PdInclusion),
        (Suite::Lasso, Algorithm::PdOpt),
        (Suite::ProjectionFeasibility, Algorithm::PdInclusion),
        (Suite::Ridge, Algorithm::PdSmooth),
    ];
    for (suite, algo) in cases {
        let loaded = suite.problem(2024).expect("suite problem");
        match deterministic_reduction(&loaded, algo, REDUCTION_STEPS, 2024) {
            Ok(gap) => {
                worst = worst.max(gap);
                parts.push(format!("{algo} on {suite} {gap:e}"));
            }
            Err(e) => return verdict(false, format!("{algo} on {suite}: {e}")),
        }
    }
    verdict(
        worst <= 1e-12,
        format!("max componentwise gap over {REDUCTION_STEPS} steps on 20×10: {}", parts.join(", ")),
    )
}

fn oracle_convergence() -> Verdict {
    let seeds = [0, 1, 2, 3, 4];
    let cells = [CellKey { inertial: false, sampling: true }, CellKey { inertial: true, sampling: true }];
    let mut pass = true;
    let mut parts = Vec::new();
    for suite in [Suite::Ridge, Suite::Lasso] {
        let summaries = match benchmark_cells(suite, &seeds, &cells) {
            Ok(s) => s,
            Err(e) => return verdict(false, format!("{suite}: {e}")),
        };
        for c in &summaries {
            let ok = c.converged() == seeds.len() && c.quality_ok();
            pass &= ok;
            parts.push(format!(
                "{suite} inertia {}: {}/{} converged, worst {} {:e}",
                if c.key.inertial { "on" } else { "off" },
                c.converged(),
                seeds.len(),
                suite.quality_name(),
                c.worst_quality()
            ));
        }
    }
    verdict(pass, parts.join("; "))
}

fn within_three_sigma(counts: &[usize], exact: &[f64], draws: usize) -> bool {
    counts.iter().zip(exact).all(|(&c, &p)| {
        let freq = c as f64 / draws as f64;
        (freq - p).abs() <= 3.0 * (p * (1.0 - p) / draws as f64).sqrt() + 1e-12
    })
}

fn count_draws(plan: &SamplingPlan, draws: usize, check: impl Fn(&[bool]) -> bool) -> (Vec<usize>, usize) {
    let mut sampler = plan.sampler();
    let mut counts = vec![0; plan.num_blocks()];
    let mut bad = 0;
    for _ in 0..draws {
        let mask = sampler.sample();
        for i in mask.active() {
            counts[i] += 1;
        }
        if !check(mask.bits()) {
            bad += 1;
        }
    }
    (counts, bad)
}

fn activation() -> Verdict {
    let draws = 10_000;
    let plans = [
        ("bernoulli", SamplingPlan::bernoulli(vec![0.5, 0.3, 0.7, 0.2], 5).unwrap()),
        ("single", SamplingPlan::uniform_single(3, 6).unwrap()),
        (
            "table",
            SamplingPlan::table(3, vec![(0b001, 0.2), (0b110, 0.3), (0b111, 0.1), (0b010, 0.4)], 7).unwrap(),
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, plan) in &plans {
        let (counts, _) = count_draws(plan, draws, |_| true);
        let ok = within_three_sigma(&counts, &plan.marginals(), draws);
        pass &= ok;
        parts.push(format!("{name} {}", if ok { "ok" } else { "off" }));
    }
    // sparse L: rows of the middle block touch both primal blocks
    let tv = Suite::Tv1d.problem(0).expect("suite problem");
    let l = tv.problem.inclusion().linear();
    let p = l.col_layout().num_blocks();
    let mut violations = 0;
    for (i, direction) in [CouplingDirection::PrimalFollowsDual, CouplingDirection::DualFollowsPrimal]
        .into_iter()
        .enumerate()
    {
        for minimal in [false, true] {
            let base = SamplingPlan::bernoulli(vec![0.5; 5], 10 + i as u64).unwrap();
            let coupled = enforce_coupling(&base, l, direction, minimal).unwrap();
            let (counts, bad) = count_draws(&coupled, draws, |m| mask_respects_coupling(m, l, direction, p));
            violations += bad;
            let ok = within_three_sigma(&counts, &coupled.marginals(), draws);
            pass &= ok;
        }
    }
    pass &= violations == 0;
    parts.push(format!("coupled marginals and {violations} inclusion violations in 4×{draws} draws"));
    verdict(pass, parts.join(", "))
}

fn summability() -> Verdict {
    let seeds = [0, 1, 2, 3, 4];
    let mut checked = 0;
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for suite in Suite::ALL {
        let cells = match benchmark(suite, &seeds) {
            Ok(c) => c,
            Err(e) => return verdict(false, format!("{suite}: {e}")),
        };
        for c in &cells {
            for r in c.runs.iter().filter(|r| r.converged) {
                checked += 1;
                worst = worst.max(r.plateau);
                if !r.plateau_ok() {
                    failed.push(format!("{suite} seed {} growth {:e}", r.seed, r.plateau));
                }
            }
        }
    }
    verdict(
        failed.is_empty() && checked > 0,
        format!(
            "{checked} convergent runs, worst relative growth over the last 100 steps {worst:e}{}",
            if failed.is_empty() { String::new() } else { format!("; failures: {}", failed.join(", ")) }
        ),
    )
}

fn random_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Worst violation of `‖Px − Py‖² ≤ ⟨Px − Py, x − y⟩` over random pairs.
fn firm_gap(r: &mut ChaCha8Rng, n: usize, op: &dyn Fn(&[f64]) -> Vec<f64>) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let x = random_vec(r, n, 5.0);
        let y = random_vec(r, n, 5.0);
        let d = diff(&op(&x), &op(&y));
        worst = worst.max(dot(&d, &d) - dot(&d, &diff(&x, &y)));
    }
    worst
}

/// `prox_{γ g*}` from the conjugates in closed form, without the Moreau decomposition.
fn conjugate_prox_closed_form(g: &ProxFunction, i: usize, v: f64, gamma: f64) -> f64 {
    match g {
        ProxFunction::Zero => 0.0,
        ProxFunction::L1 { weight } => v.clamp(-weight, *weight),
        ProxFunction::SquaredL2 { weight, center } => {
            let c = center.as_ref().map_or(0.0, |c| c[i]);
            (v - gamma * c) / (1.0 + gamma / weight)
        }
        ProxFunction::Box { lower, upper } => {
            if v > gamma * upper {
                v - gamma * upper
            } else if v < gamma * lower {
                v - gamma * lower
            } else {
                0.0
            }
        }
        ProxFunction::Singleton { point } => v - gamma * point.as_ref().map_or(0.0, |p| p[i]),
    }
}

fn calculus() -> Verdict {
    let mut r = rng(6);
    let n = 6;
    let center: Vec<f64> = random_vec(&mut r, n, 1.0);
    let functions = [
        ProxFunction::Zero,
        ProxFunction::L1 { weight: 0.7 },
        ProxFunction::SquaredL2 { weight: 2.5, center: Some(center.clone()) },
        ProxFunction::Box { lower: -1.0, upper: 0.5 },
        ProxFunction::Singleton { point: Some(center.clone()) },
    ];
    let mut firm: f64 = f64::NEG_INFINITY;
    let mut moreau: f64 = 0.0;
    for f in &functions {
        for gamma in [0.1, 1.0, 3.0] {
            firm = firm.max(firm_gap(&mut r, n, &|x| f.prox(x, gamma).unwrap()));
            let conj = DualResolvent::Conjugate(f.clone());
            firm = firm.max(firm_gap(&mut r, n, &|x| {
                let mut out = vec![0.0; n];
                conj.apply_diag(x, &vec![gamma; n], &mut out).unwrap();
                out
            }));
            for _ in 0..100 {
                let x = random_vec(&mut r, n, 5.0);
                let p = f.prox(&x.iter().map(|v| v / gamma).collect::<Vec<_>>(), 1.0 / gamma).unwrap();
                for i in 0..n {
                    let c = conjugate_prox_closed_form(f, i, x[i], gamma);
                    moreau = moreau.max((x[i] - c - gamma * p[i]).abs());
                }
            }
        }
    }
    // monotone linear operators: PSD plus skew part
    for seed in 0..5 {
        let mut lr = rng(100 + seed);
        let a = DMatrix::from_fn(n, n, |_, _| lr.gen_range(-1.0..1.0));
        let s = DMatrix::from_fn(n, n, |_, _| lr.gen_range(-1.0..1.0));
        let m = &a * a.transpose() + (&s - s.transpose());
        let res = Resolvent::linear(m).unwrap();
        firm = firm.max(firm_gap(&mut r, n, &|x| res.apply(x, 0.8).unwrap()));
    }

    // composed averaged maps T₁ = (1 − β₁)I + β₁R₁, T₂ likewise, R_i nonexpansive
    let mut averaged: f64 = f64::NEG_INFINITY;
    for _ in 0..50 {
        let (b1, b2) = (r.gen_range(0.05..0.95), r.gen_range(0.05..0.95));
        let beta = compose_averaged(b1, b2).unwrap();
        let q = DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0));
        let q = &q / q.clone().svd(false, false).singular_values.max();
        let lam = r.gen_range(0.1..2.0);
        let r1 = |x: &DVector<f64>| -> DVector<f64> { &q * x };
        // reflected prox: 2 prox − I is nonexpansive
        let r2 = |x: &DVector<f64>| -> DVector<f64> {
            let p = ProxFunction::L1 { weight: lam }.prox(x.as_slice(), 1.0).unwrap();
            DVector::from_vec(p) * 2.0 - x
        };
        let t = |x: &DVector<f64>| -> DVector<f64> {
            let t2 = x * (1.0 - b2) + r2(x) * b2;
            &t2 * (1.0 - b1) + r1(&t2) * b1
        };
        for _ in 0..20 {
            let x = DVector::from_vec(random_vec(&mut r, n, 3.0));
            let y = DVector::from_vec(random_vec(&mut r, n, 3.0));
            let (tx, ty) = (t(&x), t(&y));
            let lhs = (&tx - &ty).norm_squared();
            let rhs = (&x - &y).norm_squared() - (1.0 - beta) / beta * ((&x - &tx) - (&y - &ty)).norm_squared();
            averaged = averaged.max(lhs - rhs);
        }
    }

    // gradients against central differences
    let k = DMatrix::from_fn(5, n, |_, _| r.gen_range(-1.0..1.0));
    let b = random_vec(&mut r, 5, 1.0);
    let qa = DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0));
    let grads = [
        SmoothGradient::least_squares(&k, &b, 0.3).unwrap(),
        SmoothGradient::quadratic_with_constant(&qa * qa.transpose(), center.clone(), 1.5).unwrap(),
    ];
    let mut fd: f64 = 0.0;
    for g in &grads {
        for _ in 0..50 {
            let x = random_vec(&mut r, n, 2.0);
            let exact = g.gradient(&x);
            let h = 1e-5;
            let approx: Vec<f64> = (0..n)
                .map(|i| {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[i] += h;
                    xm[i] -= h;
                    (g.value(&xp) - g.value(&xm)) / (2.0 * h)
                })
                .collect();
            let err = diff(&exact, &approx);
            fd = fd.max(dot(&err, &err).sqrt() / dot(&exact, &exact).sqrt().max(1.0));
        }
    }
    verdict(
        firm <= 1e-10 && moreau <= 1e-12 && averaged <= 1e-9 && fd <= 1e-5,
        format!(
            "firm nonexpansiveness slack {firm:e}, Moreau residual {moreau:e}, composed averagedness slack {averaged:e}, gradient relative error {fd:e}"
        ),
    )
}

fn norm_gate() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut disagreements = 0;
    let mut passes = 0;
    for seed in 0..10 {
        let mut r = rng(700 + seed);
        let cols = BlockLayout::new(vec![2, 3]).unwrap();
        let rows = BlockLayout::new(vec![3, 1, 2]).unwrap();
        let full = DMatrix::from_fn(6, 5, |_, _| r.gen_range(-1.0..1.0));
        let l = LinearBlockOperator::from_dense(rows.clone(), cols.clone(), &full).unwrap();
        let scale = r.gen_range(0.3..1.6) / full.clone().svd(false, false).singular_values.max();
        let fdiag: Vec<f64> = (0..5).map(|_| scale * r.gen_range(0.5..1.5)).collect();
        let rdiag: Vec<f64> = (0..6).map(|_| scale * r.gen_range(0.5..1.5)).collect();
        let prec = DiagonalPreconditioner::new(
            BlockVector::from_vec(&cols, fdiag.clone()).unwrap(),
            BlockVector::from_vec(&rows, rdiag.clone()).unwrap(),
        )
        .unwrap();
        let hw: Vec<f64> = (0..2).map(|_| r.gen_range(0.1..3.0)).collect();
        let lw: Vec<f64> = (0..3).map(|_| r.gen_range(0.1..3.0)).collect();
        let h = (0..2).map(|j| SmoothGradient::quadratic(DMatrix::identity(cols.dim(j), cols.dim(j)) * hw[j], vec![0.0; cols.dim(j)]).unwrap()).collect();
        let ls = (0..3).map(|k| SmoothGradient::quadratic(DMatrix::identity(rows.dim(k), rows.dim(k)) * lw[k], vec![0.0; rows.dim(k)]).unwrap()).collect();
        let prob = CompositeProblem::new(vec![ProxFunction::Zero; 2], h, vec![ProxFunction::Zero; 3], ls, l.clone()).unwrap();

        let scaled = DMatrix::from_diagonal(&DVector::from_vec(rdiag.iter().map(|v| v.sqrt()).collect()))
            * &full
            * DMatrix::from_diagonal(&DVector::from_vec(fdiag.iter().map(|v| v.sqrt()).collect()));
        let dense_norm = scaled.svd(false, false).singular_values.max();
        let est = operator_norm_estimate(&l, &prec, POWER_ITERATION_CAP, POWER_ITERATION_TOL).unwrap();
        worst = worst.max((est - dense_norm).abs());

        // dense gate: ν_j = 1/(w_j max F), τ̃_k = 1/(w_k max R) on each block
        let block_max = |d: &[f64], layout: &BlockLayout, i: usize| d[layout.range(i)].iter().cloned().fold(0.0, f64::max);
        let nu = (0..2).map(|j| 1.0 / (hw[j] * block_max(&fdiag, &cols, j))).fold(f64::INFINITY, f64::min);
        let tau = (0..3).map(|k| 1.0 / (lw[k] * block_max(&rdiag, &rows, k))).fold(f64::INFINITY, f64::min);
        let dense_pass = nu.min(tau * (1.0 - dense_norm * dense_norm)) > 0.5 && dense_norm < 1.0;
        let report = check_condition(prob.inclusion(), &prec).unwrap();
        worst = worst.max((report.norm - dense_norm).abs());
        if report.passed() != dense_pass {
            disagreements += 1;
        }
        passes += dense_pass as usize;
    }
    verdict(
        worst <= 1e-6 && disagreements == 0,
        format!("worst |estimate − σ_max| = {worst:e}; {disagreements} gate disagreements ({passes}/10 instances pass)"),
    )
}

fn determinism() -> Verdict {
    let mut mismatches = Vec::new();
    let mut count = 0;
    let algos = [
        (Suite::Ridge, Algorithm::Km, PlanSpec::Full),
        (Suite::Ridge, Algorithm::BlockKm, PlanSpec::Bernoulli(vec![0.5])),
        (Suite::Lasso, Algorithm::Fb, PlanSpec::Single),
        (Suite::ProjectionFeasibility, Algorithm::PdInclusion, PlanSpec::Bernoulli(vec![0.5])),
        (Suite::Tv1d, Algorithm::PdOpt, PlanSpec::Bernoulli(vec![0.5])),
        (Suite::Ridge, Algorithm::PdSmooth, PlanSpec::Bernoulli(vec![0.5])),
    ];
    for (suite, algorithm, plan) in algos {
        for seed in [3, 8] {
            let loaded = suite.problem(seed).expect("suite problem");
            let cfg = RunConfig {
                algorithm,
                plan: plan.clone(),
                alpha: 0.3,
                seed,
                max_iters: 2000,
                ..RunConfig::default()
            };
            let a = run(&cfg, &loaded).map(|r| r.trace);
            let b = run(&cfg, &loaded).map(|r| r.trace);
            count += 1;
            match (a, b) {
                (Ok(a), Ok(b)) if a == b => {}
                (a, b) => mismatches.push(format!("{algorithm} on {suite} seed {seed}: {:?}", (a.err(), b.err()))),
            }
        }
    }
    let tables: Vec<String> = (0..2)
        .map(|_| benchmark(Suite::Lasso, &[0, 1]).map(|c| ibpd_bench::suites::summary_table(&c)).unwrap_or_default())
        .collect();
    let tables_ok = !tables[0].is_empty() && tables[0] == tables[1];
    verdict(
        mismatches.is_empty() && tables_ok,
        format!(
            "{}/{count} (config, seed) pairs byte-identical, summary table reproducible: {tables_ok}{}",
            count - mismatches.len(),
            if mismatches.is_empty() { String::new() } else { format!("; {}", mismatches.join(", ")) }
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("parameter feasibility", feasibility),
        ("deterministic reduction", reduction),
        ("oracle convergence", oracle_convergence),
        ("activation statistics", activation),
        ("summability proxy", summability),
        ("operator calculus", calculus),
        ("norm-condition gate", norm_gate),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {}: {} {name} ({secs:.2} s): {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += !v.pass as usize;
    }
    if failed == 0 {
        println!("acceptance: all 8 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 8 criteria fail");
        ExitCode::FAILURE
    }
}
