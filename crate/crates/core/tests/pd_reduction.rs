//! With no inertia, full activation and constant relaxation the randomized primal-dual
//! steps must coincide with plain deterministic loops written directly on dense matrices.

mod common;

use common::*;
use ibpd::block::ActivationMask;
use ibpd::km::InertialSchedule;
use ibpd::operators::{DualResolvent, ProxFunction, Resolvent, SmoothGradient};
use ibpd::pd::{
    check_condition, pd_inclusion_step, pd_optimization_step, pd_smooth_step, CompositeProblem,
    DualSlot, MonotoneBlockProblem, PDState, PrimalSlot,
};
use ibpd::{BlockVector, DiagonalPreconditioner};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const ITERS: usize = 200;
const TOL: f64 = 1e-12;

fn max_abs_diff(a: &DVector<f64>, b: &BlockVector) -> f64 {
    a.iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

/// Random positive diagonals scaled so that `‖R½ K F½‖ = 0.9`.
fn scaled_diagonals(
    rng: &mut rand_chacha::ChaCha8Rng,
    k: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let f: DVector<f64> = DVector::from_fn(k.ncols(), |_, _| rng.gen_range(0.5..1.5));
    let r: DVector<f64> = DVector::from_fn(k.nrows(), |_, _| rng.gen_range(0.5..1.5));
    let scaled = DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| r[i].sqrt() * k[(i, j)] * f[j].sqrt());
    let c = 0.9 / spectral_norm(&scaled);
    (f * c, r * c)
}

fn precond(p: &[usize], q: &[usize], f: &DVector<f64>, r: &DVector<f64>) -> DiagonalPreconditioner {
    DiagonalPreconditioner::new(
        BlockVector::from_vec(&layout(p), f.as_slice().to_vec()).unwrap(),
        BlockVector::from_vec(&layout(q), r.as_slice().to_vec()).unwrap(),
    )
    .unwrap()
}

fn block_diag_monotone(rng: &mut rand_chacha::ChaCha8Rng, dims: &[usize]) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
    let n: usize = dims.iter().sum();
    let mut full = DMatrix::zeros(n, n);
    let mut parts = Vec::new();
    let mut off = 0;
    for &d in dims {
        let g = gaussian_matrix(rng, d, d);
        let s = gaussian_matrix(rng, d, d);
        // PSD part plus a skew part
        let m = &g * g.transpose() * 0.3 + (&s - s.transpose()) * 0.5;
        full.view_mut((off, off), (d, d)).copy_from(&m);
        parts.push(m);
        off += d;
    }
    (parts, full)
}

#[test]
fn inclusion_step_matches_dense_reference() {
    let mut g = rng(20);
    let (p, q) = (vec![3, 3, 4], vec![5, 5, 5, 5]);
    let k = gaussian_matrix(&mut g, 20, 10);
    let (a_parts, a) = block_diag_monotone(&mut g, &p);
    let (b_parts, b) = block_diag_monotone(&mut g, &q);
    let qc = {
        let m = gaussian_matrix(&mut g, 10, 10);
        &m * m.transpose() * 0.05
    };
    let cc = random_vec(&mut g, 10);
    let qd = DMatrix::from_diagonal(&DVector::from_fn(20, |_, _| g.gen_range(0.0..0.2)));
    let (f, r) = scaled_diagonals(&mut g, &k);

    let cols = layout(&p);
    let rows = layout(&q);
    let l = blocked(&rows, &cols, &k);
    let mut primal = Vec::new();
    let mut off = 0;
    for (j, &d) in p.iter().enumerate() {
        let qj = qc.view((off, off), (d, d)).clone_owned();
        // the dense reference below uses the same block-diagonal C
        primal.push(PrimalSlot {
            resolvent: Resolvent::linear(a_parts[j].clone()).unwrap(),
            smooth: SmoothGradient::quadratic(qj, cc[off..off + d].to_vec()).unwrap(),
        });
        off += d;
    }
    let mut dual = Vec::new();
    let mut off = 0;
    for (kk, &d) in q.iter().enumerate() {
        dual.push(DualSlot {
            resolvent: DualResolvent::Inverse(Resolvent::linear(b_parts[kk].clone()).unwrap()),
            smooth: SmoothGradient::quadratic(qd.view((off, off), (d, d)).clone_owned(), vec![0.0; d]).unwrap(),
        });
        off += d;
    }
    let prob = MonotoneBlockProblem::new(primal, dual, l).unwrap();
    let prec = precond(&p, &q, &f, &r);
    assert!(check_condition(&prob, &prec).unwrap().norm_below_one);

    let mut qc_bd = DMatrix::zeros(10, 10);
    let mut off = 0;
    for &d in &p {
        qc_bd.view_mut((off, off), (d, d)).copy_from(&qc.view((off, off), (d, d)));
        off += d;
    }
    let cc = DVector::from_vec(cc);
    let fm = DMatrix::from_diagonal(&f);
    let rm = DMatrix::from_diagonal(&r);
    let ja = (DMatrix::identity(10, 10) + &fm * &a).lu();
    let jb = (DMatrix::identity(20, 20) + &rm * &b).lu();

    let lambda = 0.8;
    let s = InertialSchedule::plain(lambda);
    let x0 = random_vec(&mut g, 10);
    let y0 = random_vec(&mut g, 20);
    let mut st = PDState::new(
        BlockVector::from_vec(&cols, x0.clone()).unwrap(),
        BlockVector::from_vec(&rows, y0.clone()).unwrap(),
    );
    let (mut x, mut y) = (DVector::from_vec(x0), DVector::from_vec(y0));
    let mask = ActivationMask::full(7);
    let mut worst: f64 = 0.0;
    for _ in 0..ITERS {
        pd_inclusion_step(&mut st, &s, &mask, &prob, &prec).unwrap();
        let grad = &qc_bd * &x + &cc;
        let z = ja.solve(&(&x - &fm * (k.transpose() * &y + grad))).unwrap();
        let x_next = &x + (&z - &x) * lambda;
        let sk = jb.solve(&(&y + &rm * (&k * (&z * 2.0 - &x) - &qd * &y))).unwrap();
        y = &y + (sk - &y) * lambda;
        x = x_next;
        worst = worst.max(max_abs_diff(&x, &st.x_curr)).max(max_abs_diff(&y, &st.y_curr));
    }
    assert!(worst <= TOL, "max deviation {worst:e}");
}

fn lasso_like(seed: u64) -> (CompositeProblem, DMatrix<f64>, DVector<f64>, f64, f64, DVector<f64>, DVector<f64>) {
    let mut g = rng(seed);
    let (p, q) = ([4usize, 6], [10usize, 10]);
    let k = gaussian_matrix(&mut g, 20, 10);
    let b = DVector::from_vec(random_vec(&mut g, 20));
    let mu = 0.1 * (k.transpose() * &b).amax();
    let ridge = 0.05;
    let (f, r) = scaled_diagonals(&mut g, &k);
    let cols = layout(&p);
    let rows = layout(&q);
    let prob = CompositeProblem::new(
        vec![ProxFunction::L1 { weight: mu }; 2],
        p.iter()
            .map(|&d| SmoothGradient::quadratic(DMatrix::identity(d, d) * ridge, vec![0.0; d]).unwrap())
            .collect(),
        vec![
            ProxFunction::SquaredL2 { weight: 1.0, center: Some(b.as_slice()[..10].to_vec()) },
            ProxFunction::SquaredL2 { weight: 1.0, center: Some(b.as_slice()[10..].to_vec()) },
        ],
        vec![SmoothGradient::zero(10); 2],
        blocked(&rows, &cols, &k),
    )
    .unwrap();
    (prob, k, b, mu, ridge, f, r)
}

#[test]
fn optimization_step_matches_dense_reference() {
    let (prob, k, b, mu, ridge, f, r) = lasso_like(7);
    let prec = precond(&[4, 6], &[10, 10], &f, &r);
    let lambda = 0.9;
    let s = InertialSchedule::plain(lambda);
    let mut st = PDState::new(
        BlockVector::zeros(prob.inclusion().primal_layout()),
        BlockVector::zeros(prob.inclusion().dual_layout()),
    );
    let (mut x, mut y) = (DVector::zeros(10), DVector::zeros(20));
    let mask = ActivationMask::full(4);
    let mut worst: f64 = 0.0;
    for _ in 0..ITERS {
        pd_optimization_step(&mut st, &s, &mask, &prob, &prec).unwrap();
        let v = &x - f.component_mul(&(k.transpose() * &y + &x * ridge));
        let z = DVector::from_fn(10, |i, _| soft(v[i], f[i] * mu));
        let x_next = &x + (&z - &x) * lambda;
        // prox of σ g* for g = ½‖· − b‖² is (v − σ b)/(1 + σ)
        let u = &y + r.component_mul(&(&k * (&z * 2.0 - &x)));
        let sk = DVector::from_fn(20, |i, _| (u[i] - r[i] * b[i]) / (1.0 + r[i]));
        y = &y + (sk - &y) * lambda;
        x = x_next;
        worst = worst.max(max_abs_diff(&x, &st.x_curr)).max(max_abs_diff(&y, &st.y_curr));
    }
    assert!(worst <= TOL, "max deviation {worst:e}");
}

#[test]
fn smooth_step_matches_dense_reference() {
    let mut g = rng(11);
    let (p, q) = ([5usize, 5], [8usize, 12]);
    let k = gaussian_matrix(&mut g, 20, 10);
    let b = DVector::from_vec(random_vec(&mut g, 20));
    let hq = {
        let m = gaussian_matrix(&mut g, 5, 5);
        &m * m.transpose() * 0.2 + DMatrix::identity(5, 5) * 0.1
    };
    let (f, r) = scaled_diagonals(&mut g, &k);
    let cols = layout(&p);
    let rows = layout(&q);
    let prob = CompositeProblem::new(
        vec![ProxFunction::Zero; 2],
        vec![
            SmoothGradient::quadratic(hq.clone(), vec![0.5; 5]).unwrap(),
            SmoothGradient::quadratic(hq.clone(), vec![-0.5; 5]).unwrap(),
        ],
        vec![
            ProxFunction::L1 { weight: 0.7 },
            ProxFunction::SquaredL2 { weight: 2.0, center: Some(b.as_slice()[8..].to_vec()) },
        ],
        vec![
            SmoothGradient::zero(8),
            SmoothGradient::quadratic(DMatrix::identity(12, 12) * 0.3, vec![0.0; 12]).unwrap(),
        ],
        blocked(&rows, &cols, &k),
    )
    .unwrap();
    let prec = precond(&p, &q, &f, &r);
    let mut hfull = DMatrix::zeros(10, 10);
    hfull.view_mut((0, 0), (5, 5)).copy_from(&hq);
    hfull.view_mut((5, 5), (5, 5)).copy_from(&hq);
    let hc = DVector::from_fn(10, |i, _| if i < 5 { 0.5 } else { -0.5 });
    let lambda = 0.85;
    let s = InertialSchedule::plain(lambda);
    let x0 = random_vec(&mut g, 10);
    let y0 = random_vec(&mut g, 20);
    let mut st = PDState::new(
        BlockVector::from_vec(&cols, x0.clone()).unwrap(),
        BlockVector::from_vec(&rows, y0.clone()).unwrap(),
    );
    let (mut x, mut y) = (DVector::from_vec(x0), DVector::from_vec(y0));
    let mask = ActivationMask::full(4);
    let mut worst: f64 = 0.0;
    for _ in 0..ITERS {
        pd_smooth_step(&mut st, &s, &mask, &prob, &prec).unwrap();
        let z = &x - f.component_mul(&(&hfull * &x + &hc));
        let dl = DVector::from_fn(20, |i, _| if i < 8 { 0.0 } else { 0.3 * y[i] });
        let u = &y + r.component_mul(&(&k * (&z - f.component_mul(&(k.transpose() * &y))) - dl));
        // prox of σ g*: clip to [−0.7, 0.7] for the l1 part, (v − σ c)/(1 + σ/2) for the weighted square
        let sk = DVector::from_fn(20, |i, _| {
            if i < 8 {
                u[i].clamp(-0.7, 0.7)
            } else {
                (u[i] - r[i] * b[i]) / (1.0 + r[i] / 2.0)
            }
        });
        y = &y + (&sk - &y) * lambda;
        x = &x + (&z - f.component_mul(&(k.transpose() * &sk)) - &x) * lambda;
        worst = worst.max(max_abs_diff(&x, &st.x_curr)).max(max_abs_diff(&y, &st.y_curr));
    }
    assert!(worst <= TOL, "max deviation {worst:e}");
}

/// `‖(x, y)‖²` in the metric `[[F⁻¹, −L*], [−L, R⁻¹]]` under which the deterministic
/// iteration is a relaxed averaged map.
fn metric_sq(dx: &DVector<f64>, dy: &DVector<f64>, k: &DMatrix<f64>, f: &DVector<f64>, r: &DVector<f64>) -> f64 {
    let px: f64 = dx.iter().zip(f.iter()).map(|(a, b)| a * a / b).sum();
    let py: f64 = dy.iter().zip(r.iter()).map(|(a, b)| a * a / b).sum();
    px + py - 2.0 * dy.dot(&(k * dx))
}

#[test]
fn distance_to_solution_is_monotone_without_inertia() {
    let (prob, k, _, _, _, f, r) = lasso_like(3);
    let prec = precond(&[4, 6], &[10, 10], &f, &r);
    let s = InertialSchedule::plain(0.9);
    let zeros = || {
        PDState::new(
            BlockVector::zeros(prob.inclusion().primal_layout()),
            BlockVector::zeros(prob.inclusion().dual_layout()),
        )
    };
    let mask = ActivationMask::full(4);
    let mut long = zeros();
    for _ in 0..20_000 {
        pd_optimization_step(&mut long, &s, &mask, &prob, &prec).unwrap();
    }
    let (xs, ys) = (dvec(&long.x_curr), dvec(&long.y_curr));
    let mut st = zeros();
    let mut prev = f64::INFINITY;
    for n in 0..ITERS {
        let d = metric_sq(&(dvec(&st.x_curr) - &xs), &(dvec(&st.y_curr) - &ys), &k, &f, &r);
        assert!(d >= 0.0);
        assert!(d <= prev + 1e-10, "iteration {n}: {d} after {prev}");
        prev = d;
        pd_optimization_step(&mut st, &s, &mask, &prob, &prec).unwrap();
    }
}
