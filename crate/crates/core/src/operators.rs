//! Proximity operators, resolvents, cocoercive gradients and averaged maps.
//!
//! The toolbox is closed: ℓ1, weighted squared ℓ2 (optionally centred), box indicators,
//! singleton indicators, the zero function, affine-quadratic gradients and linear
//! resolvents `(I + γM)⁻¹`. Every function in the toolbox is separable, so its prox in a
//! diagonal metric is computed coordinate by coordinate.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hilbert::{
    dot, gemv_add, largest_eigenvalue_psd, BlockLayout, BlockVector, POWER_ITERATION_CAP,
    POWER_ITERATION_TOL,
};

/// A separable closed proper convex function with a closed-form prox.
#[derive(Debug, Clone, PartialEq)]
pub enum ProxFunction {
    /// `f ≡ 0`.
    Zero,
    /// `w‖x‖₁`.
    L1 { weight: f64 },
    /// `(w/2)‖x − c‖²`, with `c = 0` when no centre is given.
    SquaredL2 { weight: f64, center: Option<Vec<f64>> },
    /// Indicator of `[lower, upper]ⁿ`.
    Box { lower: f64, upper: f64 },
    /// Indicator of `{c}`, with `c = 0` when no point is given.
    Singleton { point: Option<Vec<f64>> },
}

impl fmt::Display for ProxFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProxFunction::Zero => write!(f, "zero"),
            ProxFunction::L1 { weight } => write!(f, "l1({weight})"),
            ProxFunction::SquaredL2 { weight, center } => match center {
                Some(_) => write!(f, "sqnorm({weight}, centred)"),
                None => write!(f, "sqnorm({weight})"),
            },
            ProxFunction::Box { lower, upper } => write!(f, "box[{lower}, {upper}]"),
            ProxFunction::Singleton { point } => match point {
                Some(_) => write!(f, "singleton(point)"),
                None => write!(f, "singleton(0)"),
            },
        }
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("step {step} must be positive and finite")))
    }
}

impl ProxFunction {
    /// Checks parameters and, where a centre or point is given, its length.
    pub fn check(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("{self}: {m}")));
        match self {
            ProxFunction::Zero => Ok(()),
            ProxFunction::L1 { weight } if !(*weight >= 0.0 && weight.is_finite()) => {
                bad(format!("weight {weight} must be nonnegative"))
            }
            ProxFunction::SquaredL2 { weight, .. } if !(*weight >= 0.0 && weight.is_finite()) => {
                bad(format!("weight {weight} must be nonnegative"))
            }
            ProxFunction::SquaredL2 { center: Some(c), .. }
            | ProxFunction::Singleton { point: Some(c) }
                if c.len() != dim =>
            {
                bad(format!("vector has length {} but the block has dimension {dim}", c.len()))
            }
            ProxFunction::Box { lower, upper } if !(lower <= upper) => {
                bad("empty box".to_string())
            }
            _ => Ok(()),
        }
    }

    /// `prox_{γ f_i}` applied to coordinate `i` alone.
    pub fn prox_coord(&self, i: usize, x: f64, step: f64) -> f64 {
        match self {
            ProxFunction::Zero => x,
            ProxFunction::L1 { weight } => soft_threshold(x, step * weight),
            ProxFunction::SquaredL2 { weight, center } => {
                let c = center.as_ref().map_or(0.0, |c| c[i]);
                (x + step * weight * c) / (1.0 + step * weight)
            }
            ProxFunction::Box { lower, upper } => x.clamp(*lower, *upper),
            ProxFunction::Singleton { point } => point.as_ref().map_or(0.0, |c| c[i]),
        }
    }

    /// `prox_{γf}(x) = argmin_y f(y) + ‖x − y‖²/(2γ)`.
    pub fn prox(&self, x: &[f64], step: f64) -> Result<Vec<f64>> {
        check_step(step)?;
        Ok(x.iter().enumerate().map(|(i, &v)| self.prox_coord(i, v, step)).collect())
    }

    /// Prox in the metric `D⁻¹` for a positive diagonal `D`: coordinate `i` uses step `d_i`.
    pub fn prox_diag(&self, x: &[f64], steps: &[f64], out: &mut [f64]) {
        for (i, ((o, &v), &s)) in out.iter_mut().zip(x).zip(steps).enumerate() {
            *o = self.prox_coord(i, v, s);
        }
    }

    /// Prox of the conjugate in the metric `D⁻¹`, through the Moreau decomposition
    /// `prox_{d g*}(x) = x − d · prox_{g/d}(x/d)` applied per coordinate.
    pub fn conjugate_prox_diag(&self, x: &[f64], steps: &[f64], out: &mut [f64]) {
        for (i, ((o, &v), &s)) in out.iter_mut().zip(x).zip(steps).enumerate() {
            *o = v - s * self.prox_coord(i, v / s, 1.0 / s);
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            ProxFunction::Zero => 0.0,
            ProxFunction::L1 { weight } => weight * x.iter().map(|v| v.abs()).sum::<f64>(),
            ProxFunction::SquaredL2 { weight, center } => {
                let sq: f64 = match center {
                    Some(c) => x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum(),
                    None => dot(x, x),
                };
                0.5 * weight * sq
            }
            ProxFunction::Box { lower, upper } => {
                if x.iter().all(|v| (lower..=upper).contains(&v)) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxFunction::Singleton { point } => {
                let inside = match point {
                    Some(c) => x.iter().zip(c).all(|(a, b)| a == b),
                    None => x.iter().all(|&a| a == 0.0),
                };
                if inside {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Fenchel conjugate `f*(u) = sup_x ⟨u, x⟩ − f(x)`.
    pub fn conjugate_value(&self, u: &[f64]) -> f64 {
        let zero_indicator = |u: &[f64]| {
            if u.iter().all(|&v| v == 0.0) {
                0.0
            } else {
                f64::INFINITY
            }
        };
        match self {
            ProxFunction::Zero => zero_indicator(u),
            ProxFunction::L1 { weight } => {
                if u.iter().all(|v| v.abs() <= *weight * (1.0 + 1e-12)) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxFunction::SquaredL2 { weight, center } => {
                if *weight == 0.0 {
                    return zero_indicator(u);
                }
                let c_term = center.as_ref().map_or(0.0, |c| dot(u, c));
                dot(u, u) / (2.0 * weight) + c_term
            }
            ProxFunction::Box { lower, upper } => u
                .iter()
                .map(|&v| {
                    if v > 0.0 {
                        upper * v
                    } else if v < 0.0 {
                        lower * v
                    } else {
                        0.0
                    }
                })
                .sum(),
            ProxFunction::Singleton { point } => point.as_ref().map_or(0.0, |c| dot(u, c)),
        }
    }
}

/// Soft thresholding, the prox of `γ‖·‖₁`.
pub fn prox_l1(x: &[f64], gamma: f64) -> Result<Vec<f64>> {
    ProxFunction::L1 { weight: 1.0 }.prox(x, gamma)
}

/// `prox_{γ g*}(x)` via the Moreau identity `x = prox_{γg*}(x) + γ prox_{g/γ}(x/γ)`.
pub fn prox_conjugate(g: &ProxFunction, x: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_step(gamma)?;
    let steps = vec![gamma; x.len()];
    let mut out = vec![0.0; x.len()];
    g.conjugate_prox_diag(x, &steps, &mut out);
    Ok(out)
}

/// User-supplied resolvent `(x, γ) ↦ J_{γA} x` for a scalar step.
#[derive(Clone)]
pub struct CustomResolvent {
    pub name: String,
    pub eval: Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for CustomResolvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomResolvent({})", self.name)
    }
}

/// Resolvent `J_{γA} = (I + γA)⁻¹` of a maximally monotone operator.
#[derive(Debug, Clone)]
pub enum Resolvent {
    /// `A = ∂f`, so `J_{γA} = prox_{γf}`.
    Subdifferential(ProxFunction),
    /// `A = M` for an explicit monotone matrix; solved densely.
    Linear(DMatrix<f64>),
    Custom(CustomResolvent),
}

impl Resolvent {
    pub fn zero() -> Self {
        Resolvent::Subdifferential(ProxFunction::Zero)
    }

    /// Validates a linear monotone operator (`xᵀMx ≥ 0`).
    pub fn linear(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::invalid("linear resolvent needs a square matrix"));
        }
        let sym = (&m + m.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().min();
        let scale = m.amax().max(1.0);
        if min_eig < -1e-12 * scale {
            return Err(Error::invalid(format!(
                "linear operator is not monotone (smallest symmetric eigenvalue {min_eig})"
            )));
        }
        Ok(Resolvent::Linear(m))
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        match self {
            Resolvent::Subdifferential(f) => f.check(dim),
            Resolvent::Linear(m) if m.nrows() != dim => Err(Error::invalid(format!(
                "linear resolvent is {}×{} but the block has dimension {dim}",
                m.nrows(),
                m.ncols()
            ))),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, x: &[f64], step: f64) -> Result<Vec<f64>> {
        check_step(step)?;
        let mut out = vec![0.0; x.len()];
        self.apply_diag(x, &vec![step; x.len()], &mut out)?;
        Ok(out)
    }

    /// `J_{DA} x = (I + DA)⁻¹ x` for a positive diagonal `D` given by `steps`.
    pub fn apply_diag(&self, x: &[f64], steps: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            Resolvent::Subdifferential(f) => {
                f.prox_diag(x, steps, out);
                Ok(())
            }
            Resolvent::Linear(m) => {
                let n = x.len();
                let mut sys = DMatrix::identity(n, n);
                for r in 0..n {
                    for c in 0..n {
                        sys[(r, c)] += steps[r] * m[(r, c)];
                    }
                }
                let sol = sys
                    .lu()
                    .solve(&DVector::from_column_slice(x))
                    .ok_or_else(|| Error::invalid("singular linear resolvent system"))?;
                out.copy_from_slice(sol.as_slice());
                Ok(())
            }
            Resolvent::Custom(c) => {
                let s0 = steps.first().copied().unwrap_or(1.0);
                if steps.iter().any(|&s| s != s0) {
                    return Err(Error::Unsupported(format!(
                        "resolvent '{}' is only available for scalar steps, not a nonconstant diagonal metric",
                        c.name
                    )));
                }
                let r = (c.eval)(x, s0);
                out.copy_from_slice(&r);
                Ok(())
            }
        }
    }
}

/// Resolvent of `A` in the metric induced by the diagonal `F`:
/// coordinate `i` of a separable prox uses step `F_i`.
pub fn prox_scaled(a: &Resolvent, f_diag: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if f_diag.len() != x.len() {
        return Err(Error::invalid("metric and point have different lengths"));
    }
    if let Some(&d) = f_diag.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::invalid(format!("metric entry {d} must be positive")));
    }
    let mut out = vec![0.0; x.len()];
    a.apply_diag(x, f_diag, &mut out)?;
    Ok(out)
}

/// Resolvent of `R B⁻¹` for a dual slot.
#[derive(Debug, Clone)]
pub enum DualResolvent {
    /// `B = ∂g`: the resolvent is the prox of `g*`, computed by the Moreau identity.
    Conjugate(ProxFunction),
    /// The resolvent of `B⁻¹` supplied directly.
    Inverse(Resolvent),
}

impl DualResolvent {
    pub fn check(&self, dim: usize) -> Result<()> {
        match self {
            DualResolvent::Conjugate(g) => g.check(dim),
            DualResolvent::Inverse(r) => r.check(dim),
        }
    }

    pub fn apply_diag(&self, x: &[f64], steps: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            DualResolvent::Conjugate(g) => {
                g.conjugate_prox_diag(x, steps, out);
                Ok(())
            }
            DualResolvent::Inverse(r) => r.apply_diag(x, steps, out),
        }
    }
}

/// Value and gradient of a user-supplied smooth convex function.
#[derive(Clone)]
pub struct CustomSmooth {
    pub name: String,
    pub value: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub gradient: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for CustomSmooth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomSmooth({})", self.name)
    }
}

#[derive(Debug, Clone)]
pub enum GradientKind {
    Zero { dim: usize },
    /// `½ xᵀQx + cᵀx + constant`.
    Quadratic {
        q: DMatrix<f64>,
        c: Vec<f64>,
        constant: f64,
    },
    Custom { dim: usize, inner: CustomSmooth },
}

/// Gradient of a convex differentiable function together with its cocoercivity
/// constant `ν` (the gradient is `1/ν`-Lipschitz). `ν = +∞` marks the zero gradient.
#[derive(Debug, Clone)]
pub struct SmoothGradient {
    kind: GradientKind,
    cocoercivity: f64,
}

impl SmoothGradient {
    pub fn zero(dim: usize) -> Self {
        Self {
            kind: GradientKind::Zero { dim },
            cocoercivity: f64::INFINITY,
        }
    }

    /// `x ↦ Qx + c` with `ν = 1/λ_max(Q)`.
    pub fn quadratic(q: DMatrix<f64>, c: Vec<f64>) -> Result<Self> {
        Self::quadratic_with_constant(q, c, 0.0)
    }

    pub fn quadratic_with_constant(q: DMatrix<f64>, c: Vec<f64>, constant: f64) -> Result<Self> {
        if !q.is_square() || q.nrows() != c.len() {
            return Err(Error::invalid(format!(
                "quadratic term is {}×{} with a linear term of length {}",
                q.nrows(),
                q.ncols(),
                c.len()
            )));
        }
        let scale = q.amax().max(1.0);
        if (&q - q.transpose()).amax() > 1e-12 * scale {
            return Err(Error::invalid("quadratic term Q is not symmetric"));
        }
        let lmax = largest_eigenvalue_psd(
            q.nrows(),
            |v, out| gemv_add(&q, v, out),
            POWER_ITERATION_CAP,
            POWER_ITERATION_TOL,
        );
        let cocoercivity = if lmax > 0.0 { 1.0 / lmax } else { f64::INFINITY };
        Ok(Self {
            kind: GradientKind::Quadratic { q, c, constant },
            cocoercivity,
        })
    }

    /// `½‖Kx − b‖² + (ρ/2)‖x‖²` written as a quadratic.
    pub fn least_squares(k: &DMatrix<f64>, b: &[f64], ridge: f64) -> Result<Self> {
        if k.nrows() != b.len() {
            return Err(Error::invalid("K and b have incompatible shapes"));
        }
        let bv = DVector::from_column_slice(b);
        let mut q = k.transpose() * k;
        for i in 0..q.nrows() {
            q[(i, i)] += ridge;
        }
        let q = (&q + q.transpose()) * 0.5;
        let c = -(k.transpose() * &bv);
        Self::quadratic_with_constant(q, c.as_slice().to_vec(), 0.5 * bv.norm_squared())
    }

    pub fn custom(dim: usize, inner: CustomSmooth, cocoercivity: f64) -> Result<Self> {
        if !(cocoercivity > 0.0) {
            return Err(Error::invalid("cocoercivity constant must be positive"));
        }
        Ok(Self {
            kind: GradientKind::Custom { dim, inner },
            cocoercivity,
        })
    }

    pub fn kind(&self) -> &GradientKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            GradientKind::Zero { dim } | GradientKind::Custom { dim, .. } => *dim,
            GradientKind::Quadratic { c, .. } => c.len(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, GradientKind::Zero { .. })
    }

    pub fn cocoercivity(&self) -> f64 {
        self.cocoercivity
    }

    pub fn lipschitz(&self) -> f64 {
        1.0 / self.cocoercivity
    }

    /// `out += ∇φ(x)`.
    pub fn gradient_add(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            GradientKind::Zero { .. } => {}
            GradientKind::Quadratic { q, c, .. } => {
                gemv_add(q, x, out);
                out.iter_mut().zip(c).for_each(|(o, ci)| *o += ci);
            }
            GradientKind::Custom { inner, .. } => {
                let g = (inner.gradient)(x);
                out.iter_mut().zip(&g).for_each(|(o, gi)| *o += gi);
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.gradient_add(x, &mut out);
        out
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.kind {
            GradientKind::Zero { .. } => 0.0,
            GradientKind::Quadratic { q, c, constant } => {
                let mut qx = vec![0.0; x.len()];
                gemv_add(q, x, &mut qx);
                0.5 * dot(x, &qx) + dot(c, x) + constant
            }
            GradientKind::Custom { inner, .. } => (inner.value)(x),
        }
    }

    /// Cocoercivity of `D^{1/2} ∇φ D^{1/2}` for a positive diagonal `D`.
    ///
    /// Exact for quadratics; for custom functions the bound `ν / max D` is returned.
    pub fn scaled_cocoercivity(&self, diag: &[f64]) -> f64 {
        match &self.kind {
            GradientKind::Zero { .. } => f64::INFINITY,
            GradientKind::Quadratic { q, .. } => {
                let h: Vec<f64> = diag.iter().map(|d| d.sqrt()).collect();
                let lmax = largest_eigenvalue_psd(
                    q.nrows(),
                    |v, out| {
                        let hv: Vec<f64> = v.iter().zip(&h).map(|(a, b)| a * b).collect();
                        gemv_add(q, &hv, out);
                        out.iter_mut().zip(&h).for_each(|(o, b)| *o *= b);
                    },
                    POWER_ITERATION_CAP,
                    POWER_ITERATION_TOL,
                );
                if lmax > 0.0 {
                    1.0 / lmax
                } else {
                    f64::INFINITY
                }
            }
            GradientKind::Custom { .. } => {
                let dmax = diag.iter().cloned().fold(0.0, f64::max);
                self.cocoercivity / dmax
            }
        }
    }

    /// `φ*(u)` where it has a closed form: zero, or a quadratic with positive definite `Q`.
    pub fn conjugate_value(&self, u: &[f64]) -> Option<f64> {
        match &self.kind {
            GradientKind::Zero { .. } => Some(if u.iter().all(|&v| v == 0.0) {
                0.0
            } else {
                f64::INFINITY
            }),
            GradientKind::Quadratic { q, c, constant } => {
                let chol = q.clone().cholesky()?;
                let shifted = DVector::from_iterator(u.len(), u.iter().zip(c).map(|(a, b)| a - b));
                let sol = chol.solve(&shifted);
                Some(0.5 * shifted.dot(&sol) - constant)
            }
            GradientKind::Custom { .. } => None,
        }
    }
}

/// `x ↦ Qx + c` for symmetric positive semidefinite `Q`.
pub fn grad_quadratic(q: DMatrix<f64>, c: Vec<f64>) -> Result<SmoothGradient> {
    SmoothGradient::quadratic(q, c)
}

/// Averagedness constant of `T₁ ∘ T₂` for a `β₁`-averaged `T₁` and `β₂`-averaged `T₂`.
pub fn compose_averaged(beta1: f64, beta2: f64) -> Result<f64> {
    for b in [beta1, beta2] {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::invalid(format!("averagedness constant {b} is outside (0, 1)")));
        }
    }
    Ok((beta1 + beta2 - 2.0 * beta1 * beta2) / (1.0 - beta1 * beta2))
}

/// An operator on a block space that can be evaluated one output block at a time.
pub trait BlockMap: Send + Sync {
    fn layout(&self) -> &BlockLayout;

    /// Writes block `i` of `T(x)` into `out`.
    fn eval_block(&self, i: usize, x: &BlockVector, out: &mut [f64]);

    fn eval(&self, x: &BlockVector) -> BlockVector {
        let mut y = BlockVector::zeros(self.layout());
        for i in 0..self.layout().num_blocks() {
            self.eval_block(i, x, y.block_mut(i));
        }
        y
    }
}

/// A map known only as a whole; block evaluation evaluates everything.
pub struct FullMap<F> {
    layout: BlockLayout,
    f: F,
}

impl<F> FullMap<F>
where
    F: Fn(&BlockVector) -> BlockVector + Send + Sync,
{
    pub fn new(layout: &BlockLayout, f: F) -> Self {
        Self {
            layout: layout.clone(),
            f,
        }
    }
}

impl<F> BlockMap for FullMap<F>
where
    F: Fn(&BlockVector) -> BlockVector + Send + Sync,
{
    fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    fn eval_block(&self, i: usize, x: &BlockVector, out: &mut [f64]) {
        out.copy_from_slice((self.f)(x).block(i));
    }

    fn eval(&self, x: &BlockVector) -> BlockVector {
        (self.f)(x)
    }
}

/// A map given block by block: `f(i, x, out)` writes `T_i(x)`.
pub struct BlockwiseMap<F> {
    layout: BlockLayout,
    f: F,
}

impl<F> BlockwiseMap<F>
where
    F: Fn(usize, &BlockVector, &mut [f64]) + Send + Sync,
{
    pub fn new(layout: &BlockLayout, f: F) -> Self {
        Self {
            layout: layout.clone(),
            f,
        }
    }
}

impl<F> BlockMap for BlockwiseMap<F>
where
    F: Fn(usize, &BlockVector, &mut [f64]) + Send + Sync,
{
    fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    fn eval_block(&self, i: usize, x: &BlockVector, out: &mut [f64]) {
        (self.f)(i, x, out)
    }
}

pub struct IdentityMap {
    layout: BlockLayout,
}

impl IdentityMap {
    pub fn new(layout: &BlockLayout) -> Self {
        Self {
            layout: layout.clone(),
        }
    }
}

impl BlockMap for IdentityMap {
    fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    fn eval_block(&self, i: usize, x: &BlockVector, out: &mut [f64]) {
        out.copy_from_slice(x.block(i));
    }
}

/// A `β`-averaged map `T = (1 − β) I + β R` with `R` nonexpansive.
///
/// `β = 1` is accepted as the degenerate (merely nonexpansive) case.
#[derive(Clone)]
pub struct AveragedOperator {
    map: Arc<dyn BlockMap>,
    beta: f64,
}

impl fmt::Debug for AveragedOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AveragedOperator").field("beta", &self.beta).finish()
    }
}

impl AveragedOperator {
    pub fn new(map: Arc<dyn BlockMap>, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::invalid(format!("averagedness constant {beta} is outside (0, 1]")));
        }
        Ok(Self { map, beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn map(&self) -> &Arc<dyn BlockMap> {
        &self.map
    }
}

impl BlockMap for AveragedOperator {
    fn layout(&self) -> &BlockLayout {
        self.map.layout()
    }

    fn eval_block(&self, i: usize, x: &BlockVector, out: &mut [f64]) {
        self.map.eval_block(i, x, out)
    }

    fn eval(&self, x: &BlockVector) -> BlockVector {
        self.map.eval(x)
    }
}

/// The nonexpansive core `V = (1 − 1/β) I + (1/β) T` of a `β`-averaged `T`.
pub struct RelaxationCore {
    inner: AveragedOperator,
}

impl BlockMap for RelaxationCore {
    fn layout(&self) -> &BlockLayout {
        self.inner.layout()
    }

    fn eval_block(&self, i: usize, x: &BlockVector, out: &mut [f64]) {
        self.inner.eval_block(i, x, out);
        let inv = 1.0 / self.inner.beta;
        for (o, &xi) in out.iter_mut().zip(x.block(i)) {
            *o = (1.0 - inv) * xi + inv * *o;
        }
    }
}

pub fn averaged_relaxation_map(t: &AveragedOperator) -> RelaxationCore {
    RelaxationCore { inner: t.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimiser of `γ|y| + ½(x − y)²`, found by bisection on the monotone optimality map
    /// `y ↦ y − x + γ sign(y)`.
    fn bisect_prox_l1(x: f64, gamma: f64) -> f64 {
        let phi = |y: f64| y - x + gamma * if y > 0.0 { 1.0 } else if y < 0.0 { -1.0 } else { 0.0 };
        let (mut lo, mut hi) = (-x.abs() - gamma - 1.0, x.abs() + gamma + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn prox_l1_examples() {
        assert_eq!(prox_l1(&[0.0, 0.0], 1.0).unwrap(), vec![0.0, 0.0]);

        let got = prox_l1(&[2.0, -0.5], 1.0).unwrap();
        let oracle = [bisect_prox_l1(2.0, 1.0), bisect_prox_l1(-0.5, 1.0)];
        assert_abs_diff_eq!(oracle[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(oracle[1], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(got[0], oracle[0], epsilon = 1e-9);
        assert_abs_diff_eq!(got[1], oracle[1], epsilon = 1e-9);

        let got = prox_l1(&[3.0], 0.001).unwrap();
        let oracle = bisect_prox_l1(3.0, 0.001);
        assert_abs_diff_eq!(oracle, 2.999, epsilon = 1e-9);
        assert_abs_diff_eq!(got[0], oracle, epsilon = 1e-9);

        assert!(prox_l1(&[1.0], 0.0).is_err());
        assert!(prox_l1(&[1.0], -1.0).is_err());
    }

    #[test]
    fn prox_scaled_examples() {
        let zero = Resolvent::zero();
        assert_eq!(prox_scaled(&zero, &[0.3, 7.0], &[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);

        let l1 = Resolvent::Subdifferential(ProxFunction::L1 { weight: 1.0 });
        assert_eq!(prox_scaled(&l1, &[1.0, 2.0], &[2.0, 4.0]).unwrap(), vec![1.0, 2.0]);

        let sq = Resolvent::Subdifferential(ProxFunction::SquaredL2 { weight: 1.0, center: None });
        assert_eq!(prox_scaled(&sq, &[1.0], &[3.0]).unwrap(), vec![1.5]);

        // constant metric equals the plain prox
        let x = [0.7, -2.0, 5.0];
        assert_eq!(
            prox_scaled(&l1, &[0.5; 3], &x).unwrap(),
            prox_l1(&x, 0.5).unwrap()
        );
    }

    #[test]
    fn prox_scaled_rejects_nonseparable_with_varying_metric() {
        let custom = Resolvent::Custom(CustomResolvent {
            name: "rotation-resolvent".into(),
            eval: Arc::new(|x, _| x.to_vec()),
        });
        assert!(prox_scaled(&custom, &[1.0, 1.0], &[1.0, 2.0]).is_ok());
        assert!(matches!(
            prox_scaled(&custom, &[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn linear_resolvent_solves_the_system() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 3.0]);
        let r = Resolvent::linear(m.clone()).unwrap();
        let x = [1.0, -2.0];
        let z = r.apply(&x, 0.5).unwrap();
        let back = DVector::from_column_slice(&z) + (&m * DVector::from_column_slice(&z)) * 0.5;
        assert_abs_diff_eq!(back[0], x[0], epsilon = 1e-12);
        assert_abs_diff_eq!(back[1], x[1], epsilon = 1e-12);
        assert!(Resolvent::linear(DMatrix::from_row_slice(1, 1, &[-1.0])).is_err());
    }

    #[test]
    fn prox_conjugate_examples() {
        let l1 = ProxFunction::L1 { weight: 1.0 };
        assert_eq!(prox_conjugate(&l1, &[2.0, -0.5], 1.0).unwrap(), vec![1.0, -0.5]);

        let zero = ProxFunction::Zero;
        let p = prox_conjugate(&zero, &[3.0, -1.25], 0.7).unwrap();
        assert!(p.iter().all(|v| v.abs() <= 1e-15));

        assert!(prox_conjugate(&l1, &[1.0], 0.0).is_err());
    }

    #[test]
    fn moreau_identity_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let funcs = toolbox(3);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let gamma = rng.gen_range(0.05..5.0);
            for g in &funcs {
                let c = prox_conjugate(g, &x, gamma).unwrap();
                let scaled: Vec<f64> = x.iter().map(|v| v / gamma).collect();
                let p = g.prox(&scaled, 1.0 / gamma).unwrap();
                let res: f64 = (0..3)
                    .map(|i| (x[i] - c[i] - gamma * p[i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(res <= 1e-12, "{g}: residual {res}");
            }
        }
    }

    fn toolbox(dim: usize) -> Vec<ProxFunction> {
        vec![
            ProxFunction::Zero,
            ProxFunction::L1 { weight: 0.7 },
            ProxFunction::SquaredL2 { weight: 2.0, center: None },
            ProxFunction::SquaredL2 { weight: 0.5, center: Some(vec![1.0; dim]) },
            ProxFunction::Box { lower: -1.0, upper: 0.5 },
            ProxFunction::Singleton { point: Some(vec![0.25; dim]) },
        ]
    }

    #[test]
    fn toolbox_proxes_are_firmly_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for f in toolbox(4) {
            for _ in 0..1000 {
                let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let g = rng.gen_range(0.01..4.0);
                let (px, py) = (f.prox(&x, g).unwrap(), f.prox(&y, g).unwrap());
                let d: Vec<f64> = px.iter().zip(&py).map(|(a, b)| a - b).collect();
                let e: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
                assert!(dot(&d, &d) <= dot(&e, &d) + 1e-10, "{f}");
            }
        }
    }

    #[test]
    fn conjugate_values_satisfy_fenchel_young() {
        // f(x) + f*(u) ≥ ⟨x, u⟩, with equality at u ∈ ∂f(x); the prox gives such a pair.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for f in toolbox(3) {
            for _ in 0..100 {
                let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let x = f.prox(&v, 1.0).unwrap();
                let u: Vec<f64> = v.iter().zip(&x).map(|(a, b)| a - b).collect();
                let gap = f.value(&x) + f.conjugate_value(&u) - dot(&x, &u);
                assert!(gap.abs() <= 1e-12, "{f}: {gap}");
            }
        }
    }

    #[test]
    fn grad_quadratic_examples() {
        let z = grad_quadratic(DMatrix::zeros(2, 2), vec![0.0, 0.0]).unwrap();
        assert_eq!(z.gradient(&[3.0, -1.0]), vec![0.0, 0.0]);
        assert!(z.cocoercivity().is_infinite());

        let id = grad_quadratic(DMatrix::identity(2, 2), vec![0.0, 0.0]).unwrap();
        assert_eq!(id.gradient(&[1.0, 2.0]), vec![1.0, 2.0]);
        assert_abs_diff_eq!(id.cocoercivity(), 1.0, epsilon = 1e-12);

        let d = grad_quadratic(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0])), vec![1.0, 0.0])
            .unwrap();
        assert_eq!(d.gradient(&[1.0, 1.0]), vec![3.0, 4.0]);
        assert_abs_diff_eq!(d.cocoercivity(), 0.25, epsilon = 1e-9);

        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(grad_quadratic(asym, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_and_lipschitz_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = SmoothGradient::least_squares(&k, &b, 0.3).unwrap();
        let h = 1e-6;
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let grad = g.gradient(&x);
            for i in 0..4 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd = (g.value(&xp) - g.value(&xm)) / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-5 * grad[i].abs().max(1.0));
            }
            let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let gy = g.gradient(&y);
            let dg: f64 = grad.iter().zip(&gy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dx: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dg <= g.lipschitz() * dx + 1e-8);
        }
        // value at the least-squares point equals ½‖Kx − b‖² + (ρ/2)‖x‖²
        let x = [0.1, -0.2, 0.3, 0.4];
        let r = &k * DVector::from_column_slice(&x) - DVector::from_column_slice(&b);
        let direct = 0.5 * r.norm_squared() + 0.15 * dot(&x, &x);
        assert_abs_diff_eq!(g.value(&x), direct, epsilon = 1e-12);
    }

    #[test]
    fn scaled_cocoercivity_of_quadratic() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let g = grad_quadratic(q, vec![0.0, 0.0]).unwrap();
        // D^{1/2} Q D^{1/2} = diag(1, 0.5) for D = (1/4, 1/2)
        assert_abs_diff_eq!(g.scaled_cocoercivity(&[0.25, 0.5]), 1.0, epsilon = 1e-9);
        assert!(SmoothGradient::zero(3).scaled_cocoercivity(&[1.0; 3]).is_infinite());
    }

    #[test]
    fn quadratic_conjugate_value() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let g = SmoothGradient::quadratic_with_constant(q, vec![1.0, 0.0], 0.5).unwrap();
        // Fenchel–Young equality at u = ∇φ(x)
        let x = [0.3, -0.7];
        let u = g.gradient(&x);
        let fy = g.value(&x) + g.conjugate_value(&u).unwrap() - dot(&x, &u);
        assert_abs_diff_eq!(fy, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn compose_averaged_examples() {
        assert_abs_diff_eq!(compose_averaged(0.5, 0.5).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(compose_averaged(0.2, 0.7).unwrap(), compose_averaged(0.7, 0.2).unwrap());
        assert_abs_diff_eq!(compose_averaged(1e-9, 0.5).unwrap(), 0.5, epsilon = 1e-8);
        assert!(compose_averaged(0.0, 0.5).is_err());
        assert!(compose_averaged(0.5, 1.0).is_err());
    }

    fn rotation(theta: f64) -> impl Fn(&BlockVector) -> BlockVector + Send + Sync + Clone {
        move |x: &BlockVector| {
            let (c, s) = (theta.cos(), theta.sin());
            let d = x.data();
            BlockVector::from_vec(x.layout(), vec![c * d[0] - s * d[1], s * d[0] + c * d[1]])
                .unwrap()
        }
    }

    #[test]
    fn relaxation_core_examples() {
        let l = BlockLayout::new(vec![2]).unwrap();
        let id = AveragedOperator::new(Arc::new(IdentityMap::new(&l)), 0.3).unwrap();
        let v = averaged_relaxation_map(&id);
        let x = BlockVector::from_vec(&l, vec![1.5, -2.0]).unwrap();
        assert_eq!(v.eval(&x), x);

        // T = (1−β)I + βR with R a rotation; V recovers R.
        let beta = 0.4;
        let r = rotation(0.9);
        let r2 = r.clone();
        let t = FullMap::new(&l, move |x: &BlockVector| {
            crate::hilbert::axpy(beta, &r2(x), &x.scaled(1.0 - beta)).unwrap()
        });
        let t = AveragedOperator::new(Arc::new(t), beta).unwrap();
        let v = averaged_relaxation_map(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = BlockVector::from_vec(&l, vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
                .unwrap();
            assert!(v.eval(&x).distance(&r(&x)).unwrap() <= 1e-12);
            // T = (1−β)I + βV reconstructs T
            let back = crate::hilbert::axpy(beta, &v.eval(&x), &x.scaled(1.0 - beta)).unwrap();
            assert!(back.distance(&t.eval(&x)).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn relaxation_core_preserves_fixed_points() {
        // T(x) = 0.5 (A x + b) with ‖A‖ < 1 is a contraction; V has the same fixed point.
        let l = BlockLayout::new(vec![2]).unwrap();
        let t = FullMap::new(&l, |x: &BlockVector| {
            let d = x.data();
            BlockVector::from_vec(
                x.layout(),
                vec![0.5 * (0.3 * d[0] - 0.2 * d[1] + 1.0), 0.5 * (0.1 * d[0] + 0.4 * d[1] - 2.0)],
            )
            .unwrap()
        });
        let t = AveragedOperator::new(Arc::new(t), 0.5).unwrap();
        let mut x = BlockVector::zeros(&l);
        for _ in 0..200 {
            x = t.eval(&x);
        }
        let v = averaged_relaxation_map(&t);
        assert!(v.eval(&x).distance(&x).unwrap() <= 1e-10);
    }
}
