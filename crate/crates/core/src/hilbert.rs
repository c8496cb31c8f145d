//! Block vectors over a direct sum `H_1 ⊕ … ⊕ H_m` of Euclidean spaces.
//!
//! Every space here is finite dimensional and real. Block sparsity is the only sparsity
//! that is represented: a [`LinearBlockOperator`] is a grid of optional dense blocks.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Relative-change stopping threshold used by the power iterations in this crate.
pub const POWER_ITERATION_TOL: f64 = 1e-10;
/// Iteration cap used by the power iterations in this crate.
pub const POWER_ITERATION_CAP: usize = 5000;

const POWER_ITERATION_SEED: u64 = 0x5eed_0f_b10c;

#[derive(Debug)]
struct LayoutInner {
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

/// Partition of a flat coordinate vector into `m` consecutive blocks.
///
/// Cloning is cheap; the dimensions are shared.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    inner: Arc<LayoutInner>,
}

impl PartialEq for BlockLayout {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner) || self.inner.dims == other.inner.dims
    }
}

impl Eq for BlockLayout {}

impl BlockLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::invalid("a block layout needs at least one block"));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::invalid(format!("block {i} has dimension 0")));
        }
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        offsets.push(0);
        for d in &dims {
            offsets.push(offsets.last().unwrap() + d);
        }
        Ok(Self {
            inner: Arc::new(LayoutInner { dims, offsets }),
        })
    }

    /// `m` blocks of dimension `dim` each.
    pub fn uniform(m: usize, dim: usize) -> Result<Self> {
        Self::new(vec![dim; m])
    }

    /// Splits `total` coordinates into `m` nearly equal consecutive blocks.
    pub fn split(total: usize, m: usize) -> Result<Self> {
        if m == 0 || m > total {
            return Err(Error::invalid(format!(
                "cannot split {total} coordinates into {m} nonempty blocks"
            )));
        }
        let base = total / m;
        let extra = total % m;
        Self::new((0..m).map(|i| base + usize::from(i < extra)).collect())
    }

    pub fn num_blocks(&self) -> usize {
        self.inner.dims.len()
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.inner.dims
    }

    pub fn dim(&self, i: usize) -> usize {
        self.inner.dims[i]
    }

    pub fn total_dim(&self) -> usize {
        *self.inner.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        self.inner.offsets[i]..self.inner.offsets[i + 1]
    }

    /// Layout of `self ⊕ other`.
    pub fn concat(&self, other: &BlockLayout) -> BlockLayout {
        let mut dims = self.inner.dims.clone();
        dims.extend_from_slice(&other.inner.dims);
        BlockLayout::new(dims).expect("concatenation of valid layouts is valid")
    }

    fn ensure_eq(&self, other: &BlockLayout) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::LayoutMismatch {
                expected: self.inner.dims.clone(),
                found: other.inner.dims.clone(),
            })
        }
    }
}

/// An element `x = (x_1, …, x_m)` of the direct sum described by its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    layout: BlockLayout,
    data: Vec<f64>,
}

impl BlockVector {
    pub fn zeros(layout: &BlockLayout) -> Self {
        Self {
            layout: layout.clone(),
            data: vec![0.0; layout.total_dim()],
        }
    }

    pub fn filled(layout: &BlockLayout, value: f64) -> Self {
        Self {
            layout: layout.clone(),
            data: vec![value; layout.total_dim()],
        }
    }

    pub fn from_vec(layout: &BlockLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total_dim() {
            return Err(Error::invalid(format!(
                "data has {} entries but the layout {:?} needs {}",
                data.len(),
                layout.block_dims(),
                layout.total_dim()
            )));
        }
        Ok(Self {
            layout: layout.clone(),
            data,
        })
    }

    /// Builds a vector (and its layout) from per-block coordinates.
    pub fn from_blocks(blocks: Vec<Vec<f64>>) -> Result<Self> {
        let layout = BlockLayout::new(blocks.iter().map(Vec::len).collect())?;
        let data = blocks.into_iter().flatten().collect();
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.num_blocks()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[self.layout.range(i)]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.layout.range(i);
        &mut self.data[r]
    }

    pub fn ensure_same_layout(&self, other: &BlockVector) -> Result<()> {
        self.layout.ensure_eq(&other.layout)
    }

    pub fn dot(&self, other: &BlockVector) -> Result<f64> {
        self.ensure_same_layout(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self - other`.
    pub fn sub(&self, other: &BlockVector) -> Result<BlockVector> {
        axpy(-1.0, other, self)
    }

    pub fn scaled(&self, a: f64) -> BlockVector {
        BlockVector {
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| a * v).collect(),
        }
    }

    /// `‖self − other‖`.
    pub fn distance(&self, other: &BlockVector) -> Result<f64> {
        self.ensure_same_layout(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// The activation-weighted squared norm `Σ_i ‖x_i‖² / p_i`.
    pub fn weighted_norm_sq(&self, probs: &[f64]) -> Result<f64> {
        if probs.len() != self.num_blocks() {
            return Err(Error::invalid(format!(
                "{} block probabilities given for {} blocks",
                probs.len(),
                self.num_blocks()
            )));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, &p)| !(p > 0.0 && p <= 1.0))
        {
            return Err(Error::invalid(format!(
                "block probability p_{i} = {p} is outside (0, 1]"
            )));
        }
        Ok((0..self.num_blocks())
            .map(|i| {
                let b = self.block(i);
                dot(b, b) / probs[i]
            })
            .sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Returns `a·x + y`.
pub fn axpy(a: f64, x: &BlockVector, y: &BlockVector) -> Result<BlockVector> {
    x.ensure_same_layout(y)?;
    Ok(BlockVector {
        layout: y.layout.clone(),
        data: x.data.iter().zip(&y.data).map(|(u, v)| a * u + v).collect(),
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out += M x` for a dense block.
pub(crate) fn gemv_add(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.ncols(), x.len());
    debug_assert_eq!(m.nrows(), out.len());
    for (c, &xc) in x.iter().enumerate() {
        if xc == 0.0 {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(m.column(c).iter()) {
            *o += a * xc;
        }
    }
}

/// `out += Mᵀ y` for a dense block.
pub(crate) fn gemv_t_add(m: &DMatrix<f64>, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.nrows(), y.len());
    debug_assert_eq!(m.ncols(), out.len());
    for (c, o) in out.iter_mut().enumerate() {
        *o += dot(m.column(c).as_slice(), y);
    }
}

/// A `q × p` grid of couplings `L_{k,j}: H_j → G_k`, each either absent or dense.
///
/// Every row and every column carries at least one present block, so each dual block
/// reads some primal block and each primal block is read by some dual block.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBlockOperator {
    rows: BlockLayout,
    cols: BlockLayout,
    blocks: Vec<Option<DMatrix<f64>>>,
    row_support: Vec<Vec<usize>>,
    col_support: Vec<Vec<usize>>,
}

impl LinearBlockOperator {
    /// `blocks` is row-major: entry `k * p + j` holds `L_{k,j}`.
    pub fn new(
        rows: BlockLayout,
        cols: BlockLayout,
        blocks: Vec<Option<DMatrix<f64>>>,
    ) -> Result<Self> {
        let (q, p) = (rows.num_blocks(), cols.num_blocks());
        if blocks.len() != q * p {
            return Err(Error::invalid(format!(
                "a {q}×{p} block grid needs {} entries, got {}",
                q * p,
                blocks.len()
            )));
        }
        let mut row_support = vec![Vec::new(); q];
        let mut col_support = vec![Vec::new(); p];
        for k in 0..q {
            for j in 0..p {
                if let Some(m) = &blocks[k * p + j] {
                    if m.nrows() != rows.dim(k) || m.ncols() != cols.dim(j) {
                        return Err(Error::invalid(format!(
                            "block ({k},{j}) has shape {}×{} but the layouts require {}×{}",
                            m.nrows(),
                            m.ncols(),
                            rows.dim(k),
                            cols.dim(j)
                        )));
                    }
                    row_support[k].push(j);
                    col_support[j].push(k);
                }
            }
        }
        if let Some(k) = row_support.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!(
                "row {k} of the linear operator has no present block: every dual block must read at least one primal block"
            )));
        }
        if let Some(j) = col_support.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!(
                "column {j} of the linear operator has no present block: every primal block must feed at least one dual block"
            )));
        }
        Ok(Self {
            rows,
            cols,
            blocks,
            row_support,
            col_support,
        })
    }

    /// Cuts a dense matrix along the two layouts; all-zero blocks become absent.
    pub fn from_dense(rows: BlockLayout, cols: BlockLayout, full: &DMatrix<f64>) -> Result<Self> {
        if full.nrows() != rows.total_dim() || full.ncols() != cols.total_dim() {
            return Err(Error::invalid(format!(
                "dense matrix is {}×{} but the layouts span {}×{}",
                full.nrows(),
                full.ncols(),
                rows.total_dim(),
                cols.total_dim()
            )));
        }
        let mut blocks = Vec::with_capacity(rows.num_blocks() * cols.num_blocks());
        for k in 0..rows.num_blocks() {
            for j in 0..cols.num_blocks() {
                let (rr, cr) = (rows.range(k), cols.range(j));
                let b = full
                    .view((rr.start, cr.start), (rr.len(), cr.len()))
                    .into_owned();
                blocks.push(if b.iter().all(|&v| v == 0.0) { None } else { Some(b) });
            }
        }
        Self::new(rows, cols, blocks)
    }

    /// Block-diagonal identity on a layout.
    pub fn identity(layout: &BlockLayout) -> Self {
        let m = layout.num_blocks();
        let mut blocks = vec![None; m * m];
        for i in 0..m {
            blocks[i * m + i] = Some(DMatrix::identity(layout.dim(i), layout.dim(i)));
        }
        Self::new(layout.clone(), layout.clone(), blocks).expect("identity is well formed")
    }

    pub fn row_layout(&self) -> &BlockLayout {
        &self.rows
    }

    pub fn col_layout(&self) -> &BlockLayout {
        &self.cols
    }

    pub fn block(&self, k: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.blocks[k * self.cols.num_blocks() + j].as_ref()
    }

    /// Primal blocks `j` with `L_{k,j}` present.
    pub fn row_support(&self, k: usize) -> &[usize] {
        &self.row_support[k]
    }

    /// Dual blocks `k` with `L_{k,j}` present.
    pub fn col_support(&self, j: usize) -> &[usize] {
        &self.col_support[j]
    }

    pub fn present_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_some()).count()
    }

    /// `out += Σ_{j ∈ row_support(k)} L_{k,j} x_j`; returns the number of block products.
    pub fn row_apply_add(&self, k: usize, x: &BlockVector, out: &mut [f64]) -> usize {
        for &j in &self.row_support[k] {
            gemv_add(self.block(k, j).unwrap(), x.block(j), out);
        }
        self.row_support[k].len()
    }

    /// `out += Σ_{k ∈ col_support(j)} L_{k,j}ᵀ y_k`; returns the number of block products.
    pub fn col_adjoint_add(&self, j: usize, y: &BlockVector, out: &mut [f64]) -> usize {
        for &k in &self.col_support[j] {
            gemv_t_add(self.block(k, j).unwrap(), y.block(k), out);
        }
        self.col_support[j].len()
    }

    pub fn apply(&self, x: &BlockVector) -> Result<BlockVector> {
        self.cols.ensure_eq(x.layout())?;
        let mut out = BlockVector::zeros(&self.rows);
        for k in 0..self.rows.num_blocks() {
            let r = self.rows.range(k);
            self.row_apply_add(k, x, &mut out.data[r]);
        }
        Ok(out)
    }

    pub fn apply_adjoint(&self, y: &BlockVector) -> Result<BlockVector> {
        self.rows.ensure_eq(y.layout())?;
        let mut out = BlockVector::zeros(&self.cols);
        for j in 0..self.cols.num_blocks() {
            let r = self.cols.range(j);
            self.col_adjoint_add(j, y, &mut out.data[r]);
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut full = DMatrix::zeros(self.rows.total_dim(), self.cols.total_dim());
        for k in 0..self.rows.num_blocks() {
            for &j in &self.row_support[k] {
                let (rr, cr) = (self.rows.range(k), self.cols.range(j));
                full.view_mut((rr.start, cr.start), (rr.len(), cr.len()))
                    .copy_from(self.block(k, j).unwrap());
            }
        }
        full
    }
}

/// Positive diagonal metrics `F = diag(F_1, …, F_p)` on the primal side and
/// `R = diag(R_1, …, R_q)` on the dual side.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalPreconditioner {
    primal: BlockVector,
    dual: BlockVector,
}

impl DiagonalPreconditioner {
    pub fn new(primal: BlockVector, dual: BlockVector) -> Result<Self> {
        for (side, v) in [("primal", &primal), ("dual", &dual)] {
            if let Some(i) = v.data().iter().position(|&d| !(d > 0.0 && d.is_finite())) {
                return Err(Error::invalid(format!(
                    "{side} preconditioner entry {i} is {} but must be positive and finite",
                    v.data()[i]
                )));
            }
        }
        Ok(Self { primal, dual })
    }

    /// `F = τ I`, `R = σ I`.
    pub fn scalar(primal: &BlockLayout, dual: &BlockLayout, tau: f64, sigma: f64) -> Result<Self> {
        Self::new(BlockVector::filled(primal, tau), BlockVector::filled(dual, sigma))
    }

    pub fn identity(primal: &BlockLayout, dual: &BlockLayout) -> Self {
        Self::scalar(primal, dual, 1.0, 1.0).unwrap()
    }

    pub fn primal(&self) -> &BlockVector {
        &self.primal
    }

    pub fn dual(&self) -> &BlockVector {
        &self.dual
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite map given by its action.
///
/// Power iteration from a fixed seeded start; stops when the Rayleigh quotient changes
/// by less than `tol` relative, or after `iters` steps.
pub fn largest_eigenvalue_psd(
    dim: usize,
    apply: impl Fn(&[f64], &mut [f64]),
    iters: usize,
    tol: f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut mv = vec![0.0; dim];
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        mv.iter_mut().for_each(|x| *x = 0.0);
        apply(&v, &mut mv);
        let next = dot(&v, &mv);
        let n = norm(&mv);
        if n == 0.0 {
            return 0.0;
        }
        let done = (next - est).abs() <= tol * next.abs();
        est = next;
        if done {
            break;
        }
        for (a, b) in v.iter_mut().zip(&mv) {
            *a = b / n;
        }
    }
    est
}

/// Estimates `‖R^{1/2} L F^{1/2}‖` by power iteration on its normal operator.
///
/// The estimate is nondecreasing in `iters`.
pub fn operator_norm_estimate(
    l: &LinearBlockOperator,
    prec: &DiagonalPreconditioner,
    iters: usize,
    tol: f64,
) -> Result<f64> {
    l.col_layout().ensure_eq(prec.primal().layout())?;
    l.row_layout().ensure_eq(prec.dual().layout())?;
    if iters == 0 {
        return Err(Error::invalid("power iteration needs at least one step"));
    }
    let f_half: Vec<f64> = prec.primal().data().iter().map(|v| v.sqrt()).collect();
    let r_half: Vec<f64> = prec.dual().data().iter().map(|v| v.sqrt()).collect();
    let cols = l.col_layout().clone();

    // v ↦ ‖A v‖ with A = R½ L F½ and v of unit norm.
    let forward = |v: &[f64]| -> BlockVector {
        let t = BlockVector::from_vec(&cols, v.iter().zip(&f_half).map(|(a, b)| a * b).collect())
            .unwrap();
        let mut u = l.apply(&t).unwrap();
        u.data_mut().iter_mut().zip(&r_half).for_each(|(a, b)| *a *= b);
        u
    };

    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..cols.total_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut est = 0.0_f64;
    for _ in 0..iters {
        let mut u = forward(&v);
        let next = u.norm();
        if next == 0.0 {
            return Ok(0.0);
        }
        let done = (next - est).abs() <= tol * next;
        est = est.max(next);
        if done {
            break;
        }
        // v ← Aᵀ u / ‖Aᵀ u‖
        u.data_mut().iter_mut().zip(&r_half).for_each(|(a, b)| *a *= b);
        let mut back = l.apply_adjoint(&u)?.into_vec();
        back.iter_mut().zip(&f_half).for_each(|(a, b)| *a *= b);
        let nb = norm(&back);
        if nb == 0.0 {
            break;
        }
        v = back.into_iter().map(|x| x / nb).collect();
    }
    Ok(est)
}
