//! JSON problem specs.
//!
//! A spec names the block layouts, the present blocks of `L`, one descriptor per primal
//! and dual slot, and optionally the diagonal preconditioner. Matrices are written
//! row-major with explicit dimensions, inline or as a reference to a separate JSON file
//! holding the same object.

use std::fs;
use std::path::{Path, PathBuf};

use ibpd::hilbert::{operator_norm_estimate, BlockLayout, POWER_ITERATION_CAP, POWER_ITERATION_TOL};
use ibpd::operators::{DualResolvent, ProxFunction, Resolvent, SmoothGradient};
use ibpd::pd::{CompositeProblem, DualSlot, MonotoneBlockProblem, PrimalSlot};
use ibpd::{BlockVector, DiagonalPreconditioner, LinearBlockOperator};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const SPEC_SCHEMA_VERSION: u32 = 1;

/// Fraction of `1/‖L‖` used for both scalar steps when a spec gives no preconditioner.
pub const DEFAULT_STEP_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub schema_version: u32,
    pub name: String,
    pub primal_blocks: Vec<usize>,
    pub dual_blocks: Vec<usize>,
    /// Present blocks `L_{k,j}`; absent pairs are zero.
    pub linear: Vec<BlockEntry>,
    pub problem: SlotsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preconditioner: Option<PrecSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub row: usize,
    pub col: usize,
    pub matrix: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Inline(DenseMatrix),
    File { file: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter());
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_matrix(&self) -> std::result::Result<DMatrix<f64>, String> {
        if self.data.len() != self.rows * self.cols {
            return Err(format!(
                "{}×{} matrix needs {} entries, got {}",
                self.rows,
                self.cols,
                self.rows * self.cols,
                self.data.len()
            ));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

impl From<&DMatrix<f64>> for MatrixSpec {
    fn from(m: &DMatrix<f64>) -> Self {
        MatrixSpec::Inline(DenseMatrix::from_matrix(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SlotsSpec {
    /// `Σ f_j + h_j` on the primal side and `g_k □ l_k` on the dual side.
    Composite {
        primal: Vec<CompositePrimal>,
        dual: Vec<CompositeDual>,
    },
    /// General monotone slots given through their resolvents.
    Inclusion {
        primal: Vec<InclusionPrimal>,
        dual: Vec<InclusionDual>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositePrimal {
    pub f: ProxSpec,
    pub h: SmoothSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeDual {
    pub g: ProxSpec,
    /// Gradient of `l_k*`; zero means `l_k = ι_{0}`.
    pub lstar: SmoothSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionPrimal {
    pub resolvent: ResolventSpec,
    pub smooth: SmoothSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionDual {
    pub resolvent: DualResolventSpec,
    pub smooth: SmoothSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProxSpec {
    Zero,
    L1 {
        weight: f64,
    },
    SquaredL2 {
        weight: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    Box {
        lower: f64,
        upper: f64,
    },
    Singleton {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        point: Option<Vec<f64>>,
    },
}

impl ProxSpec {
    pub fn build(&self) -> ProxFunction {
        match self {
            ProxSpec::Zero => ProxFunction::Zero,
            ProxSpec::L1 { weight } => ProxFunction::L1 { weight: *weight },
            ProxSpec::SquaredL2 { weight, center } => ProxFunction::SquaredL2 {
                weight: *weight,
                center: center.clone(),
            },
            ProxSpec::Box { lower, upper } => ProxFunction::Box {
                lower: *lower,
                upper: *upper,
            },
            ProxSpec::Singleton { point } => ProxFunction::Singleton { point: point.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SmoothSpec {
    Zero,
    /// `½⟨x, Qx⟩ + ⟨c, x⟩ + constant`.
    Quadratic {
        q: MatrixSpec,
        c: Vec<f64>,
        #[serde(default)]
        constant: f64,
    },
    /// `(w/2)‖x − center‖²`.
    SquaredL2 {
        weight: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    /// `½‖Kx − b‖² + (ridge/2)‖x‖²`.
    LeastSquares {
        k: MatrixSpec,
        b: Vec<f64>,
        #[serde(default)]
        ridge: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResolventSpec {
    Subdifferential { f: ProxSpec },
    /// A monotone matrix `M`, resolvent `(I + γM)⁻¹`.
    Linear { m: MatrixSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DualResolventSpec {
    /// `B = ∂g`, resolvent of `B⁻¹` through the conjugate prox.
    Conjugate { g: ProxSpec },
    /// The operator `B⁻¹` itself.
    Inverse { resolvent: ResolventSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrecSpec {
    Scalar { tau: f64, sigma: f64 },
    Diagonal { primal: Vec<f64>, dual: Vec<f64> },
}

/// The problem a spec describes.
#[derive(Debug, Clone)]
pub enum Problem {
    Inclusion(MonotoneBlockProblem),
    Composite(CompositeProblem),
}

impl Problem {
    pub fn inclusion(&self) -> &MonotoneBlockProblem {
        match self {
            Problem::Inclusion(p) => p,
            Problem::Composite(c) => c.inclusion(),
        }
    }

    pub fn composite(&self) -> Option<&CompositeProblem> {
        match self {
            Problem::Composite(c) => Some(c),
            Problem::Inclusion(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedProblem {
    pub spec: ProblemSpec,
    pub problem: Problem,
    pub prec: DiagonalPreconditioner,
}

/// Reads, validates and builds a problem; matrix file references resolve relative to
/// the spec's directory.
pub fn load_problem(path: impl AsRef<Path>) -> Result<LoadedProblem> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| BenchError::io(path.display(), e))?;
    let spec = parse_spec(&text, &path.display().to_string())?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    build_problem(&spec, &base)
}

pub fn parse_spec(text: &str, location: &str) -> Result<ProblemSpec> {
    let spec: ProblemSpec = serde_json::from_str(text).map_err(|e| BenchError::parse(location, e))?;
    if spec.schema_version != SPEC_SCHEMA_VERSION {
        return Err(BenchError::parse(
            location,
            format!(
                "schema_version {} is not supported (expected {SPEC_SCHEMA_VERSION})",
                spec.schema_version
            ),
        ));
    }
    Ok(spec)
}

pub fn spec_to_string(spec: &ProblemSpec) -> String {
    serde_json::to_string_pretty(spec).expect("specs always serialize")
}

pub fn save_spec(spec: &ProblemSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, spec_to_string(spec) + "\n").map_err(|e| BenchError::io(path.display(), e))
}

struct Ctx<'a> {
    base: &'a Path,
}

impl Ctx<'_> {
    fn matrix(&self, m: &MatrixSpec, field: &str) -> Result<DMatrix<f64>> {
        match m {
            MatrixSpec::Inline(d) => d.to_matrix().map_err(|e| BenchError::spec(field, e)),
            MatrixSpec::File { file } => {
                let p: PathBuf = self.base.join(file);
                let text = fs::read_to_string(&p).map_err(|e| BenchError::io(p.display(), e))?;
                let d: DenseMatrix =
                    serde_json::from_str(&text).map_err(|e| BenchError::parse(p.display(), e))?;
                d.to_matrix().map_err(|e| BenchError::spec(field, e))
            }
        }
    }

    fn smooth(&self, s: &SmoothSpec, dim: usize, field: &str) -> Result<SmoothGradient> {
        let g = match s {
            SmoothSpec::Zero => Ok(SmoothGradient::zero(dim)),
            SmoothSpec::Quadratic { q, c, constant } => {
                let q = self.matrix(q, &format!("{field}.q"))?;
                SmoothGradient::quadratic_with_constant(q, c.clone(), *constant)
            }
            SmoothSpec::SquaredL2 { weight, center } => {
                if !(*weight >= 0.0 && weight.is_finite()) {
                    return Err(BenchError::spec(field, format!("weight {weight} must be nonnegative")));
                }
                let center = center.clone().unwrap_or_else(|| vec![0.0; dim]);
                if center.len() != dim {
                    return Err(BenchError::spec(
                        format!("{field}.center"),
                        format!("length {} but the block has dimension {dim}", center.len()),
                    ));
                }
                let c: Vec<f64> = center.iter().map(|v| -weight * v).collect();
                let constant = 0.5 * weight * center.iter().map(|v| v * v).sum::<f64>();
                SmoothGradient::quadratic_with_constant(DMatrix::identity(dim, dim) * *weight, c, constant)
            }
            SmoothSpec::LeastSquares { k, b, ridge } => {
                let k = self.matrix(k, &format!("{field}.k"))?;
                SmoothGradient::least_squares(&k, b, *ridge)
            }
        }
        .map_err(|e| BenchError::spec(field, e))?;
        if g.dim() != dim {
            return Err(BenchError::spec(
                field,
                format!("term has dimension {} but the block has dimension {dim}", g.dim()),
            ));
        }
        Ok(g)
    }

    fn resolvent(&self, r: &ResolventSpec, field: &str) -> Result<Resolvent> {
        match r {
            ResolventSpec::Subdifferential { f } => Ok(Resolvent::Subdifferential(f.build())),
            ResolventSpec::Linear { m } => {
                let m = self.matrix(m, &format!("{field}.m"))?;
                Resolvent::linear(m).map_err(|e| BenchError::spec(field, e))
            }
        }
    }
}

fn check_prox(f: &ProxFunction, dim: usize, field: &str) -> Result<()> {
    f.check(dim).map_err(|e| BenchError::spec(field, e))
}

pub fn build_problem(spec: &ProblemSpec, base: &Path) -> Result<LoadedProblem> {
    let ctx = Ctx { base };
    let cols = BlockLayout::new(spec.primal_blocks.clone()).map_err(|e| BenchError::spec("primal_blocks", e))?;
    let rows = BlockLayout::new(spec.dual_blocks.clone()).map_err(|e| BenchError::spec("dual_blocks", e))?;
    let (p, q) = (cols.num_blocks(), rows.num_blocks());
    let mut blocks: Vec<Option<DMatrix<f64>>> = vec![None; p * q];
    for (i, e) in spec.linear.iter().enumerate() {
        let field = format!("linear[{i}]");
        if e.row >= q || e.col >= p {
            return Err(BenchError::spec(
                field,
                format!("block ({}, {}) is outside the {q}×{p} grid", e.row, e.col),
            ));
        }
        if blocks[e.row * p + e.col].is_some() {
            return Err(BenchError::spec(field, format!("block ({}, {}) given twice", e.row, e.col)));
        }
        blocks[e.row * p + e.col] = Some(ctx.matrix(&e.matrix, &format!("{field}.matrix"))?);
    }
    let l = LinearBlockOperator::new(rows.clone(), cols.clone(), blocks).map_err(|e| BenchError::spec("linear", e))?;

    let problem = match &spec.problem {
        SlotsSpec::Composite { primal, dual } => {
            slot_counts(primal.len(), dual.len(), p, q)?;
            let mut f = Vec::new();
            let mut h = Vec::new();
            for (j, s) in primal.iter().enumerate() {
                let fj = s.f.build();
                check_prox(&fj, cols.dim(j), &format!("problem.primal[{j}].f"))?;
                f.push(fj);
                h.push(ctx.smooth(&s.h, cols.dim(j), &format!("problem.primal[{j}].h"))?);
            }
            let mut g = Vec::new();
            let mut lstar = Vec::new();
            for (k, s) in dual.iter().enumerate() {
                let gk = s.g.build();
                check_prox(&gk, rows.dim(k), &format!("problem.dual[{k}].g"))?;
                g.push(gk);
                lstar.push(ctx.smooth(&s.lstar, rows.dim(k), &format!("problem.dual[{k}].lstar"))?);
            }
            Problem::Composite(CompositeProblem::new(f, h, g, lstar, l).map_err(|e| BenchError::spec("problem", e))?)
        }
        SlotsSpec::Inclusion { primal, dual } => {
            slot_counts(primal.len(), dual.len(), p, q)?;
            let mut ps = Vec::new();
            for (j, s) in primal.iter().enumerate() {
                let field = format!("problem.primal[{j}]");
                let resolvent = ctx.resolvent(&s.resolvent, &format!("{field}.resolvent"))?;
                resolvent
                    .check(cols.dim(j))
                    .map_err(|e| BenchError::spec(format!("{field}.resolvent"), e))?;
                ps.push(PrimalSlot {
                    resolvent,
                    smooth: ctx.smooth(&s.smooth, cols.dim(j), &format!("{field}.smooth"))?,
                });
            }
            let mut ds = Vec::new();
            for (k, s) in dual.iter().enumerate() {
                let field = format!("problem.dual[{k}]");
                let resolvent = match &s.resolvent {
                    DualResolventSpec::Conjugate { g } => DualResolvent::Conjugate(g.build()),
                    DualResolventSpec::Inverse { resolvent } => {
                        DualResolvent::Inverse(ctx.resolvent(resolvent, &format!("{field}.resolvent"))?)
                    }
                };
                resolvent
                    .check(rows.dim(k))
                    .map_err(|e| BenchError::spec(format!("{field}.resolvent"), e))?;
                ds.push(DualSlot {
                    resolvent,
                    smooth: ctx.smooth(&s.smooth, rows.dim(k), &format!("{field}.smooth"))?,
                });
            }
            Problem::Inclusion(MonotoneBlockProblem::new(ps, ds, l).map_err(|e| BenchError::spec("problem", e))?)
        }
    };

    let prec = build_prec(spec.preconditioner.as_ref(), problem.inclusion().linear())?;
    Ok(LoadedProblem {
        spec: spec.clone(),
        problem,
        prec,
    })
}

fn slot_counts(np: usize, nq: usize, p: usize, q: usize) -> Result<()> {
    if np != p {
        return Err(BenchError::spec("problem.primal", format!("{np} slots for {p} primal blocks")));
    }
    if nq != q {
        return Err(BenchError::spec("problem.dual", format!("{nq} slots for {q} dual blocks")));
    }
    Ok(())
}

/// Scalar steps `τ = σ = 0.9/‖L‖` when no preconditioner is given.
pub fn build_prec(spec: Option<&PrecSpec>, l: &LinearBlockOperator) -> Result<DiagonalPreconditioner> {
    let (cols, rows) = (l.col_layout(), l.row_layout());
    let field = "preconditioner";
    match spec {
        None => {
            let ident = DiagonalPreconditioner::identity(cols, rows);
            let norm = operator_norm_estimate(l, &ident, POWER_ITERATION_CAP, POWER_ITERATION_TOL)
                .map_err(|e| BenchError::spec(field, e))?;
            let t = DEFAULT_STEP_FRACTION / norm;
            DiagonalPreconditioner::scalar(cols, rows, t, t).map_err(|e| BenchError::spec(field, e))
        }
        Some(PrecSpec::Scalar { tau, sigma }) => {
            DiagonalPreconditioner::scalar(cols, rows, *tau, *sigma).map_err(|e| BenchError::spec(field, e))
        }
        Some(PrecSpec::Diagonal { primal, dual }) => {
            let pv = BlockVector::from_vec(cols, primal.clone()).map_err(|e| BenchError::spec("preconditioner.primal", e))?;
            let dv = BlockVector::from_vec(rows, dual.clone()).map_err(|e| BenchError::spec("preconditioner.dual", e))?;
            DiagonalPreconditioner::new(pv, dv).map_err(|e| BenchError::spec(field, e))
        }
    }
}

/// Spec entries for every nonzero block of a dense `L` cut along the layouts.
pub fn linear_entries(l: &LinearBlockOperator) -> Vec<BlockEntry> {
    let (q, p) = (l.row_layout().num_blocks(), l.col_layout().num_blocks());
    let mut out = Vec::new();
    for row in 0..q {
        for col in 0..p {
            if let Some(m) = l.block(row, col) {
                out.push(BlockEntry {
                    row,
                    col,
                    matrix: m.into(),
                });
            }
        }
    }
    out
}
