//! Smooth matrix completion by ADMM.
//!
//! Solves
//!
//! ```text
//! min_X ‖X‖_* + γ(‖D_m X‖_F² + ‖X D_nᵀ‖_F²)   s.t.  X_Ω = M_Ω
//! ```
//!
//! through the split `X = Y` with coupling weight `λ` and multiplier `Z`:
//!
//! ```text
//! X ← SVT_{1/λ}(Y + Z/λ)
//! Y ← argmin_Y γ(‖D_m Y‖² + ‖Y D_nᵀ‖²) + tr(Zᵀ(Y − X)) + λ/2‖Y − X‖²,  Y_Ω = M_Ω
//! Z ← Z + β(Y − X)
//! ```
//!
//! The Y step is a linear system in the unobserved cells whose matrix
//! depends only on the mask and `λ/2γ`, so it is assembled and factored once
//! per solve.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Systems with fewer unknowns than this are factored densely.
const DENSE_LIMIT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcParams {
    /// Smoothness weight; zero selects plain nuclear-norm completion.
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub max_iter: usize,
}

impl Default for SmcParams {
    fn default() -> Self {
        Self { gamma: 1.0, lambda: 1.0, beta: 1.0, epsilon: 1e-4, max_iter: 500 }
    }
}

impl SmcParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!("gamma must be finite and non-negative, got {}", self.gamma)));
        }
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta), ("epsilon", self.epsilon)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and positive, got {v}")));
            }
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// An incomplete `m × n` matrix with its observed set. Unobserved entries of
/// `values` are held at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SmcProblem {
    values: DMatrix<f64>,
    observed: DMatrix<bool>,
    pub params: SmcParams,
}

impl SmcProblem {
    pub fn new(values: DMatrix<f64>, observed: &[(usize, usize)], params: SmcParams) -> Result<Self> {
        let (m, n) = values.shape();
        let mut mask = DMatrix::from_element(m, n, false);
        for &(i, j) in observed {
            if i >= m || j >= n {
                return Err(invalid(format!("observed cell ({i}, {j}) outside {m}x{n} matrix")));
            }
            mask[(i, j)] = true;
        }
        Self::with_mask(values, mask, params)
    }

    pub fn with_mask(mut values: DMatrix<f64>, observed: DMatrix<bool>, params: SmcParams) -> Result<Self> {
        params.validate()?;
        if values.shape() != observed.shape() {
            return Err(invalid("values and mask shapes differ"));
        }
        if values.is_empty() {
            return Err(invalid("empty matrix"));
        }
        if !observed.iter().any(|&o| o) {
            return Err(invalid("observed set is empty"));
        }
        for (v, &o) in values.iter_mut().zip(observed.iter()) {
            if !o {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(invalid("observed values must be finite"));
            }
        }
        Ok(Self { values, observed, params })
    }

    /// Builds a problem from row-major value and mask slices.
    pub fn from_row_major(m: usize, n: usize, values: &[f64], mask: &[bool], params: SmcParams) -> Result<Self> {
        if values.len() != m * n || mask.len() != m * n {
            return Err(invalid(format!("expected {} entries for a {m}x{n} matrix", m * n)));
        }
        Self::with_mask(
            DMatrix::from_row_slice(m, n, values),
            DMatrix::from_row_slice(m, n, mask),
            params,
        )
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[(i, j)]
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn unobserved_count(&self) -> usize {
        self.observed.len() - self.observed_count()
    }

    /// `X` on the unobserved cells, `M` on the observed ones.
    pub fn overlay(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for ((o, v), &seen) in out.iter_mut().zip(self.values.iter()).zip(self.observed.iter()) {
            if seen {
                *o = *v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcSolution {
    pub completed: DMatrix<f64>,
    pub iterations: usize,
    /// `‖X − Y‖_F` of the returned iterate.
    pub final_gap: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub gap: f64,
    pub nuclear_norm: f64,
    pub smoothness: f64,
    /// `‖Z_{t+1} − Z_t‖_F`
    pub dual_step: f64,
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// First-difference operator `D_m ∈ ℝ^{(m−1)×m}`, rows `e_k − e_{k+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DifferenceOperator {
    pub size: usize,
}

impl DifferenceOperator {
    pub fn new(size: usize) -> Self {
        Self { size }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let m = self.size;
        let mut d = DMatrix::zeros(m.saturating_sub(1), m);
        for k in 0..m.saturating_sub(1) {
            d[(k, k)] = 1.0;
            d[(k, k + 1)] = -1.0;
        }
        d
    }

    /// Entry `(p, q)` of `DᵀD`: the path-graph Laplacian.
    pub fn gram_entry(&self, p: usize, q: usize) -> f64 {
        let m = self.size;
        if m < 2 {
            return 0.0;
        }
        if p == q {
            if p == 0 || p == m - 1 {
                1.0
            } else {
                2.0
            }
        } else if p.abs_diff(q) == 1 {
            -1.0
        } else {
            0.0
        }
    }
}

/// `γ(‖D_m Y‖_F² + ‖Y D_nᵀ‖_F²)`
pub fn smoothness_penalty(y: &DMatrix<f64>, gamma: f64) -> f64 {
    let (m, n) = y.shape();
    let mut acc = 0.0;
    for j in 0..n {
        for i in 0..m {
            if i + 1 < m {
                acc += (y[(i, j)] - y[(i + 1, j)]).powi(2);
            }
            if j + 1 < n {
                acc += (y[(i, j)] - y[(i, j + 1)]).powi(2);
            }
        }
    }
    gamma * acc
}

/// Objective of the Y subproblem, ignoring the equality constraint.
pub fn y_objective(problem: &SmcProblem, x: &DMatrix<f64>, z: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let p = &problem.params;
    let diff = y - x;
    smoothness_penalty(y, p.gamma) + z.dot(&diff) + 0.5 * p.lambda * diff.norm_squared()
}

/// Sweep cap for the SVD; far above what finite well-scaled input needs.
const SVD_MAX_SWEEPS: usize = 10_000;

/// Singular value soft-thresholding `U·max(Σ − τ, 0)·Vᵀ`.
pub fn svt(a: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    shrink(a, tau).map(|(x, _)| x)
}

/// SVT result together with its nuclear norm.
fn shrink(a: &DMatrix<f64>, tau: f64) -> Result<(DMatrix<f64>, f64)> {
    let (m, n) = a.shape();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllPosed("SVT input has non-finite entries".into()));
    }
    if a.iter().all(|&v| v == 0.0) {
        return Ok((DMatrix::zeros(m, n), 0.0));
    }
    // nalgebra bidiagonalizes the taller orientation internally, so wide
    // matrices need no explicit transpose here.
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, SVD_MAX_SWEEPS)
        .ok_or_else(|| Error::IllPosed("SVD did not converge".into()))?;
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut out = DMatrix::zeros(m, n);
    let mut nuclear = 0.0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let shrunk = s - tau;
        if shrunk <= 0.0 {
            continue;
        }
        nuclear += shrunk;
        out.ger(shrunk, &u.column(k), &v_t.row(k).transpose(), 1.0);
    }
    Ok((out, nuclear))
}

enum Factor {
    Empty,
    Dense(Cholesky<f64, Dyn>),
    Sparse(CscCholesky<f64>),
}

/// The Y-step system `A·y = b` over the unobserved cells.
pub struct YSystem {
    shape: (usize, usize),
    unknowns: Vec<(usize, usize)>,
    slot: DMatrix<Option<usize>>,
    rows: Vec<Vec<(usize, f64)>>,
    /// `Σ_{(p,q)∈Ω} U^{(i,j)}_{pq} M_{pq}` per unknown.
    observed_coupling: Vec<f64>,
    lambda: f64,
    two_gamma: f64,
    factor: Factor,
}

impl YSystem {
    pub fn unknowns(&self) -> &[(usize, usize)] {
        &self.unknowns
    }

    /// Position of cell `(i, j)` among the unknowns.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        self.slot[(i, j)]
    }

    /// Sparse row `k` of `A` as `(column, value)` pairs.
    pub fn row(&self, k: usize) -> &[(usize, f64)] {
        &self.rows[k]
    }

    pub fn coefficient(&self, row: usize, col: usize) -> f64 {
        self.rows[row].iter().find(|(c, _)| *c == col).map_or(0.0, |(_, v)| *v)
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.factor, Factor::Sparse(_))
    }

    /// `b_{(i,j)} = (λX_ij − Z_ij)/(2γ) − Σ_Ω U^{(i,j)}_{pq} M_pq`
    pub fn rhs(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.unknowns.len(),
            self.unknowns.iter().zip(&self.observed_coupling).map(|(&(i, j), c)| {
                (self.lambda * x[(i, j)] - z[(i, j)]) / self.two_gamma - c
            }),
        )
    }

    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| r.iter().map(|&(c, v)| v * y[c]).sum()),
        )
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::Empty => DVector::zeros(0),
            Factor::Dense(chol) => chol.solve(b),
            Factor::Sparse(chol) => chol.solve(b).column(0).into_owned(),
        }
    }
}

/// Assembles and factors the Y-step system. Rows follow
/// `U^{(i,j)} = D_mᵀD_m e_i e_jᵀ + e_i e_jᵀ D_nᵀD_n + (λ/2γ) e_i e_jᵀ`
/// restricted to the unobserved cells; couplings to observed cells are kept
/// aside for the right-hand side.
pub fn build_y_system(problem: &SmcProblem) -> Result<YSystem> {
    let params = &problem.params;
    if params.gamma == 0.0 {
        return Err(invalid("the smooth Y step divides by gamma; use the gamma = 0 low-rank path instead"));
    }
    let (m, n) = problem.shape();
    let dm = DifferenceOperator::new(m);
    let dn = DifferenceOperator::new(n);
    let shift = params.lambda / (2.0 * params.gamma);

    // Order unknowns along the shorter axis first to keep the band narrow.
    let cells: Vec<(usize, usize)> = if m <= n {
        (0..n).flat_map(|j| (0..m).map(move |i| (i, j))).collect()
    } else {
        (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect()
    };
    let mut slot = DMatrix::from_element(m, n, None);
    let mut unknowns = Vec::new();
    for (i, j) in cells {
        if !problem.is_observed(i, j) {
            slot[(i, j)] = Some(unknowns.len());
            unknowns.push((i, j));
        }
    }

    let values = problem.values();
    let mut rows = Vec::with_capacity(unknowns.len());
    let mut observed_coupling = Vec::with_capacity(unknowns.len());
    for &(i, j) in &unknowns {
        let mut row = Vec::with_capacity(5);
        let mut coupling = 0.0;
        let mut neighbours = Vec::with_capacity(5);
        for p in i.saturating_sub(1)..=(i + 1).min(m - 1) {
            let mut u = dm.gram_entry(p, i);
            if p == i {
                u += dn.gram_entry(j, j) + shift;
            }
            neighbours.push(((p, j), u));
        }
        for q in j.saturating_sub(1)..=(j + 1).min(n - 1) {
            if q != j {
                neighbours.push(((i, q), dn.gram_entry(j, q)));
            }
        }
        for ((p, q), u) in neighbours {
            if u == 0.0 {
                continue;
            }
            match slot[(p, q)] {
                Some(col) => row.push((col, u)),
                None => coupling += u * values[(p, q)],
            }
        }
        row.sort_by_key(|&(c, _)| c);
        rows.push(row);
        observed_coupling.push(coupling);
    }

    let size = unknowns.len();
    let factor = if size == 0 {
        Factor::Empty
    } else if size < DENSE_LIMIT {
        let mut a = DMatrix::zeros(size, size);
        for (r, row) in rows.iter().enumerate() {
            for &(c, v) in row {
                a[(r, c)] = v;
            }
        }
        Factor::Dense(Cholesky::new(a).ok_or_else(|| Error::IllPosed("Y-step matrix is not positive definite".into()))?)
    } else {
        let mut coo = CooMatrix::new(size, size);
        for (r, row) in rows.iter().enumerate() {
            for &(c, v) in row {
                coo.push(r, c, v);
            }
        }
        let csc = CscMatrix::from(&coo);
        Factor::Sparse(
            CscCholesky::factor(&csc).map_err(|e| Error::IllPosed(format!("Y-step factorization failed: {e:?}")))?,
        )
    };

    Ok(YSystem {
        shape: (m, n),
        unknowns,
        slot,
        rows,
        observed_coupling,
        lambda: params.lambda,
        two_gamma: 2.0 * params.gamma,
        factor,
    })
}

/// Y step: `Y_Ω = M_Ω`, `Y_Ω̄ = A⁻¹b`.
pub fn solve_y(system: &YSystem, problem: &SmcProblem, x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(system.shape, problem.shape());
    let mut y = problem.values().clone();
    if system.unknowns.is_empty() {
        return y;
    }
    let sol = system.solve(&system.rhs(x, z));
    for (&(i, j), v) in system.unknowns.iter().zip(sol.iter()) {
        y[(i, j)] = *v;
    }
    y
}

/// Y step without smoothing: `Y_Ω̄ = X_Ω̄ − Z_Ω̄/λ`.
fn solve_y_low_rank(problem: &SmcProblem, x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let lambda = problem.params.lambda;
    let mut y = x - z / lambda;
    let (m, n) = problem.shape();
    for j in 0..n {
        for i in 0..m {
            if problem.is_observed(i, j) {
                y[(i, j)] = problem.values()[(i, j)];
            }
        }
    }
    y
}

pub fn smc_solve(problem: &SmcProblem) -> SmcSolution {
    run(problem, None)
}

pub fn smc_solve_traced(problem: &SmcProblem) -> (SmcSolution, Vec<TraceRow>) {
    let mut trace = Vec::new();
    let sol = run(problem, Some(&mut trace));
    (sol, trace)
}

fn run(problem: &SmcProblem, mut trace: Option<&mut Vec<TraceRow>>) -> SmcSolution {
    let params = problem.params;
    if problem.unobserved_count() == 0 {
        return SmcSolution { completed: problem.values().clone(), iterations: 0, final_gap: 0.0, converged: true };
    }
    let system = (params.gamma > 0.0)
        .then(|| build_y_system(problem).expect("validated problem with positive gamma"));

    let (m, n) = problem.shape();
    let mut x = problem.values().clone();
    let mut y = x.clone();
    let mut z = DMatrix::zeros(m, n);
    let mut best = (f64::INFINITY, x.clone());
    let mut iterations = 0;
    let mut converged = false;

    for t in 1..=params.max_iter {
        iterations = t;
        // A diverging run (e.g. β well above λ) ends here with its best iterate.
        let Ok((x_next, nuclear)) = shrink(&(&y + &z / params.lambda), 1.0 / params.lambda) else {
            break;
        };
        let y_next = match &system {
            Some(sys) => solve_y(sys, problem, &x_next, &z),
            None => solve_y_low_rank(problem, &x_next, &z),
        };
        let residual = &y_next - &x_next;
        let gap = residual.norm();
        if !gap.is_finite() {
            break;
        }
        let step = residual * params.beta;
        z += &step;
        x = x_next;
        y = y_next;

        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                iteration: t,
                gap,
                nuclear_norm: nuclear,
                smoothness: smoothness_penalty(&y, params.gamma),
                dual_step: step.norm(),
            });
        }
        if gap < best.0 {
            best = (gap, x.clone());
        }
        if gap <= params.epsilon {
            converged = true;
            break;
        }
    }

    let (final_gap, chosen) = if converged { (best.0, &x) } else { (best.0, &best.1) };
    SmcSolution { completed: problem.overlay(chosen), iterations, final_gap, converged }
}
