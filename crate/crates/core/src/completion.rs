//! Two-stage tensor completion.
//!
//! Stage 1 completes the `C_θ × C_φ` beam plane at every position holding at
//! least one measurement and then treats the whole plane as observed. Stage 2
//! completes the `L_x × L_y` position plane of every beam from the promoted
//! mask.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::database::{to_db, Domain, PowerTensor, DB_FLOOR_W};
use crate::error::{invalid, Error, Result};
use crate::smc::{smc_solve, SmcParams, SmcProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageOrder {
    #[default]
    BeamFirst,
    /// Ablation only.
    PositionFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionConfig {
    pub stage1: SmcParams,
    pub stage2: SmcParams,
    pub parallel: bool,
    pub order: StageOrder,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self { stage1: SmcParams::default(), stage2: SmcParams::default(), parallel: true, order: StageOrder::BeamFirst }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceKind {
    /// Beam plane at a position.
    Position,
    /// Position plane of a beam.
    Beam,
}

/// Outcome of one slice completion. `a`, `b` are the one-based labels of the
/// fixed pair: `(p_x, p_y)` for a position slice, `(i, j)` for a beam slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SliceDiagnostic {
    pub stage: u8,
    pub kind: SliceKind,
    pub a: usize,
    pub b: usize,
    pub observed: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletedTensor {
    /// Completed values; `mask` is still the original observation mask.
    pub tensor: PowerTensor,
    pub stage1_mask: Vec<bool>,
    pub diagnostics: Vec<SliceDiagnostic>,
}

impl CompletedTensor {
    pub fn get(&self, x: usize, y: usize, i: usize, j: usize) -> f64 {
        self.tensor.get(x, y, i, j)
    }

    pub fn unconverged(&self) -> usize {
        self.diagnostics.iter().filter(|d| !d.converged).count()
    }

    /// Same layout as a database tensor; the `observed` column tags measured
    /// cells, everything else is predicted.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.tensor.write_csv(path)
    }

    pub fn write_diagnostics_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for d in &self.diagnostics {
            w.serialize(d).map_err(csv_err)?;
        }
        w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}

/// Cell offsets of one slice in the flat tensor, row-major over the slice.
fn slice_cells(t: &PowerTensor, kind: SliceKind, a: usize, b: usize) -> Vec<usize> {
    let [lx, ly, ct, cp] = t.shape;
    match kind {
        SliceKind::Position => (0..ct).flat_map(|i| (0..cp).map(move |j| (i, j))).map(|(i, j)| t.index(a, b, i, j)).collect(),
        SliceKind::Beam => (0..lx).flat_map(|x| (0..ly).map(move |y| (x, y))).map(|(x, y)| t.index(x, y, a, b)).collect(),
    }
}

/// Shift applied before solving. dB values are measured from the power floor
/// so that shrinkage pulls missing entries towards "no power" rather than
/// towards 0 dBW.
fn solver_offset(domain: Domain) -> f64 {
    match domain {
        Domain::Linear => 0.0,
        Domain::Db => -to_db(DB_FLOOR_W),
    }
}

/// Completes every slice of `kind` that holds an observation and marks its
/// cells observed. Slices without observations are left untouched; observed
/// cells keep their stored values bit for bit.
fn complete_slices(
    t: &mut PowerTensor,
    kind: SliceKind,
    stage: u8,
    params: SmcParams,
    parallel: bool,
) -> Result<Vec<SliceDiagnostic>> {
    let [lx, ly, ct, cp] = t.shape;
    let (outer, inner, rows, cols) = match kind {
        SliceKind::Position => (lx, ly, ct, cp),
        SliceKind::Beam => (ct, cp, lx, ly),
    };
    let jobs: Vec<(usize, usize, Vec<usize>)> = (0..outer)
        .flat_map(|a| (0..inner).map(move |b| (a, b)))
        .map(|(a, b)| (a, b, slice_cells(t, kind, a, b)))
        .filter(|(_, _, cells)| cells.iter().any(|&k| t.mask[k]))
        .collect();

    let src: &PowerTensor = t;
    let offset = solver_offset(t.domain);
    let solve = |(a, b, cells): &(usize, usize, Vec<usize>)| -> Result<(Vec<f64>, SliceDiagnostic)> {
        let values: Vec<f64> = cells.iter().map(|&k| src.values[k] + offset).collect();
        let mask: Vec<bool> = cells.iter().map(|&k| src.mask[k]).collect();
        let problem = SmcProblem::from_row_major(rows, cols, &values, &mask, params)?;
        let sol = smc_solve(&problem);
        let out = row_major(&sol.completed).into_iter().map(|v| v - offset).collect();
        let diag = SliceDiagnostic {
            stage,
            kind,
            a: a + 1,
            b: b + 1,
            observed: problem.observed_count(),
            iterations: sol.iterations,
            converged: sol.converged,
            final_gap: sol.final_gap,
        };
        Ok((out, diag))
    };
    let solved: Vec<Result<(Vec<f64>, SliceDiagnostic)>> =
        if parallel { jobs.par_iter().map(solve).collect() } else { jobs.iter().map(solve).collect() };

    let mut diagnostics = Vec::with_capacity(jobs.len());
    for ((_, _, cells), res) in jobs.iter().zip(solved) {
        let (out, diag) = res?;
        for (&k, v) in cells.iter().zip(out) {
            if !t.mask[k] {
                t.values[k] = v;
                t.mask[k] = true;
            }
        }
        diagnostics.push(diag);
    }
    Ok(diagnostics)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Beam-plane completion at every position with a measurement. The returned
/// tensor's mask is the promoted mask Ψ′.
pub fn stage1(tensor: &PowerTensor, cfg: &CompletionConfig) -> Result<(PowerTensor, Vec<SliceDiagnostic>)> {
    cfg.validate()?;
    if tensor.observed_count() == 0 {
        return Err(invalid("tensor has no observed entries"));
    }
    let mut t = tensor.clone();
    let diags = complete_slices(&mut t, SliceKind::Position, 1, cfg.stage1, cfg.parallel)?;
    Ok((t, diags))
}

/// Position-plane completion of every beam, from a tensor whose mask is Ψ′.
pub fn stage2(t_prime: &PowerTensor, cfg: &CompletionConfig) -> Result<(PowerTensor, Vec<SliceDiagnostic>)> {
    cfg.validate()?;
    if t_prime.observed_count() == 0 {
        return Err(invalid("stage-one mask is empty"));
    }
    let mut t = t_prime.clone();
    let diags = complete_slices(&mut t, SliceKind::Beam, 2, cfg.stage2, cfg.parallel)?;
    Ok((t, diags))
}

pub fn complete(tensor: &PowerTensor, cfg: &CompletionConfig) -> Result<CompletedTensor> {
    cfg.validate()?;
    if tensor.observed_count() == 0 {
        return Err(invalid("tensor has no observed entries"));
    }
    let (first, second) = match cfg.order {
        StageOrder::BeamFirst => (SliceKind::Position, SliceKind::Beam),
        StageOrder::PositionFirst => (SliceKind::Beam, SliceKind::Position),
    };
    let mut t = tensor.clone();
    let mut diagnostics = complete_slices(&mut t, first, 1, cfg.stage1, cfg.parallel)?;
    let stage1_mask = t.mask.clone();
    diagnostics.extend(complete_slices(&mut t, second, 2, cfg.stage2, cfg.parallel)?);
    t.mask = tensor.mask.clone();
    Ok(CompletedTensor { tensor: t, stage1_mask, diagnostics })
}
