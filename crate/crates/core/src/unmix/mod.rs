//! Intra-footprint unmixing.
//!
//! Each LRCS slice `t` is explained as `rho_t * E_t`: a reflectance picked
//! from a discrete basis (one-hot row of `P1`) times the beam energy falling
//! on that slice (`P2` row weighted by the ring densities). `P2` columns must
//! spend each ring's area budget exactly, so the slice energies always add up
//! to the footprint's total energy. The program minimised is
//!
//! ```text
//! sum_t (rho_t * E_t - L_t)^2 + lambda1 * (columns of P1 used) + lambda2 * (slices with area)
//! ```

mod basis;
mod solver;

use serde::{Deserialize, Serialize};

pub use basis::{build_reflectance_basis, BasisMode, EnergyDensityBasis, ReflectanceBasis};
pub use solver::solve_unmixing;

use crate::error::{config, domain, Error, Result};
use crate::forward::LrcsSeries;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return config("ragged matrix rows");
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r).iter().enumerate() {
                s[c] += v;
            }
        }
        s
    }
}

/// Solver knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_outer_iters: usize,
    /// Relative objective change below which the solve is converged.
    pub tolerance: f64,
    pub seed: u64,
    /// Jittered starts in addition to the deterministic one.
    pub restarts: usize,
    /// Slices below this fraction of the LRCS maximum count as empty.
    pub occupancy_threshold: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_outer_iters: 200, tolerance: 1e-8, seed: 0, restarts: 3, occupancy_threshold: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct UnmixingProblem {
    pub lrcs: LrcsSeries,
    pub psi: ReflectanceBasis,
    pub s_basis: EnergyDensityBasis,
    pub lambda1: f64,
    pub lambda2: f64,
    pub options: SolverOptions,
}

impl UnmixingProblem {
    /// Problem with both sparsity weights at `1e-3 * ||L||^2`.
    pub fn new(lrcs: LrcsSeries, psi: ReflectanceBasis, s_basis: EnergyDensityBasis) -> Self {
        let lambda = default_lambda(&lrcs);
        Self { lrcs, psi, s_basis, lambda1: lambda, lambda2: lambda, options: SolverOptions::default() }
    }

    pub fn with_lambdas(mut self, lambda1: f64, lambda2: f64) -> Self {
        self.lambda1 = lambda1;
        self.lambda2 = lambda2;
        self
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.lrcs.is_empty() {
            return domain("empty LRCS");
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0 && self.lambda2.is_finite() && self.lambda2 >= 0.0) {
            return domain("sparsity weights must be >= 0");
        }
        let o = &self.options;
        if !(o.tolerance.is_finite() && o.tolerance >= 0.0) || !(0.0..1.0).contains(&o.occupancy_threshold) {
            return config("invalid solver tolerance or occupancy threshold");
        }
        Ok(())
    }
}

/// `1e-3 * ||L||^2`.
pub fn default_lambda(lrcs: &LrcsSeries) -> f64 {
    1e-3 * lrcs.values.iter().map(|v| v * v).sum::<f64>()
}

/// A run of consecutive slices sharing one reflectance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub reflectance: f64,
    /// Footprint area attributed to the target, m^2.
    pub area_m2: f64,
    /// First and last LRCS bin, inclusive.
    pub bin_start: usize,
    pub bin_end: usize,
    /// `reflectance * W_total`.
    pub corrected_intensity: f64,
    #[serde(skip)]
    pub column: usize,
    /// Beam energy falling on the target.
    #[serde(skip)]
    pub energy: f64,
}

#[derive(Debug, Clone)]
pub struct UnmixingResult {
    /// Selected basis column per slice (the one-hot rows of `P1`).
    pub p1: Vec<usize>,
    pub p2: Matrix,
    pub rho_t: Vec<f64>,
    /// Energy-weighted area per slice, `(P2 S)_t`.
    pub area_t: Vec<f64>,
    pub targets: Vec<Target>,
    pub residual: f64,
    pub c1: usize,
    pub c2: usize,
    pub objective: f64,
    /// Objective after initialisation and after every outer iteration.
    pub history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl UnmixingResult {
    pub fn p1_dense(&self, m1: usize) -> Matrix {
        let mut m = Matrix::zeros(self.p1.len(), m1);
        for (t, &c) in self.p1.iter().enumerate() {
            m.set(t, c, 1.0);
        }
        m
    }
}

#[derive(Serialize, Deserialize)]
struct ResultJson {
    converged: bool,
    residual: f64,
    c1: usize,
    c2: usize,
    targets: Vec<Target>,
}

impl Serialize for UnmixingResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ResultJson {
            converged: self.converged,
            residual: self.residual,
            c1: self.c1,
            c2: self.c2,
            targets: self.targets.clone(),
        }
        .serialize(s)
    }
}

/// Targets as they appear in a serialised result.
#[derive(Debug, Clone, Deserialize)]
pub struct UnmixingSummary {
    pub converged: bool,
    pub residual: f64,
    pub c1: usize,
    pub c2: usize,
    pub targets: Vec<Target>,
}

fn check_dims(p1: &Matrix, p2: &Matrix, psi: &ReflectanceBasis, s: &EnergyDensityBasis, t: usize) -> Result<()> {
    if p1.rows() != t || p2.rows() != t || p1.cols() != psi.len() || p2.cols() != s.ring_count() {
        return config(format!(
            "expected P1 {t}x{} and P2 {t}x{}, got {}x{} and {}x{}",
            psi.len(),
            s.ring_count(),
            p1.rows(),
            p1.cols(),
            p2.rows(),
            p2.cols()
        ));
    }
    Ok(())
}

/// `sum_t ((P1 psi)_t * (P2 S)_t - L_t)^2`.
pub fn residual(p1: &Matrix, p2: &Matrix, psi: &ReflectanceBasis, s_basis: &EnergyDensityBasis, lrcs: &LrcsSeries) -> Result<f64> {
    check_dims(p1, p2, psi, s_basis, lrcs.len())?;
    let mut res = 0.0;
    for t in 0..lrcs.len() {
        let rho: f64 = p1.row(t).iter().zip(psi.values()).map(|(a, b)| a * b).sum();
        let e: f64 = p2.row(t).iter().zip(s_basis.densities()).map(|(a, b)| a * b).sum();
        res += (rho * e - lrcs.values[t]).powi(2);
    }
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub residual: f64,
    pub c1: usize,
    pub c2: usize,
}

/// Penalised objective; every `P1` row must be one-hot.
pub fn objective(p1: &Matrix, p2: &Matrix, problem: &UnmixingProblem) -> Result<Objective> {
    check_dims(p1, p2, &problem.psi, &problem.s_basis, problem.lrcs.len())?;
    let mut used = vec![false; p1.cols()];
    for t in 0..p1.rows() {
        let row = p1.row(t);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::ConstraintViolation(format!("row {t} of P1 is not one-hot")));
        }
        used[row.iter().position(|&v| v == 1.0).expect("one entry is set")] = true;
    }
    let c1 = used.iter().filter(|&&u| u).count();
    let c2 = (0..p2.rows()).filter(|&t| p2.row(t).iter().any(|&v| v != 0.0)).count();
    let res = residual(p1, p2, &problem.psi, &problem.s_basis, &problem.lrcs)?;
    Ok(Objective { total: res + problem.lambda1 * c1 as f64 + problem.lambda2 * c2 as f64, residual: res, c1, c2 })
}

/// One-hot row at the smallest score; ties go to the lowest index.
pub fn project_p1_row(scores: &[f64]) -> Vec<f64> {
    let mut row = vec![0.0; scores.len()];
    if let Some(i) = argmin(scores) {
        row[i] = 1.0;
    }
    row
}

pub(crate) fn argmin(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s < scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Clamps `p2_raw` at zero and rescales every column to its ring budget. A
/// column with nothing left puts its whole budget on the strongest slice.
pub fn project_p2_columns(p2_raw: &Matrix, s_basis: &EnergyDensityBasis, lrcs: &LrcsSeries) -> Result<Matrix> {
    if p2_raw.cols() != s_basis.ring_count() || p2_raw.rows() != lrcs.len() {
        return config("P2 dimensions do not match the LRCS and ring basis");
    }
    if p2_raw.data.iter().any(|v| !v.is_finite()) {
        return domain("P2 entries must be finite");
    }
    let strongest = (0..lrcs.len())
        .fold(None, |b: Option<usize>, t| match b {
            Some(i) if lrcs.values[i] >= lrcs.values[t] => b,
            _ => Some(t),
        })
        .unwrap_or(0);
    let mut out = p2_raw.clone();
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    for (k, budget) in s_basis.budgets().into_iter().enumerate() {
        let sum: f64 = (0..out.rows).map(|t| out.get(t, k)).sum();
        if sum > 0.0 {
            let f = budget / sum;
            for t in 0..out.rows {
                let v = out.get(t, k);
                out.set(t, k, v * f);
            }
        } else {
            out.set(strongest, k, budget);
        }
    }
    Ok(out)
}

/// Merges consecutive slices with area that share a basis column.
pub fn extract_targets(p1: &[usize], p2: &Matrix, psi: &ReflectanceBasis, s_basis: &EnergyDensityBasis) -> Vec<Target> {
    let w_total = s_basis.total_energy();
    let mut targets: Vec<Target> = Vec::new();
    let mut open = false;
    for (t, &col) in p1.iter().enumerate() {
        let area: f64 = p2.row(t).iter().sum();
        if area <= 0.0 {
            open = false;
            continue;
        }
        let energy: f64 = p2.row(t).iter().zip(s_basis.densities()).map(|(a, b)| a * b).sum();
        match targets.last_mut() {
            Some(last) if open && last.column == col => {
                last.bin_end = t;
                last.area_m2 += area;
                last.energy += energy;
            }
            _ => {
                let reflectance = psi.values()[col];
                targets.push(Target {
                    reflectance,
                    area_m2: area,
                    bin_start: t,
                    bin_end: t,
                    corrected_intensity: reflectance * w_total,
                    column: col,
                    energy,
                });
            }
        }
        open = true;
    }
    targets
}
