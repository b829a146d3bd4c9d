use serde::{Deserialize, Serialize};

use crate::beam::{ring_energy_basis, FootprintGrid, RingBasis};
use crate::error::{domain, Result};

/// Candidate reflectances, strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectanceBasis {
    values: Vec<f64>,
}

/// How to build a [`ReflectanceBasis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisMode {
    /// `m1` equispaced values on `[1/m1, 1]`.
    Uniform { m1: usize },
    /// The given values, sorted and deduplicated.
    Library { values: Vec<f64> },
}

pub fn build_reflectance_basis(mode: &BasisMode) -> Result<ReflectanceBasis> {
    match mode {
        BasisMode::Uniform { m1 } => ReflectanceBasis::uniform(*m1),
        BasisMode::Library { values } => ReflectanceBasis::library(values),
    }
}

impl ReflectanceBasis {
    pub fn uniform(m1: usize) -> Result<Self> {
        if m1 < 2 {
            return domain(format!("a uniform basis needs at least 2 values, got {m1}"));
        }
        Ok(Self { values: (1..=m1).map(|k| k as f64 / m1 as f64).collect() })
    }

    /// Zero is rejected: a slice of zero reflectance could absorb any
    /// amount of beam energy at no cost.
    pub fn library(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return domain("empty reflectance library");
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0 && **v <= 1.0)) {
            return domain(format!("reflectance {v} outside (0, 1]"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        Ok(Self { values: v })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the value closest to `v`; ties go to the lower index.
    pub fn nearest(&self, v: f64) -> usize {
        let mut best = 0;
        for (i, x) in self.values.iter().enumerate() {
            if (x - v).abs() < (self.values[best] - v).abs() {
                best = i;
            }
        }
        best
    }
}

/// Mean beam irradiance over equal-width annuli plus the annulus area unit.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyDensityBasis {
    densities: Vec<f64>,
    ring_area_unit: f64,
}

impl EnergyDensityBasis {
    pub fn new(densities: Vec<f64>, ring_area_unit: f64) -> Result<Self> {
        if densities.is_empty() {
            return domain("energy-density basis is empty");
        }
        if !(ring_area_unit.is_finite() && ring_area_unit > 0.0) {
            return domain(format!("ring area unit must be > 0, got {ring_area_unit}"));
        }
        if densities.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return domain("densities must be > 0");
        }
        if densities.windows(2).any(|w| w[1] >= w[0]) {
            return domain("densities must be strictly decreasing");
        }
        Ok(Self { densities, ring_area_unit })
    }

    pub fn from_rings(rings: &RingBasis, peak: f64) -> Result<Self> {
        Self::new(rings.densities.iter().map(|d| d * peak).collect(), rings.area_unit())
    }

    /// Rings a tenth of a sigma wide out to the grid corners, rescaled so the
    /// basis carries exactly the grid's discretised energy.
    pub fn for_grid(grid: &FootprintGrid) -> Result<Self> {
        let width = grid.sigma() / 10.0;
        let m2 = (std::f64::consts::SQRT_2 * grid.half_extent() / width - 1e-9).ceil() as usize;
        let rings = ring_energy_basis(grid.sigma(), width, m2)?;
        let raw = Self::from_rings(&rings, grid.peak())?;
        let scale = grid.total_energy() / raw.total_energy();
        Self::new(raw.densities.iter().map(|d| d * scale).collect(), raw.ring_area_unit)
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn ring_area_unit(&self) -> f64 {
        self.ring_area_unit
    }

    pub fn ring_count(&self) -> usize {
        self.densities.len()
    }

    /// Column budgets `omega * (2k - 1)`.
    pub fn budgets(&self) -> Vec<f64> {
        (1..=self.densities.len()).map(|k| self.ring_area_unit * (2 * k - 1) as f64).collect()
    }

    /// Footprint area covered by the rings, `omega * M2^2`.
    pub fn total_area(&self) -> f64 {
        self.ring_area_unit * (self.densities.len() * self.densities.len()) as f64
    }

    /// Beam energy `sum_k s_k * omega * (2k - 1)`.
    pub fn total_energy(&self) -> f64 {
        self.densities.iter().zip(self.budgets()).map(|(s, b)| s * b).sum()
    }

    /// Same rings with every density multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.densities.iter().map(|d| d * factor).collect(), self.ring_area_unit)
    }
}
