//! The controlled-scene sweep: layouts, simulated footprints and the
//! correction runs evaluated on them.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{discretize_footprint, BeamSpec, FootprintGrid};
use crate::deconv::{convolve, deconvolve, DeconvOptions, SystemResponse};
use crate::error::{config, Result};
use crate::forward::{
    emit_pulse, noise_sigma_for_snr, simulate_lrcs, superpose_extended_returns, synthesize_waveform, LrcsSeries, RadiometricEffects,
    Waveform, SPEED_OF_LIGHT,
};
use crate::radiometry::{correct_footprint, CorrectionFlags, CorrectionTemplate, PointCorrection, PointRecord};
use crate::scene::{controlled_layout_with, Boundary, EdgeGeometry, EdgeShape, MaterialPatch, SceneLayout};
use crate::unmix::{EnergyDensityBasis, ReflectanceBasis, SolverOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub label: String,
    pub reflectance: f64,
}

impl Material {
    pub fn new(label: &str, reflectance: f64) -> Self {
        Self { label: label.to_owned(), reflectance }
    }
}

/// Leaf, PVC, aluminium, ceramic, soil and concrete boards.
pub fn default_materials() -> Vec<Material> {
    vec![
        Material::new("Lf", 0.30),
        Material::new("PVC", 0.95),
        Material::new("Al", 1.0),
        Material::new("Cm", 0.90),
        Material::new("Sl", 0.25),
        Material::new("Cc", 0.40),
    ]
}

/// Parameters of the layout grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub materials: Vec<Material>,
    pub target_counts: Vec<usize>,
    pub incidence_deg: Vec<f64>,
    pub edge_shapes: Vec<EdgeShape>,
    pub interval_m: f64,
    /// Material of the rear board in three-target layouts.
    pub backing: String,
    /// Rear board used when the front material is the backing itself.
    pub backing_alternate: String,
    pub geometry: EdgeGeometry,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            materials: default_materials(),
            target_counts: vec![2, 3],
            incidence_deg: vec![0.0, 10.0, 20.0, 30.0, 40.0],
            edge_shapes: vec![EdgeShape::Straight, EdgeShape::Arc],
            interval_m: 0.6,
            backing: "Cc".into(),
            backing_alternate: "Sl".into(),
            geometry: EdgeGeometry::default(),
        }
    }
}

impl SweepSpec {
    fn material(&self, label: &str) -> Result<&Material> {
        match self.materials.iter().find(|m| m.label == label) {
            Some(m) => Ok(m),
            None => config(format!("material {label:?} is not in the sweep's material list")),
        }
    }

    /// Distinct reflectances of the sweep's materials.
    pub fn library(&self) -> Result<ReflectanceBasis> {
        let values: Vec<f64> = self.materials.iter().map(|m| m.reflectance).collect();
        ReflectanceBasis::library(&values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub index: usize,
    pub count: usize,
    pub incidence_deg: f64,
    pub edge_shape: EdgeShape,
    pub layout: SceneLayout,
}

impl SweepEntry {
    /// Stable file-name friendly identifier.
    pub fn id(&self) -> String {
        let names: Vec<&str> = self.layout.patches().iter().map(|p| p.label.as_str()).collect();
        format!("{:03}_{}_{}deg_{}", self.index, names.join("-"), self.incidence_deg.round() as i64, self.edge_shape)
    }
}

/// Every combination of material, target count, incidence and edge shape,
/// in that nesting order.
///
/// Two-target layouts put the same material at both ranges. Three-target
/// layouts add the backing board behind them.
pub fn controlled_sweep(spec: &SweepSpec) -> Result<Vec<SweepEntry>> {
    if spec.materials.is_empty() || spec.target_counts.is_empty() || spec.incidence_deg.is_empty() || spec.edge_shapes.is_empty() {
        return config("sweep has an empty axis");
    }
    let mut entries = Vec::new();
    for m in &spec.materials {
        for &count in &spec.target_counts {
            let mut boards = vec![m.clone(); count.min(2)];
            if count == 3 {
                let rear = if m.label == spec.backing { &spec.backing_alternate } else { &spec.backing };
                boards.push(spec.material(rear)?.clone());
            }
            let pairs: Vec<(&str, f64)> = boards.iter().map(|b| (b.label.as_str(), b.reflectance)).collect();
            for &deg in &spec.incidence_deg {
                for &shape in &spec.edge_shapes {
                    let layout = controlled_layout_with(&pairs, count, spec.interval_m, deg.to_radians(), shape, &spec.geometry)?;
                    entries.push(SweepEntry { index: entries.len(), count, incidence_deg: deg, edge_shape: shape, layout });
                }
            }
        }
    }
    Ok(entries)
}

/// Instrument and sampling settings shared by every simulated footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSettings {
    pub beam: BeamSpec,
    pub pixels_per_sigma: usize,
    pub extent_sigmas: f64,
    /// Peak signal-to-noise ratio; `None` for noiseless waveforms.
    pub snr_db: Option<f64>,
    pub lambertian: bool,
    pub inverse_square: bool,
    /// Empty bins recorded before and after the returns.
    pub padding_bins: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            beam: BeamSpec::default(),
            pixels_per_sigma: 20,
            extent_sigmas: 4.0,
            snr_db: Some(30.0),
            lambertian: true,
            inverse_square: true,
            padding_bins: 64,
        }
    }
}

impl SimulationSettings {
    pub fn grid(&self, range: f64) -> Result<FootprintGrid> {
        discretize_footprint(&self.beam, range, self.pixels_per_sigma, self.extent_sigmas)
    }

    pub fn effects(&self, reference_range: f64) -> RadiometricEffects {
        RadiometricEffects { lambertian: self.lambertian, inverse_square_reference: self.inverse_square.then_some(reference_range) }
    }

    pub fn pulse(&self) -> Result<Waveform> {
        emit_pulse(self.beam.pulse_fwhm(), self.beam.dt())
    }
}

/// Independent per-entry seed derived from the run seed.
pub fn entry_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

/// One simulated footprint with its ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedFootprint {
    /// Backscatter per bin including the radiometric effects.
    pub lrcs: LrcsSeries,
    pub clean: Waveform,
    pub waveform: Waveform,
    pub noise_sigma: f64,
    /// One point per illuminated board, raw intensity only.
    pub points: Vec<PointRecord>,
    /// Full-footprint normal-incidence return of each point's material.
    pub truth: Vec<f64>,
    pub situation: String,
}

/// Forward-simulates `layout` and derives one raw point per illuminated
/// board.
///
/// A point's raw intensity is the waveform integral between the midpoints
/// separating its board's return time from its neighbours'.
pub fn simulate_footprint(settings: &SimulationSettings, grid: &FootprintGrid, layout: &SceneLayout, seed: u64) -> Result<SimulatedFootprint> {
    let dt = settings.beam.dt();
    let (lrcs, seg, ranges) = simulate_lrcs(grid, layout, dt, settings.effects(layout.base_range()))?;
    let lrcs = pad(&lrcs, settings.padding_bins)?;
    let pulse = settings.pulse()?;
    let clean = synthesize_waveform(&lrcs, &pulse, None, 0.0, 0)?;
    let noise_sigma = match settings.snr_db {
        Some(snr) => noise_sigma_for_snr(clean.peak().map_or(0.0, |(_, v)| v), snr),
        None => 0.0,
    };
    let waveform = synthesize_waveform(&lrcs, &pulse, None, noise_sigma, seed)?;

    let regions = layout.patches().len();
    let mut energy = vec![0.0; regions];
    let mut moments = vec![[0.0; 3]; regions];
    for ((&n, &e), (c, &r)) in seg.labels().iter().zip(grid.irradiance()).zip(grid.centers().iter().zip(&ranges)) {
        energy[n] += e;
        moments[n][0] += e * c[0];
        moments[n][1] += e * c[1];
        moments[n][2] += e * r;
    }
    let lit: Vec<usize> = (0..regions).filter(|&n| energy[n] > 0.0).collect();
    let times: Vec<f64> = lit.iter().map(|&n| 2.0 * moments[n][2] / energy[n] / SPEED_OF_LIGHT).collect();
    let w_total = EnergyDensityBasis::for_grid(grid)?.total_energy();
    let edge = lit.len() > 1;

    let mut points = Vec::with_capacity(lit.len());
    let mut truth = Vec::with_capacity(lit.len());
    for (i, &n) in lit.iter().enumerate() {
        let lo = if i == 0 { f64::NEG_INFINITY } else { 0.5 * (times[i - 1] + times[i]) };
        let hi = if i + 1 == lit.len() { f64::INFINITY } else { 0.5 * (times[i] + times[i + 1]) };
        let raw: f64 = (0..waveform.len())
            .filter(|&k| (lo..hi).contains(&waveform.time(k)))
            .map(|k| waveform.samples[k] * dt)
            .sum();
        let patch = &layout.patches()[n];
        let e = energy[n];
        let mut p = PointRecord::new([moments[n][0] / e, moments[n][1] / e, moments[n][2] / e], moments[n][2] / e, patch.tilt, raw.max(0.0))?
            .with_label(&patch.label);
        p.edge_flag = edge;
        points.push(p);
        truth.push(patch.reflectance * w_total);
    }
    Ok(SimulatedFootprint { lrcs, clean, waveform, noise_sigma, points, truth, situation: layout.combination() })
}

fn pad(lrcs: &LrcsSeries, bins: usize) -> Result<LrcsSeries> {
    let mut values = vec![0.0; bins];
    values.extend_from_slice(&lrcs.values);
    values.resize(values.len() + bins, 0.0);
    LrcsSeries::new(values, lrcs.dt, lrcs.range0 - bins as f64 * lrcs.bin_width())
}

/// Noiseless sum of the extended-target returns of each board in `layout`,
/// each at the board's range and tilt.
pub fn extended_superposition(settings: &SimulationSettings, grid: &FootprintGrid, layout: &SceneLayout) -> Result<Waveform> {
    let dt = settings.beam.dt();
    let pulse = settings.pulse()?;
    let effects = settings.effects(layout.base_range());
    let mut returns = Vec::with_capacity(layout.patches().len());
    for patch in layout.patches() {
        let single = SceneLayout::new(vec![MaterialPatch { boundary: Boundary::Full, ..patch.clone() }], layout.base_range(), patch.tilt)?;
        let (lrcs, _, _) = simulate_lrcs(grid, &single, dt, effects)?;
        returns.push(convolve(&lrcs.to_waveform(), &pulse)?);
    }
    let n = returns.len();
    superpose_extended_returns(&returns, &vec![0.0; n], &vec![1.0; n])
}

/// Correction settings applied to every footprint of a sweep.
#[derive(Debug, Clone)]
pub struct CorrectionSetup {
    pub template: CorrectionTemplate,
    pub deconv: DeconvOptions,
    pub kernel: SystemResponse,
}

impl CorrectionSetup {
    /// Library basis of the sweep materials, grid-calibrated energy basis and
    /// the emitted pulse as deconvolution kernel.
    pub fn for_sweep(spec: &SweepSpec, settings: &SimulationSettings, grid: &FootprintGrid, solver: SolverOptions) -> Result<Self> {
        let mut template = CorrectionTemplate::new(spec.library()?, EnergyDensityBasis::for_grid(grid)?, spec.geometry.base_range_m);
        template.options = solver;
        Ok(Self { template, deconv: DeconvOptions::default(), kernel: SystemResponse::new(settings.pulse()?)? })
    }
}

/// Per-point outcome of correcting one footprint under each ablation.
#[derive(Debug, Clone)]
pub struct CorrectedFootprint {
    pub full: Vec<PointRecord>,
    pub angle_only: Vec<f64>,
    pub subfootprint_only: Vec<f64>,
    pub lrcs: LrcsSeries,
    pub deconv_iterations: usize,
    pub errors: Vec<String>,
}

/// Full-pipeline correction of one footprint's points plus the two
/// single-factor ablations. Ablation values of unmatched points fall back to
/// the raw intensity.
#[derive(Debug, Clone)]
pub struct AblatedCorrection {
    pub full: Vec<PointCorrection>,
    pub angle_only: Vec<f64>,
    pub subfootprint_only: Vec<f64>,
}

pub fn correct_with_ablations(template: &CorrectionTemplate, points: &[PointRecord], lrcs: &LrcsSeries) -> Result<AblatedCorrection> {
    let run = |flags: CorrectionFlags| correct_footprint(points, lrcs, &template.clone().with_flags(flags));
    let values = |v: Vec<PointCorrection>| -> Vec<f64> {
        v.into_iter().map(|c| c.record.corrected_intensity.unwrap_or(c.record.raw_intensity)).collect()
    };
    Ok(AblatedCorrection {
        full: run(template.flags)?,
        angle_only: values(run(CorrectionFlags::INCIDENCE_ONLY)?),
        subfootprint_only: values(run(CorrectionFlags::SUBFOOTPRINT_ONLY)?),
    })
}

/// Deconvolves the footprint's waveform and corrects its points with the
/// full pipeline and with the single-factor ablations.
pub fn correct_simulated(setup: &CorrectionSetup, footprint: &SimulatedFootprint) -> Result<CorrectedFootprint> {
    let d = deconvolve(&footprint.waveform, &setup.kernel, &setup.deconv)?;
    let c = correct_with_ablations(&setup.template, &footprint.points, &d.lrcs)?;
    let errors = c.full.iter().filter_map(|p| p.error.clone()).collect();
    Ok(CorrectedFootprint {
        full: c.full.into_iter().map(|p| p.record).collect(),
        angle_only: c.angle_only,
        subfootprint_only: c.subfootprint_only,
        lrcs: d.lrcs,
        deconv_iterations: d.iterations,
        errors,
    })
}

/// Flattened per-point results of a whole sweep, in entry order.
#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub entry: Vec<usize>,
    pub label: Vec<String>,
    pub situation: Vec<String>,
    pub incidence_deg: Vec<f64>,
    pub raw: Vec<f64>,
    pub angle_only: Vec<f64>,
    pub subfootprint_only: Vec<f64>,
    pub full: Vec<f64>,
    pub truth: Vec<f64>,
    pub edge: Vec<bool>,
    pub failures: usize,
}

/// Simulates and corrects every entry in parallel.
pub fn run_sweep(
    entries: &[SweepEntry],
    settings: &SimulationSettings,
    setup: &CorrectionSetup,
    grid: &FootprintGrid,
    seed: u64,
) -> Result<SweepOutcome> {
    let per_entry: Vec<(SimulatedFootprint, CorrectedFootprint)> = entries
        .par_iter()
        .map(|e| {
            let sim = simulate_footprint(settings, grid, &e.layout, entry_seed(seed, e.index))?;
            let cor = correct_simulated(setup, &sim)?;
            Ok((sim, cor))
        })
        .collect::<Result<_>>()?;
    let mut out = SweepOutcome::default();
    for (e, (sim, cor)) in entries.iter().zip(per_entry) {
        for (i, p) in cor.full.iter().enumerate() {
            out.entry.push(e.index);
            out.label.push(p.label.clone().unwrap_or_default());
            out.situation.push(sim.situation.clone());
            out.incidence_deg.push(e.incidence_deg);
            out.raw.push(p.raw_intensity);
            out.angle_only.push(cor.angle_only[i]);
            out.subfootprint_only.push(cor.subfootprint_only[i]);
            out.full.push(p.corrected_intensity.unwrap_or(p.raw_intensity));
            out.truth.push(sim.truth[i]);
            out.edge.push(p.edge_flag);
        }
        out.failures += cor.errors.len();
    }
    Ok(out)
}
