//! Browser bindings: each export takes a JSON parameter object and returns a
//! JSON document for the page to draw.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use subfootprint::beam::region_energy_weights;
use subfootprint::deconv::{deconvolve, DeconvOptions, SystemResponse};
use subfootprint::experiment::{correct_with_ablations, default_materials, extended_superposition, simulate_footprint, SimulationSettings};
use subfootprint::forward::{skewness, Waveform};
use subfootprint::radiometry::CorrectionTemplate;
use subfootprint::scene::{controlled_layout_with, segment_footprint, EdgeGeometry, EdgeShape, SceneLayout};
use subfootprint::unmix::{EnergyDensityBasis, ReflectanceBasis, Target};

/// Scene and instrument knobs exposed on the page.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    /// Front material label, from the default library.
    pub material: String,
    /// Rear material of a three-target layout.
    pub backing: String,
    pub targets: usize,
    pub incidence_deg: f64,
    pub edge_shape: EdgeShape,
    pub edge_offset_mm: f64,
    pub interval_m: f64,
    pub pixels_per_sigma: usize,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            material: "Al".into(),
            backing: "Cc".into(),
            targets: 2,
            incidence_deg: 20.0,
            edge_shape: EdgeShape::Straight,
            edge_offset_mm: 0.0,
            interval_m: 0.6,
            pixels_per_sigma: 12,
            snr_db: Some(30.0),
            seed: 1,
        }
    }
}

fn reflectance(label: &str) -> Result<f64, String> {
    default_materials()
        .into_iter()
        .find(|m| m.label == label)
        .map(|m| m.reflectance)
        .ok_or_else(|| format!("unknown material {label:?}"))
}

impl SceneParams {
    fn layout(&self) -> Result<SceneLayout, String> {
        let front = reflectance(&self.material)?;
        let mut boards = vec![(self.material.as_str(), front); self.targets.min(2)];
        if self.targets == 3 {
            boards.push((self.backing.as_str(), reflectance(&self.backing)?));
        }
        let geometry = EdgeGeometry { edge_offset_m: self.edge_offset_mm * 1e-3, ..EdgeGeometry::default() };
        controlled_layout_with(&boards, self.targets, self.interval_m, self.incidence_deg.to_radians(), self.edge_shape, &geometry)
            .map_err(|e| e.to_string())
    }

    fn settings(&self) -> SimulationSettings {
        SimulationSettings { pixels_per_sigma: self.pixels_per_sigma.clamp(4, 24), snr_db: self.snr_db, ..Default::default() }
    }
}

fn parse(json: &str) -> Result<SceneParams, String> {
    if json.trim().is_empty() {
        return Ok(SceneParams::default());
    }
    serde_json::from_str(json).map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct FootprintView {
    pub side: usize,
    pub half_extent_m: f64,
    /// Patch index per pixel, row-major.
    pub labels: Vec<i32>,
    pub irradiance: Vec<f64>,
    pub patches: Vec<String>,
    /// Share of beam energy on each patch.
    pub energy_share: Vec<f64>,
    pub combination: String,
}

pub fn footprint_view(params: &str) -> Result<String, String> {
    let p = parse(params)?;
    let layout = p.layout()?;
    let grid = p.settings().grid(layout.base_range()).map_err(|e| e.to_string())?;
    let (seg, _) = segment_footprint(&grid, &layout).map_err(|e| e.to_string())?;
    let weights = region_energy_weights(&grid, &seg).map_err(|e| e.to_string())?;
    let total: f64 = weights.iter().sum();
    let view = FootprintView {
        side: grid.side(),
        half_extent_m: grid.half_extent(),
        labels: seg.labels().iter().map(|&l| l as i32).collect(),
        irradiance: grid.irradiance().to_vec(),
        patches: layout.patches().iter().map(|q| q.label.clone()).collect(),
        energy_share: weights.iter().map(|w| w / total).collect(),
        combination: layout.combination(),
    };
    to_json(&view)
}

#[derive(Debug, Serialize)]
pub struct Trace {
    pub t_ns: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub peak: f64,
    pub skewness: Option<f64>,
}

impl Trace {
    fn new(w: &Waveform, t0: f64, len: usize) -> Self {
        let offset = ((w.t0 - t0) / w.dt).round() as i64;
        let amplitude: Vec<f64> = (0..len as i64)
            .map(|k| {
                let i = k - offset;
                if (0..w.len() as i64).contains(&i) {
                    w.samples[i as usize]
                } else {
                    0.0
                }
            })
            .collect();
        let grid = Waveform { samples: amplitude.clone(), dt: w.dt, t0 };
        Self {
            t_ns: (0..len).map(|k| grid.time(k) * 1e9).collect(),
            peak: amplitude.iter().copied().fold(0.0, f64::max),
            skewness: skewness(&grid, 0.0).ok(),
            amplitude,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct WaveformView {
    pub recorded: Trace,
    pub noiseless: Trace,
    /// Sum of each board's return as if it filled the footprint.
    pub extended: Trace,
}

pub fn waveform_view(params: &str) -> Result<String, String> {
    let p = parse(params)?;
    let layout = p.layout()?;
    let settings = p.settings();
    let grid = settings.grid(layout.base_range()).map_err(|e| e.to_string())?;
    let sim = simulate_footprint(&settings, &grid, &layout, p.seed).map_err(|e| e.to_string())?;
    let ext = extended_superposition(&settings, &grid, &layout).map_err(|e| e.to_string())?;
    let t0 = sim.waveform.t0.min(ext.t0);
    let end = (sim.waveform.time(sim.waveform.len())).max(ext.time(ext.len()));
    let len = ((end - t0) / sim.waveform.dt).round() as usize;
    to_json(&WaveformView {
        recorded: Trace::new(&sim.waveform, t0, len),
        noiseless: Trace::new(&sim.clean, t0, len),
        extended: Trace::new(&ext, t0, len),
    })
}

#[derive(Debug, Serialize)]
pub struct PointView {
    pub label: String,
    pub raw: f64,
    pub corrected: Option<f64>,
    pub truth: f64,
}

#[derive(Debug, Serialize)]
pub struct UnmixView {
    /// Backscatter density on the simulated waveform's time axis.
    pub lrcs_truth: Trace,
    pub lrcs_recovered: Trace,
    pub deconvolution_iterations: usize,
    pub targets: Vec<Target>,
    pub points: Vec<PointView>,
    pub converged: bool,
}

/// Simulates the scene, deconvolves its waveform and corrects its points
/// against the default material library.
pub fn unmix_view(params: &str) -> Result<String, String> {
    let p = parse(params)?;
    let layout = p.layout()?;
    let settings = p.settings();
    let grid = settings.grid(layout.base_range()).map_err(|e| e.to_string())?;
    let sim = simulate_footprint(&settings, &grid, &layout, p.seed).map_err(|e| e.to_string())?;
    let kernel = SystemResponse::new(settings.pulse().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let d = deconvolve(&sim.waveform, &kernel, &DeconvOptions::default()).map_err(|e| e.to_string())?;
    let library: Vec<f64> = default_materials().iter().map(|m| m.reflectance).collect();
    let template = CorrectionTemplate::new(
        ReflectanceBasis::library(&library).map_err(|e| e.to_string())?,
        EnergyDensityBasis::for_grid(&grid).map_err(|e| e.to_string())?,
        layout.base_range(),
    );
    let result = template.unmix(&d.lrcs, layout.incidence()).map_err(|e| e.to_string())?;
    let corrected = correct_with_ablations(&template, &sim.points, &d.lrcs).map_err(|e| e.to_string())?;
    let points = corrected
        .full
        .iter()
        .zip(&sim.truth)
        .map(|(c, t)| PointView {
            label: c.record.label.clone().unwrap_or_default(),
            raw: c.record.raw_intensity,
            corrected: c.record.corrected_intensity,
            truth: *t,
        })
        .collect();
    let truth = sim.lrcs.to_waveform();
    to_json(&UnmixView {
        lrcs_truth: Trace::new(&truth, truth.t0, truth.len()),
        lrcs_recovered: Trace::new(&d.lrcs.to_waveform(), truth.t0, truth.len()),
        deconvolution_iterations: d.iterations,
        targets: result.targets,
        points,
        converged: result.converged,
    })
}

/// Material labels and reflectances of the default library.
pub fn material_list() -> Result<String, String> {
    to_json(&default_materials())
}

#[wasm_bindgen]
pub fn footprint(params: &str) -> Result<String, JsValue> {
    footprint_view(params).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn waveforms(params: &str) -> Result<String, JsValue> {
    waveform_view(params).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn unmix(params: &str) -> Result<String, JsValue> {
    unmix_view(params).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn materials() -> Result<String, JsValue> {
    material_list().map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(s: &str) -> serde_json::Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn footprint_splits_energy() {
        let v = value(&footprint_view(r#"{"incidence_deg": 0, "pixels_per_sigma": 8}"#).unwrap());
        let side = v["side"].as_u64().unwrap() as usize;
        assert_eq!(v["labels"].as_array().unwrap().len(), side * side);
        let share: Vec<f64> = v["energy_share"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(share.len(), 2);
        assert!((share[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn mixed_waveform_is_lower_than_extended_sum() {
        let v = value(&waveform_view(r#"{"snr_db": null, "pixels_per_sigma": 8}"#).unwrap());
        assert!(v["noiseless"]["peak"].as_f64().unwrap() < v["extended"]["peak"].as_f64().unwrap());
        let n = v["recorded"]["t_ns"].as_array().unwrap().len();
        assert_eq!(v["extended"]["amplitude"].as_array().unwrap().len(), n);
    }

    #[test]
    fn unmix_recovers_targets() {
        let v = value(&unmix_view(r#"{"material": "Cm", "pixels_per_sigma": 8}"#).unwrap());
        let points = v["points"].as_array().unwrap();
        assert_eq!(points.len(), 2);
        for p in points {
            let (c, t) = (p["corrected"].as_f64().unwrap(), p["truth"].as_f64().unwrap());
            assert!((c - t).abs() < 0.05 * t);
        }
    }

    #[test]
    fn bad_parameters_are_reported() {
        assert!(footprint_view(r#"{"material": "Gold"}"#).is_err());
        assert!(footprint_view(r#"{"colour": 1}"#).is_err());
        assert!(material_list().unwrap().contains("PVC"));
    }
}
