//! Laser footprint irradiance models.
//!
//! The footprint is described on the plane normal to the beam axis. A
//! circular Gaussian covers vertical incidence; an elliptical Gaussian covers
//! the footprint as seen on a tilted surface. [`discretize_footprint`] samples
//! the circular profile on a square pixel grid, which is the basis of every
//! energy weight in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};

/// A point on a footprint plane, in metres.
pub type Planar = [f64; 2];

/// `2·sqrt(2·ln 2)`, the FWHM-to-sigma ratio of a Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Instrument parameters of a full-waveform LiDAR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BeamSpecJson", into = "BeamSpecJson")]
pub struct BeamSpec {
    divergence: f64,
    pulse_fwhm: f64,
    sampling_rate: f64,
    peak_irradiance: f64,
}

impl BeamSpec {
    /// `divergence` is the full angle in radians, `pulse_fwhm` in seconds,
    /// `sampling_rate` in hertz.
    pub fn new(divergence: f64, pulse_fwhm: f64, sampling_rate: f64, peak_irradiance: f64) -> Result<Self> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(divergence) {
            return domain(format!("divergence must be > 0, got {divergence}"));
        }
        if !positive(pulse_fwhm) {
            return domain(format!("pulse FWHM must be > 0, got {pulse_fwhm}"));
        }
        if !positive(sampling_rate) {
            return domain(format!("sampling rate must be > 0, got {sampling_rate}"));
        }
        if !positive(peak_irradiance) {
            return domain(format!("peak irradiance must be > 0, got {peak_irradiance}"));
        }
        Ok(Self { divergence, pulse_fwhm, sampling_rate, peak_irradiance })
    }

    pub fn divergence(&self) -> f64 {
        self.divergence
    }

    pub fn pulse_fwhm(&self) -> f64 {
        self.pulse_fwhm
    }

    pub fn sampling_rate(&self) -> f64 {
        self.sampling_rate
    }

    pub fn peak_irradiance(&self) -> f64 {
        self.peak_irradiance
    }

    /// Sample spacing in seconds.
    pub fn dt(&self) -> f64 {
        1.0 / self.sampling_rate
    }
}

impl Default for BeamSpec {
    /// 0.3 mrad divergence, 4 ns pulse, 5 GHz digitiser.
    fn default() -> Self {
        Self { divergence: 0.3e-3, pulse_fwhm: 4e-9, sampling_rate: 5e9, peak_irradiance: 1.0 }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BeamSpecJson {
    divergence_mrad: f64,
    pulse_fwhm_ns: f64,
    sampling_rate_hz: f64,
    #[serde(default = "one")]
    peak_irradiance: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<BeamSpecJson> for BeamSpec {
    type Error = Error;

    fn try_from(j: BeamSpecJson) -> Result<Self> {
        BeamSpec::new(j.divergence_mrad * 1e-3, j.pulse_fwhm_ns * 1e-9, j.sampling_rate_hz, j.peak_irradiance)
    }
}

impl From<BeamSpec> for BeamSpecJson {
    fn from(b: BeamSpec) -> Self {
        BeamSpecJson {
            divergence_mrad: b.divergence * 1e3,
            pulse_fwhm_ns: b.pulse_fwhm * 1e9,
            sampling_rate_hz: b.sampling_rate,
            peak_irradiance: b.peak_irradiance,
        }
    }
}

/// Gaussian standard deviation of the footprint at `range` metres.
pub fn sigma_at_range(beam: &BeamSpec, range: f64) -> Result<f64> {
    if !(range.is_finite() && range > 0.0) {
        return domain(format!("range must be > 0, got {range}"));
    }
    Ok(beam.divergence * range / FWHM_PER_SIGMA)
}

/// Circular Gaussian irradiance at `point`.
pub fn irradiance_circular(point: Planar, sigma: f64, peak: f64) -> Result<f64> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return domain(format!("sigma must be > 0, got {sigma}"));
    }
    Ok(circular(point, sigma, peak))
}

#[inline]
fn circular(p: Planar, sigma: f64, peak: f64) -> f64 {
    peak * (-(p[0] * p[0] + p[1] * p[1]) / (2.0 * sigma * sigma)).exp()
}

/// Axis-aligned-then-rotated elliptical Gaussian footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipticalProfile {
    sigma_major: f64,
    sigma_minor: f64,
    orientation: f64,
}

impl EllipticalProfile {
    pub fn new(sigma_major: f64, sigma_minor: f64, orientation: f64) -> Result<Self> {
        if !(sigma_minor.is_finite() && sigma_minor > 0.0) {
            return domain(format!("singular covariance: sigma_minor = {sigma_minor}"));
        }
        if !(sigma_major.is_finite() && sigma_major >= sigma_minor) {
            return domain(format!("sigma_major ({sigma_major}) must be >= sigma_minor ({sigma_minor})"));
        }
        if !orientation.is_finite() {
            return domain("orientation must be finite");
        }
        Ok(Self { sigma_major, sigma_minor, orientation })
    }

    /// Footprint of a beam with circular `sigma` on a surface tilted by
    /// `incidence`; the major axis lies in the tilt plane at `orientation`.
    pub fn from_incidence(sigma: f64, incidence: f64, orientation: f64) -> Result<Self> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&incidence) {
            return domain(format!("incidence must lie in [0, pi/2), got {incidence}"));
        }
        Self::new(sigma / incidence.cos(), sigma, orientation)
    }

    pub fn sigma_major(&self) -> f64 {
        self.sigma_major
    }

    pub fn sigma_minor(&self) -> f64 {
        self.sigma_minor
    }

    pub fn orientation(&self) -> f64 {
        self.orientation
    }

    #[inline]
    fn eval(&self, p: Planar, peak: f64) -> f64 {
        let (s, c) = self.orientation.sin_cos();
        let u = p[0] * c + p[1] * s;
        let v = -p[0] * s + p[1] * c;
        let q = (u / self.sigma_major).powi(2) + (v / self.sigma_minor).powi(2);
        peak * (-0.5 * q).exp()
    }
}

/// Elliptical Gaussian irradiance at `point`.
pub fn irradiance_elliptical(point: Planar, profile: &EllipticalProfile, peak: f64) -> Result<f64> {
    Ok(profile.eval(point, peak))
}

/// The irradiance field sampled at pixel centres of a square grid centred on
/// the beam axis. Pixels are stored row-major, `x` varying fastest.
#[derive(Debug, Clone)]
pub struct FootprintGrid {
    pixel_size: f64,
    half_extent: f64,
    side: usize,
    sigma: f64,
    peak: f64,
    irradiance: Vec<f64>,
    centers: Vec<Planar>,
    energy_tolerance: f64,
}

impl FootprintGrid {
    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_size * self.pixel_size
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    /// Pixels along one side.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.irradiance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.irradiance.is_empty()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    pub fn irradiance(&self) -> &[f64] {
        &self.irradiance
    }

    pub fn centers(&self) -> &[Planar] {
        &self.centers
    }

    /// Sum of irradiance times pixel area.
    pub fn total_energy(&self) -> f64 {
        self.irradiance.iter().sum::<f64>() * self.pixel_area()
    }

    /// Analytic energy of the untruncated circular beam, `2*pi*sigma^2*I0`.
    pub fn analytic_energy(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.sigma * self.sigma * self.peak
    }

    /// Relative bound on `|total_energy - analytic_energy| / analytic_energy`
    /// set by the truncation of the Gaussian tails at the grid edge.
    pub fn energy_tolerance(&self) -> f64 {
        self.energy_tolerance
    }
}

/// Upper bound on the tail mass outside the square `[-e, e]^2` (in sigmas):
/// `4 * phi(e) / e`, from the Mills ratio.
fn truncation_bound(extent_sigmas: f64) -> f64 {
    let phi = (-0.5 * extent_sigmas * extent_sigmas).exp() / (2.0 * std::f64::consts::PI).sqrt();
    4.0 * phi / extent_sigmas
}

/// Samples the circular footprint of `beam` at `range` on a square grid.
pub fn discretize_footprint(
    beam: &BeamSpec,
    range: f64,
    pixels_per_sigma: usize,
    extent_sigmas: f64,
) -> Result<FootprintGrid> {
    let sigma = sigma_at_range(beam, range)?;
    discretize_gaussian(sigma, beam.peak_irradiance(), pixels_per_sigma, extent_sigmas)
}

/// As [`discretize_footprint`] for an explicit `sigma` and peak.
pub fn discretize_gaussian(sigma: f64, peak: f64, pixels_per_sigma: usize, extent_sigmas: f64) -> Result<FootprintGrid> {
    if pixels_per_sigma < 4 {
        return config(format!("pixels_per_sigma must be >= 4, got {pixels_per_sigma}"));
    }
    if !(extent_sigmas.is_finite() && extent_sigmas >= 2.0) {
        return config(format!("extent_sigmas must be >= 2, got {extent_sigmas}"));
    }
    if !(sigma.is_finite() && sigma > 0.0 && peak.is_finite() && peak > 0.0) {
        return domain("sigma and peak must be > 0");
    }
    let pixel_size = sigma / pixels_per_sigma as f64;
    let half = (extent_sigmas * pixels_per_sigma as f64 - 1e-9).ceil() as usize;
    let side = 2 * half;
    let mut irradiance = Vec::with_capacity(side * side);
    let mut centers = Vec::with_capacity(side * side);
    for iy in 0..side {
        let y = (iy as f64 - half as f64 + 0.5) * pixel_size;
        for ix in 0..side {
            let x = (ix as f64 - half as f64 + 0.5) * pixel_size;
            centers.push([x, y]);
            irradiance.push(circular([x, y], sigma, peak));
        }
    }
    Ok(FootprintGrid {
        pixel_size,
        half_extent: extent_sigmas * sigma,
        side,
        sigma,
        peak,
        irradiance,
        centers,
        energy_tolerance: truncation_bound(extent_sigmas),
    })
}

/// Samples the footprint as it lands on a surface tilted by `incidence`
/// about the beam-plane `y` axis. Pixel centres are surface coordinates
/// `(u, v)` on square pixels of `sigma / pixels_per_sigma`, and irradiance is
/// per unit surface area, i.e. the elliptical profile attenuated by
/// `cos(incidence)`.
pub fn discretize_oblique_surface(
    sigma: f64,
    peak: f64,
    incidence: f64,
    pixels_per_sigma: usize,
    extent_sigmas: f64,
) -> Result<FootprintGrid> {
    let profile = EllipticalProfile::from_incidence(sigma, incidence, 0.0)?;
    if pixels_per_sigma < 4 || !extent_sigmas.is_finite() || extent_sigmas < 2.0 {
        return config("pixels_per_sigma must be >= 4 and extent_sigmas >= 2");
    }
    let pixel_size = sigma / pixels_per_sigma as f64;
    let half_v = (extent_sigmas * pixels_per_sigma as f64 - 1e-9).ceil() as usize;
    let half_u = (extent_sigmas * pixels_per_sigma as f64 / incidence.cos() - 1e-9).ceil() as usize;
    let surface_peak = peak * incidence.cos();
    let mut irradiance = Vec::with_capacity(4 * half_u * half_v);
    let mut centers = Vec::with_capacity(4 * half_u * half_v);
    for iv in 0..2 * half_v {
        let v = (iv as f64 - half_v as f64 + 0.5) * pixel_size;
        for iu in 0..2 * half_u {
            let u = (iu as f64 - half_u as f64 + 0.5) * pixel_size;
            centers.push([u, v]);
            irradiance.push(profile.eval([u, v], surface_peak));
        }
    }
    Ok(FootprintGrid {
        pixel_size,
        half_extent: extent_sigmas * profile.sigma_major(),
        side: 2 * half_u,
        sigma,
        peak,
        irradiance,
        centers,
        energy_tolerance: truncation_bound(extent_sigmas),
    })
}

/// Maps a surface coordinate of a footprint tilted by `incidence` onto the
/// beam-normal plane.
pub fn project_to_beam_plane(surface: Planar, incidence: f64) -> Planar {
    [surface[0] * incidence.cos(), surface[1]]
}

/// Annular description of a circular Gaussian footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct RingBasis {
    /// Mean irradiance over each annulus, for unit peak irradiance.
    pub densities: Vec<f64>,
    /// Area of each annulus, `pi*w^2*(2k-1)`.
    pub ring_areas: Vec<f64>,
    pub ring_width: f64,
}

impl RingBasis {
    /// The annulus area unit `pi*w^2`.
    pub fn area_unit(&self) -> f64 {
        std::f64::consts::PI * self.ring_width * self.ring_width
    }
}

/// Equal-width annuli `[(k-1)w, kw)` around the beam axis with their mean
/// irradiance (unit peak) and areas.
pub fn ring_energy_basis(sigma: f64, ring_width: f64, m2: usize) -> Result<RingBasis> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return domain(format!("sigma must be > 0, got {sigma}"));
    }
    if !(ring_width.is_finite() && ring_width > 0.0) {
        return domain(format!("ring width must be > 0, got {ring_width}"));
    }
    if m2 == 0 {
        return domain("at least one ring is required");
    }
    let two_var = 2.0 * sigma * sigma;
    let unit = std::f64::consts::PI * ring_width * ring_width;
    let mut densities = Vec::with_capacity(m2);
    let mut ring_areas = Vec::with_capacity(m2);
    for k in 1..=m2 {
        let r_in = (k - 1) as f64 * ring_width;
        let r_out = k as f64 * ring_width;
        let a = r_in * r_in / two_var;
        let b = r_out * r_out / two_var;
        // exp(-a) - exp(-b) without cancellation
        let energy = std::f64::consts::PI * two_var * (-a).exp() * -(-(b - a)).exp_m1();
        let area = unit * (2 * k - 1) as f64;
        densities.push(energy / area);
        ring_areas.push(area);
    }
    Ok(RingBasis { densities, ring_areas, ring_width })
}

/// Disjoint assignment of grid pixels to `regions` sub-regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    labels: Vec<usize>,
    regions: usize,
}

impl Segmentation {
    pub fn from_labels(labels: Vec<usize>, regions: usize) -> Result<Self> {
        if let Some((pixel, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= regions) {
            return Err(Error::PartitionViolation { pixel, reason: format!("label {l} >= region count {regions}") });
        }
        Ok(Self { labels, regions })
    }

    /// Builds a segmentation from a row-major `pixels x regions` 0/1 matrix.
    /// Every row must contain exactly one 1.
    pub fn from_one_hot(pixels: usize, regions: usize, matrix: &[f64]) -> Result<Self> {
        if matrix.len() != pixels * regions {
            return config(format!("matrix has {} entries, expected {}", matrix.len(), pixels * regions));
        }
        let mut labels = Vec::with_capacity(pixels);
        for (pixel, row) in matrix.chunks(regions.max(1)).enumerate().take(pixels) {
            let sum: f64 = row.iter().sum();
            let binary = row.iter().all(|&v| v == 0.0 || v == 1.0);
            if !binary || sum != 1.0 {
                return Err(Error::PartitionViolation { pixel, reason: format!("row sums to {sum}") });
            }
            labels.push(row.iter().position(|&v| v == 1.0).unwrap_or(0));
        }
        Ok(Self { labels, regions })
    }

    pub fn to_one_hot(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.labels.len() * self.regions];
        for (j, &l) in self.labels.iter().enumerate() {
            m[j * self.regions + l] = 1.0;
        }
        m
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn pixels_in(&self, region: usize) -> usize {
        self.labels.iter().filter(|&&l| l == region).count()
    }
}

/// Beam energy falling on each region: `S' i` times pixel area.
pub fn region_energy_weights(grid: &FootprintGrid, segmentation: &Segmentation) -> Result<Vec<f64>> {
    if segmentation.labels.len() != grid.len() {
        return config(format!(
            "segmentation covers {} pixels, grid has {}",
            segmentation.labels.len(),
            grid.len()
        ));
    }
    let mut w = vec![0.0; segmentation.regions];
    for (&l, &i) in segmentation.labels.iter().zip(grid.irradiance()) {
        w[l] += i;
    }
    let area = grid.pixel_area();
    w.iter_mut().for_each(|v| *v *= area);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn beam() -> BeamSpec {
        BeamSpec::default()
    }

    #[test]
    fn sigma_at_fifty_metres() {
        let s = sigma_at_range(&beam(), 50.0).unwrap();
        assert!((s - 0.3e-3 * 50.0 / 2.3548).abs() < 1e-6);
        assert!((s * 1e3 - 6.37).abs() < 0.005);
        let s100 = sigma_at_range(&beam(), 100.0).unwrap();
        assert!((s100 - 2.0 * s).abs() < 1e-15);
        assert!(sigma_at_range(&beam(), 1e-12).unwrap() < 1e-14);
        assert!(sigma_at_range(&beam(), 0.0).is_err());
        assert!(sigma_at_range(&beam(), -1.0).is_err());
    }

    #[test]
    fn circular_profile_values() {
        assert_eq!(irradiance_circular([0.0, 0.0], 1.0, 1.0).unwrap(), 1.0);
        let s = 0.7;
        assert!((irradiance_circular([s, 0.0], s, 1.0).unwrap() - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!((irradiance_circular([2.0 * s, 0.0], s, 1.0).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
        assert!(irradiance_circular([1.0, 0.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn elliptical_profile_values() {
        let p = EllipticalProfile::new(2.0, 1.0, 0.4).unwrap();
        let on_axis = [2.0 * 0.4f64.cos(), 2.0 * 0.4f64.sin()];
        assert!((irradiance_elliptical(on_axis, &p, 3.0).unwrap() - 3.0 * (-0.5f64).exp()).abs() < 1e-12);
        let flipped = EllipticalProfile::new(2.0, 1.0, 0.4 + PI).unwrap();
        for q in [[0.3, -1.2], [1.5, 0.2], [-0.7, 0.9]] {
            let a = irradiance_elliptical(q, &p, 1.0).unwrap();
            let b = irradiance_elliptical(q, &flipped, 1.0).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        assert!(EllipticalProfile::new(1.0, 0.0, 0.0).is_err());
        assert!(EllipticalProfile::new(0.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn grid_shape_and_peak() {
        let g = discretize_footprint(&beam(), 50.0, 20, 4.0).unwrap();
        assert_eq!(g.side(), 160);
        assert_eq!(g.len(), 160 * 160);
        let max = g.irradiance().iter().cloned().fold(f64::MIN, f64::max);
        // the four pixels around the axis share the maximum
        let c = g.side() / 2;
        assert_eq!(g.irradiance()[c * g.side() + c], max);
        assert!(discretize_footprint(&beam(), 50.0, 3, 4.0).is_err());
        assert!(discretize_footprint(&beam(), 50.0, 8, 1.5).is_err());
    }

    #[test]
    fn grid_energy_matches_analytic() {
        let g = discretize_footprint(&beam(), 50.0, 20, 4.0).unwrap();
        let rel = (g.total_energy() - g.analytic_energy()).abs() / g.analytic_energy();
        assert!(rel < 0.01);
        assert!(rel <= g.energy_tolerance());
        let fine = discretize_footprint(&beam(), 50.0, 40, 4.0).unwrap();
        assert!((fine.total_energy() - g.total_energy()).abs() / g.total_energy() < 1e-3);
    }

    #[test]
    fn ring_areas_follow_odd_numbers() {
        let r = ring_energy_basis(1.0, 1.0, 3).unwrap();
        for (a, k) in r.ring_areas.iter().zip([1.0, 3.0, 5.0]) {
            assert!((a - PI * k).abs() < 1e-12);
        }
        assert!(r.densities.windows(2).all(|w| w[0] > w[1]));
        assert!(ring_energy_basis(1.0, 0.0, 3).is_err());
        assert!(ring_energy_basis(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn ring_energy_telescopes_to_cumulative_gaussian() {
        let sigma = 2.5e-3;
        let r = ring_energy_basis(sigma, sigma / 10.0, 40).unwrap();
        let total: f64 = r.densities.iter().zip(&r.ring_areas).map(|(s, a)| s * a).sum();
        let frac = total / (2.0 * PI * sigma * sigma);
        let oracle = 1.0 - (-8.0f64).exp();
        assert!((frac - oracle).abs() / oracle < 0.01);
    }

    #[test]
    fn region_weights_half_planes_and_identity() {
        let g = discretize_footprint(&beam(), 50.0, 12, 4.0).unwrap();
        let labels = g.centers().iter().map(|c| usize::from(c[0] >= 0.0)).collect();
        let seg = Segmentation::from_labels(labels, 2).unwrap();
        let w = region_energy_weights(&g, &seg).unwrap();
        assert!((w[0] - w[1]).abs() <= 1e-14 * w[0]);

        let whole = Segmentation::from_labels(vec![0; g.len()], 1).unwrap();
        let w1 = region_energy_weights(&g, &whole).unwrap();
        assert!((w1[0] - g.total_energy()).abs() <= 1e-12 * w1[0]);
    }

    #[test]
    fn one_hot_rows_must_sum_to_one() {
        let ok = Segmentation::from_one_hot(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(ok.labels(), &[0, 1]);
        assert_eq!(ok.to_one_hot(), vec![1.0, 0.0, 0.0, 1.0]);
        let bad = Segmentation::from_one_hot(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(bad, Err(Error::PartitionViolation { pixel: 0, .. })));
        let empty_row = Segmentation::from_one_hot(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(empty_row, Err(Error::PartitionViolation { pixel: 1, .. })));
    }

    #[test]
    fn beam_spec_json_keys() {
        let json = serde_json::to_value(BeamSpec::default()).unwrap();
        assert_eq!(json["divergence_mrad"], 0.3);
        assert_eq!(json["pulse_fwhm_ns"], 4.0);
        assert_eq!(json["sampling_rate_hz"], 5e9);
        assert_eq!(json["peak_irradiance"], 1.0);
        let back: BeamSpec = serde_json::from_value(json).unwrap();
        assert!((back.divergence() - 0.3e-3).abs() < 1e-18);
        let bad = serde_json::from_str::<BeamSpec>(r#"{"divergence_mrad":-1,"pulse_fwhm_ns":4,"sampling_rate_hz":5e9}"#);
        assert!(bad.is_err());
    }
}
