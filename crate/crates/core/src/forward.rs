//! Forward model: footprint energy to LRCS, LRCS to recorded waveform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::beam::{FootprintGrid, Segmentation, FWHM_PER_SIGMA};
use crate::deconv::convolve;
use crate::error::{config, domain, Error, Result};
use crate::scene::{segment_footprint, SceneLayout};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// A uniformly sampled signal. `t0` is the absolute time of the first sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub dt: f64,
    pub t0: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, dt: f64, t0: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return domain(format!("sample spacing must be > 0, got {dt}"));
        }
        if !t0.is_finite() || samples.iter().any(|v| !v.is_finite()) {
            return domain("waveform samples must be finite");
        }
        Ok(Self { samples, dt, t0 })
    }

    /// A single sample of unit integral at `t0`.
    pub fn impulse(dt: f64, t0: f64) -> Result<Self> {
        Self::new(vec![1.0 / dt], dt, t0)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, index: usize) -> f64 {
        self.t0 + index as f64 * self.dt
    }

    /// `sum(samples) * dt`.
    pub fn integral(&self) -> f64 {
        self.samples.iter().sum::<f64>() * self.dt
    }

    /// Largest sample and its index; `None` when empty.
    pub fn peak(&self) -> Option<(usize, f64)> {
        self.samples
            .iter()
            .copied()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((i, v)),
            })
    }

    /// Full width at half maximum, interpolated linearly between samples.
    pub fn fwhm(&self) -> Option<f64> {
        let (ip, peak) = self.peak()?;
        if peak <= 0.0 {
            return None;
        }
        let half = 0.5 * peak;
        let s = &self.samples;
        let mut left = None;
        for i in (0..ip).rev() {
            if s[i] < half {
                left = Some(i as f64 + (half - s[i]) / (s[i + 1] - s[i]));
                break;
            }
        }
        let mut right = None;
        for i in ip + 1..s.len() {
            if s[i] < half {
                right = Some(i as f64 - (half - s[i]) / (s[i - 1] - s[i]));
                break;
            }
        }
        Some((right? - left?) * self.dt)
    }

    pub(crate) fn same_dt(&self, other_dt: f64) -> bool {
        (self.dt - other_dt).abs() <= 1e-9 * self.dt.max(other_dt)
    }
}

/// Backscatter per range bin. Bin `t` sits at `range0 + t * c * dt / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrcsSeries {
    pub values: Vec<f64>,
    pub dt: f64,
    pub range0: f64,
}

impl LrcsSeries {
    pub fn new(values: Vec<f64>, dt: f64, range0: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return domain(format!("bin duration must be > 0, got {dt}"));
        }
        if !range0.is_finite() {
            return domain("range of the first bin must be finite");
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return domain("LRCS values must be finite and >= 0");
        }
        Ok(Self { values, dt, range0 })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Range width of one bin, `c * dt / 2`.
    pub fn bin_width(&self) -> f64 {
        SPEED_OF_LIGHT * self.dt / 2.0
    }

    pub fn range_of(&self, bin: usize) -> f64 {
        self.range0 + bin as f64 * self.bin_width()
    }

    /// Nearest bin to `range`, possibly outside the series.
    pub fn bin_of(&self, range: f64) -> i64 {
        ((range - self.range0) / self.bin_width()).round() as i64
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// The series as a density waveform (`values / dt`) in two-way time.
    pub fn to_waveform(&self) -> Waveform {
        Waveform {
            samples: self.values.iter().map(|v| v / self.dt).collect(),
            dt: self.dt,
            t0: 2.0 * self.range0 / SPEED_OF_LIGHT,
        }
    }

    /// Inverse of [`LrcsSeries::to_waveform`]; negative samples are clamped.
    pub fn from_waveform(w: &Waveform) -> Self {
        Self {
            values: w.samples.iter().map(|v| v.max(0.0) * w.dt).collect(),
            dt: w.dt,
            range0: w.t0 * SPEED_OF_LIGHT / 2.0,
        }
    }
}

/// Absolute bin index of a one-way range.
pub fn range_bin(range: f64, dt: f64) -> i64 {
    (2.0 * range / (SPEED_OF_LIGHT * dt)).round() as i64
}

/// Bins each pixel's `energy * reflectance` at its round-trip delay.
pub fn project_to_lrcs(
    grid: &FootprintGrid,
    segmentation: &Segmentation,
    pixel_range: &[f64],
    reflectances: &[f64],
    dt: f64,
) -> Result<LrcsSeries> {
    let gains = vec![1.0; grid.len()];
    project_with_gains(grid, segmentation, pixel_range, reflectances, &gains, dt)
}

fn project_with_gains(
    grid: &FootprintGrid,
    segmentation: &Segmentation,
    pixel_range: &[f64],
    reflectances: &[f64],
    gains: &[f64],
    dt: f64,
) -> Result<LrcsSeries> {
    if !(dt.is_finite() && dt > 0.0) {
        return domain(format!("bin duration must be > 0, got {dt}"));
    }
    let labels = segmentation.labels();
    if labels.len() != grid.len() || pixel_range.len() != grid.len() {
        return config(format!(
            "grid has {} pixels but segmentation has {} and ranges {}",
            grid.len(),
            labels.len(),
            pixel_range.len()
        ));
    }
    if reflectances.len() != segmentation.regions() {
        return config(format!(
            "{} reflectances for {} regions",
            reflectances.len(),
            segmentation.regions()
        ));
    }
    if pixel_range.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return domain("pixel ranges must be > 0");
    }
    let bins: Vec<i64> = pixel_range.iter().map(|&r| range_bin(r, dt)).collect();
    let first = *bins.iter().min().expect("grid is never empty");
    let last = *bins.iter().max().expect("grid is never empty");
    let mut values = vec![0.0; (last - first + 1) as usize];
    let area = grid.pixel_area();
    for (j, &e) in grid.irradiance().iter().enumerate() {
        values[(bins[j] - first) as usize] += e * area * reflectances[labels[j]] * gains[j];
    }
    LrcsSeries::new(values, dt, first as f64 * SPEED_OF_LIGHT * dt / 2.0)
}

/// Radiometric effects applied on top of pure mixing.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RadiometricEffects {
    /// Scale each pixel by the cosine of its patch tilt.
    pub lambertian: bool,
    /// Scale each pixel by `(reference / range)^2`.
    pub inverse_square_reference: Option<f64>,
}

/// Segments `grid` under `layout` and projects it to an LRCS.
pub fn simulate_lrcs(
    grid: &FootprintGrid,
    layout: &SceneLayout,
    dt: f64,
    effects: RadiometricEffects,
) -> Result<(LrcsSeries, Segmentation, Vec<f64>)> {
    let (seg, ranges) = segment_footprint(grid, layout)?;
    let patches = layout.patches();
    let reflectances: Vec<f64> = patches.iter().map(|p| p.reflectance).collect();
    let gains: Vec<f64> = seg
        .labels()
        .iter()
        .zip(&ranges)
        .map(|(&n, &r)| {
            let mut g = 1.0;
            if effects.lambertian {
                g *= patches[n].tilt.cos();
            }
            if let Some(reference) = effects.inverse_square_reference {
                g *= (reference / r).powi(2);
            }
            g
        })
        .collect();
    let lrcs = project_with_gains(grid, &seg, &ranges, &reflectances, &gains, dt)?;
    Ok((lrcs, seg, ranges))
}

/// Unit-integral Gaussian pulse truncated at four sigmas, centred on `t = 0`.
pub fn emit_pulse(fwhm: f64, dt: f64) -> Result<Waveform> {
    if !(dt.is_finite() && dt > 0.0) {
        return domain(format!("sample spacing must be > 0, got {dt}"));
    }
    if !(fwhm.is_finite() && fwhm >= 2.0 * dt) {
        return config(format!("pulse FWHM {fwhm} s is under-sampled at dt = {dt} s"));
    }
    let sigma = fwhm / FWHM_PER_SIGMA;
    let half = (4.0 * sigma / dt).floor() as i64;
    let mut samples: Vec<f64> = (-half..=half)
        .map(|k| {
            let t = k as f64 * dt;
            (-0.5 * (t / sigma).powi(2)).exp()
        })
        .collect();
    let norm = samples.iter().sum::<f64>() * dt;
    samples.iter_mut().for_each(|v| *v /= norm);
    Waveform::new(samples, dt, -half as f64 * dt)
}

/// Noise sigma giving a peak signal-to-noise ratio of `snr_db`.
pub fn noise_sigma_for_snr(peak: f64, snr_db: f64) -> f64 {
    peak / 10f64.powf(snr_db / 20.0)
}

/// `lrcs * pulse (* system_response)` plus seeded white Gaussian noise.
pub fn synthesize_waveform(
    lrcs: &LrcsSeries,
    pulse: &Waveform,
    system_response: Option<&Waveform>,
    noise_sigma: f64,
    seed: u64,
) -> Result<Waveform> {
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return domain(format!("noise sigma must be >= 0, got {noise_sigma}"));
    }
    if !pulse.same_dt(lrcs.dt) {
        return config("LRCS and pulse sample spacings differ");
    }
    let mut out = convolve(&lrcs.to_waveform(), pulse)?;
    if let Some(sys) = system_response {
        out = convolve(&out, sys)?;
    }
    add_noise(&mut out, noise_sigma, seed)?;
    Ok(out)
}

/// Adds seeded white Gaussian noise in place.
pub fn add_noise(w: &mut Waveform, noise_sigma: f64, seed: u64) -> Result<()> {
    if noise_sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut w.samples {
        *v += normal.sample(&mut rng);
    }
    Ok(())
}

/// `sum_k weights[k] * waveforms[k]` delayed by `delays[k]` seconds, each
/// delay rounded to whole samples.
pub fn superpose_extended_returns(waveforms: &[Waveform], delays: &[f64], weights: &[f64]) -> Result<Waveform> {
    if waveforms.is_empty() {
        return config("nothing to superpose");
    }
    if delays.len() != waveforms.len() || weights.len() != waveforms.len() {
        return config("waveforms, delays and weights must have equal lengths");
    }
    let dt = waveforms[0].dt;
    if waveforms.iter().any(|w| !w.same_dt(dt)) {
        return config("waveforms have different sample spacings");
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || delays.iter().any(|d| !d.is_finite()) {
        return domain("weights must be >= 0 and delays finite");
    }
    let starts: Vec<f64> = waveforms.iter().zip(delays).map(|(w, d)| w.t0 + d).collect();
    let base = starts.iter().copied().fold(f64::INFINITY, f64::min);
    let shifts: Vec<usize> = starts.iter().map(|s| ((s - base) / dt).round() as usize).collect();
    let len = waveforms.iter().zip(&shifts).map(|(w, s)| w.len() + s).max().unwrap_or(0);
    let mut samples = vec![0.0; len];
    for ((w, &s), &a) in waveforms.iter().zip(&shifts).zip(weights) {
        for (i, v) in w.samples.iter().enumerate() {
            samples[s + i] += a * v;
        }
    }
    Waveform::new(samples, dt, base)
}

/// Moment skewness of sample time weighted by `max(sample - threshold, 0)`.
pub fn skewness(w: &Waveform, threshold: f64) -> Result<f64> {
    let weights: Vec<f64> = w.samples.iter().map(|v| (v - threshold).max(0.0)).collect();
    let support = weights.iter().filter(|&&a| a > 0.0).count();
    if support < 3 {
        return Err(Error::UndefinedSkewness(format!("{support} samples above threshold")));
    }
    let total: f64 = weights.iter().sum();
    let mean = weights.iter().enumerate().map(|(i, a)| i as f64 * a).sum::<f64>() / total;
    let (mut m2, mut m3) = (0.0, 0.0);
    for (i, a) in weights.iter().enumerate() {
        let d = i as f64 - mean;
        m2 += a * d * d;
        m3 += a * d * d * d;
    }
    m2 /= total;
    m3 /= total;
    if m2 <= f64::EPSILON * mean.abs().max(1.0).powi(2) {
        return Err(Error::UndefinedSkewness("zero spread".into()));
    }
    Ok(m3 / m2.powf(1.5))
}
