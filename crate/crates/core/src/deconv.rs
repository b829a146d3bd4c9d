//! Removal of the system response from recorded waveforms.
//!
//! Both solvers estimate every sample that can reach the observation through
//! the kernel, so edge samples are fully explained. The samples whose response
//! is only partly observed are trimmed from the result.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::forward::{LrcsSeries, Waveform, SPEED_OF_LIGHT};

/// Full linear convolution scaled by `dt`, so integrals multiply.
pub fn convolve(a: &Waveform, b: &Waveform) -> Result<Waveform> {
    if !a.same_dt(b.dt) {
        return config(format!("sample spacings differ: {} vs {}", a.dt, b.dt));
    }
    if a.is_empty() || b.is_empty() {
        return config("cannot convolve an empty waveform");
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.samples.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (j, y) in b.samples.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out.iter_mut().for_each(|v| *v *= a.dt);
    Waveform::new(out, a.dt, a.t0 + b.t0)
}

/// Instrument impulse response, non-negative with unit integral.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemResponse {
    waveform: Waveform,
}

impl SystemResponse {
    /// Clamps negative samples and rescales to unit integral.
    pub fn new(w: Waveform) -> Result<Self> {
        let mut samples: Vec<f64> = w.samples.iter().map(|v| v.max(0.0)).collect();
        let total = samples.iter().sum::<f64>() * w.dt;
        if total <= 0.0 {
            return domain("system response has no positive samples");
        }
        samples.iter_mut().for_each(|v| *v /= total);
        Ok(Self { waveform: Waveform::new(samples, w.dt, w.t0)? })
    }

    pub fn impulse(dt: f64) -> Result<Self> {
        Self::new(Waveform::impulse(dt, 0.0)?)
    }

    pub fn waveform(&self) -> &Waveform {
        &self.waveform
    }

    pub fn dt(&self) -> f64 {
        self.waveform.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(alias = "rl")]
    RichardsonLucy,
    Gold,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Algorithm::RichardsonLucy => f.write_str("richardson_lucy"),
            Algorithm::Gold => f.write_str("gold"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeconvOptions {
    pub algorithm: Algorithm,
    pub max_iters: usize,
    pub stop_ratio: f64,
    /// Extrapolate along successive updates, falling back to a plain
    /// update whenever that would increase the scheme's objective.
    pub accelerate: bool,
}

impl Default for DeconvOptions {
    fn default() -> Self {
        Self { algorithm: Algorithm::RichardsonLucy, max_iters: 500, stop_ratio: 1e-6, accelerate: true }
    }
}

/// Estimate plus iteration diagnostics.
#[derive(Debug, Clone)]
pub struct Deconvolution {
    pub lrcs: LrcsSeries,
    pub iterations: usize,
    /// L2 norm of `kernel * estimate - observed` after each iteration.
    pub residuals: Vec<f64>,
    /// Generalised Kullback-Leibler divergence after each iteration.
    pub divergences: Vec<f64>,
}

impl Deconvolution {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }
}

pub fn richardson_lucy(observed: &Waveform, kernel: &SystemResponse, max_iters: usize, stop_ratio: f64) -> Result<LrcsSeries> {
    let opts = DeconvOptions { algorithm: Algorithm::RichardsonLucy, max_iters, stop_ratio, ..Default::default() };
    Ok(deconvolve(observed, kernel, &opts)?.lrcs)
}

pub fn gold_deconvolution(observed: &Waveform, kernel: &SystemResponse, max_iters: usize, stop_ratio: f64) -> Result<LrcsSeries> {
    let opts = DeconvOptions { algorithm: Algorithm::Gold, max_iters, stop_ratio, ..Default::default() };
    Ok(deconvolve(observed, kernel, &opts)?.lrcs)
}

/// Convolution with a fixed kernel restricted to the observed window.
struct Blur<'a> {
    h: &'a [f64],
    dt: f64,
    n: usize,
}

impl Blur<'_> {
    /// Estimate length: the observation padded by the kernel width.
    fn domain_len(&self) -> usize {
        self.n + self.h.len() - 1
    }

    /// `y[i] = dt * sum_k h[k] x[i + L - 1 - k]`.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let l = self.h.len();
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, hk) in self.h.iter().enumerate() {
                acc += hk * x[i + l - 1 - k];
            }
            *yi = acc * self.dt;
        }
    }

    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        let l = self.h.len();
        x.iter_mut().for_each(|v| *v = 0.0);
        for (i, yi) in y.iter().enumerate() {
            let s = yi * self.dt;
            for (k, hk) in self.h.iter().enumerate() {
                x[i + l - 1 - k] += hk * s;
            }
        }
    }
}

/// Runs the chosen multiplicative scheme and reports its iteration history.
pub fn deconvolve(observed: &Waveform, kernel: &SystemResponse, opts: &DeconvOptions) -> Result<Deconvolution> {
    if !observed.same_dt(kernel.dt()) {
        return config(format!("observation dt {} differs from kernel dt {}", observed.dt, kernel.dt()));
    }
    if observed.is_empty() {
        return config("empty observation");
    }
    if !(opts.stop_ratio.is_finite() && opts.stop_ratio >= 0.0) {
        return domain("stop ratio must be >= 0");
    }
    let dt = observed.dt;
    let h = &kernel.waveform().samples;
    let l = h.len();
    let y: Vec<f64> = observed.samples.iter().map(|v| v.max(0.0)).collect();
    let blur = Blur { h, dt, n: y.len() };
    let m = blur.domain_len();
    // Sample `i` of the estimate sits at this absolute time.
    let x_t0 = observed.t0 - kernel.waveform().t0 - (l - 1) as f64 * dt;

    let trim = |x: &[f64]| -> Result<LrcsSeries> {
        // Support whose whole response lies inside the observation.
        let lo = l - 1;
        let keep = lo..lo + (y.len() + 1).saturating_sub(l).max(1);
        let values: Vec<f64> = x[keep.clone()].iter().map(|v| v * dt).collect();
        let t0 = x_t0 + keep.start as f64 * dt;
        LrcsSeries::new(values, dt, t0 * SPEED_OF_LIGHT / 2.0)
    };

    let total: f64 = y.iter().sum();
    if total == 0.0 {
        let x = vec![0.0; m];
        return Ok(Deconvolution { lrcs: trim(&x)?, iterations: 0, residuals: vec![0.0], divergences: vec![0.0] });
    }

    let mut sensitivity = vec![0.0; m];
    blur.adjoint(&vec![1.0; y.len()], &mut sensitivity);
    let mut hty = vec![0.0; m];
    blur.adjoint(&y, &mut hty);

    let kernel_mass: f64 = h.iter().sum::<f64>() * dt;
    let mut x = vec![total / (m as f64 * kernel_mass); m];
    let mut hx = vec![0.0; y.len()];
    let mut ratio = vec![0.0; y.len()];
    let mut back = vec![0.0; m];

    // One multiplicative update applied at `from`.
    let mut step = |from: &[f64], out: &mut Vec<f64>| {
        blur.apply(from, &mut hx);
        out.clear();
        match opts.algorithm {
            Algorithm::RichardsonLucy => {
                for (r, (a, b)) in ratio.iter_mut().zip(y.iter().zip(&hx)) {
                    *r = if *b > 0.0 { a / b } else { 0.0 };
                }
                blur.adjoint(&ratio, &mut back);
                out.extend((0..m).map(|j| if sensitivity[j] > 0.0 { from[j] * back[j] / sensitivity[j] } else { from[j] }));
            }
            Algorithm::Gold => {
                blur.adjoint(&hx, &mut back);
                out.extend((0..m).map(|j| if back[j] > 0.0 { from[j] * hty[j] / back[j] } else { 0.0 }));
            }
        }
    };
    // The quantity each scheme is known to decrease.
    let merit = |model: &[f64]| match opts.algorithm {
        Algorithm::RichardsonLucy => i_divergence(&y, model),
        Algorithm::Gold => residual_norm(model, &y).powi(2),
    };

    let mut model = vec![0.0; y.len()];
    blur.apply(&x, &mut model);
    let mut current = merit(&model);
    let mut prev_res = residual_norm(&model, &y);
    let mut residuals = Vec::new();
    let mut divergences = Vec::new();
    let mut iterations = 0;
    let mut x_prev = x.clone();
    let mut predicted = vec![0.0; m];
    let mut next = Vec::with_capacity(m);
    // Last two update directions, for vector extrapolation.
    let mut g1: Option<Vec<f64>> = None;
    let mut g2: Option<Vec<f64>> = None;

    for _ in 0..opts.max_iters {
        let alpha = match (&g1, &g2, opts.accelerate) {
            (Some(a), Some(b), true) => {
                let den: f64 = b.iter().map(|v| v * v).sum();
                if den > 0.0 {
                    (a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / den).clamp(0.0, 0.999)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        for j in 0..m {
            predicted[j] = (x[j] + alpha * (x[j] - x_prev[j])).max(0.0);
        }
        step(&predicted, &mut next);
        blur.apply(&next, &mut model);
        let mut value = merit(&model);
        if alpha > 0.0 && value > current {
            // Extrapolation overshot: take a plain step instead.
            predicted.copy_from_slice(&x);
            step(&predicted, &mut next);
            blur.apply(&next, &mut model);
            value = merit(&model);
            g1 = None;
        }
        let direction: Vec<f64> = next.iter().zip(&predicted).map(|(a, b)| a - b).collect();
        g2 = g1.take();
        g1 = Some(direction);
        std::mem::swap(&mut x_prev, &mut x);
        x.clone_from(&next);
        current = value;
        iterations += 1;

        let r = residual_norm(&model, &y);
        residuals.push(r);
        divergences.push(i_divergence(&y, &model));
        let change = if prev_res > 0.0 { (prev_res - r).abs() / prev_res } else { 0.0 };
        prev_res = r;
        if r == 0.0 || change < opts.stop_ratio {
            break;
        }
    }
    Ok(Deconvolution { lrcs: trim(&x)?, iterations, residuals, divergences })
}

fn residual_norm(model: &[f64], y: &[f64]) -> f64 {
    model.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// `sum y ln(y / m) - y + m`, the quantity Richardson-Lucy decreases.
pub fn i_divergence(y: &[f64], model: &[f64]) -> f64 {
    y.iter()
        .zip(model)
        .map(|(&a, &b)| {
            let log_term = if a > 0.0 { a * (a / b.max(f64::MIN_POSITIVE)).ln() } else { 0.0 };
            log_term - a + b
        })
        .sum()
}

/// Zero-lag normalised cross-correlation of two series on a common bin grid.
/// Bins present in only one series count as zero in the other.
pub fn normalized_cross_correlation(a: &LrcsSeries, b: &LrcsSeries) -> Result<f64> {
    if (a.dt - b.dt).abs() > 1e-9 * a.dt {
        return config("series have different bin durations");
    }
    let offset = b.bin_of(a.range0);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (i, va) in a.values.iter().enumerate() {
        aa += va * va;
        let j = i as i64 + offset;
        if j >= 0 && (j as usize) < b.len() {
            ab += va * b.values[j as usize];
        }
    }
    for vb in &b.values {
        bb += vb * vb;
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok(0.0);
    }
    Ok(ab / (aa * bb).sqrt())
}
