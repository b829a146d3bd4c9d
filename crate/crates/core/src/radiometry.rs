//! Range and incidence normalisation, the per-point correction pipeline and
//! the evaluation metrics computed over corrected point clouds.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::forward::LrcsSeries;
use crate::unmix::{solve_unmixing, EnergyDensityBasis, ReflectanceBasis, SolverOptions, UnmixingProblem, UnmixingResult};

/// One point of a cloud together with the intensities attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRecord {
    pub position: [f64; 3],
    pub range: f64,
    /// Radians.
    pub incidence: f64,
    pub raw_intensity: f64,
    pub corrected_intensity: Option<f64>,
    pub label: Option<String>,
    /// The footprint spans more than one target.
    pub edge_flag: bool,
}

impl PointRecord {
    pub fn new(position: [f64; 3], range: f64, incidence: f64, raw_intensity: f64) -> Result<Self> {
        if !(range.is_finite() && range > 0.0) {
            return domain(format!("point range must be > 0, got {range}"));
        }
        if !(raw_intensity.is_finite() && raw_intensity >= 0.0) {
            return domain(format!("raw intensity must be >= 0, got {raw_intensity}"));
        }
        if !incidence.is_finite() {
            return domain("incidence must be finite");
        }
        Ok(Self { position, range, incidence, raw_intensity, corrected_intensity: None, label: None, edge_flag: false })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn intensity(&self, field: IntensityField) -> Option<f64> {
        match field {
            IntensityField::Raw => Some(self.raw_intensity),
            IntensityField::Corrected => self.corrected_intensity,
        }
    }
}

/// CSV row layout of a [`PointRecord`]; the incidence is stored in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub range_m: f64,
    pub incidence_deg: f64,
    pub raw_intensity: f64,
    pub corrected_intensity: Option<f64>,
    pub label: Option<String>,
    pub edge_flag: bool,
}

impl From<&PointRecord> for PointRow {
    fn from(p: &PointRecord) -> Self {
        Self {
            x: p.position[0],
            y: p.position[1],
            z: p.position[2],
            range_m: p.range,
            incidence_deg: p.incidence.to_degrees(),
            raw_intensity: p.raw_intensity,
            corrected_intensity: p.corrected_intensity,
            label: p.label.clone(),
            edge_flag: p.edge_flag,
        }
    }
}

impl TryFrom<PointRow> for PointRecord {
    type Error = crate::Error;

    fn try_from(r: PointRow) -> Result<Self> {
        let mut p = PointRecord::new([r.x, r.y, r.z], r.range_m, r.incidence_deg.to_radians(), r.raw_intensity)?;
        if let Some(c) = r.corrected_intensity {
            if !(c.is_finite() && c >= 0.0) {
                return domain(format!("corrected intensity must be >= 0, got {c}"));
            }
        }
        p.corrected_intensity = r.corrected_intensity;
        p.label = r.label.filter(|l| !l.is_empty());
        p.edge_flag = r.edge_flag;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityField {
    Raw,
    Corrected,
}

impl fmt::Display for IntensityField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Corrected => "corrected",
        })
    }
}

/// `intensity * (range / ref_range)^2`.
pub fn range_correct(intensity: f64, range: f64, ref_range: f64) -> Result<f64> {
    if !(range.is_finite() && range > 0.0 && ref_range.is_finite() && ref_range > 0.0) {
        return domain(format!("ranges must be > 0, got {range} and {ref_range}"));
    }
    Ok(intensity * (range / ref_range).powi(2))
}

/// Lambertian normalisation, `intensity / cos(incidence)`.
pub fn incidence_correct(intensity: f64, incidence: f64) -> Result<f64> {
    if !(incidence.is_finite() && (0.0..std::f64::consts::FRAC_PI_2).contains(&incidence)) {
        return domain(format!("incidence {incidence} rad outside [0, pi/2)"));
    }
    Ok(intensity / incidence.cos())
}

/// Which stages of the pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionFlags {
    pub range: bool,
    pub incidence: bool,
    pub subfootprint: bool,
}

impl Default for CorrectionFlags {
    fn default() -> Self {
        Self::ALL
    }
}

impl CorrectionFlags {
    pub const ALL: Self = Self { range: true, incidence: true, subfootprint: true };
    pub const NONE: Self = Self { range: false, incidence: false, subfootprint: false };
    pub const INCIDENCE_ONLY: Self = Self { range: false, incidence: true, subfootprint: false };
    pub const SUBFOOTPRINT_ONLY: Self = Self { range: false, incidence: false, subfootprint: true };
}

/// Everything the pipeline needs besides the point and its LRCS.
#[derive(Debug, Clone)]
pub struct CorrectionTemplate {
    pub psi: ReflectanceBasis,
    pub s_basis: EnergyDensityBasis,
    /// Sparsity weights as multiples of `||L||^2` of the LRCS being unmixed.
    pub lambda1_scale: f64,
    pub lambda2_scale: f64,
    pub options: SolverOptions,
    pub reference_range: f64,
    pub flags: CorrectionFlags,
    /// Bins a point may sit outside a target span and still match it.
    pub match_tolerance: usize,
    /// Collapse each return to one slice before unmixing.
    pub merge_returns: bool,
    /// Bins under this fraction of the peak count as background.
    pub return_floor: f64,
    /// Background bins a single return may straddle.
    pub return_gap: usize,
}

impl CorrectionTemplate {
    pub fn new(psi: ReflectanceBasis, s_basis: EnergyDensityBasis, reference_range: f64) -> Self {
        Self {
            psi,
            s_basis,
            lambda1_scale: 1e-3,
            lambda2_scale: 1e-3,
            options: SolverOptions::default(),
            reference_range,
            flags: CorrectionFlags::ALL,
            match_tolerance: 2,
            merge_returns: true,
            return_floor: 0.01,
            return_gap: 2,
        }
    }

    pub fn with_flags(mut self, flags: CorrectionFlags) -> Self {
        self.flags = flags;
        self
    }

    /// Range-normalises every bin and divides by `cos(incidence)`, as enabled.
    pub fn normalise_lrcs(&self, lrcs: &LrcsSeries, incidence: f64) -> Result<LrcsSeries> {
        let mut values = lrcs.values.clone();
        for (t, v) in values.iter_mut().enumerate() {
            if self.flags.range {
                *v = range_correct(*v, lrcs.range_of(t), self.reference_range)?;
            }
            if self.flags.incidence {
                *v = incidence_correct(*v, incidence)?;
            }
        }
        LrcsSeries::new(values, lrcs.dt, lrcs.range0)
    }

    /// Unmixes the normalised LRCS of one footprint. With merged returns the
    /// targets report the span of the return they were recovered from.
    pub fn unmix(&self, lrcs: &LrcsSeries, incidence: f64) -> Result<UnmixingResult> {
        let normalised = self.normalise_lrcs(lrcs, incidence)?;
        let (input, spans) = if self.merge_returns {
            let (merged, spans) = merge_returns(&normalised, self.return_floor, self.return_gap)?;
            (merged, Some(spans))
        } else {
            (normalised, None)
        };
        let energy: f64 = input.values.iter().map(|v| v * v).sum();
        let problem = UnmixingProblem::new(input, self.psi.clone(), self.s_basis.clone())
            .with_lambdas(self.lambda1_scale * energy, self.lambda2_scale * energy)
            .with_options(self.options);
        let mut result = solve_unmixing(&problem)?;
        if let Some(spans) = spans {
            for t in &mut result.targets {
                if let Some(r) = spans.iter().find(|r| r.contains(&t.bin_start)) {
                    t.bin_start = r.start;
                    t.bin_end = t.bin_end.max(r.end - 1);
                }
            }
        }
        Ok(result)
    }
}

/// Zeroes bins under `floor * peak`, groups the rest into returns that may
/// straddle up to `gap` empty bins, and moves each return's total onto its
/// centroid bin. Returns the merged series and each return's bin span.
pub fn merge_returns(lrcs: &LrcsSeries, floor: f64, gap: usize) -> Result<(LrcsSeries, Vec<Range<usize>>)> {
    if !(floor.is_finite() && (0.0..1.0).contains(&floor)) {
        return config(format!("return floor must lie in [0, 1), got {floor}"));
    }
    let v = &lrcs.values;
    let peak = v.iter().copied().fold(0.0, f64::max);
    let cutoff = floor * peak;
    let lit: Vec<usize> = (0..v.len()).filter(|&t| v[t] > 0.0 && v[t] >= cutoff).collect();
    let mut spans: Vec<Range<usize>> = Vec::new();
    for &t in &lit {
        match spans.last_mut() {
            Some(r) if t - (r.end - 1) <= gap + 1 => r.end = t + 1,
            _ => spans.push(t..t + 1),
        }
    }
    let mut merged = vec![0.0; v.len()];
    for r in &spans {
        let (mut sum, mut moment) = (0.0, 0.0);
        for t in r.clone().filter(|&t| v[t] >= cutoff) {
            sum += v[t];
            moment += v[t] * t as f64;
        }
        merged[(moment / sum).round() as usize] = sum;
    }
    Ok((LrcsSeries::new(merged, lrcs.dt, lrcs.range0)?, spans))
}

/// A corrected point and the reason it could not be corrected, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCorrection {
    pub record: PointRecord,
    pub error: Option<String>,
}

/// Corrects a single point against its own footprint LRCS.
pub fn correct_point(record: &PointRecord, lrcs: &LrcsSeries, template: &CorrectionTemplate) -> Result<PointCorrection> {
    Ok(correct_footprint(std::slice::from_ref(record), lrcs, template)?.remove(0))
}

/// Corrects every point returned by one footprint, solving the footprint once.
///
/// Points whose range bin matches no recovered target keep no corrected
/// value, are flagged and carry the reason.
pub fn correct_footprint(points: &[PointRecord], lrcs: &LrcsSeries, template: &CorrectionTemplate) -> Result<Vec<PointCorrection>> {
    if !template.flags.subfootprint {
        return points
            .iter()
            .map(|p| {
                let mut v = p.raw_intensity;
                if template.flags.range {
                    v = range_correct(v, p.range, template.reference_range)?;
                }
                if template.flags.incidence {
                    v = incidence_correct(v, p.incidence)?;
                }
                let mut record = p.clone();
                record.corrected_intensity = Some(v);
                Ok(PointCorrection { record, error: None })
            })
            .collect();
    }
    let Some(first) = points.first() else {
        return Ok(Vec::new());
    };
    let result = template.unmix(lrcs, first.incidence)?;
    let targets = &result.targets;
    Ok(points
        .iter()
        .map(|p| {
            let mut record = p.clone();
            let bin = lrcs.bin_of(p.range);
            let distance = |t: &crate::unmix::Target| {
                if bin < t.bin_start as i64 {
                    t.bin_start as i64 - bin
                } else if bin > t.bin_end as i64 {
                    bin - t.bin_end as i64
                } else {
                    0
                }
            };
            let best = targets.iter().min_by_key(|t| distance(t)).filter(|t| distance(t) <= template.match_tolerance as i64);
            match best {
                Some(t) => {
                    record.corrected_intensity = Some(t.corrected_intensity);
                    record.edge_flag = targets.len() > 1;
                    PointCorrection { record, error: None }
                }
                None => {
                    record.corrected_intensity = None;
                    record.edge_flag = true;
                    PointCorrection { record, error: Some(format!("range bin {bin} matches none of {} recovered targets", targets.len())) }
                }
            }
        })
        .collect())
}

/// Sample statistics of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: f64,
    /// Absent for a single sample.
    pub std: Option<f64>,
    pub count: usize,
}

impl ClassStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Self { mean, std, count: n })
    }
}

impl fmt::Display for ClassStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.2} ± {:.2}", self.mean, s),
            None => write!(f, "{:.2} ± n/a", self.mean),
        }
    }
}

/// Per-label statistics of one intensity field. Unlabelled points and points
/// lacking the field are skipped.
pub fn within_class_stats(points: &[PointRecord], field: IntensityField) -> BTreeMap<String, ClassStats> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in points {
        if let (Some(label), Some(v)) = (&p.label, p.intensity(field)) {
            groups.entry(label.clone()).or_default().push(v);
        }
    }
    groups.into_iter().filter_map(|(k, v)| ClassStats::from_values(&v).map(|s| (k, s))).collect()
}

/// Statistics nested by class then situation.
pub fn grouped_stats<'a>(rows: impl IntoIterator<Item = (&'a str, &'a str, f64)>) -> BTreeMap<String, BTreeMap<String, ClassStats>> {
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for (class, situation, v) in rows {
        groups.entry(class.to_owned()).or_default().entry(situation.to_owned()).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|(c, m)| (c, m.into_iter().filter_map(|(s, v)| ClassStats::from_values(&v).map(|st| (s, st))).collect()))
        .collect()
}

/// Percentage `100 * |estimate - truth| / truth`.
pub fn relative_error(estimate: f64, truth: f64) -> Result<f64> {
    if truth == 0.0 || !truth.is_finite() {
        return domain(format!("relative error needs a non-zero truth, got {truth}"));
    }
    Ok(100.0 * (estimate - truth).abs() / truth.abs())
}

/// Mean of [`relative_error`] over aligned series.
pub fn mean_relative_error(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return config(format!("{} estimates against {} truths", estimates.len(), truths.len()));
    }
    if estimates.is_empty() {
        return domain("mean relative error of an empty series");
    }
    let mut sum = 0.0;
    for (e, t) in estimates.iter().zip(truths) {
        sum += relative_error(*e, *t)?;
    }
    Ok(sum / estimates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` edges, or none for empty input.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|c| **c > 0).count()
    }
}

/// Equal-width histogram over `[min, max]`; the maximum falls in the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return config(format!("a histogram needs at least 2 bins, got {bins}"));
    }
    if values.is_empty() {
        return Ok(Histogram { edges: Vec::new(), counts: Vec::new() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return domain("histogram of non-finite values");
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0; bins];
    for v in values {
        let i = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Histogram of one intensity field; points lacking the field are skipped.
pub fn intensity_histogram(points: &[PointRecord], field: IntensityField, bins: usize) -> Result<Histogram> {
    let values: Vec<f64> = points.iter().filter_map(|p| p.intensity(field)).collect();
    histogram(&values, bins)
}

/// Error reductions obtained by enabling each correction on its own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contributions {
    pub mre_raw: f64,
    pub mre_angle_only: f64,
    pub mre_subfootprint_only: f64,
    pub mre_full: f64,
    /// `mre_raw - mre_angle_only`.
    pub angle_gain: f64,
    /// `mre_raw - mre_subfootprint_only`.
    pub subfootprint_gain: f64,
    /// Gains as fractions of the error removed by the full pipeline.
    pub angle_share: f64,
    pub subfootprint_share: f64,
    /// Error left after full correction, `mre_full`.
    pub residual: f64,
}

/// Aligned per-point series for [`factor_contributions`].
#[derive(Debug, Clone, Copy)]
pub struct AblationSeries<'a> {
    pub raw: &'a [f64],
    pub angle_only: &'a [f64],
    pub subfootprint_only: &'a [f64],
    pub full: &'a [f64],
    pub truth: &'a [f64],
}

impl AblationSeries<'_> {
    fn check(&self, labels: Option<&[String]>) -> Result<usize> {
        let n = self.truth.len();
        let lens = [self.raw.len(), self.angle_only.len(), self.subfootprint_only.len(), self.full.len()];
        if lens.iter().any(|l| *l != n) || labels.is_some_and(|l| l.len() != n) {
            return config(format!("misaligned ablation series: truth has {n} points, variants have {lens:?}"));
        }
        Ok(n)
    }
}

/// Contribution of the angle and sub-footprint corrections over all points.
///
/// When the raw values already match the truth there is nothing to recover
/// and every contribution is zero.
pub fn factor_contributions(series: &AblationSeries<'_>) -> Result<Contributions> {
    series.check(None)?;
    let mre_raw = mean_relative_error(series.raw, series.truth)?;
    let mre_angle_only = mean_relative_error(series.angle_only, series.truth)?;
    let mre_subfootprint_only = mean_relative_error(series.subfootprint_only, series.truth)?;
    let mre_full = mean_relative_error(series.full, series.truth)?;
    if mre_raw == 0.0 {
        return Ok(Contributions {
            mre_raw,
            mre_angle_only,
            mre_subfootprint_only,
            mre_full,
            angle_gain: 0.0,
            subfootprint_gain: 0.0,
            angle_share: 0.0,
            subfootprint_share: 0.0,
            residual: 0.0,
        });
    }
    let angle_gain = mre_raw - mre_angle_only;
    let subfootprint_gain = mre_raw - mre_subfootprint_only;
    let recovered = mre_raw - mre_full;
    let share = |g: f64| if recovered > 0.0 { g / recovered } else { 0.0 };
    Ok(Contributions {
        mre_raw,
        mre_angle_only,
        mre_subfootprint_only,
        mre_full,
        angle_gain,
        subfootprint_gain,
        angle_share: share(angle_gain),
        subfootprint_share: share(subfootprint_gain),
        residual: mre_full,
    })
}

/// [`factor_contributions`] per label.
pub fn factor_contributions_by_label(series: &AblationSeries<'_>, labels: &[String]) -> Result<BTreeMap<String, Contributions>> {
    series.check(Some(labels))?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(label, idx)| {
            let pick = |s: &[f64]| idx.iter().map(|&i| s[i]).collect::<Vec<_>>();
            let (raw, angle, sub, full, truth) =
                (pick(series.raw), pick(series.angle_only), pick(series.subfootprint_only), pick(series.full), pick(series.truth));
            let c = factor_contributions(&AblationSeries { raw: &raw, angle_only: &angle, subfootprint_only: &sub, full: &full, truth: &truth })?;
            Ok((label.to_owned(), c))
        })
        .collect()
}
