//! File formats shared by the command-line tools: sampled-signal CSV, point
//! and truth tables, run manifests, and staged output directories.

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::forward::{LrcsSeries, Waveform, SPEED_OF_LIGHT};
use crate::radiometry::{PointRecord, PointRow};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Wraps any failure while reading `path` as an input error.
fn input<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
        other => Error::Config(format!("{}: {other}", path.display())),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SignalRow {
    t_ns: f64,
    amplitude: f64,
}

/// Samples read from a `t_ns,amplitude` file. `dt` is `None` for a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTable {
    pub t0: f64,
    pub dt: Option<f64>,
    pub values: Vec<f64>,
}

impl SignalTable {
    fn read(path: &Path) -> Result<Self> {
        input(path, Self::parse(path))
    }

    fn parse(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let rows: Vec<SignalRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        if rows.is_empty() {
            return config("no samples");
        }
        let times: Vec<f64> = rows.iter().map(|r| r.t_ns * 1e-9).collect();
        let dt = if rows.len() > 1 {
            let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
            if !(dt.is_finite() && dt > 0.0) {
                return config("sample times must increase");
            }
            if times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-6 * dt) {
                return config("samples are not uniformly spaced");
            }
            Some(dt)
        } else {
            None
        };
        Ok(Self { t0: times[0], dt, values: rows.into_iter().map(|r| r.amplitude).collect() })
    }

    fn spacing(&self, fallback: f64, path: &Path) -> Result<f64> {
        match self.dt {
            Some(dt) => Ok(dt),
            None if fallback > 0.0 => Ok(fallback),
            None => config(format!("{}: cannot infer the sample spacing from one row", path.display())),
        }
    }
}

fn write_signal(path: &Path, t0: f64, dt: f64, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (k, &amplitude) in values.iter().enumerate() {
        w.serialize(SignalRow { t_ns: (t0 + k as f64 * dt) * 1e9, amplitude })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_waveform(path: &Path, w: &Waveform) -> Result<()> {
    write_signal(path, w.t0, w.dt, &w.samples)
}

/// Single-row files take `fallback_dt` as their spacing.
pub fn read_waveform(path: &Path, fallback_dt: f64) -> Result<Waveform> {
    let s = SignalTable::read(path)?;
    let dt = s.spacing(fallback_dt, path)?;
    input(path, Waveform::new(s.values, dt, s.t0))
}

/// Backscatter density (per-bin value over `dt`) against two-way time, so
/// an LRCS file reads like the waveform it was recovered from.
pub fn write_lrcs(path: &Path, l: &LrcsSeries) -> Result<()> {
    write_waveform(path, &l.to_waveform())
}

/// Negative samples are rejected rather than clamped.
pub fn read_lrcs(path: &Path, fallback_dt: f64) -> Result<LrcsSeries> {
    let s = SignalTable::read(path)?;
    let dt = s.spacing(fallback_dt, path)?;
    input(path, LrcsSeries::new(s.values.iter().map(|v| v * dt).collect(), dt, s.t0 * SPEED_OF_LIGHT / 2.0))
}

pub fn write_points(path: &Path, points: &[PointRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(PointRow::from(p))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<Vec<PointRecord>> {
    input(path, read_rows::<PointRow>(path)?.into_iter().map(PointRecord::try_from).collect())
}

/// Ground truth for one simulated point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub point: usize,
    pub entry: String,
    pub label: String,
    pub situation: String,
    pub incidence_deg: f64,
    pub truth_intensity: f64,
}

/// Single-factor corrections of one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub point: usize,
    pub angle_only: f64,
    pub subfootprint_only: f64,
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = csv::Reader::from_path(path).map_err(Error::from).and_then(|mut rdr| {
        rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(Error::from)
    });
    input(path, r)
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = fs::read_to_string(path).map_err(Error::from).and_then(|s| serde_json::from_str(&s).map_err(Error::from));
    input(path, r)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// One footprint as tracked through the pipeline. File references are
/// relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub situation: String,
    pub incidence_deg: f64,
    /// Half-open row range of the entry's points in the points file.
    pub points: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waveform: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lrcs_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lrcs: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deconvolution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unmixing: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub dt_ns: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<String>,
    pub entries: Vec<ManifestEntry>,
    /// Every file the command wrote, in write order.
    pub files: Vec<String>,
}

/// A manifest together with the directory its references resolve against.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub dir: PathBuf,
}

impl LoadedManifest {
    /// Accepts the manifest file or the directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let manifest: Manifest = read_json(&file)?;
        if manifest.schema_version != MANIFEST_VERSION {
            return config(format!("{}: unsupported manifest version {}", file.display(), manifest.schema_version));
        }
        let dir = absolute(file.parent().unwrap_or(Path::new(".")))?;
        for f in &manifest.files {
            let p = dir.join(f);
            if !p.is_file() {
                return config(format!("{}: listed file {} is missing", file.display(), p.display()));
            }
        }
        Ok(Self { manifest, dir })
    }

    pub fn resolve(&self, reference: &str) -> PathBuf {
        self.dir.join(reference)
    }

    /// Absolute form of a reference, for carrying it into another manifest.
    pub fn carry(&self, reference: &Option<String>) -> Option<String> {
        reference.as_ref().map(|r| self.resolve(r).to_string_lossy().into_owned())
    }

    pub fn require(&self, reference: &Option<String>, what: &str) -> Result<PathBuf> {
        match reference {
            Some(r) => Ok(self.resolve(r)),
            None => config(format!("manifest in {} has no {what}", self.dir.display())),
        }
    }
}

/// Lexically absolute path without requiring it to exist.
pub fn absolute(path: &Path) -> Result<PathBuf> {
    let joined = if path.is_absolute() { path.to_path_buf() } else { std::env::current_dir()?.join(path) };
    let mut out = PathBuf::new();
    for c in joined.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    Ok(out)
}

/// Output files written into a hidden sibling of the target directory and
/// moved into place only by [`Staging::commit`]. Dropping an uncommitted
/// staging area removes everything written to it.
pub struct Staging {
    dir: tempfile::TempDir,
    out: PathBuf,
    files: Vec<String>,
}

impl Staging {
    pub fn new(out: &Path) -> Result<Self> {
        let out = absolute(out)?;
        let parent = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("/"));
        fs::create_dir_all(&parent)?;
        let dir = tempfile::Builder::new().prefix(".subfootprint-staging-").tempdir_in(&parent)?;
        Ok(Self { dir, out, files: Vec::new() })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// Registers `relative` and returns where to write it.
    pub fn file(&mut self, relative: &str) -> Result<PathBuf> {
        let path = self.dir.path().join(relative);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        self.files.push(relative.to_owned());
        Ok(path)
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    /// Writes `manifest` (with the file list filled in) and moves every
    /// staged file into the output directory.
    pub fn commit(mut self, mut manifest: Manifest) -> Result<PathBuf> {
        let path = self.file(MANIFEST_FILE)?;
        manifest.files = self.files.clone();
        write_json(&path, &manifest)?;
        fs::create_dir_all(&self.out)?;
        for f in &self.files {
            let target = self.out.join(f);
            if let Some(p) = target.parent() {
                fs::create_dir_all(p)?;
            }
            fs::rename(self.dir.path().join(f), &target)?;
        }
        Ok(self.out.join(MANIFEST_FILE))
    }
}
