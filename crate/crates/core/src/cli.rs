//! The `subfootprint` command line: simulate, deconvolve, unmix, correct and
//! evaluate, chained through run manifests.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{BeamSpec, FootprintGrid};
use crate::deconv::{deconvolve, Algorithm, DeconvOptions, Deconvolution, SystemResponse};
use crate::error::{config, Error, Result};
use crate::experiment::{
    controlled_sweep, correct_with_ablations, default_materials, entry_seed, simulate_footprint, SimulatedFootprint,
    SimulationSettings, SweepSpec,
};
use crate::forward::Waveform;
use crate::io::{
    self, absolute, AblationRow, LoadedManifest, Manifest, ManifestEntry, Staging, TruthRow, MANIFEST_VERSION,
};
use crate::radiometry::{
    factor_contributions, grouped_stats, histogram, mean_relative_error, relative_error, AblationSeries, ClassStats,
    Contributions, CorrectionFlags, CorrectionTemplate,
};
use crate::scene::SceneLayout;
use crate::unmix::{build_reflectance_basis, BasisMode, EnergyDensityBasis, ReflectanceBasis, SolverOptions};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "subfootprint", version, about = "Full-waveform LiDAR sub-footprint simulation and intensity correction")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic stage; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch entries (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory; overrides the configuration (default: ./out).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate waveforms, LRCS truth, layouts and raw points for the configured scene.
    Simulate,
    /// Recover LRCS from waveforms, per manifest entry or for one file pair.
    Deconvolve(DeconvolveArgs),
    /// Unmix LRCS into targets, per manifest entry or for one file.
    Unmix(UnmixArgs),
    /// Correct point intensities using the LRCS listed in a manifest.
    Correct(CorrectArgs),
    /// Compare corrected points with ground truth and emit reports.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgoArg {
    Rl,
    Gold,
}

#[derive(Debug, Args)]
pub struct DeconvolveArgs {
    /// Manifest from `simulate`.
    #[arg(long, conflicts_with_all = ["waveform", "response"])]
    pub manifest: Option<PathBuf>,
    /// Single waveform CSV (t_ns, amplitude).
    #[arg(long, requires = "response")]
    pub waveform: Option<PathBuf>,
    /// System response CSV on the same sampling interval.
    #[arg(long, requires = "waveform")]
    pub response: Option<PathBuf>,
    /// Overrides `deconvolution.algorithm`.
    #[arg(long, value_enum)]
    pub algo: Option<AlgoArg>,
    /// Overrides `deconvolution.max_iters`.
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct UnmixArgs {
    /// Manifest from `deconvolve`.
    #[arg(long, conflicts_with = "lrcs")]
    pub manifest: Option<PathBuf>,
    /// Single LRCS CSV.
    #[arg(long)]
    pub lrcs: Option<PathBuf>,
    /// Incidence angle of a single LRCS file.
    #[arg(long, default_value_t = 0.0)]
    pub incidence_deg: f64,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    /// Manifest from `deconvolve`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Points file; defaults to the one the manifest lists.
    #[arg(long)]
    pub points: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Manifest from `correct`.
    #[arg(long, conflicts_with_all = ["corrected", "truth"])]
    pub manifest: Option<PathBuf>,
    /// corrected.csv from `correct`.
    #[arg(long, requires = "truth")]
    pub corrected: Option<PathBuf>,
    /// truth.csv from `simulate`, row-aligned with the corrected points.
    #[arg(long, requires = "corrected")]
    pub truth: Option<PathBuf>,
    /// ablation.csv; adds the per-factor contribution table.
    #[arg(long)]
    pub ablation: Option<PathBuf>,
}

/// Where the scene comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneSource {
    Sweep(SweepSpec),
    /// Layout JSON, relative to the configuration file.
    LayoutFile(PathBuf),
    Layout(SceneLayout),
}

impl Default for SceneSource {
    fn default() -> Self {
        SceneSource::Sweep(SweepSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub pixels_per_sigma: usize,
    pub extent_sigmas: f64,
    pub lambertian: bool,
    pub inverse_square: bool,
    pub padding_bins: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let s = SimulationSettings::default();
        Self {
            pixels_per_sigma: s.pixels_per_sigma,
            extent_sigmas: s.extent_sigmas,
            lambertian: s.lambertian,
            inverse_square: s.inverse_square,
            padding_bins: s.padding_bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Peak signal-to-noise ratio in dB; `null` for noiseless waveforms.
    pub snr_db: Option<f64>,
    pub seed: Option<u64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { snr_db: Some(30.0), seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnmixingConfig {
    /// Candidate reflectances; defaults to the scene's material library.
    pub basis: Option<BasisMode>,
    /// Sparsity weights as multiples of the squared norm of each LRCS.
    pub lambda1_scale: f64,
    pub lambda2_scale: f64,
    pub solver: SolverOptions,
    pub merge_returns: bool,
    pub return_floor: f64,
    pub return_gap: usize,
    pub match_tolerance: usize,
    pub flags: CorrectionFlags,
    /// Range every intensity is normalised to; defaults to the scene range.
    pub reference_range_m: Option<f64>,
}

impl Default for UnmixingConfig {
    fn default() -> Self {
        let t = CorrectionTemplate::new(ReflectanceBasis::uniform(2).expect("valid basis"), unit_basis(), 1.0);
        Self {
            basis: None,
            lambda1_scale: t.lambda1_scale,
            lambda2_scale: t.lambda2_scale,
            solver: t.options,
            merge_returns: t.merge_returns,
            return_floor: t.return_floor,
            return_gap: t.return_gap,
            match_tolerance: t.match_tolerance,
            flags: t.flags,
            reference_range_m: None,
        }
    }
}

fn unit_basis() -> EnergyDensityBasis {
    EnergyDensityBasis::new(vec![1.0], 1.0).expect("valid basis")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub histogram_bins: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { histogram_bins: 20 }
    }
}

/// Everything a run needs besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub instrument: BeamSpec,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub scene: SceneSource,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub deconvolution: DeconvOptions,
    #[serde(default)]
    pub unmixing: UnmixingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_VERSION,
            instrument: BeamSpec::default(),
            simulation: SimulationConfig::default(),
            scene: SceneSource::default(),
            noise: NoiseConfig::default(),
            deconvolution: DeconvOptions::default(),
            unmixing: UnmixingConfig::default(),
            evaluation: EvaluationConfig::default(),
            out_dir: None,
        }
    }
}

/// One scene to simulate.
#[derive(Debug, Clone)]
pub struct SceneItem {
    pub index: usize,
    pub id: String,
    pub incidence_deg: f64,
    pub layout: SceneLayout,
}

impl RunConfig {
    /// Parses and validates a configuration file. A referenced layout file
    /// is loaded immediately, so a missing one fails here.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = io::read_json(path)?;
        if cfg.schema_version != CONFIG_VERSION {
            return config(format!("{}: unsupported schema_version {}", path.display(), cfg.schema_version));
        }
        if let SceneSource::LayoutFile(f) = &cfg.scene {
            let base = path.parent().unwrap_or(Path::new("."));
            let layout: SceneLayout = io::read_json(&base.join(f))?;
            cfg.scene = SceneSource::Layout(layout);
        }
        if cfg.simulation.pixels_per_sigma == 0 || cfg.evaluation.histogram_bins < 2 {
            return config(format!("{}: pixels_per_sigma must be >= 1 and histogram_bins >= 2", path.display()));
        }
        Ok(cfg)
    }

    pub fn settings(&self) -> SimulationSettings {
        let s = &self.simulation;
        SimulationSettings {
            beam: self.instrument,
            pixels_per_sigma: s.pixels_per_sigma,
            extent_sigmas: s.extent_sigmas,
            snr_db: self.noise.snr_db,
            lambertian: s.lambertian,
            inverse_square: s.inverse_square,
            padding_bins: s.padding_bins,
        }
    }

    pub fn base_range(&self) -> Result<f64> {
        match &self.scene {
            SceneSource::Sweep(spec) => Ok(spec.geometry.base_range_m),
            SceneSource::Layout(l) => Ok(l.base_range()),
            SceneSource::LayoutFile(f) => config(format!("layout file {} was not loaded", f.display())),
        }
    }

    pub fn scenes(&self) -> Result<Vec<SceneItem>> {
        match &self.scene {
            SceneSource::Sweep(spec) => Ok(controlled_sweep(spec)?
                .into_iter()
                .map(|e| SceneItem { index: e.index, id: e.id(), incidence_deg: e.incidence_deg, layout: e.layout })
                .collect()),
            SceneSource::Layout(l) => {
                let names: Vec<&str> = l.patches().iter().map(|p| p.label.as_str()).collect();
                let deg = l.incidence().to_degrees();
                Ok(vec![SceneItem {
                    index: 0,
                    id: format!("000_{}_{}deg", names.join("-"), deg.round() as i64),
                    incidence_deg: deg,
                    layout: l.clone(),
                }])
            }
            SceneSource::LayoutFile(f) => config(format!("layout file {} was not loaded", f.display())),
        }
    }

    /// Reflectance candidates: the configured basis, else the sweep's
    /// materials, else the default material library.
    pub fn reflectance_basis(&self) -> Result<ReflectanceBasis> {
        match (&self.unmixing.basis, &self.scene) {
            (Some(mode), _) => build_reflectance_basis(mode),
            (None, SceneSource::Sweep(spec)) => spec.library(),
            (None, _) => ReflectanceBasis::library(&default_materials().iter().map(|m| m.reflectance).collect::<Vec<_>>()),
        }
    }

    pub fn grid(&self) -> Result<FootprintGrid> {
        self.settings().grid(self.base_range()?)
    }

    pub fn template(&self, grid: &FootprintGrid) -> Result<CorrectionTemplate> {
        let u = &self.unmixing;
        let reference = match u.reference_range_m {
            Some(r) => r,
            None => self.base_range()?,
        };
        let mut t = CorrectionTemplate::new(self.reflectance_basis()?, EnergyDensityBasis::for_grid(grid)?, reference);
        t.lambda1_scale = u.lambda1_scale;
        t.lambda2_scale = u.lambda2_scale;
        t.options = u.solver;
        t.merge_returns = u.merge_returns;
        t.return_floor = u.return_floor;
        t.return_gap = u.return_gap;
        t.match_tolerance = u.match_tolerance;
        t.flags = u.flags;
        Ok(t)
    }
}

/// Process exit status for an error: 2 for bad input or configuration,
/// 1 for a numerical failure while processing valid input.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Domain(_) | Error::ConstraintViolation(_) | Error::UndefinedSkewness(_) => 1,
        _ => 2,
    }
}

/// Parses `args` and runs the selected command. Returns the written
/// manifest's path.
pub fn run_from<I, T>(args: I) -> Result<PathBuf>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = cli.out_dir.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Simulate => simulate(&cfg, cli.seed, &out),
        Command::Deconvolve(a) => deconvolve_cmd(&cfg, a, &out),
        Command::Unmix(a) => unmix_cmd(&cfg, a, &out),
        Command::Correct(a) => correct_cmd(&cfg, a, &out),
        Command::Evaluate(a) => evaluate_cmd(&cfg, a, &out),
    })
}

fn manifest(command: &str, dt: f64) -> Manifest {
    Manifest { schema_version: MANIFEST_VERSION, command: command.into(), dt_ns: dt * 1e9, ..Default::default() }
}

/// Simulates every configured scene. Noise needs a seed.
pub fn simulate(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> Result<PathBuf> {
    let seed = seed.or(cfg.noise.seed);
    let seed = match (cfg.noise.snr_db, seed) {
        (Some(_), None) => return config("noisy simulation needs a seed (--seed or noise.seed)"),
        (_, s) => s.unwrap_or(0),
    };
    let settings = cfg.settings();
    let scenes = cfg.scenes()?;
    let grid = cfg.grid()?;
    let sims: Vec<SimulatedFootprint> = scenes
        .par_iter()
        .map(|s| simulate_footprint(&settings, &grid, &s.layout, entry_seed(seed, s.index)))
        .collect::<Result<_>>()?;

    let dt = settings.beam.dt();
    let mut stage = Staging::new(out)?;
    let mut m = manifest("simulate", dt);
    io::write_waveform(&stage.file("response.csv")?, &settings.pulse()?)?;
    m.response = Some("response.csv".into());
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (s, sim) in scenes.iter().zip(&sims) {
        let dir = format!("entries/{}", s.id);
        let layout = format!("{dir}/layout.json");
        let waveform = format!("{dir}/waveform.csv");
        let lrcs_truth = format!("{dir}/lrcs_truth.csv");
        io::write_json(&stage.file(&layout)?, &s.layout)?;
        io::write_waveform(&stage.file(&waveform)?, &sim.waveform)?;
        io::write_lrcs(&stage.file(&lrcs_truth)?, &sim.lrcs)?;
        let start = points.len();
        for (p, t) in sim.points.iter().zip(&sim.truth) {
            truth.push(TruthRow {
                point: points.len(),
                entry: s.id.clone(),
                label: p.label.clone().unwrap_or_default(),
                situation: sim.situation.clone(),
                incidence_deg: s.incidence_deg,
                truth_intensity: *t,
            });
            points.push(p.clone());
        }
        m.entries.push(ManifestEntry {
            id: s.id.clone(),
            situation: sim.situation.clone(),
            incidence_deg: s.incidence_deg,
            points: [start, points.len()],
            layout: Some(layout),
            waveform: Some(waveform),
            lrcs_truth: Some(lrcs_truth),
            ..Default::default()
        });
    }
    io::write_points(&stage.file("points.csv")?, &points)?;
    io::write_rows(&stage.file("truth.csv")?, &truth)?;
    m.points = Some("points.csv".into());
    m.truth = Some("truth.csv".into());
    stage.commit(m)
}

/// Iteration diagnostics written next to each recovered LRCS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvSidecar {
    pub algorithm: String,
    pub accelerated: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub final_divergence: f64,
    pub max_iters: usize,
    pub stop_ratio: f64,
}

fn deconv_options(cfg: &RunConfig, a: &DeconvolveArgs) -> DeconvOptions {
    let mut o = cfg.deconvolution;
    match a.algo {
        Some(AlgoArg::Rl) => o.algorithm = Algorithm::RichardsonLucy,
        Some(AlgoArg::Gold) => o.algorithm = Algorithm::Gold,
        None => {}
    }
    if let Some(n) = a.max_iters {
        o.max_iters = n;
    }
    o
}

fn check_dt(w: &Waveform, kernel: &SystemResponse, what: &str) -> Result<()> {
    if (w.dt - kernel.dt()).abs() > 1e-6 * w.dt {
        return config(format!(
            "{what}: sample spacing {} ns differs from the system response's {} ns",
            w.dt * 1e9,
            kernel.dt() * 1e9
        ));
    }
    Ok(())
}

fn write_deconvolution(stage: &mut Staging, dir: &str, d: &Deconvolution, opts: &DeconvOptions) -> Result<(String, String)> {
    let lrcs = format!("{dir}lrcs.csv");
    let sidecar = format!("{dir}deconvolution.json");
    io::write_lrcs(&stage.file(&lrcs)?, &d.lrcs)?;
    let info = DeconvSidecar {
        algorithm: opts.algorithm.to_string(),
        accelerated: opts.accelerate,
        iterations: d.iterations,
        final_residual: d.final_residual(),
        final_divergence: d.divergences.last().copied().unwrap_or(0.0),
        max_iters: opts.max_iters,
        stop_ratio: opts.stop_ratio,
    };
    io::write_json(&stage.file(&sidecar)?, &info)?;
    Ok((lrcs, sidecar))
}

pub fn deconvolve_cmd(cfg: &RunConfig, a: &DeconvolveArgs, out: &Path) -> Result<PathBuf> {
    let opts = deconv_options(cfg, a);
    if let Some(mp) = &a.manifest {
        let src = LoadedManifest::load(mp)?;
        let dt = src.manifest.dt_ns * 1e-9;
        let response = src.require(&src.manifest.response, "system response")?;
        let kernel = load_response(&response, dt)?;
        let mut waves = Vec::with_capacity(src.manifest.entries.len());
        for e in &src.manifest.entries {
            let path = src.require(&e.waveform, &format!("waveform for {}", e.id))?;
            let w = io::read_waveform(&path, dt)?;
            check_dt(&w, &kernel, &path.display().to_string())?;
            waves.push(w);
        }
        let results: Vec<_> = waves.par_iter().map(|w| deconvolve(w, &kernel, &opts)).collect::<Result<_>>()?;

        let mut stage = Staging::new(out)?;
        let mut m = manifest("deconvolve", dt);
        carry_common(&src, &mut m);
        for (e, d) in src.manifest.entries.iter().zip(results) {
            let (lrcs, sidecar) = write_deconvolution(&mut stage, &format!("entries/{}/", e.id), &d, &opts)?;
            m.entries.push(ManifestEntry {
                layout: src.carry(&e.layout),
                waveform: src.carry(&e.waveform),
                lrcs_truth: src.carry(&e.lrcs_truth),
                lrcs: Some(lrcs),
                deconvolution: Some(sidecar),
                unmixing: None,
                ..e.clone()
            });
        }
        return stage.commit(m);
    }

    let (Some(wp), Some(rp)) = (&a.waveform, &a.response) else {
        return config("deconvolve needs --manifest or both --waveform and --response");
    };
    let waveform = io::read_waveform(wp, cfg.instrument.dt())?;
    let kernel = load_response(rp, waveform.dt)?;
    check_dt(&waveform, &kernel, &wp.display().to_string())?;
    let d = deconvolve(&waveform, &kernel, &opts)?;
    let mut stage = Staging::new(out)?;
    let (lrcs, sidecar) = write_deconvolution(&mut stage, "", &d, &opts)?;
    let mut m = manifest("deconvolve", waveform.dt);
    m.response = Some(absolute(rp)?.to_string_lossy().into_owned());
    m.entries.push(ManifestEntry {
        id: stem(wp),
        waveform: Some(absolute(wp)?.to_string_lossy().into_owned()),
        lrcs: Some(lrcs),
        deconvolution: Some(sidecar),
        ..Default::default()
    });
    stage.commit(m)
}

fn load_response(path: &Path, fallback_dt: f64) -> Result<SystemResponse> {
    let w = io::read_waveform(path, fallback_dt)?;
    SystemResponse::new(w).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

fn carry_common(src: &LoadedManifest, m: &mut Manifest) {
    m.response = src.carry(&src.manifest.response);
    m.points = src.carry(&src.manifest.points);
    m.truth = src.carry(&src.manifest.truth);
}

pub fn unmix_cmd(cfg: &RunConfig, a: &UnmixArgs, out: &Path) -> Result<PathBuf> {
    let grid = cfg.grid()?;
    let template = cfg.template(&grid)?;
    let dt = cfg.instrument.dt();
    if let Some(mp) = &a.manifest {
        let src = LoadedManifest::load(mp)?;
        let mut inputs = Vec::with_capacity(src.manifest.entries.len());
        for e in &src.manifest.entries {
            let path = src.require(&e.lrcs, &format!("LRCS for {} (run deconvolve first)", e.id))?;
            inputs.push((io::read_lrcs(&path, dt)?, e.incidence_deg.to_radians()));
        }
        let results: Vec<_> = inputs.par_iter().map(|(l, inc)| template.unmix(l, *inc)).collect::<Result<_>>()?;
        let mut stage = Staging::new(out)?;
        let mut m = manifest("unmix", src.manifest.dt_ns * 1e-9);
        carry_common(&src, &mut m);
        for (e, r) in src.manifest.entries.iter().zip(results) {
            let file = format!("entries/{}/unmixing.json", e.id);
            io::write_json(&stage.file(&file)?, &r)?;
            m.entries.push(ManifestEntry {
                layout: src.carry(&e.layout),
                waveform: src.carry(&e.waveform),
                lrcs_truth: src.carry(&e.lrcs_truth),
                lrcs: src.carry(&e.lrcs),
                deconvolution: src.carry(&e.deconvolution),
                unmixing: Some(file),
                ..e.clone()
            });
        }
        return stage.commit(m);
    }
    let Some(lp) = &a.lrcs else {
        return config("unmix needs --manifest or --lrcs");
    };
    let lrcs = io::read_lrcs(lp, dt)?;
    let result = template.unmix(&lrcs, a.incidence_deg.to_radians())?;
    let mut stage = Staging::new(out)?;
    io::write_json(&stage.file("unmixing.json")?, &result)?;
    let mut m = manifest("unmix", lrcs.dt);
    m.entries.push(ManifestEntry {
        id: stem(lp),
        incidence_deg: a.incidence_deg,
        lrcs: Some(absolute(lp)?.to_string_lossy().into_owned()),
        unmixing: Some("unmixing.json".into()),
        ..Default::default()
    });
    stage.commit(m)
}

/// Corrects every manifest entry's points. Points that cannot be corrected
/// are logged, flagged and written without a corrected value.
pub fn correct_cmd(cfg: &RunConfig, a: &CorrectArgs, out: &Path) -> Result<PathBuf> {
    let src = LoadedManifest::load(&a.manifest)?;
    let points_path = match &a.points {
        Some(p) => p.clone(),
        None => src.require(&src.manifest.points, "points file")?,
    };
    let mut points = io::read_points(&points_path)?;
    let grid = cfg.grid()?;
    let template = cfg.template(&grid)?;
    let dt = src.manifest.dt_ns * 1e-9;
    let mut inputs = Vec::with_capacity(src.manifest.entries.len());
    for e in &src.manifest.entries {
        let [lo, hi] = e.points;
        if lo > hi || hi > points.len() {
            return config(format!("entry {} refers to points {lo}..{hi} but the file has {}", e.id, points.len()));
        }
        let path = src.require(&e.lrcs, &format!("LRCS for {} (run deconvolve first)", e.id))?;
        inputs.push((io::read_lrcs(&path, dt)?, lo..hi));
    }
    let results: Vec<_> = inputs
        .par_iter()
        .map(|(l, r)| correct_with_ablations(&template, &points[r.clone()], l))
        .collect::<Result<_>>()?;

    let mut ablation: Vec<AblationRow> = (0..points.len())
        .map(|i| AblationRow { point: i, angle_only: points[i].raw_intensity, subfootprint_only: points[i].raw_intensity })
        .collect();
    let mut covered = vec![false; points.len()];
    let mut failures = 0;
    for ((e, (_, r)), c) in src.manifest.entries.iter().zip(&inputs).zip(results) {
        for (k, i) in r.clone().enumerate() {
            if let Some(msg) = &c.full[k].error {
                log::warn!("{} point {i}: {msg}", e.id);
                failures += 1;
            }
            points[i] = c.full[k].record.clone();
            ablation[i].angle_only = c.angle_only[k];
            ablation[i].subfootprint_only = c.subfootprint_only[k];
            covered[i] = true;
        }
    }
    for (i, _) in covered.iter().enumerate().filter(|(_, c)| !**c) {
        log::warn!("point {i} belongs to no manifest entry; left uncorrected");
        points[i].edge_flag = true;
        failures += 1;
    }
    if failures > 0 {
        log::warn!("{failures} of {} points could not be corrected", points.len());
    }

    let mut stage = Staging::new(out)?;
    let mut m = manifest("correct", dt);
    carry_common(&src, &mut m);
    io::write_points(&stage.file("corrected.csv")?, &points)?;
    io::write_rows(&stage.file("ablation.csv")?, &ablation)?;
    m.corrected = Some("corrected.csv".into());
    m.ablation = Some("ablation.csv".into());
    for e in &src.manifest.entries {
        m.entries.push(ManifestEntry {
            layout: src.carry(&e.layout),
            waveform: src.carry(&e.waveform),
            lrcs_truth: src.carry(&e.lrcs_truth),
            lrcs: src.carry(&e.lrcs),
            deconvolution: src.carry(&e.deconvolution),
            unmixing: src.carry(&e.unmixing),
            ..e.clone()
        });
    }
    stage.commit(m)
}

#[derive(Debug, Serialize)]
struct RelativeErrorRow<'a> {
    point: usize,
    label: &'a str,
    situation: &'a str,
    incidence_deg: f64,
    raw_error_pct: f64,
    corrected_error_pct: f64,
}

#[derive(Debug, Serialize)]
struct HistogramRow {
    bin_low: f64,
    bin_high: f64,
    count: usize,
}

#[derive(Debug, Serialize)]
struct AngleRow<'a> {
    label: &'a str,
    incidence_deg: f64,
    count: usize,
    mre_raw_pct: f64,
    mre_corrected_pct: f64,
}

#[derive(Debug, Serialize)]
struct ContributionRow<'a> {
    label: &'a str,
    mre_raw_pct: f64,
    mre_angle_only_pct: f64,
    mre_subfootprint_only_pct: f64,
    mre_full_pct: f64,
    angle_share: f64,
    subfootprint_share: f64,
    residual: f64,
}

impl<'a> ContributionRow<'a> {
    fn new(label: &'a str, c: &Contributions) -> Self {
        Self {
            label,
            mre_raw_pct: c.mre_raw,
            mre_angle_only_pct: c.mre_angle_only,
            mre_subfootprint_only_pct: c.mre_subfootprint_only,
            mre_full_pct: c.mre_full,
            angle_share: c.angle_share,
            subfootprint_share: c.subfootprint_share,
            residual: c.residual,
        }
    }
}

#[derive(Debug, Serialize)]
struct ClassSummary {
    raw: ClassStats,
    corrected: ClassStats,
    mre_raw_pct: f64,
    mre_corrected_pct: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    points: usize,
    uncorrected_points: usize,
    mre_raw_pct: f64,
    mre_corrected_pct: f64,
    reduction: f64,
    classes: BTreeMap<String, ClassSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    contributions: Option<Contributions>,
}

/// Compares corrected points with truth. Points without a corrected value
/// are scored at their raw intensity.
pub fn evaluate_cmd(cfg: &RunConfig, a: &EvaluateArgs, out: &Path) -> Result<PathBuf> {
    let (corrected_path, truth_path, ablation_path, dt) = match &a.manifest {
        Some(mp) => {
            let src = LoadedManifest::load(mp)?;
            (
                src.require(&src.manifest.corrected, "corrected points (run correct first)")?,
                src.require(&src.manifest.truth, "truth file")?,
                match &a.ablation {
                    Some(p) => Some(p.clone()),
                    None => src.manifest.ablation.as_ref().map(|r| src.resolve(r)),
                },
                src.manifest.dt_ns * 1e-9,
            )
        }
        None => match (&a.corrected, &a.truth) {
            (Some(c), Some(t)) => (c.clone(), t.clone(), a.ablation.clone(), cfg.instrument.dt()),
            _ => return config("evaluate needs --manifest or both --corrected and --truth"),
        },
    };
    let points = io::read_points(&corrected_path)?;
    let truth: Vec<TruthRow> = io::read_rows(&truth_path)?;
    if points.len() != truth.len() {
        return config(format!("{} corrected points against {} truth rows", points.len(), truth.len()));
    }
    let ablation: Option<Vec<AblationRow>> = ablation_path.as_deref().map(io::read_rows).transpose()?;
    if let Some(ab) = &ablation {
        if ab.len() != points.len() || ab.iter().enumerate().any(|(i, r)| r.point != i) {
            return config("ablation rows are not aligned with the points");
        }
    }
    let raw: Vec<f64> = points.iter().map(|p| p.raw_intensity).collect();
    let full: Vec<f64> = points.iter().map(|p| p.corrected_intensity.unwrap_or(p.raw_intensity)).collect();
    let t: Vec<f64> = truth.iter().map(|r| r.truth_intensity).collect();
    let input_err = |e: Error| Error::Config(format!("{}: {e}", truth_path.display()));

    let mut stage = Staging::new(out)?;
    let report = grouped_stats(truth.iter().zip(&full).map(|(r, v)| (r.label.as_str(), r.situation.as_str(), *v)));
    let report_raw = grouped_stats(truth.iter().zip(&raw).map(|(r, v)| (r.label.as_str(), r.situation.as_str(), *v)));
    io::write_json(&stage.file("report.json")?, &report)?;
    io::write_json(&stage.file("report_raw.json")?, &report_raw)?;

    let mut errors = Vec::with_capacity(points.len());
    for (i, r) in truth.iter().enumerate() {
        errors.push(RelativeErrorRow {
            point: i,
            label: &r.label,
            situation: &r.situation,
            incidence_deg: r.incidence_deg,
            raw_error_pct: relative_error(raw[i], t[i]).map_err(input_err)?,
            corrected_error_pct: relative_error(full[i], t[i]).map_err(input_err)?,
        });
    }
    io::write_rows(&stage.file("relative_errors.csv")?, &errors)?;

    for (name, values) in [("histogram_raw.csv", &raw), ("histogram_corrected.csv", &full)] {
        let h = histogram(values, cfg.evaluation.histogram_bins)?;
        let rows: Vec<HistogramRow> =
            h.counts.iter().enumerate().map(|(k, &count)| HistogramRow { bin_low: h.edges[k], bin_high: h.edges[k + 1], count }).collect();
        io::write_rows(&stage.file(name)?, &rows)?;
    }

    // (label, micro-degrees) -> (incidence, raw errors, corrected errors)
    type AngleGroups = BTreeMap<(String, i64), (f64, Vec<f64>, Vec<f64>)>;
    let mut by_angle = AngleGroups::new();
    for e in &errors {
        let key_deg = (e.incidence_deg * 1e6).round() as i64;
        for label in ["all", e.label] {
            let g = by_angle.entry((label.to_string(), key_deg)).or_insert((e.incidence_deg, Vec::new(), Vec::new()));
            g.1.push(e.raw_error_pct);
            g.2.push(e.corrected_error_pct);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let angle_rows: Vec<AngleRow> = by_angle
        .iter()
        .map(|((label, _), (deg, r, c))| AngleRow {
            label,
            incidence_deg: *deg,
            count: r.len(),
            mre_raw_pct: mean(r),
            mre_corrected_pct: mean(c),
        })
        .collect();
    io::write_rows(&stage.file("error_vs_angle.csv")?, &angle_rows)?;

    let mut class_idx: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in truth.iter().enumerate() {
        class_idx.entry(r.label.as_str()).or_default().push(i);
    }
    let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let mut classes = BTreeMap::new();
    for (label, idx) in &class_idx {
        let (r, c, tt) = (pick(&raw, idx), pick(&full, idx), pick(&t, idx));
        classes.insert(
            label.to_string(),
            ClassSummary {
                raw: ClassStats::from_values(&r).expect("non-empty class"),
                corrected: ClassStats::from_values(&c).expect("non-empty class"),
                mre_raw_pct: mean_relative_error(&r, &tt).map_err(input_err)?,
                mre_corrected_pct: mean_relative_error(&c, &tt).map_err(input_err)?,
            },
        );
    }

    let mut contributions = None;
    if let Some(ab) = &ablation {
        let angle: Vec<f64> = ab.iter().map(|r| r.angle_only).collect();
        let sub: Vec<f64> = ab.iter().map(|r| r.subfootprint_only).collect();
        let series = AblationSeries { raw: &raw, angle_only: &angle, subfootprint_only: &sub, full: &full, truth: &t };
        let all = factor_contributions(&series).map_err(input_err)?;
        let mut rows = vec![ContributionRow::new("all", &all)];
        for (label, idx) in &class_idx {
            let (r, an, s, f, tt) = (pick(&raw, idx), pick(&angle, idx), pick(&sub, idx), pick(&full, idx), pick(&t, idx));
            let c = factor_contributions(&AblationSeries { raw: &r, angle_only: &an, subfootprint_only: &s, full: &f, truth: &tt })
                .map_err(input_err)?;
            rows.push(ContributionRow::new(label, &c));
        }
        io::write_rows(&stage.file("contributions.csv")?, &rows)?;
        contributions = Some(all);
    }

    let mre_raw = mean_relative_error(&raw, &t).map_err(input_err)?;
    let mre_full = mean_relative_error(&full, &t).map_err(input_err)?;
    let summary = Summary {
        points: points.len(),
        uncorrected_points: points.iter().filter(|p| p.corrected_intensity.is_none()).count(),
        mre_raw_pct: mre_raw,
        mre_corrected_pct: mre_full,
        reduction: if mre_raw > 0.0 { 1.0 - mre_full / mre_raw } else { 0.0 },
        classes,
        contributions,
    };
    io::write_json(&stage.file("summary.json")?, &summary)?;

    let mut m = manifest("evaluate", dt);
    m.corrected = Some(absolute(&corrected_path)?.to_string_lossy().into_owned());
    m.truth = Some(absolute(&truth_path)?.to_string_lossy().into_owned());
    if let Some(p) = &ablation_path {
        m.ablation = Some(absolute(p)?.to_string_lossy().into_owned());
    }
    stage.commit(m)
}
