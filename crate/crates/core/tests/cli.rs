use std::path::{Path, PathBuf};
use std::process::Command;

use subfootprint::cli::{run_from, RunConfig};
use subfootprint::deconv::{convolve, normalized_cross_correlation};
use subfootprint::forward::{emit_pulse, LrcsSeries, Waveform};
use subfootprint::io::{self, AblationRow, LoadedManifest, TruthRow};
use subfootprint::radiometry::PointRecord;
use subfootprint::scene::{Boundary, MaterialPatch, SceneLayout};
use subfootprint::unmix::{EnergyDensityBasis, UnmixingSummary};

const BIN: &str = env!("CARGO_BIN_EXE_subfootprint");

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, json: &str) -> PathBuf {
        let p = self.path("config.json");
        std::fs::write(&p, json).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> PathBuf {
        let mut all = vec!["subfootprint"];
        all.extend_from_slice(args);
        run_from(all).unwrap_or_else(|e| panic!("{args:?}: {e}"))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn exit_status(args: &[&str]) -> (i32, String) {
    let o = Command::new(BIN).args(args).output().unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn tilted_extended(label: &str, reflectance: f64, range: f64, deg: f64) -> SceneLayout {
    let patch = MaterialPatch {
        label: label.into(),
        reflectance,
        range_offset: 0.0,
        tilt: deg.to_radians(),
        boundary: Boundary::Full,
    };
    SceneLayout::new(vec![patch], range, deg.to_radians()).unwrap()
}

#[test]
fn simulate_default_sweep_lists_120_entries() {
    let w = Work::new();
    let m = w.run(&["--seed", "1", "--out-dir", s(&w.path("sim")), "simulate"]);
    let loaded = LoadedManifest::load(&m).unwrap();
    assert_eq!(loaded.manifest.entries.len(), 120);
    let points = io::read_points(&loaded.resolve(loaded.manifest.points.as_ref().unwrap())).unwrap();
    let truth: Vec<TruthRow> = io::read_rows(&loaded.resolve(loaded.manifest.truth.as_ref().unwrap())).unwrap();
    assert_eq!(points.len(), truth.len());
    assert_eq!(loaded.manifest.entries.last().unwrap().points[1], points.len());
    // Every emitted file is listed, and nothing else is on disk.
    let mut on_disk = 0;
    let mut stack = vec![w.path("sim")];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                on_disk += 1;
            }
        }
    }
    assert_eq!(on_disk, loaded.manifest.files.len());
}

#[test]
fn noisy_simulation_requires_a_seed() {
    let w = Work::new();
    let out = w.path("sim");
    let (code, err) = exit_status(&["--out-dir", s(&out), "simulate"]);
    assert_eq!(code, 2);
    assert!(err.contains("seed"));
    assert!(!out.exists());
}

#[test]
fn missing_scene_file_exits_2_without_outputs() {
    let w = Work::new();
    let cfg = w.config(r#"{"schema_version": 1, "scene": {"layout_file": "absent.json"}}"#);
    let out = w.path("sim");
    let (code, _) = exit_status(&["--config", s(&cfg), "--seed", "7", "--out-dir", s(&out), "simulate"]);
    assert_eq!(code, 2);
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(w.dir.path()).unwrap().count(), 1);
}

#[test]
fn unknown_config_key_exits_2() {
    let w = Work::new();
    let cfg = w.config(r#"{"schema_version": 1, "noise": {"snr": 30}}"#);
    let (code, _) = exit_status(&["--config", s(&cfg), "--seed", "1", "--out-dir", s(&w.path("o")), "simulate"]);
    assert_eq!(code, 2);
}

#[test]
fn simulate_twice_is_byte_identical() {
    let w = Work::new();
    let cfg = w.config(
        r#"{"schema_version": 1, "simulation": {"pixels_per_sigma": 8},
            "scene": {"sweep": {"incidence_deg": [10], "edge_shapes": ["arc"]}}}"#,
    );
    for out in ["a", "b"] {
        w.run(&["--config", s(&cfg), "--seed", "7", "--out-dir", s(&w.path(out)), "simulate"]);
    }
    let a = LoadedManifest::load(&w.path("a")).unwrap();
    for f in &a.manifest.files {
        assert_eq!(std::fs::read(w.path("a").join(f)).unwrap(), std::fs::read(w.path("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn impulse_response_returns_clamped_input() {
    let w = Work::new();
    let wave = Waveform::new(vec![0.0, 2.0, -0.5, 5.0, 1.0], 0.2e-9, 3.3e-7).unwrap();
    io::write_waveform(&w.path("w.csv"), &wave).unwrap();
    std::fs::write(w.path("r.csv"), "t_ns,amplitude\n0,1\n").unwrap();
    let m = w.run(&["--out-dir", s(&w.path("d")), "deconvolve", "--waveform", s(&w.path("w.csv")), "--response", s(&w.path("r.csv"))]);
    let loaded = LoadedManifest::load(&m).unwrap();
    let lrcs = io::read_lrcs(&loaded.resolve(loaded.manifest.entries[0].lrcs.as_ref().unwrap()), 0.0).unwrap();
    let back = lrcs.to_waveform();
    for (a, b) in back.samples.iter().zip(&wave.samples) {
        assert!((a - b.max(0.0)).abs() < 1e-9, "{a} vs {b}");
    }
    let sidecar: serde_json::Value = io::read_json(&loaded.resolve(loaded.manifest.entries[0].deconvolution.as_ref().unwrap())).unwrap();
    assert_eq!(sidecar["algorithm"], "richardson_lucy");
    assert!(sidecar["iterations"].as_u64().is_some());
    assert!(sidecar["final_residual"].as_f64().unwrap() < 1e-6);
}

#[test]
fn sample_spacing_mismatch_exits_2() {
    let w = Work::new();
    io::write_waveform(&w.path("w.csv"), &Waveform::new(vec![0.0, 1.0, 0.0], 0.2e-9, 0.0).unwrap()).unwrap();
    io::write_waveform(&w.path("r.csv"), &Waveform::new(vec![0.5, 1.0, 0.5], 0.4e-9, 0.0).unwrap()).unwrap();
    let out = w.path("d");
    let (code, err) = exit_status(&["--out-dir", s(&out), "deconvolve", "--waveform", s(&w.path("w.csv")), "--response", s(&w.path("r.csv"))]);
    assert_eq!(code, 2, "{err}");
    assert!(!out.exists());
}

/// Noiseless two-return waveform made by convolving a known LRCS with the
/// instrument pulse.
fn two_return_pair(w: &Work) -> LrcsSeries {
    let mut values = vec![0.0; 200];
    values[60] = 3.0;
    values[61] = 1.0;
    values[90] = 2.0;
    let truth = LrcsSeries::new(values, 0.2e-9, 49.0).unwrap();
    let pulse = emit_pulse(4e-9, 0.2e-9).unwrap();
    io::write_waveform(&w.path("w.csv"), &convolve(&truth.to_waveform(), &pulse).unwrap()).unwrap();
    io::write_waveform(&w.path("r.csv"), &pulse).unwrap();
    truth
}

fn local_maxima(l: &LrcsSeries) -> Vec<usize> {
    let peak = l.values.iter().copied().fold(0.0, f64::max);
    (1..l.len() - 1)
        .filter(|&t| l.values[t] > 0.2 * peak && l.values[t] >= l.values[t - 1] && l.values[t] > l.values[t + 1])
        .collect()
}

#[test]
fn gold_and_richardson_lucy_agree_on_peaks() {
    let w = Work::new();
    two_return_pair(&w);
    let mut peaks = Vec::new();
    for algo in ["rl", "gold"] {
        let out = w.path(algo);
        let m = w.run(&["--out-dir", s(&out), "deconvolve", "--waveform", s(&w.path("w.csv")), "--response", s(&w.path("r.csv")), "--algo", algo]);
        let loaded = LoadedManifest::load(&m).unwrap();
        let l = io::read_lrcs(&loaded.resolve(loaded.manifest.entries[0].lrcs.as_ref().unwrap()), 0.0).unwrap();
        peaks.push(local_maxima(&l));
    }
    assert_eq!(peaks[0].len(), 2);
    assert_eq!(peaks[0], peaks[1]);
}

#[test]
fn simulate_then_deconvolve_reproduces_the_waveform() {
    let w = Work::new();
    let cfg = w.config(
        r#"{"schema_version": 1, "simulation": {"pixels_per_sigma": 8},
            "scene": {"sweep": {"incidence_deg": [0, 20], "edge_shapes": ["straight"], "target_counts": [2]}}}"#,
    );
    w.run(&["--config", s(&cfg), "--seed", "3", "--out-dir", s(&w.path("sim")), "simulate"]);
    let m = w.run(&["--config", s(&cfg), "--out-dir", s(&w.path("dec")), "deconvolve", "--manifest", s(&w.path("sim"))]);
    let dec = LoadedManifest::load(&m).unwrap();
    let response = emit_pulse(4e-9, 0.2e-9).unwrap();
    for e in &dec.manifest.entries {
        let wave = io::read_waveform(&dec.resolve(e.waveform.as_ref().unwrap()), 0.0).unwrap();
        let lrcs = io::read_lrcs(&dec.resolve(e.lrcs.as_ref().unwrap()), 0.0).unwrap();
        let refit = convolve(&lrcs.to_waveform(), &response).unwrap();
        let n = wave.len();
        let a = LrcsSeries::new(wave.samples.iter().map(|v| v.max(0.0)).collect(), wave.dt, 0.0).unwrap();
        let off = ((wave.t0 - refit.t0) / wave.dt).round() as usize;
        let b = LrcsSeries::new(refit.samples[off..off + n].to_vec(), wave.dt, 0.0).unwrap();
        let ncc = normalized_cross_correlation(&a, &b).unwrap();
        assert!(ncc > 0.98, "{}: {ncc}", e.id);
    }
}

fn unmix_config(w: &Work, extra: &str) -> (PathBuf, f64) {
    let cfg = w.config(&format!(
        r#"{{"schema_version": 1, "simulation": {{"pixels_per_sigma": 8}},
            "unmixing": {{"basis": {{"mode": "library", "values": [0.3, 0.4, 1.0]}},
                          "flags": {{"range": false, "incidence": false, "subfootprint": true}} {extra}}}}}"#
    ));
    let total = EnergyDensityBasis::for_grid(&RunConfig::load(&cfg).unwrap().grid().unwrap()).unwrap().total_energy();
    (cfg, total)
}

fn unmix_file(w: &Work, cfg: &Path, values: Vec<f64>, out: &str) -> UnmixingSummary {
    let l = LrcsSeries::new(values, 0.2e-9, 48.0).unwrap();
    io::write_lrcs(&w.path("l.csv"), &l).unwrap();
    let m = w.run(&["--config", s(cfg), "--out-dir", s(&w.path(out)), "unmix", "--lrcs", s(&w.path("l.csv"))]);
    let loaded = LoadedManifest::load(&m).unwrap();
    io::read_json(&loaded.resolve(loaded.manifest.entries[0].unmixing.as_ref().unwrap())).unwrap()
}

#[test]
fn unmix_single_target() {
    let w = Work::new();
    let (cfg, total) = unmix_config(&w, "");
    let mut v = vec![0.0; 80];
    v[40] = 0.4 * total;
    let r = unmix_file(&w, &cfg, v, "u");
    assert_eq!(r.targets.len(), 1);
    assert!((r.targets[0].reflectance - 0.4).abs() < 1e-12);
}

#[test]
fn unmix_two_targets_sixty_centimetres_apart() {
    let w = Work::new();
    let (cfg, total) = unmix_config(&w, "");
    let mut v = vec![0.0; 80];
    v[30] = 0.5 * 0.3 * total;
    v[50] = 0.5 * 1.0 * total;
    let r = unmix_file(&w, &cfg, v, "u");
    assert_eq!(r.targets.len(), 2);
    // 0.6 m of extra range is 4 ns of two-way delay, 20 bins at 5 GHz.
    let delay_bins = (2.0 * 0.6 / 299_792_458.0 / 0.2e-9_f64).round() as usize;
    assert_eq!(r.targets[1].bin_start - r.targets[0].bin_start, delay_bins);
    assert_eq!(r.c1, 2);
}

#[test]
fn heavy_reflectance_sparsity_selects_one_column() {
    let w = Work::new();
    let (cfg, total) = unmix_config(&w, r#", "lambda1_scale": 1e6"#);
    let mut v = vec![0.0; 80];
    v[30] = 0.5 * 0.3 * total;
    v[50] = 0.5 * 1.0 * total;
    let r = unmix_file(&w, &cfg, v, "u");
    assert_eq!(r.c1, 1);
}

#[test]
fn malformed_lrcs_exits_2() {
    let w = Work::new();
    std::fs::write(w.path("l.csv"), "t_ns,amplitude\n0,1\n0.2,oops\n").unwrap();
    let (code, _) = exit_status(&["--out-dir", s(&w.path("u")), "unmix", "--lrcs", s(&w.path("l.csv"))]);
    assert_eq!(code, 2);
}

fn pipeline(w: &Work, cfg: &Path, seed: &str) -> (Vec<PointRecord>, Vec<TruthRow>, PathBuf) {
    let base = ["--config", s(cfg), "--seed", seed];
    let with = |out: &str, rest: &[&str]| -> Vec<String> {
        base.iter().chain(&["--out-dir", s(&w.path(out))]).chain(rest).map(|v| v.to_string()).collect()
    };
    let run = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        w.run(&refs)
    };
    run(with("sim", &["simulate"]));
    run(with("dec", &["deconvolve", "--manifest", s(&w.path("sim"))]));
    let m = run(with("cor", &["correct", "--manifest", s(&w.path("dec"))]));
    let cor = LoadedManifest::load(&m).unwrap();
    let points = io::read_points(&cor.resolve(cor.manifest.corrected.as_ref().unwrap())).unwrap();
    let truth = io::read_rows(&cor.resolve(cor.manifest.truth.as_ref().unwrap())).unwrap();
    (points, truth, m)
}

#[test]
fn extended_targets_correct_to_normalised_raw() {
    let w = Work::new();
    let layout = tilted_extended("Cc", 0.4, 50.0, 20.0);
    io::write_json(&w.path("scene.json"), &layout).unwrap();
    let cfg = w.config(r#"{"schema_version": 1, "simulation": {"pixels_per_sigma": 10}, "scene": {"layout_file": "scene.json"}, "noise": {"snr_db": null}}"#);
    let (points, _, _) = pipeline(&w, &cfg, "1");
    assert_eq!(points.len(), 1);
    let p = &points[0];
    let normalised = p.raw_intensity * (p.range / 50.0).powi(2) / p.incidence.cos();
    let c = p.corrected_intensity.unwrap();
    assert!(((c - normalised) / normalised).abs() < 0.02, "{c} vs {normalised}");
}

#[test]
fn edge_points_match_extended_intensity_of_their_material() {
    let w = Work::new();
    let cfg = w.config(
        r#"{"schema_version": 1, "simulation": {"pixels_per_sigma": 10},
            "scene": {"sweep": {"materials": [{"label": "Al", "reflectance": 1.0}, {"label": "Cm", "reflectance": 0.9}, {"label": "Cc", "reflectance": 0.4}],
                                "target_counts": [2], "incidence_deg": [0, 20], "edge_shapes": ["straight", "arc"]}}}"#,
    );
    let (points, truth, _) = pipeline(&w, &cfg, "5");
    // The extended-region intensity of a material is its reflectance times
    // the full beam energy, which is exactly the truth column.
    for (p, t) in points.iter().zip(&truth) {
        assert!(p.edge_flag);
        let c = p.corrected_intensity.unwrap();
        assert!(((c - t.truth_intensity) / t.truth_intensity).abs() <= 0.05, "{}: {c} vs {}", t.entry, t.truth_intensity);
    }
}

#[test]
fn correct_rerun_is_identical_and_evaluate_reports() {
    let w = Work::new();
    let cfg = w.config(
        r#"{"schema_version": 1, "simulation": {"pixels_per_sigma": 8},
            "scene": {"sweep": {"materials": [{"label": "Lf", "reflectance": 0.3}, {"label": "Al", "reflectance": 1.0}, {"label": "Cc", "reflectance": 0.4}],
                                "target_counts": [2], "incidence_deg": [0, 20, 40], "edge_shapes": ["straight"]}}}"#,
    );
    let (_, truth, m) = pipeline(&w, &cfg, "9");
    let first = std::fs::read(w.path("cor/corrected.csv")).unwrap();
    w.run(&["--config", s(&cfg), "--seed", "9", "--out-dir", s(&w.path("cor2")), "correct", "--manifest", s(&w.path("dec"))]);
    assert_eq!(first, std::fs::read(w.path("cor2/corrected.csv")).unwrap());

    let ev = w.run(&["--config", s(&cfg), "--out-dir", s(&w.path("ev")), "evaluate", "--manifest", s(&m)]);
    let ev = LoadedManifest::load(&ev).unwrap();
    let n = truth.len();
    for h in ["histogram_raw.csv", "histogram_corrected.csv"] {
        #[derive(serde::Deserialize)]
        struct Row {
            count: usize,
        }
        let rows: Vec<Row> = io::read_rows(&ev.resolve(h)).unwrap();
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), n, "{h}");
    }
    // Single-material footprints: correction must tighten every class.
    let summary: serde_json::Value = io::read_json(&ev.resolve("summary.json")).unwrap();
    for (label, c) in summary["classes"].as_object().unwrap() {
        let raw = c["raw"]["std"].as_f64().unwrap();
        let cor = c["corrected"]["std"].as_f64().unwrap();
        assert!(cor <= raw, "{label}: {cor} > {raw}");
    }
    let report: serde_json::Value = io::read_json(&ev.resolve("report.json")).unwrap();
    assert_eq!(report["Al"]["Al & Al"]["count"], 6);
    assert!(ev.resolve("contributions.csv").is_file());
    assert!(ev.resolve("error_vs_angle.csv").is_file());
}

#[test]
fn perfect_estimates_have_zero_error() {
    let w = Work::new();
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (i, (label, v)) in [("Al", 2.0), ("Al", 2.0), ("Lf", 0.6)].into_iter().enumerate() {
        let mut p = PointRecord::new([0.0, 0.0, 50.0], 50.0, 0.0, 0.5 * v).unwrap().with_label(label);
        p.corrected_intensity = Some(v);
        points.push(p);
        truth.push(TruthRow {
            point: i,
            entry: "e".into(),
            label: label.into(),
            situation: "s".into(),
            incidence_deg: 0.0,
            truth_intensity: v,
        });
    }
    io::write_points(&w.path("c.csv"), &points).unwrap();
    io::write_rows(&w.path("t.csv"), &truth).unwrap();
    let ablation: Vec<AblationRow> = (0..3).map(|i| AblationRow { point: i, angle_only: 1.0, subfootprint_only: 1.0 }).collect();
    io::write_rows(&w.path("a.csv"), &ablation).unwrap();
    let m = w.run(&[
        "--out-dir",
        s(&w.path("ev")),
        "evaluate",
        "--corrected",
        s(&w.path("c.csv")),
        "--truth",
        s(&w.path("t.csv")),
        "--ablation",
        s(&w.path("a.csv")),
    ]);
    let ev = LoadedManifest::load(&m).unwrap();
    #[derive(serde::Deserialize)]
    struct Row {
        corrected_error_pct: f64,
    }
    let rows: Vec<Row> = io::read_rows(&ev.resolve("relative_errors.csv")).unwrap();
    assert!(rows.iter().all(|r| r.corrected_error_pct == 0.0));
    let summary: serde_json::Value = io::read_json(&ev.resolve("summary.json")).unwrap();
    assert_eq!(summary["mre_corrected_pct"], 0.0);
}

#[test]
fn misaligned_truth_exits_2() {
    let w = Work::new();
    let p = PointRecord::new([0.0, 0.0, 50.0], 50.0, 0.0, 1.0).unwrap();
    io::write_points(&w.path("c.csv"), &[p.clone(), p]).unwrap();
    std::fs::write(w.path("t.csv"), "point,entry,label,situation,incidence_deg,truth_intensity\n0,e,Al,s,0,1\n").unwrap();
    let (code, _) = exit_status(&["--out-dir", s(&w.path("ev")), "evaluate", "--corrected", s(&w.path("c.csv")), "--truth", s(&w.path("t.csv"))]);
    assert_eq!(code, 2);
}
