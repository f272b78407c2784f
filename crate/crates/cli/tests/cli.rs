use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qdcavity::dataio;
use qdcavity::spectra::{self, ScanConfig};
use serde_json::Value;
use tempfile::TempDir;

const WC: f64 = 321_855.664;
const SCAN: &str = "321775.664,321935.664,161";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qdcavity"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON summary")
}

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("device.json"),
        r#"{"kappa": 31.79, "g3": 7.2615, "g4": 17.2, "gamma_d3": 3.1, "gamma_d4": 1.4,
            "omega_c": 321855.664, "omega_x": 321867.664, "delta_h": 12.0}"#,
    )
    .unwrap();
    let p = dir.path().to_path_buf();
    (dir, p)
}

#[test]
fn simulate_two_dip_near_cavity() {
    let (_t, d) = setup();
    let summary = ok(
        &d,
        &[
            "simulate",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "two",
            "--out",
            "two.csv",
            "--plot",
            "two.svg",
        ],
    );
    assert_eq!(summary["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(summary["inputs"]["device.json"].as_str().unwrap().len(), 64);
    let s = dataio::load_spectrum(&d.join("two.csv")).unwrap();
    let (i, _) =
        s.values().iter().enumerate().fold(
            (0, f64::INFINITY),
            |a, (i, v)| if *v < a.1 { (i, *v) } else { a },
        );
    assert!((s.freqs()[i] - WC).abs() <= 2.8);
    let svg = fs::read_to_string(d.join("two.svg")).unwrap();
    assert!(svg.starts_with("<?xml") && svg.contains("wavelength (nm)"));
}

#[test]
fn simulate_mixed_all_up_is_bare() {
    let (_t, d) = setup();
    ok(
        &d,
        &[
            "simulate",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "mixed",
            "--pup",
            "1.0",
            "--out",
            "m.csv",
        ],
    );
    let s = dataio::load_spectrum(&d.join("m.csv")).unwrap();
    let bare = spectra::lorentzian_spectrum(
        31.79,
        WC,
        &ScanConfig::normalized(WC - 80.0, WC + 80.0, 161, 31.79),
    )
    .unwrap();
    for (a, b) in s.values().iter().zip(bare.values()) {
        assert!((a - b).abs() <= 1e-12 * b);
    }
}

#[test]
fn simulate_master_reports_oracle_deviation() {
    let (_t, d) = setup();
    // Radiative broadening only, weak drive: the linear-response regime.
    fs::write(
        d.join("radiative.json"),
        r#"{"kappa": 31.79, "g3": 7.2615, "g4": 17.2, "gamma3": 3.0, "gamma4": 3.0,
            "omega_c": 321855.664, "omega_x": 321867.664, "delta_h": 12.0, "drive_amp": 0.106}"#,
    )
    .unwrap();
    let summary = ok(
        &d,
        &[
            "simulate",
            "--params",
            "radiative.json",
            "--scan",
            "321795.664,321915.664,41",
            "--model",
            "master",
            "--out",
            "m.csv",
        ],
    );
    let dev = summary["max_relative_deviation_vs_closed_form"]
        .as_f64()
        .unwrap();
    assert!(dev <= 0.01, "deviation {dev}");
}

#[test]
fn numerical_failure_exits_3_without_output() {
    let (_t, d) = setup();
    fs::write(
        d.join("dark.json"),
        r#"{"kappa": 31.79, "g3": 0.0, "g4": 17.2, "gamma3": 0.0, "gamma4": 0.0,
            "omega_c": 321855.664, "omega_x": 321867.664, "delta_h": 12.0}"#,
    )
    .unwrap();
    let out = run(
        &d,
        &[
            "simulate",
            "--params",
            "dark.json",
            "--scan",
            "321800,321900,5",
            "--model",
            "master",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(!d.join("x.csv").exists());
}

#[test]
fn validation_failures_exit_2_without_output() {
    let (_t, d) = setup();
    fs::write(
        d.join("neg.json"),
        r#"{"kappa": -1, "g3": 1, "g4": 1, "omega_c": 0, "omega_x": 0, "delta_h": 1}"#,
    )
    .unwrap();
    fs::write(
        d.join("extra.json"),
        r#"{"kappa": 1, "g3": 1, "g4": 1, "omega_c": 0, "omega_x": 0, "delta_h": 1, "gamma5": 2}"#,
    )
    .unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec![
            "simulate", "--params", "neg.json", "--scan", SCAN, "--model", "two", "--out", "x.csv",
        ],
        vec![
            "simulate",
            "--params",
            "extra.json",
            "--scan",
            SCAN,
            "--model",
            "two",
            "--out",
            "x.csv",
        ],
        vec![
            "simulate",
            "--params",
            "device.json",
            "--scan",
            "1,2",
            "--model",
            "two",
            "--out",
            "x.csv",
        ],
        vec![
            "simulate",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "two",
            "--pup",
            "0.5",
            "--out",
            "x.csv",
        ],
        vec![
            "simulate",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "mixed",
            "--out",
            "x.csv",
        ],
        vec![
            "simulate",
            "--params",
            "missing.json",
            "--scan",
            SCAN,
            "--model",
            "two",
            "--out",
            "x.csv",
        ],
        vec![
            "fit",
            "--data",
            "x.csv",
            "--model",
            "lorentzian",
            "--no-center-weight",
            "--center-weight",
            "3",
            "--out",
            "x.csv",
        ],
        vec!["derive", "--what", "pup", "bogus=1"],
        vec![
            "synth",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "two",
            "--fringe",
            "0.1,0",
            "--out",
            "x.csv",
        ],
    ];
    for args in cases {
        let out = run(&d, &args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stderr.is_empty());
        assert!(!d.join("x.csv").exists(), "{args:?} wrote output");
    }
    let out = run(
        &d,
        &[
            "simulate",
            "--params",
            "extra.json",
            "--scan",
            SCAN,
            "--model",
            "two",
            "--out",
            "x.csv",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma5"));
}

#[test]
fn synth_is_deterministic_and_reduces_to_simulate() {
    let (_t, d) = setup();
    ok(
        &d,
        &[
            "simulate",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "two",
            "--out",
            "sim.csv",
        ],
    );
    ok(
        &d,
        &[
            "synth",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "two",
            "--noise",
            "0",
            "--fringe",
            "0,1,0",
            "--seed",
            "1",
            "--out",
            "s0.csv",
        ],
    );
    let sim = dataio::load_spectrum(&d.join("sim.csv")).unwrap();
    let s0 = dataio::load_spectrum(&d.join("s0.csv")).unwrap();
    assert_eq!(sim.points(), s0.points());

    for name in ["a.csv", "b.csv"] {
        ok(
            &d,
            &[
                "synth",
                "--params",
                "device.json",
                "--scan",
                SCAN,
                "--model",
                "two",
                "--noise",
                "0.01",
                "--fringe",
                "0.02,37,0.3",
                "--seed",
                "9",
                "--out",
                name,
            ],
        );
    }
    assert_eq!(
        fs::read(d.join("a.csv")).unwrap(),
        fs::read(d.join("b.csv")).unwrap()
    );
}

#[test]
fn fit_pipeline_reports_cooperativity() {
    let (_t, d) = setup();
    ok(
        &d,
        &[
            "synth",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "mixed",
            "--pup",
            "0.01",
            "--noise",
            "0.01",
            "--background",
            "0.02",
            "--seed",
            "3",
            "--out",
            "syn.csv",
        ],
    );
    let summary = ok(
        &d,
        &[
            "fit",
            "--data",
            "syn.csv",
            "--model",
            "mixed",
            "--params",
            "device.json",
            "--constraint",
            "gtotal=18.67",
            "--out",
            "rep.json",
            "--plot",
            "fit.svg",
        ],
    );
    assert_eq!(summary["converged"], true);
    let report = dataio::load_report(&d.join("rep.json")).unwrap();
    let derived = report.result.derived.clone().unwrap();
    assert!(derived.strong_coupling && derived.cooperativity > 1.0);
    assert!(derived.detuning_sigma4_cavity.unwrap() <= 2.8);
    assert!((report.result.params["g4"] - 17.2).abs() <= 0.6);
    assert!((report.result.params["gamma_d4"] - 1.4).abs() <= 0.4);
    assert!((report.result.params["gamma_d3"] - 3.1).abs() <= 1.5);
    assert_eq!(report.provenance.seed, Some(3));
    assert_eq!(report.provenance.input_sha256.as_ref().unwrap().len(), 64);
    let svg = fs::read_to_string(d.join("fit.svg")).unwrap();
    assert!(svg.contains("<circle") && svg.contains("<path"));
}

#[test]
fn fit_infeasible_constraint_exits_2() {
    let (_t, d) = setup();
    ok(
        &d,
        &[
            "simulate",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "two",
            "--out",
            "two.csv",
        ],
    );
    fs::write(
        d.join("big_g4.json"),
        r#"{"kappa": 31.79, "g3": 7.2615, "g4": 20.0, "gamma_d3": 3.1, "gamma_d4": 1.4,
            "omega_c": 321855.664, "omega_x": 321867.664, "delta_h": 12.0}"#,
    )
    .unwrap();
    let out = run(
        &d,
        &[
            "fit",
            "--data",
            "two.csv",
            "--model",
            "mixed",
            "--params",
            "big_g4.json",
            "--constraint",
            "gtotal=18.67",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("domain error"));
    assert!(!d.join("r.json").exists());
}

#[test]
fn fit_free_pup_only() {
    let (_t, d) = setup();
    ok(
        &d,
        &[
            "synth",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "mixed",
            "--pup",
            "0.52",
            "--noise",
            "0.01",
            "--seed",
            "5",
            "--out",
            "a.csv",
        ],
    );
    ok(
        &d,
        &[
            "fit",
            "--data",
            "a.csv",
            "--model",
            "mixed",
            "--params",
            "device.json",
            "--free",
            "pup",
            "--out",
            "r.json",
        ],
    );
    let report = dataio::load_report(&d.join("r.json")).unwrap();
    let p = report.result.params["p_up"];
    assert!((0.48..=0.56).contains(&p), "p_up {p}");
    assert_eq!(report.result.free, vec!["p_up", "scale", "background"]);
}

#[test]
fn fit_lorentzian_and_single() {
    let (_t, d) = setup();
    ok(
        &d,
        &[
            "synth",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "mixed",
            "--pup",
            "1",
            "--noise",
            "0.01",
            "--seed",
            "2",
            "--out",
            "bare.csv",
        ],
    );
    ok(
        &d,
        &[
            "fit",
            "--data",
            "bare.csv",
            "--model",
            "lorentzian",
            "--out",
            "l.json",
        ],
    );
    let l = dataio::load_report(&d.join("l.json")).unwrap();
    assert!((l.result.params["kappa"] - 31.79).abs() <= 1.9);

    ok(
        &d,
        &[
            "synth",
            "--params",
            "device.json",
            "--scan",
            SCAN,
            "--model",
            "dit",
            "--noise",
            "0.01",
            "--seed",
            "2",
            "--out",
            "dit.csv",
        ],
    );
    ok(
        &d,
        &[
            "fit",
            "--data",
            "dit.csv",
            "--model",
            "single",
            "--params",
            "device.json",
            "--out",
            "s.json",
        ],
    );
    let s = dataio::load_report(&d.join("s.json")).unwrap();
    assert!((s.result.params["g"] - 17.2).abs() <= 0.35);
    assert!((s.result.params["gamma"] - 1.45).abs() <= 0.7);
    let out = run(
        &d,
        &[
            "fit", "--data", "dit.csv", "--model", "single", "--out", "s2.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

fn write_levels(d: &Path, nu0: f64) {
    fs::write(
        d.join("levels.json"),
        format!(r#"{{"zero_field_frequency": {nu0}, "electron_g": 0.478, "hole_g": 0.143}}"#),
    )
    .unwrap();
}

#[test]
fn sweep_fields_and_anticrossing() {
    let (_t, d) = setup();
    // σ₄ reaches the cavity at 6.2 T.
    write_levels(&d, WC + 0.5 * (0.478 + 0.143) * 13.996_244_936 * 6.2);
    let summary = ok(
        &d,
        &[
            "sweep",
            "--levels",
            "levels.json",
            "--params",
            "device.json",
            "--fields",
            "0:6.5:0.5",
            "--scan",
            "321775.664,321935.664,1601",
            "--out",
            "sw",
            "--plot",
            "map.svg",
        ],
    );
    assert_eq!(summary["fields_T"].as_array().unwrap().len(), 14);
    let files: Vec<_> = fs::read_dir(d.join("sw")).unwrap().collect();
    assert_eq!(files.len(), 14);
    let s = dataio::load_spectrum(&d.join("sw").join("spectrum_B6.000T.csv")).unwrap();
    assert_eq!(s.meta_f64("field_T"), Some(6.0));
    let (lo, hi) = s.two_main_peaks().unwrap();
    assert!(hi - lo >= 2.0 * 17.2, "gap {}", hi - lo);
    assert!(fs::read_to_string(d.join("map.svg"))
        .unwrap()
        .contains("field (T)"));
}

#[test]
fn sweep_single_field_and_large_step() {
    let (_t, d) = setup();
    // Far-detuned emitter: the zero-field spectrum is the bare cavity.
    write_levels(&d, WC + 5000.0);
    ok(
        &d,
        &[
            "sweep",
            "--levels",
            "levels.json",
            "--params",
            "device.json",
            "--fields",
            "0",
            "--scan",
            SCAN,
            "--out",
            "one",
        ],
    );
    let s = dataio::load_spectrum(&d.join("one").join("spectrum_B0.000T.csv")).unwrap();
    let bare = spectra::lorentzian_spectrum(
        31.79,
        WC,
        &ScanConfig::normalized(WC - 80.0, WC + 80.0, 161, 31.79),
    )
    .unwrap();
    assert!(spectra::max_relative_deviation(&s, &bare, 0.0).unwrap() < 0.01);

    let summary = ok(
        &d,
        &[
            "sweep",
            "--levels",
            "levels.json",
            "--params",
            "device.json",
            "--fields",
            "1:2:5",
            "--scan",
            SCAN,
            "--out",
            "big",
        ],
    );
    assert_eq!(summary["fields_T"], serde_json::json!([1.0]));
}

#[test]
fn derive_examples() {
    let d = tempfile::tempdir().unwrap();
    let g = ok(
        d.path(),
        &[
            "derive",
            "--what",
            "gfactor",
            "splitting_nm=0.12",
            "center_nm=931.4",
            "field=6.2",
        ],
    );
    assert!((g["g_factor"].as_f64().unwrap() - 0.478).abs() < 0.0005);
    let p = ok(
        d.path(),
        &["derive", "--what", "pup", "delta_e_mev=0.165", "temp=4.2"],
    );
    assert!((p["p_up"].as_f64().unwrap() - 0.388).abs() < 0.0005);
    let c = ok(
        d.path(),
        &[
            "derive",
            "--what",
            "cooperativity",
            "g=18.67",
            "kappa=31.79",
            "gamma=1.78",
        ],
    );
    assert!((c["cooperativity"].as_f64().unwrap() - 12.32).abs() < 0.005);
    assert!(c["note"].as_str().unwrap().contains("12.35"));
    let s = ok(
        d.path(),
        &[
            "derive",
            "--what",
            "strong",
            "g=18.67",
            "kappa=31.79",
            "gamma=1.78",
        ],
    );
    assert_eq!(s["strong_coupling"], true);
    let out = run(d.path(), &["derive", "--what", "cooperativity", "g=18.67"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn wavelength_axis_scan() {
    let (_t, d) = setup();
    ok(
        &d,
        &[
            "simulate",
            "--params",
            "device.json",
            "--scan",
            "931.5,931.3,101",
            "--wavelength-axis",
            "--model",
            "two",
            "--out",
            "w.csv",
            "--plot",
            "w.svg",
        ],
    );
    let s = dataio::load_spectrum(&d.join("w.csv")).unwrap();
    let f = s.freqs();
    assert!((f[0] - 299_792_458.0 / 931.5).abs() < 1e-6);
    assert!((f[100] - 299_792_458.0 / 931.3).abs() < 1e-6);
    assert!(fs::read_to_string(d.join("w.svg"))
        .unwrap()
        .contains("frequency (GHz)"));
}
