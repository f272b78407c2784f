//! On-disk formats: CSV spectra, JSON parameter sets and JSON fit reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitkit::FitResult;
use crate::hilbert::{SystemParams, DEFAULT_EMITTER_DECAY, DEFAULT_FOCK_DIM};
use crate::physcalc::TrionLevels;
use crate::spectra::{Spectrum, SpectrumPoint};

pub const SPECTRUM_HEADER: &str = "freq_ghz,reflectivity,weight";

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn located(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_error(path, e));
    }
    Ok(())
}

pub fn format_spectrum(spectrum: &Spectrum) -> String {
    let mut out = String::new();
    for (k, v) in spectrum.meta() {
        let _ = writeln!(out, "# {k}={v}");
    }
    out.push_str(SPECTRUM_HEADER);
    out.push('\n');
    for p in spectrum.points() {
        let _ = writeln!(out, "{},{},{}", p.freq, p.reflectivity, p.weight);
    }
    out
}

/// Parses CSV text; `path` only labels error messages.
pub fn parse_spectrum(text: &str, path: &Path) -> Result<Spectrum> {
    let mut meta = Vec::new();
    let mut header: Option<(usize, bool)> = None;
    let mut points: Vec<SpectrumPoint> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                let key = k.trim();
                if !key.is_empty() && !key.contains(char::is_whitespace) {
                    meta.push((key.to_string(), v.trim().to_string()));
                }
            }
            continue;
        }
        let Some((_, has_weight)) = header else {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            match cols.as_slice() {
                ["freq_ghz", "reflectivity"] => header = Some((line_no, false)),
                ["freq_ghz", "reflectivity", "weight"] => header = Some((line_no, true)),
                _ => {
                    return Err(located(
                        path,
                        line_no,
                        format!("expected header '{SPECTRUM_HEADER}', found '{line}'"),
                    ))
                }
            }
            continue;
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = if has_weight { 3 } else { 2 };
        if fields.len() != expected {
            return Err(located(
                path,
                line_no,
                format!("expected {expected} columns, found {}", fields.len()),
            ));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| located(path, line_no, format!("{what} '{s}' is not a number")))
        };
        let freq = num(fields[0], "freq_ghz")?;
        let reflectivity = num(fields[1], "reflectivity")?;
        let weight = if has_weight {
            num(fields[2], "weight")?
        } else {
            1.0
        };
        let invalid =
            |msg: String| Error::Validation(format!("{}:{line_no}: {msg}", path.display()));
        if !freq.is_finite() {
            return Err(invalid(format!("frequency {freq} is not finite")));
        }
        if !reflectivity.is_finite() || reflectivity < 0.0 {
            return Err(invalid(format!(
                "reflectivity {reflectivity} must be finite and non-negative"
            )));
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(invalid(format!("weight {weight} must be positive")));
        }
        if let Some(prev) = points.last() {
            if !(freq > prev.freq) {
                return Err(invalid(format!(
                    "frequency {freq} does not increase (previous {})",
                    prev.freq
                )));
            }
        }
        points.push(SpectrumPoint {
            freq,
            reflectivity,
            weight,
        });
    }
    if header.is_none() {
        return Err(located(
            path,
            1,
            format!("missing header '{SPECTRUM_HEADER}'"),
        ));
    }
    let mut spectrum =
        Spectrum::new(points).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    for (k, v) in meta {
        spectrum.set_meta(k, v);
    }
    Ok(spectrum)
}

pub fn load_spectrum(path: &Path) -> Result<Spectrum> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_spectrum(&text, path)
}

pub fn save_spectrum(spectrum: &Spectrum, path: &Path) -> Result<()> {
    write_atomic(path, format_spectrum(spectrum).as_bytes())
}

/// Flat JSON record of a parameter set and optional trion levels. Omitted
/// rates take their documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub kappa: f64,
    pub g3: f64,
    pub g4: f64,
    #[serde(default = "default_decay")]
    pub gamma3: f64,
    #[serde(default = "default_decay")]
    pub gamma4: f64,
    #[serde(default)]
    pub gamma_d3: f64,
    #[serde(default)]
    pub gamma_d4: f64,
    pub omega_c: f64,
    pub omega_x: f64,
    pub delta_h: f64,
    /// Defaults to κ/100.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drive_amp: Option<f64>,
    #[serde(default = "default_fock")]
    pub fock_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_field_frequency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub electron_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hole_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diamagnetic_coeff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<f64>,
}

fn default_decay() -> f64 {
    DEFAULT_EMITTER_DECAY
}

fn default_fock() -> usize {
    DEFAULT_FOCK_DIM
}

impl ParamsFile {
    pub fn from_parts(params: &SystemParams, levels: Option<&TrionLevels>) -> Self {
        Self {
            kappa: params.kappa,
            g3: params.g3,
            g4: params.g4,
            gamma3: params.gamma3,
            gamma4: params.gamma4,
            gamma_d3: params.gamma_d3,
            gamma_d4: params.gamma_d4,
            omega_c: params.omega_c,
            omega_x: params.omega_x,
            delta_h: params.delta_h,
            drive_amp: Some(params.drive_amp),
            fock_dim: params.fock_dim,
            zero_field_frequency: levels.map(|l| l.zero_field_frequency),
            electron_g: levels.map(|l| l.electron_g),
            hole_g: levels.map(|l| l.hole_g),
            diamagnetic_coeff: levels.map(|l| l.diamagnetic_coeff),
            field: levels.map(|l| l.field),
        }
    }

    pub fn system_params(&self) -> SystemParams {
        SystemParams {
            kappa: self.kappa,
            g3: self.g3,
            g4: self.g4,
            gamma3: self.gamma3,
            gamma4: self.gamma4,
            gamma_d3: self.gamma_d3,
            gamma_d4: self.gamma_d4,
            omega_c: self.omega_c,
            omega_x: self.omega_x,
            delta_h: self.delta_h,
            drive_amp: self.drive_amp.unwrap_or(self.kappa / 100.0),
            fock_dim: self.fock_dim,
        }
    }

    /// Trion levels when any level field is present; all three of
    /// `zero_field_frequency`, `electron_g` and `hole_g` are then required.
    pub fn trion_levels(&self) -> Result<Option<TrionLevels>> {
        let any = self.zero_field_frequency.is_some()
            || self.electron_g.is_some()
            || self.hole_g.is_some()
            || self.diamagnetic_coeff.is_some()
            || self.field.is_some();
        if !any {
            return Ok(None);
        }
        let missing: Vec<&str> = [
            ("zero_field_frequency", self.zero_field_frequency),
            ("electron_g", self.electron_g),
            ("hole_g", self.hole_g),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.is_none().then_some(n))
        .collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!(
                "trion levels incomplete, missing: {}",
                missing.join(", ")
            )));
        }
        Ok(Some(TrionLevels {
            zero_field_frequency: self.zero_field_frequency.unwrap_or_default(),
            electron_g: self.electron_g.unwrap_or_default(),
            hole_g: self.hole_g.unwrap_or_default(),
            diamagnetic_coeff: self.diamagnetic_coeff.unwrap_or(0.0),
            field: self.field.unwrap_or(0.0),
        }))
    }
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    let msg = e.to_string();
    if msg.starts_with("unknown field") || msg.starts_with("missing field") {
        Error::Schema(format!("{}:{}: {msg}", path.display(), e.line()))
    } else {
        located(path, e.line(), msg)
    }
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn parse_params(text: &str, path: &Path) -> Result<(SystemParams, Option<TrionLevels>)> {
    let file: ParamsFile = serde_json::from_str(text).map_err(|e| json_error(path, e))?;
    let params = file.system_params();
    params.validate().map_err(|e| with_path(path, e))?;
    let levels = file.trion_levels().map_err(|e| with_path(path, e))?;
    if let Some(l) = &levels {
        l.validate().map_err(|e| with_path(path, e))?;
    }
    Ok((params, levels))
}

pub fn load_params(path: &Path) -> Result<(SystemParams, Option<TrionLevels>)> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_params(&text, path)
}

pub fn save_params(params: &SystemParams, levels: Option<&TrionLevels>, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&ParamsFile::from_parts(params, levels))
        .map_err(|e| located(path, 0, e.to_string()))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

/// Trion levels stored on their own, with the same field names as in a
/// parameter file.
pub fn load_levels(path: &Path) -> Result<TrionLevels> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let levels: TrionLevels = serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
    levels.validate().map_err(|e| with_path(path, e))?;
    Ok(levels)
}

pub fn save_levels(levels: &TrionLevels, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(levels).map_err(|e| located(path, 0, e.to_string()))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the fitted data file, hex encoded.
    #[serde(default)]
    pub input_sha256: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(input_sha256: Option<String>, seed: Option<u64>) -> Self {
        Self {
            input_sha256,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    #[serde(flatten)]
    pub result: FitResult,
    pub provenance: Provenance,
}

pub fn save_report(report: &FitReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| located(path, 0, e.to_string()))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

pub fn load_report(path: &Path) -> Result<FitReport> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitkit::{fit, FitProblem};
    use crate::spectra::{self, ScanConfig};
    use tempfile::tempdir;

    const WC: f64 = 321_855.664;

    fn sample(n: usize) -> Spectrum {
        let cfg = ScanConfig::normalized(WC - 100.0, WC + 100.0, n, 31.79).with_background(0.013);
        spectra::dit_spectrum(18.67, 31.79, 1.78, 0.0, WC, &cfg).unwrap()
    }

    #[test]
    fn spectrum_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = sample(1001).with_meta("field_T", 6.2);
        let weights: Vec<f64> = (0..1001).map(|i| 1.0 + (i % 7) as f64 / 3.0).collect();
        let s = s.with_weights(&weights).unwrap();
        save_spectrum(&s, &path).unwrap();
        let back = load_spectrum(&path).unwrap();
        assert_eq!(back.len(), 1001);
        for (a, b) in s.points().iter().zip(back.points()) {
            assert!((a.freq - b.freq).abs() <= 1e-12 * a.freq.abs());
            assert!((a.reflectivity - b.reflectivity).abs() <= 1e-12);
            assert_eq!(a.weight, b.weight);
        }
        assert_eq!(back, s);
    }

    #[test]
    fn shuffled_rows_name_the_line() {
        let text = "# run=1\nfreq_ghz,reflectivity\n1.0,0.5\n2.0,0.6\n1.5,0.7\n3.0,0.1\n";
        let err = parse_spectrum(text, Path::new("data.csv")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("data.csv:5"), "{err}");
    }

    #[test]
    fn meta_passthrough() {
        let text = "# field_T=6.2\n# free text comment\nfreq_ghz,reflectivity,weight\n1,0.5,1\n2,0.6,2\n3,0.7,1\n";
        let s = parse_spectrum(text, Path::new("x.csv")).unwrap();
        assert_eq!(s.meta_f64("field_T"), Some(6.2));
        assert_eq!(s.meta().len(), 1);
        assert_eq!(s.weights(), vec![1.0, 2.0, 1.0]);
    }

    #[test]
    fn malformed_spectra() {
        let p = Path::new("bad.csv");
        let cases = [
            ("1,2\n3,4\n5,6\n", "bad.csv:1"),
            ("freq_ghz,reflectivity\n1,0.5\n2,abc\n3,0.1\n", "bad.csv:3"),
            ("freq_ghz,reflectivity\n1,0.5\n2,NaN\n3,0.1\n", "bad.csv:3"),
            ("freq_ghz,reflectivity\n1,0.5\n2,-0.1\n3,0.1\n", "bad.csv:3"),
            (
                "freq_ghz,reflectivity\n1,0.5\n2,0.5,1\n3,0.1\n",
                "bad.csv:3",
            ),
            (
                "freq_ghz,reflectivity,weight\n1,0.5,1\n2,0.5,0\n3,0.1,1\n",
                "bad.csv:3",
            ),
        ];
        for (text, needle) in cases {
            let err = parse_spectrum(text, p).unwrap_err();
            assert!(err.to_string().contains(needle), "{text:?}: {err}");
            assert!(err.is_validation());
        }
        assert!(parse_spectrum("", p)
            .unwrap_err()
            .to_string()
            .contains("missing header"));
    }

    #[test]
    fn minimal_params_take_defaults() {
        let text = r#"{"kappa": 31.79, "g3": 7.2, "g4": 17.2, "omega_c": 321855.664,
                       "omega_x": 321867.664, "delta_h": 12.0}"#;
        let (p, levels) = parse_params(text, Path::new("p.json")).unwrap();
        assert_eq!(p.gamma3, 0.1);
        assert_eq!(p.gamma4, 0.1);
        assert_eq!(p.gamma_d3, 0.0);
        assert_eq!(p.fock_dim, 4);
        assert!((p.drive_amp - 0.3179).abs() < 1e-15);
        assert!(levels.is_none());
    }

    #[test]
    fn params_errors_carry_path() {
        let neg =
            r#"{"kappa": -1, "g3": 7.2, "g4": 17.2, "omega_c": 0, "omega_x": 0, "delta_h": 12}"#;
        let err = parse_params(neg, Path::new("neg.json")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("neg.json"));

        let unknown = r#"{"kappa": 31.79, "g3": 7.2, "g4": 17.2, "omega_c": 0, "omega_x": 0,
                          "delta_h": 12, "gamma5": 1}"#;
        let err = parse_params(unknown, Path::new("u.json")).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(
            err.to_string().contains("gamma5") && err.to_string().contains("u.json:2"),
            "{err}"
        );

        let missing = r#"{"kappa": 31.79}"#;
        assert!(matches!(
            parse_params(missing, Path::new("m.json")),
            Err(Error::Schema(_))
        ));
        let syntax = "{\"kappa\": 31.79,,}";
        assert!(matches!(
            parse_params(syntax, Path::new("s.json")),
            Err(Error::Format { .. })
        ));
        let partial = r#"{"kappa": 31.79, "g3": 7.2, "g4": 17.2, "omega_c": 0, "omega_x": 0,
                          "delta_h": 12, "electron_g": 0.478}"#;
        assert!(matches!(
            parse_params(partial, Path::new("l.json")),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn params_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = SystemParams::new(31.79, 7.2615, 17.2, WC, WC + 12.0, 12.0)
            .with_dephasing(3.1, 1.4)
            .with_drive(0.1)
            .with_fock_dim(5);
        let levels = TrionLevels {
            zero_field_frequency: WC + 30.0,
            electron_g: 0.478,
            hole_g: 0.143,
            diamagnetic_coeff: 0.0,
            field: 6.2,
        };
        save_params(&p, Some(&levels), &path).unwrap();
        let (q, l) = load_params(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(l, Some(levels));

        let lpath = dir.path().join("levels.json");
        save_levels(&levels, &lpath).unwrap();
        assert_eq!(load_levels(&lpath).unwrap(), levels);
        fs::write(
            &lpath,
            r#"{"zero_field_frequency": 1, "electron_g": 0.4, "hole_g": 0.1, "g": 1}"#,
        )
        .unwrap();
        assert!(matches!(load_levels(&lpath), Err(Error::Schema(_))));
    }

    #[test]
    fn report_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.json");
        let result = fit(&FitProblem::single_transition(sample(201), 31.79).unwrap()).unwrap();
        let report = FitReport {
            result,
            provenance: Provenance::new(Some("ab".repeat(32)), Some(7)),
        };
        save_report(&report, &path).unwrap();
        assert_eq!(load_report(&path).unwrap(), report);
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        let missing = dir.path().join("no_such_dir").join("x.csv");
        assert!(matches!(
            write_atomic(&missing, b"x"),
            Err(Error::Io { .. })
        ));
    }
}
