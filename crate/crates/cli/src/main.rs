//! `qdcavity`: simulate, fit and sweep reflectivity spectra of a charged
//! quantum dot in a photonic crystal cavity.
//!
//! Exit status is 0 on success, 2 when the input is invalid and 3 when a
//! computation fails. Outputs are written only after every result has been
//! computed, each through a temporary file and a rename.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use qdcavity::dataio::{self, FitReport, Provenance};
use qdcavity::fitkit::{self, CenterWeight, FitProblem, ParamMap};
use qdcavity::hilbert::SystemParams;
use qdcavity::physcalc::{self, TrionLevels};
use qdcavity::spectra::{self, FringeModel, ScanConfig, Spectrum};
use qdcavity::{Error, Result};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(
    name = "qdcavity",
    version,
    about = "Quantum-dot cavity reflectivity: simulate, fit, sweep, derive, synthesize"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute a reflectivity spectrum from a parameter file.
    Simulate(SimulateArgs),
    /// Fit a model to a measured or synthetic spectrum.
    Fit(FitArgs),
    /// Two-transition spectra over a range of magnetic fields.
    Sweep(SweepArgs),
    /// Closed-form derived quantities, printed as JSON.
    Derive(DeriveArgs),
    /// Simulated spectrum with fringes and Gaussian noise.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SimModel {
    /// Single dipole (σ₄) coupled to the cavity.
    Dit,
    /// σ₃ and σ₄ both coupled, closed form.
    Two,
    /// Master-equation steady state, Tr(ρ a†a).
    Master,
    /// Spin mixture of the bare cavity and the two-transition spectrum.
    Mixed,
}

impl SimModel {
    fn name(self) -> &'static str {
        match self {
            SimModel::Dit => "dit",
            SimModel::Two => "two",
            SimModel::Master => "master",
            SimModel::Mixed => "mixed",
        }
    }
}

#[derive(Args, Debug)]
struct ScanArgs {
    /// START,STOP,N in GHz (in nm with --wavelength-axis).
    #[arg(long)]
    scan: String,
    /// Constant background B_bg added to every point.
    #[arg(long, default_value_t = 0.0)]
    background: f64,
    /// Scale S; defaults to the value that puts the bare cavity peak at 1.
    #[arg(long)]
    scale: Option<f64>,
    /// Read the scan in nm and label plots in nm.
    #[arg(long)]
    wavelength_axis: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    params: PathBuf,
    #[command(flatten)]
    scan: ScanArgs,
    #[arg(long, value_enum)]
    model: SimModel,
    /// Spin-up population for --model mixed.
    #[arg(long)]
    pup: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    params: PathBuf,
    #[command(flatten)]
    scan: ScanArgs,
    #[arg(long, value_enum)]
    model: SimModel,
    #[arg(long)]
    pup: Option<f64>,
    /// Relative Gaussian noise per point.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Multiplicative fringe AMP,PERIOD,PHASE (period in GHz).
    #[arg(long, default_value = "0,1,0")]
    fringe: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FitModel {
    Lorentzian,
    Single,
    Mixed,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    model: FitModel,
    /// Starting values and fixed parameters; required for single and mixed.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Comma-separated free parameters; scale and background are always free.
    #[arg(long)]
    free: Option<String>,
    /// Coupling constraint `gtotal=VALUE`; g3 then follows from g4.
    #[arg(long)]
    constraint: Option<String>,
    /// Starting spin-up population for the mixed model.
    #[arg(long, default_value_t = 0.05)]
    pup_init: f64,
    /// Weight factor on the points nearest the dip.
    #[arg(long, default_value_t = fitkit::DEFAULT_CENTER_FACTOR)]
    center_weight: f64,
    #[arg(long, default_value_t = fitkit::DEFAULT_CENTER_POINTS)]
    center_points: usize,
    #[arg(long, conflicts_with_all = ["center_weight", "center_points"])]
    no_center_weight: bool,
    /// Recorded in the report; taken from the data file's `seed` entry when absent.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long)]
    wavelength_axis: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Trion levels; defaults to the level fields of --params.
    #[arg(long)]
    levels: Option<PathBuf>,
    #[arg(long)]
    params: PathBuf,
    /// B0:B1:STEP in tesla, inclusive, or a single field.
    #[arg(long)]
    fields: String,
    /// START,STOP,N in GHz; defaults to the cavity ± 80 GHz with 321 points.
    #[arg(long)]
    scan: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Quantity {
    Gfactor,
    Pup,
    Cooperativity,
    Strong,
}

#[derive(Args, Debug)]
struct DeriveArgs {
    #[arg(long, value_enum)]
    what: Quantity,
    /// KEY=VALUE inputs.
    values: Vec<String>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| invalid(format!("{what}: '{s}' is not a number")))
}

fn parse_scan(args: &ScanArgs, kappa: f64) -> Result<ScanConfig> {
    let parts: Vec<&str> = args.scan.split(',').collect();
    if parts.len() != 3 {
        return Err(invalid(format!(
            "--scan expects START,STOP,N, got '{}'",
            args.scan
        )));
    }
    let (mut start, mut stop) = (
        parse_f64(parts[0], "--scan START")?,
        parse_f64(parts[1], "--scan STOP")?,
    );
    let n: usize = parts[2]
        .trim()
        .parse()
        .map_err(|_| invalid(format!("--scan N: '{}' is not a count", parts[2])))?;
    if args.wavelength_axis {
        let (a, b) = (
            physcalc::wavelength_to_frequency(start)?,
            physcalc::wavelength_to_frequency(stop)?,
        );
        (start, stop) = (a.min(b), a.max(b));
    }
    let cfg = ScanConfig {
        scale: args
            .scale
            .unwrap_or_else(|| spectra::normalizing_scale(kappa)),
        ..ScanConfig::new(start, stop, n).with_background(args.background)
    };
    cfg.validate()?;
    Ok(cfg)
}

fn check_pup(model: SimModel, pup: Option<f64>) -> Result<Option<f64>> {
    match (model, pup) {
        (SimModel::Mixed, None) => Err(invalid("--model mixed needs --pup")),
        (SimModel::Mixed, Some(p)) if !(0.0..=1.0).contains(&p) => {
            Err(invalid(format!("--pup {p} outside [0, 1]")))
        }
        (SimModel::Mixed, p) => Ok(p),
        (_, Some(_)) => Err(invalid("--pup applies only to --model mixed")),
        (_, None) => Ok(None),
    }
}

/// The model spectrum, plus the deviation from the closed form for the
/// master-equation model.
fn model_spectrum(
    params: &SystemParams,
    model: SimModel,
    pup: Option<f64>,
    cfg: &ScanConfig,
) -> Result<(Spectrum, Option<f64>)> {
    let mut deviation = None;
    let s = match model {
        SimModel::Dit => spectra::dit_spectrum(
            params.g4,
            params.kappa,
            params.transverse4(),
            params.sigma4_frequency() - params.omega_c,
            params.omega_c,
            cfg,
        )?,
        SimModel::Two => spectra::two_transition_spectrum(params, cfg)?,
        SimModel::Master => {
            let master = spectra::master_spectrum(params, cfg)?;
            let closed = spectra::two_transition_spectrum(params, cfg)?;
            deviation = Some(spectra::max_relative_deviation(
                &master,
                &closed,
                cfg.background,
            )?);
            master
        }
        SimModel::Mixed => spectra::mixed_two_transition_spectrum(params, pup.unwrap_or(0.0), cfg)?,
    };
    let mut s = s.with_meta("model", model.name());
    if let Some(p) = pup {
        s.set_meta("p_up", p);
    }
    Ok((s, deviation))
}

fn spectrum_plot(title: &str, series: Vec<svg::Series>, wavelength_axis: bool) -> String {
    let to_nm = |f: f64| physcalc::frequency_to_wavelength(f).unwrap_or(f64::NAN);
    let series = if wavelength_axis {
        series
            .into_iter()
            .map(|s| svg::Series {
                points: s.points.iter().map(|&(f, r)| (to_nm(f), r)).collect(),
                ..s
            })
            .collect()
    } else {
        series
    };
    let (x_label, secondary) = if wavelength_axis {
        (
            "wavelength (nm)",
            svg::SecondaryAxis {
                label: "frequency (GHz)".into(),
                map: |nm| physcalc::wavelength_to_frequency(nm).unwrap_or(f64::NAN),
                decimals: 0,
            },
        )
    } else {
        (
            "frequency (GHz)",
            svg::SecondaryAxis {
                label: "wavelength (nm)".into(),
                map: |f| physcalc::frequency_to_wavelength(f).unwrap_or(f64::NAN),
                decimals: 3,
            },
        )
    };
    svg::line_plot(&svg::LinePlot {
        title: title.into(),
        x_label: x_label.into(),
        y_label: "reflectivity (arb. units)".into(),
        series,
        secondary: Some(secondary),
    })
}

fn spectrum_series(
    s: &Spectrum,
    label: &str,
    style: svg::Style,
    color: &'static str,
) -> svg::Series {
    svg::Series {
        label: label.into(),
        points: s
            .points()
            .iter()
            .map(|p| (p.freq, p.reflectivity))
            .collect(),
        style,
        color,
    }
}

fn print_summary(summary: Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary is valid JSON")
    );
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let pup = check_pup(args.model, args.pup)?;
    let (params, _) = dataio::load_params(&args.params)?;
    let cfg = parse_scan(&args.scan, params.kappa)?;
    let (spectrum, deviation) = model_spectrum(&params, args.model, pup, &cfg)?;
    let plot = args.plot.as_ref().map(|_| {
        spectrum_plot(
            &format!("{} model", args.model.name()),
            vec![spectrum_series(
                &spectrum,
                "simulated",
                svg::Style::Line,
                "steelblue",
            )],
            args.scan.wavelength_axis,
        )
    });
    dataio::save_spectrum(&spectrum, &args.out)?;
    if let (Some(path), Some(svg)) = (&args.plot, plot) {
        dataio::write_atomic(path, svg.as_bytes())?;
    }
    let mut summary = json!({
        "command": "simulate",
        "tool_version": VERSION,
        "inputs": { args.params.display().to_string(): sha256_file(&args.params)? },
        "outputs": outputs(&args.out, args.plot.as_deref()),
        "model": args.model.name(),
        "n_points": spectrum.len(),
        "warnings": params.warnings(),
    });
    if let Some(d) = deviation {
        summary["max_relative_deviation_vs_closed_form"] = json!(d);
    }
    print_summary(summary);
    Ok(())
}

fn outputs(out: &Path, plot: Option<&Path>) -> Vec<String> {
    std::iter::once(out)
        .chain(plot)
        .map(|p| p.display().to_string())
        .collect()
}

fn parse_fringe(s: &str) -> Result<FringeModel> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(invalid(format!(
            "--fringe expects AMP,PERIOD,PHASE, got '{s}'"
        )));
    }
    let f = FringeModel {
        amplitude: parse_f64(parts[0], "--fringe AMP")?,
        period: parse_f64(parts[1], "--fringe PERIOD")?,
        phase: parse_f64(parts[2], "--fringe PHASE")?,
    };
    f.validate()?;
    Ok(f)
}

fn synth(args: &SynthArgs) -> Result<()> {
    let pup = check_pup(args.model, args.pup)?;
    let fringe = parse_fringe(&args.fringe)?;
    if !(args.noise >= 0.0) {
        return Err(invalid(format!(
            "--noise {} must be non-negative",
            args.noise
        )));
    }
    let (params, _) = dataio::load_params(&args.params)?;
    let cfg = parse_scan(&args.scan, params.kappa)?;
    let (clean, _) = model_spectrum(&params, args.model, pup, &cfg)?;
    let mut noisy = spectra::synthesize_noisy(&clean, args.noise, &fringe, args.seed)?;
    noisy.set_meta("seed", args.seed);
    noisy.set_meta("noise_rel", args.noise);
    let plot = args.plot.as_ref().map(|_| {
        spectrum_plot(
            "synthetic spectrum",
            vec![
                spectrum_series(&noisy, "synthetic", svg::Style::Markers, "black"),
                spectrum_series(&clean, "noiseless", svg::Style::Line, "steelblue"),
            ],
            args.scan.wavelength_axis,
        )
    });
    dataio::save_spectrum(&noisy, &args.out)?;
    if let (Some(path), Some(svg)) = (&args.plot, plot) {
        dataio::write_atomic(path, svg.as_bytes())?;
    }
    print_summary(json!({
        "command": "synth",
        "tool_version": VERSION,
        "inputs": { args.params.display().to_string(): sha256_file(&args.params)? },
        "outputs": outputs(&args.out, args.plot.as_deref()),
        "model": args.model.name(),
        "seed": args.seed,
        "noise_rel": args.noise,
    }));
    Ok(())
}

fn canonical_name(name: &str) -> &str {
    match name {
        "pup" | "P_up" => "p_up",
        "bg" | "b_bg" => "background",
        other => other,
    }
}

/// Current starting value of every parameter in a problem.
fn start_values(problem: &FitProblem) -> ParamMap {
    let mut m = problem.fixed.clone();
    for p in &problem.free {
        m.insert(p.name.clone(), p.initial);
    }
    m
}

/// Frees exactly the listed parameters (plus scale and background) and
/// fixes every other one at its starting value.
fn apply_free_list(problem: FitProblem, list: &str) -> Result<FitProblem> {
    let names: Vec<&str> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(canonical_name)
        .collect();
    let all = problem.model.parameter_names();
    if let Some(bad) = names.iter().find(|n| !all.contains(n)) {
        return Err(Error::Schema(format!(
            "--free: '{bad}' is not a parameter of this model (expected one of {})",
            all.join(", ")
        )));
    }
    if problem.constraint.is_some() && names.contains(&"g3") {
        return Err(invalid(
            "--free g3 conflicts with --constraint, which derives g3",
        ));
    }
    let start = start_values(&problem);
    let mut p = problem;
    for name in all {
        if p.constraint.is_some() && *name == "g3" {
            continue;
        }
        let v = start[*name];
        p = if names.contains(name) || matches!(*name, "scale" | "background") {
            p.free(name, v)
        } else {
            p.fixed(name, v)
        };
    }
    Ok(p)
}

fn parse_constraint(s: &str) -> Result<f64> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| invalid(format!("--constraint expects gtotal=VALUE, got '{s}'")))?;
    if k.trim() != "gtotal" && k.trim() != "g_total" {
        return Err(invalid(format!("unknown constraint '{k}'")));
    }
    let g = parse_f64(v, "--constraint gtotal")?;
    if !(g > 0.0) {
        return Err(invalid("gtotal must be positive"));
    }
    Ok(g)
}

fn build_problem(args: &FitArgs, data: Spectrum) -> Result<FitProblem> {
    let params = match &args.params {
        Some(path) => Some(dataio::load_params(path)?.0),
        None => None,
    };
    let need_params = || {
        params.ok_or_else(|| {
            invalid(format!("--model {:?} needs --params", args.model).to_lowercase())
        })
    };
    let g_total = args
        .constraint
        .as_deref()
        .map(parse_constraint)
        .transpose()?;
    if g_total.is_some() && args.model != FitModel::Mixed {
        return Err(invalid("--constraint applies only to --model mixed"));
    }
    if !(0.0..=1.0).contains(&args.pup_init) {
        return Err(invalid("--pup-init must lie in [0, 1]"));
    }
    let mut problem = match args.model {
        FitModel::Lorentzian => FitProblem::lorentzian(data)?,
        FitModel::Single => FitProblem::single_transition(data, need_params()?.kappa)?,
        FitModel::Mixed => {
            let p = need_params()?;
            match g_total {
                Some(g) => FitProblem::mixed_two_transition(data, &p, g, args.pup_init)?,
                None => {
                    let g_total = (p.g3 * p.g3 + p.g4 * p.g4).sqrt();
                    let base = FitProblem::mixed_two_transition(data, &p, g_total, args.pup_init)?;
                    FitProblem {
                        constraint: None,
                        ..base
                    }
                    .free("g3", p.g3)
                }
            }
        }
    };
    if let Some(list) = &args.free {
        problem = apply_free_list(problem, list)?;
    }
    problem.center_weight = match (args.model, args.no_center_weight) {
        (FitModel::Lorentzian, _) | (_, true) => None,
        _ => Some(CenterWeight {
            n_points: args.center_points,
            factor: args.center_weight,
            center: None,
        }),
    };
    problem.validate()?;
    Ok(problem)
}

fn fit_cmd(args: &FitArgs) -> Result<()> {
    let data = dataio::load_spectrum(&args.data)?;
    let problem = build_problem(args, data.clone())?;
    let result = fitkit::fit(&problem)?;
    let seed = args
        .seed
        .or_else(|| data.meta().get("seed").and_then(|s| s.parse().ok()));
    let data_hash = sha256_file(&args.data)?;
    let report = FitReport {
        result,
        provenance: Provenance::new(Some(data_hash.clone()), seed),
    };
    let plot = match &args.plot {
        Some(_) => {
            let f = data.freqs();
            let (lo, hi) = (f[0], f[f.len() - 1]);
            let n = 4 * f.len();
            let fine: Vec<f64> = (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect();
            let model = problem.model.evaluate(&report.result.params, &fine)?;
            let fitted = svg::Series {
                label: "fit".into(),
                points: fine.into_iter().zip(model).collect(),
                style: svg::Style::Line,
                color: "steelblue",
            };
            Some(spectrum_plot(
                &format!("{:?} fit", problem.model).to_lowercase(),
                vec![
                    spectrum_series(&data, "data", svg::Style::Markers, "black"),
                    fitted,
                ],
                args.wavelength_axis,
            ))
        }
        None => None,
    };
    dataio::save_report(&report, &args.out)?;
    if let (Some(path), Some(svg)) = (&args.plot, plot) {
        dataio::write_atomic(path, svg.as_bytes())?;
    }
    let mut inputs = BTreeMap::new();
    inputs.insert(args.data.display().to_string(), data_hash);
    if let Some(p) = &args.params {
        inputs.insert(p.display().to_string(), sha256_file(p)?);
    }
    print_summary(json!({
        "command": "fit",
        "tool_version": VERSION,
        "inputs": inputs,
        "outputs": outputs(&args.out, args.plot.as_deref()),
        "converged": report.result.converged,
        "n_iterations": report.result.n_iterations,
        "residual_rms": report.result.residual_rms,
        "derived": report.result.derived,
    }));
    if !report.result.converged {
        eprintln!("warning: the fit did not reach the gradient tolerance");
    }
    Ok(())
}

/// Inclusive field list from `B0:B1:STEP` or a single value. A step larger
/// than the range yields just `B0`.
fn parse_fields(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let fields = match parts.as_slice() {
        [single] => vec![parse_f64(single, "--fields")?],
        [b0, b1, step] => {
            let (b0, b1, step) = (
                parse_f64(b0, "--fields B0")?,
                parse_f64(b1, "--fields B1")?,
                parse_f64(step, "--fields STEP")?,
            );
            if !(step > 0.0) {
                return Err(invalid("--fields STEP must be positive"));
            }
            if b1 < b0 {
                return Err(invalid("--fields B1 must not be below B0"));
            }
            let count = ((b1 - b0) / step + 1e-9).floor() as usize + 1;
            (0..count).map(|i| b0 + step * i as f64).collect()
        }
        _ => return Err(invalid(format!("--fields expects B0:B1:STEP, got '{s}'"))),
    };
    if let Some(b) = fields.iter().find(|b| !(**b >= 0.0)) {
        return Err(invalid(format!("field {b} must be non-negative")));
    }
    Ok(fields)
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let fields = parse_fields(&args.fields)?;
    let (params, file_levels) = dataio::load_params(&args.params)?;
    let levels: TrionLevels = match &args.levels {
        Some(path) => dataio::load_levels(path)?,
        None => file_levels
            .ok_or_else(|| invalid("no trion levels: pass --levels or add them to --params"))?,
    };
    let scan = args
        .scan
        .clone()
        .unwrap_or_else(|| format!("{},{},321", params.omega_c - 80.0, params.omega_c + 80.0));
    let cfg = parse_scan(
        &ScanArgs {
            scan,
            background: 0.0,
            scale: None,
            wavelength_axis: false,
        },
        params.kappa,
    )?;
    let spectra_list = spectra::field_sweep(&levels, &params, &fields, &cfg)?;
    let plot = args.plot.as_ref().map(|_| {
        let rows: Vec<Vec<f64>> = spectra_list.iter().map(|s| s.values()).collect();
        svg::heat_map(
            "reflectivity vs field",
            "frequency (GHz)",
            "field (T)",
            &cfg.frequencies(),
            &fields,
            &rows,
        )
    });
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let mut written = Vec::new();
    for (b, s) in fields.iter().zip(&spectra_list) {
        let path = args.out.join(format!("spectrum_B{b:.3}T.csv"));
        dataio::save_spectrum(s, &path)?;
        written.push(path.display().to_string());
    }
    if let (Some(path), Some(svg)) = (&args.plot, plot) {
        dataio::write_atomic(path, svg.as_bytes())?;
        written.push(path.display().to_string());
    }
    let mut inputs = BTreeMap::new();
    inputs.insert(
        args.params.display().to_string(),
        sha256_file(&args.params)?,
    );
    if let Some(l) = &args.levels {
        inputs.insert(l.display().to_string(), sha256_file(l)?);
    }
    print_summary(json!({
        "command": "sweep",
        "tool_version": VERSION,
        "inputs": inputs,
        "outputs": written,
        "fields_T": fields,
    }));
    Ok(())
}

fn derive(args: &DeriveArgs) -> Result<()> {
    let mut kv = BTreeMap::new();
    for item in &args.values {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| invalid(format!("expected KEY=VALUE, got '{item}'")))?;
        kv.insert(k.trim().to_string(), parse_f64(v, k)?);
    }
    let allowed: &[&str] = match args.what {
        Quantity::Gfactor => &["splitting_nm", "center_nm", "splitting_ghz", "field"],
        Quantity::Pup => &["delta_e_mev", "temp", "g", "field"],
        Quantity::Cooperativity | Quantity::Strong => &["g", "kappa", "gamma"],
    };
    if let Some(bad) = kv.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Schema(format!(
            "unknown key '{bad}' (expected {})",
            allowed.join(", ")
        )));
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing key '{k}'")))
    };
    let out = match args.what {
        Quantity::Gfactor => {
            let splitting = match kv.get("splitting_ghz") {
                Some(s) => *s,
                None => physcalc::splitting_nm_to_ghz(get("splitting_nm")?, get("center_nm")?)?,
            };
            let g = physcalc::lande_g_factor(splitting, get("field")?)?;
            json!({ "what": "gfactor", "g_factor": g, "splitting_ghz": splitting })
        }
        Quantity::Pup => {
            let temp = kv
                .get("temp")
                .copied()
                .unwrap_or(physcalc::DEFAULT_TEMPERATURE_K);
            let delta_e = match kv.get("delta_e_mev") {
                Some(e) => *e,
                None => {
                    physcalc::ghz_to_mev(physcalc::zeeman_splitting_ghz(get("g")?, get("field")?))
                }
            };
            let p = physcalc::thermal_spin_up_population(delta_e, temp)?;
            json!({ "what": "pup", "p_up": p, "delta_e_mev": delta_e, "temperature_k": temp })
        }
        Quantity::Cooperativity => {
            let c = physcalc::cooperativity(get("g")?, get("kappa")?, get("gamma")?)?;
            json!({
                "what": "cooperativity",
                "cooperativity": c,
                "note": "published values 12.35 and 12.4 round the same inputs differently",
            })
        }
        Quantity::Strong => {
            let (g, kappa, gamma) = (get("g")?, get("kappa")?, get("gamma")?);
            json!({
                "what": "strong",
                "strong_coupling": physcalc::is_strongly_coupled(g, kappa, gamma),
                "four_g": 4.0 * g,
                "kappa_plus_gamma": kappa + gamma,
            })
        }
    };
    let mut out = out;
    out["tool_version"] = json!(VERSION);
    out["inputs"] = json!({});
    println!("{}", serde_json::to_string(&out).expect("valid JSON"));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Derive(a) => derive(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
