//! Subcommand implementations. Each writes its main result to `--output`
//! when given and to `stdout` otherwise.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dermarket::clearing::default_tolerance;
use dermarket::der::DerParams;
use dermarket::simulator::{closed_loop_step, run_scenario, ConvergenceReport, SegmentClass, CSV_COLUMNS};
use dermarket::stability::{certify_multi, certify_single, Certificate};
use serde::{Deserialize, Serialize};

use crate::config::{load_config, Config, Resolved};
use crate::CliError;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeriesFormat {
    #[default]
    Csv,
    Json,
}

fn load(args: &CommonArgs) -> Result<(Config, Resolved), CliError> {
    let cfg = load_config(&args.config)?;
    let resolved = cfg.resolve(args.seed)?;
    Ok((cfg, resolved))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn emit(args: &CommonArgs, stdout: &mut dyn Write, body: &str) -> Result<(), CliError> {
    match &args.output {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(body.as_bytes())?;
            w.flush()?;
        }
        None => stdout.write_all(body.as_bytes())?,
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPopulation {
    pub seed: u64,
    pub assets: Vec<DerParams>,
    pub initial_state: Vec<f64>,
}

/// Draws the configured population. With `emit_config` the output is a
/// full config that names every asset and the initial state explicitly.
pub fn cmd_generate(
    args: &CommonArgs,
    emit_config: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let (cfg, resolved) = load(args)?;
    let body = if emit_config {
        serde_json::to_string_pretty(&cfg.explicit(&resolved))?
    } else if args.json {
        serde_json::to_string_pretty(&GeneratedPopulation {
            seed: resolved.seed,
            assets: resolved.population().assets().to_vec(),
            initial_state: resolved.initial_state.x.clone(),
        })?
    } else {
        let mut s = String::from("index,a,x_lo,x_hi,d_lo,d_hi,q,r,c,x0\n");
        for (i, (p, x)) in resolved
            .population()
            .assets()
            .iter()
            .zip(&resolved.initial_state.x)
            .enumerate()
        {
            s.push_str(&format!(
                "{i},{},{},{},{},{},{},{},{},{x}\n",
                p.a, p.x_lo, p.x_hi, p.d_lo, p.d_hi, p.q, p.r, p.c
            ));
        }
        s
    };
    emit(args, stdout, &(body + if emit_config || args.json { "\n" } else { "" }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearReport {
    pub lambda_star: f64,
    pub s_star: f64,
    pub gap: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub participants: Vec<usize>,
    pub allocation: Vec<f64>,
    pub next_state: Vec<f64>,
}

/// One clearing at the configured initial state and base price.
pub fn cmd_clear(args: &CommonArgs, stdout: &mut dyn Write) -> Result<ClearReport, CliError> {
    let (_, resolved) = load(args)?;
    let sm = resolved.supply();
    let tol = resolved
        .scenario
        .tolerance
        .unwrap_or_else(|| default_tolerance(sm));
    let (next, out) = closed_loop_step(resolved.population(), sm, &resolved.initial_state, tol)?;
    let report = ClearReport {
        lambda_star: out.clearing.lambda_star,
        s_star: out.clearing.s_star,
        gap: out.clearing.gap,
        kkt_residual: out.clearing.kkt_residual,
        iterations: out.clearing.iterations,
        participants: out.participants,
        allocation: out.allocation,
        next_state: next.x,
    };
    let body = if args.json {
        serde_json::to_string_pretty(&report)? + "\n"
    } else {
        format!(
            "lambda*      {}\nsupply       {}\ngap          {:e}\nkkt residual {:e}\niterations   {}\nparticipants {}/{}\n",
            report.lambda_star,
            report.s_star,
            report.gap,
            report.kkt_residual,
            report.iterations,
            report.participants.len(),
            report.allocation.len(),
        )
    };
    emit(args, stdout, &body)?;
    Ok(report)
}

/// Lists what `simulate` wrote so plotting tools can find the series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub series: String,
    pub format: String,
    pub columns: Vec<String>,
    pub report: String,
    pub periods: usize,
    pub assets: usize,
    pub seed: u64,
}

pub const MANIFEST_NAME: &str = "series.json";

fn report_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    output.with_file_name(format!("{stem}.report.json"))
}

/// Runs the scenario. With `--output` the series goes to that file, the
/// convergence report next to it as `<stem>.report.json` and a
/// `series.json` manifest into the same directory; without it the series
/// goes to `stdout`. A summary is written to `summary`.
pub fn cmd_simulate(
    args: &CommonArgs,
    format: SeriesFormat,
    stdout: &mut dyn Write,
    summary: &mut dyn Write,
) -> Result<ConvergenceReport, CliError> {
    let (_, resolved) = load(args)?;
    let ts = run_scenario(&resolved.scenario)?;
    let tol = resolved
        .scenario
        .tolerance
        .unwrap_or_else(|| default_tolerance(resolved.supply()));
    let report = ts.convergence_report(tol)?;

    let write_series = |w: &mut dyn Write| -> Result<(), CliError> {
        match format {
            SeriesFormat::Csv => ts.write_csv(w, resolved.record_states)?,
            SeriesFormat::Json => {
                ts.write_json(&mut *w)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    };
    match &args.output {
        Some(path) => {
            let mut w = create(path)?;
            write_series(&mut w)?;
            w.flush()?;
            let rpath = report_path(path);
            let mut rw = create(&rpath)?;
            serde_json::to_writer_pretty(&mut rw, &report)?;
            rw.write_all(b"\n")?;
            rw.flush()?;
            let name = |p: &Path| {
                p.file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            };
            let columns = match format {
                SeriesFormat::Csv => ts.csv_header(resolved.record_states),
                SeriesFormat::Json => {
                    let mut c: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
                    c.extend(["gap".to_string(), "states".to_string()]);
                    c
                }
            };
            let manifest = Manifest {
                series: name(path),
                format: match format {
                    SeriesFormat::Csv => "csv",
                    SeriesFormat::Json => "json",
                }
                .into(),
                columns,
                report: name(&rpath),
                periods: ts.horizon(),
                assets: ts.num_assets(),
                seed: resolved.seed,
            };
            let mpath = path.with_file_name(MANIFEST_NAME);
            let mut mw = create(&mpath)?;
            serde_json::to_writer_pretty(&mut mw, &manifest)?;
            mw.write_all(b"\n")?;
            mw.flush()?;
        }
        None => {
            // buffered so a closed pipe surfaces as an io error
            let mut buf = Vec::new();
            write_series(&mut buf)?;
            stdout.write_all(&buf)?;
        }
    }

    if args.json {
        serde_json::to_writer_pretty(&mut *summary, &report)?;
        summary.write_all(b"\n")?;
    } else {
        for s in &report.segments {
            let c = &s.class;
            writeln!(
                summary,
                "segment {} (periods {}..{}, beta2 {}): {:?}, amplitude {:.4}, settle {}, rho {}",
                s.index,
                s.start,
                s.start + s.len,
                s.beta2,
                c.classification,
                c.amplitude,
                c.settle_time.map_or("-".into(), |t| t.to_string()),
                c.decay_rate.map_or("-".into(), |r| format!("{r:.4}")),
            )?;
        }
        writeln!(
            summary,
            "{} converged, {} oscillating, {} drifting",
            report.count(SegmentClass::Converged),
            report.count(SegmentClass::Oscillating),
            report.count(SegmentClass::Drifting),
        )?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    /// Exact scalar test `|a + r/(q + β₁)| < 1`.
    Single,
    /// Decoupled multi-asset test `|a_i + φ_i r_i| < 1`.
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub kind: CertificateKind,
    pub certificate: Certificate,
}

/// Stability certificate for the configured population at the base price.
pub fn cmd_certify(args: &CommonArgs, stdout: &mut dyn Write) -> Result<CertifyReport, CliError> {
    let (_, resolved) = load(args)?;
    let assets = resolved.population().assets();
    let sm = resolved.supply();
    let report = if assets.len() == 1 {
        CertifyReport {
            kind: CertificateKind::Single,
            certificate: certify_single(&assets[0], sm),
        }
    } else {
        CertifyReport {
            kind: CertificateKind::Multi,
            certificate: certify_multi(assets, sm)?,
        }
    };
    let body = if args.json {
        serde_json::to_string_pretty(&report)? + "\n"
    } else {
        let c = &report.certificate;
        let (lo, hi) = min_max(&c.margins);
        let (phi_lo, phi_hi) = min_max(&c.phi);
        let mut s = format!("assets       {}\n", c.margins.len());
        if c.margins.len() == 1 {
            s.push_str(&format!("margin       {:.4}\n", c.margins[0]));
        } else {
            s.push_str(&format!("margins      [{lo:.4}, {hi:.4}]\n"));
            s.push_str(&format!("phi          [{phi_lo:.6}, {phi_hi:.6}]\n"));
            s.push_str(&format!("epsilon      {:.6}\n", c.epsilon));
        }
        s.push_str(&format!(
            "worst asset  {} (margin {:.4})\nfactor       {:.4}\ncertified    {}\n",
            c.worst_index, c.margins[c.worst_index], c.contraction_factor, c.certified
        ));
        s
    };
    emit(args, stdout, &body)?;
    Ok(report)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}
