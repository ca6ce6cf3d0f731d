//! Command surface: `genericity`, `solve`, `sweep`, `resonance` and `oracle`,
//! each driven by a single JSON config.
//!
//! Exit codes: 0 ok, 1 internal error or failed oracle, 2 non-generic,
//! 3 budget exhausted, 4 excised, 64 usage or config error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, SCHEMA};
use crate::error::{Error, Result};
use crate::field::residual_full;
use crate::genericity::{check_genericity, GenericityReport, Verdict};
use crate::lattice::{weighted_norm, TruncBox};
use crate::linop::assemble;
use crate::newton::{amplitude_jacobian, box_at, first_step, iterate, loglog_slope, IterationTrace, Outcome};
use crate::oracle::{closed_form_suite, dense_spectrum_check, graph_partition, independent_components, pde_comparison, OracleReport};
use crate::resonance::{bicharacteristics, build_graph, component_report, cubic_case_b_j_set, gamma_supports};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NON_GENERIC: i32 = 2;
pub const EXIT_TRUNCATED: i32 = 3;
pub const EXIT_EXCISED: i32 = 4;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "qpnls", version, about = "Quasi-periodic NLS solutions by a truncated Newton scheme")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check conditions (i)-(iv) on the support and write report.json.
    Genericity { config: PathBuf },
    /// Run the P/Q iteration and write the trace, solution and report.
    Solve { config: PathBuf },
    /// First-step scaling fits over the sweep's delta and amplitude grids.
    Sweep { config: PathBuf },
    /// Bi-characteristics, resonance graph and component sizes.
    Resonance { config: PathBuf },
    /// Independent oracle suite.
    Oracle { config: PathBuf },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (path, cmd): (&Path, fn(&RunConfig) -> Result<i32>) = match &cli.command {
        Command::Genericity { config } => (config, cmd_genericity),
        Command::Solve { config } => (config, cmd_solve),
        Command::Sweep { config } => (config, cmd_sweep),
        Command::Resonance { config } => (config, cmd_resonance),
        Command::Oracle { config } => (config, cmd_oracle),
    };
    let cfg = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("qpnls: {e}");
            return EXIT_USAGE;
        }
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build();
    let result = match pool {
        Ok(p) => p.install(|| cmd(&cfg)),
        Err(e) => Err(Error::Config(e.to_string())),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("qpnls: {e}");
            exit_code_of(&e)
        }
    }
}

pub fn exit_code_of(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::DimensionMismatch(_) => EXIT_USAGE,
        Error::Capacity { .. } => EXIT_TRUNCATED,
        Error::NotGeneric(_) => EXIT_NON_GENERIC,
        Error::Excised { .. } | Error::Singular { .. } => EXIT_EXCISED,
        _ => EXIT_FAILURE,
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn header(cfg: &RunConfig, command: &str) -> serde_json::Value {
    json!({ "schema": SCHEMA, "command": command, "config_digest": cfg.digest() })
}

fn with_header(cfg: &RunConfig, command: &str, body: serde_json::Value) -> serde_json::Value {
    let mut h = header(cfg, command);
    if let (Some(m), serde_json::Value::Object(b)) = (h.as_object_mut(), body) {
        m.extend(b);
    }
    h
}

fn genericity_exit(rep: &GenericityReport) -> i32 {
    match rep.verdict {
        Verdict::Generic => EXIT_OK,
        Verdict::NonGeneric => EXIT_NON_GENERIC,
        Verdict::Truncated => EXIT_TRUNCATED,
    }
}

pub fn cmd_genericity(cfg: &RunConfig) -> Result<i32> {
    let dir = out_dir(cfg)?;
    let rep = check_genericity(&cfg.problem.j_list, cfg.problem.p, &cfg.genericity_options())?;
    write_json(&dir.join("report.json"), &with_header(cfg, "genericity", json!({ "report": rep })))?;
    println!("genericity: {:?} (failed: {:?})", rep.verdict, rep.failed());
    Ok(genericity_exit(&rep))
}

const SUMMARY_COLUMNS: [&str; 11] = [
    "schema",
    "config_digest",
    "delta",
    "step",
    "scale",
    "residual_flat",
    "residual_weighted",
    "domega_norm",
    "dio_margin",
    "inv_norm",
    "unknowns",
];

fn write_trace(dir: &Path, cfg: &RunConfig, tr: &IterationTrace) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join("trace.jsonl"))?);
    serde_json::to_writer(&mut w, &header(cfg, "solve"))?;
    w.write_all(b"\n")?;
    for r in &tr.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut c = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_err)?;
    c.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    let digest = cfg.digest();
    for r in &tr.records {
        c.write_record([
            SCHEMA.to_string(),
            digest.clone(),
            cfg.problem.delta.to_string(),
            r.step.to_string(),
            r.scale.to_string(),
            r.residual_flat.to_string(),
            r.residual_weighted.to_string(),
            r.domega_norm.to_string(),
            r.dio_margin.to_string(),
            r.inv_norm.to_string(),
            r.unknowns.to_string(),
        ])
        .map_err(csv_err)?;
    }
    c.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<i32> {
    let dir = out_dir(cfg)?;
    let mut opts = cfg.iterate_options();
    let gate = if opts.require_generic {
        let rep = check_genericity(&cfg.problem.j_list, cfg.problem.p, &opts.genericity)?;
        if rep.verdict != Verdict::Generic {
            let body = json!({ "outcome": { "status": "not_generic" }, "genericity": rep });
            write_json(&dir.join("report.json"), &with_header(cfg, "solve", body))?;
            println!("solve: refused, support is {:?}", rep.verdict);
            return Ok(genericity_exit(&rep));
        }
        Some(rep)
    } else {
        None
    };
    opts.require_generic = false;
    let mut tr = iterate(&cfg.problem(), &opts)?;
    tr.genericity = gate;
    write_trace(&dir, cfg, &tr)?;
    let tail = cfg.tail();
    let fw = weighted_norm(&residual_full(&tr.final_state, &tail)?.0, &cfg.solver.weight);
    let pde = pde_comparison(&tr.final_state, &tail, fw, cfg.solver.grid_t_samples)?;
    let st = &tr.final_state;
    let solution = json!({
        "omega": st.omega(),
        "omega_shift": st.omega_shift,
        "kappa": tr.kappa,
        "u": st.u,
        "v": st.v,
    });
    write_json(&dir.join("solution.json"), &with_header(cfg, "solve", solution))?;
    let body = json!({
        "outcome": tr.outcome,
        "steps": tr.newton_steps(),
        "final_residual": tr.final_residual(),
        "final_residual_weighted": fw,
        "kappa": tr.kappa,
        "gamma_exp": tr.gamma_exp,
        "genericity": tr.genericity,
        "pde_oracle": pde,
    });
    write_json(&dir.join("report.json"), &with_header(cfg, "solve", body))?;
    Ok(match &tr.outcome {
        Outcome::Converged | Outcome::MaxSteps => {
            println!("solve: {:?} after {} steps, residual {:e}", tr.outcome, tr.newton_steps(), tr.final_residual());
            EXIT_OK
        }
        Outcome::Excised { step, test, detail } => {
            println!("solve: excised at step {step} by {test} ({detail})");
            EXIT_EXCISED
        }
    })
}

/// One `(a, delta)` point of a sweep, in physical units.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub amplitude_index: usize,
    pub delta: f64,
    pub du: f64,
    pub residual: f64,
    pub domega: f64,
    pub det_physical: f64,
    pub det_rescaled: f64,
    pub ok: bool,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub amplitude_index: usize,
    pub quantity: String,
    pub slope: Option<f64>,
    /// Target value and the direction of the test (`eq` within `tol`, or `ge`).
    pub expected: f64,
    pub tol: f64,
    pub rule: String,
    pub pass: bool,
}

pub fn sweep_rows(cfg: &RunConfig, deltas: &[f64], amps: &[Vec<f64>], h: f64) -> Vec<SweepRow> {
    let tail = cfg.tail();
    let (j, p) = (&cfg.problem.j_list, cfg.problem.p);
    let io = cfg.iterate_options();
    let ps = cfg.pstep_options();
    let jobs: Vec<(usize, f64)> = (0..amps.len()).flat_map(|ai| deltas.iter().map(move |&d| (ai, d))).collect();
    jobs.par_iter()
        .map(|&(ai, delta)| {
            let a = &amps[ai];
            let run = || -> Result<SweepRow> {
                let fs = first_step(a, j, delta, p, &tail, &box_at(delta, j, &io, 0), &ps)?;
                let jac = amplitude_jacobian(a, j, delta, p, &tail, h)?;
                Ok(SweepRow {
                    amplitude_index: ai,
                    delta,
                    du: delta * fs.du_flat,
                    residual: delta * fs.residual_after,
                    domega: fs.domega_norm,
                    det_physical: jac.det_physical.abs(),
                    det_rescaled: jac.det.abs(),
                    ok: true,
                    error: String::new(),
                })
            };
            run().unwrap_or_else(|e| SweepRow {
                amplitude_index: ai,
                delta,
                du: f64::NAN,
                residual: f64::NAN,
                domega: f64::NAN,
                det_physical: f64::NAN,
                det_rescaled: f64::NAN,
                ok: false,
                error: e.to_string(),
            })
        })
        .collect()
}

/// Slopes of `Δu` (3), the post-step residual (at least `2p+4`), `Δω` (`2p`)
/// and `|det ∂ω/∂a|` (`2p` in physical amplitudes; the rescaled fit is recorded too).
pub fn sweep_fits(rows: &[SweepRow], n_amps: usize, p: u32) -> Vec<SlopeFit> {
    let tp = 2.0 * p as f64;
    let mut out = Vec::new();
    for ai in 0..n_amps {
        let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.amplitude_index == ai && r.ok).collect();
        let x: Vec<f64> = sel.iter().map(|r| r.delta).collect();
        let fit = |f: fn(&SweepRow) -> f64| loglog_slope(&x, &sel.iter().map(|r| f(r)).collect::<Vec<_>>());
        let specs: [(&str, Option<f64>, f64, f64, &str); 5] = [
            ("du", fit(|r| r.du), 3.0, 0.3, "eq"),
            ("residual", fit(|r| r.residual), tp + 4.0, 0.0, "ge"),
            ("domega", fit(|r| r.domega), tp, 0.2, "eq"),
            ("det_physical", fit(|r| r.det_physical), tp, 0.3, "eq"),
            ("det_rescaled", fit(|r| r.det_rescaled), f64::NAN, f64::NAN, "record"),
        ];
        for (q, slope, expected, tol, rule) in specs {
            let pass = match (rule, slope) {
                ("eq", Some(s)) => (s - expected).abs() <= tol,
                ("ge", Some(s)) => s >= expected,
                ("record", _) => true,
                _ => false,
            };
            out.push(SlopeFit {
                amplitude_index: ai,
                quantity: q.into(),
                slope,
                expected,
                tol,
                rule: rule.into(),
                pass,
            });
        }
    }
    out
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<i32> {
    let Some(spec) = &cfg.sweep else {
        return Err(Error::Config("sweep command needs a \"sweep\" section".into()));
    };
    if spec.deltas.is_empty() {
        return Err(Error::Config("sweep.deltas is empty".into()));
    }
    if spec.deltas.len() < 2 {
        return Err(Error::Config("slope fits need at least two deltas".into()));
    }
    let amps = if spec.amplitudes.is_empty() { vec![cfg.problem.a.clone()] } else { spec.amplitudes.clone() };
    let dir = out_dir(cfg)?;
    let rows = sweep_rows(cfg, &spec.deltas, &amps, spec.jacobian_h);
    let fits = sweep_fits(&rows, amps.len(), cfg.problem.p);
    let digest = cfg.digest();
    let mut c = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_err)?;
    c.write_record(["schema", "config_digest", "amplitude_index", "delta", "du", "residual", "domega", "det_physical", "det_rescaled", "ok", "error"])
        .map_err(csv_err)?;
    for r in &rows {
        c.write_record([
            SCHEMA.to_string(),
            digest.clone(),
            r.amplitude_index.to_string(),
            r.delta.to_string(),
            r.du.to_string(),
            r.residual.to_string(),
            r.domega.to_string(),
            r.det_physical.to_string(),
            r.det_rescaled.to_string(),
            r.ok.to_string(),
            r.error.clone(),
        ])
        .map_err(csv_err)?;
    }
    c.flush()?;
    let mut c = csv::Writer::from_path(dir.join("fits.csv")).map_err(csv_err)?;
    c.write_record(["schema", "config_digest", "amplitude_index", "quantity", "slope", "expected", "tol", "rule", "pass"])
        .map_err(csv_err)?;
    for f in &fits {
        c.write_record([
            SCHEMA.to_string(),
            digest.clone(),
            f.amplitude_index.to_string(),
            f.quantity.clone(),
            f.slope.map_or(String::new(), |s| s.to_string()),
            f.expected.to_string(),
            f.tol.to_string(),
            f.rule.clone(),
            f.pass.to_string(),
        ])
        .map_err(csv_err)?;
    }
    c.flush()?;
    write_json(&dir.join("report.json"), &with_header(cfg, "sweep", json!({ "rows": rows, "fits": fits })))?;
    for f in &fits {
        println!("sweep: a#{} {} slope {:?} ({} {})", f.amplitude_index, f.quantity, f.slope, f.rule, f.expected);
    }
    if fits.iter().any(|f| f.slope.is_none()) {
        return Ok(EXIT_EXCISED);
    }
    Ok(EXIT_OK)
}

pub fn cmd_resonance(cfg: &RunConfig) -> Result<i32> {
    let dir = out_dir(cfg)?;
    let pr = &cfg.problem;
    let w0: Vec<i64> = pr.j_list.iter().map(|j| j.iter().map(|x| x * x).sum()).collect();
    let d = pr.j_list[0].len();
    let c = bicharacteristics(&w0, d, &cfg.resonance_box(), cfg.resonance.mu)?;
    let g = gamma_supports(&pr.j_list, pr.p)?;
    let graph = build_graph(&c, &g);
    let rep = component_report(&graph, pr.j_list.len(), d);
    let cubic = if pr.p == 1 && cfg.resonance.cubic_dump {
        Some(cubic_case_b_j_set(&pr.j_list, &graph)?)
    } else {
        None
    };
    let body = json!({ "components": rep, "cubic_case_b_j": cubic });
    write_json(&dir.join("report.json"), &with_header(cfg, "resonance", body))?;
    println!("resonance: {} nodes, max component {} (bound {})", rep.node_count, rep.max_size, rep.bound);
    Ok(if rep.pass { EXIT_OK } else { EXIT_NON_GENERIC })
}

/// Largest box (at most `|n| <= 6`) whose operator fits the dense spectral oracle.
fn spectrum_box(b: usize, d: usize, jmax: i64) -> Option<TruncBox> {
    let nodes = |r: i64| 2 * (2 * r + 1).pow(b as u32) * (2 * (r + jmax) + 1).pow(d as u32);
    (1..=6)
        .rev()
        .find(|&r| nodes(r) <= crate::oracle::SPECTRUM_MAX_NODES as i64)
        .map(|r| TruncBox::new(r, r + jmax))
}

pub fn cmd_oracle(cfg: &RunConfig) -> Result<i32> {
    let dir = out_dir(cfg)?;
    let pr = &cfg.problem;
    let (b, d) = (pr.j_list.len(), pr.j_list[0].len());
    let mut reports: Vec<OracleReport> = vec![closed_form_suite()?];
    let w0: Vec<i64> = pr.j_list.iter().map(|j| j.iter().map(|x| x * x).sum()).collect();
    let c = bicharacteristics(&w0, d, &cfg.resonance_box(), cfg.resonance.mu)?;
    let g = gamma_supports(&pr.j_list, pr.p)?;
    let same = independent_components(&c, &g) == graph_partition(&build_graph(&c, &g));
    let mut comp = OracleReport {
        name: "independent_components".into(),
        inputs_digest: crate::oracle::digest(&(&c, &pr.j_list, pr.p)),
        metrics: [("nodes".to_string(), c.len() as f64)].into(),
        tolerance: 0.0,
        pass: same,
        detail: String::new(),
        children: vec![],
    };
    if !same {
        comp.detail = "breadth-first partition differs from the resonance graph".into();
    }
    reports.push(comp);
    let jmax = pr.j_list.iter().flatten().map(|x| x.abs()).max().unwrap_or(0);
    match spectrum_box(b, d, jmax) {
        Some(bx) => {
            let st = crate::build_initial(&pr.a, &pr.j_list, pr.delta, pr.p)?;
            let op = assemble(&st, &cfg.tail(), &bx, 0.0)?;
            let cb = bicharacteristics(&w0, d, &bx, 0)?;
            reports.push(dense_spectrum_check(&op, &cb)?);
        }
        None => println!("oracle: dense_spectrum_check skipped, smallest box exceeds {} nodes", crate::oracle::SPECTRUM_MAX_NODES),
    }
    let all = reports.iter().all(|r| r.pass);
    write_json(&dir.join("report.json"), &with_header(cfg, "oracle", json!({ "pass": all, "reports": reports })))?;
    for r in &reports {
        println!("oracle: {} {}", r.name, if r.pass { "PASS" } else { "FAIL" });
        for ch in &r.children {
            println!("oracle:   {} {}", ch.name, if ch.pass { "PASS" } else { "FAIL" });
        }
    }
    Ok(if all { EXIT_OK } else { EXIT_FAILURE })
}
