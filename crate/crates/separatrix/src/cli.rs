//! Configuration parsing and experiment orchestration for the CLI.
//!
//! Every subcommand takes a JSON config (schema-validated, unknown keys
//! rejected) and emits JSON summaries plus CSV series with 17-significant-
//! digit formatting, so emitted values roundtrip exactly. Outputs are a pure
//! function of (config, seed); the seed and thread count can be overridden
//! by `--seed` / `--threads` or the `SEPX_SEED` / `SEPX_THREADS` /
//! `SEPX_OUT` environment variables (flag beats env beats config).
//!
//! Exit codes: 0 success, 1 domain/model errors, 2 config errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::averaged::{action_of, integrate_averaged};
use crate::ensemble::{
    anosov_sweep, error_scaling_sweep, run_capture_experiment, EnsembleSpec, SampleRecord,
};
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::model::ModelPreset;
use crate::params::NumericParams;
use crate::sim::{classify_capture, integrate_full, PseudoPrediction, SimOptions};
use crate::theta::{capture_probability, compute_theta, SepCtx};

#[derive(Parser)]
#[command(
    name = "separatrix",
    about = "Averaging with separatrix crossing: fluxes, capture probabilities, glued averaged flow, Monte Carlo capture experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Separatrix loops, periods, actions and loop areas to CSV
    Geometry(CommonArgs),
    /// Fluxes Theta_nu and capture probabilities to JSON
    Theta(CommonArgs),
    /// Glued averaged solution and crossing record
    Averaged(CommonArgs),
    /// One full perturbed trajectory with capture classification
    Simulate(CommonArgs),
    /// Monte Carlo capture ensemble
    Ensemble(CommonArgs),
    /// Accuracy-scaling sweep over an eps ladder
    Sweep(CommonArgs),
    /// Capture fractions from a sweep in eps at a fixed initial point
    Anosov(CommonArgs),
}

#[derive(clap::Args)]
pub struct CommonArgs {
    /// JSON config path
    #[arg(long)]
    pub config: PathBuf,
    /// output directory (default: current directory, env SEPX_OUT)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// RNG seed override (env SEPX_SEED)
    #[arg(long)]
    pub seed: Option<u64>,
    /// rayon worker count (env SEPX_THREADS)
    #[arg(long)]
    pub threads: Option<usize>,
}

// ---------------------------------------------------------------------------
// config schemas
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    preset: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
}

impl ModelSection {
    fn build(&self) -> Result<(crate::model::System, ModelPreset)> {
        let preset = ModelPreset {
            name: self.preset.clone(),
            params: self.params.clone(),
        };
        Ok((preset.instantiate()?, preset))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryConfig {
    model: ModelSection,
    /// list of z vectors (use [[]] for dim_z = 0)
    z: Vec<Vec<f64>>,
    /// energies; each is attached to the regions its sign admits
    h: Vec<f64>,
    #[serde(default)]
    numeric: NumericParams,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThetaConfig {
    model: ModelSection,
    z: Vec<Vec<f64>>,
    #[serde(default)]
    numeric: NumericParams,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AveragedConfig {
    model: ModelSection,
    h0: f64,
    #[serde(default)]
    z0: Vec<f64>,
    /// recorded with the outputs; the slow-time system itself is eps-free
    eps: f64,
    tau_max: f64,
    /// starting region for h0 < 0
    #[serde(default)]
    nu0: Option<u8>,
    #[serde(default)]
    numeric: NumericParams,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialPoint {
    p: f64,
    q: f64,
    #[serde(default)]
    z: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    model: ModelSection,
    initial: InitialPoint,
    eps: f64,
    t_span: f64,
    #[serde(default = "default_stride")]
    sample_stride: usize,
    #[serde(default)]
    numeric: NumericParams,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum EpsSpec {
    One(f64),
    Ladder(Vec<f64>),
}

impl EpsSpec {
    fn to_vec(&self) -> Vec<f64> {
        match self {
            EpsSpec::One(v) => vec![*v],
            EpsSpec::Ladder(v) => v.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleConfig {
    model: ModelSection,
    base_point: InitialPoint,
    delta: f64,
    eps: EpsSpec,
    n: usize,
    seed: u64,
    t_span: f64,
    #[serde(default)]
    tau_max: Option<f64>,
    #[serde(default)]
    with_error_metrics: bool,
    #[serde(default)]
    numeric: NumericParams,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnosovConfig {
    model: ModelSection,
    base_point: InitialPoint,
    eps0: f64,
    m: usize,
    seed: u64,
    t_span: f64,
    #[serde(default)]
    numeric: NumericParams,
}

// ---------------------------------------------------------------------------
// emission helpers
// ---------------------------------------------------------------------------

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_fmt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Write rows with the documented header, 17 significant digits, newline
/// terminated. An empty series still emits the header.
pub fn emit_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn emit_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn z_header(dim: usize) -> String {
    (0..dim).map(|i| format!("z{i}")).collect::<Vec<_>>().join(",")
}

fn region_code(r: Region) -> i64 {
    match r {
        Region::G(v) => v as i64,
        Region::Boundary => 0,
    }
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

/// Parse argv, run, map errors to exit codes with one structured diagnostic
/// line on stderr.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version printing itself
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let diag = serde_json::json!({ "error": e.to_string(), "exit_code": code });
            eprintln!("{diag}");
            code
        }
    }
}

fn resolve_out(args: &CommonArgs) -> Result<PathBuf> {
    let dir = args
        .out
        .clone()
        .or_else(|| std::env::var_os("SEPX_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn resolve_seed(args: &CommonArgs, config_seed: u64) -> u64 {
    args.seed
        .or_else(|| {
            std::env::var("SEPX_SEED")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(config_seed)
}

fn init_threads(args: &CommonArgs) {
    let n = args.threads.or_else(|| {
        std::env::var("SEPX_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        // a second initialisation in the same process is a no-op
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Geometry(args) => cmd_geometry(args),
        Command::Theta(args) => cmd_theta(args),
        Command::Averaged(args) => cmd_averaged(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Ensemble(args) => cmd_ensemble(args, false),
        Command::Sweep(args) => cmd_ensemble(args, true),
        Command::Anosov(args) => cmd_anosov(args),
    }
}

fn cmd_geometry(args: CommonArgs) -> Result<()> {
    init_threads(&args);
    let cfg: GeometryConfig = read_config(&args.config)?;
    let out = resolve_out(&args)?;
    let (system, _) = cfg.model.build()?;
    let dim = system.dim_z();

    let mut rows = Vec::new();
    for (zi, z) in cfg.z.iter().enumerate() {
        if z.len() != dim {
            return Err(Error::Config(format!(
                "z entry {z:?} has wrong dimension (expected {dim})"
            )));
        }
        let geo = crate::geometry::ZGeometry::new(&system, z, &cfg.numeric)?;
        for &h in &cfg.h {
            let nus: &[u8] = if h > 0.0 { &[3] } else { &[1, 2] };
            for &nu in nus {
                let core = match geo.env.orbit_core(h, nu, &[], None) {
                    Ok(c) => c,
                    Err(Error::RegionMismatch { .. }) | Err(Error::NearSeparatrix { .. }) => {
                        continue
                    }
                    Err(e) => return Err(e),
                };
                let s_nu = match nu {
                    3 => geo.seps.areas[2],
                    v => geo.seps.areas[(v - 1) as usize],
                };
                let mut row: Vec<String> = z.iter().map(|v| fmt(*v)).collect();
                row.push(nu.to_string());
                row.push(fmt(h));
                row.push(fmt(core.period));
                row.push(fmt(core.area / std::f64::consts::TAU));
                row.push(fmt(s_nu));
                rows.push(row);
            }
        }
        // loop polylines for plotting
        for l in &geo.seps.loops {
            let rows: Vec<Vec<String>> = l
                .points
                .iter()
                .map(|&(s, p, q)| vec![fmt(s), fmt(p), fmt(q)])
                .collect();
            emit_csv(
                &out.join(format!("loop_z{zi}_nu{}.csv", l.nu)),
                "s,p,q",
                &rows,
            )?;
        }
    }
    let zh = z_header(dim);
    let header = if zh.is_empty() {
        "nu,h,T,I,S_nu".to_string()
    } else {
        format!("{zh},nu,h,T,I,S_nu")
    };
    emit_csv(&out.join("geometry.csv"), &header, &rows)?;
    Ok(())
}

fn cmd_theta(args: CommonArgs) -> Result<()> {
    init_threads(&args);
    let cfg: ThetaConfig = read_config(&args.config)?;
    let out = resolve_out(&args)?;
    let (system, _) = cfg.model.build()?;
    let mut entries = Vec::new();
    for z in &cfg.z {
        let geo = crate::geometry::ZGeometry::new(&system, z, &cfg.numeric)?;
        let tv = compute_theta(&geo)?;
        let p = capture_probability(&tv)?;
        entries.push(serde_json::json!({
            "z": z,
            "theta": [tv.theta1, tv.theta2, tv.theta3],
            "P": [p.p1, p.p2],
            "quad_error": tv.estimated_quadrature_error,
        }));
    }
    let value = if entries.len() == 1 {
        entries.pop().unwrap()
    } else {
        serde_json::Value::Array(entries)
    };
    emit_json(&out.join("theta.json"), &value)?;
    Ok(())
}

fn cmd_averaged(args: CommonArgs) -> Result<()> {
    init_threads(&args);
    let cfg: AveragedConfig = read_config(&args.config)?;
    let out = resolve_out(&args)?;
    if cfg.eps <= 0.0 {
        return Err(Error::Config("eps must be positive".into()));
    }
    if cfg.tau_max <= 0.0 {
        return Err(Error::Config("tau_max must be positive".into()));
    }
    let (system, _) = cfg.model.build()?;
    let ctx = SepCtx::new(&system, &cfg.numeric)?;
    let sol = integrate_averaged(&ctx, cfg.h0, &cfg.z0, (0.0, cfg.tau_max), cfg.nu0)?;

    let mut rows = Vec::new();
    let mut branch_rows = |br: &crate::averaged::Branch| -> Result<()> {
        for (tau, h, z) in br.rows() {
            let j = action_of(&ctx, h, z, br.nu)?;
            let mut row = vec![fmt(tau), br.nu.to_string(), fmt(h)];
            row.extend(z.iter().map(|v| fmt(*v)));
            row.push(fmt(j));
            rows.push(row);
        }
        Ok(())
    };
    branch_rows(&sol.initial)?;
    if let Some(post) = &sol.post {
        branch_rows(&post[0])?;
        branch_rows(&post[1])?;
    }
    let zh = z_header(system.dim_z());
    let header = if zh.is_empty() {
        "tau,nu,H,J".to_string()
    } else {
        format!("tau,nu,H,{zh},J")
    };
    emit_csv(&out.join("averaged.csv"), &header, &rows)?;

    let crossing = match &sol.crossing {
        Some(c) => serde_json::json!({
            "tau_star": c.tau_star,
            "z_star": c.z_star,
            "P1": c.p1,
            "P2": c.p2,
            "tau_star_error": c.tau_star_error,
            "eps": cfg.eps,
            "t_star": c.tau_star / cfg.eps,
        }),
        None => serde_json::json!({
            "crossing": null,
            "note": "no separatrix crossing within tau_max",
            "eps": cfg.eps,
        }),
    };
    emit_json(&out.join("crossing.json"), &crossing)?;
    Ok(())
}

fn cmd_simulate(args: CommonArgs) -> Result<()> {
    init_threads(&args);
    let cfg: SimulateConfig = read_config(&args.config)?;
    let out = resolve_out(&args)?;
    if cfg.eps < 0.0 {
        return Err(Error::Config("eps must be >= 0".into()));
    }
    if cfg.t_span <= 0.0 {
        return Err(Error::Config("t_span must be positive".into()));
    }
    let (system, _) = cfg.model.build()?;
    let ctx = SepCtx::new(&system, &cfg.numeric)?;
    let opts = SimOptions {
        t_span: (0.0, cfg.t_span),
        sample_stride: cfg.sample_stride.max(1),
        stop_at_capture: false,
        track_energy_integral: false,
    };
    let traj = integrate_full(
        &ctx,
        cfg.initial.p,
        cfg.initial.q,
        &cfg.initial.z,
        cfg.eps,
        &opts,
    )?;
    let rows: Vec<Vec<String>> = traj
        .samples
        .iter()
        .map(|s| {
            let mut row = vec![fmt(s.t), fmt(s.p), fmt(s.q)];
            row.extend(s.z.iter().map(|v| fmt(*v)));
            row.push(fmt(s.h));
            row.push(region_code(ctx.detect_region(s.p, s.q, &s.z)).to_string());
            row
        })
        .collect();
    let zh = z_header(system.dim_z());
    let header = if zh.is_empty() {
        "t,p,q,h,nu".to_string()
    } else {
        format!("t,p,q,{zh},h,nu")
    };
    emit_csv(&out.join("trajectory.csv"), &header, &rows)?;

    let record = classify_capture(&ctx, &traj)?;
    emit_json(&out.join("capture.json"), &record)?;
    Ok(())
}

fn predicted_str(p: &Option<PseudoPrediction>) -> String {
    match p {
        Some(PseudoPrediction::Capture(nu)) => nu.to_string(),
        Some(PseudoPrediction::Continue) => "continue".to_string(),
        None => String::new(),
    }
}

fn trajectory_rows(rows: &[SampleRecord]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.id.to_string(),
                r.destination.map(|d| d.to_string()).unwrap_or_default(),
                opt_fmt(r.t_minus),
                opt_fmt(r.t_plus),
                opt_fmt(r.h_prime),
                predicted_str(&r.predicted),
                opt_fmt(r.pre_err),
                opt_fmt(r.post_err),
            ]
        })
        .collect()
}

const TRAJ_HEADER: &str = "id,destination,t_minus,t_plus,h_prime,predicted,pre_err,post_err";

fn cmd_ensemble(args: CommonArgs, sweep: bool) -> Result<()> {
    init_threads(&args);
    let cfg: EnsembleConfig = read_config(&args.config)?;
    let out = resolve_out(&args)?;
    let (system, _) = cfg.model.build()?;
    let ctx = SepCtx::new(&system, &cfg.numeric)?;
    let spec = EnsembleSpec {
        base: (cfg.base_point.p, cfg.base_point.q, cfg.base_point.z.clone()),
        delta: cfg.delta,
        eps: cfg.eps.to_vec(),
        n: cfg.n,
        seed: resolve_seed(&args, cfg.seed),
        t_span: cfg.t_span,
        tau_max: cfg.tau_max,
        with_error_metrics: cfg.with_error_metrics,
    };
    if sweep {
        let (report, rows) = error_scaling_sweep(&ctx, &spec)?;
        emit_json(&out.join("sweep.json"), &report)?;
        emit_csv(&out.join("trajectories.csv"), TRAJ_HEADER, &trajectory_rows(&rows))?;
    } else {
        let (report, rows) = run_capture_experiment(&ctx, &spec)?;
        emit_json(&out.join("ensemble.json"), &report)?;
        emit_csv(&out.join("trajectories.csv"), TRAJ_HEADER, &trajectory_rows(&rows))?;
    }
    Ok(())
}

fn cmd_anosov(args: CommonArgs) -> Result<()> {
    init_threads(&args);
    let cfg: AnosovConfig = read_config(&args.config)?;
    let out = resolve_out(&args)?;
    let (system, _) = cfg.model.build()?;
    let ctx = SepCtx::new(&system, &cfg.numeric)?;
    let report = anosov_sweep(
        &ctx,
        (cfg.base_point.p, cfg.base_point.q, &cfg.base_point.z),
        cfg.eps0,
        cfg.m,
        resolve_seed(&args, cfg.seed),
        cfg.t_span,
    )?;
    emit_json(&out.join("anosov.json"), &report)?;
    Ok(())
}
