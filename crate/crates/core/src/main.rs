use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use oseen::asymptotics::{compare_profiles, fit_decay, log_coefficient_2d, predict_2d, predict_3d, DecayReport, LogCoefficientReport, Window};
use oseen::bilinear::{compute_a, compute_b_matrix, compute_w, BilinearMatrix, EnvelopeSample, MomentMatrix, QuadParams};
use oseen::checks::{self, Check};
use oseen::fields::{make_datum, DatumKind, Grid, GridConfig, HomogeneousField};
use oseen::kernels::OseenTensors;
use oseen::output::{fmt17, loglog_svg, read_json, read_profile, write_csv, write_grid_field, write_json, RunConfig, RunManifest, Series};
use oseen::solver::{initial_iterate, picard_solve_with, IterationTrace, Profile, SolverConfig};
use oseen::sphere::{build_rule, moment_identities, negative_control, verify_cancellations};
use oseen::Error;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

const EXIT_CHECK: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_TIMEOUT: u8 = 3;
const EXIT_USAGE: u8 = 64;

/// Self-similar Navier-Stokes profiles from homogeneous data, and checks of their far field.
#[derive(Parser, Debug)]
#[command(name = "oseen", version)]
struct Cli {
    /// Worker threads (falls back to OSEEN_THREADS, then to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// key=value configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    #[command(subcommand)]
    Verify(Verify),
    Solve(SolveArgs),
    Compare(CompareArgs),
    /// Summarize solve/compare/verify outputs in a directory as markdown and HTML.
    Report {
        dir: PathBuf,
    },
    /// Kernel debugging utilities.
    #[command(subcommand)]
    Kernels(KernelsCmd),
}

#[derive(Subcommand, Debug)]
enum Verify {
    /// Kernel invariants and the Gaussian decay of K − K°.
    Kernels {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cancellation and moment identities on the sphere.
    Sphere {
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long, default_value_t = 30)]
        order: usize,
        #[arg(long, default_value_t = 1e-11)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remainder orders of the convolution and heat expansions, and the product identity.
    Convolution {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decay envelopes of B(u,u) and the moment matrix A (2D) or B (3D).
    Bilinear {
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DatumArg {
    Rotational,
    Anisotropic,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long, value_enum)]
    datum: DatumArg,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Prediction {
    #[value(name = "2d")]
    #[serde(rename = "2d")]
    TwoD,
    #[value(name = "3d")]
    #[serde(rename = "3d")]
    ThreeD,
    #[value(name = "highd")]
    #[serde(rename = "highd")]
    HighD,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long, value_enum)]
    prediction: Prediction,
    /// R1:R2
    #[arg(long, default_value = "20:200")]
    window: String,
    /// Datum of the profile; read from summary.json next to the profile when omitted.
    #[arg(long, value_enum)]
    datum: Option<DatumArg>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Output directory (defaults to the profile's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum KernelsCmd {
    /// Print kernel components as CSV: j,h,k,x1..xd,t,value.
    Eval {
        #[arg(long)]
        dim: usize,
        /// Comma-separated point.
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, value_enum, default_value = "k")]
        kernel: KernelArg,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum KernelArg {
    K,
    F,
    K0,
    F0,
    Q,
}

// Artifacts read back by `report`

#[derive(Debug, Serialize, Deserialize)]
struct SolveSummary {
    dim: usize,
    datum: DatumArg,
    datum_name: String,
    epsilon: f64,
    tol: f64,
    grid: GridConfig,
    quad: QuadParams,
    converged: bool,
    iterations: usize,
    final_residual: f64,
    x01_norm: f64,
    moment: Option<MomentMatrix>,
    matrix_seconds: f64,
    solve_seconds: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompareSummary {
    prediction: Prediction,
    profile: PathBuf,
    datum_name: String,
    epsilon: f64,
    report: DecayReport,
    log_coefficients: Option<LogCoefficientReport>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChecksFile {
    suite: String,
    checks: Vec<Check>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Artifact {
    Solve(SolveSummary),
    Compare(CompareSummary),
    Checks(ChecksFile),
}

/// Error carrying its exit code.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

fn usage(msg: impl std::fmt::Display) -> Exit {
    Exit(EXIT_USAGE, anyhow!("{msg}"))
}

fn classify(e: anyhow::Error) -> Exit {
    let code = match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        Some(Error::Timeout { .. }) => EXIT_TIMEOUT,
        _ => EXIT_CHECK,
    };
    Exit(code, e)
}

type Outcome = std::result::Result<bool, Exit>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK),
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("OSEEN_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| usage(format!("OSEEN_THREADS must be a positive integer, got {v:?}")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Exit(EXIT_CHECK, e.into()))?;
    }
    let config = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match cli.cmd {
        Command::Verify(v) => verify(v, argv),
        Command::Solve(a) => solve(a, config, argv),
        Command::Compare(a) => compare(a, argv),
        Command::Report { dir } => report(&dir).map_err(classify),
        Command::Kernels(KernelsCmd::Eval { dim, x, t, kernel }) => kernels_eval(dim, &x, t, kernel),
    }
}

fn ensure_dir(p: &Path) -> std::result::Result<(), Exit> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display())).map_err(classify)
}

fn print_checks(list: &[Check]) -> bool {
    for c in list {
        println!("{}", c.line());
    }
    list.iter().all(|c| c.passed)
}

fn save_checks(out: &Option<PathBuf>, suite: &str, list: Vec<Check>, argv: Vec<String>, start: Instant) -> std::result::Result<(), Exit> {
    let Some(dir) = out else { return Ok(()) };
    ensure_dir(dir)?;
    let path = dir.join(format!("checks_{suite}.json"));
    let mut m = RunManifest::new(argv, BTreeMap::new());
    write_json(&path, &Artifact::Checks(ChecksFile { suite: suite.into(), checks: list })).map_err(|e| classify(e.into()))?;
    m.output(&path);
    m.time("total", start.elapsed().as_secs_f64());
    write_json(&dir.join(format!("manifest_{suite}.json")), &m).map_err(|e| classify(e.into()))
}

fn checked(r: oseen::Result<Check>, id: usize, name: &str) -> Check {
    r.unwrap_or_else(|e| Check::errored(id, name, "", &e))
}

fn verify(v: Verify, argv: Vec<String>) -> Outcome {
    let start = Instant::now();
    match v {
        Verify::Kernels { out } => {
            let list = vec![checked(checks::kernel_invariants(), 0, "kernel invariants"), checked(checks::kernel_decomposition(), 3, "kernel decomposition envelope")];
            let ok = print_checks(&list);
            save_checks(&out, "kernels", list, argv, start)?;
            Ok(ok)
        }
        Verify::Sphere { dim, order, tol, out } => {
            let rule = build_rule(dim, order).map_err(|e| usage(e))?;
            let k = OseenTensors::new(dim).map_err(|e| usage(e))?;
            let ids = verify_cancellations(&rule, &k).map_err(|e| classify(e.into()))?;
            let mut ok = true;
            let mut rows = Vec::new();
            for id in ids.iter().chain(&moment_identities(&rule)) {
                let pass = id.max_abs <= tol;
                ok &= pass;
                println!("{:<18} {:.3e} {}", id.name, id.max_abs, if pass { "PASS" } else { "FAIL" });
                rows.push(vec![id.name.clone(), fmt17(id.max_abs), pass.to_string()]);
            }
            let control = negative_control(&rule, &k);
            println!("{:<18} {:.3e} (control, expected nonzero)", "int w1^2 K0_11", control);
            if let Some(dir) = &out {
                ensure_dir(dir)?;
                let p = dir.join(format!("sphere_d{dim}.csv"));
                write_csv(&p, &["identity", "max_abs", "pass"], rows).map_err(|e| classify(e.into()))?;
            }
            Ok(ok)
        }
        Verify::Convolution { out } => {
            let c4 = checked(checks::convolution_order(), 4, "convolution expansion remainder");
            let c5 = checked(checks::heat_expansion_order(), 5, "heat expansion remainder");
            let c11 = checked(checks::product_identity(), 11, "product-of-heat-flows identity");
            let rows = vec![
                vec!["convolution_remainder".into(), "10:100".into(), fmt17(*c4.metrics.get("slope").unwrap_or(&f64::NAN)), fmt17(-3.0), c4.passed.to_string()],
                vec!["heat_remainder".into(), "10:100".into(), fmt17(*c5.metrics.get("slope").unwrap_or(&f64::NAN)), fmt17(-5.0), c5.passed.to_string()],
                vec!["product_identity".into(), "1.5:7.8".into(), fmt17(*c11.metrics.get("max_residual").unwrap_or(&f64::NAN)), "<=1e-5".into(), c11.passed.to_string()],
            ];
            println!("test,window,fitted,expected,pass");
            for r in &rows {
                println!("{}", r.join(","));
            }
            if let Some(dir) = &out {
                ensure_dir(dir)?;
                write_csv(&dir.join("convolution.csv"), &["test", "window", "fitted", "expected", "pass"], rows).map_err(|e| classify(e.into()))?;
            }
            let list = vec![c4, c5, c11];
            let ok = list.iter().all(|c| c.passed);
            for c in &list {
                eprintln!("{}", c.line());
            }
            save_checks(&out, "convolution", list, argv, start)?;
            Ok(ok)
        }
        Verify::Bilinear { dim, epsilon, out } => verify_bilinear(dim, epsilon, out, argv, start),
    }
}

fn envelope_rows(s: &[EnvelopeSample]) -> Vec<Vec<String>> {
    s.iter().map(|e| vec![fmt17(e.x_norm), fmt17(e.t), fmt17(e.value), fmt17(e.envelope), fmt17(e.ratio)]).collect()
}

fn verify_bilinear(dim: usize, epsilon: f64, out: Option<PathBuf>, argv: Vec<String>, start: Instant) -> Outcome {
    if !(dim == 2 || dim == 3) {
        return Err(usage("verify bilinear supports --dim 2 or 3"));
    }
    let q = QuadParams::for_dim(dim);
    let base = checks::envelope_samples(dim, &q).map_err(|e| classify(e.into()))?;
    let fine = checks::envelope_samples(dim, &q.refined()).map_err(|e| classify(e.into()))?;
    let m0 = base.iter().map(|s| s.ratio).fold(0.0, f64::max);
    let m1 = fine.iter().map(|s| s.ratio).fold(0.0, f64::max);
    let drift = (m1 / m0 - 1.0).abs();
    let ok = m0 > 0.0 && base.iter().chain(&fine).all(|s| s.ratio.is_finite()) && drift <= 0.2;
    println!("{} envelope d={dim}: max ratio {m0:.4e}, refined {m1:.4e} (drift {:.1}%)", if ok { "PASS" } else { "FAIL" }, 100.0 * drift);
    let moment = if dim == 2 {
        compute_a(&make_datum(DatumKind::Anisotropic2d, epsilon).map_err(|e| usage(e))?).map_err(|e| classify(e.into()))?
    } else {
        let cfg = SolverConfig::for_dim(3);
        let a = Arc::new(make_datum(DatumKind::Rotational3d, epsilon).map_err(|e| usage(e))?);
        let m = BilinearMatrix::assemble(Arc::new(Grid::new(3, cfg.grid).map_err(|e| usage(e))?), cfg.quad).map_err(|e| classify(e.into()))?;
        let (p, _) = picard_solve_with(&a, &m, &cfg).map_err(|e| classify(e.into()))?;
        compute_b_matrix(&compute_w(&p, &a).map_err(|e| classify(e.into()))?).map_err(|e| classify(e.into()))?
    };
    println!("{:?} = {:?}", moment.tag, moment.entries);
    if let Some(dir) = &out {
        ensure_dir(dir)?;
        let hdr = ["x", "t", "value", "envelope", "ratio"];
        let mut man = RunManifest::new(argv, BTreeMap::new());
        for (name, s) in [("envelope", &base), ("envelope_refined", &fine)] {
            let p = dir.join(format!("{name}_d{dim}.csv"));
            write_csv(&p, &hdr, envelope_rows(s)).map_err(|e| classify(e.into()))?;
            man.output(&p);
        }
        let svg = loglog_svg(
            &format!("|B(u,u)| / envelope, d = {dim}"),
            "|x|/sqrt(t)",
            "ratio",
            &[
                Series { label: "default quadrature".into(), points: base.iter().map(|s| (s.x_norm / s.t.sqrt(), s.ratio)).collect(), line: false },
                Series { label: "refined quadrature".into(), points: fine.iter().map(|s| (s.x_norm / s.t.sqrt(), s.ratio)).collect(), line: false },
            ],
        );
        let p = dir.join(format!("envelope_d{dim}.svg"));
        std::fs::write(&p, svg).map_err(|e| classify(e.into()))?;
        man.output(&p);
        let p = dir.join(if dim == 2 { "A.json" } else { "B.json" });
        write_json(&p, &moment).map_err(|e| classify(e.into()))?;
        man.output(&p);
        man.time("total", start.elapsed().as_secs_f64());
        write_json(&dir.join(format!("manifest_bilinear_d{dim}.json")), &man).map_err(|e| classify(e.into()))?;
    }
    Ok(ok)
}

fn datum_kind(dim: usize, d: DatumArg) -> std::result::Result<DatumKind, Exit> {
    match (dim, d) {
        (2, DatumArg::Rotational) => Ok(DatumKind::Rotational2d),
        (2, DatumArg::Anisotropic) => Ok(DatumKind::Anisotropic2d),
        (3, DatumArg::Rotational) => Ok(DatumKind::Rotational3d),
        (3, DatumArg::Anisotropic) => Err(usage("3D runs support the axisymmetric rotational datum only")),
        _ => Err(usage(format!("--dim must be 2 or 3, got {dim}"))),
    }
}

fn solve(a: SolveArgs, mut config: RunConfig, argv: Vec<String>) -> Outcome {
    let start = Instant::now();
    let kind = datum_kind(a.dim, a.datum)?;
    let mut cfg = SolverConfig::for_dim(a.dim);
    config.apply_grid(&mut cfg.grid).map_err(usage)?;
    config.apply_quad(&mut cfg.quad).map_err(usage)?;
    if let Some(t) = config.tol().map_err(usage)? {
        cfg.tol = t;
    }
    if let Some(n) = config.max_iter().map_err(usage)? {
        cfg.max_iter = n;
    }
    if let Some(t) = a.tol {
        cfg.tol = t;
    }
    if let Some(n) = a.max_iter {
        cfg.max_iter = n;
    }
    // resolved settings, recorded in the manifest
    config.set("grid.r_min", cfg.grid.r_min);
    config.set("grid.r_max", cfg.grid.r_max);
    config.set("grid.n_radial", cfg.grid.n_radial);
    config.set("grid.n_angular", cfg.grid.n_angular);
    config.set("solver.tol", cfg.tol);
    config.set("solver.max_iter", cfg.max_iter);
    config.set("quad.time_nodes", cfg.quad.time_nodes);
    config.set("quad.panel_nodes", cfg.quad.panel_nodes);
    config.set("quad.ball_dirs", cfg.quad.ball_dirs);
    config.set("quad.coarse_ratio", cfg.quad.coarse_ratio);
    let mut manifest_cfg = config.entries.clone();
    manifest_cfg.insert("datum".into(), kind.name());
    manifest_cfg.insert("epsilon".into(), a.epsilon.to_string());
    let mut man = RunManifest::new(argv, manifest_cfg);

    let datum = Arc::new(make_datum(kind.clone(), a.epsilon).map_err(usage)?);
    if a.epsilon > cfg.eps_max || a.epsilon < 0.0 {
        return Err(usage(format!("--epsilon must lie in [0, {}]", cfg.eps_max)));
    }
    let grid = Arc::new(Grid::new(a.dim, cfg.grid).map_err(usage)?);
    cfg.quad.check().map_err(usage)?;
    ensure_dir(&a.out)?;
    let m = BilinearMatrix::assemble(grid, cfg.quad).map_err(|e| classify(e.into()))?;
    eprintln!("matrix assembled in {:.1}s", m.seconds);
    let (profile, trace) = picard_solve_with(&datum, &m, &cfg).map_err(|e| classify(e.into()))?;
    for r in &trace.records {
        eprintln!("iteration {:>2}: residual {:.3e}{}", r.iteration, r.residual, r.ratio.map(|q| format!(", ratio {q:.3e}")).unwrap_or_default());
    }
    let moment = match a.dim {
        2 => Some(compute_a(&datum).map_err(|e| classify(e.into()))?),
        _ => Some(compute_b_matrix(&compute_w(&profile, &datum).map_err(|e| classify(e.into()))?).map_err(|e| classify(e.into()))?),
    };
    let write = |man: &mut RunManifest| -> anyhow::Result<()> {
        let p = a.out.join("U.csv");
        write_grid_field(&p, &profile.u)?;
        man.output(&p);
        let p = a.out.join("trace.csv");
        write_trace(&p, &trace)?;
        man.output(&p);
        let p = a.out.join("decay.svg");
        std::fs::write(&p, decay_svg(&profile, &datum))?;
        man.output(&p);
        let summary = SolveSummary {
            dim: a.dim,
            datum: a.datum,
            datum_name: kind.name(),
            epsilon: a.epsilon,
            tol: cfg.tol,
            grid: cfg.grid,
            quad: cfg.quad,
            converged: profile.converged,
            iterations: trace.records.len(),
            final_residual: trace.final_residual().unwrap_or(f64::NAN),
            x01_norm: profile.u.sup_e01(),
            moment: moment.clone(),
            matrix_seconds: trace.matrix_seconds,
            solve_seconds: trace.solve_seconds,
        };
        let p = a.out.join("summary.json");
        write_json(&p, &Artifact::Solve(summary))?;
        man.output(&p);
        man.time("matrix", trace.matrix_seconds);
        man.time("solve", trace.solve_seconds);
        man.time("total", start.elapsed().as_secs_f64());
        write_json(&a.out.join("manifest.json"), man)?;
        Ok(())
    };
    write(&mut man).map_err(classify)?;
    println!("converged in {} iterations, residual {:.3e}; outputs in {}", trace.records.len(), trace.final_residual().unwrap_or(f64::NAN), a.out.display());
    Ok(true)
}

fn write_trace(p: &Path, t: &IterationTrace) -> oseen::Result<()> {
    let rows = t.records.iter().map(|r| vec![r.iteration.to_string(), fmt17(r.residual), fmt17(r.x01_norm), r.ratio.map(fmt17).unwrap_or_default()]);
    write_csv(p, &["iteration", "residual", "x01_norm", "ratio"], rows)
}

/// max over directions of |U − a| against |x|.
fn decay_svg(p: &Profile, a: &HomogeneousField) -> String {
    let g = &p.u.grid;
    let pts: Vec<(f64, f64)> = (0..g.n_r())
        .map(|i| {
            let m = (0..g.n_ang())
                .map(|l| {
                    let av = a.eval_unchecked(&g.node(i, l));
                    p.u.at(i, l).iter().zip(&av).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max);
            (g.radii[i], m)
        })
        .collect();
    loglog_svg("max over directions of |U - a|", "|x|", "|U - a|", &[Series { label: "profile".into(), points: pts, line: true }])
}

fn parse_window(s: &str) -> std::result::Result<Window, Exit> {
    let (a, b) = s.split_once(':').ok_or_else(|| usage(format!("--window expects R1:R2, got {s:?}")))?;
    let r1: f64 = a.trim().parse().map_err(|_| usage(format!("bad window start {a:?}")))?;
    let r2: f64 = b.trim().parse().map_err(|_| usage(format!("bad window end {b:?}")))?;
    if !(r1 > 0.0 && r2 > r1) {
        return Err(usage("window needs 0 < R1 < R2"));
    }
    Ok(Window { r1, r2, ..Window::default() })
}

fn compare(a: CompareArgs, argv: Vec<String>) -> Outcome {
    let start = Instant::now();
    let window = parse_window(&a.window)?;
    if a.prediction == Prediction::HighD {
        return Err(usage("the highd prediction needs a profile in d >= 4; profiles are computed for d = 2 and 3 only"));
    }
    let dir = a.profile.parent().map(Path::to_path_buf).unwrap_or_default();
    let (datum_arg, eps) = match (a.datum, a.epsilon) {
        (Some(d), Some(e)) => (d, e),
        _ => {
            let p = dir.join("summary.json");
            match read_json::<Artifact>(&p) {
                Ok(Artifact::Solve(s)) => (a.datum.unwrap_or(s.datum), a.epsilon.unwrap_or(s.epsilon)),
                _ => return Err(usage(format!("pass --datum and --epsilon, or keep the solve summary at {}", p.display()))),
            }
        }
    };
    let u = read_profile(&a.profile, 1.0).map_err(|e| usage(e))?;
    let dim = u.grid.d;
    let expected = match a.prediction {
        Prediction::TwoD => 2,
        _ => 3,
    };
    if dim != expected {
        return Err(usage(format!("profile has d = {dim}, prediction needs d = {expected}")));
    }
    let kind = datum_kind(dim, datum_arg)?;
    let datum = Arc::new(make_datum(kind.clone(), eps).map_err(usage)?);
    let u = u.with_closure(datum.clone());
    let (rep, logs) = match a.prediction {
        Prediction::TwoD => {
            let am = compute_a(&datum).map_err(|e| classify(e.into()))?;
            let pred = |x: &[f64]| predict_2d(&datum, &am, x);
            let rep = compare_profiles(&u, &pred, &window, true).map_err(|e| classify(e.into()))?;
            let logs = log_coefficient_2d(&u, &datum, &am, &window).map_err(|e| classify(e.into()))?;
            (rep, Some(logs))
        }
        _ => {
            let a0 = initial_iterate(&datum, u.grid.clone()).map_err(|e| classify(e.into()))?;
            let b = a0.axpby(1.0, &u, -1.0);
            let profile = Profile { u: u.clone(), a0, b, converged: true };
            let bm = compute_b_matrix(&compute_w(&profile, &datum).map_err(|e| classify(e.into()))?).map_err(|e| classify(e.into()))?;
            let q = QuadParams::for_dim(3);
            let pred = |x: &[f64]| predict_3d(&datum, &bm, x, &q);
            (compare_profiles(&u, &pred, &window, false).map_err(|e| classify(e.into()))?, None)
        }
    };
    println!("exponent {:.4}, log factor {}, max relative deviation {:.3}", rep.exponent, rep.log_factor, rep.max_rel_deviation);
    if let Some(l) = &logs {
        println!("log coefficient: worst direction mismatch {:.2}%", 100.0 * l.worst_mismatch);
    }
    let out = a.out.clone().unwrap_or(dir);
    ensure_dir(&out)?;
    let tag = match a.prediction {
        Prediction::TwoD => "2d",
        _ => "3d",
    };
    let mut man = RunManifest::new(argv, BTreeMap::from([("window".to_string(), a.window.clone()), ("datum".to_string(), kind.name()), ("epsilon".to_string(), eps.to_string())]));
    let io = |man: &mut RunManifest| -> anyhow::Result<()> {
        let fitted: Vec<(f64, f64)> = {
            let line = fit_decay(&rep.samples, false)?;
            let (r0, v0) = rep.samples[0];
            let c = v0.ln() - line.exponent * r0.ln();
            rep.samples.iter().map(|(r, _)| (*r, (c + line.exponent * r.ln()).exp())).collect()
        };
        let p = out.join(format!("compare_{tag}.csv"));
        write_csv(&p, &["r", "residual"], rep.samples.iter().map(|(r, v)| vec![fmt17(*r), fmt17(*v)]))?;
        man.output(&p);
        let svg = loglog_svg(
            &format!("U - prediction ({tag}), exponent {:.3}", rep.exponent),
            "|x|",
            "max |U - prediction|",
            &[Series { label: "residual".into(), points: rep.samples.clone(), line: false }, Series { label: "power-law fit".into(), points: fitted, line: true }],
        );
        let p = out.join(format!("compare_{tag}.svg"));
        std::fs::write(&p, svg)?;
        man.output(&p);
        let p = out.join(format!("compare_{tag}.json"));
        write_json(&p, &Artifact::Compare(CompareSummary { prediction: a.prediction, profile: a.profile.clone(), datum_name: kind.name(), epsilon: eps, report: rep.clone(), log_coefficients: logs.clone() }))?;
        man.output(&p);
        man.time("total", start.elapsed().as_secs_f64());
        write_json(&out.join(format!("manifest_compare_{tag}.json")), man)?;
        Ok(())
    };
    io(&mut man).map_err(classify)?;
    Ok(true)
}

fn report(dir: &Path) -> anyhow::Result<bool> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "json") {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut arts = Vec::new();
    for f in files {
        if let Ok(a) = read_json::<Artifact>(&f) {
            arts.push((f.strip_prefix(dir).unwrap_or(&f).to_path_buf(), a));
        }
    }
    if arts.is_empty() {
        bail!("no solve, compare or verify outputs found in {}", dir.display());
    }
    let mut md = String::from("# Run report\n\n");
    let mut all_ok = true;
    let solves: Vec<_> = arts.iter().filter_map(|(p, a)| if let Artifact::Solve(s) = a { Some((p, s)) } else { None }).collect();
    if !solves.is_empty() {
        md += "## Solver runs\n\n| file | datum | eps | grid | iterations | residual | status |\n|---|---|---|---|---|---|---|\n";
        for (p, s) in &solves {
            let ok = s.converged && s.final_residual <= s.tol;
            all_ok &= ok;
            md += &format!(
                "| {} | {} | {} | {}x{} | {} | {:.2e} | {} |\n",
                p.display(),
                s.datum_name,
                s.epsilon,
                s.grid.n_radial,
                s.grid.n_angular,
                s.iterations,
                s.final_residual,
                if ok { "PASS" } else { "FAIL" }
            );
        }
        md += "\n";
    }
    let cmps: Vec<_> = arts.iter().filter_map(|(p, a)| if let Artifact::Compare(c) = a { Some((p, c)) } else { None }).collect();
    if !cmps.is_empty() {
        md += "## Far-field comparisons\n\n| file | datum | prediction | window | exponent | log factor | log coefficient mismatch |\n|---|---|---|---|---|---|---|\n";
        for (p, c) in &cmps {
            let pred = match c.prediction {
                Prediction::TwoD => "2d",
                Prediction::ThreeD => "3d",
                Prediction::HighD => "highd",
            };
            let mism = c.log_coefficients.as_ref().map(|l| format!("{:.2}%", 100.0 * l.worst_mismatch)).unwrap_or_else(|| "-".into());
            md += &format!(
                "| {} | {} | {} | [{:.1}, {:.1}] | {:.3} | {} | {} |\n",
                p.display(),
                c.datum_name,
                pred,
                c.report.window.0,
                c.report.window.1,
                c.report.exponent,
                c.report.log_factor,
                mism
            );
        }
        md += "\n";
    }
    let chks: Vec<_> = arts.iter().filter_map(|(p, a)| if let Artifact::Checks(c) = a { Some((p, c)) } else { None }).collect();
    if !chks.is_empty() {
        md += "## Checks\n\n| suite | check | measured | target | status |\n|---|---|---|---|---|\n";
        for (_, c) in &chks {
            for k in &c.checks {
                all_ok &= k.passed;
                md += &format!("| {} | {} | {} | {} | {} |\n", c.suite, k.name, k.measured.replace('|', "/"), k.target.replace('|', "/"), if k.passed { "PASS" } else { "FAIL" });
            }
        }
        md += "\n";
    }
    md += &format!("Overall: {}\n", if all_ok { "PASS" } else { "FAIL" });
    std::fs::write(dir.join("report.md"), &md)?;
    std::fs::write(dir.join("report.html"), markdown_tables_to_html(&md))?;
    print!("{md}");
    Ok(all_ok)
}

/// Enough markdown for the report: headings, pipe tables and paragraphs.
fn markdown_tables_to_html(md: &str) -> String {
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut h = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Run report</title>\n<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}td,th{border:1px solid #999;padding:3px 8px}</style></head><body>\n");
    let mut in_table = false;
    let mut header = true;
    for line in md.lines() {
        if line.starts_with('|') {
            if line.starts_with("|---") {
                continue;
            }
            if !in_table {
                h += "<table>\n";
                in_table = true;
                header = true;
            }
            let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
            let tag = if header { "th" } else { "td" };
            h += "<tr>";
            for c in cells {
                h += &format!("<{tag}>{}</{tag}>", esc(c));
            }
            h += "</tr>\n";
            header = false;
            continue;
        }
        if in_table {
            h += "</table>\n";
            in_table = false;
        }
        if let Some(t) = line.strip_prefix("## ") {
            h += &format!("<h2>{}</h2>\n", esc(t));
        } else if let Some(t) = line.strip_prefix("# ") {
            h += &format!("<h1>{}</h1>\n", esc(t));
        } else if !line.trim().is_empty() {
            h += &format!("<p>{}</p>\n", esc(line));
        }
    }
    if in_table {
        h += "</table>\n";
    }
    h + "</body></html>\n"
}

fn kernels_eval(dim: usize, x: &str, t: f64, kernel: KernelArg) -> Outcome {
    let pt: Vec<f64> = x.split(',').map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| usage(format!("--x expects comma-separated numbers, got {x:?}")))?;
    if pt.len() != dim {
        return Err(usage(format!("--x has {} coordinates, --dim is {dim}", pt.len())));
    }
    let k = OseenTensors::new(dim).map_err(usage)?;
    let vals = match kernel {
        KernelArg::K => k.oseen_k(&pt, t),
        KernelArg::F => k.oseen_f(&pt, t),
        KernelArg::K0 => k.k_homog(&pt),
        KernelArg::F0 => k.f_homog(&pt),
        KernelArg::Q => Ok(k.q_poly(&pt)),
    }
    .map_err(usage)?;
    let rank3 = vals.len() == dim * dim * dim;
    let mut head = vec!["j".to_string(), "h".into(), "k".into()];
    head.extend((1..=dim).map(|i| format!("x{i}")));
    head.push("t".into());
    head.push("value".into());
    // a closed pipe (e.g. `| head`) just ends the listing
    let mut out = std::io::stdout().lock();
    if writeln!(out, "{}", head.join(",")).is_err() {
        return Ok(true);
    }
    let coords: Vec<String> = pt.iter().map(|v| fmt17(*v)).collect();
    for (idx, v) in vals.iter().enumerate() {
        let (j, h, kk) = if rank3 { (idx / (dim * dim), Some((idx / dim) % dim), idx % dim) } else { (idx / dim, None, idx % dim) };
        if writeln!(out, "{j},{},{kk},{},{},{}", h.map(|h| h.to_string()).unwrap_or_default(), coords.join(","), fmt17(t), fmt17(*v)).is_err() {
            break;
        }
    }
    Ok(true)
}
