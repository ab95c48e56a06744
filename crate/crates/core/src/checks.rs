//! Numerical checks shared by the `verify` subcommands and the acceptance harness. Each check
//! returns a [`Check`] with the measured quantity, its target and the wall-clock time.

use crate::asymptotics::{compare_profiles, fit_decay, linear_fit, log_coefficient_2d, q_contract, DecayReport, LogCoefficientReport, Window};
use crate::bilinear::{bilinear_b, compute_a, compute_b_matrix, compute_w, decay_envelope, envelope_points, BilinearMatrix, EnvelopeSample, MomentMatrix, QuadParams};
use crate::convolution::{conv_expansion, conv_oracle, gaussian_moments, heat_taylor_residual, product_heat_identity_check, ConvFactor, Decay, RadialTest, SmoothField};
use crate::error::{Error, Result};
use crate::fields::{make_datum, DatumKind, Grid, GridConfig, GridField, HomogeneousField};
use crate::kernels::{norm2, OseenTensors};
use crate::leray::{correction_field, CorrectionFlavor};
use crate::solver::{bi_integral_terms, elliptic_residual, initial_iterate, picard_solve_with, IterationTrace, Profile, ResidualConfig, SolverConfig};
use crate::sphere::{build_rule, moment_identities, negative_control, verify_cancellations};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub id: usize,
    pub name: String,
    pub passed: bool,
    pub measured: String,
    pub target: String,
    pub seconds: f64,
    pub metrics: BTreeMap<String, f64>,
}

impl Check {
    fn new(id: usize, name: &str, target: &str) -> Self {
        Check { id, name: name.into(), passed: false, measured: String::new(), target: target.into(), seconds: 0.0, metrics: BTreeMap::new() }
    }

    fn metric(&mut self, k: &str, v: f64) {
        self.metrics.insert(k.into(), v);
    }

    /// Failure record for a check whose computation itself errored.
    pub fn errored(id: usize, name: &str, target: &str, e: &Error) -> Self {
        let mut c = Check::new(id, name, target);
        c.measured = format!("error: {e}");
        c
    }

    pub fn line(&self) -> String {
        format!("{} criterion {:>2} {}: {} (target {}) [{:.1}s]", if self.passed { "PASS" } else { "FAIL" }, self.id, self.name, self.measured, self.target, self.seconds)
    }
}

fn finish(mut c: Check, start: Instant, budget: Option<f64>, ok: bool) -> Check {
    c.seconds = start.elapsed().as_secs_f64();
    let in_time = budget.is_none_or(|b| c.seconds <= b);
    if !in_time {
        c.measured += &format!("; over the {:.0}s budget", budget.unwrap());
    }
    c.passed = ok && in_time;
    c
}

fn log_radii(r1: f64, r2: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| r1 * (r2 / r1).powf(k as f64 / (n - 1) as f64)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm2(v).sqrt();
    v.iter().map(|x| x / n).collect()
}

// 1, 2: sphere

pub fn cancellations() -> Result<Check> {
    let start = Instant::now();
    let mut c = Check::new(1, "cancellation identities", "all families <= 1e-11, control > 1e-3, < 5 s");
    let mut worst = 0.0f64;
    let mut control = f64::INFINITY;
    for (d, order) in [(2, 64), (3, 30), (4, 30)] {
        let rule = build_rule(d, order)?;
        let k = OseenTensors::new(d)?;
        for id in verify_cancellations(&rule, &k)? {
            worst = worst.max(id.max_abs);
            c.metric(&format!("d{d} {}", id.name), id.max_abs);
        }
        control = control.min(negative_control(&rule, &k).abs());
    }
    c.metric("max", worst);
    c.metric("negative_control", control);
    c.measured = format!("max {worst:.2e}, control {control:.2e}");
    Ok(finish(c, start, Some(5.0), worst <= 1e-11 && control > 1e-3))
}

pub fn sphere_moments() -> Result<Check> {
    let start = Instant::now();
    let mut c = Check::new(2, "sphere moment identities", "deviation <= 1e-12 for d = 2, 3, 4");
    let mut worst = 0.0f64;
    for d in 2..=4 {
        for id in moment_identities(&build_rule(d, 30)?) {
            worst = worst.max(id.max_abs);
            c.metric(&format!("d{d} {}", id.name), id.max_abs);
        }
    }
    c.measured = format!("max deviation {worst:.2e}");
    Ok(finish(c, start, None, worst <= 1e-12))
}

// 3: kernel decomposition

/// Slope and R² of log(|x|³|K(x,1) − K°(x)|) against |x|² on n radii in [2, 6] (d = 3).
pub fn kernel_envelope_fit(n: usize) -> Result<(f64, f64)> {
    let k = OseenTensors::new(3)?;
    let w = unit(&[1.0, 2.0, 2.0]);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for j in 0..n {
        let r = 2.0 + 4.0 * j as f64 / (n - 1) as f64;
        let x: Vec<f64> = w.iter().map(|v| v * r).collect();
        let (psi, _) = k.psi_remainders(&x)?;
        xs.push(r * r);
        ys.push(norm2(&psi).sqrt().ln());
    }
    let (m, _, r2) = linear_fit(&xs, &ys)?;
    Ok((m, r2))
}

pub fn kernel_decomposition() -> Result<Check> {
    let start = Instant::now();
    let mut c = Check::new(3, "kernel decomposition envelope", "slope < 0, R^2 >= 0.98, rate stable within 15% under refinement, < 10 s");
    let (m1, r1) = kernel_envelope_fit(16)?;
    let (m2, r2) = kernel_envelope_fit(32)?;
    let drift = (m2 / m1 - 1.0).abs();
    c.metric("slope_16", m1);
    c.metric("slope_32", m2);
    c.metric("r2", r1.min(r2));
    c.measured = format!("slope {m1:.4} -> {m2:.4} (drift {:.2}%), R^2 {:.5}", 100.0 * drift, r1.min(r2));
    Ok(finish(c, start, Some(10.0), m1 < 0.0 && m2 < 0.0 && r1.min(r2) >= 0.98 && drift <= 0.15))
}

/// Symmetry of K, the scaling law K(x,t) = t^{−d/2}K(x/√t,1), and F° = ∇K° by finite
/// differences, for d = 2, 3, 4 on a fixed set of points.
pub fn kernel_invariants() -> Result<Check> {
    let start = Instant::now();
    let mut c = Check::new(0, "kernel invariants", "symmetry and scaling <= 1e-13 relative, F0 = grad K0 <= 1e-7 relative");
    let (mut sym, mut scale, mut grad) = (0.0f64, 0.0f64, 0.0f64);
    for d in 2..=4 {
        let k = OseenTensors::new(d)?;
        for p in 0..6 {
            let x: Vec<f64> = (0..d).map(|i| ((p * 7 + i * 3) as f64 * 0.37).sin() * (1.0 + p as f64)).collect();
            let t = 0.3 + 0.5 * p as f64;
            let kv = k.oseen_k(&x, t)?;
            let kn = norm2(&kv).sqrt();
            for j in 0..d {
                for m in 0..d {
                    sym = sym.max((kv[j * d + m] - kv[m * d + j]).abs() / kn);
                }
            }
            let xs: Vec<f64> = x.iter().map(|v| v / t.sqrt()).collect();
            let k1 = k.oseen_k(&xs, 1.0)?;
            let f = t.powf(-(d as f64) / 2.0);
            scale = scale.max(kv.iter().zip(&k1).map(|(a, b)| (a - f * b).abs()).fold(0.0, f64::max) / kn);
            let f0 = k.f_homog(&x)?;
            let fnorm = norm2(&f0).sqrt();
            let h = 1e-4 * norm2(&x).sqrt();
            for hh in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[hh] += h;
                xm[hh] -= h;
                let (kp, km) = (k.k_homog(&xp)?, k.k_homog(&xm)?);
                for j in 0..d {
                    for m in 0..d {
                        let fd = (kp[j * d + m] - km[j * d + m]) / (2.0 * h);
                        grad = grad.max((fd - f0[(j * d + hh) * d + m]).abs() / fnorm);
                    }
                }
            }
        }
    }
    c.metric("symmetry", sym);
    c.metric("scaling", scale);
    c.metric("gradient", grad);
    c.measured = format!("symmetry {sym:.1e}, scaling {scale:.1e}, gradient {grad:.1e}");
    Ok(finish(c, start, None, sym <= 1e-13 && scale <= 1e-13 && grad <= 1e-7))
}

// 4, 5, 11: convolution

/// (|x|, |f*g_1 − expansion|) for f = (1+|x|²)^{−1/2} in 2D with the two-term expansion.
pub fn convolution_remainders(radii: &[f64]) -> Result<Vec<(f64, f64)>> {
    let f = RadialTest { d: 2, theta: 1.0 };
    let mt = gaussian_moments(1.0, 2, 2)?;
    let fac = ConvFactor::new(1, Decay::Power { p: 1.0 }, |y: &[f64]| f.value(y));
    let g = ConvFactor::gaussian(2, 1.0);
    radii
        .iter()
        .map(|&r| {
            let x = [0.6 * r, 0.8 * r];
            let o = conv_oracle(2, &fac, &g, &x)?[0];
            let e = conv_expansion(&f, &mt, &x, 2)?;
            Ok((r, (o - e.value[0]).abs()))
        })
        .collect()
}

pub fn convolution_order() -> Result<Check> {
    let start = Instant::now();
    let mut c = Check::new(4, "convolution expansion remainder", "slope -3.0 +- 0.25 on [10, 100], < 60 s");
    let rep = fit_decay(&convolution_remainders(&log_radii(10.0, 100.0, 12))?, false)?;
    c.metric("slope", rep.exponent);
    c.measured = format!("slope {:.3}", rep.exponent);
    Ok(finish(c, start, Some(60.0), (rep.exponent + 3.0).abs() <= 0.25))
}

/// (|x|, |e^{Δ}a − a − Δa|) for the anisotropic 2D datum, from the exact harmonic heat flow.
pub fn heat_remainders(radii: &[f64]) -> Result<Vec<(f64, f64)>> {
    let a = make_datum(DatumKind::Anisotropic2d, 0.05)?;
    radii
        .iter()
        .map(|&r| {
            let x = [0.6 * r, 0.8 * r];
            let (e, v, l) = (a.heat_exact(&x, 1.0)?, a.eval(&x)?, a.laplacian(&x)?);
            Ok((r, norm2(&[e[0] - v[0] - l[0], e[1] - v[1] - l[1]]).sqrt()))
        })
        .collect()
}

pub fn heat_expansion_order() -> Result<Check> {
    let start = Instant::now();
    let mut c = Check::new(5, "heat expansion remainder", "slope -5.0 +- 0.3 on [10, 100]; quadrature cross-check at |x| = 10 within 1e-3");
    let samples = heat_remainders(&log_radii(10.0, 100.0, 10))?;
    let rep = fit_decay(&samples, false)?;
    // the Gaussian average of the Taylor remainder, computed without the harmonic expansion
    let a = make_datum(DatumKind::Anisotropic2d, 0.05)?;
    let direct = norm2(&heat_taylor_residual(&a, &[6.0, 8.0], 1.0)?).sqrt();
    let agree = (direct / samples[0].1 - 1.0).abs();
    c.metric("slope", rep.exponent);
    c.metric("cross_check", agree);
    c.measured = format!("slope {:.3}, cross-check {agree:.1e}", rep.exponent);
    Ok(finish(c, start, None, (rep.exponent + 5.0).abs() <= 0.3 && agree <= 1e-3))
}

/// Identity residuals at ten points, cycling through component pairs.
pub fn product_identity_residuals() -> Result<Vec<(Vec<f64>, (usize, usize), f64)>> {
    let a = make_datum(DatumKind::Rotational3d, 0.05)?;
    let pairs = [(0, 1), (0, 0), (1, 1), (2, 0), (1, 2)];
    (0..10)
        .map(|k| {
            let r = 1.5 + 0.7 * k as f64;
            let phi = 0.35 + 0.25 * k as f64;
            let th = 0.9 * k as f64;
            let x = vec![r * phi.sin() * th.cos(), r * phi.sin() * th.sin(), r * phi.cos()];
            let comps = pairs[k % pairs.len()];
            let v = product_heat_identity_check(&a, &a, comps, 1.0, &x)?;
            Ok((x, comps, v))
        })
        .collect()
}

pub fn product_identity() -> Result<Check> {
    let start = Instant::now();
    let mut c = Check::new(11, "product-of-heat-flows identity", "residual <= 1e-5 at 10 points (d = 3)");
    let res = product_identity_residuals()?;
    let worst = res.iter().map(|r| r.2).fold(0.0, f64::max);
    c.metric("max_residual", worst);
    c.measured = format!("max residual {worst:.2e}");
    Ok(finish(c, start, None, worst <= 1e-5))
}

// 6: envelopes

/// |B(u,u)(x,t)| for u = e^{tΔ}a against the decay envelope at 40 points with |x| ≥ e√t.
pub fn envelope_samples(d: usize, q: &QuadParams) -> Result<Vec<EnvelopeSample>> {
    let (kind, cfg) = match d {
        2 => (DatumKind::Anisotropic2d, SolverConfig::for_dim(2)),
        3 => (DatumKind::Rotational3d, SolverConfig::for_dim(3)),
        _ => return Err(Error::Unsupported(format!("envelope study in d = {d}"))),
    };
    let a = Arc::new(make_datum(kind, 0.05)?);
    let grid = Arc::new(Grid::new(d, cfg.grid)?);
    let u = initial_iterate(&a, grid)?;
    envelope_points(5, 8)
        .into_iter()
        .enumerate()
        .map(|(k, (r, t))| {
            let ang = 0.4 + 0.7 * (k % 4) as f64;
            let x = if d == 2 { vec![r * ang.cos(), r * ang.sin()] } else { vec![r * ang.sin(), 0.0, r * ang.cos()] };
            let value = norm2(&bilinear_b(&u, &u, &x, t, q)?).sqrt();
            let envelope = decay_envelope(d, r, t);
            Ok(EnvelopeSample { x_norm: r, t, value, envelope, ratio: value / envelope })
        })
        .collect()
}

pub fn bilinear_envelopes() -> Result<Check> {
    let start = Instant::now();
    let mut c = Check::new(6, "bilinear decay envelopes", "ratio bounded, max stable within 20% under quadrature refinement (d = 3 and d = 2 log), < 10 min");
    let mut ok = true;
    let mut parts = Vec::new();
    for d in [3usize, 2] {
        let q = QuadParams::for_dim(d);
        let base = envelope_samples(d, &q)?;
        let fine = envelope_samples(d, &q.refined())?;
        let m0 = base.iter().map(|s| s.ratio).fold(0.0, f64::max);
        let m1 = fine.iter().map(|s| s.ratio).fold(0.0, f64::max);
        let finite = base.iter().chain(&fine).all(|s| s.ratio.is_finite());
        let drift = (m1 / m0 - 1.0).abs();
        ok &= finite && m0 > 0.0 && drift <= 0.2;
        c.metric(&format!("d{d}_max_ratio"), m0);
        c.metric(&format!("d{d}_max_ratio_refined"), m1);
        parts.push(format!("d={d}: max ratio {m0:.3e} -> {m1:.3e} ({:.1}%)", 100.0 * drift));
    }
    c.measured = parts.join("; ");
    Ok(finish(c, start, Some(600.0), ok))
}

// 7, 8, 10, 12: two-dimensional profiles

pub struct Run {
    pub datum: Arc<HomogeneousField>,
    pub profile: Profile,
    pub trace: IterationTrace,
}

pub struct Suite2d {
    pub cfg: SolverConfig,
    pub matrix: BilinearMatrix,
    pub rotational: Result<Run>,
    pub anisotropic: Result<Run>,
}

pub fn solve_run(kind: DatumKind, eps: f64, m: &BilinearMatrix, cfg: &SolverConfig) -> Result<Run> {
    let datum = Arc::new(make_datum(kind, eps)?);
    let (profile, trace) = picard_solve_with(&datum, m, cfg)?;
    Ok(Run { datum, profile, trace })
}

pub fn suite_2d(eps: f64) -> Result<Suite2d> {
    let cfg = SolverConfig::for_dim(2);
    let matrix = BilinearMatrix::assemble(Arc::new(Grid::new(2, cfg.grid)?), cfg.quad)?;
    let rotational = solve_run(DatumKind::Rotational2d, eps, &matrix, &cfg);
    let anisotropic = solve_run(DatumKind::Anisotropic2d, eps, &matrix, &cfg);
    Ok(Suite2d { cfg, matrix, rotational, anisotropic })
}

pub fn solver_convergence(s: &Suite2d) -> Check {
    let mut c = Check::new(7, "2D solver convergence", "residual <= 1e-8 in <= 20 iterations, ratio <= 0.5 after iteration 2, < 10 min per datum");
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, run) in [("rotational", &s.rotational), ("anisotropic", &s.anisotropic)] {
        match run {
            Ok(r) => {
                let res = r.trace.final_residual().unwrap_or(f64::NAN);
                let worst = r.trace.records.iter().filter(|x| x.iteration >= 2).filter_map(|x| x.ratio).fold(0.0, f64::max);
                let secs = r.trace.matrix_seconds + r.trace.solve_seconds;
                ok &= r.profile.converged && res <= 1e-8 && r.trace.records.len() <= 20 && worst <= 0.5 && secs <= 600.0;
                c.metric(&format!("{name}_residual"), res);
                c.metric(&format!("{name}_iterations"), r.trace.records.len() as f64);
                c.metric(&format!("{name}_seconds"), secs);
                parts.push(format!("{name}: {} iterations, residual {res:.2e}, worst late ratio {worst:.3}, {secs:.0}s", r.trace.records.len()));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    c.measured = parts.join("; ");
    c.seconds = s.matrix.seconds + [&s.rotational, &s.anisotropic].iter().filter_map(|r| r.as_ref().ok()).map(|r| r.trace.solve_seconds).sum::<f64>();
    c.passed = ok;
    c
}

/// Log regression and joint decay fit of |x|³(U − a) on the default window.
pub fn profile_2d_reports(r: &Run) -> Result<(LogCoefficientReport, DecayReport)> {
    let am = compute_a(&r.datum)?;
    let w = Window::default();
    let lr = log_coefficient_2d(&r.profile.u, &r.datum, &am, &w)?;
    let a = r.datum.clone();
    let rep = compare_profiles(&r.profile.u, &move |x: &[f64]| a.eval(x), &w, true)?;
    Ok((lr, rep))
}

pub fn profile_2d(s: &Suite2d) -> Result<Check> {
    let start = Instant::now();
    let mut c = Check::new(8, "2D profile asymptotics", "(a) no log term; (b) log term detected, coefficient within 15% of -Q:A, < 15 min");
    let rot = s.rotational.as_ref().map_err(|e| Error::Invalid(format!("rotational run failed: {e}")))?;
    let ani = s.anisotropic.as_ref().map_err(|e| Error::Invalid(format!("anisotropic run failed: {e}")))?;
    let lr_a = log_coefficient_2d(&rot.profile.u, &rot.datum, &compute_a(&rot.datum)?, &Window::default())?;
    // a vanishing fitted coefficient is what "no log factor" means here: the residual is
    // at roundoff level, so the log-model comparison would fit noise
    let rel_a = lr_a.max_fitted / lr_a.scale;
    let ok_a = rel_a <= 1e-3;
    let (lr_b, rep_b) = profile_2d_reports(ani)?;
    let ok_b = rep_b.log_factor && lr_b.worst_mismatch <= 0.15;
    c.metric("rotational_log_coefficient_relative", rel_a);
    c.metric("anisotropic_worst_mismatch", lr_b.worst_mismatch);
    c.metric("anisotropic_exponent", rep_b.exponent);
    c.measured = format!(
        "(a) fitted log coefficient {:.1e} of scale; (b) log detected {}, worst direction mismatch {:.2}%",
        rel_a,
        rep_b.log_factor,
        100.0 * lr_b.worst_mismatch
    );
    let elapsed = start.elapsed().as_secs_f64() + s.matrix.seconds + rot.trace.solve_seconds + ani.trace.solve_seconds;
    let mut c = finish(c, start, None, ok_a && ok_b);
    c.seconds = elapsed;
    c.passed &= elapsed <= 900.0;
    Ok(c)
}

pub fn bi_integral(s: &Suite2d) -> Result<Check> {
    let start = Instant::now();
    let mut c = Check::new(10, "bi-integral identity", "sum within 5 tol of U; eps-halving ratios 2, 4, 8, 16 within 25%");
    let run = s.anisotropic.as_ref().map_err(|e| Error::Invalid(format!("anisotropic run failed: {e}")))?;
    let terms = bi_integral_terms(&s.matrix, &run.profile)?;
    let dev = terms.sum().axpby(1.0, &run.profile.u, -1.0).sup_e01();
    let half = solve_run(DatumKind::Anisotropic2d, run.datum.eps / 2.0, &s.matrix, &s.cfg)?;
    let terms_h = bi_integral_terms(&s.matrix, &half.profile)?;
    let (n1, n2) = (terms.norms(), terms_h.norms());
    let mut ok = dev <= 5.0 * s.cfg.tol;
    let mut ratios = Vec::new();
    for k in 0..4 {
        let ratio = n1[k] / n2[k];
        let expect = 2f64.powi(k as i32 + 1);
        ok &= (ratio / expect - 1.0).abs() <= 0.25;
        c.metric(&format!("ratio_{}", k + 1), ratio);
        ratios.push(format!("{ratio:.3}"));
    }
    c.metric("sum_deviation", dev);
    c.measured = format!("sum deviation {dev:.2e}, ratios [{}]", ratios.join(", "));
    Ok(finish(c, start, None, ok))
}

/// Max elliptic residual over fixed physical nodes on three nested grids.
pub fn elliptic_refinement(eps: f64) -> Result<Vec<(GridConfig, f64)>> {
    let a = Arc::new(make_datum(DatumKind::Anisotropic2d, eps)?);
    let mut cfg = SolverConfig::for_dim(2);
    let base: Vec<(usize, usize)> = [6usize, 8, 10, 12, 14].iter().flat_map(|&i| [0usize, 3, 5].map(|l| (i, l))).collect();
    let mut grid = Arc::new(Grid::new(2, GridConfig { r_min: 0.05, r_max: 400.0, n_radial: 24, n_angular: 16 })?);
    let mut out = Vec::new();
    for level in 0..3 {
        cfg.grid = grid.cfg;
        let m = BilinearMatrix::assemble(grid.clone(), cfg.quad)?;
        let (p, _) = picard_solve_with(&a, &m, &cfg)?;
        let f = 1usize << level;
        let nodes: Vec<(usize, usize)> = base.iter().map(|&(i, l)| (i * f, l * f)).collect();
        let mut rc = ResidualConfig::for_dim(2);
        rc.margin = 4 * f;
        let res = elliptic_residual(&p.u, &rc, Some(&nodes))?;
        out.push((grid.cfg, res.iter().map(|s| s.value).fold(0.0, f64::max)));
        grid = Arc::new(grid.refined()?);
    }
    Ok(out)
}

pub fn elliptic() -> Result<Check> {
    let start = Instant::now();
    let mut c = Check::new(12, "elliptic residual under refinement", "decrease >= 2x per grid doubling");
    let levels = elliptic_refinement(0.05)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for w in levels.windows(2) {
        let f = w[0].1 / w[1].1;
        ok &= f >= 2.0;
        parts.push(format!("{f:.1}x"));
    }
    for (k, (_, v)) in levels.iter().enumerate() {
        c.metric(&format!("level_{k}"), *v);
    }
    c.measured = format!("max residual {} (factors {})", levels.iter().map(|l| format!("{:.2e}", l.1)).collect::<Vec<_>>().join(" -> "), parts.join(", "));
    Ok(finish(c, start, None, ok))
}

// 9: three-dimensional profile

pub struct Profile3d {
    pub run: Run,
    pub b: MomentMatrix,
    pub correction: GridField,
    pub without_b: DecayReport,
    pub with_b: DecayReport,
    pub seconds: f64,
}

pub fn profile_3d_study(eps: f64) -> Result<Profile3d> {
    let start = Instant::now();
    let cfg = SolverConfig::for_dim(3);
    let grid = Arc::new(Grid::new(3, cfg.grid)?);
    let m = BilinearMatrix::assemble(grid.clone(), cfg.quad)?;
    let run = solve_run(DatumKind::Rotational3d, eps, &m, &cfg)?;
    let b = compute_b_matrix(&compute_w(&run.profile, &run.datum)?)?;
    let correction = correction_field(&run.datum, grid, CorrectionFlavor::Filtered, &cfg.quad)?.field;
    let w = Window::default();
    let a = &run.datum;
    let corr = &correction;
    let first = |x: &[f64]| -> Result<Vec<f64>> {
        let (v, l, p) = (a.eval(x)?, a.laplacian(x)?, corr.interpolate(x));
        Ok((0..3).map(|j| v[j] + l[j] - p[j]).collect())
    };
    let without_b = compare_profiles(&run.profile.u, &first, &w, false)?;
    let bm = &b;
    let second = |x: &[f64]| -> Result<Vec<f64>> {
        let mut v = first(x)?;
        let r7 = norm2(x).sqrt().powi(7);
        for (o, q) in v.iter_mut().zip(q_contract(x, bm)?) {
            *o -= q / r7;
        }
        Ok(v)
    };
    let with_b = compare_profiles(&run.profile.u, &second, &w, false)?;
    Ok(Profile3d { run, b, correction, without_b, with_b, seconds: start.elapsed().as_secs_f64() })
}

/// rms of |x|^k · residual over the samples.
fn weighted_rms(s: &[(f64, f64)], k: i32) -> f64 {
    (s.iter().map(|p| (p.0.powi(k) * p.1).powi(2)).sum::<f64>() / s.len().max(1) as f64).sqrt()
}

pub fn profile_3d(study: &Profile3d) -> Check {
    let mut c = Check::new(9, "3D profile asymptotics", "slope -4.0 +- 0.5; Q:B term reduces the |x|^4-weighted residual >= 30%; <= 60 min");
    let slope = study.without_b.exponent;
    // measured in the |x|⁴-weighted norm the leading term lives in; unweighted, the inner edge
    // of the window (where the |x|⁻⁵ remainder is still comparable) dominates
    let reduction = 1.0 - weighted_rms(&study.with_b.samples, 4) / weighted_rms(&study.without_b.samples, 4);
    let unweighted = 1.0 - weighted_rms(&study.with_b.samples, 0) / weighted_rms(&study.without_b.samples, 0);
    c.metric("slope", slope);
    c.metric("reduction", reduction);
    c.metric("reduction_unweighted", unweighted);
    c.measured = format!("slope {slope:.3}, reduction {:.1}% (|x|^4-weighted; unweighted {:.1}%)", 100.0 * reduction, 100.0 * unweighted);
    c.seconds = study.seconds;
    c.passed = (slope + 4.0).abs() <= 0.5 && reduction >= 0.3 && study.seconds <= 3600.0;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        for c in [cancellations().unwrap(), sphere_moments().unwrap(), kernel_decomposition().unwrap(), kernel_invariants().unwrap()] {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn check_line_format() {
        let mut c = Check::new(4, "x", "y");
        c.measured = "m".into();
        assert!(c.line().starts_with("FAIL criterion  4 x: m (target y)"));
        let c = finish(Check::new(1, "a", "b"), Instant::now(), Some(0.0), true);
        assert!(c.seconds >= 0.0);
        let e = Check::errored(2, "n", "t", &Error::Invalid("boom".into()));
        assert!(!e.passed && e.measured.contains("boom"));
    }
}
