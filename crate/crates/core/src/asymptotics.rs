//! Far-field predictions for the profile and decay fits of computed residuals.

use crate::bilinear::{MomentMatrix, QuadParams};
use crate::error::{Error, Result};
use crate::fields::{GridField, HomogeneousField};
use crate::kernels::{norm2, OseenTensors};
use crate::leray::filtered_leray_term;
use serde::{Deserialize, Serialize};
use std::f64::consts::E;

/// Q(x):M, the contraction Σ_{h,k} Q_{j;h,k}(x) M_{h,k}.
pub fn q_contract(x: &[f64], m: &MomentMatrix) -> Result<Vec<f64>> {
    let d = x.len();
    if m.d != d {
        return Err(Error::Domain("matrix and point dimensions differ".into()));
    }
    let q = OseenTensors::new(d)?.q_poly(x);
    Ok((0..d).map(|j| (0..d * d).map(|hk| q[j * d * d + hk] * m.entries[hk]).sum()).collect())
}

/// a(x) − log|x|·(Q(x):A)/|x|⁶.
pub fn predict_2d(a: &HomogeneousField, am: &MomentMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.d != 2 {
        return Err(Error::Precondition("2D prediction needs d = 2".into()));
    }
    let r2 = norm2(x);
    let c = 0.5 * r2.ln() / r2.powi(3);
    let qa = q_contract(x, am)?;
    Ok(a.eval(x)?.iter().zip(&qa).map(|(v, q)| v - c * q).collect())
}

/// (∫_{S¹} a⊗a)(t log(|x|/√t) + t/2).
pub fn log_moment_integral(a: &HomogeneousField, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if a.d != 2 {
        return Err(Error::Precondition("log moment integral needs d = 2".into()));
    }
    let r = norm2(x).sqrt();
    if !(t > 0.0) || r < E * t.sqrt() {
        return Err(Error::OutOfDomain(format!("need |x| ≥ e√t, got |x| = {r}, t = {t}")));
    }
    let am = crate::bilinear::compute_a(a)?;
    let f = t * (r / t.sqrt()).ln() + 0.5 * t;
    Ok(am.entries.iter().map(|v| v * f).collect())
}

/// a + Δa − e^{Δ}P∇·(a⊗a) − (Q(x):B)/|x|⁷.
pub fn predict_3d(a: &HomogeneousField, bm: &MomentMatrix, x: &[f64], q: &QuadParams) -> Result<Vec<f64>> {
    if a.d != 3 {
        return Err(Error::Precondition("3D prediction needs d = 3".into()));
    }
    let base = predict_highd_unchecked(a, x, q)?;
    let r7 = norm2(x).sqrt().powi(7);
    let qb = q_contract(x, bm)?;
    Ok(base.iter().zip(&qb).map(|(v, c)| v - c / r7).collect())
}

/// a + Δa − e^{Δ}P∇·(a⊗a) for d ≥ 4.
pub fn predict_highd(a: &HomogeneousField, x: &[f64], q: &QuadParams) -> Result<Vec<f64>> {
    if a.d < 4 {
        return Err(Error::Precondition("high-dimensional prediction needs d ≥ 4".into()));
    }
    predict_highd_unchecked(a, x, q)
}

fn predict_highd_unchecked(a: &HomogeneousField, x: &[f64], q: &QuadParams) -> Result<Vec<f64>> {
    let v = a.eval(x)?;
    let l = a.laplacian(x)?;
    let p = filtered_leray_term(a, x, q)?;
    Ok((0..a.d).map(|j| v[j] + l[j] - p[j]).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionFit {
    /// Unit direction (meridian representative in 3D).
    pub direction: Vec<f64>,
    pub exponent: f64,
    pub log_factor: bool,
    /// For the 2D log regression: fitted and predicted coefficients of log|x| in |x|³(U − a).
    pub log_coefficient: Option<Vec<f64>>,
    pub predicted_coefficient: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayReport {
    pub window: (f64, f64),
    pub exponent: f64,
    pub log_factor: bool,
    /// Coefficient of log log|x| when the log model is preferred.
    pub log_power: f64,
    pub max_rel_deviation: f64,
    pub directions: Vec<DirectionFit>,
    /// (|x|, |residual|) samples the fit used.
    pub samples: Vec<(f64, f64)>,
}

fn lstsq(rows: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let p = rows[0].len();
    let mut ata = vec![0.0; p * p];
    let mut aty = vec![0.0; p];
    for (r, &v) in rows.iter().zip(y) {
        for i in 0..p {
            aty[i] += r[i] * v;
            for j in 0..p {
                ata[i * p + j] += r[i] * r[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    let mut m = ata;
    let mut b = aty;
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| m[i * p + c].abs().partial_cmp(&m[j * p + c].abs()).unwrap()).unwrap();
        if m[piv * p + c].abs() < 1e-300 {
            return Err(Error::Invalid("degenerate samples for least squares".into()));
        }
        for k in 0..p {
            m.swap(c * p + k, piv * p + k);
        }
        b.swap(c, piv);
        for i in (c + 1)..p {
            let f = m[i * p + c] / m[c * p + c];
            for k in c..p {
                m[i * p + k] -= f * m[c * p + k];
            }
            b[i] -= f * b[c];
        }
    }
    let mut x = vec![0.0; p];
    for c in (0..p).rev() {
        let s: f64 = ((c + 1)..p).map(|k| m[c * p + k] * x[k]).sum();
        x[c] = (b[c] - s) / m[c * p + c];
    }
    let rss = rows.iter().zip(y).map(|(r, v)| (v - r.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()).powi(2)).sum();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("degenerate samples for least squares".into()));
    }
    Ok((x, rss))
}

/// Straight-line fit y = c + m·x; returns (m, c, R²).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Invalid("need at least 3 paired samples".into()));
    }
    let rows: Vec<Vec<f64>> = xs.iter().map(|x| vec![1.0, *x]).collect();
    let (c, rss) = lstsq(&rows, ys)?;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let tss: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    Ok((c[1], c[0], if tss > 0.0 { 1.0 - rss / tss } else { 1.0 }))
}

/// Least-squares fit of log|v| = c + p log r, and, when `with_log`, of the model with an extra
/// q·log log r term; the log model is preferred when its AIC is lower by more than 2.
pub fn fit_decay(samples: &[(f64, f64)], with_log: bool) -> Result<DecayReport> {
    if samples.len() < 8 {
        return Err(Error::Invalid(format!("need at least 8 samples, got {}", samples.len())));
    }
    let (rmin, rmax) = samples.iter().fold((f64::INFINITY, 0.0f64), |(a, b), s| (a.min(s.0), b.max(s.0)));
    if !(rmin > 0.0) || rmax < 10.0 * rmin {
        return Err(Error::Invalid("samples must span at least one decade of positive radii".into()));
    }
    if samples.iter().any(|s| !(s.1.abs() > 0.0) || !s.1.is_finite()) {
        return Err(Error::Invalid("samples contain zero or non-finite values".into()));
    }
    if with_log && rmin <= 1.0 {
        return Err(Error::Invalid("log model needs radii above 1".into()));
    }
    let y: Vec<f64> = samples.iter().map(|s| s.1.abs().ln()).collect();
    let rows1: Vec<Vec<f64>> = samples.iter().map(|s| vec![1.0, s.0.ln()]).collect();
    let (c1, rss1) = lstsq(&rows1, &y)?;
    let n = samples.len() as f64;
    let (mut exponent, mut log_factor, mut log_power) = (c1[1], false, 0.0);
    let mut pred: Vec<f64> = rows1.iter().map(|r| c1[0] + c1[1] * r[1]).collect();
    if with_log {
        let rows2: Vec<Vec<f64>> = samples.iter().map(|s| vec![1.0, s.0.ln(), s.0.ln().ln()]).collect();
        let (c2, rss2) = lstsq(&rows2, &y)?;
        let floor = 1e-24 * n;
        let gain = if rss1 <= floor { 0.0 } else { n * (rss1 / rss2.max(floor)).ln() };
        if gain > 2.0 {
            log_factor = true;
            exponent = c2[1];
            log_power = c2[2];
            pred = rows2.iter().map(|r| c2[0] + c2[1] * r[1] + c2[2] * r[2]).collect();
        }
    }
    let max_rel_deviation = y.iter().zip(&pred).map(|(a, b)| ((a - b).exp() - 1.0).abs()).fold(0.0, f64::max);
    Ok(DecayReport { window: (rmin, rmax), exponent, log_factor, log_power, max_rel_deviation, directions: Vec::new(), samples: samples.to_vec() })
}

/// Comparison window and angular sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub r1: f64,
    pub r2: f64,
    /// Directions sampled (evenly spread over the grid's angular nodes).
    pub directions: usize,
}

impl Default for Window {
    fn default() -> Self {
        Window { r1: 20.0, r2: 200.0, directions: 16 }
    }
}

/// Grid node indices (radial, angular) inside the window.
pub fn window_nodes(u: &GridField, w: &Window) -> Result<(Vec<usize>, Vec<usize>)> {
    let g = &u.grid;
    if !(w.r1 < w.r2) || w.r1 < g.cfg.r_min || w.r2 > g.cfg.r_max {
        return Err(Error::Domain(format!("window [{}, {}] not inside the grid", w.r1, w.r2)));
    }
    // nodes inside the window plus the bracketing node on each side
    let lo = (0..g.n_r()).rev().find(|&i| g.radii[i] <= w.r1 * (1.0 + 1e-12)).unwrap_or(0);
    let hi = (0..g.n_r()).find(|&i| g.radii[i] >= w.r2 * (1.0 - 1e-12)).unwrap_or(g.n_r() - 1);
    let radial: Vec<usize> = (lo..=hi).collect();
    let nl = g.n_ang();
    let nd = w.directions.clamp(1, nl);
    let mut ang: Vec<usize> = (0..nd).map(|k| k * nl / nd).collect();
    ang.dedup();
    Ok((radial, ang))
}

/// Residual U − prediction at the window nodes, fitted direction by direction and jointly on
/// the maximum over directions.
pub fn compare_profiles(u: &GridField, prediction: &(dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync), w: &Window, with_log: bool) -> Result<DecayReport> {
    let (radial, ang) = window_nodes(u, w)?;
    let g = &u.grid;
    let d = g.d;
    let mut per_dir = Vec::new();
    let mut sup = vec![0.0f64; radial.len()];
    for &l in &ang {
        let mut s = Vec::with_capacity(radial.len());
        for (k, &i) in radial.iter().enumerate() {
            let x = g.node(i, l);
            let p = prediction(&x)?;
            let v = u.at(i, l);
            let e = (0..d).map(|j| (v[j] - p[j]).powi(2)).sum::<f64>().sqrt();
            sup[k] = sup[k].max(e);
            if e > 0.0 {
                s.push((g.radii[i], e));
            }
        }
        if 2 * s.len() < radial.len() {
            return Err(Error::Invalid(format!("U matches the prediction exactly at most window radii along direction {l}; nothing to fit")));
        }
        let rep = fit_decay(&s, with_log)?;
        per_dir.push(DirectionFit { direction: g.direction(l), exponent: rep.exponent, log_factor: rep.log_factor, log_coefficient: None, predicted_coefficient: None });
    }
    let joint: Vec<(f64, f64)> = radial.iter().zip(&sup).map(|(&i, &e)| (g.radii[i], e)).collect();
    let mut rep = fit_decay(&joint, with_log)?;
    rep.directions = per_dir;
    Ok(rep)
}

/// 2D log regression: per direction, fit |x|³(U − a)_j = c₀ + c₁ log|x| and compare c₁ with the
/// predicted −Q(x̂):A.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogCoefficientReport {
    pub directions: Vec<DirectionFit>,
    /// Worst ‖c₁ − c₁*‖/‖c₁*‖ over directions where the prediction is at least a quarter of
    /// its maximum; zero when the prediction vanishes.
    pub worst_mismatch: f64,
    /// max ‖c₁‖ over directions.
    pub max_fitted: f64,
    /// ‖A‖·max_ω‖Q(ω)‖, the natural size of the coefficient.
    pub scale: f64,
}

pub fn log_coefficient_2d(u: &GridField, a: &HomogeneousField, am: &MomentMatrix, w: &Window) -> Result<LogCoefficientReport> {
    if u.grid.d != 2 || a.d != 2 {
        return Err(Error::Precondition("log regression needs d = 2".into()));
    }
    let (radial, ang) = window_nodes(u, w)?;
    if radial.len() < 8 {
        return Err(Error::Invalid("too few radial nodes in the window".into()));
    }
    let g = &u.grid;
    let mut fits = Vec::new();
    let mut pmax = 0.0f64;
    let mut qmax = 0.0f64;
    let ot = OseenTensors::new(2)?;
    for &l in &ang {
        pmax = pmax.max(norm2(&q_contract(&g.direction(l), am)?).sqrt());
        qmax = qmax.max(norm2(&ot.q_poly(&g.direction(l))).sqrt());
    }
    let scale = am.norm() * qmax;
    let significant = pmax > 1e-10 * scale;
    let mut worst = 0.0f64;
    let mut max_fitted = 0.0f64;
    for &l in &ang {
        let dir = g.direction(l);
        // |x|³(U − a) = c₀ + c₁ log|x| + c₂ |x|⁻² + …; the last term absorbs the heat-flow remainder
        let r0 = g.radii[radial[0]];
        let rows: Vec<Vec<f64>> = radial.iter().map(|&i| vec![1.0, g.radii[i].ln(), (r0 / g.radii[i]).powi(2)]).collect();
        let mut c1 = vec![0.0; 2];
        for (j, c) in c1.iter_mut().enumerate() {
            let y: Vec<f64> = radial
                .iter()
                .map(|&i| {
                    let x = g.node(i, l);
                    let av = a.eval_unchecked(&x);
                    g.radii[i].powi(3) * (u.at(i, l)[j] - av[j])
                })
                .collect();
            *c = lstsq(&rows, &y)?.0[1];
        }
        let pred: Vec<f64> = q_contract(&dir, am)?.into_iter().map(|v| -v).collect();
        let pn = norm2(&pred).sqrt();
        max_fitted = max_fitted.max(norm2(&c1).sqrt());
        if significant && pn > 0.25 * pmax {
            let e = norm2(&[c1[0] - pred[0], c1[1] - pred[1]]).sqrt() / pn;
            worst = worst.max(e);
        }
        fits.push(DirectionFit { direction: dir, exponent: -3.0, log_factor: true, log_coefficient: Some(c1), predicted_coefficient: Some(pred) });
    }
    Ok(LogCoefficientReport { directions: fits, worst_mismatch: worst, max_fitted, scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilinear::compute_a;
    use crate::fields::{make_datum, DatumKind};
    use rand::{Rng, SeedableRng};

    #[test]
    fn exact_power_law() {
        let s: Vec<(f64, f64)> = (0..12).map(|k| 20.0 * 10f64.powf(k as f64 / 11.0)).map(|r| (r, 3.0 * r.powi(-3))).collect();
        let rep = fit_decay(&s, true).unwrap();
        assert!((rep.exponent + 3.0).abs() < 1e-10);
        assert!(!rep.log_factor);
    }

    #[test]
    fn log_corrected_power_law_is_detected() {
        let s: Vec<(f64, f64)> = (0..12).map(|k| 20.0 * 10f64.powf(k as f64 / 11.0)).map(|r| (r, r.powi(-3) * r.ln())).collect();
        let rep = fit_decay(&s, true).unwrap();
        assert!(rep.log_factor);
        assert!((rep.exponent + 3.0).abs() < 1e-6, "{}", rep.exponent);
    }

    #[test]
    fn noisy_power_law() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let s: Vec<(f64, f64)> = (0..24).map(|k| 20.0 * 10f64.powf(k as f64 / 23.0)).map(|r| (r, r.powi(-3) * (1.0 + 0.01 * rng.gen_range(-1.0..1.0)))).collect();
        let rep = fit_decay(&s, false).unwrap();
        assert!((rep.exponent + 3.0).abs() < 0.05);
    }

    #[test]
    fn degenerate_samples_are_rejected() {
        assert!(fit_decay(&[(1.0, 1.0); 8], false).is_err());
        assert!(fit_decay(&[(1.0, 1.0), (100.0, 1.0)], false).is_err());
    }

    #[test]
    fn rotational_2d_has_no_log_correction() {
        let a = make_datum(DatumKind::Rotational2d, 0.05).unwrap();
        let am = compute_a(&a).unwrap();
        let x = [30.0, -12.0];
        let p = predict_2d(&a, &am, &x).unwrap();
        let v = a.eval(&x).unwrap();
        assert!((p[0] - v[0]).abs() < 1e-18 && (p[1] - v[1]).abs() < 1e-18);
        let b = make_datum(DatumKind::Anisotropic2d, 0.05).unwrap();
        let bm = compute_a(&b).unwrap();
        assert!(norm2(&q_contract(&[0.6, 0.8], &bm).unwrap()) > 0.0);
    }

    #[test]
    fn log_moment_formula() {
        let a = make_datum(DatumKind::Anisotropic2d, 0.05).unwrap();
        let am = compute_a(&a).unwrap();
        let v = log_moment_integral(&a, &[E, 0.0], 1.0).unwrap();
        for k in 0..4 {
            assert!((v[k] - 1.5 * am.entries[k]).abs() < 1e-15);
        }
        let lam: f64 = 2.7;
        let v2 = log_moment_integral(&a, &[E * lam.sqrt() * 1.3, 0.0], lam).unwrap();
        let v1 = log_moment_integral(&a, &[E * 1.3, 0.0], 1.0).unwrap();
        for k in 0..4 {
            assert!((v2[k] - lam * v1[k]).abs() < 1e-14);
        }
        assert!(log_moment_integral(&a, &[1.0, 0.0], 1.0).is_err());
    }
}
