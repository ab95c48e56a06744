//! Far-field expansion of convolutions with a Gaussian, heat flow of degree −1 data, and a
//! brute-force adaptive convolution oracle.

use crate::error::{Error, Result};
use crate::fields::{Grid, GridField, HomogeneousField};
use crate::kernels::norm2;
use crate::quad::adaptive_vec;
use crate::special::{gamma, odd_double_factorial};
use rayon::prelude::*;
use std::f64::consts::PI;
use std::sync::Arc;

/// Below this |x|/√t the heat flow is computed by the oracle, above it by the expansion.
pub const BRANCH_RADIUS: f64 = 8.0;
/// Number of terms Σ_{k<K} t^k Δ^k a / k! in the heat expansion (order m = 2K).
pub const HEAT_TERMS: usize = 4;
/// Default absolute tolerance of the oracle.
pub const ORACLE_TOL: f64 = 1e-11;
/// Calibrated constant C in |f*g − expansion| ≤ C |x|^{−m−θ} ‖f‖ ∫|y|^m g.
pub const CONV_REMAINDER_C: f64 = 0.5;

/// Moments ∫ y^γ w(y) dy for all multi-indices |γ| ≤ m − 1, plus ∫|y|^m w.
#[derive(Debug, Clone)]
pub struct MomentTable {
    pub d: usize,
    pub m: usize,
    pub weight: String,
    pub entries: Vec<(Vec<usize>, f64)>,
    pub abs_moment_m: f64,
}

impl MomentTable {
    pub fn get(&self, gamma: &[usize]) -> Option<f64> {
        self.entries.iter().find(|(g, _)| g == gamma).map(|e| e.1)
    }
}

/// All multi-indices in d variables with |γ| ≤ n, by increasing order.
pub fn multi_indices(d: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![];
    for total in 0..=n {
        let mut cur = vec![0; d];
        fill_indices(&mut cur, 0, total, &mut out);
    }
    out
}

fn fill_indices(cur: &mut Vec<usize>, pos: usize, left: usize, out: &mut Vec<Vec<usize>>) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for k in (0..=left).rev() {
        cur[pos] = k;
        fill_indices(cur, pos + 1, left - k, out);
    }
    cur[pos] = 0;
}

/// ∫ y^n g_t(y) dy in one variable.
pub fn gaussian_moment_1d(t: f64, n: usize) -> f64 {
    if n % 2 == 1 {
        0.0
    } else {
        let b = n / 2;
        (2.0 * t).powi(b as i32) * odd_double_factorial(b as u32)
    }
}

pub fn gaussian_moments(t: f64, m: usize, d: usize) -> Result<MomentTable> {
    if !(t > 0.0) {
        return Err(Error::Domain("t must be positive".into()));
    }
    if m == 0 {
        return Err(Error::Domain("expansion order m must be at least 1".into()));
    }
    let entries = multi_indices(d, m - 1)
        .into_iter()
        .map(|g| {
            let v = g.iter().map(|&n| gaussian_moment_1d(t, n)).product();
            (g, v)
        })
        .collect();
    // ∫|y|^m g_t = (4t)^{m/2} Γ((d+m)/2)/Γ(d/2)
    let dm = d as f64;
    let abs_moment_m = (4.0 * t).powf(m as f64 / 2.0) * gamma((dm + m as f64) / 2.0) / gamma(dm / 2.0);
    Ok(MomentTable { d, m, weight: format!("gaussian(t={t})"), entries, abs_moment_m })
}

/// A field whose partial derivatives can be evaluated pointwise.
pub trait SmoothField: Sync {
    fn dim(&self) -> usize;
    fn ncomp(&self) -> usize;
    /// Decay class: |∂^α f(x)| ≲ |x|^{−θ−|α|}.
    fn theta(&self) -> f64;
    /// ∂^α f(x), α given as exponents per coordinate.
    fn derivative(&self, x: &[f64], alpha: &[usize]) -> Vec<f64>;

    fn value(&self, x: &[f64]) -> Vec<f64> {
        self.derivative(x, &vec![0; self.dim()])
    }

    /// Sampled Ė^m_θ-type seminorm: max over |α| = m of |x|^{θ+m}|∂^α f(x)|.
    fn seminorm(&self, m: usize) -> f64 {
        let d = self.dim();
        let alphas: Vec<Vec<usize>> = multi_indices(d, m).into_iter().filter(|a| a.iter().sum::<usize>() == m).collect();
        let mut best = 0.0f64;
        for k in 0..36 {
            let r = 0.1 * 1.3f64.powi(k);
            for dir in 0..8 {
                let th = PI * dir as f64 / 8.0 + 0.1;
                let mut x = vec![0.0; d];
                x[0] = r * th.cos();
                x[1] = r * th.sin();
                for a in &alphas {
                    let v = norm2(&self.derivative(&x, a)).sqrt();
                    best = best.max(v * r.powf(self.theta() + m as f64));
                }
            }
        }
        best
    }
}

/// f(x) = (1 + |x|²)^{−θ/2}, with exact derivatives up to order 3.
#[derive(Debug, Clone, Copy)]
pub struct RadialTest {
    pub d: usize,
    pub theta: f64,
}

impl SmoothField for RadialTest {
    fn dim(&self) -> usize {
        self.d
    }
    fn ncomp(&self) -> usize {
        1
    }
    fn theta(&self) -> f64 {
        self.theta
    }
    fn derivative(&self, x: &[f64], alpha: &[usize]) -> Vec<f64> {
        // f = G(q), q = |x|²; G^{(n)}(q) = (−θ/2)(−θ/2−1)…(1+q)^{−θ/2−n}
        let q = norm2(x);
        let e = -self.theta / 2.0;
        let g = |n: i32| -> f64 { (0..n).map(|k| e - k as f64).product::<f64>() * (1.0 + q).powf(e - n as f64) };
        let idx: Vec<usize> = alpha.iter().enumerate().flat_map(|(i, &n)| std::iter::repeat(i).take(n)).collect();
        let dl = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        let v = match idx.len() {
            0 => g(0),
            1 => 2.0 * g(1) * x[idx[0]],
            2 => {
                let (i, j) = (idx[0], idx[1]);
                4.0 * g(2) * x[i] * x[j] + 2.0 * g(1) * dl(i, j)
            }
            3 => {
                let (i, j, k) = (idx[0], idx[1], idx[2]);
                8.0 * g(3) * x[i] * x[j] * x[k] + 4.0 * g(2) * (dl(i, j) * x[k] + dl(i, k) * x[j] + dl(j, k) * x[i])
            }
            _ => return fd_derivative(&|y: &[f64]| vec![(1.0 + norm2(y)).powf(e)], x, alpha, 1e-2),
        };
        vec![v]
    }
}

/// Any closure, differentiated by nested fourth-order central differences.
pub struct FdField<F: Fn(&[f64]) -> Vec<f64> + Sync> {
    pub d: usize,
    pub ncomp: usize,
    pub theta: f64,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> SmoothField for FdField<F> {
    fn dim(&self) -> usize {
        self.d
    }
    fn ncomp(&self) -> usize {
        self.ncomp
    }
    fn theta(&self) -> f64 {
        self.theta
    }
    fn derivative(&self, x: &[f64], alpha: &[usize]) -> Vec<f64> {
        fd_derivative(&self.f, x, alpha, 1e-2)
    }
}

impl SmoothField for HomogeneousField {
    fn dim(&self) -> usize {
        self.d
    }
    fn ncomp(&self) -> usize {
        self.d
    }
    fn theta(&self) -> f64 {
        1.0
    }
    fn derivative(&self, x: &[f64], alpha: &[usize]) -> Vec<f64> {
        fd_derivative(&|y: &[f64]| self.eval_unchecked(y), x, alpha, 1e-2)
    }
}

/// Nested central differences with step rel·max(|x|, 1).
pub fn fd_derivative(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], alpha: &[usize], rel: f64) -> Vec<f64> {
    let dirs: Vec<usize> = alpha.iter().enumerate().flat_map(|(i, &n)| std::iter::repeat(i).take(n)).collect();
    let h = rel * norm2(x).sqrt().max(1.0);
    fn rec(f: &dyn Fn(&[f64]) -> Vec<f64>, y: &mut Vec<f64>, dirs: &[usize], h: f64) -> Vec<f64> {
        let Some((&i, rest)) = dirs.split_first() else { return f(y) };
        let y0 = y[i];
        let mut acc: Option<Vec<f64>> = None;
        for (k, c) in [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)] {
            y[i] = y0 + k * h;
            let v = rec(f, y, rest, h);
            match acc.as_mut() {
                None => acc = Some(v.into_iter().map(|z| c * z).collect()),
                Some(a) => a.iter_mut().zip(v).for_each(|(s, z)| *s += c * z),
            }
        }
        y[i] = y0;
        acc.unwrap().into_iter().map(|v| v / (12.0 * h)).collect()
    }
    rec(f, &mut x.to_vec(), &dirs, h)
}

#[derive(Debug, Clone)]
pub struct Expansion {
    pub value: Vec<f64>,
    pub remainder_bound: f64,
}

/// Σ_{|γ|≤m−1} (−1)^{|γ|}/γ! · moment(γ) · ∂^γ f(x) and a bound on what is left over.
pub fn conv_expansion(f: &dyn SmoothField, moments: &MomentTable, x: &[f64], m: usize) -> Result<Expansion> {
    let d = f.dim();
    if f.theta() >= d as f64 || f.theta() < 0.0 {
        return Err(Error::Precondition(format!("decay class θ = {} outside [0, d)", f.theta())));
    }
    let r = norm2(x).sqrt();
    if r == 0.0 {
        return Err(Error::Singular("expansion at x = 0".into()));
    }
    if moments.d != d || moments.m < m || m == 0 {
        return Err(Error::Precondition("moment table does not cover the requested order".into()));
    }
    let mut value = vec![0.0; f.ncomp()];
    for (g, mu) in &moments.entries {
        let order: usize = g.iter().sum();
        if order >= m || *mu == 0.0 {
            continue;
        }
        let fact: f64 = g.iter().map(|&n| (1..=n).product::<usize>() as f64).product();
        let sign = if order % 2 == 1 { -1.0 } else { 1.0 };
        let dv = f.derivative(x, g);
        for (v, dvc) in value.iter_mut().zip(dv) {
            *v += sign * mu / fact * dvc;
        }
    }
    let remainder_bound = CONV_REMAINDER_C * r.powf(-(m as f64) - f.theta()) * f.seminorm(m) * moments.abs_moment_m;
    Ok(Expansion { value, remainder_bound })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decay {
    /// Bounded by a multiple of g_t.
    Gaussian { t: f64 },
    /// |f(y)| ≲ |y|^{−p} at infinity.
    Power { p: f64 },
}

/// One factor of a convolution: a function, its decay class and its (integrable) singular points.
pub struct ConvFactor<'a> {
    pub f: Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a>,
    pub ncomp: usize,
    pub decay: Decay,
    pub singular: Vec<Vec<f64>>,
}

impl<'a> ConvFactor<'a> {
    pub fn new(ncomp: usize, decay: Decay, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a) -> Self {
        ConvFactor { f: Box::new(f), ncomp, decay, singular: vec![] }
    }

    pub fn singular_at(mut self, p: Vec<f64>) -> Self {
        self.singular.push(p);
        self
    }

    pub fn gaussian(d: usize, t: f64) -> ConvFactor<'static> {
        let c = (4.0 * PI * t).powf(-(d as f64) / 2.0);
        ConvFactor::new(1, Decay::Gaussian { t }, move |y: &[f64]| vec![c * (-norm2(y) / (4.0 * t)).exp()])
    }

    /// A degree −1 datum, singular at the origin.
    pub fn datum(a: &'a HomogeneousField) -> ConvFactor<'a> {
        ConvFactor::new(a.d, Decay::Power { p: 1.0 }, move |y: &[f64]| {
            if norm2(y) == 0.0 {
                vec![0.0; a.d]
            } else {
                a.eval_unchecked(y)
            }
        })
        .singular_at(vec![0.0; a.d])
    }
}

/// (f * g)(x) = ∫ f(y) g(x − y) dy by nested adaptive Gauss–Kronrod in polar coordinates.
pub fn conv_oracle(d: usize, f: &ConvFactor, g: &ConvFactor, x: &[f64]) -> Result<Vec<f64>> {
    conv_oracle_tol(d, f, g, x, ORACLE_TOL)
}

pub fn conv_oracle_tol(d: usize, f: &ConvFactor, g: &ConvFactor, x: &[f64], abs_tol: f64) -> Result<Vec<f64>> {
    if x.len() != d {
        return Err(Error::Domain("dimension mismatch".into()));
    }
    if d != 2 && d != 3 {
        return Err(Error::Unsupported(format!("convolution oracle in d = {d}")));
    }
    let ncomp = match (f.ncomp, g.ncomp) {
        (a, b) if a == b => a,
        (1, b) => b,
        (a, 1) => a,
        (a, b) => return Err(Error::Domain(format!("incompatible component counts {a} and {b}"))),
    };
    let xn = norm2(x).sqrt();
    // Gaussian peak in y and its width
    let peak: Option<(Vec<f64>, f64)> = match (f.decay, g.decay) {
        (Decay::Gaussian { t: tf }, Decay::Gaussian { t: tg }) => {
            let w = tf / (tf + tg);
            Some((x.iter().map(|v| v * w).collect(), (tf * tg / (tf + tg)).sqrt()))
        }
        (_, Decay::Gaussian { t }) => Some((x.to_vec(), t.sqrt())),
        (Decay::Gaussian { t }, _) => Some((vec![0.0; d], t.sqrt())),
        (Decay::Power { p: pf }, Decay::Power { p: pg }) => {
            if pf + pg <= d as f64 {
                return Err(Error::Domain(format!("decay exponents {pf} + {pg} not integrable in d = {d}")));
            }
            None
        }
    };
    let mut sing: Vec<Vec<f64>> = f.singular.clone();
    for s in &g.singular {
        sing.push(x.iter().zip(s).map(|(a, b)| a - b).collect());
    }
    let unit = |v: &[f64]| -> Option<Vec<f64>> {
        let n = norm2(v).sqrt();
        (n > 1e-300).then(|| v.iter().map(|c| c / n).collect())
    };
    let default_axis = {
        let mut e = vec![0.0; d];
        e[d - 1] = 1.0;
        e
    };
    let centre: Vec<f64>;
    let axis: Vec<f64>;
    let mut breaks: Vec<f64>;
    let mut core: f64;
    let mut tail = false;
    let rel: Vec<(f64, Vec<f64>)>;
    match (&peak, sing.len()) {
        (Some((p, sigma)), 1) => {
            // polar around the singular point; the Gaussian lives in an annulus
            centre = sing[0].clone();
            let v: Vec<f64> = p.iter().zip(&centre).map(|(a, b)| a - b).collect();
            let dist = norm2(&v).sqrt();
            axis = unit(&v).unwrap_or(default_axis);
            let lo = (dist - 12.0 * sigma).max(0.0);
            core = dist + 12.0 * sigma;
            breaks = vec![lo, dist, core];
            rel = vec![];
        }
        _ => {
            let (c, width) = match &peak {
                Some((p, sigma)) => (p.clone(), 12.0 * sigma),
                None => {
                    tail = true;
                    (x.to_vec(), 2.0 * xn + 2.0)
                }
            };
            centre = c;
            core = width;
            rel = sing
                .iter()
                .map(|s| {
                    let v: Vec<f64> = s.iter().zip(&centre).map(|(a, b)| a - b).collect();
                    (norm2(&v).sqrt(), v)
                })
                .collect();
            if tail {
                for (dist, _) in &rel {
                    core = core.max(2.0 * dist + 1.0);
                }
            }
            // angular frame aligned with the nearest singular point
            axis = rel
                .iter()
                .filter(|(dist, _)| *dist > 1e-300)
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .and_then(|(_, v)| unit(v))
                .unwrap_or(default_axis);
            breaks = vec![0.0, core];
            for (dist, _) in &rel {
                if *dist > 0.0 && *dist < core {
                    breaks.push(*dist);
                }
            }
        }
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup();
    let frame = crate::fields::tangent_frame(&axis);
    let integrand = |y: &[f64], out: &mut [f64]| {
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let fv = (f.f)(y);
        let gv = (g.f)(&xy);
        for c in 0..ncomp {
            let a = if f.ncomp == 1 { fv[0] } else { fv[c] };
            let b = if g.ncomp == 1 { gv[0] } else { gv[c] };
            out[c] = a * b;
        }
    };
    let inner_tol = abs_tol * 1e-2;
    let shell = |rho: f64, out: &mut [f64]| {
        let jac = rho.powi(d as i32 - 1);
        if jac == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let scale = inner_tol / (jac * core.max(1.0));
        let res = if d == 2 {
            let e0 = &axis;
            let e1 = &frame[0];
            let mut breaks = vec![0.0, 2.0 * PI];
            for (_, v) in &rel {
                let ang = (v[0] * e1[0] + v[1] * e1[1]).atan2(v[0] * e0[0] + v[1] * e0[1]).rem_euclid(2.0 * PI);
                if ang > 1e-12 && ang < 2.0 * PI - 1e-12 {
                    breaks.push(ang);
                }
            }
            breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut y = vec![0.0; 2];
            adaptive_vec(
                |th: f64, o: &mut [f64]| {
                    let (s, c) = th.sin_cos();
                    for i in 0..2 {
                        y[i] = centre[i] + rho * (c * e0[i] + s * e1[i]);
                    }
                    integrand(&y, o);
                },
                ncomp,
                &breaks,
                scale,
                1e-12,
            )
            .0
        } else {
            let naz = if rel.len() > 1 { 48 } else { 16 };
            let (e0, e1, e2) = (&axis, &frame[0], &frame[1]);
            let mut y = vec![0.0; 3];
            let mut tmp = vec![0.0; ncomp];
            adaptive_vec(
                |ph: f64, o: &mut [f64]| {
                    let (sp, cp) = ph.sin_cos();
                    o.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..naz {
                        let ps = 2.0 * PI * (k as f64 + 0.5) / naz as f64;
                        let (ss, cs) = ps.sin_cos();
                        for i in 0..3 {
                            y[i] = centre[i] + rho * (cp * e0[i] + sp * (cs * e1[i] + ss * e2[i]));
                        }
                        integrand(&y, &mut tmp);
                        for c in 0..ncomp {
                            o[c] += tmp[c] * sp * 2.0 * PI / naz as f64;
                        }
                    }
                },
                ncomp,
                &[0.0, 0.5 * PI, PI],
                scale,
                1e-12,
            )
            .0
        };
        for c in 0..ncomp {
            out[c] = jac * res[c];
        }
    };
    let (mut total, _) = adaptive_vec(shell, ncomp, &breaks, abs_tol, 1e-12);
    if tail {
        // ρ = core / s
        let (t, _) = adaptive_vec(
            |s: f64, o: &mut [f64]| {
                if s <= 0.0 {
                    o.iter_mut().for_each(|v| *v = 0.0);
                    return;
                }
                shell(core / s, o);
                o.iter_mut().for_each(|v| *v *= core / (s * s));
            },
            ncomp,
            &[0.0, 0.25, 0.5, 1.0],
            abs_tol,
            1e-12,
        );
        for (a, b) in total.iter_mut().zip(t) {
            *a += b;
        }
    }
    if total.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("convolution integral did not converge".into()));
    }
    Ok(total)
}

/// Σ_{k<terms} t^k Δ^k a(x) / k!.
pub fn heat_expansion(a: &HomogeneousField, x: &[f64], t: f64, terms: usize) -> Result<Vec<f64>> {
    let mut out = a.eval(x)?;
    let terms = if a.harmonics.is_some() { terms } else { terms.min(2) };
    let mut fact = 1.0;
    for k in 1..terms {
        fact *= k as f64;
        let l = if k == 1 { a.laplacian(x)? } else { a.lap_power(x, k)? };
        for (o, v) in out.iter_mut().zip(l) {
            *o += t.powi(k as i32) / fact * v;
        }
    }
    Ok(out)
}

/// Heat flow of a datum at one point: expansion for |x| ≥ 8√t, oracle otherwise.
pub fn heat_point(a: &HomogeneousField, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Domain("t must be positive".into()));
    }
    if norm2(x).sqrt() >= BRANCH_RADIUS * t.sqrt() {
        heat_expansion(a, x, t, HEAT_TERMS)
    } else {
        conv_oracle(a.d, &ConvFactor::datum(a), &ConvFactor::gaussian(a.d, t), x)
    }
}

pub enum HeatSource<'a> {
    Datum(&'a Arc<HomogeneousField>),
    Grid(&'a GridField),
}

/// e^{tΔ} applied to a datum or a grid field, sampled on `grid` (the field's own grid for `Grid`).
pub fn heat_evolve(src: HeatSource, t: f64, grid: Option<Arc<Grid>>) -> Result<GridField> {
    if !(t > 0.0) {
        return Err(Error::Domain("t must be positive".into()));
    }
    match src {
        HeatSource::Datum(a) => {
            let grid = grid.ok_or_else(|| Error::Invalid("heat_evolve of a datum needs a target grid".into()))?;
            let vals = eval_nodes(&grid, |x| heat_point(a, x, t))?;
            Ok(GridField { grid, rank: 1, values: vals, degree: 1.0, closure: Some(a.clone()) })
        }
        HeatSource::Grid(u) => {
            if u.rank != 1 {
                return Err(Error::Unsupported("heat flow of tensor fields".into()));
            }
            let d = u.grid.d;
            let decay = Decay::Power { p: u.degree };
            let f = ConvFactor::new(d, decay, |y: &[f64]| {
                let r = norm2(y).sqrt();
                match (&u.closure, r > u.grid.cfg.r_max) {
                    (Some(a), true) => a.eval_unchecked(y),
                    _ => u.interpolate(y),
                }
            });
            let g = ConvFactor::gaussian(d, t);
            let vals = eval_nodes(&u.grid, |x| conv_oracle(d, &f, &g, x))?;
            Ok(GridField { grid: u.grid.clone(), rank: 1, values: vals, degree: u.degree, closure: u.closure.clone() })
        }
    }
}

fn eval_nodes(grid: &Grid, f: impl Fn(&[f64]) -> Result<Vec<f64>> + Sync) -> Result<Vec<f64>> {
    let nl = grid.n_ang();
    let parts: Result<Vec<Vec<f64>>> = (0..grid.n_nodes()).into_par_iter().map(|k| f(&grid.node(k / nl, k % nl))).collect();
    Ok(parts?.concat())
}

/// e^{tΔ}a − a − tΔa at x as a Gaussian average of the second-order Taylor remainder of a at x.
pub fn heat_taylor_residual(a: &HomogeneousField, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let d = a.d;
    let ax = a.eval(x)?;
    let mut grad = vec![vec![0.0; d]; d];
    let mut hess = vec![vec![vec![0.0; d]; d]; d];
    for i in 0..d {
        let mut al = vec![0; d];
        al[i] = 1;
        grad[i] = a.derivative(x, &al);
        for j in 0..d {
            let mut al = vec![0; d];
            al[i] += 1;
            al[j] += 1;
            hess[i][j] = a.derivative(x, &al);
        }
    }
    let rem = ConvFactor::new(d, Decay::Power { p: 0.0 }, |y: &[f64]| {
        let z: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
        if norm2(&z) == 0.0 {
            return vec![0.0; d];
        }
        let mut v = a.eval_unchecked(&z);
        for c in 0..d {
            v[c] -= ax[c];
            for i in 0..d {
                v[c] += y[i] * grad[i][c];
                for j in 0..d {
                    v[c] -= 0.5 * y[i] * y[j] * hess[i][j][c];
                }
            }
        }
        v
    })
    .singular_at(x.to_vec());
    conv_oracle_tol(d, &rem, &ConvFactor::gaussian(d, t), &vec![0.0; d], 1e-22)
}

/// |(e^{tΔ}a)_i (e^{tΔ}b)_j − [e^{tΔ}(a_i b_j) − 2∫₀ᵗ e^{(t−s)Δ}(∇e^{sΔ}a_i · ∇e^{sΔ}b_j) ds]| at x.
pub fn product_heat_identity_check(a: &HomogeneousField, b: &HomogeneousField, comps: (usize, usize), t: f64, x: &[f64]) -> Result<f64> {
    let d = a.d;
    if d < 3 {
        return Err(Error::Precondition("the product a b is not locally integrable in d = 2".into()));
    }
    if b.d != d {
        return Err(Error::Domain("data of different dimensions".into()));
    }
    let (i, j) = comps;
    let g = ConvFactor::gaussian(d, t);
    let ea = conv_oracle(d, &ConvFactor::datum(a), &g, x)?;
    let eb = conv_oracle(d, &ConvFactor::datum(b), &g, x)?;
    let lhs = ea[i] * eb[j];
    let prod = ConvFactor::new(1, Decay::Power { p: 2.0 }, |y: &[f64]| {
        if norm2(y) == 0.0 {
            return vec![0.0];
        }
        vec![a.eval_unchecked(y)[i] * b.eval_unchecked(y)[j]]
    })
    .singular_at(vec![0.0; d]);
    let heat_ab = conv_oracle(d, &prod, &g, x)?[0];
    // s = tτ²
    let inner = |tau: f64| -> f64 {
        if tau <= 0.0 || tau >= 1.0 {
            return 0.0;
        }
        let s = t * tau * tau;
        let grad_dot = ConvFactor::new(1, Decay::Power { p: 4.0 }, |y: &[f64]| {
            let ga = a.heat_gradient(y, s).unwrap();
            let gb = b.heat_gradient(y, s).unwrap();
            vec![(0..d).map(|k| ga[k * d + i] * gb[k * d + j]).sum()]
        })
        .singular_at(vec![0.0; d]);
        let v = conv_oracle_tol(d, &grad_dot, &ConvFactor::gaussian(d, t - s), x, 1e-11).map(|v| v[0]).unwrap_or(f64::NAN);
        v * 2.0 * t * tau
    };
    let duhamel = crate::quad::GaussLegendre::cached(16).integrate(0.0, 1.0, inner);
    let rhs = heat_ab - 2.0 * duhamel;
    if !rhs.is_finite() {
        return Err(Error::Domain("product identity quadrature failed".into()));
    }
    Ok((lhs - rhs).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_datum, DatumKind, GridConfig};

    #[test]
    fn moments() {
        let m = gaussian_moments(1.0, 5, 2).unwrap();
        assert_eq!(m.get(&[2, 0]), Some(2.0));
        assert_eq!(m.get(&[1, 0]), Some(0.0));
        assert_eq!(m.get(&[4, 0]), Some(12.0));
        assert_eq!(m.get(&[2, 2]), Some(4.0));
        assert!(gaussian_moments(0.0, 2, 2).is_err());
        // ∫|y|² g_1 = 2d in d = 2
        let m2 = gaussian_moments(1.0, 2, 2).unwrap();
        assert!((m2.abs_moment_m - 4.0).abs() < 1e-14);
    }

    #[test]
    fn oracle_semigroup_and_symmetry() {
        let g1 = ConvFactor::gaussian(2, 1.0);
        let g1b = ConvFactor::gaussian(2, 1.0);
        let v = conv_oracle(2, &g1, &g1b, &[0.0, 0.0]).unwrap()[0];
        assert!((v - 1.0 / (8.0 * PI)).abs() < 1e-12);
        let v = conv_oracle(2, &g1, &g1b, &[1.0, 0.0]).unwrap()[0];
        assert!((v - (-1.0f64 / 8.0).exp() / (8.0 * PI)).abs() < 1e-12);
        let f = ConvFactor::new(1, Decay::Power { p: 1.0 }, |y: &[f64]| vec![(1.0 + norm2(y)).powf(-0.5)]);
        let x = [3.0, -1.0];
        let a = conv_oracle(2, &f, &g1, &x).unwrap()[0];
        let b = conv_oracle(2, &g1, &f, &x).unwrap()[0];
        assert!((a - b).abs() < 1e-10);
        let g3 = ConvFactor::gaussian(3, 0.5);
        let g3b = ConvFactor::gaussian(3, 1.5);
        let v = conv_oracle(3, &g3, &g3b, &[0.5, 0.2, -1.0]).unwrap()[0];
        let e = (4.0 * PI * 2.0f64).powf(-1.5) * (-(0.25 + 0.04 + 1.0) / 8.0f64).exp();
        assert!((v - e).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_non_integrable() {
        let f = ConvFactor::new(1, Decay::Power { p: 1.0 }, |y: &[f64]| vec![1.0 / norm2(y).sqrt()]);
        let g = ConvFactor::new(1, Decay::Power { p: 0.5 }, |_y: &[f64]| vec![1.0]);
        assert!(conv_oracle(2, &f, &g, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn expansion_matches_oracle() {
        let f = RadialTest { d: 2, theta: 1.0 };
        let mt = gaussian_moments(1.0, 2, 2).unwrap();
        let x = [6.0, 8.0];
        let e = conv_expansion(&f, &mt, &x, 1).unwrap();
        assert!((e.value[0] - f.value(&x)[0]).abs() < 1e-15);
        let fac = ConvFactor::new(1, Decay::Power { p: 1.0 }, |y: &[f64]| f.value(y));
        let o = conv_oracle(2, &fac, &ConvFactor::gaussian(2, 1.0), &x).unwrap()[0];
        let e2 = conv_expansion(&f, &mt, &x, 2).unwrap();
        assert!((o - e2.value[0]).abs() <= e2.remainder_bound);
        assert!(conv_expansion(&RadialTest { d: 2, theta: 2.5 }, &mt, &x, 2).is_err());
    }

    #[test]
    fn heat_branches_agree_with_exact_flow() {
        let a = make_datum(DatumKind::Anisotropic2d, 0.05).unwrap();
        for &r in &[0.3, 2.0, 7.9, 8.1, 20.0] {
            let x = [r * 0.8, r * 0.6];
            let v = heat_point(&a, &x, 1.0).unwrap();
            let e = a.heat_exact(&x, 1.0).unwrap();
            for c in 0..2 {
                assert!((v[c] - e[c]).abs() < 1e-6, "r={r}");
            }
        }
        let a0 = make_datum(DatumKind::Rotational2d, 0.05).unwrap();
        let v = heat_point(&a0, &[1.0, 0.0], 1e-6).unwrap();
        assert!((v[1] - 0.05).abs() < 1e-4);
    }

    #[test]
    fn taylor_residual_matches_exact() {
        let a = make_datum(DatumKind::Anisotropic2d, 0.05).unwrap();
        let x = [12.0, 5.0];
        let r = heat_taylor_residual(&a, &x, 1.0).unwrap();
        let e = a.heat_exact(&x, 1.0).unwrap();
        let v = a.eval(&x).unwrap();
        let l = a.laplacian(&x).unwrap();
        for c in 0..2 {
            let ex = e[c] - v[c] - l[c];
            assert!((r[c] - ex).abs() < 1e-3 * ex.abs() + 1e-15, "{} {}", r[c], ex);
        }
    }

    #[test]
    fn grid_heat_flow_is_linear() {
        let g = Arc::new(Grid::new(2, GridConfig { n_radial: 12, n_angular: 8, r_min: 0.5, r_max: 8.0 }).unwrap());
        let a = Arc::new(make_datum(DatumKind::Rotational2d, 0.05).unwrap());
        let b = Arc::new(make_datum(DatumKind::Anisotropic2d, 0.05).unwrap());
        let ha = heat_evolve(HeatSource::Datum(&a), 0.5, Some(g.clone())).unwrap();
        let hb = heat_evolve(HeatSource::Datum(&b), 0.5, Some(g.clone())).unwrap();
        let c = Arc::new(HomogeneousField::custom(2, 0.05, "sum", {
            let (a, b) = (a.clone(), b.clone());
            Arc::new(move |w: &[f64]| {
                let (u, v) = (a.trace_at(w), b.trace_at(w));
                vec![2.0 * u[0] - 3.0 * v[0], 2.0 * u[1] - 3.0 * v[1]]
            })
        }).unwrap());
        let hc = heat_evolve(HeatSource::Datum(&c), 0.5, Some(g)).unwrap();
        let lin = ha.axpby(2.0, &hb, -3.0);
        for (p, q) in hc.values.iter().zip(&lin.values) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn product_identity_in_3d() {
        let a = make_datum(DatumKind::Rotational3d, 0.05).unwrap();
        let res = product_heat_identity_check(&a, &a, (0, 1), 1.0, &[3.0, 4.0, 0.0]).unwrap();
        assert!(res < 1e-5, "{res}");
        let a2 = make_datum(DatumKind::Rotational2d, 0.05).unwrap();
        assert!(product_heat_identity_check(&a2, &a2, (0, 1), 1.0, &[3.0, 4.0]).is_err());
    }
}
