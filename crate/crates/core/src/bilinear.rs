//! The operator L(w)(x,t) = ∫₀ᵗ∫ F(x−y, t−s) : w(y,s) dy ds, the bilinear form
//! B(u,v) = L(u⊗v), time-weighted variants, and the moment matrices A, Λ(t), B.
//!
//! Spatial integrals are split by a smooth partition of unity: a ball of radius |x|/2 around
//! x in polar coordinates centred at x (antipodally symmetric direction sets, so the odd
//! kernel cancels its constant part exactly), and the rest of space in polar coordinates
//! centred at the origin. In 3D the outer part is organised in rings about the x₃ axis, which
//! lets the solver matrix reuse one interpolation stencil per ring.

use crate::error::{Error, Result};
use crate::fields::{flip_sign, rotate_tensor, Grid, GridField, HomogeneousField, Layout};
use crate::kernels::{norm2, OseenTensors};
use crate::quad::GaussLegendre;
use crate::solver::Profile;
use crate::sphere::build_rule;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadParams {
    /// Gauss–Legendre nodes on each half of [0, t].
    pub time_nodes: usize,
    /// Gauss–Legendre nodes per spatial panel.
    pub panel_nodes: usize,
    /// Directions on circles around x (2D); azimuths around x in 3D, with half as many polar nodes.
    pub ball_dirs: usize,
    /// Ratio of the radial mesh away from feature scales.
    pub coarse_ratio: f64,
}

impl QuadParams {
    pub fn for_dim(d: usize) -> Self {
        match d {
            2 => QuadParams { time_nodes: 12, panel_nodes: 6, ball_dirs: 16, coarse_ratio: 8.0 },
            3 => QuadParams { time_nodes: 8, panel_nodes: 5, ball_dirs: 12, coarse_ratio: 8.0 },
            _ => QuadParams { time_nodes: 6, panel_nodes: 4, ball_dirs: 8, coarse_ratio: 8.0 },
        }
    }

    /// Roughly halved step sizes everywhere.
    pub fn refined(&self) -> Self {
        QuadParams {
            time_nodes: 2 * self.time_nodes,
            panel_nodes: self.panel_nodes + self.panel_nodes / 2,
            ball_dirs: 2 * self.ball_dirs,
            coarse_ratio: self.coarse_ratio.sqrt().max(2.0),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.time_nodes == 0 || self.panel_nodes == 0 || self.ball_dirs < 4 || self.ball_dirs % 2 != 0 || !(self.coarse_ratio > 1.0) {
            return Err(Error::Invalid(format!("bad quadrature parameters {self:?}")));
        }
        Ok(())
    }
}

/// Scalar weight inserted in the time integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeWeight {
    One,
    /// (t − τ)
    TMinusTau,
    /// τ
    Tau,
}

impl TimeWeight {
    fn factor(self, s: f64, sigma: f64) -> f64 {
        match self {
            TimeWeight::One => 1.0,
            TimeWeight::TMinusTau => sigma,
            TimeWeight::Tau => s,
        }
    }
}

/// Partition of unity around x: 1 for q ≤ 1/4, 0 for q ≥ 1/2, a C⁴ polynomial in between.
fn near_weight(q: f64) -> f64 {
    if q <= 0.25 {
        return 1.0;
    }
    if q >= 0.5 {
        return 0.0;
    }
    let v = 4.0 * q - 1.0;
    1.0 - v.powi(5) * (126.0 + v * (-420.0 + v * (540.0 + v * (-315.0 + 70.0 * v))))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct QPoint {
    pub y: [f64; 3],
    pub w: f64,
    /// Azimuth of y about the x₃ axis (3D).
    pub psi: f64,
}

/// Nodes (σ-free split) of ∫₀ᵗ ds: returns (s, t − s, weight). The first half uses s = (t/2)τ²,
/// the second t − s = (t/2)v², absorbing the integrable endpoint behaviour.
pub fn time_nodes(t: f64, n: usize) -> Vec<(f64, f64, f64)> {
    let gl = GaussLegendre::cached(n);
    let mut out = Vec::with_capacity(2 * n);
    for (tau, w) in gl.on(0.0, 1.0) {
        let s = 0.5 * t * tau * tau;
        out.push((s, t - s, t * tau * w));
    }
    for (v, w) in gl.on(0.0, 1.0) {
        let sig = 0.5 * t * v * v;
        out.push((t - sig, sig, t * v * w));
    }
    out
}

fn gl_panels(breaks: &[f64], n: usize, out: &mut Vec<(f64, f64)>) {
    let gl = GaussLegendre::cached(n);
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            out.extend(gl.on(w[0], w[1]));
        }
    }
}

/// Radial nodes of the ball around x (ρ ≤ |x|/2).
fn ball_radial(rx: f64, sq: f64, q: &QuadParams) -> Vec<(f64, f64)> {
    let r1 = 0.25 * rx;
    let mut br = vec![0.0];
    let mut r = (0.25 * sq).min(0.5 * r1);
    while r < r1 {
        br.push(r);
        r *= if r < 8.0 * sq { 2.0 } else { q.coarse_ratio.min(4.0) };
    }
    br.push(r1);
    br.push(2.0 * r1);
    let mut out = Vec::new();
    gl_panels(&br, q.panel_nodes, &mut out);
    out
}

/// Radial nodes (origin-centred) up to infinity, graded around the feature scales.
fn origin_radial(rx: f64, sq: f64, inner: f64, q: &QuadParams) -> Vec<(f64, f64)> {
    let scales: Vec<f64> = [inner, sq, rx].into_iter().filter(|s| *s > 0.0).collect();
    let smin = scales.iter().cloned().fold(f64::INFINITY, f64::min);
    let smax = scales.iter().cloned().fold(0.0, f64::max);
    let r_lo = 0.05 * smin;
    let r_far = 16.0 * smax;
    let (b0, b1) = if rx > 0.0 { (0.5 * rx, 1.5 * rx) } else { (f64::INFINITY, f64::INFINITY) };
    let mut br = vec![0.0, r_lo];
    let mut r = r_lo;
    loop {
        let near = scales.iter().any(|s| r > s / 8.0 && r < 8.0 * s);
        r *= if near { 2.0 } else { q.coarse_ratio };
        if r >= r_far {
            break;
        }
        if !(r > b0 && r < b1) {
            br.push(r);
        }
    }
    br.push(r_far);
    if rx > 0.0 {
        for j in 0..=8 {
            br.push(rx * (0.5 + j as f64 / 8.0));
        }
    }
    br.sort_by(|a, b| a.partial_cmp(b).unwrap());
    br.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1e-300));
    br.retain(|&v| v <= r_far);
    let mut out = Vec::new();
    gl_panels(&br, q.panel_nodes, &mut out);
    // tail r = r_far/u
    for (u, w) in GaussLegendre::cached(q.panel_nodes).on(0.0, 1.0) {
        out.push((r_far / u, w * r_far / (u * u)));
    }
    out
}

/// Angle (from x̂, seen from the origin) at which the sphere |y| = r meets |y − x| = c|x|.
fn cut_angle(r: f64, rx: f64, c: f64) -> f64 {
    if rx == 0.0 {
        return 0.0;
    }
    let cs = (rx * rx + r * r - c * c * rx * rx) / (2.0 * rx * r);
    if cs >= 1.0 {
        0.0
    } else {
        cs.max(-1.0).acos()
    }
}

/// Panels on [θ_a, π] with a transition panel [θ_a, θ_b] and a graded remainder.
fn angle_breaks(ta: f64, tb: f64) -> Vec<f64> {
    let mut br = vec![ta];
    if tb > ta {
        br.push(tb);
    }
    let s = tb.max(ta);
    if s < PI {
        for f in [0.1, 0.25, 0.5, 1.0] {
            br.push(s + (PI - s) * f);
        }
    }
    br
}

/// Visits quadrature points of ∫ g(y) dy where g carries the kernel singular at x (Gaussian
/// scale `sq`) and a factor varying on scale `inner` near the origin. Points are delivered in
/// groups sharing a meridian representative `base` (3D rings; single points otherwise).
/// With `half` (3D, x₂ = 0) only one point of each mirror pair y ↔ (y₁, −y₂, y₃) is produced.
pub(crate) fn spatial_points(d: usize, x: &[f64], sq: f64, inner: f64, q: &QuadParams, half: bool, visit: &mut dyn FnMut(&[f64; 3], &[QPoint])) {
    match d {
        2 => points_2d(x, sq, inner, q, visit),
        _ => {
            debug_assert!(!half || x[1] == 0.0);
            points_3d(x, sq, inner, q, half, visit)
        }
    }
}

fn points_2d(x: &[f64], sq: f64, inner: f64, q: &QuadParams, visit: &mut dyn FnMut(&[f64; 3], &[QPoint])) {
    let rx = norm2(x).sqrt();
    if rx > 0.0 {
        // directions measured from x̂ so that the rule rotates with x
        let nd = q.ball_dirs;
        let th0 = x[1].atan2(x[0]);
        let dirs: Vec<(f64, f64)> = (0..nd).map(|k| (th0 + 2.0 * PI * k as f64 / nd as f64).sin_cos()).collect();
        for (rho, wr) in ball_radial(rx, sq, q) {
            let eta = near_weight(rho / rx);
            let w = wr * rho * 2.0 * PI / nd as f64 * eta;
            for &(s, c) in &dirs {
                let y = [x[0] + rho * c, x[1] + rho * s, 0.0];
                visit(&y, &[QPoint { y, w, psi: 0.0 }]);
            }
        }
    }
    let (e, n) = if rx > 0.0 { ([x[0] / rx, x[1] / rx], [-x[1] / rx, x[0] / rx]) } else { ([1.0, 0.0], [0.0, 1.0]) };
    let mut th = Vec::new();
    for (r, wr) in origin_radial(rx, sq, inner, q) {
        let (ta, tb) = (cut_angle(r, rx, 0.25), cut_angle(r, rx, 0.5));
        th.clear();
        gl_panels(&angle_breaks(ta, tb), q.panel_nodes, &mut th);
        for &(t, wt) in &th {
            let (st, ct) = t.sin_cos();
            for sg in [1.0, -1.0] {
                let y = [r * (ct * e[0] + sg * st * n[0]), r * (ct * e[1] + sg * st * n[1]), 0.0];
                let eta = if rx > 0.0 { near_weight(((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt() / rx) } else { 0.0 };
                let w = wr * r * wt * (1.0 - eta);
                if w != 0.0 {
                    visit(&y, &[QPoint { y, w, psi: 0.0 }]);
                }
            }
        }
    }
}

fn points_3d(x: &[f64], sq: f64, inner: f64, q: &QuadParams, half: bool, visit: &mut dyn FnMut(&[f64; 3], &[QPoint])) {
    let rx = norm2(x).sqrt();
    let rh = x[0].hypot(x[1]);
    let psi_x = if rh > 0.0 { x[1].atan2(x[0]) } else { 0.0 };
    let (sx, cx) = psi_x.sin_cos();
    if rx > 0.0 {
        let na = q.ball_dirs;
        let gl = GaussLegendre::cached(na / 2);
        let mut dirs = Vec::with_capacity(na * na / 2);
        for (&ct, &wt) in gl.nodes.iter().zip(&gl.weights) {
            let st = (1.0 - ct * ct).sqrt();
            let kmax = if half { na / 2 + 1 } else { na };
            for k in 0..kmax {
                let (sp, cp) = (2.0 * PI * k as f64 / na as f64).sin_cos();
                let edge = if half && (k == 0 || k == na / 2) { 0.5 } else { 1.0 };
                dirs.push(([st * cp, st * sp, ct], edge * wt * 2.0 * PI / na as f64));
            }
        }
        for (rho, wr) in ball_radial(rx, sq, q) {
            let eta = near_weight(rho / rx);
            for &(dv, wd) in &dirs {
                let y = [x[0] + rho * dv[0], x[1] + rho * dv[1], x[2] + rho * dv[2]];
                let h = y[0].hypot(y[1]);
                let psi = if h > 0.0 { y[1].atan2(y[0]) } else { 0.0 };
                visit(&[h, 0.0, y[2]], &[QPoint { y, w: wr * rho * rho * wd * eta, psi }]);
            }
        }
    }
    // rings about the x₃ axis in the frame where x has azimuth 0
    let phx = rh.atan2(x[2]);
    let (sphx, cphx) = phx.sin_cos();
    let mut phis = Vec::new();
    let mut psis = Vec::new();
    let mut ring: Vec<QPoint> = Vec::new();
    for (r, wr) in origin_radial(rx, sq, inner, q) {
        let caps: Vec<f64> = [0.25, 0.5].iter().map(|&c| cut_angle(r, rx, c)).collect();
        let mut br = vec![0.0, 0.25 * PI, 0.5 * PI, 0.75 * PI, PI];
        for &c in &caps {
            if c > 0.0 {
                br.push((phx - c).clamp(0.0, PI));
                br.push((phx + c).clamp(0.0, PI));
            }
        }
        br.sort_by(|a, b| a.partial_cmp(b).unwrap());
        br.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        phis.clear();
        gl_panels(&br, q.panel_nodes, &mut phis);
        let cq: Vec<f64> = [0.25f64, 0.5]
            .iter()
            .map(|&c| if rx > 0.0 { (rx * rx + r * r - c * c * rx * rx) / (2.0 * rx * r) } else { f64::INFINITY })
            .collect();
        for &(ph, wp) in &phis {
            let (sp, cp) = ph.sin_cos();
            let den = sphx * sp;
            let cut = |c: f64| -> f64 {
                if den < 1e-12 {
                    // ring at constant distance from x
                    if cphx * cp >= c {
                        PI
                    } else {
                        0.0
                    }
                } else {
                    let v = (c - cphx * cp) / den;
                    if v >= 1.0 {
                        0.0
                    } else if v <= -1.0 {
                        PI
                    } else {
                        v.acos()
                    }
                }
            };
            let (pa, pb) = (cut(cq[0]), cut(cq[1]));
            if pa >= PI {
                continue;
            }
            let mut pbr = vec![pa];
            if pb > pa {
                pbr.push(pb);
            }
            let s0 = pb.max(pa);
            if s0 < PI {
                pbr.push(s0 + 0.5 * (PI - s0));
                pbr.push(PI);
            }
            psis.clear();
            gl_panels(&pbr, q.panel_nodes, &mut psis);
            ring.clear();
            let base = [r * sp, 0.0, r * cp];
            for &(ps, wps) in &psis {
                let (sps, cps) = ps.sin_cos();
                for sg in if half { &[1.0][..] } else { &[1.0, -1.0][..] } {
                    let sg = *sg;
                    let ym = [r * sp * cps, sg * r * sp * sps, r * cp];
                    let y = [cx * ym[0] - sx * ym[1], sx * ym[0] + cx * ym[1], ym[2]];
                    let eta = if rx > 0.0 { near_weight(((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt() / rx) } else { 0.0 };
                    let w = wr * r * r * sp * wp * wps * (1.0 - eta);
                    if w != 0.0 {
                        ring.push(QPoint { y, w, psi: sg * ps + psi_x });
                    }
                }
            }
            if !ring.is_empty() {
                visit(&base, &ring);
            }
        }
    }
}

/// Spatial points for any d (vectors of length d).
fn visit_generic(d: usize, x: &[f64], sq: f64, inner: f64, q: &QuadParams, visit: &mut dyn FnMut(&[f64], f64)) -> Result<()> {
    let rx = norm2(x).sqrt();
    let ball = build_rule(d, 15)?;
    let outer = build_rule(d, 40)?;
    let mut y = vec![0.0; d];
    if rx > 0.0 {
        for (rho, wr) in ball_radial(rx, sq, q) {
            let eta = near_weight(rho / rx);
            for (w, &wd) in ball.nodes.iter().zip(&ball.weights) {
                for i in 0..d {
                    y[i] = x[i] + rho * w[i];
                }
                visit(&y, wr * rho.powi(d as i32 - 1) * wd * eta);
            }
        }
    }
    for (r, wr) in origin_radial(rx, sq, inner, q) {
        for (w, &wd) in outer.nodes.iter().zip(&outer.weights) {
            let mut dist2 = 0.0;
            for i in 0..d {
                y[i] = r * w[i];
                dist2 += (x[i] - y[i]).powi(2);
            }
            let eta = if rx > 0.0 { near_weight(dist2.sqrt() / rx) } else { 0.0 };
            let wt = wr * r.powi(d as i32 - 1) * wd * (1.0 - eta);
            if wt != 0.0 {
                visit(&y, wt);
            }
        }
    }
    Ok(())
}

/// Runs `f(y, weight)` over the spatial quadrature in any supported dimension.
pub fn for_each_point(d: usize, x: &[f64], sq: f64, inner: f64, q: &QuadParams, f: &mut dyn FnMut(&[f64], f64)) -> Result<()> {
    if d == 2 || d == 3 {
        spatial_points(d, x, sq, inner, q, false, &mut |_, pts| {
            for p in pts {
                f(&p.y[..d], p.w);
            }
        });
        Ok(())
    } else {
        visit_generic(d, x, sq, inner, q, f)
    }
}

// ---------------------------------------------------------------------------------------------
// Tensor fields and the direct evaluation of L

pub type TensorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type SpaceTimeFn = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;

/// A d×d tensor w(y, s), row-major components w_{h,k}.
#[derive(Clone)]
pub enum TensorFieldW {
    Zero { d: usize },
    /// w(y, s) = s^{−p} W(y/√s).
    SelfSimilar { d: usize, power: f64, profile: TensorFn },
    /// Explicit time slices w(y, s).
    Explicit { d: usize, f: SpaceTimeFn },
}

impl std::fmt::Debug for TensorFieldW {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TensorFieldW::Zero { d } => write!(f, "Zero(d={d})"),
            TensorFieldW::SelfSimilar { d, power, .. } => write!(f, "SelfSimilar(d={d}, p={power})"),
            TensorFieldW::Explicit { d, .. } => write!(f, "Explicit(d={d})"),
        }
    }
}

/// Value of a self-similar profile anywhere: interpolation on the grid, the closure beyond R_max.
pub fn profile_value(g: &GridField, z: &[f64]) -> Vec<f64> {
    if let Some(a) = &g.closure {
        if g.rank == 1 && norm2(z).sqrt() > g.grid.cfg.r_max {
            return a.eval_unchecked(z);
        }
    }
    g.interpolate(z)
}

fn outer(u: &[f64], v: &[f64]) -> Vec<f64> {
    let d = u.len();
    let mut w = vec![0.0; d * d];
    for h in 0..d {
        for k in 0..d {
            w[h * d + k] = u[h] * v[k];
        }
    }
    w
}

impl TensorFieldW {
    pub fn dim(&self) -> usize {
        match self {
            TensorFieldW::Zero { d } | TensorFieldW::SelfSimilar { d, .. } | TensorFieldW::Explicit { d, .. } => *d,
        }
    }

    /// s^{−p} W(y/√s) with W a rank-2 grid field.
    pub fn from_grid(w: GridField, power: f64) -> Result<Self> {
        if w.rank != 2 {
            return Err(Error::Domain(format!("tensor field needs rank 2, got {}", w.rank)));
        }
        let d = w.grid.d;
        let w = Arc::new(w);
        Ok(TensorFieldW::SelfSimilar { d, power, profile: Arc::new(move |z: &[f64]| w.interpolate(z)) })
    }

    /// u⊗v for self-similar velocity profiles u(y,s) = s^{−1/2}U(y/√s).
    pub fn product(u: &GridField, v: &GridField) -> Result<Self> {
        if u.rank != 1 || v.rank != 1 || u.grid.d != v.grid.d {
            return Err(Error::Domain("product of two vector profiles on the same dimension expected".into()));
        }
        let d = u.grid.d;
        let (u, v) = (u.clone(), v.clone());
        Ok(TensorFieldW::SelfSimilar { d, power: 1.0, profile: Arc::new(move |z: &[f64]| outer(&profile_value(&u, z), &profile_value(&v, z))) })
    }

    pub fn eval(&self, y: &[f64], s: f64) -> Vec<f64> {
        match self {
            TensorFieldW::Zero { d } => vec![0.0; d * d],
            TensorFieldW::SelfSimilar { power, profile, .. } => {
                let rs = s.sqrt();
                let z: Vec<f64> = y.iter().map(|v| v / rs).collect();
                let c = s.powf(-power);
                profile(&z).into_iter().map(|v| v * c).collect()
            }
            TensorFieldW::Explicit { f, .. } => f(y, s),
        }
    }
}

fn check_point(d: usize, x: &[f64], t: f64) -> Result<()> {
    if x.len() != d {
        return Err(Error::Domain(format!("point has {} coordinates, expected {d}", x.len())));
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time must be positive, got {t}")));
    }
    Ok(())
}

fn contract(d: usize, f: &[f64], w: &[f64], scale: f64, acc: &mut [f64]) {
    for j in 0..d {
        let mut s = 0.0;
        for hk in 0..d * d {
            s += f[j * d * d + hk] * w[hk];
        }
        acc[j] += scale * s;
    }
}

/// L(w)(x, t).
pub fn apply_l(w: &TensorFieldW, x: &[f64], t: f64, q: &QuadParams) -> Result<Vec<f64>> {
    weighted_l(w, x, t, TimeWeight::One, q)
}

/// ∫₀ᵗ ω(τ) F(t−τ) * w(τ) dτ with ω ∈ {1, t−τ, τ}.
pub fn weighted_l(w: &TensorFieldW, x: &[f64], t: f64, weight: TimeWeight, q: &QuadParams) -> Result<Vec<f64>> {
    let d = w.dim();
    check_point(d, x, t)?;
    q.check()?;
    if let TensorFieldW::Zero { .. } = w {
        return Ok(vec![0.0; d]);
    }
    let ot = OseenTensors::new(d)?;
    let nodes = time_nodes(t, q.time_nodes);
    let parts: Result<Vec<Vec<f64>>> = nodes
        .par_iter()
        .map(|&(s, sig, ws)| {
            let tw = ws * weight.factor(s, sig);
            let mut acc = vec![0.0; d];
            let mut fb = vec![0.0; d * d * d];
            let mut z = vec![0.0; d];
            for_each_point(d, x, sig.sqrt(), s.sqrt(), q, &mut |y, pw| {
                for i in 0..d {
                    z[i] = x[i] - y[i];
                }
                ot.f_into(&z, sig, &mut fb);
                contract(d, &fb, &w.eval(y, s), pw * tw, &mut acc);
            })?;
            Ok(acc)
        })
        .collect();
    let mut out = vec![0.0; d];
    for p in parts? {
        for j in 0..d {
            out[j] += p[j];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Accuracy("non-finite value in L: divergent tail".into()));
    }
    Ok(out)
}

/// B(u, v)(x, t) = L(u⊗v) for self-similar profiles.
pub fn bilinear_b(u: &GridField, v: &GridField, x: &[f64], t: f64, q: &QuadParams) -> Result<Vec<f64>> {
    apply_l(&TensorFieldW::product(u, v)?, x, t, q)
}

/// ∫ F(x−y, σ) : w(y) dy.
pub fn conv_f(d: usize, w: &(dyn Fn(&[f64]) -> Vec<f64> + Sync), x: &[f64], sigma: f64, inner: f64, q: &QuadParams) -> Result<Vec<f64>> {
    check_point(d, x, sigma)?;
    let ot = OseenTensors::new(d)?;
    let mut acc = vec![0.0; d];
    let mut fb = vec![0.0; d * d * d];
    let mut z = vec![0.0; d];
    for_each_point(d, x, sigma.sqrt(), inner, q, &mut |y, pw| {
        for i in 0..d {
            z[i] = x[i] - y[i];
        }
        ot.f_into(&z, sigma, &mut fb);
        contract(d, &fb, &w(y), pw, &mut acc);
    })?;
    Ok(acc)
}

/// ∫ K(x−y, σ) v(y) dy.
pub fn conv_k(d: usize, v: &(dyn Fn(&[f64]) -> Vec<f64> + Sync), x: &[f64], sigma: f64, inner: f64, q: &QuadParams) -> Result<Vec<f64>> {
    check_point(d, x, sigma)?;
    let ot = OseenTensors::new(d)?;
    let mut acc = vec![0.0; d];
    let mut kb = vec![0.0; d * d];
    let mut z = vec![0.0; d];
    for_each_point(d, x, sigma.sqrt(), inner, q, &mut |y, pw| {
        for i in 0..d {
            z[i] = x[i] - y[i];
        }
        ot.k_into(&z, sigma, &mut kb);
        let vy = v(y);
        for j in 0..d {
            acc[j] += pw * (0..d).map(|k| kb[j * d + k] * vy[k]).sum::<f64>();
        }
    })?;
    Ok(acc)
}

// ---------------------------------------------------------------------------------------------
// Matrix form at t = 1 for the solver

const SYM2: [(usize, usize); 3] = [(0, 0), (0, 1), (1, 1)];
const SYM3: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

fn sym_pairs(d: usize) -> &'static [(usize, usize)] {
    if d == 2 {
        &SYM2
    } else {
        &SYM3
    }
}

/// Linear map from the symmetric part of a grid tensor W (self-similar weight s^{−1}W(y/√s))
/// to L(w)(·, 1) at the grid nodes. Rows are stored for the ray θ = 0 in 2D (other nodes
/// follow by rotation) and for every meridian node in 3D.
#[derive(Clone)]
pub struct BilinearMatrix {
    pub grid: Arc<Grid>,
    pub params: QuadParams,
    /// Radial homogeneity assumed when interpolating W.
    pub degree: f64,
    pub seconds: f64,
    nsym: usize,
    rows: Vec<f64>,
}

impl std::fmt::Debug for BilinearMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BilinearMatrix").field("grid", &self.grid.cfg).field("params", &self.params).finish()
    }
}

impl BilinearMatrix {
    pub fn assemble(grid: Arc<Grid>, q: QuadParams) -> Result<Self> {
        q.check()?;
        let start = Instant::now();
        let d = grid.d;
        let nsym = sym_pairs(d).len();
        let targets: Vec<Vec<f64>> = match grid.layout {
            Layout::Circle => (0..grid.n_r()).map(|i| grid.node(i, 0)).collect(),
            Layout::Meridian => (0..grid.n_nodes()).map(|k| grid.node(k / grid.n_ang(), k % grid.n_ang())).collect(),
        };
        let ot = OseenTensors::new(d)?;
        let degree = 2.0;
        let rows: Vec<Vec<f64>> = targets.par_iter().map(|x| assemble_row(&grid, &ot, x, &q, degree)).collect();
        let rows = rows.concat();
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Accuracy("non-finite matrix entry".into()));
        }
        Ok(BilinearMatrix { grid, params: q, degree, seconds: start.elapsed().as_secs_f64(), nsym, rows })
    }

    fn ncols(&self) -> usize {
        self.grid.n_nodes() * self.nsym
    }

    fn gather(&self, w: &GridField) -> Vec<f64> {
        let d = self.grid.d;
        let nc = d * d;
        let pairs = sym_pairs(d);
        let mut v = vec![0.0; self.ncols()];
        for node in 0..self.grid.n_nodes() {
            let b = node * nc;
            for (c, &(h, k)) in pairs.iter().enumerate() {
                v[node * self.nsym + c] = 0.5 * (w.values[b + h * d + k] + w.values[b + k * d + h]);
            }
        }
        v
    }

    /// L(w)(·, 1) on the grid for the symmetric part of the rank-2 field w.
    pub fn apply(&self, w: &GridField) -> Result<GridField> {
        if w.rank != 2 || w.grid.cfg != self.grid.cfg || w.grid.d != self.grid.d {
            return Err(Error::Domain("tensor field does not live on the matrix grid".into()));
        }
        let d = self.grid.d;
        let (nr, nl) = (self.grid.n_r(), self.grid.n_ang());
        let ncols = self.ncols();
        let mut out = vec![0.0; self.grid.n_nodes() * d];
        match self.grid.layout {
            Layout::Meridian => {
                let v = self.gather(w);
                out.par_chunks_mut(d).enumerate().for_each(|(t, o)| {
                    for j in 0..d {
                        let row = &self.rows[(t * d + j) * ncols..(t * d + j + 1) * ncols];
                        o[j] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                    }
                });
            }
            Layout::Circle => {
                let v0 = self.gather(w);
                let per_l: Vec<Vec<f64>> = (0..nl)
                    .into_par_iter()
                    .map(|l| {
                        let (s, c) = self.grid.angles[l].sin_cos();
                        // W_l(node i', l') = Rᵀ W(i', l' + l) R
                        let mut v = vec![0.0; ncols];
                        for i in 0..nr {
                            for lp in 0..nl {
                                let src = (i * nl + (lp + l) % nl) * 3;
                                let (a, b, e) = (v0[src], v0[src + 1], v0[src + 2]);
                                let dst = (i * nl + lp) * 3;
                                v[dst] = c * c * a + 2.0 * c * s * b + s * s * e;
                                v[dst + 1] = (c * c - s * s) * b + c * s * (e - a);
                                v[dst + 2] = s * s * a - 2.0 * c * s * b + c * c * e;
                            }
                        }
                        let mut res = vec![0.0; nr * 2];
                        for i in 0..nr {
                            let mut b = [0.0; 2];
                            for (j, bj) in b.iter_mut().enumerate() {
                                let row = &self.rows[(i * 2 + j) * ncols..(i * 2 + j + 1) * ncols];
                                *bj = row.iter().zip(&v).map(|(p, q)| p * q).sum();
                            }
                            res[i * 2] = c * b[0] - s * b[1];
                            res[i * 2 + 1] = s * b[0] + c * b[1];
                        }
                        res
                    })
                    .collect();
                for (l, res) in per_l.iter().enumerate() {
                    for i in 0..nr {
                        out[(i * nl + l) * 2] = res[i * 2];
                        out[(i * nl + l) * 2 + 1] = res[i * 2 + 1];
                    }
                }
            }
        }
        Ok(GridField { grid: self.grid.clone(), rank: 1, values: out, degree: 3.0, closure: None })
    }
}

fn assemble_row(grid: &Grid, ot: &OseenTensors, x: &[f64], q: &QuadParams, degree: f64) -> Vec<f64> {
    let d = grid.d;
    let pairs = sym_pairs(d);
    let nsym = pairs.len();
    let nl = grid.n_ang();
    let ncols = grid.n_nodes() * nsym;
    let (rmin, rmax) = (grid.cfg.r_min, grid.cfg.r_max);
    let mut row = vec![0.0; d * ncols];
    let mut fb = vec![0.0; d * d * d];
    let mut z = [0.0; 3];
    for (s, sig, ws) in time_nodes(1.0, q.time_nodes) {
        let rs = s.sqrt();
        let fac = ws / s;
        spatial_points(d, x, sig.sqrt(), rs, q, d == 3, &mut |base, pts| {
            let mut g = [0.0; 18];
            for p in pts {
                for i in 0..d {
                    z[i] = x[i] - p.y[i];
                }
                ot.f_into(&z[..d], sig, &mut fb);
                if d == 3 && p.psi != 0.0 {
                    for j in 0..3 {
                        rotate_tensor(&mut fb[9 * j..9 * j + 9], 2, -p.psi);
                    }
                }
                for j in 0..d {
                    for (c, &(h, k)) in pairs.iter().enumerate() {
                        let f = if h == k { fb[(j * d + h) * d + k] } else { fb[(j * d + h) * d + k] + fb[(j * d + k) * d + h] };
                        g[j * nsym + c] += p.w * f;
                    }
                }
            }
            if d == 3 {
                // add the mirror images: sign p_j p_h p_k with p = (1, −1, 1)
                for j in 0..3 {
                    for (c, &(h, k)) in pairs.iter().enumerate() {
                        let n1 = (j == 1) as u8 + (h == 1) as u8 + (k == 1) as u8;
                        g[j * nsym + c] *= if n1 % 2 == 0 { 2.0 } else { 0.0 };
                    }
                }
            }
            let zb: Vec<f64> = base[..d].iter().map(|v| v / rs).collect();
            let st = grid.stencil(&zb);
            let rc = st.r.clamp(rmin, rmax);
            let far = if st.r > rmax { (rmax / st.r).powf(degree) } else { 1.0 };
            for a in 0..st.wr.len() {
                let i = st.i0 + a;
                let sr = st.wr[a] * (grid.radii[i] / rc).powf(degree) * far * fac;
                for &(l, wa, flip) in st.ang.iter().take(st.n_ang) {
                    let node = i * nl + l;
                    let sw = sr * wa;
                    for (c, &(h, k)) in pairs.iter().enumerate() {
                        let sign = if flip { flip_sign(h) * flip_sign(k) } else { 1.0 };
                        let col = node * nsym + c;
                        for j in 0..d {
                            row[j * ncols + col] += sw * sign * g[j * nsym + c];
                        }
                    }
                }
            }
        });
    }
    row
}

/// Symmetrised product ½(u⊗v + v⊗u) of two vector grid fields.
pub fn sym_product(u: &GridField, v: &GridField) -> GridField {
    assert_eq!(u.rank, 1);
    assert_eq!(v.rank, 1);
    let d = u.grid.d;
    let n = u.grid.n_nodes();
    let mut out = vec![0.0; n * d * d];
    for k in 0..n {
        let (a, b) = (&u.values[k * d..k * d + d], &v.values[k * d..k * d + d]);
        for h in 0..d {
            for m in 0..d {
                out[k * d * d + h * d + m] = 0.5 * (a[h] * b[m] + a[m] * b[h]);
            }
        }
    }
    GridField { grid: u.grid.clone(), rank: 2, values: out, degree: u.degree + v.degree, closure: None }
}

/// Full product u⊗v.
pub fn outer_product(u: &GridField, v: &GridField) -> GridField {
    let d = u.grid.d;
    let n = u.grid.n_nodes();
    let mut out = vec![0.0; n * d * d];
    for k in 0..n {
        out[k * d * d..(k + 1) * d * d].copy_from_slice(&outer(&u.values[k * d..k * d + d], &v.values[k * d..k * d + d]));
    }
    GridField { grid: u.grid.clone(), rank: 2, values: out, degree: u.degree + v.degree, closure: None }
}

// ---------------------------------------------------------------------------------------------
// Moment matrices

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentTag {
    #[serde(rename = "A_from_datum")]
    AFromDatum,
    #[serde(rename = "B_from_Ws")]
    BFromWs,
    #[serde(rename = "Lambda_at_t")]
    LambdaAtT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentMatrix {
    pub d: usize,
    /// Row-major d×d entries.
    pub entries: Vec<f64>,
    pub tag: MomentTag,
    /// Time for Λ(t).
    pub t: Option<f64>,
    /// Analytic tail estimate relative to the grid integral (B only).
    pub tail_fraction: Option<f64>,
}

impl MomentMatrix {
    pub fn get(&self, h: usize, k: usize) -> f64 {
        self.entries[h * self.d + k]
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.entries).sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.d).all(|h| (0..self.d).all(|k| (self.get(h, k) - self.get(k, h)).abs() <= tol))
    }

    /// Positive semidefinite up to `tol` (all principal minors, d ≤ 3).
    pub fn is_psd(&self, tol: f64) -> bool {
        let d = self.d;
        let m = |h: usize, k: usize| self.get(h, k);
        let diag = (0..d).all(|h| m(h, h) >= -tol);
        let minors2 = (0..d).all(|h| ((h + 1)..d).all(|k| m(h, h) * m(k, k) - m(h, k) * m(k, h) >= -tol));
        let det3 = d < 3
            || m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
                >= -tol;
        diag && minors2 && det3
    }
}

/// A_{hk} = ∫_{S¹} a_h a_k.
pub fn compute_a(a: &HomogeneousField) -> Result<MomentMatrix> {
    if a.d != 2 {
        return Err(Error::Precondition(format!("A is defined for d = 2, got d = {}", a.d)));
    }
    let mut e = vec![0.0; 4];
    for (tr, &w) in a.angular_trace.iter().zip(&a.rule.weights) {
        for h in 0..2 {
            for k in 0..2 {
                e[h * 2 + k] += w * tr[h] * tr[k];
            }
        }
    }
    Ok(MomentMatrix { d: 2, entries: e, tag: MomentTag::AFromDatum, t: None, tail_fraction: None })
}

/// W₁ = ᵀ(∇A₀)(∇A₀), W₂ = A₀⊗b, W₃ = b⊗b at s = 1, with A₀ = e^{Δ}a and b = A₀ − U = B(u,u)(·,1).
#[derive(Debug, Clone)]
pub struct WTensors {
    pub w1: GridField,
    pub w2: GridField,
    pub w3: GridField,
}

pub fn compute_w(profile: &Profile, a: &HomogeneousField) -> Result<WTensors> {
    let u = &profile.u;
    let d = u.grid.d;
    if d != 3 || a.d != 3 {
        return Err(Error::Precondition("the W tensors are defined for d = 3".into()));
    }
    if !profile.converged {
        return Err(Error::Precondition("profile did not converge".into()));
    }
    let grid = u.grid.clone();
    let nl = grid.n_ang();
    let grads: Result<Vec<Vec<f64>>> = (0..grid.n_nodes()).into_par_iter().map(|k| a.heat_gradient(&grid.node(k / nl, k % nl), 1.0)).collect();
    let grads = grads?;
    let mut w1 = vec![0.0; grid.n_nodes() * 9];
    for (k, g) in grads.iter().enumerate() {
        for h in 0..3 {
            for m in 0..3 {
                w1[k * 9 + h * 3 + m] = (0..3).map(|i| g[i * 3 + h] * g[i * 3 + m]).sum();
            }
        }
    }
    let b = profile.a0.axpby(1.0, u, -1.0);
    let mut b = b;
    b.degree = 3.0;
    let w2 = outer_product(&profile.a0, &b);
    let w3 = outer_product(&b, &b);
    Ok(WTensors { w1: GridField { grid, rank: 2, values: w1, degree: 4.0, closure: None }, w2, w3 })
}

/// Fejér's first rule on φ_l = (l+½)π/n for ∫₀^π g(φ) sin φ dφ.
pub fn fejer_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|l| {
            let phi = (l as f64 + 0.5) * PI / n as f64;
            let s: f64 = (1..=n / 2).map(|k| (2.0 * k as f64 * phi).cos() / (4.0 * (k * k) as f64 - 1.0)).sum();
            2.0 / n as f64 * (1.0 - 2.0 * s)
        })
        .collect()
}

/// ∫_{R^d} W dy on the grid (log-r trapezoid, exact azimuthal average in 3D), plus the inner
/// ball |y| < r_min and the tail estimate assuming |W| ~ |y|^{−decay}.
pub fn grid_integral(w: &GridField, decay: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = &w.grid;
    let d = g.d;
    if w.rank != 2 {
        return Err(Error::Domain("grid_integral expects a rank-2 field".into()));
    }
    if decay <= d as f64 {
        return Err(Error::Domain(format!("decay {decay} not integrable in d = {d}")));
    }
    let (nr, nl) = (g.n_r(), g.n_ang());
    let nc = d * d;
    // angular integrals at each radius
    let ang: Vec<Vec<f64>> = (0..nr)
        .map(|i| {
            let mut acc = vec![0.0; nc];
            match g.layout {
                Layout::Circle => {
                    for l in 0..nl {
                        for c in 0..nc {
                            acc[c] += 2.0 * PI / nl as f64 * w.at(i, l)[c];
                        }
                    }
                }
                Layout::Meridian => {
                    let fw = fejer_weights(nl);
                    for l in 0..nl {
                        let m = w.at(i, l);
                        let avg = 0.5 * (m[0] + m[4]);
                        let anti = 0.5 * (m[1] - m[3]);
                        let av = [avg, anti, 0.0, -anti, avg, 0.0, 0.0, 0.0, m[8]];
                        for c in 0..9 {
                            acc[c] += 2.0 * PI * fw[l] * av[c];
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; nc];
    for i in 0..nr {
        let r = g.radii[i];
        let wq = if i == 0 || i == nr - 1 { 0.5 } else { 1.0 } * g.log_h * r.powi(d as i32);
        for c in 0..nc {
            total[c] += wq * ang[i][c];
        }
    }
    let rmin = g.cfg.r_min;
    let rmax = g.cfg.r_max;
    for c in 0..nc {
        total[c] += ang[0][c] * rmin.powi(d as i32) / d as f64;
    }
    let tail: Vec<f64> = ang[nr - 1].iter().map(|v| v * rmax.powi(d as i32) / (decay - d as f64)).collect();
    for c in 0..nc {
        total[c] += tail[c];
    }
    Ok((total, tail))
}

/// B = (1/3)∫(−8W₁ − 4W₂ + 2W₃) dy, symmetrised.
pub fn compute_b_matrix(w: &WTensors) -> Result<MomentMatrix> {
    let (i1, t1) = grid_integral(&w.w1, 4.0)?;
    let (i2, t2) = grid_integral(&w.w2, 4.0)?;
    let (i3, t3) = grid_integral(&w.w3, 6.0)?;
    let d = w.w1.grid.d;
    let comb = |a: &[f64], b: &[f64], c: &[f64]| -> Vec<f64> { (0..d * d).map(|k| (-8.0 * a[k] - 4.0 * b[k] + 2.0 * c[k]) / 3.0).collect() };
    let raw = comb(&i1, &i2, &i3);
    let tail: Vec<f64> = (0..d * d).map(|k| (8.0 * t1[k].abs() + 4.0 * t2[k].abs() + 2.0 * t3[k].abs()) / 3.0).collect();
    let mut e = vec![0.0; d * d];
    for h in 0..d {
        for k in 0..d {
            e[h * d + k] = 0.5 * (raw[h * d + k] + raw[k * d + h]);
        }
    }
    let bn = norm2(&e).sqrt();
    let frac = if bn > 0.0 { norm2(&tail).sqrt() / bn } else { 0.0 };
    if bn > 0.0 && frac > 0.05 {
        return Err(Error::Accuracy(format!("tail of the B integral is {:.1}% of the grid part", 100.0 * frac)));
    }
    Ok(MomentMatrix { d, entries: e, tag: MomentTag::BFromWs, t: None, tail_fraction: Some(frac) })
}

/// Λ(t) = ∫₀ᵗ∫[−2(t−s)w₁ − 2s w₂ + s w₃] dy ds with w_j(y,s) = s^{−2}W_j(y/√s), by a time
/// quadrature in s = tτ² and an off-grid spatial quadrature of the interpolated W_j.
pub fn lambda_at(w: &WTensors, t: f64, q: &QuadParams) -> Result<MomentMatrix> {
    if !(t > 0.0) {
        return Err(Error::Domain("t must be positive".into()));
    }
    let d = w.w1.grid.d;
    if d != 3 {
        return Err(Error::Precondition("Λ(t) is defined for d = 3".into()));
    }
    let g = &w.w1.grid;
    let (rmin, rmax) = (g.cfg.r_min, g.cfg.r_max);
    let gl_c = GaussLegendre::cached(24);
    let nt = q.time_nodes.max(8);
    let mut out = vec![0.0; 9];
    for (tau, wt) in GaussLegendre::cached(nt).on(0.0, 1.0) {
        let s = t * tau * tau;
        let ds = 2.0 * t * tau * wt;
        let rs = s.sqrt();
        // spatial integral of s^{-2} W_j(y/√s), radial panels in y
        let mut br = vec![0.0, rmin * rs];
        let mut r = rmin * rs;
        while r < rmax * rs {
            r *= 2.0;
            br.push(r.min(rmax * rs));
        }
        let mut nodes = Vec::new();
        gl_panels(&br, q.panel_nodes.max(8), &mut nodes);
        let mut ints = [[0.0; 9]; 3];
        for (j, wj) in [&w.w1, &w.w2, &w.w3].iter().enumerate() {
            for &(ry, wr) in &nodes {
                for (&c, &wc) in gl_c.nodes.iter().zip(&gl_c.weights) {
                    let sn = (1.0 - c * c).sqrt();
                    let m = wj.interpolate(&[ry * sn / rs, 0.0, ry * c / rs]);
                    let avg = 0.5 * (m[0] + m[4]);
                    let anti = 0.5 * (m[1] - m[3]);
                    let av = [avg, anti, 0.0, -anti, avg, 0.0, 0.0, 0.0, m[8]];
                    for k in 0..9 {
                        ints[j][k] += wr * ry * ry * wc * 2.0 * PI * av[k] / (s * s);
                    }
                }
            }
            // |y| > R_max√s from the interpolation's own homogeneous extension
            let decay = wj.degree;
            for (&c, &wc) in gl_c.nodes.iter().zip(&gl_c.weights) {
                let sn = (1.0 - c * c).sqrt();
                let m = wj.interpolate(&[rmax * sn, 0.0, rmax * c]);
                let avg = 0.5 * (m[0] + m[4]);
                let av = [avg, 0.0, 0.0, 0.0, avg, 0.0, 0.0, 0.0, m[8]];
                let ry = rmax * rs;
                for k in 0..9 {
                    ints[j][k] += wc * 2.0 * PI * av[k] * ry.powi(3) / (decay - 3.0) / (s * s);
                }
            }
        }
        for k in 0..9 {
            out[k] += ds * (-2.0 * (t - s) * ints[0][k] - 2.0 * s * ints[1][k] + s * ints[2][k]);
        }
    }
    let mut e = vec![0.0; 9];
    for h in 0..3 {
        for k in 0..3 {
            e[h * 3 + k] = 0.5 * (out[h * 3 + k] + out[k * 3 + h]);
        }
    }
    Ok(MomentMatrix { d: 3, entries: e, tag: MomentTag::LambdaAtT, t: Some(t), tail_fraction: None })
}

// ---------------------------------------------------------------------------------------------
// Decay envelopes

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnvelopeSample {
    pub x_norm: f64,
    pub t: f64,
    pub value: f64,
    pub envelope: f64,
    pub ratio: f64,
}

/// min(t^{−1/2}, t|x|^{−3}) for d ≥ 3, t|x|^{−3}·log(|x|/√t) in 2D (|x| ≥ e√t).
pub fn decay_envelope(d: usize, r: f64, t: f64) -> f64 {
    if d == 2 {
        t * r.powi(-3) * (r / t.sqrt()).ln()
    } else {
        t.powf(-0.5).min(t * r.powi(-3))
    }
}

/// Log-spaced (|x|, t) pairs with |x| ≥ e√t: `nt` times in [0.25, 4] and `nr` radii
/// |x|/√t ∈ [e, 60].
pub fn envelope_points(nt: usize, nr: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(nt * nr);
    for a in 0..nt {
        let t = 0.25 * 16f64.powf(a as f64 / (nt.max(2) - 1) as f64);
        for b in 0..nr {
            let xi = std::f64::consts::E * (60.0 / std::f64::consts::E).powf(b as f64 / (nr.max(2) - 1) as f64);
            out.push((xi * t.sqrt(), t));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::GridConfig;

    fn gauss(y: &[f64], tau: f64) -> f64 {
        let d = y.len() as f64;
        (4.0 * PI * tau).powf(-d / 2.0) * (-norm2(y) / (4.0 * tau)).exp()
    }

    /// ∂₁∇⊥g_τ in 2D.
    fn d1_perp_grad(y: &[f64], tau: f64) -> Vec<f64> {
        let g = gauss(y, tau);
        let (a, b) = (y[0], y[1]);
        // ∇⊥g = (−∂₂g, ∂₁g) = g/(2τ)(b, −a)
        // ∂₁ of that
        let c = 1.0 / (2.0 * tau);
        vec![c * g * (-a * b * c), c * g * (-1.0 + a * a * c)]
    }

    #[test]
    fn partition_of_unity_is_smooth_step() {
        assert_eq!(near_weight(0.1), 1.0);
        assert_eq!(near_weight(0.6), 0.0);
        assert!((near_weight(0.375) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn time_nodes_integrate_polynomials() {
        let n = time_nodes(2.0, 12);
        let v: f64 = n.iter().map(|&(s, _, w)| w * s * s).sum();
        assert!((v - 8.0 / 3.0).abs() < 1e-12);
        let v: f64 = n.iter().map(|&(_, sig, w)| w * sig.sqrt()).sum();
        assert!((v - 2.0 / 3.0 * 2f64.powf(1.5)).abs() < 1e-10);
    }

    #[test]
    fn spatial_rule_integrates_gaussians() {
        for &(d, ref x) in &[(2usize, vec![1.5, -0.7]), (3, vec![0.4, 1.1, -2.0])] {
            let q = QuadParams::for_dim(d);
            let mut v = 0.0;
            for_each_point(d, &x, 0.1, 0.3, &q, &mut |y, w| v += w * gauss(y, 0.7)).unwrap();
            assert!((v - 1.0).abs() < 1e-5, "d={d}: {v}");
            let mut v = 0.0;
            let c: Vec<f64> = x.iter().map(|p| p + 0.05).collect();
            for_each_point(d, &x, 0.1, 0.3, &q, &mut |y, w| {
                let z: Vec<f64> = y.iter().zip(&c).map(|(a, b)| a - b).collect();
                v += w * gauss(&z, 0.01)
            })
            .unwrap();
            assert!((v - 1.0).abs() < 1e-5, "d={d} near x: {v}");
        }
    }

    #[test]
    fn oseen_convolution_of_divergence_free_gaussian() {
        // w = e₁ ⊗ ∇⊥g_τ: F(σ) * w = e^{σΔ} ∂₁∇⊥g_τ = ∂₁∇⊥g_{τ+σ}
        let q = QuadParams::for_dim(2);
        let tau = 0.3;
        let w = |y: &[f64]| {
            let g = gauss(y, tau);
            let c = 1.0 / (2.0 * tau);
            vec![c * g * y[1], -c * g * y[0], 0.0, 0.0]
        };
        for (q, tol) in [(q, 1e-5), (q.refined(), 1e-6)] {
            for &(sig, ref x) in &[(0.01, vec![0.5, 0.3]), (0.5, vec![-1.0, 2.0]), (1e-4, vec![1.2, 0.0])] {
                let got = conv_f(2, &w, x, sig, 0.5, &q).unwrap();
                let want = d1_perp_grad(x, tau + sig);
                for j in 0..2 {
                    assert!((got[j] - want[j]).abs() < tol * (1.0 + want[j].abs()), "σ={sig} {got:?} {want:?}");
                }
            }
        }
    }

    #[test]
    fn oseen_k_reproduces_heat_flow_on_solenoidal_fields() {
        let q = QuadParams::for_dim(3);
        let tau = 0.4;
        // v = ∇×(g e₃) = (∂₂g, −∂₁g, 0)
        let v = |y: &[f64]| {
            let g = gauss(y, tau);
            let c = -1.0 / (2.0 * tau);
            vec![c * g * y[1], -c * g * y[0], 0.0]
        };
        let x = [0.3, -0.8, 0.5];
        let sig = 0.05;
        let g = gauss(&x, tau + sig);
        let c = -1.0 / (2.0 * (tau + sig));
        let want = [c * g * x[1], -c * g * x[0], 0.0];
        for (q, tol) in [(q, 1e-4), (q.refined(), 1e-6)] {
            let got = conv_k(3, &v, &x, sig, 0.6, &q).unwrap();
            for j in 0..3 {
                assert!((got[j] - want[j]).abs() < tol * want[0].abs(), "{got:?} {want:?}");
            }
        }
    }

    #[test]
    fn zero_field_gives_zero() {
        let q = QuadParams::for_dim(2);
        assert_eq!(apply_l(&TensorFieldW::Zero { d: 2 }, &[1.0, 2.0], 1.0, &q).unwrap(), vec![0.0, 0.0]);
        assert!(apply_l(&TensorFieldW::Zero { d: 2 }, &[1.0, 2.0], 0.0, &q).is_err());
    }

    #[test]
    fn weights_add_up_to_t() {
        let q = QuadParams { time_nodes: 8, panel_nodes: 6, ball_dirs: 16, coarse_ratio: 8.0 };
        let w = TensorFieldW::Explicit { d: 2, f: Arc::new(|y: &[f64], _s: f64| {
            let g = gauss(y, 0.5);
            vec![g, 0.3 * g * y[0], 0.3 * g * y[0], 0.5 * g * y[1]]
        }) };
        let x = [0.8, 0.4];
        let t = 1.7;
        let a = weighted_l(&w, &x, t, TimeWeight::TMinusTau, &q).unwrap();
        let b = weighted_l(&w, &x, t, TimeWeight::Tau, &q).unwrap();
        let c = apply_l(&w, &x, t, &q).unwrap();
        for j in 0..2 {
            assert!((a[j] + b[j] - t * c[j]).abs() < 1e-12 * (1.0 + c[j].abs()));
        }
    }

    #[test]
    fn matrix_agrees_with_direct_evaluation() {
        for d in [2usize, 3] {
            let cfg = GridConfig { r_min: 0.05, r_max: 50.0, n_radial: 24, n_angular: if d == 2 { 16 } else { 8 } };
            let grid = Arc::new(Grid::new(d, cfg).unwrap());
            let q = QuadParams { time_nodes: 4, panel_nodes: 4, ball_dirs: 8, coarse_ratio: 8.0 };
            let m = BilinearMatrix::assemble(grid.clone(), q).unwrap();
            let u = GridField::from_fn(grid.clone(), |x| {
                let g = (-norm2(x) / 3.0).exp();
                if d == 2 {
                    vec![-x[1] * g + 0.1 * g, x[0] * g]
                } else {
                    vec![-x[1] * g, x[0] * g, 0.2 * x[2] * g]
                }
            });
            let w = sym_product(&u, &u);
            let b = m.apply(&w).unwrap();
            let wf = TensorFieldW::from_grid(w.clone(), 1.0).unwrap();
            for &(i, l) in &[(10usize, 3usize), (15, 5), (20, 1)] {
                let x = grid.node(i, l);
                let direct = apply_l(&wf, &x, 1.0, &q).unwrap();
                for j in 0..d {
                    let v = b.at(i, l)[j];
                    assert!((v - direct[j]).abs() < 1e-10 * (1.0 + direct[j].abs()), "d={d} ({i},{l}) j={j}: {v} vs {}", direct[j]);
                }
            }
        }
    }

    #[test]
    fn rotational_moment_matrix() {
        let a = crate::fields::make_datum(crate::fields::DatumKind::Rotational2d, 0.05).unwrap();
        let m = compute_a(&a).unwrap();
        assert!((m.get(0, 0) - 0.0025 * PI).abs() < 1e-14);
        assert!((m.get(1, 1) - 0.0025 * PI).abs() < 1e-14);
        assert!(m.get(0, 1).abs() < 1e-15);
        assert!(m.is_psd(1e-15) && m.is_symmetric(1e-15));
    }

    #[test]
    fn fejer_rule_is_exact_for_polynomials_in_cos() {
        let n = 9;
        let w = fejer_weights(n);
        for p in 0..n {
            let v: f64 = (0..n).map(|l| w[l] * ((l as f64 + 0.5) * PI / n as f64).cos().powi(p as i32)).sum();
            let want = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
            assert!((v - want).abs() < 1e-13, "p={p}");
        }
    }
}
