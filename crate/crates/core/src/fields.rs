//! Degree −1 homogeneous data, log-polar grid fields and the discrete weighted norms.
//!
//! Grids are geometric in r. In 2D the angular nodes are θ_l = 2πl/n. In 3D fields are
//! assumed axisymmetric about the x₃ axis and sampled on the meridian x₂ = 0 at polar
//! angles φ_l = (l + ½)π/n; values elsewhere follow from f(R_ψ x) = R_ψ f(x).

use crate::error::{Error, Result};
use crate::harmonics::Harmonics;
use crate::kernels::norm2;
use crate::sphere::{build_rule, SphereRule};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

pub type Trace = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatumKind {
    Rotational3d,
    Rotational2d,
    Anisotropic2d,
    Custom(String),
}

impl DatumKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rotational3d" => Ok(DatumKind::Rotational3d),
            "rotational2d" => Ok(DatumKind::Rotational2d),
            "anisotropic2d" => Ok(DatumKind::Anisotropic2d),
            other => Err(Error::Invalid(format!("unknown datum kind '{other}'"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            DatumKind::Rotational3d => "rotational3d".into(),
            DatumKind::Rotational2d => "rotational2d".into(),
            DatumKind::Anisotropic2d => "anisotropic2d".into(),
            DatumKind::Custom(s) => s.clone(),
        }
    }
}

/// A divergence-free vector field homogeneous of degree −1, a(x) = â(x/|x|)/|x|.
#[derive(Clone)]
pub struct HomogeneousField {
    pub d: usize,
    pub eps: f64,
    pub kind: DatumKind,
    trace: Trace,
    pub harmonics: Option<Harmonics>,
    pub rule: SphereRule,
    /// â at the nodes of `rule`.
    pub angular_trace: Vec<Vec<f64>>,
}

impl fmt::Debug for HomogeneousField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HomogeneousField").field("d", &self.d).field("eps", &self.eps).field("kind", &self.kind).finish()
    }
}

pub fn make_datum(kind: DatumKind, eps: f64) -> Result<HomogeneousField> {
    if !(eps >= 0.0) {
        return Err(Error::Domain(format!("epsilon must be non-negative, got {eps}")));
    }
    let (d, trace): (usize, Trace) = match &kind {
        DatumKind::Rotational3d => (3, Arc::new(move |w: &[f64]| vec![-eps * w[1], eps * w[0], 0.0])),
        DatumKind::Rotational2d => (2, Arc::new(move |w: &[f64]| vec![-eps * w[1], eps * w[0]])),
        // stream function ψ = ε sin θ: a = ∇⊥ψ = −ε ω₁ ω / |x|
        DatumKind::Anisotropic2d => (2, Arc::new(move |w: &[f64]| vec![-eps * w[0] * w[0], -eps * w[0] * w[1]])),
        DatumKind::Custom(name) => {
            return Err(Error::Invalid(format!("custom datum '{name}' needs a trace; use HomogeneousField::custom")))
        }
    };
    HomogeneousField::build(d, eps, kind, trace)
}

impl HomogeneousField {
    /// A datum from an explicit angular trace â (including its amplitude).
    pub fn custom(d: usize, eps: f64, name: &str, trace: Trace) -> Result<Self> {
        Self::build(d, eps, DatumKind::Custom(name.to_string()), trace)
    }

    fn build(d: usize, eps: f64, kind: DatumKind, trace: Trace) -> Result<Self> {
        let rule = build_rule(d, 24)?;
        let angular_trace = rule.nodes.iter().map(|w| trace(w)).collect();
        let harmonics = match d {
            2 => Some(Harmonics::project(2, 2, 24, trace.as_ref())?),
            3 => Some(Harmonics::project(3, 3, 12, trace.as_ref())?),
            _ => None,
        };
        Ok(HomogeneousField { d, eps, kind, trace, harmonics, rule, angular_trace })
    }

    /// Same shape with amplitude multiplied by `factor` (built-in kinds only).
    pub fn rescaled(&self, factor: f64) -> Result<Self> {
        match self.kind {
            DatumKind::Custom(_) => {
                let tr = self.trace.clone();
                Self::build(self.d, self.eps * factor, self.kind.clone(), Arc::new(move |w: &[f64]| tr(w).into_iter().map(|v| v * factor).collect()))
            }
            _ => make_datum(self.kind.clone(), self.eps * factor),
        }
    }

    pub fn trace_at(&self, w: &[f64]) -> Vec<f64> {
        (self.trace)(w)
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::Domain("dimension mismatch".into()));
        }
        let r = norm2(x).sqrt();
        if r == 0.0 {
            return Err(Error::Singular("datum at the origin".into()));
        }
        Ok(self.eval_unchecked(x))
    }

    pub fn eval_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let r = norm2(x).sqrt();
        let w: Vec<f64> = x.iter().map(|v| v / r).collect();
        (self.trace)(&w).into_iter().map(|v| v / r).collect()
    }

    fn harm(&self) -> Result<&Harmonics> {
        self.harmonics.as_ref().ok_or_else(|| Error::Unsupported(format!("harmonic expansion in d = {}", self.d)))
    }

    /// Δa(x), homogeneous of degree −3.
    ///
    /// d = 2, 3: from the harmonic expansion. Otherwise the angular Laplacian is the sum of
    /// second derivatives along d−1 orthogonal great circles, each computed spectrally, and
    /// Δa = |x|^{-3}[(3−d) â + Δ_S â].
    pub fn laplacian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = norm2(x).sqrt();
        if r == 0.0 {
            return Err(Error::Singular("Laplacian at the origin".into()));
        }
        if let Some(h) = &self.harmonics {
            return Ok(h.lap_power(x, 1));
        }
        let w: Vec<f64> = x.iter().map(|v| v / r).collect();
        let lap_s = great_circle_laplacian(self.d, &w, &|p: &[f64]| (self.trace)(p));
        let a = (self.trace)(&w);
        Ok(a.iter().zip(&lap_s).map(|(a, l)| ((3.0 - self.d as f64) * a + l) / r.powi(3)).collect())
    }

    /// Δ^k a(x).
    pub fn lap_power(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        if norm2(x) == 0.0 {
            return Err(Error::Singular("Laplacian at the origin".into()));
        }
        Ok(self.harm()?.lap_power(x, k))
    }

    /// Exact heat flow e^{tΔ}a(x) through the harmonic expansion (d = 2, 3).
    pub fn heat_exact(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(t > 0.0) {
            return Err(Error::Domain("t must be positive".into()));
        }
        Ok(self.harm()?.heat(x, t))
    }

    /// ∇e^{tΔ}a(x), entry [i*d + j] = ∂_i (e^{tΔ}a)_j.
    pub fn heat_gradient(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.harm()?.heat_gradient(x, t))
    }

    /// Normalised weak divergence max_φ |∫a·∇φ| / ∫|a||∇φ| over bump test functions.
    pub fn weak_divergence(&self) -> f64 {
        weak_divergence(self.d, &|x: &[f64]| Some(self.eval_unchecked(x)), &[0.3, 1.0, 4.0])
    }

    /// Shared handle to the trace closure.
    pub fn trace_fn(&self) -> Trace {
        self.trace.clone()
    }
}

/// Δ_S f(ω) = Σ_i d²/dθ² f(cos θ ω + sin θ e_i) at θ = 0 for an orthonormal tangent frame e_i.
pub fn great_circle_laplacian(d: usize, w: &[f64], f: &dyn Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let n = 64;
    let frame = tangent_frame(w);
    let ncomp = f(w).len();
    let mut out = vec![0.0; ncomp];
    for e in frame.iter().take(d - 1) {
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / n as f64;
                let p: Vec<f64> = w.iter().zip(e).map(|(a, b)| th.cos() * a + th.sin() * b).collect();
                f(&p)
            })
            .collect();
        for c in 0..ncomp {
            let col: Vec<f64> = samples.iter().map(|s| s[c]).collect();
            out[c] += spectral_derivative(&col, 2)[0];
        }
    }
    out
}

/// Orthonormal basis of the tangent space at unit ω (Gram–Schmidt on coordinate axes).
pub fn tangent_frame(w: &[f64]) -> Vec<Vec<f64>> {
    let d = w.len();
    let mut basis: Vec<Vec<f64>> = vec![w.to_vec()];
    for i in 0..d {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vk, bk) in v.iter_mut().zip(b) {
                *vk -= dot * bk;
            }
        }
        let nv = norm2(&v).sqrt();
        if nv > 1e-6 {
            basis.push(v.into_iter().map(|x| x / nv).collect());
        }
        if basis.len() == d {
            break;
        }
    }
    basis.remove(0);
    basis
}

/// k-th derivative of a periodic sequence sampled on [0, 2π).
pub fn spectral_derivative(f: &[f64], k: u32) -> Vec<f64> {
    let n = f.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = f.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    for (j, c) in buf.iter_mut().enumerate() {
        let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
        if n % 2 == 0 && j == n / 2 && k % 2 == 1 {
            *c = Complex::new(0.0, 0.0);
            continue;
        }
        let ik = Complex::new(0.0, m).powu(k);
        *c *= ik;
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Bump test functions φ(y) = exp(−1/(1−|y−c|²/ρ²)) at several centres; returns
/// max |∫f·∇φ| / ∫|f||∇φ|. `f` may return None outside its domain.
pub fn weak_divergence(d: usize, f: &dyn Fn(&[f64]) -> Option<Vec<f64>>, radii: &[f64]) -> f64 {
    let rule = build_rule(d, 48).unwrap();
    let gl = crate::quad::GaussLegendre::cached(64);
    let mut worst = 0.0f64;
    for &rc in radii {
        for dir in 0..3 {
            let th = 0.4 + 1.1 * dir as f64;
            let mut c = vec![0.0; d];
            c[0] = rc * th.cos();
            c[1] = rc * th.sin();
            if d > 2 {
                c[d - 1] = 0.3 * rc;
            }
            let rho = 0.45 * norm2(&c).sqrt();
            let (mut num, mut den) = (0.0, 0.0);
            for (s, ws) in gl.on(0.0, 1.0) {
                let q = s * s;
                let e = (-1.0 / (1.0 - q)).exp();
                // ∇φ = φ · (−2 (y−c)/ρ²) / (1−q)²
                let gscale = -2.0 * e / ((1.0 - q).powi(2) * rho * rho);
                for (w, wq) in rule.nodes.iter().zip(&rule.weights) {
                    let y: Vec<f64> = c.iter().zip(w).map(|(ci, wi)| ci + rho * s * wi).collect();
                    let Some(v) = f(&y) else { continue };
                    let vol = ws * wq * (rho * s).powi(d as i32 - 1) * rho;
                    let mut dot = 0.0;
                    let mut gn = 0.0;
                    for i in 0..d {
                        let g = gscale * rho * s * w[i];
                        dot += v[i] * g;
                        gn += g * g;
                    }
                    num += vol * dot;
                    den += vol * norm2(&v).sqrt() * gn.sqrt();
                }
            }
            if den > 0.0 {
                worst = worst.max(num.abs() / den);
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------------------------
// Grids

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Layout {
    /// Full circle, θ_l = 2πl/n (d = 2).
    Circle,
    /// Axisymmetric meridian, φ_l = (l+½)π/n (d = 3).
    Meridian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub n_radial: usize,
    pub n_angular: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { r_min: 0.05, r_max: 400.0, n_radial: 96, n_angular: 64 }
    }
}

pub const RADIAL_STENCIL: usize = 6;
pub const ANGULAR_STENCIL_2D: usize = 8;
pub const ANGULAR_STENCIL_3D: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub d: usize,
    pub layout: Layout,
    pub cfg: GridConfig,
    pub radii: Vec<f64>,
    pub angles: Vec<f64>,
    pub log_h: f64,
}

/// Interpolation stencil: radial node weights (already including the (r_i/r)^p factor is the
/// caller's job), angular (node, weight, reflected) triples, and the azimuth of the point.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub r: f64,
    pub i0: usize,
    pub wr: [f64; RADIAL_STENCIL],
    pub ang: [(usize, f64, bool); ANGULAR_STENCIL_2D],
    pub n_ang: usize,
    pub azimuth: f64,
}

impl Grid {
    pub fn new(d: usize, cfg: GridConfig) -> Result<Self> {
        let layout = match d {
            2 => Layout::Circle,
            3 => Layout::Meridian,
            _ => return Err(Error::Unsupported(format!("grid fields in d = {d}"))),
        };
        if !(cfg.r_min > 0.0 && cfg.r_max > cfg.r_min) || cfg.n_radial < RADIAL_STENCIL + 2 || cfg.n_angular < 8 {
            return Err(Error::Invalid(format!("bad grid parameters {cfg:?}")));
        }
        let log_h = (cfg.r_max / cfg.r_min).ln() / (cfg.n_radial - 1) as f64;
        let radii = (0..cfg.n_radial).map(|i| cfg.r_min * (log_h * i as f64).exp()).collect();
        let n = cfg.n_angular;
        let angles = match layout {
            Layout::Circle => (0..n).map(|l| 2.0 * PI * l as f64 / n as f64).collect(),
            Layout::Meridian => (0..n).map(|l| (l as f64 + 0.5) * PI / n as f64).collect(),
        };
        Ok(Grid { d, layout, cfg, radii, angles, log_h })
    }

    pub fn n_r(&self) -> usize {
        self.radii.len()
    }

    pub fn n_ang(&self) -> usize {
        self.angles.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_r() * self.n_ang()
    }

    /// Unit direction of angular node l (azimuth 0 in 3D).
    pub fn direction(&self, l: usize) -> Vec<f64> {
        let a = self.angles[l];
        match self.layout {
            Layout::Circle => vec![a.cos(), a.sin()],
            Layout::Meridian => vec![a.sin(), 0.0, a.cos()],
        }
    }

    pub fn node(&self, i: usize, l: usize) -> Vec<f64> {
        self.direction(l).into_iter().map(|v| v * self.radii[i]).collect()
    }

    /// Same grid with radial and angular counts doubled.
    pub fn refined(&self) -> Result<Grid> {
        let mut cfg = self.cfg;
        cfg.n_radial = 2 * cfg.n_radial - 1;
        cfg.n_angular *= 2;
        Grid::new(self.d, cfg)
    }

    /// Lagrange stencil for a point with r clamped into [r_min, r_max].
    pub fn stencil(&self, x: &[f64]) -> Stencil {
        let r = norm2(x).sqrt();
        let rc = r.clamp(self.cfg.r_min, self.cfg.r_max);
        let q = (rc / self.cfg.r_min).ln() / self.log_h;
        let nr = self.n_r();
        let i0 = ((q.floor() as i64) - (RADIAL_STENCIL as i64 / 2 - 1)).clamp(0, (nr - RADIAL_STENCIL) as i64) as usize;
        let mut wr = [0.0; RADIAL_STENCIL];
        lagrange(q - i0 as f64, &mut wr);
        let n = self.n_ang();
        let mut ang = [(0usize, 0.0, false); ANGULAR_STENCIL_2D];
        let (n_ang, azimuth) = match self.layout {
            Layout::Circle => {
                let th = x[1].atan2(x[0]).rem_euclid(2.0 * PI);
                let p = th / (2.0 * PI) * n as f64;
                let m = ANGULAR_STENCIL_2D;
                let l0 = p.floor() as i64 - (m as i64 / 2 - 1);
                let mut w = [0.0; ANGULAR_STENCIL_2D];
                lagrange(p - l0 as f64, &mut w);
                for k in 0..m {
                    ang[k] = ((l0 + k as i64).rem_euclid(n as i64) as usize, w[k], false);
                }
                (m, 0.0)
            }
            Layout::Meridian => {
                let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let phi = rho.atan2(x[2]);
                let p = phi / PI * n as f64 - 0.5;
                let m = ANGULAR_STENCIL_3D;
                let l0 = p.floor() as i64 - (m as i64 / 2 - 1);
                let mut w = [0.0; ANGULAR_STENCIL_3D];
                lagrange(p - l0 as f64, &mut w);
                for k in 0..m {
                    let l = l0 + k as i64;
                    let (idx, flip) = if l < 0 {
                        ((-1 - l) as usize, true)
                    } else if l >= n as i64 {
                        ((2 * n as i64 - 1 - l) as usize, true)
                    } else {
                        (l as usize, false)
                    };
                    ang[k] = (idx, w[k], flip);
                }
                (m, if rho > 0.0 { x[1].atan2(x[0]) } else { 0.0 })
            }
        };
        Stencil { r, i0, wr, ang, n_ang, azimuth }
    }
}

/// Lagrange weights for nodes 0..n−1 at position p.
pub fn lagrange(p: f64, w: &mut [f64]) {
    let n = w.len();
    for j in 0..n {
        let mut v = 1.0;
        for k in 0..n {
            if k != j {
                v *= (p - k as f64) / (j as f64 - k as f64);
            }
        }
        w[j] = v;
    }
}

/// Sign of a Cartesian component under the half-turn about the x₃ axis.
#[inline]
pub fn flip_sign(idx: usize) -> f64 {
    if idx < 2 {
        -1.0
    } else {
        1.0
    }
}

/// Rotation about the x₃ axis applied to a rank-k tensor with d = 3 (flattened row-major).
pub fn rotate_tensor(v: &mut [f64], rank: usize, psi: f64) {
    if psi == 0.0 || rank == 0 {
        return;
    }
    let (c, s) = (psi.cos(), psi.sin());
    let stride_total = v.len();
    for p in 0..rank {
        let stride = 3usize.pow((rank - 1 - p) as u32);
        let block = stride * 3;
        let mut base = 0;
        while base < stride_total {
            for off in 0..stride {
                let i0 = base + off;
                let (a, b) = (v[i0], v[i0 + stride]);
                v[i0] = c * a - s * b;
                v[i0 + stride] = s * a + c * b;
            }
            base += block;
        }
    }
}

/// Parity sign of a flattened rank-k component index under the half-turn.
pub fn parity_sign(mut idx: usize, rank: usize, d: usize) -> f64 {
    let mut s = 1.0;
    for _ in 0..rank {
        s *= flip_sign(idx % d);
        idx /= d;
    }
    s
}

/// A field on grid nodes: `ncomp = d^rank` Cartesian components per node, stored
/// `[(i * n_ang + l) * ncomp + c]`. In 3D the stored values are those on the meridian.
#[derive(Clone)]
pub struct GridField {
    pub grid: Arc<Grid>,
    pub rank: usize,
    pub values: Vec<f64>,
    /// Homogeneity degree used for radial interpolation (values ~ r^{−p}).
    pub degree: f64,
    pub closure: Option<Arc<HomogeneousField>>,
}

impl fmt::Debug for GridField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridField").field("grid", &self.grid.cfg).field("rank", &self.rank).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormFlavor {
    /// |x|^{θ+|α|}
    Homogeneous,
    /// (1+|x|)^{θ+|α|}
    Inhomogeneous,
    /// (√t+|x|)^{θ+|α|} at t = 1, equal to the inhomogeneous weight for self-similar fields
    SpaceTime,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct WeightedNorm {
    pub m: usize,
    pub theta: f64,
    pub value: f64,
    pub flavor: NormFlavor,
}

impl GridField {
    pub fn zeros(grid: Arc<Grid>, rank: usize) -> Self {
        let nc = grid.d.pow(rank as u32);
        GridField { values: vec![0.0; grid.n_nodes() * nc], grid, rank, degree: 1.0 + rank as f64 - 1.0, closure: None }
    }

    /// Vector field from a function of the node position.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> Vec<f64> + Sync) -> Self {
        use rayon::prelude::*;
        let d = grid.d;
        let nl = grid.n_ang();
        let chunks: Vec<Vec<f64>> = (0..grid.n_nodes())
            .into_par_iter()
            .map(|k| {
                let v = f(&grid.node(k / nl, k % nl));
                assert_eq!(v.len(), d);
                v
            })
            .collect();
        GridField { values: chunks.concat(), grid, rank: 1, degree: 1.0, closure: None }
    }

    pub fn from_homogeneous(grid: Arc<Grid>, a: &Arc<HomogeneousField>) -> Result<Self> {
        if grid.d != a.d {
            return Err(Error::Domain("grid and datum dimensions differ".into()));
        }
        let mut g = Self::from_fn(grid, |x| a.eval_unchecked(x));
        g.closure = Some(a.clone());
        Ok(g)
    }

    pub fn ncomp(&self) -> usize {
        self.grid.d.pow(self.rank as u32)
    }

    pub fn at(&self, i: usize, l: usize) -> &[f64] {
        let nc = self.ncomp();
        let k = (i * self.grid.n_ang() + l) * nc;
        &self.values[k..k + nc]
    }

    pub fn with_closure(mut self, a: Arc<HomogeneousField>) -> Self {
        self.closure = Some(a);
        self
    }

    /// Interpolated value at x (r_min ≤ |x| ≤ R_max), closure value beyond R_max.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = norm2(x).sqrt();
        if x.len() != self.grid.d {
            return Err(Error::Domain("dimension mismatch".into()));
        }
        if r < self.grid.cfg.r_min * (1.0 - 1e-12) {
            return Err(Error::OutOfDomain(format!("|x| = {r} below r_min = {}", self.grid.cfg.r_min)));
        }
        if r > self.grid.cfg.r_max * (1.0 + 1e-12) {
            if let Some(a) = &self.closure {
                return Ok(a.eval_unchecked(x));
            }
        }
        Ok(self.interpolate(x))
    }

    /// Interpolation with r clamped to the grid and homogeneous extension of degree `degree`.
    pub fn interpolate(&self, x: &[f64]) -> Vec<f64> {
        let st = self.grid.stencil(x);
        let nc = self.ncomp();
        let nl = self.grid.n_ang();
        let mut out = vec![0.0; nc];
        let rc = st.r.clamp(self.grid.cfg.r_min, self.grid.cfg.r_max);
        for (a, wr) in st.wr.iter().enumerate() {
            let i = st.i0 + a;
            let scale = wr * (self.grid.radii[i] / rc).powf(self.degree);
            for &(l, wa, flip) in st.ang.iter().take(st.n_ang) {
                let w = scale * wa;
                let base = (i * nl + l) * nc;
                for c in 0..nc {
                    let s = if flip { parity_sign(c, self.rank, self.grid.d) } else { 1.0 };
                    out[c] += w * s * self.values[base + c];
                }
            }
        }
        if st.r > self.grid.cfg.r_max {
            let f = (self.grid.cfg.r_max / st.r).powf(self.degree);
            out.iter_mut().for_each(|v| *v *= f);
        }
        if self.grid.layout == Layout::Meridian {
            rotate_tensor(&mut out, self.rank, st.azimuth);
        }
        out
    }

    /// Cartesian gradient; output rank+1 with the derivative index first.
    pub fn gradient(&self) -> GridField {
        let g = &self.grid;
        let (d, nr, nl, nc) = (g.d, g.n_r(), g.n_ang(), self.ncomp());
        let nco = nc * d;
        let mut out = vec![0.0; g.n_nodes() * nco];
        // derivative in log r, fourth order
        let mut dl = vec![0.0; self.values.len()];
        for l in 0..nl {
            for c in 0..nc {
                let col: Vec<f64> = (0..nr).map(|i| self.values[(i * nl + l) * nc + c]).collect();
                let der = fd_derivative(&col, g.log_h);
                for i in 0..nr {
                    dl[(i * nl + l) * nc + c] = der[i];
                }
            }
        }
        // angular derivative, spectral
        let mut da = vec![0.0; self.values.len()];
        for i in 0..nr {
            for c in 0..nc {
                match g.layout {
                    Layout::Circle => {
                        let col: Vec<f64> = (0..nl).map(|l| self.values[(i * nl + l) * nc + c]).collect();
                        let der = spectral_derivative(&col, 1);
                        for l in 0..nl {
                            da[(i * nl + l) * nc + c] = der[l];
                        }
                    }
                    Layout::Meridian => {
                        // periodic extension over φ ∈ (0, 2π): φ → 2π − φ with parity signs
                        let s = parity_sign(c, self.rank, d);
                        let mut col: Vec<f64> = (0..nl).map(|l| self.values[(i * nl + l) * nc + c]).collect();
                        for l in (0..nl).rev() {
                            col.push(s * self.values[(i * nl + l) * nc + c]);
                        }
                        let der = spectral_derivative(&col, 1);
                        // samples are at φ_l = (l+½)π/n, uniformly spaced with step π/n over 2π
                        for l in 0..nl {
                            da[(i * nl + l) * nc + c] = der[l];
                        }
                    }
                }
            }
        }
        for i in 0..nr {
            let r = g.radii[i];
            for l in 0..nl {
                let base = (i * nl + l) * nc;
                let ob = (i * nl + l) * nco;
                let a = g.angles[l];
                let (er, ea, epsi): (Vec<f64>, Vec<f64>, Option<Vec<f64>>) = match g.layout {
                    Layout::Circle => (vec![a.cos(), a.sin()], vec![-a.sin(), a.cos()], None),
                    Layout::Meridian => (vec![a.sin(), 0.0, a.cos()], vec![a.cos(), 0.0, -a.sin()], Some(vec![0.0, 1.0, 0.0])),
                };
                let dpsi = if g.layout == Layout::Meridian { Some(azimuthal_derivative(&self.values[base..base + nc], self.rank)) } else { None };
                let rho = r * a.sin();
                for j in 0..d {
                    for c in 0..nc {
                        let mut v = er[j] * dl[base + c] / r + ea[j] * da[base + c] / r;
                        if let (Some(ep), Some(dp)) = (&epsi, &dpsi) {
                            v += ep[j] * dp[c] / rho;
                        }
                        out[ob + j * nc + c] = v;
                    }
                }
            }
        }
        GridField { grid: self.grid.clone(), rank: self.rank + 1, values: out, degree: self.degree + 1.0, closure: None }
    }

    /// Contraction over the first two indices (trace), e.g. divergence of a gradient.
    pub fn trace_first_two(&self) -> GridField {
        assert!(self.rank >= 2);
        let d = self.grid.d;
        let nc = self.ncomp();
        let inner = nc / (d * d);
        let mut out = vec![0.0; self.grid.n_nodes() * inner];
        for k in 0..self.grid.n_nodes() {
            for j in 0..d {
                for c in 0..inner {
                    out[k * inner + c] += self.values[k * nc + (j * d + j) * inner + c];
                }
            }
        }
        GridField { grid: self.grid.clone(), rank: self.rank - 2, values: out, degree: self.degree + 2.0, closure: None }
    }

    /// Componentwise linear combination α·self + β·other.
    pub fn axpby(&self, alpha: f64, other: &GridField, beta: f64) -> GridField {
        assert_eq!(self.values.len(), other.values.len());
        let mut g = self.clone();
        for (a, b) in g.values.iter_mut().zip(&other.values) {
            *a = alpha * *a + beta * b;
        }
        g
    }

    /// Discrete sup over nodes of the weighted derivative magnitudes, m ≤ 3.
    pub fn weighted_norm(&self, m: usize, theta: f64, flavor: NormFlavor) -> Result<WeightedNorm> {
        if m > 3 {
            return Err(Error::Unsupported(format!("derivative order {m} > 3")));
        }
        let mut f = self.clone();
        let mut value = 0.0f64;
        for order in 0..=m {
            if order > 0 {
                f = f.gradient();
            }
            let d = self.grid.d;
            let inner = self.ncomp();
            let outer = f.ncomp() / inner;
            let nl = self.grid.n_ang();
            let trim = if order > 0 { 2 } else { 0 };
            for i in trim..self.grid.n_r() - trim {
                let r = self.grid.radii[i];
                let w = match flavor {
                    NormFlavor::Homogeneous => r,
                    _ => 1.0 + r,
                }
                .powf(theta + order as f64);
                for l in 0..nl {
                    let base = (i * nl + l) * f.ncomp();
                    for o in 0..outer {
                        let s: f64 = (0..inner).map(|c| f.values[base + o * inner + c].powi(2)).sum();
                        value = value.max(w * s.sqrt());
                    }
                }
            }
            let _ = d;
        }
        Ok(WeightedNorm { m, theta, value, flavor })
    }

    /// Max over nodes of (1+r)|f|.
    pub fn sup_e01(&self) -> f64 {
        let nl = self.grid.n_ang();
        let nc = self.ncomp();
        let mut v = 0.0f64;
        for i in 0..self.grid.n_r() {
            let w = 1.0 + self.grid.radii[i];
            for l in 0..nl {
                let b = (i * nl + l) * nc;
                let s: f64 = self.values[b..b + nc].iter().map(|x| x * x).sum();
                v = v.max(w * s.sqrt());
            }
        }
        v
    }

    /// Normalised weak divergence on test functions inside the grid.
    pub fn weak_divergence(&self) -> f64 {
        let rmin = self.grid.cfg.r_min;
        let f = |x: &[f64]| if norm2(x).sqrt() < rmin { None } else { self.eval(x).ok() };
        weak_divergence(self.grid.d, &f, &[0.5, 2.0, 10.0])
    }
}

/// ∂_ψ at azimuth 0 of an axisymmetric rank-k field: the generator J = [[0,−1,0],[1,0,0],[0,0,0]]
/// acting on every index.
fn azimuthal_derivative(v: &[f64], rank: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for p in 0..rank {
        let stride = 3usize.pow((rank - 1 - p) as u32);
        for (idx, o) in out.iter_mut().enumerate() {
            let comp = (idx / stride) % 3;
            match comp {
                0 => *o -= v[idx + stride],
                1 => *o += v[idx - stride],
                _ => {}
            }
        }
    }
    out
}

/// Fourth-order finite-difference derivative on a uniform grid, one-sided at the ends.
pub fn fd_derivative(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = if i >= 2 && i + 2 < n {
            (f[i - 2] - 8.0 * f[i - 1] + 8.0 * f[i + 1] - f[i + 2]) / (12.0 * h)
        } else if i < 2 {
            (-25.0 * f[i] + 48.0 * f[i + 1] - 36.0 * f[i + 2] + 16.0 * f[i + 3] - 3.0 * f[i + 4]) / (12.0 * h)
        } else {
            (25.0 * f[i] - 48.0 * f[i - 1] + 36.0 * f[i - 2] - 16.0 * f[i - 3] + 3.0 * f[i - 4]) / (12.0 * h)
        };
    }
    out
}

/// Weighted norm of a homogeneous datum: derivatives by Cartesian central differences of the closure,
/// sampled on the nodes of its sphere rule at |x| = 1 (scale invariant for θ = 1).
pub fn datum_norm(a: &HomogeneousField, m: usize, theta: f64, flavor: NormFlavor) -> Result<WeightedNorm> {
    if m > 3 {
        return Err(Error::Unsupported(format!("derivative order {m} > 3")));
    }
    let grid_radii: Vec<f64> = match flavor {
        NormFlavor::Homogeneous => vec![1.0],
        _ => (0..40).map(|k| 0.05 * 1.3f64.powi(k)).collect(),
    };
    let mut value = 0.0f64;
    for &r in &grid_radii {
        for w in &a.rule.nodes {
            let x: Vec<f64> = w.iter().map(|v| v * r).collect();
            for order in 0..=m {
                let wgt = match flavor {
                    NormFlavor::Homogeneous => r,
                    _ => 1.0 + r,
                }
                .powf(theta + order as f64);
                let mag = max_derivative(&|y: &[f64]| a.eval_unchecked(y), &x, order, 1e-3 * r);
                value = value.max(wgt * mag);
            }
        }
    }
    Ok(WeightedNorm { m, theta, value, flavor })
}

/// max over multi-indices |α| = order of |∂^α f(x)| (Euclidean over components), central differences.
pub fn max_derivative(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], order: usize, h: f64) -> f64 {
    let d = x.len();
    if order == 0 {
        return norm2(&f(x)).sqrt();
    }
    let mut best = 0.0f64;
    let mut idx = vec![0usize; order];
    loop {
        // nested central differences
        let mut acc: Vec<f64> = vec![0.0; f(x).len()];
        let combos = 1usize << order;
        for mask in 0..combos {
            let mut y = x.to_vec();
            let mut sign = 1.0;
            for (k, &dir) in idx.iter().enumerate() {
                if mask >> k & 1 == 1 {
                    y[dir] += h;
                } else {
                    y[dir] -= h;
                    sign = -sign;
                }
            }
            for (a, v) in acc.iter_mut().zip(f(&y)) {
                *a += sign * v;
            }
        }
        let scale = (2.0 * h).powi(order as i32);
        best = best.max(norm2(&acc).sqrt() / scale);
        // next non-decreasing multi-index
        let mut k = order;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if idx[k] + 1 < d {
                idx[k] += 1;
                for j in k + 1..order {
                    idx[j] = idx[k];
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datum_values_and_divergence() {
        let a = make_datum(DatumKind::Rotational3d, 0.05).unwrap();
        let v = a.eval(&[1.0, 0.0, 0.0]).unwrap();
        assert!((v[1] - 0.05).abs() < 1e-16 && v[0] == 0.0 && v[2] == 0.0);
        for k in [DatumKind::Rotational2d, DatumKind::Anisotropic2d, DatumKind::Rotational3d] {
            let a = make_datum(k, 0.05).unwrap();
            assert!(a.weak_divergence() < 1e-8, "{:?}", a.kind);
        }
        assert!(make_datum(DatumKind::Custom("x".into()), 0.1).is_err());
        assert!(DatumKind::parse("nope").is_err());
    }

    #[test]
    fn laplacian_routes_agree() {
        let a = make_datum(DatumKind::Anisotropic2d, 0.05).unwrap();
        let x = [1.3, -0.7];
        let exact = a.laplacian(&x).unwrap();
        let r = norm2(&x).sqrt();
        let w: Vec<f64> = x.iter().map(|v| v / r).collect();
        let ls = great_circle_laplacian(2, &w, &|p: &[f64]| a.trace_at(p));
        let tr = a.trace_at(&w);
        for j in 0..2 {
            let gc = (tr[j] + ls[j]) / r.powi(3);
            assert!((gc - exact[j]).abs() < 1e-14);
        }
        // 4D custom datum uses the great-circle route
        let eps = 0.05;
        let a4 = HomogeneousField::custom(4, eps, "rot4", Arc::new(move |w: &[f64]| vec![-eps * w[1], eps * w[0], -eps * w[3], eps * w[2]])).unwrap();
        let x = [0.4, 1.1, -0.3, 0.8];
        let r2 = norm2(&x);
        // Δ(x_i r^{-2}) = x_i (−2)(−2+4+2−2) r^{-4} = −4 x_i r^{-4} in d = 4
        let lap = a4.laplacian(&x).unwrap();
        let av = a4.eval(&x).unwrap();
        for j in 0..4 {
            assert!((lap[j] + 4.0 * av[j] / r2).abs() < 1e-13);
        }
    }

    #[test]
    fn grid_interpolation_converges() {
        let a = Arc::new(make_datum(DatumKind::Anisotropic2d, 0.05).unwrap());
        let mut errs = vec![];
        for (nr, na) in [(48, 32), (96, 64)] {
            let g = Arc::new(Grid::new(2, GridConfig { n_radial: nr, n_angular: na, ..Default::default() }).unwrap());
            // non-homogeneous test field to exercise the radial interpolation
            let f = |x: &[f64]| {
                let r2 = norm2(x);
                let v = a.eval_unchecked(x);
                v.iter().map(|c| c * (1.0 - (-r2 / 4.0).exp())).collect::<Vec<f64>>()
            };
            let gf = GridField::from_fn(g.clone(), f);
            let mut e = 0.0f64;
            for k in 0..50 {
                let r = 0.1 * 1.17f64.powi(k);
                let th = 0.37 * k as f64;
                let x = [r * th.cos(), r * th.sin()];
                let v = gf.eval(&x).unwrap();
                let ex = f(&x);
                e = e.max(r * ((v[0] - ex[0]).abs() + (v[1] - ex[1]).abs()));
            }
            errs.push(e);
        }
        assert!(errs[1] < errs[0] / 4.0, "{errs:?}");
        assert!(errs[1] < 1e-6, "{errs:?}");
    }

    #[test]
    fn meridian_grid_reproduces_axisymmetric_field() {
        let a = Arc::new(make_datum(DatumKind::Rotational3d, 0.05).unwrap());
        let g = Arc::new(Grid::new(3, GridConfig { n_radial: 48, n_angular: 48, ..Default::default() }).unwrap());
        let gf = GridField::from_homogeneous(g.clone(), &a).unwrap();
        for x in [[0.3, -0.8, 0.2], [1.0, 2.0, 3.0], [-5.0, 0.1, -9.0], [0.0, 0.0, 2.0]] {
            let v = gf.eval(&x).unwrap();
            let e = a.eval(&x).unwrap();
            let r = norm2(&x).sqrt();
            for j in 0..3 {
                assert!(r * (v[j] - e[j]).abs() < 1e-9, "{x:?}");
            }
        }
        assert!(gf.eval(&[0.01, 0.0, 0.0]).is_err());
        let far = gf.eval(&[500.0, 0.0, 0.0]).unwrap();
        assert!((far[1] - 0.05 / 500.0).abs() < 1e-16);
    }

    #[test]
    fn gradient_matches_analytic() {
        for (d, kind, na) in [(2, DatumKind::Anisotropic2d, 32), (3, DatumKind::Rotational3d, 16)] {
            let a = Arc::new(make_datum(kind, 0.05).unwrap());
            let g = Arc::new(Grid::new(d, GridConfig { n_radial: 96, n_angular: na, ..Default::default() }).unwrap());
            let gf = GridField::from_homogeneous(g.clone(), &a).unwrap();
            let grad = gf.gradient();
            let lap = grad.gradient().trace_first_two();
            for &(i, l) in &[(40usize, 3usize), (60, 7), (20, 1)] {
                let x = g.node(i, l);
                let gv = grad.at(i, l);
                let h = 1e-5 * g.radii[i];
                for j in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fp = a.eval_unchecked(&xp);
                    let fm = a.eval_unchecked(&xm);
                    for c in 0..d {
                        let fd = (fp[c] - fm[c]) / (2.0 * h);
                        let scale = 0.05 / g.radii[i].powi(2);
                        assert!((gv[j * d + c] - fd).abs() < 1e-5 * scale, "d={d} node ({i},{l}) {j}{c}");
                    }
                }
                let el = a.laplacian(&x).unwrap();
                let lv = lap.at(i, l);
                for c in 0..d {
                    assert!((lv[c] - el[c]).abs() < 1e-4 * 0.05 / g.radii[i].powi(3), "lap d={d}");
                }
            }
        }
    }

    #[test]
    fn norms() {
        let a = Arc::new(make_datum(DatumKind::Rotational2d, 0.05).unwrap());
        let n = datum_norm(&a, 0, 1.0, NormFlavor::Homogeneous).unwrap();
        assert!((n.value - 0.05).abs() < 1e-14);
        let g = Arc::new(Grid::new(2, GridConfig::default()).unwrap());
        let gf = GridField::from_homogeneous(g.clone(), &a).unwrap();
        let n = gf.weighted_norm(0, 1.0, NormFlavor::Homogeneous).unwrap();
        assert!((n.value - 0.05).abs() < 1e-14);
        let a2 = Arc::new(make_datum(DatumKind::Rotational2d, 0.1).unwrap());
        let gf2 = GridField::from_homogeneous(g.clone(), &a2).unwrap();
        assert_eq!(gf2.weighted_norm(0, 1.0, NormFlavor::Homogeneous).unwrap().value, 2.0 * n.value);
        let z = GridField::zeros(g, 1);
        assert_eq!(z.weighted_norm(2, 1.0, NormFlavor::Inhomogeneous).unwrap().value, 0.0);
        assert!(gf.weighted_norm(4, 1.0, NormFlavor::Homogeneous).is_err());
        let n1 = gf.weighted_norm(1, 1.0, NormFlavor::Homogeneous).unwrap();
        assert!(n1.value >= n.value);
    }
}
