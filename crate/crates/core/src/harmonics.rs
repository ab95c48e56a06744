//! Angular harmonic expansions of degree −1 homogeneous fields: Fourier modes on S¹,
//! real spherical harmonics on S².
//!
//! A term `c·Y_ℓ(ω)/|x|` equals `P_ℓ(x)|x|^{−ℓ−1}` with `P_ℓ` a solid harmonic, which gives
//! closed forms for the iterated Laplacian and for the heat flow:
//!
//! ```text
//! Δ(r^p Y_ℓ) = (p(p+d−2) − ℓ(ℓ+d−2)) r^{p−2} Y_ℓ
//! e^{tΔ}(r^{−1} Y_ℓ) = Y_ℓ r^ℓ Γ((n−α)/2)/Γ(n/2) (4t)^{−α/2} M(α/2, n/2, −r²/4t),  α=ℓ+1, n=d+2ℓ
//! ```

use crate::error::{Error, Result};
use crate::special::{kummer_m_neg, ln_gamma};
use crate::sphere::build_rule;
use std::f64::consts::PI;

#[derive(Debug, Clone)]
pub struct Harmonics {
    pub d: usize,
    pub lmax: usize,
    /// (ℓ, m) per basis function.
    pub basis: Vec<(usize, i64)>,
    /// coeffs[c][b]: coefficient of basis b in component c.
    pub coeffs: Vec<Vec<f64>>,
    /// Max reconstruction error on a check rule; ~0 for band-limited traces.
    pub truncation_error: f64,
}

pub fn basis_list(d: usize, lmax: usize) -> Vec<(usize, i64)> {
    let mut b = Vec::new();
    for l in 0..=lmax {
        if d == 2 {
            if l == 0 {
                b.push((0, 0));
            } else {
                b.push((l, l as i64));
                b.push((l, -(l as i64)));
            }
        } else {
            for m in -(l as i64)..=(l as i64) {
                b.push((l, m));
            }
        }
    }
    b
}

/// Orthonormal basis values at unit ω, in `basis_list` order.
pub fn basis_values(d: usize, lmax: usize, w: &[f64]) -> Vec<f64> {
    if d == 2 {
        let th = w[1].atan2(w[0]);
        let mut out = Vec::with_capacity(2 * lmax + 1);
        out.push(1.0 / (2.0 * PI).sqrt());
        let s = 1.0 / PI.sqrt();
        for l in 1..=lmax {
            let a = l as f64 * th;
            out.push(s * a.cos());
            out.push(s * a.sin());
        }
        return out;
    }
    let z = w[2].clamp(-1.0, 1.0);
    let st = (w[0] * w[0] + w[1] * w[1]).sqrt();
    let ps = w[1].atan2(w[0]);
    let pbar = normalized_legendre(lmax, z, st);
    let mut out = Vec::with_capacity((lmax + 1) * (lmax + 1));
    for l in 0..=lmax {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            let p = pbar[l * (lmax + 1) + am];
            let v = if m == 0 {
                p
            } else if m > 0 {
                2f64.sqrt() * p * (am as f64 * ps).cos()
            } else {
                2f64.sqrt() * p * (am as f64 * ps).sin()
            };
            out.push(v);
        }
    }
    out
}

// P̄_ℓ^m(z) with ∫ over the sphere of (P̄ cos mψ)² normalised to 1/2 (m>0) or 1 (m=0)
fn normalized_legendre(lmax: usize, z: f64, s: f64) -> Vec<f64> {
    let n = lmax + 1;
    let mut p = vec![0.0; n * n];
    p[0] = 1.0 / (4.0 * PI).sqrt();
    for m in 1..=lmax {
        let mf = m as f64;
        p[m * n + m] = ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s * p[(m - 1) * n + m - 1];
    }
    for m in 0..lmax {
        p[(m + 1) * n + m] = (2.0 * m as f64 + 3.0).sqrt() * z * p[m * n + m];
    }
    for m in 0..=lmax {
        for l in (m + 2)..=lmax {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            p[l * n + m] = a * (z * p[(l - 1) * n + m] - b * p[(l - 2) * n + m]);
        }
    }
    p
}

impl Harmonics {
    /// Project a vector-valued trace onto harmonics of degree ≤ lmax.
    pub fn project(d: usize, ncomp: usize, lmax: usize, trace: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        if d != 2 && d != 3 {
            return Err(Error::Unsupported(format!("harmonic expansion in d = {d}")));
        }
        let basis = basis_list(d, lmax);
        let rule = build_rule(d, 2 * lmax + 4)?;
        let mut coeffs = vec![vec![0.0; basis.len()]; ncomp];
        for (w, q) in rule.nodes.iter().zip(&rule.weights) {
            let y = basis_values(d, lmax, w);
            let f = trace(w);
            for (c, fc) in f.iter().enumerate() {
                for (b, yb) in y.iter().enumerate() {
                    coeffs[c][b] += q * fc * yb;
                }
            }
        }
        for row in coeffs.iter_mut() {
            for v in row.iter_mut() {
                if v.abs() < 1e-15 {
                    *v = 0.0;
                }
            }
        }
        // drop trailing degrees with no content
        let used = basis
            .iter()
            .enumerate()
            .filter(|(b, _)| coeffs.iter().any(|row| row[*b] != 0.0))
            .map(|(_, (l, _))| *l)
            .max()
            .unwrap_or(0);
        let nb = basis_list(d, used).len();
        let basis = basis[..nb].to_vec();
        let coeffs = coeffs.into_iter().map(|row| row[..nb].to_vec()).collect();
        let mut h = Harmonics { d, lmax: used, basis, coeffs, truncation_error: 0.0 };
        let check = build_rule(d, 2 * lmax + 7)?;
        let mut err = 0.0f64;
        for w in &check.nodes {
            let f = trace(w);
            let g = h.trace(w);
            for (a, b) in f.iter().zip(&g) {
                err = err.max((a - b).abs());
            }
        }
        h.truncation_error = err;
        Ok(h)
    }

    pub fn ncomp(&self) -> usize {
        self.coeffs.len()
    }

    /// Reconstructed trace at unit ω.
    pub fn trace(&self, w: &[f64]) -> Vec<f64> {
        let y = basis_values(self.d, self.lmax, w);
        self.coeffs.iter().map(|c| c.iter().zip(&y).map(|(a, b)| a * b).sum()).collect()
    }

    /// Sum over terms of c·mult(ℓ)·Y(ω).
    fn weighted_trace(&self, w: &[f64], mult: impl Fn(usize) -> f64) -> Vec<f64> {
        let y = basis_values(self.d, self.lmax, w);
        let m: Vec<f64> = self.basis.iter().map(|(l, _)| mult(*l)).collect();
        self.coeffs
            .iter()
            .map(|c| c.iter().zip(&y).zip(&m).map(|((a, b), s)| a * b * s).sum())
            .collect()
    }

    /// Δ^k of the degree −1 field at x ≠ 0.
    pub fn lap_power(&self, x: &[f64], k: usize) -> Vec<f64> {
        let r = crate::kernels::norm2(x).sqrt();
        let w: Vec<f64> = x.iter().map(|v| v / r).collect();
        let d = self.d as f64;
        let v = self.weighted_trace(&w, |l| {
            let lf = l as f64;
            (0..k)
                .map(|m| {
                    let p = -1.0 - 2.0 * m as f64;
                    p * (p + d - 2.0) - lf * (lf + d - 2.0)
                })
                .product()
        });
        let s = r.powi(-1 - 2 * k as i32);
        v.into_iter().map(|c| c * s).collect()
    }

    /// Exact e^{tΔ}a(x), any x (x = 0 allowed).
    pub fn heat(&self, x: &[f64], t: f64) -> Vec<f64> {
        let r = crate::kernels::norm2(x).sqrt();
        let d = self.d as f64;
        let u = r * r / (4.0 * t);
        let radial = |l: usize| {
            let alpha = l as f64 + 1.0;
            let n = d + 2.0 * l as f64;
            let c = (ln_gamma((n - alpha) / 2.0) - ln_gamma(n / 2.0)).exp() * (4.0 * t).powf(-alpha / 2.0);
            c * kummer_m_neg(alpha / 2.0, n / 2.0, u)
        };
        if r == 0.0 {
            // only ℓ = 0 survives; Y_0 is constant
            let mut w = vec![0.0; self.d];
            w[0] = 1.0;
            return self.weighted_trace(&w, |l| if l == 0 { radial(0) } else { 0.0 });
        }
        let w: Vec<f64> = x.iter().map(|v| v / r).collect();
        self.weighted_trace(&w, |l| r.powi(l as i32) * radial(l))
    }

    /// Radial factor F_ℓ(r) = r^ℓ c_ℓ(t) M(α/2, n/2, −r²/4t) of the heat flow and its r-derivative.
    fn heat_radial(&self, l: usize, r: f64, t: f64) -> (f64, f64) {
        let d = self.d as f64;
        let alpha = l as f64 + 1.0;
        let n = d + 2.0 * l as f64;
        let (a, b) = (alpha / 2.0, n / 2.0);
        let c = (ln_gamma((n - alpha) / 2.0) - ln_gamma(b)).exp() * (4.0 * t).powf(-a);
        let u = r * r / (4.0 * t);
        let m0 = kummer_m_neg(a, b, u);
        let m1 = -(a / b) * kummer_m_neg(a + 1.0, b + 1.0, u);
        let rl = r.powi(l as i32);
        let drl = if l == 0 { 0.0 } else { l as f64 * r.powi(l as i32 - 1) };
        (c * rl * m0, c * (drl * m0 + rl * m1 * r / (2.0 * t)))
    }

    /// ∇ e^{tΔ}a(x); entry [i * ncomp + c] = ∂_i (·)_c.
    pub fn heat_gradient(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.d;
        let nc = self.ncomp();
        let r = crate::kernels::norm2(x).sqrt();
        if r < 1e-6 * t.sqrt() {
            return self.heat_gradient_fd(x, t);
        }
        let w: Vec<f64> = x.iter().map(|v| v / r).collect();
        let radial: Vec<(f64, f64)> = (0..=self.lmax).map(|l| self.heat_radial(l, r, t)).collect();
        let y = basis_values(d, self.lmax, &w);
        // gradient of the 0-homogeneous extension of each basis function at ω
        let h = 1e-3;
        let mut dy = vec![vec![0.0; y.len()]; d];
        let mut p = w.clone();
        for i in 0..d {
            let mut vals = Vec::with_capacity(4);
            for off in [-2.0, -1.0, 1.0, 2.0] {
                p[i] = w[i] + off * h;
                vals.push(basis_values(d, self.lmax, &unit(&p)));
            }
            p[i] = w[i];
            for b in 0..y.len() {
                dy[i][b] = (vals[0][b] - 8.0 * vals[1][b] + 8.0 * vals[2][b] - vals[3][b]) / (12.0 * h);
            }
        }
        let mut g = vec![0.0; d * nc];
        for c in 0..nc {
            for (b, &(l, _)) in self.basis.iter().enumerate() {
                let co = self.coeffs[c][b];
                if co == 0.0 {
                    continue;
                }
                let (f, df) = radial[l];
                for i in 0..d {
                    g[i * nc + c] += co * (y[b] * df * w[i] + f / r * dy[i][b]);
                }
            }
        }
        g
    }

    fn heat_gradient_fd(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.d;
        let nc = self.ncomp();
        let h = 1e-3 * (crate::kernels::norm2(x).sqrt()).max(t.sqrt());
        let mut g = vec![0.0; d * nc];
        let mut y = x.to_vec();
        for i in 0..d {
            let mut vals = [vec![], vec![], vec![], vec![]];
            for (s, off) in [-2.0, -1.0, 1.0, 2.0].iter().enumerate() {
                y[i] = x[i] + off * h;
                vals[s] = self.heat(&y, t);
            }
            y[i] = x[i];
            for c in 0..nc {
                g[i * nc + c] = (vals[0][c] - 8.0 * vals[1][c] + 8.0 * vals[2][c] - vals[3][c]) / (12.0 * h);
            }
        }
        g
    }
}

fn unit(p: &[f64]) -> Vec<f64> {
    let n = crate::kernels::norm2(p).sqrt();
    p.iter().map(|v| v / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_basis() {
        for d in [2usize, 3] {
            let lmax = 6;
            let rule = build_rule(d, 2 * lmax + 2).unwrap();
            let nb = basis_list(d, lmax).len();
            let mut gram = vec![0.0; nb * nb];
            for (w, q) in rule.nodes.iter().zip(&rule.weights) {
                let y = basis_values(d, lmax, w);
                for a in 0..nb {
                    for b in 0..nb {
                        gram[a * nb + b] += q * y[a] * y[b];
                    }
                }
            }
            for a in 0..nb {
                for b in 0..nb {
                    let e = if a == b { 1.0 } else { 0.0 };
                    assert!((gram[a * nb + b] - e).abs() < 1e-12, "d={d} {a} {b}");
                }
            }
        }
    }

    #[test]
    fn lamb_oseen_heat_flow() {
        let eps = 0.05;
        let tr = move |w: &[f64]| vec![-eps * w[1], eps * w[0]];
        let h = Harmonics::project(2, 2, 4, &tr).unwrap();
        assert!(h.truncation_error < 1e-15);
        for &r in &[0.1, 1.0, 3.0, 9.0, 20.0] {
            let x = [r * 0.6, r * 0.8];
            let v = h.heat(&x, 1.0);
            let f = 1.0 - (-r * r / 4.0f64).exp();
            let e = [-eps * x[1] / (r * r) * f, eps * x[0] / (r * r) * f];
            assert!((v[0] - e[0]).abs() < 1e-15 && (v[1] - e[1]).abs() < 1e-15, "r={r}");
            assert!(h.lap_power(&x, 1).iter().all(|c| c.abs() < 1e-16));
        }
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let tr = |w: &[f64]| vec![w[0] * w[1] - 0.3 * w[2], w[2] * w[2] + 0.1, w[0]];
        let h = Harmonics::project(3, 3, 4, &tr).unwrap();
        for (x, t) in [([0.3, -0.2, 0.5], 1.0), ([2.0, 1.0, -3.0], 0.7), ([0.01, 0.02, 0.0], 2.0)] {
            let a = h.heat_gradient(&x, t);
            let b = h.heat_gradient_fd(&x, t);
            let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-8 * scale, "{p} {q}");
            }
        }
    }

    #[test]
    fn swirl_laplacian() {
        // Δa = −2a/r² for the 3D swirl
        let eps = 0.05;
        let tr = move |w: &[f64]| vec![-eps * w[1], eps * w[0], 0.0];
        let h = Harmonics::project(3, 3, 3, &tr).unwrap();
        let x = [1.0, 2.0, -0.5];
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let lap = h.lap_power(&x, 1);
        let a = [-eps * x[1] / r2, eps * x[0] / r2, 0.0];
        for j in 0..3 {
            assert!((lap[j] + 2.0 * a[j] / r2).abs() < 1e-15);
        }
    }
}
