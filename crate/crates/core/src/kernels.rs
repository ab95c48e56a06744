//! Heat kernel, Oseen kernel `K` (kernel of e^{tΔ}P), the kernel `F` of e^{tΔ}P div,
//! and their homogeneous parts.
//!
//! With `u = |x|²/(4t)`, `a = d/2` and `φ_n(u) = (−1)^n u^{−(a+n)} γ(a+n, u)`:
//!
//! ```text
//! K_jk   = (4πt)^{-a} [ δ_jk (e^{-u} − φ0/2) − x_j x_k φ1 / (4t) ]
//! F_j;hk = (4πt)^{-a} [ −δ_jk x_h (e^{-u} + φ1/2) / (2t) − (δ_hj x_k + δ_hk x_j) φ1 / (4t)
//!                       − x_j x_k x_h φ2 / (8t²) ]
//! ```
//!
//! Splitting `γ = Γ − Γ(·, u)` separates the homogeneous parts `K°`, `F°` from
//! Gaussian-decaying remainders.

use crate::error::{Error, Result};
use crate::special::{self, gamma};
use std::f64::consts::PI;

/// Past this value of |x|²/(4t) the Gaussian remainder is below 1e-14 relative.
const U_HOMOGENEOUS: f64 = 46.0;
const U_SERIES: f64 = 2.0;

/// Closed-form kernel evaluators for one dimension.
#[derive(Debug, Clone)]
pub struct OseenTensors {
    d: usize,
    a: f64,
    /// Prefactor of F° and Q: Γ((d+2)/2)/π^{d/2}.
    pub gamma_d: f64,
    /// Prefactor of K°: Γ(d/2)/(2π^{d/2}).
    pub kk_prefactor: f64,
    /// K(0, 1) = origin_constant · I.
    pub origin_constant: f64,
}

impl OseenTensors {
    pub fn new(d: usize) -> Result<Self> {
        if !(2..=4).contains(&d) {
            return Err(Error::Domain(format!("dimension {d} not in 2..=4")));
        }
        let a = d as f64 / 2.0;
        let kk = gamma(a) / (2.0 * PI.powf(a));
        Ok(OseenTensors {
            d,
            a,
            gamma_d: gamma(a + 1.0) / PI.powf(a),
            kk_prefactor: kk,
            origin_constant: (1.0 - 1.0 / d as f64) * (4.0 * PI).powf(-a),
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn check(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::Domain(format!("point has {} coordinates, expected {}", x.len(), self.d)));
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("time must be positive, got {t}")));
        }
        Ok(())
    }

    fn check_nonzero(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return Err(Error::Domain(format!("point has {} coordinates, expected {}", x.len(), self.d)));
        }
        let r2 = norm2(x);
        if r2 == 0.0 {
            return Err(Error::Singular("homogeneous kernel at x = 0".into()));
        }
        Ok(r2)
    }

    /// g_t(x) = (4πt)^{-d/2} e^{-|x|²/(4t)}.
    pub fn gaussian(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check(x, t)?;
        Ok((4.0 * PI * t).powf(-self.a) * (-norm2(x) / (4.0 * t)).exp())
    }

    /// (φ0, φ1, φ2) at u ≥ 0.
    pub fn phis(&self, u: f64) -> [f64; 3] {
        let a = self.a;
        if u < U_SERIES {
            // φ_n = (−1)^n Σ_k (−u)^k / (k! (a+n+k))
            let mut out = [0.0; 3];
            for (n, o) in out.iter_mut().enumerate() {
                let an = a + n as f64;
                let mut term = 1.0;
                let mut sum = 1.0 / an;
                for k in 1..60 {
                    term *= -u / k as f64;
                    let add = term / (an + k as f64);
                    sum += add;
                    if add.abs() < 1e-17 * sum.abs() {
                        break;
                    }
                }
                *o = if n % 2 == 1 { -sum } else { sum };
            }
            return out;
        }
        let e = (-u).exp();
        // L_n = u^{-(a+n)} γ(a+n, u), L_{n+1} = ((a+n) L_n − e^{-u}) / u
        let l0 = match self.d {
            2 => -(-u).exp_m1() / u,
            3 => (0.5 * PI.sqrt() * special::erf(u.sqrt()) - u.sqrt() * e) / (u * u.sqrt()),
            4 => (1.0 - (1.0 + u) * e) / (u * u),
            _ => special::lower_scaled(a, u),
        };
        let l1 = (a * l0 - e) / u;
        let l2 = ((a + 1.0) * l1 - e) / u;
        [l0, -l1, l2]
    }

    /// Remainder parts R_n = u^{-(a+n)} Γ(a+n, u), n = 0, 1, 2, for u > 0.
    pub fn remainders(&self, u: f64) -> [f64; 3] {
        let a = self.a;
        let e = (-u).exp();
        let r0 = match self.d {
            2 => e / u,
            3 => (0.5 * PI.sqrt() * special::erfc(u.sqrt()) + u.sqrt() * e) / (u * u.sqrt()),
            4 => (1.0 + u) * e / (u * u),
            _ => special::upper_scaled(a, u),
        };
        let r1 = (a * r0 + e) / u;
        let r2 = ((a + 1.0) * r1 + e) / u;
        [r0, r1, r2]
    }

    /// Oseen kernel K(x, t) as a row-major d×d matrix.
    pub fn oseen_k(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check(x, t)?;
        let mut out = vec![0.0; self.d * self.d];
        self.k_into(x, t, &mut out);
        Ok(out)
    }

    /// Unchecked K(x, t) into `out` (len d²).
    pub fn k_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.d;
        let u = norm2(x) / (4.0 * t);
        let p = (4.0 * PI * t).powf(-self.a);
        let [p0, p1, _] = self.phis(u);
        let diag = p * ((-u).exp() - 0.5 * p0);
        let c = -p * p1 / (4.0 * t);
        for j in 0..d {
            for k in 0..d {
                out[j * d + k] = c * x[j] * x[k] + if j == k { diag } else { 0.0 };
            }
        }
    }

    /// F(x, t), indexed `(j*d + h)*d + k` for F_{j;h,k}.
    pub fn oseen_f(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check(x, t)?;
        let mut out = vec![0.0; self.d * self.d * self.d];
        self.f_into(x, t, &mut out);
        Ok(out)
    }

    /// Unchecked F(x, t) into `out` (len d³); switches to F° once the Gaussian part is negligible.
    pub fn f_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let r2 = norm2(x);
        let u = r2 / (4.0 * t);
        if u > U_HOMOGENEOUS {
            self.f_homog_into(x, r2, out);
            return;
        }
        let p = (4.0 * PI * t).powf(-self.a);
        let [_, p1, p2] = self.phis(u);
        let c_diag = -p * ((-u).exp() + 0.5 * p1) / (2.0 * t);
        let c_sig = -p * p1 / (4.0 * t);
        let c_cub = -p * p2 / (8.0 * t * t);
        fill_f(self.d, x, c_diag, c_sig, c_cub, out);
    }

    /// K°(x) = kk·(−δ|x|² + d x x)/|x|^{d+2}.
    pub fn k_homog(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r2 = self.check_nonzero(x)?;
        let d = self.d;
        let s = self.kk_prefactor / r2.powf(self.a + 1.0);
        let mut out = vec![0.0; d * d];
        for j in 0..d {
            for k in 0..d {
                out[j * d + k] = s * (d as f64 * x[j] * x[k] - if j == k { r2 } else { 0.0 });
            }
        }
        Ok(out)
    }

    /// F°(x) = |x|^{-d-4} Q(x).
    pub fn f_homog(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r2 = self.check_nonzero(x)?;
        let mut out = vec![0.0; self.d.pow(3)];
        self.f_homog_into(x, r2, &mut out);
        Ok(out)
    }

    fn f_homog_into(&self, x: &[f64], r2: f64, out: &mut [f64]) {
        let s = self.gamma_d / r2.powf(self.a + 2.0);
        // γ(σ r² − (d+2) xxx): δ_jk x_h and the other two σ terms share the coefficient
        let c = s * r2;
        fill_f(self.d, x, c, c, -s * (self.d as f64 + 2.0), out);
    }

    /// Q(x) = γ_d(σ_{jhk}(x)|x|² − (d+2) x_j x_h x_k), fully symmetric cubic.
    pub fn q_poly(&self, x: &[f64]) -> Vec<f64> {
        let r2 = norm2(x);
        let mut out = vec![0.0; self.d.pow(3)];
        let g = self.gamma_d;
        fill_f(self.d, x, g * r2, g * r2, -g * (self.d as f64 + 2.0), &mut out);
        out
    }

    /// (Ψ(ξ), Ψ̃(ξ)) with Ψ = |x|^d (K − K°) and Ψ̃ = |x|^{d+1}(F − F°), functions of ξ = x/√t.
    pub fn psi_remainders(&self, xi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let r2 = self.check_nonzero(xi)?;
        let d = self.d;
        let u = r2 / 4.0;
        let p = (4.0 * PI).powf(-self.a);
        let [r0, r1, r2n] = self.remainders(u);
        let e = (-u).exp();
        let rd = r2.powf(self.a);
        let mut psi = vec![0.0; d * d];
        for j in 0..d {
            for k in 0..d {
                let diag = if j == k { e + 0.5 * r0 } else { 0.0 };
                psi[j * d + k] = rd * p * (diag - xi[j] * xi[k] * r1 / 4.0);
            }
        }
        let mut psit = vec![0.0; d * d * d];
        let sc = rd * r2.sqrt() * p;
        fill_f(d, xi, -sc * (e + 0.5 * r1) / 2.0, -sc * r1 / 4.0, sc * r2n / 8.0, &mut psit);
        Ok((psi, psit))
    }
}

/// out_{j;h,k} = c_diag δ_jk x_h + c_sig (δ_hj x_k + δ_hk x_j) + c_cub x_j x_h x_k.
#[inline]
pub(crate) fn fill_f(d: usize, x: &[f64], c_diag: f64, c_sig: f64, c_cub: f64, out: &mut [f64]) {
    for j in 0..d {
        for h in 0..d {
            let cjh = c_cub * x[j] * x[h];
            for k in 0..d {
                let mut v = cjh * x[k];
                if j == k {
                    v += c_diag * x[h];
                }
                if h == j {
                    v += c_sig * x[k];
                }
                if h == k {
                    v += c_sig * x[j];
                }
                out[(j * d + h) * d + k] = v;
            }
        }
    }
}

#[inline]
pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// K(0, 1) through a quadrature of the symbol e^{-|ξ|²}(δ − ξξ/|ξ|²): radial Gauss–Legendre
/// times the sphere average of the angular factor (1 − 1/d).
pub fn origin_constant_by_symbol(d: usize) -> f64 {
    let rule = crate::sphere::build_rule(d, 8).expect("rule");
    let ang: f64 = rule.nodes.iter().zip(&rule.weights).map(|(w, q)| q * (1.0 - w[0] * w[0])).sum();
    let gl = crate::quad::GaussLegendre::cached(64);
    let rad: f64 = gl.integrate(0.0, 12.0, |r| r.powi(d as i32 - 1) * (-r * r).exp());
    ang * rad / (2.0 * PI).powi(d as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maxdiff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn remainder_decays_at_gaussian_rate() {
        // |Ψ(ξ)| ~ c|ξ|³e^{−|ξ|²/4}: removing the cubic prefactor leaves slope −1/4 in |ξ|²
        let k = OseenTensors::new(3).unwrap();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for j in 0..12 {
            let r = 2.0 + 4.0 * j as f64 / 11.0;
            let (psi, _) = k.psi_remainders(&[r * 0.6, 0.0, r * 0.8]).unwrap();
            xs.push(r * r);
            ys.push(norm2(&psi).sqrt().ln() - 3.0 * r.ln());
        }
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope + 0.25).abs() < 0.02, "{slope}");
    }

    #[test]
    fn prefactors() {
        let k3 = OseenTensors::new(3).unwrap();
        assert!((k3.gamma_d - 3.0 / (4.0 * PI)).abs() < 1e-15);
        for d in 2..=4 {
            let k = OseenTensors::new(d).unwrap();
            assert!((k.gamma_d - d as f64 * k.kk_prefactor).abs() < 1e-15);
        }
        assert!(OseenTensors::new(5).is_err());
    }

    #[test]
    fn gaussian_examples() {
        let k = OseenTensors::new(2).unwrap();
        assert!((k.gaussian(&[0.0, 0.0], 1.0).unwrap() - 1.0 / (4.0 * PI)).abs() < 1e-16);
        let v = k.gaussian(&[2.0, 0.0], 1.0).unwrap();
        assert!((v - (-1.0f64).exp() / (4.0 * PI)).abs() < 1e-16);
        assert!(k.gaussian(&[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn homogeneous_examples() {
        let k = OseenTensors::new(3).unwrap();
        let kh = k.k_homog(&[1.0, 0.0, 0.0]).unwrap();
        assert!((kh[0] - 1.0 / (2.0 * PI)).abs() < 1e-15);
        let q = k.q_poly(&[1.0, 0.0, 0.0]);
        assert!((q[0] + 3.0 / (2.0 * PI)).abs() < 1e-15);
        assert!(k.k_homog(&[0.0; 3]).is_err());
        assert!(k.f_homog(&[0.0; 3]).is_err());
    }

    #[test]
    fn series_and_closed_forms_agree_at_switch() {
        for d in 2..=4 {
            let k = OseenTensors::new(d).unwrap();
            for &u in &[1.999, 2.0, 2.001] {
                let p = k.phis(u);
                let a = d as f64 / 2.0;
                for n in 0..3 {
                    let exact = special::lower_scaled(a + n as f64, u) * if n == 1 { -1.0 } else { 1.0 };
                    assert!((p[n] - exact).abs() < 1e-14, "d={d} u={u} n={n}");
                }
            }
        }
    }

    #[test]
    fn origin_value() {
        for d in 2..=4 {
            let k = OseenTensors::new(d).unwrap();
            let k0 = k.oseen_k(&vec![0.0; d], 1.0).unwrap();
            assert!((k0[0] - k.origin_constant).abs() < 1e-15);
            assert!((origin_constant_by_symbol(d) - k.origin_constant).abs() < 1e-13);
        }
    }

    #[test]
    fn small_time_limits() {
        let k = OseenTensors::new(3).unwrap();
        let x = [3.0, 0.0, 0.0];
        assert!(maxdiff(&k.oseen_k(&x, 0.01).unwrap(), &k.k_homog(&x).unwrap()) < 1e-8);
        let x = [4.0 / 3f64.sqrt(), 4.0 / 3f64.sqrt(), 4.0 / 3f64.sqrt()];
        assert!(maxdiff(&k.oseen_f(&x, 0.01).unwrap(), &k.f_homog(&x).unwrap()) < 1e-8);
    }

    #[test]
    fn remainder_formula_matches_difference() {
        for d in 2..=4 {
            let k = OseenTensors::new(d).unwrap();
            let mut xi = vec![0.0; d];
            xi[0] = 1.3;
            xi[d - 1] = -0.4;
            let (psi, psit) = k.psi_remainders(&xi).unwrap();
            let r = norm2(&xi).sqrt();
            let kd: Vec<f64> = k.oseen_k(&xi, 1.0).unwrap().iter().zip(k.k_homog(&xi).unwrap()).map(|(a, b)| (a - b) * r.powi(d as i32)).collect();
            let fd: Vec<f64> = k.oseen_f(&xi, 1.0).unwrap().iter().zip(k.f_homog(&xi).unwrap()).map(|(a, b)| (a - b) * r.powi(d as i32 + 1)).collect();
            assert!(maxdiff(&psi, &kd) < 1e-13);
            assert!(maxdiff(&psit, &fd) < 1e-13);
        }
    }

    #[test]
    fn kernel_matches_fft_of_symbol() {
        use rustfft::{num_complex::Complex, FftPlanner};
        // periodic box [−L/2, L/2)², inverse DFT of e^{-|ξ|²}(δ − ξξ/|ξ|²)
        let n = 128usize;
        let len = 40.0;
        let dx = len / n as f64;
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_inverse(n);
        let k = OseenTensors::new(2).unwrap();
        for (j, kk) in [(0usize, 0usize), (0, 1), (1, 1)] {
            let mut grid = vec![Complex::new(0.0, 0.0); n * n];
            for p in 0..n {
                for q in 0..n {
                    let fp = if p < n / 2 { p as f64 } else { p as f64 - n as f64 };
                    let fq = if q < n / 2 { q as f64 } else { q as f64 - n as f64 };
                    let xi = [2.0 * PI * fp / len, 2.0 * PI * fq / len];
                    let s2 = xi[0] * xi[0] + xi[1] * xi[1];
                    let proj = if s2 == 0.0 {
                        if j == kk { 0.5 } else { 0.0 }
                    } else {
                        (if j == kk { 1.0 } else { 0.0 }) - xi[j] * xi[kk] / s2
                    };
                    grid[p * n + q] = Complex::new((-s2).exp() * proj / (len * len), 0.0);
                }
            }
            for row in grid.chunks_mut(n) {
                fft.process(row);
            }
            let mut col = vec![Complex::new(0.0, 0.0); n];
            for q in 0..n {
                for p in 0..n {
                    col[p] = grid[p * n + q];
                }
                fft.process(&mut col);
                for p in 0..n {
                    grid[p * n + q] = col[p];
                }
            }
            for (p, q) in [(4usize, 0usize), (3, 3), (0, 6), (8, 2), (5, 9)] {
                let x = [p as f64 * dx, q as f64 * dx];
                let exact = k.oseen_k(&x, 1.0).unwrap()[j * 2 + kk];
                assert!((grid[p * n + q].re - exact).abs() < 1e-5, "({p},{q}) {j}{kk}");
            }
        }
    }
}
