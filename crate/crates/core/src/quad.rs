//! One-dimensional quadrature building blocks.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Gauss–Legendre nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..(n + 1) / 2 {
            // Tricomi initial guess, then Newton on P_n
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussLegendre { nodes, weights }
    }

    /// Shared cached rule.
    pub fn cached(n: usize) -> Arc<GaussLegendre> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussLegendre>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap();
        guard.entry(n).or_insert_with(|| Arc::new(GaussLegendre::new(n))).clone()
    }

    /// Nodes and weights mapped to [a, b].
    pub fn on(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = 0.5 * (b - a);
        let c = 0.5 * (b + a);
        self.nodes.iter().zip(&self.weights).map(move |(x, w)| (c + h * x, h * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.on(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = fc * WGK[7];
    let mut rg = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        rk += WGK[j] * s;
        if j % 2 == 1 {
            rg += WG[j / 2] * s;
        }
    }
    (rk * h, ((rk - rg) * h).abs())
}

/// Globally adaptive Gauss–Kronrod (7/15) integration over [a, b] with the given breakpoints.
///
/// Stops when the summed error estimate is below `max(abs_tol, rel_tol·|I|)`.
pub fn adaptive<F: FnMut(f64) -> f64>(mut f: F, breaks: &[f64], abs_tol: f64, rel_tol: f64) -> (f64, f64) {
    let mut panels: Vec<(f64, f64, f64, f64)> = Vec::new();
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            let (v, e) = gk15(&mut f, w[0], w[1]);
            panels.push((w[0], w[1], v, e));
        }
    }
    for _ in 0..2000 {
        let total: f64 = panels.iter().map(|p| p.2).sum();
        let err: f64 = panels.iter().map(|p| p.3).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        let (imax, _) = panels
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, p)| if p.3 > acc.1 { (i, p.3) } else { acc });
        let (a, b, _, _) = panels.swap_remove(imax);
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let (v1, e1) = gk15(&mut f, a, m);
        let (v2, e2) = gk15(&mut f, m, b);
        panels.push((a, m, v1, e1));
        panels.push((m, b, v2, e2));
    }
    // sum smallest first for reproducible rounding
    panels.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    (panels.iter().map(|p| p.2).sum(), panels.iter().map(|p| p.3).sum())
}

fn gk15_vec<F: FnMut(f64, &mut [f64])>(f: &mut F, a: f64, b: f64, n: usize, buf: &mut [f64]) -> (Vec<f64>, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut rk = vec![0.0; n];
    let mut rg = vec![0.0; n];
    f(c, buf);
    for i in 0..n {
        rk[i] = buf[i] * WGK[7];
        rg[i] = buf[i] * WG[3];
    }
    for j in 0..7 {
        let x = h * XGK[j];
        for s in [c - x, c + x] {
            f(s, buf);
            for i in 0..n {
                rk[i] += WGK[j] * buf[i];
                if j % 2 == 1 {
                    rg[i] += WG[j / 2] * buf[i];
                }
            }
        }
    }
    let err = rk.iter().zip(&rg).fold(0.0f64, |m, (k, g)| m.max(((k - g) * h).abs()));
    (rk.into_iter().map(|v| v * h).collect(), err)
}

/// Vector-valued version of [`adaptive`]; the error is measured in the max norm.
pub fn adaptive_vec<F: FnMut(f64, &mut [f64])>(mut f: F, n: usize, breaks: &[f64], abs_tol: f64, rel_tol: f64) -> (Vec<f64>, f64) {
    let mut buf = vec![0.0; n];
    let mut panels: Vec<(f64, f64, Vec<f64>, f64)> = Vec::new();
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            let (v, e) = gk15_vec(&mut f, w[0], w[1], n, &mut buf);
            panels.push((w[0], w[1], v, e));
        }
    }
    let total = |panels: &[(f64, f64, Vec<f64>, f64)]| {
        let mut t = vec![0.0; n];
        for p in panels {
            for (a, b) in t.iter_mut().zip(&p.2) {
                *a += b;
            }
        }
        t
    };
    for _ in 0..4000 {
        let err: f64 = panels.iter().map(|p| p.3).sum();
        let mag = total(&panels).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if err <= abs_tol.max(rel_tol * mag) {
            break;
        }
        let (imax, _) = panels
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, p)| if p.3 > acc.1 { (i, p.3) } else { acc });
        let (a, b, _, _) = panels.swap_remove(imax);
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let (v1, e1) = gk15_vec(&mut f, a, m, n, &mut buf);
        let (v2, e2) = gk15_vec(&mut f, m, b, n, &mut buf);
        panels.push((a, m, v1, e1));
        panels.push((m, b, v2, e2));
    }
    panels.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    let err = panels.iter().map(|p| p.3).sum();
    (total(&panels), err)
}

/// C^∞ step: 1 for q ≤ q0, 0 for q ≥ q1.
pub fn smooth_step(q: f64, q0: f64, q1: f64) -> f64 {
    if q <= q0 {
        return 1.0;
    }
    if q >= q1 {
        return 0.0;
    }
    let v = (q1 - q) / (q1 - q0);
    let f = |s: f64| if s <= 0.0 { 0.0 } else { (-1.0 / s).exp() };
    let a = f(v);
    a / (a + f(1.0 - v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_exactness() {
        for n in [1, 2, 5, 8, 16, 48] {
            let g = GaussLegendre::new(n);
            let s: f64 = g.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-13);
            let p = 2 * n as i32 - 2;
            let v = g.integrate(-1.0, 1.0, |x| x.powi(p) + x.powi(p + 1));
            let exact = 2.0 / (p as f64 + 1.0);
            assert!((v - exact).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn adaptive_handles_endpoint_singularity() {
        let (v, _) = adaptive(|x: f64| x.sqrt().recip(), &[0.0, 1.0], 1e-12, 1e-12);
        assert!((v - 2.0).abs() < 1e-8);
        let (v, _) = adaptive(|x: f64| (-x * x).exp(), &[-10.0, 0.0, 10.0], 1e-14, 1e-14);
        assert!((v - std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn vector_adaptive_matches_scalar() {
        let (v, _) = adaptive_vec(
            |x: f64, out: &mut [f64]| {
                out[0] = x.sqrt();
                out[1] = (3.0 * x).cos();
            },
            2,
            &[0.0, 0.5, 2.0],
            1e-13,
            1e-13,
        );
        assert!((v[0] - 2.0 / 3.0 * 2f64.powf(1.5)).abs() < 1e-10);
        assert!((v[1] - (6.0f64).sin() / 3.0).abs() < 1e-13);
    }

    #[test]
    fn smooth_step_is_partition() {
        assert_eq!(smooth_step(0.1, 0.25, 0.5), 1.0);
        assert_eq!(smooth_step(0.6, 0.25, 0.5), 0.0);
        let m = smooth_step(0.375, 0.25, 0.5);
        assert!((m - 0.5).abs() < 1e-15);
    }
}
