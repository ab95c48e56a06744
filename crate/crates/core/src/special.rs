//! Special functions used by the kernels and the exact heat flow:
//! log-gamma, regularized incomplete gamma, Kummer's confluent function.

use std::f64::consts::PI;

const MAX_ITER: usize = 500;
const EPS: f64 = 1e-16;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Γ(x) for x > 0. Exact for small integers and half-integers.
pub fn gamma(x: f64) -> f64 {
    if x > 0.0 && x <= 30.0 && (2.0 * x).fract() == 0.0 {
        // Γ(n) and Γ(n+1/2) by recurrence keep full precision
        let (mut g, mut z) = if x.fract() == 0.0 { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
        while z < x {
            g *= z;
            z += 1.0;
        }
        return g;
    }
    ln_gamma(x).exp()
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0, "gamma_p needs a > 0, x >= 0");
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        lower_series(a, x) * (a * x.ln() - ln_gamma(a)).exp()
    } else {
        1.0 - upper_cf(a, x) * (a * x.ln() - x - ln_gamma(a)).exp()
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 − P(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0, "gamma_q needs a > 0, x >= 0");
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p(a, x)
    } else {
        upper_cf(a, x) * (a * x.ln() - x - ln_gamma(a)).exp()
    }
}

/// x^{−a} γ(a, x), the scaled lower incomplete gamma; finite at x = 0 where it equals 1/a.
pub fn lower_scaled(a: f64, x: f64) -> f64 {
    if x < a + 1.0 {
        lower_series(a, x)
    } else {
        (gamma(a) - upper_cf(a, x) * (a * x.ln() - x).exp()) * x.powf(-a)
    }
}

/// x^{−a} Γ(a, x), the scaled upper incomplete gamma, for x > 0.
pub fn upper_scaled(a: f64, x: f64) -> f64 {
    assert!(x > 0.0);
    if x < a + 1.0 {
        (gamma(a) - lower_series(a, x) * x.powf(a)) * x.powf(-a)
    } else {
        upper_cf(a, x) * (-x).exp()
    }
}

// e^{-x} Σ x^k / (a (a+1) ... (a+k)), which equals x^{-a} γ(a,x)
fn lower_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    for k in 1..MAX_ITER {
        term *= x / (a + k as f64);
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x).exp()
}

// Lentz continued fraction for x^{1-a} e^{x} Γ(a,x) / x, i.e. Γ(a,x) = e^{-x} x^a · cf
fn upper_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Kummer's confluent hypergeometric M(a, b, −u) for u ≥ 0 and b > a > 0.
///
/// Small u uses Kummer's transformation e^{−u} M(b−a, b, u) (positive series);
/// large u uses the algebraic asymptotic series, the exponential part being
/// below rounding for u > 40.
pub fn kummer_m_neg(a: f64, b: f64, u: f64) -> f64 {
    assert!(u >= 0.0 && b > a && a > 0.0);
    if u <= 40.0 {
        let mut term = 1.0;
        let mut sum = 1.0;
        let ap = b - a;
        for k in 0..2000 {
            let k = k as f64;
            term *= (ap + k) / (b + k) * u / (k + 1.0);
            sum += term;
            if term < sum * EPS {
                break;
            }
        }
        sum * (-u).exp()
    } else {
        let pref = (ln_gamma(b) - ln_gamma(b - a) - a * u.ln()).exp();
        let mut term = 1.0;
        let mut sum = 1.0;
        let c = a - b + 1.0;
        let mut prev = f64::INFINITY;
        for s in 0..200 {
            let s = s as f64;
            term *= (a + s) * (c + s) / ((s + 1.0) * u);
            if term == 0.0 || term.abs() > prev {
                break;
            }
            sum += term;
            prev = term.abs();
            if term.abs() < EPS * sum.abs() {
                break;
            }
        }
        pref * sum
    }
}

/// Double factorial (2k−1)!! with (−1)!! = 1.
pub fn odd_double_factorial(k: u32) -> f64 {
    (1..=k).map(|i| (2 * i - 1) as f64).product()
}

/// Surface measure of the unit sphere S^{d−1}.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_values() {
        assert!((gamma(5.0) - 24.0).abs() < 1e-12);
        assert!((gamma(2.5) - 0.75 * PI.sqrt()).abs() < 1e-14);
        assert!((ln_gamma(10.3) - gamma(10.3).ln()).abs() < 1e-12);
        assert!((ln_gamma(0.3).exp() - 2.991_568_987_687_590_8).abs() < 1e-12);
    }

    #[test]
    fn incomplete_gamma_closed_forms() {
        for &x in &[0.01, 0.5, 1.0, 2.0, 3.5, 8.0, 30.0] {
            let p1 = 1.0 - (-x as f64).exp();
            assert!((gamma_p(1.0, x) - p1).abs() < 1e-15, "x={x}");
            let p2 = 1.0 - (1.0 + x) * (-x as f64).exp();
            assert!((gamma_p(2.0, x) - p2).abs() < 1e-14);
            assert!((gamma_p(0.5, x) - erf(x.sqrt())).abs() < 1e-14);
            assert!((gamma_q(0.5, x) - erfc(x.sqrt())).abs() < 1e-14 * (1.0 + erfc(x.sqrt()) * 1e3));
            let ls = lower_scaled(1.5, x);
            let exact = (PI.sqrt() / 2.0 * erf(x.sqrt()) - x.sqrt() * (-x).exp()) * x.powf(-1.5);
            assert!((ls - exact).abs() < 1e-13 * exact.abs().max(1e-3));
        }
        assert!((lower_scaled(1.5, 0.0) - 1.0 / 1.5).abs() < 1e-16);
    }

    #[test]
    fn upper_scaled_matches_difference() {
        for &a in &[1.0, 1.5, 2.0, 2.5, 3.5] {
            for &x in &[0.3, 2.0, 5.0, 12.0] {
                let lhs = upper_scaled(a, x) + lower_scaled(a, x);
                let rhs = gamma(a) * x.powf(-a);
                assert!((lhs - rhs).abs() < 1e-13 * rhs, "a={a} x={x}");
            }
        }
    }

    #[test]
    fn kummer_special_cases() {
        // M(1,2,-u) = (1 - e^{-u})/u
        for &u in &[0.1, 1.0, 10.0, 39.0, 41.0, 100.0] {
            let m = kummer_m_neg(1.0, 2.0, u);
            let e = -(-u as f64).exp_m1() / u;
            assert!((m - e).abs() < 1e-14 * e, "u={u}: {m} vs {e}");
        }
        // M(a, a+1, -u) = a u^{-a} γ(a,u)
        for &u in &[0.5, 5.0, 39.9, 40.1, 80.0] {
            let m = kummer_m_neg(1.5, 2.5, u);
            let e = 1.5 * lower_scaled(1.5, u);
            assert!((m - e).abs() < 1e-13 * e, "u={u}: {m} vs {e}");
        }
    }

    #[test]
    fn sphere_areas() {
        assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-14);
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-14);
        assert!((sphere_area(4) - 2.0 * PI * PI).abs() < 1e-13);
    }
}
