//! Product quadrature on S^{d−1} and the cancellation identities of the homogeneous kernels.

use crate::error::{Error, Result};
use crate::kernels::OseenTensors;
use crate::quad::GaussLegendre;
use serde::Serialize;
use std::f64::consts::PI;

#[derive(Debug, Clone)]
pub struct SphereRule {
    pub d: usize,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub exactness_degree: usize,
}

/// Product rule exact for polynomials of degree ≤ `order` restricted to the sphere.
///
/// d=2: trapezoid; d=3: Gauss–Legendre in cos φ × uniform azimuth;
/// d=4: Gauss–Gegenbauer (λ=1) in the first coordinate × the d=3 rule.
pub fn build_rule(d: usize, order: usize) -> Result<SphereRule> {
    if order < 4 {
        return Err(Error::Domain(format!("rule order {order} < 4")));
    }
    match d {
        2 => {
            let n = order + 1;
            let nodes = (0..n)
                .map(|i| {
                    let th = 2.0 * PI * i as f64 / n as f64;
                    vec![th.cos(), th.sin()]
                })
                .collect();
            Ok(SphereRule { d, nodes, weights: vec![2.0 * PI / n as f64; n], exactness_degree: order })
        }
        3 => {
            let np = (order + 2) / 2;
            let naz = order + 1;
            let gl = GaussLegendre::cached(np);
            let mut nodes = Vec::with_capacity(np * naz);
            let mut weights = Vec::with_capacity(np * naz);
            for (c, w) in gl.nodes.iter().zip(&gl.weights) {
                let s = (1.0 - c * c).sqrt();
                for k in 0..naz {
                    let ps = 2.0 * PI * k as f64 / naz as f64;
                    nodes.push(vec![s * ps.cos(), s * ps.sin(), *c]);
                    weights.push(w * 2.0 * PI / naz as f64);
                }
            }
            Ok(SphereRule { d, nodes, weights, exactness_degree: order })
        }
        4 => {
            let inner = build_rule(3, order)?;
            let n = (order + 2) / 2;
            let mut nodes = Vec::new();
            let mut weights = Vec::new();
            for k in 1..=n {
                let ang = k as f64 * PI / (n as f64 + 1.0);
                let (c, s) = (ang.cos(), ang.sin());
                let wc = PI / (n as f64 + 1.0) * s * s;
                for (om, w) in inner.nodes.iter().zip(&inner.weights) {
                    nodes.push(vec![c, s * om[0], s * om[1], s * om[2]]);
                    weights.push(wc * w);
                }
            }
            Ok(SphereRule { d, nodes, weights, exactness_degree: order })
        }
        _ => Err(Error::Domain(format!("no sphere rule for d = {d}"))),
    }
}

impl SphereRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(n, w)| w * f(n)).sum()
    }
}

/// ∫_{S^{d−1}} f for a vector/matrix-valued f of fixed length.
pub fn angular_average(rule: &SphereRule, len: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for (n, w) in rule.nodes.iter().zip(&rule.weights) {
        for (a, v) in acc.iter_mut().zip(f(n)) {
            *a += w * v;
        }
    }
    acc
}

#[derive(Debug, Clone, Serialize)]
pub struct Identity {
    pub name: String,
    pub max_abs: f64,
}

/// The five cancellation families for K° and F° on the sphere.
pub fn verify_cancellations(rule: &SphereRule, tensors: &OseenTensors) -> Result<Vec<Identity>> {
    let d = rule.d;
    if tensors.dim() != d {
        return Err(Error::Domain("rule and kernels have different dimensions".into()));
    }
    let k0 = |w: &[f64]| tensors.k_homog(w).unwrap();
    let f0 = |w: &[f64]| tensors.f_homog(w).unwrap();
    let maxabs = |v: Vec<f64>| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut out = Vec::new();
    out.push(Identity { name: "int K0".into(), max_abs: maxabs(angular_average(rule, d * d, k0)) });
    let m = (0..d)
        .map(|l| maxabs(angular_average(rule, d * d, |w| k0(w).iter().map(|v| v * w[l]).collect())))
        .fold(0.0, f64::max);
    out.push(Identity { name: "int w_l K0".into(), max_abs: m });
    out.push(Identity { name: "int F0".into(), max_abs: maxabs(angular_average(rule, d * d * d, f0)) });
    let m = (0..d)
        .map(|l| maxabs(angular_average(rule, d * d * d, |w| f0(w).iter().map(|v| v * w[l]).collect())))
        .fold(0.0, f64::max);
    out.push(Identity { name: "int w_l F0".into(), max_abs: m });
    let mut m = 0.0f64;
    for l in 0..d {
        for mm in 0..d {
            let v = angular_average(rule, d * d * d, |w| f0(w).iter().map(|v| v * w[l] * w[mm]).collect());
            m = m.max(maxabs(v));
        }
    }
    out.push(Identity { name: "int w_l w_m F0".into(), max_abs: m });
    Ok(out)
}

/// ∫ ω₁² K°₁₁, which does not vanish.
pub fn negative_control(rule: &SphereRule, tensors: &OseenTensors) -> f64 {
    rule.integrate(|w| w[0] * w[0] * tensors.k_homog(w).unwrap()[0])
}

/// Deviations of ∫ω_j², ∫ω_j⁴, ∫ω_j²ω_k² (j≠k) from |S|/d, 3|S|/(d(d+2)), |S|/(d(d+2)).
pub fn moment_identities(rule: &SphereRule) -> Vec<Identity> {
    let d = rule.d as f64;
    let area = crate::special::sphere_area(rule.d);
    let mut e2 = 0.0f64;
    let mut e4 = 0.0f64;
    let mut e22 = 0.0f64;
    for j in 0..rule.d {
        e2 = e2.max((rule.integrate(|w| w[j].powi(2)) - area / d).abs());
        e4 = e4.max((rule.integrate(|w| w[j].powi(4)) - 3.0 * area / (d * (d + 2.0))).abs());
        for k in 0..rule.d {
            if k != j {
                e22 = e22.max((rule.integrate(|w| w[j].powi(2) * w[k].powi(2)) - area / (d * (d + 2.0))).abs());
            }
        }
    }
    vec![
        Identity { name: "int w_j^2".into(), max_abs: e2 },
        Identity { name: "int w_j^4".into(), max_abs: e4 },
        Identity { name: "int w_j^2 w_k^2".into(), max_abs: e22 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_and_nodes() {
        for d in 2..=4 {
            let r = build_rule(d, 12).unwrap();
            let s: f64 = r.weights.iter().sum();
            assert!((s - crate::special::sphere_area(d)).abs() < 1e-12);
            for n in &r.nodes {
                let nn: f64 = n.iter().map(|v| v * v).sum();
                assert!((nn - 1.0).abs() < 1e-14);
            }
        }
        assert!(build_rule(5, 10).is_err());
        assert!(build_rule(3, 3).is_err());
    }

    #[test]
    fn spec_examples() {
        let r2 = build_rule(2, 16).unwrap();
        assert!((r2.integrate(|_| 1.0) - 2.0 * PI).abs() < 1e-14);
        let r3 = build_rule(3, 8).unwrap();
        assert!((r3.integrate(|w| w[0] * w[0]) - 4.0 * PI / 3.0).abs() < 1e-13);
        assert!((r3.integrate(|w| w[2].powi(4)) - 4.0 * PI / 5.0).abs() < 1e-13);
        assert!(r2.integrate(|w| w[0] * w[1]).abs() < 1e-15);
    }

    #[test]
    fn cancellations_vanish() {
        for (d, order, tol) in [(2, 64, 1e-13), (3, 30, 1e-12), (4, 30, 1e-11)] {
            let rule = build_rule(d, order).unwrap();
            let k = OseenTensors::new(d).unwrap();
            for id in verify_cancellations(&rule, &k).unwrap() {
                assert!(id.max_abs < tol, "d={d} {}: {}", id.name, id.max_abs);
            }
            assert!(negative_control(&rule, &k).abs() > 1e-3);
        }
    }
}
