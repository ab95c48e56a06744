//! Quadratic correction P∇·(a⊗a) for d ≥ 3, either filtered by the heat flow at t = 1
//! (a convolution with F(·,1)) or solved exactly on homogeneous functions.

use crate::bilinear::{conv_f, QuadParams};
use crate::error::{Error, Result};
use crate::fields::{Grid, GridField, HomogeneousField};
use crate::harmonics::{basis_values, Harmonics};
use crate::kernels::norm2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionFlavor {
    Filtered,
    Homogeneous,
}

#[derive(Debug, Clone)]
pub struct CorrectionField {
    pub field: GridField,
    pub flavor: CorrectionFlavor,
}

fn check_d(a: &HomogeneousField) -> Result<()> {
    if a.d < 3 {
        return Err(Error::Precondition("P∇·(a⊗a) is not defined for d = 2 (a⊗a is not locally integrable)".into()));
    }
    Ok(())
}

/// e^{Δ}P∇·(a⊗a)(x) = ∫ F(x−y, 1) : (a⊗a)(y) dy.
pub fn filtered_leray_term(a: &HomogeneousField, x: &[f64], q: &QuadParams) -> Result<Vec<f64>> {
    check_d(a)?;
    let d = a.d;
    let w = |y: &[f64]| {
        if norm2(y) == 0.0 {
            return vec![0.0; d * d];
        }
        let v = a.eval_unchecked(y);
        let mut o = vec![0.0; d * d];
        for h in 0..d {
            for k in 0..d {
                o[h * d + k] = v[h] * v[k];
            }
        }
        o
    };
    conv_f(d, &w, x, 1.0, 1.0, q)
}

/// Homogeneous pressure data for P∇·(a⊗a): g = ∂_h∂_k(a_h a_k) = |x|^{−4}G(ω) expanded in
/// spherical harmonics, p = |x|^{−2}Π(ω) with Π_ℓ = G_ℓ / (2 − ℓ(ℓ+1)).
#[derive(Debug, Clone)]
pub struct HomogeneousPressure {
    pi: Harmonics,
    /// Largest |G_ℓm| at ℓ = 1 relative to max |G|.
    pub resonant_content: f64,
}

pub const HOMOG_LMAX: usize = 16;
const RESONANCE_TOL: f64 = 1e-9;

/// Second derivatives by a five-point stencil on each axis pair.
fn div_div(a: &HomogeneousField, x: &[f64]) -> f64 {
    let d = a.d;
    let h = 2e-3 * norm2(x).sqrt();
    let prod = |y: &[f64], i: usize, j: usize| {
        let v = a.eval_unchecked(y);
        v[i] * v[j]
    };
    let mut total = 0.0;
    let mut y = x.to_vec();
    for i in 0..d {
        for j in 0..d {
            // ∂_i∂_j (a_i a_j)
            let f = |y: &mut Vec<f64>, si: f64, sj: f64| {
                y[i] += si;
                y[j] += sj;
                let v = prod(y, i, j);
                y[i] -= si;
                y[j] -= sj;
                v
            };
            if i == j {
                let c = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];
                let mut s = 0.0;
                for (k, ck) in c.iter().enumerate() {
                    s += ck * f(&mut y, (k as f64 - 2.0) * h, 0.0);
                }
                total += s / (h * h);
            } else {
                let c = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
                let mut s = 0.0;
                for (ki, ci) in c.iter().enumerate() {
                    for (kj, cj) in c.iter().enumerate() {
                        if ci * cj != 0.0 {
                            s += ci * cj * f(&mut y, (ki as f64 - 2.0) * h, (kj as f64 - 2.0) * h);
                        }
                    }
                }
                total += s / (h * h);
            }
        }
    }
    total
}

impl HomogeneousPressure {
    pub fn new(a: &HomogeneousField) -> Result<Self> {
        if a.d != 3 {
            return Err(Error::Unsupported(format!("homogeneous pressure solve in d = {}", a.d)));
        }
        let g = Harmonics::project(3, 1, HOMOG_LMAX, &|w: &[f64]| vec![div_div(a, w)])?;
        let gmax = g.coeffs[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let res = g.basis.iter().zip(&g.coeffs[0]).filter(|((l, _), _)| *l == 1).fold(0.0f64, |m, (_, v)| m.max(v.abs()));
        let resonant_content = if gmax > 0.0 { res / gmax } else { 0.0 };
        if resonant_content > RESONANCE_TOL {
            return Err(Error::Resonance(1));
        }
        let mut pi = g;
        for (b, (l, _)) in pi.basis.clone().iter().enumerate() {
            let den = 2.0 - (*l * (*l + 1)) as f64;
            pi.coeffs[0][b] = if *l == 1 { 0.0 } else { pi.coeffs[0][b] / den };
        }
        Ok(HomogeneousPressure { pi, resonant_content })
    }

    pub fn pressure(&self, x: &[f64]) -> f64 {
        let r2 = norm2(x);
        let r = r2.sqrt();
        let w: Vec<f64> = x.iter().map(|v| v / r).collect();
        let y = basis_values(3, self.pi.lmax, &w);
        self.pi.coeffs[0].iter().zip(&y).map(|(c, v)| c * v).sum::<f64>() / r2
    }
}

fn central_gradient(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], ncomp: usize) -> Vec<f64> {
    // out[i*ncomp + c] = ∂_i f_c, fourth order
    let d = x.len();
    let h = 1e-3 * norm2(x).sqrt();
    let mut out = vec![0.0; d * ncomp];
    let mut y = x.to_vec();
    for i in 0..d {
        let mut acc = vec![0.0; ncomp];
        for (s, c) in [(-2.0, 1.0 / 12.0), (-1.0, -2.0 / 3.0), (1.0, 2.0 / 3.0), (2.0, -1.0 / 12.0)] {
            y[i] = x[i] + s * h;
            for (a, v) in acc.iter_mut().zip(f(&y)) {
                *a += c * v;
            }
        }
        y[i] = x[i];
        for c in 0..ncomp {
            out[i * ncomp + c] = acc[c] / h;
        }
    }
    out
}

/// P∇·(a⊗a)(x) = ∇·(a⊗a) − ∇p on homogeneous functions (d = 3).
pub fn homog_leray_term(a: &HomogeneousField, p: &HomogeneousPressure, x: &[f64]) -> Result<Vec<f64>> {
    check_d(a)?;
    if norm2(x) == 0.0 {
        return Err(Error::Singular("correction at the origin".into()));
    }
    let d = a.d;
    let ga = central_gradient(&|y: &[f64]| a.eval_unchecked(y), x, d);
    let av = a.eval_unchecked(x);
    let gp = central_gradient(&|y: &[f64]| vec![p.pressure(y)], x, 1);
    // ∇·(a⊗a)_k = a_h ∂_h a_k for divergence-free a
    Ok((0..d).map(|k| (0..d).map(|h| av[h] * ga[h * d + k]).sum::<f64>() - gp[k]).collect())
}

/// Δa(x).
pub fn laplacian_of_datum(a: &HomogeneousField, x: &[f64]) -> Result<Vec<f64>> {
    a.laplacian(x)
}

/// Correction term sampled on grid nodes.
pub fn correction_field(a: &HomogeneousField, grid: Arc<Grid>, flavor: CorrectionFlavor, q: &QuadParams) -> Result<CorrectionField> {
    check_d(a)?;
    if grid.d != a.d {
        return Err(Error::Domain("grid and datum dimensions differ".into()));
    }
    let nl = grid.n_ang();
    let pressure = match flavor {
        CorrectionFlavor::Homogeneous => Some(HomogeneousPressure::new(a)?),
        CorrectionFlavor::Filtered => None,
    };
    let vals: Result<Vec<Vec<f64>>> = (0..grid.n_nodes())
        .into_par_iter()
        .map(|k| {
            let x = grid.node(k / nl, k % nl);
            match &pressure {
                Some(p) => homog_leray_term(a, p, &x),
                None => filtered_leray_term(a, &x, q),
            }
        })
        .collect();
    let field = GridField { grid, rank: 1, values: vals?.concat(), degree: 3.0, closure: None };
    Ok(CorrectionField { field, flavor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_datum, DatumKind};

    #[test]
    fn two_dimensional_data_are_rejected() {
        let a = make_datum(DatumKind::Rotational2d, 0.1).unwrap();
        assert!(matches!(filtered_leray_term(&a, &[1.0, 1.0], &QuadParams::for_dim(2)), Err(Error::Precondition(_))));
    }

    #[test]
    fn quadratic_in_amplitude() {
        let q = QuadParams::for_dim(3);
        let x = [1.3, 0.0, 0.7];
        let a1 = make_datum(DatumKind::Rotational3d, 0.05).unwrap();
        let a2 = make_datum(DatumKind::Rotational3d, 0.1).unwrap();
        let v1 = filtered_leray_term(&a1, &x, &q).unwrap();
        let v2 = filtered_leray_term(&a2, &x, &q).unwrap();
        for j in 0..3 {
            assert!((v2[j] - 4.0 * v1[j]).abs() <= 1e-10 * v2[j].abs().max(1e-300) + 1e-18, "{v1:?} {v2:?}");
        }
        let z = make_datum(DatumKind::Rotational3d, 0.0).unwrap();
        assert_eq!(filtered_leray_term(&z, &x, &q).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn swirl_correction_matches_exact_projection_far_out() {
        let a = make_datum(DatumKind::Rotational3d, 0.05).unwrap();
        let p = HomogeneousPressure::new(&a).unwrap();
        let q = QuadParams::for_dim(3);
        for x in [[60.0, 0.0, 80.0], [0.0, 100.0, 0.0]] {
            let f = filtered_leray_term(&a, &x, &q).unwrap();
            let h = homog_leray_term(&a, &p, &x).unwrap();
            let n = norm2(&h).sqrt();
            let e = norm2(&[f[0] - h[0], f[1] - h[1], f[2] - h[2]]).sqrt();
            assert!(n > 0.0 && e < 0.02 * n, "{f:?} {h:?}");
        }
    }

    #[test]
    fn homogeneous_term_has_degree_minus_three() {
        let a = make_datum(DatumKind::Rotational3d, 0.05).unwrap();
        let p = HomogeneousPressure::new(&a).unwrap();
        let x = [0.6, 0.3, -0.8];
        let x2 = [1.2, 0.6, -1.6];
        let v = homog_leray_term(&a, &p, &x).unwrap();
        let v2 = homog_leray_term(&a, &p, &x2).unwrap();
        for j in 0..3 {
            assert!((v2[j] * 8.0 - v[j]).abs() < 1e-8 * norm2(&v).sqrt());
        }
    }
}
