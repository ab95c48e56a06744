//! Browser demo: kernel decay, sphere cancellations and the 2D log correction.
//! Every export returns a JSON string so the page needs no bindings beyond strings and numbers.

use oseen::asymptotics::predict_2d;
use oseen::bilinear::compute_a;
use oseen::fields::{make_datum, DatumKind};
use oseen::kernels::OseenTensors;
use oseen::sphere::{build_rule, moment_identities, negative_control, verify_cancellations};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn frob(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// |K(x,1)|, |K°(x)| and |K − K°| along the first axis, on `n` log-spaced radii in [r_min, r_max].
#[wasm_bindgen]
pub fn kernel_profile(d: usize, r_min: f64, r_max: f64, n: usize) -> Result<String, JsValue> {
    if !(r_min > 0.0 && r_max > r_min && n >= 2) {
        return Err(js("need 0 < r_min < r_max and n >= 2"));
    }
    let k = OseenTensors::new(d).map_err(js)?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let r = r_min * (r_max / r_min).powf(i as f64 / (n - 1) as f64);
        let mut x = vec![0.0; d];
        x[0] = r;
        let full = k.oseen_k(&x, 1.0).map_err(js)?;
        let homog = k.k_homog(&x).map_err(js)?;
        let diff: Vec<f64> = full.iter().zip(&homog).map(|(a, b)| a - b).collect();
        rows.push(json!({ "r": r, "k": frob(&full), "k0": frob(&homog), "remainder": frob(&diff) }));
    }
    Ok(json!({ "d": d, "rows": rows }).to_string())
}

/// Residuals of the sphere identities for a rule of the given order, plus the nonzero control.
#[wasm_bindgen]
pub fn cancellation_table(d: usize, order: usize) -> Result<String, JsValue> {
    let rule = build_rule(d, order).map_err(js)?;
    let k = OseenTensors::new(d).map_err(js)?;
    let mut rows: Vec<_> = verify_cancellations(&rule, &k).map_err(js)?.into_iter().map(|i| json!({ "name": i.name, "max_abs": i.max_abs })).collect();
    rows.extend(moment_identities(&rule).into_iter().map(|i| json!({ "name": i.name, "max_abs": i.max_abs })));
    Ok(json!({ "d": d, "order": order, "nodes": rule.nodes.len(), "rows": rows, "control": negative_control(&rule, &k) }).to_string())
}

/// r³ |P − a| along the direction at `angle` for the anisotropic 2D datum of strength `eps`,
/// where P is the far-field prediction; growth in log r is the logarithmic correction.
#[wasm_bindgen]
pub fn log_correction(eps: f64, angle: f64, r_min: f64, r_max: f64, n: usize) -> Result<String, JsValue> {
    if !(r_min > 0.0 && r_max > r_min && n >= 2) {
        return Err(js("need 0 < r_min < r_max and n >= 2"));
    }
    let a = make_datum(DatumKind::Anisotropic2d, eps).map_err(js)?;
    let am = compute_a(&a).map_err(js)?;
    let (s, c) = angle.sin_cos();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let r = r_min * (r_max / r_min).powf(i as f64 / (n - 1) as f64);
        let x = [r * c, r * s];
        let p = predict_2d(&a, &am, &x).map_err(js)?;
        let av = a.eval(&x).map_err(js)?;
        let dev: Vec<f64> = p.iter().zip(&av).map(|(p, a)| p - a).collect();
        rows.push(json!({ "r": r, "scaled": frob(&dev) * r.powi(3) }));
    }
    Ok(json!({ "eps": eps, "angle": angle, "A": am.entries, "rows": rows }).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exports_return_json() {
        let v: serde_json::Value = serde_json::from_str(&kernel_profile(3, 0.5, 10.0, 8).unwrap()).unwrap();
        assert_eq!(v["rows"].as_array().unwrap().len(), 8);
        let v: serde_json::Value = serde_json::from_str(&cancellation_table(2, 32).unwrap()).unwrap();
        assert!(v["rows"].as_array().unwrap().iter().all(|r| r["max_abs"].as_f64().unwrap() < 1e-10));
        let v: serde_json::Value = serde_json::from_str(&log_correction(0.1, 0.3, 10.0, 1000.0, 5).unwrap()).unwrap();
        assert_eq!(v["rows"].as_array().unwrap().len(), 5);
    }
}
