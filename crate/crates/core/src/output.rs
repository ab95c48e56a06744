//! CSV, JSON and SVG artifacts, the key=value run configuration, and the run manifest.

use crate::bilinear::QuadParams;
use crate::error::{Error, Result};
use crate::fields::{Grid, GridConfig, GridField};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Seventeen significant digits, enough to round-trip any f64.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Grid field dump: r, i, l, angle, x1..xd, then the components.
pub fn write_grid_field(path: &Path, f: &GridField) -> Result<()> {
    let g = &f.grid;
    let d = g.d;
    let nc = f.ncomp();
    let mut header: Vec<String> = ["r", "i", "l", "angle"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=d).map(|k| format!("x{k}")));
    header.extend((1..=nc).map(|k| format!("v{k}")));
    let hdr: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows = (0..g.n_r()).flat_map(|i| (0..g.n_ang()).map(move |l| (i, l))).map(|(i, l)| {
        let mut row = vec![fmt17(g.radii[i]), i.to_string(), l.to_string(), fmt17(g.angles[l])];
        row.extend(g.node(i, l).into_iter().map(fmt17));
        row.extend(f.at(i, l).iter().map(|v| fmt17(*v)));
        row
    });
    write_csv(path, &hdr, rows)
}

/// Reads a rank-1 profile written by `write_grid_field`; the grid is rebuilt from the radii
/// and the number of angles and must reproduce the stored nodes.
pub fn read_profile(path: &Path, degree: f64) -> Result<GridField> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rd.headers().map_err(csv_err)?.clone();
    let d = header.iter().filter(|h| h.starts_with('x')).count();
    let nc = header.iter().filter(|h| h.starts_with('v')).count();
    if !(d == 2 || d == 3) || nc != d || header.len() != 4 + d + nc {
        return Err(Error::Invalid(format!("{}: not a profile dump", path.display())));
    }
    let mut recs: Vec<(usize, usize, f64, Vec<f64>)> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |k: usize| -> Result<f64> { rec[k].trim().parse::<f64>().map_err(|_| Error::Invalid(format!("bad number {:?}", &rec[k]))) };
        let idx = |k: usize| -> Result<usize> { rec[k].trim().parse::<usize>().map_err(|_| Error::Invalid(format!("bad index {:?}", &rec[k]))) };
        let vals = (0..nc).map(|c| num(4 + d + c)).collect::<Result<Vec<_>>>()?;
        recs.push((idx(1)?, idx(2)?, num(0)?, vals));
    }
    let nr = recs.iter().map(|r| r.0).max().map_or(0, |m| m + 1);
    let nl = recs.iter().map(|r| r.1).max().map_or(0, |m| m + 1);
    if nr * nl != recs.len() || nr < 2 {
        return Err(Error::Invalid("profile dump is not a full grid".into()));
    }
    let mut radii = vec![f64::NAN; nr];
    let mut values = vec![f64::NAN; nr * nl * nc];
    for (i, l, r, v) in recs {
        radii[i] = r;
        values[(i * nl + l) * nc..(i * nl + l + 1) * nc].copy_from_slice(&v);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("profile dump has missing or non-finite entries".into()));
    }
    let cfg = GridConfig { r_min: radii[0], r_max: radii[nr - 1], n_radial: nr, n_angular: nl };
    let grid = Grid::new(d, cfg)?;
    if grid.radii.iter().zip(&radii).any(|(a, b)| (a - b).abs() > 1e-12 * b) {
        return Err(Error::Invalid("radii are not log-spaced".into()));
    }
    Ok(GridField { grid: Arc::new(grid), rank: 1, values, degree, closure: None })
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Invalid(format!("json: {e}")))?;
    std::fs::write(path, s + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

// SVG

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Drawn as a polyline when true, as markers otherwise.
    pub line: bool,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Log-log plot of positive samples; non-positive values are dropped.
pub fn loglog_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 70.0, 20.0, 36.0, 50.0);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| *x > 0.0 && *y > 0.0).collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    if pts.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no positive data</text></svg>"#, w / 2.0, h / 2.0);
        return s;
    }
    let lx: Vec<f64> = pts.iter().map(|p| p.0.log10()).collect();
    let ly: Vec<f64> = pts.iter().map(|p| p.1.log10()).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min).floor();
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil();
        if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) }
    };
    let (x0, x1) = span(&lx);
    let (y0, y1) = span(&ly);
    let px = |x: f64| ml + (x.log10() - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y.log10() - y0) / (y1 - y0) * (h - mt - mb);
    let _ = writeln!(s, r##"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="#444"/>"##, w - ml - mr, h - mt - mb);
    let ystep = ((y1 - y0) / 8.0).ceil().max(1.0) as i32;
    for e in (x0 as i32)..=(x1 as i32) {
        let x = px(10f64.powi(e));
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{mt}" x2="{x:.1}" y2="{}" stroke="#ddd"/><text x="{x:.1}" y="{}" text-anchor="middle">1e{e}</text>"##, h - mb, h - mb + 16.0);
    }
    for e in ((y0 as i32)..=(y1 as i32)).step_by(ystep as usize) {
        let y = py(10f64.powi(e));
        let _ = writeln!(s, r##"<line x1="{ml}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">1e{e}</text>"##, w - mr, ml - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (ml + w - mr) / 2.0, h - 12.0, escape(xlabel));
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#, (mt + h - mb) / 2.0, (mt + h - mb) / 2.0, escape(ylabel));
    for (k, se) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let p: Vec<(f64, f64)> = se.points.iter().copied().filter(|(x, y)| *x > 0.0 && *y > 0.0).collect();
        if se.line {
            let path: Vec<String> = p.iter().map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        } else {
            for (x, y) in &p {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{c}"/>"#, px(*x), py(*y));
            }
        }
        let ly = mt + 16.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/><text x="{}" y="{}">{}</text>"#, w - mr - 190.0, ly - 9.0, w - mr - 174.0, ly, escape(&se.label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// Configuration

/// Run settings read from a key=value file; flags given on the command line win.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub entries: BTreeMap<String, String>,
}

pub const CONFIG_KEYS: [&str; 10] = [
    "grid.r_min",
    "grid.r_max",
    "grid.n_radial",
    "grid.n_angular",
    "solver.tol",
    "solver.max_iter",
    "quad.time_nodes",
    "quad.panel_nodes",
    "quad.ball_dirs",
    "quad.coarse_ratio",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Invalid(format!("config line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(Error::Invalid(format!("config line {}: unknown key {k}", n + 1)));
            }
            entries.insert(k.to_string(), v.to_string());
        }
        Ok(RunConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::Invalid(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    pub fn apply_grid(&self, g: &mut GridConfig) -> Result<()> {
        if let Some(v) = self.get("grid.r_min")? {
            g.r_min = v;
        }
        if let Some(v) = self.get("grid.r_max")? {
            g.r_max = v;
        }
        if let Some(v) = self.get("grid.n_radial")? {
            g.n_radial = v;
        }
        if let Some(v) = self.get("grid.n_angular")? {
            g.n_angular = v;
        }
        Ok(())
    }

    pub fn apply_quad(&self, q: &mut QuadParams) -> Result<()> {
        if let Some(v) = self.get("quad.time_nodes")? {
            q.time_nodes = v;
        }
        if let Some(v) = self.get("quad.panel_nodes")? {
            q.panel_nodes = v;
        }
        if let Some(v) = self.get("quad.ball_dirs")? {
            q.ball_dirs = v;
        }
        if let Some(v) = self.get("quad.coarse_ratio")? {
            q.coarse_ratio = v;
        }
        Ok(())
    }

    pub fn tol(&self) -> Result<Option<f64>> {
        self.get("solver.tol")
    }

    pub fn max_iter(&self) -> Result<Option<usize>> {
        self.get("solver.max_iter")
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

// Manifest

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: BTreeMap<String, String>,
    /// SHA-256 over the command and the resolved configuration.
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: Vec<String>, config: BTreeMap<String, String>) -> Self {
        let mut h = Sha256::new();
        for c in &command {
            h.update(c.as_bytes());
            h.update([0u8]);
        }
        for (k, v) in &config {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        let input_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        RunManifest { command, config, input_hash, outputs: Vec::new(), timings: BTreeMap::new() }
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn time(&mut self, key: &str, seconds: f64) {
        self.timings.insert(key.to_string(), seconds);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, -1.0 / 3.0, 6.02214076e23, 5e-324, f64::MAX] {
            let s = fmt17(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            let digits = s.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).count();
            assert_eq!(digits, 17);
        }
    }

    #[test]
    fn profile_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let g = Arc::new(Grid::new(2, GridConfig { r_min: 0.1, r_max: 50.0, n_radial: 10, n_angular: 8 }).unwrap());
        let f = GridField::from_fn(g, |x| vec![x[0].sin() / 3.0, x[1] * 1e-7]);
        let p = dir.path().join("U.csv");
        write_grid_field(&p, &f).unwrap();
        let back = read_profile(&p, 1.0).unwrap();
        assert_eq!(back.values, f.values);
        assert_eq!(back.grid.cfg.n_radial, 10);
        std::fs::write(&p, "r,i,l\n1,0,0\n").unwrap();
        assert!(read_profile(&p, 1.0).is_err());
    }

    #[test]
    fn config_file_parsing() {
        let c = RunConfig::parse("# grid\ngrid.r_min = 0.1\ngrid.n_radial=40\n\nsolver.tol=1e-9 # tight\n").unwrap();
        let mut g = GridConfig::default();
        c.apply_grid(&mut g).unwrap();
        assert_eq!((g.r_min, g.n_radial, g.n_angular), (0.1, 40, 64));
        assert_eq!(c.tol().unwrap(), Some(1e-9));
        assert!(RunConfig::parse("grid.bogus=1").is_err());
        assert!(RunConfig::parse("grid.r_min").is_err());
        let bad = RunConfig::parse("grid.n_radial=forty").unwrap();
        assert!(bad.apply_grid(&mut g).is_err());
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn manifest_hash_depends_on_inputs() {
        let mut c = BTreeMap::new();
        c.insert("grid.n_radial".to_string(), "96".to_string());
        let a = RunManifest::new(vec!["solve".into()], c.clone());
        let b = RunManifest::new(vec!["solve".into()], c.clone());
        assert_eq!(a.input_hash, b.input_hash);
        c.insert("grid.n_radial".to_string(), "97".to_string());
        assert_ne!(RunManifest::new(vec!["solve".into()], c).input_hash, a.input_hash);
    }

    #[test]
    fn svg_has_series() {
        let s = loglog_svg("t", "|x|", "v", &[Series { label: "a".into(), points: vec![(1.0, 1.0), (10.0, 1e-3), (5.0, 0.0)], line: true }]);
        assert!(s.starts_with("<svg") && s.contains("polyline") && s.trim_end().ends_with("</svg>"));
        assert!(loglog_svg("t", "x", "y", &[]).contains("no positive data"));
    }
}
