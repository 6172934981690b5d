//! Phantoms and on-disk formats for fields and sinograms.
//!
//! Binary files start with a short text header and end with raw
//! little-endian `f64` data:
//!
//! ```text
//! BRTFIELD 1
//! dim=2 dims=64,64,1 origin=0,0,0 spacing=0.015625,0.015625,1 interp=nearest
//! end
//! <dims[0]*dims[1]*dims[2] values, x fastest>
//! ```
//!
//! Binary sinograms use the magic `BRTSINO`, a `dim=.. rows=..` line and
//! then per row a `u32` facet followed by `x[3], theta[3], weight, value`.
//! CSV sinograms carry one row per sample with 17 significant digits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{vec_from_slice, Aabb, BoundaryJet, Vec3};
use crate::transport::{GridSpec, Interp, Sample, Sampling, ScalarGridField, Sinogram};

pub const FORMAT_VERSION: u32 = 1;

const FIELD_MAGIC: &str = "BRTFIELD";
const SINO_MAGIC: &str = "BRTSINO";
const CSV_MAGIC: &str = "# BRTSINO-CSV";
const CSV_COLUMNS: &str = "facet,x0,x1,x2,theta0,theta1,theta2,weight,value";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { found: String, expected: u32 },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("phantom is nonzero at cell {cell} ({point:?}), outside the declared support")]
    SupportViolation { cell: usize, point: [f64; 3] },
    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),
    #[error("sinogram does not match the sampling: {0}")]
    SamplingMismatch(String),
}

impl IoError {
    /// Stable identifier, shared with the CLI and the C interface.
    pub fn code(&self) -> &'static str {
        match self {
            IoError::Io(_) => "IO",
            IoError::FormatVersionMismatch { .. } => "FORMAT_VERSION_MISMATCH",
            IoError::CorruptHeader(_) => "CORRUPT_HEADER",
            IoError::SupportViolation { .. } => "SUPPORT_VIOLATION",
            IoError::InvalidPhantom(_) => "INVALID_PHANTOM",
            IoError::SamplingMismatch(_) => "SAMPLING_MISMATCH",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    /// Constant `amplitude` inside the axis-aligned ellipsoid.
    Ellipsoid { center: Vec<f64>, radii: Vec<f64>, amplitude: f64 },
    /// Constant `amplitude` inside the closed box `|x - center| <= half_widths`.
    Box { center: Vec<f64>, half_widths: Vec<f64>, amplitude: f64 },
    /// `amplitude * exp(s (1 - 1 / (1 - r^2)))` with `r = |x - center| / radius`,
    /// smooth with peak value `amplitude`. Larger `smoothness` narrows the peak.
    Bump {
        center: Vec<f64>,
        radius: f64,
        amplitude: f64,
        #[serde(default = "default_smoothness")]
        smoothness: f64,
    },
}

fn default_smoothness() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl SupportBox {
    pub fn aabb(&self) -> Aabb {
        Aabb { lo: Vec3::from(self.lo), hi: Vec3::from(self.hi) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub background: f64,
    /// Declared support `K`; unchecked when absent.
    #[serde(default)]
    pub support: Option<SupportBox>,
}

enum Compiled {
    Ellipsoid { c: Vec3, r: Vec3, a: f64 },
    Box { c: Vec3, h: Vec3, a: f64 },
    Bump { c: Vec3, radius: f64, a: f64, s: f64 },
}

impl Compiled {
    fn eval(&self, x: &Vec3, dim: usize) -> f64 {
        match self {
            Compiled::Ellipsoid { c, r, a } => {
                let q: f64 = (0..dim).map(|i| ((x[i] - c[i]) / r[i]).powi(2)).sum();
                if q <= 1.0 {
                    *a
                } else {
                    0.0
                }
            }
            Compiled::Box { c, h, a } => {
                if (0..dim).all(|i| (x[i] - c[i]).abs() <= h[i] + 1e-12) {
                    *a
                } else {
                    0.0
                }
            }
            Compiled::Bump { c, radius, a, s } => {
                let q = (x - c).norm_squared() / (radius * radius);
                if q >= 1.0 {
                    0.0
                } else {
                    a * (s * (1.0 - 1.0 / (1.0 - q))).exp()
                }
            }
        }
    }
}

impl PhantomSpec {
    pub fn from_toml(text: &str) -> Result<Self, IoError> {
        toml::from_str(text).map_err(|e| IoError::InvalidPhantom(e.to_string()))
    }

    fn compile(&self, dim: usize) -> Result<Vec<Compiled>, IoError> {
        let bad = |m: &str| IoError::InvalidPhantom(m.to_string());
        let vec = |v: &[f64]| vec_from_slice(dim, v).map_err(|e| IoError::InvalidPhantom(e.to_string()));
        if !self.background.is_finite() {
            return Err(bad("background must be finite"));
        }
        self.primitives
            .iter()
            .map(|p| {
                let c = match p {
                    Primitive::Ellipsoid { center, radii, amplitude } => {
                        Compiled::Ellipsoid { c: vec(center)?, r: vec(radii)?, a: *amplitude }
                    }
                    Primitive::Box { center, half_widths, amplitude } => {
                        Compiled::Box { c: vec(center)?, h: vec(half_widths)?, a: *amplitude }
                    }
                    Primitive::Bump { center, radius, amplitude, smoothness } => {
                        if !(*radius > 0.0) || !(*smoothness > 0.0) {
                            return Err(bad("bump radius and smoothness must be positive"));
                        }
                        Compiled::Bump { c: vec(center)?, radius: *radius, a: *amplitude, s: *smoothness }
                    }
                };
                let (a, sizes) = match &c {
                    Compiled::Ellipsoid { r, a, .. } => (*a, r.iter().take(dim).all(|v| *v > 0.0)),
                    Compiled::Box { h, a, .. } => (*a, h.iter().take(dim).all(|v| *v >= 0.0)),
                    Compiled::Bump { a, .. } => (*a, true),
                };
                if !a.is_finite() {
                    return Err(bad("amplitudes must be finite"));
                }
                if !sizes {
                    return Err(bad("radii and half-widths must be positive"));
                }
                Ok(c)
            })
            .collect()
    }
}

/// Samples the phantom at the cell centres of `grid`.
pub fn render(spec: &PhantomSpec, grid: &GridSpec) -> Result<ScalarGridField, IoError> {
    let prims = spec.compile(grid.dim)?;
    let support = spec.support.map(|s| s.aabb());
    let slack = (0..grid.dim).map(|i| grid.spacing[i]).fold(0.0, f64::max);
    let mut values = Vec::with_capacity(grid.len());
    for idx in 0..grid.len() {
        let x = grid.center(idx);
        let v: f64 = prims.iter().map(|p| p.eval(&x, grid.dim)).sum();
        if let Some(k) = &support {
            if v != 0.0 && k.distance(&x, grid.dim) > slack {
                return Err(IoError::SupportViolation { cell: idx, point: [x.x, x.y, x.z] });
            }
        }
        values.push(v + spec.background);
    }
    Ok(ScalarGridField { grid: *grid, values, interp: Interp::Nearest })
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64(r: &mut impl Read) -> Result<f64, IoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| IoError::CorruptHeader("data ends early".into()))?;
    Ok(f64::from_le_bytes(b))
}

fn expect_eof(r: &mut impl Read) -> Result<(), IoError> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(IoError::CorruptHeader("trailing bytes after data".into())),
    }
}

fn read_line(r: &mut impl BufRead) -> Result<String, IoError> {
    let mut s = String::new();
    let n = r.read_line(&mut s).map_err(|_| IoError::CorruptHeader("header is not text".into()))?;
    if n == 0 || !s.ends_with('\n') {
        return Err(IoError::CorruptHeader("header ends early".into()));
    }
    Ok(s.trim_end().to_string())
}

fn check_magic(line: &str, magic: &str) -> Result<(), IoError> {
    let mut it = line.split_whitespace();
    if it.next() != Some(magic) {
        return Err(IoError::CorruptHeader(format!("expected '{magic}'")));
    }
    let v = it.next().ok_or_else(|| IoError::CorruptHeader("missing version".into()))?;
    if v != FORMAT_VERSION.to_string() {
        return Err(IoError::FormatVersionMismatch { found: v.to_string(), expected: FORMAT_VERSION });
    }
    Ok(())
}

fn header_map(line: &str) -> Result<std::collections::HashMap<String, String>, IoError> {
    line.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| IoError::CorruptHeader(format!("bad entry '{kv}'")))
        })
        .collect()
}

fn parse_list<T: std::str::FromStr>(
    map: &std::collections::HashMap<String, String>,
    key: &str,
) -> Result<Vec<T>, IoError> {
    let s = map.get(key).ok_or_else(|| IoError::CorruptHeader(format!("missing '{key}'")))?;
    s.split(',').map(|t| t.parse().map_err(|_| IoError::CorruptHeader(format!("bad value for '{key}'")))).collect()
}

pub fn write_field(w: &mut impl Write, f: &ScalarGridField) -> Result<(), IoError> {
    let g = &f.grid;
    let interp = match f.interp {
        Interp::Nearest => "nearest",
        Interp::Multilinear => "multilinear",
    };
    writeln!(w, "{FIELD_MAGIC} {FORMAT_VERSION}")?;
    writeln!(
        w,
        "dim={} dims={},{},{} origin={} spacing={} interp={interp}",
        g.dim,
        g.dims[0],
        g.dims[1],
        g.dims[2],
        join(g.origin.as_slice()),
        join(g.spacing.as_slice())
    )?;
    writeln!(w, "end")?;
    write_f64s(w, &f.values)?;
    Ok(())
}

pub fn read_field(r: &mut impl BufRead) -> Result<ScalarGridField, IoError> {
    check_magic(&read_line(r)?, FIELD_MAGIC)?;
    let map = header_map(&read_line(r)?)?;
    if read_line(r)? != "end" {
        return Err(IoError::CorruptHeader("missing 'end'".into()));
    }
    let dim = parse_list::<usize>(&map, "dim")?;
    let dims = parse_list::<usize>(&map, "dims")?;
    let origin = parse_list::<f64>(&map, "origin")?;
    let spacing = parse_list::<f64>(&map, "spacing")?;
    if dim.len() != 1 || dims.len() != 3 || origin.len() != 3 || spacing.len() != 3 {
        return Err(IoError::CorruptHeader("wrong number of grid entries".into()));
    }
    let dim = dim[0];
    let grid =
        GridSpec::new(dim, &dims[..dim.min(3)], Vec3::from_column_slice(&origin), Vec3::from_column_slice(&spacing))
            .map_err(|e| IoError::CorruptHeader(e.to_string()))?;
    if dim == 2 && dims[2] != 1 {
        return Err(IoError::CorruptHeader("2D grid with more than one layer".into()));
    }
    let interp = match map.get("interp").map(String::as_str) {
        Some("nearest") | None => Interp::Nearest,
        Some("multilinear") => Interp::Multilinear,
        Some(other) => return Err(IoError::CorruptHeader(format!("unknown interp '{other}'"))),
    };
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        values.push(read_f64(r)?);
    }
    expect_eof(r)?;
    Ok(ScalarGridField { grid, values, interp })
}

pub fn save_field(path: &Path, f: &ScalarGridField) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_field(&mut w, f)?;
    w.flush()?;
    Ok(())
}

pub fn load_field(path: &Path) -> Result<ScalarGridField, IoError> {
    read_field(&mut BufReader::new(File::open(path)?))
}

/// Sinogram rows as stored on disk, detached from any domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SinogramData {
    pub dim: usize,
    pub samples: Vec<Sample>,
    pub values: Vec<f64>,
}

impl SinogramData {
    pub fn from_sinogram(g: &Sinogram) -> Self {
        SinogramData { dim: g.sampling.dim, samples: g.sampling.samples.clone(), values: g.values.clone() }
    }

    /// Attaches the values to `sampling`, which must list the same jets.
    pub fn attach(self, sampling: Arc<Sampling>, tol: f64) -> Result<Sinogram, IoError> {
        let mine = Sampling { spec: None, dim: self.dim, samples: self.samples, layouts: Vec::new() };
        if !sampling.compatible(&mine, tol) {
            return Err(IoError::SamplingMismatch(format!(
                "file has {} rows, sampling has {}",
                mine.samples.len(),
                sampling.len()
            )));
        }
        Sinogram::new(sampling, self.values).map_err(|e| IoError::SamplingMismatch(e.to_string()))
    }

    /// Sinogram on an explicit sampling made of the stored jets and weights.
    pub fn into_sinogram(self) -> Sinogram {
        let sampling = Sampling { spec: None, dim: self.dim, samples: self.samples, layouts: Vec::new() };
        Sinogram { sampling: Arc::new(sampling), values: self.values }
    }
}

pub fn write_sinogram(w: &mut impl Write, g: &Sinogram) -> Result<(), IoError> {
    writeln!(w, "{SINO_MAGIC} {FORMAT_VERSION}")?;
    writeln!(w, "dim={} rows={}", g.sampling.dim, g.values.len())?;
    writeln!(w, "end")?;
    for (s, v) in g.sampling.samples.iter().zip(&g.values) {
        w.write_all(&(s.jet.facet as u32).to_le_bytes())?;
        write_f64s(w, s.jet.x.as_slice())?;
        write_f64s(w, s.jet.theta.as_slice())?;
        write_f64s(w, &[s.weight, *v])?;
    }
    Ok(())
}

pub fn read_sinogram(r: &mut impl BufRead) -> Result<SinogramData, IoError> {
    check_magic(&read_line(r)?, SINO_MAGIC)?;
    let map = header_map(&read_line(r)?)?;
    if read_line(r)? != "end" {
        return Err(IoError::CorruptHeader("missing 'end'".into()));
    }
    let dim = parse_list::<usize>(&map, "dim")?;
    let rows = parse_list::<usize>(&map, "rows")?;
    if dim.len() != 1 || rows.len() != 1 || !(dim[0] == 2 || dim[0] == 3) {
        return Err(IoError::CorruptHeader("bad dim or rows".into()));
    }
    let mut samples = Vec::with_capacity(rows[0].min(1 << 24));
    let mut values = Vec::with_capacity(rows[0].min(1 << 24));
    for _ in 0..rows[0] {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| IoError::CorruptHeader("data ends early".into()))?;
        let facet = u32::from_le_bytes(b) as usize;
        let mut v = [0.0; 8];
        for x in v.iter_mut() {
            *x = read_f64(r)?;
        }
        let jet = BoundaryJet { x: Vec3::new(v[0], v[1], v[2]), theta: Vec3::new(v[3], v[4], v[5]), facet };
        samples.push(Sample { jet, weight: v[6], index: None });
        values.push(v[7]);
    }
    expect_eof(r)?;
    Ok(SinogramData { dim: dim[0], samples, values })
}

pub fn write_sinogram_csv(w: &mut impl Write, g: &Sinogram) -> Result<(), IoError> {
    writeln!(w, "{CSV_MAGIC} {FORMAT_VERSION} dim={}", g.sampling.dim)?;
    writeln!(w, "{CSV_COLUMNS}")?;
    for (s, v) in g.sampling.samples.iter().zip(&g.values) {
        let (x, t) = (s.jet.x, s.jet.theta);
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            s.jet.facet, x.x, x.y, x.z, t.x, t.y, t.z, s.weight, v
        )?;
    }
    Ok(())
}

pub fn read_sinogram_csv(r: &mut impl BufRead) -> Result<SinogramData, IoError> {
    let first = read_line(r)?;
    let rest =
        first.strip_prefix(CSV_MAGIC).ok_or_else(|| IoError::CorruptHeader(format!("expected '{CSV_MAGIC}'")))?;
    let mut it = rest.split_whitespace();
    let version = it.next().ok_or_else(|| IoError::CorruptHeader("missing version".into()))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(IoError::FormatVersionMismatch { found: version.to_string(), expected: FORMAT_VERSION });
    }
    let map = header_map(&it.collect::<Vec<_>>().join(" "))?;
    let dim = parse_list::<usize>(&map, "dim")?;
    if dim.len() != 1 || !(dim[0] == 2 || dim[0] == 3) {
        return Err(IoError::CorruptHeader("bad dim".into()));
    }
    if read_line(r)? != CSV_COLUMNS {
        return Err(IoError::CorruptHeader("unexpected columns".into()));
    }
    let mut samples = Vec::new();
    let mut values = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || IoError::CorruptHeader(format!("row {} is malformed", n + 1));
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(bad());
        }
        let facet: usize = cells[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = cells[1..].iter().map(|c| c.parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?;
        let jet = BoundaryJet { x: Vec3::new(v[0], v[1], v[2]), theta: Vec3::new(v[3], v[4], v[5]), facet };
        samples.push(Sample { jet, weight: v[6], index: None });
        values.push(v[7]);
    }
    Ok(SinogramData { dim: dim[0], samples, values })
}

/// Writes a binary sinogram, or CSV when the extension is `.csv`.
pub fn save_sinogram(path: &Path, g: &Sinogram) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    if is_csv(path) {
        write_sinogram_csv(&mut w, g)?;
    } else {
        write_sinogram(&mut w, g)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_sinogram(path: &Path) -> Result<SinogramData, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    if is_csv(path) {
        read_sinogram_csv(&mut r)
    } else {
        read_sinogram(&mut r)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}
