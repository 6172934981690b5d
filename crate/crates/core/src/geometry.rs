//! Convex polytopal domains described as half-space intersections.
//!
//! Points and directions are stored as 3-vectors; two-dimensional domains
//! live in the `z = 0` plane and never produce a nonzero third component.
//! Every facet carries a label: `Measure` facets host the measurement set
//! `E` (optionally restricted by mask constraints), `Reflect` facets are
//! mirrors. Mask-excluded parts of measure facets are flat, so they reflect
//! as well unless the domain is configured to absorb there.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lies outside the domain (constraint violation {0:.3e})")]
    NoExit(f64),
    #[error("direction grazes facet {facet} (|theta . nu| = {cos:.3e})")]
    Grazing { facet: usize, cos: f64 },
    #[error("point is not on facet {facet} (residual {residual:.3e})")]
    NotOnFacet { facet: usize, residual: f64 },
    #[error("direction is not inward at facet {facet} (nu . theta = {cos:.3e})")]
    NotInward { facet: usize, cos: f64 },
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FacetLabel {
    Measure,
    Reflect,
}

/// What happens to a ray that lands on a measure facet outside its mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskExterior {
    #[default]
    Reflect,
    Absorb,
}

/// One predicate of an E-mask; a point of a measure facet belongs to `E`
/// when all predicates of that facet hold.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskConstraint {
    /// Keeps points with `normal . x <= offset`.
    HalfSpace { normal: Vec3, offset: f64 },
    /// Keeps points inside the ball (or outside when `outside` is set).
    Ball { center: Vec3, radius: f64, outside: bool },
}

impl MaskConstraint {
    pub fn holds(&self, x: &Vec3) -> bool {
        match self {
            MaskConstraint::HalfSpace { normal, offset } => normal.dot(x) <= *offset,
            MaskConstraint::Ball { center, radius, outside } => {
                let inside = (x - center).norm() <= *radius;
                inside != *outside
            }
        }
    }

    /// In-plane distance from `x` (on the plane `nu . y = b`) to the trace of
    /// this constraint's boundary on that plane. `None` if the boundary does
    /// not meet the plane.
    fn boundary_distance(&self, x: &Vec3, nu: &Vec3, b: f64) -> Option<f64> {
        match self {
            MaskConstraint::HalfSpace { normal, offset } => {
                let proj = normal - nu * normal.dot(nu);
                let pn = proj.norm();
                if pn < 1e-12 {
                    return None;
                }
                Some((offset - normal.dot(x)).abs() / pn)
            }
            MaskConstraint::Ball { center, radius, .. } => {
                let h = nu.dot(center) - b;
                let rho2 = radius * radius - h * h;
                if rho2 <= 0.0 {
                    return None;
                }
                let foot = center - nu * h;
                Some(((x - foot).norm() - rho2.sqrt()).abs())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Facet {
    /// Outward unit normal.
    pub normal: Vec3,
    pub offset: f64,
    pub label: FacetLabel,
    pub mask: Vec<MaskConstraint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Aabb {
    pub fn contains(&self, x: &Vec3, dim: usize) -> bool {
        (0..dim).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }

    /// Euclidean distance from `x` to the box (0 inside).
    pub fn distance(&self, x: &Vec3, dim: usize) -> f64 {
        let mut s = 0.0;
        for i in 0..dim {
            let d = (self.lo[i] - x[i]).max(x[i] - self.hi[i]).max(0.0);
            s += d * d;
        }
        s.sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Boundary tolerance relative to the domain diameter.
    #[serde(default = "default_rel_boundary")]
    pub boundary_rel: f64,
    /// Minimum |theta . nu| at a hit before it counts as grazing.
    #[serde(default = "default_graze")]
    pub graze: f64,
}

fn default_rel_boundary() -> f64 {
    1e-9
}
fn default_graze() -> f64 {
    1e-9
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { boundary_rel: default_rel_boundary(), graze: default_graze() }
    }
}

/// An inward-pointing unit vector based on a facet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryJet {
    pub x: Vec3,
    pub theta: Vec3,
    pub facet: usize,
}

impl BoundaryJet {
    /// Validates that `x` is on `facet` and that `theta` points inward.
    pub fn new(d: &ConvexDomain, x: Vec3, theta: Vec3, facet: usize) -> Result<Self, GeometryError> {
        d.check_on_facet(&x, facet)?;
        let cos = d.facets[facet].normal.dot(&theta);
        if cos >= 0.0 {
            return Err(GeometryError::NotInward { facet, cos });
        }
        Ok(BoundaryJet { x, theta: theta.normalize(), facet })
    }
}

/// A parametrization of one facet used for sampling positions on it.
#[derive(Clone, Debug)]
pub struct FacetChart {
    pub facet: usize,
    pub origin: Vec3,
    /// In-plane orthonormal basis (one vector in 2D, two in 3D).
    pub basis: Vec<Vec3>,
    /// Parameter range per basis vector.
    pub ranges: Vec<(f64, f64)>,
}

impl FacetChart {
    pub fn point(&self, coords: &[f64]) -> Vec3 {
        let mut p = self.origin;
        for (e, c) in self.basis.iter().zip(coords) {
            p += e * *c;
        }
        p
    }

    pub fn coords(&self, x: &Vec3) -> Vec<f64> {
        self.basis.iter().map(|e| e.dot(&(x - self.origin))).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ConvexDomain {
    pub dim: usize,
    pub facets: Vec<Facet>,
    pub mask_exterior: MaskExterior,
    pub tolerances: Tolerances,
    vertices: Vec<Vec3>,
    bbox: Aabb,
    diameter: f64,
    volume: f64,
    facet_measures: Vec<f64>,
    interior_point: Vec3,
}

impl ConvexDomain {
    /// Builds a domain from raw half-spaces; normals are normalized (with
    /// their offsets) and the invariants are validated.
    pub fn new(dim: usize, facets: Vec<Facet>) -> Result<Self, GeometryError> {
        Self::with_options(dim, facets, MaskExterior::Reflect, Tolerances::default())
    }

    pub fn with_options(
        dim: usize,
        mut facets: Vec<Facet>,
        mask_exterior: MaskExterior,
        tolerances: Tolerances,
    ) -> Result<Self, GeometryError> {
        if dim != 2 && dim != 3 {
            return Err(GeometryError::InvalidDomain(format!("dimension {dim} unsupported")));
        }
        if facets.len() < dim + 1 {
            return Err(GeometryError::InvalidDomain("too few half-spaces for a bounded domain".into()));
        }
        for (i, f) in facets.iter_mut().enumerate() {
            if dim == 2 && f.normal.z != 0.0 {
                return Err(GeometryError::InvalidDomain(format!("facet {i}: 2D normal has a z component")));
            }
            let n = f.normal.norm();
            if !(n > 1e-300) || !n.is_finite() || !f.offset.is_finite() {
                return Err(GeometryError::InvalidDomain(format!("facet {i}: degenerate normal")));
            }
            f.normal /= n;
            f.offset /= n;
            if f.label == FacetLabel::Reflect && !f.mask.is_empty() {
                return Err(GeometryError::InvalidDomain(format!("facet {i}: masks only apply to measure facets")));
            }
            if (f.normal.norm() - 1.0).abs() > 1e-12 {
                return Err(GeometryError::InvalidDomain(format!("facet {i}: normal not unit")));
            }
        }
        let vertices = enumerate_vertices(dim, &facets);
        if vertices.len() < dim + 1 {
            return Err(GeometryError::InvalidDomain("domain is unbounded or empty".into()));
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &vertices {
            for i in 0..dim {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        if dim == 2 {
            lo.z = 0.0;
            hi.z = 0.0;
        }
        // A bounded polytope has all its extreme points among the vertices;
        // if the box is not finite something is unbounded.
        if !(0..dim).all(|i| lo[i].is_finite() && hi[i].is_finite()) {
            return Err(GeometryError::InvalidDomain("bounding box not finite".into()));
        }
        let mut diameter: f64 = 0.0;
        for (i, a) in vertices.iter().enumerate() {
            for b in &vertices[i + 1..] {
                diameter = diameter.max((a - b).norm());
            }
        }
        let centroid = vertices.iter().fold(Vec3::zeros(), |acc, v| acc + v) / vertices.len() as f64;
        let slack = facets.iter().map(|f| f.offset - f.normal.dot(&centroid)).fold(f64::INFINITY, f64::min);
        if slack <= 1e-9 * diameter.max(1e-300) {
            return Err(GeometryError::InvalidDomain("domain has empty interior".into()));
        }
        // Unboundedness check: every direction must be blocked by some facet.
        // A cheap sufficient test is that the vertex hull reproduces the box
        // along each axis in both senses, which enumerate_vertices guarantees
        // only for bounded sets; verify by probing axis rays from the centroid.
        for axis in 0..dim {
            for sign in [-1.0, 1.0] {
                let mut dir = Vec3::zeros();
                dir[axis] = sign;
                if !facets.iter().any(|f| f.normal.dot(&dir) > 1e-12) {
                    return Err(GeometryError::InvalidDomain("domain is unbounded".into()));
                }
            }
        }
        let mut d = ConvexDomain {
            dim,
            facets,
            mask_exterior,
            tolerances,
            vertices,
            bbox: Aabb { lo, hi },
            diameter,
            volume: 0.0,
            facet_measures: Vec::new(),
            interior_point: centroid,
        };
        d.facet_measures = (0..d.facets.len()).map(|k| d.compute_facet_measure(k)).collect();
        d.volume =
            d.facets.iter().zip(&d.facet_measures).map(|(f, m)| (f.offset - f.normal.dot(&centroid)) * m).sum::<f64>()
                / dim as f64;
        Ok(d)
    }

    pub fn bounding_box(&self) -> Aabb {
        self.bbox
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Lebesgue measure of the domain (area in 2D, volume in 3D).
    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn facet_measure(&self, k: usize) -> f64 {
        self.facet_measures[k]
    }

    pub fn boundary_measure(&self) -> f64 {
        self.facet_measures.iter().sum()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn interior_point(&self) -> Vec3 {
        self.interior_point
    }

    pub fn tol_boundary(&self) -> f64 {
        self.tolerances.boundary_rel * self.diameter
    }

    /// Largest constraint violation `max_i (n_i . x - b_i)` (negative inside).
    pub fn max_violation(&self, x: &Vec3) -> f64 {
        self.facets.iter().map(|f| f.normal.dot(x) - f.offset).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        self.max_violation(x) <= self.tol_boundary()
    }

    /// Distance from an interior point to the boundary.
    pub fn distance_to_boundary(&self, x: &Vec3) -> f64 {
        self.facets.iter().map(|f| f.offset - f.normal.dot(x)).fold(f64::INFINITY, f64::min)
    }

    pub fn check_on_facet(&self, x: &Vec3, facet: usize) -> Result<(), GeometryError> {
        let f = self.facets.get(facet).ok_or(GeometryError::NotOnFacet { facet, residual: f64::NAN })?;
        let residual = f.normal.dot(x) - f.offset;
        let tol = self.tol_boundary();
        if residual.abs() > tol || self.max_violation(x) > tol {
            return Err(GeometryError::NotOnFacet { facet, residual });
        }
        Ok(())
    }

    /// Forward exit time `tau_+(x, theta)` and the facet that is hit.
    pub fn exit_time(&self, x: &Vec3, theta: &Vec3) -> Result<(f64, usize), GeometryError> {
        let viol = self.max_violation(x);
        if viol > self.tol_boundary() {
            return Err(GeometryError::NoExit(viol));
        }
        let (t, facet, cos) = self.raw_exit(x, theta).ok_or(GeometryError::NoExit(viol))?;
        if cos < self.tolerances.graze {
            return Err(GeometryError::Grazing { facet, cos });
        }
        Ok((t, facet))
    }

    /// Exit time without validation; returns `(t, facet, theta . nu)`.
    pub(crate) fn raw_exit(&self, x: &Vec3, theta: &Vec3) -> Option<(f64, usize, f64)> {
        let mut best: Option<(f64, usize, f64)> = None;
        for (i, f) in self.facets.iter().enumerate() {
            let c = f.normal.dot(theta);
            if c <= 0.0 {
                continue;
            }
            let t = ((f.offset - f.normal.dot(x)) / c).max(0.0);
            if best.is_none_or(|(bt, _, _)| t < bt) {
                best = Some((t, i, c));
            }
        }
        best
    }

    /// Entry/exit parameters of the line `p + t d` with the closed domain.
    pub fn clip_line(&self, p: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let tol = self.tol_boundary();
        for f in &self.facets {
            let c = f.normal.dot(d);
            let r = f.offset - f.normal.dot(p);
            if c.abs() < 1e-14 {
                if r < -tol {
                    return None;
                }
                continue;
            }
            let t = r / c;
            if c > 0.0 {
                t1 = t1.min(t);
            } else {
                t0 = t0.max(t);
            }
        }
        if t0 <= t1 {
            Some((t0, t1))
        } else {
            None
        }
    }

    /// Whether `x` (on `facet`) belongs to the measurement set E.
    pub fn in_e(&self, x: &Vec3, facet: usize) -> Result<bool, GeometryError> {
        self.check_on_facet(x, facet)?;
        Ok(self.in_e_unchecked(x, facet))
    }

    pub(crate) fn in_e_unchecked(&self, x: &Vec3, facet: usize) -> bool {
        let f = &self.facets[facet];
        f.label == FacetLabel::Measure && f.mask.iter().all(|m| m.holds(x))
    }

    /// Distance from `x` to the relative boundary of its facet and, for
    /// measure facets, to the mask boundary (the minimum of the two).
    pub fn dist_to_facet_boundary(&self, x: &Vec3, facet: usize) -> Result<f64, GeometryError> {
        self.check_on_facet(x, facet)?;
        let (edge, mask) = self.facet_clearance(x, facet);
        Ok(mask.map_or(edge, |m| m.min(edge)))
    }

    /// `(distance to facet edges, distance to mask boundary)`; no validation.
    pub(crate) fn facet_clearance(&self, x: &Vec3, facet: usize) -> (f64, Option<f64>) {
        let f = &self.facets[facet];
        let nu = f.normal;
        let mut edge = f64::INFINITY;
        for (i, g) in self.facets.iter().enumerate() {
            if i == facet {
                continue;
            }
            let proj = g.normal - nu * g.normal.dot(&nu);
            let pn = proj.norm();
            if pn < 1e-12 {
                continue;
            }
            let d = (g.offset - g.normal.dot(x)) / pn;
            edge = edge.min(d.max(0.0));
        }
        let mask = if f.label == FacetLabel::Measure {
            f.mask.iter().filter_map(|m| m.boundary_distance(x, &nu, f.offset)).reduce(f64::min)
        } else {
            None
        };
        (edge, mask)
    }

    /// In-plane orthonormal basis for a facet.
    pub fn facet_basis(&self, facet: usize) -> Vec<Vec3> {
        plane_basis(self.dim, &self.facets[facet].normal)
    }

    /// Vertices lying on a facet, ordered along its boundary.
    pub fn facet_vertices(&self, facet: usize) -> Vec<Vec3> {
        let f = &self.facets[facet];
        let tol = 1e-9 * self.diameter.max(1.0);
        let mut vs: Vec<Vec3> =
            self.vertices.iter().filter(|v| (f.normal.dot(v) - f.offset).abs() < tol).copied().collect();
        if self.dim == 3 && vs.len() > 2 {
            let c = vs.iter().fold(Vec3::zeros(), |a, v| a + v) / vs.len() as f64;
            let basis = self.facet_basis(facet);
            vs.sort_by(|a, b| {
                let pa = (a - c).dot(&basis[1]).atan2((a - c).dot(&basis[0]));
                let pb = (b - c).dot(&basis[1]).atan2((b - c).dot(&basis[0]));
                pa.total_cmp(&pb)
            });
        }
        vs
    }

    fn compute_facet_measure(&self, facet: usize) -> f64 {
        let vs = self.facet_vertices(facet);
        match self.dim {
            2 => {
                if vs.len() < 2 {
                    0.0
                } else {
                    let mut m: f64 = 0.0;
                    for (i, a) in vs.iter().enumerate() {
                        for b in &vs[i + 1..] {
                            m = m.max((a - b).norm());
                        }
                    }
                    m
                }
            }
            _ => {
                if vs.len() < 3 {
                    return 0.0;
                }
                let nu = self.facets[facet].normal;
                let mut area = Vec3::zeros();
                for i in 0..vs.len() {
                    area += vs[i].cross(&vs[(i + 1) % vs.len()]);
                }
                0.5 * area.dot(&nu).abs()
            }
        }
    }

    /// A chart covering the facet: origin at the facet's lower corner in its
    /// own basis, ranges spanning its vertices.
    pub fn facet_chart(&self, facet: usize) -> FacetChart {
        let basis = self.facet_basis(facet);
        let f = &self.facets[facet];
        let vs = self.facet_vertices(facet);
        let anchor = vs.first().copied().unwrap_or_else(|| f.normal * f.offset);
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); basis.len()];
        for v in &vs {
            for (k, e) in basis.iter().enumerate() {
                let c = e.dot(&(v - anchor));
                ranges[k].0 = ranges[k].0.min(c);
                ranges[k].1 = ranges[k].1.max(c);
            }
        }
        let mut origin = anchor;
        for (k, e) in basis.iter().enumerate() {
            origin += e * ranges[k].0;
            ranges[k] = (0.0, ranges[k].1 - ranges[k].0);
        }
        FacetChart { facet, origin, basis, ranges }
    }
}

/// Orthonormal basis of the hyperplane orthogonal to `n`.
pub fn plane_basis(dim: usize, n: &Vec3) -> Vec<Vec3> {
    if dim == 2 {
        return vec![Vec3::new(-n.y, n.x, 0.0)];
    }
    let a = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vec3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let e1 = n.cross(&a).normalize();
    let e2 = n.cross(&e1);
    vec![e1, e2]
}

fn enumerate_vertices(dim: usize, facets: &[Facet]) -> Vec<Vec3> {
    let scale = facets.iter().map(|f| f.offset.abs()).fold(1.0, f64::max);
    let tol = 1e-9 * scale;
    let mut out: Vec<Vec3> = Vec::new();
    let mut push = |v: Vec3| {
        if facets.iter().all(|f| f.normal.dot(&v) - f.offset <= tol) && !out.iter().any(|w| (w - v).norm() < tol) {
            out.push(v);
        }
    };
    let n = facets.len();
    if dim == 2 {
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&facets[i], &facets[j]);
                let det = a.normal.x * b.normal.y - a.normal.y * b.normal.x;
                if det.abs() < 1e-12 {
                    continue;
                }
                let x = (a.offset * b.normal.y - a.normal.y * b.offset) / det;
                let y = (a.normal.x * b.offset - a.offset * b.normal.x) / det;
                push(Vec3::new(x, y, 0.0));
            }
        }
    } else {
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let m = Mat3::from_rows(&[
                        facets[i].normal.transpose(),
                        facets[j].normal.transpose(),
                        facets[k].normal.transpose(),
                    ]);
                    if m.determinant().abs() < 1e-12 {
                        continue;
                    }
                    if let Some(inv) = m.try_inverse() {
                        push(inv * Vec3::new(facets[i].offset, facets[j].offset, facets[k].offset));
                    }
                }
            }
        }
    }
    out
}

/// Serializable description of a domain (the documented config schema).
///
/// ```toml
/// dim = 2
/// mask_exterior = "reflect"      # or "absorb"
/// [[facets]]
/// normal = [-1.0, 0.0]
/// offset = 0.0
/// label = "measure"
/// [[facets.mask]]
/// kind = "halfspace"
/// normal = [0.0, 1.0]
/// offset = 0.9
/// ```
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainConfig {
    pub dim: usize,
    #[serde(default)]
    pub mask_exterior: MaskExterior,
    #[serde(default)]
    pub tolerances: Tolerances,
    pub facets: Vec<FacetConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FacetConfig {
    pub normal: Vec<f64>,
    pub offset: f64,
    pub label: FacetLabel,
    #[serde(default)]
    pub mask: Vec<MaskConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskConfig {
    HalfSpace {
        normal: Vec<f64>,
        offset: f64,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
        #[serde(default)]
        outside: bool,
    },
}

pub fn vec_from_slice(dim: usize, v: &[f64]) -> Result<Vec3, GeometryError> {
    if v.len() != dim {
        return Err(GeometryError::InvalidDomain(format!("expected {dim} components, got {}", v.len())));
    }
    let mut out = Vec3::zeros();
    for (i, c) in v.iter().enumerate() {
        out[i] = *c;
    }
    Ok(out)
}

pub fn vec_to_slice(dim: usize, v: &Vec3) -> Vec<f64> {
    (0..dim).map(|i| v[i]).collect()
}

impl DomainConfig {
    pub fn build(&self) -> Result<ConvexDomain, GeometryError> {
        let dim = self.dim;
        let facets = self
            .facets
            .iter()
            .map(|f| {
                let mask = f
                    .mask
                    .iter()
                    .map(|m| match m {
                        MaskConfig::HalfSpace { normal, offset } => {
                            let n = vec_from_slice(dim, normal)?;
                            let len = n.norm();
                            if !(len > 0.0) {
                                return Err(GeometryError::InvalidDomain("zero mask normal".into()));
                            }
                            Ok(MaskConstraint::HalfSpace { normal: n / len, offset: offset / len })
                        }
                        MaskConfig::Ball { center, radius, outside } => {
                            if !(*radius > 0.0) {
                                return Err(GeometryError::InvalidDomain("mask ball radius must be positive".into()));
                            }
                            Ok(MaskConstraint::Ball {
                                center: vec_from_slice(dim, center)?,
                                radius: *radius,
                                outside: *outside,
                            })
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Facet { normal: vec_from_slice(dim, &f.normal)?, offset: f.offset, label: f.label, mask })
            })
            .collect::<Result<Vec<_>, GeometryError>>()?;
        ConvexDomain::with_options(dim, facets, self.mask_exterior, self.tolerances)
    }

    pub fn from_toml(text: &str) -> Result<Self, GeometryError> {
        toml::from_str(text).map_err(|e| GeometryError::InvalidDomain(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("domain config serializes")
    }
}

impl From<&ConvexDomain> for DomainConfig {
    fn from(d: &ConvexDomain) -> Self {
        let dim = d.dim;
        DomainConfig {
            dim,
            mask_exterior: d.mask_exterior,
            tolerances: d.tolerances,
            facets: d
                .facets
                .iter()
                .map(|f| FacetConfig {
                    normal: vec_to_slice(dim, &f.normal),
                    offset: f.offset,
                    label: f.label,
                    mask: f
                        .mask
                        .iter()
                        .map(|m| match m {
                            MaskConstraint::HalfSpace { normal, offset } => {
                                MaskConfig::HalfSpace { normal: vec_to_slice(dim, normal), offset: *offset }
                            }
                            MaskConstraint::Ball { center, radius, outside } => MaskConfig::Ball {
                                center: vec_to_slice(dim, center),
                                radius: *radius,
                                outside: *outside,
                            },
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Ready-made domains used throughout the tests and the CLI.
pub mod presets {
    use super::*;

    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;
    pub const BOTTOM: usize = 2;
    pub const TOP: usize = 3;

    fn label(measure: &[usize], i: usize) -> FacetLabel {
        if measure.contains(&i) {
            FacetLabel::Measure
        } else {
            FacetLabel::Reflect
        }
    }

    /// Unit square `[0,1]^2`; facets ordered left, right, bottom, top.
    pub fn unit_square(measure: &[usize]) -> ConvexDomain {
        let normals = [Vec3::new(-1.0, 0.0, 0.0), Vec3::x(), Vec3::new(0.0, -1.0, 0.0), Vec3::y()];
        let offsets = [0.0, 1.0, 0.0, 1.0];
        let facets = (0..4)
            .map(|i| Facet { normal: normals[i], offset: offsets[i], label: label(measure, i), mask: vec![] })
            .collect();
        ConvexDomain::new(2, facets).expect("unit square is valid")
    }

    /// Regular hexagon with unit inradius centred at the origin; facet `k`
    /// has outward normal at angle `k * 60` degrees.
    pub fn hexagon(measure: &[usize]) -> ConvexDomain {
        let facets = (0..6)
            .map(|k| {
                let a = k as f64 * std::f64::consts::PI / 3.0;
                Facet { normal: Vec3::new(a.cos(), a.sin(), 0.0), offset: 1.0, label: label(measure, k), mask: vec![] }
            })
            .collect();
        ConvexDomain::new(2, facets).expect("hexagon is valid")
    }

    /// Unit cube `[0,1]^3`; facet `2a` is `x_a = 0`, facet `2a+1` is `x_a = 1`.
    pub fn unit_cube(measure: &[usize]) -> ConvexDomain {
        unit_cube_masked(measure, &[])
    }

    /// Unit cube whose measure facets all share the given mask constraints.
    pub fn unit_cube_masked(measure: &[usize], mask: &[MaskConstraint]) -> ConvexDomain {
        let facets = (0..6)
            .map(|i| {
                let axis = i / 2;
                let mut n = Vec3::zeros();
                n[axis] = if i % 2 == 0 { -1.0 } else { 1.0 };
                let lab = label(measure, i);
                Facet {
                    normal: n,
                    offset: if i % 2 == 0 { 0.0 } else { 1.0 },
                    label: lab,
                    mask: if lab == FacetLabel::Measure { mask.to_vec() } else { vec![] },
                }
            })
            .collect();
        ConvexDomain::new(3, facets).expect("unit cube is valid")
    }

    /// The three cube faces through the origin corner.
    pub const CUBE_ORIGIN_FACES: [usize; 3] = [0, 2, 4];

    /// Cube with E = origin faces minus the slab `x_3 >= 1 - eps`.
    pub fn cube_slab(eps: f64) -> ConvexDomain {
        unit_cube_masked(&CUBE_ORIGIN_FACES, &[MaskConstraint::HalfSpace { normal: Vec3::z(), offset: 1.0 - eps }])
    }

    /// Cube with E = origin faces intersected with a ball about the origin,
    /// giving a curved mask boundary.
    pub fn cube_cap(radius: f64) -> ConvexDomain {
        unit_cube_masked(&CUBE_ORIGIN_FACES, &[MaskConstraint::Ball { center: Vec3::zeros(), radius, outside: false }])
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;
    use approx::assert_abs_diff_eq;

    const S2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn exit_time_examples() {
        let sq = unit_square(&[LEFT]);
        let (t, f) = sq.exit_time(&Vec3::new(0.0, 0.25, 0.0), &Vec3::new(S2, S2, 0.0)).unwrap();
        assert_abs_diff_eq!(t, 0.75 * 2f64.sqrt(), epsilon = 1e-14);
        assert_eq!(f, TOP);
        let (t, f) = sq.exit_time(&Vec3::new(0.0, 0.5, 0.0), &Vec3::x()).unwrap();
        assert_abs_diff_eq!(t, 1.0, epsilon = 1e-15);
        assert_eq!(f, RIGHT);
        let (t, f) = sq.exit_time(&Vec3::new(0.5, 0.5, 0.0), &Vec3::y()).unwrap();
        assert_abs_diff_eq!(t, 0.5, epsilon = 1e-15);
        assert_eq!(f, TOP);
    }

    #[test]
    fn exit_time_errors() {
        let sq = unit_square(&[LEFT]);
        assert!(matches!(sq.exit_time(&Vec3::new(1.5, 0.5, 0.0), &Vec3::x()), Err(GeometryError::NoExit(_))));
        // leaving through the top edge while almost tangent to it
        let th = Vec3::new(1.0, 1e-12, 0.0).normalize();
        assert!(matches!(sq.exit_time(&Vec3::new(0.5, 1.0, 0.0), &th), Err(GeometryError::Grazing { .. })));
    }

    #[test]
    fn in_e_examples() {
        let sq = unit_square(&[LEFT]);
        assert!(sq.in_e(&Vec3::new(0.0, 0.3, 0.0), LEFT).unwrap());
        assert!(!sq.in_e(&Vec3::new(1.0, 0.3, 0.0), RIGHT).unwrap());
        let cube = cube_slab(0.1);
        assert!(!cube.in_e(&Vec3::new(0.0, 0.5, 0.95), 0).unwrap());
        assert!(cube.in_e(&Vec3::new(0.0, 0.5, 0.5), 0).unwrap());
        assert!(matches!(sq.in_e(&Vec3::new(0.2, 0.3, 0.0), LEFT), Err(GeometryError::NotOnFacet { .. })));
    }

    #[test]
    fn facet_boundary_distance_examples() {
        let sq = unit_square(&[LEFT]);
        assert_abs_diff_eq!(sq.dist_to_facet_boundary(&Vec3::new(0.0, 0.5, 0.0), LEFT).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sq.dist_to_facet_boundary(&Vec3::new(0.0, 0.1, 0.0), LEFT).unwrap(), 0.1, epsilon = 1e-15);
        let cube = cube_slab(0.1);
        assert_abs_diff_eq!(cube.dist_to_facet_boundary(&Vec3::new(0.0, 0.5, 0.85), 0).unwrap(), 0.05, epsilon = 1e-12);
        assert!(cube.dist_to_facet_boundary(&Vec3::new(0.3, 0.5, 0.85), 0).is_err());
    }

    #[test]
    fn curved_mask_distance() {
        let cube = cube_cap(1.2);
        // on face x1 = 0 the mask boundary is the circle of radius 1.2 about the origin
        let x = Vec3::new(0.0, 0.8, 0.8);
        let d = cube.dist_to_facet_boundary(&x, 0).unwrap();
        let expected = (1.2 - (0.8f64 * 0.8 * 2.0).sqrt()).min(0.2);
        assert_abs_diff_eq!(d, expected, epsilon = 1e-12);
    }

    #[test]
    fn measures() {
        assert_abs_diff_eq!(unit_square(&[]).volume(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(unit_cube(&[]).volume(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(unit_cube(&[]).boundary_measure(), 6.0, epsilon = 1e-12);
        let hex = hexagon(&[]);
        // inradius 1: side 2/sqrt(3), area 2*sqrt(3)
        assert_abs_diff_eq!(hex.volume(), 2.0 * 3f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(hex.facet_measure(0), 2.0 / 3f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(hex.diameter(), 4.0 / 3f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(unit_cube(&[]).diameter(), 3f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn loader_normalizes_and_validates() {
        let text = r#"
            dim = 2
            [[facets]]
            normal = [-2.0, 0.0]
            offset = 0.0
            label = "measure"
            [[facets]]
            normal = [3.0, 0.0]
            offset = 3.0
            label = "reflect"
            [[facets]]
            normal = [0.0, -1.0]
            offset = 0.0
            label = "reflect"
            [[facets]]
            normal = [0.0, 1.0]
            offset = 1.0
            label = "reflect"
        "#;
        let d = DomainConfig::from_toml(text).unwrap().build().unwrap();
        assert_abs_diff_eq!(d.facets[1].offset, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.volume(), 1.0, epsilon = 1e-12);
        let again = DomainConfig::from(&d).build().unwrap();
        assert_eq!(again.facets, d.facets);

        // open strip: unbounded
        let strip = r#"
            dim = 2
            [[facets]]
            normal = [0.0, -1.0]
            offset = 0.0
            label = "measure"
            [[facets]]
            normal = [0.0, 1.0]
            offset = 1.0
            label = "reflect"
            [[facets]]
            normal = [1.0, 0.0]
            offset = 1.0
            label = "reflect"
        "#;
        assert!(DomainConfig::from_toml(strip).unwrap().build().is_err());
    }

    #[test]
    fn chart_covers_facet() {
        let hex = hexagon(&[0]);
        let ch = hex.facet_chart(0);
        assert_abs_diff_eq!(ch.ranges[0].1, hex.facet_measure(0), epsilon = 1e-12);
        let mid = ch.point(&[ch.ranges[0].1 / 2.0]);
        assert!(hex.check_on_facet(&mid, 0).is_ok());
        let cube = unit_cube(&[4]);
        let ch = cube.facet_chart(4);
        assert_abs_diff_eq!(ch.ranges[0].1 * ch.ranges[1].1, 1.0, epsilon = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dir2(a: f64) -> Vec3 {
            Vec3::new(a.cos(), a.sin(), 0.0)
        }

        proptest! {
            #[test]
            fn chord_is_sum_of_exit_times(px in 0.01f64..0.99, py in 0.01f64..0.99, a in 0.0f64..std::f64::consts::TAU) {
                let hex = hexagon(&[]);
                let x = Vec3::new(px - 0.5, py - 0.5, 0.0) * 1.2;
                let th = dir2(a);
                let (tp, fp) = hex.exit_time(&x, &th).unwrap();
                let (tm, _) = hex.exit_time(&x, &(-th)).unwrap();
                let (c0, c1) = hex.clip_line(&x, &th).unwrap();
                prop_assert!((tp + tm - (c1 - c0)).abs() < 1e-10);
                let hit = x + th * tp;
                prop_assert!((hex.facets[fp].normal.dot(&hit) - hex.facets[fp].offset).abs() < 1e-10);
            }

            #[test]
            fn cube_exit_lands_on_facet(px in 0.01f64..0.99, py in 0.01f64..0.99, pz in 0.01f64..0.99,
                                        u in -1.0f64..1.0, phi in 0.0f64..std::f64::consts::TAU) {
                let cube = unit_cube(&[]);
                let x = Vec3::new(px, py, pz);
                let s = (1.0 - u * u).sqrt();
                let th = Vec3::new(s * phi.cos(), s * phi.sin(), u);
                let (tp, fp) = cube.exit_time(&x, &th).unwrap();
                let (tm, _) = cube.exit_time(&x, &(-th)).unwrap();
                let (c0, c1) = cube.clip_line(&x, &th).unwrap();
                prop_assert!((tp + tm - (c1 - c0)).abs() < 1e-10);
                let hit = x + th * tp;
                prop_assert!((cube.facets[fp].normal.dot(&hit) - cube.facets[fp].offset).abs() < 1e-10);
            }

            #[test]
            fn in_e_stable_under_tiny_offsets(y in 0.0f64..1.0, z in 0.0f64..1.0, eps in -1.0f64..1.0) {
                let cube = cube_slab(0.1);
                let x = Vec3::new(0.0, y, z);
                let tol = cube.tol_boundary();
                let moved = Vec3::new(eps * tol / 10.0, y, z);
                prop_assert_eq!(cube.in_e(&x, 0).unwrap(), cube.in_e(&moved, 0).unwrap());
            }
        }
    }
}
