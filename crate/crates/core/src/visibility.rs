//! Visible points and covectors: which `(x, xi)` are conormal to a regular
//! broken ray with at most `n_max` reflections in the support of `alpha`.

use std::collections::HashSet;
use std::f64::consts::PI;

use rayon::prelude::*;

use crate::billiards::trace_broken_ray;
use crate::geometry::{BoundaryJet, ConvexDomain, FacetLabel, MaskExterior, Vec3};
use crate::normal_ops::{orthogonal_directions, RayModel};
use crate::transport::{GridSpec, ScalarGridField};
use crate::unfolding::{reflect_point, reflect_vector};

/// Resolution of the search over directions orthogonal to a covector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchSpec {
    /// Points on the great circle `theta ⊥ xi` (3D only).
    pub n_circle: usize,
    /// When positive, directions failing exactly are retried tilted by up
    /// to this angle towards `±xi`.
    pub angular_tol: f64,
    /// Number of tilts on each side.
    pub refine: usize,
}

impl Default for SearchSpec {
    fn default() -> Self {
        SearchSpec { n_circle: 128, angular_tol: 0.0, refine: 4 }
    }
}

/// A regular broken ray through the point: its start jet, its direction
/// at the point and its reflection count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Witness {
    pub start: BoundaryJet,
    pub theta: Vec3,
    pub reflections: usize,
}

/// Looks for a usable ray through `x` conormal to `xi`.
pub fn covector_visible(model: &RayModel, x: &Vec3, xi: &Vec3, search: &SearchSpec) -> Option<Witness> {
    let xi = xi.normalize();
    let dirs = orthogonal_directions(model.domain.dim, &xi, search.n_circle);
    let try_dir = |theta: &Vec3| {
        let t = model.through_ray(x, theta)?;
        let reflections = t.0.segments.len() - 1;
        Some(Witness { start: t.0.jet, theta: *theta, reflections })
    };
    if let Some(w) = dirs.iter().find_map(|(th, _)| try_dir(th)) {
        return Some(w);
    }
    if search.angular_tol <= 0.0 || search.refine == 0 {
        return None;
    }
    for (th, _) in &dirs {
        for k in 1..=search.refine {
            let a = search.angular_tol * k as f64 / (search.refine as f64 + 1.0);
            for s in [a, -a] {
                let tilted = th * s.cos() + xi * s.sin();
                if let Some(w) = try_dir(&tilted) {
                    return Some(w);
                }
            }
        }
    }
    None
}

/// Re-traces a witness and checks that it is a regular ray within the
/// reflection budget passing through `x` with `|theta . xi| < tol`.
pub fn witness_valid(model: &RayModel, x: &Vec3, xi: &Vec3, w: &Witness, tol: f64) -> bool {
    let Ok(ray) = trace_broken_ray(model.domain, &w.start, &model.trace) else { return false };
    if !ray.is_regular() || ray.segments.len() - 1 > model.trace.n_max || w.theta.dot(&xi.normalize()).abs() >= tol {
        return false;
    }
    let eps = 1e-9 * model.domain.diameter();
    ray.segments.iter().any(|s| {
        let t = (x - s.start).dot(&s.dir).clamp(0.0, s.length);
        (s.start + s.dir * t - x).norm() < eps && (s.dir - w.theta).norm() < 1e-6
    })
}

/// Default covector grids: `n` directions over a half circle in 2D (a
/// covector and its negative are equivalent), a Fibonacci sphere in 3D.
pub fn covector_grid(dim: usize, n: usize) -> Vec<Vec3> {
    if dim == 2 {
        return (0..n)
            .map(|k| {
                let a = (k as f64 + 0.5) * PI / n as f64;
                Vec3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
    }
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            Vec3::new(r * a.cos(), r * a.sin(), z)
        })
        .collect()
}

pub fn default_covectors(dim: usize) -> Vec<Vec3> {
    covector_grid(dim, if dim == 2 { 64 } else { 266 })
}

pub struct VisibilityMap {
    pub grid: GridSpec,
    /// Grid indices of the cells whose centres lie in the domain.
    pub cells: Vec<usize>,
    pub covectors: Vec<Vec3>,
    /// `witnesses[p * covectors.len() + c]`.
    pub witnesses: Vec<Option<Witness>>,
}

impl VisibilityMap {
    pub fn point(&self, p: usize) -> Vec3 {
        self.grid.center(self.cells[p])
    }

    pub fn visible(&self, p: usize, c: usize) -> bool {
        self.witnesses[p * self.covectors.len() + c].is_some()
    }

    pub fn visible_fraction(&self, p: usize) -> f64 {
        let n = self.covectors.len();
        let row = &self.witnesses[p * n..(p + 1) * n];
        row.iter().filter(|w| w.is_some()).count() as f64 / n as f64
    }

    /// Whether every sampled covector at point `p` is visible.
    pub fn in_visible_set(&self, p: usize) -> bool {
        self.visible_fraction(p) == 1.0
    }

    /// Visible fraction per cell; zero outside the domain.
    pub fn fraction_field(&self) -> ScalarGridField {
        let mut f = ScalarGridField::zeros(self.grid);
        for (p, &c) in self.cells.iter().enumerate() {
            f.values[c] = self.visible_fraction(p);
        }
        f
    }

    pub fn invisible(&self) -> Vec<(Vec3, Vec3)> {
        let n = self.covectors.len();
        (0..self.cells.len())
            .flat_map(|p| (0..n).filter(move |&c| !self.visible(p, c)).map(move |c| (p, c)))
            .map(|(p, c)| (self.point(p), self.covectors[c]))
            .collect()
    }
}

/// Applies [`covector_visible`] at every cell centre inside the domain.
pub fn visible_set_map(model: &RayModel, grid: GridSpec, covectors: &[Vec3], search: &SearchSpec) -> VisibilityMap {
    let cells: Vec<usize> = (0..grid.len()).filter(|&i| model.domain.contains(&grid.center(i))).collect();
    let witnesses = cells
        .par_iter()
        .flat_map_iter(|&i| {
            let x = grid.center(i);
            covectors.iter().map(move |xi| covector_visible(model, &x, xi, search)).collect::<Vec<_>>()
        })
        .collect();
    VisibilityMap { grid, cells, covectors: covectors.to_vec(), witnesses }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionParams {
    /// Reflections followed when unfolding the hyperplane.
    pub depth: usize,
    /// Sample points per intersection chord (3D).
    pub per_chord: usize,
    /// Required distance from `∂E` (and from facet edges).
    pub tol: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionReport {
    pub checked: usize,
    pub violations: Vec<(Vec3, Vec3)>,
}

/// Checks, for each sampled `(x, xi)`, that the hyperplane through `x`
/// normal to `xi` meets E at a point away from `∂E`. Where the hyperplane
/// meets a reflecting part of the boundary it is mirrored across that
/// facet, up to `depth` times, so the test is carried out on the unfolded
/// boundary seen by rays conormal to `xi`.
pub fn check_condition_e(d: &ConvexDomain, samples: &[(Vec3, Vec3)], params: &ConditionParams) -> ConditionReport {
    let violations =
        samples.par_iter().filter(|(x, xi)| !plane_meets_e(d, x, &xi.normalize(), params)).copied().collect();
    ConditionReport { checked: samples.len(), violations }
}

fn plane_meets_e(d: &ConvexDomain, x: &Vec3, xi: &Vec3, params: &ConditionParams) -> bool {
    let key = |p: &Vec3, n: &Vec3| {
        let n = if n.iter().find(|v| v.abs() > 1e-9).is_some_and(|v| *v < 0.0) { -n } else { *n };
        let q = |v: f64| (v * 1e8).round() as i64;
        [q(n.x), q(n.y), q(n.z), q(n.dot(p))]
    };
    let mut seen = HashSet::new();
    let mut frontier = vec![(*x, *xi)];
    seen.insert(key(x, xi));
    for level in 0..=params.depth {
        let mut next = Vec::new();
        for (p, n) in &frontier {
            for (k, z) in boundary_samples(d, p, n, params.per_chord) {
                let f = &d.facets[k];
                let (edge, mask) = d.facet_clearance(&z, k);
                if edge <= params.tol {
                    continue;
                }
                let in_e = d.in_e_unchecked(&z, k);
                if in_e && mask.is_none_or(|m| m > params.tol) {
                    return true;
                }
                let reflects = f.label == FacetLabel::Reflect
                    || (!in_e && d.mask_exterior == MaskExterior::Reflect && mask.is_some_and(|m| m > params.tol));
                if reflects && level < params.depth {
                    let a = f.normal * f.offset;
                    let (p2, n2) = (reflect_point(&a, &f.normal, p), reflect_vector(&f.normal, n));
                    if seen.insert(key(&p2, &n2)) {
                        next.push((p2, n2));
                    }
                }
            }
        }
        frontier = next;
    }
    false
}

/// Points of `{z : (z - p) . n = 0} ∩ ∂Ω`, tagged with their facet.
fn boundary_samples(d: &ConvexDomain, p: &Vec3, n: &Vec3, per_chord: usize) -> Vec<(usize, Vec3)> {
    let h = n.dot(p);
    let tol = d.tol_boundary();
    let mut out = Vec::new();
    for (k, f) in d.facets.iter().enumerate() {
        if d.dim == 2 {
            // solve n.z = h, nu.z = c in the plane
            let det = n.x * f.normal.y - n.y * f.normal.x;
            if det.abs() < 1e-12 {
                continue;
            }
            let z = Vec3::new((h * f.normal.y - n.y * f.offset) / det, (n.x * f.offset - h * f.normal.x) / det, 0.0);
            if d.max_violation(&z) <= tol {
                out.push((k, z));
            }
            continue;
        }
        let u = n.cross(&f.normal);
        let uu = u.norm_squared();
        if uu < 1e-18 {
            continue;
        }
        let z0 = (f.normal.cross(&u) * h + u.cross(n) * f.offset) / uu;
        let dir = u / uu.sqrt();
        if let Some((t0, t1)) = d.clip_line(&z0, &dir) {
            if t1 - t0 <= tol {
                continue;
            }
            for i in 0..per_chord {
                let t = t0 + (t1 - t0) * (i as f64 + 0.5) / per_chord as f64;
                out.push((k, z0 + dir * t));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::billiards::TraceParams;
    use crate::geometry::presets::*;
    use crate::transport::{Attenuation, CutoffSpec};

    fn model(d: &ConvexDomain, n_max: usize) -> RayModel<'_> {
        RayModel {
            domain: d,
            attenuation: &Attenuation::Zero,
            cutoff: CutoffSpec::unit(),
            trace: TraceParams::for_domain(d, n_max),
        }
    }

    #[test]
    fn square_examples() {
        let x = Vec3::new(0.5, 0.5, 0.0);
        let left = unit_square(&[LEFT]);
        let m = model(&left, 8);
        let s = SearchSpec { angular_tol: 0.0, ..Default::default() };
        assert!(covector_visible(&m, &x, &Vec3::x(), &s).is_none());
        let lb = unit_square(&[LEFT, BOTTOM]);
        let m = model(&lb, 1);
        let w = covector_visible(&m, &x, &Vec3::x(), &s).unwrap();
        assert_eq!(w.reflections, 1);
        assert!((w.start.x - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        assert!((w.start.theta - Vec3::y()).norm() < 1e-12);
        assert!(witness_valid(&m, &x, &Vec3::x(), &w, 1e-12));
        // without a reflection budget the bounce is unavailable
        let m0 = model(&lb, 0);
        assert!(covector_visible(&m0, &x, &Vec3::x(), &s).is_none());
    }

    #[test]
    fn slab_top_is_invisible() {
        let eps = 0.1;
        let cube = cube_slab(eps);
        let m = model(&cube, 4);
        let s = SearchSpec::default();
        for z in [0.93, 0.97] {
            let x = Vec3::new(0.4, 0.55, z);
            assert!(covector_visible(&m, &x, &Vec3::z(), &s).is_none());
            assert!(covector_visible(&m, &x, &-Vec3::z(), &s).is_none());
            assert!(covector_visible(&m, &x, &Vec3::x(), &s).is_some());
        }
        assert!(covector_visible(&m, &Vec3::new(0.4, 0.55, 0.5), &Vec3::z(), &s).is_some());
    }

    #[test]
    fn three_edges_fully_visible() {
        let sq = unit_square(&[LEFT, BOTTOM, TOP]);
        let m = model(&sq, 1);
        let grid = GridSpec::new(2, &[8, 8], Vec3::new(0.1, 0.1, 0.0), Vec3::new(0.1, 0.1, 1.0)).unwrap();
        let s = SearchSpec { angular_tol: 0.02, ..Default::default() };
        let map = visible_set_map(&m, grid, &default_covectors(2), &s);
        assert_eq!(map.cells.len(), 64);
        for p in 0..map.cells.len() {
            assert!(map.in_visible_set(p), "point {:?}", map.point(p));
        }
        for (i, w) in map.witnesses.iter().enumerate() {
            let (p, c) = (i / map.covectors.len(), i % map.covectors.len());
            assert!(witness_valid(&m, &map.point(p), &map.covectors[c], w.as_ref().unwrap(), 0.02));
        }
    }

    #[test]
    fn left_only_partial_and_empty_none() {
        let grid = GridSpec::new(2, &[4, 4], Vec3::new(0.2, 0.2, 0.0), Vec3::new(0.15, 0.15, 1.0)).unwrap();
        let cov = covector_grid(2, 16);
        let sq = unit_square(&[LEFT]);
        let m = model(&sq, 2);
        let map = visible_set_map(&m, grid, &cov, &SearchSpec::default());
        for p in 0..map.cells.len() {
            let f = map.visible_fraction(p);
            assert!(f > 0.0 && f < 1.0, "{f}");
        }
        assert!(!map.invisible().is_empty());
        let none = unit_square(&[]);
        let m = model(&none, 2);
        let map = visible_set_map(&m, grid, &cov, &SearchSpec::default());
        assert!(map.witnesses.iter().all(|w| w.is_none()));
        assert!(map.fraction_field().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn enlarging_e_is_monotone() {
        let grid = GridSpec::new(2, &[5, 5], Vec3::new(0.1, 0.1, 0.0), Vec3::new(0.16, 0.16, 1.0)).unwrap();
        let cov = covector_grid(2, 24);
        let small = unit_square(&[LEFT]);
        let big = unit_square(&[LEFT, TOP]);
        let a = visible_set_map(&model(&small, 3), grid, &cov, &SearchSpec::default());
        let b = visible_set_map(&model(&big, 3), grid, &cov, &SearchSpec::default());
        // a ray that ends in the smaller E may be cut short by the larger one,
        // but then its shorter version still ends in E and is still regular
        for (wa, wb) in a.witnesses.iter().zip(&b.witnesses) {
            assert!(wa.is_none() || wb.is_some());
        }
    }

    #[test]
    fn covector_grids() {
        let g = covector_grid(3, 266);
        assert_eq!(g.len(), 266);
        assert!(g.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        let mean: Vec3 = g.iter().sum::<Vec3>() / 266.0;
        assert!(mean.norm() < 1e-2);
        assert_eq!(default_covectors(2).len(), 64);
    }

    #[test]
    fn condition_examples() {
        let params = ConditionParams { depth: 3, per_chord: 64, tol: 1e-3 };
        let mut samples = Vec::new();
        for xi in covector_grid(3, 40) {
            for x in [Vec3::new(0.5, 0.5, 0.5), Vec3::new(0.9, 0.9, 0.9), Vec3::new(0.2, 0.8, 0.6)] {
                samples.push((x, xi));
            }
        }
        let cap = cube_cap(1.2);
        let r = check_condition_e(&cap, &samples, &params);
        assert_eq!(r.checked, samples.len());
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        let full = unit_cube(&[0, 1, 2, 3, 4, 5]);
        assert!(check_condition_e(&full, &samples, &params).violations.is_empty());
        let eps = 0.1;
        let slab = cube_slab(eps);
        let flat = [(Vec3::new(0.3, 0.6, 1.0 - eps), Vec3::z()), (Vec3::new(0.5, 0.5, 0.95), -Vec3::z())];
        let r = check_condition_e(&slab, &flat, &params);
        assert_eq!(r.violations.len(), 2);
        let ok = [(Vec3::new(0.3, 0.6, 0.5), Vec3::z())];
        assert!(check_condition_e(&slab, &ok, &params).violations.is_empty());
    }
}
