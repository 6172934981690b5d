//! Billiard dynamics inside a convex domain and broken-ray tracing.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundaryJet, ConvexDomain, FacetLabel, GeometryError, MaskExterior, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("ray is not regular ({0})")]
    NotRegular(RayStatus),
    #[error("billiard orbit hits within {dist:.3e} of an edge of facet {facet}")]
    EdgeHit { facet: usize, dist: f64 },
    #[error("start point is not in the measurement set")]
    StartNotInE,
}

/// Termination status of a traced broken ray.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RayStatus {
    EndedInE,
    TrappedCap,
    IrregularEdge,
    #[serde(rename = "IRREGULAR_NEAR_BOUNDARY_E")]
    IrregularNearBoundaryE,
    #[serde(rename = "EXITED_E_COMPLEMENT")]
    ExitedEComplement,
}

impl RayStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RayStatus::EndedInE => "ENDED_IN_E",
            RayStatus::TrappedCap => "TRAPPED_CAP",
            RayStatus::IrregularEdge => "IRREGULAR_EDGE",
            RayStatus::IrregularNearBoundaryE => "IRREGULAR_NEAR_BOUNDARY_E",
            RayStatus::ExitedEComplement => "EXITED_E_COMPLEMENT",
        }
    }
}

impl fmt::Display for RayStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    /// Maximum number of reflections before the ray counts as trapped.
    pub n_max: usize,
    /// Minimum distance from a hit in E to the boundary of E.
    pub delta_e: f64,
    /// Minimum distance from any hit to an edge of its facet.
    pub delta_edge: f64,
}

impl TraceParams {
    /// Defaults scaled to the domain: both thresholds are `1e-3 * diam`.
    pub fn for_domain(d: &ConvexDomain, n_max: usize) -> Self {
        let delta = 1e-3 * d.diameter();
        TraceParams { n_max, delta_e: delta, delta_edge: delta }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub start: Vec3,
    pub dir: Vec3,
    pub length: f64,
    /// Facet hit at the end of the segment.
    pub end_facet: usize,
}

impl Segment {
    pub fn end(&self) -> Vec3 {
        self.start + self.dir * self.length
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrokenRay {
    pub jet: BoundaryJet,
    pub segments: Vec<Segment>,
    pub status: RayStatus,
    /// Smallest distance from the start point or any hit point to an edge of
    /// its facet or to the boundary of E.
    pub clearance: f64,
}

impl BrokenRay {
    pub fn is_regular(&self) -> bool {
        self.status == RayStatus::EndedInE
    }

    /// Number of reflections of a regular ray.
    pub fn reflection_count(&self) -> Result<usize, TraceError> {
        if !self.is_regular() {
            return Err(TraceError::NotRegular(self.status));
        }
        Ok(self.segments.len() - 1)
    }

    /// Facets at which the ray reflects, in order.
    pub fn reflect_facets(&self) -> Vec<usize> {
        let n = self.segments.len().saturating_sub(1);
        self.segments[..n].iter().map(|s| s.end_facet).collect()
    }

    /// Facet sequence identifying the ray's combinatorial type: start facet,
    /// reflecting facets, end facet.
    pub fn facet_sequence(&self) -> Vec<usize> {
        let mut seq = vec![self.jet.facet];
        seq.extend(self.segments.iter().map(|s| s.end_facet));
        seq
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn end_point(&self) -> Vec3 {
        self.segments.last().map_or(self.jet.x, |s| s.end())
    }

    /// Point at arc length `s` and the index of its segment.
    pub fn point_at(&self, s: f64) -> (usize, Vec3) {
        let mut acc = 0.0;
        for (j, seg) in self.segments.iter().enumerate() {
            if s <= acc + seg.length || j + 1 == self.segments.len() {
                return (j, seg.start + seg.dir * (s - acc));
            }
            acc += seg.length;
        }
        (0, self.jet.x)
    }
}

/// Mirror image of `theta` across the hyperplane with unit normal `nu`.
pub fn reflect_direction(theta: &Vec3, nu: &Vec3, graze: f64) -> Result<Vec3, GeometryError> {
    let c = theta.dot(nu);
    if c.abs() < graze {
        return Err(GeometryError::Grazing { facet: usize::MAX, cos: c.abs() });
    }
    Ok(theta - nu * (2.0 * c))
}

fn snap(d: &ConvexDomain, p: Vec3, facet: usize) -> Vec3 {
    let f = &d.facets[facet];
    p - f.normal * (f.normal.dot(&p) - f.offset)
}

/// One step of the billiard map on inward jets: fly to the next boundary
/// point and reflect there.
pub fn billiard_map(d: &ConvexDomain, jet: &BoundaryJet, delta_edge: f64) -> Result<BoundaryJet, TraceError> {
    let (t, k) = d.exit_time(&jet.x, &jet.theta)?;
    let hit = snap(d, jet.x + jet.theta * t, k);
    let (edge, _) = d.facet_clearance(&hit, k);
    if edge < delta_edge {
        return Err(TraceError::EdgeHit { facet: k, dist: edge });
    }
    let theta = reflect_direction(&jet.theta, &d.facets[k].normal, d.tolerances.graze)
        .map_err(|_| GeometryError::Grazing { facet: k, cos: jet.theta.dot(&d.facets[k].normal).abs() })?;
    Ok(BoundaryJet { x: hit, theta, facet: k })
}

/// What a hit point means for the ray that produced it.
enum HitKind {
    Reflect,
    Stop(RayStatus),
}

fn classify_hit(d: &ConvexDomain, hit: &Vec3, facet: usize, p: &TraceParams, clearance: &mut f64) -> HitKind {
    let (edge, mask) = d.facet_clearance(hit, facet);
    *clearance = clearance.min(edge);
    if let Some(m) = mask {
        *clearance = clearance.min(m);
    }
    if edge < p.delta_edge {
        return HitKind::Stop(RayStatus::IrregularEdge);
    }
    if d.facets[facet].label == FacetLabel::Reflect {
        return HitKind::Reflect;
    }
    if mask.is_some_and(|m| m < p.delta_e) {
        return HitKind::Stop(RayStatus::IrregularNearBoundaryE);
    }
    if d.in_e_unchecked(hit, facet) {
        HitKind::Stop(RayStatus::EndedInE)
    } else if d.mask_exterior == MaskExterior::Absorb {
        HitKind::Stop(RayStatus::ExitedEComplement)
    } else {
        HitKind::Reflect
    }
}

/// Start-point clearance, or the irregular status the start point forces.
fn start_clearance(d: &ConvexDomain, jet: &BoundaryJet, p: &TraceParams) -> Result<f64, RayStatus> {
    let (edge, mask) = d.facet_clearance(&jet.x, jet.facet);
    if edge < p.delta_edge {
        return Err(RayStatus::IrregularEdge);
    }
    if mask.is_some_and(|m| m < p.delta_e) {
        return Err(RayStatus::IrregularNearBoundaryE);
    }
    Ok(mask.map_or(edge, |m| m.min(edge)))
}

/// Traces the broken ray issued from `jet`, which must lie in `Gamma_-(E)`.
pub fn trace_broken_ray(d: &ConvexDomain, jet: &BoundaryJet, p: &TraceParams) -> Result<BrokenRay, TraceError> {
    d.check_on_facet(&jet.x, jet.facet)?;
    let cos = d.facets[jet.facet].normal.dot(&jet.theta);
    if cos >= 0.0 {
        return Err(GeometryError::NotInward { facet: jet.facet, cos }.into());
    }
    if !d.in_e_unchecked(&jet.x, jet.facet) {
        return Err(TraceError::StartNotInE);
    }
    let mut clearance = match start_clearance(d, jet, p) {
        Ok(c) => c,
        Err(status) => return Ok(BrokenRay { jet: *jet, segments: Vec::new(), status, clearance: 0.0 }),
    };
    let mut segments = Vec::new();
    let mut x = jet.x;
    let mut theta = jet.theta;
    loop {
        let (t, k, c) = d.raw_exit(&x, &theta).ok_or(GeometryError::NoExit(d.max_violation(&x)))?;
        let hit = snap(d, x + theta * t, k);
        segments.push(Segment { start: x, dir: theta, length: t, end_facet: k });
        if c < d.tolerances.graze {
            return Ok(BrokenRay { jet: *jet, segments, status: RayStatus::IrregularEdge, clearance: 0.0 });
        }
        match classify_hit(d, &hit, k, p, &mut clearance) {
            HitKind::Stop(status) => return Ok(BrokenRay { jet: *jet, segments, status, clearance }),
            HitKind::Reflect => {
                if segments.len() > p.n_max {
                    return Ok(BrokenRay { jet: *jet, segments, status: RayStatus::TrappedCap, clearance });
                }
                theta -= d.facets[k].normal * (2.0 * c);
                x = hit;
            }
        }
    }
}

/// The broken ray passing through an interior point in a given direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ThroughRay {
    pub status: RayStatus,
    /// The full ray, present whenever a start jet in E was found.
    pub ray: Option<BrokenRay>,
    /// Index of the segment containing the point.
    pub segment: usize,
    /// Arc length from the start of the ray to the point.
    pub arclength: f64,
}

/// Traces backwards from `x` along `-theta` to the start jet in E, then
/// forwards to the end of the ray.
pub fn trace_through(d: &ConvexDomain, x: &Vec3, theta: &Vec3, p: &TraceParams) -> Result<ThroughRay, TraceError> {
    let viol = d.max_violation(x);
    if viol > d.tol_boundary() {
        return Err(GeometryError::NoExit(viol).into());
    }
    let fail = |status| ThroughRay { status, ray: None, segment: 0, arclength: 0.0 };
    let mut pos = *x;
    let mut dir = -theta;
    let mut count = 0;
    let mut arclength = 0.0;
    let mut clearance = f64::INFINITY;
    let start = loop {
        let (t, k, c) = d.raw_exit(&pos, &dir).ok_or(GeometryError::NoExit(viol))?;
        if c < d.tolerances.graze {
            return Ok(fail(RayStatus::IrregularEdge));
        }
        let hit = snap(d, pos + dir * t, k);
        arclength += t;
        match classify_hit(d, &hit, k, p, &mut clearance) {
            HitKind::Stop(RayStatus::EndedInE) => break BoundaryJet { x: hit, theta: -dir, facet: k },
            HitKind::Stop(status) => return Ok(fail(status)),
            HitKind::Reflect => {
                if count >= p.n_max {
                    return Ok(fail(RayStatus::TrappedCap));
                }
                count += 1;
                dir -= d.facets[k].normal * (2.0 * c);
                pos = hit;
            }
        }
    };
    let ray = trace_broken_ray(d, &start, p)?;
    Ok(ThroughRay { status: ray.status, ray: Some(ray), segment: count, arclength })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::presets::*;
    use approx::assert_abs_diff_eq;

    const S2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn square_fixture_three_reflections() {
        let sq = unit_square(&[BOTTOM]);
        let p = TraceParams::for_domain(&sq, 8);
        let jet = BoundaryJet::new(&sq, Vec3::new(0.25, 0.0, 0.0), Vec3::new(S2, S2, 0.0), BOTTOM).unwrap();
        let ray = trace_broken_ray(&sq, &jet, &p).unwrap();
        // with E = bottom, the 45 degree ray from (0.25, 0) closes after three reflections
        let jet2 = BoundaryJet::new(&sq, Vec3::new(0.0, 0.25, 0.0), Vec3::new(S2, S2, 0.0), LEFT);
        assert!(jet2.is_ok());
        assert_eq!(ray.status, RayStatus::EndedInE);
        assert_eq!(ray.reflection_count().unwrap(), 3);
        assert_abs_diff_eq!(ray.total_length(), 2.0 * 2f64.sqrt(), epsilon = 1e-12);
        let hits: Vec<Vec3> = ray.segments.iter().map(|s| s.end()).collect();
        let expected = [(1.0, 0.75), (0.75, 1.0), (0.0, 0.25), (0.25, 0.0)];
        for (h, e) in hits.iter().zip(expected) {
            assert_abs_diff_eq!(h.x, e.0, epsilon = 1e-12);
            assert_abs_diff_eq!(h.y, e.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn left_start_fixture() {
        // E = left edge: (0, 0.25) at 45 degrees reflects at (0.75,1), (1,0.75), (0.25,0)
        let sq = unit_square(&[LEFT]);
        let p = TraceParams::for_domain(&sq, 8);
        let jet = BoundaryJet::new(&sq, Vec3::new(0.0, 0.25, 0.0), Vec3::new(S2, S2, 0.0), LEFT).unwrap();
        let ray = trace_broken_ray(&sq, &jet, &p).unwrap();
        assert_eq!(ray.status, RayStatus::EndedInE);
        assert_eq!(ray.reflection_count().unwrap(), 3);
        assert_eq!(ray.reflect_facets(), vec![TOP, RIGHT, BOTTOM]);
        assert_abs_diff_eq!(ray.total_length(), 2.0 * 2f64.sqrt(), epsilon = 1e-12);
        let end = ray.end_point();
        assert_abs_diff_eq!(end.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(end.y, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn trapped_and_corner_statuses() {
        let sq = unit_square(&[LEFT]);
        let p = TraceParams::for_domain(&sq, 2);
        let jet = BoundaryJet::new(&sq, Vec3::new(0.0, 0.25, 0.0), Vec3::new(S2, S2, 0.0), LEFT).unwrap();
        assert_eq!(trace_broken_ray(&sq, &jet, &p).unwrap().status, RayStatus::TrappedCap);
        let p = TraceParams::for_domain(&sq, 8);
        let aim = Vec3::new(1.0, 0.75, 0.0).normalize();
        let corner = BoundaryJet::new(&sq, Vec3::new(0.0, 0.25, 0.0), aim, LEFT).unwrap();
        let r = trace_broken_ray(&sq, &corner, &p).unwrap();
        assert_eq!(r.status, RayStatus::IrregularEdge);
        assert!(r.reflection_count().is_err());
        let near_e = BoundaryJet::new(&sq, Vec3::new(0.0, 0.0005, 0.0), Vec3::x(), LEFT).unwrap();
        assert_eq!(trace_broken_ray(&sq, &near_e, &p).unwrap().status, RayStatus::IrregularEdge);
    }

    #[test]
    fn mask_exterior_modes() {
        let mut absorbing = cube_slab(0.1);
        absorbing.mask_exterior = MaskExterior::Absorb;
        let p = TraceParams::for_domain(&absorbing, 6);
        // hits x1 = 1 at z = 0.925, then the top face
        let th = Vec3::new(0.8, 0.0, 0.1).normalize();
        let jet = BoundaryJet::new(&absorbing, Vec3::new(0.0, 0.5, 0.8), th, 0).unwrap();
        let r = trace_broken_ray(&absorbing, &jet, &p).unwrap();
        assert_eq!(r.segments[0].end_facet, 1);
        assert_eq!(r.segments[1].end_facet, 5);
        // back on x1 = 0 at z = 0.925, inside the removed slab
        let th = Vec3::new(0.8, 0.0, 0.05).normalize();
        let jet = BoundaryJet::new(&absorbing, Vec3::new(0.0, 0.5, 0.8), th, 0).unwrap();
        let r = trace_broken_ray(&absorbing, &jet, &p).unwrap();
        assert_eq!(r.status, RayStatus::ExitedEComplement);
        assert_eq!(r.segments.len(), 2);
        let reflecting = cube_slab(0.1);
        let r = trace_broken_ray(&reflecting, &jet, &p).unwrap();
        assert!(r.segments.len() > 2);
        assert_eq!(r.segments[1].end_facet, 0);
    }

    #[test]
    fn near_mask_boundary_is_irregular() {
        let cube = cube_slab(0.1);
        let p = TraceParams::for_domain(&cube, 6);
        // lands on x1 = 0 at z = 0.9 + 1e-4
        let th = Vec3::new(-1.0, 0.0, 0.1 + 1e-4).normalize();
        let tr = trace_through(&cube, &Vec3::new(1.0 - 1e-12, 0.5, 0.8), &-th, &p).unwrap();
        assert_eq!(tr.status, RayStatus::IrregularNearBoundaryE);
    }

    #[test]
    fn start_outside_e_rejected() {
        let sq = unit_square(&[LEFT]);
        let p = TraceParams::for_domain(&sq, 4);
        let jet = BoundaryJet::new(&sq, Vec3::new(1.0, 0.5, 0.0), -Vec3::x(), RIGHT).unwrap();
        assert_eq!(trace_broken_ray(&sq, &jet, &p), Err(TraceError::StartNotInE));
    }

    #[test]
    fn through_ray_matches_forward_trace() {
        let sq = unit_square(&[LEFT]);
        let p = TraceParams::for_domain(&sq, 8);
        let x = Vec3::new(0.9, 0.85, 0.0);
        let th = Vec3::new(S2, -S2, 0.0);
        let tr = trace_through(&sq, &x, &th, &p).unwrap();
        assert_eq!(tr.status, RayStatus::EndedInE);
        let ray = tr.ray.unwrap();
        assert_eq!(tr.segment, 1);
        let (j, pt) = ray.point_at(tr.arclength);
        assert_eq!(j, 1);
        assert!((pt - x).norm() < 1e-12);
        assert_abs_diff_eq!(ray.jet.x.y, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn billiard_map_reflects() {
        let sq = unit_square(&[]);
        let jet = BoundaryJet { x: Vec3::new(0.0, 0.25, 0.0), theta: Vec3::new(S2, S2, 0.0), facet: LEFT };
        let next = billiard_map(&sq, &jet, 1e-6).unwrap();
        assert_eq!(next.facet, TOP);
        assert_abs_diff_eq!(next.theta.y, -S2, epsilon = 1e-15);
        let aim = Vec3::new(1.0, 0.75, 0.0).normalize();
        let corner = BoundaryJet { x: Vec3::new(0.0, 0.25, 0.0), theta: aim, facet: LEFT };
        assert!(matches!(billiard_map(&sq, &corner, 1e-6), Err(TraceError::EdgeHit { .. })));
    }

    #[test]
    fn reflect_grazing_error() {
        assert!(reflect_direction(&Vec3::x(), &Vec3::y(), 1e-9).is_err());
        let r = reflect_direction(&Vec3::new(S2, S2, 0.0), &Vec3::y(), 1e-9).unwrap();
        assert_abs_diff_eq!(r.y, -S2, epsilon = 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn reflection_is_isometric_involution(a in 0.0f64..std::f64::consts::TAU, b in 0.0f64..std::f64::consts::TAU, c in -1.0f64..1.0) {
                let s = (1.0 - c * c).sqrt();
                let th = Vec3::new(s * a.cos(), s * a.sin(), c);
                let nu = Vec3::new(b.cos(), b.sin(), 0.3).normalize();
                prop_assume!(th.dot(&nu).abs() > 1e-6);
                let r = reflect_direction(&th, &nu, 1e-9).unwrap();
                prop_assert!((r.norm() - 1.0).abs() < 1e-14);
                prop_assert!((r.dot(&nu) + th.dot(&nu)).abs() < 1e-14);
                let rr = reflect_direction(&r, &nu, 1e-9).unwrap();
                prop_assert!((rr - th).norm() < 1e-14);
            }

            #[test]
            fn regular_rays_stay_inside_and_respect_cap(y in 0.01f64..0.99, a in -1.5f64..1.5) {
                let hex = hexagon(&[3, 5]);
                let p = TraceParams::for_domain(&hex, 12);
                let ch = hex.facet_chart(3);
                let x = ch.point(&[y * ch.ranges[0].1]);
                let nu = hex.facets[3].normal;
                let t = ch.basis[0];
                let th = -nu * a.cos() + t * a.sin();
                let jet = BoundaryJet::new(&hex, x, th, 3).unwrap();
                let ray = trace_broken_ray(&hex, &jet, &p).unwrap();
                prop_assert!(ray.segments.len() <= p.n_max + 1);
                for s in &ray.segments {
                    prop_assert!(hex.max_violation(&s.end()) < 1e-9);
                    prop_assert!(s.length >= 0.0);
                }
                if ray.is_regular() {
                    prop_assert!(ray.clearance >= p.delta_edge.min(p.delta_e));
                }
            }
        }
    }
}
