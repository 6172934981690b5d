//! Unfolding of broken rays into straight lines by composing reflections.

use thiserror::Error;

use crate::billiards::{BrokenRay, RayStatus};
use crate::geometry::{ConvexDomain, Mat3, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnfoldError {
    #[error("unfolded segment {segment} deviates from the line by {defect:.3e}")]
    NonCollinear { segment: usize, defect: f64 },
    #[error("ray cannot be unfolded ({0})")]
    NotUnfoldable(RayStatus),
    #[error("segment index {index} out of range (ray has {len} segments)")]
    BadIndex { index: usize, len: usize },
}

/// Affine isometry `x -> linear * x + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Isometry {
    pub linear: Mat3,
    pub offset: Vec3,
}

impl Isometry {
    pub fn identity() -> Self {
        Isometry { linear: Mat3::identity(), offset: Vec3::zeros() }
    }

    /// Reflection across the hyperplane through `point` with unit normal `normal`.
    pub fn reflection(point: &Vec3, normal: &Vec3) -> Self {
        let linear = Mat3::identity() - normal * normal.transpose() * 2.0;
        Isometry { linear, offset: normal * (2.0 * point.dot(normal)) }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.linear * x + self.offset
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.linear * v
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Isometry) -> Isometry {
        Isometry { linear: self.linear * other.linear, offset: self.linear * other.offset + self.offset }
    }

    pub fn inverse(&self) -> Isometry {
        let lt = self.linear.transpose();
        Isometry { linear: lt, offset: -(lt * self.offset) }
    }
}

/// `R(x) = x + 2 xi ((a - x) . xi)`: mirror image of `x` across the
/// hyperplane through `a` with unit normal `xi`.
pub fn reflect_point(a: &Vec3, xi: &Vec3, x: &Vec3) -> Vec3 {
    x + xi * (2.0 * (a - x).dot(xi))
}

/// `S v = v - 2 (v . xi) xi`.
pub fn reflect_vector(xi: &Vec3, v: &Vec3) -> Vec3 {
    v - xi * (2.0 * v.dot(xi))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperplane {
    pub point: Vec3,
    pub normal: Vec3,
}

impl Hyperplane {
    pub fn reflection(&self) -> Isometry {
        Isometry::reflection(&self.point, &self.normal)
    }
}

/// The reflecting hyperplanes met by a broken ray, in order. Plane `j`
/// (1-based) separates segment `j - 1` from segment `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperplaneSeq {
    pub planes: Vec<Hyperplane>,
}

impl HyperplaneSeq {
    pub fn from_ray(d: &ConvexDomain, ray: &BrokenRay) -> Self {
        let n = ray.segments.len().saturating_sub(1);
        let planes = ray.segments[..n]
            .iter()
            .map(|s| Hyperplane { point: s.end(), normal: d.facets[s.end_facet].normal })
            .collect();
        HyperplaneSeq { planes }
    }

    /// Number of segments of the underlying ray.
    pub fn segments(&self) -> usize {
        self.planes.len() + 1
    }

    /// `R_1 ∘ ... ∘ R_j`: maps segment `j` onto the unfolded line.
    pub fn segment_map(&self, j: usize) -> Result<Isometry, UnfoldError> {
        self.check(j)?;
        Ok(self.planes[..j].iter().fold(Isometry::identity(), |acc, p| acc.compose(&p.reflection())))
    }

    /// `R_j ∘ ... ∘ R_1`: maps the unfolded line back onto segment `j`.
    pub fn fold_map(&self, j: usize) -> Result<Isometry, UnfoldError> {
        self.check(j)?;
        Ok(self.planes[..j].iter().fold(Isometry::identity(), |acc, p| p.reflection().compose(&acc)))
    }

    fn check(&self, j: usize) -> Result<(), UnfoldError> {
        if j >= self.segments() {
            return Err(UnfoldError::BadIndex { index: j, len: self.segments() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedRay {
    pub start: Vec3,
    pub direction: Vec3,
    pub length: f64,
    /// `seg_maps[j]` sends segment `j` into the unfolded line.
    pub seg_maps: Vec<Isometry>,
    /// Arc length at which each segment starts.
    pub breakpoints: Vec<f64>,
}

impl UnfoldedRay {
    pub fn point(&self, t: f64) -> Vec3 {
        self.start + self.direction * t
    }
}

/// Unfolds a regular (or reflection-capped) broken ray and verifies that
/// the images of all segments are collinear.
pub fn unfold_ray(d: &ConvexDomain, ray: &BrokenRay) -> Result<UnfoldedRay, UnfoldError> {
    if !matches!(ray.status, RayStatus::EndedInE | RayStatus::TrappedCap) || ray.segments.is_empty() {
        return Err(UnfoldError::NotUnfoldable(ray.status));
    }
    let seq = HyperplaneSeq::from_ray(d, ray);
    let mut seg_maps = Vec::with_capacity(ray.segments.len());
    let mut breakpoints = Vec::with_capacity(ray.segments.len());
    let mut acc = Isometry::identity();
    let mut s = 0.0;
    let start = ray.jet.x;
    let direction = ray.jet.theta;
    let tol = 1e-9 * d.diameter();
    for (j, seg) in ray.segments.iter().enumerate() {
        if j > 0 {
            acc = acc.compose(&seq.planes[j - 1].reflection());
        }
        let a = acc.apply(&seg.start);
        let b = acc.apply(&seg.end());
        let defect = (a - (start + direction * s)).norm().max((b - (start + direction * (s + seg.length))).norm());
        if defect > tol * (1 + j) as f64 {
            return Err(UnfoldError::NonCollinear { segment: j, defect });
        }
        seg_maps.push(acc);
        breakpoints.push(s);
        s += seg.length;
    }
    Ok(UnfoldedRay { start, direction, length: s, seg_maps, breakpoints })
}

/// Pushes a covector `(z, xi)` based on segment `j` forward to the unfolded line.
pub fn unfold_covector(seq: &HyperplaneSeq, j: usize, z: &Vec3, xi: &Vec3) -> Result<(Vec3, Vec3), UnfoldError> {
    let m = seq.segment_map(j)?;
    // the map is orthogonal, so covectors transform like vectors
    Ok((m.apply(z), m.apply_vector(xi)))
}

/// `R_l ∘ ... ∘ R_{k+1}(x)`: image of a point of segment `k` in the frame of
/// segment `l`, so that the unfolded distance is `|y - image|`.
pub fn reflected_source(seq: &HyperplaneSeq, k: usize, l: usize, x: &Vec3) -> Result<Vec3, UnfoldError> {
    seq.check(k)?;
    seq.check(l)?;
    if l <= k {
        return Err(UnfoldError::BadIndex { index: l, len: seq.segments() });
    }
    let mut p = *x;
    for plane in &seq.planes[k..l] {
        p = plane.reflection().apply(&p);
    }
    Ok(p)
}

/// Largest distance between the line of segment `j` and the fold of the
/// unfolded line (`R_j ∘ ... ∘ R_1` applied to points, the linear parts to
/// the direction).
pub fn line_coincidence_defect(d: &ConvexDomain, ray: &BrokenRay) -> Result<f64, UnfoldError> {
    let u = unfold_ray(d, ray)?;
    let seq = HyperplaneSeq::from_ray(d, ray);
    let mut worst: f64 = 0.0;
    for (j, seg) in ray.segments.iter().enumerate() {
        let f = seq.fold_map(j)?;
        let p0 = f.apply(&u.start);
        let dir = f.apply_vector(&u.direction);
        // distance of segment endpoints to the folded line, plus direction mismatch
        for q in [seg.start, seg.end()] {
            let w = q - p0;
            worst = worst.max((w - dir * w.dot(&dir)).norm());
        }
        worst = worst.max((dir - seg.dir).norm());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::billiards::{trace_broken_ray, TraceParams};
    use crate::geometry::presets::*;
    use crate::geometry::BoundaryJet;
    use approx::assert_abs_diff_eq;

    fn fixture() -> (ConvexDomain, BrokenRay) {
        let sq = unit_square(&[LEFT]);
        let p = TraceParams::for_domain(&sq, 8);
        let th = Vec3::new(1.0, 1.0, 0.0).normalize();
        let jet = BoundaryJet::new(&sq, Vec3::new(0.0, 0.25, 0.0), th, LEFT).unwrap();
        let ray = trace_broken_ray(&sq, &jet, &p).unwrap();
        (sq, ray)
    }

    #[test]
    fn square_unfolds_to_straight_line() {
        let (sq, ray) = fixture();
        let u = unfold_ray(&sq, &ray).unwrap();
        assert_abs_diff_eq!(u.length, 2.0 * 2f64.sqrt(), epsilon = 1e-12);
        let end = u.point(u.length);
        // reflections across y = 1, x = 1, y = 0 send the end point (0, 0.25) to (2, 2.25)
        let mapped = u.seg_maps[3].apply(&ray.end_point());
        assert!((end - mapped).norm() < 1e-12);
        assert_abs_diff_eq!(end.x, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(end.y, 2.25, epsilon = 1e-12);
        assert!(line_coincidence_defect(&sq, &ray).unwrap() < 1e-12);
    }

    #[test]
    fn reflected_source_preserves_unfolded_distance() {
        let (sq, ray) = fixture();
        let seq = HyperplaneSeq::from_ray(&sq, &ray);
        let u = unfold_ray(&sq, &ray).unwrap();
        let x = ray.segments[0].start + ray.segments[0].dir * 0.3;
        let y = ray.segments[2].start + ray.segments[2].dir * 0.2;
        let img = reflected_source(&seq, 0, 2, &x).unwrap();
        let unfolded = (u.seg_maps[2].apply(&y) - u.seg_maps[0].apply(&x)).norm();
        assert_abs_diff_eq!((y - img).norm(), unfolded, epsilon = 1e-12);
        assert!(reflected_source(&seq, 2, 1, &x).is_err());
    }

    #[test]
    fn covector_pushforward() {
        let (sq, ray) = fixture();
        let seq = HyperplaneSeq::from_ray(&sq, &ray);
        let z = ray.segments[1].start + ray.segments[1].dir * 0.1;
        let xi = Vec3::new(-ray.segments[1].dir.y, ray.segments[1].dir.x, 0.0);
        let (_, xi_u) = unfold_covector(&seq, 1, &z, &xi).unwrap();
        // conormal to the segment stays conormal to the unfolded line
        assert!(xi_u.dot(&ray.jet.theta).abs() < 1e-12);
        assert!(unfold_covector(&seq, 4, &z, &xi).is_err());
    }

    #[test]
    fn capped_rays_unfold_irregular_rejected() {
        let sq = unit_square(&[LEFT]);
        let p = TraceParams::for_domain(&sq, 1);
        let th = Vec3::new(1.0, 1.0, 0.0).normalize();
        let jet = BoundaryJet::new(&sq, Vec3::new(0.0, 0.25, 0.0), th, LEFT).unwrap();
        let ray = trace_broken_ray(&sq, &jet, &p).unwrap();
        assert_eq!(ray.status, RayStatus::TrappedCap);
        assert!(unfold_ray(&sq, &ray).is_ok());
        let aim = Vec3::new(1.0, 0.75, 0.0).normalize();
        let corner = BoundaryJet::new(&sq, Vec3::new(0.0, 0.25, 0.0), aim, LEFT).unwrap();
        let ray = trace_broken_ray(&sq, &corner, &p).unwrap();
        assert!(matches!(unfold_ray(&sq, &ray), Err(UnfoldError::NotUnfoldable(_))));
    }

    #[test]
    fn mirror_examples() {
        let top = (Vec3::new(0.0, 1.0, 0.0), Vec3::y());
        let r = reflect_point(&top.0, &top.1, &Vec3::new(0.5, 0.5, 0.0));
        assert!((r - Vec3::new(0.5, 1.5, 0.0)).norm() < 1e-15);
        let r = reflect_point(&Vec3::x(), &Vec3::x(), &Vec3::new(0.25, 0.0, 0.0));
        assert!((r - Vec3::new(1.75, 0.0, 0.0)).norm() < 1e-15);
        let on = Vec3::new(0.3, 1.0, 0.0);
        assert_eq!(reflect_point(&top.0, &top.1, &on), on);
        let s2 = std::f64::consts::FRAC_1_SQRT_2;
        let v = reflect_vector(&Vec3::y(), &Vec3::new(s2, -s2, 0.0));
        assert!((v - Vec3::new(s2, s2, 0.0)).norm() < 1e-15);
        // covector at (0.5, 0.5) pushed through the top mirror
        let seq = HyperplaneSeq { planes: vec![Hyperplane { point: top.0, normal: top.1 }] };
        let (z, xi) = unfold_covector(&seq, 1, &Vec3::new(0.5, 0.5, 0.0), &Vec3::y()).unwrap();
        assert!((z - Vec3::new(0.5, 1.5, 0.0)).norm() < 1e-15);
        assert!((xi + Vec3::y()).norm() < 1e-15);
        let (z0, xi0) = unfold_covector(&seq, 0, &z, &xi).unwrap();
        assert_eq!((z0, xi0), (z, xi));
    }

    #[test]
    fn vertical_bounce_unfolds() {
        let sq = unit_square(&[BOTTOM]);
        let p = TraceParams::for_domain(&sq, 4);
        let jet = BoundaryJet::new(&sq, Vec3::new(0.5, 0.0, 0.0), Vec3::y(), BOTTOM).unwrap();
        let ray = trace_broken_ray(&sq, &jet, &p).unwrap();
        let u = unfold_ray(&sq, &ray).unwrap();
        assert!((u.point(u.length) - Vec3::new(0.5, 2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn isometry_algebra() {
        let r = Isometry::reflection(&Vec3::new(1.0, 2.0, 3.0), &Vec3::new(1.0, 1.0, 0.0).normalize());
        let rr = r.compose(&r);
        assert!((rr.linear - Mat3::identity()).norm() < 1e-14);
        assert!(rr.offset.norm() < 1e-14);
        let q = Isometry::reflection(&Vec3::zeros(), &Vec3::z()).compose(&r);
        let x = Vec3::new(0.3, -0.2, 0.9);
        assert!((q.inverse().apply(&q.apply(&x)) - x).norm() < 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cube_rays_unfold(y in 0.05f64..0.95, z in 0.05f64..0.95, u in 0.05f64..0.99, phi in 0.0f64..std::f64::consts::TAU) {
                let cube = unit_cube(&[0]);
                let p = TraceParams::for_domain(&cube, 12);
                let s = (1.0 - u * u).sqrt();
                let th = Vec3::new(u, s * phi.cos(), s * phi.sin());
                let jet = BoundaryJet::new(&cube, Vec3::new(0.0, y, z), th, 0).unwrap();
                let ray = trace_broken_ray(&cube, &jet, &p).unwrap();
                prop_assume!(ray.is_regular());
                let unfolded = unfold_ray(&cube, &ray).unwrap();
                prop_assert!((unfolded.length - ray.total_length()).abs() < 1e-12);
                prop_assert!(line_coincidence_defect(&cube, &ray).unwrap() < 1e-9);
            }
        }
    }
}
