//! Forward transport: grids, attenuation, cutoffs, samplings of `Gamma_-`
//! and the discretized broken ray transform.

use thiserror::Error;

use crate::billiards::{RayStatus, TraceError};

pub mod attenuation;
pub mod cutoff;
pub mod grid;
pub mod operator;
pub mod sampling;

pub use attenuation::{Attenuation, AttenuationProfile};
pub use cutoff::{Bump, CutoffMode, CutoffSpec};
pub use grid::{GridSpec, Interp, ScalarGridField};
pub use operator::{BrokenRayOperator, Modulation, OperatorSpec};
pub use sampling::{FacetSelection, Sample, Sampling, SamplingSpec, Sinogram};

/// Cumulative attenuation factor `exp(-∫ sigma)` from the start of `ray` to
/// arc length `t` along segment `j`.
pub fn attenuation_weight(att: &Attenuation, ray: &crate::billiards::BrokenRay, j: usize, t: f64) -> f64 {
    let base: f64 = ray.segments[..j.min(ray.segments.len())].iter().map(|s| s.length).sum();
    AttenuationProfile::along(att, &ray.segments).weight(base + t)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("sample {sample} lies in the cutoff's support but its ray is irregular ({status})")]
    IrregularInSupport { sample: usize, status: RayStatus },
    #[error("sample {sample} has a different facet sequence than the rest of the cutoff's support")]
    SequenceMismatch { sample: usize },
    #[error("grid mismatch: expected {expected} cells, got {got}")]
    GridMismatch { expected: usize, got: usize },
    #[error("sampling mismatch: {0}")]
    SamplingMismatch(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::billiards::{trace_broken_ray, TraceParams};
    use crate::geometry::presets::*;
    use crate::geometry::{BoundaryJet, Vec3};
    use approx::assert_abs_diff_eq;

    #[test]
    fn weight_examples() {
        let sq = unit_square(&[LEFT]);
        let jet = BoundaryJet::new(&sq, Vec3::new(0.0, 0.25, 0.0), Vec3::new(1.0, 1.0, 0.0).normalize(), LEFT).unwrap();
        let ray = trace_broken_ray(&sq, &jet, &TraceParams::for_domain(&sq, 5)).unwrap();
        assert_eq!(attenuation_weight(&Attenuation::Zero, &ray, 2, 0.1), 1.0);
        let w = attenuation_weight(&Attenuation::Constant(1.0), &ray, 1, 0.0);
        assert_abs_diff_eq!(w, (-0.75 * 2f64.sqrt()).exp(), epsilon = 1e-14);
        let w = attenuation_weight(&Attenuation::Constant(0.3), &ray, 0, 0.4);
        assert_abs_diff_eq!(w, (-0.12f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn line_integral_examples() {
        let grid = GridSpec::covering(&unit_square(&[]).bounding_box(), 2, &[16, 16]).unwrap();
        let one = ScalarGridField::from_fn(grid, |_| 1.0);
        let th = Vec3::new(1.0, 1.0, 0.0).normalize();
        let l = one.line_integral(&Vec3::new(0.0, 0.25, 0.0), &th, 0.0, 0.75 * 2f64.sqrt());
        assert_abs_diff_eq!(l, 0.75 * 2f64.sqrt(), epsilon = 1e-14);
        let boxf = ScalarGridField::from_fn(grid, |x| {
            if (0.25..=0.75).contains(&x.x) && (0.25..=0.75).contains(&x.y) {
                1.0
            } else {
                0.0
            }
        });
        assert_abs_diff_eq!(boxf.line_integral(&Vec3::new(0.0, 0.5, 0.0), &Vec3::x(), 0.0, 1.0), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn multilinear_matches_dense_simpson() {
        let grid = GridSpec::covering(&unit_square(&[]).bounding_box(), 2, &[24, 24]).unwrap();
        let f = ScalarGridField::from_fn(grid, |x| (-((x.x - 0.45).powi(2) + (x.y - 0.55).powi(2)) / 0.02).exp())
            .with_interp(Interp::Multilinear);
        let p = Vec3::new(0.0, 0.2, 0.0);
        let th = Vec3::new(0.8, 0.6, 0.0);
        let got = f.line_integral(&p, &th, 0.0, 1.0);
        let n = 1_000_000;
        let h = 1.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * f.value_at(&(p + th * (i as f64 * h)));
        }
        let reference = acc * h / 3.0;
        assert!((got - reference).abs() <= 1e-6 * reference.abs());
    }
}
