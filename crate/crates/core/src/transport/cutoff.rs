//! Cutoff functions `alpha` on the space of broken rays.

use serde::{Deserialize, Serialize};

use crate::billiards::{BrokenRay, TraceParams};
use crate::geometry::{BoundaryJet, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CutoffMode {
    Binary,
    /// Polynomial smoothstep transition, `C^order` at both ends.
    Mollified {
        order: u32,
    },
}

/// A bump around a reference jet: `alpha` depends on the distance of the
/// start point to `x0` and on the angle between the direction and `theta0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub x0: Vec3,
    pub theta0: Vec3,
    pub radius_x: f64,
    pub radius_theta: f64,
    /// Relative width of the transition band, in `(0, 1]`.
    pub transition: f64,
}

/// Cutoff specification. Without a bump this is the unit cutoff: one on
/// every regular ray, zero on irregular ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffSpec {
    pub bump: Option<Bump>,
    pub mode: CutoffMode,
    /// Width over which `alpha` is tapered to zero as the ray's clearance
    /// approaches the regularity thresholds.
    pub taper: Option<f64>,
}

impl Default for CutoffSpec {
    fn default() -> Self {
        Self::unit()
    }
}

impl CutoffSpec {
    pub fn unit() -> Self {
        CutoffSpec { bump: None, mode: CutoffMode::Binary, taper: None }
    }

    pub fn tapered(width: f64, order: u32) -> Self {
        CutoffSpec { bump: None, mode: CutoffMode::Mollified { order }, taper: Some(width) }
    }

    pub fn is_global(&self) -> bool {
        self.bump.is_none()
    }

    fn order(&self) -> u32 {
        match self.mode {
            CutoffMode::Binary => 3,
            CutoffMode::Mollified { order } => order,
        }
    }

    /// Factor depending only on the start jet.
    pub fn jet_factor(&self, jet: &BoundaryJet) -> f64 {
        let Some(b) = &self.bump else { return 1.0 };
        let rx = (jet.x - b.x0).norm() / b.radius_x;
        let rt = jet.theta.dot(&b.theta0).clamp(-1.0, 1.0).acos() / b.radius_theta;
        self.profile(rx, b.transition) * self.profile(rt, b.transition)
    }

    fn profile(&self, r: f64, transition: f64) -> f64 {
        match self.mode {
            CutoffMode::Binary => {
                if r < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            CutoffMode::Mollified { order } => smoothstep(order, (1.0 - r) / transition.max(1e-300)),
        }
    }

    /// Factor depending on the traced ray: zero for irregular rays, tapered
    /// near the regularity thresholds when a taper is configured.
    pub fn ray_factor(&self, ray: &BrokenRay, params: &TraceParams) -> f64 {
        if !ray.is_regular() {
            return 0.0;
        }
        match self.taper {
            None => 1.0,
            Some(w) => {
                let threshold = params.delta_e.min(params.delta_edge);
                smoothstep(self.order(), (ray.clearance - threshold) / w)
            }
        }
    }

    pub fn value(&self, ray: &BrokenRay, params: &TraceParams) -> f64 {
        self.jet_factor(&ray.jet) * self.ray_factor(ray, params)
    }
}

/// Smoothstep of the given order on `[0, 1]`, clamped outside: the
/// regularized incomplete beta function `I_q(n+1, n+1)`.
pub fn smoothstep(order: u32, q: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return 1.0;
    }
    let n = order as usize;
    let m = 2 * n + 1;
    let mut acc = 0.0;
    let mut binom = 1.0f64;
    // sum_{j=n+1}^{m} C(m, j) q^j (1-q)^(m-j)
    for j in 0..=m {
        if j > n {
            acc += binom * q.powi(j as i32) * (1.0 - q).powi((m - j) as i32);
        }
        binom = binom * (m - j) as f64 / (j + 1) as f64;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn smoothstep_known_values() {
        assert_abs_diff_eq!(smoothstep(1, 0.25), 3.0 * 0.0625 - 2.0 * 0.015625, epsilon = 1e-15);
        for n in 0..6 {
            assert_abs_diff_eq!(smoothstep(n, 0.5), 0.5, epsilon = 1e-14);
            assert_eq!(smoothstep(n, -0.1), 0.0);
            assert_eq!(smoothstep(n, 1.1), 1.0);
        }
        // order 2: 6q^5 - 15q^4 + 10q^3
        let q: f64 = 0.3;
        assert_abs_diff_eq!(smoothstep(2, q), 6.0 * q.powi(5) - 15.0 * q.powi(4) + 10.0 * q.powi(3), epsilon = 1e-14);
    }

    #[test]
    fn bump_profiles() {
        let b = Bump { x0: Vec3::zeros(), theta0: Vec3::x(), radius_x: 0.2, radius_theta: 0.5, transition: 0.5 };
        let c = CutoffSpec { bump: Some(b), mode: CutoffMode::Mollified { order: 3 }, taper: None };
        let jet = BoundaryJet { x: Vec3::new(0.0, 0.05, 0.0), theta: Vec3::x(), facet: 0 };
        assert_eq!(c.jet_factor(&jet), 1.0);
        let far = BoundaryJet { x: Vec3::new(0.0, 0.3, 0.0), theta: Vec3::x(), facet: 0 };
        assert_eq!(c.jet_factor(&far), 0.0);
        let mid = BoundaryJet { x: Vec3::new(0.0, 0.15, 0.0), theta: Vec3::x(), facet: 0 };
        let v = c.jet_factor(&mid);
        assert!(v > 0.0 && v < 1.0);
        let bin = CutoffSpec { mode: CutoffMode::Binary, ..c };
        assert_eq!(bin.jet_factor(&mid), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn smoothstep_monotone_and_symmetric(n in 0u32..8, a in 0.0f64..1.0, b in 0.0f64..1.0) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(smoothstep(n, lo) <= smoothstep(n, hi) + 1e-15);
                prop_assert!((smoothstep(n, a) + smoothstep(n, 1.0 - a) - 1.0).abs() < 1e-12);
            }
        }
    }
}
