//! Attenuation coefficients and cumulative attenuation along broken rays.

use std::fmt;
use std::sync::Arc;

use crate::billiards::Segment;
use crate::geometry::Vec3;

use super::grid::{Interp, LineWeight, ScalarGridField, GL2};

pub type DirectionalSigma = Arc<dyn Fn(&Vec3, &Vec3) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Attenuation {
    Zero,
    /// Constant coefficient inside the domain.
    Constant(f64),
    Grid(ScalarGridField),
    /// Direction-dependent coefficient `sigma(x, theta)`, integrated with a
    /// midpoint rule of the given step.
    Directional {
        sigma: DirectionalSigma,
        step: f64,
    },
}

impl fmt::Debug for Attenuation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Attenuation::Zero => f.write_str("Zero"),
            Attenuation::Constant(c) => write!(f, "Constant({c})"),
            Attenuation::Grid(g) => write!(f, "Grid({:?})", g.grid.dims),
            Attenuation::Directional { step, .. } => write!(f, "Directional(step={step})"),
        }
    }
}

impl Attenuation {
    pub fn is_zero(&self) -> bool {
        match self {
            Attenuation::Zero => true,
            Attenuation::Constant(c) => *c == 0.0,
            Attenuation::Grid(g) => g.values.iter().all(|v| *v == 0.0),
            Attenuation::Directional { .. } => false,
        }
    }
}

/// Piecewise-linear cumulative attenuation `A(s) = ∫_0^s sigma` along a ray,
/// parametrized by arc length from the start point.
#[derive(Clone, Debug, PartialEq)]
pub struct AttenuationProfile {
    s: Vec<f64>,
    a: Vec<f64>,
}

impl AttenuationProfile {
    pub fn zero() -> Self {
        AttenuationProfile { s: Vec::new(), a: Vec::new() }
    }

    pub fn along(att: &Attenuation, segments: &[Segment]) -> Self {
        if att.is_zero() {
            return Self::zero();
        }
        let mut b = Builder { s: vec![0.0], a: vec![0.0] };
        let mut base = 0.0;
        for seg in segments {
            let end = base + seg.length;
            match att {
                Attenuation::Zero => {}
                Attenuation::Constant(c) => {
                    let a0 = b.last_a();
                    b.push(end, a0 + c * seg.length);
                }
                Attenuation::Grid(field) => match field.interp {
                    Interp::Nearest => field.grid.traverse(&seg.start, &seg.dir, 0.0, seg.length, |c, ta, tb| {
                        let a0 = b.last_a();
                        b.push(base + ta, a0);
                        b.push(base + tb, a0 + field.values[c] * (tb - ta));
                    }),
                    Interp::Multilinear => {
                        field.grid.multilinear_pieces(&seg.start, &seg.dir, 0.0, seg.length, |ta, tb| {
                            let len = tb - ta;
                            let mut piece = 0.0;
                            for (x, w) in GL2 {
                                piece += w * len * field.value_at(&(seg.start + seg.dir * (ta + x * len)));
                            }
                            let a0 = b.last_a();
                            b.push(base + ta, a0);
                            b.push(base + tb, a0 + piece);
                        })
                    }
                },
                Attenuation::Directional { sigma, step } => {
                    let n = (seg.length / step.max(1e-12)).ceil().max(1.0) as usize;
                    let h = seg.length / n as f64;
                    for i in 0..n {
                        let mid = seg.start + seg.dir * ((i as f64 + 0.5) * h);
                        let a0 = b.last_a();
                        b.push(base + (i + 1) as f64 * h, a0 + sigma(&mid, &seg.dir) * h);
                    }
                }
            }
            let a0 = b.last_a();
            b.push(end, a0);
            base = end;
        }
        AttenuationProfile { s: b.s, a: b.a }
    }

    pub fn is_zero(&self) -> bool {
        self.s.is_empty()
    }

    /// `A(s)`; constant beyond the last breakpoint.
    pub fn cumulative(&self, s: f64) -> f64 {
        if self.s.is_empty() || s <= 0.0 {
            return 0.0;
        }
        let k = self.s.partition_point(|v| *v <= s);
        if k >= self.s.len() {
            return *self.a.last().unwrap();
        }
        let (s0, s1) = (self.s[k - 1], self.s[k]);
        let (a0, a1) = (self.a[k - 1], self.a[k]);
        if s1 <= s0 {
            a1
        } else {
            a0 + (a1 - a0) * (s - s0) / (s1 - s0)
        }
    }

    /// `exp(-A(s))`.
    pub fn weight(&self, s: f64) -> f64 {
        (-self.cumulative(s)).exp()
    }

    /// `∫_{s0}^{s1} exp(-A(s)) ds`, exact for the piecewise-linear profile.
    pub fn exp_integral(&self, s0: f64, s1: f64) -> f64 {
        if self.s.is_empty() {
            return s1 - s0;
        }
        if s1 <= s0 {
            return 0.0;
        }
        let mut acc = 0.0;
        let mut u = s0;
        if u < 0.0 {
            acc += 0.0f64.min(s1) - u;
            u = 0.0;
        }
        let mut k = self.s.partition_point(|v| *v <= u).max(1);
        while u < s1 && k < self.s.len() {
            let (p0, p1) = (self.s[k - 1], self.s[k]);
            let v = s1.min(p1);
            if v > u && p1 > p0 {
                let m = (self.a[k] - self.a[k - 1]) / (p1 - p0);
                let au = self.a[k - 1] + m * (u - p0);
                acc += (-au).exp() * exp_decay_integral(m, v - u);
                u = v;
            }
            k += 1;
        }
        if u < s1 {
            acc += (-*self.a.last().unwrap()).exp() * (s1 - u);
        }
        acc
    }

    /// View of the profile as a weight along a line starting at arc length `offset`.
    pub fn shifted(&self, offset: f64) -> Shifted<'_> {
        Shifted { profile: self, offset }
    }
}

/// `∫_0^L exp(-m t) dt`.
fn exp_decay_integral(m: f64, len: f64) -> f64 {
    let x = m * len;
    if x.abs() < 1e-8 {
        len * (1.0 - 0.5 * x + x * x / 6.0)
    } else {
        -(-x).exp_m1() / m
    }
}

struct Builder {
    s: Vec<f64>,
    a: Vec<f64>,
}

impl Builder {
    fn last_a(&self) -> f64 {
        *self.a.last().unwrap()
    }

    fn push(&mut self, s: f64, a: f64) {
        let last = *self.s.last().unwrap();
        if s > last {
            self.s.push(s);
            self.a.push(a);
        } else {
            // same abscissa: keep the later value
            *self.a.last_mut().unwrap() = a;
        }
    }
}

pub struct Shifted<'a> {
    profile: &'a AttenuationProfile,
    offset: f64,
}

impl LineWeight for Shifted<'_> {
    fn integral(&self, a: f64, b: f64) -> f64 {
        self.profile.exp_integral(self.offset + a, self.offset + b)
    }

    fn at(&self, t: f64) -> f64 {
        self.profile.weight(self.offset + t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::grid::GridSpec;
    use approx::assert_abs_diff_eq;

    fn seg(start: Vec3, dir: Vec3, length: f64) -> Segment {
        Segment { start, dir, length, end_facet: 0 }
    }

    #[test]
    fn constant_profile_closed_form() {
        let segs = [seg(Vec3::zeros(), Vec3::x(), 1.0), seg(Vec3::x(), Vec3::y(), 0.5)];
        let p = AttenuationProfile::along(&Attenuation::Constant(0.5), &segs);
        assert_abs_diff_eq!(p.cumulative(1.2), 0.6, epsilon = 1e-15);
        let exact = (1.0 - (-0.75f64).exp()) / 0.5;
        assert_abs_diff_eq!(p.exp_integral(0.0, 1.5), exact, epsilon = 1e-14);
        let partial = ((-0.25f64).exp() - (-0.5f64).exp()) / 0.5;
        assert_abs_diff_eq!(p.exp_integral(0.5, 1.0), partial, epsilon = 1e-14);
    }

    #[test]
    fn grid_profile_matches_constant() {
        let g = GridSpec::new(2, &[4, 4], Vec3::zeros(), Vec3::new(0.25, 0.25, 1.0)).unwrap();
        let f = ScalarGridField::from_fn(g, |_| 0.5);
        let segs = [seg(Vec3::new(0.0, 0.3, 0.0), Vec3::new(0.6, 0.8, 0.0), 0.875)];
        let pg = AttenuationProfile::along(&Attenuation::Grid(f.clone()), &segs);
        let pc = AttenuationProfile::along(&Attenuation::Constant(0.5), &segs);
        for s in [0.0, 0.1, 0.33, 0.875] {
            assert_abs_diff_eq!(pg.cumulative(s), pc.cumulative(s), epsilon = 1e-14);
        }
        assert_abs_diff_eq!(pg.exp_integral(0.1, 0.8), pc.exp_integral(0.1, 0.8), epsilon = 1e-14);
        let pm = AttenuationProfile::along(&Attenuation::Grid(f.with_interp(Interp::Multilinear)), &segs);
        assert_abs_diff_eq!(pm.cumulative(0.7), pc.cumulative(0.7), epsilon = 1e-13);
    }

    #[test]
    fn directional_profile_midpoint() {
        let sigma: DirectionalSigma = Arc::new(|x: &Vec3, th: &Vec3| 1.0 + x.x * th.x.abs());
        let segs = [seg(Vec3::zeros(), Vec3::x(), 1.0)];
        let p = AttenuationProfile::along(&Attenuation::Directional { sigma, step: 0.01 }, &segs);
        // ∫_0^1 (1 + x) dx; midpoint exact for affine integrands
        assert_abs_diff_eq!(p.cumulative(1.0), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_profile_is_length() {
        let p = AttenuationProfile::zero();
        assert_abs_diff_eq!(p.exp_integral(0.2, 0.7), 0.5, epsilon = 1e-15);
        assert_eq!(p.weight(3.0), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn exp_integral_additive(a in 0.0f64..1.5, b in 0.0f64..1.5, c in 0.0f64..1.5, vals in proptest::collection::vec(0.0f64..3.0, 16)) {
                let g = GridSpec::new(2, &[4, 4], Vec3::zeros(), Vec3::new(0.25, 0.25, 1.0)).unwrap();
                let f = ScalarGridField::from_values(g, vals).unwrap();
                let segs = [seg(Vec3::new(0.0, 0.1, 0.0), Vec3::new(0.8, 0.6, 0.0), 1.25)];
                let p = AttenuationProfile::along(&Attenuation::Grid(f), &segs);
                let mut v = [a, b, c];
                v.sort_by(f64::total_cmp);
                let whole = p.exp_integral(v[0], v[2]);
                let split = p.exp_integral(v[0], v[1]) + p.exp_integral(v[1], v[2]);
                prop_assert!((whole - split).abs() < 1e-13);
                prop_assert!(whole <= v[2] - v[0] + 1e-15);
            }
        }
    }
}
