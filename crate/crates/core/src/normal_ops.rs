//! Adjoints of the broken ray transform, the normal operator `A^* A` with its
//! ballistic/reflected split, and the principal symbol of the ballistic part.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::billiards::{trace_through, BrokenRay, TraceError, TraceParams};
use crate::geometry::{plane_basis, BoundaryJet, ConvexDomain, Vec3};
use crate::transport::{
    Attenuation, AttenuationProfile, BrokenRayOperator, CutoffSpec, GridSpec, ScalarGridField, Sinogram, TransportError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("boundary data cannot be interpolated at the jet reached from grid point {point}")]
    InterpOutOfRange { point: usize },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
}

/// A linear map between two weighted Euclidean spaces, together with its
/// adjoint with respect to those weights.
pub trait LinearOp: Sync {
    fn n_in(&self) -> usize;
    fn n_out(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn apply_adjoint(&self, y: &[f64], x: &mut [f64]);
    fn in_dot(&self, a: &[f64], b: &[f64]) -> f64;
    fn out_dot(&self, a: &[f64], b: &[f64]) -> f64;
}

impl LinearOp for BrokenRayOperator {
    fn n_in(&self) -> usize {
        self.n_cols()
    }

    fn n_out(&self) -> usize {
        self.n_rows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        BrokenRayOperator::apply(self, x, y)
    }

    fn apply_adjoint(&self, y: &[f64], x: &mut [f64]) {
        BrokenRayOperator::apply_adjoint(self, y, x)
    }

    fn in_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.grid.cell_volume() * a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>()
    }

    fn out_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.sampling.samples.iter().zip(a.iter().zip(b)).map(|(s, (u, v))| s.weight * u * v).sum()
    }
}

/// `A^* A` viewed as a self-adjoint operator on fields.
pub struct NormalOp<'a>(pub &'a BrokenRayOperator);

impl LinearOp for NormalOp<'_> {
    fn n_in(&self) -> usize {
        self.0.n_cols()
    }

    fn n_out(&self) -> usize {
        self.0.n_cols()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&self.0.normal_apply(x));
    }

    fn apply_adjoint(&self, y: &[f64], x: &mut [f64]) {
        self.apply(y, x)
    }

    fn in_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.0.in_dot(a, b)
    }

    fn out_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.0.in_dot(a, b)
    }
}

/// Exact transpose of the discretized transform.
pub fn adjoint_discrete(op: &BrokenRayOperator, g: &Sinogram) -> Result<ScalarGridField, NormalError> {
    Ok(op.adjoint(g)?)
}

/// Functions on the incoming boundary that can be evaluated at any jet.
pub trait BoundaryData: Sync {
    fn eval(&self, jet: &BoundaryJet) -> Option<f64>;
}

impl BoundaryData for Sinogram {
    fn eval(&self, jet: &BoundaryJet) -> Option<f64> {
        self.interpolate(jet)
    }
}

impl<F: Fn(&BoundaryJet) -> f64 + Sync> BoundaryData for F {
    fn eval(&self, jet: &BoundaryJet) -> Option<f64> {
        Some(self(jet))
    }
}

/// Quadrature on the unit sphere `S^{n-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionQuadrature {
    pub dirs: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl DirectionQuadrature {
    /// `n` equispaced directions, offset by half a step from the axes.
    pub fn circle(n: usize) -> Self {
        let h = 2.0 * PI / n as f64;
        let dirs = (0..n)
            .map(|k| {
                let a = (k as f64 + 0.5) * h;
                Vec3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        DirectionQuadrature { dirs, weights: vec![h; n] }
    }

    /// Midpoint rule in `z = cos(polar)` and azimuth, with alternate rows
    /// staggered; every node carries the same area `4 pi / (n_z n_az)`.
    pub fn sphere(n_z: usize, n_az: usize) -> Self {
        let w = 4.0 * PI / (n_z * n_az) as f64;
        let mut dirs = Vec::with_capacity(n_z * n_az);
        for i in 0..n_z {
            let z = -1.0 + (i as f64 + 0.5) * 2.0 / n_z as f64;
            let r = (1.0 - z * z).sqrt();
            for k in 0..n_az {
                let a = (k as f64 + 0.25 + 0.5 * (i % 2) as f64) * 2.0 * PI / n_az as f64;
                dirs.push(Vec3::new(r * a.cos(), r * a.sin(), z));
            }
        }
        DirectionQuadrature { weights: vec![w; dirs.len()], dirs }
    }

    pub fn default_for(dim: usize) -> Self {
        if dim == 2 {
            Self::circle(512)
        } else {
            Self::sphere(48, 96)
        }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Everything needed to follow rays through interior points.
#[derive(Clone, Debug)]
pub struct RayModel<'a> {
    pub domain: &'a ConvexDomain,
    pub attenuation: &'a Attenuation,
    pub cutoff: CutoffSpec,
    pub trace: TraceParams,
}

/// The ray through `x` in direction `theta`, its cutoff value, the
/// attenuation profile and the arc length of `x`, if the ray is usable.
struct Through {
    ray: BrokenRay,
    alpha: f64,
    profile: AttenuationProfile,
    segment: usize,
    arclength: f64,
}

impl RayModel<'_> {
    /// The usable ray through `x` in direction `theta` with its cutoff value.
    pub fn through_ray(&self, x: &Vec3, theta: &Vec3) -> Option<(BrokenRay, f64)> {
        let tr = trace_through(self.domain, x, theta, &self.trace).ok()?;
        let ray = tr.ray?;
        let alpha = self.cutoff.value(&ray, &self.trace);
        (alpha > 0.0).then_some((ray, alpha))
    }

    fn through(&self, x: &Vec3, theta: &Vec3) -> Option<Through> {
        let tr = trace_through(self.domain, x, theta, &self.trace).ok()?;
        let ray = tr.ray?;
        let alpha = self.cutoff.value(&ray, &self.trace);
        if alpha == 0.0 {
            return None;
        }
        let profile = AttenuationProfile::along(self.attenuation, &ray.segments);
        Some(Through { ray, alpha, profile, segment: tr.segment, arclength: tr.arclength })
    }
}

/// `(alpha I)^* g` evaluated pointwise by angular quadrature: for each cell
/// centre `x` and direction `theta`, trace back to the start jet of the ray
/// through `(x, theta)` and accumulate `alpha * w(x) * g(jet)`.
pub fn adjoint_continuous(
    model: &RayModel,
    g: &dyn BoundaryData,
    quad: &DirectionQuadrature,
    grid: GridSpec,
) -> Result<ScalarGridField, NormalError> {
    let d = model.domain;
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let x = grid.center(p);
            if !d.contains(&x) {
                return Ok(0.0);
            }
            let mut acc = 0.0;
            for (theta, wq) in quad.dirs.iter().zip(&quad.weights) {
                let Some(t) = model.through(&x, theta) else { continue };
                let gv = g.eval(&t.ray.jet).ok_or(NormalError::InterpOutOfRange { point: p })?;
                acc += wq * t.alpha * t.profile.weight(t.arclength) * gv;
            }
            Ok(acc)
        })
        .collect::<Result<_, NormalError>>()?;
    Ok(ScalarGridField::from_values(grid, values)?)
}

/// Ballistic and reflected parts of the normal operator evaluated pointwise.
#[derive(Clone, Debug)]
pub struct PointwiseNormal {
    pub ballistic: ScalarGridField,
    pub reflect: ScalarGridField,
}

impl PointwiseNormal {
    pub fn total(&self) -> ScalarGridField {
        let mut t = self.ballistic.clone();
        t.values.iter_mut().zip(&self.reflect.values).for_each(|(a, b)| *a += b);
        t
    }
}

/// `N f` by angular quadrature at the cell centres of `f`'s grid. For every
/// direction the ray through `x` is traced; the weighted integral of `f`
/// over the segment containing `x` feeds the ballistic part, the integrals
/// over the other segments feed the reflected part.
pub fn normal_pointwise(model: &RayModel, f: &ScalarGridField, quad: &DirectionQuadrature) -> PointwiseNormal {
    let grid = f.grid;
    let (ball, refl): (Vec<f64>, Vec<f64>) =
        (0..grid.len()).into_par_iter().map(|p| normal_at(model, f, &grid.center(p), quad)).unzip();
    PointwiseNormal {
        ballistic: ScalarGridField::from_values(grid, ball).expect("grid size"),
        reflect: ScalarGridField::from_values(grid, refl).expect("grid size"),
    }
}

/// Ballistic and reflected parts of `N f` at a single point; zero outside
/// the domain.
pub fn normal_at(model: &RayModel, f: &ScalarGridField, x: &Vec3, quad: &DirectionQuadrature) -> (f64, f64) {
    if !model.domain.contains(x) {
        return (0.0, 0.0);
    }
    let (mut b, mut r) = (0.0, 0.0);
    for (theta, wq) in quad.dirs.iter().zip(&quad.weights) {
        let Some(t) = model.through(x, theta) else { continue };
        let scale = wq * t.alpha * t.alpha * t.profile.weight(t.arclength);
        let mut base = 0.0;
        for (j, seg) in t.ray.segments.iter().enumerate() {
            let w = t.profile.shifted(base);
            let v = f.weighted_line_integral(&seg.start, &seg.dir, 0.0, seg.length, &w);
            if j == t.segment {
                b += scale * v;
            } else {
                r += scale * v;
            }
            base += seg.length;
        }
    }
    (b, r)
}

/// Discrete ballistic/reflected split of `A^* A f`; the parts sum to
/// `adjoint_discrete(forward(f))` up to rounding.
pub fn normal_split(op: &BrokenRayOperator, f: &ScalarGridField) -> Result<PointwiseNormal, NormalError> {
    if f.grid != op.grid {
        return Err(TransportError::GridMismatch { expected: op.grid.len(), got: f.grid.len() }.into());
    }
    let (b, r) = op.normal_split(&f.values);
    Ok(PointwiseNormal {
        ballistic: ScalarGridField::from_values(op.grid, b)?,
        reflect: ScalarGridField::from_values(op.grid, r)?,
    })
}

/// Directions `theta` orthogonal to `xi`: the two unit vectors `±xi^perp`
/// with unit weight in 2D, `n` equispaced points on the great circle with
/// weight `2 pi / n` in 3D.
pub fn orthogonal_directions(dim: usize, xi: &Vec3, n: usize) -> Vec<(Vec3, f64)> {
    if dim == 2 {
        let p = Vec3::new(-xi.y, xi.x, 0.0).normalize();
        return vec![(p, 1.0), (-p, 1.0)];
    }
    let b = plane_basis(3, &xi.normalize());
    let (e1, e2) = (b[0], b[1]);
    let h = 2.0 * PI / n as f64;
    (0..n)
        .map(|k| {
            let a = (k as f64 + 0.5) * h;
            (e1 * a.cos() + e2 * a.sin(), h)
        })
        .collect()
}

/// Principal symbol of the ballistic part at `(x, xi)`, `|xi| = 1`:
/// `2 pi * sum over theta ⊥ xi of alpha^2 w(x, theta)^2`.
pub fn ballistic_symbol(model: &RayModel, x: &Vec3, xi: &Vec3, n_circle: usize) -> f64 {
    let mut acc = 0.0;
    for (theta, w) in orthogonal_directions(model.domain.dim, xi, n_circle) {
        if let Some(t) = model.through(x, &theta) {
            let wx = t.profile.weight(t.arclength);
            acc += w * t.alpha * t.alpha * wx * wx;
        }
    }
    2.0 * PI * acc
}

/// One-step filtered inversion `F^{-1}[|xi| / a0 * F b]` of a back-projected
/// field `b`, with zero padding to twice the grid. Intended only for
/// unattenuated, full-data sanity runs where `N` is the convolution with
/// `a0 / |xi|`.
pub fn baseline_filter(b: &ScalarGridField, a0: f64) -> ScalarGridField {
    let g = b.grid;
    let dims: Vec<usize> = (0..g.dim).map(|a| g.dims[a]).collect();
    let padded: Vec<usize> = dims.iter().map(|n| 2 * n).collect();
    let total: usize = padded.iter().product();
    let mut data = vec![Complex64::new(0.0, 0.0); total];
    let strides = strides_of(&padded);
    for (idx, v) in b.values.iter().enumerate() {
        let ijk = g.unindex(idx);
        let flat: usize = (0..g.dim).map(|a| ijk[a] * strides[a]).sum();
        data[flat] = Complex64::new(*v, 0.0);
    }
    let mut planner = FftPlanner::new();
    fft_nd(&mut planner, &mut data, &padded, false);
    for (flat, c) in data.iter_mut().enumerate() {
        let mut k2 = 0.0;
        for a in 0..g.dim {
            let n = padded[a];
            let i = (flat / strides[a]) % n;
            let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
            let xi = 2.0 * PI * k / (n as f64 * g.spacing[a]);
            k2 += xi * xi;
        }
        *c *= k2.sqrt() / a0;
    }
    fft_nd(&mut planner, &mut data, &padded, true);
    let scale = 1.0 / total as f64;
    let values = (0..g.len())
        .map(|idx| {
            let ijk = g.unindex(idx);
            let flat: usize = (0..g.dim).map(|a| ijk[a] * strides[a]).sum();
            data[flat].re * scale
        })
        .collect();
    ScalarGridField::from_values(g, values).expect("grid size")
}

/// Row-major strides with the first axis fastest, matching `GridSpec::index`.
fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for a in 1..dims.len() {
        s[a] = s[a - 1] * dims[a - 1];
    }
    s
}

fn fft_nd(planner: &mut FftPlanner<f64>, data: &mut [Complex64], dims: &[usize], inverse: bool) {
    let strides = strides_of(dims);
    for (a, &n) in dims.iter().enumerate() {
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let stride = strides[a];
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for start in 0..data.len() {
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = data[start + i * stride];
            }
            fft.process(&mut line);
            for (i, l) in line.iter().enumerate() {
                data[start + i * stride] = *l;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::presets::*;
    use crate::transport::{OperatorSpec, Sampling, SamplingSpec};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn model<'a>(d: &'a ConvexDomain, att: &'a Attenuation, n_max: usize) -> RayModel<'a> {
        RayModel { domain: d, attenuation: att, cutoff: CutoffSpec::unit(), trace: TraceParams::for_domain(d, n_max) }
    }

    #[test]
    fn quadratures_integrate_constants() {
        assert_relative_eq!(DirectionQuadrature::circle(7).total_weight(), 2.0 * PI, epsilon = 1e-13);
        let s = DirectionQuadrature::sphere(6, 10);
        assert_relative_eq!(s.total_weight(), 4.0 * PI, epsilon = 1e-13);
        // ∫ z^2 dS = 4 pi / 3; midpoint in z has error O(n_z^-2)
        let s = DirectionQuadrature::sphere(200, 8);
        let m: f64 = s.dirs.iter().zip(&s.weights).map(|(d, w)| w * d.z * d.z).sum();
        assert!((m - 4.0 * PI / 3.0).abs() < 2e-4);
    }

    #[test]
    fn continuous_adjoint_of_one_is_sphere_area() {
        let sq = unit_square(&[LEFT, RIGHT, BOTTOM, TOP]);
        let att = Attenuation::Zero;
        let m = model(&sq, &att, 0);
        let grid = GridSpec::covering(&sq.bounding_box(), 2, &[6, 6]).unwrap();
        let one = |_: &BoundaryJet| 1.0;
        let out = adjoint_continuous(&m, &one, &DirectionQuadrature::circle(64), grid).unwrap();
        // a direction aimed within delta_edge of a corner is irregular and dropped
        let h = 2.0 * PI / 64.0;
        for v in &out.values {
            assert!(*v <= 2.0 * PI + 1e-12 && *v >= 2.0 * PI - 2.0 * h - 1e-12, "{v}");
        }
        let centre = grid.index(2, 2, 0);
        assert_relative_eq!(out.values[centre], 2.0 * PI, epsilon = 1e-12);
        let zero = |_: &BoundaryJet| 0.0;
        let out = adjoint_continuous(&m, &zero, &DirectionQuadrature::circle(16), grid).unwrap();
        assert!(out.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn continuous_adjoint_of_one_on_cube() {
        let cube = unit_cube(&[0, 1, 2, 3, 4, 5]);
        let att = Attenuation::Zero;
        let m = model(&cube, &att, 0);
        let grid = GridSpec::covering(&cube.bounding_box(), 3, &[3, 3, 3]).unwrap();
        let one = |_: &BoundaryJet| 1.0;
        let out = adjoint_continuous(&m, &one, &DirectionQuadrature::sphere(8, 16), grid).unwrap();
        // the centre sees no edge; off-centre points may lose edge-aimed directions
        assert_relative_eq!(out.values[grid.index(1, 1, 1)], 4.0 * PI, epsilon = 1e-12);
        for v in &out.values {
            assert!(*v <= 4.0 * PI + 1e-12 && *v >= 0.8 * 4.0 * PI, "{v}");
        }
    }

    #[test]
    fn continuous_adjoint_matches_discrete_on_smooth_data() {
        let sq = unit_square(&[LEFT, BOTTOM, TOP]);
        let att = Attenuation::Constant(0.5);
        let params = TraceParams::for_domain(&sq, 2);
        let grid = GridSpec::covering(&sq.bounding_box(), 2, &[24, 24]).unwrap();
        let sampling = Arc::new(Sampling::build(&sq, &SamplingSpec::new(160.0, 160, 1)).unwrap());
        let op = BrokenRayOperator::build(&sq, grid, sampling.clone(), &att, &OperatorSpec::new(params)).unwrap();
        let smooth = |j: &BoundaryJet| 1.0 + 0.5 * (3.0 * j.x.x + j.x.y).sin() * j.theta.x;
        let g = Sinogram::new(sampling.clone(), sampling.samples.iter().map(|s| smooth(&s.jet)).collect()).unwrap();
        let disc = adjoint_discrete(&op, &g).unwrap();
        let m = RayModel { domain: &sq, attenuation: &att, cutoff: CutoffSpec::unit(), trace: params };
        let cont = adjoint_continuous(&m, &g, &DirectionQuadrature::circle(720), grid).unwrap();
        let mut diff = cont.clone();
        diff.values.iter_mut().zip(&disc.values).for_each(|(a, b)| *a -= b);
        let rel = diff.norm_l2() / disc.norm_l2();
        assert!(rel < 0.02, "relative L2 gap {rel}");
    }

    #[test]
    fn interp_out_of_range_reported() {
        let sq = unit_square(&[LEFT, BOTTOM]);
        let sampling = Arc::new(Sampling::build(&sq, &SamplingSpec::new(8.0, 8, 1)).unwrap());
        let only_left = Sampling::explicit(&sq, &[sampling.samples[0].jet], &[1.0]).unwrap();
        let g = Sinogram::zeros(Arc::new(only_left));
        let att = Attenuation::Zero;
        let m = model(&sq, &att, 1);
        let grid = GridSpec::covering(&sq.bounding_box(), 2, &[4, 4]).unwrap();
        let r = adjoint_continuous(&m, &g, &DirectionQuadrature::circle(32), grid);
        assert!(matches!(r, Err(NormalError::InterpOutOfRange { .. })));
    }

    #[test]
    fn pointwise_split_without_reflections_is_ballistic() {
        let sq = unit_square(&[LEFT, RIGHT, BOTTOM, TOP]);
        let att = Attenuation::Constant(0.3);
        let m = model(&sq, &att, 0);
        let grid = GridSpec::covering(&sq.bounding_box(), 2, &[12, 12]).unwrap();
        let f = ScalarGridField::from_fn(grid, |x| (x.x * 3.0).sin() + x.y);
        let n = normal_pointwise(&m, &f, &DirectionQuadrature::circle(64));
        assert!(n.reflect.values.iter().all(|v| *v == 0.0));
        assert!(n.ballistic.norm_l2() > 0.0);
    }

    #[test]
    fn pointwise_normal_matches_discrete() {
        let sq = unit_square(&[LEFT, BOTTOM, TOP]);
        let att = Attenuation::Zero;
        let params = TraceParams::for_domain(&sq, 1);
        let grid = GridSpec::covering(&sq.bounding_box(), 2, &[16, 16]).unwrap();
        let f = ScalarGridField::from_fn(grid, |x| (-((x.x - 0.5).powi(2) + (x.y - 0.5).powi(2)) / 0.05).exp());
        let sampling = Arc::new(Sampling::build(&sq, &SamplingSpec::new(200.0, 200, 1)).unwrap());
        let op = BrokenRayOperator::build(&sq, grid, sampling, &att, &OperatorSpec::new(params)).unwrap();
        let disc = normal_split(&op, &f).unwrap();
        let m = RayModel { domain: &sq, attenuation: &att, cutoff: CutoffSpec::unit(), trace: params };
        let cont = normal_pointwise(&m, &f, &DirectionQuadrature::circle(1024));
        for (a, b) in [(&cont.ballistic, &disc.ballistic), (&cont.reflect, &disc.reflect)] {
            let mut diff = a.clone();
            diff.values.iter_mut().zip(&b.values).for_each(|(u, v)| *u -= v);
            assert!(diff.norm_l2() < 0.05 * b.norm_l2(), "{} vs {}", diff.norm_l2(), b.norm_l2());
        }
    }

    #[test]
    fn reflect_kernel_is_mirrored_distance() {
        // only the right edge reflects, so the reflected part of a narrow
        // bump at y seen from x is 2 m / |y - R(x)| with R the mirror in x1 = 1
        let sq = unit_square(&[LEFT, BOTTOM, TOP]);
        let att = Attenuation::Zero;
        let m = model(&sq, &att, 2);
        let grid = GridSpec::covering(&sq.bounding_box(), 2, &[128, 128]).unwrap();
        let y = Vec3::new(0.6, 0.5, 0.0);
        let f = ScalarGridField::from_fn(grid, |z| (-(z - y).norm_squared() / (2.0 * 0.02f64.powi(2))).exp());
        let mass: f64 = f.values.iter().sum::<f64>() * grid.cell_volume();
        let x_idx = grid.index(51, 38, 0);
        let x = grid.center(x_idx);
        let quad = DirectionQuadrature::circle(4096);
        let (_, refl) = normal_at(&m, &f, &x, &quad);
        let rx = Vec3::new(2.0 - x.x, x.y, 0.0);
        let expected = 2.0 * mass / (y - rx).norm();
        assert_relative_eq!(refl, expected, max_relative = 0.02);
    }

    #[test]
    fn symbol_calibration() {
        let sq = unit_square(&[LEFT, RIGHT, BOTTOM, TOP]);
        let att = Attenuation::Zero;
        let m = model(&sq, &att, 0);
        let a = ballistic_symbol(&m, &Vec3::new(0.4, 0.55, 0.0), &Vec3::new(0.6, 0.8, 0.0), 0);
        assert_relative_eq!(a, 4.0 * PI, epsilon = 1e-12);
        let cube = unit_cube(&[0, 1, 2, 3, 4, 5]);
        let m = model(&cube, &att, 0);
        let xi = Vec3::new(1.0, 2.0, 2.0) / 3.0;
        let a = ballistic_symbol(&m, &Vec3::new(0.4, 0.5, 0.45), &xi, 64);
        assert_relative_eq!(a, 4.0 * PI * PI, epsilon = 1e-11);
    }

    #[test]
    fn symbol_vanishes_without_normal_rays() {
        // E = left edge: the vertical rays through the centre bounce between
        // top and bottom forever
        let sq = unit_square(&[LEFT]);
        let att = Attenuation::Zero;
        let m = model(&sq, &att, 6);
        assert_eq!(ballistic_symbol(&m, &Vec3::new(0.5, 0.5, 0.0), &Vec3::x(), 0), 0.0);
        let sq = unit_square(&[LEFT, BOTTOM]);
        let m = model(&sq, &att, 1);
        // one of the two vertical rays is a single bounce ending in E
        let a = ballistic_symbol(&m, &Vec3::new(0.5, 0.5, 0.0), &Vec3::x(), 0);
        assert!(a > 0.0);
    }

    #[test]
    fn attenuated_symbol_closed_form() {
        let sq = unit_square(&[LEFT, RIGHT, BOTTOM, TOP]);
        let att = Attenuation::Constant(0.7);
        let m = model(&sq, &att, 0);
        let x = Vec3::new(0.3, 0.6, 0.0);
        // theta = ±e2: distances back to the boundary are 0.6 and 0.4
        let a = ballistic_symbol(&m, &x, &Vec3::x(), 0);
        let expected = 2.0 * PI * ((-1.4f64 * 0.6).exp() + (-1.4f64 * 0.4).exp());
        assert_relative_eq!(a, expected, epsilon = 1e-12);
    }

    #[test]
    fn baseline_inverts_full_data_normal() {
        let sq = unit_square(&[LEFT, RIGHT, BOTTOM, TOP]);
        let att = Attenuation::Zero;
        let params = TraceParams::for_domain(&sq, 0);
        let grid = GridSpec::covering(&sq.bounding_box(), 2, &[48, 48]).unwrap();
        let f = ScalarGridField::from_fn(grid, |x| (-((x.x - 0.5).powi(2) + (x.y - 0.45).powi(2)) / 0.01).exp());
        let sampling = Arc::new(Sampling::build(&sq, &SamplingSpec::new(150.0, 150, 1)).unwrap());
        let op = BrokenRayOperator::build(&sq, grid, sampling, &att, &OperatorSpec::new(params)).unwrap();
        let nf = ScalarGridField::from_values(grid, op.normal_apply(&f.values)).unwrap();
        let rec = baseline_filter(&nf, 4.0 * PI);
        // N f is only known on the grid, so the filter is accurate away from its edges
        let (mut err, mut norm) = (0.0, 0.0);
        for i in 0..grid.len() {
            let y = grid.center(i);
            if (0.2..0.8).contains(&y.x) && (0.2..0.8).contains(&y.y) {
                err += (rec.values[i] - f.values[i]).powi(2);
                norm += f.values[i].powi(2);
            }
        }
        let rel = (err / norm).sqrt();
        assert!(rel < 0.08, "baseline error {rel}");
    }

    #[test]
    fn normal_op_is_self_adjoint() {
        let sq = unit_square(&[LEFT, BOTTOM, TOP]);
        let params = TraceParams::for_domain(&sq, 1);
        let grid = GridSpec::covering(&sq.bounding_box(), 2, &[10, 10]).unwrap();
        let sampling = Arc::new(Sampling::build(&sq, &SamplingSpec::new(40.0, 40, 1)).unwrap());
        let op = BrokenRayOperator::build(&sq, grid, sampling, &Attenuation::Constant(0.4), &OperatorSpec::new(params))
            .unwrap();
        let n = NormalOp(&op);
        let f: Vec<f64> = (0..100).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let g: Vec<f64> = (0..100).map(|i| ((i * 13 % 7) as f64).cos()).collect();
        let (mut nf, mut ng) = (vec![0.0; 100], vec![0.0; 100]);
        n.apply(&f, &mut nf);
        n.apply(&g, &mut ng);
        let (a, b) = (n.in_dot(&nf, &g), n.in_dot(&f, &ng));
        assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()));
        assert!(n.in_dot(&nf, &f) >= 0.0);
    }
}
