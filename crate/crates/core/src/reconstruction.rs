//! Matrix-free least-squares inversion and empirical stability probes.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{ConvexDomain, Vec3};
use crate::normal_ops::LinearOp;
use crate::transport::{
    Attenuation, BrokenRayOperator, GridSpec, Modulation, OperatorSpec, Sampling, ScalarGridField, Sinogram,
    TransportError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("residual grew to {residual:.3e} at iteration {iter}, more than 10x its minimum (is the adjoint exact?)")]
    Diverged { iter: usize, residual: f64 },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cgls,
    Landweber,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub max_iters: usize,
    /// Stop when the normal-equation residual `|A^* r|` drops below this
    /// fraction of its initial value.
    pub rel_tol: f64,
    /// Landweber step; defaults to `0.9 / |A|^2` with `|A|` from power iteration.
    pub step: Option<f64>,
    /// Unknowns allowed to be nonzero.
    pub mask: Option<Vec<bool>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { method: Method::Cgls, max_iters: 200, rel_tol: 1e-6, step: None, mask: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIters,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    /// `|A x - b|` in the data inner product.
    pub residual: f64,
    /// `|A^* (A x - b)|` in the unknowns' inner product.
    pub normal_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    pub log: Vec<IterRecord>,
    pub status: SolveStatus,
}

impl Solution {
    pub fn iterations(&self) -> usize {
        self.log.last().map_or(0, |r| r.iter)
    }
}

fn apply_mask(mask: Option<&[bool]>, v: &mut [f64]) {
    if let Some(m) = mask {
        v.iter_mut().zip(m).filter(|(_, keep)| !**keep).for_each(|(x, _)| *x = 0.0);
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

/// Minimizes `|A x - b|` over `x` supported in the mask.
pub fn solve(op: &dyn LinearOp, b: &[f64], cfg: &SolverConfig) -> Result<Solution, SolveError> {
    if b.len() != op.n_out() {
        return Err(SolveError::InvalidConfig(format!(
            "data has {} entries, operator expects {}",
            b.len(),
            op.n_out()
        )));
    }
    if let Some(m) = &cfg.mask {
        if m.len() != op.n_in() {
            return Err(SolveError::InvalidConfig("mask size differs from the unknowns".into()));
        }
        if !m.iter().any(|v| *v) {
            return Err(SolveError::InvalidConfig("mask is empty".into()));
        }
    }
    match cfg.method {
        Method::Cgls => cgls(op, b, cfg),
        Method::Landweber => landweber(op, b, cfg),
    }
}

fn cgls(op: &dyn LinearOp, b: &[f64], cfg: &SolverConfig) -> Result<Solution, SolveError> {
    let mask = cfg.mask.as_deref();
    let n = op.n_in();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut s = vec![0.0; n];
    op.apply_adjoint(&r, &mut s);
    apply_mask(mask, &mut s);
    let mut p = s.clone();
    let mut gamma = op.in_dot(&s, &s);
    let s0 = gamma.sqrt();
    let mut q = vec![0.0; op.n_out()];
    let mut log = vec![IterRecord { iter: 0, residual: op.out_dot(&r, &r).sqrt(), normal_residual: s0 }];
    if s0 == 0.0 {
        return Ok(Solution { x, log, status: SolveStatus::Converged });
    }
    let mut floor = log[0].residual;
    for iter in 1..=cfg.max_iters {
        op.apply(&p, &mut q);
        let qq = op.out_dot(&q, &q);
        if qq <= 0.0 {
            break;
        }
        let a = gamma / qq;
        axpy(a, &p, &mut x);
        axpy(-a, &q, &mut r);
        op.apply_adjoint(&r, &mut s);
        apply_mask(mask, &mut s);
        let gamma_new = op.in_dot(&s, &s);
        let rec = IterRecord { iter, residual: op.out_dot(&r, &r).sqrt(), normal_residual: gamma_new.sqrt() };
        log.push(rec);
        if rec.residual > 10.0 * floor.max(f64::MIN_POSITIVE) {
            return Err(SolveError::Diverged { iter, residual: rec.residual });
        }
        floor = floor.min(rec.residual);
        if rec.normal_residual <= cfg.rel_tol * s0 {
            return Ok(Solution { x, log, status: SolveStatus::Converged });
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p.iter_mut().zip(&s).for_each(|(pi, si)| *pi = si + beta * *pi);
    }
    Ok(Solution { x, log, status: SolveStatus::MaxIters })
}

fn landweber(op: &dyn LinearOp, b: &[f64], cfg: &SolverConfig) -> Result<Solution, SolveError> {
    let mask = cfg.mask.as_deref();
    let norm2 = operator_norm_sq(op, mask, 50, 7);
    let step = cfg.step.unwrap_or(0.9 / norm2);
    if !(step > 0.0 && step < 2.0 / norm2) {
        return Err(SolveError::InvalidConfig(format!("Landweber step {step:.3e} outside (0, {:.3e})", 2.0 / norm2)));
    }
    let n = op.n_in();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut s = vec![0.0; n];
    let mut ax = vec![0.0; op.n_out()];
    op.apply_adjoint(&r, &mut s);
    apply_mask(mask, &mut s);
    let s0 = op.in_dot(&s, &s).sqrt();
    let mut log = vec![IterRecord { iter: 0, residual: op.out_dot(&r, &r).sqrt(), normal_residual: s0 }];
    if s0 == 0.0 {
        return Ok(Solution { x, log, status: SolveStatus::Converged });
    }
    let mut floor = log[0].residual;
    for iter in 1..=cfg.max_iters {
        axpy(step, &s, &mut x);
        op.apply(&x, &mut ax);
        r.iter_mut().zip(b.iter().zip(&ax)).for_each(|(ri, (bi, ai))| *ri = bi - ai);
        op.apply_adjoint(&r, &mut s);
        apply_mask(mask, &mut s);
        let rec = IterRecord { iter, residual: op.out_dot(&r, &r).sqrt(), normal_residual: op.in_dot(&s, &s).sqrt() };
        log.push(rec);
        if rec.residual > 10.0 * floor {
            return Err(SolveError::Diverged { iter, residual: rec.residual });
        }
        floor = floor.min(rec.residual);
        if rec.normal_residual <= cfg.rel_tol * s0 {
            return Ok(Solution { x, log, status: SolveStatus::Converged });
        }
    }
    Ok(Solution { x, log, status: SolveStatus::MaxIters })
}

/// `|A P|^2` by power iteration on `P A^* A P`, `P` the mask projection.
pub fn operator_norm_sq(op: &dyn LinearOp, mask: Option<&[bool]>, iters: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..op.n_in()).map(|_| rng.random::<f64>() - 0.5).collect();
    apply_mask(mask, &mut v);
    let mut av = vec![0.0; op.n_out()];
    let mut w = vec![0.0; op.n_in()];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let nv = op.in_dot(&v, &v).sqrt();
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        op.apply(&v, &mut av);
        op.apply_adjoint(&av, &mut w);
        apply_mask(mask, &mut w);
        lambda = op.in_dot(&v, &w);
        std::mem::swap(&mut v, &mut w);
    }
    // the Rayleigh quotient approaches the top eigenvalue from below
    lambda * 1.01
}

/// Solves for a field on the operator's grid from a sinogram on its sampling.
pub fn solve_field(
    op: &BrokenRayOperator,
    g: &Sinogram,
    cfg: &SolverConfig,
) -> Result<(ScalarGridField, Solution), SolveError> {
    if !Arc::ptr_eq(&g.sampling, &op.sampling) && !g.sampling.compatible(&op.sampling, 1e-9) {
        return Err(TransportError::SamplingMismatch("data sampling differs from the operator's".into()).into());
    }
    let sol = solve(op, &g.values, cfg)?;
    let field = ScalarGridField::from_values(op.grid, sol.x.clone())?;
    Ok((field, sol))
}

/// Discrete `H^1` norm: `sqrt(sum (f^2 + |grad f|^2) dV)` with central
/// differences inside the grid and one-sided ones at its faces.
pub fn h1_norm(f: &ScalarGridField) -> f64 {
    let g = f.grid;
    let mut acc = 0.0;
    for idx in 0..g.len() {
        let ijk = g.unindex(idx);
        let v = f.values[idx];
        let mut s = v * v;
        for a in 0..g.dim {
            let n = g.dims[a];
            if n < 2 {
                continue;
            }
            let at = |k: usize| {
                let mut c = ijk;
                c[a] = k;
                f.values[g.index(c[0], c[1], c[2])]
            };
            let i = ijk[a];
            let h = g.spacing[a];
            let d = if i == 0 {
                (at(1) - v) / h
            } else if i == n - 1 {
                (v - at(n - 2)) / h
            } else {
                (at(i + 1) - at(i - 1)) / (2.0 * h)
            };
            s += d * d;
        }
        acc += s;
    }
    (acc * g.cell_volume()).sqrt()
}

/// `sqrt(sum_{mask} f^2 dV)`.
pub fn l2_norm_on(f: &ScalarGridField, mask: &[bool]) -> f64 {
    let s: f64 = f.values.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| v * v).sum();
    (s * f.grid.cell_volume()).sqrt()
}

/// Relative L2 error of `a` against `reference` on the mask.
pub fn rel_error_on(a: &ScalarGridField, reference: &ScalarGridField, mask: &[bool]) -> f64 {
    let mut diff = a.clone();
    diff.values.iter_mut().zip(&reference.values).for_each(|(x, y)| *x -= y);
    l2_norm_on(&diff, mask) / l2_norm_on(reference, mask)
}

/// Cells whose centres lie in the box `[lo, hi]`.
pub fn box_mask(grid: &GridSpec, lo: &Vec3, hi: &Vec3) -> Vec<bool> {
    (0..grid.len())
        .map(|i| {
            let c = grid.center(i);
            (0..grid.dim).all(|a| c[a] >= lo[a] && c[a] <= hi[a])
        })
        .collect()
}

/// Norm used on the output of the probed map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeNorm {
    L2,
    H1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    /// Estimated `min |N f| / |f|_{L2(M)}` over the probe subspace.
    pub c_lower: f64,
    /// Ritz values of the ratio, ascending.
    pub ritz: Vec<f64>,
    pub basis_dim: usize,
}

/// Smooth probe functions supported in the bounding box of the mask: the
/// window `prod sin^2(pi u_a)` times cosines `prod cos(k_a pi u_a)`,
/// `0 <= k_a < modes`, orthonormalized in `L2(M)`.
pub fn probe_basis(grid: &GridSpec, mask: &[bool], modes: usize) -> Vec<Vec<f64>> {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for i in (0..grid.len()).filter(|&i| mask[i]) {
        let c = grid.center(i);
        for a in 0..grid.dim {
            lo[a] = lo[a].min(c[a] - 0.5 * grid.spacing[a]);
            hi[a] = hi[a].max(c[a] + 0.5 * grid.spacing[a]);
        }
    }
    let total = modes.pow(grid.dim as u32);
    let mut raw = Vec::with_capacity(total);
    for m in 0..total {
        let mut k = [0usize; 3];
        let mut rem = m;
        for ka in k.iter_mut().take(grid.dim) {
            *ka = rem % modes;
            rem /= modes;
        }
        let v: Vec<f64> = (0..grid.len())
            .map(|i| {
                if !mask[i] {
                    return 0.0;
                }
                let c = grid.center(i);
                (0..grid.dim)
                    .map(|a| {
                        let u = (c[a] - lo[a]) / (hi[a] - lo[a]);
                        (PI * u).sin().powi(2) * (k[a] as f64 * PI * u).cos()
                    })
                    .product()
            })
            .collect();
        raw.push(v);
    }
    let dv = grid.cell_volume();
    let dot = |a: &[f64], b: &[f64]| dv * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in raw {
        let n0 = dot(&v, &v).sqrt();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                axpy(-c, q, &mut v);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 * n0 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// Lanczos with full reorthogonalization for a symmetric operator on
/// `R^dim`; returns the Ritz values after `steps` steps, ascending.
pub fn lanczos(apply: impl Fn(&[f64]) -> Vec<f64>, dim: usize, steps: usize, seed: u64) -> Vec<f64> {
    let steps = steps.min(dim).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n0 = norm(&q);
    q.iter_mut().for_each(|x| *x /= n0);
    let mut qs: Vec<Vec<f64>> = vec![q];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    for j in 0..steps {
        let mut w = apply(&qs[j]);
        let a: f64 = w.iter().zip(&qs[j]).map(|(x, y)| x * y).sum();
        alpha.push(a);
        for _ in 0..2 {
            for qk in &qs {
                let c: f64 = w.iter().zip(qk).map(|(x, y)| x * y).sum();
                axpy(-c, qk, &mut w);
            }
        }
        let b = norm(&w);
        if j + 1 == steps || b < 1e-12 * a.abs().max(1e-300) {
            break;
        }
        beta.push(b);
        w.iter_mut().for_each(|x| *x /= b);
        qs.push(w);
    }
    let m = alpha.len();
    let t = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let mut ev: Vec<f64> = SymmetricEigen::new(t).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Empirical lower constant of `|N f| >= c |f|_{L2(M)}` over smooth probe
/// functions supported in the mask: Lanczos on the Gram operator
/// `c -> (<N q_i, N q_j>)_{ij} c` of the orthonormal probe basis `q_i`.
pub fn stability_probe(
    normal: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    grid: &GridSpec,
    mask: &[bool],
    modes: usize,
    n_probe: usize,
    norm: ProbeNorm,
) -> StabilityReport {
    use rayon::prelude::*;
    let basis = probe_basis(grid, mask, modes);
    let images: Vec<ScalarGridField> =
        basis.par_iter().map(|q| ScalarGridField::from_values(*grid, normal(q)).expect("grid size")).collect();
    let m = basis.len();
    let mut gram = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = output_inner(&images[i], &images[j], norm);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let ritz_sq =
        lanczos(|c| (&gram * nalgebra::DVector::from_column_slice(c)).iter().copied().collect(), m, n_probe, 11);
    let ritz: Vec<f64> = ritz_sq.iter().map(|v| v.max(0.0).sqrt()).collect();
    StabilityReport { c_lower: ritz[0], ritz, basis_dim: m }
}

/// `<u, v>` in L2 or in the discrete H1 product used by [`h1_norm`].
fn output_inner(u: &ScalarGridField, v: &ScalarGridField, norm: ProbeNorm) -> f64 {
    match norm {
        ProbeNorm::L2 => u.dot(v),
        ProbeNorm::H1 => {
            // polarization keeps the product consistent with h1_norm
            let mut s = u.clone();
            let mut d = u.clone();
            s.values.iter_mut().zip(&v.values).for_each(|(a, b)| *a += b);
            d.values.iter_mut().zip(&v.values).for_each(|(a, b)| *a -= b);
            0.25 * (h1_norm(&s).powi(2) - h1_norm(&d).powi(2))
        }
    }
}

/// Which coefficient is perturbed in [`perturbation_probe`].
#[derive(Clone)]
pub enum Perturbation {
    /// `sigma' = sigma_0 + delta * bump`.
    Sigma(ScalarGridField),
    /// `alpha' = alpha (1 - delta * phi)`.
    Alpha(Arc<dyn Fn(&crate::geometry::BoundaryJet) -> f64 + Send + Sync>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationRow {
    pub delta: f64,
    /// `max over probes of |(N' - N) f|_{H1} / |f|_{L2}`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationTable {
    pub rows: Vec<PerturbationRow>,
    /// Least-squares slope of `log ratio` against `log delta` over `delta > 0`.
    pub slope: f64,
}

/// Measures how `N` changes under a perturbation of size `delta` of the
/// attenuation or of the cutoff.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_probe(
    d: &ConvexDomain,
    grid: GridSpec,
    sampling: Arc<Sampling>,
    sigma0: &ScalarGridField,
    spec: &OperatorSpec,
    pert: &Perturbation,
    deltas: &[f64],
    probes: &[ScalarGridField],
) -> Result<PerturbationTable, TransportError> {
    let base = BrokenRayOperator::build(d, grid, sampling.clone(), &Attenuation::Grid(sigma0.clone()), spec)?;
    let base_out: Vec<Vec<f64>> = probes.iter().map(|f| base.normal_apply(&f.values)).collect();
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let op = match pert {
            Perturbation::Sigma(bump) => {
                let mut s = sigma0.clone();
                s.values.iter_mut().zip(&bump.values).for_each(|(a, b)| *a += delta * b);
                BrokenRayOperator::build(d, grid, sampling.clone(), &Attenuation::Grid(s), spec)?
            }
            Perturbation::Alpha(phi) => {
                let phi = phi.clone();
                let m: Modulation = Arc::new(move |j| 1.0 - delta * phi(j));
                BrokenRayOperator::build_modulated(
                    d,
                    grid,
                    sampling.clone(),
                    &Attenuation::Grid(sigma0.clone()),
                    spec,
                    Some(&m),
                )?
            }
        };
        let mut ratio: f64 = 0.0;
        for (f, n0) in probes.iter().zip(&base_out) {
            let mut diff = op.normal_apply(&f.values);
            diff.iter_mut().zip(n0).for_each(|(a, b)| *a -= b);
            let diff = ScalarGridField::from_values(grid, diff)?;
            ratio = ratio.max(h1_norm(&diff) / f.norm_l2());
        }
        rows.push(PerturbationRow { delta, ratio });
    }
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.delta > 0.0 && r.ratio > 0.0).map(|r| (r.delta.ln(), r.ratio.ln())).collect();
    Ok(PerturbationTable { slope: log_slope(&pts), rows })
}

fn log_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// `C^2` bump `(1 - |x - c|^2 / r^2)^3` inside the ball, zero outside.
pub fn c2_bump(x: &Vec3, center: &Vec3, radius: f64) -> f64 {
    let q = (x - center).norm_squared() / (radius * radius);
    if q >= 1.0 {
        0.0
    } else {
        (1.0 - q).powi(3)
    }
}
