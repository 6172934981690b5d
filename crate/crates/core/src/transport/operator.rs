//! The discretized transform `alpha * I_sigma` as an explicit sparse matrix.
//!
//! Row `i` holds, for sample `i`, the integrals of `exp(-A)` over the pieces
//! of the broken ray inside each grid cell (nearest mode) or the multilinear
//! basis weights at two Gauss points per polynomial piece. The adjoint is the
//! exact transpose with respect to `<.,.>_dSigma` and `<.,.>_dx`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::billiards::{trace_broken_ray, RayStatus, TraceParams};
use crate::geometry::{BoundaryJet, ConvexDomain};

use super::attenuation::{Attenuation, AttenuationProfile};
use super::cutoff::CutoffSpec;
use super::grid::{GridSpec, Interp, ScalarGridField, GL2};
use super::sampling::{Sampling, Sinogram};
use super::TransportError;

pub type Modulation = Arc<dyn Fn(&BoundaryJet) -> f64 + Send + Sync>;

const ROW_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatorSpec {
    pub trace: TraceParams,
    pub cutoff: CutoffSpec,
    pub interp: Interp,
}

impl OperatorSpec {
    pub fn new(trace: TraceParams) -> Self {
        OperatorSpec { trace, cutoff: CutoffSpec::unit(), interp: Interp::Nearest }
    }

    pub fn with_cutoff(mut self, cutoff: CutoffSpec) -> Self {
        self.cutoff = cutoff;
        self
    }
}

/// Per-sample metadata kept next to the matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowInfo {
    pub alpha: f64,
    /// `None` when the sample was outside the cutoff's support and not traced.
    pub status: Option<RayStatus>,
    pub segments: u16,
}

struct Row {
    info: RowInfo,
    sequence: Option<Vec<usize>>,
    cols: Vec<u32>,
    segs: Vec<u16>,
    vals: Vec<f64>,
}

pub struct BrokenRayOperator {
    pub grid: GridSpec,
    pub sampling: Arc<Sampling>,
    pub rows: Vec<RowInfo>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    segs: Vec<u16>,
    vals: Vec<f64>,
}

impl BrokenRayOperator {
    pub fn build(
        d: &ConvexDomain,
        grid: GridSpec,
        sampling: Arc<Sampling>,
        att: &Attenuation,
        spec: &OperatorSpec,
    ) -> Result<Self, TransportError> {
        Self::build_modulated(d, grid, sampling, att, spec, None)
    }

    /// Like [`build`](Self::build), with `alpha` multiplied by a function of
    /// the start jet.
    pub fn build_modulated(
        d: &ConvexDomain,
        grid: GridSpec,
        sampling: Arc<Sampling>,
        att: &Attenuation,
        spec: &OperatorSpec,
        modulation: Option<&Modulation>,
    ) -> Result<Self, TransportError> {
        if grid.dim != d.dim || sampling.dim != d.dim {
            return Err(TransportError::InvalidSpec("grid, sampling and domain dimensions differ".into()));
        }
        let rows: Vec<Row> = sampling
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, smp)| build_row(d, &grid, att, spec, modulation, i, &smp.jet))
            .collect::<Result<_, _>>()?;
        if !spec.cutoff.is_global() {
            let mut reference: Option<&Vec<usize>> = None;
            for (i, r) in rows.iter().enumerate() {
                if let Some(seq) = &r.sequence {
                    match reference {
                        None => reference = Some(seq),
                        Some(s) if s != seq => return Err(TransportError::SequenceMismatch { sample: i }),
                        _ => {}
                    }
                }
            }
        }
        let nnz: usize = rows.iter().map(|r| r.cols.len()).sum();
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut segs = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        let mut infos = Vec::with_capacity(rows.len());
        row_ptr.push(0);
        for r in rows {
            cols.extend_from_slice(&r.cols);
            segs.extend_from_slice(&r.segs);
            vals.extend_from_slice(&r.vals);
            row_ptr.push(cols.len());
            infos.push(r.info);
        }
        Ok(BrokenRayOperator { grid, sampling, rows: infos, row_ptr, cols, segs, vals })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.grid.len()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.alpha).collect()
    }

    /// `y = alpha I f` on the raw arrays.
    pub fn apply(&self, f: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let a = self.rows[i].alpha;
            *yi = if a == 0.0 { 0.0 } else { a * self.row_dot(i, f) };
        });
    }

    fn row_dot(&self, i: usize, f: &[f64]) -> f64 {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[s..e].iter().zip(&self.vals[s..e]).map(|(c, v)| v * f[*c as usize]).sum()
    }

    /// Adjoint with respect to the `dSigma` and cell-volume inner products.
    // row i indexes rows, samples, g and row_ptr together
    #[allow(clippy::needless_range_loop)]
    pub fn apply_adjoint(&self, g: &[f64], x: &mut [f64]) {
        let inv_v = 1.0 / self.grid.cell_volume();
        let n = self.n_cols();
        let partials: Vec<Vec<f64>> = (0..self.n_rows().div_ceil(ROW_CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let mut acc = vec![0.0; n];
                let end = ((chunk + 1) * ROW_CHUNK).min(self.n_rows());
                for i in chunk * ROW_CHUNK..end {
                    let scale = self.rows[i].alpha * self.sampling.samples[i].weight * g[i] * inv_v;
                    if scale == 0.0 {
                        continue;
                    }
                    for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                        acc[self.cols[k] as usize] += scale * self.vals[k];
                    }
                }
                acc
            })
            .collect();
        sum_in_order(partials, x);
    }

    /// `alpha^* alpha` normal operator split into the part pairing each
    /// segment with itself (ballistic) and the part pairing distinct
    /// segments of the same ray (reflected). The two sum to `A^* A f`.
    pub fn normal_split(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let inv_v = 1.0 / self.grid.cell_volume();
        let n = self.n_cols();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..self.n_rows().div_ceil(ROW_CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let mut ball = vec![0.0; n];
                let mut refl = vec![0.0; n];
                let mut per_seg: Vec<f64> = Vec::new();
                let end = ((chunk + 1) * ROW_CHUNK).min(self.n_rows());
                for i in chunk * ROW_CHUNK..end {
                    let a = self.rows[i].alpha;
                    if a == 0.0 {
                        continue;
                    }
                    let scale = a * a * self.sampling.samples[i].weight * inv_v;
                    per_seg.clear();
                    per_seg.resize(self.rows[i].segments as usize, 0.0);
                    let range = self.row_ptr[i]..self.row_ptr[i + 1];
                    for k in range.clone() {
                        per_seg[self.segs[k] as usize] += self.vals[k] * f[self.cols[k] as usize];
                    }
                    let total: f64 = per_seg.iter().sum();
                    for k in range {
                        let own = per_seg[self.segs[k] as usize];
                        let c = self.cols[k] as usize;
                        ball[c] += scale * self.vals[k] * own;
                        refl[c] += scale * self.vals[k] * (total - own);
                    }
                }
                (ball, refl)
            })
            .collect();
        let (b, r): (Vec<_>, Vec<_>) = partials.into_iter().unzip();
        let mut ball = vec![0.0; n];
        let mut refl = vec![0.0; n];
        sum_in_order(b, &mut ball);
        sum_in_order(r, &mut refl);
        (ball, refl)
    }

    /// `A^* A f`.
    pub fn normal_apply(&self, f: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows()];
        self.apply(f, &mut y);
        let mut x = vec![0.0; self.n_cols()];
        self.apply_adjoint(&y, &mut x);
        x
    }

    pub fn forward(&self, f: &ScalarGridField) -> Result<Sinogram, TransportError> {
        if f.grid != self.grid {
            return Err(TransportError::GridMismatch { expected: self.grid.len(), got: f.grid.len() });
        }
        let mut y = vec![0.0; self.n_rows()];
        self.apply(&f.values, &mut y);
        Sinogram::new(self.sampling.clone(), y)
    }

    /// Adjoint applied to a sinogram, which must live on this operator's sampling.
    pub fn adjoint(&self, g: &Sinogram) -> Result<ScalarGridField, TransportError> {
        if !Arc::ptr_eq(&g.sampling, &self.sampling) && !g.sampling.compatible(&self.sampling, 1e-9) {
            return Err(TransportError::SamplingMismatch("sinogram sampling differs from the operator's".into()));
        }
        let mut x = vec![0.0; self.n_cols()];
        self.apply_adjoint(&g.values, &mut x);
        ScalarGridField::from_values(self.grid, x)
    }

    pub fn count_status(&self, status: RayStatus) -> usize {
        self.rows.iter().filter(|r| r.status == Some(status)).count()
    }
}

fn sum_in_order(partials: Vec<Vec<f64>>, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
}

fn build_row(
    d: &ConvexDomain,
    grid: &GridSpec,
    att: &Attenuation,
    spec: &OperatorSpec,
    modulation: Option<&Modulation>,
    index: usize,
    jet: &BoundaryJet,
) -> Result<Row, TransportError> {
    let empty = |info| Row { info, sequence: None, cols: vec![], segs: vec![], vals: vec![] };
    let mut alpha = spec.cutoff.jet_factor(jet);
    if let Some(m) = modulation {
        alpha *= m(jet);
    }
    if alpha == 0.0 {
        return Ok(empty(RowInfo { alpha: 0.0, status: None, segments: 0 }));
    }
    let ray = trace_broken_ray(d, jet, &spec.trace)?;
    if !ray.is_regular() {
        if !spec.cutoff.is_global() {
            return Err(TransportError::IrregularInSupport { sample: index, status: ray.status });
        }
        return Ok(empty(RowInfo { alpha: 0.0, status: Some(ray.status), segments: 0 }));
    }
    alpha *= spec.cutoff.ray_factor(&ray, &spec.trace);
    let info = RowInfo { alpha, status: Some(ray.status), segments: ray.segments.len() as u16 };
    if alpha == 0.0 {
        return Ok(empty(info));
    }
    let profile = AttenuationProfile::along(att, &ray.segments);
    let mut row = Row {
        info,
        sequence: if spec.cutoff.is_global() { None } else { Some(ray.facet_sequence()) },
        cols: Vec::new(),
        segs: Vec::new(),
        vals: Vec::new(),
    };
    let mut base = 0.0;
    for (j, seg) in ray.segments.iter().enumerate() {
        match spec.interp {
            Interp::Nearest => grid.traverse(&seg.start, &seg.dir, 0.0, seg.length, |c, a, b| {
                row.cols.push(c as u32);
                row.segs.push(j as u16);
                row.vals.push(profile.exp_integral(base + a, base + b));
            }),
            Interp::Multilinear => grid.multilinear_pieces(&seg.start, &seg.dir, 0.0, seg.length, |a, b| {
                let len = b - a;
                for (x, wt) in GL2 {
                    let t = a + x * len;
                    let w = wt * len * profile.weight(base + t);
                    let (st, m) = grid.stencil(&(seg.start + seg.dir * t));
                    for (c, phi) in &st[..m] {
                        row.cols.push(*c as u32);
                        row.segs.push(j as u16);
                        row.vals.push(w * phi);
                    }
                }
            }),
        }
        base += seg.length;
    }
    Ok(row)
}
