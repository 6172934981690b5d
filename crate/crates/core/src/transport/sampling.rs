//! Quadrature samplings of `Gamma_-` and sinograms defined on them.
//!
//! Each facet gets a tensor grid of midpoint nodes: positions on a uniform
//! grid over the facet chart, directions uniform in the projected measure
//! `|nu . theta| dtheta`. In 2D the direction coordinate is `u = sin phi`,
//! in 3D it is `(sin^2 beta, psi)` with `beta` the angle to the inward normal.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::{BoundaryJet, ConvexDomain, FacetChart, FacetLabel, Vec3};

use super::TransportError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FacetSelection {
    /// Start points in the measurement set E only.
    #[default]
    Measure,
    /// Every facet, whole.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    /// Position nodes per unit length along each facet coordinate.
    pub density: f64,
    /// Nodes in `sin phi` (2D) or `sin^2 beta` (3D).
    pub directions: usize,
    /// Azimuthal nodes (3D only).
    #[serde(default = "default_azimuths")]
    pub azimuths: usize,
    #[serde(default)]
    pub facets: FacetSelection,
}

fn default_azimuths() -> usize {
    16
}

impl SamplingSpec {
    pub fn new(density: f64, directions: usize, azimuths: usize) -> Self {
        SamplingSpec { density, directions, azimuths, facets: FacetSelection::Measure }
    }

    pub fn all_facets(mut self) -> Self {
        self.facets = FacetSelection::All;
        self
    }
}

/// Position of a sample in its facet's tensor grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleIndex {
    pub facet: usize,
    pub pos: [usize; 2],
    pub dir: [usize; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub jet: BoundaryJet,
    /// Quadrature weight for `dSigma = |nu . theta| dtheta dx`.
    pub weight: f64,
    pub index: Option<SampleIndex>,
}

/// Tensor-grid layout of the samples on one facet.
#[derive(Clone, Debug)]
pub struct FacetLayout {
    pub facet: usize,
    pub chart: FacetChart,
    pub inward: Vec3,
    pub n_pos: [usize; 2],
    pub dpos: [f64; 2],
    pub n_dir: [usize; 2],
    /// Sample number for each grid slot, if that slot was sampled.
    slots: Vec<Option<u32>>,
}

impl FacetLayout {
    fn slot(&self, pos: [usize; 2], dir: [usize; 2]) -> usize {
        ((pos[0] * self.n_pos[1] + pos[1]) * self.n_dir[0] + dir[0]) * self.n_dir[1] + dir[1]
    }

    pub fn sample_at(&self, pos: [usize; 2], dir: [usize; 2]) -> Option<usize> {
        self.slots[self.slot(pos, dir)].map(|s| s as usize)
    }

    /// Direction with the given (continuous) direction coordinates.
    pub fn direction(&self, c: [f64; 2]) -> Vec3 {
        if self.chart.basis.len() == 1 {
            let u = c[0];
            self.inward * (1.0 - u * u).max(0.0).sqrt() + self.chart.basis[0] * u
        } else {
            let mu = c[0];
            let (s, co) = (mu.max(0.0).sqrt(), (1.0 - mu).max(0.0).sqrt());
            self.inward * co + (self.chart.basis[0] * c[1].cos() + self.chart.basis[1] * c[1].sin()) * s
        }
    }

    /// Direction coordinates of `theta`.
    pub fn direction_coords(&self, theta: &Vec3) -> [f64; 2] {
        if self.chart.basis.len() == 1 {
            [theta.dot(&self.chart.basis[0]), 0.0]
        } else {
            let c = theta.dot(&self.inward);
            let psi = theta.dot(&self.chart.basis[1]).atan2(theta.dot(&self.chart.basis[0]));
            [1.0 - c * c, psi.rem_euclid(2.0 * PI)]
        }
    }

    /// Continuous grid indices of a jet: positions then directions.
    fn grid_coords(&self, jet: &BoundaryJet) -> [f64; 4] {
        let pc = self.chart.coords(&jet.x);
        let dc = self.direction_coords(&jet.theta);
        let mut out = [0.0; 4];
        for a in 0..2 {
            out[a] = if a < pc.len() { pc[a] / self.dpos[a] - 0.5 } else { 0.0 };
        }
        if self.chart.basis.len() == 1 {
            out[2] = (dc[0] + 1.0) / (2.0 / self.n_dir[0] as f64) - 0.5;
        } else {
            out[2] = dc[0] * self.n_dir[0] as f64 - 0.5;
            out[3] = dc[1] / (2.0 * PI / self.n_dir[1] as f64) - 0.5;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Sampling {
    pub spec: Option<SamplingSpec>,
    pub dim: usize,
    pub samples: Vec<Sample>,
    pub layouts: Vec<FacetLayout>,
}

impl Sampling {
    pub fn build(d: &ConvexDomain, spec: &SamplingSpec) -> Result<Self, TransportError> {
        if !(spec.density > 0.0) || spec.directions == 0 || (d.dim == 3 && spec.azimuths == 0) {
            return Err(TransportError::InvalidSpec("sampling needs positive density and direction counts".into()));
        }
        let mut samples = Vec::new();
        let mut layouts = Vec::new();
        for (k, f) in d.facets.iter().enumerate() {
            if spec.facets == FacetSelection::Measure && f.label != FacetLabel::Measure {
                continue;
            }
            let chart = d.facet_chart(k);
            let inward = -f.normal;
            let mut n_pos = [1usize; 2];
            let mut dpos = [1.0f64; 2];
            for (a, r) in chart.ranges.iter().enumerate() {
                let len = r.1 - r.0;
                n_pos[a] = ((len * spec.density).round() as usize).max(1);
                dpos[a] = len / n_pos[a] as f64;
            }
            let n_dir = if d.dim == 2 { [spec.directions, 1] } else { [spec.directions, spec.azimuths] };
            let mut layout = FacetLayout {
                facet: k,
                chart,
                inward,
                n_pos,
                dpos,
                n_dir,
                slots: vec![None; n_pos[0] * n_pos[1] * n_dir[0] * n_dir[1]],
            };
            let dir_weight = if d.dim == 2 {
                2.0 / n_dir[0] as f64
            } else {
                0.5 * (1.0 / n_dir[0] as f64) * (2.0 * PI / n_dir[1] as f64)
            };
            let area = dpos[0] * if d.dim == 3 { dpos[1] } else { 1.0 };
            let dirs: Vec<([usize; 2], Vec3)> = (0..n_dir[0])
                .flat_map(|i| (0..n_dir[1]).map(move |j| [i, j]))
                .map(|ij| {
                    let c = if d.dim == 2 {
                        [-1.0 + (ij[0] as f64 + 0.5) * 2.0 / n_dir[0] as f64, 0.0]
                    } else {
                        [(ij[0] as f64 + 0.5) / n_dir[0] as f64, (ij[1] as f64 + 0.5) * 2.0 * PI / n_dir[1] as f64]
                    };
                    (ij, layout.direction(c))
                })
                .collect();
            for p0 in 0..n_pos[0] {
                for p1 in 0..n_pos[1] {
                    let mut coords = vec![(p0 as f64 + 0.5) * dpos[0]];
                    if d.dim == 3 {
                        coords.push((p1 as f64 + 0.5) * dpos[1]);
                    }
                    let x = layout.chart.point(&coords);
                    if d.check_on_facet(&x, k).is_err() {
                        continue;
                    }
                    if spec.facets == FacetSelection::Measure && !d.in_e_unchecked(&x, k) {
                        continue;
                    }
                    for (ij, theta) in &dirs {
                        let slot = layout.slot([p0, p1], *ij);
                        layout.slots[slot] = Some(samples.len() as u32);
                        samples.push(Sample {
                            jet: BoundaryJet { x, theta: *theta, facet: k },
                            weight: area * dir_weight,
                            index: Some(SampleIndex { facet: k, pos: [p0, p1], dir: *ij }),
                        });
                    }
                }
            }
            layouts.push(layout);
        }
        if samples.is_empty() {
            return Err(TransportError::InvalidSpec("sampling produced no samples".into()));
        }
        Ok(Sampling { spec: Some(*spec), dim: d.dim, samples, layouts })
    }

    /// Sampling from explicit jets and weights.
    pub fn explicit(d: &ConvexDomain, jets: &[BoundaryJet], weights: &[f64]) -> Result<Self, TransportError> {
        if jets.len() != weights.len() || jets.is_empty() {
            return Err(TransportError::InvalidSpec("explicit sampling needs one weight per jet".into()));
        }
        let samples = jets
            .iter()
            .zip(weights)
            .map(|(j, w)| {
                let jet = BoundaryJet::new(d, j.x, j.theta, j.facet)
                    .map_err(|e| TransportError::InvalidSpec(e.to_string()))?;
                Ok(Sample { jet, weight: *w, index: None })
            })
            .collect::<Result<Vec<_>, TransportError>>()?;
        Ok(Sampling { spec: None, dim: d.dim, samples, layouts: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.weight).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.samples.iter().map(|s| s.weight).sum()
    }

    /// Whether two samplings have the same jets and weights (to `tol`).
    pub fn compatible(&self, other: &Sampling, tol: f64) -> bool {
        self.samples.len() == other.samples.len()
            && self.samples.iter().zip(&other.samples).all(|(a, b)| {
                a.jet.facet == b.jet.facet
                    && (a.jet.x - b.jet.x).norm() <= tol
                    && (a.jet.theta - b.jet.theta).norm() <= tol
                    && (a.weight - b.weight).abs() <= tol * a.weight.abs().max(1.0)
            })
    }

    fn layout(&self, facet: usize) -> Option<&FacetLayout> {
        self.layouts.iter().find(|l| l.facet == facet)
    }

    /// Multilinear interpolation of per-sample `values` at a jet. Missing
    /// neighbours are dropped and the remaining weights renormalized; `None`
    /// if the jet is more than half a cell outside the sampled grid.
    pub fn interpolate(&self, values: &[f64], jet: &BoundaryJet) -> Option<f64> {
        let layout = self.layout(jet.facet)?;
        let c = layout.grid_coords(jet);
        let dims = [layout.n_pos[0], layout.n_pos[1], layout.n_dir[0], layout.n_dir[1]];
        let periodic = [false, false, false, self.dim == 3];
        let mut lo = [0usize; 4];
        let mut hi = [0usize; 4];
        let mut fr = [0.0f64; 4];
        for a in 0..4 {
            let n = dims[a];
            if n == 1 && !periodic[a] {
                if c[a].abs() > 0.5 + 1e-9 {
                    return None;
                }
                continue;
            }
            if periodic[a] {
                let f = c[a].floor();
                fr[a] = c[a] - f;
                lo[a] = (f as i64).rem_euclid(n as i64) as usize;
                hi[a] = (lo[a] + 1) % n;
                continue;
            }
            if c[a] < -0.5 - 1e-9 || c[a] > n as f64 - 0.5 + 1e-9 {
                return None;
            }
            let x = c[a].clamp(0.0, (n - 1) as f64);
            let f = x.floor().min((n - 1) as f64);
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(n - 1);
            fr[a] = x - f;
        }
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for corner in 0..16usize {
            let mut idx = [0usize; 4];
            let mut w = 1.0;
            for a in 0..4 {
                let up = corner >> a & 1 == 1;
                idx[a] = if up { hi[a] } else { lo[a] };
                w *= if up { fr[a] } else { 1.0 - fr[a] };
            }
            if w == 0.0 {
                continue;
            }
            if let Some(s) = layout.sample_at([idx[0], idx[1]], [idx[2], idx[3]]) {
                acc += w * values[s];
                wsum += w;
            }
        }
        if wsum > 1e-12 {
            Some(acc / wsum)
        } else {
            None
        }
    }
}

/// Values on a sampling of `Gamma_-`.
#[derive(Clone, Debug)]
pub struct Sinogram {
    pub sampling: Arc<Sampling>,
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn new(sampling: Arc<Sampling>, values: Vec<f64>) -> Result<Self, TransportError> {
        if values.len() != sampling.len() {
            return Err(TransportError::SamplingMismatch(format!(
                "{} values for {} samples",
                values.len(),
                sampling.len()
            )));
        }
        Ok(Sinogram { sampling, values })
    }

    pub fn zeros(sampling: Arc<Sampling>) -> Self {
        let n = sampling.len();
        Sinogram { sampling, values: vec![0.0; n] }
    }

    /// `<g, h>` with the `dSigma` weights.
    pub fn dot(&self, other: &Sinogram) -> f64 {
        self.sampling
            .samples
            .iter()
            .zip(self.values.iter().zip(&other.values))
            .map(|(s, (a, b))| s.weight * a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn interpolate(&self, jet: &BoundaryJet) -> Option<f64> {
        self.sampling.interpolate(&self.values, jet)
    }
}
