//! Cell-centred scalar fields on axis-aligned grids and exact ray traversal.

use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Vec3};

use super::TransportError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    #[default]
    Nearest,
    Multilinear,
}

/// Geometry of a cell-centred grid. Two-dimensional grids have `dims[2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub dim: usize,
    pub dims: [usize; 3],
    /// Lower corner of the grid box.
    pub origin: Vec3,
    pub spacing: Vec3,
}

impl GridSpec {
    pub fn new(dim: usize, dims: &[usize], origin: Vec3, spacing: Vec3) -> Result<Self, TransportError> {
        if !(dim == 2 || dim == 3) || dims.len() != dim {
            return Err(TransportError::InvalidSpec(format!("grid needs {dim} dimensions, got {}", dims.len())));
        }
        let mut d = [1usize; 3];
        for (i, n) in dims.iter().enumerate() {
            if *n == 0 {
                return Err(TransportError::InvalidSpec("grid dimension must be positive".into()));
            }
            if !(spacing[i] > 0.0) {
                return Err(TransportError::InvalidSpec("grid spacing must be positive".into()));
            }
            d[i] = *n;
        }
        let mut spacing = spacing;
        let mut origin = origin;
        if dim == 2 {
            spacing.z = 1.0;
            origin.z = 0.0;
        }
        Ok(GridSpec { dim, dims: d, origin, spacing })
    }

    /// Grid whose box is exactly `aabb`.
    pub fn covering(aabb: &Aabb, dim: usize, dims: &[usize]) -> Result<Self, TransportError> {
        let mut spacing = Vec3::repeat(1.0);
        for i in 0..dim.min(dims.len()) {
            spacing[i] = (aabb.hi[i] - aabb.lo[i]) / dims[i].max(1) as f64;
        }
        GridSpec::new(dim, dims, aabb.lo, spacing)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|i| self.spacing[i]).product()
    }

    pub fn upper(&self) -> Vec3 {
        let mut u = self.origin;
        for i in 0..self.dim {
            u[i] += self.spacing[i] * self.dims[i] as f64;
        }
        u
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn unindex(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    pub fn center(&self, idx: usize) -> Vec3 {
        let c = self.unindex(idx);
        let mut p = self.origin;
        for a in 0..self.dim {
            p[a] += (c[a] as f64 + 0.5) * self.spacing[a];
        }
        p
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        let u = self.upper();
        (0..self.dim).all(|a| x[a] >= self.origin[a] && x[a] <= u[a])
    }

    /// Same box, `factor` times as many cells along each axis.
    pub fn refined(&self, factor: usize) -> GridSpec {
        let mut g = *self;
        for a in 0..self.dim {
            g.dims[a] *= factor;
            g.spacing[a] /= factor as f64;
        }
        g
    }

    /// Grid of cell centres viewed as cell boundaries: cells of this grid are
    /// the pieces on which multilinear interpolation is polynomial.
    fn dual(&self) -> GridSpec {
        let mut g = *self;
        for a in 0..self.dim {
            g.dims[a] += 1;
            g.origin[a] -= 0.5 * self.spacing[a];
        }
        g
    }

    /// Parameter interval where `p + t d` is inside the grid box, within `[t0, t1]`.
    pub fn clip(&self, p: &Vec3, d: &Vec3, t0: f64, t1: f64) -> Option<(f64, f64)> {
        let u = self.upper();
        let (mut a, mut b) = (t0, t1);
        for ax in 0..self.dim {
            if d[ax].abs() < 1e-300 {
                if p[ax] < self.origin[ax] || p[ax] > u[ax] {
                    return None;
                }
                continue;
            }
            let ta = (self.origin[ax] - p[ax]) / d[ax];
            let tb = (u[ax] - p[ax]) / d[ax];
            a = a.max(ta.min(tb));
            b = b.min(ta.max(tb));
        }
        if a < b {
            Some((a, b))
        } else {
            None
        }
    }

    /// Visits every cell crossed by `p + t d` for `t` in `[t0, t1]`, calling
    /// `f(cell, t_enter, t_exit)` with positive-length chunks in order.
    pub fn traverse(&self, p: &Vec3, d: &Vec3, t0: f64, t1: f64, mut f: impl FnMut(usize, f64, f64)) {
        let Some((ta, tb)) = self.clip(p, d, t0, t1) else { return };
        let mut idx = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for ax in 0..self.dim {
            let h = self.spacing[ax];
            let n = self.dims[ax] as i64;
            let u = (p[ax] + d[ax] * ta - self.origin[ax]) / h;
            let mut i = u.floor() as i64;
            if d[ax] < 0.0 && u - (i as f64) < 1e-12 {
                i -= 1;
            }
            i = i.clamp(0, n - 1);
            idx[ax] = i;
            if d[ax] > 0.0 {
                step[ax] = 1;
                t_next[ax] = (self.origin[ax] + (i + 1) as f64 * h - p[ax]) / d[ax];
                t_delta[ax] = h / d[ax];
            } else if d[ax] < 0.0 {
                step[ax] = -1;
                t_next[ax] = (self.origin[ax] + i as f64 * h - p[ax]) / d[ax];
                t_delta[ax] = -h / d[ax];
            }
        }
        let mut t = ta;
        loop {
            let mut ax = 0;
            for a in 1..self.dim {
                if t_next[a] < t_next[ax] {
                    ax = a;
                }
            }
            let t_end = t_next[ax].min(tb);
            if t_end > t {
                f(self.index(idx[0] as usize, idx[1] as usize, idx[2] as usize), t, t_end);
                t = t_end;
            }
            if t_end >= tb {
                break;
            }
            idx[ax] += step[ax];
            if idx[ax] < 0 || idx[ax] >= self.dims[ax] as i64 {
                break;
            }
            t_next[ax] += t_delta[ax];
        }
    }

    /// Pieces of `p + t d`, `t` in `[t0, t1]`, on which multilinear
    /// interpolation of a field on this grid is a polynomial in `t`.
    pub fn multilinear_pieces(&self, p: &Vec3, d: &Vec3, t0: f64, t1: f64, mut f: impl FnMut(f64, f64)) {
        let Some((ta, tb)) = self.clip(p, d, t0, t1) else { return };
        self.dual().traverse(p, d, ta, tb, |_, a, b| f(a, b));
    }

    /// Multilinear stencil at `x`: up to eight `(cell, weight)` pairs. Points
    /// outside the span of the cell centres use the nearest boundary values.
    pub fn stencil(&self, x: &Vec3) -> ([(usize, f64); 8], usize) {
        let mut lo = [0usize; 3];
        let mut fr = [0.0f64; 3];
        let mut two = [false; 3];
        for a in 0..self.dim {
            let u = (x[a] - self.origin[a]) / self.spacing[a] - 0.5;
            let n = self.dims[a];
            if n == 1 || u <= 0.0 {
                lo[a] = 0;
            } else if u >= (n - 1) as f64 {
                lo[a] = n - 1;
            } else {
                let i = u.floor() as usize;
                lo[a] = i;
                fr[a] = u - i as f64;
                two[a] = true;
            }
        }
        let mut out = [(0usize, 0.0f64); 8];
        let mut m = 0;
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut c = [0usize; 3];
            let mut skip = false;
            for a in 0..self.dim {
                let hi = corner >> a & 1 == 1;
                if hi && !two[a] {
                    skip = true;
                    break;
                }
                c[a] = lo[a] + hi as usize;
                w *= if !two[a] {
                    1.0
                } else if hi {
                    fr[a]
                } else {
                    1.0 - fr[a]
                };
            }
            if !skip {
                out[m] = (self.index(c[0], c[1], c[2]), w);
                m += 1;
            }
        }
        (out, m)
    }
}

/// Two-point Gauss-Legendre nodes on `[0, 1]`.
pub(crate) const GL2: [(f64, f64); 2] = [(0.211_324_865_405_187_1, 0.5), (0.788_675_134_594_812_9, 0.5)];

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGridField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub interp: Interp,
}

impl ScalarGridField {
    pub fn zeros(grid: GridSpec) -> Self {
        ScalarGridField { grid, values: vec![0.0; grid.len()], interp: Interp::Nearest }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self, TransportError> {
        if values.len() != grid.len() {
            return Err(TransportError::GridMismatch { expected: grid.len(), got: values.len() });
        }
        Ok(ScalarGridField { grid, values, interp: Interp::Nearest })
    }

    /// Samples `f` at the cell centres.
    pub fn from_fn(grid: GridSpec, f: impl Fn(&Vec3) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.center(i))).collect();
        ScalarGridField { grid, values, interp: Interp::Nearest }
    }

    pub fn with_interp(mut self, interp: Interp) -> Self {
        self.interp = interp;
        self
    }

    /// Point value; zero outside the grid box.
    pub fn value_at(&self, x: &Vec3) -> f64 {
        if !self.grid.contains(x) {
            return 0.0;
        }
        match self.interp {
            Interp::Nearest => {
                let mut c = [0usize; 3];
                for a in 0..self.grid.dim {
                    let u = ((x[a] - self.grid.origin[a]) / self.grid.spacing[a]).floor() as i64;
                    c[a] = u.clamp(0, self.grid.dims[a] as i64 - 1) as usize;
                }
                self.values[self.grid.index(c[0], c[1], c[2])]
            }
            Interp::Multilinear => {
                let (st, m) = self.grid.stencil(x);
                st[..m].iter().map(|(c, w)| w * self.values[*c]).sum()
            }
        }
    }

    /// `∫ f(p + t d) dt` over `[t0, t1]`, exact for both interpolation modes.
    pub fn line_integral(&self, p: &Vec3, d: &Vec3, t0: f64, t1: f64) -> f64 {
        self.weighted_line_integral(p, d, t0, t1, &UnitWeight)
    }

    /// `∫ w(t) f(p + t d) dt`. Nearest fields are integrated exactly against
    /// `w`; multilinear ones with two Gauss points per polynomial piece.
    pub fn weighted_line_integral(&self, p: &Vec3, d: &Vec3, t0: f64, t1: f64, w: &dyn LineWeight) -> f64 {
        let mut acc = 0.0;
        match self.interp {
            Interp::Nearest => {
                self.grid.traverse(p, d, t0, t1, |c, a, b| acc += self.values[c] * w.integral(a, b));
            }
            Interp::Multilinear => {
                self.grid.multilinear_pieces(p, d, t0, t1, |a, b| {
                    let len = b - a;
                    for (x, wt) in GL2 {
                        let t = a + x * len;
                        acc += wt * len * self.value_at(&(p + d * t)) * w.at(t);
                    }
                });
            }
        }
        acc
    }

    /// `<f, g>` with the cell-volume weight.
    pub fn dot(&self, other: &ScalarGridField) -> f64 {
        self.grid.cell_volume() * self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// A weight along a line parametrized by `t`.
pub trait LineWeight {
    /// `∫_a^b w(t) dt`.
    fn integral(&self, a: f64, b: f64) -> f64;
    fn at(&self, t: f64) -> f64;
}

pub struct UnitWeight;

impl LineWeight for UnitWeight {
    fn integral(&self, a: f64, b: f64) -> f64 {
        b - a
    }
    fn at(&self, _t: f64) -> f64 {
        1.0
    }
}
