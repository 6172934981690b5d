//! C ABI over the `brokenray` library.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free`. Every fallible call returns a [`BrtStatus`]; on failure
//! the message is kept per thread and read with [`brt_last_error`]. Panics
//! never cross the boundary and surface as `BRT_STATUS_PANIC`.
//!
//! Points and directions are always passed as three doubles; 2D domains
//! ignore the third.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use brokenray::billiards::{trace_broken_ray, RayStatus, TraceParams};
use brokenray::geometry::presets::{cube_cap, cube_slab, hexagon, unit_cube, unit_square};
use brokenray::geometry::{BoundaryJet, ConvexDomain, DomainConfig, Vec3};
use brokenray::normal_ops::LinearOp;
use brokenray::transport::{Attenuation, BrokenRayOperator, GridSpec, OperatorSpec, Sampling, SamplingSpec};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BrtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Geometry = 3,
    Trace = 4,
    Operator = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BrtPreset {
    Square = 0,
    Hexagon = 1,
    Cube = 2,
}

/// Outcome of tracing one broken ray.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct BrtTrace {
    /// 0 ended in E, 1 trapped, 2 near an edge, 3 near the boundary of E,
    /// 4 left through the complement of E.
    pub status: i32,
    pub segments: usize,
    pub length: f64,
    pub end: [f64; 3],
}

pub struct BrtDomain {
    inner: ConvexDomain,
}

pub struct BrtOperator {
    inner: BrokenRayOperator,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: BrtStatus, msg: impl ToString) -> BrtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.to_string());
    status
}

fn guard(f: impl FnOnce() -> BrtStatus) -> BrtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(BrtStatus::Panic, msg)
        }
    }
}

fn status_code(s: RayStatus) -> i32 {
    match s {
        RayStatus::EndedInE => 0,
        RayStatus::TrappedCap => 1,
        RayStatus::IrregularEdge => 2,
        RayStatus::IrregularNearBoundaryE => 3,
        RayStatus::ExitedEComplement => 4,
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize) -> Option<&'a [T]> {
    if n == 0 {
        Some(&[])
    } else if p.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(p, n))
    }
}

unsafe fn vec3(p: *const f64) -> Option<Vec3> {
    slice(p, 3).map(|s| Vec3::new(s[0], s[1], s[2]))
}

/// Copies the last error message of this thread into `buf` (NUL terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn brt_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds a preset domain. `measure` lists the facets forming E.
///
/// # Safety
/// `measure` must point to `n_measure` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn brt_domain_preset(
    preset: BrtPreset,
    measure: *const u32,
    n_measure: usize,
    out: *mut *mut BrtDomain,
) -> BrtStatus {
    guard(|| {
        let (Some(m), false) = (slice(measure, n_measure), out.is_null()) else {
            return fail(BrtStatus::NullPointer, "null measure or out pointer");
        };
        let m: Vec<usize> = m.iter().map(|&k| k as usize).collect();
        let n_facets = if preset == BrtPreset::Square { 4 } else { 6 };
        if let Some(k) = m.iter().find(|&&k| k >= n_facets) {
            return fail(BrtStatus::InvalidArgument, format!("facet {k} does not exist"));
        }
        let inner = match preset {
            BrtPreset::Square => unit_square(&m),
            BrtPreset::Hexagon => hexagon(&m),
            BrtPreset::Cube => unit_cube(&m),
        };
        *out = Box::into_raw(Box::new(BrtDomain { inner }));
        BrtStatus::Ok
    })
}

/// The unit cube with E the slab `|z - 1/2| <= eps` of the x=0 face
/// (`kind` 0) or the cap of the given radius (`kind` 1).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn brt_domain_cube_variant(kind: i32, param: f64, out: *mut *mut BrtDomain) -> BrtStatus {
    guard(|| {
        if out.is_null() {
            return fail(BrtStatus::NullPointer, "null out pointer");
        }
        let inner = match kind {
            0 if param > 0.0 && param < 1.0 => cube_slab(param),
            1 if param > 0.0 => cube_cap(param),
            _ => return fail(BrtStatus::InvalidArgument, format!("bad cube variant {kind} with parameter {param}")),
        };
        *out = Box::into_raw(Box::new(BrtDomain { inner }));
        BrtStatus::Ok
    })
}

/// Builds a domain from its TOML description.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn brt_domain_from_toml(toml: *const c_char, out: *mut *mut BrtDomain) -> BrtStatus {
    guard(|| {
        if toml.is_null() || out.is_null() {
            return fail(BrtStatus::NullPointer, "null argument");
        }
        let Ok(text) = CStr::from_ptr(toml).to_str() else {
            return fail(BrtStatus::InvalidArgument, "domain text is not UTF-8");
        };
        match DomainConfig::from_toml(text).and_then(|c| c.build()) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(BrtDomain { inner }));
                BrtStatus::Ok
            }
            Err(e) => fail(BrtStatus::Geometry, e),
        }
    })
}

/// # Safety
/// `d` must be null or a handle from a `brt_domain_*` constructor, freed once.
#[no_mangle]
pub unsafe extern "C" fn brt_domain_free(d: *mut BrtDomain) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Dimension of the domain, 0 for a null handle.
///
/// # Safety
/// `d` must be null or a live domain handle.
#[no_mangle]
pub unsafe extern "C" fn brt_domain_dim(d: *const BrtDomain) -> usize {
    d.as_ref().map_or(0, |d| d.inner.dim)
}

/// Number of facets, 0 for a null handle.
///
/// # Safety
/// `d` must be null or a live domain handle.
#[no_mangle]
pub unsafe extern "C" fn brt_domain_facet_count(d: *const BrtDomain) -> usize {
    d.as_ref().map_or(0, |d| d.inner.facets.len())
}

/// Traces the broken ray leaving `start` (on facet `facet`) along `dir`
/// with at most `n_max` reflections.
///
/// # Safety
/// `start` and `dir` must point to 3 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn brt_trace(
    d: *const BrtDomain,
    start: *const f64,
    dir: *const f64,
    facet: usize,
    n_max: usize,
    out: *mut BrtTrace,
) -> BrtStatus {
    guard(|| {
        let (Some(d), Some(x), Some(theta), Some(out)) = (d.as_ref(), vec3(start), vec3(dir), out.as_mut()) else {
            return fail(BrtStatus::NullPointer, "null argument");
        };
        let d = &d.inner;
        if facet >= d.facets.len() || theta.norm() == 0.0 {
            return fail(BrtStatus::InvalidArgument, "facet out of range or zero direction");
        }
        let jet = match BoundaryJet::new(d, x, theta, facet) {
            Ok(j) => j,
            Err(e) => return fail(BrtStatus::Geometry, e),
        };
        match trace_broken_ray(d, &jet, &TraceParams::for_domain(d, n_max)) {
            Ok(ray) => {
                let end = ray.end_point();
                *out = BrtTrace {
                    status: status_code(ray.status),
                    segments: ray.segments.len(),
                    length: ray.total_length(),
                    end: [end.x, end.y, end.z],
                };
                BrtStatus::Ok
            }
            Err(e) => fail(BrtStatus::Trace, e),
        }
    })
}

/// Assembles the discrete transform on a `dims` grid covering the domain,
/// with boundary sampling of `density` nodes per unit length, `directions`
/// direction nodes (`azimuths` more in 3D), constant attenuation `sigma`
/// and the binary cutoff.
///
/// # Safety
/// `dims` must point to `dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn brt_operator_new(
    d: *const BrtDomain,
    dims: *const usize,
    density: f64,
    directions: usize,
    azimuths: usize,
    n_max: usize,
    sigma: f64,
    out: *mut *mut BrtOperator,
) -> BrtStatus {
    guard(|| {
        let Some(d) = d.as_ref() else {
            return fail(BrtStatus::NullPointer, "null domain");
        };
        let d = &d.inner;
        let (Some(dims), false) = (slice(dims, d.dim), out.is_null()) else {
            return fail(BrtStatus::NullPointer, "null dims or out pointer");
        };
        if !(density > 0.0) || directions == 0 || !(sigma >= 0.0) {
            return fail(BrtStatus::InvalidArgument, "density and directions must be positive, sigma nonnegative");
        }
        let grid = match GridSpec::covering(&d.bounding_box(), d.dim, dims) {
            Ok(g) => g,
            Err(e) => return fail(BrtStatus::InvalidArgument, e),
        };
        let sampling = match Sampling::build(d, &SamplingSpec::new(density, directions, azimuths.max(1))) {
            Ok(s) => Arc::new(s),
            Err(e) => return fail(BrtStatus::Operator, e),
        };
        let att = if sigma == 0.0 { Attenuation::Zero } else { Attenuation::Constant(sigma) };
        let spec = OperatorSpec::new(TraceParams::for_domain(d, n_max));
        match BrokenRayOperator::build(d, grid, sampling, &att, &spec) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(BrtOperator { inner }));
                BrtStatus::Ok
            }
            Err(e) => fail(BrtStatus::Operator, e),
        }
    })
}

/// # Safety
/// `op` must be null or a handle from [`brt_operator_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn brt_operator_free(op: *mut BrtOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// Number of grid cells (`n_in`) and of sinogram rows (`n_out`).
///
/// # Safety
/// `op` must be a live handle; `n_in` and `n_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn brt_operator_shape(op: *const BrtOperator, n_in: *mut usize, n_out: *mut usize) -> BrtStatus {
    let (Some(op), Some(n_in), Some(n_out)) = (op.as_ref(), n_in.as_mut(), n_out.as_mut()) else {
        return fail(BrtStatus::NullPointer, "null argument");
    };
    *n_in = op.inner.n_in();
    *n_out = op.inner.n_out();
    BrtStatus::Ok
}

enum Apply {
    Forward,
    Adjoint,
    Normal,
}

unsafe fn apply(op: *const BrtOperator, x: *const f64, nx: usize, y: *mut f64, ny: usize, which: Apply) -> BrtStatus {
    guard(|| {
        let Some(op) = op.as_ref() else {
            return fail(BrtStatus::NullPointer, "null operator");
        };
        let op = &op.inner;
        let (n_x, n_y) = match which {
            Apply::Forward => (op.n_in(), op.n_out()),
            Apply::Adjoint => (op.n_out(), op.n_in()),
            Apply::Normal => (op.n_in(), op.n_in()),
        };
        if nx != n_x {
            return fail(BrtStatus::InvalidArgument, format!("input has {nx} values, expected {n_x}"));
        }
        if ny < n_y {
            return fail(BrtStatus::BufferTooSmall, format!("output holds {ny} values, need {n_y}"));
        }
        if (x.is_null() && nx > 0) || (y.is_null() && n_y > 0) {
            return fail(BrtStatus::NullPointer, "null buffer");
        }
        let x = std::slice::from_raw_parts(x, nx);
        let y = std::slice::from_raw_parts_mut(y, n_y);
        match which {
            Apply::Forward => op.apply(x, y),
            Apply::Adjoint => op.apply_adjoint(x, y),
            Apply::Normal => y.copy_from_slice(&op.normal_apply(x)),
        }
        BrtStatus::Ok
    })
}

/// `y = A f`.
///
/// # Safety
/// `f` must hold `nf` doubles and `y` room for `ny`.
#[no_mangle]
pub unsafe extern "C" fn brt_operator_forward(
    op: *const BrtOperator,
    f: *const f64,
    nf: usize,
    y: *mut f64,
    ny: usize,
) -> BrtStatus {
    apply(op, f, nf, y, ny, Apply::Forward)
}

/// `f = A* g`, adjoint in the quadrature-weighted inner products.
///
/// # Safety
/// `g` must hold `ng` doubles and `f` room for `nf`.
#[no_mangle]
pub unsafe extern "C" fn brt_operator_adjoint(
    op: *const BrtOperator,
    g: *const f64,
    ng: usize,
    f: *mut f64,
    nf: usize,
) -> BrtStatus {
    apply(op, g, ng, f, nf, Apply::Adjoint)
}

/// `y = A* A f`.
///
/// # Safety
/// `f` must hold `nf` doubles and `y` room for `ny`.
#[no_mangle]
pub unsafe extern "C" fn brt_operator_normal(
    op: *const BrtOperator,
    f: *const f64,
    nf: usize,
    y: *mut f64,
    ny: usize,
) -> BrtStatus {
    apply(op, f, nf, y, ny, Apply::Normal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn last_error() -> String {
        let mut buf = vec![0 as c_char; 256];
        let n = unsafe { brt_last_error(buf.as_mut_ptr(), buf.len()) };
        let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
        assert_eq!(s.len(), n.min(255));
        s
    }

    fn square(measure: &[u32]) -> *mut BrtDomain {
        let mut d = ptr::null_mut();
        let s = unsafe { brt_domain_preset(BrtPreset::Square, measure.as_ptr(), measure.len(), &mut d) };
        assert_eq!(s, BrtStatus::Ok);
        d
    }

    #[test]
    fn traces_the_diagonal_ray() {
        let d = square(&[0]);
        let mut t = BrtTrace::default();
        let h = 0.5f64.sqrt();
        let s = unsafe { brt_trace(d, [0.0, 0.25, 0.0].as_ptr(), [h, h, 0.0].as_ptr(), 0, 5, &mut t) };
        assert_eq!(s, BrtStatus::Ok);
        assert_eq!(t.status, 0);
        assert_eq!(t.segments, 4);
        assert!((t.length - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((t.end[0]).abs() < 1e-12 && (t.end[1] - 0.25).abs() < 1e-12);
        unsafe { brt_domain_free(d) };
    }

    #[test]
    fn reports_errors() {
        let mut d = ptr::null_mut();
        let s = unsafe { brt_domain_preset(BrtPreset::Square, [9u32].as_ptr(), 1, &mut d) };
        assert_eq!(s, BrtStatus::InvalidArgument);
        assert!(last_error().contains("facet 9"));
        assert!(d.is_null());

        let d = square(&[0]);
        let mut t = BrtTrace::default();
        // outward direction on the left edge
        let s = unsafe { brt_trace(d, [0.0, 0.5, 0.0].as_ptr(), [-1.0, 0.0, 0.0].as_ptr(), 0, 5, &mut t) };
        assert_eq!(s, BrtStatus::Geometry);
        assert!(!last_error().is_empty());
        let s = unsafe { brt_trace(ptr::null(), [0.0; 3].as_ptr(), [1.0, 0.0, 0.0].as_ptr(), 0, 5, &mut t) };
        assert_eq!(s, BrtStatus::NullPointer);
        unsafe { brt_domain_free(d) };
    }

    #[test]
    fn error_message_truncates() {
        fail(BrtStatus::InvalidArgument, "abcdef");
        let mut buf = [1 as c_char; 4];
        assert_eq!(unsafe { brt_last_error(buf.as_mut_ptr(), 4) }, 6);
        assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_bytes(), b"abc");
        assert_eq!(unsafe { brt_last_error(ptr::null_mut(), 0) }, 6);
    }

    #[test]
    fn domain_from_toml() {
        let text = std::ffi::CString::new(
            r#"
dim = 2
[[facets]]
normal = [-1.0, 0.0]
offset = 0.0
label = "measure"
[[facets]]
normal = [1.0, 0.0]
offset = 1.0
label = "reflect"
[[facets]]
normal = [0.0, -1.0]
offset = 0.0
label = "reflect"
[[facets]]
normal = [0.0, 1.0]
offset = 1.0
label = "reflect"
"#,
        )
        .unwrap();
        let mut d = ptr::null_mut();
        assert_eq!(unsafe { brt_domain_from_toml(text.as_ptr(), &mut d) }, BrtStatus::Ok);
        assert_eq!(unsafe { brt_domain_dim(d) }, 2);
        assert_eq!(unsafe { brt_domain_facet_count(d) }, 4);
        unsafe { brt_domain_free(d) };

        let bad = std::ffi::CString::new("dim = 7").unwrap();
        assert_eq!(unsafe { brt_domain_from_toml(bad.as_ptr(), &mut d) }, BrtStatus::Geometry);
    }

    #[test]
    fn operator_adjoint_matches() {
        let d = square(&[0, 2, 3]);
        let mut op = ptr::null_mut();
        let s = unsafe { brt_operator_new(d, [12usize, 12].as_ptr(), 12.0, 8, 1, 2, 0.3, &mut op) };
        assert_eq!(s, BrtStatus::Ok, "{}", last_error());
        let (mut n_in, mut n_out) = (0, 0);
        assert_eq!(unsafe { brt_operator_shape(op, &mut n_in, &mut n_out) }, BrtStatus::Ok);
        assert_eq!(n_in, 144);
        assert!(n_out > 0);

        let f: Vec<f64> = (0..n_in).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let g: Vec<f64> = (0..n_out).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
        let mut af = vec![0.0; n_out];
        let mut atg = vec![0.0; n_in];
        let mut nf = vec![0.0; n_in];
        unsafe {
            assert_eq!(brt_operator_forward(op, f.as_ptr(), n_in, af.as_mut_ptr(), n_out), BrtStatus::Ok);
            assert_eq!(brt_operator_adjoint(op, g.as_ptr(), n_out, atg.as_mut_ptr(), n_in), BrtStatus::Ok);
            assert_eq!(brt_operator_normal(op, f.as_ptr(), n_in, nf.as_mut_ptr(), n_in), BrtStatus::Ok);
        }
        let inner = unsafe { &(*op).inner };
        let lhs = inner.out_dot(&af, &g);
        let rhs = inner.in_dot(&f, &atg);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        // <A*A f, f> = |A f|^2
        assert!((inner.in_dot(&nf, &f) - inner.out_dot(&af, &af)).abs() <= 1e-10 * inner.out_dot(&af, &af));

        let mut short = vec![0.0; 3];
        let s = unsafe { brt_operator_forward(op, f.as_ptr(), n_in, short.as_mut_ptr(), 3) };
        assert_eq!(s, BrtStatus::BufferTooSmall);
        let s = unsafe { brt_operator_forward(op, f.as_ptr(), 5, af.as_mut_ptr(), n_out) };
        assert_eq!(s, BrtStatus::InvalidArgument);
        unsafe {
            brt_operator_free(op);
            brt_domain_free(d);
        }
    }

    #[test]
    fn panics_are_contained() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, BrtStatus::Panic);
        assert_eq!(last_error(), "boom");
    }

    #[test]
    fn null_handles_are_harmless() {
        unsafe {
            brt_domain_free(ptr::null_mut());
            brt_operator_free(ptr::null_mut());
            assert_eq!(brt_domain_dim(ptr::null()), 0);
        }
    }
}
