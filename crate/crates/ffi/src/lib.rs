//! C ABI over the core library. Objects cross the boundary as opaque
//! handles that the caller frees with the matching `*_free`; every fallible
//! call returns a `PivStatus` and leaves a message readable through
//! `piv_last_error`.
//!
//! Handles are not thread-safe to share, but distinct handles may be used
//! from distinct threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pivflow::config::{parse_config, parse_regularizer};
use pivflow::descriptor::{evaluate_scaled, DescriptorLayout, ParticleIndex, Workspace};
use pivflow::error::Error;
use pivflow::eval::match_particles;
use pivflow::flow::{render_volume, solve_flow_grid, DataTerm, FlowField, FlowInput, SolverConfig};
use pivflow::geometry::{Domain, Particle, ParticleSet, Vec3};
use pivflow::io;
use pivflow::pipeline::run_pipeline;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PivStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    InvalidArgument = 2,
    /// Malformed or unknown configuration key.
    Config = 3,
    Numeric = 4,
    Io = 5,
    /// The library panicked; the handle arguments should be considered lost.
    Internal = 6,
}

pub const PIV_DATA_SPARSE_SSD: i32 = 0;
pub const PIV_DATA_SPARSE_NCC: i32 = 1;
pub const PIV_DATA_DENSE_SSD: i32 = 2;

pub const PIV_REG_QR: i32 = 0;
pub const PIV_REG_QRD_INF: i32 = 1;
pub const PIV_REG_QRD_ALPHA: i32 = 2;

/// Particle positions (voxels) and intensities.
pub struct PivParticles(ParticleSet);

/// Displacement vectors on a strided grid, x fastest.
pub struct PivFlow(FlowField);

/// Solver settings. Fill with `piv_flow_options_default` and change fields.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PivFlowOptions {
    /// One of `PIV_DATA_*`.
    pub data: i32,
    /// One of `PIV_REG_*`.
    pub regularizer: i32,
    /// Only read for `PIV_REG_QRD_ALPHA`.
    pub alpha: f64,
    pub lambda: f64,
    pub stride: usize,
    pub pyramid_levels: usize,
    pub pyramid_factor: f64,
    pub warps_per_level: usize,
    pub inner_iterations: usize,
    /// Dense window side (odd); only read for `PIV_DATA_DENSE_SSD`.
    pub window: usize,
    /// Blob width for rendering volumes in the dense path.
    pub sigma: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PivReconStats {
    pub truth_count: usize,
    pub reconstructed_count: usize,
    pub undetected: usize,
    pub undetected_fraction: f64,
    pub ghosts: usize,
    pub ghost_fraction: f64,
    pub avg_position_error: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PivStatus {
    match e {
        Error::Parse { .. } | Error::UnknownKey { .. } => PivStatus::Config,
        Error::InvalidArgument(_) => PivStatus::InvalidArgument,
        Error::NonFinite(_)
        | Error::NoIntersection
        | Error::DimensionMismatch(_)
        | Error::IndexOutOfRange { .. } => PivStatus::Numeric,
        Error::Io { .. } | Error::Format { .. } => PivStatus::Io,
        Error::Stage { source, .. } => status_of(source),
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (PivStatus, String)>) -> PivStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PivStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            PivStatus::Internal
        }
    }
}

fn core(e: Error) -> (PivStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PivStatus, String) {
    (PivStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (PivStatus, String) {
    (PivStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (PivStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn piv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build a particle set from `n` rows of `x, y, z, intensity`.
///
/// # Safety
/// `rows` must point to `4 * n` doubles (may be null when `n == 0`); `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn piv_particles_new(
    rows: *const f64,
    n: usize,
    out: *mut *mut PivParticles,
) -> PivStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if rows.is_null() && n > 0 {
            return Err(null("rows"));
        }
        let data = if n == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(rows, 4 * n)
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("particle rows contain non-finite values"));
        }
        let particles = data
            .chunks_exact(4)
            .map(|r| Particle::new(Vec3::new(r[0], r[1], r[2]), r[3]))
            .collect();
        *out = Box::into_raw(Box::new(PivParticles(ParticleSet::new(particles, 0))));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piv_particles_read_csv(
    path: *const c_char,
    out: *mut *mut PivParticles,
) -> PivStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let set = io::read_particles(&path, 0).map_err(core)?;
        *out = Box::into_raw(Box::new(PivParticles(set)));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn piv_particles_len(h: *const PivParticles) -> usize {
    h.as_ref().map_or(0, |p| p.0.len())
}

/// Copy particle `i` into `row` as `x, y, z, intensity`.
///
/// # Safety
/// `h` must be a live handle and `row` must hold 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn piv_particles_get(
    h: *const PivParticles,
    i: usize,
    row: *mut f64,
) -> PivStatus {
    guard(|| {
        let p = h.as_ref().ok_or_else(|| null("particles"))?;
        if row.is_null() {
            return Err(null("row"));
        }
        let q =
            p.0.particles.get(i).ok_or_else(|| {
                invalid(format!("index {i} out of range ({} particles)", p.0.len()))
            })?;
        let r = std::slice::from_raw_parts_mut(row, 4);
        r[0] = q.position.x;
        r[1] = q.position.y;
        r[2] = q.position.z;
        r[3] = q.intensity;
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn piv_particles_free(h: *mut PivParticles) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of values in one descriptor.
#[no_mangle]
pub extern "C" fn piv_descriptor_len() -> usize {
    DescriptorLayout::new().len()
}

/// Descriptor of `particles` around `center`, with all radii divided by
/// `scale` (1 for the base size).
///
/// # Safety
/// `center` must hold 3 doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn piv_descriptor_eval(
    particles: *const PivParticles,
    center: *const f64,
    scale: f64,
    out: *mut f64,
    out_len: usize,
) -> PivStatus {
    guard(|| {
        let p = particles.as_ref().ok_or_else(|| null("particles"))?;
        if center.is_null() {
            return Err(null("center"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let layout = DescriptorLayout::new();
        if out_len != layout.len() {
            return Err(invalid(format!(
                "out_len {out_len}, descriptor has {}",
                layout.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid("scale must be positive"));
        }
        let c = std::slice::from_raw_parts(center, 3);
        let out = std::slice::from_raw_parts_mut(out, out_len);
        out.fill(0.0);
        let index = ParticleIndex::new(&p.0);
        evaluate_scaled(
            &Vec3::new(c[0], c[1], c[2]),
            &index,
            &layout,
            scale,
            &mut Workspace::default(),
            out,
        );
        Ok(())
    })
}

/// Library defaults: sparse SSD data term, divergence-free regularizer.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piv_flow_options_default(out: *mut PivFlowOptions) -> PivStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let c = SolverConfig::default();
        *out = PivFlowOptions {
            data: PIV_DATA_SPARSE_SSD,
            regularizer: PIV_REG_QRD_INF,
            alpha: 1.0,
            lambda: c.lambda,
            stride: c.stride,
            pyramid_levels: c.pyramid_levels,
            pyramid_factor: c.pyramid_factor,
            warps_per_level: c.warps_per_level,
            inner_iterations: c.inner_iterations,
            window: 13,
            sigma: 1.0,
        };
        Ok(())
    })
}

/// Estimate the displacement from `t0` to `t1` inside a domain of
/// `extents` voxels.
///
/// # Safety
/// Handles must be live, `extents` must hold 3 values, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piv_flow_solve(
    t0: *const PivParticles,
    t1: *const PivParticles,
    extents: *const usize,
    options: *const PivFlowOptions,
    out: *mut *mut PivFlow,
) -> PivStatus {
    guard(|| {
        let t0 = t0.as_ref().ok_or_else(|| null("t0"))?;
        let t1 = t1.as_ref().ok_or_else(|| null("t1"))?;
        let o = options.as_ref().ok_or_else(|| null("options"))?;
        if extents.is_null() {
            return Err(null("extents"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let e = std::slice::from_raw_parts(extents, 3);
        let domain = Domain::new(e[0], e[1], e[2]).map_err(core)?;
        let data = match o.data {
            PIV_DATA_SPARSE_SSD => DataTerm::SparseSsd,
            PIV_DATA_SPARSE_NCC => DataTerm::SparseNcc,
            PIV_DATA_DENSE_SSD => DataTerm::DenseSsd { window: o.window },
            d => return Err(invalid(format!("unknown data term {d}"))),
        };
        let reg = match o.regularizer {
            PIV_REG_QR => parse_regularizer("qr", None),
            PIV_REG_QRD_INF => parse_regularizer("qrd_inf", None),
            PIV_REG_QRD_ALPHA => parse_regularizer("qrd_alpha", Some(o.alpha)),
            r => return Err(invalid(format!("unknown regularizer {r}"))),
        }
        .map_err(core)?;
        let c = SolverConfig {
            lambda: o.lambda,
            pyramid_levels: o.pyramid_levels,
            pyramid_factor: o.pyramid_factor,
            warps_per_level: o.warps_per_level,
            inner_iterations: o.inner_iterations,
            stride: o.stride,
            ..SolverConfig::new(data)
        };
        c.validate().map_err(core)?;
        let field = if data.is_sparse() {
            solve_flow_grid(
                FlowInput::Particles {
                    t0: &t0.0,
                    t1: &t1.0,
                },
                &domain,
                &c,
                &reg,
            )
        } else {
            if !(o.sigma > 0.0) {
                return Err(invalid("sigma must be positive"));
            }
            let u0 = render_volume(&t0.0, domain.extents, o.sigma);
            let u1 = render_volume(&t1.0, domain.extents, o.sigma);
            solve_flow_grid(FlowInput::Volumes { u0: &u0, u1: &u1 }, &domain, &c, &reg)
        }
        .map_err(core)?
        .0;
        *out = Box::into_raw(Box::new(PivFlow(field)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piv_flow_read(path: *const c_char, out: *mut *mut PivFlow) -> PivStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        *out = Box::into_raw(Box::new(PivFlow(io::read_flow(&path).map_err(core)?)));
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn piv_flow_write(h: *const PivFlow, path: *const c_char) -> PivStatus {
    guard(|| {
        let f = h.as_ref().ok_or_else(|| null("flow"))?;
        let path = path_arg(path, "path")?;
        io::write_flow(&path, &f.0).map_err(core)
    })
}

/// Grid size in `dims[0..3]` and the grid spacing in voxels in `stride`.
///
/// # Safety
/// `h` must be a live handle; `dims` must hold 3 values; `stride` writable.
#[no_mangle]
pub unsafe extern "C" fn piv_flow_shape(
    h: *const PivFlow,
    dims: *mut usize,
    stride: *mut usize,
) -> PivStatus {
    guard(|| {
        let f = h.as_ref().ok_or_else(|| null("flow"))?;
        if dims.is_null() || stride.is_null() {
            return Err(null("dims or stride"));
        }
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&f.0.dims);
        *stride = f.0.stride;
        Ok(())
    })
}

/// Copy the vectors as `3 * prod(dims)` doubles, x fastest.
///
/// # Safety
/// `h` must be a live handle; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn piv_flow_vectors(
    h: *const PivFlow,
    out: *mut f64,
    out_len: usize,
) -> PivStatus {
    guard(|| {
        let f = h.as_ref().ok_or_else(|| null("flow"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != 3 * f.0.len() {
            return Err(invalid(format!(
                "out_len {out_len}, field has {} values",
                3 * f.0.len()
            )));
        }
        let out = std::slice::from_raw_parts_mut(out, out_len);
        for (o, v) in out.chunks_exact_mut(3).zip(&f.0.vectors) {
            o.copy_from_slice(v.as_slice());
        }
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn piv_flow_free(h: *mut PivFlow) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Average endpoint error between two fields of equal shape.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn piv_flow_aee(
    estimated: *const PivFlow,
    truth: *const PivFlow,
    out: *mut f64,
) -> PivStatus {
    guard(|| {
        let a = estimated.as_ref().ok_or_else(|| null("estimated"))?;
        let b = truth.as_ref().ok_or_else(|| null("truth"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = pivflow::eval::aee(&a.0, &b.0).map_err(core)?;
        Ok(())
    })
}

/// Greedy one-to-one matching within `radius` voxels.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn piv_match_particles(
    reconstructed: *const PivParticles,
    truth: *const PivParticles,
    radius: f64,
    out: *mut PivReconStats,
) -> PivStatus {
    guard(|| {
        let r = reconstructed
            .as_ref()
            .ok_or_else(|| null("reconstructed"))?;
        let t = truth.as_ref().ok_or_else(|| null("truth"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if !(radius > 0.0) {
            return Err(invalid("radius must be positive"));
        }
        let s = match_particles(&r.0, &t.0, radius);
        *out = PivReconStats {
            truth_count: s.truth_count,
            reconstructed_count: s.reconstructed_count,
            undetected: s.undetected,
            undetected_fraction: s.undetected_fraction,
            ghosts: s.ghosts,
            ghost_fraction: s.ghost_fraction,
            avg_position_error: s.avg_position_error,
        };
        Ok(())
    })
}

/// Run every stage for the config file at `config_path`. On success
/// `*summary_json` (if `summary_json` is not null) receives the summary,
/// to be released with `piv_string_free`.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `summary_json` null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn piv_run_pipeline(
    config_path: *const c_char,
    summary_json: *mut *mut c_char,
) -> PivStatus {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        let config = parse_config(&path).map_err(core)?;
        let summary = run_pipeline(&config).map_err(core)?;
        if !summary_json.is_null() {
            let text = serde_json::to_string(&summary).expect("summary serializes");
            *summary_json = CString::new(text).expect("json has no nul").into_raw();
        }
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not freed before.
#[no_mangle]
pub unsafe extern "C" fn piv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
