//! C ABI over boltzgen's trained flows and potential energies.
//!
//! Every function returns a [`BgStatus`]. On failure a message is kept per
//! thread and can be read with [`bg_last_error`]. Handles are opaque and
//! must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use boltzgen::flow::{Checkpoint, FlowModel};
use boltzgen::metrics::w2_exact;
use boltzgen::{Energy, Error, PotentialSpec, Provenance, SampleSet};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Numerical = 5,
    Panic = 6,
}

/// A trained flow loaded from a checkpoint.
pub struct BgFlow {
    model: FlowModel,
}

/// A potential energy function.
pub struct BgPotential {
    spec: PotentialSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BgStatus {
    match e {
        Error::InvalidArgument(_) => BgStatus::InvalidArgument,
        Error::Io(_) => BgStatus::Io,
        Error::Parse(_) => BgStatus::Parse,
        _ => BgStatus::Numerical,
    }
}

struct Fail(BgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BgStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BgStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BgStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(BgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn points(p: *const f64, n: usize, dim: usize, what: &str) -> Result<SampleSet, Fail> {
    let flat = slice(p, n * dim, what)?;
    let pts: Vec<Vec<f64>> = flat.chunks(dim).map(<[f64]>::to_vec).collect();
    Ok(SampleSet::from_points(&pts, Provenance::Reference)?)
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a flow checkpoint (JSON) from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bg_flow_load(path: *const c_char, out: *mut *mut BgFlow) -> BgStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::read(Path::new(path))?;
        *out = Box::into_raw(Box::new(BgFlow { model: ck.model }));
        Ok(())
    })
}

/// # Safety
/// `flow` must come from [`bg_flow_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bg_flow_free(flow: *mut BgFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

/// Dimension of the flow, or 0 for a null handle.
///
/// # Safety
/// `flow` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bg_flow_dim(flow: *const BgFlow) -> usize {
    flow.as_ref().map_or(0, |f| f.model.dim())
}

/// Log density at `n` row-major points of the flow's dimension.
///
/// # Safety
/// `x` must hold `n * dim` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn bg_flow_log_prob(flow: *const BgFlow, x: *const f64, n: usize, out: *mut f64) -> BgStatus {
    guard(|| {
        let f = flow.as_ref().ok_or_else(|| null("flow"))?;
        let d = f.model.dim();
        let x = slice(x, n * d, "x")?;
        let out = slice_mut(out, n, "out")?;
        for (row, o) in x.chunks(d).zip(out.iter_mut()) {
            *o = f.model.log_prob(row)?;
        }
        Ok(())
    })
}

/// Maps `n` data-space points to the prior, writing latents and log|det|.
///
/// # Safety
/// `x` and `z` must hold `n * dim` values, `logdet` room for `n` (or null).
#[no_mangle]
pub unsafe extern "C" fn bg_flow_inverse(
    flow: *const BgFlow,
    x: *const f64,
    n: usize,
    z: *mut f64,
    logdet: *mut f64,
) -> BgStatus {
    guard(|| {
        let f = flow.as_ref().ok_or_else(|| null("flow"))?;
        let d = f.model.dim();
        let x = slice(x, n * d, "x")?;
        let z = slice_mut(z, n * d, "z")?;
        let mut ld = if logdet.is_null() { None } else { Some(slice_mut(logdet, n, "logdet")?) };
        for (i, row) in x.chunks(d).enumerate() {
            let (zi, l) = f.model.inverse(row)?;
            z[i * d..(i + 1) * d].copy_from_slice(&zi);
            if let Some(ld) = ld.as_deref_mut() {
                ld[i] = l;
            }
        }
        Ok(())
    })
}

/// Draws `n` samples (row-major) with the given seed.
///
/// # Safety
/// `out` must have room for `n * dim` values.
#[no_mangle]
pub unsafe extern "C" fn bg_flow_sample(flow: *const BgFlow, n: usize, seed: u64, out: *mut f64) -> BgStatus {
    guard(|| {
        let f = flow.as_ref().ok_or_else(|| null("flow"))?;
        let d = f.model.dim();
        let out = slice_mut(out, n * d, "out")?;
        let s = f.model.sample(n, seed)?;
        for i in 0..n {
            out[i * d..(i + 1) * d].copy_from_slice(s.point(i));
        }
        Ok(())
    })
}

/// Parses a potential from a TOML table, e.g.
/// `kind = "double_well"` plus `domain = { lower = [...], upper = [...] }`.
///
/// # Safety
/// `toml_text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bg_potential_from_toml(toml_text: *const c_char, out: *mut *mut BgPotential) -> BgStatus {
    guard(|| {
        let t = text(toml_text, "toml_text")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: PotentialSpec = toml::from_str(t).map_err(|e| Fail(BgStatus::Parse, e.to_string()))?;
        *out = Box::into_raw(Box::new(BgPotential { spec }));
        Ok(())
    })
}

/// # Safety
/// `potential` must come from [`bg_potential_from_toml`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bg_potential_free(potential: *mut BgPotential) {
    if !potential.is_null() {
        drop(Box::from_raw(potential));
    }
}

/// # Safety
/// `potential` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bg_potential_dim(potential: *const BgPotential) -> usize {
    potential.as_ref().map_or(0, |p| p.spec.dim())
}

/// Energy at one point; may be `+inf` on the collision set.
///
/// # Safety
/// `x` must hold `dim` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bg_potential_energy(potential: *const BgPotential, x: *const f64, out: *mut f64) -> BgStatus {
    guard(|| {
        let p = potential.as_ref().ok_or_else(|| null("potential"))?;
        let x = slice(x, p.spec.dim(), "x")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = p.spec.energy(x)?;
        Ok(())
    })
}

/// Gradient at one point.
///
/// # Safety
/// `x` and `grad` must hold `dim` values.
#[no_mangle]
pub unsafe extern "C" fn bg_potential_gradient(potential: *const BgPotential, x: *const f64, grad: *mut f64) -> BgStatus {
    guard(|| {
        let p = potential.as_ref().ok_or_else(|| null("potential"))?;
        let d = p.spec.dim();
        let x = slice(x, d, "x")?;
        let grad = slice_mut(grad, d, "grad")?;
        grad.copy_from_slice(&p.spec.gradient(x)?);
        Ok(())
    })
}

/// Exact-assignment W2 between two row-major point sets, each subsampled
/// to `n_sub` points.
///
/// # Safety
/// `a` must hold `na * dim` values and `b` `nb * dim`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bg_w2_exact(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dim: usize,
    n_sub: usize,
    seed: u64,
    out: *mut f64,
) -> BgStatus {
    guard(|| {
        if dim == 0 {
            return Err(Fail(BgStatus::InvalidArgument, "dim must be positive".into()));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (a, b) = (points(a, na, dim, "a")?, points(b, nb, dim, "b")?);
        *out = w2_exact(&a, &b, n_sub, seed)?.value;
        Ok(())
    })
}
