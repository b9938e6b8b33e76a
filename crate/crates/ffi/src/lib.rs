//! C ABI for the platoon engine.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_build`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`PlatoonStatus`]; on failure a message is available from
//! [`platoon_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use platoon_core::config::Config;
use platoon_core::safeset::{build_safe_set, SafeSet, SafeSetCache};
use platoon_core::sim::{self, RunOutput};
use platoon_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlatoonStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Runtime = 4,
    Panic = 5,
}

/// Experiment configuration.
pub struct PlatoonConfig {
    inner: Config,
}

/// Safe set for one predecessor speed.
pub struct PlatoonSafeSet {
    inner: SafeSet,
}

/// Result of a closed-loop simulation.
pub struct PlatoonSimLog {
    inner: RunOutput,
}

/// Run-level safety figures.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PlatoonSummary {
    pub min_headway: f64,
    pub max_slack: f64,
    pub max_kkt_residual: f64,
    pub fallbacks: usize,
    pub violations: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PlatoonStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) => PlatoonStatus::Config,
            _ => PlatoonStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PlatoonStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Failure {
    Failure(PlatoonStatus::InvalidArgument, msg)
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PlatoonStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PlatoonStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PlatoonStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn platoon_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn platoon_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Nominal configuration.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn platoon_config_default(out: *mut *mut PlatoonConfig) -> PlatoonStatus {
    guard(|| put(out, PlatoonConfig { inner: Config::default() }))
}

/// Parses a TOML document.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn platoon_config_from_toml(toml: *const c_char, out: *mut *mut PlatoonConfig) -> PlatoonStatus {
    guard(|| {
        let text = c_str(toml, "toml")?;
        let inner = Config::from_toml_str(text)?;
        put(out, PlatoonConfig { inner })
    })
}

/// Sets the trust horizon `F`.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn platoon_config_set_trust(config: *mut PlatoonConfig, trust: usize) -> PlatoonStatus {
    guard(|| {
        let cfg = borrow_mut(config, "config")?;
        let mut next = cfg.inner.clone();
        next.mpc.trust = trust;
        next.validate()?;
        cfg.inner = next;
        Ok(())
    })
}

/// SHA-256 of the canonical configuration, written as 64 hex digits plus a
/// NUL into `buf`, which must hold at least 65 bytes.
///
/// # Safety
/// `config` must be a live handle and `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn platoon_config_hash(config: *const PlatoonConfig, buf: *mut c_char, len: usize) -> PlatoonStatus {
    guard(|| {
        let cfg = borrow(config, "config")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let hash = cfg.inner.hash();
        if len < hash.len() + 1 {
            return Err(invalid(format!("buffer of {len} bytes is too small")));
        }
        std::ptr::copy_nonoverlapping(hash.as_ptr().cast::<c_char>(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `config` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn platoon_config_free(config: *mut PlatoonConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Builds the safe set for predecessor speed `v0` under the braking
/// assumptions of `config`.
///
/// # Safety
/// `config` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn platoon_safe_set_build(config: *const PlatoonConfig, v0: f64, out: *mut *mut PlatoonSafeSet) -> PlatoonStatus {
    guard(|| {
        let cfg = &borrow(config, "config")?.inner;
        if !(cfg.mpc.v_min..=cfg.mpc.v_max).contains(&v0) {
            return Err(invalid(format!("v0 = {v0} outside [{}, {}]", cfg.mpc.v_min, cfg.mpc.v_max)));
        }
        let spec = cfg.braking_spec();
        spec.validate()?;
        put(out, PlatoonSafeSet { inner: build_safe_set(v0, &spec) })
    })
}

/// Number of boundary vertices.
///
/// # Safety
/// `set` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn platoon_safe_set_vertex_count(set: *const PlatoonSafeSet) -> usize {
    set.as_ref().map_or(0, |s| s.inner.boundary().len())
}

/// Boundary vertex `index` as `(v, h)`.
///
/// # Safety
/// `set` must be a live handle; `v` and `h` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn platoon_safe_set_vertex(set: *const PlatoonSafeSet, index: usize, v: *mut f64, h: *mut f64) -> PlatoonStatus {
    guard(|| {
        let b = borrow(set, "set")?.inner.boundary();
        let &(bv, bh) = b.get(index).ok_or_else(|| invalid(format!("vertex {index} of {}", b.len())))?;
        *borrow_mut(v, "v")? = bv;
        *borrow_mut(h, "h")? = bh;
        Ok(())
    })
}

/// Halfspace membership of the follower state `(h, v)`.
///
/// # Safety
/// `set` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn platoon_safe_set_contains(set: *const PlatoonSafeSet, h: f64, v: f64, out: *mut bool) -> PlatoonStatus {
    guard(|| {
        let s = borrow(set, "set")?;
        *borrow_mut(out, "out")? = s.inner.contains(h, v);
        Ok(())
    })
}

/// # Safety
/// `set` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn platoon_safe_set_free(set: *mut PlatoonSafeSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Runs the closed-loop scenario of `config`.
///
/// # Safety
/// `config` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn platoon_simulate(config: *const PlatoonConfig, out: *mut *mut PlatoonSimLog) -> PlatoonStatus {
    guard(|| {
        let cfg = &borrow(config, "config")?.inner;
        let cache = SafeSetCache::build(cfg.braking_spec(), cfg.mpc.v_min)?;
        let inner = sim::run(cfg, &cache)?;
        put(out, PlatoonSimLog { inner })
    })
}

/// Number of recorded steps.
///
/// # Safety
/// `log` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn platoon_sim_log_steps(log: *const PlatoonSimLog) -> usize {
    log.as_ref().map_or(0, |l| l.inner.log.steps())
}

/// Number of vehicles.
///
/// # Safety
/// `log` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn platoon_sim_log_vehicles(log: *const PlatoonSimLog) -> usize {
    log.as_ref().map_or(0, |l| l.inner.log.vehicles)
}

/// Position, velocity and applied torque of `vehicle` at `step`.
///
/// # Safety
/// `log` must be a live handle; `p`, `v` and `u` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn platoon_sim_log_state(
    log: *const PlatoonSimLog,
    step: usize,
    vehicle: usize,
    p: *mut f64,
    v: *mut f64,
    u: *mut f64,
) -> PlatoonStatus {
    guard(|| {
        let l = &borrow(log, "log")?.inner.log;
        if vehicle >= l.vehicles || step >= l.steps() {
            return Err(invalid(format!("step {step}, vehicle {vehicle} outside {} x {}", l.steps(), l.vehicles)));
        }
        let row = &l.rows[step * l.vehicles + vehicle];
        *borrow_mut(p, "p")? = row.p;
        *borrow_mut(v, "v")? = row.v;
        *borrow_mut(u, "u")? = row.u;
        Ok(())
    })
}

/// Vehicles per hour past position `ell`.
///
/// # Safety
/// `log` must be a live handle and `vph` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn platoon_sim_log_throughput(log: *const PlatoonSimLog, ell: f64, vph: *mut f64) -> PlatoonStatus {
    guard(|| {
        let l = &borrow(log, "log")?.inner.log;
        let tp = sim::measure_throughput(l, ell)?;
        *borrow_mut(vph, "vph")? = tp.vph;
        Ok(())
    })
}

/// # Safety
/// `log` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn platoon_sim_log_summary(log: *const PlatoonSimLog, out: *mut PlatoonSummary) -> PlatoonStatus {
    guard(|| {
        let d = &borrow(log, "log")?.inner.diagnostics;
        *borrow_mut(out, "out")? = PlatoonSummary {
            min_headway: d.min_headway,
            max_slack: d.max_slack,
            max_kkt_residual: d.max_kkt_residual,
            fallbacks: d.fallbacks,
            violations: d.violations.len(),
        };
        Ok(())
    })
}

/// Writes the trajectory CSV to `path`.
///
/// # Safety
/// `log` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn platoon_sim_log_write_csv(log: *const PlatoonSimLog, path: *const c_char) -> PlatoonStatus {
    guard(|| {
        let l = &borrow(log, "log")?.inner.log;
        let path = Path::new(c_str(path, "path")?);
        let file = std::fs::File::create(path).map_err(Error::from)?;
        l.write_csv(std::io::BufWriter::new(file))?;
        Ok(())
    })
}

/// # Safety
/// `log` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn platoon_sim_log_free(log: *mut PlatoonSimLog) {
    if !log.is_null() {
        drop(Box::from_raw(log));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_status_codes() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, PlatoonStatus::Panic);
        let msg = unsafe { CStr::from_ptr(platoon_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "panic: boom");
    }

    #[test]
    fn errors_map_to_codes() {
        assert_eq!(guard(|| Err(Error::Config("x".into()).into())), PlatoonStatus::Config);
        assert_eq!(guard(|| Err(Error::NoCrossing { vehicle: 1, ell: 30.0 }.into())), PlatoonStatus::Runtime);
    }
}
