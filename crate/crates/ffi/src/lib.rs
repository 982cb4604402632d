//! C ABI over the allocator models and the collision analytics.
//!
//! Every function returns a [`CtStatus`] and writes results through out
//! pointers. Handles are opaque and must be released with
//! [`ct_model_free`]. Panics never cross the boundary; they surface as
//! [`CtStatus::Internal`].

use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use clustertag::metrics::{
    cluster_spatial_model, geometric_entropy, monte_carlo_temporal, MonteCarloConfig,
    TemporalStrategy,
};
use clustertag::{
    build_model, AccessCheck, AllocError, AllocatorModel, ModelKind, RunConfig, SimRng,
    TaggedAddress,
};
use rand::SeedableRng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    /// Allocation request the layout cannot serve.
    OutOfRange = 3,
    DoubleFree = 4,
    InvalidFree = 5,
    TagMismatch = 6,
    DomainError = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtModelKind {
    ClusterTag = 0,
    Random = 1,
    RandomHeader = 2,
    Staggered = 3,
    FixedTemporal = 4,
    Sticky = 5,
}

impl From<CtModelKind> for ModelKind {
    fn from(k: CtModelKind) -> Self {
        match k {
            CtModelKind::ClusterTag => ModelKind::ClusterTag,
            CtModelKind::Random => ModelKind::Random,
            CtModelKind::RandomHeader => ModelKind::RandomHeader,
            CtModelKind::Staggered => ModelKind::Staggered,
            CtModelKind::FixedTemporal => ModelKind::FixedTemporal,
            CtModelKind::Sticky => ModelKind::Sticky,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtTemporalStrategy {
    CircularShift = 0,
    Random = 1,
}

/// Tunables for [`ct_model_new`]. Start from [`ct_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CtConfig {
    pub density: u32,
    pub quarantine: u32,
    pub tag_bits: u32,
    pub cache_capacity: u32,
    pub scan_period: u64,
    pub page_threshold: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CtAccess {
    /// Nonzero when the key did not match a lock.
    pub violation: u8,
    pub granule: u64,
    pub key: u8,
    pub lock: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CtSpatialModel {
    pub min_chunks: u64,
    pub avg_chunks: u64,
    pub entropy_bound_bits: f64,
}

/// Summary of a distance sample. `min`, `avg` and `p25` are meaningful only
/// when `samples > 0`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CtDistanceStats {
    pub samples: u64,
    pub min: u64,
    pub avg: f64,
    pub p25: u64,
    pub entropy_bits: f64,
}

/// Opaque allocator handle.
pub struct CtModel {
    inner: Box<dyn AllocatorModel + Send>,
}

fn guard(f: impl FnOnce() -> CtStatus) -> CtStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(CtStatus::Internal)
}

fn alloc_status(e: &AllocError) -> CtStatus {
    match e {
        AllocError::DoubleFree(_) => CtStatus::DoubleFree,
        AllocError::InvalidFree(_) => CtStatus::InvalidFree,
        AllocError::TagMismatch { .. } => CtStatus::TagMismatch,
        AllocError::Layout(_) => CtStatus::OutOfRange,
        AllocError::Address(_) => CtStatus::Internal,
    }
}

fn run_config(config: &CtConfig) -> RunConfig {
    RunConfig {
        density: config.density,
        quarantine: config.quarantine as usize,
        tag_bits: config.tag_bits,
        cache_capacity: config.cache_capacity as usize,
        scan_period: config.scan_period,
        page_threshold: config.page_threshold,
        ..RunConfig::default()
    }
}

#[no_mangle]
pub extern "C" fn ct_config_default() -> CtConfig {
    let d = RunConfig::default();
    CtConfig {
        density: d.density,
        quarantine: d.quarantine as u32,
        tag_bits: d.tag_bits,
        cache_capacity: d.cache_capacity as u32,
        scan_period: d.scan_period,
        page_threshold: d.page_threshold,
    }
}

/// Static, NUL-terminated description of `status`.
#[no_mangle]
pub extern "C" fn ct_status_message(status: CtStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        CtStatus::Ok => b"ok\0",
        CtStatus::NullPointer => b"null pointer argument\0",
        CtStatus::InvalidConfig => b"invalid configuration\0",
        CtStatus::OutOfRange => b"request outside the supported layout\0",
        CtStatus::DoubleFree => b"double free\0",
        CtStatus::InvalidFree => b"invalid free\0",
        CtStatus::TagMismatch => b"tag mismatch on free\0",
        CtStatus::DomainError => b"argument outside the function domain\0",
        CtStatus::Internal => b"internal error\0",
    };
    s.as_ptr().cast()
}

/// Creates a model. `config` may be null for defaults. On success `*out`
/// owns a handle for [`ct_model_free`].
///
/// # Safety
/// `config` must be null or valid for reads; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ct_model_new(
    kind: CtModelKind,
    config: *const CtConfig,
    seed: u64,
    out: *mut *mut CtModel,
) -> CtStatus {
    if out.is_null() {
        return CtStatus::NullPointer;
    }
    guard(|| {
        let cfg = if config.is_null() {
            ct_config_default()
        } else {
            *config
        };
        let mut rc = run_config(&cfg);
        rc.strategy = kind.into();
        rc.seed = seed;
        if rc.validate().is_err() {
            return CtStatus::InvalidConfig;
        }
        match build_model(kind.into(), &rc, seed) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(CtModel { inner }));
                CtStatus::Ok
            }
            Err(_) => CtStatus::InvalidConfig,
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`ct_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ct_model_free(model: *mut CtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Allocates `size` bytes; `*out_addr` receives the tagged address.
///
/// # Safety
/// `model` must be a live handle; `out_addr` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ct_malloc(model: *mut CtModel, size: u64, out_addr: *mut u64) -> CtStatus {
    if model.is_null() || out_addr.is_null() {
        return CtStatus::NullPointer;
    }
    guard(|| match (*model).inner.allocate(size) {
        Ok(addr) => {
            *out_addr = addr.raw();
            CtStatus::Ok
        }
        Err(e) => alloc_status(&e),
    })
}

/// Frees a tagged address previously returned by [`ct_malloc`].
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ct_free(model: *mut CtModel, addr: u64) -> CtStatus {
    if model.is_null() {
        return CtStatus::NullPointer;
    }
    guard(|| match (*model).inner.deallocate(TaggedAddress::new(addr)) {
        Ok(()) => CtStatus::Ok,
        Err(e) => alloc_status(&e),
    })
}

/// Compares the key of `addr` with the lock of every granule in
/// `[addr, addr + len)`.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ct_check_access(
    model: *const CtModel,
    addr: u64,
    len: u64,
    out: *mut CtAccess,
) -> CtStatus {
    if model.is_null() || out.is_null() {
        return CtStatus::NullPointer;
    }
    guard(|| {
        *out = match (*model).inner.check_access(TaggedAddress::new(addr), len) {
            AccessCheck::Ok => CtAccess::default(),
            AccessCheck::Violation { granule, key, lock } => CtAccess {
                violation: 1,
                granule,
                key,
                lock,
            },
        };
        CtStatus::Ok
    })
}

/// Entropy in bits of a geometric distribution with success `p` in (0, 1].
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ct_geometric_entropy(p: f64, out: *mut f64) -> CtStatus {
    if out.is_null() {
        return CtStatus::NullPointer;
    }
    match geometric_entropy(p) {
        Ok(h) => {
            *out = h;
            CtStatus::Ok
        }
        Err(_) => CtStatus::DomainError,
    }
}

/// Analytic spatial collision profile for cluster density `density >= 1`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ct_cluster_spatial_model(
    density: u32,
    out: *mut CtSpatialModel,
) -> CtStatus {
    if out.is_null() {
        return CtStatus::NullPointer;
    }
    if density == 0 {
        return CtStatus::DomainError;
    }
    guard(|| {
        let m = cluster_spatial_model(density);
        *out = CtSpatialModel {
            min_chunks: m.min_chunks,
            avg_chunks: m.avg_chunks,
            entropy_bound_bits: m.entropy_bound_bits,
        };
        CtStatus::Ok
    })
}

/// Temporal collision distances over `rounds` simulated reuse rounds.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ct_monte_carlo_temporal(
    strategy: CtTemporalStrategy,
    rounds: u64,
    seed: u64,
    out: *mut CtDistanceStats,
) -> CtStatus {
    if out.is_null() {
        return CtStatus::NullPointer;
    }
    guard(|| {
        let strategy = match strategy {
            CtTemporalStrategy::CircularShift => TemporalStrategy::CircularShift,
            CtTemporalStrategy::Random => TemporalStrategy::Random,
        };
        let config = MonteCarloConfig {
            rounds,
            ..MonteCarloConfig::default()
        };
        let mut rng = SimRng::seed_from_u64(seed);
        let s = monte_carlo_temporal(strategy, &config, &mut rng).stats;
        *out = CtDistanceStats {
            samples: s.samples,
            min: s.min.unwrap_or(0),
            avg: s.avg.unwrap_or(0.0),
            p25: s.p25.unwrap_or(0),
            entropy_bits: s.entropy_bits,
        };
        CtStatus::Ok
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CStr;
    use std::ptr;

    #[test]
    fn every_status_has_a_message() {
        for s in [CtStatus::Ok, CtStatus::TagMismatch, CtStatus::Internal] {
            let m = unsafe { CStr::from_ptr(ct_status_message(s)) };
            assert!(!m.to_bytes().is_empty());
        }
    }

    #[test]
    fn null_out_pointers_are_rejected() {
        unsafe {
            assert_eq!(
                ct_model_new(CtModelKind::Random, ptr::null(), 1, ptr::null_mut()),
                CtStatus::NullPointer
            );
            assert_eq!(ct_free(ptr::null_mut(), 0), CtStatus::NullPointer);
            assert_eq!(ct_geometric_entropy(0.5, ptr::null_mut()), CtStatus::NullPointer);
        }
    }

    #[test]
    fn clustertag_rejects_narrow_tags() {
        let mut cfg = ct_config_default();
        cfg.tag_bits = 4;
        let mut m = ptr::null_mut();
        let s = unsafe { ct_model_new(CtModelKind::ClusterTag, &cfg, 1, &mut m) };
        assert_eq!(s, CtStatus::InvalidConfig);
        assert!(m.is_null());
    }
}
