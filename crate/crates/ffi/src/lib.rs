//! C ABI over the policy lab.
//!
//! Every function returns a [`MixStatus`]; on failure the message is available
//! from [`mix_last_error`] on the same thread until the next failing call.
//! Policies are opaque [`MixPolicy`] handles released with [`mix_policy_free`].
//! Panics never cross the boundary; they surface as [`MixStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mixlab::backbones::SceneSpec;
use mixlab::experiment::checkpoint::{load_checkpoint, save_checkpoint};
use mixlab::experiment::runner::{run_experiment, write_outputs};
use mixlab::experiment::{ExperimentConfig, Format};
use mixlab::fusion::FusionSchemeId;
use mixlab::policy::{Arch, GeoInput, Policy, PolicyConfig};
use mixlab::threedmix::{self, ThreeDMixParams};
use mixlab::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    Checkpoint = 6,
    SchemeContract = 7,
    Numeric = 8,
    Panic = 9,
}

/// Opaque policy handle.
pub struct MixPolicy {
    inner: Policy,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MixStatus {
    match e {
        Error::Shape { .. } | Error::Capacity { .. } | Error::EmptySequence(_) => MixStatus::Shape,
        Error::Config(_)
        | Error::UnknownScheme { .. }
        | Error::UnknownParam(_)
        | Error::Parse { .. }
        | Error::Protocol(_) => MixStatus::Config,
        Error::Io(_) => MixStatus::Io,
        Error::CheckpointVersion(_)
        | Error::CheckpointManifest(_)
        | Error::CheckpointTruncated { .. }
        | Error::Json(_) => MixStatus::Checkpoint,
        Error::SchemeContract(_) => MixStatus::SchemeContract,
        Error::NonFinite(_) | Error::Diverged { .. } | Error::Domain(_) => MixStatus::Numeric,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MixStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MixStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            MixStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            MixStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MixStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(
    p: *mut T,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn policy_ref<'a>(p: *const MixPolicy) -> Result<&'a MixPolicy, Fail> {
    p.as_ref().ok_or(Fail::Null("policy"))
}

unsafe fn emit(out: *mut *mut MixPolicy, policy: Policy) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(MixPolicy { inner: policy }));
    Ok(())
}

/// Message of the last failure on this thread, or null. Valid until the next failure.
#[no_mangle]
pub extern "C" fn mix_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mix_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fresh policy with default sizes.
///
/// # Safety
/// `scheme` and `arch` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mix_policy_new(
    scheme: *const c_char,
    arch: *const c_char,
    seed: u64,
    out: *mut *mut MixPolicy,
) -> MixStatus {
    guard(|| {
        let scheme: FusionSchemeId = str_arg(scheme, "scheme")?.parse()?;
        let arch: Arch = str_arg(arch, "arch")?.parse()?;
        let cfg = PolicyConfig {
            scheme,
            arch,
            ..Default::default()
        };
        emit(out, Policy::new(cfg, seed)?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mix_policy_load(
    path: *const c_char,
    out: *mut *mut MixPolicy,
) -> MixStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        emit(out, load_checkpoint(&p)?)
    })
}

/// # Safety
/// `policy` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mix_policy_save(
    policy: *const MixPolicy,
    path: *const c_char,
) -> MixStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        save_checkpoint(&p.inner, &path)?;
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `policy` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mix_policy_free(policy: *mut MixPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Action chunk dimensions `(horizon, action_dim)`.
///
/// # Safety
/// `policy` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mix_policy_chunk_dims(
    policy: *const MixPolicy,
    horizon: *mut usize,
    action_dim: *mut usize,
) -> MixStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        if horizon.is_null() || action_dim.is_null() {
            return Err(Fail::Null("dimension output"));
        }
        let [_, t, d] = p.inner.chunk_shape(1);
        *horizon = t;
        *action_dim = d;
        Ok(())
    })
}

/// Sample one action chunk for a single scene.
///
/// `positions` holds `n_objects × 3` coordinates in the unit cube, `labels`
/// one label per object, `target` indexes the instructed object. `noise` and
/// `out` hold `horizon × action_dim` values.
///
/// # Safety
/// Every pointer must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn mix_policy_act(
    policy: *const MixPolicy,
    positions: *const f64,
    labels: *const u32,
    n_objects: usize,
    target: usize,
    noise: *const f64,
    out: *mut f64,
    out_len: usize,
) -> MixStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        let pos = slice_arg(positions, n_objects * 3, "positions")?;
        let labels = slice_arg(labels, n_objects, "labels")?;
        let [_, t, d] = p.inner.chunk_shape(1);
        if out_len != t * d {
            return Err(Fail::Arg(format!(
                "out_len {out_len} differs from chunk size {}",
                t * d
            )));
        }
        let noise = slice_arg(noise, t * d, "noise")?;
        let out = slice_mut_arg(out, out_len, "out")?;
        let scene = SceneSpec {
            object_positions: pos.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            object_ids: labels.iter().map(|&l| l as usize).collect(),
            instruction_id: target,
        };
        let noise = Tensor::new(vec![1, t, d], noise.to_vec())?;
        let geo = if p.inner.bundle.hooks.inference_geo_required {
            GeoInput::Encode
        } else {
            GeoInput::Absent
        };
        let a = p.inner.sample_actions(&[scene], &noise, geo)?;
        out.copy_from_slice(a.data());
        Ok(())
    })
}

/// Gated fusion of semantic states with projected geometric tokens.
///
/// Shapes: `h [b, l, d]`, `f_geo [b, n, d]`, `w_gate [2d, d]`, `w_s, w_g [d, d]`.
/// Writes the conditioning sequence `[b, l + n, d]` and, if `gate_out` is not
/// null, the gate `[b, n, d]`.
///
/// # Safety
/// Every non-null pointer must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn mix_gate_and_fuse(
    h: *const f64,
    f_geo: *const f64,
    b: usize,
    l: usize,
    n: usize,
    d: usize,
    w_gate: *const f64,
    w_s: *const f64,
    w_g: *const f64,
    cond_out: *mut f64,
    gate_out: *mut f64,
) -> MixStatus {
    guard(|| {
        let t = |p: *const f64, shape: Vec<usize>, what: &'static str| -> Result<Tensor, Fail> {
            let len = shape.iter().product();
            Ok(Tensor::new(shape, slice_arg(p, len, what)?.to_vec())?)
        };
        let h = t(h, vec![b, l, d], "h")?;
        let f = t(f_geo, vec![b, n, d], "f_geo")?;
        let params = ThreeDMixParams {
            w_proj: Tensor::identity(d),
            w_gate: t(w_gate, vec![2 * d, d], "w_gate")?,
            w_s: t(w_s, vec![d, d], "w_s")?,
            w_g: t(w_g, vec![d, d], "w_g")?,
        };
        let (gate, fused) = threedmix::gate_and_fuse(&h, &f, &params)?;
        let cond = threedmix::build_conditioning(&h, &fused)?;
        slice_mut_arg(cond_out, b * (l + n) * d, "cond_out")?.copy_from_slice(cond.tokens.data());
        if !gate_out.is_null() {
            slice_mut_arg(gate_out, b * n * d, "gate_out")?.copy_from_slice(gate.values.data());
        }
        Ok(())
    })
}

/// Train and evaluate one configuration from `key = value` text and write the
/// run directory and report under `out_dir`.
///
/// # Safety
/// `config_text` and `out_dir` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mix_run_experiment(
    config_text: *const c_char,
    out_dir: *const c_char,
) -> MixStatus {
    guard(|| {
        let cfg = ExperimentConfig::parse(str_arg(config_text, "config_text")?)?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let out = run_experiment(&cfg, cfg.scheme.display_name())?;
        write_outputs(&dir, &[out], Format::Markdown)?;
        Ok(())
    })
}
