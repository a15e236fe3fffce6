//! C ABI over `advpatch`.
//!
//! Images cross the boundary as contiguous `float` buffers in CHW order with
//! values in `[-1, 1]`. Every function returns an [`AdvStatus`]; on failure the
//! message is available from [`adv_last_error_message`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use advpatch::composer::{compose, make_mask};
use advpatch::embedders::{load_embedder, register_embedder, Arch, EmbedderHandle, Embedding, ModelSpec, Role};
use advpatch::evalkit::{attack_success_rate, average_precision};
use advpatch::data::AttackMode;
use advpatch::objectives::{cosine, total_loss, LossWeights};
use advpatch::patchgen::Attacker;
use advpatch::Error;
use candle_core::{Device, Tensor};

/// Result codes. `ADV_STATUS_OK` is zero; everything else is a failure.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Shape = 5,
    WeightsLoad = 6,
    MissingTarget = 7,
    RoleViolation = 8,
    Placement = 9,
    UndefinedQuery = 10,
    Dependency = 11,
    BufferTooSmall = 12,
    Panic = 13,
    Internal = 14,
}

/// Which side of the white-box / black-box split an embedder plays.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvRole {
    TargetWhitebox = 0,
    AuxiliaryBlackbox = 1,
}

/// Opaque frozen embedder.
pub struct AdvEmbedder {
    inner: EmbedderHandle,
}

/// Opaque trained patch generator together with its encoder.
pub struct AdvAttacker {
    inner: Attacker,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AdvStatus {
    match e {
        Error::Config { .. } | Error::Path(_) => AdvStatus::Config,
        Error::Io(_) | Error::Decode { .. } | Error::Image(_) | Error::Csv(_) | Error::Json(_) => AdvStatus::Io,
        Error::Shape(_) | Error::Rank { .. } => AdvStatus::Shape,
        Error::WeightsLoad { .. } | Error::Registry(_) => AdvStatus::WeightsLoad,
        Error::MissingTarget => AdvStatus::MissingTarget,
        Error::RoleViolation(_) => AdvStatus::RoleViolation,
        Error::Placement(_) => AdvStatus::Placement,
        Error::UndefinedQuery(_) | Error::EmptyTrials | Error::EmptyDataset(_) => AdvStatus::UndefinedQuery,
        Error::Dependency(_) => AdvStatus::Dependency,
        Error::InvalidArgument(_) | Error::InsufficientIdentities { .. } => AdvStatus::InvalidArgument,
        Error::Tensor(_) => AdvStatus::Internal,
    }
}

struct Fail(AdvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

impl From<candle_core::Error> for Fail {
    fn from(e: candle_core::Error) -> Self {
        Fail(AdvStatus::Internal, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AdvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AdvStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside advpatch".into());
            AdvStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AdvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AdvStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail(AdvStatus::BufferTooSmall, format!("{what} holds {len} values, {need} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    *p = v;
    Ok(())
}

unsafe fn image(p: *const f32, h: usize, w: usize, what: &str) -> Result<Tensor, Fail> {
    let data = slice(p, 3 * h * w, what)?;
    Ok(Tensor::from_slice(data, (3, h, w), &Device::Cpu)?)
}

fn copy_tensor(t: &Tensor, out: &mut [f32]) -> Result<(), Fail> {
    let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
    out.copy_from_slice(&v);
    Ok(())
}

fn role(r: AdvRole) -> Role {
    match r {
        AdvRole::TargetWhitebox => Role::TargetWhitebox,
        AdvRole::AuxiliaryBlackbox => Role::AuxiliaryBlackbox,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`). Returns the full message length in bytes,
/// excluding the terminator; 0 when there is no pending error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn adv_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            0
        }
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Load embedder weights (with their `.json` manifest) from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adv_embedder_load(path: *const c_char, r: AdvRole, out: *mut *mut AdvEmbedder) -> AdvStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        let inner = load_embedder(&p, None, role(r))?;
        write_out(out, Box::into_raw(Box::new(AdvEmbedder { inner })), "out")
    })
}

/// Build a randomly initialised embedder; `arch` is `small-cnn`,
/// `residual-50` or `osnet-like`.
///
/// # Safety
/// `arch` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adv_embedder_random(
    arch: *const c_char,
    seed: u64,
    height: usize,
    width: usize,
    r: AdvRole,
    out: *mut *mut AdvEmbedder,
) -> AdvStatus {
    guard(|| {
        let name = path_arg(arch, "arch")?;
        let arch: Arch = name.to_string_lossy().parse()?;
        let mut spec = ModelSpec::random(arch, seed);
        spec.input_size = (height, width);
        spec.role = role(r);
        let inner = register_embedder(&spec)?;
        write_out(out, Box::into_raw(Box::new(AdvEmbedder { inner })), "out")
    })
}

/// Release an embedder. Null is ignored.
///
/// # Safety
/// `handle` must come from an `adv_embedder_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn adv_embedder_free(handle: *mut AdvEmbedder) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Embedding dimension and expected input size.
///
/// # Safety
/// `handle` must be a live embedder; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn adv_embedder_info(
    handle: *const AdvEmbedder,
    dim: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> AdvStatus {
    guard(|| {
        let e = handle.as_ref().ok_or_else(|| null("handle"))?;
        let (h, w) = e.inner.input_size();
        write_out(dim, e.inner.embedding_dim, "dim")?;
        write_out(height, h, "height")?;
        write_out(width, w, "width")
    })
}

/// Embed one `3 × height × width` image into `out` (`out_len ≥ dim`).
///
/// # Safety
/// `pixels` must hold `3·height·width` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn adv_embedder_embed(
    handle: *const AdvEmbedder,
    pixels: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> AdvStatus {
    guard(|| {
        let e = handle.as_ref().ok_or_else(|| null("handle"))?;
        let x = image(pixels, height, width, "pixels")?;
        let emb = e.inner.embed(&x)?;
        out_slice(out, out_len, emb.dim(), "out")?.copy_from_slice(&emb.vector);
        Ok(())
    })
}

/// Load a generator checkpoint written by `train-generator`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adv_attacker_load(path: *const c_char, out: *mut *mut AdvAttacker) -> AdvStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        let (inner, _) = Attacker::load(&p)?;
        write_out(out, Box::into_raw(Box::new(AdvAttacker { inner })), "out")
    })
}

/// Release an attacker. Null is ignored.
///
/// # Safety
/// `handle` must come from [`adv_attacker_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn adv_attacker_free(handle: *mut AdvAttacker) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Patch size and whether a target image is required.
///
/// # Safety
/// `handle` must be a live attacker; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn adv_attacker_info(
    handle: *const AdvAttacker,
    patch_height: *mut usize,
    patch_width: *mut usize,
    targeted: *mut bool,
) -> AdvStatus {
    guard(|| {
        let a = handle.as_ref().ok_or_else(|| null("handle"))?;
        let (h, w) = a.inner.patch_size();
        write_out(patch_height, h, "patch_height")?;
        write_out(patch_width, w, "patch_width")?;
        write_out(targeted, a.inner.conditioning() == AttackMode::Targeted, "targeted")
    })
}

/// Generate a patch for one source (and, when targeted, one target) image
/// of the encoder's input size. Writes `3·ph·pw` floats to `out`.
///
/// # Safety
/// `source` (and `target` when non-null) must hold `3·height·width` floats.
#[no_mangle]
pub unsafe extern "C" fn adv_attacker_generate(
    handle: *const AdvAttacker,
    source: *const f32,
    target: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> AdvStatus {
    guard(|| {
        let a = handle.as_ref().ok_or_else(|| null("handle"))?;
        let src = image(source, height, width, "source")?;
        let tgt = if target.is_null() { None } else { Some(image(target, height, width, "target")?) };
        let patch = a.inner.generate_patch(&src, tgt.as_ref())?;
        let (ph, pw) = a.inner.patch_size();
        copy_tensor(&patch.pixels, out_slice(out, out_len, 3 * ph * pw, "out")?)
    })
}

/// Paste a `3 × ph × pw` patch into a `3 × height × width` image with its
/// top-left corner at column `x`, row `y`. `out` receives the blended image.
///
/// # Safety
/// Buffers must hold the stated number of floats.
#[no_mangle]
pub unsafe extern "C" fn adv_compose(
    source: *const f32,
    height: usize,
    width: usize,
    patch: *const f32,
    ph: usize,
    pw: usize,
    x: usize,
    y: usize,
    out: *mut f32,
    out_len: usize,
) -> AdvStatus {
    guard(|| {
        let mask = make_mask(height, width, ph, pw, x, y)?;
        let src = image(source, height, width, "source")?;
        let p = image(patch, ph, pw, "patch")?;
        let blended = compose(&src, &p, &mask)?;
        copy_tensor(&blended, out_slice(out, out_len, 3 * height * width, "out")?)
    })
}

/// Average precision of a ranked relevance list (nonzero = relevant).
///
/// # Safety
/// `relevance` must hold `n` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adv_average_precision(relevance: *const u8, n: usize, out: *mut f64) -> AdvStatus {
    guard(|| {
        let rel: Vec<bool> = slice(relevance, n, "relevance")?.iter().map(|&b| b != 0).collect();
        write_out(out, average_precision(&rel)?, "out")
    })
}

fn rows(data: &[f32], n: usize, dim: usize) -> Vec<Embedding> {
    (0..n).map(|i| Embedding::new(data[i * dim..(i + 1) * dim].to_vec(), "ffi")).collect()
}

/// Fraction of the `n` row pairs whose cosine similarity exceeds `tau`.
///
/// # Safety
/// `adversarial` and `targets` must each hold `n·dim` floats.
#[no_mangle]
pub unsafe extern "C" fn adv_attack_success_rate(
    adversarial: *const f32,
    targets: *const f32,
    n: usize,
    dim: usize,
    tau: f64,
    out: *mut f64,
) -> AdvStatus {
    guard(|| {
        let a = rows(slice(adversarial, n * dim, "adversarial")?, n, dim);
        let t = rows(slice(targets, n * dim, "targets")?, n, dim);
        write_out(out, attack_success_rate(&a, &t, tau)?, "out")
    })
}

/// Cosine similarity of two `dim`-vectors.
///
/// # Safety
/// `a` and `b` must each hold `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn adv_cosine(a: *const f32, b: *const f32, dim: usize, out: *mut f64) -> AdvStatus {
    guard(|| write_out(out, cosine(slice(a, dim, "a")?, slice(b, dim, "b")?)?, "out"))
}

/// Attack loss for one embedding triple. `target` may be null in
/// untargeted mode, where the loss is the source similarity.
///
/// # Safety
/// Non-null vectors must hold `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn adv_attack_loss(
    adversarial: *const f32,
    source: *const f32,
    target: *const f32,
    dim: usize,
    lambda_pull: f64,
    lambda_push: f64,
    tau: f64,
    out: *mut f64,
) -> AdvStatus {
    guard(|| {
        let e = |p: *const f32, w: &str| -> Result<Embedding, Fail> { Ok(Embedding::new(slice(p, dim, w)?.to_vec(), "ffi")) };
        let adv = e(adversarial, "adversarial")?;
        let src = e(source, "source")?;
        let t = if target.is_null() { None } else { Some(e(target, "target")?) };
        let mode = if t.is_some() { AttackMode::Targeted } else { AttackMode::Untargeted };
        let weights = LossWeights { lambda_pull, lambda_push, tau, mode, ..Default::default() };
        weights.validate()?;
        let loss = total_loss(&weights, &adv, &src, t.as_ref())?.total;
        write_out(out, loss, "out")
    })
}
