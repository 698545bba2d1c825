//! C ABI over the chestdiff pipeline.
//!
//! Every function returns a [`CdStatus`]; on failure the message is kept per
//! thread and can be read with [`cd_last_error`]. Pipelines are opaque
//! handles released with [`cd_pipeline_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use chestdiff::diffusion::Sampler;
use chestdiff::eval::{auroc, fit_frechet, frechet_distance};
use chestdiff::pipeline::Pipeline;
use chestdiff::Error;

/// Status codes; nonzero values match the command-line exit codes where
/// they overlap.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdStatus {
    Ok = 0,
    Config = 2,
    MissingPrerequisite = 3,
    Io = 4,
    Numeric = 5,
    NullArgument = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Loaded clip, autoencoder and denoiser checkpoints.
pub struct CdPipeline {
    inner: Pipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> CdStatus {
    match e.exit_code() {
        2 => CdStatus::Config,
        3 => CdStatus::MissingPrerequisite,
        4 => CdStatus::Io,
        _ => CdStatus::Numeric,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (CdStatus, String)>) -> CdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CdStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (CdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CdStatus, String) {
    (CdStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CdStatus::Config, format!("{what} is not valid UTF-8")))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads the three generation checkpoints from `ckpt_dir`.
///
/// # Safety
/// `ckpt_dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_pipeline_load(ckpt_dir: *const c_char, out: *mut *mut CdPipeline) -> CdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let dir = str_arg(ckpt_dir, "ckpt_dir")?;
        let inner = Pipeline::load(Path::new(dir)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CdPipeline { inner }));
        Ok(())
    })
}

/// Releases a pipeline. Null is ignored.
///
/// # Safety
/// `p` must come from [`cd_pipeline_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cd_pipeline_free(p: *mut CdPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Side length of generated images, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn cd_pipeline_image_size(p: *const CdPipeline) -> usize {
    p.as_ref().map_or(0, |p| p.inner.ae.cfg.image_size)
}

/// Generates one 8-bit grayscale image, row-major, into `pixels`.
/// `eta` = 0 is deterministic sampling.
///
/// # Safety
/// `p` must be a live handle, `report` NUL-terminated, and `pixels` must
/// point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cd_pipeline_generate(
    p: *const CdPipeline,
    report: *const c_char,
    seed: u64,
    steps: usize,
    eta: f64,
    pixels: *mut u8,
    len: usize,
) -> CdStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("pipeline"))?;
        let report = str_arg(report, "report")?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let size = p.inner.ae.cfg.image_size;
        if len < size * size {
            return Err((CdStatus::BufferTooSmall, format!("need {} bytes, got {len}", size * size)));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err((CdStatus::Config, "eta must lie in [0, 1]".into()));
        }
        let img = p
            .inner
            .generate_one(report, seed, steps, Sampler::Ddim { eta })
            .map_err(lib_err)?;
        std::ptr::copy_nonoverlapping(img.pixels.as_ptr(), pixels, img.pixels.len());
        Ok(())
    })
}

/// Area under the ROC curve with ties counted one half. `labels` holds 0 or 1.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> CdStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(null("scores, labels or out"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l: Vec<bool> = std::slice::from_raw_parts(labels, n).iter().map(|&v| v != 0).collect();
        *out = auroc(s, &l).map_err(lib_err)?;
        Ok(())
    })
}

/// Fréchet distance between Gaussians fitted to two row-major feature
/// matrices with `dim` columns.
///
/// # Safety
/// `a` must point to `na * dim` and `b` to `nb * dim` readable values; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_frechet_distance(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dim: usize,
    out: *mut f64,
) -> CdStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("a, b or out"));
        }
        if dim == 0 {
            return Err((CdStatus::Config, "dim must be positive".into()));
        }
        let rows = |p: *const f64, n: usize| -> Vec<Vec<f64>> {
            std::slice::from_raw_parts(p, n * dim).chunks(dim).map(<[f64]>::to_vec).collect()
        };
        let sa = fit_frechet(&rows(a, na)).map_err(lib_err)?;
        let sb = fit_frechet(&rows(b, nb)).map_err(lib_err)?;
        *out = frechet_distance(&sa, &sb).map_err(lib_err)?;
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
