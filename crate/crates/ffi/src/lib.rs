//! C ABI for the hiedit pipeline.
//!
//! Every function returns an [`HieditStatus`]; on failure the message is kept in a
//! thread-local slot readable through [`hiedit_last_error`]. Objects cross the
//! boundary as opaque pointers created by `*_new`/`*_load` and released with the
//! matching `*_free`. Panics are caught and reported as `HIEDIT_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hiedit::config::PipelineConfig;
use hiedit::dataforge::build_dataset;
use hiedit::model::Model;
use hiedit::run::read_image;
use hiedit::train::{train, TrainOptions};
use hiedit::{rng, selftest, Error, Tensor};

/// Status codes; 1-3 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HieditStatus {
    HieditOk = 0,
    /// Invalid configuration, input validation or dimension mismatch.
    HieditConfig = 1,
    /// I/O failure or malformed file.
    HieditIo = 2,
    /// Invariant violated, including non-finite losses.
    HieditInvariant = 3,
    /// Null pointer or non-UTF-8 string argument.
    HieditInvalidArgument = 4,
    HieditPanic = 5,
}

/// Pipeline configuration.
pub struct HieditConfig(PipelineConfig);

/// A loaded model checkpoint.
pub struct HieditModel(Model);

/// An `[height, width, channels]` image of values in [0, 1].
pub struct HieditImage(Tensor);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HieditStatus {
    match e.exit_code() {
        1 => HieditStatus::HieditConfig,
        2 => HieditStatus::HieditIo,
        _ => HieditStatus::HieditInvariant,
    }
}

enum Fail {
    Core(Error),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HieditStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HieditStatus::HieditOk,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            HieditStatus::HieditInvalidArgument
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            HieditStatus::HieditPanic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Arg(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    text(p, what).map(PathBuf::from)
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::Arg(format!("{what} is null")))
}

unsafe fn out<T>(p: *mut *mut T, value: T) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Arg("output pointer is null".into()));
    }
    *p = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn hiedit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `out_config` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn hiedit_config_default(out_config: *mut *mut HieditConfig) -> HieditStatus {
    guard(|| out(out_config, HieditConfig(PipelineConfig::default())))
}

/// Loads a dotted-key JSON config merged over the defaults.
///
/// # Safety
/// `config_path` must be a nul-terminated string; `out_config` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hiedit_config_load(
    config_path: *const c_char,
    out_config: *mut *mut HieditConfig,
) -> HieditStatus {
    guard(|| {
        let cfg = PipelineConfig::load(&path(config_path, "config_path")?)?;
        out(out_config, HieditConfig(cfg))
    })
}

/// Applies one `key=value` override; the config is unchanged on failure.
///
/// # Safety
/// `config` must come from this library; `assignment` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn hiedit_config_set(config: *mut HieditConfig, assignment: *const c_char) -> HieditStatus {
    guard(|| {
        let a = text(assignment, "assignment")?;
        let cfg = config.as_mut().ok_or_else(|| Fail::Arg("config is null".into()))?;
        cfg.0.set(a)?;
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hiedit_config_free(config: *mut HieditConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Generates a dataset into `out_dir` and writes the effective config beside it.
///
/// # Safety
/// Pointers must be valid; strings nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn hiedit_generate_dataset(config: *const HieditConfig, out_dir: *const c_char) -> HieditStatus {
    guard(|| {
        let cfg = &obj(config, "config")?.0;
        let dir = path(out_dir, "out_dir")?;
        build_dataset(cfg, &dir)?;
        cfg.write_effective(&dir)?;
        Ok(())
    })
}

/// Trains from `data_dir` into `run_dir`; writes the last step reached to `out_step` when non-null.
///
/// # Safety
/// Pointers must be valid; strings nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn hiedit_train(
    config: *const HieditConfig,
    data_dir: *const c_char,
    run_dir: *const c_char,
    out_step: *mut u64,
) -> HieditStatus {
    guard(|| {
        let cfg = &obj(config, "config")?.0;
        let r = train(cfg, &path(data_dir, "data_dir")?, &path(run_dir, "run_dir")?, &TrainOptions::default())?;
        if !out_step.is_null() {
            *out_step = r.last_step;
        }
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid; strings nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn hiedit_model_load(
    config: *const HieditConfig,
    checkpoint_dir: *const c_char,
    out_model: *mut *mut HieditModel,
) -> HieditStatus {
    guard(|| {
        let cfg = &obj(config, "config")?.0;
        let m = Model::load(cfg, &path(checkpoint_dir, "checkpoint_dir")?)?;
        out(out_model, HieditModel(m))
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hiedit_model_free(model: *mut HieditModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Copies `height * width * channels` row-major values into a new image.
///
/// # Safety
/// `data` must point to that many readable doubles.
#[no_mangle]
pub unsafe extern "C" fn hiedit_image_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    out_image: *mut *mut HieditImage,
) -> HieditStatus {
    guard(|| {
        if data.is_null() {
            return Err(Fail::Arg("data is null".into()));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Fail::Arg("image size overflows".into()))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        out(out_image, HieditImage(Tensor::new(&[height, width, channels], values)?))
    })
}

/// Reads an RBT1 tensor file or a binary PPM (`.ppm`).
///
/// # Safety
/// `image_path` must be nul-terminated; `out_image` writable.
#[no_mangle]
pub unsafe extern "C" fn hiedit_image_load(image_path: *const c_char, out_image: *mut *mut HieditImage) -> HieditStatus {
    guard(|| {
        let img = read_image(&path(image_path, "image_path")?)?;
        out(out_image, HieditImage(img))
    })
}

/// # Safety
/// `image` must come from this library; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn hiedit_image_shape(
    image: *const HieditImage,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> HieditStatus {
    guard(|| {
        let img = &obj(image, "image")?.0;
        if height.is_null() || width.is_null() || channels.is_null() {
            return Err(Fail::Arg("shape output pointer is null".into()));
        }
        let s = img.shape();
        (*height, *width, *channels) = (s[0], s[1], s[2]);
        Ok(())
    })
}

/// Row-major pixel values owned by `image`; valid until it is freed. Null for a null image.
///
/// # Safety
/// `image` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn hiedit_image_data(image: *const HieditImage) -> *const f64 {
    image.as_ref().map_or(ptr::null(), |i| i.0.data().as_ptr())
}

/// # Safety
/// `image` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hiedit_image_free(image: *mut HieditImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Edits `source` under `instruction`; the sampler stream is derived from `seed`.
///
/// # Safety
/// Pointers must be valid; `instruction` nul-terminated; `out_image` writable.
#[no_mangle]
pub unsafe extern "C" fn hiedit_model_edit(
    model: *const HieditModel,
    source: *const HieditImage,
    instruction: *const c_char,
    seed: u64,
    out_image: *mut *mut HieditImage,
) -> HieditStatus {
    guard(|| {
        let m = &obj(model, "model")?.0;
        let src = &obj(source, "source")?.0;
        hiedit::encoders::validate_image(src, &m.cfg)?;
        let r = m.edit(src, text(instruction, "instruction")?, &mut rng::stream(seed, rng::SAMPLER, 0))?;
        out(out_image, HieditImage(r.image))
    })
}

/// Runs the gradient audit over `seeds` seeds; the worst relative error goes to `out_worst`.
/// Returns `HIEDIT_INVARIANT` if any check exceeds the tolerance.
///
/// # Safety
/// `out_worst` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn hiedit_selftest(seeds: u32, out_worst: *mut f64) -> HieditStatus {
    guard(|| {
        let list: Vec<u64> = (0..seeds as u64).collect();
        let rep = selftest::run(&list)?;
        if !out_worst.is_null() {
            *out_worst = rep.worst();
        }
        if !rep.passed() {
            return Err(Error::Invariant(format!("gradient audit exceeded {:e}", selftest::TOLERANCE)).into());
        }
        Ok(())
    })
}
