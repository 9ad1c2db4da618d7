//! C ABI over `savos_lab`.
//!
//! Every function returns a [`SavosStatus`]; on failure the message is available from
//! [`savos_last_error`] on the same thread. Videos and models are opaque handles that
//! must be released with their `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use candle_core::{DType, Device};
use savos_lab::checkpoint::Checkpoint;
use savos_lab::config::RunConfig;
use savos_lab::evalkit;
use savos_lab::grid::{Field, Mask};
use savos_lab::model::SavosModel;
use savos_lab::synthgen::{self, io as sio, GenConfig, VideoSample};
use savos_lab::trainer;
use savos_lab::warp::{self, FlowField};
use savos_lab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SavosStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Contract = 3,
    Generation = 4,
    Format = 5,
    Io = 6,
    NonFinite = 7,
    Internal = 8,
    Panic = 9,
    BufferTooSmall = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SavosMaskKind {
    Amodal = 0,
    Visible = 1,
}

/// Opaque synthetic video.
pub struct SavosVideo(VideoSample);

/// Opaque trained model.
pub struct SavosModelHandle(SavosModel);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SavosDims {
    pub frames: usize,
    pub objects: usize,
    pub height: usize,
    pub width: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SavosStatus {
    match e {
        Error::Config(_) => SavosStatus::Config,
        Error::Contract(_) => SavosStatus::Contract,
        Error::Generation { .. } => SavosStatus::Generation,
        Error::Format { .. } => SavosStatus::Format,
        Error::Io { .. } => SavosStatus::Io,
        Error::NonFinite { .. } => SavosStatus::NonFinite,
        _ => SavosStatus::Internal,
    }
}

struct Fail(SavosStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SavosStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SavosStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SavosStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SavosStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SavosStatus::Config, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_out<'a, T>(
    p: *mut T,
    len: usize,
    needed: usize,
    what: &str,
) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < needed {
        return Err(Fail(
            SavosStatus::BufferTooSmall,
            format!("{what} holds {len} elements, {needed} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn savos_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn savos_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates one video. `config_toml` is a run configuration whose `[generator]`
/// section is used; null selects the 64x64 desk setting. `seed` overrides its seed.
///
/// # Safety
/// `config_toml` is null or a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn savos_video_generate(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut SavosVideo,
) -> SavosStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_toml.is_null() {
            GenConfig::desk()
        } else {
            let text = CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| Fail(SavosStatus::Config, "config is not UTF-8".into()))?;
            RunConfig::from_toml(text)?.generator
        };
        let sample = synthgen::generate_video(&cfg.with_seed(seed))?;
        *out = Box::into_raw(Box::new(SavosVideo(sample)));
        Ok(())
    })
}

/// Reads a video directory written by [`savos_video_write`] or the CLI.
///
/// # Safety
/// `dir` is a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn savos_video_read(
    dir: *const c_char,
    out: *mut *mut SavosVideo,
) -> SavosStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(SavosVideo(sio::read_video(&dir)?)));
        Ok(())
    })
}

/// # Safety
/// `video` is a live handle; `dir` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn savos_video_write(
    video: *const SavosVideo,
    dir: *const c_char,
) -> SavosStatus {
    guard(|| {
        let v = video.as_ref().ok_or_else(|| null("video"))?;
        let dir = path_arg(dir, "dir")?;
        sio::write_video(&v.0, &dir)?;
        Ok(())
    })
}

/// # Safety
/// `video` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn savos_video_free(video: *mut SavosVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}

/// # Safety
/// `video` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn savos_video_dims(
    video: *const SavosVideo,
    out: *mut SavosDims,
) -> SavosStatus {
    guard(|| {
        let v = video.as_ref().ok_or_else(|| null("video"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (height, width) = v.0.canvas();
        *out = SavosDims {
            frames: v.0.num_frames(),
            objects: v.0.num_objects(),
            height,
            width,
        };
        Ok(())
    })
}

fn mask_at(v: &VideoSample, kind: SavosMaskKind, t: usize, k: usize) -> Result<&Mask, Fail> {
    let frames = match kind {
        SavosMaskKind::Amodal => &v.amodal,
        SavosMaskKind::Visible => &v.visible,
    };
    frames.get(t).and_then(|f| f.get(k)).ok_or_else(|| {
        Fail(
            SavosStatus::Contract,
            format!(
                "frame {t} object {k} out of range ({} frames, {} objects)",
                v.num_frames(),
                v.num_objects()
            ),
        )
    })
}

/// Copies one 0/1 mask, row-major, into `buf` (`len >= height * width`).
///
/// # Safety
/// `video` is a live handle; `buf` points to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn savos_video_copy_mask(
    video: *const SavosVideo,
    kind: SavosMaskKind,
    t: usize,
    k: usize,
    buf: *mut u8,
    len: usize,
) -> SavosStatus {
    guard(|| {
        let v = video.as_ref().ok_or_else(|| null("video"))?;
        let m = mask_at(&v.0, kind, t, k)?;
        slice_out(buf, len, m.data().len(), "buf")?.copy_from_slice(m.data());
        Ok(())
    })
}

/// Copies the RGB frame `t` (row-major, interleaved) into `buf` (`len >= 3 * height * width`).
///
/// # Safety
/// `video` is a live handle; `buf` points to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn savos_video_copy_frame(
    video: *const SavosVideo,
    t: usize,
    buf: *mut u8,
    len: usize,
) -> SavosStatus {
    guard(|| {
        let v = video.as_ref().ok_or_else(|| null("video"))?;
        let f = v.0.frames.get(t).ok_or_else(|| {
            Fail(
                SavosStatus::Contract,
                format!("frame {t} out of range ({} frames)", v.0.num_frames()),
            )
        })?;
        let raw: Vec<u8> = f.data().iter().flatten().copied().collect();
        slice_out(buf, len, raw.len(), "buf")?.copy_from_slice(&raw);
        Ok(())
    })
}

/// Forward-warps a `[0, 1]` mask by a dense flow; all buffers are `height * width` floats.
///
/// # Safety
/// Input pointers reference `height * width` readable floats, `out` as many writable ones.
#[no_mangle]
pub unsafe extern "C" fn savos_forward_warp(
    mask: *const f32,
    dx: *const f32,
    dy: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> SavosStatus {
    guard(|| {
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Fail(SavosStatus::Contract, "height * width overflows".into()))?;
        let grid = |p: *const f32, what: &str| -> Result<Field, Fail> {
            Ok(Field::from_vec(
                height,
                width,
                slice_in(p, n, what)?.to_vec(),
            )?)
        };
        let m = grid(mask, "mask")?;
        let flow = FlowField {
            dx: grid(dx, "dx")?,
            dy: grid(dy, "dy")?,
        };
        let warped = warp::forward_warp(&m, &flow)?;
        slice_out(out, n, n, "out")?.copy_from_slice(warped.data());
        Ok(())
    })
}

/// Convex-hull completion of a visible mask (`height * width` bytes, nonzero = set).
/// `*defined` (may be null) is false when the visible mask was empty, leaving `out` empty.
///
/// # Safety
/// `visible` references `height * width` readable bytes, `out` as many writable ones.
#[no_mangle]
pub unsafe extern "C" fn savos_convex_baseline(
    visible: *const u8,
    height: usize,
    width: usize,
    out: *mut u8,
    defined: *mut bool,
) -> SavosStatus {
    guard(|| {
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Fail(SavosStatus::Contract, "height * width overflows".into()))?;
        let data = slice_in(visible, n, "visible")?
            .iter()
            .map(|&v| u8::from(v != 0))
            .collect();
        let (hull, ok) = evalkit::convex_baseline(&Mask::from_vec(height, width, data)?);
        slice_out(out, n, n, "out")?.copy_from_slice(hull.data());
        if let Some(d) = defined.as_mut() {
            *d = ok;
        }
        Ok(())
    })
}

/// Loads a checkpoint for inference.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn savos_model_load(
    path: *const c_char,
    out: *mut *mut SavosModelHandle,
) -> SavosStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Checkpoint::load(&path)?.build_model(&Device::Cpu, DType::F32)?;
        *out = Box::into_raw(Box::new(SavosModelHandle(model)));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn savos_model_free(model: *mut SavosModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicted amodal masks for every frame and object, laid out `[t][k][y][x]` as 0/1
/// bytes (`len >= frames * objects * height * width`).
///
/// # Safety
/// `model` and `video` are live handles; `buf` points to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn savos_model_predict(
    model: *const SavosModelHandle,
    video: *const SavosVideo,
    buf: *mut u8,
    len: usize,
) -> SavosStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let v = video.as_ref().ok_or_else(|| null("video"))?;
        let (h, w) = v.0.canvas();
        let needed = v.0.num_frames() * v.0.num_objects() * h * w;
        let out = slice_out(buf, len, needed, "buf")?;
        let preds = trainer::predict_video(&m.0, &v.0)?;
        for (chunk, mask) in out.chunks_exact_mut(h * w).zip(preds.iter().flatten()) {
            chunk.copy_from_slice(mask.data());
        }
        Ok(())
    })
}
