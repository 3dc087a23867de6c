//! C ABI over melflow.
//!
//! Objects are opaque handles created by `*_load` / generation calls and
//! released with the matching `*_free`. Every fallible call returns an
//! [`MfStatus`]; on failure the message is available from
//! [`mf_last_error`] on the same thread until the next failing call.
//! Panics never cross the boundary; they surface as `MF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use melflow::checkpoint::Container;
use melflow::conditioning::lyrics::tokenize_lyrics;
use melflow::conditioning::ConditionBundle;
use melflow::dcae::{frames_for_duration, MelSpectrogram};
use melflow::run::{load_model, LoadedModel};
use melflow::sampler::{flow_edit, repaint, EditMask, SamplerConfig};
use melflow::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Shape = 4,
    OverBudget = 5,
    UnknownSpeaker = 6,
    Checkpoint = 7,
    Config = 8,
    Io = 9,
    NonFinite = 10,
    BufferTooSmall = 11,
    Panic = 12,
    Other = 13,
}

impl From<&Error> for MfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) | Error::NotPadded { .. } | Error::ChannelCount(_) => MfStatus::Shape,
            Error::OverBudget { .. } => MfStatus::OverBudget,
            Error::InvalidArgument(_) | Error::SongTooShort { .. } | Error::LoraRank { .. } => MfStatus::InvalidArgument,
            Error::UnknownSpeaker { .. } => MfStatus::UnknownSpeaker,
            Error::Checkpoint(_) | Error::MissingParam(_) => MfStatus::Checkpoint,
            Error::Config(_) => MfStatus::Config,
            Error::Io { .. } => MfStatus::Io,
            Error::NonFinite { .. } => MfStatus::NonFinite,
        }
    }
}

/// A loaded model checkpoint.
pub struct MfModel {
    inner: LoadedModel,
}

/// A mel spectrogram, frames × bins.
pub struct MfMel {
    inner: MelSpectrogram,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MfStatus::from(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MfStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MfStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn object<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(MfStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(out: *mut *mut T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(MfStatus::NullPointer, "output pointer is null".into()));
    }
    Ok(())
}

fn speaker(id: i32) -> Option<u32> {
    u32::try_from(id).ok()
}

fn sampler(m: &LoadedModel, seed: u64) -> SamplerConfig {
    SamplerConfig {
        seed,
        ..m.config.sampler.clone()
    }
}

unsafe fn bundle(tags: *const c_char, lyrics: *const c_char, speaker_id: i32) -> Result<ConditionBundle, Failure> {
    let tags = text(tags, "tags")?;
    let lyrics = text(lyrics, "lyrics")?;
    Ok(ConditionBundle::new(tags, tokenize_lyrics(lyrics)?, speaker(speaker_id))?)
}

fn emit(out: *mut *mut MfMel, mel: MelSpectrogram) {
    // SAFETY: callers checked `out` with `out_ptr`.
    unsafe { *out = Box::into_raw(Box::new(MfMel { inner: mel })) };
}

/// Message of the last failure on this thread, or null. Owned by the
/// library; valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model checkpoint written by `melflow train`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_model_load(path: *const c_char, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        out_ptr(out)?;
        let path = PathBuf::from(text(path, "path")?);
        let inner = load_model(&Container::read(&path)?)?;
        *out = Box::into_raw(Box::new(MfModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `mf_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_model_free(model: *mut MfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Generates `duration_s` seconds for a prompt. `speaker_id < 0` means no
/// speaker.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mf_sample(
    model: *const MfModel,
    tags: *const c_char,
    lyrics: *const c_char,
    speaker_id: i32,
    duration_s: f64,
    seed: u64,
    out: *mut *mut MfMel,
) -> MfStatus {
    guard(|| {
        out_ptr(out)?;
        let m = &object(model, "model")?.inner;
        let b = bundle(tags, lyrics, speaker_id)?;
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(Failure(MfStatus::InvalidArgument, format!("duration {duration_s} must be positive")));
        }
        let g = &m.generator;
        let frames = frames_for_duration(duration_s, g.dcae.config.frame_rate_hz);
        emit(out, g.sample_mel(&b, g.latent_frames(frames), &sampler(m, seed))?);
        Ok(())
    })
}

/// Regenerates `[start_s, end_s)` of `mel` under a new prompt.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mf_repaint(
    model: *const MfModel,
    mel: *const MfMel,
    start_s: f64,
    end_s: f64,
    tags: *const c_char,
    lyrics: *const c_char,
    speaker_id: i32,
    seed: u64,
    out: *mut *mut MfMel,
) -> MfStatus {
    guard(|| {
        out_ptr(out)?;
        let m = &object(model, "model")?.inner;
        let mel = &object(mel, "mel")?.inner;
        let g = &m.generator;
        let x_ref = g.encode_mel(mel)?;
        let mask = EditMask::from_seconds(x_ref.rows(), g.dcae.config.latent_rate_hz(), start_s, end_s)?;
        let cond = g.model.prepare(&bundle(tags, lyrics, speaker_id)?)?;
        let uncond = g.model.prepare_unconditional()?;
        let x = repaint(&g.model, &x_ref, &mask, &cond, &uncond, &sampler(m, seed))?;
        emit(out, g.decode_tokens(&x)?);
        Ok(())
    })
}

/// Rewrites the lyrics of `mel` from `lyrics_src` to `lyrics_tgt`.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mf_edit(
    model: *const MfModel,
    mel: *const MfMel,
    tags: *const c_char,
    lyrics_src: *const c_char,
    lyrics_tgt: *const c_char,
    speaker_id: i32,
    seed: u64,
    out: *mut *mut MfMel,
) -> MfStatus {
    guard(|| {
        out_ptr(out)?;
        let m = &object(model, "model")?.inner;
        let mel = &object(mel, "mel")?.inner;
        let g = &m.generator;
        let x_src = g.encode_mel(mel)?;
        let src = g.model.prepare(&bundle(tags, lyrics_src, speaker_id)?)?;
        let tgt = g.model.prepare(&bundle(tags, lyrics_tgt, speaker_id)?)?;
        let uncond = g.model.prepare_unconditional()?;
        let x = flow_edit(&g.model, &x_src, &src, &tgt, &uncond, &sampler(m, seed))?;
        emit(out, g.decode_tokens(&x)?);
        Ok(())
    })
}

/// Reads a mel file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_mel_load(path: *const c_char, out: *mut *mut MfMel) -> MfStatus {
    guard(|| {
        out_ptr(out)?;
        let path = PathBuf::from(text(path, "path")?);
        emit(out, MelSpectrogram::from_container(&Container::read(&path)?)?);
        Ok(())
    })
}

/// Writes a mel file.
///
/// # Safety
/// `mel` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mf_mel_save(mel: *const MfMel, path: *const c_char) -> MfStatus {
    guard(|| {
        let mel = &object(mel, "mel")?.inner;
        let path = PathBuf::from(text(path, "path")?);
        mel.to_container()?.write(&path)?;
        Ok(())
    })
}

/// Builds a mel from `frames × bins` row-major values.
///
/// # Safety
/// `data` must point to `frames * bins` floats.
#[no_mangle]
pub unsafe extern "C" fn mf_mel_from_data(
    data: *const f32,
    frames: usize,
    bins: usize,
    frame_rate_hz: f64,
    out: *mut *mut MfMel,
) -> MfStatus {
    guard(|| {
        out_ptr(out)?;
        if data.is_null() {
            return Err(Failure(MfStatus::NullPointer, "data is null".into()));
        }
        let n = frames
            .checked_mul(bins)
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure(MfStatus::InvalidArgument, "frames and bins must be positive".into()))?;
        let values: Vec<f64> = std::slice::from_raw_parts(data, n).iter().map(|&v| v as f64).collect();
        let m = melflow::tensor::Matrix::new(frames, bins, values);
        emit(out, MelSpectrogram::new(m, frame_rate_hz));
        Ok(())
    })
}

/// # Safety
/// `mel` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mf_mel_frames(mel: *const MfMel) -> usize {
    mel.as_ref().map_or(0, |m| m.inner.frames())
}

/// # Safety
/// `mel` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mf_mel_bins(mel: *const MfMel) -> usize {
    mel.as_ref().map_or(0, |m| m.inner.n_bins())
}

/// Copies the values row-major into `buf`, which holds `len` floats.
///
/// # Safety
/// `buf` must be writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn mf_mel_copy(mel: *const MfMel, buf: *mut f32, len: usize) -> MfStatus {
    guard(|| {
        let mel = &object(mel, "mel")?.inner;
        if buf.is_null() {
            return Err(Failure(MfStatus::NullPointer, "buffer is null".into()));
        }
        let src = mel.data().data();
        if len < src.len() {
            return Err(Failure(
                MfStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", src.len()),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(buf, src.len());
        for (d, s) in dst.iter_mut().zip(src) {
            *d = *s as f32;
        }
        Ok(())
    })
}

/// # Safety
/// `mel` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_mel_free(mel: *mut MfMel) {
    if !mel.is_null() {
        drop(Box::from_raw(mel));
    }
}
