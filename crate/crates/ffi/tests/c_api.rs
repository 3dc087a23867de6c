use std::ffi::{CStr, CString};
use std::ptr;

use melflow::run::full_pipeline;
use melflow_ffi::*;

const TINY: &str = "data.songs = 4
data.durations_s = 0.75
data.n_bins = 16
dcae.c1 = 2
dcae.c2 = 2
dcae.steps = 3
dit.d_model = 8
dit.blocks = 2
dit.heads = 2
cond.lyric_blocks = 1
cond.lyric_heads = 2
train.steps = 2
train.batch_size = 2
train.warmup_steps = 1
sampler.steps = 2
";

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mf_last_error()) }.to_string_lossy().into_owned()
}

fn load_tiny(dir: &tempfile::TempDir) -> *mut MfModel {
    let path = dir.path().join("model.acep");
    full_pipeline(TINY, |_| {}).unwrap().checkpoint.write(&path).unwrap();
    let mut model = ptr::null_mut();
    let s = unsafe { mf_model_load(c(path.to_str().unwrap()).as_ptr(), &mut model) };
    assert_eq!(s, MfStatus::Ok, "{}", last_error());
    model
}

fn sample(model: *const MfModel, speaker: i32, seed: u64) -> (MfStatus, *mut MfMel) {
    let mut mel = ptr::null_mut();
    let s = unsafe { mf_sample(model, c("pop").as_ptr(), c("la la").as_ptr(), speaker, 0.75, seed, &mut mel) };
    (s, mel)
}

fn values(mel: *const MfMel) -> Vec<f32> {
    let n = unsafe { mf_mel_frames(mel) * mf_mel_bins(mel) };
    let mut buf = vec![0.0f32; n];
    assert_eq!(unsafe { mf_mel_copy(mel, buf.as_mut_ptr(), n) }, MfStatus::Ok);
    buf
}

#[test]
fn sample_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = load_tiny(&dir);
    let (s, mel) = sample(model, 1, 7);
    assert_eq!(s, MfStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { mf_mel_bins(mel) }, 16);
    // 0.75 s is 65 frames, rounded up to the 8-frame latent grid.
    assert_eq!(unsafe { mf_mel_frames(mel) }, 72);
    let v = values(mel);
    assert!(v.iter().all(|x| x.is_finite()));

    let (_, again) = sample(model, 1, 7);
    assert_eq!(values(again), v);

    let path = c(dir.path().join("out.acep").to_str().unwrap());
    assert_eq!(unsafe { mf_mel_save(mel, path.as_ptr()) }, MfStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { mf_mel_load(path.as_ptr(), &mut back) }, MfStatus::Ok);
    assert_eq!(values(back), v);

    let mut painted = ptr::null_mut();
    let s = unsafe { mf_repaint(model, back, 0.2, 0.5, c("rock").as_ptr(), c("oh").as_ptr(), -1, 3, &mut painted) };
    assert_eq!(s, MfStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { mf_mel_frames(painted) }, 72);

    let mut edited = ptr::null_mut();
    let s = unsafe { mf_edit(model, back, c("pop").as_ptr(), c("la la").as_ptr(), c("lo lo").as_ptr(), 1, 3, &mut edited) };
    assert_eq!(s, MfStatus::Ok, "{}", last_error());

    unsafe {
        mf_mel_free(edited);
        mf_mel_free(painted);
        mf_mel_free(back);
        mf_mel_free(again);
        mf_mel_free(mel);
        mf_model_free(model);
    }
}

#[test]
fn errors_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let model = load_tiny(&dir);

    let (s, mel) = sample(model, 999, 0);
    assert_eq!(s, MfStatus::UnknownSpeaker);
    assert!(mel.is_null());
    assert!(!last_error().is_empty());

    let (s, _) = sample(ptr::null(), 1, 0);
    assert_eq!(s, MfStatus::NullPointer);

    let bad = dir.path().join("bad.acep");
    std::fs::write(&bad, b"NOPE0000").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mf_model_load(c(bad.to_str().unwrap()).as_ptr(), &mut m) }, MfStatus::Checkpoint);
    let missing = dir.path().join("missing.acep");
    assert_eq!(unsafe { mf_model_load(c(missing.to_str().unwrap()).as_ptr(), &mut m) }, MfStatus::Io);
    assert!(m.is_null());

    let invalid = [0xffu8, 0];
    let mut out = ptr::null_mut();
    let s = unsafe { mf_sample(model, invalid.as_ptr().cast(), c("").as_ptr(), -1, 0.75, 0, &mut out) };
    assert_eq!(s, MfStatus::InvalidUtf8);

    let (_, ok) = sample(model, -1, 0);
    let mut small = [0.0f32; 4];
    assert_eq!(unsafe { mf_mel_copy(ok, small.as_mut_ptr(), 4) }, MfStatus::BufferTooSmall);

    unsafe {
        mf_mel_free(ok);
        mf_model_free(model);
        mf_mel_free(ptr::null_mut());
    }
    assert!(!unsafe { CStr::from_ptr(mf_version()) }.to_bytes().is_empty());
}

#[test]
fn mel_from_caller_buffer() {
    let data: Vec<f32> = (0..8 * 16).map(|i| i as f32 * 0.01).collect();
    let mut mel = ptr::null_mut();
    assert_eq!(unsafe { mf_mel_from_data(data.as_ptr(), 8, 16, 86.13, &mut mel) }, MfStatus::Ok);
    assert_eq!(values(mel), data);
    assert_eq!(unsafe { mf_mel_from_data(data.as_ptr(), 0, 16, 86.13, &mut mel) }, MfStatus::InvalidArgument);
    unsafe { mf_mel_free(mel) };
}
