//! C ABI for barmorph.
//!
//! Every fallible function returns a [`BmStatus`]; on failure a message is
//! kept per thread and can be copied out with [`bm_last_error`]. Objects are
//! opaque handles created by `*_new`/`*_load`/`*_from_*` functions and
//! released with the matching `*_free`. Passing a null handle to a `*_free`
//! function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use barmorph::attributes::{compute_attributes, AttributeBins};
use barmorph::bundle::ModelBundle;
use barmorph::decode::{sliding_window_transfer, OverrideSpec, SamplingConfig};
use barmorph::midi::{parse_midi, quantize, write_midi, MidiError, QuantizedScore};
use barmorph::remi::{detokenize, tokenize, Vocab};
use barmorph::vae::StyleModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    MalformedMidi = 4,
    UnsupportedMeter = 5,
    Checkpoint = 6,
    BadOverrides = 7,
    Decode = 8,
    BufferTooSmall = 9,
    InvalidArgument = 10,
    Panic = 11,
}

/// A quantized score.
pub struct BmScore {
    score: QuantizedScore,
}

/// A loaded style-transfer checkpoint.
pub struct BmModel {
    bundle: ModelBundle,
    model: StyleModel,
}

/// An owned byte buffer.
pub struct BmBuffer {
    data: Vec<u8>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: BmStatus, msg: impl Into<String>) -> BmStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> BmStatus) -> BmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == BmStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(BmStatus::Panic, "internal panic"),
    }
}

fn midi_status(e: &MidiError) -> BmStatus {
    match e {
        MidiError::UnsupportedMeter(..) => BmStatus::UnsupportedMeter,
        MidiError::BadResolution(_) => BmStatus::InvalidArgument,
        _ => BmStatus::MalformedMidi,
    }
}

unsafe fn c_str<'a>(s: *const c_char) -> Result<&'a str, BmStatus> {
    if s.is_null() {
        return Err(fail(BmStatus::NullArgument, "null string"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(BmStatus::InvalidUtf8, "string is not UTF-8"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `cap > 0`) and returns the full message length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes or be null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn bm_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Parses and quantizes a Standard MIDI File.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bm_score_from_midi(
    data: *const u8,
    len: usize,
    sub_beats_per_bar: u16,
    out: *mut *mut BmScore,
) -> BmStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return fail(BmStatus::NullArgument, "null argument");
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let score = match parse_midi(bytes).and_then(|raw| quantize(&raw, sub_beats_per_bar)) {
            Ok(s) => s,
            Err(e) => return fail(midi_status(&e), e.to_string()),
        };
        *out = Box::into_raw(Box::new(BmScore { score }));
        BmStatus::Ok
    })
}

/// Builds a score from REMI token ids.
///
/// # Safety
/// `tokens` must point to `len` readable ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bm_score_from_tokens(
    tokens: *const u32,
    len: usize,
    sub_beats_per_bar: u16,
    out: *mut *mut BmScore,
) -> BmStatus {
    guard(|| {
        if tokens.is_null() || out.is_null() {
            return fail(BmStatus::NullArgument, "null argument");
        }
        if sub_beats_per_bar != 16 && sub_beats_per_bar != 32 {
            return fail(BmStatus::InvalidArgument, "sub-beats per bar must be 16 or 32");
        }
        let ids = std::slice::from_raw_parts(tokens, len);
        match detokenize(ids, &Vocab::new(sub_beats_per_bar)) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(BmScore { score: d.score }));
                BmStatus::Ok
            }
            Err(e) => fail(BmStatus::Decode, e.to_string()),
        }
    })
}

/// # Safety
/// `score` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn bm_score_free(score: *mut BmScore) {
    if !score.is_null() {
        drop(Box::from_raw(score));
    }
}

/// Number of bars, or 0 for a null handle.
///
/// # Safety
/// `score` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bm_score_n_bars(score: *const BmScore) -> usize {
    score.as_ref().map_or(0, |s| s.score.n_bars())
}

/// Writes REMI token ids into `out` (capacity `cap`) and their count into
/// `out_len`. Returns `BufferTooSmall` with `out_len` set when `cap` is
/// insufficient; call with `out = NULL, cap = 0` to query the size.
///
/// # Safety
/// `score` must be live; `out` must hold `cap` ids; `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn bm_score_tokens(
    score: *const BmScore,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> BmStatus {
    guard(|| {
        let (Some(s), false) = (score.as_ref(), out_len.is_null()) else {
            return fail(BmStatus::NullArgument, "null argument");
        };
        let vocab = Vocab::new(s.score.sub_beats_per_bar);
        let tokens = match tokenize(&s.score, &vocab) {
            Ok(t) => t.tokens,
            Err(e) => return fail(BmStatus::Decode, e.to_string()),
        };
        *out_len = tokens.len();
        if tokens.len() > cap || (out.is_null() && !tokens.is_empty()) {
            return fail(BmStatus::BufferTooSmall, format!("{} tokens", tokens.len()));
        }
        ptr::copy_nonoverlapping(tokens.as_ptr(), out, tokens.len());
        BmStatus::Ok
    })
}

/// Per-bar attribute classes. Cut-offs come from `model` when given,
/// otherwise the reference cut-offs are used. Both arrays need
/// `bm_score_n_bars(score)` entries.
///
/// # Safety
/// `score` must be live; `model` null or live; arrays hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn bm_score_attributes(
    score: *const BmScore,
    model: *const BmModel,
    rhym: *mut u8,
    poly: *mut u8,
    cap: usize,
) -> BmStatus {
    guard(|| {
        let Some(s) = score.as_ref() else {
            return fail(BmStatus::NullArgument, "null score");
        };
        if rhym.is_null() || poly.is_null() {
            return fail(BmStatus::NullArgument, "null output array");
        }
        if cap < s.score.n_bars() {
            return fail(BmStatus::BufferTooSmall, format!("{} bars", s.score.n_bars()));
        }
        let bins = model
            .as_ref()
            .map_or_else(AttributeBins::reference, |m| m.bundle.bins.clone());
        for (k, a) in compute_attributes(&s.score, &bins).iter().enumerate() {
            *rhym.add(k) = a.a_rhym;
            *poly.add(k) = a.a_poly;
        }
        BmStatus::Ok
    })
}

/// Serializes a score as a Standard MIDI File.
///
/// # Safety
/// `score` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bm_score_to_midi(score: *const BmScore, out: *mut *mut BmBuffer) -> BmStatus {
    guard(|| {
        let (Some(s), false) = (score.as_ref(), out.is_null()) else {
            return fail(BmStatus::NullArgument, "null argument");
        };
        *out = Box::into_raw(Box::new(BmBuffer {
            data: write_midi(&s.score),
        }));
        BmStatus::Ok
    })
}

/// # Safety
/// `buf` must be live.
#[no_mangle]
pub unsafe extern "C" fn bm_buffer_data(buf: *const BmBuffer) -> *const u8 {
    buf.as_ref().map_or(ptr::null(), |b| b.data.as_ptr())
}

/// # Safety
/// `buf` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn bm_buffer_len(buf: *const BmBuffer) -> usize {
    buf.as_ref().map_or(0, |b| b.data.len())
}

/// # Safety
/// `buf` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn bm_buffer_free(buf: *mut BmBuffer) {
    if !buf.is_null() {
        drop(Box::from_raw(buf));
    }
}

/// Loads a style-model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bm_model_load(path: *const c_char, out: *mut *mut BmModel) -> BmStatus {
    guard(|| {
        if out.is_null() {
            return fail(BmStatus::NullArgument, "null output");
        }
        let path = match c_str(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let bundle = match ModelBundle::load(Path::new(path)) {
            Ok(b) => b,
            Err(e) => return fail(BmStatus::Checkpoint, e.to_string()),
        };
        let model = match bundle.style_model() {
            Ok(m) => m,
            Err(e) => return fail(BmStatus::Checkpoint, e.to_string()),
        };
        *out = Box::into_raw(Box::new(BmModel { bundle, model }));
        BmStatus::Ok
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn bm_model_free(model: *mut BmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Sampling parameters for [`bm_transfer`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BmSampling {
    /// Nucleus mass in (0, 1].
    pub p: f64,
    /// Softmax temperature, > 0.
    pub tau: f64,
    pub seed: u64,
    pub max_tokens_per_bar: usize,
    /// Window in bars; 0 picks the checkpoint's training crop.
    pub window: usize,
}

/// Default sampling parameters.
#[no_mangle]
pub extern "C" fn bm_sampling_default() -> BmSampling {
    let s = SamplingConfig::default();
    BmSampling {
        p: s.p,
        tau: s.tau,
        seed: s.seed,
        max_tokens_per_bar: s.max_tokens_per_bar,
        window: 0,
    }
}

/// Restyles `source` with rhythm and polyphony overrides written as
/// `"+n"`, `"-n"`, `"=n"` or a comma list with one entry per bar. A null
/// override keeps the source classes.
///
/// # Safety
/// Handles must be live; strings null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bm_transfer(
    model: *const BmModel,
    source: *const BmScore,
    rhym: *const c_char,
    poly: *const c_char,
    sampling: *const BmSampling,
    out: *mut *mut BmScore,
) -> BmStatus {
    guard(|| {
        let (Some(m), Some(src), false) = (model.as_ref(), source.as_ref(), out.is_null()) else {
            return fail(BmStatus::NullArgument, "null argument");
        };
        let opts = sampling.as_ref().copied().unwrap_or_else(|| bm_sampling_default());
        let spec = |s: *const c_char| -> Result<OverrideSpec, BmStatus> {
            if s.is_null() {
                return Ok(OverrideSpec::default());
            }
            c_str(s)?
                .parse::<OverrideSpec>()
                .map_err(|e| fail(BmStatus::BadOverrides, e.to_string()))
        };
        let (rs, ps) = match (spec(rhym), spec(poly)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let vocab = m.bundle.vocab();
        if src.score.sub_beats_per_bar != vocab.sub_beats_per_bar() {
            return fail(BmStatus::InvalidArgument, "score resolution differs from the checkpoint's");
        }
        let tokens = match tokenize(&src.score, &vocab) {
            Ok(t) => t.tokens,
            Err(e) => return fail(BmStatus::Decode, e.to_string()),
        };
        let attrs = compute_attributes(&src.score, &m.bundle.bins);
        let src_r: Vec<u8> = attrs.iter().map(|a| a.a_rhym).collect();
        let src_p: Vec<u8> = attrs.iter().map(|a| a.a_poly).collect();
        let (rr, rp) = match (rs.resolve(&src_r), ps.resolve(&src_p)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return fail(BmStatus::BadOverrides, e.to_string()),
        };
        let cfg = SamplingConfig {
            p: opts.p,
            tau: opts.tau,
            seed: opts.seed,
            max_tokens_per_bar: opts.max_tokens_per_bar,
        };
        if let Err(e) = cfg.validate() {
            return fail(BmStatus::InvalidArgument, e.to_string());
        }
        let window = if opts.window == 0 {
            m.bundle
                .extra
                .get::<usize>("train.k_crop")
                .ok()
                .flatten()
                .unwrap_or(16)
                .max(2)
        } else {
            opts.window
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gen = match sliding_window_transfer(&m.model, &m.bundle.store, &tokens, &rr, &rp, window, &cfg, &mut rng) {
            Ok(g) => g,
            Err(e) => return fail(BmStatus::Decode, e.to_string()),
        };
        match detokenize(&gen.tokens, &vocab) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(BmScore { score: d.score }));
                BmStatus::Ok
            }
            Err(e) => fail(BmStatus::Decode, e.to_string()),
        }
    })
}
