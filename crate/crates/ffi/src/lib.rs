//! C ABI for loading models, streaming blocks through a session and running
//! held-out evaluations.
//!
//! Every function returns a [`SamoeStatus`]. On failure a message is kept per
//! thread and can be read with [`samoe_last_error`]. Handles are opaque and
//! must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samoe::codec::Mode;
use samoe::eval::{evaluate, EvalOptions, ModelAgent, Suite};
use samoe::model::container::save_model;
use samoe::model::{Modality, Model, ModelConfig};
use samoe::sim::{Sim, TaskKind};
use samoe::train::checkpoint::load_model_any;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Model = 5,
    Runtime = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A loaded model. Shared by every session created from it.
pub struct SamoeModel {
    inner: Arc<Model>,
}

/// Streaming decoder state over one model.
pub struct SamoeSession {
    agent: ModelAgent<Arc<Model>>,
    tick: usize,
    started: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SamoeModelInfo {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub n_experts: usize,
    pub vocab_total: usize,
    /// Per-block slot counts.
    pub speech_slots: usize,
    pub image_slots: usize,
    pub text_slots: usize,
    pub action_slots: usize,
    pub n_params: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn guard(f: impl FnOnce() -> Result<(), (SamoeStatus, String)>) -> SamoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SamoeStatus::Ok
        }
        Ok(Err((s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {m}"));
            SamoeStatus::Panic
        }
    }
}

fn fail<T>(s: SamoeStatus, m: impl Into<String>) -> Result<T, (SamoeStatus, String)> {
    Err((s, m.into()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SamoeStatus, String)> {
    if p.is_null() {
        return fail(SamoeStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (SamoeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (SamoeStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(SamoeStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn boxed_model(m: Model, out: *mut *mut SamoeModel) -> Result<(), (SamoeStatus, String)> {
    if out.is_null() {
        return fail(SamoeStatus::NullPointer, "out is null");
    }
    let h = Box::new(SamoeModel { inner: Arc::new(m) });
    unsafe { *out = Box::into_raw(h) };
    Ok(())
}

/// NUL-terminated library version.
#[no_mangle]
pub extern "C" fn samoe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn samoe_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Load a model container or training checkpoint from disk.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samoe_model_load(path: *const c_char, out: *mut *mut SamoeModel) -> SamoeStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let bytes = std::fs::read(Path::new(p)).map_err(|e| (SamoeStatus::Io, format!("{p}: {e}")))?;
        let m = load_model_any(&bytes).map_err(|e| (SamoeStatus::Format, e.to_string()))?;
        boxed_model(m, out)
    })
}

/// Load a model from an in-memory container.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samoe_model_load_bytes(data: *const u8, len: usize, out: *mut *mut SamoeModel) -> SamoeStatus {
    guard(|| {
        let bytes = slice_arg(data, len, "data")?;
        let m = load_model_any(bytes).map_err(|e| (SamoeStatus::Format, e.to_string()))?;
        boxed_model(m, out)
    })
}

/// Fresh randomly initialised two-expert model in the small geometry.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samoe_model_new_random(seed: u64, out: *mut *mut SamoeModel) -> SamoeStatus {
    guard(|| {
        let m = Model::new_samoe(ModelConfig::small(), &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(|e| (SamoeStatus::Model, e.to_string()))?;
        boxed_model(m, out)
    })
}

/// Write the model container to `path`.
///
/// # Safety
/// `model` must come from a `samoe_model_*` constructor; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn samoe_model_save(model: *const SamoeModel, path: *const c_char) -> SamoeStatus {
    guard(|| {
        let m = model.as_ref().ok_or((SamoeStatus::NullPointer, "model is null".into()))?;
        let p = str_arg(path, "path")?;
        std::fs::write(p, save_model(&m.inner)).map_err(|e| (SamoeStatus::Io, format!("{p}: {e}")))
    })
}

/// # Safety
/// `model` must be null or come from a `samoe_model_*` constructor, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn samoe_model_free(model: *mut SamoeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samoe_model_info(model: *const SamoeModel, out: *mut SamoeModelInfo) -> SamoeStatus {
    guard(|| {
        let m = model.as_ref().ok_or((SamoeStatus::NullPointer, "model is null".into()))?;
        if out.is_null() {
            return fail(SamoeStatus::NullPointer, "out is null");
        }
        let c = &m.inner.config;
        *out = SamoeModelInfo {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_kv_heads: c.n_kv_heads,
            d_head: c.d_head,
            n_experts: m.inner.experts.len(),
            vocab_total: c.layout().total(),
            speech_slots: c.block.speech,
            image_slots: c.block.n_img * c.block.image,
            text_slots: c.block.text,
            action_slots: c.block.action,
            n_params: m.inner.tensors().iter().map(|t| t.len()).sum(),
        };
        Ok(())
    })
}

/// Open a streaming session. The session keeps the model alive.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samoe_session_new(model: *const SamoeModel, out: *mut *mut SamoeSession) -> SamoeStatus {
    guard(|| {
        let m = model.as_ref().ok_or((SamoeStatus::NullPointer, "model is null".into()))?;
        if out.is_null() {
            return fail(SamoeStatus::NullPointer, "out is null");
        }
        let s = Box::new(SamoeSession { agent: ModelAgent::new(m.inner.clone()), tick: 0, started: false });
        *out = Box::into_raw(s);
        Ok(())
    })
}

/// # Safety
/// `session` must be null or a live handle, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn samoe_session_free(session: *mut SamoeSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Start an episode: clears the cache and feeds the system prompt.
/// `speech_only` nonzero selects the speech-only block form.
///
/// # Safety
/// `session` must be a live handle; `prompt` must point to `n_prompt` ids.
#[no_mangle]
pub unsafe extern "C" fn samoe_session_begin(
    session: *mut SamoeSession,
    prompt: *const usize,
    n_prompt: usize,
    speech_only: u8,
) -> SamoeStatus {
    guard(|| {
        let s = session.as_mut().ok_or((SamoeStatus::NullPointer, "session is null".into()))?;
        let p = slice_arg(prompt, n_prompt, "prompt")?;
        let mode = if speech_only != 0 { Mode::SpeechOnly } else { Mode::Default };
        s.agent.begin(p, mode).map_err(|e| (SamoeStatus::InvalidArgument, e))?;
        s.tick = 0;
        s.started = true;
        Ok(())
    })
}

/// Sampling temperature (0 = greedy) and seed for later steps.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn samoe_session_set_sampling(session: *mut SamoeSession, temperature: f64, seed: u64) -> SamoeStatus {
    guard(|| {
        let s = session.as_mut().ok_or((SamoeStatus::NullPointer, "session is null".into()))?;
        if !temperature.is_finite() {
            return fail(SamoeStatus::InvalidArgument, "temperature must be finite");
        }
        s.agent.temperature = temperature as _;
        s.agent.seed = seed;
        Ok(())
    })
}

/// Feed one block of speech (and, outside speech-only mode, image) tokens and
/// decode that block's text and action payloads. `n_image` must be zero in
/// speech-only mode and a multiple of the per-frame image length otherwise.
/// On `BufferTooSmall` the required lengths are still written.
///
/// # Safety
/// Input pointers must cover their counts; output buffers must hold their capacities;
/// `text_len` and `action_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samoe_session_step(
    session: *mut SamoeSession,
    speech: *const usize,
    n_speech: usize,
    image: *const usize,
    n_image: usize,
    text_out: *mut usize,
    text_cap: usize,
    text_len: *mut usize,
    action_out: *mut usize,
    action_cap: usize,
    action_len: *mut usize,
) -> SamoeStatus {
    guard(|| {
        let s = session.as_mut().ok_or((SamoeStatus::NullPointer, "session is null".into()))?;
        if !s.started {
            return fail(SamoeStatus::InvalidArgument, "session_begin has not been called");
        }
        if text_len.is_null() || action_len.is_null() {
            return fail(SamoeStatus::NullPointer, "length outputs are null");
        }
        let sp = slice_arg(speech, n_speech, "speech")?;
        let im = slice_arg(image, n_image, "image")?;
        let frame = s.agent.model.config.block.image;
        if n_image % frame != 0 {
            return fail(SamoeStatus::InvalidArgument, format!("image length {n_image} is not a multiple of {frame}"));
        }
        let images: Vec<Vec<usize>> = im.chunks(frame).map(<[usize]>::to_vec).collect();
        let layout = s.agent.model.config.layout();
        for &id in sp {
            if !layout.payload(Modality::Speech).contains(&id) {
                return fail(SamoeStatus::InvalidArgument, format!("speech token {id} out of range"));
            }
        }
        for &id in im {
            if !layout.payload(Modality::Image).contains(&id) {
                return fail(SamoeStatus::InvalidArgument, format!("image token {id} out of range"));
            }
        }
        let (text, action) = s.agent.step(s.tick, sp, &images, 0).map_err(|e| (SamoeStatus::InvalidArgument, e))?;
        *text_len = text.len();
        *action_len = action.len();
        if text.len() > text_cap || action.len() > action_cap || text_out.is_null() || action_out.is_null() {
            return fail(SamoeStatus::BufferTooSmall, format!("need {} text and {} action slots", text.len(), action.len()));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), text_out, text.len());
        ptr::copy_nonoverlapping(action.as_ptr(), action_out, action.len());
        s.tick += 1;
        Ok(())
    })
}

/// Run one task kind over seeds `seed_lo..=seed_hi` and report its success rate.
///
/// # Safety
/// `model` must be a live handle; `task` NUL-terminated; `success_rate` writable.
#[no_mangle]
pub unsafe extern "C" fn samoe_eval_task(
    model: *const SamoeModel,
    task: *const c_char,
    seed_lo: u64,
    seed_hi: u64,
    success_rate: *mut f64,
) -> SamoeStatus {
    guard(|| {
        let m = model.as_ref().ok_or((SamoeStatus::NullPointer, "model is null".into()))?;
        let t: TaskKind = str_arg(task, "task")?.parse().map_err(|e: samoe::sim::SimError| (SamoeStatus::InvalidArgument, e.to_string()))?;
        if success_rate.is_null() {
            return fail(SamoeStatus::NullPointer, "success_rate is null");
        }
        if seed_hi < seed_lo {
            return fail(SamoeStatus::InvalidArgument, "empty seed range");
        }
        let sim = Sim::for_model(&m.inner.config).map_err(|e| (SamoeStatus::Model, e.to_string()))?;
        let suite = Suite::new(vec![t], (seed_lo..=seed_hi).collect());
        let (r, _) = evaluate(&sim, &m.inner, "ffi", &suite, &EvalOptions::default()).map_err(|e| (SamoeStatus::Runtime, e.to_string()))?;
        *success_rate = r.task(t).map_or(0.0, |s| s.success_rate());
        Ok(())
    })
}
