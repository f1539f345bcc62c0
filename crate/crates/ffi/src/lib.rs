//! C interface to the nsmc library.
//!
//! Models and trained artifacts are opaque handles created by `*_new` or
//! `*_load` functions and released with the matching `*_free`. Every fallible
//! function returns an [`NsmcStatus`]; on failure the message is available
//! from [`nsmc_last_error`] on the same thread.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nsmc::cli::{run_inference, Engine, Problem, ProposalKind};
use nsmc::models::{build_example, load_observations, Example, ModelError};
use nsmc::smc::{ResamplingScheme, SmcError};
use nsmc::train::{train_all, TrainArtifact, TrainConfig, TrainError};

/// Result codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NsmcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Model = 3,
    Io = 4,
    Artifact = 5,
    DegenerateWeights = 6,
    Runtime = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: NsmcStatus, msg: impl Into<String>) -> NsmcStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> NsmcStatus) -> NsmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(NsmcStatus::Panic, "internal panic"),
    }
}

fn model_status(e: &ModelError) -> NsmcStatus {
    match e {
        ModelError::UnknownModel(_) | ModelError::UnknownParameter { .. } | ModelError::BadParameter { .. } => {
            NsmcStatus::InvalidArgument
        }
        _ => NsmcStatus::Model,
    }
}

fn smc_status(e: &SmcError) -> NsmcStatus {
    match e {
        SmcError::DegenerateWeights { .. } => NsmcStatus::DegenerateWeights,
        SmcError::Train(TrainError::Artifact(_)) => NsmcStatus::Artifact,
        _ => NsmcStatus::Runtime,
    }
}

/// A model with its inverse factorization and network plan.
pub struct NsmcModel {
    example: Example,
}

/// Trained proposal networks for one model.
pub struct NsmcArtifact {
    artifact: TrainArtifact,
}

/// Training settings. Obtain defaults from [`nsmc_train_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NsmcTrainConfig {
    pub n_train: usize,
    pub n_validate: usize,
    pub minibatch: usize,
    pub max_steps_per_epoch: usize,
    pub n_epochs: usize,
    pub step_size: f64,
    pub seed: u64,
}

/// Summary of one inference run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct NsmcInferResult {
    pub log_evidence: f64,
    pub final_ess: f64,
    pub steps: usize,
    pub unique_ancestries: usize,
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, NsmcStatus> {
    if p.is_null() {
        return Err(fail(NsmcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(NsmcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn parse_params(s: &str) -> Result<BTreeMap<String, String>, NsmcStatus> {
    let mut out = BTreeMap::new();
    for item in s.split(';').map(str::trim).filter(|i| !i.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| fail(NsmcStatus::InvalidArgument, format!("expected key=value, got '{item}'")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nsmc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds a named model. `params` is null or a `;`-separated list of
/// `key=value` pairs.
///
/// # Safety
/// `name` and `params` must be null or NUL-terminated strings; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nsmc_model_new(
    name: *const c_char,
    params: *const c_char,
    out: *mut *mut NsmcModel,
) -> NsmcStatus {
    guard(|| {
        if out.is_null() {
            return fail(NsmcStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let name = match str_arg(name, "name") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let params = if params.is_null() {
            BTreeMap::new()
        } else {
            match str_arg(params, "params").and_then(parse_params) {
                Ok(p) => p,
                Err(s) => return s,
            }
        };
        match build_example(name, &params) {
            Ok(example) => {
                *out = Box::into_raw(Box::new(NsmcModel { example }));
                NsmcStatus::Ok
            }
            Err(e) => fail(model_status(&e), e.to_string()),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`nsmc_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nsmc_model_free(model: *mut NsmcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of latent variables, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nsmc_model_num_latents(model: *const NsmcModel) -> usize {
    model.as_ref().map(|m| m.example.model.latents().len()).unwrap_or(0)
}

/// Number of inverse factors, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nsmc_model_num_factors(model: *const NsmcModel) -> usize {
    model.as_ref().map(|m| m.example.inverse.factors.len()).unwrap_or(0)
}

/// Number of distinct proposal networks, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nsmc_model_num_networks(model: *const NsmcModel) -> usize {
    model.as_ref().map(|m| m.example.plan.networks.len()).unwrap_or(0)
}

/// Writes the text report of the model into `buf` as with [`nsmc_last_error`]
/// and stores the full length in `written`.
///
/// # Safety
/// `model` must be a live handle, `buf` null or `len` writable bytes,
/// `written` null or valid.
#[no_mangle]
pub unsafe extern "C" fn nsmc_model_describe(
    model: *const NsmcModel,
    buf: *mut c_char,
    len: usize,
    written: *mut usize,
) -> NsmcStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return fail(NsmcStatus::NullPointer, "model is null") };
        let text = m.example.report();
        if !buf.is_null() && len > 0 {
            let n = text.len().min(len - 1);
            ptr::copy_nonoverlapping(text.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        if !written.is_null() {
            *written = text.len();
        }
        NsmcStatus::Ok
    })
}

/// Default training settings.
#[no_mangle]
pub extern "C" fn nsmc_train_config_default() -> NsmcTrainConfig {
    let c = TrainConfig::default();
    NsmcTrainConfig {
        n_train: c.n_train,
        n_validate: c.n_validate,
        minibatch: c.minibatch,
        max_steps_per_epoch: c.max_steps_per_epoch,
        n_epochs: c.n_epochs,
        step_size: c.adam.step_size,
        seed: c.seed,
    }
}

/// Trains every proposal network of `model`.
///
/// # Safety
/// `model` must be a live handle, `config` null (defaults) or valid, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn nsmc_train(
    model: *const NsmcModel,
    config: *const NsmcTrainConfig,
    out: *mut *mut NsmcArtifact,
) -> NsmcStatus {
    guard(|| {
        if out.is_null() {
            return fail(NsmcStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let Some(m) = model.as_ref() else { return fail(NsmcStatus::NullPointer, "model is null") };
        let c = config.as_ref().copied().unwrap_or_else(|| nsmc_train_config_default());
        let mut tc = TrainConfig {
            n_train: c.n_train,
            n_validate: c.n_validate,
            minibatch: c.minibatch,
            max_steps_per_epoch: c.max_steps_per_epoch,
            n_epochs: c.n_epochs,
            seed: c.seed,
            ..TrainConfig::default()
        };
        tc.adam.step_size = c.step_size;
        let ex = &m.example;
        match train_all(&ex.model, &ex.inverse, &ex.plan, &[tc], ex.params.clone()) {
            Ok(o) => {
                *out = Box::into_raw(Box::new(NsmcArtifact { artifact: o.artifact }));
                NsmcStatus::Ok
            }
            Err(e @ TrainError::InvalidConfig(_)) => fail(NsmcStatus::InvalidArgument, e.to_string()),
            Err(e) => fail(NsmcStatus::Runtime, e.to_string()),
        }
    })
}

/// Reads an artifact file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn nsmc_artifact_load(path: *const c_char, out: *mut *mut NsmcArtifact) -> NsmcStatus {
    guard(|| {
        if out.is_null() {
            return fail(NsmcStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match str_arg(path, "path") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(NsmcStatus::Io, format!("{path}: {e}")),
        };
        match TrainArtifact::from_json(&text) {
            Ok(artifact) => {
                *out = Box::into_raw(Box::new(NsmcArtifact { artifact }));
                NsmcStatus::Ok
            }
            Err(e) => fail(NsmcStatus::Artifact, e.to_string()),
        }
    })
}

/// Writes an artifact file.
///
/// # Safety
/// `artifact` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nsmc_artifact_save(artifact: *const NsmcArtifact, path: *const c_char) -> NsmcStatus {
    guard(|| {
        let Some(a) = artifact.as_ref() else { return fail(NsmcStatus::NullPointer, "artifact is null") };
        let path = match str_arg(path, "path") {
            Ok(s) => s,
            Err(s) => return s,
        };
        match std::fs::write(path, a.artifact.to_json()) {
            Ok(()) => NsmcStatus::Ok,
            Err(e) => fail(NsmcStatus::Io, format!("{path}: {e}")),
        }
    })
}

/// Releases an artifact. Null is ignored.
///
/// # Safety
/// `artifact` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nsmc_artifact_free(artifact: *mut NsmcArtifact) {
    if !artifact.is_null() {
        drop(Box::from_raw(artifact));
    }
}

/// Runs inference with `particles` particles. A null `artifact` selects the
/// prior proposal. A null `data` selects the model's default data (the pump
/// fixture, otherwise a synthetic draw seeded by `seed`). Posterior means of
/// the latents in topological order are written to `means` when it is non-null
/// and `means_len` equals [`nsmc_model_num_latents`].
///
/// # Safety
/// Handles must be live or null as documented; `data` null or a
/// NUL-terminated string; `means` null or `means_len` writable doubles;
/// `result` valid.
#[no_mangle]
pub unsafe extern "C" fn nsmc_infer(
    model: *const NsmcModel,
    artifact: *const NsmcArtifact,
    data: *const c_char,
    particles: usize,
    seed: u64,
    means: *mut f64,
    means_len: usize,
    result: *mut NsmcInferResult,
) -> NsmcStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return fail(NsmcStatus::NullPointer, "model is null") };
        if result.is_null() {
            return fail(NsmcStatus::NullPointer, "result is null");
        }
        if particles == 0 {
            return fail(NsmcStatus::InvalidArgument, "particles must be at least 1");
        }
        let ex = m.example.clone();
        let latents = ex.model.latents();
        if !means.is_null() && means_len != latents.len() {
            return fail(
                NsmcStatus::InvalidArgument,
                format!("means has {means_len} slots, model has {} latents", latents.len()),
            );
        }
        let text = if data.is_null() {
            None
        } else {
            let path = match str_arg(data, "data") {
                Ok(s) => s,
                Err(s) => return s,
            };
            match std::fs::read_to_string(path) {
                Ok(t) => Some(t),
                Err(e) => return fail(NsmcStatus::Io, format!("{path}: {e}")),
            }
        };
        let observed = match load_observations(&ex, text.as_deref(), seed) {
            Ok(o) => o,
            Err(e) => return fail(model_status(&e), e.to_string()),
        };
        let art = artifact.as_ref().map(|a| a.artifact.clone());
        if let Some(a) = &art {
            if let Err(e) = a.check_compatible(&ex.model, &ex.inverse) {
                return fail(NsmcStatus::Artifact, e.to_string());
            }
        }
        let kind = if art.is_some() { ProposalKind::Learned } else { ProposalKind::Prior };
        let problem = Problem { example: ex, artifact: art, observed };
        let ps = match run_inference(&problem, kind, Engine::Auto, &ResamplingScheme::default(), particles, seed) {
            Ok(ps) => ps,
            Err(nsmc::cli::CliError::Smc(e)) => return fail(smc_status(&e), e.to_string()),
            Err(e) => return fail(NsmcStatus::Runtime, e.to_string()),
        };
        if !means.is_null() {
            for (i, (mean, _)) in ps.posterior_summary(&latents).into_iter().enumerate() {
                *means.add(i) = mean;
            }
        }
        *result = NsmcInferResult {
            log_evidence: ps.log_marginal_likelihood(),
            final_ess: ps.ess(),
            steps: ps.steps(),
            unique_ancestries: ps.unique_ancestries(ps.steps()),
        };
        NsmcStatus::Ok
    })
}
