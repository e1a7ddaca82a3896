//! C ABI over the simulator core.
//!
//! Every function returns an [`SgpStatus`]; on failure the message is kept
//! per thread and read back with [`sgp_last_error`]. Models and runs are
//! opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use libc::size_t;

use splitgp_core::diagnostics::{self, BoundConstants};
use splitgp_core::fedsim::{self, FederationCheckpoint};
use splitgp_core::harness::{self, ExperimentConfig, RunManifest, Stages};
use splitgp_core::inference::{self, Exit};
use splitgp_core::latency::{self, LatencyParams, RateFormula, Threshold};
use splitgp_core::nn::LayeredModel;
use splitgp_core::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Numerical = 5,
    Regime = 6,
    InsufficientSamples = 7,
    MissingFiles = 8,
    Io = 9,
    Json = 10,
    Stage = 11,
    Utf8 = 12,
    Panic = 13,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SgpStatus {
    match e {
        Error::Shape(_) => SgpStatus::Shape,
        Error::InvalidArgument(_) | Error::DegenerateSplit { .. } => SgpStatus::InvalidArgument,
        Error::InsufficientSamples { .. } => SgpStatus::InsufficientSamples,
        Error::Numerical { .. } => SgpStatus::Numerical,
        Error::Config { .. } => SgpStatus::Config,
        Error::Regime(_) => SgpStatus::Regime,
        Error::Stage { .. } => SgpStatus::Stage,
        Error::MissingFiles(_) => SgpStatus::MissingFiles,
        Error::Io { .. } => SgpStatus::Io,
        Error::Json(_) => SgpStatus::Json,
    }
}

struct Failure(SgpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SgpStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SgpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SgpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SgpStatus::Panic
        }
    }
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(p: *mut T, what: &str, v: T) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(SgpStatus::Utf8, format!("{what}: {e}")))
}

unsafe fn slice<'a>(p: *const f64, len: size_t, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sgp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Latency operating point; sizes in parameters, rates per unit time.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SgpLatencyParams {
    pub client_rate: f64,
    pub server_rate: f64,
    pub uplink_rate: f64,
    pub input_dim: f64,
    pub cut_dim: f64,
    /// Offloaded fraction weighting the uplink and server terms.
    pub beta: f64,
    pub phi_size: f64,
    pub head_size: f64,
    pub theta_size: f64,
    pub samples: f64,
    pub budget: f64,
}

impl From<&SgpLatencyParams> for LatencyParams {
    fn from(p: &SgpLatencyParams) -> Self {
        LatencyParams {
            client_rate: p.client_rate,
            server_rate: p.server_rate,
            uplink_rate: p.uplink_rate,
            input_dim: p.input_dim,
            cut_dim: p.cut_dim,
            beta: p.beta,
            phi_size: p.phi_size,
            head_size: p.head_size,
            theta_size: p.theta_size,
            samples: p.samples,
            budget: p.budget,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgpThresholdKind {
    Always = 0,
    Never = 1,
    AtMost = 2,
    AtLeast = 3,
}

/// A rate threshold verdict; `value` is meaningful for the bounded kinds.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SgpThreshold {
    pub kind: SgpThresholdKind,
    pub value: f64,
}

impl From<Threshold> for SgpThreshold {
    fn from(t: Threshold) -> Self {
        let (kind, value) = match t {
            Threshold::Always => (SgpThresholdKind::Always, f64::NAN),
            Threshold::Never => (SgpThresholdKind::Never, f64::NAN),
            Threshold::AtMost(v) => (SgpThresholdKind::AtMost, v),
            Threshold::AtLeast(v) => (SgpThresholdKind::AtLeast, v),
        };
        SgpThreshold { kind, value }
    }
}

/// Writes the full-at-client, full-at-server and split inference times.
///
/// # Safety
/// `params` must point to a valid struct; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_latency_times(
    params: *const SgpLatencyParams,
    tau_client_full: *mut f64,
    tau_server_full: *mut f64,
    tau_splitgp: *mut f64,
) -> SgpStatus {
    guard(|| {
        let p: LatencyParams = reference(params, "params")?.into();
        p.validate()?;
        write_out(tau_client_full, "tau_client_full", latency::tau_client_full(&p))?;
        write_out(tau_server_full, "tau_server_full", latency::tau_server_full(&p))?;
        write_out(tau_splitgp, "tau_splitgp", latency::tau_splitgp(&p))
    })
}

/// Client compute rates at which the split deployment is no slower than the
/// full model at the client.
///
/// # Safety
/// `params` must point to a valid struct; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_client_rate_threshold(params: *const SgpLatencyParams, out: *mut SgpThreshold) -> SgpStatus {
    guard(|| {
        let p: LatencyParams = reference(params, "params")?.into();
        p.validate()?;
        write_out(out, "out", latency::pc_threshold(&p).into())
    })
}

/// Uplink rates at which the split deployment is no slower than the full
/// model at the server. `exact` selects the direct rearrangement; zero
/// evaluates the closed form.
///
/// # Safety
/// `params` must point to a valid struct; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_uplink_rate_threshold(
    params: *const SgpLatencyParams,
    exact: bool,
    out: *mut SgpThreshold,
) -> SgpStatus {
    guard(|| {
        let p: LatencyParams = reference(params, "params")?.into();
        p.validate()?;
        let formula = if exact { RateFormula::Exact } else { RateFormula::ClosedForm };
        write_out(out, "out", latency::rate_threshold(&p, formula).into())
    })
}

/// Largest client-segment size meeting the budget, or a negative value when
/// no size at least `phi_min` does.
///
/// # Safety
/// `params` must point to a valid struct; `upper` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_feasible_phi_upper(
    params: *const SgpLatencyParams,
    phi_min: f64,
    upper: *mut f64,
) -> SgpStatus {
    guard(|| {
        let p: LatencyParams = reference(params, "params")?.into();
        p.validate()?;
        let v = latency::feasible_phi_range(&p, phi_min)?.map_or(-1.0, |r| r.upper);
        write_out(upper, "upper", v)
    })
}

/// Step size `eta0 / (a + round)` with `a = (c + 4) / (1 - lambda^2)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_lr_schedule(round: size_t, eta0: f64, c: f64, lambda: f64, out: *mut f64) -> SgpStatus {
    guard(|| write_out(out, "out", fedsim::lr_schedule(round, eta0, c, lambda)?))
}

/// Personalization penalty of the convergence bound.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_epsilon(lambda: f64, c: f64, grad_bound: f64, smoothness: f64, out: *mut f64) -> SgpStatus {
    guard(|| write_out(out, "out", diagnostics::epsilon_lambda(lambda, c, grad_bound, smoothness)?))
}

/// Constants of the convergence bound; `sigmas` holds one entry per client.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SgpBoundConstants {
    pub smoothness: f64,
    pub grad_bound: f64,
    pub sigmas: *const f64,
    pub num_sigmas: size_t,
    pub c: f64,
    pub eta0: f64,
    pub initial_objective: f64,
    pub optimum: f64,
}

/// Right-hand side of the convergence bound after `rounds` rounds.
///
/// # Safety
/// `constants` must be valid and its `sigmas` must hold `num_sigmas`
/// values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_bound_rhs(
    rounds: size_t,
    constants: *const SgpBoundConstants,
    lambda: f64,
    out: *mut f64,
) -> SgpStatus {
    guard(|| {
        let k = reference(constants, "constants")?;
        let bc = BoundConstants {
            smoothness: k.smoothness,
            grad_bound: k.grad_bound,
            sigmas: slice(k.sigmas, k.num_sigmas, "sigmas")?.to_vec(),
            c: k.c,
            eta0: k.eta0,
            initial_objective: k.initial_objective,
            optimum: k.optimum,
        };
        write_out(out, "out", diagnostics::bound_rhs(rounds, &bc, lambda)?)
    })
}

/// A sequential network.
pub struct SgpModel {
    model: LayeredModel,
}

fn into_handle(model: LayeredModel) -> *mut SgpModel {
    Box::into_raw(Box::new(SgpModel { model }))
}

/// Parses a model from its JSON checkpoint.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_model_from_json(json: *const c_char, out: *mut *mut SgpModel) -> SgpStatus {
    guard(|| {
        let model = LayeredModel::from_json(string(json, "json")?)?;
        write_out(out, "out", into_handle(model))
    })
}

/// Extracts one segment of one client from a federation checkpoint:
/// `segment` 0 is the client segment, 1 the auxiliary head and 2 the server
/// segment that client uses.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_checkpoint_segment(
    json: *const c_char,
    client: size_t,
    segment: u32,
    out: *mut *mut SgpModel,
) -> SgpStatus {
    guard(|| {
        let ckpt: FederationCheckpoint =
            serde_json::from_str(string(json, "json")?).map_err(Error::from)?;
        let n = ckpt.clients.len();
        let c = ckpt
            .clients
            .into_iter()
            .nth(client)
            .ok_or_else(|| Failure(SgpStatus::InvalidArgument, format!("client {client} of {n}")))?;
        let model = match segment {
            0 => c.phi,
            1 => c.head,
            2 => c.local_theta.unwrap_or(ckpt.theta),
            s => return Err(Failure(SgpStatus::InvalidArgument, format!("segment {s} is not 0, 1 or 2"))),
        };
        write_out(out, "out", into_handle(model))
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sgp_model_free(model: *mut SgpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the input and output widths of a model.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_model_dims(model: *const SgpModel, input_dim: *mut size_t, output_dim: *mut size_t) -> SgpStatus {
    guard(|| {
        let m = &reference(model, "model")?.model;
        write_out(input_dim, "input_dim", m.input_dim())?;
        write_out(output_dim, "output_dim", m.output_dim())
    })
}

/// Forward pass; `output_len` must equal the model's output width.
///
/// # Safety
/// `model` must be a live handle; `input` must hold `input_len` values and
/// `output` must have room for `output_len`.
#[no_mangle]
pub unsafe extern "C" fn sgp_model_forward(
    model: *const SgpModel,
    input: *const f64,
    input_len: size_t,
    output: *mut f64,
    output_len: size_t,
) -> SgpStatus {
    guard(|| {
        let m = &reference(model, "model")?.model;
        let y = m.forward(slice(input, input_len, "input")?)?;
        if output_len != y.len() {
            return Err(Failure(
                SgpStatus::Shape,
                format!("output buffer holds {output_len} values, model produces {}", y.len()),
            ));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(&y);
        Ok(())
    })
}

/// Outcome of entropy-thresholded routing.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SgpRouting {
    pub prediction: size_t,
    /// True when the client exit answered.
    pub client_exit: bool,
    pub entropy: f64,
}

/// Predicts at the client exit when its entropy is at most `threshold`,
/// otherwise with the server segment.
///
/// # Safety
/// The three models must be live handles; `input` must hold `input_len`
/// values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_route_and_predict(
    phi: *const SgpModel,
    head: *const SgpModel,
    theta: *const SgpModel,
    input: *const f64,
    input_len: size_t,
    threshold: f64,
    out: *mut SgpRouting,
) -> SgpStatus {
    guard(|| {
        let r = inference::route_and_predict(
            &reference(phi, "phi")?.model,
            &reference(head, "head")?.model,
            &reference(theta, "theta")?.model,
            slice(input, input_len, "input")?,
            threshold,
        )?;
        write_out(
            out,
            "out",
            SgpRouting {
                prediction: r.prediction,
                client_exit: r.exit == Exit::Client,
                entropy: r.entropy,
            },
        )
    })
}

/// A completed experiment run.
pub struct SgpRun {
    dir: PathBuf,
    manifest_json: CString,
}

/// Runs every stage of the experiment described by `config_json` and writes
/// its artifacts to `out_dir`, or to the config's directory when null.
///
/// # Safety
/// `config_json` and a non-null `out_dir` must be nul-terminated strings;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_run_experiment(
    config_json: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut SgpRun,
) -> SgpStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_json(string(config_json, "config_json")?)?;
        let dir = if out_dir.is_null() {
            cfg.output_dir.clone()
        } else {
            PathBuf::from(string(out_dir, "out_dir")?)
        };
        let manifest: RunManifest = harness::run_experiment(&cfg, Some(&dir), Stages::ALL)?;
        harness::emit_report(&dir)?;
        let json = serde_json::to_string(&manifest).map_err(Error::from)?;
        let manifest_json = CString::new(json).map_err(|e| Failure(SgpStatus::Json, e.to_string()))?;
        write_out(out, "out", Box::into_raw(Box::new(SgpRun { dir, manifest_json })))
    })
}

/// The run manifest as JSON; owned by the handle.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sgp_run_manifest(run: *const SgpRun) -> *const c_char {
    run.as_ref().map_or(ptr::null(), |r| r.manifest_json.as_ptr())
}

/// Reads a summary file (`summary.json`, `eval.csv`, ...) of the run into
/// a new string released with [`sgp_string_free`].
///
/// # Safety
/// `run` must be a live handle, `name` a nul-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sgp_run_read_file(run: *const SgpRun, name: *const c_char, out: *mut *mut c_char) -> SgpStatus {
    guard(|| {
        let r = reference(run, "run")?;
        let name = string(name, "name")?;
        if name.contains("..") {
            return Err(Failure(SgpStatus::InvalidArgument, "name must stay inside the run directory".into()));
        }
        let path = r.dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| Failure(SgpStatus::Io, format!("{}: {e}", path.display())))?;
        let c = CString::new(text).map_err(|e| Failure(SgpStatus::Utf8, e.to_string()))?;
        write_out(out, "out", c.into_raw())
    })
}

/// Releases a run handle; the files on disk are kept. Null is ignored.
///
/// # Safety
/// `run` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sgp_run_free(run: *mut SgpRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sgp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
