//! C interface to the trajectory predictor.
//!
//! Tables, models and forecast sets cross the boundary as opaque handles
//! that the caller releases with the matching `*_free` function. Every
//! fallible call returns an [`MtpgoStatus`]; the message of the most recent
//! failure on the calling thread is available through [`mtpgo_last_error`].
//! Panics are caught at the boundary and reported as `MTPGO_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mtpgo::data::{generate_synthetic, ingest_csv, sidecar_path, split, CenterPolicy, SplitSpec, SyntheticKind, TrajectoryTable};
use mtpgo::metrics::Scope;
use mtpgo::mixture::GmmForecast;
use mtpgo::model::Model;
use mtpgo::scenegraph::SceneSequence;
use mtpgo::trainer::{evaluate, prepare_scenes, train, Baseline, Checkpoint, Forecaster, TrainConfig, TrainStatus};
use mtpgo::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtpgoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Io = 5,
    Format = 6,
    Numeric = 7,
    Panic = 8,
}

/// Identity of one forecast agent.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MtpgoAgentInfo {
    /// Index of the scene window the agent belongs to.
    pub scene: usize,
    /// Source frame of the prediction instant.
    pub frame: i64,
    pub agent_id: u64,
    pub is_center: bool,
}

/// Aggregate metrics; likelihood fields are NaN for baselines.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MtpgoMetrics {
    pub scenes: usize,
    pub agents: usize,
    pub ade: f64,
    pub fde: f64,
    pub mr: f64,
    pub apde: f64,
    pub anll: f64,
    pub fnll: f64,
}

/// Opaque trajectory table.
pub struct MtpgoTable {
    table: TrajectoryTable,
}

/// Opaque trained model.
pub struct MtpgoModel {
    checkpoint: Checkpoint,
    model: Model,
}

struct AgentForecast {
    info: MtpgoAgentInfo,
    forecast: GmmForecast,
}

/// Opaque set of per-agent mixture forecasts in world coordinates.
pub struct MtpgoForecasts {
    components: usize,
    horizon: usize,
    agents: Vec<AgentForecast>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(MtpgoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NonFinite { .. } | Error::Numeric(_) => MtpgoStatus::Numeric,
            Error::Config(_) => MtpgoStatus::Config,
            Error::Data { .. } | Error::Invalid(_) | Error::Shape(_) => MtpgoStatus::Data,
            Error::Format(_) => MtpgoStatus::Format,
            Error::Io(_) => MtpgoStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MtpgoStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MtpgoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtpgoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MtpgoStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MtpgoStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(MtpgoStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(MtpgoStatus::NullPointer, format!("{what} is null")))
}

fn parse_config(text: Option<&str>) -> Result<TrainConfig, Failure> {
    match text {
        None => Ok(TrainConfig::default()),
        Some(t) => toml::from_str(t).map_err(|e| Failure(MtpgoStatus::Config, format!("configuration: {e}"))),
    }
}

fn windows(table: &TrajectoryTable, config: &TrainConfig, stride: usize) -> Result<Vec<SceneSequence>, Failure> {
    if stride == 0 {
        return Err(invalid("stride must be positive"));
    }
    Ok(prepare_scenes(table, config, stride, CenterPolicy::Random { seed: config.seed })?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtpgo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the full message length
/// including the terminator, so a second call can size the buffer.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Generates `n_scenes` synthetic scenes of `kind` (`"highway"`,
/// `"roundabout"` or `"fork"`).
///
/// # Safety
/// `kind` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_table_generate(
    kind: *const c_char,
    n_scenes: usize,
    seed: u64,
    out: *mut *mut MtpgoTable,
) -> MtpgoStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let name = str_arg(kind, "kind")?;
        let kind = SyntheticKind::parse(name).ok_or_else(|| invalid(format!("unknown scenario kind {name:?}")))?;
        let table = generate_synthetic(kind, n_scenes, seed)?;
        *out = Box::into_raw(Box::new(MtpgoTable { table }));
        Ok(())
    })
}

/// Reads a trajectory CSV. A null `geometry` selects the sidecar next to
/// the CSV.
///
/// # Safety
/// Strings must be NUL-terminated (or null where allowed); `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_table_load(
    csv: *const c_char,
    geometry: *const c_char,
    out: *mut *mut MtpgoTable,
) -> MtpgoStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let csv = PathBuf::from(str_arg(csv, "csv")?);
        let geometry = opt_str_arg(geometry, "geometry")?.map_or_else(|| sidecar_path(&csv), PathBuf::from);
        let table = ingest_csv(&csv, &geometry)?;
        *out = Box::into_raw(Box::new(MtpgoTable { table }));
        Ok(())
    })
}

/// Writes the table as CSV plus geometry sidecar.
///
/// # Safety
/// `table` must be a live handle and `csv` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_table_save(table: *const MtpgoTable, csv: *const c_char) -> MtpgoStatus {
    guard(|| {
        let t = handle(table, "table")?;
        t.table.save(&PathBuf::from(str_arg(csv, "csv")?))?;
        Ok(())
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `table` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_table_rows(table: *const MtpgoTable) -> usize {
    table.as_ref().map_or(0, |t| t.table.rows.len())
}

/// # Safety
/// `table` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_table_free(table: *mut MtpgoTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Trains a model on the training split of `table`. `config_toml` holds
/// training configuration keys (null for defaults). When `checkpoint` is
/// not null the checkpoint is also written there. Divergence returns
/// `MTPGO_STATUS_NUMERIC` and still hands out the last finite model.
///
/// # Safety
/// `table` must be a live handle, strings NUL-terminated or null, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_train(
    table: *const MtpgoTable,
    config_toml: *const c_char,
    stride: usize,
    checkpoint: *const c_char,
    out: *mut *mut MtpgoModel,
) -> MtpgoStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let t = handle(table, "table")?;
        let config = parse_config(opt_str_arg(config_toml, "config")?)?;
        config.validate()?;
        let path = opt_str_arg(checkpoint, "checkpoint")?.map(PathBuf::from);
        let (train_set, val_set, _) = split(windows(&t.table, &config, stride)?, &SplitSpec::default(), config.seed)?;
        let outcome = train(&config, &train_set, &val_set, |_| {})?;
        if let Some(p) = &path {
            outcome.checkpoint.save(p)?;
        }
        let model = outcome.checkpoint.model()?;
        *out = Box::into_raw(Box::new(MtpgoModel { checkpoint: outcome.checkpoint, model }));
        match outcome.status {
            TrainStatus::Completed => Ok(()),
            TrainStatus::Diverged { epoch, reason } => {
                Err(Failure(MtpgoStatus::Numeric, format!("training diverged in epoch {epoch}: {reason}")))
            }
        }
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_model_load(path: *const c_char, out: *mut *mut MtpgoModel) -> MtpgoStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let checkpoint = Checkpoint::load(&PathBuf::from(str_arg(path, "path")?))?;
        let model = checkpoint.model()?;
        *out = Box::into_raw(Box::new(MtpgoModel { checkpoint, model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_model_save(model: *const MtpgoModel, path: *const c_char) -> MtpgoStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let mut ck = m.checkpoint.clone();
        ck.params = m.model.params.clone();
        ck.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Mixture components M, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_model_components(model: *const MtpgoModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.components)
}

/// Prediction horizon in steps, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_model_horizon(model: *const MtpgoModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.horizon)
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_model_free(model: *mut MtpgoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Rollout forecasts for every agent of every window of `table`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_predict(
    model: *const MtpgoModel,
    table: *const MtpgoTable,
    stride: usize,
    out: *mut *mut MtpgoForecasts,
) -> MtpgoStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = handle(model, "model")?;
        let t = handle(table, "table")?;
        let scenes = windows(&t.table, &m.checkpoint.config, stride)?;
        let refs: Vec<&SceneSequence> = scenes.iter().collect();
        let forecasts = m.model.forecast(&refs)?;
        let mut agents = Vec::new();
        for (i, (scene, fc)) in scenes.iter().zip(forecasts).enumerate() {
            let [ox, oy] = scene.origin;
            for (a, mut f) in scene.agents.iter().zip(fc) {
                for path in &mut f.means {
                    for p in path.iter_mut() {
                        p[0] += ox;
                        p[1] += oy;
                    }
                }
                agents.push(AgentForecast {
                    info: MtpgoAgentInfo { scene: i, frame: scene.frame, agent_id: a.id.0, is_center: a.id == scene.center },
                    forecast: f,
                });
            }
        }
        let set = MtpgoForecasts { components: m.model.config.components, horizon: m.model.config.horizon, agents };
        *out = Box::into_raw(Box::new(set));
        Ok(())
    })
}

/// Number of agents in the set, or 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_forecasts_len(set: *const MtpgoForecasts) -> usize {
    set.as_ref().map_or(0, |s| s.agents.len())
}

/// # Safety
/// `set` must be a live handle and `info` writable.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_forecasts_info(
    set: *const MtpgoForecasts,
    index: usize,
    info: *mut MtpgoAgentInfo,
) -> MtpgoStatus {
    guard(|| {
        let s = handle(set, "forecasts")?;
        let info = out_ptr(info, "info")?;
        let a = s.agents.get(index).ok_or_else(|| invalid(format!("agent index {index} out of range")))?;
        *info = a.info;
        Ok(())
    })
}

/// Copies agent `index`'s mixture into caller buffers: `pi` holds M
/// weights, `means` M·T·2 values ordered (component, step, xy) and `covs`
/// M·T·4 row-major 2×2 covariances in the same order. Any buffer may be
/// null to skip it.
///
/// # Safety
/// Non-null buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_forecasts_copy(
    set: *const MtpgoForecasts,
    index: usize,
    pi: *mut f64,
    means: *mut f64,
    covs: *mut f64,
) -> MtpgoStatus {
    guard(|| {
        let s = handle(set, "forecasts")?;
        let f = &s.agents.get(index).ok_or_else(|| invalid(format!("agent index {index} out of range")))?.forecast;
        let (m, tf) = (s.components, s.horizon);
        if !pi.is_null() {
            std::slice::from_raw_parts_mut(pi, m).copy_from_slice(&f.pi);
        }
        if !means.is_null() {
            let dst = std::slice::from_raw_parts_mut(means, m * tf * 2);
            for (j, path) in f.means.iter().enumerate() {
                for (k, p) in path.iter().enumerate() {
                    dst[(j * tf + k) * 2..][..2].copy_from_slice(p);
                }
            }
        }
        if !covs.is_null() {
            let dst = std::slice::from_raw_parts_mut(covs, m * tf * 4);
            for (j, path) in f.covs.iter().enumerate() {
                for (k, c) in path.iter().enumerate() {
                    dst[(j * tf + k) * 4..][..4].copy_from_slice(c);
                }
            }
        }
        Ok(())
    })
}

/// # Safety
/// `set` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_forecasts_free(set: *mut MtpgoForecasts) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Evaluates `model`, or the analytic `baseline` (`"cv"`/`"ca"`) when
/// `model` is null, on every window of `table`. Baselines window the data
/// with `config_toml` (null for defaults); models use their own settings.
///
/// # Safety
/// Handles must be live or null where allowed, strings NUL-terminated or
/// null, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtpgo_evaluate(
    model: *const MtpgoModel,
    baseline: *const c_char,
    config_toml: *const c_char,
    table: *const MtpgoTable,
    stride: usize,
    center_only: bool,
    out: *mut MtpgoMetrics,
) -> MtpgoStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let t = handle(table, "table")?;
        let scope = if center_only { Scope::Center } else { Scope::All };
        let report = match model.as_ref() {
            Some(m) => {
                if !baseline.is_null() {
                    return Err(invalid("give either a model or a baseline"));
                }
                evaluate(&m.model, &windows(&t.table, &m.checkpoint.config, stride)?, scope)?
            }
            None => {
                let name = str_arg(baseline, "baseline")?;
                let b = Baseline::parse(name).ok_or_else(|| invalid(format!("unknown baseline {name:?}")))?;
                let config = parse_config(opt_str_arg(config_toml, "config")?)?;
                evaluate(&b, &windows(&t.table, &config, stride)?, scope)?
            }
        };
        let mean = |s: Option<mtpgo::metrics::Stat>| s.map_or(f64::NAN, |s| s.mean);
        *out = MtpgoMetrics {
            scenes: report.scenes.len(),
            agents: report.agents,
            ade: mean(report.ade),
            fde: mean(report.fde),
            mr: mean(report.mr),
            apde: mean(report.apde),
            anll: mean(report.anll),
            fnll: mean(report.fnll),
        };
        Ok(())
    })
}
