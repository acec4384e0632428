//! C ABI over emodetect.
//!
//! Every fallible call returns an [`EmoStatus`]; on failure the message is
//! available from [`emo_last_error`] on the same thread. Handles are opaque
//! and must be released with their matching `_free` function. Strings
//! returned through out-parameters are owned by the caller and released
//! with [`emo_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use emodetect::dataset::{load_dataset, read_predictions, write_predictions, ColumnMap, Dataset, PredictionFile};
use emodetect::ensemble::{vote, EnsembleSpec, VoteMode};
use emodetect::eval::evaluate;
use emodetect::gateway::{BackendConfig, Gateway};
use emodetect::strategies::{classify, run_strategy, StrategyConfig, StrategyKind};
use emodetect::{EmotionLabel, Instance, ModelId};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmoStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Parse = 4,
    Io = 5,
    Data = 6,
    Config = 7,
    Backend = 8,
    /// The call succeeded but some predictions fell back to Neutral.
    Degraded = 9,
    Panic = 255,
}

/// Loaded gold or unlabeled dataset.
pub struct EmoDataset(Dataset);

/// Prediction file for one run.
pub struct EmoPredictions(PredictionFile);

/// A strategy bound to a backend.
pub struct EmoEngine {
    cfg: StrategyConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

struct Failure(EmoStatus, String);

impl Failure {
    fn new(status: EmoStatus, msg: impl ToString) -> Self {
        Failure(status, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<EmoStatus, Failure>) -> EmoStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside emodetect");
            EmoStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(EmoStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(EmoStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::new(EmoStatus::NullArgument, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(EmoStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn data_err(e: emodetect::dataset::DataError) -> Failure {
    let status = match e {
        emodetect::dataset::DataError::Io { .. } => EmoStatus::Io,
        _ => EmoStatus::Data,
    };
    Failure::new(status, e)
}

fn label_code(l: EmotionLabel) -> i32 {
    l.index() as i32
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next emodetect call on the same thread.
#[no_mangle]
pub extern "C" fn emo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn emo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Canonical name of label code 0..=5 (Love, Joy, Anger, Fear, Sadness,
/// Neutral), or null for anything else. Static storage.
#[no_mangle]
pub extern "C" fn emo_label_name(code: i32) -> *const c_char {
    const NAMES: [&CStr; 6] = [c"Love", c"Joy", c"Anger", c"Fear", c"Sadness", c"Neutral"];
    usize::try_from(code).ok().and_then(|i| NAMES.get(i)).map_or(ptr::null(), |s| s.as_ptr())
}

/// Parses raw model output into a label code.
///
/// # Safety
/// `raw` must be a valid C string; `out_code` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emo_label_parse(raw: *const c_char, out_code: *mut i32) -> EmoStatus {
    guard(|| {
        let raw = str_arg(raw, "raw")?;
        out_arg(out_code, "out_code")?;
        let l = emodetect::parse_label(raw).map_err(|e| Failure::new(EmoStatus::Parse, e))?;
        *out_code = label_code(l);
        Ok(EmoStatus::Ok)
    })
}

/// Loads a TSV/CSV dataset. Null column names select the defaults
/// (`ID`, `Texts`, `Labels`); `labeled == 0` ignores the label column.
///
/// # Safety
/// String arguments must be null or valid C strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emo_dataset_load(
    path: *const c_char,
    id_col: *const c_char,
    text_col: *const c_char,
    label_col: *const c_char,
    labeled: i32,
    out: *mut *mut EmoDataset,
) -> EmoStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        out_arg(out, "out")?;
        let mut cols = ColumnMap::default();
        if let Some(c) = opt_str_arg(id_col, "id_col")? {
            cols.id = c.to_string();
        }
        if let Some(c) = opt_str_arg(text_col, "text_col")? {
            cols.text = c.to_string();
        }
        if let Some(c) = opt_str_arg(label_col, "label_col")? {
            cols.label = Some(c.to_string());
        }
        if labeled == 0 {
            cols = cols.unlabeled();
        }
        let d = load_dataset(path, &cols).map_err(data_err)?;
        *out = Box::into_raw(Box::new(EmoDataset(d)));
        Ok(EmoStatus::Ok)
    })
}

/// # Safety
/// The handle must be null or live.
#[no_mangle]
pub unsafe extern "C" fn emo_dataset_len(d: *const EmoDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `d` must be null or a handle from [`emo_dataset_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn emo_dataset_free(d: *mut EmoDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emo_predictions_read(path: *const c_char, out: *mut *mut EmoPredictions) -> EmoStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        out_arg(out, "out")?;
        let pf = read_predictions(path).map_err(data_err)?;
        *out = Box::into_raw(Box::new(EmoPredictions(pf)));
        Ok(EmoStatus::Ok)
    })
}

/// # Safety
/// `p` must be a live predictions handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn emo_predictions_write(p: *const EmoPredictions, path: *const c_char) -> EmoStatus {
    guard(|| {
        let p = ref_arg(p, "predictions")?;
        let path = str_arg(path, "path")?;
        write_predictions(&p.0, path).map_err(data_err)?;
        Ok(EmoStatus::Ok)
    })
}

/// # Safety
/// The handle must be null or live.
#[no_mangle]
pub unsafe extern "C" fn emo_predictions_len(p: *const EmoPredictions) -> usize {
    p.as_ref().map_or(0, |p| p.0.len())
}

/// Number of predictions that fell back to Neutral.
///
/// # Safety
/// The handle must be null or live.
#[no_mangle]
pub unsafe extern "C" fn emo_predictions_fallbacks(p: *const EmoPredictions) -> usize {
    p.as_ref().map_or(0, |p| p.0.fallback_count())
}

/// Label code of prediction `index`.
///
/// # Safety
/// `p` must be a live predictions handle; `out_code` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emo_predictions_label(p: *const EmoPredictions, index: usize, out_code: *mut i32) -> EmoStatus {
    guard(|| {
        let p = ref_arg(p, "predictions")?;
        out_arg(out_code, "out_code")?;
        let pred = p.0.predictions.get(index).ok_or_else(|| {
            Failure::new(EmoStatus::InvalidArgument, format!("index {index} out of range ({} predictions)", p.0.len()))
        })?;
        *out_code = label_code(pred.label);
        Ok(EmoStatus::Ok)
    })
}

/// # Safety
/// `p` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn emo_predictions_free(p: *mut EmoPredictions) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Scores predictions against gold labels; writes the report as JSON.
///
/// # Safety
/// Handles must be live; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emo_evaluate(
    gold: *const EmoDataset,
    pred: *const EmoPredictions,
    out_json: *mut *mut c_char,
) -> EmoStatus {
    guard(|| {
        let gold = ref_arg(gold, "gold")?;
        let pred = ref_arg(pred, "pred")?;
        out_arg(out_json, "out_json")?;
        let report = evaluate(&gold.0, &pred.0).map_err(|e| Failure::new(EmoStatus::Data, e))?;
        let json = serde_json::to_string(&report).map_err(|e| Failure::new(EmoStatus::Data, e))?;
        *out_json = CString::new(json).map_err(|e| Failure::new(EmoStatus::Data, e))?.into_raw();
        Ok(EmoStatus::Ok)
    })
}

/// Majority vote over `n` member files. `mode` is `unweighted` or
/// `weighted`; weighted mode takes `weights_json`, an object mapping each
/// member's model id to its weight.
///
/// # Safety
/// `members` must point to `n` live handles; strings must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn emo_vote(
    members: *const *const EmoPredictions,
    n: usize,
    mode: *const c_char,
    weights_json: *const c_char,
    name: *const c_char,
    out: *mut *mut EmoPredictions,
) -> EmoStatus {
    guard(|| {
        if members.is_null() {
            return Err(Failure::new(EmoStatus::NullArgument, "members is null"));
        }
        out_arg(out, "out")?;
        let mode_str = str_arg(mode, "mode")?;
        let mode: VoteMode = serde_json::from_value(serde_json::Value::String(mode_str.to_string()))
            .map_err(|_| Failure::new(EmoStatus::InvalidArgument, format!("unknown vote mode {mode_str:?}")))?;
        if mode == VoteMode::LlmAdjudicated {
            return Err(Failure::new(EmoStatus::InvalidArgument, "llm_adjudicated voting is not exposed over the C ABI"));
        }
        let files: Vec<&PredictionFile> = std::slice::from_raw_parts(members, n)
            .iter()
            .enumerate()
            .map(|(i, p)| ref_arg(*p, &format!("members[{i}]")).map(|p| &p.0))
            .collect::<Result<_, _>>()?;
        let name = opt_str_arg(name, "name")?.unwrap_or("ensemble");
        let mut spec = EnsembleSpec::new(name, mode, files.iter().map(|f| f.model_id.as_str().to_string()).collect());
        if let Some(w) = opt_str_arg(weights_json, "weights_json")? {
            spec.weights = serde_json::from_str(w).map_err(|e| Failure::new(EmoStatus::Parse, format!("weights: {e}")))?;
        }
        let pf = vote(&spec, &files).map_err(|e| Failure::new(EmoStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(EmoPredictions(pf)));
        Ok(EmoStatus::Ok)
    })
}

/// Builds an engine from a backend TOML file and a strategy name
/// (`zero-shot`, `zse`, `zsec`, `finetuned`). Credentials are read from the
/// environment variable named in the backend file.
///
/// # Safety
/// Strings must be valid C strings (`model_id` may be null); `out` writable.
#[no_mangle]
pub unsafe extern "C" fn emo_engine_new(
    backend_config: *const c_char,
    strategy: *const c_char,
    model_id: *const c_char,
    out: *mut *mut EmoEngine,
) -> EmoStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(backend_config, "backend_config")?);
        let strategy = str_arg(strategy, "strategy")?;
        out_arg(out, "out")?;
        let kind: StrategyKind = serde_json::from_value(serde_json::Value::String(strategy.to_string()))
            .map_err(|_| Failure::new(EmoStatus::InvalidArgument, format!("unknown strategy {strategy:?}")))?;
        if kind == StrategyKind::FewShot {
            return Err(Failure::new(EmoStatus::InvalidArgument, "few-shot needs a training set; use the CLI"));
        }
        let model_id = opt_str_arg(model_id, "model_id")?.unwrap_or(kind.name());
        let model_id = ModelId::new(model_id).map_err(|_| Failure::new(EmoStatus::InvalidArgument, "empty model_id"))?;
        let bcfg = BackendConfig::load(&path).map_err(|e| Failure::new(EmoStatus::Config, e))?;
        let gw = Gateway::from_config(&bcfg).map_err(|e| Failure::new(EmoStatus::Config, e))?;
        let cfg = StrategyConfig::new(kind, model_id, Arc::new(gw));
        cfg.validate(None).map_err(|e| Failure::new(EmoStatus::Config, e))?;
        *out = Box::into_raw(Box::new(EmoEngine { cfg }));
        Ok(EmoStatus::Ok)
    })
}

/// Classifies one text. Returns `Degraded` (with the code set to Neutral)
/// when the model output could not be parsed.
///
/// # Safety
/// `engine` must be live; `text` a valid C string; `out_code` writable.
#[no_mangle]
pub unsafe extern "C" fn emo_engine_classify_text(engine: *const EmoEngine, text: *const c_char, out_code: *mut i32) -> EmoStatus {
    guard(|| {
        let engine = ref_arg(engine, "engine")?;
        let text = str_arg(text, "text")?;
        out_arg(out_code, "out_code")?;
        let c = classify(&Instance::new("0", text), &engine.cfg).map_err(|e| Failure::new(EmoStatus::Backend, e))?;
        *out_code = label_code(c.prediction.label);
        Ok(if c.prediction.fallback_applied() { EmoStatus::Degraded } else { EmoStatus::Ok })
    })
}

/// Runs the engine over a dataset. Returns `Degraded` when any prediction
/// fell back to Neutral; the output handle is set either way.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emo_engine_run(engine: *const EmoEngine, d: *const EmoDataset, out: *mut *mut EmoPredictions) -> EmoStatus {
    guard(|| {
        let engine = ref_arg(engine, "engine")?;
        let d = ref_arg(d, "dataset")?;
        out_arg(out, "out")?;
        let run = run_strategy(&d.0, &engine.cfg).map_err(|e| {
            let status = if e.is_fatal() { EmoStatus::Config } else { EmoStatus::Backend };
            Failure::new(status, e)
        })?;
        let degraded = run.predictions.fallback_count() > 0;
        *out = Box::into_raw(Box::new(EmoPredictions(run.predictions)));
        Ok(if degraded { EmoStatus::Degraded } else { EmoStatus::Ok })
    })
}

/// # Safety
/// `e` must be null or a handle from [`emo_engine_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn emo_engine_free(e: *mut EmoEngine) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = emo_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn label_codes_follow_canonical_order() {
        for (i, l) in EmotionLabel::ALL.iter().enumerate() {
            let name = unsafe { CStr::from_ptr(emo_label_name(i as i32)) };
            assert_eq!(name.to_str().unwrap(), l.canonical_text());
        }
        assert!(emo_label_name(6).is_null());
        assert!(emo_label_name(-1).is_null());
    }

    #[test]
    fn parse_reports_errors() {
        let mut code = -1;
        assert_eq!(unsafe { emo_label_parse(c"Joy".as_ptr(), &mut code) }, EmoStatus::Ok);
        assert_eq!(code, 1);
        assert_eq!(unsafe { emo_label_parse(c"no idea".as_ptr(), &mut code) }, EmoStatus::Parse);
        assert!(!last_error().is_empty());
        assert_eq!(unsafe { emo_label_parse(ptr::null(), &mut code) }, EmoStatus::NullArgument);
        assert!(last_error().contains("raw"));
    }

    #[test]
    fn success_clears_last_error() {
        let mut code = 0;
        unsafe { emo_label_parse(ptr::null(), &mut code) };
        assert!(!emo_last_error().is_null());
        unsafe { emo_label_parse(c"Fear".as_ptr(), &mut code) };
        assert!(emo_last_error().is_null());
    }

    #[test]
    fn null_handles_are_harmless() {
        unsafe {
            assert_eq!(emo_dataset_len(ptr::null()), 0);
            assert_eq!(emo_predictions_len(ptr::null()), 0);
            emo_dataset_free(ptr::null_mut());
            emo_predictions_free(ptr::null_mut());
            emo_engine_free(ptr::null_mut());
            emo_string_free(ptr::null_mut());
        }
    }

    #[test]
    fn unknown_vote_mode() {
        let mut out = ptr::null_mut();
        let members: [*const EmoPredictions; 0] = [];
        let s = unsafe { emo_vote(members.as_ptr(), 0, c"plurality".as_ptr(), ptr::null(), ptr::null(), &mut out) };
        assert_eq!(s, EmoStatus::InvalidArgument);
        assert!(out.is_null());
    }
}
