//! C ABI for the testbed: opaque handles over the config, dataset, and
//! model types, status-code errors, and a thread-local error message.
//!
//! Every function is panic-safe (panics become `NumericFailure`) and
//! null-checks its pointer arguments. Handles must be released with their
//! matching `_free` function exactly once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drfx_core::distill::{
    distill_fixed, evaluate, train_supervised, Classifier, DistillConfig, KdMode,
};
use drfx_core::featurizer::{build_dataset, stft, DatasetSplit};
use drfx_core::harness::ExperimentConfig;
use drfx_core::models::{config_hash, load_checkpoint, save_checkpoint, Student, Teacher};
use drfx_core::ppoctrl::dynamic_distill;
use drfx_core::sigmodel::{sample_fleet, FrameMeta, IqFrame};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DrfxStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidConfig = 2,
    MissingDependency = 3,
    NumericFailure = 4,
    IoError = 5,
    BufferTooSmall = 6,
}

/// Dataset split selector.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DrfxSplit {
    Train = 0,
    Val = 1,
    Test = 2,
}

pub struct DrfxConfig(ExperimentConfig);
pub struct DrfxDataset(DatasetSplit);
pub struct DrfxTeacher(Teacher);
pub struct DrfxStudent(Student);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(cleaned).unwrap());
}

fn fail(status: DrfxStatus, msg: &str) -> DrfxStatus {
    set_error(msg);
    status
}

/// Message for the most recent error on this thread; valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn drfx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn drfx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

fn guarded<T>(
    null_out: T,
    body: impl FnOnce() -> T,
) -> T {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(v) => v,
        Err(_) => {
            set_error("internal panic");
            null_out
        }
    }
}

// ---- config ----

#[no_mangle]
pub extern "C" fn drfx_config_default() -> *mut DrfxConfig {
    Box::into_raw(Box::new(DrfxConfig(ExperimentConfig::default())))
}

/// Parse and validate a config from a JSON string; null on failure (see
/// `drfx_last_error`).
#[no_mangle]
pub unsafe extern "C" fn drfx_config_from_json(json: *const c_char) -> *mut DrfxConfig {
    if json.is_null() {
        set_error("json is null");
        return std::ptr::null_mut();
    }
    guarded(std::ptr::null_mut(), || {
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(_) => {
                set_error("json is not valid UTF-8");
                return std::ptr::null_mut();
            }
        };
        let cfg: ExperimentConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return std::ptr::null_mut();
            }
        };
        if let Err(e) = cfg.validate() {
            set_error(&e.to_string());
            return std::ptr::null_mut();
        }
        Box::into_raw(Box::new(DrfxConfig(cfg)))
    })
}

/// Override the config's seed in place.
#[no_mangle]
pub unsafe extern "C" fn drfx_config_set_seed(cfg: *mut DrfxConfig, seed: u64) -> DrfxStatus {
    match cfg.as_mut() {
        Some(c) => {
            c.0.seed = seed;
            c.0.distill.seed = seed;
            c.0.controller.seed = seed;
            DrfxStatus::Ok
        }
        None => fail(DrfxStatus::NullArgument, "cfg is null"),
    }
}

#[no_mangle]
pub unsafe extern "C" fn drfx_config_free(cfg: *mut DrfxConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

// ---- dataset ----

/// Sample a fleet and build the featurized 6:2:2 dataset from the config.
#[no_mangle]
pub unsafe extern "C" fn drfx_dataset_build(cfg: *const DrfxConfig) -> *mut DrfxDataset {
    let Some(cfg) = cfg.as_ref() else {
        set_error("cfg is null");
        return std::ptr::null_mut();
    };
    guarded(std::ptr::null_mut(), || {
        let c = &cfg.0;
        let mut fleet_rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0xF1EE7);
        let fleet = match sample_fleet(&mut fleet_rng, c.num_devices, &c.fleet_ranges) {
            Ok(f) => f,
            Err(e) => {
                set_error(&e.to_string());
                return std::ptr::null_mut();
            }
        };
        match build_dataset(
            &fleet, &c.channel, &c.waveform, &c.stft, &c.augment, c.per_device, c.seed,
        ) {
            Ok(ds) => Box::into_raw(Box::new(DrfxDataset(ds))),
            Err(e) => {
                set_error(&e.to_string());
                std::ptr::null_mut()
            }
        }
    })
}

/// Number of samples in one split; 0 when `ds` is null.
#[no_mangle]
pub unsafe extern "C" fn drfx_dataset_len(ds: *const DrfxDataset, split: DrfxSplit) -> usize {
    match ds.as_ref() {
        Some(d) => split_of(&d.0, split).len(),
        None => 0,
    }
}

#[no_mangle]
pub unsafe extern "C" fn drfx_dataset_free(ds: *mut DrfxDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

fn split_of(ds: &DatasetSplit, split: DrfxSplit) -> &[drfx_core::featurizer::Spectrogram] {
    match split {
        DrfxSplit::Train => &ds.train,
        DrfxSplit::Val => &ds.val,
        DrfxSplit::Test => &ds.test,
    }
}

// ---- models ----

#[no_mangle]
pub unsafe extern "C" fn drfx_teacher_new(cfg: *const DrfxConfig) -> *mut DrfxTeacher {
    let Some(cfg) = cfg.as_ref() else {
        set_error("cfg is null");
        return std::ptr::null_mut();
    };
    guarded(std::ptr::null_mut(), || {
        match Teacher::new(cfg.0.teacher.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.0.seed)) {
            Ok(t) => Box::into_raw(Box::new(DrfxTeacher(t))),
            Err(e) => {
                set_error(&e.to_string());
                std::ptr::null_mut()
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn drfx_student_new(cfg: *const DrfxConfig) -> *mut DrfxStudent {
    let Some(cfg) = cfg.as_ref() else {
        set_error("cfg is null");
        return std::ptr::null_mut();
    };
    guarded(std::ptr::null_mut(), || {
        match Student::new(cfg.0.student.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.0.seed)) {
            Ok(s) => Box::into_raw(Box::new(DrfxStudent(s))),
            Err(e) => {
                set_error(&e.to_string());
                std::ptr::null_mut()
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn drfx_teacher_free(t: *mut DrfxTeacher) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

#[no_mangle]
pub unsafe extern "C" fn drfx_student_free(s: *mut DrfxStudent) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

#[no_mangle]
pub unsafe extern "C" fn drfx_teacher_param_count(t: *const DrfxTeacher) -> usize {
    t.as_ref().map_or(0, |t| t.0.params().param_count())
}

#[no_mangle]
pub unsafe extern "C" fn drfx_student_param_count(s: *const DrfxStudent) -> usize {
    s.as_ref().map_or(0, |s| s.0.params().param_count())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, DrfxStatus> {
    if p.is_null() {
        set_error("path is null");
        return Err(DrfxStatus::NullArgument);
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(DrfxStatus::InvalidConfig)
        }
    }
}

#[no_mangle]
pub unsafe extern "C" fn drfx_teacher_save(
    t: *const DrfxTeacher,
    cfg: *const DrfxConfig,
    path: *const c_char,
) -> DrfxStatus {
    let (Some(t), Some(cfg)) = (t.as_ref(), cfg.as_ref()) else {
        return fail(DrfxStatus::NullArgument, "teacher or cfg is null");
    };
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(DrfxStatus::NumericFailure, || {
        match save_checkpoint(path, t.0.params(), "teacher", config_hash(&cfg.0.teacher)) {
            Ok(()) => DrfxStatus::Ok,
            Err(e) => fail(DrfxStatus::IoError, &e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn drfx_student_save(
    s: *const DrfxStudent,
    cfg: *const DrfxConfig,
    path: *const c_char,
) -> DrfxStatus {
    let (Some(s), Some(cfg)) = (s.as_ref(), cfg.as_ref()) else {
        return fail(DrfxStatus::NullArgument, "student or cfg is null");
    };
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(st) => return st,
    };
    guarded(DrfxStatus::NumericFailure, || {
        match save_checkpoint(path, s.0.params(), "student", config_hash(&cfg.0.student)) {
            Ok(()) => DrfxStatus::Ok,
            Err(e) => fail(DrfxStatus::IoError, &e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn drfx_teacher_load(
    t: *mut DrfxTeacher,
    cfg: *const DrfxConfig,
    path: *const c_char,
) -> DrfxStatus {
    let (Some(t), Some(cfg)) = (t.as_mut(), cfg.as_ref()) else {
        return fail(DrfxStatus::NullArgument, "teacher or cfg is null");
    };
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    if !path.exists() {
        return fail(
            DrfxStatus::MissingDependency,
            &format!("checkpoint {} not found", path.display()),
        );
    }
    guarded(DrfxStatus::NumericFailure, || {
        match load_checkpoint(path, t.0.params_mut(), config_hash(&cfg.0.teacher)) {
            Ok(()) => DrfxStatus::Ok,
            Err(e) => fail(DrfxStatus::InvalidConfig, &e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn drfx_student_load(
    s: *mut DrfxStudent,
    cfg: *const DrfxConfig,
    path: *const c_char,
) -> DrfxStatus {
    let (Some(s), Some(cfg)) = (s.as_mut(), cfg.as_ref()) else {
        return fail(DrfxStatus::NullArgument, "student or cfg is null");
    };
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(st) => return st,
    };
    if !path.exists() {
        return fail(
            DrfxStatus::MissingDependency,
            &format!("checkpoint {} not found", path.display()),
        );
    }
    guarded(DrfxStatus::NumericFailure, || {
        match load_checkpoint(path, s.0.params_mut(), config_hash(&cfg.0.student)) {
            Ok(()) => DrfxStatus::Ok,
            Err(e) => fail(DrfxStatus::InvalidConfig, &e.to_string()),
        }
    })
}

// ---- training ----

fn trace_status(trace: &drfx_core::distill::DistillTrace) -> DrfxStatus {
    if trace.aborted {
        fail(
            DrfxStatus::NumericFailure,
            "training aborted on non-finite loss; weights rolled back",
        )
    } else {
        DrfxStatus::Ok
    }
}

/// Supervised (no-KD) training of the teacher on the dataset's train split.
#[no_mangle]
pub unsafe extern "C" fn drfx_teacher_train(
    t: *mut DrfxTeacher,
    cfg: *const DrfxConfig,
    ds: *const DrfxDataset,
) -> DrfxStatus {
    let (Some(t), Some(cfg), Some(ds)) = (t.as_mut(), cfg.as_ref(), ds.as_ref()) else {
        return fail(DrfxStatus::NullArgument, "teacher, cfg, or dataset is null");
    };
    guarded(DrfxStatus::NumericFailure, || {
        let dcfg = DistillConfig { kd_mode: KdMode::None, beta: 0.0, ..cfg.0.distill.clone() };
        match train_supervised(&mut t.0, &ds.0.train, &ds.0.val, &dcfg) {
            Ok(trace) => trace_status(&trace),
            Err(e) => fail(DrfxStatus::InvalidConfig, &e.to_string()),
        }
    })
}

/// Supervised (no-KD) training of the student.
#[no_mangle]
pub unsafe extern "C" fn drfx_student_train(
    s: *mut DrfxStudent,
    cfg: *const DrfxConfig,
    ds: *const DrfxDataset,
) -> DrfxStatus {
    let (Some(s), Some(cfg), Some(ds)) = (s.as_mut(), cfg.as_ref(), ds.as_ref()) else {
        return fail(DrfxStatus::NullArgument, "student, cfg, or dataset is null");
    };
    guarded(DrfxStatus::NumericFailure, || {
        let dcfg = DistillConfig { kd_mode: KdMode::None, ..cfg.0.distill.clone() };
        match train_supervised(&mut s.0, &ds.0.train, &ds.0.val, &dcfg) {
            Ok(trace) => trace_status(&trace),
            Err(e) => fail(DrfxStatus::InvalidConfig, &e.to_string()),
        }
    })
}

/// Fixed-temperature distillation at `tau` against a trained teacher.
#[no_mangle]
pub unsafe extern "C" fn drfx_distill_fixed(
    s: *mut DrfxStudent,
    t: *const DrfxTeacher,
    cfg: *const DrfxConfig,
    ds: *const DrfxDataset,
    tau: f64,
) -> DrfxStatus {
    let (Some(s), Some(t), Some(cfg), Some(ds)) =
        (s.as_mut(), t.as_ref(), cfg.as_ref(), ds.as_ref())
    else {
        return fail(DrfxStatus::NullArgument, "student, teacher, cfg, or dataset is null");
    };
    guarded(DrfxStatus::NumericFailure, || {
        let dcfg = DistillConfig { kd_mode: KdMode::Fixed, tau, ..cfg.0.distill.clone() };
        if let Err(e) = dcfg.validate() {
            return fail(DrfxStatus::InvalidConfig, &e.to_string());
        }
        match distill_fixed(&mut s.0, &t.0, &ds.0.train, &ds.0.val, &dcfg) {
            Ok(trace) => trace_status(&trace),
            Err(e) => fail(DrfxStatus::InvalidConfig, &e.to_string()),
        }
    })
}

/// Dynamic distillation with the temperature controller from the config.
#[no_mangle]
pub unsafe extern "C" fn drfx_distill_dynamic(
    s: *mut DrfxStudent,
    t: *const DrfxTeacher,
    cfg: *const DrfxConfig,
    ds: *const DrfxDataset,
) -> DrfxStatus {
    let (Some(s), Some(t), Some(cfg), Some(ds)) =
        (s.as_mut(), t.as_ref(), cfg.as_ref(), ds.as_ref())
    else {
        return fail(DrfxStatus::NullArgument, "student, teacher, cfg, or dataset is null");
    };
    guarded(DrfxStatus::NumericFailure, || {
        let dcfg = DistillConfig { kd_mode: KdMode::Dynamic, ..cfg.0.distill.clone() };
        match dynamic_distill(&mut s.0, &t.0, &ds.0.train, &ds.0.val, &dcfg, &cfg.0.controller) {
            Ok(out) => trace_status(&out.trace),
            Err(e) => fail(DrfxStatus::InvalidConfig, &e.to_string()),
        }
    })
}

// ---- evaluation / inference ----

#[no_mangle]
pub unsafe extern "C" fn drfx_teacher_accuracy(
    t: *const DrfxTeacher,
    ds: *const DrfxDataset,
    split: DrfxSplit,
    out_acc: *mut f64,
) -> DrfxStatus {
    let (Some(t), Some(ds)) = (t.as_ref(), ds.as_ref()) else {
        return fail(DrfxStatus::NullArgument, "teacher or dataset is null");
    };
    if out_acc.is_null() {
        return fail(DrfxStatus::NullArgument, "out_acc is null");
    }
    guarded(DrfxStatus::NumericFailure, || {
        let (acc, _) = evaluate(&t.0, split_of(&ds.0, split));
        *out_acc = acc;
        DrfxStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn drfx_student_accuracy(
    s: *const DrfxStudent,
    ds: *const DrfxDataset,
    split: DrfxSplit,
    out_acc: *mut f64,
) -> DrfxStatus {
    let (Some(s), Some(ds)) = (s.as_ref(), ds.as_ref()) else {
        return fail(DrfxStatus::NullArgument, "student or dataset is null");
    };
    if out_acc.is_null() {
        return fail(DrfxStatus::NullArgument, "out_acc is null");
    }
    guarded(DrfxStatus::NumericFailure, || {
        let (acc, _) = evaluate(&s.0, split_of(&ds.0, split));
        *out_acc = acc;
        DrfxStatus::Ok
    })
}

/// Classify one raw I/Q frame: featurize with the config's STFT settings,
/// run the student, write the argmax label and (optionally) the logits.
/// `logits_out` may be null; otherwise `logits_cap` must be at least the
/// number of classes.
#[no_mangle]
pub unsafe extern "C" fn drfx_student_predict(
    s: *const DrfxStudent,
    cfg: *const DrfxConfig,
    iq_i: *const f64,
    iq_q: *const f64,
    n: usize,
    out_label: *mut u32,
    logits_out: *mut f64,
    logits_cap: usize,
) -> DrfxStatus {
    let (Some(s), Some(cfg)) = (s.as_ref(), cfg.as_ref()) else {
        return fail(DrfxStatus::NullArgument, "student or cfg is null");
    };
    if iq_i.is_null() || iq_q.is_null() || out_label.is_null() {
        return fail(DrfxStatus::NullArgument, "iq_i, iq_q, or out_label is null");
    }
    let classes = s.0.num_classes();
    if !logits_out.is_null() && logits_cap < classes {
        return fail(
            DrfxStatus::BufferTooSmall,
            &format!("logits_cap {logits_cap} < {classes} classes"),
        );
    }
    guarded(DrfxStatus::NumericFailure, || {
        let frame = IqFrame {
            i: std::slice::from_raw_parts(iq_i, n).to_vec(),
            q: std::slice::from_raw_parts(iq_q, n).to_vec(),
            label: 0,
            meta: FrameMeta::default(),
        };
        let spec = match stft(&frame, &cfg.0.stft) {
            Ok(sp) => sp,
            Err(e) => return fail(DrfxStatus::InvalidConfig, &e.to_string()),
        };
        let logits = match s.0.predict_logits(&spec) {
            Ok(l) => l,
            Err(e) => return fail(DrfxStatus::NumericFailure, &e.to_string()),
        };
        if !logits.iter().all(|v| v.is_finite()) {
            return fail(DrfxStatus::NumericFailure, "non-finite logits");
        }
        let (best, _) = logits
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| {
                if v > acc.1 { (i, v) } else { acc }
            });
        *out_label = best as u32;
        if !logits_out.is_null() {
            std::ptr::copy_nonoverlapping(logits.as_ptr(), logits_out, classes);
        }
        DrfxStatus::Ok
    })
}
