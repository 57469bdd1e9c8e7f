//! C interface to the ffnet engine.
//!
//! Models are opaque `FfnetModel` handles. Every fallible function returns an
//! `FfnetStatus`; on failure, `ffnet_last_error` describes the most recent
//! error on the calling thread. Handles are not synchronized: use one handle
//! per thread, or lock externally.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use ffnet::analysis::count_params;
use ffnet::{
    build_model, fold_batchnorm, init_random, Dims, Error, InferenceSession, LayerGraph,
    ModelConfig, Tensor, WeightStore,
};

/// Result codes shared by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Graph = 4,
    ShapeMismatch = 5,
    Weights = 6,
    NoWeights = 7,
    Io = 8,
    Panic = 9,
}

impl From<&Error> for FfnetStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::Image(_) => FfnetStatus::InvalidArgument,
            Error::ConfigSyntax { .. } | Error::InvalidConfig(_) | Error::UnknownBackbone(_) => {
                FfnetStatus::Config
            }
            Error::Graph(_) => FfnetStatus::Graph,
            Error::ShapeMismatch(_) => FfnetStatus::ShapeMismatch,
            Error::BadMagic(_)
            | Error::UnsupportedVersion(_)
            | Error::Truncated(_)
            | Error::TrailingData(_)
            | Error::DuplicateName(_)
            | Error::DimMismatch { .. }
            | Error::MissingWeight(_)
            | Error::UnexpectedWeights(_) => FfnetStatus::Weights,
            Error::Io { .. } => FfnetStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn fail(status: FfnetStatus, msg: impl Into<String>) -> FfnetStatus {
    set_last_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), FfnetStatus>) -> FfnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            FfnetStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => fail(FfnetStatus::Panic, "internal panic"),
    }
}

fn check(r: ffnet::Result<()>) -> Result<(), FfnetStatus> {
    r.map_err(|e| fail(FfnetStatus::from(&e), e.to_string()))
}

/// Opaque model handle.
pub struct FfnetModel {
    graph: Arc<LayerGraph>,
    weights: Option<Arc<WeightStore>>,
    input: Dims,
    output: Dims,
    session: Option<InferenceSession>,
}

impl FfnetModel {
    fn set_weights(&mut self, store: WeightStore) {
        self.weights = Some(Arc::new(store));
        self.session = None;
    }
}

unsafe fn model_mut<'a>(m: *mut FfnetModel) -> Result<&'a mut FfnetModel, FfnetStatus> {
    m.as_mut()
        .ok_or_else(|| fail(FfnetStatus::NullPointer, "null model handle"))
}

unsafe fn model_ref<'a>(m: *const FfnetModel) -> Result<&'a FfnetModel, FfnetStatus> {
    m.as_ref()
        .ok_or_else(|| fail(FfnetStatus::NullPointer, "null model handle"))
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, FfnetStatus> {
    if s.is_null() {
        return Err(fail(FfnetStatus::NullPointer, format!("null {what}")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(FfnetStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next ffnet call on this thread.
#[no_mangle]
pub extern "C" fn ffnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ffnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model from config text (`key = value` lines or `k=v` tokens).
/// On success `*out` owns a handle to release with `ffnet_model_free`.
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ffnet_model_create(
    config: *const c_char,
    out: *mut *mut FfnetModel,
) -> FfnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(FfnetStatus::NullPointer, "null output pointer"));
        }
        *out = std::ptr::null_mut();
        let text = c_str(config, "config")?;
        let mut model = None;
        check((|| {
            let cfg = ModelConfig::parse(text)?;
            let graph = build_model(&cfg)?;
            let (h, w) = cfg.input_hw;
            let input = Dims::new(1, 3, h, w);
            let output = ffnet::infer_shapes(&graph, input)?.get(graph.output());
            model = Some(FfnetModel {
                graph: Arc::new(graph),
                weights: None,
                input,
                output,
                session: None,
            });
            Ok(())
        })())?;
        *out = Box::into_raw(Box::new(model.expect("set on success")));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `ffnet_model_create` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ffnet_model_free(model: *mut FfnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Seeded He-normal weights with identity batch norm.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ffnet_model_init_random(model: *mut FfnetModel, seed: u64) -> FfnetStatus {
    guard(|| {
        let m = model_mut(model)?;
        let store = init_random(&m.graph, seed);
        m.set_weights(store);
        Ok(())
    })
}

/// Loads an FFNW weights file. Entries the model does not use are an error
/// unless `permissive` is non-zero.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ffnet_model_load_weights(
    model: *mut FfnetModel,
    path: *const c_char,
    permissive: i32,
) -> FfnetStatus {
    guard(|| {
        let m = model_mut(model)?;
        let path = c_str(path, "path")?;
        let mut store = None;
        check((|| {
            let s = WeightStore::load(path)?;
            s.check_against(&m.graph, permissive != 0)?;
            store = Some(s);
            Ok(())
        })())?;
        m.set_weights(store.expect("set on success"));
        Ok(())
    })
}

/// Writes the current weights as an FFNW file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ffnet_model_save_weights(
    model: *const FfnetModel,
    path: *const c_char,
) -> FfnetStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = c_str(path, "path")?;
        let store = m
            .weights
            .as_ref()
            .ok_or_else(|| fail(FfnetStatus::NoWeights, "model has no weights"))?;
        check(store.save(path))
    })
}

/// Folds every batch norm into its convolution. The handle keeps the folded
/// graph; weights saved afterwards match the folded layout.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ffnet_model_fold_batchnorm(model: *mut FfnetModel) -> FfnetStatus {
    guard(|| {
        let m = model_mut(model)?;
        let store = m
            .weights
            .as_ref()
            .ok_or_else(|| fail(FfnetStatus::NoWeights, "model has no weights"))?;
        let mut folded = None;
        check(fold_batchnorm(&m.graph, store).map(|r| folded = Some(r)))?;
        let (graph, store) = folded.expect("set on success");
        m.graph = Arc::new(graph);
        m.set_weights(store);
        Ok(())
    })
}

fn write_dims(d: Dims, out: *mut usize) -> Result<(), FfnetStatus> {
    if out.is_null() {
        return Err(fail(FfnetStatus::NullPointer, "null dims pointer"));
    }
    let v = d.to_array();
    // SAFETY: caller provides room for four values.
    unsafe { std::ptr::copy_nonoverlapping(v.as_ptr(), out, 4) };
    Ok(())
}

/// Writes `n, c, h, w` of the expected input into `dims[0..4]`.
///
/// # Safety
/// `model` must be a live handle and `dims` point to four writable values.
#[no_mangle]
pub unsafe extern "C" fn ffnet_model_input_dims(
    model: *const FfnetModel,
    dims: *mut usize,
) -> FfnetStatus {
    guard(|| write_dims(model_ref(model)?.input, dims))
}

/// Writes `n, c, h, w` of the logits into `dims[0..4]`.
///
/// # Safety
/// `model` must be a live handle and `dims` point to four writable values.
#[no_mangle]
pub unsafe extern "C" fn ffnet_model_output_dims(
    model: *const FfnetModel,
    dims: *mut usize,
) -> FfnetStatus {
    guard(|| write_dims(model_ref(model)?.output, dims))
}

/// Number of graph nodes; folding reduces it.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ffnet_model_num_nodes(
    model: *const FfnetModel,
    out: *mut usize,
) -> FfnetStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(FfnetStatus::NullPointer, "null output pointer"))?;
        *out = m.graph.len();
        Ok(())
    })
}

/// Learnable parameter count (convolutions and batch-norm scale/shift).
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ffnet_model_num_params(
    model: *const FfnetModel,
    out: *mut u64,
) -> FfnetStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(FfnetStatus::NullPointer, "null output pointer"))?;
        let mut total = 0;
        check(count_params(&m.graph).map(|r| total = r.totals.params))?;
        *out = total;
        Ok(())
    })
}

/// Runs one forward pass. `input` holds the NCHW input (`input_len`
/// floats); the NCHW logits are written to `output` (`output_len` floats).
/// Both lengths must match the model's dims exactly.
///
/// # Safety
/// `model` must be a live handle; `input` must be readable for `input_len`
/// floats and `output` writable for `output_len` floats.
#[no_mangle]
pub unsafe extern "C" fn ffnet_model_run(
    model: *mut FfnetModel,
    input: *const f32,
    input_len: usize,
    output: *mut f32,
    output_len: usize,
) -> FfnetStatus {
    guard(|| {
        let m = model_mut(model)?;
        if input.is_null() || output.is_null() {
            return Err(fail(FfnetStatus::NullPointer, "null tensor pointer"));
        }
        if input_len != m.input.len() || output_len != m.output.len() {
            return Err(fail(
                FfnetStatus::ShapeMismatch,
                format!(
                    "expected {} input and {} output floats, got {} and {}",
                    m.input.len(),
                    m.output.len(),
                    input_len,
                    output_len
                ),
            ));
        }
        let weights = m
            .weights
            .clone()
            .ok_or_else(|| fail(FfnetStatus::NoWeights, "model has no weights"))?;
        if m.session.is_none() {
            let mut s = None;
            check(InferenceSession::new(m.graph.clone(), weights, m.input).map(|x| s = Some(x)))?;
            m.session = s;
        }
        let session = m.session.as_mut().expect("created above");
        let data = std::slice::from_raw_parts(input, input_len).to_vec();
        let mut logits = None;
        check((|| {
            let t = Tensor::from_vec(m.input, data)?;
            logits = Some(session.run(&t)?.logits);
            Ok(())
        })())?;
        let logits = logits.expect("set on success");
        std::ptr::copy_nonoverlapping(logits.data().as_ptr(), output, output_len);
        Ok(())
    })
}
