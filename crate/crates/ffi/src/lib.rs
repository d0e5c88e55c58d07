//! C ABI over the pyrapool library.
//!
//! Functions return a [`PpStatus`]; on failure the message is kept per thread
//! and can be copied out with [`pp_last_error_message`]. Networks are opaque
//! [`PpNetwork`] handles released with [`pp_network_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use pyrapool::dataio::{subtract_mean, Image};
use pyrapool::detection::{iou, nms, Detection};
use pyrapool::geometry::map_window;
use pyrapool::inference::full_image_representation;
use pyrapool::netgraph::shared;
use pyrapool::ops::softmax;
use pyrapool::spp::{spp_forward, PyramidSpec};
use pyrapool::{checkpoint, Error, Mode, NetworkInstance, NetworkSpec, ParameterStore, SharedParams, Shape, Tensor, WindowRect};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptCheckpoint = 4,
    CheckpointMismatch = 5,
    Parse = 6,
    NonFinite = 7,
    Shape = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Other = 11,
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PpRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

/// Inclusive feature-map cell rectangle.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PpFeatureRect {
    pub fx0: usize,
    pub fy0: usize,
    pub fx1: usize,
    pub fy1: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpDetection {
    pub image_id: usize,
    pub class_id: usize,
    pub score: f64,
    pub rect: PpRect,
}

/// Network spec plus its parameters.
pub struct PpNetwork {
    spec: Arc<NetworkSpec>,
    params: SharedParams,
}

impl From<PpRect> for WindowRect {
    fn from(r: PpRect) -> Self {
        WindowRect::new(r.x0, r.y0, r.x1, r.y1)
    }
}

impl From<WindowRect> for PpRect {
    fn from(r: WindowRect) -> Self {
        PpRect {
            x0: r.x0,
            y0: r.y0,
            x1: r.x1,
            y1: r.y1,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(PpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => PpStatus::Io,
            Error::CorruptCheckpoint(_) => PpStatus::CorruptCheckpoint,
            Error::CheckpointMismatch(_) => PpStatus::CheckpointMismatch,
            Error::Parse { .. } => PpStatus::Parse,
            Error::NonFinite(_) => PpStatus::NonFinite,
            Error::Shape { .. } => PpStatus::Shape,
            Error::InvalidArgument(_)
            | Error::WindowOutside(_)
            | Error::PaddingRule { .. }
            | Error::DegenerateFeatureMap { .. }
            | Error::UnknownLayer(_)
            | Error::LabelOutOfRange { .. } => PpStatus::InvalidArgument,
            _ => PpStatus::Other,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PpStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            PpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PpStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len < need {
        return Err(Fail(PpStatus::BufferTooSmall, format!("`{what}` holds {len} values, {need} needed")));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn net_ref<'a>(net: *const PpNetwork) -> Result<&'a PpNetwork, Fail> {
    net.as_ref().ok_or_else(|| null("net"))
}

unsafe fn image_arg(pixels: *const f32, width: usize, height: usize, channels: usize) -> Result<Image, Fail> {
    let data = slice_arg(pixels, width * height * channels, "pixels")?;
    Ok(Image::new(width, height, channels, data.to_vec())?)
}

fn pyramid_arg(levels: &[usize]) -> Result<PyramidSpec, Fail> {
    Ok(PyramidSpec::new(levels.to_vec())?)
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the buffer size the full message needs.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Builds a built-in network (`"toy"` or `"zf5"`) with Gaussian-initialised weights.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_network_create(name: *const c_char, classes: usize, init_std: f64, seed: u64, out: *mut *mut PpNetwork) -> PpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = NetworkSpec::by_name(str_arg(name, "name")?, classes, None)?;
        let params = shared(ParameterStore::init(&spec, init_std, seed));
        *out = Box::into_raw(Box::new(PpNetwork {
            spec: Arc::new(spec),
            params,
        }));
        Ok(())
    })
}

/// Builds a built-in network and fills it from a checkpoint file.
///
/// # Safety
/// `name` and `path` must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_network_load(name: *const c_char, classes: usize, path: *const c_char, out: *mut *mut PpNetwork) -> PpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = NetworkSpec::by_name(str_arg(name, "name")?, classes, None)?;
        let store = checkpoint::load(&PathBuf::from(str_arg(path, "path")?), &spec)?;
        *out = Box::into_raw(Box::new(PpNetwork {
            spec: Arc::new(spec),
            params: shared(store),
        }));
        Ok(())
    })
}

/// Writes the parameters to a checkpoint file atomically.
///
/// # Safety
/// `net` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pp_network_save(net: *const PpNetwork, path: *const c_char) -> PpStatus {
    guard(|| {
        let net = net_ref(net)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let store = net.params.read().map_err(|_| Fail(PpStatus::Other, "parameter lock poisoned".into()))?;
        Ok(checkpoint::save(&path, &store)?)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pp_network_free(net: *mut PpNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Length of the pooled vector fed to the first fc layer; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pp_network_pooled_len(net: *const PpNetwork) -> usize {
    net.as_ref().and_then(|n| n.spec.pooled_len()).unwrap_or(0)
}

/// Number of network outputs; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pp_network_num_outputs(net: *const PpNetwork) -> usize {
    net.as_ref().and_then(|n| n.spec.num_outputs()).unwrap_or(0)
}

/// Cumulative stride of the pooled feature map.
///
/// # Safety
/// `net` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_network_stride(net: *const PpNetwork, out: *mut usize) -> PpStatus {
    guard(|| {
        let net = net_ref(net)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = net.spec.geometry()?.stride();
        Ok(())
    })
}

/// Class probabilities for one planar image at its own size.
///
/// # Safety
/// `pixels` must hold `width * height * channels` floats and `probs` `probs_len`.
#[no_mangle]
pub unsafe extern "C" fn pp_network_classify(
    net: *const PpNetwork,
    pixels: *const f32,
    width: usize,
    height: usize,
    channels: usize,
    mean: f32,
    probs: *mut f32,
    probs_len: usize,
) -> PpStatus {
    guard(|| {
        let net = net_ref(net)?;
        let image = image_arg(pixels, width, height, channels)?;
        let inst = NetworkInstance::new(net.spec.clone(), (height, width), net.params.clone())?;
        let (logits, _) = inst.forward(&subtract_mean(&image, mean), Mode::Eval)?;
        let p = softmax(&logits);
        out_slice(probs, probs_len, p.len(), "probs")?.copy_from_slice(p.data());
        Ok(())
    })
}

/// Pooled full-image representation of an image resized to short side `scale`.
///
/// # Safety
/// `pixels` must hold `width * height * channels` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn pp_network_representation(
    net: *const PpNetwork,
    pixels: *const f32,
    width: usize,
    height: usize,
    channels: usize,
    scale: usize,
    l2_normalize: bool,
    mean: f32,
    out: *mut f32,
    out_len: usize,
) -> PpStatus {
    guard(|| {
        let net = net_ref(net)?;
        let image = image_arg(pixels, width, height, channels)?;
        let v = full_image_representation(net.spec.clone(), &net.params, &image, scale, None, l2_normalize, mean)?;
        out_slice(out, out_len, v.len(), "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// Pyramid output length for `channels` feature channels.
///
/// # Safety
/// `levels` must hold `n_levels` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_spp_output_len(levels: *const usize, n_levels: usize, channels: usize, out: *mut usize) -> PpStatus {
    guard(|| {
        let pyr = pyramid_arg(slice_arg(levels, n_levels, "levels")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = pyr.output_len(channels);
        Ok(())
    })
}

/// Spatial pyramid max pooling of one `channels x height x width` map.
/// Output order is level, bin (row-major), channel.
///
/// # Safety
/// `featmap` must hold `channels * height * width` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn pp_spp_forward(
    featmap: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    levels: *const usize,
    n_levels: usize,
    out: *mut f32,
    out_len: usize,
) -> PpStatus {
    guard(|| {
        let pyr = pyramid_arg(slice_arg(levels, n_levels, "levels")?)?;
        let data = slice_arg(featmap, channels * height * width, "featmap")?;
        let map = Tensor::from_vec(Shape::new(1, channels, height, width), data.to_vec())?;
        let (pooled, _) = spp_forward(&map, &pyr)?;
        out_slice(out, out_len, pooled.len(), "out")?.copy_from_slice(pooled.data());
        Ok(())
    })
}

/// Intersection over union; 0 when either rectangle is empty.
#[no_mangle]
pub extern "C" fn pp_iou(a: PpRect, b: PpRect) -> f64 {
    iou(&a.into(), &b.into())
}

/// Greedy non-maximum suppression. Survivors are written in descending score
/// order and their count stored in `kept`.
///
/// # Safety
/// `dets` must hold `n` records, `out` `out_cap` records, `kept` be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_nms(
    dets: *const PpDetection,
    n: usize,
    threshold: f64,
    out: *mut PpDetection,
    out_cap: usize,
    kept: *mut usize,
) -> PpStatus {
    guard(|| {
        let kept = kept.as_mut().ok_or_else(|| null("kept"))?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Fail(PpStatus::InvalidArgument, format!("NMS threshold {threshold} outside [0, 1]")));
        }
        let input: Vec<Detection> = slice_arg(dets, n, "dets")?
            .iter()
            .map(|d| Detection {
                image_id: d.image_id,
                class_id: d.class_id,
                score: d.score,
                rect: d.rect.into(),
            })
            .collect();
        if input.iter().any(|d| !d.score.is_finite()) {
            return Err(Fail(PpStatus::NonFinite, "detection score is not finite".into()));
        }
        let survivors = nms(&input, threshold);
        let dst = out_slice(out, out_cap, survivors.len(), "out")?;
        for (o, d) in dst.iter_mut().zip(&survivors) {
            *o = PpDetection {
                image_id: d.image_id,
                class_id: d.class_id,
                score: d.score,
                rect: d.rect.into(),
            };
        }
        *kept = survivors.len();
        Ok(())
    })
}

/// Projects an image window onto a `map_w x map_h` feature map of stride `stride`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_map_window(rect: PpRect, stride: usize, map_w: usize, map_h: usize, out: *mut PpFeatureRect) -> PpStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = map_window(&rect.into(), stride, map_w, map_h)?;
        *out = PpFeatureRect {
            fx0: r.fx0,
            fy0: r.fy0,
            fx1: r.fx1,
            fy1: r.fy1,
        };
        Ok(())
    })
}
