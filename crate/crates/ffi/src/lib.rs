//! C interface to the mastervein toolkit.
//!
//! Objects cross the boundary as opaque handles created by `mv_*_new`,
//! `mv_*_load` or an operation, and released with the matching `mv_*_free`.
//! Every fallible call returns an `MvStatus`; on failure the message is
//! kept per thread and can be read with `mv_last_error`.
//!
//! Masks are passed as `width * height` bytes, nonzero meaning inside the
//! finger. A null mask means the whole image.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mastervein::attacks::{pgd_attack, AttackConfig, TargetMode, TargetSize};
use mastervein::generators::procedural_vein;
use mastervein::imaging::{load_image, FingerMask, VeinImage};
use mastervein::miura::{max_curvature, miura_match, VeinPattern};
use mastervein::neural::{load_weights, CnnModel, DecoderNet, NetworkWeights};
use mastervein::Error;

/// Length of a CNN embedding.
pub const MV_EMBED_DIM: usize = 64;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    NonFinite = 6,
    Runtime = 7,
    Panic = 8,
}

/// A grayscale image with intensities in [0, 1].
pub struct MvImage(VeinImage);

/// A binary vein pattern.
pub struct MvPattern(VeinPattern);

/// A trained embedding CNN with its class head.
pub struct MvCnn(CnnModel<f32>);

/// A latent-to-image decoder network.
pub struct MvDecoder(DecoderNet);

/// Settings for `mv_pgd_attack`. Fill with `mv_attack_params_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MvAttackParams {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: u32,
    pub kernel_size: u32,
    pub kernel_sigma: f32,
    /// Number of target labels; 0 means use `target_fraction`.
    pub target_count: u32,
    pub target_fraction: f64,
    /// Nonzero picks random targets instead of the top predictions.
    pub random_targets: u8,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> MvStatus {
    match err {
        Error::Io { .. } => MvStatus::Io,
        Error::UnsupportedFormat(_)
        | Error::MalformedImage(_)
        | Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::ShapeMismatch { .. }
        | Error::InvalidWeights(_)
        | Error::Json(_) => MvStatus::Format,
        Error::DimensionMismatch(_) => MvStatus::DimensionMismatch,
        Error::InvalidParameter { .. } | Error::EmptyMask(_) => MvStatus::InvalidArgument,
        Error::NonFinite(_) => MvStatus::NonFinite,
        _ => MvStatus::Runtime,
    }
}

struct Failure(MvStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: MvStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MvStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MvStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: caller passes a handle from this library or null.
    unsafe { p.as_ref() }.ok_or_else(|| fail(MvStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(MvStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: caller guarantees `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(fail(MvStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: caller guarantees `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(MvStatus::NullPointer, "output pointer is null"));
    }
    // SAFETY: checked non-null; caller owns the slot.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(fail(MvStatus::NullPointer, "path is null"));
    }
    // SAFETY: caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(MvStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn mask_arg(mask: *const u8, width: usize, height: usize) -> Result<FingerMask, Failure> {
    if mask.is_null() {
        return Ok(FingerMask::full(width, height));
    }
    let bytes = unsafe { slice(mask, width * height, "mask") }?;
    Ok(FingerMask::new(width, height, bytes.iter().map(|b| *b != 0).collect())?)
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mv_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: caller guarantees `len` bytes at `buf`.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `pixels` must hold `width * height` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_image_new(width: usize, height: usize, pixels: *const f32, out: *mut *mut MvImage) -> MvStatus {
    guard(|| {
        let n = width
            .checked_mul(height)
            .ok_or_else(|| fail(MvStatus::InvalidArgument, "image size overflows"))?;
        let px = unsafe { slice(pixels, n, "pixels") }?;
        let img = VeinImage::new(width, height, px.to_vec())?;
        unsafe { put(out, MvImage(img)) }
    })
}

/// Loads a PGM or PNG file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_image_load(path: *const c_char, out: *mut *mut MvImage) -> MvStatus {
    guard(|| {
        let img = load_image(unsafe { path_arg(path) }?)?;
        unsafe { put(out, MvImage(img)) }
    })
}

/// # Safety
/// `image` must be a live handle; `width` and `height` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_image_size(image: *const MvImage, width: *mut usize, height: *mut usize) -> MvStatus {
    guard(|| {
        let img = unsafe { deref(image, "image") }?;
        if width.is_null() || height.is_null() {
            return Err(fail(MvStatus::NullPointer, "size output is null"));
        }
        unsafe {
            *width = img.0.width();
            *height = img.0.height();
        }
        Ok(())
    })
}

/// Copies the pixels row-major into `out`, which must hold exactly
/// `width * height` floats.
///
/// # Safety
/// `out` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mv_image_pixels(image: *const MvImage, out: *mut f32, len: usize) -> MvStatus {
    guard(|| {
        let img = unsafe { deref(image, "image") }?;
        let px = img.0.pixels();
        if len != px.len() {
            return Err(fail(
                MvStatus::DimensionMismatch,
                format!("buffer holds {len} floats, image has {}", px.len()),
            ));
        }
        unsafe { slice_mut(out, len, "out") }?.copy_from_slice(px);
        Ok(())
    })
}

/// # Safety
/// `image` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mv_image_free(image: *mut MvImage) {
    unsafe { free(image) }
}

/// Renders a procedural vein image from a latent vector.
///
/// # Safety
/// `z` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_procedural_vein(
    z: *const f64,
    len: usize,
    width: usize,
    height: usize,
    out: *mut *mut MvImage,
) -> MvStatus {
    guard(|| {
        let z = unsafe { slice(z, len, "z") }?;
        let img = procedural_vein(z, width, height)?;
        unsafe { put(out, MvImage(img)) }
    })
}

/// Maximum-curvature vein extraction.
///
/// # Safety
/// `mask` must be null or hold `width * height` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_pattern_extract(
    image: *const MvImage,
    mask: *const u8,
    sigma: f32,
    out: *mut *mut MvPattern,
) -> MvStatus {
    guard(|| {
        let img = unsafe { deref(image, "image") }?;
        let mask = unsafe { mask_arg(mask, img.0.width(), img.0.height()) }?;
        let pattern = max_curvature(&img.0, &mask, sigma)?;
        unsafe { put(out, MvPattern(pattern)) }
    })
}

/// Number of vein pixels in the pattern.
///
/// # Safety
/// `pattern` must be a live handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_pattern_count(pattern: *const MvPattern, count: *mut usize) -> MvStatus {
    guard(|| {
        let p = unsafe { deref(pattern, "pattern") }?;
        if count.is_null() {
            return Err(fail(MvStatus::NullPointer, "count is null"));
        }
        unsafe { *count = p.0.count() };
        Ok(())
    })
}

/// # Safety
/// `pattern` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mv_pattern_free(pattern: *mut MvPattern) {
    unsafe { free(pattern) }
}

/// Miura match score in [0, 0.5] with search margins `cw` and `ch`.
///
/// # Safety
/// Both patterns must be live handles; `score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_miura_match(
    probe: *const MvPattern,
    template: *const MvPattern,
    cw: usize,
    ch: usize,
    score: *mut f64,
) -> MvStatus {
    guard(|| {
        let p = unsafe { deref(probe, "probe") }?;
        let t = unsafe { deref(template, "template") }?;
        if score.is_null() {
            return Err(fail(MvStatus::NullPointer, "score is null"));
        }
        let s = miura_match(&p.0, &t.0, cw, ch)?;
        unsafe { *score = s.value };
        Ok(())
    })
}

/// Loads CNN weights from a VFW1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_cnn_load(path: *const c_char, out: *mut *mut MvCnn) -> MvStatus {
    guard(|| match load_weights(unsafe { path_arg(path) }?)? {
        NetworkWeights::Cnn(m) => unsafe { put(out, MvCnn(m)) },
        NetworkWeights::Decoder(_) => Err(fail(MvStatus::Format, "file holds decoder weights")),
    })
}

/// # Safety
/// `cnn` must be a live handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_cnn_num_classes(cnn: *const MvCnn, count: *mut usize) -> MvStatus {
    guard(|| {
        let m = unsafe { deref(cnn, "cnn") }?;
        if count.is_null() {
            return Err(fail(MvStatus::NullPointer, "count is null"));
        }
        unsafe { *count = m.0.num_classes };
        Ok(())
    })
}

/// Writes the image's embedding (`MV_EMBED_DIM` floats) into `out`.
///
/// # Safety
/// `out` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mv_cnn_embed(cnn: *const MvCnn, image: *const MvImage, out: *mut f32, len: usize) -> MvStatus {
    guard(|| {
        let m = unsafe { deref(cnn, "cnn") }?;
        let img = unsafe { deref(image, "image") }?;
        if len != MV_EMBED_DIM {
            return Err(fail(MvStatus::DimensionMismatch, format!("embedding has {MV_EMBED_DIM} values, buffer {len}")));
        }
        let e = m.0.embed(&img.0)?;
        unsafe { slice_mut(out, len, "out") }?.copy_from_slice(e.as_slice());
        Ok(())
    })
}

/// Writes one probability per class into `out`.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mv_cnn_class_probs(
    cnn: *const MvCnn,
    image: *const MvImage,
    out: *mut f64,
    len: usize,
) -> MvStatus {
    guard(|| {
        let m = unsafe { deref(cnn, "cnn") }?;
        let img = unsafe { deref(image, "image") }?;
        if len != m.0.num_classes {
            return Err(fail(
                MvStatus::DimensionMismatch,
                format!("model has {} classes, buffer {len}", m.0.num_classes),
            ));
        }
        let p = m.0.class_probs(&img.0)?;
        unsafe { slice_mut(out, len, "out") }?.copy_from_slice(&p);
        Ok(())
    })
}

/// # Safety
/// `cnn` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mv_cnn_free(cnn: *mut MvCnn) {
    unsafe { free(cnn) }
}

/// Fills `params` with the library defaults (top 5% targets, epsilon 16/255).
///
/// # Safety
/// `params` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_attack_params_default(params: *mut MvAttackParams) -> MvStatus {
    guard(|| {
        if params.is_null() {
            return Err(fail(MvStatus::NullPointer, "params is null"));
        }
        let d = AttackConfig::default();
        let fraction = match d.target {
            TargetSize::Fraction(f) => f,
            TargetSize::Count(_) => 0.05,
        };
        unsafe {
            *params = MvAttackParams {
                epsilon: d.epsilon,
                alpha: d.step_size(),
                iterations: d.iterations as u32,
                kernel_size: d.kernel_size as u32,
                kernel_sigma: d.kernel_sigma,
                target_count: 0,
                target_fraction: fraction,
                random_targets: 0,
                seed: d.seed,
            }
        };
        Ok(())
    })
}

/// Masked, Gaussian-filtered multi-label PGD against `cnn`.
///
/// # Safety
/// `mask` must be null or hold `width * height` bytes; `params` must be
/// readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_pgd_attack(
    cnn: *const MvCnn,
    image: *const MvImage,
    mask: *const u8,
    params: *const MvAttackParams,
    out: *mut *mut MvImage,
) -> MvStatus {
    guard(|| {
        let m = unsafe { deref(cnn, "cnn") }?;
        let img = unsafe { deref(image, "image") }?;
        let p = *unsafe { deref(params, "params") }?;
        let mask = unsafe { mask_arg(mask, img.0.width(), img.0.height()) }?;
        let cfg = AttackConfig {
            epsilon: p.epsilon,
            alpha: Some(p.alpha),
            iterations: p.iterations as usize,
            kernel_size: p.kernel_size as usize,
            kernel_sigma: p.kernel_sigma,
            target: if p.target_count > 0 {
                TargetSize::Count(p.target_count as usize)
            } else {
                TargetSize::Fraction(p.target_fraction)
            },
            mode: if p.random_targets != 0 {
                TargetMode::RandomK
            } else {
                TargetMode::TopK
            },
            seed: p.seed,
            ..AttackConfig::default()
        };
        let result = pgd_attack(&m.0, &img.0, &mask, &cfg)?;
        unsafe { put(out, MvImage(result.image)) }
    })
}

/// Loads decoder weights from a VFW1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_decoder_load(path: *const c_char, out: *mut *mut MvDecoder) -> MvStatus {
    guard(|| match load_weights(unsafe { path_arg(path) }?)? {
        NetworkWeights::Decoder(d) => unsafe { put(out, MvDecoder(d)) },
        NetworkWeights::Cnn(_) => Err(fail(MvStatus::Format, "file holds CNN weights")),
    })
}

/// # Safety
/// `decoder` must be a live handle; `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_decoder_latent_dim(decoder: *const MvDecoder, dim: *mut usize) -> MvStatus {
    guard(|| {
        let d = unsafe { deref(decoder, "decoder") }?;
        if dim.is_null() {
            return Err(fail(MvStatus::NullPointer, "dim is null"));
        }
        unsafe { *dim = d.0.latent_dim };
        Ok(())
    })
}

/// Decodes a latent vector into an image at the decoder's native size.
///
/// # Safety
/// `z` must hold `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_decoder_decode(
    decoder: *const MvDecoder,
    z: *const f32,
    len: usize,
    out: *mut *mut MvImage,
) -> MvStatus {
    guard(|| {
        let d = unsafe { deref(decoder, "decoder") }?;
        let z = unsafe { slice(z, len, "z") }?;
        let img = d.0.decode(z)?;
        unsafe { put(out, MvImage(img)) }
    })
}

/// # Safety
/// `decoder` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mv_decoder_free(decoder: *mut MvDecoder) {
    unsafe { free(decoder) }
}
