//! C ABI for the `fewshot-dc` core library.
//!
//! Every function returns an [`FsdcStatus`]; on failure the message is kept
//! per thread and can be read with [`fsdc_last_error`]. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use fewshot_dc::annotations::{
    compute_missing_rate, parse_annotations, parse_annotations_str, parse_split_str, AnnotationSet, ClassScope,
    ImageCounting, RateOptions, ScopeKind, SplitSpec,
};
use fewshot_dc::dcloss::{
    dc_loss_image, negative_head_grad_logits, negative_head_loss, positive_head_grad_logits, positive_head_loss,
    LabelMask, RoiClassificationBatch,
};
use fewshot_dc::detection::{iou, BBox};
use fewshot_dc::numerics::{cross_entropy_from_logits, stable_softmax, LogitVector};
use fewshot_dc::sim::{stream_rng, Stream};
use fewshot_dc::trainer::{init_classifier, LinearClassifier};
use fewshot_dc::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsdcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    IndexOutOfRange = 3,
    Config = 4,
    Parse = 5,
    Integrity = 6,
    Incompatible = 7,
    UndefinedRate = 8,
    Io = 9,
    Panic = 10,
}

/// Which classes count toward a missing rate.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsdcScope {
    /// Novel classes only.
    Fsod = 0,
    /// Base and novel classes.
    Gfsod = 1,
}

/// Opaque set of images, annotations and categories.
pub struct FsdcAnnotationSet {
    inner: AnnotationSet,
}

/// Opaque few-shot split resolved against an annotation set.
pub struct FsdcSplit {
    inner: SplitSpec,
}

/// Opaque linear ROI classifier.
pub struct FsdcClassifier {
    inner: LinearClassifier,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FsdcStatus {
    match e {
        Error::InvalidInput(_) => FsdcStatus::InvalidInput,
        Error::IndexOutOfRange { .. } => FsdcStatus::IndexOutOfRange,
        Error::Config(_) => FsdcStatus::Config,
        Error::UndefinedRate(_) => FsdcStatus::UndefinedRate,
        Error::Parse(_) => FsdcStatus::Parse,
        Error::Integrity(_) => FsdcStatus::Integrity,
        Error::Incompatible(_) => FsdcStatus::Incompatible,
        Error::Io(_) => FsdcStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> FsdcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FsdcStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            FsdcStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".to_string());
            FsdcStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(v);
    Ok(())
}

unsafe fn str_in<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidInput(format!("{what} is not valid UTF-8"))))
}

unsafe fn mask_in(m: *const u8, len: usize) -> Result<LabelMask, Fail> {
    Ok(LabelMask::from_bits(slice_in(m, len, "mask")?)?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn fsdc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn fsdc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Numerically stable softmax of `x[0..len]` into `out[0..len]`.
///
/// # Safety
/// `x` and `out` must point to `len` valid doubles.
#[no_mangle]
pub unsafe extern "C" fn fsdc_softmax(x: *const f64, len: usize, out: *mut f64) -> FsdcStatus {
    guard(|| {
        let p = stable_softmax(slice_in(x, len, "x")?)?;
        slice_out(out, len, "out")?.copy_from_slice(p.as_slice());
        Ok(())
    })
}

/// Softmax cross-entropy of `x` against `target`.
///
/// # Safety
/// `x` must point to `len` doubles and `out` to one.
#[no_mangle]
pub unsafe extern "C" fn fsdc_cross_entropy(x: *const f64, len: usize, target: usize, out: *mut f64) -> FsdcStatus {
    guard(|| write_out(out, cross_entropy_from_logits(slice_in(x, len, "x")?, target)?, "out"))
}

/// Positive-head loss; `target` must be a foreground class.
///
/// # Safety
/// `x` must point to `len` doubles and `out` to one.
#[no_mangle]
pub unsafe extern "C" fn fsdc_positive_head_loss(
    x: *const f64,
    len: usize,
    target: usize,
    out: *mut f64,
) -> FsdcStatus {
    guard(|| write_out(out, positive_head_loss(slice_in(x, len, "x")?, target)?, "out"))
}

/// Gradient of the positive-head loss with respect to the logits.
///
/// # Safety
/// `x` and `grad` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fsdc_positive_head_grad(
    x: *const f64,
    len: usize,
    target: usize,
    grad: *mut f64,
) -> FsdcStatus {
    guard(|| {
        let g = positive_head_grad_logits(slice_in(x, len, "x")?, target)?;
        slice_out(grad, len, "grad")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Negative-head loss under a 0/1 label mask whose last entry is 1.
///
/// # Safety
/// `x` and `mask` must point to `len` elements and `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn fsdc_negative_head_loss(
    x: *const f64,
    mask: *const u8,
    len: usize,
    out: *mut f64,
) -> FsdcStatus {
    guard(|| {
        write_out(
            out,
            negative_head_loss(slice_in(x, len, "x")?, &mask_in(mask, len)?)?,
            "out",
        )
    })
}

/// Gradient of the negative-head loss with respect to the logits.
///
/// # Safety
/// `x`, `mask` and `grad` must point to `len` elements.
#[no_mangle]
pub unsafe extern "C" fn fsdc_negative_head_grad(
    x: *const f64,
    mask: *const u8,
    len: usize,
    grad: *mut f64,
) -> FsdcStatus {
    guard(|| {
        let g = negative_head_grad_logits(slice_in(x, len, "x")?, &mask_in(mask, len)?)?;
        slice_out(grad, len, "grad")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Decoupled loss of one image: `n` ROIs with row-major logits of `width`
/// columns, integer labels and the image mask.
///
/// # Safety
/// `logits` must point to `n * width` doubles, `labels` to `n` entries,
/// `mask` to `width` bytes and `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn fsdc_dc_loss_image(
    logits: *const f64,
    n: usize,
    width: usize,
    labels: *const usize,
    mask: *const u8,
    out: *mut f64,
) -> FsdcStatus {
    guard(|| {
        let total = n
            .checked_mul(width)
            .ok_or_else(|| Error::InvalidInput("n * width overflows".into()))?;
        let flat = slice_in(logits, total, "logits")?;
        let rows = flat
            .chunks(width.max(1))
            .map(|r| LogitVector::new(r.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let batch = RoiClassificationBatch::new(rows, slice_in(labels, n, "labels")?.to_vec(), mask_in(mask, width)?)?;
        write_out(out, dc_loss_image(&batch)?.total, "out")
    })
}

/// IoU of two `[x1, y1, x2, y2]` boxes.
///
/// # Safety
/// `a` and `b` must each point to 4 doubles and `out` to one.
#[no_mangle]
pub unsafe extern "C" fn fsdc_iou(a: *const f64, b: *const f64, out: *mut f64) -> FsdcStatus {
    guard(|| {
        let a = slice_in(a, 4, "a")?;
        let b = slice_in(b, 4, "b")?;
        let v = iou(&BBox::new(a[0], a[1], a[2], a[3])?, &BBox::new(b[0], b[1], b[2], b[3])?)?;
        write_out(out, v, "out")
    })
}

/// Parses a COCO-style annotation file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fsdc_annotations_load(path: *const c_char, out: *mut *mut FsdcAnnotationSet) -> FsdcStatus {
    guard(|| {
        let set = parse_annotations(str_in(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(FsdcAnnotationSet { inner: set })), "out")
    })
}

/// Parses COCO-style annotations from an in-memory JSON string.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fsdc_annotations_parse(json: *const c_char, out: *mut *mut FsdcAnnotationSet) -> FsdcStatus {
    guard(|| {
        let set = parse_annotations_str(str_in(json, "json")?, "<memory>")?;
        write_out(out, Box::into_raw(Box::new(FsdcAnnotationSet { inner: set })), "out")
    })
}

/// Image, annotation and category counts.
///
/// # Safety
/// `set` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn fsdc_annotations_counts(
    set: *const FsdcAnnotationSet,
    images: *mut usize,
    annotations: *mut usize,
    categories: *mut usize,
) -> FsdcStatus {
    guard(|| {
        let set = set.as_ref().ok_or(Fail::Null("set"))?;
        let (i, a, c) = set.inner.counts();
        for (p, v) in [(images, i), (annotations, a), (categories, c)] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Releases an annotation set; null is ignored.
///
/// # Safety
/// `set` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fsdc_annotations_free(set: *mut FsdcAnnotationSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Parses a canonical split (`{"shots": K, "per_category": {...}}`) against `set`.
///
/// # Safety
/// `set` must be a live handle, `json` nul-terminated, `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn fsdc_split_parse(
    set: *const FsdcAnnotationSet,
    json: *const c_char,
    out: *mut *mut FsdcSplit,
) -> FsdcStatus {
    guard(|| {
        let set = set.as_ref().ok_or(Fail::Null("set"))?;
        let split = parse_split_str(str_in(json, "json")?, "<memory>", &set.inner)?;
        write_out(out, Box::into_raw(Box::new(FsdcSplit { inner: split })), "out")
    })
}

/// Releases a split; null is ignored.
///
/// # Safety
/// `split` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fsdc_split_free(split: *mut FsdcSplit) {
    if !split.is_null() {
        drop(Box::from_raw(split));
    }
}

/// Overall missing rate of `split` on `set`. Base and novel ids must be
/// disjoint; each image is counted once.
///
/// # Safety
/// Handles must be live; id arrays must hold the stated counts.
#[no_mangle]
pub unsafe extern "C" fn fsdc_missing_rate(
    set: *const FsdcAnnotationSet,
    split: *const FsdcSplit,
    scope: FsdcScope,
    base_ids: *const u64,
    n_base: usize,
    novel_ids: *const u64,
    n_novel: usize,
    include_crowd: bool,
    out: *mut f64,
) -> FsdcStatus {
    guard(|| {
        let set = set.as_ref().ok_or(Fail::Null("set"))?;
        let split = split.as_ref().ok_or(Fail::Null("split"))?;
        let base: BTreeSet<u64> = slice_in(base_ids, n_base, "base_ids")?.iter().copied().collect();
        let novel: BTreeSet<u64> = slice_in(novel_ids, n_novel, "novel_ids")?.iter().copied().collect();
        let kind = match scope {
            FsdcScope::Fsod => ScopeKind::NovelOnly,
            FsdcScope::Gfsod => ScopeKind::BasePlusNovel,
        };
        let scope = ClassScope::new(kind, base, novel)?;
        let opts = RateOptions {
            include_crowd,
            image_counting: ImageCounting::Once,
        };
        let r = compute_missing_rate(&set.inner, &split.inner, &scope, opts)?;
        write_out(out, r.rate, "out")
    })
}

/// Classifier for `num_fg_classes + 1` outputs over `dim` features with
/// seeded Gaussian weights and zero biases.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fsdc_classifier_new(
    dim: usize,
    num_fg_classes: usize,
    seed: u64,
    out: *mut *mut FsdcClassifier,
) -> FsdcStatus {
    guard(|| {
        let clf = init_classifier(dim, num_fg_classes, &mut stream_rng(seed, Stream::Init))?;
        write_out(out, Box::into_raw(Box::new(FsdcClassifier { inner: clf })), "out")
    })
}

/// Logits of one feature vector; `out` receives `num_fg_classes + 1` values.
///
/// # Safety
/// `clf` must be live, `feature` must hold `dim` doubles and `out` the output count.
#[no_mangle]
pub unsafe extern "C" fn fsdc_classifier_logits(
    clf: *const FsdcClassifier,
    feature: *const f64,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> FsdcStatus {
    guard(|| {
        let clf = &clf.as_ref().ok_or(Fail::Null("clf"))?.inner;
        if out_len != clf.num_outputs {
            return Err(Error::InvalidInput(format!(
                "out_len {out_len} but classifier has {} outputs",
                clf.num_outputs
            ))
            .into());
        }
        let x = clf.logits(slice_in(feature, dim, "feature")?)?;
        slice_out(out, out_len, "out")?.copy_from_slice(&x);
        Ok(())
    })
}

/// Shape of a classifier.
///
/// # Safety
/// `clf` must be live; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn fsdc_classifier_shape(
    clf: *const FsdcClassifier,
    num_outputs: *mut usize,
    dim: *mut usize,
) -> FsdcStatus {
    guard(|| {
        let clf = &clf.as_ref().ok_or(Fail::Null("clf"))?.inner;
        if !num_outputs.is_null() {
            num_outputs.write(clf.num_outputs);
        }
        if !dim.is_null() {
            dim.write(clf.dim);
        }
        Ok(())
    })
}

/// Releases a classifier; null is ignored.
///
/// # Safety
/// `clf` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fsdc_classifier_free(clf: *mut FsdcClassifier) {
    if !clf.is_null() {
        drop(Box::from_raw(clf));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_status() {
        assert_eq!(guard(|| panic!("boom")), FsdcStatus::Panic);
        assert!(!fsdc_last_error().is_null());
        assert_eq!(guard(|| Ok(())), FsdcStatus::Ok);
        assert!(fsdc_last_error().is_null());
    }

    #[test]
    fn status_mapping() {
        assert_eq!(
            status_of(&Error::IndexOutOfRange { index: 3, len: 2 }),
            FsdcStatus::IndexOutOfRange
        );
        assert_eq!(status_of(&Error::Integrity(vec![])), FsdcStatus::Integrity);
        assert_eq!(status_of(&Error::Io(std::io::Error::other("x"))), FsdcStatus::Io);
    }

    #[test]
    fn interior_nul_in_message() {
        set_error("a\0b".into());
        let msg = unsafe { CStr::from_ptr(fsdc_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "a b");
    }
}
