use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use readood::calibration::{search_epsilon, CalibrationConfig};
use readood::class_stats::Regularization;
use readood::complexity::DEFAULT_TRIM;
use readood::io::benchmark::{generate_benchmark, to_unit, BenchmarkSpec};
use readood::io::checkpoint;
use readood::models::{AutoencoderArch, AutoencoderModel, ClassifierArch, ClassifierModel};
use readood::scoring::{Detector, ScoringOptions, Variant, Verdict};
use readood::Tensor;
use readood_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(readood_last_error_message()) }.to_string_lossy().into_owned()
}

/// Untrained but fitted and calibrated detector on 16x16 images.
fn build_detector(calibrate: bool) -> (Detector, Tensor<f32>) {
    let spec = BenchmarkSpec {
        image_size: 16,
        train_per_class: 10,
        val_per_class: 6,
        test_per_class: 4,
        ood_per_suite: 4,
        ..BenchmarkSpec::default()
    };
    let b = generate_benchmark(7, &spec).unwrap();
    let clf = ClassifierModel::new(ClassifierArch::desk(3, 16, 4, Variant::ReadEd.head()), 1).unwrap();
    let ae = AutoencoderModel::new(AutoencoderArch::desk(3, 16), 2).unwrap();
    let mut det = Detector::new(Variant::ReadEd, clf, ae, ScoringOptions::default()).unwrap();
    det.fit(&to_unit(&b.train_x), &b.train_y, Regularization::Auto, DEFAULT_TRIM).unwrap();
    if calibrate {
        let cfg = CalibrationConfig {
            grid: vec![0.0, 0.01],
            max_pool_per_kind: 6,
            ..CalibrationConfig::default()
        };
        let cal = search_epsilon(&det, &to_unit(&b.val_x), &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        det.set_calibration(Some(cal));
    }
    (det, to_unit(&b.test_x))
}

fn load(path: &Path) -> (ReadoodStatus, *mut ReadoodDetector) {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut det = ptr::null_mut();
    let status = unsafe { readood_detector_load(c.as_ptr(), &mut det) };
    (status, det)
}

#[test]
fn scores_through_the_handle_match_the_library() {
    let (det, x) = build_detector(true);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("detector.rck");
    checkpoint::save_detector(&path, &det, None).unwrap();

    let (status, handle) = load(&path);
    assert_eq!(status, ReadoodStatus::Ok);
    assert!(!handle.is_null());

    let (mut c, mut h, mut w) = (0, 0, 0);
    assert_eq!(unsafe { readood_detector_input_shape(handle, &mut c, &mut h, &mut w) }, ReadoodStatus::Ok);
    assert_eq!([c, h, w], [3, 16, 16]);

    let (mut eps, mut tau) = (f64::NAN, f64::NAN);
    assert_eq!(unsafe { readood_detector_calibration(handle, &mut eps, &mut tau) }, ReadoodStatus::Ok);
    let cal = det.calibration().unwrap();
    assert_eq!((eps, tau), (cal.epsilon, cal.tau));

    let n = x.batch();
    let mut out = vec![ReadoodScore::default(); n];
    let status = unsafe { readood_detector_score(handle, x.data().as_ptr(), n, out.as_mut_ptr()) };
    assert_eq!(status, ReadoodStatus::Ok, "{}", last_error());
    let expected = det.detect(&x).unwrap();
    for (o, e) in out.iter().zip(&expected) {
        assert_eq!(o.final_score.to_bits(), e.final_score.to_bits());
        assert_eq!(o.score_cla, e.score_cla);
        assert_eq!(o.score_rec_raw, e.score_rec_raw);
        assert_eq!(o.complexity, e.complexity);
        assert_eq!(o.lambda, e.lambda);
        assert_eq!(o.is_id == 1, e.verdict == Verdict::Id);
        assert_eq!(o.predicted_class as usize, e.predicted_class);
    }
    unsafe { readood_detector_free(handle) };
}

#[test]
fn failures_report_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let (status, handle) = load(&dir.path().join("missing.rck"));
    assert_eq!(status, ReadoodStatus::Checkpoint);
    assert!(handle.is_null());
    assert!(!last_error().is_empty());

    let junk = dir.path().join("junk.rck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let (status, _) = load(&junk);
    assert_eq!(status, ReadoodStatus::Checkpoint, "{}", last_error());

    let mut det = ptr::null_mut();
    assert_eq!(unsafe { readood_detector_load(ptr::null(), &mut det) }, ReadoodStatus::NullPointer);
    let mut v = 0.0;
    assert_eq!(
        unsafe { readood_detector_score(ptr::null(), ptr::null(), 1, ptr::null_mut()) },
        ReadoodStatus::NullPointer
    );
    assert_eq!(unsafe { readood_complexity(ptr::null(), 4, &mut v) }, ReadoodStatus::NullPointer);
    unsafe { readood_detector_free(ptr::null_mut()) };
}

#[test]
fn uncalibrated_detector_refuses_to_score() {
    let (det, x) = build_detector(false);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("detector.rck");
    checkpoint::save_detector(&path, &det, None).unwrap();
    let (status, handle) = load(&path);
    assert_eq!(status, ReadoodStatus::Ok);
    let mut out = vec![ReadoodScore::default(); 1];
    let status = unsafe { readood_detector_score(handle, x.data().as_ptr(), 1, out.as_mut_ptr()) };
    assert_eq!(status, ReadoodStatus::Uncalibrated);
    let (mut e, mut t) = (0.0, 0.0);
    assert_eq!(unsafe { readood_detector_calibration(handle, &mut e, &mut t) }, ReadoodStatus::Uncalibrated);
    let status = unsafe { readood_detector_score(handle, x.data().as_ptr(), 0, out.as_mut_ptr()) };
    assert_eq!(status, ReadoodStatus::InvalidArgument);
    unsafe { readood_detector_free(handle) };
}

#[test]
fn metrics_match_hand_counts() {
    let id: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
    let ood = [0.62, 0.12];
    let mut a = 0.0;
    assert_eq!(unsafe { readood_auroc(id.as_ptr(), 20, ood.as_ptr(), 2, &mut a) }, ReadoodStatus::Ok);
    // 8 ID scores exceed 0.62 and 18 exceed 0.12.
    assert_eq!(a, 26.0 / 40.0);

    // Keeping the top half of ID puts the threshold at the 11th smallest score.
    let (mut fpr, mut tau) = (0.0, 0.0);
    let status = unsafe { readood_fpr_at_tpr(id.as_ptr(), 20, ood.as_ptr(), 2, 0.5, &mut fpr, &mut tau) };
    assert_eq!(status, ReadoodStatus::Ok, "{}", last_error());
    assert_eq!((fpr, tau), (0.5, 0.55));

    let status = unsafe { readood_auroc(id.as_ptr(), 20, ptr::null(), 0, &mut a) };
    assert_eq!(status, ReadoodStatus::InvalidArgument);

    let flat = [0.5f32; 192];
    let mut c = 0.0;
    assert_eq!(unsafe { readood_complexity(flat.as_ptr(), flat.len(), &mut c) }, ReadoodStatus::Ok);
    assert_eq!(c, readood::complexity::complexity(&flat).unwrap());
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(readood_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/readood.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "typedef struct ReadoodDetector ReadoodDetector;",
        "READOOD_STATUS_OK = 0",
        "readood_detector_load(",
        "readood_detector_score(",
        "readood_last_error_message(",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-std=c99", "-Wall", "-Werror"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler on PATH; skipping compile check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
