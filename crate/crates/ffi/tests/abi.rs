use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use i2c_core::bank::CenterBank;
use i2c_core::checkpoint::Checkpoint;
use i2c_core::engine::Tensor;
use i2c_core::locmap::{box_from_map, normalize_map, upsample_bilinear};
use i2c_core::model::{infer, init_model, ModelConfig};
use i2c_core::synthdata::{generate_sample, sample_rng, DatasetSpec, Split};
use i2c_ffi::*;
use ndarray::Array2;

fn small_config() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        num_classes: 4,
        feature_channels: 6,
        stride_total: 4,
        widths: [4, 6],
    }
}

fn write_checkpoint(dir: &Path) -> (PathBuf, Checkpoint) {
    let cfg = small_config();
    let params = init_model(&cfg, 11).unwrap();
    let bank = CenterBank::new(cfg.num_classes, cfg.feature_channels, 0.05, 1).unwrap();
    let ck = Checkpoint::new(&params, &bank);
    let path = dir.join("m.i2ck");
    ck.save(&path).unwrap();
    (path, ck)
}

fn load(path: &Path, size: u32, stride: u32) -> (I2cStatus, *mut I2cModel) {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { i2c_model_load(c.as_ptr(), size, stride, &mut m) };
    (st, m)
}

/// A synthetic image in HWC order plus its CHW tensor.
fn image() -> (Vec<f32>, Tensor) {
    let spec = DatasetSpec {
        image_size: 32,
        num_classes: 4,
        radius_min: 4,
        radius_max: 7,
        clutter_blobs: 2,
        ..DatasetSpec::default()
    };
    let mut rng = sample_rng(spec.seed, Split::Test, 3);
    let s = generate_sample(&spec, 2, 3, &mut rng).unwrap();
    let n = 32 * 32;
    let d = s.image.data();
    let hwc = (0..n * 3).map(|i| d[(i % 3) * n + i / 3] as f32).collect();
    (hwc, s.image)
}

fn last_error() -> Option<String> {
    let p = i2c_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

#[test]
fn load_reports_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_checkpoint(dir.path());
    let (st, m) = load(&path, 32, 4);
    assert_eq!(st, I2cStatus::Ok);
    assert!(last_error().is_none());
    unsafe {
        assert_eq!(i2c_model_num_classes(m), 4);
        assert_eq!(i2c_model_input_size(m), 32);
        i2c_model_free(m);
        assert_eq!(i2c_model_num_classes(ptr::null()), 0);
        i2c_model_free(ptr::null_mut());
    }
}

#[test]
fn predict_and_localize_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_checkpoint(dir.path());
    let cfg = small_config();
    let params = Checkpoint::load(&path).unwrap().params(&cfg).unwrap();
    let (hwc, chw) = image();
    let batch = Tensor::new(&[1, 3, 32, 32], chw.data().to_vec()).unwrap();
    let reference = infer(&cfg, &params, &batch).unwrap();

    let (_, m) = load(&path, 32, 4);
    let mut logits = [0.0f64; 4];
    let st = unsafe { i2c_model_predict(m, hwc.as_ptr(), hwc.len(), logits.as_mut_ptr(), 4) };
    assert_eq!(st, I2cStatus::Ok);
    assert_eq!(&logits[..], reference.logits.data());

    let mm = cfg.map_size();
    for class in 0..4usize {
        let raw = reference.class_maps.data()[class * mm * mm..(class + 1) * mm * mm].to_vec();
        let full = upsample_bilinear(&normalize_map(&Array2::from_shape_vec((mm, mm), raw).unwrap()).unwrap(), 32, 32)
            .unwrap();
        let want = box_from_map(&full, 0.5).unwrap().unwrap();
        let (mut b, mut found, mut c) = (I2cBox::default(), 0, 99u32);
        let st = unsafe { i2c_model_localize(m, hwc.as_ptr(), hwc.len(), class as u32, 0.5, &mut b, &mut found, &mut c) };
        assert_eq!(st, I2cStatus::Ok);
        assert_eq!(found, 1);
        assert_eq!(c, class as u32);
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (want.x1, want.y1, want.x2, want.y2));
    }

    let best = (0..4).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    let (mut b, mut found, mut c) = (I2cBox::default(), 0, 99u32);
    let st = unsafe {
        i2c_model_localize(m, hwc.as_ptr(), hwc.len(), I2C_PREDICTED_CLASS, 0.5, &mut b, &mut found, &mut c)
    };
    assert_eq!(st, I2cStatus::Ok);
    assert_eq!(c, best as u32);
    unsafe { i2c_model_free(m) };
}

#[test]
fn failures_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ck) = write_checkpoint(dir.path());

    let (st, m) = load(&dir.path().join("missing"), 32, 4);
    assert_eq!(st, I2cStatus::Format);
    assert!(m.is_null());
    assert!(last_error().is_some());

    let mut bytes = ck.to_bytes();
    bytes[20] ^= 1;
    let bad = dir.path().join("bad.i2ck");
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(load(&bad, 32, 4).0, I2cStatus::Format);
    assert!(last_error().unwrap().contains("checksum"));

    // stride must be a power of two
    assert_eq!(load(&path, 32, 3).0, I2cStatus::Config);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { i2c_model_load(ptr::null(), 32, 4, &mut out) }, I2cStatus::InvalidArgument);

    let (_, m) = load(&path, 32, 4);
    let (hwc, _) = image();
    let mut logits = [0.0f64; 4];
    unsafe {
        assert_eq!(i2c_model_predict(m, hwc.as_ptr(), 10, logits.as_mut_ptr(), 4), I2cStatus::InvalidArgument);
        assert_eq!(i2c_model_predict(m, hwc.as_ptr(), hwc.len(), logits.as_mut_ptr(), 3), I2cStatus::InvalidArgument);
        assert_eq!(
            i2c_model_predict(ptr::null(), hwc.as_ptr(), hwc.len(), logits.as_mut_ptr(), 4),
            I2cStatus::InvalidArgument
        );
        let (mut b, mut found) = (I2cBox::default(), 0);
        let st = i2c_model_localize(m, hwc.as_ptr(), hwc.len(), 4, 0.5, &mut b, &mut found, ptr::null_mut());
        assert_eq!(st, I2cStatus::Config);
        let st = i2c_model_localize(m, hwc.as_ptr(), hwc.len(), 0, 1.5, &mut b, &mut found, ptr::null_mut());
        assert_eq!(st, I2cStatus::Config);
        // success clears the message
        assert_eq!(i2c_model_predict(m, hwc.as_ptr(), hwc.len(), logits.as_mut_ptr(), 4), I2cStatus::Ok);
        assert!(last_error().is_none());
        i2c_model_free(m);
    }
}

#[test]
fn iou_values() {
    let a = I2cBox { x1: 0, y1: 0, x2: 10, y2: 10 };
    let b = I2cBox { x1: 5, y1: 0, x2: 15, y2: 10 };
    let mut v = 0.0;
    unsafe {
        assert_eq!(i2c_iou(&a, &b, &mut v), I2cStatus::Ok);
        assert!((v - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(i2c_iou(&a, &a, &mut v), I2cStatus::Ok);
        assert_eq!(v, 1.0);
        let empty = I2cBox { x1: 3, y1: 3, x2: 3, y2: 8 };
        assert_eq!(i2c_iou(&a, &empty, &mut v), I2cStatus::Config);
        assert_eq!(i2c_iou(&a, ptr::null(), &mut v), I2cStatus::InvalidArgument);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(i2c_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/i2c.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "i2c_model_load",
        "i2c_model_free",
        "i2c_model_predict",
        "i2c_model_localize",
        "i2c_iou",
        "i2c_last_error",
        "typedef struct I2cModel I2cModel",
        "I2C_STATUS_FORMAT = 3",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"i2c.h\"\nint f(void) { I2cModel *m = 0; I2cBox b = {0}; return (int)I2C_STATUS_OK + (int)b.x1 + (m == 0); }\n",
    )
    .unwrap();
    match std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler; skipped compile check"),
    }
}
