use std::ffi::{CStr, CString};
use std::ptr;

use gemuco::modality::enumerate_all_masks;
use gemuco::testbed::{random_rollout, TendonArmWorld};
use gemuco::trainer::{train, OptimizerKind};
use gemuco::{ArchConfig, GeMuCoModel, TrainConfig};
use gemuco_ffi::*;

fn tendon_model() -> (GeMuCoModel, gemuco::Dataset) {
    let data = random_rollout(&TendonArmWorld::default(), 300, 5).unwrap();
    let norm = data.fit_normalizer().unwrap();
    let groups = ["theta", "f", "l"];
    let arch = ArchConfig {
        encoder_hidden: Some(vec![16]),
        decoder_hidden: Some(vec![16]),
        latent_dim: Some(4),
    };
    let masks = enumerate_all_masks(3).unwrap();
    let model =
        GeMuCoModel::new(&data.layout, &groups, &groups, 0, &arch, norm, masks, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 3e-3,
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let (model, _) = train(&model, &data, &cfg).unwrap();
    (model, data)
}

fn handle_from(model: &GeMuCoModel) -> *mut GemucoModel {
    let json = CString::new(model.to_json().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { gemuco_model_from_json(json.as_ptr(), &mut h) },
        GemucoStatus::Ok
    );
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    let p = gemuco_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(gemuco_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn predict_matches_the_library() {
    let (model, data) = tendon_model();
    let h = handle_from(&model);
    let mut dims = GemucoDims::default();
    assert_eq!(unsafe { gemuco_model_dims(h, &mut dims) }, GemucoStatus::Ok);
    assert_eq!((dims.data_dim, dims.data_groups, dims.in_groups), (10, 3, 3));
    assert_eq!(dims.out_dim, 10);

    let raw = &data.samples[0].values;
    let mask = CString::new("110").unwrap();
    let mut out = vec![0.0; dims.out_dim];
    let st = unsafe {
        gemuco_model_predict(h, raw.as_ptr(), raw.len(), mask.as_ptr(), ptr::null(), 0, out.as_mut_ptr(), out.len())
    };
    assert_eq!(st, GemucoStatus::Ok);
    let expect = model
        .predict_raw(raw, &gemuco::MaskVector::parse("110").unwrap(), &model.zero_pb())
        .unwrap();
    assert_eq!(out, expect);
    unsafe { gemuco_model_free(h) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let (model, data) = tendon_model();
    let h = handle_from(&model);
    let raw = &data.samples[0].values;
    let mask = CString::new("11").unwrap();
    let mut out = vec![0.0; 10];
    let st = unsafe {
        gemuco_model_predict(h, raw.as_ptr(), raw.len(), mask.as_ptr(), ptr::null(), 0, out.as_mut_ptr(), out.len())
    };
    assert_eq!(st, GemucoStatus::Dimension);
    assert!(last_error().contains("mask"));

    let bad = CString::new("1x1").unwrap();
    let st = unsafe {
        gemuco_model_predict(h, raw.as_ptr(), raw.len(), bad.as_ptr(), ptr::null(), 0, out.as_mut_ptr(), out.len())
    };
    assert_eq!(st, GemucoStatus::Parse);

    let st = unsafe { gemuco_model_dims(ptr::null(), ptr::null_mut()) };
    assert_eq!(st, GemucoStatus::NullPointer);
    assert!(last_error().contains("model"));

    let junk = CString::new("{").unwrap();
    let mut h2 = ptr::null_mut();
    assert_eq!(unsafe { gemuco_model_from_json(junk.as_ptr(), &mut h2) }, GemucoStatus::Parse);
    assert!(h2.is_null());

    gemuco_clear_error();
    assert!(gemuco_last_error().is_null());
    unsafe { gemuco_model_free(h) };
    unsafe { gemuco_model_free(ptr::null_mut()) };
}

#[test]
fn save_and_load_roundtrip() {
    let (model, _) = tendon_model();
    let h = handle_from(&model);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gemuco_model_save(h, path.as_ptr()) }, GemucoStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { gemuco_model_load(path.as_ptr(), &mut back) }, GemucoStatus::Ok);
    let loaded = GeMuCoModel::load(dir.path().join("m.json")).unwrap();
    assert_eq!(loaded, model);

    let missing = CString::new(dir.path().join("none.json").to_str().unwrap()).unwrap();
    let mut h3 = ptr::null_mut();
    assert_eq!(unsafe { gemuco_model_load(missing.as_ptr(), &mut h3) }, GemucoStatus::Io);
    unsafe {
        gemuco_model_free(h);
        gemuco_model_free(back);
    }
}

#[test]
fn estimate_fills_hidden_groups() {
    let (model, data) = tendon_model();
    let h = handle_from(&model);
    let raw = data.samples[3].values.clone();
    let avail = [true, true, false];
    let mut out = vec![0.0; raw.len()];
    let mut strategy = -1;
    let st = unsafe {
        gemuco_estimate(h, raw.as_ptr(), raw.len(), avail.as_ptr(), 3, ptr::null(), 0, out.as_mut_ptr(), &mut strategy)
    };
    assert_eq!(st, GemucoStatus::Ok, "{}", last_error());
    assert_eq!(strategy, 0);
    assert_eq!(&out[..6], &raw[..6]);
    assert!(out.iter().all(|v| v.is_finite()));
    unsafe { gemuco_model_free(h) };
}

#[test]
fn online_updates_after_warmup() {
    let (model, data) = tendon_model();
    let h = handle_from(&model);
    let cfg = CString::new(r#"{"mode":"w_only","min_start":5,"buffer_capacity":10}"#).unwrap();
    let mut on = ptr::null_mut();
    assert_eq!(
        unsafe { gemuco_online_new(h, cfg.as_ptr(), ptr::null(), 0, &mut on) },
        GemucoStatus::Ok,
        "{}",
        last_error()
    );
    let avail = [true; 3];
    let mut flags = Vec::new();
    for s in data.samples.iter().take(8) {
        let mut updated = false;
        let st = unsafe {
            gemuco_online_observe(on, s.values.as_ptr(), s.values.len(), avail.as_ptr(), 3, &mut updated)
        };
        assert_eq!(st, GemucoStatus::Ok);
        flags.push(updated);
    }
    assert_eq!(flags, [false, false, false, false, true, true, true, true]);

    let mut adapted = ptr::null_mut();
    assert_eq!(unsafe { gemuco_online_model(on, &mut adapted) }, GemucoStatus::Ok);
    let mut pb: [f64; 0] = [];
    assert_eq!(unsafe { gemuco_online_pb(on, pb.as_mut_ptr(), 0) }, GemucoStatus::Ok);

    let bad = CString::new(r#"{"mode":"sideways"}"#).unwrap();
    let mut on2 = ptr::null_mut();
    assert_eq!(unsafe { gemuco_online_new(h, bad.as_ptr(), ptr::null(), 0, &mut on2) }, GemucoStatus::Parse);
    unsafe {
        gemuco_online_free(on);
        gemuco_model_free(adapted);
        gemuco_model_free(h);
    }
}

#[test]
fn detector_flags_outliers() {
    let rows: Vec<f64> = (0..200)
        .flat_map(|i| {
            let t = i as f64;
            [(t * 0.37).sin(), (t * 0.91).cos()]
        })
        .collect();
    let mut det = ptr::null_mut();
    assert_eq!(
        unsafe { gemuco_detector_calibrate(rows.as_ptr(), 200, 2, &mut det) },
        GemucoStatus::Ok
    );
    let thr = unsafe { gemuco_detector_threshold(det) };
    assert!(thr.is_finite() && thr > 0.0);
    let (mut score, mut flag) = (0.0, true);
    let quiet = [0.0, 0.0];
    assert_eq!(unsafe { gemuco_detector_score(det, quiet.as_ptr(), 2, &mut score, &mut flag) }, GemucoStatus::Ok);
    assert!(!flag);
    let loud = [10.0, -10.0];
    unsafe { gemuco_detector_score(det, loud.as_ptr(), 2, &mut score, &mut flag) };
    assert!(flag && score > thr);

    let mut few = ptr::null_mut();
    assert_eq!(
        unsafe { gemuco_detector_calibrate(rows.as_ptr(), 2, 2, &mut few) },
        GemucoStatus::Dimension
    );
    unsafe { gemuco_detector_free(det) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/gemuco.h")).unwrap();
    for name in [
        "gemuco_version",
        "gemuco_last_error",
        "gemuco_model_load",
        "gemuco_model_predict",
        "gemuco_estimate",
        "gemuco_online_observe",
        "gemuco_detector_score",
        "GEMUCO_STATUS_OK",
        "typedef struct GemucoModel GemucoModel",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
    assert!(header.contains("size_t data_dim"));
}
