use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use unbalance_lab_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = ul_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn small_config() -> CString {
    c(r#"{"theta_y":2.0,"unbalance":0.8,"mode":"CI","n_train":400,"seed":5}"#)
}

#[test]
fn loss_matches_closed_form() {
    let spec = c(r#"{"kind":"fbi","K":4.0,"xi":1.0}"#);
    let (mut loss, mut grad) = (0.0, 0.0);
    let status = unsafe { ul_loss(spec.as_ptr(), 1, 1, 0.5, &mut loss, &mut grad) };
    assert_eq!(status, UlStatus::Ok);
    // weight 4^(0.5) = 2 on -ln 0.5, plus the exponent's own derivative
    let ln2 = 2f64.ln();
    assert!((loss - 2.0 * ln2).abs() < 1e-12);
    assert!((grad + 4.0 + 4.0 * ln2 * ln2).abs() < 1e-12);
}

#[test]
fn peo_is_rejected_per_example() {
    let spec = c(r#"{"kind":"peo","lambda":1.0,"epsilon":0.0}"#);
    let (mut loss, mut grad) = (0.0, 0.0);
    let status = unsafe { ul_loss(spec.as_ptr(), 1, 0, 0.5, &mut loss, &mut grad) };
    assert_eq!(status, UlStatus::InvalidArgument);
    assert!(last_error().contains("batch"));
}

#[test]
fn null_and_bad_json_are_reported() {
    let mut loss = 0.0;
    let status = unsafe { ul_loss(ptr::null(), 0, 0, 0.5, &mut loss, &mut loss) };
    assert_eq!(status, UlStatus::NullPointer);
    assert!(last_error().contains("spec_json"));
    let bad = c("{not json");
    let status = unsafe { ul_loss(bad.as_ptr(), 0, 0, 0.5, &mut loss, &mut loss) };
    assert_eq!(status, UlStatus::Parse);
    let mut ds = ptr::null_mut();
    let cfg = c(r#"{"theta_y":1.0,"unbalance":1.0,"mode":"CI"}"#);
    assert_eq!(unsafe { ul_generate_train(cfg.as_ptr(), &mut ds) }, UlStatus::InvalidArgument);
    assert!(ds.is_null());
}

#[test]
fn auc_counts_ties_half() {
    let y = [0u8, 1, 0, 1];
    let p = [0.1, 0.5, 0.5, 0.9];
    let mut auc = 0.0;
    assert_eq!(unsafe { ul_auc(y.as_ptr(), p.as_ptr(), 4, &mut auc) }, UlStatus::Ok);
    assert!((auc - 0.875).abs() < 1e-12);
}

#[test]
fn arrays_validate_shape_and_labels() {
    let x = [0.0f64; 6];
    let y = [0u8, 1, 2];
    let mut ds = ptr::null_mut();
    let status = unsafe { ul_dataset_from_arrays(x.as_ptr(), 3, 2, y.as_ptr(), ptr::null(), 1, &mut ds) };
    assert_ne!(status, UlStatus::Ok);
    let y = [0u8, 1, 1];
    let z = [1u8, 1, 0];
    let status = unsafe { ul_dataset_from_arrays(x.as_ptr(), 3, 2, y.as_ptr(), z.as_ptr(), 0, &mut ds) };
    assert_eq!(status, UlStatus::Ok);
    unsafe {
        assert_eq!(ul_dataset_len(ds), 3);
        assert_eq!(ul_dataset_n_features(ds), 2);
        // d = |z - y|
        assert_eq!(ul_dataset_count_d(ds, 1), 2);
        ul_dataset_free(ds);
        assert_eq!(ul_dataset_len(ptr::null()), 0);
    }
}

#[test]
fn generate_train_evaluate_and_round_trip() {
    let cfg = small_config();
    let mut train = ptr::null_mut();
    let mut val = ptr::null_mut();
    unsafe {
        assert_eq!(ul_generate_train(cfg.as_ptr(), &mut train), UlStatus::Ok);
        assert_eq!(ul_generate_validation(cfg.as_ptr(), 200, &mut val), UlStatus::Ok);
        assert_eq!(ul_dataset_len(train), 400);
        assert_eq!(ul_dataset_count_d(train, 1), 80);

        let hidden = [8usize];
        let tc = c(r#"{"epochs":3,"batch_size":64,"seed":1,"loss":{"kind":"fbi","K":4.0,"xi":1.0}}"#);
        let mut model = ptr::null_mut();
        assert_eq!(ul_train(train, hidden.as_ptr(), 1, tc.as_ptr(), &mut model), UlStatus::Ok);
        assert_eq!(ul_model_input_width(model), ul_dataset_n_features(train));

        let mut report = UlGroupReport::default();
        assert_eq!(ul_evaluate(model, val, 0.5, &mut report), UlStatus::Ok);
        assert_eq!(report.mode, 0);
        assert_eq!(report.n_underg + report.n_overg, 200);
        assert!((0.0..=1.0).contains(&report.underg_metric));
        assert!(report.fpr_gap.is_nan());

        let dir = tempfile::tempdir().unwrap();
        let path = c(dir.path().join("m.txt").to_str().unwrap());
        assert_eq!(ul_model_save(model, path.as_ptr()), UlStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(ul_model_load(path.as_ptr(), &mut loaded), UlStatus::Ok);

        let n = 3;
        let width = ul_dataset_n_features(train);
        let rows: Vec<f64> = (0..n * width).map(|i| (i % 7) as f64 - 3.0).collect();
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        assert_eq!(ul_model_predict(model, rows.as_ptr(), n, width, a.as_mut_ptr()), UlStatus::Ok);
        assert_eq!(ul_model_predict(loaded, rows.as_ptr(), n, width, b.as_mut_ptr()), UlStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(
            ul_model_predict(model, rows.as_ptr(), n, width - 1, a.as_mut_ptr()),
            UlStatus::ShapeMismatch
        );

        let csv = c(dir.path().join("train.csv").to_str().unwrap());
        assert_eq!(ul_dataset_save_csv(train, csv.as_ptr()), UlStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(ul_dataset_load_csv(csv.as_ptr(), &mut back), UlStatus::Ok);
        assert_eq!(ul_dataset_len(back), 400);

        ul_model_free(model);
        ul_model_free(loaded);
        ul_dataset_free(train);
        ul_dataset_free(val);
        ul_dataset_free(back);
    }
}

#[test]
fn lfo_and_brnn_train_on_confounded_data() {
    let cfg = c(r#"{"theta_y":2.0,"unbalance":0.8,"mode":"CBUC","n_train":400,"seed":9}"#);
    let mut train = ptr::null_mut();
    unsafe {
        assert_eq!(ul_generate_train(cfg.as_ptr(), &mut train), UlStatus::Ok);
        let hidden = [8usize, 4];
        let tc = c(r#"{"epochs":2,"batch_size":64,"seed":3,"loss":{"kind":"h_star"}}"#);
        let lfo = c(r#"{"lr_model":0.001,"lr_lambda":0.001,"epsilon":0.0}"#);
        let mut model = ptr::null_mut();
        let mut lambda = -1.0;
        assert_eq!(
            ul_train_lfo(train, hidden.as_ptr(), 2, tc.as_ptr(), lfo.as_ptr(), &mut model, &mut lambda),
            UlStatus::Ok
        );
        assert!(lambda >= 0.0);
        ul_model_free(model);

        let mut brnn = ptr::null_mut();
        assert_eq!(ul_train_brnn(train, hidden.as_ptr(), 2, 1.0, tc.as_ptr(), &mut brnn), UlStatus::Ok);
        let mut report = UlGroupReport::default();
        assert_eq!(ul_evaluate(brnn, train, 0.5, &mut report), UlStatus::Ok);
        assert_eq!(report.mode, 1);
        assert!(report.fpr_gap.is_finite());
        assert_eq!(
            ul_train_brnn(train, hidden.as_ptr(), 0, 1.0, tc.as_ptr(), &mut brnn),
            UlStatus::InvalidArgument
        );
        ul_model_free(brnn);
        ul_dataset_free(train);
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(ul_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include/unbalance_lab.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["ul_train", "ul_evaluate", "ul_last_error", "UL_STATUS_OK", "UlGroupReport"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"unbalance_lab.h\"\n\
         int probe(void) {\n\
           UlDataset *ds = 0; UlModel *m = 0; UlGroupReport r;\n\
           size_t hidden[1] = {8};\n\
           UlStatus s = ul_generate_train(\"{}\", &ds);\n\
           if (s == UL_STATUS_OK) s = ul_train(ds, hidden, 1, \"{}\", &m);\n\
           if (s == UL_STATUS_OK) s = ul_evaluate(m, ds, 0.5, &r);\n\
           ul_model_free(m); ul_dataset_free(ds);\n\
           return s == UL_STATUS_OK ? 0 : (ul_last_error() != 0);\n\
         }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(root.join("include"))
        .arg(&src)
        .output()
        .expect("a C compiler on PATH");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
