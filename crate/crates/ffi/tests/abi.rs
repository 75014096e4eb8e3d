use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use tabdistill_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = td_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

unsafe fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = CStr::from_ptr(p).to_string_lossy().into_owned();
    td_string_free(p);
    s
}

#[test]
fn null_handles_are_reported() {
    unsafe {
        let mut m = TdMetrics::default();
        assert_eq!(td_record_metrics(ptr::null(), &mut m), TdStatus::InvalidPointer);
        assert!(last_error().contains("record"));
        assert_eq!(td_config_default(ptr::null_mut()), TdStatus::InvalidPointer);
        td_record_free(ptr::null_mut());
        td_dataset_free(ptr::null_mut());
    }
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(td_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn missing_files_are_data_errors() {
    unsafe {
        let mut ds = ptr::null_mut();
        let st = td_dataset_prepare(cstr("/nonexistent.csv").as_ptr(), cstr("/nonexistent.toml").as_ptr(), 0, &mut ds);
        assert_eq!(st, TdStatus::Data);
        assert!(ds.is_null());
        assert!(last_error().contains("nonexistent"));
    }
}

#[test]
fn config_round_trips_through_toml() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(td_config_default(&mut cfg), TdStatus::Ok);
        let mut text = ptr::null_mut();
        assert_eq!(td_config_to_toml(cfg, &mut text), TdStatus::Ok);
        let text = take_string(text);
        let mut back = ptr::null_mut();
        assert_eq!(td_config_from_toml(cstr(&text).as_ptr(), &mut back), TdStatus::Ok);

        let mut matched = ptr::null_mut();
        assert_eq!(td_config_budget_matched(back, 9_600, &mut matched), TdStatus::Ok);
        // below the warmup query count
        let mut tiny = ptr::null_mut();
        assert_eq!(td_config_budget_matched(back, 10, &mut tiny), TdStatus::Usage);
        assert!(tiny.is_null());

        let mut bad = ptr::null_mut();
        assert_eq!(td_config_from_toml(cstr("bins = 0").as_ptr(), &mut bad), TdStatus::Usage);
        assert_eq!(td_config_from_toml(cstr("no_such_field = 1").as_ptr(), &mut bad), TdStatus::Usage);
        for c in [cfg, back, matched] {
            td_config_free(c);
        }
    }
}

#[test]
fn teacher_distill_and_baseline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let csv = data_dir().join("breast_cancer.csv");
    let schema = data_dir().join("schemas/breast_cancer.toml");
    unsafe {
        let mut ds = ptr::null_mut();
        let st = td_dataset_prepare(
            cstr(csv.to_str().unwrap()).as_ptr(),
            cstr(schema.to_str().unwrap()).as_ptr(),
            0,
            &mut ds,
        );
        assert_eq!(st, TdStatus::Ok, "{}", last_error());
        let (mut rows, mut feats) = (0usize, 0usize);
        assert_eq!(td_dataset_shape(ds, &mut rows, &mut feats), TdStatus::Ok);
        assert_eq!((rows, feats), (569, 30));

        let mut teacher = ptr::null_mut();
        assert_eq!(td_teacher_train(ds, cstr("gbdt").as_ptr(), 0, &mut teacher), TdStatus::Ok, "{}", last_error());
        let path = dir.path().join("t.json");
        let cpath = cstr(path.to_str().unwrap());
        assert_eq!(td_teacher_save(teacher, cpath.as_ptr()), TdStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(td_teacher_load(cpath.as_ptr(), &mut loaded), TdStatus::Ok);

        let x = vec![0.25; 2 * feats];
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        assert_eq!(td_teacher_predict(teacher, x.as_ptr(), 2, feats, a.as_mut_ptr()), TdStatus::Ok);
        assert_eq!(td_teacher_predict(loaded, x.as_ptr(), 2, feats, b.as_mut_ptr()), TdStatus::Ok);
        assert_eq!(a, b);
        assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(td_teacher_predict(teacher, x.as_ptr(), 2, feats - 1, a.as_mut_ptr()), TdStatus::Numeric);

        let toml = "seeds = [0]\nwarmup_steps = 3\nphase1_steps = 5\nphase2_steps = 100\nbin_history = 256\nwrite_samples = false\n";
        let mut cfg = ptr::null_mut();
        assert_eq!(td_config_from_toml(cstr(toml).as_ptr(), &mut cfg), TdStatus::Ok);

        let run = dir.path().join("run");
        let mut rec = ptr::null_mut();
        let st = td_distill(loaded, ds, cfg, 0, cstr(run.to_str().unwrap()).as_ptr(), &mut rec);
        assert_eq!(st, TdStatus::Ok, "{}", last_error());
        assert!(run.join("metrics.csv").is_file());

        let mut m = TdMetrics::default();
        assert_eq!(td_record_metrics(rec, &mut m), TdStatus::Ok);
        for v in [m.accuracy, m.f1, m.agreement, m.coverage] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(m.queries, (3 + 5 + 100) * 128);
        let mut n = 0usize;
        assert_eq!(td_record_checkpoints(rec, &mut n), TdStatus::Ok);
        assert_eq!(n, 5);
        let mut csv_text = ptr::null_mut();
        assert_eq!(td_record_metrics_csv(rec, &mut csv_text), TdStatus::Ok);
        let csv_text = take_string(csv_text);
        assert_eq!(csv_text, std::fs::read_to_string(run.join("metrics.csv")).unwrap());
        let mut r = 0.0;
        assert_eq!(td_record_correlation(rec, &mut r), TdStatus::Ok);
        assert!(r.is_nan() || (-1.0..=1.0).contains(&r));

        let mut base = ptr::null_mut();
        assert_eq!(td_baseline(loaded, ds, cfg, 0, 7, ptr::null(), &mut base), TdStatus::Usage);
        let st = td_baseline(loaded, ds, cfg, 0, TdBaseline::Random as u32, ptr::null(), &mut base);
        assert_eq!(st, TdStatus::Ok, "{}", last_error());
        assert_eq!(td_record_metrics(base, &mut m), TdStatus::Ok);
        assert_eq!(m.queries, 9_600);

        td_record_free(rec);
        td_record_free(base);
        td_config_free(cfg);
        td_teacher_free(teacher);
        td_teacher_free(loaded);
        td_dataset_free(ds);
    }
}

fn exported_names() -> Vec<String> {
    let src = include_str!("../src/lib.rs");
    src.lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap().to_string())
        .collect()
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/tabdistill.h")).unwrap();
    let names = exported_names();
    assert!(names.len() > 15);
    for n in names {
        assert!(header.contains(&format!(" {n}(")) || header.contains(&format!("*{n}(")), "{n} missing");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"tabdistill.h\"\nint main(void) { TdMetrics m; TdStatus s = TD_STATUS_OK; (void)m; return (int)s; }\n",
    )
    .unwrap();
    let inc = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&inc)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
