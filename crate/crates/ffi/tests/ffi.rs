use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use eero_ffi::*;

fn last_error() -> String {
    let p = eero_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_dataset() -> *mut EeroDataset {
    let spec =
        CString::new(r#"{"seed": 4, "sizes": {"n_train": 300, "n_calib": 200, "n_test": 250}}"#)
            .unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { eero_dataset_synth(spec.as_ptr(), &mut ds) },
        EeroStatus::Ok
    );
    ds
}

#[test]
fn calibrate_infer_round_trip() {
    unsafe {
        let ds = small_dataset();
        assert_eq!(eero_dataset_num_heads(ds), 8);
        assert_eq!(eero_dataset_num_classes(ds), 10);
        assert_eq!(eero_dataset_num_instances(ds, EERO_SPLIT_TEST), 250);
        assert_eq!(eero_dataset_num_instances(ds, 9), 0);

        let mut budgets = [0.0; 8];
        assert_eq!(
            eero_dataset_head_budgets(ds, budgets.as_mut_ptr(), 8),
            EeroStatus::Ok
        );
        assert_eq!(budgets[0], 0.5);
        assert_eq!(
            eero_dataset_head_budgets(ds, budgets.as_mut_ptr(), 3),
            EeroStatus::InvalidArgument
        );

        let mut opts = eero_calibrate_options_default();
        opts.total_budget = 500.0;
        let mut cal = ptr::null_mut();
        assert_eq!(eero_calibrate(ds, &opts, &mut cal), EeroStatus::Ok);
        assert_eq!(eero_calibration_num_heads(cal), 8);
        let mut thresholds = [0.0; 8];
        assert_eq!(
            eero_calibration_thresholds(cal, thresholds.as_mut_ptr(), 8),
            EeroStatus::Ok
        );
        assert_eq!(thresholds[7], f64::NEG_INFINITY);

        let mut json = ptr::null_mut();
        assert_eq!(eero_calibration_to_json(cal, &mut json), EeroStatus::Ok);
        let mut cal2 = ptr::null_mut();
        assert_eq!(eero_calibration_from_json(json, &mut cal2), EeroStatus::Ok);
        eero_string_free(json);

        let mut res = ptr::null_mut();
        let mut res2 = ptr::null_mut();
        assert_eq!(eero_infer(ds, cal, &mut res), EeroStatus::Ok);
        assert_eq!(eero_infer(ds, cal2, &mut res2), EeroStatus::Ok);
        assert_eq!(eero_batch_result_num_instances(res), 250);
        assert!(eero_batch_result_consumed_budget(res) <= 500.0);
        let mut exits = vec![0usize; 250];
        let mut exits2 = vec![0usize; 250];
        assert_eq!(
            eero_batch_result_exits(res, exits.as_mut_ptr(), 250),
            EeroStatus::Ok
        );
        assert_eq!(
            eero_batch_result_exits(res2, exits2.as_mut_ptr(), 250),
            EeroStatus::Ok
        );
        assert_eq!(exits, exits2);
        let mut preds = vec![0usize; 250];
        assert_eq!(
            eero_batch_result_predictions(res, preds.as_mut_ptr(), 250),
            EeroStatus::Ok
        );
        assert!(preds.iter().all(|&p| p < 10));
        let mut acc = 0.0;
        assert_eq!(eero_batch_result_accuracy(res, &mut acc), EeroStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));

        eero_batch_result_free(res);
        eero_batch_result_free(res2);
        eero_calibration_free(cal);
        eero_calibration_free(cal2);
        eero_dataset_free(ds);
    }
}

#[test]
fn error_codes_and_messages() {
    unsafe {
        let ds = small_dataset();
        let mut opts = eero_calibrate_options_default();
        opts.total_budget = 10.0;
        let mut cal = ptr::null_mut();
        assert_eq!(eero_calibrate(ds, &opts, &mut cal), EeroStatus::Infeasible);
        assert!(cal.is_null());
        assert!(last_error().contains("125"), "{}", last_error());

        opts.total_budget = 500.0;
        opts.score_kind = 42;
        assert_eq!(
            eero_calibrate(ds, &opts, &mut cal),
            EeroStatus::InvalidArgument
        );

        let missing = CString::new("/nonexistent/eero/manifest.json").unwrap();
        let mut loaded = ptr::null_mut();
        assert_eq!(
            eero_dataset_load(missing.as_ptr(), &mut loaded),
            EeroStatus::Io
        );
        assert_eq!(
            eero_dataset_load(ptr::null(), &mut loaded),
            EeroStatus::InvalidArgument
        );
        assert!(eero_last_error_message().is_null() || !last_error().is_empty());

        let bad_spec = CString::new(r#"{"num_heads": 1}"#).unwrap();
        assert_eq!(
            eero_dataset_synth(bad_spec.as_ptr(), &mut loaded),
            EeroStatus::InvalidArgument
        );

        let mut ok = ptr::null_mut();
        opts.score_kind = EERO_SCORE_BREAKING_TIES;
        assert_eq!(eero_calibrate(ds, &opts, &mut ok), EeroStatus::Ok);
        assert!(eero_last_error_message().is_null());

        let other_spec = CString::new(r#"{"num_heads": 3, "head_accuracies": [0.5, 0.6, 0.7], "head_budgets": [1, 2, 3], "sizes": {"n_train": 50, "n_calib": 50, "n_test": 50}}"#).unwrap();
        let mut other = ptr::null_mut();
        assert_eq!(
            eero_dataset_synth(other_spec.as_ptr(), &mut other),
            EeroStatus::Ok
        );
        let mut res = ptr::null_mut();
        assert_eq!(eero_infer(other, ok, &mut res), EeroStatus::Mismatch);

        eero_calibration_free(ok);
        eero_dataset_free(other);
        eero_dataset_free(ds);
        eero_dataset_free(ptr::null_mut());
    }
}

#[test]
fn stateless_solvers() {
    unsafe {
        let risks = [1.0, 0.0];
        let budgets = [1.0, 2.0];
        let prior = [0.5, 0.5];
        let mut eps = [0.0; 2];
        let mut mu = 0.0;
        let s = eero_solve_allocation(
            risks.as_ptr(),
            budgets.as_ptr(),
            prior.as_ptr(),
            2,
            1.0,
            1.2,
            eps.as_mut_ptr(),
            &mut mu,
        );
        assert_eq!(s, EeroStatus::Ok);
        assert!((eps[0] - 0.8).abs() < 1e-6 && (eps[1] - 0.2).abs() < 1e-6);
        assert!((mu - (1.0 + 4f64.ln())).abs() < 1e-6);
        let s = eero_solve_allocation(
            risks.as_ptr(),
            budgets.as_ptr(),
            ptr::null(),
            2,
            1.0,
            0.5,
            eps.as_mut_ptr(),
            ptr::null_mut(),
        );
        assert_eq!(s, EeroStatus::Infeasible);

        let mut rate = 0.0;
        assert_eq!(
            eero_single_head_rate(1.0, 2.0, 150.0, 100, &mut rate),
            EeroStatus::Ok
        );
        assert_eq!(rate, 0.5);
        assert_eq!(
            eero_single_head_rate(2.0, 1.0, 150.0, 100, &mut rate),
            EeroStatus::InvalidArgument
        );
    }
}

#[test]
fn load_written_dataset() {
    let dir = tempdir();
    unsafe {
        let ds = small_dataset();
        let path = CString::new(dir.to_str().unwrap()).unwrap();
        assert_eq!(eero_dataset_write(ds, path.as_ptr()), EeroStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(eero_dataset_load(path.as_ptr(), &mut back), EeroStatus::Ok);
        assert_eq!(eero_dataset_num_instances(back, EERO_SPLIT_CALIB), 200);
        eero_dataset_free(back);
        eero_dataset_free(ds);
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

fn tempdir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("eero-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn crate_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn c_compiler() -> Option<String> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    Command::new(&cc)
        .arg("--version")
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|_| cc)
}

#[test]
fn header_is_current_and_valid_c() {
    let header = std::fs::read_to_string(crate_dir().join("include/eero.h")).unwrap();
    for name in [
        "eero_dataset_load",
        "eero_calibrate",
        "eero_infer",
        "eero_solve_allocation",
        "EERO_STATUS_INFEASIBLE",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let Some(cc) = c_compiler() else {
        eprintln!("no C compiler found; skipping header syntax check");
        return;
    };
    for std in ["-std=c99", "-std=c11"] {
        let out = Command::new(&cc)
            .args([std, "-Wall", "-Werror", "-fsyntax-only", "-I"])
            .arg(crate_dir().join("include"))
            .arg(crate_dir().join("tests/smoke.c"))
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

/// Links `tests/smoke.c` against the static library when cargo built one.
#[test]
fn c_program_links_and_runs() {
    let Some(cc) = c_compiler() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libeero_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let bin = tempdir().join("smoke");
    let out = Command::new(&cc)
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = Command::new(&bin).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(
        run.status.success(),
        "{stdout}{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(stdout.contains("heads=8 instances=400"), "{stdout}");
    assert!(stdout.contains("infeasible=4"), "{stdout}");
}
