use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use stgin_ffi::*;

fn last_error() -> String {
    let p = stgin_last_error_message();
    assert!(!p.is_null());
    // SAFETY: non-null pointers from the library are NUL-terminated.
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_options() -> StginTrainOptions {
    StginTrainOptions { gat_width: 3, hidden: 4, max_epochs: 3, window_length: 12, ..stgin_train_options_default() }
}

#[test]
fn synth_mask_train_impute_round_trip() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(stgin_dataset_synth(5, 24, 1, 1.0, &mut ds), StginStatus::Ok);
        let (n, t) = (stgin_dataset_nodes(ds), stgin_dataset_steps(ds));
        assert_eq!((n, t), (5, 24));

        let mut masked = ptr::null_mut();
        let mut observed = vec![9u8; n * t];
        let st = stgin_dataset_mask(ds, StginRegime::Random, 0.25, 3, &mut masked, observed.as_mut_ptr(), n * t);
        assert_eq!(st, StginStatus::Ok);
        assert_eq!(observed.iter().filter(|&&o| o == 0).count(), 30);

        let mut model = ptr::null_mut();
        assert_eq!(stgin_model_train(masked, &small_options(), &mut model), StginStatus::Ok);
        let (mut mu, mut s2) = (vec![0.0; n * t], vec![0.0; n * t]);
        assert_eq!(stgin_model_impute(model, masked, mu.as_mut_ptr(), s2.as_mut_ptr(), n * t), StginStatus::Ok);
        assert!(mu.iter().all(|v| v.is_finite()));
        assert!(s2.iter().all(|&v| v > 0.0));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(stgin_model_save(model, path.as_ptr()), StginStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(stgin_model_load(path.as_ptr(), &mut loaded), StginStatus::Ok);
        let (mut mu2, mut s22) = (vec![0.0; n * t], vec![0.0; n * t]);
        assert_eq!(stgin_model_impute(loaded, masked, mu2.as_mut_ptr(), s22.as_mut_ptr(), n * t), StginStatus::Ok);
        assert_eq!(mu, mu2);
        assert_eq!(s2, s22);

        stgin_model_free(loaded);
        stgin_model_free(model);
        stgin_dataset_free(masked);
        stgin_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported_not_panicked() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(stgin_dataset_synth(1, 24, 1, 1.0, &mut ds), StginStatus::InvalidArgument);
        assert!(ds.is_null());
        assert!(last_error().starts_with("invalid-argument"), "{}", last_error());

        assert_eq!(stgin_dataset_synth(4, 24, 1, 1.0, ptr::null_mut()), StginStatus::NullPointer);
        assert_eq!(stgin_dataset_values(ptr::null(), ptr::null_mut(), 0), StginStatus::NullPointer);

        assert_eq!(stgin_dataset_synth(4, 24, 1, 1.0, &mut ds), StginStatus::Ok);
        let mut buf = vec![0.0; 3];
        assert_eq!(stgin_dataset_values(ds, buf.as_mut_ptr(), 3), StginStatus::Shape);

        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(stgin_model_load(missing.as_ptr(), &mut model), StginStatus::Io);

        let bad = StginTrainOptions { lambda: 3.0, ..small_options() };
        assert_eq!(stgin_model_train(ds, &bad, &mut model), StginStatus::InvalidArgument);
        stgin_dataset_free(ds);
        stgin_dataset_free(ptr::null_mut());
    }
}

/// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_against_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    let target = std::env::var_os("CARGO_TARGET_DIR").map(PathBuf::from).unwrap_or_else(|| manifest.join("../../target"));
    let profile_dir = std::env::current_exe().unwrap().parent().and_then(|p| p.parent()).map(PathBuf::from);
    let lib = [profile_dir, Some(target.join("debug")), Some(target.join("release"))]
        .into_iter()
        .flatten()
        .map(|d| d.join("libstgin_ffi.a"))
        .find(|p| p.exists());
    let Some(lib) = lib else {
        eprintln!("skipping: libstgin_ffi.a not built");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "stgin.h"
int main(void) {
    StginDataset *ds = NULL;
    if (stgin_dataset_synth(4, 16, 1, 1.0, &ds) != STGIN_STATUS_OK) return 1;
    size_t n = stgin_dataset_nodes(ds), t = stgin_dataset_steps(ds);
    StginTrainOptions o = stgin_train_options_default();
    o.gat_width = 2; o.hidden = 3; o.max_epochs = 2; o.window_length = 8;
    StginModel *m = NULL;
    if (stgin_model_train(ds, &o, &m) != STGIN_STATUS_OK) return 2;
    double mu[64], s2[64];
    if (stgin_model_impute(m, ds, mu, s2, n * t) != STGIN_STATUS_OK) return 3;
    if (stgin_dataset_synth(0, 0, 0, 0.0, &ds) == STGIN_STATUS_OK) return 4;
    printf("%s\n", stgin_last_error_message());
    stgin_model_free(m);
    return s2[0] > 0.0 ? 0 : 5;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "cc failed: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "smoke exited with {:?}", run.status);
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("invalid-argument"));
}
