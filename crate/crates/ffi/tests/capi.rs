use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;

use vesselforge::metrics::predict_image;
use vesselforge::nn::{init_params, write_weight_file, ModelSpec, WeightFile};
use vesselforge::preprocess::{preprocess_any, PreprocessConfig};
use vesselforge::raster::Raster;
use vesselforge_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as c_char; 512];
    unsafe { vf_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn write_model(path: &Path, base: usize) -> vesselforge::nn::ModelParams<f32> {
    let params = init_params::<f32>(&ModelSpec::with_base(base), 9).unwrap();
    write_weight_file(path, &WeightFile::from_params(&params)).unwrap();
    params
}

#[test]
fn counts() {
    let mut n = 0usize;
    assert_eq!(unsafe { vf_param_count(32, &mut n) }, VfStatus::Ok);
    assert_eq!(n, 465_953);
    assert_eq!(unsafe { vf_test_grid_count(584, 565, 48, 48, 5, &mut n) }, VfStatus::Ok);
    assert_eq!(n, 11445);
    assert_eq!(unsafe { vf_test_grid_count(584, 565, 48, 48, 0, &mut n) }, VfStatus::Config);
    assert!(last_error().contains("stride"));
    assert_eq!(unsafe { vf_param_count(32, std::ptr::null_mut()) }, VfStatus::InvalidArgument);
}

#[test]
fn auc_and_errors() {
    let scores = [0.1f32, 0.4, 0.35, 0.8];
    let labels = [0u8, 0, 1, 1];
    let mut auc = 0.0;
    assert_eq!(unsafe { vf_roc_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut auc) }, VfStatus::Ok);
    assert_eq!(auc, 0.75);
    let one_class = [1u8; 4];
    assert_eq!(unsafe { vf_roc_auc(scores.as_ptr(), one_class.as_ptr(), 4, &mut auc) }, VfStatus::Numerical);
    assert!(last_error().contains("degenerate classes"));
    assert_eq!(unsafe { vf_roc_auc(std::ptr::null(), labels.as_ptr(), 4, &mut auc) }, VfStatus::InvalidArgument);
    assert_eq!(last_error(), "scores is null");
}

#[test]
fn preprocess_matches_library() {
    let rgb = Raster::from_fn(40, 30, |r, c| ((r * 7 + c * 3) % 256) as u8);
    let rgb = Raster::new(40, 30, 3, rgb.data().iter().flat_map(|&v| [v, v / 2, 255 - v]).collect()).unwrap();
    let mut out = vec![0u8; 40 * 30];
    assert_eq!(unsafe { vf_preprocess(rgb.data().as_ptr(), 40, 30, 3, out.as_mut_ptr()) }, VfStatus::Ok);
    assert_eq!(out, preprocess_any(&rgb, &PreprocessConfig::default()).unwrap().data());
    assert_eq!(unsafe { vf_preprocess(rgb.data().as_ptr(), 40, 30, 2, out.as_mut_ptr()) }, VfStatus::InvalidArgument);
}

#[test]
fn model_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sunw");
    let params = write_model(&path, 4);
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = std::ptr::null_mut();
    assert_eq!(unsafe { vf_model_load(cpath.as_ptr(), &mut model) }, VfStatus::Ok);
    let mut base = 0;
    assert_eq!(unsafe { vf_model_base_channels(model, &mut base) }, VfStatus::Ok);
    assert_eq!(base, 4);

    let img = Raster::from_fn(37, 29, |r, c| ((r * 11 + c * 5) % 256) as u8);
    let mut probs = vec![0f32; 37 * 29];
    let s = unsafe { vf_model_predict(model, img.data().as_ptr(), 37, 29, 16, 6, probs.as_mut_ptr()) };
    assert_eq!(s, VfStatus::Ok);
    assert_eq!(probs, predict_image(&img, &params, 16, 6).unwrap().data);
    let s = unsafe { vf_model_predict(model, img.data().as_ptr(), 37, 29, 64, 6, probs.as_mut_ptr()) };
    assert_eq!(s, VfStatus::Shape);
    unsafe { vf_model_free(model) };

    let missing = CString::new(dir.path().join("none.sunw").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { vf_model_load(missing.as_ptr(), &mut model) }, VfStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("none.sunw"));
    std::fs::write(&path, b"garbage").unwrap();
    assert_eq!(unsafe { vf_model_load(cpath.as_ptr(), &mut model) }, VfStatus::Format);
    unsafe { vf_model_free(std::ptr::null_mut()) };
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(vf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "vesselforge.h"

int main(int argc, char **argv) {
    size_t n = 0;
    if (vf_test_grid_count(584, 565, 48, 48, 5, &n) != VF_STATUS_OK || n != 11445) return 1;
    if (vf_param_count(32, &n) != VF_STATUS_OK || n != 465953) return 2;
    VfModel *m = NULL;
    if (vf_model_load(argv[1], &m) != VF_STATUS_OK) return 3;
    unsigned char img[24 * 20];
    float probs[24 * 20];
    for (int i = 0; i < 24 * 20; i++) img[i] = (unsigned char)(i * 13);
    if (vf_model_predict(m, img, 24, 20, 16, 4, probs) != VF_STATUS_OK) return 4;
    for (int i = 0; i < 24 * 20; i++) if (!(probs[i] >= 0.0f && probs[i] <= 1.0f)) return 5;
    vf_model_free(m);
    if (vf_model_load("/nonexistent.sunw", &m) != VF_STATUS_IO || m != NULL) return 6;
    char msg[256];
    size_t len = vf_last_error(msg, sizeof msg);
    if (len == 0) return 7;
    printf("%s\n", msg);
    return 0;
}
"#;

/// Compiles a C program against the generated header and the static library.
#[test]
fn header_links_from_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler ({cc}); C link check not run");
        return;
    }
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libvesselforge_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let build = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let model = dir.path().join("m.sunw");
    write_model(&model, 2);
    let run = Command::new(&exe).arg(&model).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).contains("nonexistent.sunw"));
}
