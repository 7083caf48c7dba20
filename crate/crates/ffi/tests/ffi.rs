use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use diffcom::checkpoint::{Checkpoint, TrainingState};
use diffcom::codec::{compress, CompressOptions};
use diffcom::model::{Model, ModelConfig, Variant};
use diffcom::train::make_synthetic_dataset;
use diffcom::train::Shape;
use diffcom_ffi::*;

fn checkpoint(dir: &Path) -> (PathBuf, Model) {
    let model = Model::new(&ModelConfig::smoke(Variant::Full), 3).unwrap();
    let path = dir.join("model.json");
    Checkpoint::from_model(&model, 0, TrainingState::default()).save(&path).unwrap();
    (path, model)
}

fn flat(pc: &diffcom::PointCloud) -> Vec<f64> {
    pc.points().data().to_vec()
}

unsafe fn load(path: &Path) -> *mut DcModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(dc_model_load(c.as_ptr(), &mut m), DcStatus::Ok);
    m
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dc_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn roundtrip_matches_rust_api() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = checkpoint(dir.path());
    let cloud = make_synthetic_dataset(&[Shape::Torus], 1, 512, 4).unwrap().remove(0);
    let xyz = flat(&cloud);
    unsafe {
        let m = load(&path);
        let mut count = 0usize;
        assert_eq!(dc_model_point_count(m, &mut count), DcStatus::Ok);
        assert_eq!(count, 512);

        let (mut bytes, mut len) = (ptr::null_mut(), 0usize);
        assert_eq!(dc_compress(m, xyz.as_ptr(), 512, 9, 5, &mut bytes, &mut len), DcStatus::Ok);
        let stream = std::slice::from_raw_parts(bytes, len).to_vec();
        let want = compress(&model, &cloud, &CompressOptions { steps: Some(5), seed: 9 }).unwrap();
        assert_eq!(stream, want.bytes);

        let (mut pts, mut n) = (ptr::null_mut(), 0usize);
        assert_eq!(dc_decompress(m, bytes, len, 0, &mut pts, &mut n), DcStatus::Ok);
        assert_eq!(n, 512);
        let a = std::slice::from_raw_parts(pts, 3 * n).to_vec();
        let (mut pts2, mut n2) = (ptr::null_mut(), 0usize);
        assert_eq!(dc_decompress(m, bytes, len, 0, &mut pts2, &mut n2), DcStatus::Ok);
        assert_eq!(a, std::slice::from_raw_parts(pts2, 3 * n2));

        let mut cd = -1.0;
        assert_eq!(dc_chamfer(pts, n, pts2, n2, &mut cd), DcStatus::Ok);
        assert_eq!(cd, 0.0);

        dc_points_free(pts, n);
        dc_points_free(pts2, n2);
        dc_bytes_free(bytes, len);
        dc_model_free(m);
    }
}

#[test]
fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = checkpoint(dir.path());
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(dc_model_load(ptr::null(), &mut m), DcStatus::NullPointer);
        let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
        assert_eq!(dc_model_load(missing.as_ptr(), &mut m), DcStatus::Io);
        assert!(m.is_null());
        assert!(!last_error().is_empty());

        let garbage = dir.path().join("garbage.json");
        std::fs::write(&garbage, b"{not json").unwrap();
        let g = CString::new(garbage.to_str().unwrap()).unwrap();
        assert_eq!(dc_model_load(g.as_ptr(), &mut m), DcStatus::Parse);

        let m = load(&path);
        let small = vec![0.1f64; 3 * 100];
        let (mut bytes, mut len) = (ptr::null_mut(), 0usize);
        assert_eq!(dc_compress(m, small.as_ptr(), 100, 0, 0, &mut bytes, &mut len), DcStatus::ConfigMismatch);
        assert!(last_error().contains("points"));
        assert_eq!(dc_compress(m, ptr::null(), 100, 0, 0, &mut bytes, &mut len), DcStatus::NullPointer);

        let cloud = make_synthetic_dataset(&[Shape::Cube], 1, 512, 2).unwrap().remove(0);
        let xyz = flat(&cloud);
        assert_eq!(dc_compress(m, xyz.as_ptr(), 512, 0, 3, &mut bytes, &mut len), DcStatus::Ok);
        let mut bad = std::slice::from_raw_parts(bytes, len).to_vec();
        let last = bad.len() - 6;
        bad[last] ^= 0x5a;
        let (mut pts, mut n) = (ptr::null_mut(), 0usize);
        assert_eq!(dc_decompress(m, bad.as_ptr(), bad.len(), 0, &mut pts, &mut n), DcStatus::CorruptStream);
        assert!(pts.is_null());
        assert_eq!(dc_decompress(m, bad.as_ptr(), 10, 0, &mut pts, &mut n), DcStatus::CorruptStream);

        let mut cd = 0.0;
        assert_eq!(dc_chamfer(xyz.as_ptr(), 0, xyz.as_ptr(), 1, &mut cd), DcStatus::InvalidArgument);
        dc_bytes_free(bytes, len);
        dc_model_free(m);
        dc_model_free(ptr::null_mut());
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(dc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("diffcom.h")
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().map(|o| o.status.success()).unwrap_or(false)
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header_path()).unwrap();
    for sym in [
        "dc_model_load",
        "dc_model_free",
        "dc_model_point_count",
        "dc_compress",
        "dc_decompress",
        "dc_chamfer",
        "dc_bytes_free",
        "dc_points_free",
        "dc_last_error",
        "dc_version",
        "DC_STATUS_CORRUPT_STREAM",
        "typedef struct DcModel DcModel",
    ] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "diffcom.h"

int main(int argc, char **argv) {
    DcModel *m = NULL;
    if (dc_model_load(argv[1], &m) != DC_STATUS_OK) { fprintf(stderr, "%s\n", dc_last_error()); return 1; }
    size_t n = 0;
    dc_model_point_count(m, &n);
    double *xyz = malloc(sizeof(double) * 3 * n);
    for (size_t i = 0; i < n; i++) {
        double t = (double)i / (double)n;
        xyz[3 * i] = t - 0.5; xyz[3 * i + 1] = (double)((i * 7) % 13) / 13.0 - 0.5; xyz[3 * i + 2] = (double)((i * 5) % 11) / 11.0 - 0.5;
    }
    uint8_t *bytes = NULL; size_t len = 0;
    if (dc_compress(m, xyz, n, 1, 4, &bytes, &len) != DC_STATUS_OK) { fprintf(stderr, "%s\n", dc_last_error()); return 2; }
    double *out = NULL; size_t k = 0;
    if (dc_decompress(m, bytes, len, 0, &out, &k) != DC_STATUS_OK) { fprintf(stderr, "%s\n", dc_last_error()); return 3; }
    double *none = NULL; size_t zero = 0;
    if (dc_decompress(m, bytes, 8, 0, &none, &zero) != DC_STATUS_CORRUPT_STREAM || none != NULL) return 4;
    printf("%zu %zu\n", len, k);
    dc_points_free(out, k);
    dc_bytes_free(bytes, len);
    dc_model_free(m);
    free(xyz);
    return 0;
}
"#;

#[test]
fn c_program_links_against_static_library() {
    if !have_cc() {
        eprintln!("cc not found; skipping C link test");
        return;
    }
    // target/<profile>/deps/<test-exe> -> target/<profile>/libdiffcom_ffi.a
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap().to_path_buf();
    let lib = lib_dir.join("libdiffcom_ffi.a");
    // Integration tests only link the rlib; (re)build the archive with the same profile.
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let profile = if lib_dir.ends_with("release") { "release" } else { "test" };
    let st = Command::new(cargo)
        .args(["build", "-p", "diffcom-ffi", "--lib", "--profile", profile])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .status()
        .unwrap();
    assert!(st.success(), "building the static library failed");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = checkpoint(dir.path());
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-I")
        .arg(header_path().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "cc failed: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).arg(&ckpt).output().unwrap();
    assert!(run.status.success(), "C program failed: {}", String::from_utf8_lossy(&run.stderr));
    let text = String::from_utf8(run.stdout).unwrap();
    let fields: Vec<usize> = text.split_whitespace().map(|s| s.parse().unwrap()).collect();
    assert_eq!(fields[1], 512, "{text}");
    assert!(fields[0] > 53);
}
