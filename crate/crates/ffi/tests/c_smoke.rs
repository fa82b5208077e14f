//! Compiles a small C program against the generated header and the shared
//! library, then runs it.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "rego.h"

int main(int argc, char **argv) {
    RegoModel *model = NULL;
    if (rego_model_load(argv[1], &model) != REGO_STATUS_OK) {
        fprintf(stderr, "load: %s\n", rego_last_error_message());
        return 1;
    }
    uint32_t h = 0, w = 0;
    rego_model_resolution(model, &h, &w);
    size_t half = (size_t)h * (w / 2) * 3;
    unsigned char left[16 * 16 * 3];
    unsigned char out[16 * 32 * 3];
    if (half != sizeof left) return 2;
    for (size_t i = 0; i < half; i++) left[i] = (unsigned char)(i * 13);
    if (rego_model_outpaint(model, left, half, NULL, 0, NULL, 0, out, sizeof out) != REGO_STATUS_OK) {
        fprintf(stderr, "outpaint: %s\n", rego_last_error_message());
        return 3;
    }
    for (uint32_t y = 0; y < h; y++)
        if (memcmp(out + (size_t)y * w * 3, left + (size_t)y * (w / 2) * 3, (w / 2) * 3) != 0) return 4;
    RegoModel *bad = NULL;
    if (rego_model_load("/nonexistent.ckpt", &bad) != REGO_STATUS_IO) return 5;
    if (rego_last_error_message() == NULL) return 6;
    rego_model_free(model);
    printf("ok %s %ux%u\n", rego_version(), h, w);
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests/<binary> lives in target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

fn compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
}

#[test]
fn c_program_links_and_runs() {
    let cc = compiler().expect("a C compiler (cc, gcc or clang) is required for this test");
    let lib_dir = target_dir();
    assert!(
        lib_dir.join("librego_ffi.so").exists() || lib_dir.join("librego_ffi.dylib").exists(),
        "shared library not found in {}",
        lib_dir.display()
    );
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-o")
        .arg(&exe)
        .arg(format!("-I{}", include.display()))
        .arg(format!("-L{}", lib_dir.display()))
        .arg("-lrego_ffi")
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");

    let mut g = rego::generator::GeneratorConfig::new(16, 32, 4, 3);
    g.seed = 1;
    let ckpt = rego::checkpoint::ModelCheckpoint::initialize(rego::checkpoint::ModelConfig {
        generator: g,
        style: rego::styleloss::StyleConfig::default(),
    })
    .unwrap();
    let ckpt_path = dir.path().join("m.ckpt");
    ckpt.save(&ckpt_path, rego::checkpoint::Dtype::F32).unwrap();
    let out = Command::new(&exe).arg(&ckpt_path).output().unwrap();
    assert!(out.status.success(), "C program failed: {:?} {}", out.status, String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with(&format!("ok {} 16x32", env!("CARGO_PKG_VERSION"))), "{stdout}");
}
