//! Compiles a C program against the generated header and the static library.

use std::path::PathBuf;
use std::process::Command;

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps/<binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_declares_every_entry_point() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ffnet.h")).unwrap();
    for f in [
        "ffnet_last_error",
        "ffnet_version",
        "ffnet_model_create",
        "ffnet_model_free",
        "ffnet_model_init_random",
        "ffnet_model_load_weights",
        "ffnet_model_save_weights",
        "ffnet_model_fold_batchnorm",
        "ffnet_model_input_dims",
        "ffnet_model_output_dims",
        "ffnet_model_num_nodes",
        "ffnet_model_num_params",
        "ffnet_model_run",
    ] {
        assert!(header.contains(&format!("{f}(")), "missing {f}");
    }
    assert!(header.contains("typedef struct FfnetModel FfnetModel;"));
}

#[test]
fn c_program_links_and_runs() {
    let lib = target_dir().join("libffnet_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let manifest = env!("CARGO_MANIFEST_DIR");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(format!("{manifest}/tests/c/smoke.c"))
        .arg(format!("-I{manifest}/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "smoke program failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("output 1x19x16x32"));
}
