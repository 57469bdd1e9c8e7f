//! End-to-end runs of the `ffnet` binary.

use std::path::Path;
use std::process::{Command, Output};

use ffnet::segtool::Image;

fn ffnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ffnet(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = "backbone=resnet22s stem=B up=C seg=C stride1=2";

#[test]
fn registry_lists_every_backbone() {
    let text = ok(&["registry"]);
    assert_eq!(text.lines().count(), 22);
    assert!(text.contains("resnet122ns"));
    assert!(text
        .lines()
        .any(|l| l.starts_with("resnet101") && l.contains("bottleneck")));
}

#[test]
fn profile_text_and_csv() {
    let text = ok(&[
        "profile",
        "--model",
        "backbone=resnet18 stride1=2",
        "--input",
        "1024x2048",
    ]);
    assert!(
        text.contains("16154579") || text.contains("16,154,579"),
        "{text}"
    );
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    ok(&[
        "profile",
        "--model",
        SMALL,
        "--input",
        "128x256",
        "--format",
        "csv",
        "--out",
        csv.to_str().unwrap(),
    ]);
    let body = std::fs::read_to_string(&csv).unwrap();
    let mut lines = body.lines();
    assert_eq!(
        lines.next().unwrap(),
        "id,name,kind,params,bn_stats,macs,flops,mem_bytes,r,j"
    );
    assert!(body.lines().last().unwrap().starts_with("total,"));
}

#[test]
fn config_files_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.cfg");
    std::fs::write(
        &cfg,
        "# mobile\nbackbone = resnet22s\nstem = B\nup = C\nseg = C\nmode = nearest\n",
    )
    .unwrap();
    ok(&[
        "profile",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        "64x128",
    ]);

    std::fs::write(&cfg, "backbone = resnet22s\ncolour = red\n").unwrap();
    let bad = ffnet(&["profile", "--config", cfg.to_str().unwrap()]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));

    assert!(
        !ffnet(&["profile", "--model", "backbone=resnet122n stem=A"])
            .status
            .success()
    );
    assert!(!ffnet(&["profile", "--model", SMALL, "--input", "12by3"])
        .status
        .success());
    assert!(!ffnet(&["profile"]).status.success());
}

#[test]
fn bench_appends_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let c = csv.to_str().unwrap();
    for fold in [false, true] {
        let mut args = vec![
            "bench",
            "--model",
            SMALL,
            "--input",
            "64x128",
            "--iters",
            "3",
            "--warmup",
            "1",
            "--threads",
            "1",
            "--csv",
            c,
        ];
        if fold {
            args.push("--fold-bn");
        }
        let line = ok(&args);
        assert!(line.contains("median"), "{line}");
    }
    let body = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<_> = body.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * (3 + 1));
    assert_eq!(lines.iter().filter(|l| l.starts_with("model,")).count(), 1);
    assert!(lines[4].contains(",false,1,median,"));
    assert!(lines[8].contains(",true,1,median,"));
    assert!(
        !ffnet(&["bench", "--model", SMALL, "--input", "64x128", "--iters", "0"])
            .status
            .success()
    );
}

fn write_test_image(path: &Path, h: usize, w: usize) {
    let px = (0..h * w * 3).map(|i| (i * 37 % 251) as u8).collect();
    Image::rgb(w, h, px).unwrap().save(path).unwrap();
}

#[test]
fn init_segment_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    ok(&[
        "init",
        "--model",
        SMALL,
        "--seed",
        "3",
        "--out",
        &p("w.ffnw"),
    ]);
    write_test_image(&dir.path().join("in.ppm"), 64, 128);
    std::fs::create_dir(dir.path().join("pred")).unwrap();
    std::fs::create_dir(dir.path().join("gt")).unwrap();

    ok(&[
        "segment",
        "--model",
        SMALL,
        "--weights",
        &p("w.ffnw"),
        "--image",
        &p("in.ppm"),
        "--out",
        &p("out.ppm"),
        "--classmap",
        &p("pred/a.pgm"),
    ]);
    let colour = Image::load(dir.path().join("out.ppm")).unwrap();
    assert_eq!(
        (colour.width(), colour.height(), colour.channels()),
        (16, 8, 3)
    );

    ok(&[
        "segment",
        "--model",
        SMALL,
        "--weights",
        &p("w.ffnw"),
        "--image",
        &p("in.ppm"),
        "--out",
        &p("full.ppm"),
        "--classmap",
        &p("pred/b.pgm"),
        "--fold-bn",
        "--full-res",
        "--mean",
        "0.5,0.5,0.5",
        "--std",
        "0.25,0.25,0.25",
    ]);
    let full = Image::load(dir.path().join("full.ppm")).unwrap();
    assert_eq!((full.width(), full.height()), (128, 64));

    // prediction against itself scores 100
    std::fs::copy(dir.path().join("pred/a.pgm"), dir.path().join("gt/a.pgm")).unwrap();
    std::fs::copy(dir.path().join("pred/b.pgm"), dir.path().join("gt/b.pgm")).unwrap();
    let report = ok(&[
        "eval",
        "--pred-dir",
        &p("pred"),
        "--gt-dir",
        &p("gt"),
        "--csv",
        &p("iou.csv"),
    ]);
    assert!(report.contains("mIoU 100.00 over 2 images"), "{report}");
    let csv = std::fs::read_to_string(dir.path().join("iou.csv")).unwrap();
    assert!(csv.starts_with("class,name,iou\n0,road,"));
    assert!(csv.trim_end().ends_with("mean,,1"));

    let other = ok(&[
        "init",
        "--model",
        "backbone=resnet18",
        "--out",
        &p("other.ffnw"),
    ]);
    assert!(other.contains("entries"));
    let mismatch = ffnet(&[
        "segment",
        "--model",
        SMALL,
        "--weights",
        &p("other.ffnw"),
        "--image",
        &p("in.ppm"),
        "--out",
        &p("x.ppm"),
    ]);
    assert!(!mismatch.status.success());
}
