//! Black-box tests of the binary: exit codes, file outputs, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use once_cell::sync::Lazy;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_refdiff"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

const TINY: &[&str] = &[
    "--set",
    "dataset_size=80",
    "--set",
    "enc_epochs=2",
    "--set",
    "den_epochs=2",
    "--set",
    "align_epochs=2",
];

/// A tiny trained workspace shared by the generation tests.
static WORKSPACE: Lazy<PathBuf> = Lazy::new(|| {
    let dir = std::env::temp_dir().join(format!("refdiff-cli-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let d = |s: &str| dir.join(s).to_str().unwrap().to_string();

    let mut args: Vec<String> = vec!["gen-data".into(), "--out".into(), d("data")];
    args.extend(TINY.iter().map(|s| s.to_string()));
    assert!(bin().args(&args).output().unwrap().status.success(), "gen-data failed");

    for (component, extra) in [
        ("encoders", vec![]),
        ("denoiser", vec!["--encoders".to_string(), d("encoders")]),
        ("aligner", vec!["--encoders".to_string(), d("encoders")]),
    ] {
        let mut args: Vec<String> = vec![
            "train".into(),
            component.into(),
            "--data".into(),
            d("data"),
            "--out".into(),
            d(component),
        ];
        args.extend(extra);
        args.extend(TINY.iter().map(|s| s.to_string()));
        let out = bin().args(&args).output().unwrap();
        assert!(
            out.status.success(),
            "train {component} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    // export one dataset image as a reference pixmap
    let images: refdiff_core::tensor::Tensor<f32> =
        refdiff_core::io::read_vtf(dir.join("data/images.vtf")).unwrap();
    let per = 32 * 32 * 3;
    let one = refdiff_core::tensor::Tensor::from_vec(
        vec![32, 32, 3],
        images.data()[..per].to_vec(),
    )
    .unwrap();
    refdiff_core::io::write_ppm(dir.join("ref.ppm"), &one).unwrap();
    dir
});

fn ws(s: &str) -> String {
    WORKSPACE.join(s).to_str().unwrap().to_string()
}

fn generate(extra: &[&str], out: &str) -> Output {
    let mut args: Vec<String> = vec![
        "generate".into(),
        "--prompt".into(),
        "a red circle on a plain background".into(),
        "--encoders".into(),
        ws("encoders"),
        "--denoiser".into(),
        ws("denoiser"),
        "--aligner".into(),
        ws("aligner"),
        "--out".into(),
        ws(out),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    args.extend(TINY.iter().map(|s| s.to_string()));
    bin().args(&args).output().unwrap()
}

#[test]
fn gen_data_writes_expected_files_and_split() {
    let dir = std::env::temp_dir().join(format!("refdiff-gendata-{}", std::process::id()));
    let out = run(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--size",
        "1000",
        "--seed",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["images.vtf", "manifest.txt", "split.txt"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let split = std::fs::read_to_string(dir.join("split.txt")).unwrap();
    let count = |tag: &str| split.lines().filter(|l| l.ends_with(tag)).count();
    assert_eq!(count(" train"), 800);
    assert_eq!(count(" val"), 100);
    assert_eq!(count(" test"), 100);

    // rerun with identical args reproduces identical bytes
    let dir2 = std::env::temp_dir().join(format!("refdiff-gendata2-{}", std::process::id()));
    let out2 = run(&["gen-data", "--out", dir2.to_str().unwrap(), "--size", "1000", "--seed", "5"]);
    assert_eq!(code(&out2), 0);
    for f in ["images.vtf", "manifest.txt", "split.txt"] {
        let a = std::fs::read(dir.join(f)).unwrap();
        let b = std::fs::read(dir2.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between reruns");
    }
    std::fs::remove_dir_all(&dir).ok();
    std::fs::remove_dir_all(&dir2).ok();
}

#[test]
fn gen_data_rejects_tiny_size() {
    let dir = std::env::temp_dir().join(format!("refdiff-badsize-{}", std::process::id()));
    let out = run(&["gen-data", "--out", dir.to_str().unwrap(), "--size", "5"]);
    assert_eq!(code(&out), 2);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn invalid_loss_name_is_usage_error() {
    let out = run(&[
        "train",
        "aligner",
        "--data",
        "/nonexistent",
        "--out",
        "/tmp/never",
        "--loss",
        "bogus",
    ]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_prerequisite_checkpoint_is_actionable() {
    let out = run(&[
        "train",
        "aligner",
        "--data",
        &ws("data"),
        "--encoders",
        "/nonexistent-encoders",
        "--out",
        "/tmp/never",
    ]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("train encoders"),
        "error message not actionable: {err}"
    );
}

#[test]
fn unknown_config_key_rejected() {
    let out = run(&["gen-data", "--out", "/tmp/never", "--set", "typo_key=3"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn generate_is_deterministic_and_alpha_zero_matches_text() {
    let a = generate(&["--mode", "text", "--seed", "9"], "gen-a");
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let b = generate(&["--mode", "text", "--seed", "9"], "gen-b");
    assert_eq!(code(&b), 0);
    let img_a = std::fs::read(WORKSPACE.join("gen-a/image.ppm")).unwrap();
    let img_b = std::fs::read(WORKSPACE.join("gen-b/image.ppm")).unwrap();
    assert_eq!(img_a, img_b, "same-seed text generations differ");

    let c = generate(
        &[
            "--mode",
            "naive",
            "--alpha",
            "0",
            "--reference",
            &ws("ref.ppm"),
            "--seed",
            "9",
        ],
        "gen-c",
    );
    assert_eq!(code(&c), 0, "{}", String::from_utf8_lossy(&c.stderr));
    let img_c = std::fs::read(WORKSPACE.join("gen-c/image.ppm")).unwrap();
    assert_eq!(img_a, img_c, "naive alpha=0 differs from text mode");
}

#[test]
fn generate_fusion_without_reference_fails() {
    let out = generate(&["--mode", "concat", "--seed", "3"], "gen-noref");
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("reference"), "unhelpful error: {err}");
}

#[test]
fn generate_with_missing_checkpoint_fails() {
    let out = bin()
        .args([
            "generate",
            "--prompt",
            "a red circle on a plain background",
            "--mode",
            "text",
            "--encoders",
            "/nonexistent",
            "--denoiser",
            &ws("denoiser"),
            "--out",
            "/tmp/never",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn generate_unknown_prompt_word_fails() {
    let out = bin()
        .args([
            "generate",
            "--prompt",
            "a purple dinosaur",
            "--mode",
            "text",
            "--encoders",
            &ws("encoders"),
            "--denoiser",
            &ws("denoiser"),
            "--out",
            &ws("gen-unk"),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown token"));
}

#[test]
fn evaluate_empty_run_dir_fails_and_rerun_is_stable() {
    let empty = std::env::temp_dir().join(format!("refdiff-empty-{}", std::process::id()));
    std::fs::create_dir_all(&empty).unwrap();
    let out = run(&[
        "evaluate",
        "--run",
        empty.to_str().unwrap(),
        "--encoders",
        &ws("encoders"),
        "--out",
        empty.join("r.txt").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    std::fs::remove_dir_all(&empty).ok();

    // a real single-generation dir evaluates deterministically
    let g = generate(
        &[
            "--mode",
            "concat",
            "--reference",
            &ws("ref.ppm"),
            "--seed",
            "4",
        ],
        "gen-eval",
    );
    assert_eq!(code(&g), 0);
    let report1 = ws("report1.txt");
    let report2 = ws("report2.txt");
    for report in [&report1, &report2] {
        let out = run(&[
            "evaluate",
            "--run",
            &ws("gen-eval"),
            "--encoders",
            &ws("encoders"),
            "--out",
            report,
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(
        std::fs::read(Path::new(&report1)).unwrap(),
        std::fs::read(Path::new(&report2)).unwrap()
    );
}

#[test]
fn explicit_loss_both_reproduces_default_training() {
    for (dir, extra) in [("aligner-default", None), ("aligner-both", Some("both"))] {
        let mut args: Vec<String> = vec![
            "train".into(),
            "aligner".into(),
            "--data".into(),
            ws("data"),
            "--encoders".into(),
            ws("encoders"),
            "--out".into(),
            ws(dir),
        ];
        if let Some(loss) = extra {
            args.push("--loss".into());
            args.push(loss.into());
        }
        args.extend(TINY.iter().map(|s| s.to_string()));
        let out = bin().args(&args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["w1.vtf", "w2.vtf", "log_tau.vtf"] {
        let a = std::fs::read(WORKSPACE.join("aligner-default").join(f)).unwrap();
        let b = std::fs::read(WORKSPACE.join("aligner-both").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between default and --loss both");
    }
}

#[test]
fn evaluate_refuses_mixed_config_hashes_unless_forced() {
    let dir = "gen-mixed";
    let a = generate(
        &["--mode", "concat", "--reference", &ws("ref.ppm"), "--seed", "1"],
        dir,
    );
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    // second generation under a different config hash, same run dir: move
    // its files in manually
    let b = generate(
        &[
            "--mode",
            "concat",
            "--reference",
            &ws("ref.ppm"),
            "--seed",
            "2",
            "--set",
            "alpha=0.5",
        ],
        "gen-mixed-other",
    );
    assert_eq!(code(&b), 0);
    for f in ["image.ppm", "image.ref.ppm", "image.manifest.txt", "image.latent.vtf"] {
        let target = f.replace("image", "other");
        std::fs::copy(WORKSPACE.join("gen-mixed-other").join(f), WORKSPACE.join(dir).join(&target)).unwrap();
    }
    // patch the copied manifest so its file references match the new names
    let man = std::fs::read_to_string(WORKSPACE.join(dir).join("other.manifest.txt")).unwrap();
    std::fs::write(
        WORKSPACE.join(dir).join("other.manifest.txt"),
        man.replace("image.", "other.").replace("= image", "= other"),
    )
    .unwrap();

    let refused = run(&[
        "evaluate",
        "--run",
        &ws(dir),
        "--encoders",
        &ws("encoders"),
        "--out",
        &ws("mixed-report.txt"),
    ]);
    assert_eq!(code(&refused), 2, "{}", String::from_utf8_lossy(&refused.stderr));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));

    let forced = run(&[
        "evaluate",
        "--run",
        &ws(dir),
        "--encoders",
        &ws("encoders"),
        "--out",
        &ws("mixed-report.txt"),
        "--force",
    ]);
    assert_eq!(code(&forced), 0, "{}", String::from_utf8_lossy(&forced.stderr));
}

#[test]
fn selfcheck_passes_on_fresh_build() {
    let out = run(&["selfcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS grad_matmul"));
    assert!(!stdout.contains("FAIL"));
}
