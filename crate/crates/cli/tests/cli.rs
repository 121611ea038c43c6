use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn salibi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salibi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn gen(dir: &Path, samples: &str, size: &str) -> Output {
    let out = dir.to_str().unwrap();
    salibi(&[
        "gen-data",
        "--out",
        out,
        "--samples",
        samples,
        "--size",
        size,
        "--seed",
        "3",
    ])
}

#[test]
fn unknown_flags_are_usage_errors() {
    assert_eq!(code(&salibi(&["gen-data", "--out", "x", "--bogus"])), 2);
    assert_eq!(code(&salibi(&["frobnicate"])), 2);
    assert_eq!(code(&salibi(&["--help"])), 0);
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let out = gen(&data, "0", "8");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("resolved"));
    assert_eq!(
        code(&salibi(&[
            "verify-dataset",
            "--data",
            data.to_str().unwrap()
        ])),
        0
    );
}

#[test]
fn samples_file_size_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(dir.path(), "64", "32")), 0);
    let len = fs::metadata(dir.path().join("samples.bin")).unwrap().len();
    assert_eq!(len, 64 * (16 + 4 * 17 * 32 * 32));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert_eq!(code(&gen(&blocker.join("sub"), "2", "8")), 3);
}

#[test]
fn verify_dataset_checks_hash_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().to_str().unwrap();
    assert_eq!(code(&gen(dir.path(), "4", "8")), 0);
    let zeros = "0".repeat(64);
    assert_eq!(
        code(&salibi(&[
            "verify-dataset",
            "--data",
            data,
            "--expect-sha256",
            &zeros
        ])),
        1
    );

    let bin = dir.path().join("samples.bin");
    let bytes = fs::read(&bin).unwrap();
    fs::write(&bin, &bytes[..bytes.len() - 1]).unwrap();
    let out = salibi(&["verify-dataset", "--data", data]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("count mismatch"));
}

#[test]
fn zero_steps_writes_an_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let ckpt = dir.path().join("ckpt.bin");
    assert_eq!(code(&gen(&data, "4", "8")), 0);
    let out = salibi(&[
        "train",
        "--config",
        "micro",
        "--data",
        data.to_str().unwrap(),
        "--steps",
        "0",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
}

#[test]
fn config_and_data_size_mismatch_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let ckpt = dir.path().join("ckpt.bin");
    assert_eq!(code(&gen(&data, "4", "16")), 0);
    let out = salibi(&[
        "train",
        "--config",
        "micro",
        "--data",
        data.to_str().unwrap(),
        "--steps",
        "1",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(!ckpt.exists());
}

#[test]
fn bias_dump_writes_one_block_per_head() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bias.csv");
    let out = salibi(&[
        "bias-dump",
        "--rows",
        "2",
        "--cols",
        "2",
        "--patch",
        "2",
        "--gsd",
        "1",
        "--heads",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("# head=")).count(), 2);
    assert_eq!(text.lines().count(), 2 * 5);

    let bad = salibi(&[
        "bias-dump",
        "--rows",
        "2",
        "--cols",
        "2",
        "--patch",
        "2",
        "--gsd",
        "1",
        "--key-rows",
        "2",
        "--key-cols",
        "2",
        "--key-gsd",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&bad), 2);
}
