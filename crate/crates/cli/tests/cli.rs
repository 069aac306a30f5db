//! Exit-code contract and small end-to-end checks on the binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn crysforge(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_crysforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("crysforge-cli-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn invalid_flags_exit_with_code_two() {
    let out = crysforge(&["gen", "--n", "not-a-number", "--out", "/tmp/nowhere"]);
    assert_eq!(out.status.code(), Some(2));

    let out = crysforge(&["train", "--model", "perceptron"]);
    assert_eq!(out.status.code(), Some(2));

    let out = crysforge(&["gen", "--n", "0", "--out", "/tmp/nowhere"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "zero count is a validation error"
    );

    let out = crysforge(&[
        "gen",
        "--n",
        "4",
        "--fixed-cell",
        "10,20",
        "--out",
        "/tmp/nowhere",
    ]);
    assert_eq!(out.status.code(), Some(2), "fixed cell needs three edges");
}

#[test]
fn missing_dataset_is_an_io_failure() {
    let out = crysforge(&[
        "train",
        "--data",
        "/tmp/definitely-not-a-dataset",
        "--out",
        "/tmp/nowhere",
        "--model",
        "crysformer",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn refined_checkpoint_requires_prior_at_eval() {
    let root = scratch("prior");
    let ds = root.join("ds");
    assert!(
        crysforge(&["gen", "--n", "6", "--seed", "3", "--out", &s(&ds)])
            .status
            .success()
    );
    let base = root.join("base");
    assert!(crysforge(&[
        "train",
        "--data",
        &s(&ds),
        "--out",
        &s(&base),
        "--model",
        "unet",
        "--epochs",
        "1",
        "--batch",
        "4",
        "--seed",
        "5",
    ])
    .status
    .success());
    let refined = root.join("refined");
    assert!(crysforge(&[
        "train",
        "--data",
        &s(&ds),
        "--out",
        &s(&refined),
        "--model",
        "unet",
        "--refine",
        &s(&base.join("checkpoint.crys")),
        "--epochs",
        "1",
        "--batch",
        "4",
        "--seed",
        "6",
    ])
    .status
    .success());

    // Without --prior the refined checkpoint cannot assemble its input.
    let out = crysforge(&[
        "eval",
        "--ckpt",
        &s(&refined.join("checkpoint.crys")),
        "--data",
        &s(&ds),
        "--out",
        &s(&root.join("eval")),
        "--split",
        "all",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(msg.contains("--prior"), "unexpected message: {msg}");

    // With it, evaluation succeeds.
    let out = crysforge(&[
        "eval",
        "--ckpt",
        &s(&refined.join("checkpoint.crys")),
        "--data",
        &s(&ds),
        "--out",
        &s(&root.join("eval")),
        "--split",
        "all",
        "--prior",
        &s(&base.join("checkpoint.crys")),
    ]);
    assert!(out.status.success());
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn report_merges_a_run_with_itself_identically() {
    let root = scratch("selfmerge");
    let ds = root.join("ds");
    assert!(
        crysforge(&["gen", "--n", "6", "--seed", "9", "--out", &s(&ds)])
            .status
            .success()
    );
    let tr = root.join("train");
    assert!(crysforge(&[
        "train",
        "--data",
        &s(&ds),
        "--out",
        &s(&tr),
        "--model",
        "crysformer",
        "--epochs",
        "1",
        "--batch",
        "4",
        "--seed",
        "5",
    ])
    .status
    .success());
    let ev_a = root.join("eval-a");
    let ev_b = root.join("eval-b");
    for (dir, label) in [(&ev_a, "first"), (&ev_b, "second")] {
        assert!(crysforge(&[
            "eval",
            "--ckpt",
            &s(&tr.join("checkpoint.crys")),
            "--data",
            &s(&ds),
            "--out",
            &s(dir),
            "--split",
            "all",
            "--label",
            label,
        ])
        .status
        .success());
    }
    let report = root.join("report.csv");
    assert!(
        crysforge(&["report", "--out", &s(&report), &s(&ev_a), &s(&ev_b)])
            .status
            .success()
    );

    let text = std::fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len() % 2, 0);
    let half = rows.len() / 2;
    for i in 0..half {
        let a: Vec<&str> = rows[i].split(',').collect();
        let b: Vec<&str> = rows[half + i].split(',').collect();
        assert_eq!(a[0], "first");
        assert_eq!(b[0], "second");
        // Labels differ; every metric column is identical.
        assert_eq!(a[1..], b[1..], "row {i} differs");
    }
    std::fs::remove_dir_all(&root).ok();
}
