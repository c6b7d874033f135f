#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

pub fn run(args: &[&str]) -> i32 {
    let mut full = vec!["sitemeta"];
    full.extend_from_slice(args);
    sitemeta::cli::run(full)
}

pub fn run_ok(args: &[&str]) {
    assert_eq!(run(args), 0, "sitemeta {}", args.join(" "));
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

pub const SMALL_DATA: &[&str] = &[
    "--sites",
    "10",
    "--split",
    "6/3/1",
    "--per-site",
    "48",
    "--feature-dim",
    "6",
    "--seed",
    "3",
];

pub const SMALL_META: &[&str] = &[
    "--k-support",
    "10",
    "--t-target",
    "5",
    "--inner-steps",
    "2",
    "--max-epochs",
    "6",
    "--episodes-per-epoch",
    "3",
    "--val-episodes",
    "2",
    "--msl-anneal-epochs",
    "2",
    "--seed",
    "3",
];

pub const SMALL_BASELINE: &[&str] = &[
    "--k-support",
    "10",
    "--pretrain-epochs",
    "3",
    "--finetune-epochs",
    "3",
    "--patience",
    "3",
    "--seed",
    "3",
];

/// Runs every command of a small experiment into `out`.
pub fn small_pipeline(out: &Path) {
    let o = s(out);
    let data = out.join("dataset.bin");
    let d = s(&data);
    let with = |head: &[&str], tail: &[&str]| {
        let mut v = head.to_vec();
        v.extend_from_slice(tail);
        run_ok(&v);
    };
    with(&["gen-data", "--out", o, "--threads", "1"], SMALL_DATA);
    with(
        &[
            "meta-train",
            "--data",
            d,
            "--out",
            o,
            "--threads",
            "1",
            "--hidden",
            "8",
        ],
        SMALL_META,
    );
    with(
        &["meta-test", "--data", d, "--out", o, "--threads", "1"],
        SMALL_META,
    );
    run_ok(&["zero-shot", "--data", d, "--out", o, "--threads", "1"]);
    with(
        &[
            "baseline",
            "--data",
            d,
            "--out",
            o,
            "--threads",
            "1",
            "--hidden",
            "8",
        ],
        SMALL_BASELINE,
    );
}

/// File contents under `dir`, keyed by relative path. Report JSON is
/// compared without its creation time.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let key = path
                .strip_prefix(dir)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            let mut bytes = std::fs::read(&path).unwrap();
            if key.ends_with(".json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("timestamp");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(key, bytes);
        }
    }
    out
}

/// Copies the regular files of `from` (recursively) into `to`.
pub fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let path = entry.unwrap().path();
        let target = to.join(path.file_name().unwrap());
        if path.is_dir() {
            copy_dir(&path, &target);
        } else {
            std::fs::copy(&path, &target).unwrap();
        }
    }
}
