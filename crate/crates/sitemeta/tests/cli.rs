mod common;

use common::{copy_dir, run, run_ok, s, small_pipeline, snapshot};
use sitemeta::binfmt::{load_dataset, load_ring};
use sitemeta::config::RunConfig;
use sitemeta::report::read_report;

#[test]
fn gen_data_assigns_site_roles() {
    let dir = tempfile::tempdir().unwrap();
    let o = s(dir.path());
    run_ok(&[
        "gen-data",
        "--out",
        o,
        "--per-site",
        "8",
        "--feature-dim",
        "2",
    ]);
    let table = load_dataset(&dir.path().join("dataset.bin")).unwrap();
    assert_eq!(table.sites.len(), 38);
    assert_eq!(
        (
            table.roles.meta_train.len(),
            table.roles.meta_test.len(),
            table.roles.zero_shot.len()
        ),
        (30, 7, 1)
    );
    assert!(dir.path().join("gen-data.config.toml").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = s(dir.path());
    run_ok(&[
        "gen-data",
        "--out",
        o,
        "--sites",
        "4",
        "--split",
        "2/1/1",
        "--per-site",
        "16",
    ]);
    let data = dir.path().join("dataset.bin");
    let d = s(&data);

    assert_eq!(
        run(&["meta-train", "--data", d, "--out", o, "--max-epochs", "0"]),
        1
    );
    assert_eq!(
        run(&["meta-train", "--data", d, "--out", o, "--no-such-flag"]),
        1
    );
    assert_eq!(run(&["gen-data", "--out", o, "--split", "1/2"]), 1);
    assert_eq!(run(&["gen-data", "--out", o, "--sites", "5"]), 1);
    assert_eq!(
        run(&["meta-train", "--data", d, "--out", o, "--threads", "0"]),
        1
    );
    assert_eq!(run(&["meta-train", "--data", d]), 1);
    assert_eq!(run(&["frobnicate"]), 1);

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[metalearn]\nmax_epoch = 2\n").unwrap();
    assert_eq!(
        run(&["meta-train", "--data", d, "--out", o, "--config", s(&cfg)]),
        1
    );
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = s(dir.path());
    let missing = dir.path().join("absent.bin");
    assert_eq!(run(&["meta-train", "--data", s(&missing), "--out", o]), 2);
    assert_eq!(run(&["zero-shot", "--data", s(&missing), "--out", o]), 2);

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a dataset").unwrap();
    assert_eq!(run(&["meta-train", "--data", s(&junk), "--out", o]), 2);

    run_ok(&[
        "gen-data",
        "--out",
        o,
        "--sites",
        "4",
        "--split",
        "2/1/1",
        "--per-site",
        "16",
    ]);
    let data = dir.path().join("dataset.bin");
    let empty = dir.path().join("no-checkpoints");
    assert_eq!(
        run(&[
            "meta-test",
            "--data",
            s(&data),
            "--out",
            o,
            "--checkpoints",
            s(&empty)
        ]),
        2
    );
    // Feature vectors are not volumes.
    assert_eq!(run(&["preprocess", "--data", s(&data), "--out", o]), 2);
}

#[test]
fn help_exits_with_zero() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["meta-train", "--help"]), 0);
}

#[test]
fn pipeline_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path());
    let files = snapshot(dir.path());
    for name in [
        "dataset.bin",
        "train_log.csv",
        "checkpoints/rank0.ckpt",
        "checkpoints/rank4.ckpt",
        "meta_test.json",
        "meta_test.csv",
        "zero_shot.json",
        "transfer.json",
        "transfer_zero_shot.json",
        "scratch.json",
        "meta-train.config.toml",
        "baseline.config.toml",
    ] {
        assert!(files.contains_key(name), "missing {name}");
    }
    assert!(!files.contains_key("checkpoints/rank5.ckpt"));

    let ring = load_ring(&dir.path().join("checkpoints")).unwrap();
    assert_eq!(ring.len(), 5);
    assert!(ring.windows(2).all(|w| w[0].score >= w[1].score));

    let meta = read_report(&dir.path().join("meta_test.json")).unwrap();
    assert_eq!(meta.candidates, 5);
    assert_eq!(meta.per_site.len(), 3);
    // 48 per site, 10 support and 5 validation examples held back.
    assert_eq!(meta.n, 3 * (48 - 10 - 5));
    let zero = read_report(&dir.path().join("zero_shot.json")).unwrap();
    assert_eq!(zero.n, 48);

    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(
        log.lines().next(),
        Some("epoch,train_loss,val_auc,outer_lr")
    );
    assert_eq!(log.lines().count(), 7);

    let csv = std::fs::read_to_string(dir.path().join("meta_test.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv
        .lines()
        .last()
        .unwrap()
        .starts_with("meta_test,pooled,99,"));
}

#[test]
fn runs_are_byte_identical_with_one_thread() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    small_pipeline(&out);
    let first = snapshot(&out);
    copy_dir(&out, &dir.path().join("first"));
    small_pipeline(&out);
    let second = snapshot(&out);
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (k, v) in &first {
        assert!(v == &second[k], "{k} differs between runs");
    }
}

#[test]
fn resolved_config_alone_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    small_pipeline(&out);
    let before = snapshot(&out);
    let cfg = out.join("meta-train.config.toml");
    let resolved = RunConfig::load(&cfg).unwrap();
    assert_eq!(resolved.cli.command.as_deref(), Some("meta-train"));
    assert_eq!(resolved.metalearn.max_epochs, Some(6));

    let saved = dir.path().join("saved.toml");
    std::fs::copy(&cfg, &saved).unwrap();
    run_ok(&["meta-train", "--config", s(&saved)]);
    let after = snapshot(&out);
    for name in [
        "train_log.csv",
        "checkpoints/rank0.ckpt",
        "checkpoints/rank4.ckpt",
        "meta-train.config.toml",
    ] {
        assert!(before[name] == after[name], "{name} differs");
    }
}

#[test]
fn threads_do_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let gen = |out: &std::path::Path, threads: &str| {
        let mut args = vec!["gen-data", "--out", s(out), "--threads", threads];
        args.extend_from_slice(common::SMALL_DATA);
        run_ok(&args);
        let data = out.join("dataset.bin");
        let mut args = vec![
            "baseline",
            "--data",
            s(&data),
            "--out",
            s(out),
            "--threads",
            threads,
            "--hidden",
            "8",
        ];
        args.extend_from_slice(common::SMALL_BASELINE);
        run_ok(&args);
    };
    gen(&a, "1");
    gen(&b, "4");
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    for name in ["dataset.bin", "transfer.json", "scratch.json"] {
        assert!(sa[name] == sb[name], "{name} depends on the thread count");
    }
}

#[test]
fn search_writes_trials_and_best_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = s(dir.path());
    let mut args = vec!["gen-data", "--out", o];
    args.extend_from_slice(common::SMALL_DATA);
    run_ok(&args);
    let data = dir.path().join("dataset.bin");
    run_ok(&[
        "search",
        "--data",
        s(&data),
        "--out",
        o,
        "--threads",
        "2",
        "--trials",
        "3",
        "--space-n-sites",
        "1,2",
        "--space-k-support",
        "8,10",
        "--space-t-target",
        "2,5",
        "--max-epochs",
        "5",
        "--episodes-per-epoch",
        "2",
        "--val-episodes",
        "2",
        "--inner-steps",
        "1",
        "--hidden",
        "4",
    ]);
    let trials = std::fs::read_to_string(dir.path().join("search_trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 4);
    let best = RunConfig::load(&dir.path().join("best_config.toml")).unwrap();
    let m = best.meta_config().unwrap();
    assert!([1, 2].contains(&m.n_sites_per_episode));
    assert!([8, 10].contains(&m.k_support));
    assert!([2, 5].contains(&m.t_target));
    assert_eq!(best.cli.command.as_deref(), Some("meta-train"));
}

#[test]
fn report_summarises_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path());
    let summary = dir.path().join("summary");
    run_ok(&["report", s(dir.path()), "--out", s(&summary)]);
    let text = std::fs::read_to_string(summary.join("summary.txt")).unwrap();
    for protocol in ["meta_test", "zero_shot", "transfer", "scratch"] {
        assert!(
            text.lines()
                .any(|l| l.starts_with(protocol) && l.contains("pooled")),
            "{protocol}"
        );
    }
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(run(&["report", s(&empty)]), 1);
}
