mod common;

use std::fs;
use std::path::Path;

use common::{run, s, write_ratings, SMALL};
use dverec::commands::{cmd_train, CHECKPOINT_FILE, LOG_FILE, METRICS_JSON, METRICS_TSV, SPLIT_FILE};
use dverec::config::{Command, RunConfig};
use dverec_core::checkpoint::Checkpoint;
use dverec_core::dve::EmbeddingMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn train(data: &Path, out: &Path, task: &str, extra: &[&str]) -> std::process::Output {
    let mut args = vec!["train", "--data", s(data), "--output", s(out), "--task", task, "--seed", "7"];
    if !extra.contains(&"--epochs") {
        args.extend_from_slice(&["--epochs", "2"]);
    }
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    run(&args)
}

fn ok(o: &std::process::Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn code(o: &std::process::Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn explicit_train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let out = dir.path().join("run");
    let o = train(&data, &out, "explicit", &[]);
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("final loss\t"), "{stdout}");
    for f in [CHECKPOINT_FILE, SPLIT_FILE, LOG_FILE, "idmap.tsv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join(".dverec.lock").exists());
    let ck = out.join(CHECKPOINT_FILE);
    let split = out.join(SPLIT_FILE);
    let o = run(&["evaluate", "--data", s(&data), "--checkpoint", s(&ck), "--split", s(&split)]);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines[0].starts_with("RMSE\t"));
    assert!(lines[1].starts_with("RMSE_GLOBAL_MEAN\t"));
    let tsv = fs::read_to_string(out.join(METRICS_TSV)).unwrap();
    assert_eq!(tsv.lines().count(), 3);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(METRICS_JSON)).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
}

#[test]
fn implicit_train_evaluate_recommend() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let out = dir.path().join("run");
    ok(&train(&data, &out, "implicit", &["--n-negatives", "10"]));
    let ck = out.join(CHECKPOINT_FILE);
    let o = run(&[
        "evaluate", "--data", s(&data), "--checkpoint", s(&ck), "--split", s(&out.join(SPLIT_FILE)),
        "--k", "5", "--ndcg", "paper_eq7",
    ]);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(text.contains("HR@5\t") && text.contains("NDCG@5\t"), "{text}");

    let o = run(&["recommend", "--data", s(&data), "--checkpoint", s(&ck), "--user", "3", "--k", "4"]);
    ok(&o);
    let csv = String::from_utf8_lossy(&o.stdout).to_string();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "rank,item,score");
    assert_eq!(rows.len(), 5);
    // items user 3 rated never come back
    let seen: Vec<String> = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("3::"))
        .map(|l| l.split("::").nth(1).unwrap().to_string())
        .collect();
    for r in &rows[1..] {
        let item = r.split(',').nth(1).unwrap();
        assert!(!seen.iter().any(|s| s == item), "{item}");
    }
    let o = run(&[
        "recommend", "--data", s(&data), "--checkpoint", s(&ck), "--user", "3", "--k", "4", "--mode", "sample",
        "--samples", "5",
    ]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("rank,item,score,std"));
}

#[test]
fn identical_runs_give_identical_files() {
    check_identical_runs_give_identical_files()
}

pub fn check_identical_runs_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&train(&data, &a, "implicit", &["--n-negatives", "10"]));
    ok(&train(&data, &b, "implicit", &["--n-negatives", "10"]));
    for f in [CHECKPOINT_FILE, SPLIT_FILE, "idmap.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    for d in [&a, &b] {
        ok(&run(&[
            "evaluate", "--data", s(&data), "--checkpoint", s(&d.join(CHECKPOINT_FILE)), "--split",
            s(&d.join(SPLIT_FILE)),
        ]));
    }
    for f in [METRICS_TSV, METRICS_JSON] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_continues_numbering_and_matches_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let (whole, split) = (dir.path().join("whole"), dir.path().join("split"));
    ok(&train(&data, &whole, "explicit", &["--epochs", "4"]));
    ok(&train(&data, &split, "explicit", &["--epochs", "2"]));
    let ck = split.join(CHECKPOINT_FILE);
    let saved = dir.path().join("epoch2.bin");
    fs::copy(&ck, &saved).unwrap();
    ok(&train(&data, &split, "explicit", &["--epochs", "4", "--resume", s(&saved)]));
    let epochs: Vec<String> = fs::read_to_string(split.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| l.split('\t').next().unwrap().to_string())
        .collect();
    assert_eq!(epochs, ["1", "2", "3", "4"]);
    assert_eq!(fs::read(whole.join(CHECKPOINT_FILE)).unwrap(), fs::read(&ck).unwrap());
}

#[test]
fn periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let out = dir.path().join("run");
    ok(&train(&data, &out, "explicit", &["--epochs", "4", "--checkpoint-every", "2"]));
    assert!(out.join("checkpoint-epoch2.bin").exists());
    assert!(out.join("checkpoint-epoch4.bin").exists());
    assert!(!out.join("checkpoint-epoch1.bin").exists());
    assert_eq!(Checkpoint::load(&out.join("checkpoint-epoch2.bin")).unwrap().epoch, 2);
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    check_checkpoint_round_trip_preserves_scores()
}

pub fn check_checkpoint_round_trip_preserves_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let out = dir.path().join("run");
    let mut cfg = RunConfig::defaults(Command::Train);
    for (k, v) in [
        ("data", s(&data)),
        ("output", s(&out)),
        ("epochs", "2"),
        ("dim", "4"),
        ("tower_dims", "8,4"),
        ("time_bins", "3"),
        ("time_scheme", "equal_width"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let summary = cmd_train(&cfg).unwrap();
    let bytes = fs::read(&summary.checkpoint).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let again = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let (n_users, n_items) = (ck.model.config.n_users, ck.model.config.n_items);
    let users: Vec<usize> = (0..n_users).flat_map(|u| std::iter::repeat_n(u, n_items)).collect();
    let items: Vec<usize> = (0..n_users).flat_map(|_| 0..n_items).collect();
    for bin in 1..=ck.model.config.n_bins {
        for mode in [EmbeddingMode::Mean, EmbeddingMode::Sample] {
            let a = ck.model.score_pairs(&users, &items, bin, mode, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let b = again.model.score_pairs(&users, &items, bin, mode, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let out = dir.path().join("run");
    ok(&train(&data, &out, "explicit", &[]));
    let ck = out.join(CHECKPOINT_FILE);

    assert_eq!(code(&run(&["train", "--epochz", "3"])), 1);
    assert_eq!(code(&run(&["train", "--data", s(&data)])), 1, "missing --output");
    let missing = dir.path().join("nope.dat");
    assert_eq!(code(&train(&missing, &dir.path().join("x"), "explicit", &[])), 2);
    let garbage = dir.path().join("garbage.dat");
    fs::write(&garbage, "not a rating\nstill not\n1::2::3::4\n").unwrap();
    assert_eq!(code(&train(&garbage, &dir.path().join("y"), "explicit", &[])), 2);
    assert_eq!(code(&train(&data, &dir.path().join("z"), "explicit", &["--learning-rate", "-1"])), 1);

    let o = run(&["recommend", "--data", s(&data), "--checkpoint", s(&ck), "--user", "9999"]);
    assert_eq!(code(&o), 5);
    assert_eq!(code(&run(&["stats", "--data", s(&data), "--id", "424242"])), 5);

    // an implicit split under an explicit checkpoint
    let imp = dir.path().join("imp");
    ok(&train(&data, &imp, "implicit", &["--n-negatives", "10"]));
    let o = run(&["evaluate", "--data", s(&data), "--checkpoint", s(&ck), "--split", s(&imp.join(SPLIT_FILE))]);
    assert_eq!(code(&o), 4);

    // resuming on other data
    let other = dir.path().join("other.dat");
    fs::write(&other, common::synthetic_ratings(12, 9, 4, 5)).unwrap();
    let o = train(&other, &dir.path().join("w"), "explicit", &["--resume", s(&ck)]);
    assert_eq!(code(&o), 4);

    let corrupt = dir.path().join("corrupt.bin");
    fs::write(&corrupt, b"format=dverec-checkpoint\nversion=99\nend\n").unwrap();
    let o = run(&["recommend", "--data", s(&data), "--checkpoint", s(&corrupt), "--user", "1"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(&corrupt, b"not a checkpoint").unwrap();
    let o = run(&["recommend", "--data", s(&data), "--checkpoint", s(&corrupt), "--user", "1"]);
    assert_eq!(code(&o), 2);

    // a diverging run aborts with a numeric error
    let o = train(&data, &dir.path().join("nan"), "explicit", &["--optimizer", "sgd", "--learning-rate", "1e30"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn neg_ratio_on_explicit_task_only_warns() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let o = train(&data, &dir.path().join("run"), "explicit", &["--neg-ratio", "4"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("neg-ratio"));
}

#[test]
fn neg_ratio_band_needs_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let o = train(&data, &dir.path().join("a"), "implicit", &["--neg-ratio", "8"]);
    assert_eq!(code(&o), 1);
    let o = train(&data, &dir.path().join("b"), "implicit", &["--neg-ratio", "8", "--allow-neg-ratio-override", "true"]);
    ok(&o);
}

#[test]
fn stats_counts_sum_to_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let n = fs::read_to_string(&data).unwrap().lines().count();
    let csv_path = dir.path().join("counts.csv");
    ok(&run(&["stats", "--data", s(&data), "--out", s(&csv_path)]));
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("period,count"));
    let rows: Vec<(String, usize)> = lines
        .map(|l| {
            let (p, c) = l.split_once(',').unwrap();
            (p.to_string(), c.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.1).sum::<usize>(), n);
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].0, "2000-01");
    let o = run(&["stats", "--data", s(&data), "--group-by", "user", "--id", "1", "--granularity", "year"]);
    ok(&o);
    assert_eq!(String::from_utf8_lossy(&o.stdout), "period,count\n2000,8\n");
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".dverec.lock"), "1\n").unwrap();
    let o = train(&data, &out, "explicit", &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
    assert!(!out.join(CHECKPOINT_FILE).exists());
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_ratings(dir.path());
    let conf = dir.path().join("run.conf");
    fs::write(&conf, format!("data={}\nepochs=3\ndim=4\ntower_dims=8,4\n", s(&data))).unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&conf), "--output", s(&out), "--epochs", "1"]);
    ok(&o);
    assert_eq!(fs::read_to_string(out.join(LOG_FILE)).unwrap().lines().count(), 1);
    fs::write(&conf, "epochs=3\nlearnig_rate=0.1\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", s(&conf), "--output", s(&out)])), 1);
}
