use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sessrec(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sessrec"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("SESSREC_") {
            cmd.env_remove(k);
        }
    }
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// 30 users in three taste groups, 6 sessions each, a few deletes.
fn write_events(path: &Path, item_prefix: &str) {
    let mut s = String::new();
    let mut state = 12345u64;
    let mut next = |n: u64| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) % n
    };
    for u in 0..30u64 {
        let mut t = 1_600_000_000 + u * 7;
        for _ in 0..6 {
            for _ in 0..3 + next(3) {
                let item = (u % 3) * 8 + next(8);
                let kind = if next(10) == 0 { "delete" } else { "click" };
                let _ = writeln!(s, "user{u}\t{item_prefix}{item}\t{t}\t{kind}");
                t += 60;
            }
            t += 7200;
        }
    }
    fs::write(path, s).unwrap();
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = TempDir::new().unwrap();
        write_events(&dir.path().join("events.tsv"), "job");
        let f = Fixture { dir };
        ok(&sessrec(
            &[
                "preprocess",
                "--events",
                f.s("events.tsv"),
                "--corpus-dir",
                f.s("data"),
                "--drop-type",
                "delete",
                "--min-item-support",
                "2",
            ],
            &[],
        ));
        f
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> &str {
        let p = self.p(name);
        Box::leak(p.to_string_lossy().into_owned().into_boxed_str())
    }

    fn train(&self, model: &str, ckpt: &str, extra: &[&str]) -> String {
        let mut args = vec![
            "train",
            "--corpus-dir",
            self.s("data"),
            "--model",
            model,
            "--checkpoint",
            self.s(ckpt),
            "--hidden",
            "8",
            "--batch",
            "4",
        ];
        if !extra.contains(&"--epochs") {
            args.extend(["--epochs", "2"]);
        }
        args.extend_from_slice(extra);
        ok(&sessrec(&args, &[]))
    }
}

fn checkpoint_config(path: &Path) -> serde_json::Value {
    let bytes = fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    let line = text.lines().find_map(|l| l.strip_prefix("config=")).unwrap();
    serde_json::from_str(line).unwrap()
}

/// `(metric, cutoff, group) -> (value, seed_count)` from a report file.
fn report_values(path: &Path) -> Vec<(String, usize, String, f64, usize)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "model\tmetric\tcutoff\tgroup\tvalue\tseed_count");
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (
                f[1].to_string(),
                f[2].parse().unwrap(),
                f[3].to_string(),
                f[4].parse().unwrap(),
                f[5].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn preprocess_writes_splits_deterministically() {
    let f = Fixture::new();
    for file in ["items.tsv", "users.tsv", "train.corpus", "test.corpus", "stats.json"] {
        assert!(f.p("data").join(file).exists(), "{file}");
    }
    for file in ["items.tsv", "train.corpus", "test.corpus"] {
        assert!(f.p("data/validation").join(file).exists(), "validation/{file}");
    }
    let train = fs::read_to_string(f.p("data/train.corpus")).unwrap();
    assert!(train.contains("#meta.min_item_support=2"));
    assert!(train.contains("#meta.dropped_types=delete"));

    ok(&sessrec(
        &[
            "preprocess",
            "--events",
            f.s("events.tsv"),
            "--corpus-dir",
            f.s("again"),
            "--drop-type",
            "delete",
            "--min-item-support",
            "2",
        ],
        &[],
    ));
    for file in ["items.tsv", "users.tsv", "train.corpus", "test.corpus", "stats.json", "validation/train.corpus"] {
        assert_eq!(
            fs::read(f.p("data").join(file)).unwrap(),
            fs::read(f.p("again").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn train_logs_one_line_per_epoch_and_accepts_table_values() {
    let f = Fixture::new();
    let out = f.train(
        "hrnn-init",
        "h.ckpt",
        &["--epochs", "3", "--dropout", "0.0/0.1/0.0", "--lr", "0.1", "--momentum", "0.0"],
    );
    let epochs: Vec<&str> = out.lines().filter(|l| l.starts_with("epoch ")).collect();
    assert_eq!(epochs.len(), 3, "{out}");
    assert!(epochs[2].starts_with("epoch 3/3"));
    let cfg = checkpoint_config(&f.p("h.ckpt"));
    assert_eq!(cfg["kind"], "hrnn-init");
    assert_eq!(cfg["dropout_session"], 0.1);
    assert_eq!(cfg["batch_size"], 4);
}

#[test]
fn eval_reports_satisfy_precision_identity_and_cutoff() {
    let f = Fixture::new();
    f.train("ppop", "pop.ckpt", &[]);
    for cutoff in ["5", "10"] {
        let report = f.p(&format!("pop{cutoff}.tsv"));
        let table = ok(&sessrec(
            &[
                "eval",
                "--corpus-dir",
                f.s("data"),
                "--checkpoint",
                f.s("pop.ckpt"),
                "--cutoff",
                cutoff,
                "--report",
                report.to_str().unwrap(),
            ],
            &[],
        ));
        assert!(table.contains("ppop"));
        let rows = report_values(&report);
        let n: usize = cutoff.parse().unwrap();
        assert!(rows.iter().all(|r| r.1 == n));
        let get = |metric: &str| rows.iter().find(|r| r.0 == metric && r.2 == "all").unwrap().3;
        assert!((get("precision") - get("recall") / n as f64).abs() < 1e-6);
    }
}

#[test]
fn multi_seed_eval_and_concat_model() {
    let f = Fixture::new();
    f.train("rnn-concat", "concat.ckpt", &[]);
    assert_eq!(checkpoint_config(&f.p("concat.ckpt"))["kind"], "rnn-concat");
    let report = f.p("concat.tsv");
    ok(&sessrec(
        &[
            "eval",
            "--corpus-dir",
            f.s("data"),
            "--checkpoint",
            f.s("concat.ckpt"),
            "--seeds",
            "3",
            "--report",
            report.to_str().unwrap(),
        ],
        &[],
    ));
    let rows = report_values(&report);
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.4 == 3));
}

#[test]
fn config_file_env_and_flags_layer_in_order() {
    let f = Fixture::new();
    fs::write(f.p("cfg.toml"), "model = \"rnn\"\nhidden = 6\nbatch = 3\nepochs = 1\n").unwrap();
    let base = ["train", "--config", f.s("cfg.toml"), "--corpus-dir", f.s("data"), "--checkpoint", f.s("c.ckpt")];

    ok(&sessrec(&base, &[]));
    assert_eq!(checkpoint_config(&f.p("c.ckpt"))["hidden_size"], 6);

    ok(&sessrec(&base, &[("SESSREC_HIDDEN", "5")]));
    assert_eq!(checkpoint_config(&f.p("c.ckpt"))["hidden_size"], 5);

    let mut with_flag = base.to_vec();
    with_flag.extend(["--hidden", "4"]);
    ok(&sessrec(&with_flag, &[("SESSREC_HIDDEN", "5")]));
    let cfg = checkpoint_config(&f.p("c.ckpt"));
    assert_eq!(cfg["hidden_size"], 4);
    assert_eq!(cfg["batch_size"], 3);

    fs::write(f.p("bad.toml"), "hiden = 6\n").unwrap();
    let out = sessrec(&["train", "--config", f.s("bad.toml")], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    assert_eq!(sessrec(&["--help"], &[]).status.code(), Some(0));
    assert_eq!(sessrec(&["train", "--no-such-flag"], &[]).status.code(), Some(1));
    assert_eq!(sessrec(&["train", "--corpus-dir", f.s("data")], &[]).status.code(), Some(1));
    let missing = sessrec(
        &["preprocess", "--events", f.s("nope.tsv"), "--corpus-dir", f.s("x")],
        &[],
    );
    assert_eq!(missing.status.code(), Some(2));

    let out = sessrec(
        &[
            "train",
            "--corpus-dir",
            f.s("data"),
            "--model",
            "rnn",
            "--loss",
            "xent",
            "--lr",
            "1e308",
            "--checkpoint",
            f.s("d.ckpt"),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_rejects_checkpoint_from_another_vocabulary() {
    let f = Fixture::new();
    f.train("itemknn", "knn.ckpt", &[]);
    write_events(&f.p("ads.tsv"), "ad");
    ok(&sessrec(
        &["preprocess", "--events", f.s("ads.tsv"), "--corpus-dir", f.s("ads"), "--min-item-support", "2"],
        &[],
    ));
    let out = sessrec(&["eval", "--corpus-dir", f.s("ads"), "--checkpoint", f.s("knn.ckpt")], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
}

#[test]
fn search_is_reproducible_and_emits_usable_config() {
    let f = Fixture::new();
    let args = [
        "search",
        "--corpus-dir",
        f.s("data"),
        "--model",
        "hrnn-init",
        "--hidden",
        "6",
        "--epochs",
        "1",
        "--trials",
        "4",
        "--batch-choices",
        "3,5",
        "--seed",
        "9",
        "--best",
        f.s("best.toml"),
        "--trials-log",
        f.s("trials.tsv"),
    ];
    let a = ok(&sessrec(&args, &[]));
    let b = ok(&sessrec(&args, &[]));
    assert_eq!(a, b);
    assert_eq!(fs::read_to_string(f.p("trials.tsv")).unwrap().lines().count(), 5);

    let recalls: Vec<f64> = a
        .lines()
        .filter(|l| !l.starts_with("best"))
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    let best: f64 = a.lines().last().unwrap().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(recalls.iter().all(|&r| best >= r - 1e-6));

    ok(&sessrec(
        &["train", "--config", f.s("best.toml"), "--corpus-dir", f.s("data"), "--checkpoint", f.s("b.ckpt")],
        &[],
    ));
    assert_eq!(checkpoint_config(&f.p("b.ckpt"))["kind"], "hrnn-init");

    let zero = sessrec(&["search", "--corpus-dir", f.s("data"), "--model", "rnn", "--trials", "0"], &[]);
    assert_eq!(zero.status.code(), Some(1));
}
