use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn weakpair(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weakpair"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_gen(out: &Path) -> Output {
    weakpair(
        out,
        &[
            "gen",
            "--set",
            "gen.num_identities=8",
            "--set",
            "gen.views_per_identity=2",
            "--set",
            "split.train_fraction=0.75",
        ],
    )
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(small_gen(&a).status.success());
    assert!(small_gen(&b).status.success());
    for f in ["train.dataset", "test.dataset", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = weakpair(dir.path(), &["gen", "--set", "gen.annotation_mask_rate=1.2"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = weakpair(dir.path(), &["gen", "--set", "gen.no_such_key=3"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_gen(dir.path()).status.success());
    let o = weakpair(
        &dir.path().join("e"),
        &[
            "eval",
            "--checkpoint",
            dir.path().join("absent.json").to_str().unwrap(),
            "--data",
            dir.path().join("test.dataset").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_then_eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_gen(dir.path()).status.success());
    let data = dir.path().join("train.dataset");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = weakpair(
            &out,
            &[
                "train",
                "--data",
                data.to_str().unwrap(),
                "--set",
                "train.epochs=3",
                "--set",
                "train.batch_size=4",
                "--set",
                "train.mining=\"neg3v4\"",
                "--set",
                "train.ablation_mode=\"baseline\"",
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["loss.csv", "checkpoint.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(a.join("loss.csv")).unwrap();
    // 6 training identities in batches of 4: two steps per epoch
    assert_eq!(log.lines().count(), 1 + 3 * 2);

    let e = dir.path().join("eval");
    let o = weakpair(
        &e,
        &[
            "eval",
            "--checkpoint",
            a.join("checkpoint.json").to_str().unwrap(),
            "--data",
            dir.path().join("test.dataset").to_str().unwrap(),
            "--train-data",
            data.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stderr(&o).contains("warning"));
    for f in [
        "metrics.csv",
        "pr_curve.csv",
        "risk_coverage.csv",
        "uncertainty.csv",
        "margins.csv",
    ] {
        assert!(e.join(f).exists(), "{f}");
    }

    // the same split on both sides shares every identity
    let o = weakpair(
        &e,
        &[
            "eval",
            "--checkpoint",
            a.join("checkpoint.json").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--train-data",
            data.to_str().unwrap(),
        ],
    );
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn gradcheck_names_the_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = weakpair(
        dir.path(),
        &[
            "gradcheck",
            "--set",
            "gradcheck.points=2",
            "--inject-fault",
            "softmax_rows",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("failing ops: softmax_rows"), "{err}");
    let report = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(report.contains("op,softmax_rows,1,"));

    let o = weakpair(dir.path(), &["gradcheck", "--set", "gradcheck.points=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
}
