use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use barmorph::corpus::synthetic_piece;
use barmorph::midi::write_midi;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_barmorph"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_piece(path: &Path, bars: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::write(path, write_midi(&synthetic_piece(bars, &mut rng))).unwrap();
}

#[test]
fn tokenize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_piece(&d.join("a.mid"), 4, 1);
    ok(&["tokenize", "a.mid", "-o", "a.tok"], d);
    ok(&["tokenize", "--reverse", "a.tok", "-o", "b.mid"], d);
    ok(&["tokenize", "b.mid", "-o", "b.tok"], d);
    let a = fs::read_to_string(d.join("a.tok")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.tok")).unwrap());
    assert!(a.starts_with("Bar"));

    let attrs = ok(&["attrs", "a.mid"], d);
    assert_eq!(attrs.lines().filter(|l| !l.trim().is_empty()).count(), 5);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(&["tokenize"], d).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"], d).status.code(), Some(2));
    assert_eq!(run(&["evaluate", "--ckpt", "x", "--corpus", "y", "--setting", "3"], d).status.code(), Some(2));

    let out = run(&["tokenize", "missing.mid", "-o", "x.tok"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    fs::write(d.join("junk.mid"), b"not midi").unwrap();
    assert_eq!(run(&["attrs", "junk.mid"], d).status.code(), Some(1));
}

#[test]
fn train_transfer_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("tiny.conf"),
        "model.enc_layers = 1\nmodel.dec_layers = 1\nmodel.d_model = 16\nmodel.d_ff = 32\nmodel.n_heads = 2\n\
         model.d_embed = 16\nmodel.d_z = 8\nmodel.d_attr = 4\nmodel.d_cond = 16\n\
         train.k_crop = 2\ntrain.batch_size = 1\nsample.max_tokens_per_bar = 24\n",
    )
    .unwrap();
    ok(&["synth-corpus", "-o", "corpus", "--pieces", "20", "--bars", "4"], d);
    ok(
        &["--config", "tiny.conf", "train", "--corpus", "corpus", "-o", "m.ckpt", "--steps", "3", "--log", "train.log"],
        d,
    );
    assert!(fs::read_to_string(d.join("train.log")).unwrap().lines().count() >= 1);

    write_piece(&d.join("in.mid"), 4, 9);
    ok(
        &[
            "--config", "tiny.conf", "--seed", "4", "transfer", "in.mid", "--ckpt", "m.ckpt", "-o", "out.mid", "--rhym", "+1",
            "--poly", "=0,=1,=2,=3", "--attrs", "out.csv", "--tokens", "out.tok",
        ],
        d,
    );
    let first = fs::read(d.join("out.mid")).unwrap();
    ok(
        &[
            "--config", "tiny.conf", "--seed", "4", "transfer", "in.mid", "--ckpt", "m.ckpt", "-o", "again.mid", "--rhym", "+1",
            "--poly", "=0,=1,=2,=3",
        ],
        d,
    );
    assert_eq!(first, fs::read(d.join("again.mid")).unwrap());
    assert!(fs::read_to_string(d.join("out.tok")).unwrap().starts_with("Bar"));

    let out = run(
        &["transfer", "in.mid", "--ckpt", "m.ckpt", "-o", "bad.mid", "--poly", "+1,+1"],
        d,
    );
    assert_eq!(out.status.code(), Some(1));

    let report = ok(
        &[
            "--config", "tiny.conf", "evaluate", "--ckpt", "m.ckpt", "--corpus", "corpus", "--setting", "2", "--excerpts", "2",
            "--repeats", "3", "--bars", "2",
        ],
        d,
    );
    assert!(report.contains("[setting 2]"), "{report}");
    assert!(report.lines().any(|l| l == "pairs 6"), "{report}");
}
