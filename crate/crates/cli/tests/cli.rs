use std::path::Path;
use std::process::{Command, Output};

fn metasvdd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metasvdd"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn solve_svdd_on_three_collinear_points() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("z.txt"), "-1 0\n0 0\n1 0\n").unwrap();
    let out = metasvdd(dir.path(), &["solve-svdd", "z.txt"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "alpha 0.5 0 0.5");
    assert_eq!(lines[1], "center 0 0");
    assert_eq!(lines[2], "radius 1");
    assert!(lines.iter().any(|l| l.starts_with("kkt_residual")));
}

#[test]
fn solve_svdd_accepts_a_gram_matrix() {
    let dir = tempfile::tempdir().unwrap();
    // Gram matrix of the points -1, 0, 1 on a line
    std::fs::write(dir.path().join("k.txt"), "1 0 -1\n0 0 0\n-1 0 1\n").unwrap();
    let out = metasvdd(dir.path(), &["solve-svdd", "k.txt", "--gram"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("alpha 0.5 0 0.5\n"), "{text}");
    assert!(text.contains("radius 1\n"), "{text}");
}

#[test]
fn missing_dataset_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = metasvdd(dir.path(), &["train", "--dataset", "nowhere.occb"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.occb"), "{}", stderr(&out));
}

#[test]
fn malformed_matrix_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.txt"), "1 2\n3\n").unwrap();
    let out = metasvdd(dir.path(), &["solve-svdd", "bad.txt"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--no-such-flag"][..],
        &["frobnicate"][..],
        &["train", "--shot", "0"][..],
        &["train", "--head", "nearest"][..],
    ] {
        let out = metasvdd(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "shots = 5\n").unwrap();
    let out = metasvdd(dir.path(), &["train", "--config", "run.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("shots"), "{}", stderr(&out));
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = metasvdd(dir.path(), &["train", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for needle in [
        "--shot",
        "[default: 5]",
        "--learning-rate",
        "[default: 0.0005]",
        "--jobs",
        "--config",
    ] {
        assert!(text.contains(needle), "missing {needle}:\n{text}");
    }
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = metasvdd(dir.path(), &["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(!stdout(&out).contains("FAIL"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let out = metasvdd(d, args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
    };
    ok(&[
        "pack-dataset",
        "--synthetic",
        "8,12,4,0.2",
        "--seed",
        "2",
        "--output",
        "data.occb",
    ]);
    std::fs::write(
        d.join("manifest.txt"),
        "split train\n0 1 2 3 4\nsplit validation\n5 6 7\n",
    )
    .unwrap();
    std::fs::write(
        d.join("run.cfg"),
        "dataset = data.occb\nmanifest = manifest.txt\narchitecture = mlp\nmlp_hidden = 8\nfeature_dim = 8\n\
         shot = 2\nquery_per_side = 3\nmeta_batch = 2\neval_every = 2\nval_tasks = 5\nmax_steps = 4\n",
    )
    .unwrap();
    ok(&[
        "train",
        "--config",
        "run.cfg",
        "--output-dir",
        "out",
        "--max-steps",
        "2",
        "--seed",
        "7",
    ]);
    let saved = std::fs::read_to_string(d.join("out/run_config.txt")).unwrap();
    assert!(saved.contains("max_steps = 2\n"), "{saved}");
    assert!(saved.contains("seed = 7\n"), "{saved}");
    assert!(saved.contains("shot = 2\n"), "{saved}");
    let log = std::fs::read_to_string(d.join("out/train_log.csv")).unwrap();
    let steps: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, ["0", "2"]);
    assert!(d.join("out/checkpoint.occk").exists());
}

#[test]
fn pack_dataset_rejects_unusable_sources() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = metasvdd(
        d,
        &[
            "pack-dataset",
            "--synthetic",
            "3,4,4,0.1",
            "--output",
            "base.occb",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = metasvdd(
        d,
        &[
            "pack-dataset",
            "--input",
            "base.occb",
            "--rotate",
            "--output",
            "rot.occb",
        ],
    );
    // flat synthetic examples have no spatial layout to rotate
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("rotation"), "{}", stderr(&out));
    let out = metasvdd(d, &["pack-dataset", "--output", "x.occb"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}
