//! Behavioural tests of the `loc` binary: exit codes, diagnostics on bad
//! input, rebuild short-circuiting, and the effect of the forward target.

use std::path::Path;
use std::process::{Command, Output};

use loc_core::io::save_queries;

fn loc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loc")).args(args).output().expect("spawning the loc binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited via signal")
}

/// Generates a small world under `root` and returns the model directory.
fn make_world(root: &Path) -> std::path::PathBuf {
    let out = loc(&["synth", "--preset", "smoke", "--out", root.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "synth: {}", stderr(&out));
    root.join("model")
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&loc(&["localize", "--no-such-flag"])), 1);
    assert_eq!(code(&loc(&["frobnicate"])), 1);
    assert_eq!(code(&loc(&["localize"])), 1, "missing required arguments");
    // Help and version are not errors.
    assert_eq!(code(&loc(&["--help"])), 0);
    assert_eq!(code(&loc(&["--version"])), 0);
}

#[test]
fn data_errors_exit_2_and_name_the_culprit() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = make_world(root);

    // Corrupt the view data: the loader must name the file and exit 2.
    let views = model.join("views.bin");
    let mut bytes = std::fs::read(&views).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&views, &bytes).unwrap();
    let out = loc(&[
        "localize",
        "--model",
        model.to_str().unwrap(),
        "--queries",
        root.join("queries.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("views.bin"), "diagnostic was: {}", stderr(&out));

    // Nonexistent model directory.
    let out = loc(&[
        "localize",
        "--model",
        root.join("nope").to_str().unwrap(),
        "--queries",
        root.join("queries.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);

    // Unknown preset is a configuration problem, not a crash.
    let out = loc(&["synth", "--preset", "bogus", "--out", root.join("w2").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn stale_index_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = make_world(root);
    let out = loc(&["build", "--model", model.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // Regenerate the world with a different seed: views.bin changes, the
    // index is now stale and localize must refuse it.
    let out = loc(&["synth", "--preset", "smoke", "--seed", "99", "--out", root.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = loc(&[
        "localize",
        "--model",
        model.to_str().unwrap(),
        "--queries",
        root.join("queries.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("different view data"), "diagnostic was: {}", stderr(&out));
}

#[test]
fn rebuild_is_skipped_when_nothing_changed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = make_world(root);

    let first = loc(&["build", "--model", model.to_str().unwrap()]);
    assert_eq!(code(&first), 0);
    assert!(stdout(&first).contains("index written"));

    let second = loc(&["build", "--model", model.to_str().unwrap()]);
    assert_eq!(code(&second), 0);
    assert!(
        stdout(&second).contains("index up to date"),
        "expected a no-op, got: {}",
        stdout(&second)
    );

    // A different leaf size is a different index: rebuild.
    let third = loc(&["build", "--model", model.to_str().unwrap(), "--leaf-size", "8"]);
    assert_eq!(code(&third), 0);
    assert!(stdout(&third).contains("index written"), "got: {}", stdout(&third));

    // --force always rebuilds.
    let fourth = loc(&["build", "--model", model.to_str().unwrap(), "--leaf-size", "8", "--force"]);
    assert_eq!(code(&fourth), 0);
    assert!(stdout(&fourth).contains("index written"), "got: {}", stdout(&fourth));
}

#[test]
fn no_registration_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = make_world(root);

    // An empty query file runs cleanly but registers nothing.
    let empty = root.join("empty.bin");
    save_queries(&[], &empty).unwrap();
    let out = loc(&[
        "localize",
        "--model",
        model.to_str().unwrap(),
        "--queries",
        empty.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "stdout: {}\nstderr: {}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("registered 0/0"));

    // An impossible inlier demand defeats every query.
    let out = loc(&[
        "localize",
        "--model",
        model.to_str().unwrap(),
        "--queries",
        root.join("queries.bin").to_str().unwrap(),
        "--min-inliers",
        "100000",
    ]);
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains("registered 0/"));
}

#[test]
fn starving_the_forward_stage_costs_registrations() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // Clean worlds register everything even with a single forward pair,
    // because back-matching rebuilds the correspondence set from one good
    // vote. Descriptor noise plus distractor features makes the initial
    // votes unreliable, so the forward budget becomes the binding resource.
    let config = root.join("noisy.json");
    std::fs::write(
        &config,
        r#"{
            "num_points": 500,
            "num_model_images": 36,
            "num_query_images": 12,
            "focal": 1000.0,
            "descriptor_noise_sigma": 0.15,
            "pixel_noise_sigma": 0.5,
            "distractor_feature_fraction": 1.0,
            "seed": 100
        }"#,
    )
    .unwrap();
    let out =
        loc(&["synth", "--config", config.to_str().unwrap(), "--out", root.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let model = root.join("model");

    let registered = |nf: &str| -> usize {
        let out = loc(&[
            "localize",
            "--model",
            model.to_str().unwrap(),
            "--queries",
            root.join("queries.bin").to_str().unwrap(),
            "--nf",
            nf,
        ]);
        assert!(code(&out) == 0 || code(&out) == 3, "{}", stderr(&out));
        stdout(&out)
            .lines()
            .rev()
            .find_map(|l| {
                let rest = l.strip_prefix("registered ")?;
                rest.split('/').next()?.parse::<usize>().ok()
            })
            .expect("summary line present")
    };
    let reg_tiny = registered("2");
    let reg_mid = registered("50");
    let reg_full = registered("200");
    assert!(reg_tiny < reg_full, "starved forward stage registered {reg_tiny} vs {reg_full}");
    // Past a modest budget the count plateaus.
    assert!(reg_full <= reg_mid + 1, "no plateau: {reg_mid} at 50 vs {reg_full} at 200");
}
