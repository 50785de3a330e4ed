//! End-to-end contracts of the `stmu` binary: exit codes, files written,
//! log lines and the stable TSV report.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stmu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmu"))
        .args(args)
        .env_remove("STMU_THREADS")
        .output()
        .expect("failed to launch stmu")
}

fn ok(args: &[&str]) -> String {
    let out = stmu(args);
    assert!(
        out.status.success(),
        "`stmu {}` exited with {:?}\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    let prefix = format!("{key}=");
    text.split_whitespace()
        .find_map(|t| t.strip_prefix(prefix.as_str()))
        .unwrap_or_else(|| panic!("no `{key}=` in output:\n{text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn help_and_version_exit_zero() {
    let help = ok(&["--help"]);
    for sub in ["train", "eval", "ablate", "gradcheck", "params", "synth"] {
        assert!(help.contains(sub), "help lacks {sub}");
    }
    assert!(ok(&["--version"]).contains(env!("CARGO_PKG_VERSION")));
    assert!(ok(&["train", "--help"]).contains("--epochs"));
}

#[test]
fn bad_flags_are_usage_errors_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    for args in [
        vec!["train", "--epoch", "3", "--out", s(&out_dir)],
        vec!["train", "--set", "model.depth=3", "--out", s(&out_dir)],
        vec!["train", "--set", "train.lr", "--out", s(&out_dir)],
        vec!["train", "--window", "5", "--size", "64", "--out", s(&out_dir)],
        vec!["frobnicate"],
    ] {
        let out = stmu(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(!err.trim().is_empty(), "{args:?} printed no message");
        assert!(!out_dir.exists(), "{args:?} created the output directory");
    }
    let out = stmu(&["train", "--bogus"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn thread_cap_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_stmu"))
        .args(["params", "--desk"])
        .env("STMU_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_stmu"))
        .args(["params", "--desk"])
        .env("STMU_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn default_recipe_is_echoed() {
    let text = ok(&["params"]);
    let header = text.lines().next().unwrap();
    assert_eq!(field(header, "lr"), "0.0001");
    assert_eq!(field(header, "batch"), "8");
    assert_eq!(field(header, "epochs"), "300");
    assert_eq!(field(header, "optimizer"), "adam");
    let n: usize = field(&text, "params").parse().unwrap();
    assert!((4_900_000..=7_400_000).contains(&n), "{n}");
    assert!(field(&text, "deviation").ends_with('%'));
}

#[test]
fn config_file_then_set_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# layered\ntrain.lr = 0.5\ntrain.epochs = 7\nmodel.window = 4\n").unwrap();
    let text = ok(&["params", "--desk", "--config", s(&conf), "--set", "train.epochs=9", "--lr", "0.25"]);
    let header = text.lines().next().unwrap();
    assert_eq!(field(header, "lr"), "0.25");
    assert_eq!(field(header, "epochs"), "9");

    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    let from_file = ok(&["params", "--config", s(&shipped)]);
    assert_eq!(from_file, ok(&["params", "--desk"]));
}

#[test]
fn synth_writes_requested_pairs_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--n", "20", "--size", "64", "--seed", "7", "--out", s(out)]);
    }
    let images = files_in(&a.join("images"));
    let masks = files_in(&a.join("masks"));
    assert_eq!(images.len(), 20);
    assert_eq!(masks.len(), 20);
    for (img, mask) in images.iter().zip(&masks) {
        assert!(img.ends_with(".ppm") && mask.ends_with(".pgm"));
        assert_eq!(img.trim_end_matches(".ppm"), mask.trim_end_matches(".pgm"));
        for sub in ["images", "masks"] {
            let name = if sub == "images" { img } else { mask };
            assert_eq!(std::fs::read(a.join(sub).join(name)).unwrap(), std::fs::read(b.join(sub).join(name)).unwrap());
        }
    }
}

#[test]
fn train_smoke_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let stdout = ok(&[
        "train", "--data", "synth", "--epochs", "5", "--size", "64", "--channels", "8,16,32,64,128", "--out", s(&out),
    ]);
    assert!(out.join("best.stmu").is_file());
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(log, stdout);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 5);
    assert_eq!(field(&log, "channels"), "[8,16,32,64,128]");
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let log = ok(&[
        "train", "--desk", "--size", "32", "--synth-count", "20", "--epochs", "2", "--lr", "0", "--out", s(&dir.path().join("r")),
    ]);
    assert_eq!(field(&log, "init_checksum"), field(&log, "final_checksum"));
}

#[test]
fn seeded_train_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["train", "--desk", "--size", "32", "--synth-count", "20", "--epochs", "2", "--seed", "4", "--out", s(&out)]);
        let log = std::fs::read_to_string(out.join("train.log")).unwrap().replace(s(&out), "");
        (log, std::fs::read(out.join("best.stmu")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn eval_of_empty_folder_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("r");
    ok(&["train", "--desk", "--size", "32", "--synth-count", "10", "--epochs", "1", "--out", s(&ck)]);
    let data = dir.path().join("empty");
    std::fs::create_dir_all(data.join("images")).unwrap();
    std::fs::create_dir_all(data.join("masks")).unwrap();
    let out = stmu(&["eval", "--checkpoint", s(&ck.join("best.stmu")), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty dataset"));

    let out = stmu(&["eval", "--checkpoint", s(&dir.path().join("missing.stmu"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/eval.tsv")
}

#[test]
fn tsv_report_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("r");
    ok(&["train", "--desk", "--size", "32", "--synth-count", "10", "--epochs", "2", "--seed", "5", "--out", s(&ck)]);
    let checkpoint = ck.join("best.stmu");
    let args = ["eval", "--checkpoint", s(&checkpoint), "--synth-count", "6", "--seed", "5", "--format", "tsv"];
    let tsv = ok(&args);
    assert_eq!(tsv, ok(&args));
    for line in tsv.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 3, "{line}");
        for v in &cols[1..] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert_eq!(tsv.lines().count(), 6);
    if std::env::var_os("STMU_BLESS").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &tsv).unwrap();
    }
    assert_eq!(tsv, std::fs::read_to_string(golden_path()).unwrap());
}

#[test]
fn overfit_blob_scores_near_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "1", "--size", "32", "--seed", "3", "--out", s(&data)]);
    std::fs::copy(data.join("images/blob_0000.ppm"), data.join("images/blob_0001.ppm")).unwrap();
    std::fs::copy(data.join("masks/blob_0000.pgm"), data.join("masks/blob_0001.pgm")).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--desk", "--data", s(&data), "--size", "32", "--epochs", "120", "--lr", "0.001", "--out", s(&run)]);
    let text = ok(&["eval", "--checkpoint", s(&run.join("best.stmu")), "--data", s(&data)]);
    let miou: f64 = field(&text, "mIoU").parse().unwrap();
    assert!(miou >= 0.99, "{text}");
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn gradcheck_passes() {
    let text = ok(&["gradcheck", "--seed", "3"]);
    assert!(text.contains("all") && text.contains("checks passed"), "{text}");
    assert!(!text.contains("FAIL"));
}
