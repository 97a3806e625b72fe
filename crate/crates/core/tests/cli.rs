use std::path::Path;
use std::process::{Command, Output};

fn vfi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfiformer")).args(args).output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn help_lists_commands_and_flags() {
    let o = vfi(&["--help"]);
    assert!(o.status.success());
    let t = text(&o);
    for word in ["train", "eval", "interpolate", "erf", "bench", "gen-data", "--config", "--seed", "--out-dir", "--preset", "--steps"] {
        assert!(t.contains(word), "help is missing {word}");
    }
    let t = text(&vfi(&["bench", "--help"]));
    assert!(t.contains("--window-sizes") && t.contains("--runs"));
}

#[test]
fn unknown_flags_and_bad_values_are_rejected() {
    assert!(!vfi(&["train", "--bogus"]).status.success());
    assert!(!vfi(&["--preset", "huge", "bench"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = vfi(&["--out-dir", out, "bench", "--window-sizes", "6", "--size", "48"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("error[config]"), "{}", text(&o));
}

#[test]
fn missing_corpus_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = dir.path().join("nowhere");
    let o = vfi(&["--out-dir", out, "train", "--corpus", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o).contains("error[io]"), "{}", text(&o));
}

#[test]
fn pipeline_writes_under_out_dir_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let o = vfi(&["--out-dir", data.to_str().unwrap(), "--seed", "3", "gen-data", "--count", "4", "--size", "48"]);
    assert!(o.status.success(), "{}", text(&o));
    let corpus = data.join("corpus");
    assert_eq!(files(&corpus).len(), 4);

    let train = |name: &str| {
        let out = root.join(name);
        let o = vfi(&["--out-dir", out.to_str().unwrap(), "--steps", "4", "train", "--corpus", corpus.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o));
        out
    };
    let a = train("a");
    let b = train("b");
    assert_eq!(files(&a), vec!["checkpoint.vfit", "config.json", "loss.csv"]);
    assert_eq!(std::fs::read(a.join("loss.csv")).unwrap(), std::fs::read(b.join("loss.csv")).unwrap());
    let weights = |dir: &Path| {
        let (_, store, _) = vfiformer::train::load_model(&dir.join("checkpoint.vfit")).unwrap();
        store.iter().flat_map(|(_, p)| p.value().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    assert!(weights(&a) == weights(&b), "trained weights differ between identical runs");

    let ckpt = a.join("checkpoint.vfit");
    let ev = root.join("eval");
    let o = vfi(&["--out-dir", ev.to_str().unwrap(), "eval", "--checkpoint", ckpt.to_str().unwrap(), "--corpus", corpus.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(std::fs::read_to_string(ev.join("eval.csv")).unwrap().starts_with("level,"));

    let first = corpus.join("00000");
    let interp = root.join("interp");
    let o = vfi(&[
        "--out-dir",
        interp.to_str().unwrap(),
        "interpolate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        first.join("im0.png").to_str().unwrap(),
        first.join("im1.png").to_str().unwrap(),
        "--factor",
        "4",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(files(&interp), vec!["frame_001.png", "frame_002.png", "frame_003.png"]);
}

#[test]
fn erf_and_bench_write_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = vfi(&["--out-dir", out, "erf", "--samples", "1", "--size", "16", "--window", "4"]);
    assert!(o.status.success(), "{}", text(&o));
    let o = vfi(&["--out-dir", out, "bench", "--window-sizes", "4,8", "--size", "16", "--runs", "1"]);
    assert!(o.status.success(), "{}", text(&o));
    let names = files(dir.path());
    for f in ["bench.csv", "erf_area.csv", "erf_conv3x3.png", "erf_cswa.png", "erf_wa.png"] {
        assert!(names.contains(&f.to_string()), "{names:?}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("bench.csv")).unwrap().lines().count(), 3);
}
