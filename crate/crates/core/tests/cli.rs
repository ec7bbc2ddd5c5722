use std::path::Path;

use gprloc::app::cli::run;

fn gprloc(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("gprloc").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn simulate_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let (code, _, err) = gprloc(&["simulate", "--config", p(&cfg), "--out", p(d), "--seed", "7"]);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
    let c = tmp.path().join("c");
    gprloc(&["simulate", "--out", p(&c), "--seed", "8"]);
    assert_ne!(read_dir_bytes(&a), read_dir_bytes(&c));
}

#[test]
fn localize_eval_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let est = tmp.path().join("est");
    let fig = tmp.path().join("fig");
    assert_eq!(gprloc(&["simulate", "--out", p(&ds), "--seed", "3"]).0, 0);
    let (code, _, err) = gprloc(&["localize", "--dataset", p(&ds), "--model", "odometry-only", "--out", p(&est)]);
    assert_eq!(code, 0, "{err}");
    let (code, out, _) = gprloc(&["eval", "--dataset", p(&ds), "--estimate", p(&est)]);
    assert_eq!(code, 0);
    let line = out.trim();
    let number = line.strip_prefix("ATE ").and_then(|s| s.strip_suffix(" m")).unwrap();
    assert_eq!(number.split('.').nth(1).unwrap().len(), 4, "{line}");
    assert!(number.parse::<f64>().unwrap() > 0.0);

    let (code, _, err) = gprloc(&["plot", "--dataset", p(&ds), "--estimate", p(&est), "--out", p(&fig)]);
    assert_eq!(code, 0, "{err}");
    for f in ["trajectory.svg", "trajectory.csv", "ate_over_time.svg", "ate_over_time.csv"] {
        let text = std::fs::read_to_string(fig.join(f)).unwrap();
        assert!(text.lines().count() > 2, "{f}");
    }
}

#[test]
fn eval_refuses_estimate_from_another_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, est) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("est"));
    gprloc(&["simulate", "--out", p(&a), "--seed", "1"]);
    gprloc(&["simulate", "--out", p(&b), "--seed", "2"]);
    assert_eq!(gprloc(&["localize", "--dataset", p(&a), "--model", "odometry-only", "--out", p(&est)]).0, 0);
    let (code, out, err) = gprloc(&["eval", "--dataset", p(&b), "--estimate", p(&est)]);
    assert_eq!(code, 2);
    assert!(out.is_empty());
    assert!(err.contains("hash"), "{err}");
}

#[test]
fn usage_errors_exit_one_on_stderr() {
    let (code, out, err) = gprloc(&["localize", "--bogus"]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.contains("--bogus") && err.contains("Usage"), "{err}");
    assert_eq!(gprloc(&[]).0, 1);
    let (code, out, _) = gprloc(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("simulate") && out.contains("plot"));
}

#[test]
fn data_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let (code, _, err) = gprloc(&["localize", "--dataset", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(code, 2, "{err}");
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[pipeline]\nnot_a_key = 1\n").unwrap();
    let (code, _, _) = gprloc(&["simulate", "--config", p(&cfg), "--out", p(tmp.path())]);
    assert_eq!(code, 2);
    let (code, _, err) = gprloc(&["localize", "--dataset", p(&missing), "--model", "bogus", "--out", p(tmp.path())]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn preprocess_writes_submaps_and_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, pre) = (tmp.path().join("ds"), tmp.path().join("pre"));
    gprloc(&["simulate", "--out", p(&ds), "--seed", "4"]);
    let (code, out, err) = gprloc(&["preprocess", "--dataset", p(&ds), "--out", p(&pre)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("submaps"));
    let index = std::fs::read_to_string(pre.join("submaps.csv")).unwrap();
    let n = index.lines().count() - 1;
    assert!(n > 2);
    assert!(pre.join(format!("submap_{:03}.csv", n - 1)).is_file());
    assert!(std::fs::read_to_string(pre.join("pairs.csv")).unwrap().starts_with("older,newer,flipped,score"));
}
