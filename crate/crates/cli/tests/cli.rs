use std::process::{Command, Output};

use seqrot::io;

fn seqrot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqrot"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn walsh_rows_print_in_order() {
    let o = seqrot(&["make-rotation", "--kind", "gw", "--n", "8"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("row sequency: 0 1 2 3 4 5 6 7"));
}

#[test]
fn bad_group_is_a_usage_error() {
    let o = seqrot(&["make-rotation", "--kind", "gsr", "--n", "8", "--group", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("group must be a power of two dividing n"));

    let o = seqrot(&["make-rotation", "--kind", "lh", "--n", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(seqrot(&["compare", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn gsr_file_has_two_walsh_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gsr.gsrt");
    let p = path.to_str().unwrap();
    let o = seqrot(&["--out", p, "make-rotation", "--kind", "gsr", "--n", "8", "--group", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let m = io::read_rotation(&path).unwrap();
    assert!(m.blocks_identical());
    assert_eq!(m.block_order(), 4);
    assert!(m.orthogonality_residual() < 1e-12);

    let o = seqrot(&["inspect", "--file", p]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("identical blocks: true"));
}

#[test]
fn lattice_tensor_quantizes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.gsrt");
    let w = nalgebra::DMatrix::from_fn(2, 8, |r, c| ((r + c) % 4) as f64);
    io::write_tensor(&path, &io::Tensor::from_matrix(&w), &serde_json::json!({})).unwrap();
    let o = seqrot(&[
        "quantize", "--file", path.to_str().unwrap(), "--bits", "2", "--group", "4", "--clip", "none",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("mse: 0e0"), "{}", stdout(&o));
}

#[test]
fn invariance_passes_and_tolerance_can_fail() {
    let args = ["invariance", "--r1", "gsr", "--r2", "gh", "--r3", "gh", "--r4", "gh", "--seeds", "3"];
    let o = seqrot(&args);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("max abs diff < 1e-10: PASS"));

    let mut strict = args.to_vec();
    strict.extend(["--tol", "0"]);
    assert_eq!(seqrot(&strict).status.code(), Some(1));
}

#[test]
fn failed_run_leaves_no_new_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("q.gsrt");
    let o = seqrot(&[
        "--out",
        out.to_str().unwrap(),
        "quantize",
        "--file",
        dir.path().join("missing.gsrt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn small_compare_reproduces_from_echo() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let o = seqrot(&[
        "--seed", "4", "--out", a.to_str().unwrap(), "compare", "--count", "2", "--rows", "16",
        "--cols", "32", "--group", "8", "--scheme", "gptq",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("fairness: identical inputs"));
    let echo = text.lines().find_map(|l| l.strip_prefix("config: seqrot ")).unwrap();
    let b = dir.path().join("b.csv");
    let args: Vec<String> = echo
        .split_whitespace()
        .map(|s| if s == a.to_str().unwrap() { b.display().to_string() } else { s.to_string() })
        .collect();
    let o2 = Command::new(env!("CARGO_BIN_EXE_seqrot")).args(&args).output().unwrap();
    assert_eq!(o2.status.code(), Some(0));
    let (ra, rb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ra, rb);
    assert_eq!(io::read_report(&a).unwrap().len(), 4 * 2 * 3);
}
