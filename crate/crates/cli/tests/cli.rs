//! End-to-end runs of the `polynet` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn polynet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polynet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: [&str; 12] = [
    "--network", "A: ir; B: poly-2", "--arch", "dense:4,8", "--input-size", "8", "--images", "80", "--batch", "8",
    "--iters", "24",
];

#[test]
fn rewrite_prints_the_cascaded_form() {
    let o = polynet(&["rewrite", "--kind", "poly-2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().next(), Some("I + (I+F)F"));
    let o = polynet(&["expand", "--expr", "I + (I+F)F"]);
    assert_eq!(stdout(&o).lines().next(), Some("I + F + FF"));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&polynet(&["parse", ""])), 2);
    assert_eq!(code(&polynet(&["parse", "A: quad-2"])), 2);
    assert_eq!(code(&polynet(&["no-such-command"])), 1);
    assert_eq!(code(&polynet(&["train", "--iters", "many"])), 1);
    assert_eq!(code(&polynet(&["--help"])), 0);
    assert_eq!(code(&polynet(&["analyze", "--arch", "dense:0"])), 2);
    assert_eq!(code(&polynet(&["gradcheck", "--kind", "poly-2", "--tol", "1e-30"])), 3);
}

#[test]
fn parse_expands_repetitions() {
    let o = polynet(&["parse", "A: (ir -> poly-2) x 2; B: 3-way"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.lines().next().unwrap().starts_with("A: "));
    assert!(text.contains("5 modules"), "{text}");
    let o = polynet(&["parse", "ir-6-12-6"]);
    assert!(stdout(&o).contains("24 modules"));
}

#[test]
fn gradcheck_passes_for_mpoly3() {
    let o = polynet(&["gradcheck", "--kind", "mpoly-3", "--arch", "dense:4,8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ok"));
    let o = polynet(&["gradcheck", "--kind", "poly-3", "--arch", "conv:4,2"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn analyze_formats_parse() {
    let o = polynet(&["analyze", "--network", "ir-3-6-3", "--arch", "conv:8,2", "--format", "csv"]);
    assert_eq!(code(&o), 0);
    let mut r = csv::Reader::from_reader(o.stdout.as_slice());
    assert_eq!(&r.headers().unwrap()[0], "config");
    assert_eq!(r.records().filter(|x| &x.as_ref().unwrap()[3] == "ir").count(), 12);

    let o = polynet(&["analyze", "--network", "ir-3-6-3", "--arch", "conv:8,2", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    let sum: u64 = rows.iter().map(|r| r["macs"].as_u64().unwrap()).sum();
    assert_eq!(v["macs"].as_u64().unwrap(), sum);
}

#[test]
fn train_eval_surgery_flow() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--augment", "--stochastic-paths", "--seed", "3", "--out"];
    args.push(run.to_str().unwrap());
    args.extend(TINY);
    let o = polynet(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let m = json(&run.join("manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["options"]["iters"], 24);
    assert_eq!(fs::read_to_string(run.join("history.jsonl")).unwrap().lines().count(), 12);
    let final_ckpt = run.join("checkpoints/final");
    assert!(final_ckpt.join("params.bin").exists());

    // same seed, same bytes
    let again = dir.path().join("again");
    args[6] = again.to_str().unwrap();
    assert_eq!(code(&polynet(&args)), 0);
    assert_eq!(
        fs::read(run.join("checkpoints/final/params.bin")).unwrap(),
        fs::read(again.join("checkpoints/final/params.bin")).unwrap()
    );

    let ev = dir.path().join("eval");
    let o = polynet(&[
        "eval", "--checkpoint", final_ckpt.to_str().unwrap(), "--images", "80", "--scales", "1,1.5", "--crops", "4",
        "--out", ev.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let multi = json(&ev.join("multi_crop.json"));
    assert_eq!(multi["protocol"]["crops"], 4);
    assert_eq!(multi["protocol"]["fraction"], 0.3);
    let top1 = multi["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert_eq!(json(&ev.join("single_crop.json"))["protocol"]["crops"], 1);

    let sg = dir.path().join("surgery");
    let o = polynet(&[
        "surgery", "--checkpoint", final_ckpt.to_str().unwrap(), "--target", "A: mpoly-2; B: poly-2", "--interleave",
        "1,1", "--zero-last", "--out", sg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = json(&sg.join("surgery.json"));
    assert_eq!(rep["modules_after"], 4);
    assert!(rep["max_rel_change"].as_f64().unwrap() <= 1e-5, "{rep}");
    assert!(sg.join("checkpoint/params.bin").exists());

    let o = polynet(&["surgery", "--checkpoint", final_ckpt.to_str().unwrap(), "--target", "IR 2-2", "--out", sg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "# tiny\niters = 5\nbatch = 4\nimages = 40\ninput_size = 8\narch = dense:4,8\n").unwrap();
    let out = dir.path().join("o");
    let o = polynet(&[
        "train", "--config", conf.to_str().unwrap(), "--network", "IR 1-1", "--iters", "6", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["options"]["iters"], 6);
    assert_eq!(m["options"]["batch"], 4);
    assert_eq!(m["options"]["arch"], "dense:4,8");
}

#[test]
fn sweep_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = polynet(&[
        "sweep", "--network", "A: ir; B: ir", "--arch", "dense:4,8", "--input-size", "8", "--images", "40", "--iters",
        "4", "--limit", "3", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let labels: Vec<String> = r.records().map(|x| x.unwrap()[0].to_string()).collect();
    assert_eq!(labels, ["baseline", "A:2-way", "A:3-way"]);
}

#[test]
fn zero_iteration_train_still_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("z");
    let o = polynet(&[
        "train", "--network", "IR 1-1", "--arch", "dense:4,8", "--input-size", "8", "--images", "20", "--iters", "0",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoints/final/manifest.json").exists());
}
