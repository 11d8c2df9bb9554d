use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ssnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssnet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ssnet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--seed", "3", "--count", "10", "--size", "32", "--out", s(&data)]);
    assert!(fs::read_to_string(data.join("meta.txt")).unwrap().contains("count=10"));

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# quick run\nepochs=1\nbatch=4\nwidths=16,64,128\ndilations=/1/2\neval_t=3\n").unwrap();
    let ckpt = dir.path().join("m.wseg");
    let csv = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert!(csv.starts_with("epoch,split,miou,class_avg,global_avg,ap,ap50\n0,val,"), "{csv}");
    assert!(ckpt.exists());

    let sweep = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--t", "3,5,10,30"]);
    let splits: Vec<&str> = sweep.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(splits, ["t=3", "t=5", "t=10", "t=30"]);
    let out = dir.path().join("eval.csv");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--t", "3", "--fold-bn", "--out", s(&out)]);
    let folded = fs::read_to_string(&out).unwrap();
    assert_eq!(folded.lines().nth(1), sweep.lines().nth(1));
}

#[test]
fn errors_exit_nonzero_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs=1\nlearning_rate=3\n").unwrap();
    let out = ssnet(&["train", "--config", s(&cfg), "--data", "nowhere", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = ssnet(&["eval", "--ckpt", s(&dir.path().join("missing.wseg")), "--data", ".", "--t", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.wseg"));
}

#[test]
fn gradcheck_and_bench() {
    let g = ok(&["gradcheck", "--op", "bound_offsets"]);
    assert!(g.starts_with("op,max_rel_err,probes,pass\nbound_offsets,"));
    assert!(g.trim_end().ends_with("true"));
    assert_eq!(ssnet(&["gradcheck", "--op", "nonsense"]).status.code(), Some(2));

    let b = ok(&["bench", "--scenario", "igum_decoder", "--channels", "4", "--size", "32x64", "--reps", "10"]);
    let lines: Vec<&str> = b.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "scenario,channels,height,width,reps,median_ms,fps");
    assert!(lines[1].starts_with("igum_decoder,4,32,64,10,"));
    assert_eq!(ssnet(&["bench", "--scenario", "dense_decoder", "--reps", "5"]).status.code(), Some(2));
}
