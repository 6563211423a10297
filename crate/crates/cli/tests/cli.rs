use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tiny(data: &str) -> String {
    format!("{FLEET}\n[data]\ntest_per_ue = 4\n{data}")
}

const FLEET: &str = r#"
[fleet]
ues = 2
samples_per_ue = 16
batch = 4
iterations = 6

[model]
n_t = 4
n_c = 4
c1 = 8
c2 = 8

[eval]
every = 2
"#;

fn csilocal(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csilocal")).args(args).current_dir(dir).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn generated_files_train_like_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), tiny("")).unwrap();
    ok(csilocal(&["gen-data", "--config", "tiny.toml", "--seed", "7", "--out", "data"], d));
    assert!(d.join("data/train.csid").exists() && d.join("data/test.toml").exists());

    fs::write(d.join("file.toml"), tiny("source = \"file\"\npath = \"data\"\n")).unwrap();
    ok(csilocal(&["train", "--config", "tiny.toml", "--seed", "7", "--out", "a"], d));
    ok(csilocal(&["train", "--config", "file.toml", "--seed", "7", "--out", "b"], d));
    let a = fs::read(d.join("a/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b/metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&a).starts_with(
        "iteration,exchanged_scalars,virtual_time,train_nmse,test_nmse,per_ue_test_nmse_json\n"
    ));
}

#[test]
fn compare_and_bench_print_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), tiny("")).unwrap();
    for alg in ["csilocal", "fedavg"] {
        ok(csilocal(&["train", "--config", "tiny.toml", "--algorithm", alg, "--out", alg], d));
    }
    let table = ok(csilocal(&["compare", "--target", "1e-12", "csilocal/metrics.csv", "fedavg/metrics.csv"], d));
    assert_eq!(table.lines().count(), 3);
    assert_eq!(table.matches("not reached").count(), 6);

    let bench = ok(csilocal(&["pipeline-bench", "--preset", "paper", "--stages", "1,2", "--micro-batches", "2", "--batches", "400,800"], d));
    assert!(bench.starts_with("batch,stages,micro_batches,makespan,serial,speedup,bubble\n"));
    assert_eq!(bench.lines().count(), 5);
}

#[test]
fn bad_input_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[fleet]\nbatch = 0\n").unwrap();
    let out = csilocal(&["train", "--config", "bad.toml"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fleet.batch"));
    let out = csilocal(&["train", "--preset", "desk-huge"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("preset"));
}
