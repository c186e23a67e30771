use odlm::eval::evaluate;
use odlm::format::load_model;
use odlm::recmodel::*;
use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_odlm");
const EPOCHS: &str = "2";

fn odlm(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ODLM_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = odlm(args);
    assert!(
        out.status.success(),
        "odlm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("cli")
        .join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    data: PathBuf,
    dense: PathBuf,
    compressed: PathBuf,
    report: PathBuf,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = scratch("fixture");
        let f = Fixture {
            data: dir.join("data.txt"),
            dense: dir.join("dense.odlm"),
            compressed: dir.join("comp.odlm"),
            report: dir.join("comp.odlm.report.json"),
        };
        ok(&[
            "gen-data",
            "--users",
            "200",
            "--items",
            "64",
            "--seed",
            "7",
            "-o",
            s(&f.data),
        ]);
        ok(&[
            "train",
            "--data",
            s(&f.data),
            "-o",
            s(&f.dense),
            "--epochs",
            EPOCHS,
            "--seed",
            "1",
        ]);
        ok(&[
            "compress",
            "--model",
            s(&f.dense),
            "--data",
            s(&f.data),
            "-o",
            s(&f.compressed),
        ]);
        f
    })
}

fn schema_validator() -> jsonschema::Validator {
    let schema: Value = serde_json::from_str(include_str!("../schema/report.schema.json")).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(path: &Path) {
    let v: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    let errors: Vec<String> = schema_validator()
        .iter_errors(&v)
        .map(|e| e.to_string())
        .collect();
    assert!(errors.is_empty(), "{}: {errors:?}", path.display());
}

fn strip(v: &mut Value, keys: &[&str]) {
    match v {
        Value::Object(m) => {
            for k in keys {
                m.remove(*k);
            }
            m.values_mut().for_each(|x| strip(x, keys));
        }
        Value::Array(a) => a.iter_mut().for_each(|x| strip(x, keys)),
        _ => {}
    }
}

fn json_without(path: &Path, keys: &[&str]) -> Value {
    let mut v: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    strip(&mut v, keys);
    v
}

#[test]
fn gen_data_is_deterministic_with_sidecar() {
    let dir = scratch("gen");
    let (a, b) = (dir.join("a.txt"), dir.join("b.txt"));
    for p in [&a, &b] {
        ok(&[
            "gen-data",
            "--users",
            "200",
            "--items",
            "64",
            "--seed",
            "7",
            "-o",
            s(p),
        ]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds, generate_synthetic(200, 64, 7).unwrap());
    let side: Value = serde_json::from_slice(&fs::read(dir.join("a.txt.json")).unwrap()).unwrap();
    assert_eq!(side["users"], 200);
    assert_eq!(side["seed"], 7);
}

#[test]
fn unwritable_output_names_the_path() {
    let out = odlm(&["gen-data", "-o", "/nonexistent-dir/x/data.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent-dir/x/data.txt"));
}

#[test]
fn trained_file_evaluates_like_memory() {
    let f = fixture();
    let ds = load_dataset(&f.data).unwrap();
    let split = split_leave_last_two(&ds);
    let init = RecModel::new(ModelConfig::toy(64), 1).unwrap();
    let cfg = TrainConfig {
        epochs: EPOCHS.parse().unwrap(),
        seed: 1,
        ..TrainConfig::default()
    };
    let (mem, _) = train(&init, &ds, &split.train, &cfg).unwrap();
    let loaded = load_model(&f.dense).unwrap();
    assert_eq!(loaded, mem);
    let a = evaluate(&mem, &split.test, &[5, 10], true).unwrap();
    let b = evaluate(&loaded, &split.test, &[5, 10], true).unwrap();
    assert_eq!(a, b);

    let dir = scratch("evalmem");
    let j = dir.join("e.json");
    ok(&[
        "eval",
        "--model",
        s(&f.dense),
        "--data",
        s(&f.data),
        "--json",
        s(&j),
    ]);
    let v: Value = serde_json::from_slice(&fs::read(&j).unwrap()).unwrap();
    assert_eq!(v["metrics"]["per_k"]["10"]["hr"].as_f64(), a.hr(10));
}

#[test]
fn zero_epochs_warns() {
    let f = fixture();
    let dir = scratch("epochs0");
    let out = ok(&[
        "train",
        "--data",
        s(&f.data),
        "-o",
        s(&dir.join("m.odlm")),
        "--epochs",
        "0",
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--epochs 0"));
    let m = load_model(&dir.join("m.odlm")).unwrap();
    assert_eq!(
        m,
        RecModel::new(ModelConfig::toy(64), 0)
            .unwrap()
            .to_storage_precision()
    );
}

#[test]
fn corrupt_dataset_reports_line() {
    let dir = scratch("corrupt");
    let p = dir.join("bad.txt");
    fs::write(&p, "u1 1 2 3\nu2 4 5 6\nu3\n").unwrap();
    let out = odlm(&[
        "train",
        "--data",
        s(&p),
        "-o",
        s(&dir.join("m.odlm")),
        "--epochs",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn compressed_file_is_smaller_and_report_validates() {
    let f = fixture();
    let dense = fs::metadata(&f.dense).unwrap().len();
    let comp = fs::metadata(&f.compressed).unwrap().len();
    assert!((comp as f64) < 0.6 * dense as f64, "{comp} vs {dense}");
    assert_valid(&f.report);
    let r: Value = serde_json::from_slice(&fs::read(&f.report).unwrap()).unwrap();
    assert_eq!(r["config"]["cr"], 0.5);
    assert_eq!(r["config"]["calib_samples"], 256);
    assert_eq!(r["layers"].as_array().unwrap().len(), 12);
    for l in r["layers"].as_array().unwrap() {
        let (m, n, k) = (
            l["m"].as_f64().unwrap(),
            l["n"].as_f64().unwrap(),
            l["rank"].as_f64().unwrap(),
        );
        assert!(k * (m + n) <= 0.5 * m * n);
        assert!(l["update_applied"].is_boolean());
    }
}

#[test]
fn ablation_flags_change_the_pipeline() {
    let f = fixture();
    let dir = scratch("ablation");
    let run = |name: &str, extra: &[&str]| {
        let out = dir.join(name);
        let mut args = vec![
            "compress",
            "--model",
            s(&f.dense),
            "--data",
            s(&f.data),
            "-o",
            s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        let mut rp = out.clone().into_os_string();
        rp.push(".report.json");
        let v: Value = serde_json::from_slice(&fs::read(PathBuf::from(rp)).unwrap()).unwrap();
        (fs::read(&out).unwrap(), v)
    };
    let (ms, rs) = run("ms.odlm", &["--no-whiten", "--no-update"]);
    let (mns, rns) = run("mns.odlm", &["--no-update"]);
    let (m, r) = run("m.odlm", &["--progressive"]);
    assert_ne!(ms, mns);
    assert_ne!(mns, m);
    assert_eq!(rs["config"]["whiten"], false);
    assert_eq!(rns["config"]["whiten"], true);
    assert_eq!(rns["config"]["progressive"], false);
    assert_eq!(r["config"]["progressive"], true);
    assert!(rns["layers"]
        .as_array()
        .unwrap()
        .iter()
        .all(|l| l["update_applied"] == false));
    assert_eq!(
        odlm(&[
            "compress",
            "--model",
            "a",
            "--data",
            "b",
            "-o",
            "c",
            "--progressive",
            "--no-update"
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn bad_arguments_are_usage_errors() {
    let f = fixture();
    let out = odlm(&[
        "compress",
        "--model",
        s(&f.dense),
        "--data",
        s(&f.data),
        "-o",
        "/tmp/x.odlm",
        "--cr",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = odlm(&[
        "bench",
        "--dense",
        s(&f.dense),
        "--compressed",
        s(&f.compressed),
        "--reps",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = odlm(&[
        "eval",
        "--model",
        s(&f.dense),
        "--data",
        s(&f.data),
        "--ks",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(BIN)
        .args(["eval", "--model", "m", "--data", "d"])
        .env("ODLM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(odlm(&["--help"]).status.code(), Some(0));
    assert_eq!(odlm(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn missing_model_is_a_data_error() {
    let f = fixture();
    let out = odlm(&[
        "eval",
        "--model",
        "/nonexistent/model.odlm",
        "--data",
        s(&f.data),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/model.odlm"));
}

#[test]
fn eval_json_is_reproducible_and_valid() {
    let f = fixture();
    let dir = scratch("evaljson");
    let (a, b) = (dir.join("a.json"), dir.join("b.json"));
    let mut stdout = Vec::new();
    for p in [&a, &b] {
        let out = ok(&[
            "eval",
            "--model",
            s(&f.compressed),
            "--data",
            s(&f.data),
            "--json",
            s(p),
        ]);
        stdout.push(out.stdout);
    }
    assert_eq!(stdout[0], stdout[1]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_valid(&a);
    let va: Value = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    assert!(va["layers"]
        .as_array()
        .unwrap()
        .iter()
        .all(|l| l["kind"] == "factored"));
    let text = String::from_utf8_lossy(&stdout[0]);
    assert!(text.contains("HR") && text.contains("NDCG"));
    assert!(text.lines().any(|l| l.trim_start().starts_with("5 ")));
    assert!(text.lines().any(|l| l.trim_start().starts_with("10 ")));
}

#[test]
fn bench_reports_flop_ratio() {
    let f = fixture();
    let dir = scratch("bench");
    let j = dir.join("b.json");
    ok(&[
        "bench",
        "--dense",
        s(&f.dense),
        "--compressed",
        s(&f.compressed),
        "--reps",
        "3",
        "--batch",
        "8",
        "--json",
        s(&j),
    ]);
    assert_valid(&j);
    let v: Value = serde_json::from_slice(&fs::read(&j).unwrap()).unwrap();
    let ratio = v["bench"]["flop_ratio"].as_f64().unwrap();
    assert!((ratio - 0.5).abs() <= 0.05, "{ratio}");
    let j2 = dir.join("self.json");
    ok(&[
        "bench",
        "--dense",
        s(&f.dense),
        "--compressed",
        s(&f.dense),
        "--reps",
        "3",
        "--batch",
        "8",
        "--json",
        s(&j2),
    ]);
    let v: Value = serde_json::from_slice(&fs::read(&j2).unwrap()).unwrap();
    assert_eq!(v["bench"]["flop_ratio"], 1.0);
}

#[test]
fn single_point_sweep_matches_compress_then_eval() {
    let f = fixture();
    let dir = scratch("sweep1");
    let csv = dir.join("s.csv");
    ok(&[
        "sweep",
        "--model",
        s(&f.dense),
        "--data",
        s(&f.data),
        "-o",
        s(&csv),
        "--cr-grid",
        "0.5",
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "kind,cr,calib_samples,hr@10,ndcg@10,params_ratio,error"
    );
    assert!(lines[1].starts_with("reference,"));
    let row: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(row[0], "compressed");

    let j = dir.join("e.json");
    ok(&[
        "eval",
        "--model",
        s(&f.compressed),
        "--data",
        s(&f.data),
        "--ks",
        "10",
        "--json",
        s(&j),
    ]);
    let v: Value = serde_json::from_slice(&fs::read(&j).unwrap()).unwrap();
    let hr = v["metrics"]["per_k"]["10"]["hr"].as_f64().unwrap();
    let ndcg = v["metrics"]["per_k"]["10"]["ndcg"].as_f64().unwrap();
    assert_eq!(row[3], format!("{hr:.6}"));
    assert_eq!(row[4], format!("{ndcg:.6}"));
}

#[test]
fn calibration_sweep_is_deterministic() {
    let f = fixture();
    let dir = scratch("sweep2");
    let (a, b) = (dir.join("a.csv"), dir.join("b.csv"));
    for p in [&a, &b] {
        ok(&[
            "sweep",
            "--model",
            s(&f.dense),
            "--data",
            s(&f.data),
            "-o",
            s(p),
            "--axis",
            "calib",
            "--calib-grid",
            "16,64",
            "--no-update",
        ]);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn compress_is_byte_reproducible() {
    let f = fixture();
    let dir = scratch("repro");
    let (a, b) = (dir.join("a.odlm"), dir.join("b.odlm"));
    for p in [&a, &b] {
        ok(&[
            "compress",
            "--model",
            s(&f.dense),
            "--data",
            s(&f.data),
            "-o",
            s(p),
            "--cr",
            "0.3",
            "--seed",
            "5",
            "--calib-samples",
            "64",
        ]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ra = json_without(&dir.join("a.odlm.report.json"), &["timings"]);
    let rb = json_without(&dir.join("b.odlm.report.json"), &["timings"]);
    assert_eq!(ra, rb);
    let ta = dir.join("t1.odlm");
    let tb = dir.join("t2.odlm");
    for p in [&ta, &tb] {
        ok(&[
            "train",
            "--data",
            s(&f.data),
            "-o",
            s(p),
            "--epochs",
            "1",
            "--seed",
            "3",
        ]);
    }
    assert_eq!(fs::read(&ta).unwrap(), fs::read(&tb).unwrap());
}
