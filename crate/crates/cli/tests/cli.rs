use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BLOBS: &str = "\
input 8
fc 32
bn
relu
fc 4
hinge
train lr=0.01 decay=none momentum=0.9 wd=1e-4 batch=20 epochs=6 seed=3 mode=ternary
data blobs classes=4 train=40 val=20 test=30 dims=8 separation=6
";

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("{e}: {}\n{}", self.stdout, self.stderr))
    }

    fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stderr: {}", self.stderr);
        self
    }
}

fn twn(out: &Path, args: &[&str]) -> Run {
    let Output { status, stdout, stderr } = Command::new(env!("CARGO_BIN_EXE_twn"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("TWN_MNIST_DIR")
        .output()
        .unwrap();
    Run {
        code: status.code().unwrap(),
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn train(tmp: &Path, mode: &str) -> (PathBuf, Value) {
    let cfg = write(tmp, "blobs.cfg", BLOBS);
    let out = tmp.join(format!("train-{mode}"));
    let v = twn(&out, &["train", s(&cfg), "--mode", mode]).ok().json();
    (out, v)
}

#[test]
fn train_smoke_writes_reports_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, v) = train(tmp.path(), "full");
    assert_eq!(v["network"], "FPWN");
    assert!(v["test_acc"].as_f64().unwrap() > 0.9);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,loss,val_acc,lr"));
    assert_eq!(csv.lines().count(), 1 + 6);
    let m = manifest(&out);
    assert_eq!(m["subcommand"], "train");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["text"], BLOBS);
    let names: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
    for f in ["model.twn", "report.json", "report.csv", "result.json"] {
        assert!(names.contains(&f), "{names:?}");
    }
}

#[test]
fn training_reruns_reproduce_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "blobs.cfg", BLOBS);
    let hashes = |dir: &Path| -> Vec<(String, String)> {
        manifest(dir)["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|o| o["volatile"] == false)
            .map(|o| (o["path"].as_str().unwrap().into(), o["sha256"].as_str().unwrap().into()))
            .collect()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    twn(&a, &["train", s(&cfg)]).ok();
    twn(&b, &["train", s(&cfg)]).ok();
    let ha = hashes(&a);
    assert!(ha.iter().any(|(p, _)| p == "model.twn") && ha.iter().any(|(p, _)| p == "report.csv"));
    assert_eq!(ha, hashes(&b));
}

#[test]
fn bad_config_line_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.cfg", "input 8\nfc 32\nrelu\nfc 4 mode=quaternary\nhinge\n");
    let r = twn(&tmp.path().join("o"), &["train", s(&cfg)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 4"), "{}", r.stderr);
    let r = twn(&tmp.path().join("o"), &["train", s(&tmp.path().join("missing.cfg"))]);
    assert_eq!(r.code, 2);
    let r = twn(&tmp.path().join("o"), &["train", s(&cfg), "--bogus"]);
    assert_eq!(r.code, 2);
}

#[test]
fn three_modes_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let reports: Vec<String> = ["full", "ternary", "binary"]
        .iter()
        .map(|m| s(&train(tmp.path(), m).0.join("report.json")).to_string())
        .collect();
    let mut args = vec!["compare"];
    args.extend(reports.iter().map(String::as_str));
    let table = twn(&tmp.path().join("c"), &args).ok().stdout;
    let labels: Vec<&str> = table.lines().skip(1).filter_map(|l| l.split_whitespace().next()).collect();
    assert_eq!(&labels[..3], ["FPWN", "TWN", "BPWN"]);
    args.push("--json");
    let v = twn(&tmp.path().join("c"), &args).ok().json();
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    assert!(v["twn_ge_bpwn"].is_boolean());
    assert_eq!(v["basis"], "test");

    let single = twn(&tmp.path().join("c1"), &["compare", &reports[0], "--json"]).ok().json();
    assert_eq!(single["rows"].as_array().unwrap().len(), 1);
    assert_eq!(single["twn_ge_bpwn"], Value::Null);
}

#[test]
fn compare_warns_on_mismatched_data() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, _) = train(tmp.path(), "ternary");
    let report = std::fs::read_to_string(a.join("report.json")).unwrap();
    let other = write(tmp.path(), "other.json", &report.replace("train-seed3", "train-seed4"));
    let v = twn(&tmp.path().join("c"), &["compare", s(&a.join("report.json")), s(&other), "--json"])
        .ok()
        .json();
    let warnings = v["warnings"].as_array().unwrap();
    assert!(warnings.iter().any(|w| w.as_str().unwrap().contains("training data")), "{warnings:?}");
}

#[test]
fn compare_flags_ordering_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, _) = train(tmp.path(), "ternary");
    let text = std::fs::read_to_string(a.join("report.json")).unwrap();
    let mut twn_r: Value = serde_json::from_str(&text).unwrap();
    twn_r["test_acc"] = 0.5.into();
    let mut bpwn_r = twn_r.clone();
    bpwn_r["network"] = "BPWN".into();
    bpwn_r["test_acc"] = 0.6.into();
    let p1 = write(tmp.path(), "t.json", &twn_r.to_string());
    let p2 = write(tmp.path(), "b.json", &bpwn_r.to_string());
    let r = twn(&tmp.path().join("c"), &["compare", s(&p1), s(&p2)]).ok();
    assert!(r.stdout.contains("expected TWN >= BPWN"), "{}", r.stdout);
}

#[test]
fn infer_matches_training_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, v) = train(tmp.path(), "ternary");
    let cfg = tmp.path().join("blobs.cfg");
    let model = out.join("model.twn");
    let mut accs = Vec::new();
    for batch in ["1", "64"] {
        let r = twn(
            &tmp.path().join(format!("infer-{batch}")),
            &["infer", "--model", s(&model), "--config", s(&cfg), "--batch", batch],
        )
        .ok()
        .json();
        accs.push((r["accuracy"].as_f64().unwrap(), r["correct"].as_u64().unwrap()));
    }
    assert_eq!(accs[0], accs[1]);
    assert_eq!(accs[0].0, v["test_acc"].as_f64().unwrap());
    assert_eq!(accs[0].1, v["test_correct"].as_u64().unwrap());

    let r = twn(&tmp.path().join("x"), &["infer", "--model", s(&tmp.path().join("none.twn"))]);
    assert_eq!(r.code, 2);
    let junk = write(tmp.path(), "junk.twn", "not a model");
    let r = twn(&tmp.path().join("x"), &["infer", "--model", s(&junk), "--config", s(&cfg)]);
    assert_eq!(r.code, 2);
}

#[test]
fn infer_without_mnist_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, _) = train(tmp.path(), "full");
    let r = twn(
        &tmp.path().join("x"),
        &["infer", "--model", s(&out.join("model.twn")), "--data", s(tmp.path())],
    );
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("fetch_mnist.sh"), "{}", r.stderr);
}

#[test]
fn ternarize_heuristic_example() {
    let tmp = tempfile::tempdir().unwrap();
    let w = write(tmp.path(), "w.txt", "0.9 -0.1 0.5 -0.6\n");
    let v = twn(&tmp.path().join("t"), &["ternarize", "--in", s(&w), "--method", "heuristic"]).ok().json();
    assert!((v["alpha"].as_f64().unwrap() - 0.666667).abs() < 1e-6);
    assert!((v["delta"].as_f64().unwrap() - 0.3675).abs() < 1e-6);
    assert_eq!(v["codes"], serde_json::json!([1, 0, 1, -1]));
}

#[test]
fn ternarize_exact_matches_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |method: &str| {
        twn(
            &tmp.path().join(method),
            &["ternarize", "--random", "6", "--seed", "1", "--dist", "normal", "--method", method],
        )
        .ok()
        .json()
    };
    let (exact, oracle) = (run("exact"), run("oracle"));
    let (je, jo) = (exact["objective"].as_f64().unwrap(), oracle["objective"].as_f64().unwrap());
    assert!((je - jo).abs() <= 1e-6, "{je} vs {jo}");
    assert_eq!(oracle["delta"], Value::Null);
    assert_eq!(manifest(&tmp.path().join("exact"))["seed"], 1);
}

#[test]
fn oracle_refuses_long_vectors() {
    let tmp = tempfile::tempdir().unwrap();
    let r = twn(tmp.path(), &["ternarize", "--random", "20", "--method", "oracle"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("n <= 16"), "{}", r.stderr);
    let r = twn(tmp.path(), &["ternarize", "--random", "5", "--in", "w.txt"]);
    assert_eq!(r.code, 2);
}

#[test]
fn validate_rules_examples() {
    let tmp = tempfile::tempdir().unwrap();
    for (dist, centre, tol) in [("uniform", 1.0 / 3.0, 0.02), ("normal", 0.6, 0.03)] {
        let v = twn(&tmp.path().join(dist), &["validate-rules", "--dist", dist, "--n", "100000", "--seed", "5"])
            .ok()
            .json();
        let d = v["delta_exact"].as_f64().unwrap();
        assert!((d - centre).abs() <= tol, "{dist}: {d}");
        assert_eq!(v["within_tolerance"], true);
        assert!(v["objective_ratio"].as_f64().unwrap() >= 1.0);
    }
    let r = twn(tmp.path(), &["validate-rules", "--dist", "normal", "--n", "10"]);
    assert_eq!(r.code, 2);
}

#[test]
fn pack_inspect_and_run_a_packed_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "wide.cfg",
        &BLOBS.replace("fc 32", "fc 512").replace("lr=0.01", "lr=0.001").replace("epochs=6", "epochs=2"),
    );
    let full = tmp.path().join("full");
    twn(&full, &["train", s(&cfg), "--mode", "full"]).ok();
    let r = twn(&tmp.path().join("i0"), &["inspect", s(&full.join("model.twn")), "--json"]).ok().json();
    assert_eq!(r["compression"], Value::Null);

    let packed = tmp.path().join("packed");
    let p = twn(&packed, &["pack", "--model", s(&full.join("model.twn")), "--mode", "ternary"]).ok().json();
    assert_eq!(p["converted_layers"], 2);
    let v = twn(&tmp.path().join("i"), &["inspect", s(&packed.join("model.twn")), "--json"]).ok().json();
    let ratio = v["compression"]["ratio"].as_f64().unwrap();
    assert!((15.9..=16.0).contains(&ratio), "{ratio}");
    for layer in v["layers"].as_array().unwrap().iter().filter(|l| l["kind"] == "fc") {
        let z = layer["zero_fraction"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&z));
        assert_eq!(layer["alphas"].as_array().unwrap().len(), 1);
    }
    let text = twn(&tmp.path().join("i"), &["inspect", s(&packed.join("model.twn"))]).ok().stdout;
    assert!(text.contains("packed weights"), "{text}");

    let r = twn(
        &tmp.path().join("inf"),
        &["infer", "--model", s(&packed.join("model.twn")), "--config", s(&cfg)],
    )
    .ok()
    .json();
    assert_eq!(r["network"], "TWN");
    assert!(r["accuracy"].as_f64().unwrap() > 0.5);
}

#[test]
fn bench_counts_one_multiply_per_output() {
    let tmp = tempfile::tempdir().unwrap();
    for batch in [1usize, 3] {
        let sizes = format!("{batch},256,256");
        let v = twn(
            &tmp.path().join(format!("b{batch}")),
            &["bench", "--kernel", "ternary_matmul", "--sizes", &sizes, "--reps", "2"],
        )
        .ok()
        .json();
        let r = &v["results"][0];
        assert_eq!(r["multiply_ops"].as_u64().unwrap(), 256 * batch as u64);
        assert_eq!(r["inner_multiply_ops"], 0);
    }
    let v = twn(&tmp.path().join("all"), &["bench", "--reps", "1"]).ok().json();
    assert_eq!(v["results"].as_array().unwrap().len(), 6);
    let r = twn(tmp.path(), &["bench", "--kernel", "fft"]);
    assert_eq!(r.code, 2);
}
