use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use ptq_core::cost::{self, AceOptions, BertConfig, WeightBits};
use ptq_core::store::{read_archive_file, write_archive, Archive, TensorRecord};

fn write_archive_file(path: &str, a: &Archive) -> std::io::Result<()> {
    std::fs::write(path, write_archive(a).unwrap())
}

fn ptq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptq")).args(args).output().unwrap()
}

fn ptq_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptq")).args(args).env(key, val).output().unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_model(dir: &Path) -> String {
    let w: Vec<f32> = (0..64 * 32).map(|i| ((i * 37 % 101) as f32 - 50.0) / 400.0).collect();
    let a = Archive::new(
        vec![
            TensorRecord::f32("enc.weight", &[64, 32], w).unwrap(),
            TensorRecord::f32("enc.bias", &[32], vec![0.25; 32]).unwrap(),
        ],
        "{}",
    )
    .unwrap();
    let path = p(dir, "small.ptqt");
    write_archive_file(&path, &a).unwrap();
    path
}

fn csv_column(text: &str, col: &str) -> Vec<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == col).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

#[test]
fn inspect_lists_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    let o = ptq(&["inspect", &m]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("enc.weight") && s.contains("enc.bias"));
    assert!(s.contains("[64, 32]"));

    let q = p(dir.path(), "q.ptqt");
    assert_eq!(ptq(&["quantize", &m, &q, "--method", "lq", "--bits", "4", "--min-elements", "0"]).status.code(), Some(0));
    let s = stdout(&ptq(&["inspect", &q]));
    assert!(s.contains("enc.weight.codes"));
    assert!(s.contains("quantized archive, method lq, 4 bits"), "{s}");
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ptq(&["inspect", &p(dir.path(), "absent.ptqt")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    let q = p(dir.path(), "q.ptqt");
    assert_eq!(ptq(&["quantize", &m, &q, "--method", "lq", "--bits", "9"]).status.code(), Some(1));
    assert_eq!(ptq(&["quantize", &m, &q, "--method", "fancy", "--bits", "4"]).status.code(), Some(1));
    assert_eq!(ptq(&["ace", "--config", "huge"]).status.code(), Some(1));
    assert_eq!(ptq(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ptq(&["--help"]).status.code(), Some(0));
    assert!(!Path::new(&q).exists());
}

#[test]
fn quantize_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    for method in ["lq", "aciq", "ocs_naive", "ocs_qa"] {
        let a = p(dir.path(), "a.ptqt");
        let b = p(dir.path(), "b.ptqt");
        for out in [&a, &b] {
            let o = ptq(&["quantize", &m, out, "--method", method, "--bits", "8", "--min-elements", "0"]);
            assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        }
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "{method}");
    }
}

#[test]
fn skip_flag_replaces_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    let q = p(dir.path(), "q.ptqt");
    let r = p(dir.path(), "r.csv");
    let o = ptq(&["quantize", &m, &q, "--method", "lq", "--bits", "4", "--min-elements", "0", "--skip", "enc.*", "--report", &r]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&r).unwrap();
    assert!(csv_column(&text, "status").iter().all(|s| s == "skipped"), "{text}");
    let back = read_archive_file(&q).unwrap();
    assert!(back.records.iter().all(|r| !r.name.ends_with(".codes")));
}

#[test]
fn dequantize_restores_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    let q = p(dir.path(), "q.ptqt");
    let d = p(dir.path(), "d.ptqt");
    assert_eq!(ptq(&["quantize", &m, &q, "--method", "ocs_qa", "--bits", "6", "--min-elements", "0"]).status.code(), Some(0));
    assert_eq!(ptq(&["dequantize", &q, &d]).status.code(), Some(0));
    let orig = read_archive_file(&m).unwrap();
    let back = read_archive_file(&d).unwrap();
    for r in &orig.records {
        assert_eq!(back.get(&r.name).unwrap().shape, r.shape);
    }
    assert_eq!(back.metadata, orig.metadata);
}

#[test]
fn compare_self_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    let csv = p(dir.path(), "c.csv");
    let o = ptq(&["compare", &m, &m, "--out", &csv]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_column(&text, "mse").iter().all(|v| v.parse::<f64>().unwrap() == 0.0));
    assert!(csv_column(&text, "sqnr_db").iter().all(|v| v == "inf"));
}

#[test]
fn compare_fewer_bits_larger_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    let mse = |k: &str| {
        let q = p(dir.path(), &format!("q{k}.ptqt"));
        let d = p(dir.path(), &format!("d{k}.ptqt"));
        let c = p(dir.path(), &format!("c{k}.csv"));
        assert_eq!(ptq(&["quantize", &m, &q, "--method", "lq", "--bits", k, "--min-elements", "0"]).status.code(), Some(0));
        assert_eq!(ptq(&["dequantize", &q, &d]).status.code(), Some(0));
        assert_eq!(ptq(&["compare", &m, &d, "--out", &c]).status.code(), Some(0));
        let text = std::fs::read_to_string(&c).unwrap();
        csv_column(&text, "mse").iter().map(|v| v.parse::<f64>().unwrap()).sum::<f64>()
    };
    assert!(mse("3") > mse("8"));
}

#[test]
fn compare_shape_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    let other = p(dir.path(), "other.ptqt");
    let a = Archive::new(vec![TensorRecord::f32("enc.weight", &[32, 64], vec![0.0; 2048]).unwrap()], "").unwrap();
    write_archive_file(&other, &a).unwrap();
    let csv = p(dir.path(), "c.csv");
    let o = ptq(&["compare", &m, &other, "--out", &csv]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(&csv).exists());
}

#[test]
fn ace_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let csv = p(dir.path(), "ace.csv");
    let o = ptq(&["ace", "--config", "base", "--weight-bits", "3,32", "--out", &csv]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let ace: Vec<u128> = csv_column(&text, "ace").iter().map(|v| v.parse().unwrap()).collect();
    let m = cost::gen_bert_manifest(BertConfig::Base);
    let opts = AceOptions { act_bits: 32, seq_len: 128, include_attention_products: false };
    assert_eq!(ace[0], cost::ace(&m, &WeightBits::Quantized(3), opts).unwrap().ace_total);
    assert_eq!(ace[1], cost::ace(&m, &WeightBits::Uniform(32), opts).unwrap().ace_total);
    assert!(ace[0] < ace[1]);
    let size = cost::model_size(&m, 3, 0.0, &BTreeSet::new()).unwrap().total_bits;
    let got: f64 = csv_column(&text, "size_bits")[0].parse().unwrap();
    assert!((got - size).abs() <= 1e-9 * size);
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "s.csv");
    let trend = p(dir.path(), "t.json");
    let o = ptq(&["sweep", "--seeds", "1", "--bits", "4,3,2", "--out", &out, "--trend", &trend]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 3);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&trend).unwrap()).unwrap();
    assert_eq!(v["vacuous"], false);
}

#[test]
fn malformed_spec_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = p(dir.path(), "spec.json");
    std::fs::write(&spec, "{ not json").unwrap();
    let out = p(dir.path(), "s.csv");
    let o = ptq(&["sweep", "--spec", &spec, "--seeds", "1", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(&out).exists());
    let o = ptq(&["generate", &p(dir.path(), "g.ptqt"), "--spec", &spec]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    assert_eq!(ptq_env(&["inspect", &m], "PTQ_THREADS", "zero").status.code(), Some(1));
    assert_eq!(ptq_env(&["inspect", &m], "PTQ_THREADS", "2").status.code(), Some(0));
}

#[test]
fn failed_write_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    let q = p(dir.path(), "missing_dir/q.ptqt");
    let o = ptq(&["quantize", &m, &q, "--method", "lq", "--bits", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(&q).exists());
    let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(leftovers, 1);
}
