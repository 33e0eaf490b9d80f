//! Metric values checked against `tests/oracle/expected.json`, produced once by
//! the brute-force reference in `tests/oracle/metrics_oracle.py` and frozen.

use std::collections::BTreeMap;
use std::path::PathBuf;

use aescap::metrics::{evaluate_corpus, oracle_dump, EvalConfig};
use serde_json::Value;

const TOL: f64 = 1e-6;

fn load(name: &str) -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/oracle").join(name);
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn fixture() -> (Vec<(String, String)>, BTreeMap<String, Vec<String>>) {
    let fx = load("fixture.json");
    let mut cands = Vec::new();
    let mut refs = BTreeMap::new();
    for im in fx["images"].as_array().unwrap() {
        let id = im["id"].as_str().unwrap().to_string();
        cands.push((id.clone(), im["candidate"].as_str().unwrap().to_string()));
        let r = im["references"].as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect();
        refs.insert(id, r);
    }
    (cands, refs)
}

fn close(a: f64, b: f64, what: &str) {
    assert!((a - b).abs() <= TOL, "{what}: got {a}, expected {b}");
}

#[test]
fn scores_match_reference_implementation() {
    let (cands, refs) = fixture();
    let report = evaluate_corpus(&cands, &refs, &EvalConfig::default()).unwrap();
    let expected = load("expected.json");
    let expected = expected["images"].as_array().unwrap();
    assert_eq!(report.images.len(), expected.len());
    for (got, want) in report.images.iter().zip(expected) {
        let id = want["id"].as_str().unwrap();
        assert_eq!(got.image, id);
        let b: Vec<f64> = want["bleu"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let s = &got.scores;
        for (n, (g, w)) in [s.b1, s.b2, s.b3, s.b4].iter().zip(&b).enumerate() {
            close(*g, *w, &format!("{id} BLEU-{}", n + 1));
        }
        close(s.rouge_l, want["rouge_l"].as_f64().unwrap(), &format!("{id} ROUGE-L"));
        close(s.meteor, want["meteor"].as_f64().unwrap(), &format!("{id} METEOR"));
        close(s.cider, want["cider"].as_f64().unwrap(), &format!("{id} CIDEr"));
    }
}

#[test]
fn corpus_mean_is_mean_of_images() {
    let (cands, refs) = fixture();
    let report = evaluate_corpus(&cands, &refs, &EvalConfig::default()).unwrap();
    let n = report.images.len() as f64;
    let cider: f64 = report.images.iter().map(|i| i.scores.cider).sum::<f64>() / n;
    close(report.mean.cider, cider, "mean CIDEr");
}

#[test]
fn dump_exposes_clipped_counts() {
    let (cands, refs) = fixture();
    let dump = oracle_dump(&cands, &refs).unwrap();
    let img1 = &dump["images"][1];
    assert_eq!(img1["image"], "img1");
    // only "cool" and "square" appear in a reference; the repeated "the" earns nothing.
    let uni = &img1["orders"][0];
    assert_eq!(uni["total"], 5);
    assert_eq!(uni["clipped"], 2);
}
