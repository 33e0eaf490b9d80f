//! Scores candidate captions against references.
//!
//! cargo run --release --example caption_metrics -- "candidate" "reference one" ["reference two" ...]
//!
//! Without arguments a small built-in corpus is scored.

use std::collections::BTreeMap;

use aescap::metrics::{evaluate_corpus, EvalConfig, CSV_COLUMNS};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let corpus: Vec<(&str, Vec<String>)> = if args.len() >= 2 {
        vec![(args[0].as_str(), args[1..].to_vec())]
    } else {
        vec![
            (
                "warm tones and soft light on a centered circle .",
                vec![
                    "warm tones and soft light on the centered circle .".into(),
                    "a centered circle glows in warm light".into(),
                ],
            ),
            (
                "cool colors , the square sits off center .",
                vec!["the square sits off center in cool colors .".into()],
            ),
            ("the the the", vec!["the cat".into()]),
        ]
    };
    let candidates: Vec<(String, String)> = corpus
        .iter()
        .enumerate()
        .map(|(i, (c, _))| (format!("img{i}"), c.to_string()))
        .collect();
    let references: BTreeMap<String, Vec<String>> = corpus
        .into_iter()
        .enumerate()
        .map(|(i, (_, r))| (format!("img{i}"), r))
        .collect();
    let report = evaluate_corpus(&candidates, &references, &EvalConfig::default())?;
    print!("{}", report.to_csv());
    println!("\ncolumns: {}", CSV_COLUMNS.join(" | "));
    for note in &report.notes {
        println!("- {note}");
    }
    Ok(())
}
