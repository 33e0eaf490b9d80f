//! Caption metrics: BLEU-1..4, ROUGE-L, METEOR (exact matches only), CIDEr,
//! and max-over-references precision/recall over content words.
//!
//! All functions take pre-tokenized text (see [`crate::text::tokenize`]).
//! Corpus figures are means of per-image scores.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub type Gram = Vec<String>;
pub type NGramCounts = BTreeMap<Gram, usize>;

pub const MAX_ORDER: usize = 4;

pub fn ngrams(tokens: &[String], n: usize) -> NGramCounts {
    let mut out = NGramCounts::new();
    if n == 0 {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

/// Clipped n-gram matches and the candidate's n-gram total for one order.
pub fn clipped_counts(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let mut max_ref: HashMap<&Gram, usize> = HashMap::new();
    let ref_counts: Vec<NGramCounts> = references.iter().map(|r| ngrams(r, n)).collect();
    for counts in &ref_counts {
        for (g, &c) in counts {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let clipped = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Cumulative BLEU-n without smoothing.
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_order: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() || max_order == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let (clipped, total) = clipped_counts(candidate, references, n);
        if clipped == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = candidate.len() as f64;
    let r = closest_ref_len(candidate.len(), references) as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / max_order as f64).exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_single(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// LCS F1, best reference.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    max_over_references(rouge_l_single, candidate, references)
}

/// Matches and chunks of the exact-match alignment with the most matches
/// and, among those, the fewest chunks.
pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> (usize, usize) {
    if candidate.len() > 128 || reference.len() > 128 {
        return greedy_alignment(candidate, reference);
    }
    let mut memo = HashMap::new();
    let (m, neg_chunks) = align(candidate, reference, 0, 0, None, &mut memo);
    (m, (-neg_chunks) as usize)
}

type AlignKey = (usize, u128, Option<usize>);

/// Best `(matches, -chunks)` for candidate positions `i..`, given the
/// reference positions already used and where the previous token matched.
fn align(
    cand: &[String],
    refs: &[String],
    i: usize,
    used: u128,
    prev: Option<usize>,
    memo: &mut HashMap<AlignKey, (usize, i64)>,
) -> (usize, i64) {
    if i == cand.len() {
        return (0, 0);
    }
    if let Some(&v) = memo.get(&(i, used, prev)) {
        return v;
    }
    let mut best = align(cand, refs, i + 1, used, None, memo);
    for (j, r) in refs.iter().enumerate() {
        if r != &cand[i] || used & (1u128 << j) != 0 {
            continue;
        }
        let (m, c) = align(cand, refs, i + 1, used | (1u128 << j), Some(j), memo);
        let starts_chunk = !(j > 0 && prev == Some(j - 1));
        let option = (m + 1, c - i64::from(starts_chunk));
        if option > best {
            best = option;
        }
    }
    memo.insert((i, used, prev), best);
    best
}

fn greedy_alignment(candidate: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let (mut matches, mut chunks, mut prev) = (0, 0, None);
    for tok in candidate {
        let pick = prev
            .map(|p: usize| p + 1)
            .filter(|&j| j < reference.len() && !used[j] && &reference[j] == tok)
            .or_else(|| (0..reference.len()).find(|&j| !used[j] && &reference[j] == tok));
        match pick {
            Some(j) => {
                if j == 0 || prev != Some(j - 1) {
                    chunks += 1;
                }
                used[j] = true;
                matches += 1;
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    (matches, chunks)
}

fn meteor_single(candidate: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = meteor_alignment(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

pub fn meteor_exact(candidate: &[String], references: &[Vec<String>]) -> f64 {
    max_over_references(meteor_single, candidate, references)
}

/// Best pairwise score over the references; 0 without references.
pub fn max_over_references<F>(scorer: F, candidate: &[String], references: &[Vec<String>]) -> f64
where
    F: Fn(&[String], &[String]) -> f64,
{
    references
        .iter()
        .map(|r| scorer(candidate, r))
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        .unwrap_or(0.0)
}

/// Document frequencies of n-grams over per-image reference sets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdfTable {
    pub num_images: usize,
    /// One map per order `1..=4`.
    pub df: Vec<BTreeMap<Gram, usize>>,
}

impl IdfTable {
    pub fn build(references: &[Vec<Vec<String>>]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::contract("CIDEr needs a non-empty corpus"));
        }
        let mut df = vec![BTreeMap::new(); MAX_ORDER];
        for refs in references {
            for (n, table) in df.iter_mut().enumerate() {
                let mut seen: Vec<Gram> = refs.iter().flat_map(|r| ngrams(r, n + 1).into_keys()).collect();
                seen.sort();
                seen.dedup();
                for g in seen {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        Ok(IdfTable {
            num_images: references.len(),
            df,
        })
    }

    /// `ln(|I| / df)`; grams absent from every reference set count as df = 1.
    pub fn idf(&self, n: usize, gram: &Gram) -> f64 {
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0).max(1);
        (self.num_images as f64 / df as f64).ln()
    }

    fn vector(&self, tokens: &[String], n: usize) -> BTreeMap<Gram, f64> {
        ngrams(tokens, n)
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 * self.idf(n, &g);
                (g, w)
            })
            .collect()
    }
}

fn cosine(a: &BTreeMap<Gram, f64>, b: &BTreeMap<Gram, f64>) -> f64 {
    let norm = |v: &BTreeMap<Gram, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

/// CIDEr of one image against a corpus-level idf table.
pub fn cider_single(idf: &IdfTable, candidate: &[String], references: &[Vec<String>]) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=MAX_ORDER {
        let c = idf.vector(candidate, n);
        let sum: f64 = references.iter().map(|r| cosine(&c, &idf.vector(r, n))).sum();
        total += sum / references.len() as f64;
    }
    10.0 * total / MAX_ORDER as f64
}

/// Per-image CIDEr over a corpus of `(candidate, references)`.
pub fn cider(corpus: &[(Vec<String>, Vec<Vec<String>>)]) -> Result<Vec<f64>> {
    let refs: Vec<Vec<Vec<String>>> = corpus.iter().map(|(_, r)| r.clone()).collect();
    let idf = IdfTable::build(&refs)?;
    Ok(corpus.iter().map(|(c, r)| cider_single(&idf, c, r)).collect())
}

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "in", "on", "at", "to", "with", "is", "are", "was", "were", "be",
    "this", "that", "it", "its", "for", "from", "by", "as", "very", "there",
];

fn content<'a>(tokens: &'a [String], stopwords: &[String]) -> Vec<&'a str> {
    tokens
        .iter()
        .filter(|t| t.chars().any(char::is_alphanumeric) && !stopwords.iter().any(|s| s == *t))
        .map(String::as_str)
        .collect()
}

/// Content-word multiset precision and recall.
pub fn unigram_pre_re(candidate: &[String], reference: &[String], stopwords: &[String]) -> (f64, f64) {
    let c = content(candidate, stopwords);
    let r = content(reference, stopwords);
    let mut pool: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *pool.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in &c {
        if let Some(n) = pool.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    let p = if c.is_empty() { 0.0 } else { overlap as f64 / c.len() as f64 };
    let rc = if r.is_empty() { 0.0 } else { overlap as f64 / r.len() as f64 };
    (p, rc)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub dataset: String,
    pub mode: String,
    pub stopwords: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dataset: "dataset".into(),
            mode: "unspecified".into(),
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub precision: f64,
    pub recall: f64,
    pub spice_l_proxy: f64,
}

impl Scores {
    fn as_array(&self) -> [f64; 10] {
        [
            self.b1,
            self.b2,
            self.b3,
            self.b4,
            self.meteor,
            self.rouge_l,
            self.cider,
            self.precision,
            self.recall,
            self.spice_l_proxy,
        ]
    }

    fn from_array(a: [f64; 10]) -> Self {
        Scores {
            b1: a[0],
            b2: a[1],
            b3: a[2],
            b4: a[3],
            meteor: a[4],
            rouge_l: a[5],
            cider: a[6],
            precision: a[7],
            recall: a[8],
            spice_l_proxy: a[9],
        }
    }
}

pub const CSV_COLUMNS: [&str; 10] = ["B1", "B2", "B3", "B4", "M (exact)", "R", "C", "Pre", "Re", "S-L (proxy)"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image: String,
    pub candidate: String,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: String,
    pub images: Vec<ImageScores>,
    pub mean: Scores,
    /// Candidates without references, left out of every figure.
    pub skipped: Vec<String>,
    pub notes: Vec<String>,
}

/// One candidate and its references, tokenized.
#[derive(Clone, Debug)]
struct Item {
    image: String,
    candidate_text: String,
    candidate: Vec<String>,
    references: Vec<Vec<String>>,
}

fn collect_items(
    candidates: &[(String, String)],
    references: &BTreeMap<String, Vec<String>>,
) -> Result<(Vec<Item>, Vec<String>)> {
    if candidates.is_empty() {
        return Err(Error::contract("no candidates to evaluate"));
    }
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for (image, caption) in candidates {
        match references.get(image).filter(|r| !r.is_empty()) {
            Some(refs) => items.push(Item {
                image: image.clone(),
                candidate_text: caption.clone(),
                candidate: tokenize(caption),
                references: refs.iter().map(|r| tokenize(r)).collect(),
            }),
            None => skipped.push(image.clone()),
        }
    }
    if items.is_empty() {
        return Err(Error::contract("no candidate has references"));
    }
    Ok((items, skipped))
}

/// Scores every candidate against its image's references.
///
/// `candidates` pairs an image id with a caption; `references` maps image
/// ids to reference captions.
pub fn evaluate_corpus(
    candidates: &[(String, String)],
    references: &BTreeMap<String, Vec<String>>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let (items, skipped) = collect_items(candidates, references)?;
    let refs: Vec<Vec<Vec<String>>> = items.iter().map(|i| i.references.clone()).collect();
    let idf = IdfTable::build(&refs)?;
    let stop = &config.stopwords;
    let images: Vec<ImageScores> = items
        .par_iter()
        .map(|it| {
            let (c, r) = (&it.candidate, &it.references);
            let pre = max_over_references(|a, b| unigram_pre_re(a, b, stop).0, c, r);
            let re = max_over_references(|a, b| unigram_pre_re(a, b, stop).1, c, r);
            let sl = max_over_references(
                |a, b| {
                    let (p, rr) = unigram_pre_re(a, b, stop);
                    f1(p, rr)
                },
                c,
                r,
            );
            ImageScores {
                image: it.image.clone(),
                candidate: it.candidate_text.clone(),
                scores: Scores {
                    b1: bleu(c, r, 1),
                    b2: bleu(c, r, 2),
                    b3: bleu(c, r, 3),
                    b4: bleu(c, r, 4),
                    meteor: meteor_exact(c, r),
                    rouge_l: rouge_l(c, r),
                    cider: cider_single(&idf, c, r),
                    precision: pre,
                    recall: re,
                    spice_l_proxy: sl,
                },
            }
        })
        .collect();
    let mut sums = [0.0; 10];
    for im in &images {
        for (s, v) in sums.iter_mut().zip(im.scores.as_array()) {
            *s += v;
        }
    }
    let n = images.len() as f64;
    let mean = Scores::from_array(sums.map(|s| s / n));
    Ok(EvalReport {
        dataset: config.dataset.clone(),
        mode: config.mode.clone(),
        images,
        mean,
        skipped,
        notes: vec![
            "BLEU is cumulative (geometric mean of 1..n clipped precisions), no smoothing".into(),
            "M (exact): METEOR exact-match stage only".into(),
            "Pre/Re/S-L (proxy): max over references of content-word precision, recall and F1".into(),
            "corpus values are means of per-image scores".into(),
        ],
    })
}

impl EvalReport {
    /// Table-style CSV: one row per image, then the mean.
    pub fn to_csv(&self) -> String {
        let mut out = format!("image,{}\n", CSV_COLUMNS.join(","));
        let row = |name: &str, s: &Scores| {
            let vals: Vec<String> = s.as_array().iter().map(|v| format!("{v:.6}")).collect();
            format!("{},{}\n", csv_field(name), vals.join(","))
        };
        for im in &self.images {
            out.push_str(&row(&im.image, &im.scores));
        }
        out.push_str(&row("mean", &self.mean));
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Intermediate counts behind the n-gram metrics, for cross-checking.
pub fn oracle_dump(
    candidates: &[(String, String)],
    references: &BTreeMap<String, Vec<String>>,
) -> Result<serde_json::Value> {
    let (items, _) = collect_items(candidates, references)?;
    let refs: Vec<Vec<Vec<String>>> = items.iter().map(|i| i.references.clone()).collect();
    let idf = IdfTable::build(&refs)?;
    let key = |g: &Gram| g.join(" ");
    let images: Vec<serde_json::Value> = items
        .iter()
        .map(|it| {
            let orders: Vec<serde_json::Value> = (1..=MAX_ORDER)
                .map(|n| {
                    let (clipped, total) = clipped_counts(&it.candidate, &it.references, n);
                    let counts: BTreeMap<String, usize> =
                        ngrams(&it.candidate, n).iter().map(|(g, &c)| (key(g), c)).collect();
                    serde_json::json!({ "n": n, "candidate_counts": counts, "clipped": clipped, "total": total })
                })
                .collect();
            serde_json::json!({
                "image": it.image,
                "candidate_tokens": it.candidate,
                "reference_tokens": it.references,
                "closest_ref_len": closest_ref_len(it.candidate.len(), &it.references),
                "lcs": it.references.iter().map(|r| lcs_len(&it.candidate, r)).collect::<Vec<_>>(),
                "orders": orders,
            })
        })
        .collect();
    let df: Vec<BTreeMap<String, usize>> = idf
        .df
        .iter()
        .map(|t| t.iter().map(|(g, &c)| (key(g), c)).collect())
        .collect();
    Ok(serde_json::json!({ "num_images": idf.num_images, "document_frequency": df, "images": images }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn refs(v: &[&str]) -> Vec<Vec<String>> {
        v.iter().map(|s| toks(s)).collect()
    }

    fn stop() -> Vec<String> {
        EvalConfig::default().stopwords
    }

    #[test]
    fn bleu_identity_and_clipping() {
        let c = toks("the cat sat on the mat");
        for n in 1..=4 {
            assert_eq!(bleu(&c, &[c.clone()], n), 1.0);
        }
        let b1 = bleu(&toks("the the the"), &refs(&["the cat"]), 1);
        assert!((b1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu(&toks("dog runs"), &refs(&["the cat"]), 1), 0.0);
        assert_eq!(bleu(&[], &refs(&["the cat"]), 1), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty_uses_closest_reference() {
        // c = 2, refs of length 3 and 6: r = 3
        let b = bleu(&toks("a b"), &refs(&["a b c", "a b c d e f"]), 1);
        assert!((b - (1.0f64 - 1.5).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_cases() {
        let c = toks("a b c d");
        assert_eq!(rouge_l(&c, &[c.clone()]), 1.0);
        assert_eq!(rouge_l(&c, &refs(&["x y"])), 0.0);
        assert!((rouge_l(&c, &refs(&["a c d"])) - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn meteor_cases() {
        assert_eq!(meteor_exact(&toks("a b"), &refs(&["c d"])), 0.0);
        for m in 1..6usize {
            let s: Vec<String> = (0..m).map(|i| format!("w{i}")).collect();
            let expect = 1.0 - 0.5 / (m as f64).powi(3);
            assert!((meteor_exact(&s, &[s.clone()]) - expect).abs() < 1e-12);
        }
        let v = meteor_exact(&toks("a b c d"), &refs(&["a x y z"]));
        assert!((v - 0.125).abs() < 1e-12);
    }

    #[test]
    fn meteor_prefers_fewer_chunks() {
        // "the" can align to either occurrence; the second keeps one chunk
        let (m, ch) = meteor_alignment(&toks("the cat"), &toks("the dog the cat"));
        assert_eq!((m, ch), (2, 1));
    }

    #[test]
    fn cider_cases() {
        let one = vec![(toks("a red ball"), refs(&["a red ball"]))];
        assert_eq!(cider(&one).unwrap(), vec![0.0]);
        let two = vec![
            (toks("x y z"), refs(&["a red ball"])),
            (toks("blue sky"), refs(&["blue sky"])),
        ];
        assert_eq!(cider(&two).unwrap()[0], 0.0);
        assert!(cider(&[]).is_err());
    }

    #[test]
    fn max_over_references_cases() {
        let c = toks("great colors");
        let r = refs(&["dull shot", "great colors", "bad light"]);
        let pre = |a: &[String], b: &[String]| unigram_pre_re(a, b, &stop()).0;
        assert_eq!(max_over_references(pre, &c, &r), 1.0);
        assert_eq!(max_over_references(pre, &c, &r[..1]), pre(&c, &r[0]));
        assert_eq!(max_over_references(|_, _| 0.5, &c, &r), 0.5);
        assert_eq!(max_over_references(|_, _| 0.5, &c, &r[..1]), 0.5);
    }

    #[test]
    fn unigram_cases() {
        let s = stop();
        let c = toks("great colors in this image");
        assert_eq!(unigram_pre_re(&c, &c, &s), (1.0, 1.0));
        let (p, r) = unigram_pre_re(&toks("great colors"), &toks("great colors and soft light"), &s);
        assert_eq!(p, 1.0);
        assert!(r < 1.0);
        let (p, r) = unigram_pre_re(&toks("great colors."), &toks("a great shot with composition"), &s);
        assert!((p - 0.5).abs() < 1e-12 && (r - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(unigram_pre_re(&toks("the a"), &toks("great"), &s), (0.0, 0.0));
    }

    fn corpus() -> (Vec<(String, String)>, BTreeMap<String, Vec<String>>) {
        let refs: BTreeMap<String, Vec<String>> = [
            ("i0", vec!["warm tones and a centered circle.", "a soft warm glow"]),
            ("i1", vec!["cool light on a square, off center.", "moody low-key scene"]),
            ("i2", vec!["bright and airy palette"]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.into_iter().map(String::from).collect()))
        .collect();
        let cands = refs.iter().map(|(k, v)| (k.clone(), v[0].clone())).collect();
        (cands, refs)
    }

    #[test]
    fn identity_corpus() {
        let (cands, refs) = corpus();
        let rep = evaluate_corpus(&cands, &refs, &EvalConfig::default()).unwrap();
        let m = &rep.mean;
        for v in [m.b1, m.b2, m.b3, m.b4, m.rouge_l, m.precision, m.recall] {
            assert_eq!(v, 1.0);
        }
        assert!(m.cider >= 0.0);
        assert!(rep.to_csv().lines().count() == 5);
    }

    #[test]
    fn missing_references_are_skipped() {
        let (mut cands, refs) = corpus();
        cands.push(("ghost".into(), "anything".into()));
        let rep = evaluate_corpus(&cands, &refs, &EvalConfig::default()).unwrap();
        assert_eq!(rep.skipped, vec!["ghost".to_string()]);
        assert_eq!(rep.images.len(), 3);
        assert!(evaluate_corpus(&[], &refs, &EvalConfig::default()).is_err());
    }

    #[test]
    fn evaluation_is_pure() {
        let (mut cands, refs) = corpus();
        cands[1].1 = "a cool square".into();
        let a = evaluate_corpus(&cands, &refs, &EvalConfig::default()).unwrap();
        let b = evaluate_corpus(&cands, &refs, &EvalConfig::default()).unwrap();
        assert_eq!(a, b);
        let dump = oracle_dump(&cands, &refs).unwrap();
        assert_eq!(dump["num_images"], 3);
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["a", "b", "c", "d", "e", "the", "."]).prop_map(String::from)
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(word(), 1..8)
    }

    proptest! {
        #[test]
        fn bounded_scores(c in sentence(), r in prop::collection::vec(sentence(), 1..4)) {
            for v in [bleu(&c, &r, 1), bleu(&c, &r, 4), rouge_l(&c, &r), meteor_exact(&c, &r)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let (p, rr) = unigram_pre_re(&c, &r[0], &stop());
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&rr));
        }

        #[test]
        fn lcs_is_symmetric(a in sentence(), b in sentence()) {
            prop_assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
        }

        #[test]
        fn repeating_a_token_never_exceeds_reference_count(t in word(), r in sentence(), k in 1usize..8) {
            let cand = vec![t.clone(); k];
            let in_ref = r.iter().filter(|x| **x == t).count();
            let (clipped, total) = clipped_counts(&cand, std::slice::from_ref(&r), 1);
            prop_assert_eq!(clipped, k.min(in_ref));
            prop_assert_eq!(total, k);
        }

        #[test]
        fn adding_a_reference_never_lowers_the_max(
            c in sentence(), r in prop::collection::vec(sentence(), 1..4), extra in sentence(),
        ) {
            let mut more = r.clone();
            more.push(extra);
            let s = stop();
            let pre = |a: &[String], b: &[String]| unigram_pre_re(a, b, &s).0;
            prop_assert!(max_over_references(pre, &c, &more) >= max_over_references(pre, &c, &r));
            prop_assert!(max_over_references(rouge_l_single, &c, &more) >= max_over_references(rouge_l_single, &c, &r));
        }
    }
}
