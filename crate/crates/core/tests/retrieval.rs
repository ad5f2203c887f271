use std::collections::BTreeMap;

use proptest::prelude::*;

use covsel::retrieval::{
    cosine, ls_tfidf_vectors, random_scores, smoothed_idf, tokenize_utterance, Bm25Index, Bm25Params, LsTfidfVector,
};

fn toy() -> Bm25Index {
    let docs = [("d1", vec!["a", "b"]), ("d2", vec!["a"]), ("d3", vec!["c"])];
    Bm25Index::build(docs.into_iter().map(|(id, t)| (id.to_string(), t)), Bm25Params::default())
}

// Hand computation, k1 = 1.2, b = 0.75, N = 3, avgdl = 4/3.
// Length norms: d1 = 0.25 + 0.75 * 1.5 = 1.375, d2 = d3 = 0.25 + 0.75 * 0.75 = 0.8125.
// Single-occurrence tf factor 2.2 / (1 + 1.2 * norm): d1 = 2.2 / 2.65, d2 = d3 = 2.2 / 1.975.
// idf(a) = ln(1.5 / 2.5 + 1) = ln 1.6, idf(c) = ln(2.5 / 1.5 + 1) = ln(8/3).
const TF_LONG: f64 = 2.2 / 2.65;
const TF_SHORT: f64 = 2.2 / 1.975;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn ranked(index: &Bm25Index, query: &[&str]) -> Vec<(String, f64)> {
    index.bm25_score(query)
}

#[test]
fn bm25_toy_query_c() {
    let r = ranked(&toy(), &["c"]);
    assert_eq!(r[0].0, "d3");
    assert!(close(r[0].1, (8.0f64 / 3.0).ln() * TF_SHORT));
    assert_eq!(r[1], ("d1".to_string(), 0.0));
    assert_eq!(r[2], ("d2".to_string(), 0.0));
}

#[test]
fn bm25_toy_query_a() {
    let r = ranked(&toy(), &["a"]);
    let idf = 1.6f64.ln();
    assert_eq!(r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["d2", "d1", "d3"]);
    assert!(close(r[0].1, idf * TF_SHORT));
    assert!(close(r[1].1, idf * TF_LONG));
    assert_eq!(r[2].1, 0.0);
}

#[test]
fn bm25_toy_query_a_c() {
    let r = ranked(&toy(), &["a", "c"]);
    let d3 = (8.0f64 / 3.0).ln() * TF_SHORT;
    let d2 = 1.6f64.ln() * TF_SHORT;
    let d1 = 1.6f64.ln() * TF_LONG;
    assert_eq!(r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["d3", "d2", "d1"]);
    assert!(close(r[0].1, d3));
    assert!(close(r[1].1, d2));
    assert!(close(r[2].1, d1));
}

#[test]
fn bm25_empty_query_and_empty_index() {
    assert!(toy().score_all(&[] as &[&str]).iter().all(|s| *s == 0.0));
    let empty = Bm25Index::build(Vec::<(String, Vec<String>)>::new(), Bm25Params::default());
    assert!(empty.score_all(&["a"]).is_empty());
}

#[test]
fn bm25_ties_break_by_id() {
    let docs = [("z", vec!["q"]), ("m", vec!["q"]), ("b", vec!["q"])];
    let index = Bm25Index::build(docs.into_iter().map(|(id, t)| (id.to_string(), t)), Bm25Params::default());
    let ids: Vec<String> = index.bm25_score(&["q"]).into_iter().map(|x| x.0).collect();
    assert_eq!(ids, ["b", "m", "z"]);
}

#[test]
fn tokenizer_rows() {
    assert_eq!(tokenize_utterance("What states border Texas?"), ["what", "states", "border", "texas"]);
    assert!(tokenize_utterance("").is_empty());
    assert_eq!(tokenize_utterance("Jake's supervisor"), ["jake", "s", "supervisor"]);
}

fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

// Toy table: e1 {x:2, y:1}, e2 {x:1, z:1}, e3 {w:1}; N = 3.
// idf(x) = ln(4/3) + 1, idf(y) = idf(z) = idf(w) = ln 2 + 1.
#[test]
fn tfidf_toy_table() {
    let docs = [counts(&[("x", 2), ("y", 1)]), counts(&[("x", 1), ("z", 1)]), counts(&[("w", 1)])];
    let v = ls_tfidf_vectors(&docs);
    let idf_x = 1.287_682_072_451_780_8;
    let idf_rare = 1.693_147_180_559_945_3;
    assert!(close(smoothed_idf(3, 2), idf_x));
    assert!(close(smoothed_idf(3, 1), idf_rare));

    let n1 = ((2.0 * idf_x).powi(2) + idf_rare.powi(2)).sqrt();
    assert!(close(v[0].0["x"], 2.0 * idf_x / n1));
    assert!(close(v[0].0["y"], idf_rare / n1));
    let n2 = (idf_x.powi(2) + idf_rare.powi(2)).sqrt();
    assert!(close(v[1].0["x"], idf_x / n2));
    assert!(close(v[1].0["z"], idf_rare / n2));
    assert_eq!(v[2].0.len(), 1);
    assert!(close(v[2].0["w"], 1.0));

    assert!(close(cosine(&v[0], &v[1]), (2.0 * idf_x / n1) * (idf_x / n2)));
    assert_eq!(cosine(&v[0], &v[2]), 0.0);
    assert!(close(cosine(&v[0], &v[0]), 1.0));
}

#[test]
fn tfidf_shared_term_has_minimal_weight() {
    let docs = [counts(&[("s", 1), ("a", 1)]), counts(&[("s", 1), ("b", 1)]), counts(&[("s", 1), ("a", 1), ("c", 1)])];
    let v = ls_tfidf_vectors(&docs);
    for vec in &v {
        let s = vec.0["s"];
        assert!(vec.0.iter().all(|(k, w)| k == "s" || *w > s));
    }
    assert!(close(smoothed_idf(3, 3), 1.0));
}

#[test]
fn tfidf_identical_multisets_and_zero_vectors() {
    let docs = [counts(&[("p", 2), ("q", 1)]), counts(&[("p", 2), ("q", 1)]), BTreeMap::new()];
    let v = ls_tfidf_vectors(&docs);
    assert_eq!(v[0], v[1]);
    assert!(close(cosine(&v[0], &v[1]), 1.0));
    assert!(v[2].is_zero());
    assert_eq!(cosine(&v[0], &v[2]), 0.0);
    assert_eq!(cosine(&LsTfidfVector::default(), &LsTfidfVector::default()), 0.0);
}

fn arb_docs() -> impl Strategy<Value = Vec<Vec<String>>> {
    let token = prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]).prop_map(String::from);
    prop::collection::vec(prop::collection::vec(token, 1..6), 1..8)
}

fn build(docs: &[Vec<String>]) -> Bm25Index {
    Bm25Index::build(docs.iter().enumerate().map(|(i, d)| (format!("d{i:02}"), d.clone())), Bm25Params::default())
}

proptest! {
    #[test]
    fn adding_exclusive_term_never_lowers_its_document(
        docs in arb_docs(),
        query in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "x"]), 0..5),
        pick in any::<prop::sample::Index>(),
    ) {
        let d = pick.index(docs.len());
        let mut docs = docs;
        docs[d].push("only".to_string());
        let index = build(&docs);
        let before = index.score_all(&query)[d];
        let mut extended = query.clone();
        extended.push("only");
        let after = index.score_all(&extended)[d];
        prop_assert!(after >= before);
    }

    // With several query terms the idf ratios move, so only one term is used.
    #[test]
    fn duplicating_corpus_keeps_ranking(docs in arb_docs(), term in prop::sample::select(vec!["a", "b", "c", "x"])) {
        let query = [term];
        let original: Vec<String> = build(&docs).bm25_score(&query).into_iter().map(|x| x.0).collect();
        let doubled_docs: Vec<(String, Vec<String>)> = docs
            .iter()
            .enumerate()
            .flat_map(|(i, d)| [(format!("d{i:02}"), d.clone()), (format!("d{i:02}~"), d.clone())])
            .collect();
        let doubled = Bm25Index::build(doubled_docs, Bm25Params::default());
        let kept: Vec<String> = doubled
            .bm25_score(&query)
            .into_iter()
            .map(|x| x.0)
            .filter(|id| !id.ends_with('~'))
            .collect();
        prop_assert_eq!(original, kept);
    }

    #[test]
    fn scoring_is_deterministic(docs in arb_docs(), seed in any::<u64>()) {
        let query = ["a", "c"];
        prop_assert_eq!(build(&docs).bm25_score(&query), build(&docs).bm25_score(&query));
        prop_assert_eq!(random_scores(docs.len(), seed, "t1"), random_scores(docs.len(), seed, "t1"));
    }
}
