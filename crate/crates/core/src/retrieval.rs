//! Lexical retrieval: Okapi BM25 over utterance words or program symbols,
//! seeded random scores, and tf-idf vectors over local structures.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-cased runs of alphanumeric characters.
pub fn tokenize_utterance(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrieverVariant {
    Bm25Utterance,
    Bm25Symbols,
    Random,
    OracleBm25GoldSymbols,
}

impl std::str::FromStr for RetrieverVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25-utterance" => Ok(Self::Bm25Utterance),
            "bm25-symbols" => Ok(Self::Bm25Symbols),
            "random" => Ok(Self::Random),
            "oracle-bm25-gold-symbols" => Ok(Self::OracleBm25GoldSymbols),
            other => Err(Error::Config(format!("unknown retriever '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub variant: RetrieverVariant,
    pub k1: f64,
    pub b: f64,
    pub seed: u64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self { variant: RetrieverVariant::Bm25Utterance, k1: 1.2, b: 0.75, seed: 0 }
    }
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k1.is_nan() || self.k1 < 0.0 {
            return Err(Error::Config(format!("k1 must be non-negative, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("b must lie in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Inverted index over token documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    pub params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lens: Vec<usize>,
    avg_doc_len: f64,
    /// term -> (document position, term frequency), ascending position.
    postings: BTreeMap<String, Vec<(usize, u32)>>,
}

impl Bm25Index {
    pub fn build<I, D>(docs: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = (String, D)>,
        D: IntoIterator,
        D::Item: AsRef<str>,
    {
        let mut doc_ids = Vec::new();
        let mut doc_lens = Vec::new();
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        for (pos, (id, tokens)) in docs.into_iter().enumerate() {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            let mut len = 0;
            for t in tokens {
                *tf.entry(t.as_ref().to_string()).or_insert(0) += 1;
                len += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((pos, count));
            }
            doc_ids.push(id);
            doc_lens.push(len);
        }
        let total: usize = doc_lens.iter().sum();
        let avg_doc_len = if doc_lens.is_empty() { 0.0 } else { total as f64 / doc_lens.len() as f64 };
        Self { params, doc_ids, doc_lens, avg_doc_len, postings }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> &[(usize, u32)] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    /// `ln((N - n + 0.5) / (n + 0.5) + 1)`; always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.document_frequency(term) as f64;
        let total = self.len() as f64;
        ((total - n + 0.5) / (n + 0.5) + 1.0).ln()
    }

    /// Scores aligned with document positions. Every query token occurrence
    /// contributes, so repeated query words weigh more.
    pub fn score_all(&self, query: &[impl AsRef<str>]) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        if self.avg_doc_len == 0.0 {
            return scores;
        }
        let Bm25Params { k1, b } = self.params;
        for term in query {
            let term = term.as_ref();
            let idf = self.idf(term);
            for &(doc, tf) in self.postings(term) {
                let tf = tf as f64;
                let norm = 1.0 - b + b * self.doc_lens[doc] as f64 / self.avg_doc_len;
                scores[doc] += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        scores
    }

    /// `(id, score)` in descending score order, ties by ascending id.
    pub fn bm25_score(&self, query: &[impl AsRef<str>]) -> Vec<(String, f64)> {
        let scores = self.score_all(query);
        let mut ranked: Vec<(String, f64)> = self.doc_ids.iter().cloned().zip(scores).collect();
        sort_ranking(&mut ranked);
        ranked
    }
}

pub fn sort_ranking(ranked: &mut [(String, f64)]) {
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

pub fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Uniform scores in `[0, 1)`, a function of `(seed, query_id)` only.
pub fn random_scores(n: usize, seed: u64, query_id: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(query_id));
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// L2-normalized sparse tf-idf vector keyed by local-structure canonical form.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LsTfidfVector(pub BTreeMap<String, f64>);

impl LsTfidfVector {
    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.values().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// Smoothed idf, `ln((1 + N) / (1 + df)) + 1`. Terms present in every
/// document get the minimum weight of 1.
pub fn smoothed_idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

/// tf-idf vectors from per-document local-structure counts.
pub fn ls_tfidf_vectors(docs: &[BTreeMap<String, usize>]) -> Vec<LsTfidfVector> {
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        for term in doc.keys() {
            *df.entry(term).or_insert(0) += 1;
        }
    }
    docs.iter()
        .map(|doc| {
            let mut v: BTreeMap<String, f64> = doc
                .iter()
                .map(|(term, &tf)| (term.clone(), tf as f64 * smoothed_idf(docs.len(), df[term.as_str()])))
                .collect();
            let norm = v.values().map(|w| w * w).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.values_mut().for_each(|w| *w /= norm);
            }
            v.retain(|_, w| *w != 0.0);
            LsTfidfVector(v)
        })
        .collect()
}

pub fn cosine(u: &LsTfidfVector, v: &LsTfidfVector) -> f64 {
    let (small, large) = if u.0.len() <= v.0.len() { (u, v) } else { (v, u) };
    let dot: f64 = small.0.iter().filter_map(|(k, a)| large.0.get(k).map(|b| a * b)).sum();
    dot.clamp(0.0, 1.0)
}
