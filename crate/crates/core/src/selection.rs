//! Demonstration selection strategies.
//!
//! All strategies take the training pool as a slice of examples with a
//! parallel slice of retriever scores for the current test utterance. Scores
//! are computed once per test utterance and not refreshed as the pool
//! shrinks.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::program::{anonymize, parse_program, Dialect, ProgramAst};
use crate::retrieval::{cosine, LsTfidfVector};
use crate::structures::{canonical_size, program_structures, MaxSize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    TopK,
    Random,
    CoverLs,
    CoverUtt,
    Dpp,
    /// Cover-LS over gold symbols with random picks, used to build
    /// finetuning inputs.
    CoverLsTrain,
}

impl Strategy {
    pub fn is_coverage(self) -> bool {
        matches!(self, Strategy::CoverLs | Strategy::CoverUtt | Strategy::CoverLsTrain)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::TopK => "top-k",
            Strategy::Random => "random",
            Strategy::CoverLs => "cover-ls",
            Strategy::CoverUtt => "cover-utt",
            Strategy::Dpp => "dpp",
            Strategy::CoverLsTrain => "cover-ls-train",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "top-k" => Strategy::TopK,
            "random" => Strategy::Random,
            "cover-ls" => Strategy::CoverLs,
            "cover-utt" => Strategy::CoverUtt,
            "dpp" => Strategy::Dpp,
            "cover-ls-train" => Strategy::CoverLsTrain,
            other => return Err(Error::Config(format!("unknown strategy '{other}'"))),
        })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

/// One attempt to cover an element. `chosen` is `None` when no remaining
/// pool example contains the element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub element: String,
    pub chosen: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub items: Vec<ScoredId>,
    pub k: usize,
    pub strategy: Strategy,
    #[serde(default)]
    pub coverage_trace: Vec<TraceStep>,
    /// Fewer than `k` items could be selected.
    #[serde(default)]
    pub underfilled: bool,
}

impl DemonstrationSet {
    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// How Cover-LS picks among pool examples containing an element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pick {
    /// Highest retriever score, ties by ascending id.
    RetrieverTop,
    /// Uniformly at random from a seeded generator.
    UniformRandom { seed: u64 },
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::InvalidK(k))
    } else {
        Ok(())
    }
}

fn check_scores(pool: &[&Example], scores: &[f64]) -> Result<()> {
    if pool.len() != scores.len() {
        return Err(Error::Config(format!("{} scores for a pool of {} examples", scores.len(), pool.len())));
    }
    Ok(())
}

/// Pool positions by descending score, ties by ascending id.
pub fn rank_order(pool: &[&Example], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| pool[a].id.cmp(&pool[b].id)));
    order
}

pub fn select_top_k(pool: &[&Example], scores: &[f64], k: usize) -> Result<DemonstrationSet> {
    check_k(k)?;
    check_scores(pool, scores)?;
    let items = rank_order(pool, scores)
        .into_iter()
        .take(k)
        .map(|i| ScoredId { id: pool[i].id.clone(), score: scores[i] })
        .collect::<Vec<_>>();
    Ok(DemonstrationSet {
        underfilled: items.len() < k,
        items,
        k,
        strategy: Strategy::TopK,
        coverage_trace: Vec::new(),
    })
}

/// Uniform sample without replacement; `scores` are carried along for
/// prompt ordering.
pub fn select_random(pool: &[&Example], scores: &[f64], k: usize, seed: u64) -> Result<DemonstrationSet> {
    check_k(k)?;
    check_scores(pool, scores)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = k.min(pool.len());
    let items = index::sample(&mut rng, pool.len(), amount)
        .into_iter()
        .map(|i| ScoredId { id: pool[i].id.clone(), score: scores[i] })
        .collect();
    Ok(DemonstrationSet { items, k, strategy: Strategy::Random, coverage_trace: Vec::new(), underfilled: amount < k })
}

/// The coverage loop shared by Cover-LS, Cover-Utt and training mode.
///
/// Elements are covered in the given order. Each pick removes every element
/// the chosen example contains from the uncovered list and every pool
/// example sharing its template. When a pass over the elements ends with
/// fewer than `k` picks, the uncovered list is reset and another pass runs;
/// a pass that picks nothing ends selection with the set underfilled.
fn coverage_loop<F>(
    elements: &[String],
    pool: &[&Example],
    scores: &[f64],
    k: usize,
    pick: Pick,
    strategy: Strategy,
    contains: F,
) -> Result<DemonstrationSet>
where
    F: Fn(&Example, &str) -> bool,
{
    check_k(k)?;
    check_scores(pool, scores)?;
    let order = rank_order(pool, scores);
    // Per element: pool positions containing it, best first.
    let holders: Vec<Vec<usize>> =
        elements.iter().map(|el| order.iter().copied().filter(|&i| contains(pool[i], el)).collect()).collect();

    let mut rng = match pick {
        Pick::UniformRandom { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Pick::RetrieverTop => None,
    };
    let mut alive = vec![true; pool.len()];
    let mut items: Vec<ScoredId> = Vec::new();
    let mut trace = Vec::new();

    'outer: while items.len() < k {
        let mut uncovered = vec![true; elements.len()];
        let mut picked_this_pass = false;
        for (ei, element) in elements.iter().enumerate() {
            if !uncovered[ei] {
                continue;
            }
            let chosen = match rng.as_mut() {
                None => holders[ei].iter().copied().find(|&i| alive[i]),
                Some(rng) => {
                    let live: Vec<usize> = holders[ei].iter().copied().filter(|&i| alive[i]).collect();
                    live.choose(rng).copied()
                }
            };
            let Some(c) = chosen else {
                trace.push(TraceStep { element: element.clone(), chosen: None });
                continue;
            };
            let example = pool[c];
            trace.push(TraceStep { element: element.clone(), chosen: Some(example.id.clone()) });
            items.push(ScoredId { id: example.id.clone(), score: scores[c] });
            picked_this_pass = true;
            for (ej, other) in elements.iter().enumerate() {
                if uncovered[ej] && contains(example, other) {
                    uncovered[ej] = false;
                }
            }
            for (i, e) in pool.iter().enumerate() {
                if alive[i] && e.template == example.template {
                    alive[i] = false;
                }
            }
            if items.len() == k {
                break 'outer;
            }
        }
        if !picked_this_pass {
            break;
        }
    }

    Ok(DemonstrationSet { underfilled: items.len() < k, items, k, strategy, coverage_trace: trace })
}

/// Orders local structures largest first, ties by canonical form.
pub fn order_structures(elements: &BTreeSet<String>, max_size: MaxSize) -> Vec<String> {
    let mut ordered: Vec<String> = elements.iter().filter(|s| max_size.admits(canonical_size(s))).cloned().collect();
    ordered.sort_by(|a, b| canonical_size(b).cmp(&canonical_size(a)).then_with(|| a.cmp(b)));
    ordered
}

/// Cover-LS: cover predicted local structures, largest first.
pub fn cover_ls(
    elements: &BTreeSet<String>,
    pool: &[&Example],
    scores: &[f64],
    k: usize,
    max_size: MaxSize,
    pick: Pick,
) -> Result<DemonstrationSet> {
    let ordered = order_structures(elements, max_size);
    coverage_loop(&ordered, pool, scores, k, pick, Strategy::CoverLs, |e, s| e.contains_ls(s))
}

/// Distinct query tokens by descending idf, ties in utterance order.
pub fn order_tokens(tokens: &[String], idf: impl Fn(&str) -> f64) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut distinct: Vec<(usize, &String)> = tokens.iter().filter(|t| seen.insert(t.as_str())).enumerate().collect();
    distinct.sort_by(|(ia, a), (ib, b)| idf(b).partial_cmp(&idf(a)).unwrap_or(Ordering::Equal).then(ia.cmp(ib)));
    distinct.into_iter().map(|(_, t)| t.clone()).collect()
}

/// Cover-Utt: cover the words of the test utterance.
pub fn cover_utt(
    query_tokens: &[String],
    idf: impl Fn(&str) -> f64,
    pool: &[&Example],
    scores: &[f64],
    k: usize,
) -> Result<DemonstrationSet> {
    let ordered = order_tokens(query_tokens, idf);
    coverage_loop(&ordered, pool, scores, k, Pick::RetrieverTop, Strategy::CoverUtt, |e, t| e.contains_token(t))
}

/// Finetuning-time selection: cover the gold program's symbols, choosing a
/// random example for each.
pub fn training_mode_select(gold: &ProgramAst, pool: &[&Example], k: usize, seed: u64) -> Result<DemonstrationSet> {
    let symbols = program_structures(&anonymize(gold), MaxSize::at_most(1));
    let ordered = order_structures(&symbols, MaxSize::at_most(1));
    let scores = vec![0.0; pool.len()];
    coverage_loop(&ordered, pool, &scores, k, Pick::UniformRandom { seed }, Strategy::CoverLsTrain, |e, s| {
        e.contains_ls(s)
    })
}

/// Local structures of the gold program, for oracle selection.
pub fn oracle_elements(gold: &str, dialect: &Dialect) -> Result<BTreeSet<String>> {
    let ast = parse_program(gold, dialect)?;
    Ok(program_structures(&anonymize(&ast), MaxSize::UNBOUNDED))
}

// ---------------------------------------------------------------------------
// DPP

/// Greedy log-det trajectory over an implicit PSD kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyTrajectory {
    pub picks: Vec<usize>,
    /// `log det(L_{D+j}) - log det(L_D)` for each pick.
    pub gains: Vec<f64>,
}

/// Residual variance below this fraction of an item's own kernel value
/// counts as linearly dependent (zero determinant).
pub const RANK_TOLERANCE: f64 = 1e-9;

/// Greedy maximization of `log det(L_D)` by incremental Cholesky updates.
/// Each step adds the item with the largest residual variance, which is the
/// exponentiated marginal gain; ties go to the lower index. Stops at `k`
/// items or when every remaining item is dependent on the selection.
pub fn greedy_log_det(n: usize, k: usize, kernel: impl Fn(usize, usize) -> f64) -> GreedyTrajectory {
    let diag: Vec<f64> = (0..n).map(|i| kernel(i, i)).collect();
    let mut residual = diag.clone();
    let mut factors: Vec<Vec<f64>> = vec![Vec::with_capacity(k); n];
    let mut remaining: Vec<bool> = vec![true; n];
    let mut picks = Vec::new();
    let mut gains = Vec::new();

    while picks.len() < k {
        let best = (0..n)
            .filter(|&i| remaining[i] && residual[i] > RANK_TOLERANCE * diag[i] && residual[i] > 0.0)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if residual[b] >= residual[i] => Some(b),
                _ => Some(i),
            });
        let Some(j) = best else { break };
        remaining[j] = false;
        picks.push(j);
        gains.push(residual[j].ln());
        let pivot = residual[j].sqrt();
        let cj = factors[j].clone();
        for i in 0..n {
            if !remaining[i] {
                continue;
            }
            let dot: f64 = cj.iter().zip(&factors[i]).map(|(a, b)| a * b).sum();
            let e = (kernel(j, i) - dot) / pivot;
            factors[i].push(e);
            residual[i] -= e * e;
        }
    }
    GreedyTrajectory { picks, gains }
}

pub const DEFAULT_CANDIDATE_POOL: usize = 200;
pub const QUALITY_FLOOR: f64 = 1e-6;

/// Retriever scores divided by the pool maximum, floored at
/// [`QUALITY_FLOOR`]. All-zero scores give uniform quality 1.
pub fn normalize_quality(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_nan() || max <= 0.0 {
        return vec![1.0; scores.len()];
    }
    scores.iter().map(|s| (s / max).max(QUALITY_FLOOR)).collect()
}

/// DPP selection with kernel `L_ij = q_i cos(phi_i, phi_j) q_j` over the
/// top `candidate_pool_size` examples by retriever score.
pub fn dpp_select(
    pool: &[&Example],
    scores: &[f64],
    vectors: &[LsTfidfVector],
    k: usize,
    candidate_pool_size: usize,
) -> Result<DemonstrationSet> {
    check_k(k)?;
    check_scores(pool, scores)?;
    if vectors.len() != pool.len() {
        return Err(Error::Config("dpp needs one tf-idf vector per pool example".into()));
    }
    let mut candidates: Vec<usize> =
        rank_order(pool, scores).into_iter().filter(|&i| !vectors[i].is_zero()).take(candidate_pool_size).collect();
    candidates.sort_by(|&a, &b| pool[a].id.cmp(&pool[b].id));
    let cand_scores: Vec<f64> = candidates.iter().map(|&i| scores[i]).collect();
    let quality = normalize_quality(&cand_scores);
    let trajectory = greedy_log_det(candidates.len(), k, |a, b| {
        let sim = if a == b { 1.0 } else { cosine(&vectors[candidates[a]], &vectors[candidates[b]]) };
        quality[a] * sim * quality[b]
    });
    let items: Vec<ScoredId> = trajectory
        .picks
        .iter()
        .map(|&c| {
            let i = candidates[c];
            ScoredId { id: pool[i].id.clone(), score: scores[i] }
        })
        .collect();
    Ok(DemonstrationSet { underfilled: items.len() < k, items, k, strategy: Strategy::Dpp, coverage_trace: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;

    fn ex(id: &str, utt: &str, program: &str) -> Example {
        Example::new(id, utt, program, Split::Train, &Dialect::default()).unwrap()
    }

    fn refs(v: &[Example]) -> Vec<&Example> {
        v.iter().collect()
    }

    #[test]
    fn top_k_basics() {
        let pool = vec![ex("a", "x", "f"), ex("b", "x", "g"), ex("c", "x", "h")];
        let p = refs(&pool);
        let s = select_top_k(&p, &[0.2, 0.9, 0.5], 1).unwrap();
        assert_eq!(s.ids(), vec!["b"]);
        let s = select_top_k(&p, &[0.2, 0.9, 0.5], 5).unwrap();
        assert_eq!(s.ids(), vec!["b", "c", "a"]);
        assert!(s.underfilled);
        let s = select_top_k(&p, &[0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(s.ids(), vec!["a", "b"]);
        assert!(matches!(select_top_k(&p, &[0.0; 3], 0), Err(Error::InvalidK(0))));
    }

    #[test]
    fn random_is_a_seeded_sample() {
        let pool = vec![ex("a", "x", "f"), ex("b", "x", "g"), ex("c", "x", "h")];
        let p = refs(&pool);
        let s = select_random(&p, &[0.0; 3], 3, 5).unwrap();
        let mut ids = s.ids();
        ids.sort();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(select_random(&p, &[0.0; 3], 2, 9).unwrap(), select_random(&p, &[0.0; 3], 2, 9).unwrap());
        let over = select_random(&p, &[0.0; 3], 4, 1).unwrap();
        assert_eq!(over.len(), 3);
        assert!(over.underfilled);
    }

    #[test]
    fn cover_ls_self_cover() {
        let pool = vec![ex("a", "x", "f (g, h)"), ex("b", "x", "f (g)"), ex("c", "x", "h (g)")];
        let p = refs(&pool);
        let target = oracle_elements("f (g, h)", &Dialect::default()).unwrap();
        let s = cover_ls(&target, &p, &[0.0, 1.0, 1.0], 1, MaxSize::UNBOUNDED, Pick::RetrieverTop).unwrap();
        assert_eq!(s.ids(), vec!["a"]);
        assert_eq!(s.coverage_trace[0].element, "<root> -> f -> g <-> h");
    }

    #[test]
    fn cover_ls_skips_uncoverable_and_underfills() {
        let pool = vec![ex("a", "x", "f (g)")];
        let p = refs(&pool);
        let target: BTreeSet<String> = ["q -> r".to_string(), "f".to_string()].into();
        let s = cover_ls(&target, &p, &[1.0], 3, MaxSize::UNBOUNDED, Pick::RetrieverTop).unwrap();
        assert_eq!(s.ids(), vec!["a"]);
        assert!(s.underfilled);
        assert_eq!(
            s.coverage_trace,
            vec![
                TraceStep { element: "q -> r".into(), chosen: None },
                TraceStep { element: "f".into(), chosen: Some("a".into()) },
                TraceStep { element: "q -> r".into(), chosen: None },
                TraceStep { element: "f".into(), chosen: None },
            ]
        );
        let empty = cover_ls(&BTreeSet::new(), &p, &[1.0], 2, MaxSize::UNBOUNDED, Pick::RetrieverTop).unwrap();
        assert!(empty.is_empty() && empty.underfilled);
    }

    #[test]
    fn cover_utt_orders_by_idf() {
        let tokens: Vec<String> = ["the", "red", "the", "dog"].iter().map(|s| s.to_string()).collect();
        let idf = |t: &str| match t {
            "the" => 0.1,
            "red" => 2.0,
            _ => 2.0,
        };
        assert_eq!(order_tokens(&tokens, idf), vec!["red", "dog", "the"]);
    }

    #[test]
    fn cover_utt_contained_utterance() {
        let pool = vec![ex("a", "red dog runs", "f (g)"), ex("b", "red cat", "f (h)")];
        let p = refs(&pool);
        let q: Vec<String> = ["red", "dog"].iter().map(|s| s.to_string()).collect();
        let idf = |t: &str| if t == "dog" { 2.0 } else { 1.0 };
        let s = cover_utt(&q, idf, &p, &[0.1, 0.9], 1).unwrap();
        assert_eq!(s.ids(), vec!["a"]);
        // Equal idf: "red" comes first and its best-scored holder is b.
        let s = cover_utt(&q, |_| 1.0, &p, &[0.1, 0.9], 2).unwrap();
        assert_eq!(s.ids(), vec!["b", "a"]);
        let q = vec!["zebra".to_string()];
        let s = cover_utt(&q, |_| 1.0, &p, &[0.1, 0.9], 1).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.coverage_trace[0], TraceStep { element: "zebra".into(), chosen: None });
    }

    #[test]
    fn training_mode_picks_unique_holder() {
        let pool = vec![ex("a", "x", "f (g)"), ex("b", "x", "f (zz)"), ex("c", "x", "f (h)")];
        let p = refs(&pool);
        let gold = parse_program("zz", &Dialect::default()).unwrap();
        let s = training_mode_select(&gold, &p, 1, 3).unwrap();
        assert_eq!(s.ids(), vec!["b"]);
        let gold = parse_program("f (g)", &Dialect::default()).unwrap();
        assert_eq!(training_mode_select(&gold, &p, 2, 11).unwrap(), training_mode_select(&gold, &p, 2, 11).unwrap());
    }

    #[test]
    fn oracle_elements_consistent_with_union() {
        let d = Dialect::default();
        let elems = oracle_elements("foo", &d).unwrap();
        assert_eq!(elems.len(), 2);
        let gold = r#"f ("x", g (h))"#;
        let anon = anonymize(&parse_program(gold, &d).unwrap());
        assert_eq!(
            oracle_elements(gold, &d).unwrap(),
            crate::structures::ls_union(&[anon], MaxSize::UNBOUNDED).unwrap()
        );
        assert!(oracle_elements("f (", &d).is_err());
    }

    fn unit(term: &str) -> LsTfidfVector {
        LsTfidfVector([(term.to_string(), 1.0)].into())
    }

    #[test]
    fn dpp_duplicate_kills_determinant() {
        let pool = vec![ex("a", "x", "f"), ex("b", "x", "f")];
        let p = refs(&pool);
        let s = dpp_select(&p, &[1.0, 1.0], &[unit("t"), unit("t")], 2, 10).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.underfilled);
    }

    #[test]
    fn dpp_orthogonal_items() {
        let pool = vec![ex("c", "x", "f"), ex("a", "x", "g"), ex("b", "x", "h")];
        let p = refs(&pool);
        let vecs = [unit("1"), unit("2"), unit("3")];
        let s = dpp_select(&p, &[1.0, 1.0, 1.0], &vecs, 2, 10).unwrap();
        assert_eq!(s.ids(), vec!["a", "b"]);
        let t = greedy_log_det(3, 3, |i, j| if i == j { 0.25 } else { 0.0 });
        let total: f64 = t.gains.iter().sum();
        assert!((total - 3.0 * 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn quality_normalization() {
        assert_eq!(normalize_quality(&[2.0, 1.0, 0.0]), vec![1.0, 0.5, QUALITY_FLOOR]);
        assert_eq!(normalize_quality(&[0.0, 0.0]), vec![1.0, 1.0]);
    }
}
