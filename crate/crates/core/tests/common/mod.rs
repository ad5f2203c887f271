//! Independent oracles and hand-built cases shared by the integration
//! suites and the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use covsel::corpus::{build_indexes, Example, IndexBundle, PredictionBundle, Split};
use covsel::fixture::{gen_fixture, Fixture, FixtureConfig, GrammarConfig, SplitKind};
use covsel::gateway::MockOracleConfig;
use covsel::pipeline::{evaluate, infer_mock, prompt_for, select_all, PromptConfig, SelectionConfig};
use covsel::program::Dialect;
use covsel::retrieval::Bm25Params;
use covsel::selection::{greedy_log_det, Strategy, TraceStep, RANK_TOLERANCE};
use covsel::structures::StructureGraph;

pub fn example(id: &str, utterance: &str, program: &str) -> Example {
    Example::new(id, utterance, program, Split::Train, &Dialect::default()).unwrap()
}

// ---------------------------------------------------------------------------
// Random programs

const FUNCTIONS: &[&str] = &["f", "g", "h", "and", "filter"];
const LEAVES: &[&str] = &["a", "b", "c", "\"x\"", "3"];

/// A random program with at most `max_nodes` symbols. Small alphabets make
/// repeated symbols and repeated fragments common.
pub fn random_program(rng: &mut impl Rng, max_nodes: usize) -> String {
    fn grow(rng: &mut impl Rng, budget: &mut usize, depth: usize) -> String {
        *budget -= 1;
        let can_branch = *budget > 0 && depth < 5;
        if !can_branch || rng.random_bool(0.35) {
            return LEAVES.choose(rng).unwrap().to_string();
        }
        let name = FUNCTIONS.choose(rng).unwrap();
        let arity = rng.random_range(1..=3usize).min(*budget);
        let mut args = Vec::new();
        for _ in 0..arity {
            if *budget == 0 {
                break;
            }
            args.push(grow(rng, budget, depth + 1));
        }
        format!("{name} ({})", args.join(", "))
    }
    let mut budget = max_nodes.max(1);
    grow(rng, &mut budget, 0)
}

// ---------------------------------------------------------------------------
// Brute-force local structures

fn is_leaf_in(graph: &StructureGraph, node: usize, set: &[usize]) -> bool {
    !graph.node(node).children.iter().any(|c| set.contains(c))
}

fn adjacent(graph: &StructureGraph, a: usize, b: usize) -> bool {
    graph.node(a).parent == Some(b) || graph.node(b).parent == Some(a) || graph.are_siblings(a, b)
}

fn connected(graph: &StructureGraph, set: &[usize]) -> bool {
    let mut seen = vec![set[0]];
    let mut frontier = vec![set[0]];
    while let Some(x) = frontier.pop() {
        for &y in set {
            if !seen.contains(&y) && adjacent(graph, x, y) {
                seen.push(y);
                frontier.push(y);
            }
        }
    }
    seen.len() == set.len()
}

/// Serializes a fragment in the documented format. Panics on shapes the
/// format cannot express, which would mean the validity rule admitted them.
fn serialize(graph: &StructureGraph, set: &[usize]) -> String {
    let tops: Vec<usize> =
        set.iter().copied().filter(|&n| graph.node(n).parent.is_none_or(|p| !set.contains(&p))).collect();
    let sym = |n: usize| graph.node(n).symbol.clone();
    if tops.len() == 2 {
        let (a, b) = (tops[0].min(tops[1]), tops[0].max(tops[1]));
        return format!("{} <-> {}", sym(a), sym(b));
    }
    assert_eq!(tops.len(), 1, "fragment with {} tops", tops.len());
    let mut out = sym(tops[0]);
    let mut cur = tops[0];
    loop {
        let kids: Vec<usize> = graph.node(cur).children.iter().copied().filter(|c| set.contains(c)).collect();
        match kids.len() {
            0 => break,
            1 => {
                out.push_str(" -> ");
                out.push_str(&sym(kids[0]));
                cur = kids[0];
            }
            2 => {
                out.push_str(&format!(" -> {} <-> {}", sym(kids[0]), sym(kids[1])));
                break;
            }
            n => panic!("fragment node with {n} children"),
        }
    }
    out
}

/// Every node subset tested for induced connectivity and the rule that a
/// sibling edge joins two fragment nodes exactly when both are fragment
/// leaves. The lone root marker is excluded.
pub fn brute_force_structures(graph: &StructureGraph) -> BTreeSet<String> {
    let n = graph.len();
    assert!(n <= 16, "brute force over {n} nodes");
    let mut out = BTreeSet::new();
    for mask in 1u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if set == [0] {
            continue;
        }
        if !connected(graph, &set) {
            continue;
        }
        let valid = set.iter().enumerate().all(|(i, &x)| {
            set[i + 1..].iter().all(|&y| {
                let both_leaves = is_leaf_in(graph, x, &set) && is_leaf_in(graph, y, &set);
                graph.are_siblings(x, y) == both_leaves
            })
        });
        if valid {
            out.insert(serialize(graph, &set));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Determinants

/// `ln det` of a symmetric matrix by Gaussian elimination with partial
/// pivoting; `-inf` when singular up to `tol`.
pub fn log_det(mut m: Vec<Vec<f64>>, tol: f64) -> f64 {
    let n = m.len();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        if m[pivot][col].abs() <= tol {
            return f64::NEG_INFINITY;
        }
        m.swap(col, pivot);
        let p = m[col][col];
        if p < 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += p.ln();
        for row in col + 1..n {
            let factor = m[row][col] / p;
            let pivot = m[col].clone();
            for (x, y) in m[row].iter_mut().zip(&pivot).skip(col) {
                *x -= factor * y;
            }
        }
    }
    acc
}

pub fn submatrix(kernel: &[Vec<f64>], items: &[usize]) -> Vec<Vec<f64>> {
    items.iter().map(|&i| items.iter().map(|&j| kernel[i][j]).collect()).collect()
}

/// Random PSD kernel `q_i q_j <phi_i, phi_j>` with some repeated feature
/// vectors, so rank-deficient instances occur.
pub fn random_kernel(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let dim = rng.random_range(2..=5);
    let mut phis: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        if i > 0 && rng.random_bool(0.15) {
            let j = rng.random_range(0..i);
            phis.push(phis[j].clone());
            continue;
        }
        let mut v: Vec<f64> = (0..dim).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() }).collect();
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        phis.push(v);
    }
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..=1.0)).collect();
    (0..n)
        .map(|i| (0..n).map(|j| q[i] * q[j] * phis[i].iter().zip(&phis[j]).map(|(a, b)| a * b).sum::<f64>()).collect())
        .collect()
}

/// Checks one greedy trajectory against determinants computed from scratch.
pub fn check_greedy(kernel: &[Vec<f64>], k: usize) {
    let n = kernel.len();
    let traj = greedy_log_det(n, k, |i, j| kernel[i][j]);
    let mut chosen: Vec<usize> = Vec::new();
    for (step, &pick) in traj.picks.iter().enumerate() {
        let base = log_det(submatrix(kernel, &chosen), 0.0);
        let gains: Vec<(usize, f64)> = (0..n)
            .filter(|i| !chosen.contains(i))
            .map(|i| {
                let mut with = chosen.clone();
                with.push(i);
                (i, log_det(submatrix(kernel, &with), 1e-300) - base)
            })
            .collect();
        let best = gains.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
        let got = gains.iter().find(|g| g.0 == pick).unwrap().1;
        assert!(got >= best - 1e-9, "step {step}: picked gain {got}, best {best}");
        assert!((traj.gains[step] - got).abs() <= 1e-9 * got.abs().max(1.0));
        chosen.push(pick);
    }
    for w in traj.gains.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "gains increase: {:?}", traj.gains);
    }
    if traj.picks.len() < k.min(n) {
        // Stopped early: every remaining item is (numerically) dependent.
        let base = log_det(submatrix(kernel, &chosen), 0.0);
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let mut with = chosen.clone();
            with.push(i);
            let gain = log_det(submatrix(kernel, &with), 1e-300) - base;
            assert!(gain <= (RANK_TOLERANCE * kernel[i][i]).ln() + 1e-6, "item {i} had gain {gain}");
        }
    }
}

// ---------------------------------------------------------------------------
// Hand-traced Cover-LS pools

pub struct TraceCase {
    pub name: &'static str,
    /// (id, program, retriever score)
    pub pool: Vec<(&'static str, &'static str, f64)>,
    pub elements: Vec<&'static str>,
    pub k: usize,
    pub max_size: Option<usize>,
    pub expected_trace: Vec<(&'static str, Option<&'static str>)>,
    pub expected_items: Vec<&'static str>,
    pub underfilled: bool,
}

impl TraceCase {
    pub fn examples(&self) -> Vec<Example> {
        self.pool.iter().map(|(id, p, _)| example(id, id, p)).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.pool.iter().map(|p| p.2).collect()
    }

    pub fn expected_steps(&self) -> Vec<TraceStep> {
        self.expected_trace
            .iter()
            .map(|(e, c)| TraceStep { element: e.to_string(), chosen: c.map(String::from) })
            .collect()
    }
}

/// Pools with selection traces worked out by hand from the algorithm's
/// listing: sort largest first (ties by canonical form), take the
/// best-scored live holder of each uncovered element, drop what it covers,
/// drop its template from the pool, restart passes until k or no progress.
pub fn trace_cases() -> Vec<TraceCase> {
    vec![
        TraceCase {
            name: "self cover picks the holder of the largest structure",
            pool: vec![("a", "f (g, h)", 0.1), ("b", "g (h)", 0.9)],
            elements: vec![
                "f",
                "g",
                "h",
                "<root> -> f",
                "f -> g",
                "f -> h",
                "g <-> h",
                "<root> -> f -> g",
                "<root> -> f -> h",
                "f -> g <-> h",
                "<root> -> f -> g <-> h",
            ],
            k: 1,
            max_size: None,
            expected_trace: vec![("<root> -> f -> g <-> h", Some("a"))],
            expected_items: vec!["a"],
            underfilled: false,
        },
        TraceCase {
            name: "retriever-best holder and covered elements skipped",
            pool: vec![("a", "f (g)", 0.5), ("b", "f (g, k)", 0.7), ("c", "h (g)", 0.9)],
            elements: vec!["f -> g", "g", "h"],
            k: 2,
            max_size: None,
            expected_trace: vec![("f -> g", Some("b")), ("h", Some("c"))],
            expected_items: vec!["b", "c"],
            underfilled: false,
        },
        TraceCase {
            name: "same-template examples leave the pool",
            pool: vec![("a", "f (\"x\")", 0.9), ("b", "f (\"y\")", 0.8), ("c", "g (\"z\")", 0.1)],
            elements: vec!["f -> string", "string"],
            k: 3,
            max_size: None,
            expected_trace: vec![
                ("f -> string", Some("a")),
                ("f -> string", None),
                ("string", Some("c")),
                ("f -> string", None),
                ("string", None),
            ],
            expected_items: vec!["a", "c"],
            underfilled: true,
        },
        TraceCase {
            name: "outer loop refills after a full pass",
            pool: vec![("a", "f (g)", 0.9), ("b", "f (g, h)", 0.5), ("c", "f (h)", 0.4), ("d", "k (g)", 0.3)],
            elements: vec!["f -> g", "f -> h"],
            k: 3,
            max_size: None,
            expected_trace: vec![("f -> g", Some("a")), ("f -> h", Some("b")), ("f -> g", None), ("f -> h", Some("c"))],
            expected_items: vec!["a", "b", "c"],
            underfilled: false,
        },
        TraceCase {
            name: "equal scores resolved by ascending id",
            pool: vec![("e2", "f (g)", 0.5), ("e1", "f (g, h)", 0.5)],
            elements: vec!["g"],
            k: 1,
            max_size: None,
            expected_trace: vec![("g", Some("e1"))],
            expected_items: vec!["e1"],
            underfilled: false,
        },
        TraceCase {
            name: "size bound drops larger elements",
            pool: vec![("a", "f (g (h))", 0.1), ("b", "g (h)", 0.9)],
            elements: vec!["f -> g -> h", "g -> h", "h"],
            k: 2,
            max_size: Some(2),
            expected_trace: vec![("g -> h", Some("b")), ("g -> h", Some("a"))],
            expected_items: vec!["b", "a"],
            underfilled: false,
        },
        TraceCase {
            name: "uncoverable element recorded and skipped",
            pool: vec![("a", "f (g)", 0.3), ("b", "h (k)", 0.6)],
            elements: vec!["z -> y", "f -> g", "k"],
            k: 2,
            max_size: None,
            expected_trace: vec![("f -> g", Some("a")), ("z -> y", None), ("k", Some("b"))],
            expected_items: vec!["a", "b"],
            underfilled: false,
        },
        TraceCase {
            name: "nothing to cover",
            pool: vec![("a", "f (g)", 0.3), ("b", "h (k)", 0.6)],
            elements: vec![],
            k: 2,
            max_size: None,
            expected_trace: vec![],
            expected_items: vec![],
            underfilled: true,
        },
        TraceCase {
            name: "one pick covers the rest of the pass",
            pool: vec![("a", "f (g, h)", 0.2), ("b", "g", 0.9), ("c", "h", 0.8)],
            elements: vec!["f -> g <-> h", "g", "h"],
            k: 3,
            max_size: None,
            expected_trace: vec![
                ("f -> g <-> h", Some("a")),
                ("f -> g <-> h", None),
                ("g", Some("b")),
                ("h", Some("c")),
            ],
            expected_items: vec!["a", "b", "c"],
            underfilled: false,
        },
        TraceCase {
            name: "sibling order matters and the pool runs dry",
            pool: vec![("a", "f (g, h)", 0.4), ("b", "k (g, h)", 0.6), ("c", "f (h, g)", 0.5)],
            elements: vec!["g <-> h", "h <-> g"],
            k: 4,
            max_size: None,
            expected_trace: vec![
                ("g <-> h", Some("b")),
                ("h <-> g", Some("c")),
                ("g <-> h", Some("a")),
                ("h <-> g", None),
                ("g <-> h", None),
                ("h <-> g", None),
            ],
            expected_items: vec!["b", "c", "a"],
            underfilled: true,
        },
    ]
}

// ---------------------------------------------------------------------------
// Error classification cases

pub struct ErrorCase {
    pub name: &'static str,
    pub pred: &'static str,
    pub gold: &'static str,
    pub demos: Vec<&'static str>,
    pub labels: Vec<&'static str>,
}

/// Labels assigned by hand from the four definitions: unbalanced
/// parentheses; same anonymized form as a demonstration; a symbol found in
/// neither the gold program nor the demonstrations; a gold symbol absent
/// from the prediction. Over-copy and out-of-vocabulary never co-occur: a
/// copied template carries only symbols of the demonstration it copies.
pub fn error_cases() -> Vec<ErrorCase> {
    vec![
        ErrorCase {
            name: "syntax only",
            pred: "f (g (h)",
            gold: "f (g (h))",
            demos: vec!["k (f)"],
            labels: vec!["syntax"],
        },
        ErrorCase {
            name: "over-copy only",
            pred: "f (g, h)",
            gold: "f (h, g)",
            demos: vec!["f (g, h)"],
            labels: vec!["over-copy"],
        },
        ErrorCase {
            name: "over-copy through anonymization",
            pred: "f (g (\"a\"), h)",
            gold: "f (h, g (\"a\"))",
            demos: vec!["f (g (\"b\"), h)"],
            labels: vec!["over-copy"],
        },
        ErrorCase {
            name: "oov only",
            pred: "f (g, h, zz)",
            gold: "f (g, h)",
            demos: vec!["k (g)"],
            labels: vec!["oov-hallucination"],
        },
        ErrorCase {
            name: "missing only",
            pred: "f (g)",
            gold: "f (g, h)",
            demos: vec!["k (h)"],
            labels: vec!["missing-symbols"],
        },
        ErrorCase {
            name: "over-copy and missing",
            pred: "f (k)",
            gold: "f (g (h))",
            demos: vec!["f (k)", "g (h)"],
            labels: vec!["over-copy", "missing-symbols"],
        },
        ErrorCase {
            name: "oov and missing",
            pred: "f (zz)",
            gold: "f (g)",
            demos: vec!["h"],
            labels: vec!["oov-hallucination", "missing-symbols"],
        },
        ErrorCase {
            name: "syntax and missing",
            pred: "f (g",
            gold: "f (g, h)",
            demos: vec!["h (k)"],
            labels: vec!["syntax", "missing-symbols"],
        },
        ErrorCase {
            name: "syntax and oov",
            pred: "f (g, h, zz",
            gold: "f (g, h)",
            demos: vec!["k"],
            labels: vec!["syntax", "oov-hallucination"],
        },
        ErrorCase {
            name: "syntax with repaired copy",
            pred: "f (k (g)",
            gold: "f (g)",
            demos: vec!["f (k (g))"],
            labels: vec!["syntax", "over-copy"],
        },
        ErrorCase {
            name: "syntax, copy and missing",
            pred: "zz (k (g)",
            gold: "f (g)",
            demos: vec!["zz (k (g))"],
            labels: vec!["syntax", "over-copy", "missing-symbols"],
        },
        ErrorCase {
            name: "syntax, oov and missing",
            pred: "f (zz",
            gold: "f (g)",
            demos: vec!["h"],
            labels: vec!["syntax", "oov-hallucination", "missing-symbols"],
        },
    ]
}

// ---------------------------------------------------------------------------
// Synthetic held-out split experiments

pub struct Experiment {
    pub fixture: Fixture,
    pub index: IndexBundle,
    pub predictions: BTreeMap<String, PredictionBundle>,
}

impl Experiment {
    pub fn held_out(n_train: usize, n_test: usize, seed: u64) -> Self {
        let cfg = FixtureConfig { n_train, n_test, split: SplitKind::HeldOutLs, seed, ..Default::default() };
        Self::from_config(&cfg)
    }

    pub fn from_config(cfg: &FixtureConfig) -> Self {
        let fixture = gen_fixture(&GrammarConfig::covr(), cfg).unwrap();
        let index = build_indexes(&fixture.corpus, Bm25Params::default());
        let predictions = fixture
            .predictions
            .iter()
            .map(|p| (p.id.clone(), PredictionBundle::from_beams(p.id.clone(), &p.beams, &fixture.corpus.dialect)))
            .collect();
        Self { fixture, index, predictions }
    }

    pub fn tests(&self) -> Vec<&Example> {
        self.fixture.corpus.test()
    }

    pub fn run(&self, strategy: Strategy, k: usize) -> StrategyResult {
        let cfg = SelectionConfig { strategy, k, ..Default::default() };
        let tests = self.tests();
        let selections = select_all(&self.index, &tests, &self.predictions, &cfg).unwrap();
        let prompts: Vec<_> = selections
            .iter()
            .map(|s| {
                prompt_for(&self.index, self.index.example(&s.id).unwrap(), &s.set, &PromptConfig::default()).unwrap()
            })
            .collect();
        let inferred = infer_mock(&self.index, &prompts, &MockOracleConfig::default()).unwrap();
        let records = evaluate(&self.index, &prompts, &inferred, Some(strategy.name())).unwrap();
        let n = records.len() as f64;
        StrategyResult {
            accuracy: records.iter().filter(|r| r.exact_match).count() as f64 / n,
            ls_coverage: records.iter().map(|r| r.ls_coverage).sum::<f64>() / n,
            symbol_coverage: records.iter().map(|r| r.symbol_coverage).sum::<f64>() / n,
            unique_ls: records.iter().map(|r| r.unique_ls_count as f64).sum::<f64>() / n,
            records,
            selections,
        }
    }
}

pub struct StrategyResult {
    pub accuracy: f64,
    pub ls_coverage: f64,
    pub symbol_coverage: f64,
    pub unique_ls: f64,
    pub records: Vec<covsel::evaluation::EvalRecord>,
    pub selections: Vec<covsel::pipeline::SelectionRecord>,
}

/// Count of adjacent decreases, and the largest one, in a sequence.
pub fn inversions(values: &[f64]) -> (usize, f64) {
    let drops: Vec<f64> = values.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
    (drops.len(), drops.iter().copied().fold(0.0, f64::max))
}
