//! Synthetic compositional splits from a small synchronous grammar.
//!
//! Each grammar rule pairs a program template with an utterance template.
//! Slots name nonterminals in braces: `{SET}`, or `{SET#2}` for a second
//! independent expansion of the same nonterminal. `{number}` draws a small
//! integer used verbatim in both the program and the utterance.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Example, PredictionRecord, Split};
use crate::error::{Error, Result};
use crate::evaluation::UNOBSERVED_MAX_SIZE;
use crate::program::{parse_program, AstNode, Dialect, NodeKind};
use crate::structures::{canonical_size, MaxSize};

pub const DEFAULT_GRAMMAR: &str = include_str!("../grammars/covr.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarRule {
    pub lhs: String,
    pub program: String,
    pub utterance: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub start: String,
    /// Beyond this depth only rules that do not recurse into their own
    /// nonterminal are used.
    pub max_depth: usize,
    #[serde(default = "default_number_range")]
    pub number_range: (u32, u32),
    pub rules: Vec<GrammarRule>,
}

fn default_number_range() -> (u32, u32) {
    (2, 9)
}

impl GrammarConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: GrammarConfig = toml::from_str(text).map_err(|e| Error::format("grammar config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn covr() -> Self {
        Self::from_toml(DEFAULT_GRAMMAR).expect("built-in grammar is valid")
    }

    fn validate(&self) -> Result<()> {
        let lhs: BTreeSet<&str> = self.rules.iter().map(|r| r.lhs.as_str()).collect();
        if !lhs.contains(self.start.as_str()) {
            return Err(Error::Generation(format!("no rules for start symbol '{}'", self.start)));
        }
        for rule in &self.rules {
            for slot in slots(&rule.program) {
                if slot != NUMBER_SLOT && !lhs.contains(base_nonterminal(&slot)) {
                    return Err(Error::Generation(format!("slot '{{{slot}}}' has no rules")));
                }
            }
            if rule.weight.is_nan() || rule.weight <= 0.0 {
                return Err(Error::Generation(format!("rule weight must be positive in '{}'", rule.program)));
            }
        }
        Ok(())
    }

    fn rules_for(&self, lhs: &str) -> Vec<&GrammarRule> {
        self.rules.iter().filter(|r| r.lhs == lhs).collect()
    }

    /// Single-symbol rules grouped by nonterminal, used to perturb programs.
    fn lexical_classes(&self) -> BTreeMap<String, Vec<String>> {
        let mut classes: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for r in &self.rules {
            let p = r.program.trim();
            if slots(p).is_empty() && !p.contains(['(', ')', ',', ' ']) {
                classes.entry(r.lhs.clone()).or_default().push(p.to_string());
            }
        }
        classes
    }
}

const NUMBER_SLOT: &str = "number";

fn slots(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start..].find('}') else { break };
        out.push(rest[start + 1..start + len].to_string());
        rest = &rest[start + len + 1..];
    }
    out
}

fn base_nonterminal(slot: &str) -> &str {
    slot.split('#').next().unwrap_or(slot)
}

fn expand(grammar: &GrammarConfig, lhs: &str, depth: usize, rng: &mut ChaCha8Rng) -> (String, String) {
    let mut rules = grammar.rules_for(lhs);
    if depth >= grammar.max_depth {
        let flat: Vec<&GrammarRule> =
            rules.iter().copied().filter(|r| slots(&r.program).iter().all(|s| base_nonterminal(s) != lhs)).collect();
        if !flat.is_empty() {
            rules = flat;
        }
    }
    let rule = rules.choose_weighted(rng, |r| r.weight).expect("rules exist");
    let mut program = rule.program.clone();
    let mut utterance = rule.utterance.clone();
    for slot in slots(&rule.program) {
        let key = format!("{{{slot}}}");
        let (p, u) = if slot == NUMBER_SLOT {
            let (lo, hi) = grammar.number_range;
            let n = rng.random_range(lo..=hi).to_string();
            (n.clone(), n)
        } else {
            expand(grammar, base_nonterminal(&slot), depth + 1, rng)
        };
        program = program.replacen(&key, &p, 1);
        utterance = utterance.replacen(&key, &u, 1);
    }
    (program, utterance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Iid,
    Template,
    HeldOutLs,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(SplitKind::Iid),
            "template" => Ok(SplitKind::Template),
            "held-out-ls" => Ok(SplitKind::HeldOutLs),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub split: SplitKind,
    pub seed: u64,
    /// Candidate programs per simulated auxiliary prediction.
    pub beams: usize,
    /// Probability that a beam swaps any given lexical symbol for another
    /// from its class.
    pub beam_noise: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self { n_train: 800, n_test: 200, split: SplitKind::HeldOutLs, seed: 0, beams: 3, beam_noise: 0.1 }
    }
}

/// Bookkeeping for one generated test example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureMeta {
    pub id: String,
    /// Held-out structures deliberately placed in this example.
    pub planted: Vec<String>,
    /// Every structure of size at most four absent from the training split.
    pub novel: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub corpus: Corpus,
    pub predictions: Vec<PredictionRecord>,
    pub meta: Vec<FixtureMeta>,
    /// Structures withheld from training (held-out-ls split only).
    pub held_out: Vec<String>,
}

struct Drawn {
    program: String,
    utterance: String,
    example: Example,
}

fn draw_unique(grammar: &GrammarConfig, wanted: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Drawn>> {
    let dialect = Dialect::default();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let max_attempts = 50 * wanted.max(1) + 1000;
    for _ in 0..max_attempts {
        if out.len() >= wanted {
            break;
        }
        let (program, utterance) = expand(grammar, &grammar.start, 0, rng);
        if !seen.insert(program.clone()) {
            continue;
        }
        let example = Example::new("", &utterance, &program, Split::Train, &dialect)
            .map_err(|e| Error::Generation(format!("grammar produced unparseable program '{program}': {e}")))?;
        out.push(Drawn { program, utterance, example });
    }
    Ok(out)
}

fn small_structures(e: &Example) -> impl Iterator<Item = &String> {
    e.ls_set.iter().filter(|s| canonical_size(s) <= UNOBSERVED_MAX_SIZE)
}

pub fn gen_fixture(grammar: &GrammarConfig, cfg: &FixtureConfig) -> Result<Fixture> {
    let total = cfg.n_train + cfg.n_test;
    if cfg.n_test == 0 || cfg.n_train == 0 {
        return Err(Error::Generation("n_train and n_test must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let oversample = match cfg.split {
        SplitKind::Iid => total,
        SplitKind::Template | SplitKind::HeldOutLs => total * 3,
    };
    let mut drawn = draw_unique(grammar, oversample, &mut rng)?;
    if drawn.len() < total {
        return Err(Error::Generation(format!(
            "grammar yielded {} distinct programs, {} requested",
            drawn.len(),
            total
        )));
    }

    let mut held_out = Vec::new();
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = match cfg.split {
        SplitKind::Iid => {
            drawn.shuffle(&mut rng);
            ((0..cfg.n_train).collect(), (cfg.n_train..total).collect())
        }
        SplitKind::Template => {
            let mut by_template: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, d) in drawn.iter().enumerate() {
                by_template.entry(d.example.template.as_str()).or_default().push(i);
            }
            let mut templates: Vec<&str> = by_template.keys().copied().collect();
            templates.shuffle(&mut rng);
            let mut test = Vec::new();
            let mut train = Vec::new();
            for t in templates {
                if test.len() < cfg.n_test {
                    test.extend(by_template[t].iter().copied());
                } else {
                    train.extend(by_template[t].iter().copied());
                }
            }
            test.sort_unstable();
            test.truncate(cfg.n_test);
            train.sort_unstable();
            if train.len() < cfg.n_train {
                return Err(Error::Generation("not enough templates left for training".into()));
            }
            train.truncate(cfg.n_train);
            (train, test)
        }
        SplitKind::HeldOutLs => {
            let (h, train, test) = hold_out_structures(&drawn, cfg, &mut rng)?;
            held_out = h;
            (train, test)
        }
    };

    let dialect = Dialect::default();
    let mut examples = Vec::with_capacity(total);
    for (n, &i) in train_idx.iter().enumerate() {
        let d = &drawn[i];
        examples.push(Example::new(format!("train-{:05}", n + 1), &d.utterance, &d.program, Split::Train, &dialect)?);
    }
    let train_union: BTreeSet<String> = examples.iter().flat_map(|e| e.ls_set.iter().cloned()).collect();
    let held: BTreeSet<&String> = held_out.iter().collect();
    let classes = grammar.lexical_classes();
    let mut meta = Vec::new();
    let mut predictions = Vec::new();
    for (n, &i) in test_idx.iter().enumerate() {
        let d = &drawn[i];
        let e = Example::new(format!("test-{:05}", n + 1), &d.utterance, &d.program, Split::Test, &dialect)?;
        meta.push(FixtureMeta {
            id: e.id.clone(),
            planted: e.ls_set.iter().filter(|s| held.contains(s)).cloned().collect(),
            novel: small_structures(&e).filter(|s| !train_union.contains(*s)).cloned().collect(),
        });
        let beams = (0..cfg.beams.max(1)).map(|_| perturb(&e.anonymized, &classes, cfg.beam_noise, &mut rng)).collect();
        predictions.push(PredictionRecord { id: e.id.clone(), beams });
        examples.push(e);
    }

    Ok(Fixture { corpus: Corpus::from_examples(examples, dialect), predictions, meta, held_out })
}

/// Picks size-3 structures to withhold until enough programs contain one.
fn hold_out_structures(
    drawn: &[Drawn],
    cfg: &FixtureConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<String>, Vec<usize>, Vec<usize>)> {
    let mut freq: BTreeMap<&String, usize> = BTreeMap::new();
    for d in drawn {
        for s in d.example.ls_set.iter().filter(|s| canonical_size(s) == 3) {
            *freq.entry(s).or_insert(0) += 1;
        }
    }
    let n = drawn.len() as f64;
    let mut candidates: Vec<&String> =
        freq.iter().filter(|(_, &f)| (f as f64) >= 0.01 * n && (f as f64) <= 0.15 * n).map(|(s, _)| *s).collect();
    candidates.shuffle(rng);

    let mut held: BTreeSet<String> = BTreeSet::new();
    let mut contains_held = vec![false; drawn.len()];
    for cand in candidates {
        let test_count = contains_held.iter().filter(|&&c| c).count();
        if test_count >= cfg.n_test {
            break;
        }
        let hits: Vec<usize> =
            (0..drawn.len()).filter(|&i| !contains_held[i] && drawn[i].example.ls_set.contains(cand)).collect();
        let train_left = contains_held.iter().filter(|&&c| !c).count() - hits.len();
        if train_left < cfg.n_train {
            continue;
        }
        for i in hits {
            contains_held[i] = true;
        }
        held.insert(cand.clone());
    }
    let test: Vec<usize> = (0..drawn.len()).filter(|&i| contains_held[i]).take(cfg.n_test).collect();
    let train: Vec<usize> = (0..drawn.len()).filter(|&i| !contains_held[i]).take(cfg.n_train).collect();
    if test.len() < cfg.n_test || train.len() < cfg.n_train {
        return Err(Error::Generation(format!(
            "held-out split produced {} train / {} test examples, {} / {} requested",
            train.len(),
            test.len(),
            cfg.n_train,
            cfg.n_test
        )));
    }
    Ok((held.into_iter().collect(), train, test))
}

/// Copy of an anonymized program with lexical symbols swapped at random.
fn perturb(program: &str, classes: &BTreeMap<String, Vec<String>>, noise: f64, rng: &mut ChaCha8Rng) -> String {
    fn walk(node: &mut AstNode, classes: &BTreeMap<String, Vec<String>>, noise: f64, rng: &mut ChaCha8Rng) {
        if node.children.is_empty() && node.kind == NodeKind::Function && rng.random_bool(noise) {
            if let Some(class) = classes.values().find(|c| c.contains(&node.symbol)) {
                let others: Vec<&String> = class.iter().filter(|s| **s != node.symbol).collect();
                if let Some(s) = others.choose(rng) {
                    node.symbol = (*s).clone();
                }
            }
        }
        for child in &mut node.children {
            walk(child, classes, noise, rng);
        }
    }
    let Ok(ast) = parse_program(program, &Dialect::default()) else {
        return program.to_string();
    };
    let mut body = ast.body().clone();
    walk(&mut body, classes, noise.clamp(0.0, 1.0), rng);
    body.render()
}

/// Structures observed anywhere in the training split.
pub fn training_union(corpus: &Corpus) -> BTreeSet<String> {
    corpus.split(Split::Train).flat_map(|e| e.ls_set.iter().cloned()).collect()
}

pub fn max_size_of(set: &BTreeSet<String>) -> MaxSize {
    MaxSize(set.iter().map(|s| canonical_size(s)).max())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_parsing() {
        assert_eq!(slots("f ({A}, {B#2}, {number})"), vec!["A", "B#2", "number"]);
        assert_eq!(base_nonterminal("B#2"), "B");
    }

    #[test]
    fn builtin_grammar_loads() {
        let g = GrammarConfig::covr();
        assert!(!g.rules.is_empty());
        assert!(g.lexical_classes().contains_key("NOUN"));
    }

    #[test]
    fn rejects_unknown_slot() {
        let text = r#"
start = "S"
max_depth = 2
[[rules]]
lhs = "S"
program = "f ({X})"
utterance = "{X}"
"#;
        assert!(matches!(GrammarConfig::from_toml(text), Err(Error::Generation(_))));
    }

    #[test]
    fn tiny_grammar_cannot_fill() {
        let text = r#"
start = "S"
max_depth = 1
[[rules]]
lhs = "S"
program = "f"
utterance = "eff"
"#;
        let g = GrammarConfig::from_toml(text).unwrap();
        let cfg = FixtureConfig { n_train: 5, n_test: 5, split: SplitKind::Iid, ..Default::default() };
        assert!(matches!(gen_fixture(&g, &cfg), Err(Error::Generation(_))));
    }
}
