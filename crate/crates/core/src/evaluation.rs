//! Prediction scoring, prompt coverage metrics and error classification.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::program::{
    anonymize, parens_balanced, parse_program, repair_parentheses_with, scan_symbols, to_template, Dialect, ProgramAst,
    RepairStatus,
};
use crate::structures::{canonical_size, program_structures, MaxSize};

/// Size bound for the unobserved-structure test.
pub const UNOBSERVED_MAX_SIZE: usize = 4;

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Equality after collapsing whitespace runs and trimming.
pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize_ws(pred) == normalize_ws(gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageMetrics {
    pub symbol_coverage: f64,
    pub ls_coverage: f64,
    pub unique_ls_count: usize,
}

/// How much of the gold program the demonstrations jointly contain.
/// `demo_structures` are the demonstrations' local-structure sets and
/// `gold_structures` the gold program's.
pub fn coverage_metrics(demo_structures: &[&BTreeSet<String>], gold_structures: &BTreeSet<String>) -> CoverageMetrics {
    let union: BTreeSet<&String> = demo_structures.iter().flat_map(|s| s.iter()).collect();
    let fraction = |items: Vec<&String>| -> f64 {
        if items.is_empty() {
            return 0.0;
        }
        let hit = items.iter().filter(|s| union.contains(*s)).count();
        hit as f64 / items.len() as f64
    };
    let symbols: Vec<&String> = gold_structures.iter().filter(|s| canonical_size(s) == 1).collect();
    CoverageMetrics {
        symbol_coverage: fraction(symbols),
        ls_coverage: fraction(gold_structures.iter().collect()),
        unique_ls_count: union.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorLabel {
    Syntax,
    OverCopy,
    OovHallucination,
    MissingSymbols,
}

impl ErrorLabel {
    pub const ALL: [ErrorLabel; 4] =
        [ErrorLabel::Syntax, ErrorLabel::OverCopy, ErrorLabel::OovHallucination, ErrorLabel::MissingSymbols];

    pub fn name(self) -> &'static str {
        match self {
            ErrorLabel::Syntax => "syntax",
            ErrorLabel::OverCopy => "over-copy",
            ErrorLabel::OovHallucination => "oov-hallucination",
            ErrorLabel::MissingSymbols => "missing-symbols",
        }
    }
}

fn parse_lenient(text: &str, dialect: &Dialect) -> Option<ProgramAst> {
    parse_program(text, dialect).ok().or_else(|| {
        let fix = repair_parentheses_with(text, dialect);
        if fix.status == RepairStatus::Repaired {
            parse_program(&fix.text, dialect).ok()
        } else {
            None
        }
    })
}

fn anon_symbols(text: &str, dialect: &Dialect) -> BTreeSet<String> {
    match parse_program(text, dialect) {
        Ok(ast) => anonymize(&ast).symbols().into_iter().map(String::from).collect(),
        Err(_) => scan_symbols(text).into_iter().collect(),
    }
}

/// Labels for a wrong prediction. Labels are independent and may co-occur.
/// An unbalanced prediction is classified on its repaired form when repair
/// succeeds, otherwise only the symbol-level labels are computed from its
/// tokens.
pub fn classify_errors(pred: &str, gold: &str, demos: &[&str], dialect: &Dialect) -> BTreeSet<ErrorLabel> {
    let mut labels = BTreeSet::new();
    if !parens_balanced(pred) {
        labels.insert(ErrorLabel::Syntax);
    }
    let parsed = parse_lenient(pred, dialect);
    let pred_symbols: BTreeSet<String> = match &parsed {
        Some(ast) => anonymize(ast).symbols().into_iter().map(String::from).collect(),
        None => scan_symbols(pred).into_iter().collect(),
    };

    if let Some(ast) = &parsed {
        let template = to_template(ast);
        let copied = demos.iter().filter_map(|d| parse_program(d, dialect).ok()).any(|d| to_template(&d) == template);
        if copied {
            labels.insert(ErrorLabel::OverCopy);
        }
    }

    let gold_symbols = anon_symbols(gold, dialect);
    let mut known = gold_symbols.clone();
    for d in demos {
        known.extend(anon_symbols(d, dialect));
    }
    if pred_symbols.iter().any(|s| !known.contains(s)) {
        labels.insert(ErrorLabel::OovHallucination);
    }
    if gold_symbols.iter().any(|s| !pred_symbols.contains(s)) {
        labels.insert(ErrorLabel::MissingSymbols);
    }
    labels
}

/// Whether the gold program has a local structure of size at most
/// [`UNOBSERVED_MAX_SIZE`] that never occurs in training.
pub fn unobserved_ls(gold_structures: &BTreeSet<String>, training_union: &BTreeSet<String>) -> bool {
    gold_structures.iter().filter(|s| canonical_size(s) <= UNOBSERVED_MAX_SIZE).any(|s| !training_union.contains(s))
}

/// Token Jaccard similarity; a lexical stand-in for embedding similarity.
pub fn utt_jaccard(a: &[String], b: &[String]) -> f64 {
    let a: BTreeSet<&String> = a.iter().collect();
    let b: BTreeSet<&String> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    pub prediction: String,
    pub gold: String,
    pub exact_match: bool,
    pub symbol_coverage: f64,
    pub ls_coverage: f64,
    pub unique_ls_count: usize,
    pub utt_jaccard: f64,
    pub error_labels: BTreeSet<ErrorLabel>,
    pub unobserved_ls: bool,
}

/// Inputs for scoring one test example.
pub struct RecordInput<'a> {
    pub id: &'a str,
    pub strategy: Option<&'a str>,
    pub prediction: &'a str,
    pub gold: &'a str,
    pub test_tokens: &'a [String],
    /// Demonstrations actually present in the prompt: program, utterance
    /// tokens and local structures.
    pub demos: &'a [(&'a str, &'a [String], &'a BTreeSet<String>)],
    pub training_union: &'a BTreeSet<String>,
}

pub fn score_record(input: &RecordInput<'_>, dialect: &Dialect) -> EvalRecord {
    let gold_structures = parse_program(input.gold, dialect)
        .map(|ast| program_structures(&anonymize(&ast), MaxSize::UNBOUNDED))
        .unwrap_or_default();
    let demo_ls: Vec<&BTreeSet<String>> = input.demos.iter().map(|d| d.2).collect();
    let coverage = coverage_metrics(&demo_ls, &gold_structures);
    let em = exact_match(input.prediction, input.gold);
    let error_labels = if em {
        BTreeSet::new()
    } else {
        let programs: Vec<&str> = input.demos.iter().map(|d| d.0).collect();
        classify_errors(input.prediction, input.gold, &programs, dialect)
    };
    let utt = if input.demos.is_empty() {
        0.0
    } else {
        input.demos.iter().map(|d| utt_jaccard(input.test_tokens, d.1)).sum::<f64>() / input.demos.len() as f64
    };
    EvalRecord {
        id: input.id.to_string(),
        strategy: input.strategy.map(String::from),
        prediction: input.prediction.to_string(),
        gold: input.gold.to_string(),
        exact_match: em,
        symbol_coverage: coverage.symbol_coverage,
        ls_coverage: coverage.ls_coverage,
        unique_ls_count: coverage.unique_ls_count,
        utt_jaccard: utt,
        error_labels,
        unobserved_ls: unobserved_ls(&gold_structures, input.training_union),
    }
}

/// One row of the summary report. Error rates are percentages of wrong
/// predictions carrying each label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub count: usize,
    pub accuracy: f64,
    pub symbol_coverage: f64,
    pub ls_coverage: f64,
    pub unique_ls_count: f64,
    pub utt_jaccard: f64,
    pub unobserved_ls_rate: f64,
    pub syntax_error_pct: f64,
    pub over_copy_pct: f64,
    pub oov_hallucination_pct: f64,
    pub missing_symbols_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

fn summarize(strategy: String, records: &[&EvalRecord]) -> SummaryRow {
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(|r| f(r)).sum::<f64>() / n;
    let wrong: Vec<&&EvalRecord> = records.iter().filter(|r| !r.exact_match).collect();
    let pct = |label: ErrorLabel| {
        if wrong.is_empty() {
            0.0
        } else {
            100.0 * wrong.iter().filter(|r| r.error_labels.contains(&label)).count() as f64 / wrong.len() as f64
        }
    };
    SummaryRow {
        strategy,
        count: records.len(),
        accuracy: mean(&|r| r.exact_match as u8 as f64),
        symbol_coverage: mean(&|r| r.symbol_coverage),
        ls_coverage: mean(&|r| r.ls_coverage),
        unique_ls_count: mean(&|r| r.unique_ls_count as f64),
        utt_jaccard: mean(&|r| r.utt_jaccard),
        unobserved_ls_rate: mean(&|r| r.unobserved_ls as u8 as f64),
        syntax_error_pct: pct(ErrorLabel::Syntax),
        over_copy_pct: pct(ErrorLabel::OverCopy),
        oov_hallucination_pct: pct(ErrorLabel::OovHallucination),
        missing_symbols_pct: pct(ErrorLabel::MissingSymbols),
    }
}

/// Means per strategy (records without one are grouped as `all`).
pub fn aggregate(records: &[EvalRecord]) -> Summary {
    let mut groups: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.strategy.clone().unwrap_or_else(|| "all".to_string())).or_default().push(r);
    }
    Summary { rows: groups.into_iter().map(|(s, rs)| summarize(s, &rs)).collect() }
}
