//! Browser bindings. Every export takes plain strings and numbers and
//! returns a JSON string, so the page needs no generated type glue.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

use covsel::corpus::{build_indexes, PredictionBundle};
use covsel::evaluation::coverage_metrics;
use covsel::fixture::{gen_fixture, FixtureConfig, GrammarConfig, SplitKind};
use covsel::pipeline::{select_for, SelectionConfig};
use covsel::program::{anonymize, parse_program, Dialect};
use covsel::prompting::{format_prompt, Demo};
use covsel::retrieval::Bm25Params;
use covsel::selection::Strategy;
use covsel::structures::{canonical_size, program_structures, MaxSize};

fn error_json(message: impl std::fmt::Display) -> String {
    json!({ "error": message.to_string() }).to_string()
}

/// Local structures of `program` grouped by size. `max_size` 0 means
/// unbounded.
#[wasm_bindgen]
pub fn enumerate_structures(program: &str, max_size: u32) -> String {
    let ast = match parse_program(program, &Dialect::default()) {
        Ok(ast) => ast,
        Err(e) => return error_json(e),
    };
    let anon = anonymize(&ast);
    let max = if max_size == 0 { MaxSize::UNBOUNDED } else { MaxSize::at_most(max_size as usize) };
    let mut by_size: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for s in program_structures(&anon, max) {
        by_size.entry(canonical_size(&s)).or_default().push(s);
    }
    json!({ "template": anon.render(), "by_size": by_size }).to_string()
}

#[derive(Serialize)]
struct Picked {
    id: String,
    utterance: String,
    program: String,
    score: f64,
}

/// Generates a small held-out fixture and contrasts Top-K with Cover-LS on
/// one test example.
#[wasm_bindgen]
pub fn compare_selection(seed: u32, k: u32, test_index: u32) -> String {
    let cfg = FixtureConfig {
        n_train: 300,
        n_test: 30,
        split: SplitKind::HeldOutLs,
        seed: seed as u64,
        ..Default::default()
    };
    let fixture = match gen_fixture(&GrammarConfig::covr(), &cfg) {
        Ok(f) => f,
        Err(e) => return error_json(e),
    };
    let index = build_indexes(&fixture.corpus, Bm25Params::default());
    let tests = fixture.corpus.test();
    let test = tests[test_index as usize % tests.len()];
    let prediction = fixture
        .predictions
        .iter()
        .find(|p| p.id == test.id)
        .map(|p| PredictionBundle::from_beams(p.id.clone(), &p.beams, &fixture.corpus.dialect));

    let mut out = serde_json::Map::new();
    for strategy in [Strategy::TopK, Strategy::CoverLs] {
        let sel_cfg = SelectionConfig { strategy, k: k.max(1) as usize, ..Default::default() };
        let record = match select_for(&index, test, prediction.as_ref(), &sel_cfg) {
            Ok(r) => r,
            Err(e) => return error_json(e),
        };
        let demos: Vec<_> = record.set.items.iter().filter_map(|i| index.example(&i.id).map(|e| (i, e))).collect();
        let structures: Vec<_> = demos.iter().map(|(_, e)| &e.ls_set).collect();
        let metrics = coverage_metrics(&structures, &test.ls_set);
        let picked: Vec<Picked> = demos
            .iter()
            .map(|(i, e)| Picked {
                id: e.id.clone(),
                utterance: e.utterance.clone(),
                program: e.program.clone(),
                score: i.score,
            })
            .collect();
        out.insert(strategy.name().to_string(), json!({ "demos": picked, "metrics": metrics }));
    }
    json!({
        "test": { "id": test.id, "utterance": test.utterance, "program": test.program },
        "held_out": fixture.held_out,
        "selections": out,
    })
    .to_string()
}

#[derive(Deserialize)]
struct DemoInput {
    #[serde(default)]
    utterance: Option<String>,
    program: String,
}

/// Renders a prompt from `[{utterance, program}, ...]` and a test utterance.
#[wasm_bindgen]
pub fn render_prompt(demos_json: &str, test_utterance: &str) -> String {
    let demos: Vec<DemoInput> = match serde_json::from_str(demos_json) {
        Ok(d) => d,
        Err(e) => return error_json(e),
    };
    let demos: Vec<Demo> = demos
        .into_iter()
        .enumerate()
        .map(|(i, d)| Demo { id: format!("d{}", i + 1), utterance: d.utterance, program: d.program })
        .collect();
    let prompt = format_prompt(&demos, test_utterance);
    json!({ "text": prompt.text, "token_estimate": prompt.token_estimate }).to_string()
}
