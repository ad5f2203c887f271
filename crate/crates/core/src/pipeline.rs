//! End-to-end orchestration: retrieval scores, selection, prompts,
//! inference and scoring over a built index.

use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, IndexBundle, PredictionBundle, Split};
use crate::error::{Error, Result};
use crate::evaluation::{score_record, EvalRecord, RecordInput};
#[cfg(feature = "http")]
use crate::gateway::{complete_all, CompletionRequest, EndpointConfig, GatewayError};
use crate::gateway::{mock_complete, MockOracleConfig};
use crate::program::parse_program;
use crate::prompting::{
    default_token_count, format_prompt, order_demonstrations, truncate_prompt, Demo, DemoOrder, PromptRecord,
};
use crate::retrieval::{fnv1a, random_scores, RetrieverConfig, RetrieverVariant};
use crate::selection::{
    cover_ls, cover_utt, dpp_select, select_random, select_top_k, training_mode_select, DemonstrationSet, Pick,
    Strategy, DEFAULT_CANDIDATE_POOL,
};
use crate::structures::MaxSize;

/// Caps the worker threads used by every parallel stage. Only the first
/// call has an effect.
pub fn configure_threads(jobs: usize) {
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
        warn!("thread pool already configured: {e}");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub retriever: RetrieverConfig,
    pub k: usize,
    pub max_ls_size: Option<usize>,
    pub candidate_pool: usize,
    /// Use the gold program in place of auxiliary predictions.
    pub oracle: bool,
    /// Fall back to Cover-Utt when no predicted structure is available.
    pub fallback_to_cover_utt: bool,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::CoverLs,
            retriever: RetrieverConfig::default(),
            k: 4,
            max_ls_size: Some(4),
            candidate_pool: DEFAULT_CANDIDATE_POOL,
            oracle: false,
            fallback_to_cover_utt: true,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidK(0));
        }
        if self.max_ls_size == Some(0) {
            return Err(Error::Config("max_ls_size must be at least 1".into()));
        }
        if self.candidate_pool == 0 {
            return Err(Error::Config("candidate_pool must be positive".into()));
        }
        self.retriever.validate()
    }

    fn max_size(&self) -> MaxSize {
        MaxSize(self.max_ls_size)
    }
}

/// One line of selections JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub id: String,
    #[serde(flatten)]
    pub set: DemonstrationSet,
    /// Cover-Utt was used because no structure could be predicted.
    #[serde(default)]
    pub fallback: bool,
}

/// Retriever scores over the index pool for one test example.
pub fn retriever_scores(
    index: &IndexBundle,
    test: &Example,
    prediction: Option<&PredictionBundle>,
    cfg: &SelectionConfig,
) -> Vec<f64> {
    match cfg.retriever.variant {
        RetrieverVariant::Bm25Utterance => index.utterance_bm25.score_all(&test.tokens),
        RetrieverVariant::Bm25Symbols => {
            let query: Vec<String> = if cfg.oracle {
                test.symbols.clone()
            } else {
                let mut syms: Vec<String> =
                    prediction.map(|p| p.ls_union(MaxSize::at_most(1)).into_iter().collect()).unwrap_or_default();
                if syms.is_empty() {
                    syms = test.tokens.clone();
                }
                syms
            };
            index.symbol_bm25.score_all(&query)
        }
        RetrieverVariant::OracleBm25GoldSymbols => index.symbol_bm25.score_all(&test.symbols),
        RetrieverVariant::Random => random_scores(index.pool.len(), cfg.retriever.seed, &test.id),
    }
}

pub fn select_for(
    index: &IndexBundle,
    test: &Example,
    prediction: Option<&PredictionBundle>,
    cfg: &SelectionConfig,
) -> Result<SelectionRecord> {
    let pool = index.pool_examples();
    let scores = retriever_scores(index, test, prediction, cfg);
    let idf = |t: &str| index.utterance_bm25.idf(t);
    let mut fallback = false;
    let set = match cfg.strategy {
        Strategy::TopK => select_top_k(&pool, &scores, cfg.k)?,
        Strategy::Random => select_random(&pool, &scores, cfg.k, cfg.seed ^ fnv1a(&test.id))?,
        Strategy::CoverUtt => cover_utt(&test.tokens, idf, &pool, &scores, cfg.k)?,
        Strategy::Dpp => dpp_select(&pool, &scores, &index.tfidf, cfg.k, cfg.candidate_pool)?,
        Strategy::CoverLs => {
            let elements: BTreeSet<String> = if cfg.oracle {
                test.ls_set.clone()
            } else {
                prediction.map(|p| p.ls_union(MaxSize::UNBOUNDED)).unwrap_or_default()
            };
            if elements.is_empty() && cfg.fallback_to_cover_utt {
                warn!("no predicted structures for '{}'; using utterance coverage", test.id);
                fallback = true;
                cover_utt(&test.tokens, idf, &pool, &scores, cfg.k)?
            } else {
                cover_ls(&elements, &pool, &scores, cfg.k, cfg.max_size(), Pick::RetrieverTop)?
            }
        }
        Strategy::CoverLsTrain => {
            let ast = parse_program(&test.program, &index.dialect)?;
            let others: Vec<&Example> = pool.iter().copied().filter(|e| e.id != test.id).collect();
            training_mode_select(&ast, &others, cfg.k, cfg.seed ^ fnv1a(&test.id))?
        }
    };
    Ok(SelectionRecord { id: test.id.clone(), set, fallback })
}

/// Selections for every test example, in parallel, in input order.
pub fn select_all(
    index: &IndexBundle,
    tests: &[&Example],
    predictions: &BTreeMap<String, PredictionBundle>,
    cfg: &SelectionConfig,
) -> Result<Vec<SelectionRecord>> {
    cfg.validate()?;
    let records: Result<Vec<_>> = tests.par_iter().map(|t| select_for(index, t, predictions.get(&t.id), cfg)).collect();
    let records = records?;
    let fallbacks = records.iter().filter(|r| r.fallback).count();
    if fallbacks > 0 {
        info!("{fallbacks} of {} selections fell back to utterance coverage", records.len());
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptConfig {
    pub order: DemoOrder,
    pub programs_only: bool,
    pub budget: Option<usize>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { order: DemoOrder::AscendingScore, programs_only: false, budget: None }
    }
}

pub fn prompt_for(
    index: &IndexBundle,
    test: &Example,
    set: &DemonstrationSet,
    cfg: &PromptConfig,
) -> Result<PromptRecord> {
    let demos = order_demonstrations(set, cfg.order)
        .into_iter()
        .map(|item| {
            let e = index
                .example(&item.id)
                .ok_or_else(|| Error::Config(format!("selected demonstration '{}' is not in the index", item.id)))?;
            Ok(Demo {
                id: e.id.clone(),
                utterance: (!cfg.programs_only).then(|| e.utterance.clone()),
                program: e.program.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut prompt = format_prompt(&demos, &test.utterance);
    if let Some(budget) = cfg.budget {
        prompt = truncate_prompt(&prompt, budget, &default_token_count)?;
    }
    Ok(PromptRecord::new(test.id.clone(), &prompt))
}

/// Inference output line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub id: String,
    pub prediction: String,
}

pub fn infer_mock(
    index: &IndexBundle,
    prompts: &[PromptRecord],
    cfg: &MockOracleConfig,
) -> Result<Vec<InferenceRecord>> {
    prompts
        .par_iter()
        .map(|p| {
            let gold = index.example(&p.id).ok_or_else(|| Error::Config(format!("no gold program for '{}'", p.id)))?;
            let demos: Vec<&str> =
                p.demo_ids.iter().filter_map(|id| index.example(id).map(|e| e.program.as_str())).collect();
            Ok(InferenceRecord {
                id: p.id.clone(),
                prediction: mock_complete(&demos, &gold.program, &index.dialect, cfg),
            })
        })
        .collect()
}

#[cfg(feature = "http")]
pub fn infer_endpoint(
    prompts: &[PromptRecord],
    cfg: &EndpointConfig,
    width: usize,
) -> std::result::Result<Vec<InferenceRecord>, GatewayError> {
    let requests: Vec<CompletionRequest> = prompts.iter().map(|p| CompletionRequest::new(p.prompt.clone())).collect();
    complete_all(&requests, cfg, width)
        .into_iter()
        .zip(prompts)
        .map(|(r, p)| r.map(|c| InferenceRecord { id: p.id.clone(), prediction: c.text }))
        .collect()
}

/// Structures seen anywhere in the index pool.
pub fn pool_structures(index: &IndexBundle) -> BTreeSet<String> {
    index.pool_examples().iter().flat_map(|e| e.ls_set.iter().cloned()).collect()
}

pub fn evaluate(
    index: &IndexBundle,
    prompts: &[PromptRecord],
    predictions: &[InferenceRecord],
    strategy: Option<&str>,
) -> Result<Vec<EvalRecord>> {
    let union = pool_structures(index);
    let by_id: BTreeMap<&str, &InferenceRecord> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    prompts
        .iter()
        .map(|p| {
            let gold = index.example(&p.id).ok_or_else(|| Error::Config(format!("no gold program for '{}'", p.id)))?;
            let prediction = by_id.get(p.id.as_str()).map_or("", |r| r.prediction.as_str());
            let demo_examples: Vec<&Example> = p.demo_ids.iter().filter_map(|id| index.example(id)).collect();
            let demos: Vec<(&str, &[String], &BTreeSet<String>)> =
                demo_examples.iter().map(|e| (e.program.as_str(), e.tokens.as_slice(), &e.ls_set)).collect();
            let input = RecordInput {
                id: &p.id,
                strategy,
                prediction,
                gold: &gold.program,
                test_tokens: &gold.tokens,
                demos: &demos,
                training_union: &union,
            };
            Ok(score_record(&input, &index.dialect))
        })
        .collect()
}

/// Finetuning record: a prompt built from training-mode selection plus the
/// program it should produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub prompt: String,
    pub target: String,
    pub demo_ids: Vec<String>,
}

pub fn training_dataset(
    index: &IndexBundle,
    k: usize,
    seed: u64,
    prompt_cfg: &PromptConfig,
) -> Result<Vec<TrainingRecord>> {
    let cfg = SelectionConfig { strategy: Strategy::CoverLsTrain, k, seed, ..Default::default() };
    let train: Vec<&Example> = index.examples.iter().filter(|e| e.split == Split::Train).collect();
    train
        .par_iter()
        .map(|e| {
            let sel = select_for(index, e, None, &cfg)?;
            let order = match prompt_cfg.order {
                DemoOrder::Shuffled { seed } => DemoOrder::Shuffled { seed: seed ^ fnv1a(&e.id) },
                other => other,
            };
            let p = prompt_for(index, e, &sel.set, &PromptConfig { order, ..*prompt_cfg })?;
            Ok(TrainingRecord { id: e.id.clone(), prompt: p.prompt, target: e.program.clone(), demo_ids: p.demo_ids })
        })
        .collect()
}
