//! Prompt rendering in the `source:` / `target:` format.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{DemonstrationSet, ScoredId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoOrder {
    /// Lowest score first, so the most similar demonstration sits next to
    /// the test utterance. Equal scores keep selection order.
    AscendingScore,
    Shuffled {
        seed: u64,
    },
}

pub fn order_demonstrations(set: &DemonstrationSet, order: DemoOrder) -> Vec<ScoredId> {
    let mut items = set.items.clone();
    match order {
        DemoOrder::AscendingScore => items.sort_by(|a, b| a.score.total_cmp(&b.score)),
        DemoOrder::Shuffled { seed } => items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    items
}

/// A demonstration as it appears in a prompt. `utterance` is `None` for the
/// programs-only variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demo {
    pub id: String,
    pub utterance: Option<String>,
    pub program: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub demo_ids: Vec<String>,
    pub truncated_count: usize,
    pub token_estimate: usize,
    /// Demonstration blocks in rendered order, then the test block.
    #[serde(skip)]
    blocks: Vec<String>,
}

impl Prompt {
    pub fn test_block(&self) -> &str {
        self.blocks.last().map_or("", String::as_str)
    }

    pub fn demo_blocks(&self) -> &[String] {
        &self.blocks[..self.blocks.len().saturating_sub(1)]
    }
}

fn demo_block(demo: &Demo) -> String {
    match &demo.utterance {
        Some(u) => format!("source: {u}\ntarget: {}\n", demo.program),
        None => format!("target: {}\n", demo.program),
    }
}

fn test_block(test_utterance: &str) -> String {
    format!("source: {test_utterance}\ntarget:")
}

/// Default token estimate: whitespace-delimited words times 1.3, rounded up.
pub fn default_token_count(text: &str) -> usize {
    let words = text.split_whitespace().count();
    (words * 13).div_ceil(10)
}

fn assemble(
    blocks: Vec<String>,
    demo_ids: Vec<String>,
    truncated_count: usize,
    counter: &dyn Fn(&str) -> usize,
) -> Prompt {
    let text: String = blocks.concat();
    Prompt { token_estimate: counter(&text), text, demo_ids, truncated_count, blocks }
}

pub fn format_prompt(demos: &[Demo], test_utterance: &str) -> Prompt {
    let mut blocks: Vec<String> = demos.iter().map(demo_block).collect();
    blocks.push(test_block(test_utterance));
    assemble(blocks, demos.iter().map(|d| d.id.clone()).collect(), 0, &default_token_count)
}

/// Drops demonstrations from the front until the prompt fits in `budget`
/// tokens as measured by `counter`.
pub fn truncate_prompt(prompt: &Prompt, budget: usize, counter: &dyn Fn(&str) -> usize) -> Result<Prompt> {
    let needed = counter(prompt.test_block());
    if needed > budget {
        return Err(Error::BudgetTooSmall { budget, needed });
    }
    let mut blocks = prompt.blocks.clone();
    let mut ids = prompt.demo_ids.clone();
    let mut dropped = 0;
    while counter(&blocks.concat()) > budget && blocks.len() > 1 {
        blocks.remove(0);
        ids.remove(0);
        dropped += 1;
    }
    Ok(assemble(blocks, ids, prompt.truncated_count + dropped, counter))
}

/// Prompt JSONL line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub prompt: String,
    pub demo_ids: Vec<String>,
    pub truncated: usize,
}

impl PromptRecord {
    pub fn new(id: impl Into<String>, prompt: &Prompt) -> Self {
        Self {
            id: id.into(),
            prompt: prompt.text.clone(),
            demo_ids: prompt.demo_ids.clone(),
            truncated: prompt.truncated_count,
        }
    }
}
