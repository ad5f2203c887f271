//! Completion endpoint client and the offline mock oracle.

use std::collections::BTreeSet;
#[cfg(feature = "http")]
use std::thread;
use std::time::Duration;

use log::debug;
#[cfg(feature = "http")]
use log::warn;
#[cfg(feature = "http")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::{anonymize, parse_program, Dialect};
use crate::structures::{program_structures, MaxSize};

pub const API_KEY_ENV: &str = "COVSEL_API_KEY";
pub const BASE_URL_ENV: &str = "COVSEL_BASE_URL";
pub const MODEL_ENV: &str = "COVSEL_MODEL";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned {status}: {body}")]
    Api { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    Response(String),
    #[error("invalid request: {0}")]
    Request(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 256,
            temperature: 0.0,
            stop: vec!["\n".to_string(), "source:".to_string()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    pub request_timeout: Duration,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".to_string(),
            api_key: None,
            model: "code-davinci-002".to_string(),
            max_retries: 5,
            initial_backoff: Duration::from_secs(1),
            max_backoff: Duration::from_secs(30),
            request_timeout: Duration::from_secs(60),
        }
    }
}

impl EndpointConfig {
    /// Defaults overridden by `COVSEL_BASE_URL`, `COVSEL_API_KEY` and
    /// `COVSEL_MODEL`.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            cfg.base_url = url;
        }
        cfg.api_key = std::env::var(API_KEY_ENV).ok();
        if let Ok(model) = std::env::var(MODEL_ENV) {
            cfg.model = model;
        }
        cfg
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.min(16));
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub retries: u32,
}

#[cfg(feature = "http")]
#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: &'a [String],
}

#[cfg(feature = "http")]
#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[cfg(feature = "http")]
#[derive(Deserialize)]
struct WireChoice {
    text: String,
}

/// Text before the earliest stop sequence, trimmed.
pub fn cut_at_stop(text: &str, stops: &[String]) -> String {
    let end = stops.iter().filter(|s| !s.is_empty()).filter_map(|s| text.find(s.as_str())).min().unwrap_or(text.len());
    text[..end].trim().to_string()
}

#[cfg(feature = "http")]
fn retryable(status: u16) -> bool {
    status == 429 || status >= 500
}

#[cfg(feature = "http")]
pub fn complete(req: &CompletionRequest, cfg: &EndpointConfig) -> Result<Completion, GatewayError> {
    if req.temperature.is_nan() || req.temperature < 0.0 {
        return Err(GatewayError::Request(format!("temperature must be non-negative, got {}", req.temperature)));
    }
    let client = reqwest::blocking::Client::builder()
        .timeout(cfg.request_timeout)
        .build()
        .map_err(|e| GatewayError::Transport { attempts: 0, message: e.to_string() })?;
    let url = format!("{}/completions", cfg.base_url.trim_end_matches('/'));
    let body = WireRequest {
        model: &cfg.model,
        prompt: &req.prompt,
        max_tokens: req.max_tokens,
        temperature: req.temperature,
        stop: &req.stop,
    };

    let mut attempt = 0u32;
    loop {
        let mut builder = client.post(&url).json(&body);
        if let Some(key) = &cfg.api_key {
            builder = builder.bearer_auth(key);
        }
        let outcome = builder.send();
        let retry_reason = match outcome {
            Ok(resp) => {
                let status = resp.status().as_u16();
                if resp.status().is_success() {
                    let parsed: WireResponse = resp.json().map_err(|e| GatewayError::Response(e.to_string()))?;
                    let first =
                        parsed.choices.into_iter().next().ok_or_else(|| GatewayError::Response("no choices".into()))?;
                    return Ok(Completion { text: cut_at_stop(&first.text, &req.stop), retries: attempt });
                }
                let text = resp.text().unwrap_or_default();
                let excerpt: String = text.chars().take(200).collect();
                if !retryable(status) || attempt >= cfg.max_retries {
                    return Err(GatewayError::Api { status, body: excerpt });
                }
                format!("status {status}")
            }
            Err(e) => {
                if attempt >= cfg.max_retries {
                    return Err(GatewayError::Transport { attempts: attempt + 1, message: e.to_string() });
                }
                e.to_string()
            }
        };
        let wait = cfg.backoff(attempt);
        warn!("completion attempt {} failed ({retry_reason}); retrying in {wait:?}", attempt + 1);
        thread::sleep(wait);
        attempt += 1;
    }
}

#[cfg(feature = "http")]
/// Sends requests with at most `width` in flight. Results keep input order.
pub fn complete_all(
    requests: &[CompletionRequest],
    cfg: &EndpointConfig,
    width: usize,
) -> Vec<Result<Completion, GatewayError>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(width.max(1)).build().expect("thread pool");
    pool.install(|| requests.par_iter().map(|r| complete(r, cfg)).collect())
}

// ---------------------------------------------------------------------------
// Mock oracle

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockOracleConfig {
    /// Gold local structures up to this size must all appear among the
    /// demonstrations for the mock to compose the gold program.
    pub compose_threshold_size: usize,
}

impl Default for MockOracleConfig {
    fn default() -> Self {
        Self { compose_threshold_size: 2 }
    }
}

fn structures_of(program: &str, dialect: &Dialect) -> BTreeSet<String> {
    parse_program(program, dialect)
        .map(|ast| program_structures(&anonymize(&ast), MaxSize::UNBOUNDED))
        .unwrap_or_default()
}

/// Deterministic stand-in for a language model. Returns the gold program
/// when the demonstrations jointly contain every small gold structure,
/// otherwise copies the demonstration sharing the most structures with the
/// gold program (first in prompt order on ties).
pub fn mock_complete(demo_programs: &[&str], gold: &str, dialect: &Dialect, cfg: &MockOracleConfig) -> String {
    if demo_programs.is_empty() {
        return String::new();
    }
    let gold_ls = structures_of(gold, dialect);
    let demo_ls: Vec<BTreeSet<String>> = demo_programs.iter().map(|p| structures_of(p, dialect)).collect();
    let threshold = MaxSize::at_most(cfg.compose_threshold_size.max(1));
    let composable = gold_ls
        .iter()
        .filter(|s| threshold.admits(crate::structures::canonical_size(s)))
        .all(|s| demo_ls.iter().any(|d| d.contains(s)));
    if composable {
        debug!("mock composes gold");
        return gold.to_string();
    }
    let mut best = 0;
    let mut best_overlap = 0;
    for (i, ls) in demo_ls.iter().enumerate() {
        let overlap = ls.intersection(&gold_ls).count();
        if overlap > best_overlap {
            best = i;
            best_overlap = overlap;
        }
    }
    demo_programs[best].to_string()
}
