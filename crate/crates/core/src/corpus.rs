//! Datasets, auxiliary-model predictions and the persisted index bundle.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SyntaxError};
use crate::program::{anonymize, parse_program, repair_parentheses_with, to_template, Dialect, RepairStatus, Template};
use crate::retrieval::{ls_tfidf_vectors, tokenize_utterance, Bm25Index, Bm25Params, LsTfidfVector};
use crate::structures::{build_structure_graph, local_structure_counts, program_structures, MaxSize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

/// One utterance/program pair with everything selection needs precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub utterance: String,
    pub program: String,
    pub anonymized: String,
    pub template: Template,
    pub ls_set: BTreeSet<String>,
    /// Lower-cased utterance words.
    pub tokens: Vec<String>,
    /// Anonymized program symbols in pre-order.
    pub symbols: Vec<String>,
    pub split: Split,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        utterance: impl Into<String>,
        program: impl Into<String>,
        split: Split,
        dialect: &Dialect,
    ) -> Result<Self, SyntaxError> {
        let program = program.into();
        let utterance = utterance.into();
        let ast = parse_program(&program, dialect)?;
        let anon = anonymize(&ast);
        Ok(Self {
            id: id.into(),
            tokens: tokenize_utterance(&utterance),
            utterance,
            anonymized: anon.render(),
            template: to_template(&ast),
            ls_set: program_structures(&anon, MaxSize::UNBOUNDED),
            symbols: anon.symbols().into_iter().map(String::from).collect(),
            program,
            split,
        })
    }

    pub fn contains_ls(&self, canonical: &str) -> bool {
        self.ls_set.contains(canonical)
    }

    pub fn contains_token(&self, token: &str) -> bool {
        self.tokens.iter().any(|t| t == token)
    }

    /// Size-1 local structures: the distinct anonymized symbols.
    pub fn symbol_set(&self) -> BTreeSet<&str> {
        self.symbols.iter().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadFailure {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub failures: Vec<LoadFailure>,
    pub dialect: Dialect,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_examples(examples: Vec<Example>, dialect: Dialect) -> Self {
        let by_id = examples.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
        Self { examples, failures: Vec::new(), dialect, by_id }
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.by_id.get(id).map(|&i| &self.examples[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn train(&self) -> Vec<&Example> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&Example> {
        self.split(Split::Test).collect()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn unique_templates(&self) -> usize {
        self.examples.iter().map(|e| &e.template).collect::<BTreeSet<_>>().len()
    }

    pub fn unique_structures(&self) -> usize {
        self.examples.iter().flat_map(|e| e.ls_set.iter()).collect::<BTreeSet<_>>().len()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.examples {
            let record = ExampleRecord {
                id: Some(e.id.clone()),
                utterance: e.utterance.clone(),
                program: e.program.clone(),
                split: Some(e.split),
            };
            out.push_str(&serde_json::to_string(&record).expect("serializable"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Corpus JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub utterance: String,
    pub program: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Fraction of malformed lines above which loading fails.
pub const MAX_FAILURE_RATE: f64 = 0.10;

pub fn load_examples(path: &Path, dialect: &Dialect) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_examples_from(BufReader::new(file), dialect).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn load_examples_from(reader: impl BufRead, dialect: &Dialect) -> Result<Corpus> {
    let mut examples = Vec::new();
    let mut failures = Vec::new();
    let mut seen = BTreeSet::new();
    let mut lines = 0usize;
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        let lineno = n + 1;
        let record: ExampleRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                failures.push(LoadFailure { line: lineno, message: format!("invalid JSON: {e}") });
                continue;
            }
        };
        let id = record.id.unwrap_or_else(|| format!("ex-{lineno}"));
        if !seen.insert(id.clone()) {
            failures.push(LoadFailure { line: lineno, message: format!("duplicate id '{id}'") });
            continue;
        }
        match Example::new(id, record.utterance, record.program, record.split.unwrap_or_default(), dialect) {
            Ok(e) => examples.push(e),
            Err(err) => failures.push(LoadFailure { line: lineno, message: err.to_string() }),
        }
    }
    if lines == 0 {
        warn!("corpus is empty");
    }
    if lines > 0 && failures.len() as f64 > MAX_FAILURE_RATE * lines as f64 {
        return Err(Error::Corpus {
            message: format!("{} of {} lines failed to load", failures.len(), lines),
            failures: failures.iter().map(|f| format!("line {}: {}", f.line, f.message)).collect(),
        });
    }
    for f in &failures {
        warn!("skipped line {}: {}", f.line, f.message);
    }
    let mut corpus = Corpus::from_examples(examples, dialect.clone());
    corpus.failures = failures;
    Ok(corpus)
}

/// Candidate programs for one test utterance from an auxiliary parser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub id: String,
    /// Parseable beams after repair, anonymized.
    pub beams: Vec<String>,
    /// Parallel to `beams`: whether parenthesis repair changed the beam.
    pub repaired: Vec<bool>,
    /// Beams that could not be repaired.
    pub dropped: usize,
}

impl PredictionBundle {
    pub fn from_beams(id: impl Into<String>, raw: &[String], dialect: &Dialect) -> Self {
        let mut beams = Vec::new();
        let mut repaired = Vec::new();
        let mut dropped = 0;
        for beam in raw {
            let fix = repair_parentheses_with(beam, dialect);
            if fix.status == RepairStatus::Unrepairable {
                dropped += 1;
                continue;
            }
            match parse_program(&fix.text, dialect) {
                Ok(ast) => {
                    beams.push(anonymize(&ast).render());
                    repaired.push(fix.status == RepairStatus::Repaired);
                }
                Err(_) => dropped += 1,
            }
        }
        Self { id: id.into(), beams, repaired, dropped }
    }

    /// Union of the beams' local structures; empty when every beam was dropped.
    pub fn ls_union(&self, max_size: MaxSize) -> BTreeSet<String> {
        self.beams
            .iter()
            .filter_map(|b| parse_program(b, &Dialect::default()).ok())
            .flat_map(|ast| program_structures(&ast, max_size))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub beams: Vec<String>,
}

/// Reads prediction JSONL, keeping at most `beam_limit` beams per record.
pub fn load_predictions(
    path: &Path,
    dialect: &Dialect,
    test_ids: Option<&BTreeSet<String>>,
    beam_limit: Option<usize>,
) -> Result<BTreeMap<String, PredictionBundle>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(line)
            .map_err(|e| Error::format("prediction JSONL", format!("line {}: {e}", n + 1)))?;
        if test_ids.is_some_and(|ids| !ids.contains(&record.id)) {
            warn!("prediction for '{}' has no matching test example", record.id);
        }
        let beams = &record.beams[..beam_limit.map_or(record.beams.len(), |b| b.min(record.beams.len()))];
        let bundle = PredictionBundle::from_beams(record.id.clone(), beams, dialect);
        out.insert(record.id, bundle);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("serializable"));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(what, format!("line {}: {e}", n + 1))))
        .collect()
}

// ---------------------------------------------------------------------------
// Index bundle

pub const INDEX_MAGIC: &str = "covsel-index";
pub const INDEX_VERSION: u32 = 1;

/// Everything retrieval and selection need, built once over the training
/// split and persisted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexBundle {
    pub magic: String,
    pub version: u32,
    pub dialect: Dialect,
    pub examples: Vec<Example>,
    /// Positions in `examples` of the training pool, in corpus order.
    pub pool: Vec<usize>,
    /// Local-structure canonical form -> pool example ids.
    pub ls_postings: BTreeMap<String, Vec<String>>,
    /// Utterance token -> pool example ids.
    pub token_postings: BTreeMap<String, Vec<String>>,
    pub utterance_bm25: Bm25Index,
    pub symbol_bm25: Bm25Index,
    /// Parallel to `pool`.
    pub tfidf: Vec<LsTfidfVector>,
}

impl IndexBundle {
    pub fn pool_examples(&self) -> Vec<&Example> {
        self.pool.iter().map(|&i| &self.examples[i]).collect()
    }

    pub fn example(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn corpus(&self) -> Corpus {
        Corpus::from_examples(self.examples.clone(), self.dialect.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("serializable");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::format("index file", e))?;
        let magic = value.get("magic").and_then(|v| v.as_str()).unwrap_or("");
        let version = value.get("version").and_then(|v| v.as_u64());
        if magic != INDEX_MAGIC || version != Some(INDEX_VERSION as u64) {
            return Err(Error::IndexVersion {
                expected: format!("{INDEX_MAGIC} v{INDEX_VERSION}"),
                found: format!("{magic} v{}", version.map_or("?".to_string(), |v| v.to_string())),
            });
        }
        serde_json::from_value(value).map_err(|e| Error::format("index file", e))
    }
}

pub fn build_indexes(corpus: &Corpus, params: Bm25Params) -> IndexBundle {
    let pool: Vec<usize> =
        corpus.examples.iter().enumerate().filter(|(_, e)| e.split == Split::Train).map(|(i, _)| i).collect();
    let pool_examples: Vec<&Example> = pool.iter().map(|&i| &corpus.examples[i]).collect();

    let mut ls_postings: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut token_postings: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in &pool_examples {
        for ls in &e.ls_set {
            ls_postings.entry(ls.clone()).or_default().push(e.id.clone());
        }
        let distinct: BTreeSet<&String> = e.tokens.iter().collect();
        for t in distinct {
            token_postings.entry(t.clone()).or_default().push(e.id.clone());
        }
    }

    let utterance_bm25 = Bm25Index::build(pool_examples.iter().map(|e| (e.id.clone(), e.tokens.clone())), params);
    let symbol_bm25 = Bm25Index::build(pool_examples.iter().map(|e| (e.id.clone(), e.symbols.clone())), params);

    let counts: Vec<BTreeMap<String, usize>> = pool_examples
        .iter()
        .map(|e| {
            parse_program(&e.anonymized, &Dialect::default())
                .map(|ast| local_structure_counts(&build_structure_graph(&ast), MaxSize::UNBOUNDED))
                .unwrap_or_default()
        })
        .collect();

    IndexBundle {
        magic: INDEX_MAGIC.to_string(),
        version: INDEX_VERSION,
        dialect: corpus.dialect.clone(),
        examples: corpus.examples.clone(),
        pool,
        ls_postings,
        token_postings,
        utterance_bm25,
        symbol_bm25,
        tfidf: ls_tfidf_vectors(&counts),
    }
}
