//! Automatic sample generation.
//!
//! For each tool a generator backend proposes query-call pairs, a checker
//! backend filters out the unreasonable ones, and the survivors become Call
//! samples (gold tool among the candidates) or NoCall samples (gold tool
//! withheld). Raw conversational queries become NoSearch samples. The
//! result is split into train and valid sets; a test set is built the same
//! way from held-out tools.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::{complete, BackendError, Message, ModelBackend, Role};
use crate::clustering::ClusterModel;
use crate::par::{self, Parallelism};
use crate::registry::{Tool, ToolPool};
use crate::rng::derive_rng;
use crate::runtime::{
    parse_decision_call, ArgValue, CallCommand, CallDecision, PromptTemplates, TAG_ANSWER, TAG_CALL, TAG_NOCALL,
    TAG_SEARCH,
};
use crate::sampling::{SampleError, Sampler, SamplerConfig, Strategy};

pub const DEFAULT_PAIRS_PER_TOOL: usize = 10;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("generator produced no usable pairs for `{tool}` ({dropped} malformed)")]
    AllMalformed { tool: String, dropped: usize },
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("sample `{id}`: {reason}")]
    Invariant { id: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCallPair {
    pub query: String,
    pub call: CallCommand,
    pub tool_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    NoSearch,
    NoCall,
    Call,
}

impl SampleKind {
    pub const ALL: [SampleKind; 3] = [SampleKind::NoSearch, SampleKind::NoCall, SampleKind::Call];

    pub fn as_str(self) -> &'static str {
        match self {
            SampleKind::NoSearch => "nosearch",
            SampleKind::NoCall => "nocall",
            SampleKind::Call => "call",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Sampling strategy behind the candidates, `"none"` for NoSearch.
    pub strategy: String,
    pub seed: u64,
    pub fallback: bool,
    /// Cluster of the gold tool, when known.
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub kind: SampleKind,
    pub query: String,
    pub candidate_tools: Vec<String>,
    /// Present for Call samples. NoCall samples keep the withheld call so
    /// the gold tool can be excluded again when candidates are re-drawn.
    pub gold_call: Option<CallCommand>,
    pub metadata: SampleMeta,
}

impl Sample {
    /// Name of the gold tool, resolved through `pool` by api name.
    pub fn gold_tool<'p>(&self, pool: &'p ToolPool) -> Option<&'p Tool> {
        self.gold_call.as_ref().and_then(|c| pool.by_api_name(&c.api_name))
    }

    /// Checks the kind invariants against the pool the sample was drawn from.
    pub fn check(&self, pool: &ToolPool) -> Result<(), DatagenError> {
        let fail = |reason: String| DatagenError::Invariant {
            id: self.id.clone(),
            reason,
        };
        if let Some(name) = self.candidate_tools.iter().find(|n| !pool.contains(n)) {
            return Err(fail(format!("candidate `{name}` is not in the pool")));
        }
        let distinct: HashSet<&String> = self.candidate_tools.iter().collect();
        if distinct.len() != self.candidate_tools.len() {
            return Err(fail("duplicate candidate tools".into()));
        }
        match self.kind {
            SampleKind::NoSearch => {
                if !self.candidate_tools.is_empty() || self.gold_call.is_some() {
                    return Err(fail("NoSearch samples carry no tools and no call".into()));
                }
            }
            SampleKind::Call | SampleKind::NoCall => {
                let call = self.gold_call.as_ref().ok_or_else(|| fail("missing gold call".into()))?;
                let tool = pool
                    .by_api_name(&call.api_name)
                    .ok_or_else(|| fail(format!("gold api `{}` is not in the pool", call.api_name)))?;
                call.validate(&tool.function).map_err(|e| fail(e.to_string()))?;
                let present = self.candidate_tools.contains(&tool.name);
                if self.kind == SampleKind::Call && !present {
                    return Err(fail(format!("gold tool `{}` missing from candidates", tool.name)));
                }
                if self.kind == SampleKind::NoCall && present {
                    return Err(fail(format!("gold tool `{}` present in NoCall candidates", tool.name)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn parts(&self) -> [(&'static str, &[Sample]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }

    /// Kind invariants, unique ids, and test samples drawn from held-out
    /// tools only.
    pub fn validate(&self, pool_train: &ToolPool, pool_test: Option<&ToolPool>) -> Result<(), DatagenError> {
        let mut ids = HashSet::new();
        for (name, part) in self.parts() {
            for s in part {
                if !ids.insert(s.id.as_str()) {
                    return Err(DatagenError::Invariant {
                        id: s.id.clone(),
                        reason: format!("duplicate id in {name}"),
                    });
                }
                match (name, pool_test) {
                    ("test", Some(p)) => s.check(p)?,
                    ("test", None) => {}
                    _ => s.check(pool_train)?,
                }
                if name == "test" {
                    let uses_train = s.candidate_tools.iter().any(|t| pool_train.contains(t))
                        || s.gold_tool(pool_train).is_some();
                    if uses_train {
                        return Err(DatagenError::Invariant {
                            id: s.id.clone(),
                            reason: "test sample references a training tool".into(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Generator and checker prompts. Placeholders: `{{n}}`, `{{tool_name}}`,
/// `{{tool_description}}`, `{{function_signature}}`, and `{{pairs}}` for the
/// checker.
#[derive(Debug, Clone, PartialEq)]
pub struct DatagenTemplates {
    pub generate: String,
    pub check: String,
}

const DEFAULT_GENERATE: &str = "You are building training data for a tool-using assistant.\n\
Tool: {{tool_name}}\nDescription: {{tool_description}}\nFunction: {{function_signature}}\n\
Write {{n}} diverse, realistic user queries that need this tool, each with the function call that answers it.\n\
Reply with a JSON array only, one object per query: \
{\"query\": \"...\", \"call\": {\"api_name\": \"...\", \"args\": {\"name\": value}}}";

const DEFAULT_CHECK: &str = "Tool: {{tool_name}}\nDescription: {{tool_description}}\nFunction: {{function_signature}}\n\
Judge whether each query below is reasonable and whether its call answers it.\n{{pairs}}\n\
Reply with a JSON array of booleans only, one per pair, in order.";

impl Default for DatagenTemplates {
    fn default() -> Self {
        Self {
            generate: DEFAULT_GENERATE.into(),
            check: DEFAULT_CHECK.into(),
        }
    }
}

impl DatagenTemplates {
    /// Reads `generate.txt` and `check.txt` from `dir`, keeping defaults for
    /// missing files.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, DatagenError> {
        let dir = dir.as_ref();
        let mut t = Self::default();
        for (file, slot) in [("generate.txt", &mut t.generate), ("check.txt", &mut t.check)] {
            let path = dir.join(file);
            if path.exists() {
                *slot = fs::read_to_string(&path).map_err(io_err(&path))?.trim_end().to_string();
            }
        }
        Ok(t)
    }

    fn fill(template: &str, tool: &Tool) -> String {
        template
            .replace("{{tool_name}}", &tool.name)
            .replace("{{tool_description}}", &tool.description)
            .replace("{{function_signature}}", &tool.function.signature())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub pairs: Vec<QueryCallPair>,
    /// Entries that were malformed or broke the tool's function spec.
    pub dropped: usize,
}

/// Pulls the outermost JSON array out of a reply that may wrap it in prose or
/// code fences.
fn json_array(text: &str) -> Option<Vec<Value>> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    if end < start {
        return None;
    }
    serde_json::from_str(&text[start..=end]).ok()
}

fn parse_pair(entry: &Value, tool: &Tool) -> Option<QueryCallPair> {
    let query = entry.get("query")?.as_str()?.trim();
    if query.is_empty() {
        return None;
    }
    let call = entry.get("call")?;
    let api = call.get("api_name")?.as_str()?;
    if api != tool.function.api_name {
        return None;
    }
    let mut cmd = CallCommand::new(api);
    if let Some(args) = call.get("args") {
        for (k, v) in args.as_object()? {
            cmd.args.insert(k.clone(), ArgValue::from_json(v)?);
        }
    }
    cmd.validate(&tool.function).ok()?;
    Some(QueryCallPair {
        query: query.to_string(),
        call: cmd,
        tool_name: tool.name.clone(),
    })
}

/// Asks `generator` for `n_pairs` query-call pairs for `tool`.
pub fn generate_pairs(
    tool: &Tool,
    generator: &dyn ModelBackend,
    n_pairs: usize,
    templates: &DatagenTemplates,
) -> Result<Generated, DatagenError> {
    if n_pairs == 0 {
        return Err(DatagenError::InvalidConfig("n_pairs must be at least 1".into()));
    }
    let prompt = DatagenTemplates::fill(&templates.generate, tool).replace("{{n}}", &n_pairs.to_string());
    let out = complete(generator, &[Message::user(prompt)])?;
    let Some(entries) = json_array(&out) else {
        return Err(DatagenError::AllMalformed {
            tool: tool.name.clone(),
            dropped: 0,
        });
    };
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for e in entries.iter().take(n_pairs) {
        match parse_pair(e, tool) {
            Some(p) => pairs.push(p),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        tracing::warn!(tool = %tool.name, dropped, "dropped malformed generated pairs");
    }
    if pairs.is_empty() {
        return Err(DatagenError::AllMalformed {
            tool: tool.name.clone(),
            dropped,
        });
    }
    Ok(Generated { pairs, dropped })
}

/// Keeps the pairs the checker marks reasonable, in order. All pairs must
/// belong to `tool`.
pub fn check_pairs(
    tool: &Tool,
    pairs: Vec<QueryCallPair>,
    checker: &dyn ModelBackend,
    templates: &DatagenTemplates,
) -> Result<Vec<QueryCallPair>, DatagenError> {
    if pairs.is_empty() {
        return Ok(pairs);
    }
    let mut listing = String::new();
    for (i, p) in pairs.iter().enumerate() {
        let _ = writeln!(listing, "{}. query: {}\n   call: {}", i + 1, p.query, p.call);
    }
    let prompt = DatagenTemplates::fill(&templates.check, tool).replace("{{pairs}}", listing.trim_end());
    let out = complete(checker, &[Message::user(prompt)])?;
    let verdicts: Option<Vec<bool>> = json_array(&out).and_then(|v| v.iter().map(Value::as_bool).collect());
    match verdicts {
        Some(v) if v.len() == pairs.len() => Ok(pairs.into_iter().zip(v).filter(|(_, ok)| *ok).map(|(p, _)| p).collect()),
        _ => Err(BackendError::BadResponse(format!(
            "checker must reply with {} booleans, got {:?}",
            pairs.len(),
            crate::http::excerpt(&out)
        ))
        .into()),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenerationReport {
    pub generated: usize,
    pub dropped: usize,
    pub rejected: usize,
    pub kept: usize,
    /// Tools whose generation yielded nothing usable.
    pub failed_tools: Vec<String>,
}

/// Generates and checks pairs for every tool of `pool`. Tools run
/// concurrently under `mode`; results are keyed by tool name.
pub fn generate_for_pool(
    pool: &ToolPool,
    generator: &dyn ModelBackend,
    checker: &dyn ModelBackend,
    n_pairs: usize,
    templates: &DatagenTemplates,
    mode: Parallelism,
) -> Result<(BTreeMap<String, Vec<QueryCallPair>>, GenerationReport), DatagenError> {
    let results = par::map(pool.tools(), mode, |tool| -> Result<_, DatagenError> {
        match generate_pairs(tool, generator, n_pairs, templates) {
            Ok(g) => {
                let n = g.pairs.len();
                let kept = check_pairs(tool, g.pairs, checker, templates)?;
                Ok(Some((g.dropped, n, kept)))
            }
            Err(DatagenError::AllMalformed { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut out = BTreeMap::new();
    let mut report = GenerationReport::default();
    for (tool, r) in pool.tools().iter().zip(results) {
        match r? {
            Some((dropped, n, kept)) => {
                report.dropped += dropped;
                report.generated += n;
                report.rejected += n - kept.len();
                report.kept += kept.len();
                out.insert(tool.name.clone(), kept);
            }
            None => report.failed_tools.push(tool.name.clone()),
        }
    }
    Ok((out, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub call: f64,
    pub nocall: f64,
}

impl Default for Proportions {
    fn default() -> Self {
        Self { call: 0.6, nocall: 0.4 }
    }
}

impl Proportions {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let ok = (0.0..=1.0).contains(&self.call)
            && (0.0..=1.0).contains(&self.nocall)
            && ((self.call + self.nocall) - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DatagenError::InvalidConfig(format!(
                "proportions must be in [0, 1] and sum to 1, got call={} nocall={}",
                self.call, self.nocall
            )))
        }
    }

    /// Number of Call samples among `n` pairs. The epsilon absorbs binary
    /// rounding, e.g. 0.6 * 8650 = 5189.999...
    pub fn call_count(&self, n: usize) -> usize {
        ((self.call * n as f64) + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub nosearch: usize,
    pub nocall: usize,
    pub call: usize,
}

impl KindCounts {
    pub fn of(samples: &[Sample]) -> Self {
        let mut c = Self::default();
        for s in samples {
            *c.get_mut(s.kind) += 1;
        }
        c
    }

    pub fn get(&self, kind: SampleKind) -> usize {
        match kind {
            SampleKind::NoSearch => self.nosearch,
            SampleKind::NoCall => self.nocall,
            SampleKind::Call => self.call,
        }
    }

    fn get_mut(&mut self, kind: SampleKind) -> &mut usize {
        match kind {
            SampleKind::NoSearch => &mut self.nosearch,
            SampleKind::NoCall => &mut self.nocall,
            SampleKind::Call => &mut self.call,
        }
    }

    pub fn total(&self) -> usize {
        self.nosearch + self.nocall + self.call
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembleConfig {
    pub proportions: Proportions,
    /// Share of all samples held out for validation.
    pub valid_fraction: f64,
    /// Exact per-kind validation counts; overrides `valid_fraction`.
    pub valid_quota: Option<KindCounts>,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for AssembleConfig {
    fn default() -> Self {
        Self {
            proportions: Proportions::default(),
            valid_fraction: 0.1,
            valid_quota: None,
            seed: 0,
            parallelism: Parallelism::Sequential,
        }
    }
}

/// Pairs of `pool` tools in pool order, then pair order.
fn flatten<'p>(
    pool: &ToolPool,
    pairs_by_tool: &'p BTreeMap<String, Vec<QueryCallPair>>,
) -> Result<Vec<&'p QueryCallPair>, DatagenError> {
    if let Some(name) = pairs_by_tool.keys().find(|n| !pool.contains(n)) {
        return Err(SampleError::UnknownTool(name.clone()).into());
    }
    Ok(pool
        .tools()
        .iter()
        .filter_map(|t| pairs_by_tool.get(&t.name))
        .flatten()
        .collect())
}

/// Turns pairs into Call/NoCall samples over `pool`. Pairs are shuffled,
/// the first `call_count` become Call samples, and each candidate draw uses
/// its own indexed stream so the result does not depend on parallelism.
fn pair_samples(
    pool: &ToolPool,
    clusters: Option<&ClusterModel>,
    pairs_by_tool: &BTreeMap<String, Vec<QueryCallPair>>,
    sampler_cfg: &SamplerConfig,
    cfg: &AssembleConfig,
    id_prefix: &str,
) -> Result<Vec<Sample>, DatagenError> {
    cfg.proportions.validate()?;
    let mut pairs = flatten(pool, pairs_by_tool)?;
    pairs.shuffle(&mut derive_rng(cfg.seed, "assemble-order", 0));
    let n_call = cfg.proportions.call_count(pairs.len());
    let sampler_cfg = SamplerConfig {
        seed: cfg.seed,
        ..sampler_cfg.clone()
    };
    let sampler = Sampler::new(pool, clusters, sampler_cfg)?;
    let indexed: Vec<(usize, &QueryCallPair)> = pairs.into_iter().enumerate().collect();
    let samples = par::try_map(&indexed, cfg.parallelism, |&(i, p)| -> Result<Sample, DatagenError> {
        let include = i < n_call;
        let set = sampler.draw(Some(&p.tool_name), include, i as u64)?;
        Ok(Sample {
            id: String::new(),
            kind: if include { SampleKind::Call } else { SampleKind::NoCall },
            query: p.query.clone(),
            candidate_tools: set.names(),
            gold_call: Some(p.call.clone()),
            metadata: SampleMeta {
                strategy: set.strategy_used.as_str().to_string(),
                seed: cfg.seed,
                fallback: set.fallback,
                cluster: sampler.gold_cluster(&p.tool_name),
            },
        })
    })?;
    let mut calls = 0;
    let mut nocalls = 0;
    Ok(samples
        .into_iter()
        .map(|mut s| {
            let (tag, n) = match s.kind {
                SampleKind::Call => ("call", &mut calls),
                _ => ("nocall", &mut nocalls),
            };
            *n += 1;
            s.id = format!("{id_prefix}{tag}-{n:05}");
            s
        })
        .collect())
}

fn nosearch_samples(queries: &[String], seed: u64) -> Vec<Sample> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| Sample {
            id: format!("nosearch-{:05}", i + 1),
            kind: SampleKind::NoSearch,
            query: q.clone(),
            candidate_tools: Vec::new(),
            gold_call: None,
            metadata: SampleMeta {
                strategy: "none".into(),
                seed,
                fallback: false,
                cluster: None,
            },
        })
        .collect()
}

fn kind_rank(kind: SampleKind) -> usize {
    SampleKind::ALL.iter().position(|&k| k == kind).unwrap_or(0)
}

fn sort_samples(v: &mut [Sample]) {
    v.sort_by(|a, b| kind_rank(a.kind).cmp(&kind_rank(b.kind)).then_with(|| a.id.cmp(&b.id)));
}

/// Builds the train/valid split from training tools and NoSearch queries.
pub fn assemble_dataset(
    pool_train: &ToolPool,
    clusters: Option<&ClusterModel>,
    pairs_by_tool: &BTreeMap<String, Vec<QueryCallPair>>,
    sampler_cfg: &SamplerConfig,
    nosearch_queries: &[String],
    cfg: &AssembleConfig,
) -> Result<DatasetSplit, DatagenError> {
    if nosearch_queries.is_empty() {
        return Err(DatagenError::InvalidConfig("no NoSearch queries supplied".into()));
    }
    if !(0.0..1.0).contains(&cfg.valid_fraction) {
        return Err(DatagenError::InvalidConfig(format!(
            "valid_fraction must be in [0, 1), got {}",
            cfg.valid_fraction
        )));
    }
    let mut all = nosearch_samples(nosearch_queries, cfg.seed);
    all.extend(pair_samples(pool_train, clusters, pairs_by_tool, sampler_cfg, cfg, "")?);

    let mut valid_ids = HashSet::new();
    match cfg.valid_quota {
        Some(quota) => {
            for (ki, kind) in SampleKind::ALL.into_iter().enumerate() {
                let mut ids: Vec<&str> = all.iter().filter(|s| s.kind == kind).map(|s| s.id.as_str()).collect();
                let want = quota.get(kind);
                if want > ids.len() {
                    return Err(DatagenError::InvalidConfig(format!(
                        "valid quota {want} exceeds {} {} samples",
                        ids.len(),
                        kind.as_str()
                    )));
                }
                ids.shuffle(&mut derive_rng(cfg.seed, "valid-split", ki as u64));
                valid_ids.extend(ids.into_iter().take(want).map(str::to_string));
            }
        }
        None => {
            let n_valid = (all.len() as f64 * cfg.valid_fraction).round() as usize;
            let mut ids: Vec<&str> = all.iter().map(|s| s.id.as_str()).collect();
            ids.shuffle(&mut derive_rng(cfg.seed, "valid-split", 0));
            valid_ids.extend(ids.into_iter().take(n_valid).map(str::to_string));
        }
    }
    let (mut valid, mut train): (Vec<Sample>, Vec<Sample>) = all.into_iter().partition(|s| valid_ids.contains(&s.id));
    sort_samples(&mut train);
    sort_samples(&mut valid);
    Ok(DatasetSplit {
        train,
        valid,
        test: Vec::new(),
    })
}

/// Builds test samples over held-out tools. Without a cluster model for the
/// held-out pool, candidates are drawn at random.
pub fn assemble_test(
    pool_test: &ToolPool,
    clusters: Option<&ClusterModel>,
    pairs_by_tool: &BTreeMap<String, Vec<QueryCallPair>>,
    sampler_cfg: &SamplerConfig,
    cfg: &AssembleConfig,
) -> Result<Vec<Sample>, DatagenError> {
    let mut scfg = sampler_cfg.clone();
    if clusters.is_none() {
        scfg.mode = Strategy::Random;
    }
    let mut v = pair_samples(pool_test, clusters, pairs_by_tool, &scfg, cfg, "test-")?;
    sort_samples(&mut v);
    Ok(v)
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Fixed-format statistics table. Zero counts print as `-`.
pub fn stats_block(split: &DatasetSplit) -> String {
    let cell = |n: usize| if n == 0 { "-".to_string() } else { thousands(n) };
    let mut out = format!("{:<6}{:>11}{:>10}{:>10}{:>10}\n", "", "#NoSearch", "#NoCall", "#Call", "#Total");
    for (name, part) in [("Train", &split.train), ("Valid", &split.valid), ("Test", &split.test)] {
        let c = KindCounts::of(part);
        let _ = writeln!(
            out,
            "{:<6}{:>11}{:>10}{:>10}{:>10}",
            name,
            cell(c.nosearch),
            cell(c.nocall),
            cell(c.call),
            cell(c.total())
        );
    }
    out
}

pub fn write_jsonl(samples: &[Sample], path: impl AsRef<Path>) -> Result<(), DatagenError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).expect("samples serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sample>, DatagenError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatagenError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Writes `train.jsonl`, `valid.jsonl` and `test.jsonl` into `dir`.
pub fn save_split(split: &DatasetSplit, dir: impl AsRef<Path>) -> Result<(), DatagenError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, part) in split.parts() {
        write_jsonl(part, dir.join(format!("{name}.jsonl")))?;
    }
    Ok(())
}

/// Inverse of [`save_split`]; missing files read as empty.
pub fn load_split(dir: impl AsRef<Path>) -> Result<DatasetSplit, DatagenError> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(format!("{name}.jsonl"));
        if p.exists() {
            read_jsonl(p)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(DatasetSplit {
        train: read("train")?,
        valid: read("valid")?,
        test: read("test")?,
    })
}

/// One query per record: blank lines are skipped, JSON strings and objects
/// with a `query` field are unwrapped, anything else is taken verbatim.
pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<String>, DatagenError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| match serde_json::from_str::<Value>(l) {
            Ok(Value::String(s)) => s,
            Ok(Value::Object(o)) => match o.get("query") {
                Some(Value::String(s)) => s.clone(),
                _ => l.to_string(),
            },
            _ => l.to_string(),
        })
        .collect())
}

/// Chat-format training record. Keys beyond `messages` let the record be
/// read back as the sample it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<Message>,
    pub sample_id: String,
    pub candidate_tools: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub withheld_call: Option<CallCommand>,
    pub metadata: SampleMeta,
}

fn tool_lookup<'p>(pools: &[&'p ToolPool], name: &str) -> Option<&'p Tool> {
    pools.iter().find_map(|p| p.get(name))
}

/// Renders one sample as the conversation the runtime would hold with a
/// model that decides correctly.
pub fn sft_record(sample: &Sample, pools: &[&ToolPool], templates: &PromptTemplates) -> Result<SftRecord, DatagenError> {
    let mut messages = vec![Message::system(templates.system.clone()), Message::user(sample.query.clone())];
    let mut withheld_call = None;
    match sample.kind {
        SampleKind::NoSearch => messages.push(Message::assistant(TAG_ANSWER)),
        SampleKind::NoCall | SampleKind::Call => {
            let tools = sample
                .candidate_tools
                .iter()
                .map(|n| {
                    tool_lookup(pools, n).ok_or_else(|| DatagenError::Invariant {
                        id: sample.id.clone(),
                        reason: format!("candidate `{n}` not found in any pool"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            messages.push(Message::assistant(TAG_SEARCH));
            messages.push(Message::user(templates.render_tools(tools, true)));
            let call = sample.gold_call.as_ref().ok_or_else(|| DatagenError::Invariant {
                id: sample.id.clone(),
                reason: "missing gold call".into(),
            })?;
            if sample.kind == SampleKind::Call {
                messages.push(Message::assistant(format!("{TAG_CALL} {}", call.to_canonical())));
            } else {
                messages.push(Message::assistant(TAG_NOCALL));
                withheld_call = Some(call.clone());
            }
        }
    }
    Ok(SftRecord {
        messages,
        sample_id: sample.id.clone(),
        candidate_tools: sample.candidate_tools.clone(),
        withheld_call,
        metadata: sample.metadata.clone(),
    })
}

fn sample_from_sft(rec: SftRecord) -> Result<Sample, String> {
    let query = rec
        .messages
        .iter()
        .find(|m| m.role == Role::User)
        .ok_or("no user turn")?
        .content
        .clone();
    let assistant: Vec<&str> = rec
        .messages
        .iter()
        .filter(|m| m.role == Role::Assistant)
        .map(|m| m.content.as_str())
        .collect();
    let (kind, gold_call) = match assistant.as_slice() {
        [a] if a.trim_start().starts_with(TAG_ANSWER) => (SampleKind::NoSearch, None),
        [s, d] if s.trim() == TAG_SEARCH => match parse_decision_call(d).map_err(|e| e.to_string())? {
            CallDecision::Call(c) => (SampleKind::Call, Some(c)),
            CallDecision::NoCall => (SampleKind::NoCall, Some(rec.withheld_call.ok_or("NoCall record without withheld_call")?)),
        },
        _ => return Err("unrecognised assistant turns".into()),
    };
    Ok(Sample {
        id: rec.sample_id,
        kind,
        query,
        candidate_tools: rec.candidate_tools,
        gold_call,
        metadata: rec.metadata,
    })
}

/// Writes `sft_train.jsonl`, `sft_valid.jsonl` and `sft_test.jsonl` into
/// `dir`. `pools` must together hold every candidate tool.
pub fn export_sft(
    split: &DatasetSplit,
    pools: &[&ToolPool],
    templates: &PromptTemplates,
    dir: impl AsRef<Path>,
) -> Result<(), DatagenError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, part) in split.parts() {
        let path = dir.join(format!("sft_{name}.jsonl"));
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        for s in part {
            let rec = sft_record(s, pools, templates)?;
            writeln!(w, "{}", serde_json::to_string(&rec).expect("records serialize")).map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn import_sft(dir: impl AsRef<Path>) -> Result<DatasetSplit, DatagenError> {
    let dir = dir.as_ref();
    let read = |name: &str| -> Result<Vec<Sample>, DatagenError> {
        let path = dir.join(format!("sft_{name}.jsonl"));
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let parse_err = |line: usize, msg: String| DatagenError::Parse {
            path: path.clone(),
            line,
            msg,
        };
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let rec: SftRecord = serde_json::from_str(l).map_err(|e| parse_err(i + 1, e.to_string()))?;
                sample_from_sft(rec).map_err(|m| parse_err(i + 1, m))
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: read("train")?,
        valid: read("valid")?,
        test: read("test")?,
    })
}
