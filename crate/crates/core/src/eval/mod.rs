//! Decision metrics and multi-trial evaluation.
//!
//! Decision-Search: `P_NoSearch = n_nos/N_nos`, `P_Search = n_s/N_s`,
//! `P_DS = (n_nos + n_s)/(N_nos + N_s)`. Decision-Call: `P_NoCall`,
//! `P_Call` and `P_DC` likewise over NoCall and Call samples, with
//! `N_s = N_noc + N_c`.

mod text;

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{ApiExecutor, ModelBackend};
use crate::clustering::ClusterModel;
use crate::datagen::{Sample, SampleKind};
use crate::embedding::EmbeddingProvider;
use crate::par::{self, Parallelism};
use crate::registry::ToolPool;
use crate::rng::derive_seed;
use crate::runtime::{Agent, Branch, DecisionTrace, RuntimeConfig, RuntimeError};
use crate::sampling::{SampleError, Sampler, SamplerConfig, Strategy};

pub use text::{bleu, rouge, RougeScores, TextMetricError};

pub const DEFAULT_TRIALS: usize = 6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample/trace mismatch: {0}")]
    IdMismatch(String),
    #[error("sample `{id}`: {source}")]
    Runtime {
        id: String,
        #[source]
        source: RuntimeError,
    },
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// How strictly a branch-④ trace must match a Call sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectnessPolicy {
    /// Any call counts.
    DecisionOnly,
    /// The called api equals the gold api.
    #[default]
    ToolMatch,
    /// Api and canonical arguments equal the gold call.
    FullMatch,
}

impl CorrectnessPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrectnessPolicy::DecisionOnly => "decision-only",
            CorrectnessPolicy::ToolMatch => "tool-match",
            CorrectnessPolicy::FullMatch => "full-match",
        }
    }
}

impl std::str::FromStr for CorrectnessPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "decision-only" => Ok(Self::DecisionOnly),
            "tool-match" => Ok(Self::ToolMatch),
            "full-match" => Ok(Self::FullMatch),
            other => Err(format!("unknown correctness policy `{other}`")),
        }
    }
}

/// A trace tagged with the sample it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrace {
    pub sample_id: String,
    pub trace: DecisionTrace,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub n_nos: u64,
    pub N_nos: u64,
    pub n_s: u64,
    pub N_s: u64,
    pub n_noc: u64,
    pub N_noc: u64,
    pub n_c: u64,
    pub N_c: u64,
}

fn ratio(num: u64, den: u64) -> Option<Ratio<u64>> {
    (den > 0).then(|| Ratio::new(num, den))
}

fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "P_NoSearch")]
    NoSearch,
    #[serde(rename = "P_Search")]
    Search,
    #[serde(rename = "P_DS")]
    DecisionSearch,
    #[serde(rename = "P_NoCall")]
    NoCall,
    #[serde(rename = "P_Call")]
    Call,
    #[serde(rename = "P_DC")]
    DecisionCall,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::NoSearch,
        Metric::Search,
        Metric::DecisionSearch,
        Metric::NoCall,
        Metric::Call,
        Metric::DecisionCall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::NoSearch => "P_NoSearch",
            Metric::Search => "P_Search",
            Metric::DecisionSearch => "P_DS",
            Metric::NoCall => "P_NoCall",
            Metric::Call => "P_Call",
            Metric::DecisionCall => "P_DC",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl MetricCounts {
    /// Exact value of `metric`, `None` when its denominator is zero.
    pub fn exact(&self, metric: Metric) -> Option<Ratio<u64>> {
        match metric {
            Metric::NoSearch => ratio(self.n_nos, self.N_nos),
            Metric::Search => ratio(self.n_s, self.N_s),
            Metric::DecisionSearch => ratio(self.n_nos + self.n_s, self.N_nos + self.N_s),
            Metric::NoCall => ratio(self.n_noc, self.N_noc),
            Metric::Call => ratio(self.n_c, self.N_c),
            Metric::DecisionCall => ratio(self.n_noc + self.n_c, self.N_noc + self.N_c),
        }
    }

    pub fn value(&self, metric: Metric) -> Option<f64> {
        self.exact(metric).map(to_f64)
    }

    pub fn p_nosearch(&self) -> Option<f64> {
        self.value(Metric::NoSearch)
    }

    pub fn p_search(&self) -> Option<f64> {
        self.value(Metric::Search)
    }

    pub fn p_ds(&self) -> Option<f64> {
        self.value(Metric::DecisionSearch)
    }

    pub fn p_nocall(&self) -> Option<f64> {
        self.value(Metric::NoCall)
    }

    pub fn p_call(&self) -> Option<f64> {
        self.value(Metric::Call)
    }

    pub fn p_dc(&self) -> Option<f64> {
        self.value(Metric::DecisionCall)
    }

    /// Every `n ≤ N` and `N_s = N_noc + N_c`.
    pub fn is_consistent(&self) -> bool {
        self.n_nos <= self.N_nos
            && self.n_s <= self.N_s
            && self.n_noc <= self.N_noc
            && self.n_c <= self.N_c
            && self.N_s == self.N_noc + self.N_c
    }
}

impl std::ops::Add for MetricCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            n_nos: self.n_nos + o.n_nos,
            N_nos: self.N_nos + o.N_nos,
            n_s: self.n_s + o.n_s,
            N_s: self.N_s + o.N_s,
            n_noc: self.n_noc + o.n_noc,
            N_noc: self.N_noc + o.N_noc,
            n_c: self.n_c + o.n_c,
            N_c: self.N_c + o.N_c,
        }
    }
}

/// Contribution of one (sample, trace) pair.
pub fn score_one(sample: &Sample, trace: &DecisionTrace, policy: CorrectnessPolicy) -> MetricCounts {
    let mut c = MetricCounts::default();
    let branch = if trace.aborted.is_none() { trace.branch } else { None };
    match sample.kind {
        SampleKind::NoSearch => {
            c.N_nos = 1;
            c.n_nos = u64::from(branch == Some(Branch::NoSearch));
        }
        SampleKind::NoCall | SampleKind::Call => {
            c.N_s = 1;
            c.n_s = u64::from(matches!(branch, Some(Branch::NoCall | Branch::Call)));
            if sample.kind == SampleKind::NoCall {
                c.N_noc = 1;
                c.n_noc = u64::from(branch == Some(Branch::NoCall));
            } else {
                c.N_c = 1;
                let called = match (branch, trace.call(), sample.gold_call.as_ref()) {
                    (Some(Branch::Call), Some(call), Some(gold)) => match policy {
                        CorrectnessPolicy::DecisionOnly => true,
                        CorrectnessPolicy::ToolMatch => call.api_name == gold.api_name,
                        CorrectnessPolicy::FullMatch => call.same_call(gold),
                    },
                    (Some(Branch::Call), _, None) => policy == CorrectnessPolicy::DecisionOnly,
                    _ => false,
                };
                c.n_c = u64::from(called);
            }
        }
    }
    c
}

/// Scores traces against samples, matched by sample id. Aborted traces
/// count as wrong at both levels.
pub fn score_decisions(
    samples: &[Sample],
    traces: &[LabeledTrace],
    policy: CorrectnessPolicy,
) -> Result<MetricCounts, EvalError> {
    if samples.len() != traces.len() {
        return Err(EvalError::IdMismatch(format!(
            "{} samples but {} traces",
            samples.len(),
            traces.len()
        )));
    }
    let mut by_id: HashMap<&str, &DecisionTrace> = HashMap::with_capacity(traces.len());
    for t in traces {
        if by_id.insert(&t.sample_id, &t.trace).is_some() {
            return Err(EvalError::IdMismatch(format!("duplicate trace for `{}`", t.sample_id)));
        }
    }
    samples.iter().try_fold(MetricCounts::default(), |acc, s| {
        let t = by_id
            .get(s.id.as_str())
            .ok_or_else(|| EvalError::IdMismatch(format!("no trace for `{}`", s.id)))?;
        Ok(acc + score_one(s, t, policy))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean and sample (n − 1) standard deviation.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = (values.iter().sum::<f64>() / n).clamp(min, max);
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(Summary { mean, std, min, max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub counts: MetricCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: Metric,
    /// One value per trial; empty when the metric's denominator is zero.
    pub values: Vec<f64>,
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub policy: CorrectnessPolicy,
    pub trials: usize,
    /// What varies between trials.
    pub varied: String,
    pub per_trial: Vec<TrialResult>,
    pub metrics: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn from_trials(policy: CorrectnessPolicy, varied: impl Into<String>, per_trial: Vec<TrialResult>) -> Self {
        let metrics = Metric::ALL
            .into_iter()
            .map(|metric| {
                let values: Vec<f64> = per_trial.iter().filter_map(|t| t.counts.value(metric)).collect();
                MetricEntry {
                    metric,
                    summary: summarize(&values),
                    values,
                }
            })
            .collect();
        Self {
            policy,
            trials: per_trial.len(),
            varied: varied.into(),
            per_trial,
            metrics,
        }
    }

    pub fn get(&self, metric: Metric) -> Option<&MetricEntry> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.get(metric).and_then(|m| m.summary).map(|s| s.mean)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Percentages, one column per metric, mean and std rows.
    pub fn to_table(&self) -> String {
        let mut out = format!("policy: {}  trials: {}\n", self.policy.as_str(), self.trials);
        let _ = write!(out, "{:<6}", "");
        for m in &self.metrics {
            let _ = write!(out, "{:>12}", m.metric.name());
        }
        out.push('\n');
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let _ = write!(out, "{label:<6}");
            for m in &self.metrics {
                let cell = m.summary.map_or("-".to_string(), |s| {
                    format!("{:.2}", 100.0 * if pick == 0 { s.mean } else { s.std })
                });
                let _ = write!(out, "{cell:>12}");
            }
            out.push('\n');
        }
        out
    }
}

/// Everything needed to run samples through the runtime.
#[derive(Clone)]
pub struct EvalEnv<'a> {
    pub backend: &'a dyn ModelBackend,
    pub executor: &'a dyn ApiExecutor,
    pub provider: &'a dyn EmbeddingProvider,
    /// Must hold every candidate and gold tool of the samples.
    pub pool: &'a ToolPool,
    pub clusters: Option<&'a ClusterModel>,
    pub sampler: SamplerConfig,
    pub runtime: RuntimeConfig,
    pub policy: CorrectnessPolicy,
    /// Redraw Search-kind candidate sets per trial; otherwise the stored
    /// sets are reused and only the backend varies.
    pub resample: bool,
    pub parallelism: Parallelism,
}

/// Candidate names for every sample under trial `seed`. NoSearch samples
/// get `None`, so a model that searches anyway is shown retrieved tools.
pub fn trial_candidates(env: &EvalEnv<'_>, samples: &[Sample], seed: u64) -> Result<Vec<Option<Vec<String>>>, EvalError> {
    let mut cfg = SamplerConfig {
        seed,
        ..env.sampler.clone()
    };
    if env.clusters.is_none() && cfg.mode != Strategy::Random {
        cfg.mode = Strategy::Random;
    }
    let sampler = Sampler::new(env.pool, env.clusters, cfg)?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.kind == SampleKind::NoSearch {
                return Ok(None);
            }
            if !env.resample {
                return Ok(Some(s.candidate_tools.clone()));
            }
            let gold = s.gold_tool(env.pool).map(|t| t.name.as_str());
            let set = sampler.draw(gold, s.kind == SampleKind::Call, i as u64)?;
            Ok(Some(set.names()))
        })
        .collect()
}

/// Runs one pass over `samples` with trial `seed`.
pub fn run_trial(env: &EvalEnv<'_>, samples: &[Sample], seed: u64) -> Result<Vec<LabeledTrace>, EvalError> {
    let candidates = trial_candidates(env, samples, seed)?;
    let jobs: Vec<(&Sample, &Option<Vec<String>>)> = samples.iter().zip(&candidates).collect();
    let agent = Agent::new(env.backend, env.pool, env.provider, env.executor, &env.runtime);
    par::try_map(&jobs, env.parallelism, |(s, c)| {
        agent
            .answer(&s.query, c.as_deref())
            .map(|trace| LabeledTrace {
                sample_id: s.id.clone(),
                trace,
            })
            .map_err(|source| EvalError::Runtime {
                id: s.id.clone(),
                source,
            })
    })
}

pub fn trial_seed(base_seed: u64, trial: usize) -> u64 {
    derive_seed(base_seed, "trial", trial as u64)
}

/// Runs `n_trials` passes and summarizes them. Trial `i` uses seed
/// [`trial_seed`]`(base_seed, i)`.
pub fn run_trials(env: &EvalEnv<'_>, samples: &[Sample], n_trials: usize, base_seed: u64) -> Result<MetricReport, EvalError> {
    run_trials_with_traces(env, samples, n_trials, base_seed).map(|(r, _)| r)
}

pub fn run_trials_with_traces(
    env: &EvalEnv<'_>,
    samples: &[Sample],
    n_trials: usize,
    base_seed: u64,
) -> Result<(MetricReport, Vec<Vec<LabeledTrace>>), EvalError> {
    if n_trials == 0 {
        return Err(EvalError::InvalidConfig("n_trials must be at least 1".into()));
    }
    let mut per_trial = Vec::with_capacity(n_trials);
    let mut all = Vec::with_capacity(n_trials);
    for i in 0..n_trials {
        let seed = trial_seed(base_seed, i);
        let traces = run_trial(env, samples, seed)?;
        per_trial.push(TrialResult {
            seed,
            counts: score_decisions(samples, &traces, env.policy)?,
        });
        all.push(traces);
    }
    let varied = if env.resample {
        "candidate toolset sampling seed"
    } else {
        "backend only (stored candidate sets)"
    };
    Ok((MetricReport::from_trials(env.policy, varied, per_trial), all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SampleMeta;
    use crate::runtime::CallCommand;

    fn counts(n_nos: u64, nn_nos: u64, n_s: u64, nn_s: u64) -> MetricCounts {
        MetricCounts {
            n_nos,
            N_nos: nn_nos,
            n_s,
            N_s: nn_s,
            ..MetricCounts::default()
        }
    }

    #[test]
    fn decision_search_example() {
        let c = counts(3, 4, 9, 10);
        assert_eq!(c.p_nosearch(), Some(0.75));
        assert_eq!(c.p_search(), Some(0.9));
        assert_eq!(c.exact(Metric::DecisionSearch), Some(Ratio::new(12, 14)));
        assert_eq!(c.p_call(), None);
    }

    #[test]
    fn decision_call_example() {
        let c = MetricCounts {
            n_noc: 2,
            N_noc: 4,
            n_c: 3,
            N_c: 6,
            N_s: 10,
            ..MetricCounts::default()
        };
        assert_eq!(c.p_nocall(), Some(0.5));
        assert_eq!(c.p_call(), Some(0.5));
        assert_eq!(c.p_dc(), Some(0.5));
        assert!(c.is_consistent());
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[0.8, 0.9]).unwrap();
        assert!((s.mean - 0.85).abs() < 1e-12);
        assert!((s.std - 0.070_710_678_118_654_76).abs() < 1e-12);
        let one = summarize(&[0.3]).unwrap();
        assert_eq!((one.mean, one.std), (0.3, 0.0));
        let same = summarize(&[0.1, 0.1, 0.1]).unwrap();
        assert_eq!((same.mean, same.std), (0.1, 0.0));
        assert!(summarize(&[]).is_none());
    }

    fn sample(id: &str, kind: SampleKind, gold: Option<CallCommand>) -> Sample {
        Sample {
            id: id.into(),
            kind,
            query: id.into(),
            candidate_tools: vec![],
            gold_call: gold,
            metadata: SampleMeta {
                strategy: "none".into(),
                seed: 0,
                fallback: false,
                cluster: None,
            },
        }
    }

    fn trace(branch: Option<Branch>, call: Option<CallCommand>) -> DecisionTrace {
        let t = serde_json::json!({
            "query": "q", "branch": branch, "candidate_tools": [], "steps": [], "final_answer": null,
            "calls": call.map(|c| vec![serde_json::json!({"command": c, "response": {"status": 200, "body": "", "latency_ms": 0.0}})]).unwrap_or_default(),
        });
        serde_json::from_value(t).unwrap()
    }

    #[test]
    fn policies() {
        let gold = CallCommand::new("f").arg("x", 1.0);
        let s = sample("c", SampleKind::Call, Some(gold.clone()));
        let other_args = trace(Some(Branch::Call), Some(CallCommand::new("f").arg("x", 2.0)));
        let other_api = trace(Some(Branch::Call), Some(CallCommand::new("g")));
        let exact = trace(Some(Branch::Call), Some(gold));
        let score = |t: &DecisionTrace, p| score_one(&s, t, p).n_c;
        assert_eq!(score(&other_api, CorrectnessPolicy::DecisionOnly), 1);
        assert_eq!(score(&other_api, CorrectnessPolicy::ToolMatch), 0);
        assert_eq!(score(&other_args, CorrectnessPolicy::ToolMatch), 1);
        assert_eq!(score(&other_args, CorrectnessPolicy::FullMatch), 0);
        assert_eq!(score(&exact, CorrectnessPolicy::FullMatch), 1);
        // a Call sample answered with NoCall is right at the search level only
        let c = score_one(&s, &trace(Some(Branch::NoCall), None), CorrectnessPolicy::ToolMatch);
        assert_eq!((c.n_s, c.N_s, c.n_c, c.N_c, c.N_noc), (1, 1, 0, 1, 0));
    }

    #[test]
    fn id_alignment() {
        let samples = vec![sample("a", SampleKind::NoSearch, None), sample("b", SampleKind::NoSearch, None)];
        let lt = |id: &str| LabeledTrace {
            sample_id: id.into(),
            trace: trace(Some(Branch::NoSearch), None),
        };
        let c = score_decisions(&samples, &[lt("b"), lt("a")], CorrectnessPolicy::default()).unwrap();
        assert_eq!((c.n_nos, c.N_nos), (2, 2));
        assert!(score_decisions(&samples, &[lt("a")], CorrectnessPolicy::default()).is_err());
        assert!(score_decisions(&samples, &[lt("a"), lt("a")], CorrectnessPolicy::default()).is_err());
        assert!(score_decisions(&samples, &[lt("a"), lt("c")], CorrectnessPolicy::default()).is_err());
    }

    #[test]
    fn table_layout() {
        let r = MetricReport::from_trials(
            CorrectnessPolicy::ToolMatch,
            "seed",
            vec![TrialResult {
                seed: 1,
                counts: counts(3, 4, 9, 10),
            }],
        );
        let t = r.to_table();
        assert!(t.starts_with("policy: tool-match  trials: 1\n"));
        assert!(t.contains("75.00"));
        assert!(t.lines().nth(2).unwrap().ends_with('-'));
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
