//! The two-level decision runtime.
//!
//! ```text
//! query ─ Decision-Search ─┬─ [ANSWER] ............................ ① NoSearch
//!                          └─ [SEARCH] ② ─ Decision-Call ─┬─ [NOCALL] ③ NoCall
//!                                                          └─ [CALL]   ④ Call ─ API ─ answer
//! ```
//!
//! The Decision-Search turn never shows tools. On Search, the candidate
//! toolset is either supplied by the caller or retrieved by embedding
//! similarity. A reply that breaks the protocol is re-prompted with a
//! corrective instruction up to `max_reprompts` times, after which the trace
//! is aborted at the last valid state.

mod call;
mod prompt;
mod protocol;

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{ApiExecutor, ApiResponse, BackendError, ExecError, Message, ModelBackend};
use crate::embedding::{cosine, EmbedError, EmbeddingProvider};
use crate::par::{self, Parallelism};
use crate::registry::{Tool, ToolPool};
use crate::sampling::{CandidateToolset, Strategy};

pub use call::{format_number, parse_call, parse_call_prefix, ArgError, ArgValue, CallCommand, CallSyntaxError};
pub use prompt::PromptTemplates;
pub use protocol::{
    parse_decision_call, parse_decision_search, strip_answer_tag, CallDecision, ProtocolError, SearchDecision,
    TAG_ANSWER, TAG_CALL, TAG_NOCALL, TAG_SEARCH,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// ① answered directly.
    NoSearch,
    /// ② decided to search; always intermediate in a completed trace.
    Search,
    /// ③ no suitable candidate tool.
    NoCall,
    /// ④ called a tool.
    Call,
}

impl Branch {
    pub fn is_terminal(self) -> bool {
        !matches!(self, Branch::Search)
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::NoSearch => "① NoSearch",
            Branch::Search => "② Search",
            Branch::NoCall => "③ NoCall",
            Branch::Call => "④ Call",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    DecisionSearch,
    DecisionCall,
    Answer,
    Synthesis,
}

/// One model exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub stage: Stage,
    pub output: String,
    /// 0 for the first try, then one per re-prompt.
    pub attempt: u32,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub command: CallCommand,
    pub response: ApiResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub stage: Stage,
    pub reason: String,
}

/// Per-query record of the path through the decision branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub query: String,
    /// Terminal branch, or the last valid state when aborted (`None` if the
    /// first decision never parsed).
    pub branch: Option<Branch>,
    pub candidate_tools: Vec<String>,
    pub steps: Vec<Step>,
    pub calls: Vec<CallRecord>,
    pub final_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<Abort>,
}

impl DecisionTrace {
    fn new(query: &str) -> Self {
        Self {
            query: query.to_string(),
            branch: None,
            candidate_tools: Vec::new(),
            steps: Vec::new(),
            calls: Vec::new(),
            final_answer: None,
            retrieved_context: None,
            aborted: None,
        }
    }

    /// First parsed call, if any.
    pub fn call(&self) -> Option<&CallCommand> {
        self.calls.first().map(|c| &c.command)
    }

    pub fn api_response(&self) -> Option<&ApiResponse> {
        self.calls.first().map(|c| &c.response)
    }

    pub fn is_complete(&self) -> bool {
        self.aborted.is_none() && self.branch.is_some_and(Branch::is_terminal)
    }

    /// Copy with wall-clock fields zeroed, for replay comparisons.
    pub fn without_timings(&self) -> Self {
        let mut t = self.clone();
        t.steps.iter_mut().for_each(|s| s.elapsed_ms = 0.0);
        t.calls.iter_mut().for_each(|c| c.response.latency_ms = 0.0);
        t
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("pool has {available} tools, need {needed}")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("candidate tool `{0}` is not in the pool")]
    UnknownCandidate(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    /// Candidate toolset size when retrieving.
    pub k: usize,
    pub max_reprompts: u32,
    /// API rounds allowed after the first call.
    pub max_rounds: u32,
    /// Show full function signatures at Decision-Call.
    pub include_signature: bool,
    pub templates: PromptTemplates,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            k: crate::sampling::DEFAULT_K,
            max_reprompts: 2,
            max_rounds: 1,
            include_signature: true,
            templates: PromptTemplates::default(),
        }
    }
}

/// Optional retrieval for queries that end in branch ③.
pub trait NoCallHook: Send + Sync {
    fn context(&self, query: &str) -> Option<String>;
}

/// Top-k tools by cosine similarity between the query and each tool
/// description; ties broken by name ascending.
pub fn retrieve_candidates(
    pool: &ToolPool,
    provider: &dyn EmbeddingProvider,
    query: &str,
    k: usize,
) -> Result<CandidateToolset, RuntimeError> {
    retrieve_candidates_with(pool, provider, query, k, Parallelism::Sequential)
}

pub fn retrieve_candidates_with(
    pool: &ToolPool,
    provider: &dyn EmbeddingProvider,
    query: &str,
    k: usize,
    mode: Parallelism,
) -> Result<CandidateToolset, RuntimeError> {
    if pool.len() < k {
        return Err(RuntimeError::PoolTooSmall {
            needed: k,
            available: pool.len(),
        });
    }
    let q = crate::embedding::embed(provider, query)?;
    let texts: Vec<&str> = pool.tools().iter().map(|t| t.description.as_str()).collect();
    let vectors = provider.embed_batch(&texts)?;
    let scores = par::try_map(&vectors, mode, |v| cosine(&q, v))?;
    let mut ranked: Vec<(f64, &Tool)> = scores.into_iter().zip(pool.tools()).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.name.cmp(&b.1.name)));
    Ok(CandidateToolset {
        tools: ranked.into_iter().take(k).map(|(_, t)| t.clone()).collect(),
        contains_gold: false,
        strategy_used: Strategy::Retrieval,
        fallback: false,
    })
}

/// Everything a session needs; cheap to build per query.
#[derive(Clone, Copy)]
pub struct Agent<'a> {
    pub backend: &'a dyn ModelBackend,
    pub pool: &'a ToolPool,
    pub provider: &'a dyn EmbeddingProvider,
    pub executor: &'a dyn ApiExecutor,
    pub config: &'a RuntimeConfig,
    pub hook: Option<&'a dyn NoCallHook>,
}

enum Asked<T> {
    Parsed(T, String),
    Gave(String),
}

impl<'a> Agent<'a> {
    pub fn new(
        backend: &'a dyn ModelBackend,
        pool: &'a ToolPool,
        provider: &'a dyn EmbeddingProvider,
        executor: &'a dyn ApiExecutor,
        config: &'a RuntimeConfig,
    ) -> Self {
        Self {
            backend,
            pool,
            provider,
            executor,
            config,
            hook: None,
        }
    }

    pub fn with_hook(mut self, hook: &'a dyn NoCallHook) -> Self {
        self.hook = Some(hook);
        self
    }

    fn complete(&self, trace: &mut DecisionTrace, msgs: &[Message], stage: Stage, attempt: u32) -> Result<String, RuntimeError> {
        let start = Instant::now();
        let out = crate::backends::complete(self.backend, msgs)?;
        trace.steps.push(Step {
            stage,
            output: out.clone(),
            attempt,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(out)
    }

    /// Asks until `parse` accepts the reply or re-prompts run out. Failed
    /// exchanges stay in the conversation.
    fn ask<T>(
        &self,
        trace: &mut DecisionTrace,
        msgs: &mut Vec<Message>,
        stage: Stage,
        parse: impl Fn(&str) -> Result<T, String>,
        corrective: impl Fn(&str) -> String,
    ) -> Result<Asked<T>, RuntimeError> {
        let mut last = String::new();
        for attempt in 0..=self.config.max_reprompts {
            let out = self.complete(trace, msgs, stage, attempt)?;
            match parse(&out) {
                Ok(v) => return Ok(Asked::Parsed(v, out)),
                Err(why) => {
                    msgs.push(Message::assistant(out.clone()));
                    msgs.push(Message::user(corrective(&why)));
                    last = why;
                }
            }
        }
        Ok(Asked::Gave(last))
    }

    fn resolve(&self, query: &str, candidates: Option<&[String]>) -> Result<Vec<Tool>, RuntimeError> {
        match candidates {
            Some(names) => names
                .iter()
                .map(|n| self.pool.get(n).cloned().ok_or_else(|| RuntimeError::UnknownCandidate(n.clone())))
                .collect(),
            None => Ok(retrieve_candidates(self.pool, self.provider, query, self.config.k)?.tools),
        }
    }

    /// Runs the state machine. With `candidates == None` the toolset is
    /// retrieved from the pool on Search.
    pub fn answer(&self, query: &str, candidates: Option<&[String]>) -> Result<DecisionTrace, RuntimeError> {
        let cfg = self.config;
        let mut trace = DecisionTrace::new(query);
        let mut msgs = vec![Message::system(cfg.templates.system.clone()), Message::user(query)];

        let asked = self.ask(
            &mut trace,
            &mut msgs,
            Stage::DecisionSearch,
            |s| parse_decision_search(s).map_err(|e| e.to_string()),
            |_| cfg.templates.corrective_search.clone(),
        )?;
        let raw = match asked {
            Asked::Gave(reason) => {
                trace.aborted = Some(Abort {
                    stage: Stage::DecisionSearch,
                    reason,
                });
                return Ok(trace);
            }
            Asked::Parsed(SearchDecision::Answer(text), _) => {
                trace.branch = Some(Branch::NoSearch);
                trace.final_answer = Some(text);
                return Ok(trace);
            }
            Asked::Parsed(SearchDecision::Search, raw) => raw,
        };

        trace.branch = Some(Branch::Search);
        let tools = self.resolve(query, candidates)?;
        trace.candidate_tools = tools.iter().map(|t| t.name.clone()).collect();
        msgs.push(Message::assistant(raw));
        msgs.push(Message::user(cfg.templates.render_tools(&tools, cfg.include_signature)));

        let check = |s: &str| -> Result<CallDecision, String> {
            let d = parse_decision_call(s).map_err(|e| e.to_string())?;
            if let CallDecision::Call(cmd) = &d {
                let tool = tools
                    .iter()
                    .find(|t| t.function.api_name == cmd.api_name)
                    .ok_or_else(|| format!("`{}` is not one of the candidate tools", cmd.api_name))?;
                cmd.validate(&tool.function).map_err(|e| e.to_string())?;
            }
            Ok(d)
        };
        let asked = self.ask(&mut trace, &mut msgs, Stage::DecisionCall, check, |why| {
            cfg.templates.render_corrective_call(why)
        })?;
        let (decision, raw) = match asked {
            Asked::Gave(reason) => {
                trace.aborted = Some(Abort {
                    stage: Stage::DecisionCall,
                    reason,
                });
                return Ok(trace);
            }
            Asked::Parsed(d, raw) => (d, raw),
        };
        msgs.push(Message::assistant(raw));

        match decision {
            CallDecision::NoCall => {
                trace.branch = Some(Branch::NoCall);
                let context = self.hook.and_then(|h| h.context(query));
                msgs.push(Message::user(cfg.templates.render_nocall(context.as_deref())));
                trace.retrieved_context = context;
                let out = self.complete(&mut trace, &msgs, Stage::Answer, 0)?;
                trace.final_answer = Some(strip_answer_tag(&out));
            }
            CallDecision::Call(cmd) => {
                let mut cmd = cmd;
                let mut rounds = 0;
                loop {
                    let response = self.executor.execute(&cmd)?;
                    rounds += 1;
                    msgs.push(Message::user(cfg.templates.render_observation(&response.body)));
                    trace.calls.push(CallRecord { command: cmd, response });
                    let out = self.complete(&mut trace, &msgs, Stage::Synthesis, 0)?;
                    if rounds < cfg.max_rounds {
                        if let Ok(CallDecision::Call(next)) = check(&out) {
                            msgs.push(Message::assistant(out));
                            cmd = next;
                            continue;
                        }
                    }
                    trace.final_answer = Some(strip_answer_tag(&out));
                    break;
                }
                trace.branch = Some(Branch::Call);
            }
        }
        Ok(trace)
    }
}

/// Runs one query, retrieving candidates from the pool when it searches.
pub fn answer_query(
    query: &str,
    backend: &dyn ModelBackend,
    pool: &ToolPool,
    provider: &dyn EmbeddingProvider,
    executor: &dyn ApiExecutor,
    cfg: &RuntimeConfig,
) -> Result<DecisionTrace, RuntimeError> {
    Agent::new(backend, pool, provider, executor, cfg).answer(query, None)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::backends::{Binding, RegistryExecutor, Rule, ScriptedBackend};
    use crate::embedding::HashEmbedder;

    fn pool() -> ToolPool {
        ToolPool::from_json(
            r#"[
            {"name":"weather","description":"current weather forecast for a city",
             "function":{"api_name":"get_weather","parameters":[
                {"name":"city","type":"string","required":true,"description":"city"}],"returns":"object"}},
            {"name":"stocks","description":"stock price quote for a ticker symbol",
             "function":{"api_name":"get_quote","parameters":[
                {"name":"ticker","type":"string","required":true,"description":"symbol"}],"returns":"object"}},
            {"name":"translate","description":"translate text between languages",
             "function":{"api_name":"translate","parameters":[],"returns":"string"}}
        ]"#,
        )
        .unwrap()
    }

    fn executor(pool: &ToolPool) -> RegistryExecutor {
        let mut b = BTreeMap::new();
        b.insert("get_weather".to_string(), Binding::mock(r#"{"temp":18}"#));
        b.insert("get_quote".to_string(), Binding::mock(r#"{"price":1}"#));
        RegistryExecutor::new(b).with_pool(pool)
    }

    fn run(backend: &ScriptedBackend, candidates: Option<&[String]>) -> (DecisionTrace, usize) {
        let pool = pool();
        let exec = executor(&pool);
        let cfg = RuntimeConfig {
            k: 2,
            ..RuntimeConfig::default()
        };
        let emb = HashEmbedder::default();
        let t = Agent::new(backend, &pool, &emb, &exec, &cfg)
            .answer("What is the weather in Paris?", candidates)
            .unwrap();
        (t, exec.executed())
    }

    #[test]
    fn branch_no_search() {
        let b = ScriptedBackend::sequence(["[ANSWER] It is sunny."]);
        let (t, executed) = run(&b, None);
        assert_eq!(t.branch, Some(Branch::NoSearch));
        assert_eq!(t.final_answer.as_deref(), Some("It is sunny."));
        assert!(t.candidate_tools.is_empty());
        assert_eq!(executed, 0);
        assert!(t.is_complete());
    }

    #[test]
    fn branch_no_call() {
        let b = ScriptedBackend::sequence(["[SEARCH]", "[NOCALL]", "I cannot check that."]);
        let (t, executed) = run(&b, None);
        assert_eq!(t.branch, Some(Branch::NoCall));
        assert_eq!(t.candidate_tools.len(), 2);
        assert_eq!(t.final_answer.as_deref(), Some("I cannot check that."));
        assert_eq!(executed, 0);
        assert!(t.call().is_none());
    }

    #[test]
    fn branch_call() {
        let b = ScriptedBackend::sequence([
            "[SEARCH]",
            r#"[CALL] get_weather(city="Paris")"#,
            "It is 18 degrees in Paris.",
        ]);
        let (t, executed) = run(&b, None);
        assert_eq!(t.branch, Some(Branch::Call));
        assert_eq!(t.candidate_tools[0], "weather");
        assert_eq!(t.call().unwrap().to_canonical(), r#"get_weather(city="Paris")"#);
        assert_eq!(t.api_response().unwrap().body, r#"{"temp":18}"#);
        assert_eq!(t.final_answer.as_deref(), Some("It is 18 degrees in Paris."));
        assert_eq!(executed, 1);
        let stages: Vec<Stage> = t.steps.iter().map(|s| s.stage).collect();
        assert_eq!(stages, [Stage::DecisionSearch, Stage::DecisionCall, Stage::Synthesis]);
    }

    #[test]
    fn reprompts_then_recovers() {
        let b = ScriptedBackend::sequence([
            "hmm",
            "[SEARCH]",
            "[CALL] get_weather(town=\"Paris\")",
            "[CALL] get_weather(city=\"Paris\")",
            "ok",
        ]);
        let names = vec!["weather".to_string(), "stocks".to_string()];
        let (t, executed) = run(&b, Some(&names));
        assert_eq!(t.branch, Some(Branch::Call));
        assert_eq!(t.steps.iter().map(|s| s.attempt).collect::<Vec<_>>(), [0, 1, 0, 1, 0]);
        assert_eq!(executed, 1);
    }

    #[test]
    fn aborts_after_two_reprompts() {
        let b = ScriptedBackend::sequence(["[SEARCH]", "x", "y", "z", "never"]);
        let (t, executed) = run(&b, None);
        assert_eq!(b.calls(), 4);
        assert_eq!(t.branch, Some(Branch::Search));
        assert_eq!(t.aborted.as_ref().unwrap().stage, Stage::DecisionCall);
        assert!(!t.is_complete());
        assert_eq!(executed, 0);

        let b = ScriptedBackend::sequence(["a", "b", "c", "d"]);
        let (t, _) = run(&b, None);
        assert_eq!(b.calls(), 3);
        assert_eq!(t.branch, None);
        assert!(t.final_answer.is_none());
    }

    #[test]
    fn call_outside_candidates_is_a_violation() {
        let b = ScriptedBackend::sequence(["[SEARCH]", "[CALL] translate()", "[NOCALL]", "fine"]);
        let names = vec!["weather".to_string()];
        let (t, executed) = run(&b, Some(&names));
        assert_eq!(t.branch, Some(Branch::NoCall));
        assert_eq!(executed, 0);
    }

    #[test]
    fn deterministic_replay() {
        let script = ["[SEARCH]", r#"[CALL] get_weather(city="Paris")"#, "done"];
        let (a, _) = run(&ScriptedBackend::sequence(script), None);
        let (b, _) = run(&ScriptedBackend::sequence(script), None);
        assert_eq!(a.without_timings(), b.without_timings());
    }

    #[test]
    fn hook_context_reaches_prompt() {
        struct Ctx;
        impl NoCallHook for Ctx {
            fn context(&self, _: &str) -> Option<String> {
                Some("Paris is in France.".into())
            }
        }
        let pool = pool();
        let exec = executor(&pool);
        let cfg = RuntimeConfig::default();
        let emb = HashEmbedder::default();
        let b = ScriptedBackend::with_rules(vec![
            Rule::respond("[SEARCH]").at_turn(0),
            Rule::respond("[NOCALL]").at_turn(1),
            Rule::respond("grounded").when_last_contains("Paris is in France."),
        ]);
        let names = vec!["stocks".to_string()];
        let t = Agent::new(&b, &pool, &emb, &exec, &cfg)
            .with_hook(&Ctx)
            .answer("q", Some(&names))
            .unwrap();
        assert_eq!(t.final_answer.as_deref(), Some("grounded"));
        assert_eq!(t.retrieved_context.as_deref(), Some("Paris is in France."));
    }

    #[test]
    fn retrieval_ranks_and_breaks_ties() {
        let pool = pool();
        let emb = HashEmbedder::default();
        let c = retrieve_candidates(&pool, &emb, "weather forecast in Paris", 2).unwrap();
        assert_eq!(c.tools[0].name, "weather");
        // no overlap with any description: all tie at 0, names ascending
        let c = retrieve_candidates(&pool, &emb, "zzzz", 3).unwrap();
        assert_eq!(c.names(), ["stocks", "translate", "weather"]);
        assert!(matches!(
            retrieve_candidates(&pool, &emb, "x", 4),
            Err(RuntimeError::PoolTooSmall { needed: 4, available: 3 })
        ));
    }

    #[test]
    fn unknown_candidate_rejected() {
        let b = ScriptedBackend::sequence(["[SEARCH]"]);
        let pool = pool();
        let exec = executor(&pool);
        let cfg = RuntimeConfig::default();
        let emb = HashEmbedder::default();
        let names = vec!["nope".to_string()];
        let r = Agent::new(&b, &pool, &emb, &exec, &cfg).answer("q", Some(&names));
        assert!(matches!(r, Err(RuntimeError::UnknownCandidate(_))));
    }
}
