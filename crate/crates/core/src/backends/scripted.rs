use std::collections::VecDeque;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, Message, ModelBackend, Role};

/// A pattern-keyed response. Every condition that is set must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    /// Substring of the first user message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_contains: Option<String>,
    /// Exact first user message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_equals: Option<String>,
    /// Substring of the last message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_contains: Option<String>,
    /// Number of assistant turns already in the conversation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
    pub respond: String,
}

impl Rule {
    pub fn respond(text: impl Into<String>) -> Self {
        Self {
            respond: text.into(),
            ..Self::default()
        }
    }

    pub fn when_query(mut self, s: impl Into<String>) -> Self {
        self.query_equals = Some(s.into());
        self
    }

    pub fn when_query_contains(mut self, s: impl Into<String>) -> Self {
        self.query_contains = Some(s.into());
        self
    }

    pub fn when_last_contains(mut self, s: impl Into<String>) -> Self {
        self.last_contains = Some(s.into());
        self
    }

    pub fn at_turn(mut self, turn: usize) -> Self {
        self.turn = Some(turn);
        self
    }

    fn matches(&self, messages: &[Message]) -> bool {
        let query = messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let last = messages.last().map(|m| m.content.as_str()).unwrap_or("");
        let turn = messages.iter().filter(|m| m.role == Role::Assistant).count();
        self.query_equals.as_deref().is_none_or(|q| q == query)
            && self.query_contains.as_deref().is_none_or(|q| query.contains(q))
            && self.last_contains.as_deref().is_none_or(|q| last.contains(q))
            && self.turn.is_none_or(|t| t == turn)
    }
}

/// Serializable script: rules first, then the ordered sequence, then the
/// default response.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub sequence: Vec<String>,
    #[serde(default)]
    pub default: Option<String>,
}

/// Deterministic test double. Each response it gives is appended to a log.
#[derive(Debug)]
pub struct ScriptedBackend {
    name: String,
    rules: Vec<Rule>,
    sequence: Mutex<VecDeque<String>>,
    default: Option<String>,
    log: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn from_script(script: Script) -> Self {
        Self {
            name: script.name.unwrap_or_else(|| "scripted".into()),
            rules: script.rules,
            sequence: Mutex::new(script.sequence.into()),
            default: script.default,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Replies with `responses` in order, one per call.
    pub fn sequence<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_script(Script {
            sequence: responses.into_iter().map(Into::into).collect(),
            ..Script::default()
        })
    }

    pub fn with_rules(rules: Vec<Rule>) -> Self {
        Self::from_script(Script {
            rules,
            ..Script::default()
        })
    }

    pub fn with_default(mut self, text: impl Into<String>) -> Self {
        self.default = Some(text.into());
        self
    }

    /// Every response handed out so far, in order.
    pub fn consumed(&self) -> Vec<String> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn calls(&self) -> usize {
        self.log.lock().expect("log lock").len()
    }
}

impl ModelBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, messages: &[Message]) -> Result<String, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::EmptyMessages);
        }
        let reply = match self.rules.iter().find(|r| r.matches(messages)) {
            Some(rule) => rule.respond.clone(),
            None => match self.sequence.lock().expect("sequence lock").pop_front() {
                Some(next) => next,
                None => self.default.clone().ok_or(BackendError::ScriptExhausted)?,
            },
        };
        self.log.lock().expect("log lock").push(reply.clone());
        Ok(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::complete;

    #[test]
    fn sequence_replays_in_order() {
        let b = ScriptedBackend::sequence(["[SEARCH]", "[NOCALL]"]);
        let msgs = [Message::user("q")];
        assert_eq!(complete(&b, &msgs).unwrap(), "[SEARCH]");
        assert_eq!(complete(&b, &msgs).unwrap(), "[NOCALL]");
        assert_eq!(complete(&b, &msgs), Err(BackendError::ScriptExhausted));
        assert_eq!(b.consumed(), vec!["[SEARCH]", "[NOCALL]"]);
    }

    #[test]
    fn empty_messages_rejected() {
        let b = ScriptedBackend::sequence(["x"]);
        assert_eq!(complete(&b, &[]), Err(BackendError::EmptyMessages));
        assert_eq!(b.calls(), 0);
    }

    #[test]
    fn rules_match_on_query_and_turn() {
        let b = ScriptedBackend::with_rules(vec![
            Rule::respond("[ANSWER] hi").when_query("hello").at_turn(0),
            Rule::respond("[SEARCH]").when_query_contains("weather").at_turn(0),
            Rule::respond("[NOCALL]").at_turn(1),
        ])
        .with_default("fallback");
        assert_eq!(b.complete(&[Message::user("hello")]).unwrap(), "[ANSWER] hi");
        assert_eq!(b.complete(&[Message::user("weather in Rome")]).unwrap(), "[SEARCH]");
        let two = [
            Message::user("weather in Rome"),
            Message::assistant("[SEARCH]"),
            Message::user("tools..."),
        ];
        assert_eq!(b.complete(&two).unwrap(), "[NOCALL]");
        assert_eq!(b.complete(&[Message::user("other")]).unwrap(), "fallback");
    }

    #[test]
    fn script_deserializes() {
        let s: Script = serde_json::from_str(
            r#"{"rules":[{"query_contains":"x","respond":"[SEARCH]"}],"sequence":["a"],"default":"d"}"#,
        )
        .unwrap();
        let b = ScriptedBackend::from_script(s);
        assert_eq!(b.complete(&[Message::user("x")]).unwrap(), "[SEARCH]");
        assert_eq!(b.complete(&[Message::user("y")]).unwrap(), "a");
        assert_eq!(b.complete(&[Message::user("y")]).unwrap(), "d");
    }
}
