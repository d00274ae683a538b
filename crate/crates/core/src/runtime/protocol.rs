//! Plain-text decision protocol shared by the runtime and SFT export.
//!
//! Decision-Search replies start with `[ANSWER] <text>` or `[SEARCH]`;
//! Decision-Call replies start with `[NOCALL]` or `[CALL] <command>`.
//! Tags are case-sensitive; leading whitespace is ignored.

use thiserror::Error;

use super::call::{parse_call, CallCommand, CallSyntaxError};

pub const TAG_ANSWER: &str = "[ANSWER]";
pub const TAG_SEARCH: &str = "[SEARCH]";
pub const TAG_NOCALL: &str = "[NOCALL]";
pub const TAG_CALL: &str = "[CALL]";

#[derive(Debug, Clone, PartialEq)]
pub enum SearchDecision {
    Answer(String),
    Search,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CallDecision {
    NoCall,
    Call(CallCommand),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("reply does not follow the decision protocol: {raw:?}")]
    Violation { raw: String },
    #[error(transparent)]
    CallSyntax(#[from] CallSyntaxError),
}

pub fn parse_decision_search(text: &str) -> Result<SearchDecision, ProtocolError> {
    let body = text.trim_start();
    if body.starts_with(TAG_SEARCH) {
        Ok(SearchDecision::Search)
    } else if let Some(rest) = body.strip_prefix(TAG_ANSWER) {
        Ok(SearchDecision::Answer(rest.trim().to_string()))
    } else {
        Err(ProtocolError::Violation { raw: text.to_string() })
    }
}

/// Syntax error positions are byte offsets into `text`.
pub fn parse_decision_call(text: &str) -> Result<CallDecision, ProtocolError> {
    let lead = text.len() - text.trim_start().len();
    let body = &text[lead..];
    if body.starts_with(TAG_NOCALL) {
        return Ok(CallDecision::NoCall);
    }
    let Some(rest) = body.strip_prefix(TAG_CALL) else {
        return Err(ProtocolError::Violation { raw: text.to_string() });
    };
    let offset = lead + TAG_CALL.len();
    parse_call(rest).map(CallDecision::Call).map_err(|mut e| {
        e.position += offset;
        e.into()
    })
}

/// Strips a leading `[ANSWER]` tag if the model added one to a free-form turn.
pub fn strip_answer_tag(text: &str) -> String {
    let t = text.trim();
    t.strip_prefix(TAG_ANSWER).map(str::trim).unwrap_or(t).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_search() {
        assert_eq!(
            parse_decision_search("[ANSWER] Five tips are...").unwrap(),
            SearchDecision::Answer("Five tips are...".into())
        );
        assert_eq!(parse_decision_search("[SEARCH]").unwrap(), SearchDecision::Search);
        assert_eq!(parse_decision_search("  \n[SEARCH] because").unwrap(), SearchDecision::Search);
        assert!(matches!(
            parse_decision_search("I think maybe..."),
            Err(ProtocolError::Violation { .. })
        ));
        assert!(parse_decision_search("[search]").is_err());
    }

    #[test]
    fn decision_call() {
        assert_eq!(parse_decision_call("[NOCALL]").unwrap(), CallDecision::NoCall);
        let c = parse_decision_call(r#"[CALL] get_weather(city="Paris", units="metric")"#).unwrap();
        assert_eq!(
            c,
            CallDecision::Call(CallCommand::new("get_weather").arg("city", "Paris").arg("units", "metric"))
        );
        match parse_decision_call("[CALL] get_weather(city=)") {
            Err(ProtocolError::CallSyntax(e)) => {
                assert_eq!(e.position, 24);
                assert_eq!(e.expected, "value");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_decision_call("[ANSWER] x"), Err(ProtocolError::Violation { .. })));
    }

    #[test]
    fn answer_tag_stripping() {
        assert_eq!(strip_answer_tag(" [ANSWER] hi "), "hi");
        assert_eq!(strip_answer_tag("plain"), "plain");
    }
}
