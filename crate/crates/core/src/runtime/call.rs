//! Call commands: `name(arg="text", n=3, flag=true)`.
//!
//! ```text
//! command := ident "(" (pair ("," pair)*)? ")"
//! pair    := ident "=" value
//! value   := string | number | boolean
//! ```
//!
//! Strings are double-quoted with `\" \\ \n \t \uXXXX` escapes (surrogate
//! pairs allowed). Numbers use JSON syntax, including exponents, and must be
//! finite. Whitespace between tokens is ignored. Error positions are byte
//! offsets into the parsed text.

use std::fmt::{self, Write as _};

use indexmap::IndexMap;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{is_identifier, FunctionSpec, ParamType};

#[derive(Debug, Clone, PartialEq)]
pub enum ArgValue {
    String(String),
    Number(f64),
    Bool(bool),
}

impl ArgValue {
    pub fn param_type(&self) -> ParamType {
        match self {
            ArgValue::String(_) => ParamType::String,
            ArgValue::Number(_) => ParamType::Number,
            ArgValue::Bool(_) => ParamType::Boolean,
        }
    }

    /// Plain rendering used for URL templates and prompts (strings unquoted).
    pub fn to_plain(&self) -> String {
        match self {
            ArgValue::String(s) => s.clone(),
            ArgValue::Number(x) => format_number(*x),
            ArgValue::Bool(b) => b.to_string(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            ArgValue::String(s) => serde_json::Value::String(s.clone()),
            ArgValue::Number(x) => number_to_json(*x),
            ArgValue::Bool(b) => serde_json::Value::Bool(*b),
        }
    }

    pub fn from_json(v: &serde_json::Value) -> Option<Self> {
        match v {
            serde_json::Value::String(s) => Some(ArgValue::String(s.clone())),
            serde_json::Value::Bool(b) => Some(ArgValue::Bool(*b)),
            serde_json::Value::Number(n) => n.as_f64().filter(|x| x.is_finite()).map(ArgValue::Number),
            _ => None,
        }
    }
}

impl From<&str> for ArgValue {
    fn from(s: &str) -> Self {
        ArgValue::String(s.to_string())
    }
}

impl From<String> for ArgValue {
    fn from(s: String) -> Self {
        ArgValue::String(s)
    }
}

impl From<f64> for ArgValue {
    fn from(x: f64) -> Self {
        ArgValue::Number(x)
    }
}

impl From<bool> for ArgValue {
    fn from(b: bool) -> Self {
        ArgValue::Bool(b)
    }
}

fn number_to_json(x: f64) -> serde_json::Value {
    if x.fract() == 0.0 && x.abs() < 9.0e15 {
        serde_json::Value::from(x as i64)
    } else {
        serde_json::Number::from_f64(x)
            .map(serde_json::Value::Number)
            .unwrap_or(serde_json::Value::Null)
    }
}

impl Serialize for ArgValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ArgValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        ArgValue::from_json(&v)
            .ok_or_else(|| de::Error::custom("argument must be a string, finite number or boolean"))
    }
}

/// Shortest decimal that parses back to the same `f64`: integers without a
/// fraction, very large or small magnitudes in exponent form.
pub fn format_number(x: f64) -> String {
    let a = x.abs();
    if x.fract() == 0.0 && a < 1e15 {
        format!("{}", x as i64)
    } else if (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// A parsed API invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallCommand {
    pub api_name: String,
    #[serde(default)]
    pub args: IndexMap<String, ArgValue>,
}

impl CallCommand {
    pub fn new(api_name: impl Into<String>) -> Self {
        Self {
            api_name: api_name.into(),
            args: IndexMap::new(),
        }
    }

    pub fn arg(mut self, name: impl Into<String>, value: impl Into<ArgValue>) -> Self {
        self.args.insert(name.into(), value.into());
        self
    }

    pub fn parse(text: &str) -> Result<Self, CallSyntaxError> {
        parse_call(text)
    }

    /// Canonical text form; `parse(c.to_canonical()) == c`.
    pub fn to_canonical(&self) -> String {
        let mut out = String::with_capacity(32);
        out.push_str(&self.api_name);
        out.push('(');
        for (i, (k, v)) in self.args.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(k);
            out.push('=');
            write_value(&mut out, v);
        }
        out.push(')');
        out
    }

    /// Arguments sorted by name, for order-insensitive comparison.
    pub fn sorted_args(&self) -> Vec<(&str, &ArgValue)> {
        let mut v: Vec<_> = self.args.iter().map(|(k, v)| (k.as_str(), v)).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn same_call(&self, other: &CallCommand) -> bool {
        self.api_name == other.api_name && self.sorted_args() == other.sorted_args()
    }

    pub fn validate(&self, spec: &FunctionSpec) -> Result<(), ArgError> {
        if self.api_name != spec.api_name {
            return Err(ArgError::WrongApi {
                expected: spec.api_name.clone(),
                got: self.api_name.clone(),
            });
        }
        for (name, value) in &self.args {
            let param = spec.param(name).ok_or_else(|| ArgError::UnknownParam(name.clone()))?;
            if param.kind != value.param_type() {
                return Err(ArgError::TypeMismatch {
                    param: name.clone(),
                    expected: param.kind,
                    got: value.param_type(),
                });
            }
        }
        if let Some(missing) = spec
            .parameters
            .iter()
            .find(|p| p.required && !self.args.contains_key(&p.name))
        {
            return Err(ArgError::MissingRequiredParam(missing.name.clone()));
        }
        Ok(())
    }
}

impl fmt::Display for CallCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArgError {
    #[error("call targets `{got}` but the tool's API is `{expected}`")]
    WrongApi { expected: String, got: String },
    #[error("missing required parameter `{0}`")]
    MissingRequiredParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{param}` expects {expected}, got {got}")]
    TypeMismatch {
        param: String,
        expected: ParamType,
        got: ParamType,
    },
}

fn write_value(out: &mut String, v: &ArgValue) {
    match v {
        ArgValue::String(s) => write_string(out, s),
        ArgValue::Number(x) => out.push_str(&format_number(*x)),
        ArgValue::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
    }
}

fn write_string(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("call syntax error at byte {position}: expected {expected}")]
pub struct CallSyntaxError {
    pub position: usize,
    pub expected: String,
}

pub fn parse_call(text: &str) -> Result<CallCommand, CallSyntaxError> {
    let mut p = Parser { src: text, pos: 0 };
    let cmd = p.command()?;
    p.skip_ws();
    if p.pos != text.len() {
        return Err(p.err("end of input"));
    }
    Ok(cmd)
}

/// Parses one command at the start of `text` (after optional whitespace)
/// and returns it with the number of bytes consumed.
pub fn parse_call_prefix(text: &str) -> Result<(CallCommand, usize), CallSyntaxError> {
    let mut p = Parser { src: text, pos: 0 };
    let cmd = p.command()?;
    Ok((cmd, p.pos))
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, expected: &str) -> CallSyntaxError {
        self.err_at(self.pos, expected)
    }

    fn err_at(&self, position: usize, expected: &str) -> CallSyntaxError {
        CallSyntaxError {
            position,
            expected: expected.to_string(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn expect(&mut self, c: char, what: &str) -> Result<(), CallSyntaxError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(what))
        }
    }

    fn ident(&mut self) -> Result<&'a str, CallSyntaxError> {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => self.pos += 1,
            _ => return Err(self.err("identifier")),
        }
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        Ok(&self.src[start..self.pos])
    }

    fn command(&mut self) -> Result<CallCommand, CallSyntaxError> {
        self.skip_ws();
        let name = self.ident()?;
        debug_assert!(is_identifier(name));
        let mut cmd = CallCommand::new(name);
        self.skip_ws();
        self.expect('(', "'('")?;
        self.skip_ws();
        if self.peek() == Some(')') {
            self.pos += 1;
            return Ok(cmd);
        }
        loop {
            self.skip_ws();
            let key_pos = self.pos;
            let key = self.ident()?;
            if cmd.args.contains_key(key) {
                return Err(self.err_at(key_pos, "unique argument name"));
            }
            self.skip_ws();
            self.expect('=', "'='")?;
            self.skip_ws();
            let value = self.value()?;
            cmd.args.insert(key.to_string(), value);
            self.skip_ws();
            match self.peek() {
                Some(',') => self.pos += 1,
                Some(')') => {
                    self.pos += 1;
                    return Ok(cmd);
                }
                _ => return Err(self.err("',' or ')'")),
            }
        }
    }

    fn value(&mut self) -> Result<ArgValue, CallSyntaxError> {
        match self.peek() {
            Some('"') => self.string().map(ArgValue::String),
            Some(c) if c == '-' || c.is_ascii_digit() => self.number().map(ArgValue::Number),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                let word = self.ident()?;
                match word {
                    "true" => Ok(ArgValue::Bool(true)),
                    "false" => Ok(ArgValue::Bool(false)),
                    _ => Err(self.err_at(start, "value")),
                }
            }
            _ => Err(self.err("value")),
        }
    }

    fn digits(&mut self) -> usize {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        self.pos - start
    }

    fn number(&mut self) -> Result<f64, CallSyntaxError> {
        let start = self.pos;
        if self.peek() == Some('-') {
            self.pos += 1;
        }
        match self.peek() {
            Some('0') => self.pos += 1,
            Some(c) if c.is_ascii_digit() => {
                self.digits();
            }
            _ => return Err(self.err("digit")),
        }
        if self.peek() == Some('.') {
            self.pos += 1;
            if self.digits() == 0 {
                return Err(self.err("digit"));
            }
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            self.pos += 1;
            if matches!(self.peek(), Some('+' | '-')) {
                self.pos += 1;
            }
            if self.digits() == 0 {
                return Err(self.err("digit"));
            }
        }
        let x: f64 = self.src[start..self.pos]
            .parse()
            .map_err(|_| self.err_at(start, "number"))?;
        if !x.is_finite() {
            return Err(self.err_at(start, "finite number"));
        }
        Ok(x)
    }

    fn hex4(&mut self) -> Result<u32, CallSyntaxError> {
        let start = self.pos;
        let end = start + 4;
        let digits = self.src.get(start..end).filter(|s| s.bytes().all(|b| b.is_ascii_hexdigit()));
        match digits {
            Some(h) => {
                self.pos = end;
                Ok(u32::from_str_radix(h, 16).expect("hex digits"))
            }
            None => Err(self.err("4 hex digits")),
        }
    }

    fn string(&mut self) -> Result<String, CallSyntaxError> {
        self.pos += 1; // opening quote
        let mut out = String::new();
        loop {
            let at = self.pos;
            match self.bump() {
                None => return Err(self.err("closing '\"'")),
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('"') => out.push('"'),
                    Some('\\') => out.push('\\'),
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some('u') => {
                        let hi = self.hex4()?;
                        let code = if (0xD800..0xDC00).contains(&hi) {
                            if !self.src[self.pos..].starts_with("\\u") {
                                return Err(self.err("low surrogate escape"));
                            }
                            self.pos += 2;
                            let lo_at = self.pos;
                            let lo = self.hex4()?;
                            if !(0xDC00..0xE000).contains(&lo) {
                                return Err(self.err_at(lo_at, "low surrogate"));
                            }
                            0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00)
                        } else if (0xDC00..0xE000).contains(&hi) {
                            return Err(self.err_at(at, "escape (unpaired low surrogate)"));
                        } else {
                            hi
                        };
                        out.push(char::from_u32(code).expect("valid scalar"));
                    }
                    _ => return Err(self.err_at(at, "escape sequence")),
                },
                Some(c) => out.push(c),
            }
        }
    }
}
