use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{self, HttpStats, RetryPolicy};
use crate::registry::{FunctionSpec, ToolPool};
use crate::runtime::{ArgError, ArgValue, CallCommand};

/// Bodies longer than this are cut before they reach a prompt.
pub const DEFAULT_MAX_BODY_BYTES: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("no binding registered for API `{0}`")]
    UnknownApi(String),
    #[error("missing required parameter `{0}`")]
    MissingRequiredParam(String),
    #[error("invalid arguments: {0}")]
    InvalidArgs(ArgError),
    #[error("upstream API failed (status {status:?}): {body}")]
    UpstreamError { status: Option<u16>, body: String },
    #[error("executor configuration: {0}")]
    Config(String),
}

impl From<ArgError> for ExecError {
    fn from(e: ArgError) -> Self {
        match e {
            ArgError::MissingRequiredParam(p) => ExecError::MissingRequiredParam(p),
            other => ExecError::InvalidArgs(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub status: u16,
    pub body: String,
    pub latency_ms: f64,
    #[serde(default)]
    pub truncated: bool,
}

/// Executes validated call commands against registered endpoints.
pub trait ApiExecutor: Send + Sync {
    fn execute(&self, call: &CallCommand) -> Result<ApiResponse, ExecError>;
}

impl<E: ApiExecutor + ?Sized> ApiExecutor for &E {
    fn execute(&self, call: &CallCommand) -> Result<ApiResponse, ExecError> {
        (**self).execute(call)
    }
}

impl<E: ApiExecutor + ?Sized> ApiExecutor for std::sync::Arc<E> {
    fn execute(&self, call: &CallCommand) -> Result<ApiResponse, ExecError> {
        (**self).execute(call)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BindingKind {
    #[serde(rename = "mock")]
    Mock,
    #[serde(rename = "http-get")]
    HttpGet,
    #[serde(rename = "http-json")]
    HttpJson,
}

/// One entry of the executor registry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub binding: BindingKind,
    #[serde(default)]
    pub url_template: Option<String>,
    #[serde(default)]
    pub canned: Option<String>,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    /// JSON body for `http-json`; `{param}` placeholders become JSON literals.
    /// Without a template the arguments object is posted as-is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_template: Option<String>,
}

impl Binding {
    pub fn mock(canned: impl Into<String>) -> Self {
        Self {
            binding: BindingKind::Mock,
            url_template: None,
            canned: Some(canned.into()),
            headers: BTreeMap::new(),
            body_template: None,
        }
    }

    pub fn http_get(url_template: impl Into<String>) -> Self {
        Self {
            binding: BindingKind::HttpGet,
            url_template: Some(url_template.into()),
            canned: None,
            headers: BTreeMap::new(),
            body_template: None,
        }
    }

    pub fn http_json(url_template: impl Into<String>) -> Self {
        Self {
            binding: BindingKind::HttpJson,
            ..Self::http_get(url_template)
        }
    }
}

/// Registry-driven executor with mock, templated GET and JSON POST bindings.
pub struct RegistryExecutor {
    bindings: BTreeMap<String, Binding>,
    specs: HashMap<String, FunctionSpec>,
    max_body: usize,
    client: reqwest::blocking::Client,
    policy: RetryPolicy,
    stats: HttpStats,
    executed: AtomicUsize,
}

impl RegistryExecutor {
    pub fn new(bindings: BTreeMap<String, Binding>) -> Self {
        Self {
            bindings,
            specs: HashMap::new(),
            max_body: DEFAULT_MAX_BODY_BYTES,
            client: http::build_client(Duration::from_secs(30)),
            policy: RetryPolicy::default(),
            stats: HttpStats::default(),
            executed: AtomicUsize::new(0),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ExecError> {
        let bindings: BTreeMap<String, Binding> =
            serde_json::from_str(text).map_err(|e| ExecError::Config(e.to_string()))?;
        for (name, b) in &bindings {
            if b.binding != BindingKind::Mock && b.url_template.is_none() {
                return Err(ExecError::Config(format!("`{name}` needs a url_template")));
            }
        }
        Ok(Self::new(bindings))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExecError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExecError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Validates calls against the function specs of `pool`.
    pub fn with_pool(mut self, pool: &ToolPool) -> Self {
        self.specs = pool
            .tools()
            .iter()
            .map(|t| (t.function.api_name.clone(), t.function.clone()))
            .collect();
        self
    }

    pub fn with_max_body(mut self, bytes: usize) -> Self {
        self.max_body = bytes;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.client = http::build_client(timeout);
        self
    }

    pub fn with_retry(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Number of calls that passed validation and were dispatched.
    pub fn executed(&self) -> usize {
        self.executed.load(Ordering::Relaxed)
    }

    pub fn stats(&self) -> &HttpStats {
        &self.stats
    }

    fn finish(&self, status: u16, body: String, start: Instant) -> Result<ApiResponse, ExecError> {
        if !(200..300).contains(&status) {
            return Err(ExecError::UpstreamError {
                status: Some(status),
                body: http::excerpt(&body),
            });
        }
        let (cut, truncated) = http::truncate_utf8(&body, self.max_body);
        Ok(ApiResponse {
            status,
            body: cut.to_string(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            truncated,
        })
    }

    fn request(&self, binding: &Binding, call: &CallCommand) -> Result<(u16, String), ExecError> {
        let template = binding.url_template.as_deref().unwrap_or_default();
        let url = fill_template(template, call, |v| percent_encode(&v.to_plain()));
        let body = match (binding.binding, &binding.body_template) {
            (BindingKind::HttpJson, Some(t)) => Some(fill_template(t, call, |v| v.to_json().to_string())),
            (BindingKind::HttpJson, None) => {
                let obj: serde_json::Map<String, serde_json::Value> =
                    call.args.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
                Some(serde_json::Value::Object(obj).to_string())
            }
            _ => None,
        };
        let headers: Vec<(String, String)> = binding
            .headers
            .iter()
            .map(|(k, v)| (k.clone(), expand_env(v)))
            .collect();
        let ex = http::send_with_retry(&self.policy, &self.stats, || {
            let mut req = match &body {
                Some(b) => self
                    .client
                    .post(&url)
                    .header(reqwest::header::CONTENT_TYPE, "application/json")
                    .body(b.clone()),
                None => self.client.get(&url),
            };
            for (k, v) in &headers {
                req = req.header(k.as_str(), v.as_str());
            }
            req
        })
        .map_err(|f| match f {
            http::HttpFailure::Status { status, body, .. } => ExecError::UpstreamError { status, body },
            other => ExecError::UpstreamError {
                status: None,
                body: other.to_string(),
            },
        })?;
        Ok((ex.status, ex.body))
    }
}

impl ApiExecutor for RegistryExecutor {
    fn execute(&self, call: &CallCommand) -> Result<ApiResponse, ExecError> {
        let binding = self
            .bindings
            .get(&call.api_name)
            .ok_or_else(|| ExecError::UnknownApi(call.api_name.clone()))?;
        if let Some(spec) = self.specs.get(&call.api_name) {
            call.validate(spec)?;
        }
        self.executed.fetch_add(1, Ordering::Relaxed);
        let start = Instant::now();
        match binding.binding {
            BindingKind::Mock => self.finish(200, binding.canned.clone().unwrap_or_default(), start),
            BindingKind::HttpGet | BindingKind::HttpJson => {
                let (status, body) = self.request(binding, call)?;
                self.finish(status, body, start)
            }
        }
    }
}

/// Replaces `{param}` with the rendered argument (empty when absent).
/// Braces not enclosing an identifier are copied through.
fn fill_template(template: &str, call: &CallCommand, render: impl Fn(&ArgValue) -> String) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if crate::registry::is_identifier(&after[..close]) => {
                if let Some(v) = call.args.get(&after[..close]) {
                    out.push_str(&render(v));
                }
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn percent_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// Expands `${VAR}` from the environment (unset variables become empty).
fn expand_env(s: &str) -> String {
    let mut out = String::new();
    let mut rest = s;
    while let Some(i) = rest.find("${") {
        out.push_str(&rest[..i]);
        match rest[i + 2..].find('}') {
            Some(j) => {
                out.push_str(&std::env::var(&rest[i + 2..i + 2 + j]).unwrap_or_default());
                rest = &rest[i + 3 + j..];
            }
            None => {
                out.push_str(&rest[i..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{ParamSpec, ParamType, Tool};

    fn weather_pool() -> ToolPool {
        ToolPool::new(vec![Tool {
            name: "get_weather".into(),
            description: "current weather for a city".into(),
            function: FunctionSpec {
                api_name: "get_weather".into(),
                parameters: vec![ParamSpec {
                    name: "city".into(),
                    kind: ParamType::String,
                    required: true,
                    description: "city name".into(),
                }],
                returns: "weather JSON".into(),
            },
        }])
        .unwrap()
    }

    fn mock_exec() -> RegistryExecutor {
        let mut b = BTreeMap::new();
        b.insert("get_weather".to_string(), Binding::mock(r#"{"temp_c": 18}"#));
        RegistryExecutor::new(b).with_pool(&weather_pool())
    }

    #[test]
    fn mock_pass_through() {
        let ex = mock_exec();
        let r = ex.execute(&CallCommand::new("get_weather").arg("city", "Paris")).unwrap();
        assert_eq!(r.body, r#"{"temp_c": 18}"#);
        assert_eq!(r.status, 200);
        assert_eq!(ex.executed(), 1);
    }

    #[test]
    fn missing_param_and_unknown_api() {
        let ex = mock_exec();
        assert_eq!(
            ex.execute(&CallCommand::new("get_weather")),
            Err(ExecError::MissingRequiredParam("city".into()))
        );
        assert_eq!(
            ex.execute(&CallCommand::new("get_stock")),
            Err(ExecError::UnknownApi("get_stock".into()))
        );
        assert_eq!(ex.executed(), 0);
    }

    #[test]
    fn body_truncated_at_limit() {
        let mut b = BTreeMap::new();
        b.insert("big".to_string(), Binding::mock("x".repeat(5000)));
        let ex = RegistryExecutor::new(b);
        let r = ex.execute(&CallCommand::new("big")).unwrap();
        assert_eq!(r.body.len(), DEFAULT_MAX_BODY_BYTES);
        assert!(r.truncated);
    }

    #[test]
    fn template_substitution_escapes() {
        let c = CallCommand::new("f").arg("city", "São Paulo & co").arg("n", 2.0);
        let url = fill_template("http://h/w?q={city}&n={n}&x={missing}&lit={ }", &c, |v| {
            percent_encode(&v.to_plain())
        });
        assert_eq!(url, "http://h/w?q=S%C3%A3o%20Paulo%20%26%20co&n=2&x=&lit={ }");
        let body = fill_template(r#"{"q": {city}, "n": {n}}"#, &c, |v| v.to_json().to_string());
        assert_eq!(body, r#"{"q": "São Paulo & co", "n": 2}"#);
    }

    #[test]
    fn registry_file_parses_and_checks() {
        let ok = r#"{"get_weather": {"binding": "http-get", "url_template": "http://x/{city}", "canned": null, "headers": {}},
                     "echo": {"binding": "mock", "url_template": null, "canned": "hi", "headers": {}}}"#;
        assert!(RegistryExecutor::from_json(ok).is_ok());
        let bad = r#"{"x": {"binding": "http-json", "url_template": null, "canned": null, "headers": {}}}"#;
        assert!(matches!(RegistryExecutor::from_json(bad), Err(ExecError::Config(_))));
    }

    #[test]
    fn env_expansion() {
        std::env::set_var("DECITOOL_TEST_TOKEN", "abc");
        assert_eq!(expand_env("Bearer ${DECITOOL_TEST_TOKEN}!"), "Bearer abc!");
        assert_eq!(expand_env("no vars"), "no vars");
    }
}
