//! Prompt templates. The tool list is rendered from a section delimited by
//! `{{#tools}}` and `{{/tools}}`, repeated once per candidate tool with
//! `{{tool_name}}`, `{{tool_description}}` and `{{function_signature}}`.

use std::fs;
use std::path::Path;

use crate::registry::Tool;

const DEFAULT_SYSTEM: &str = "You are a helpful assistant that can use external tools when they are needed.\n\
For every user query, first decide whether you need a tool.\n\
- If you can answer the query yourself, reply with `[ANSWER]` followed by your answer.\n\
- If you need to search for a tool, reply with `[SEARCH]` only.";

const DEFAULT_TOOLS: &str = "Candidate tools:\n\
{{#tools}}- {{tool_name}}: {{tool_description}}\n  signature: {{function_signature}}\n{{/tools}}\
Is there a suitable tool for the query?\n\
- If yes, reply with `[CALL]` followed by the call, e.g. `[CALL] api_name(arg=\"value\", n=3, flag=true)`.\n\
- If no, reply with `[NOCALL]` only.";

const DEFAULT_NOCALL: &str = "No suitable tool is available. Answer the query yourself.{{context}}";

const DEFAULT_OBSERVATION: &str = "API response:\n{{response}}\nUse this response to answer the query.";

const DEFAULT_CORRECTIVE_SEARCH: &str =
    "Your reply did not follow the protocol. Reply with `[ANSWER] <answer>` or `[SEARCH]`.";

const DEFAULT_CORRECTIVE_CALL: &str =
    "Your reply did not follow the protocol ({{error}}). Reply with `[CALL] api_name(arg=value, ...)` using one of the candidate tools, or `[NOCALL]`.";

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub system: String,
    pub tools: String,
    pub nocall: String,
    pub observation: String,
    pub corrective_search: String,
    pub corrective_call: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            system: DEFAULT_SYSTEM.into(),
            tools: DEFAULT_TOOLS.into(),
            nocall: DEFAULT_NOCALL.into(),
            observation: DEFAULT_OBSERVATION.into(),
            corrective_search: DEFAULT_CORRECTIVE_SEARCH.into(),
            corrective_call: DEFAULT_CORRECTIVE_CALL.into(),
        }
    }
}

impl PromptTemplates {
    /// Loads `system.txt`, `tools.txt`, `nocall.txt`, `observation.txt`,
    /// `corrective_search.txt` and `corrective_call.txt` from `dir`; missing
    /// files keep their defaults.
    pub fn load_dir(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("template directory {} not found", dir.display()),
            ));
        }
        let mut t = Self::default();
        for (file, slot) in [
            ("system.txt", &mut t.system),
            ("tools.txt", &mut t.tools),
            ("nocall.txt", &mut t.nocall),
            ("observation.txt", &mut t.observation),
            ("corrective_search.txt", &mut t.corrective_search),
            ("corrective_call.txt", &mut t.corrective_call),
        ] {
            let path = dir.join(file);
            if path.exists() {
                *slot = fs::read_to_string(path)?.trim_end().to_string();
            }
        }
        Ok(t)
    }

    pub fn render_tools<'t>(&self, tools: impl IntoIterator<Item = &'t Tool>, include_signature: bool) -> String {
        let (head, section, tail) = match (self.tools.find("{{#tools}}"), self.tools.find("{{/tools}}")) {
            (Some(a), Some(b)) if a < b => (
                &self.tools[..a],
                &self.tools[a + "{{#tools}}".len()..b],
                &self.tools[b + "{{/tools}}".len()..],
            ),
            _ => ("", self.tools.as_str(), ""),
        };
        let mut out = String::from(head);
        for t in tools {
            let sig = if include_signature {
                t.function.signature()
            } else {
                String::new()
            };
            out.push_str(
                &section
                    .replace("{{tool_name}}", &t.name)
                    .replace("{{tool_description}}", &t.description)
                    .replace("{{function_signature}}", &sig),
            );
        }
        out.push_str(tail);
        out
    }

    pub fn render_nocall(&self, context: Option<&str>) -> String {
        let ctx = context.map(|c| format!("\nRelevant information:\n{c}")).unwrap_or_default();
        self.nocall.replace("{{context}}", &ctx)
    }

    pub fn render_observation(&self, body: &str) -> String {
        self.observation.replace("{{response}}", body)
    }

    pub fn render_corrective_call(&self, error: &str) -> String {
        self.corrective_call.replace("{{error}}", error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::FunctionSpec;

    fn tool(name: &str) -> Tool {
        Tool {
            name: name.into(),
            description: format!("{name} desc"),
            function: FunctionSpec {
                api_name: name.into(),
                parameters: vec![],
                returns: "x".into(),
            },
        }
    }

    #[test]
    fn renders_each_tool() {
        let t = PromptTemplates {
            tools: "H\n{{#tools}}[{{tool_name}}|{{tool_description}}|{{function_signature}}]{{/tools}}\nT".into(),
            ..PromptTemplates::default()
        };
        let tools = [tool("a"), tool("b")];
        assert_eq!(t.render_tools(&tools, true), "H\n[a|a desc|a() -> x][b|b desc|b() -> x]\nT");
        assert_eq!(t.render_tools(&tools, false), "H\n[a|a desc|][b|b desc|]\nT");
    }

    #[test]
    fn default_template_lists_names() {
        let s = PromptTemplates::default().render_tools(&[tool("get_weather")], true);
        assert!(s.contains("- get_weather: get_weather desc"));
        assert!(!s.contains("{{"));
    }

    #[test]
    fn load_dir_overrides() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("system.txt"), "SYS\n").unwrap();
        let t = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(t.system, "SYS");
        assert_eq!(t.tools, PromptTemplates::default().tools);
        assert!(PromptTemplates::load_dir(dir.path().join("missing")).is_err());
    }
}
