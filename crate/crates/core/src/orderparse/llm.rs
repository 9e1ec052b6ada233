//! Two-stage order extraction through a chat-completions style endpoint.
//!
//! Stage one asks for a summarized description and the target object;
//! stage two asks for the arrow-separated referential order of the
//! summary. The transport is a trait so tests can replay canned
//! transcripts instead of touching the network.

use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{clean_name, prompts, OrderParser, OrderSource, ParseError, ParsedOrder};
use crate::scene::ClassVocab;

pub const ENV_ENDPOINT: &str = "VIGOR_LLM_ENDPOINT";
pub const ENV_KEY: &str = "VIGOR_LLM_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
}

impl LlmEndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token_env: ENV_KEY.to_string(),
            timeout_secs: 30.0,
            max_retries: 2,
        }
    }

    /// Base URL from `VIGOR_LLM_ENDPOINT`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, ParseError> {
        let base = std::env::var(ENV_ENDPOINT).map_err(|_| ParseError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        Ok(Self::new(base, model))
    }

    pub fn validate(&self) -> Result<(), ParseError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ParseError::Config("timeout must be > 0".into()));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn user(model: &str, content: String) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content,
            }],
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TransportError {
    #[error("transport: {0}")]
    Io(String),
    #[error("response has no text content: {0}")]
    NoContent(String),
    #[error("no canned response matches the request")]
    NoMatch,
}

/// Sends one chat request and returns the text of the first choice.
pub trait Transport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

impl<T: Transport + ?Sized> Transport for &T {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        (**self).send(request)
    }
}

/// Text of `choices[0].message.content` (or `choices[0].text`).
pub fn first_choice_text(body: &serde_json::Value) -> Result<String, TransportError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| TransportError::NoContent(body.to_string()))?;
    choice
        .get("message")
        .and_then(|m| m.get("content"))
        .or_else(|| choice.get("text"))
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| TransportError::NoContent(body.to_string()))
}

/// Blocking HTTP transport posting JSON to `{base_url}/chat/completions`.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &LlmEndpointConfig) -> Result<Self, ParseError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            agent,
            url: config.completions_url(),
            token: std::env::var(&config.token_env).ok(),
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = req.send_json(request).map_err(|e| TransportError::Io(e.to_string()))?;
        let body: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::Io(e.to_string()))?;
        first_choice_text(&body)
    }
}

/// One line of a canned transcript file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannedRecord {
    pub request_substring: String,
    pub response: String,
}

/// Replays responses: the first record whose `request_substring` occurs in
/// the request's message content wins.
#[derive(Clone, Debug, Default)]
pub struct CannedTransport {
    records: Vec<CannedRecord>,
}

impl CannedTransport {
    pub fn new(records: Vec<CannedRecord>) -> Self {
        Self { records }
    }

    /// Reads line-delimited JSON records; blank lines are skipped.
    pub fn from_reader<R: BufRead>(reader: R) -> std::io::Result<Self> {
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CannedRecord =
                serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn from_path(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(f))
    }
}

impl Transport for CannedTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let content: String = request.messages.iter().map(|m| m.content.as_str()).collect();
        self.records
            .iter()
            .find(|r| content.contains(&r.request_substring))
            .map(|r| r.response.clone())
            .ok_or(TransportError::NoMatch)
    }
}

fn send_with_retries<T: Transport>(
    transport: &T,
    config: &LlmEndpointConfig,
    prompt: String,
) -> Result<String, ParseError> {
    let request = ChatRequest::user(&config.model, prompt);
    let attempts = config.max_retries + 1;
    let mut last = String::new();
    for attempt in 1..=attempts {
        match transport.send(&request) {
            Ok(text) => return Ok(text),
            Err(e) => {
                log::warn!("order endpoint attempt {attempt}/{attempts} failed: {e}");
                last = e.to_string();
            }
        }
    }
    Err(ParseError::Endpoint { attempts, last })
}

/// Value following `label` (case-insensitive, optional example number
/// before the colon) up to the end of its line or the next known label.
fn field(text: &str, label: &str, stops: &[&str]) -> Option<String> {
    let lower = text.to_lowercase();
    let mut from = 0;
    while let Some(pos) = lower[from..].find(label) {
        let start = from + pos;
        from = start + label.len();
        // Reject matches inside a longer label, e.g. "description" inside
        // "summarized description".
        if start > 0 && lower[..start].chars().next_back().is_some_and(char::is_alphanumeric) {
            continue;
        }
        let rest = &lower[from..];
        let skipped = rest
            .find(|c: char| !(c.is_ascii_digit() || c == ' ' || c == '*'))
            .unwrap_or(rest.len());
        if !rest[skipped..].starts_with(':') {
            continue;
        }
        let value_start = from + skipped + 1;
        let mut end = lower[value_start..].find('\n').map_or(lower.len(), |e| value_start + e);
        for stop in stops {
            if let Some(e) = lower[value_start..end].find(stop) {
                end = end.min(value_start + e);
            }
        }
        // Lowercasing can change byte lengths only outside ASCII; fall back
        // to the lowercased text in that case.
        let source = if lower.len() == text.len() { text } else { &lower };
        return Some(source[value_start..end].trim().trim_matches('*').trim().to_string());
    }
    None
}

const SUMMARY_LABEL: &str = "summarized description";
const TARGET_LABEL: &str = "target object";
const ORDER_LABEL: &str = "referential order";
const ANCHOR_LABEL: &str = "anchor objects";

/// Splits `a→b→c` (or `a->b->c`) into cleaned names.
pub fn split_order(value: &str) -> Vec<String> {
    value
        .replace("->", "\u{2192}")
        .split('\u{2192}')
        .map(clean_name)
        .filter(|n| !n.is_empty())
        .collect()
}

/// Runs both stages against `transport` and returns the order with the
/// target last.
pub fn llm_two_stage_order<T: Transport>(
    description: &str,
    transport: &T,
    config: &LlmEndpointConfig,
) -> Result<ParsedOrder, ParseError> {
    config.validate()?;
    let first = send_with_retries(transport, config, prompts::first_stage(description))?;
    let summary = field(&first, SUMMARY_LABEL, &[TARGET_LABEL]).filter(|s| !s.is_empty());
    let target = field(&first, TARGET_LABEL, &[SUMMARY_LABEL]).map(|t| clean_name(&t));
    let (Some(summary), Some(target)) = (summary, target) else {
        return Err(ParseError::Response {
            what: "expected 'summarized description:' and 'target object:' lines".into(),
            raw_response: first,
        });
    };

    let second = send_with_retries(transport, config, prompts::second_stage(&summary))?;
    let names = field(&second, ORDER_LABEL, &[ANCHOR_LABEL])
        .map(|v| split_order(&v))
        .unwrap_or_default();
    if names.is_empty() {
        return Err(ParseError::Response {
            what: "expected a 'referential order:' line".into(),
            raw_response: second,
        });
    }
    let mut raw = format!("{first}\n---\n{second}");
    if names.last().map(String::as_str) != Some(target.as_str()) {
        log::warn!(
            "stage-one target {target:?} differs from order target {:?}; keeping the order",
            names.last()
        );
        raw.push_str(&format!("\n---\nstage-one target: {target}"));
    }
    Ok(ParsedOrder {
        names,
        source: OrderSource::Llm,
        raw_response: Some(raw),
    })
}

/// [`OrderParser`] backed by the two-stage endpoint client.
pub struct LlmParser<T> {
    pub transport: T,
    pub config: LlmEndpointConfig,
}

impl<T: Transport> OrderParser for LlmParser<T> {
    fn parse(&self, description: &str, _vocab: &ClassVocab) -> Result<ParsedOrder, ParseError> {
        llm_two_stage_order(description, &self.transport, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn cfg() -> LlmEndpointConfig {
        LlmEndpointConfig::new("http://localhost:1", "test-model")
    }

    fn canned(pairs: &[(&str, &str)]) -> CannedTransport {
        CannedTransport::new(
            pairs
                .iter()
                .map(|(k, v)| CannedRecord {
                    request_substring: k.to_string(),
                    response: v.to_string(),
                })
                .collect(),
        )
    }

    #[test]
    fn parses_two_stage_transcript() {
        let t = canned(&[
            (
                "Now for the description The pillow closest to the foot of the bed.",
                "summarized description: The pillow closest to the foot of the bed.\ntarget object: pillow",
            ),
            (
                "Now for the description: The pillow closest",
                "referential order: bed\u{2192}pillow",
            ),
        ]);
        let order = llm_two_stage_order("The pillow closest to the foot of the bed.", &t, &cfg()).unwrap();
        assert_eq!(order.names, vec!["bed", "pillow"]);
        assert_eq!(order.source, OrderSource::Llm);
    }

    #[test]
    fn malformed_second_stage_is_a_parse_error() {
        let t = canned(&[
            (
                "Now for the description X",
                "summarized description: X\ntarget object: x",
            ),
            ("Now for the description: X", "no arrows here"),
        ]);
        match llm_two_stage_order("X", &t, &cfg()) {
            Err(ParseError::Response { raw_response, .. }) => assert_eq!(raw_response, "no arrows here"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn field_extraction_variants() {
        let text = "**Summarized description 1:** The lamp.\nTarget object: Lamp";
        assert_eq!(field(text, SUMMARY_LABEL, &[TARGET_LABEL]).unwrap(), "The lamp.");
        assert_eq!(field(text, TARGET_LABEL, &[]).unwrap(), "Lamp");
        let one_line = "referential order: desk -> lamp, anchor objects: desk";
        let v = field(one_line, ORDER_LABEL, &[ANCHOR_LABEL]).unwrap();
        assert_eq!(split_order(&v), vec!["desk", "lamp"]);
        assert_eq!(field("the description: hi", SUMMARY_LABEL, &[]), None);
    }

    struct Flaky {
        failures: Cell<u32>,
    }

    impl Transport for Flaky {
        fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
            if self.failures.get() > 0 {
                self.failures.set(self.failures.get() - 1);
                return Err(TransportError::Io("connection reset".into()));
            }
            if request.messages[0].content.contains("Now for the description:") {
                Ok("referential order: door\u{2192}cabinet".into())
            } else {
                Ok("summarized description: The cabinet right of the door.\ntarget object: cabinet".into())
            }
        }
    }

    #[test]
    fn retries_then_gives_up() {
        let t = Flaky { failures: Cell::new(2) };
        let order = llm_two_stage_order("whatever", &t, &cfg()).unwrap();
        assert_eq!(order.names, vec!["door", "cabinet"]);

        let t = Flaky {
            failures: Cell::new(10),
        };
        assert_eq!(
            llm_two_stage_order("whatever", &t, &cfg()),
            Err(ParseError::Endpoint {
                attempts: 3,
                last: "transport: connection reset".into()
            })
        );
    }

    #[test]
    fn target_disagreement_is_recorded() {
        let t = canned(&[
            (
                "Now for the description D",
                "summarized description: S\ntarget object: lamp",
            ),
            ("Now for the description: S", "referential order: desk\u{2192}chair"),
        ]);
        let order = llm_two_stage_order("D", &t, &cfg()).unwrap();
        assert_eq!(order.names, vec!["desk", "chair"]);
        assert!(order.raw_response.unwrap().contains("stage-one target: lamp"));
    }

    #[test]
    fn request_body_shape() {
        let req = ChatRequest::user("m", "hello".into());
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"model": "m", "messages": [{"role": "user", "content": "hello"}]})
        );
        let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": "hi"}}]});
        assert_eq!(first_choice_text(&body).unwrap(), "hi");
        assert!(first_choice_text(&serde_json::json!({"choices": []})).is_err());
    }

    #[test]
    fn zero_timeout_is_rejected() {
        let mut c = cfg();
        c.timeout_secs = 0.0;
        assert!(matches!(c.validate(), Err(ParseError::Config(_))));
    }

    #[test]
    fn prompts_embed_description() {
        let p = prompts::first_stage("FIND ME");
        assert!(p.contains("Now for the description FIND ME, give me the summarized description"));
        assert!(p.contains("target object 10: shoes"));
        let p = prompts::second_stage("SUMMARY");
        assert!(p.contains("Now for the description: SUMMARY, give me the anchor objects"));
        assert!(p.contains("referential order 4: desk\u{2192}pencil\u{2192}desk lamp\u{2192}backpack"));
    }
}
