//! Referential order extraction and fixed-length normalization.

pub mod llm;
pub mod prompts;

use serde::{Deserialize, Serialize};

use crate::scene::{normalize_name, ClassVocab};

pub use llm::{
    llm_two_stage_order, CannedRecord, CannedTransport, ChatMessage, ChatRequest, HttpTransport, LlmEndpointConfig,
    LlmParser, Transport, TransportError,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ParseError {
    #[error("no class name found in description {0:?}")]
    EmptyOrder(String),
    #[error("endpoint failed after {attempts} attempts: {last}")]
    Endpoint { attempts: u32, last: String },
    #[error("could not parse model response ({what}): {raw_response:?}")]
    Response { what: String, raw_response: String },
    #[error("endpoint configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderSource {
    Rule,
    Llm,
}

/// Class names from first anchor to target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedOrder {
    pub names: Vec<String>,
    pub source: OrderSource,
    pub raw_response: Option<String>,
}

impl ParsedOrder {
    pub fn target(&self) -> &str {
        self.names.last().expect("parsed orders are nonempty")
    }
}

/// Something that turns a description into an order.
pub trait OrderParser {
    fn parse(&self, description: &str, vocab: &ClassVocab) -> Result<ParsedOrder, ParseError>;
}

/// Lowercase alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Class names in order of first appearance, longest match first.
///
/// No reordering happens: "the water bottle above the easy chair" yields
/// `[water bottle, easy chair]`.
pub fn parse_appearance_order(description: &str, vocab: &ClassVocab) -> Result<ParsedOrder, ParseError> {
    let tokens = tokenize(description);
    let mut entries: Vec<(Vec<String>, &str)> = vocab
        .names()
        .iter()
        .map(|n| (tokenize(n), n.as_str()))
        .filter(|(t, _)| !t.is_empty())
        .collect();
    entries.sort_by_key(|(t, _)| std::cmp::Reverse(t.len()));

    let mut names: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let hit = entries
            .iter()
            .find(|(t, _)| tokens.len() - i >= t.len() && tokens[i..i + t.len()] == t[..]);
        match hit {
            Some((t, name)) => {
                if !names.iter().any(|n| n == name) {
                    names.push(name.to_string());
                }
                i += t.len();
            }
            None => i += 1,
        }
    }
    if names.is_empty() {
        return Err(ParseError::EmptyOrder(description.to_string()));
    }
    Ok(ParsedOrder {
        names,
        source: OrderSource::Rule,
        raw_response: None,
    })
}

/// The offline appearance-order parser.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleParser;

impl OrderParser for RuleParser {
    fn parse(&self, description: &str, vocab: &ClassVocab) -> Result<ParsedOrder, ParseError> {
        parse_appearance_order(description, vocab)
    }
}

/// Normalizes an order to exactly `len` names, target last: longer orders
/// lose elements from the front, shorter ones are left-padded by repeating
/// their first element.
///
/// # Panics
/// If `order` is empty or `len` is zero.
pub fn trim_pad<T: Clone>(order: &[T], len: usize) -> Vec<T> {
    assert!(!order.is_empty(), "trim_pad needs a nonempty order");
    assert!(len > 0, "trim_pad needs a positive length");
    if order.len() >= len {
        return order[order.len() - len..].to_vec();
    }
    let mut out = vec![order[0].clone(); len - order.len()];
    out.extend_from_slice(order);
    out
}

pub(crate) fn clean_name(raw: &str) -> String {
    normalize_name(raw.trim_matches(|c: char| c.is_whitespace() || "\"'.,;*`".contains(c)))
}
