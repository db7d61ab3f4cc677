//! Report-level label extraction: a fixed prompt template, strict response
//! parsing, a pluggable extractor interface and a deterministic rule-based
//! fallback for offline runs.

use std::time::Duration;

use crate::error::{Error, Result};
use crate::records::ColonoscopyRecord;

/// Persona line for the system message.
pub const SYSTEM_TEXT: &str = "You are a professional endoscopist";

/// Instruction template for the user message; `*report*` is replaced by the
/// report body. Kept as a single constant so deployments can swap wording
/// (e.g. source-language variants) in one place.
pub const USER_TEMPLATE: &str = "Based on the following text provided, determine whether the \
content refers to polyps. Flat and raised lesions are also a type of polyps. If there are \
polyps, answer 1; if there are no polyps, answer 0. You only need to answer 1 or 0, no \
explanation is required. Here is the text: *report*";

const PLACEHOLDER: &str = "*report*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One chat exchange: persona + instruction, plus any prior turns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptExchange {
    pub system_text: String,
    pub user_text: String,
    pub history: Vec<(Role, String)>,
}

/// Where a report label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Llm,
    Rule,
    Expert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportLabel {
    pub value: u8,
    pub source: LabelSource,
}

/// Fill the instruction template with a report.
pub fn build_prompt(report_text: &str) -> Result<PromptExchange> {
    build_prompt_with(report_text, USER_TEMPLATE)
}

/// Same as [`build_prompt`] but with a caller-supplied template containing
/// one `*report*` placeholder. The report is substituted verbatim — no
/// escaping, even if it happens to contain instruction-like text.
pub fn build_prompt_with(report_text: &str, template: &str) -> Result<PromptExchange> {
    if report_text.is_empty() {
        return Err(Error::Data("empty report text".into()));
    }
    assert!(template.contains(PLACEHOLDER), "template lacks {PLACEHOLDER} placeholder");
    Ok(PromptExchange {
        system_text: SYSTEM_TEXT.to_string(),
        user_text: template.replacen(PLACEHOLDER, report_text, 1),
        history: Vec::new(),
    })
}

/// Accepts exactly "0" or "1" modulo surrounding whitespace.
pub fn parse_response(text: &str) -> Result<u8> {
    match text.trim() {
        "1" => Ok(1),
        "0" => Ok(0),
        _ => Err(Error::AmbiguousResponse { raw: text.to_string() }),
    }
}

/// Provider abstraction: anything that can answer a [`PromptExchange`].
pub trait LabelExtractor {
    /// Send one prompt and return the raw response text.
    fn send(&self, prompt: &PromptExchange) -> Result<String>;

    /// How labels from this extractor should be attributed.
    fn source(&self) -> LabelSource;

    /// Whether one instance may be shared across threads; adapters that
    /// hold exclusive connections declare `false` and are instantiated per
    /// execution context instead.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Default backoff base between retried sends.
pub const DEFAULT_BACKOFF: Duration = Duration::from_millis(200);

/// Extract the label for one record, retrying ambiguous responses and
/// transport failures up to `retries` extra attempts with exponential
/// backoff.
pub fn extract_report_label(
    record: &ColonoscopyRecord,
    extractor: &dyn LabelExtractor,
    retries: usize,
) -> Result<ReportLabel> {
    extract_report_label_with(record, extractor, retries, DEFAULT_BACKOFF)
}

pub fn extract_report_label_with(
    record: &ColonoscopyRecord,
    extractor: &dyn LabelExtractor,
    retries: usize,
    backoff: Duration,
) -> Result<ReportLabel> {
    let prompt = build_prompt(&record.report_text)?;
    let mut last_err = String::new();
    for attempt in 0..=retries {
        if attempt > 0 && !backoff.is_zero() {
            std::thread::sleep(backoff * (1u32 << (attempt - 1).min(16)));
        }
        match extractor.send(&prompt) {
            Ok(text) => match parse_response(&text) {
                Ok(value) => return Ok(ReportLabel { value, source: extractor.source() }),
                Err(e) => last_err = e.to_string(),
            },
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(Error::ExtractionFailed {
        record_id: record.record_id.clone(),
        attempts: retries + 1,
        last: last_err,
    })
}

/// Keyword lists for the offline rule extractor. Not clinically adequate;
/// sized for the templated synthetic corpus.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub positives: Vec<String>,
    pub negations: Vec<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon {
            positives: ["polyps", "polyp", "息肉"].map(String::from).to_vec(),
            negations: ["no", "not", "without", "free of", "未见", "无"]
                .map(String::from)
                .to_vec(),
        }
    }
}

/// Position of `needle` in `hay` requiring non-alphanumeric boundaries for
/// ASCII keywords (so "no" does not match inside "normal"); CJK keywords
/// match as plain substrings.
fn find_keyword(hay: &str, needle: &str) -> Option<usize> {
    let ascii = needle.is_ascii();
    let mut from = 0;
    while let Some(rel) = hay[from..].find(needle) {
        let at = from + rel;
        if !ascii {
            return Some(at);
        }
        let before_ok = at == 0
            || !hay[..at].chars().next_back().map(|c| c.is_alphanumeric()).unwrap_or(false);
        let end = at + needle.len();
        let after_ok =
            end == hay.len() || !hay[end..].chars().next().map(|c| c.is_alphanumeric()).unwrap_or(false);
        if before_ok && after_ok {
            return Some(at);
        }
        from = at + needle.len();
    }
    None
}

/// 1 iff any positive keyword occurs in a clause without a negation earlier
/// in the same clause. Clauses split on `.,;` and their CJK equivalents.
pub fn rule_based_extract(report_text: &str, lexicon: &Lexicon) -> u8 {
    assert!(!lexicon.positives.is_empty(), "lexicon has no positive keywords");
    let text = report_text.to_lowercase();
    for clause in text.split(['.', ',', ';', '\n', '。', '，', '；']) {
        let hit = lexicon
            .positives
            .iter()
            .filter_map(|k| find_keyword(clause, &k.to_lowercase()))
            .min();
        let Some(pos_at) = hit else { continue };
        let negated = lexicon
            .negations
            .iter()
            .filter_map(|n| find_keyword(clause, &n.to_lowercase()))
            .any(|neg_at| neg_at < pos_at);
        if !negated {
            return 1;
        }
    }
    0
}

/// [`LabelExtractor`] backed by [`rule_based_extract`]: recovers the report
/// body from the prompt (everything after the template's final marker) and
/// applies the lexicon.
#[derive(Debug, Clone, Default)]
pub struct RuleExtractor {
    pub lexicon: Lexicon,
}

const REPORT_MARKER: &str = "Here is the text: ";

impl LabelExtractor for RuleExtractor {
    fn send(&self, prompt: &PromptExchange) -> Result<String> {
        let report = prompt
            .user_text
            .split_once(REPORT_MARKER)
            .map(|(_, tail)| tail)
            .ok_or_else(|| Error::Transport("prompt lacks report marker".into()))?;
        Ok(rule_based_extract(report, &self.lexicon).to_string())
    }

    fn source(&self) -> LabelSource {
        LabelSource::Rule
    }
}
