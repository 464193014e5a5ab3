//! Question-answering auditor: maps an article and its domain's question set
//! to a binary answer vector.
//!
//! Two auditors are provided. [`audit_live`] asks a chat model the domain's
//! yes/no questions. [`audit_oracle`] reads back the fact bits that the
//! synthetic rewrite backend embeds in its output, and is exact.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::json;
use thiserror::Error;

use crate::agents::{self, SYNTHETIC_TRAILER_PREFIX};
use crate::chat::{BackendError, CallContext, ChatClient, Role};
use crate::corpus::DomainSpec;

/// System prompt for the fact-checking model, used verbatim.
pub const AUDITOR_SYSTEM_PROMPT: &str = "You are an external fact checker that answers yes/no questions based on a given text. Return your response as a JSON object with an answers key containing an array of 1 (for Yes) or 0 (for No).";

/// Appended as a follow-up turn when the first response could not be parsed.
pub const AUDITOR_REASK_PROMPT: &str = "Your previous reply could not be parsed. Reply with only a JSON object of the form {\"answers\": [...]} containing exactly one 1 or 0 per question, in order.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VectorError {
    #[error("answer vector must have at least one entry")]
    Empty,
    #[error("answer vector entry {index} is {value}, expected 0 or 1")]
    NotBinary { index: usize, value: i64 },
    #[error("answer vector bit string contains {0:?}")]
    BadChar(char),
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit response for {domain_id} could not be parsed ({reason}): {raw}")]
    Parse {
        domain_id: String,
        reason: String,
        raw: String,
    },
    #[error("article carries no synthetic fact trailer; oracle auditor used on non-synthetic text")]
    BackendMismatch,
    #[error("synthetic fact trailer is corrupt: {0}")]
    CorruptTrailer(String),
    #[error("trailer has {found} fact bits but domain {domain_id} has {expected} questions")]
    LengthMismatch {
        domain_id: String,
        found: usize,
        expected: usize,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// The auditor's verdicts for one article: bit `j` is 1 when the answer to
/// question `j` of the domain is recoverable from the text.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct AnswerVector {
    domain_id: String,
    bits: Vec<bool>,
}

impl AnswerVector {
    pub fn new(domain_id: impl Into<String>, bits: Vec<bool>) -> Result<Self, VectorError> {
        if bits.is_empty() {
            return Err(VectorError::Empty);
        }
        Ok(Self {
            domain_id: domain_id.into(),
            bits,
        })
    }

    pub fn from_ints(domain_id: impl Into<String>, values: &[i64]) -> Result<Self, VectorError> {
        let bits = values
            .iter()
            .enumerate()
            .map(|(index, &value)| match value {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(VectorError::NotBinary { index, value }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(domain_id, bits)
    }

    /// Parses a string such as `"1110000000"`.
    pub fn from_bit_string(domain_id: impl Into<String>, s: &str) -> Result<Self, VectorError> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(VectorError::BadChar(other)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(domain_id, bits)
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn m(&self) -> usize {
        self.bits.len()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    /// 0-based positions of questions answered "no".
    pub fn zero_positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| (!b).then_some(j))
            .collect()
    }
}

impl fmt::Debug for AnswerVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AnswerVector({}:{})", self.domain_id, self.to_bit_string())
    }
}

#[derive(Serialize, Deserialize)]
struct AnswerVectorRepr {
    domain_id: String,
    bits: String,
}

impl Serialize for AnswerVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        AnswerVectorRepr {
            domain_id: self.domain_id.clone(),
            bits: self.to_bit_string(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AnswerVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = AnswerVectorRepr::deserialize(deserializer)?;
        AnswerVector::from_bit_string(repr.domain_id, &repr.bits).map_err(serde::de::Error::custom)
    }
}

/// The truth-anchored reference: every correct answer present.
pub fn reference_vector(domain_id: impl Into<String>, m: usize) -> Result<AnswerVector, VectorError> {
    AnswerVector::new(domain_id, vec![true; m])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub branch_index: u32,
    pub node_index: u32,
    pub vector: AnswerVector,
    /// Raw model output; only present for live audits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_auditor_output: Option<String>,
}

/// Exact auditor for synthetic articles: returns the embedded fact bits.
pub fn audit_oracle(
    article: &str,
    domain: &DomainSpec,
    branch_index: u32,
    node_index: u32,
) -> Result<AuditRecord, AuditError> {
    let vector = read_trailer(article, &domain.id)?;
    if vector.m() != domain.m() {
        return Err(AuditError::LengthMismatch {
            domain_id: domain.id.clone(),
            found: vector.m(),
            expected: domain.m(),
        });
    }
    Ok(AuditRecord {
        branch_index,
        node_index,
        vector,
        raw_auditor_output: None,
    })
}

fn read_trailer(article: &str, domain_id: &str) -> Result<AnswerVector, AuditError> {
    let line = article
        .lines()
        .rev()
        .find(|l| l.starts_with(SYNTHETIC_TRAILER_PREFIX))
        .ok_or(AuditError::BackendMismatch)?;
    let bits = agents::parse_trailer_line(line).ok_or_else(|| AuditError::CorruptTrailer(line.to_string()))?;
    AnswerVector::from_bit_string(domain_id, bits).map_err(|e| AuditError::CorruptTrailer(e.to_string()))
}

/// User turn for the live auditor: the article followed by the numbered questions.
pub fn audit_user_prompt(article: &str, domain: &DomainSpec) -> String {
    let mut s = format!("Text:\n{article}\n\nQuestions:\n");
    for (j, q) in domain.questions.iter().enumerate() {
        s.push_str(&format!("{}. {}\n", j + 1, q));
    }
    s
}

/// Parses `{"answers": [..]}` from a model reply, tolerating a fenced code block.
pub fn parse_answers(raw: &str, domain: &DomainSpec) -> Result<AnswerVector, AuditError> {
    let fail = |reason: String| AuditError::Parse {
        domain_id: domain.id.clone(),
        reason,
        raw: raw.to_string(),
    };
    let body = strip_code_fence(raw);
    let value: serde_json::Value = serde_json::from_str(body).map_err(|e| fail(format!("not JSON: {e}")))?;
    let answers = value
        .get("answers")
        .and_then(|a| a.as_array())
        .ok_or_else(|| fail("no `answers` array".to_string()))?;
    if answers.len() != domain.m() {
        return Err(fail(format!(
            "expected {} answers, got {}",
            domain.m(),
            answers.len()
        )));
    }
    let ints = answers
        .iter()
        .map(|v| v.as_i64().ok_or_else(|| fail(format!("non-integer answer {v}"))))
        .collect::<Result<Vec<_>, _>>()?;
    AnswerVector::from_ints(domain.id.clone(), &ints).map_err(|e| fail(e.to_string()))
}

fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        if let Some(inner) = rest.strip_suffix("```") {
            return inner.trim();
        }
    }
    t
}

/// Asks the auditor model the domain's questions about `article`.
///
/// An unparseable reply gets exactly one re-ask; a second failure is an
/// error carrying the raw text. Bits are never guessed.
pub fn audit_live(
    client: &ChatClient,
    article: &str,
    domain: &DomainSpec,
    ctx: &CallContext,
) -> Result<AuditRecord, AuditError> {
    let user = audit_user_prompt(article, domain);
    let mut messages = vec![
        (Role::System, AUDITOR_SYSTEM_PROMPT.to_string()),
        (Role::User, user),
    ];
    let extra = json!({ "response_format": { "type": "json_object" } });
    let first = client.complete(&messages, Some(&extra), &ctx.with_role("audit"))?;
    let parse_err = match parse_answers(&first.content, domain) {
        Ok(vector) => {
            return Ok(AuditRecord {
                branch_index: ctx.branch_index,
                node_index: ctx.node_index,
                vector,
                raw_auditor_output: Some(first.content),
            })
        }
        Err(e) => e,
    };
    log::warn!("{}: {parse_err}; re-asking once", ctx.label());
    messages.push((Role::Assistant, first.content));
    messages.push((Role::User, AUDITOR_REASK_PROMPT.to_string()));
    let second = client.complete(&messages, Some(&extra), &ctx.with_role("audit-reask"))?;
    let vector = parse_answers(&second.content, domain)?;
    Ok(AuditRecord {
        branch_index: ctx.branch_index,
        node_index: ctx.node_index,
        vector,
        raw_auditor_output: Some(second.content),
    })
}
