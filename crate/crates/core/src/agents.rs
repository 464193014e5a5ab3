//! Persona-conditioned rewriting.
//!
//! The live backend sends the persona prompt as the system turn and the
//! incoming article (under a fixed rewrite instruction) as the user turn.
//! The synthetic backend is a deterministic stand-in: it tracks which of the
//! `m` source facts are still recoverable and distorts or restores each one
//! per hop with persona-specific probabilities.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{BackendError, CallContext, ChatClient, ClientSettings, Role, API_BASE_ENV, API_KEY_ENV};
use crate::corpus::PersonaSpec;
use crate::rng;

/// User-turn instruction for the live rewrite, identical for every persona.
pub const REWRITE_INSTRUCTION: &str = "Rewrite the following news article in your own voice, as you would share it with your audience. Reply with the rewritten article only.";

pub const SYNTHETIC_TRAILER_PREFIX: &str = "<<facts:";
const SYNTHETIC_TRAILER_SUFFIX: &str = ">>";

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com";
pub const DEFAULT_REWRITE_MODEL: &str = "gpt-4o";
pub const DEFAULT_AUDITOR_MODEL: &str = "gpt-4o-mini";
pub const MAX_RETRIES_LIMIT: u32 = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("live backend requires a non-empty {0}")]
    MissingLiveField(&'static str),
    #[error("max_retries {0} exceeds the limit of {MAX_RETRIES_LIMIT}")]
    TooManyRetries(u32),
    #[error("max_in_flight must be positive")]
    ZeroInFlight,
    #[error("persona {id}: {field} {value} is outside [0, 1]")]
    RateOutOfRange { id: u32, field: &'static str, value: f64 },
    #[error("no synthetic profile for persona {0}")]
    MissingProfile(u32),
}

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("empty article text for {0}")]
    EmptyArticle(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Synthetic,
}

/// Per-hop distortion probabilities of one persona in the synthetic backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonaProfile {
    /// Probability that a recoverable fact is lost on this hop.
    pub flip_rate: f64,
    /// Probability that a lost fact becomes recoverable again on this hop.
    pub restore_rate: f64,
}

impl PersonaProfile {
    pub const fn new(flip_rate: f64, restore_rate: f64) -> Self {
        Self {
            flip_rate,
            restore_rate,
        }
    }
}

// (persona id, flip_rate, restore_rate). Identity- and ideology-driven
// personas distort fast and rarely recover; expert and neutral personas
// barely distort and tend to restore lost facts. Rows are in descending
// order of expected drift.
const DEFAULT_PROFILES: [(u32, f64, f64); 21] = [
    (13, 0.140, 0.06),
    (18, 0.130, 0.06),
    (3, 0.120, 0.06),
    (20, 0.110, 0.06),
    (1, 0.100, 0.06),
    (19, 0.090, 0.06),
    (12, 0.090, 0.07),
    (2, 0.080, 0.07),
    (5, 0.060, 0.08),
    (21, 0.050, 0.08),
    (10, 0.045, 0.09),
    (9, 0.040, 0.09),
    (4, 0.035, 0.09),
    (17, 0.030, 0.09),
    (15, 0.030, 0.10),
    (14, 0.025, 0.10),
    (11, 0.025, 0.10),
    (7, 0.020, 0.12),
    (16, 0.015, 0.15),
    (8, 0.010, 0.18),
    (6, 0.005, 0.20),
];

pub fn persona_profile_defaults() -> BTreeMap<u32, PersonaProfile> {
    DEFAULT_PROFILES
        .iter()
        .map(|&(id, f, r)| (id, PersonaProfile::new(f, r)))
        .collect()
}

fn default_temperature() -> f64 {
    1.0
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_max_retries() -> u32 {
    5
}
fn default_max_in_flight() -> usize {
    8
}
fn default_retry_base_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub auditor_model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    /// Synthetic per-persona rates overriding entries of the default table.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub profiles: BTreeMap<u32, PersonaProfile>,
}

impl BackendConfig {
    pub fn synthetic() -> Self {
        Self {
            kind: BackendKind::Synthetic,
            endpoint: String::new(),
            model_name: String::new(),
            auditor_model: String::new(),
            temperature: default_temperature(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            max_in_flight: default_max_in_flight(),
            retry_base_ms: default_retry_base_ms(),
            profiles: BTreeMap::new(),
        }
    }

    /// Live config; the endpoint comes from `MISINFO_API_BASE` when set.
    pub fn live() -> Self {
        Self {
            kind: BackendKind::Live,
            endpoint: std::env::var(API_BASE_ENV).unwrap_or_else(|_| DEFAULT_ENDPOINT.to_string()),
            model_name: DEFAULT_REWRITE_MODEL.to_string(),
            auditor_model: DEFAULT_AUDITOR_MODEL.to_string(),
            ..Self::synthetic()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(ConfigError::TooManyRetries(self.max_retries));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::ZeroInFlight);
        }
        if self.kind == BackendKind::Live {
            if self.endpoint.trim().is_empty() {
                return Err(ConfigError::MissingLiveField("endpoint"));
            }
            if self.model_name.trim().is_empty() {
                return Err(ConfigError::MissingLiveField("model_name"));
            }
            if self.auditor_model.trim().is_empty() {
                return Err(ConfigError::MissingLiveField("auditor_model"));
            }
        }
        for (&id, p) in &self.profiles {
            check_rate(id, "flip_rate", p.flip_rate)?;
            check_rate(id, "restore_rate", p.restore_rate)?;
        }
        Ok(())
    }

    /// The default table with `profiles` entries laid over it.
    pub fn effective_profiles(&self) -> BTreeMap<u32, PersonaProfile> {
        let mut out = persona_profile_defaults();
        out.extend(self.profiles.iter().map(|(&id, &p)| (id, p)));
        out
    }

    fn client_settings(&self, model: &str, temperature: f64) -> ClientSettings {
        ClientSettings {
            endpoint: self.endpoint.clone(),
            model: model.to_string(),
            temperature,
            timeout: Duration::from_secs(self.timeout_secs),
            max_retries: self.max_retries,
            retry_base: Duration::from_millis(self.retry_base_ms),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }

    pub fn rewrite_settings(&self) -> ClientSettings {
        self.client_settings(&self.model_name, self.temperature)
    }

    /// The auditor always samples at temperature 0.
    pub fn auditor_settings(&self) -> ClientSettings {
        self.client_settings(&self.auditor_model, 0.0)
    }
}

fn check_rate(id: u32, field: &'static str, value: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ConfigError::RateOutOfRange { id, field, value })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteInput<'a> {
    pub persona: &'a PersonaSpec,
    pub article_text: &'a str,
    pub domain_id: &'a str,
    pub branch_index: u32,
    pub node_index: u32,
}

impl RewriteInput<'_> {
    fn check(&self) -> Result<(), RewriteError> {
        if self.article_text.trim().is_empty() {
            return Err(RewriteError::EmptyArticle(format!(
                "{}/b{}/k{}",
                self.domain_id, self.branch_index, self.node_index
            )));
        }
        Ok(())
    }
}

/// Messages for a live rewrite: persona prompt as system, instruction plus
/// article as user.
pub fn rewrite_messages(input: &RewriteInput<'_>) -> Vec<(Role, String)> {
    vec![
        (Role::System, input.persona.prompt.clone()),
        (Role::User, format!("{REWRITE_INSTRUCTION}\n\n{}", input.article_text)),
    ]
}

pub fn rewrite_live(client: &ChatClient, input: &RewriteInput<'_>) -> Result<String, RewriteError> {
    input.check()?;
    let ctx = CallContext::new(input.domain_id, input.branch_index, input.node_index).with_role("rewrite");
    let completion = client.complete(&rewrite_messages(input), None, &ctx)?;
    Ok(completion.content)
}

/// State of a synthetic article: which source facts are still recoverable.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticState {
    pub fact_bits: Vec<bool>,
    pub rng_seed: u64,
    pub profile: PersonaProfile,
}

/// Applies one hop of synthetic distortion. Bit `j` draws from the keyed
/// generator at `(rng_seed, domain_id, branch, node, j)`.
pub fn rewrite_synthetic(state: &SyntheticState, input: &RewriteInput<'_>) -> (String, SyntheticState) {
    let fact_bits: Vec<bool> = state
        .fact_bits
        .iter()
        .enumerate()
        .map(|(j, &alive)| {
            let u = rng::fact_draw(
                state.rng_seed,
                input.domain_id,
                input.branch_index,
                input.node_index,
                j as u32,
            );
            if alive {
                u >= state.profile.flip_rate
            } else {
                u < state.profile.restore_rate
            }
        })
        .collect();
    let text = render_synthetic(input, &fact_bits);
    (
        text,
        SyntheticState {
            fact_bits,
            ..state.clone()
        },
    )
}

/// Canonical synthetic article: a header, a readable fact list and a
/// machine-readable trailer on the last line.
pub fn render_synthetic(input: &RewriteInput<'_>, fact_bits: &[bool]) -> String {
    let list = |want: bool| {
        let idx: Vec<String> = fact_bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == want)
            .map(|(j, _)| (j + 1).to_string())
            .collect();
        if idx.is_empty() {
            "none".to_string()
        } else {
            idx.join(", ")
        }
    };
    let bits: String = fact_bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
    format!(
        "[synthetic rewrite of {} by persona #{} ({}), branch {} node {}]\n\
         Recoverable facts: {}\n\
         Distorted facts: {}\n\
         {SYNTHETIC_TRAILER_PREFIX}{bits}{SYNTHETIC_TRAILER_SUFFIX}",
        input.domain_id,
        input.persona.id,
        input.persona.name,
        input.branch_index,
        input.node_index,
        list(true),
        list(false),
    )
}

/// Returns the bit string of a trailer line, or `None` if it is malformed.
pub fn parse_trailer_line(line: &str) -> Option<&str> {
    line.strip_prefix(SYNTHETIC_TRAILER_PREFIX)?
        .strip_suffix(SYNTHETIC_TRAILER_SUFFIX)
}
