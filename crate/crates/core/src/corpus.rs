//! Experimental corpus: persona prompts, source articles and the per-domain
//! audit question sets.
//!
//! A corpus lives on disk as three JSON files in one directory:
//!
//! * `personas.json`  – `[{"id": 1, "name": "...", "prompt": "..."}, ...]`
//! * `domains.json`   – `[{"id": "crime0", "title": "...", "body": "..."}, ...]`
//! * `questions.json` – `[{"domain_id": "crime0", "questions": ["...", ...]}, ...]`
//!
//! Every domain must carry exactly `m` questions, and `m` is shared by the
//! whole corpus because answer vectors are compared position by position.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PERSONAS_FILE: &str = "personas.json";
pub const DOMAINS_FILE: &str = "domains.json";
pub const QUESTIONS_FILE: &str = "questions.json";

const BUNDLED_PERSONAS: &str = include_str!("../data/personas.json");
const BUNDLED_DOMAINS: &str = include_str!("../data/domains.json");
const BUNDLED_QUESTIONS: &str = include_str!("../data/questions.json");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing corpus file {path}")]
    MissingFile { path: PathBuf },
    #[error("{file}: failed to read: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: malformed: {message}")]
    Malformed { file: String, message: String },
    #[error("{file}: record {position}: {message}")]
    InvalidRecord {
        file: String,
        position: usize,
        message: String,
    },
    #[error("{file}: record {position}: duplicate id {id}")]
    DuplicateId {
        file: String,
        position: usize,
        id: String,
    },
    #[error("{file}: record {position}: domain {domain_id} has {found} questions, expected {expected}")]
    QuestionCountMismatch {
        file: String,
        position: usize,
        domain_id: String,
        found: usize,
        expected: usize,
    },
    #[error("{file}: record {position}: questions for unknown domain {domain_id}")]
    UnknownDomain {
        file: String,
        position: usize,
        domain_id: String,
    },
    #[error("{file}: domain {domain_id} has no question set")]
    MissingQuestions { file: String, domain_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSpec {
    pub id: u32,
    pub name: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSpec {
    pub id: String,
    pub title: String,
    pub body: String,
    /// Positional: bit `j` of every answer vector for this domain refers to
    /// `questions[j]`.
    pub questions: Vec<String>,
}

impl DomainSpec {
    pub fn m(&self) -> usize {
        self.questions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub personas: Vec<PersonaSpec>,
    pub domains: Vec<DomainSpec>,
    pub m: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DomainRecord {
    id: String,
    title: String,
    body: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuestionRecord {
    domain_id: String,
    questions: Vec<String>,
}

impl Corpus {
    pub fn persona(&self, id: u32) -> Option<&PersonaSpec> {
        self.personas.iter().find(|p| p.id == id)
    }

    pub fn domain(&self, id: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.id.clone()).collect()
    }

    /// SHA-256 over the canonical JSON encoding of all three files.
    pub fn digest(&self) -> String {
        let (p, d, q) = self.encode();
        let mut h = Sha256::new();
        for part in [p, d, q] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn encode(&self) -> (String, String, String) {
        let domains: Vec<DomainRecord> = self
            .domains
            .iter()
            .map(|d| DomainRecord {
                id: d.id.clone(),
                title: d.title.clone(),
                body: d.body.clone(),
            })
            .collect();
        let questions: Vec<QuestionRecord> = self
            .domains
            .iter()
            .map(|d| QuestionRecord {
                domain_id: d.id.clone(),
                questions: d.questions.clone(),
            })
            .collect();
        // Serializing plain structs of strings cannot fail.
        (
            serde_json::to_string_pretty(&self.personas).unwrap() + "\n",
            serde_json::to_string_pretty(&domains).unwrap() + "\n",
            serde_json::to_string_pretty(&questions).unwrap() + "\n",
        )
    }
}

/// Writes the corpus as the three-file layout understood by [`load_corpus`].
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        file: dir.display().to_string(),
        source,
    })?;
    let (p, d, q) = corpus.encode();
    for (name, body) in [(PERSONAS_FILE, p), (DOMAINS_FILE, d), (QUESTIONS_FILE, q)] {
        fs::write(dir.join(name), body).map_err(|source| CorpusError::Io {
            file: name.to_string(),
            source,
        })?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let read = |name: &str| -> Result<String, CorpusError> {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(CorpusError::MissingFile { path });
        }
        fs::read_to_string(&path).map_err(|source| CorpusError::Io {
            file: name.to_string(),
            source,
        })
    };
    let personas = read(PERSONAS_FILE)?;
    let domains = read(DOMAINS_FILE)?;
    let questions = read(QUESTIONS_FILE)?;
    parse_corpus(&personas, &domains, &questions)
}

/// The experimental corpus: 21 personas, 10 news domains, 10 questions each.
pub fn bundled_corpus() -> Corpus {
    parse_corpus(BUNDLED_PERSONAS, BUNDLED_DOMAINS, BUNDLED_QUESTIONS)
        .expect("bundled corpus is valid")
}

fn parse_array<T: for<'de> Deserialize<'de>>(file: &str, text: &str) -> Result<Vec<T>, CorpusError> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
            file: file.to_string(),
            message: e.to_string(),
        })?;
    values
        .into_iter()
        .enumerate()
        .map(|(position, v)| {
            serde_json::from_value(v).map_err(|e| CorpusError::InvalidRecord {
                file: file.to_string(),
                position,
                message: e.to_string(),
            })
        })
        .collect()
}

fn parse_corpus(personas: &str, domains: &str, questions: &str) -> Result<Corpus, CorpusError> {
    let personas: Vec<PersonaSpec> = parse_array(PERSONAS_FILE, personas)?;
    let domains: Vec<DomainRecord> = parse_array(DOMAINS_FILE, domains)?;
    let questions: Vec<QuestionRecord> = parse_array(QUESTIONS_FILE, questions)?;

    let mut seen = BTreeSet::new();
    for (position, p) in personas.iter().enumerate() {
        let invalid = |message: &str| CorpusError::InvalidRecord {
            file: PERSONAS_FILE.to_string(),
            position,
            message: message.to_string(),
        };
        if p.id == 0 {
            return Err(invalid("persona id must be >= 1"));
        }
        if p.prompt.trim().is_empty() {
            return Err(invalid("empty persona prompt"));
        }
        if !seen.insert(p.id) {
            return Err(CorpusError::DuplicateId {
                file: PERSONAS_FILE.to_string(),
                position,
                id: p.id.to_string(),
            });
        }
    }

    let mut seen = BTreeSet::new();
    for (position, d) in domains.iter().enumerate() {
        if d.id.trim().is_empty() {
            return Err(CorpusError::InvalidRecord {
                file: DOMAINS_FILE.to_string(),
                position,
                message: "empty domain id".to_string(),
            });
        }
        if d.body.trim().is_empty() {
            return Err(CorpusError::InvalidRecord {
                file: DOMAINS_FILE.to_string(),
                position,
                message: format!("domain {} has an empty article body", d.id),
            });
        }
        if !seen.insert(d.id.as_str()) {
            return Err(CorpusError::DuplicateId {
                file: DOMAINS_FILE.to_string(),
                position,
                id: d.id.clone(),
            });
        }
    }

    let mut sets: BTreeMap<&str, &Vec<String>> = BTreeMap::new();
    let mut m = None;
    for (position, q) in questions.iter().enumerate() {
        if !seen.contains(q.domain_id.as_str()) {
            return Err(CorpusError::UnknownDomain {
                file: QUESTIONS_FILE.to_string(),
                position,
                domain_id: q.domain_id.clone(),
            });
        }
        if sets.insert(q.domain_id.as_str(), &q.questions).is_some() {
            return Err(CorpusError::DuplicateId {
                file: QUESTIONS_FILE.to_string(),
                position,
                id: q.domain_id.clone(),
            });
        }
        let expected = *m.get_or_insert(q.questions.len());
        if q.questions.len() != expected || expected == 0 {
            return Err(CorpusError::QuestionCountMismatch {
                file: QUESTIONS_FILE.to_string(),
                position,
                domain_id: q.domain_id.clone(),
                found: q.questions.len(),
                expected: expected.max(1),
            });
        }
        if let Some(j) = q.questions.iter().position(|s| s.trim().is_empty()) {
            return Err(CorpusError::InvalidRecord {
                file: QUESTIONS_FILE.to_string(),
                position,
                message: format!("question {} of {} is empty", j + 1, q.domain_id),
            });
        }
    }

    let domains = domains
        .into_iter()
        .map(|d| {
            let questions = sets
                .get(d.id.as_str())
                .map(|q| (*q).clone())
                .ok_or_else(|| CorpusError::MissingQuestions {
                    file: QUESTIONS_FILE.to_string(),
                    domain_id: d.id.clone(),
                })?;
            Ok(DomainSpec {
                id: d.id,
                title: d.title,
                body: d.body,
                questions,
            })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;

    Ok(Corpus {
        personas,
        domains,
        m: m.unwrap_or(0),
    })
}
