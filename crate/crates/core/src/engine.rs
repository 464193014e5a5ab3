//! Branch construction and execution.
//!
//! A branch is a linear chain: node 0 holds the source article and node `k`
//! rewrites node `k-1`'s text with the persona assigned to position `k`. Each
//! node's output is audited and stored as a [`NodeRecord`] before the next
//! rewrite starts, so a killed run can be resumed from `records.log`.
//!
//! Run directory layout:
//!
//! * `manifest.json` – configuration, seeds, corpus digest, status
//! * `corpus/`       – snapshot of the corpus the run used
//! * `records.log`   – one JSON [`NodeRecord`] per line, sorted by
//!   `(domain, branch, node)` once the run finishes
//! * `calls.log`     – raw backend exchanges (live backend only)

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    self, BackendConfig, BackendKind, ConfigError, PersonaProfile, RewriteError, RewriteInput, SyntheticState,
};
use crate::auditor::{self, AnswerVector, AuditError};
use crate::chat::{CallContext, CallLog, ChatClient, Limiter};
use crate::corpus::{self, Corpus, CorpusError, DomainSpec};
use crate::metrics::{self, MetricsError, Mpr};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.log";
pub const CALLS_FILE: &str = "calls.log";
pub const CORPUS_DIR: &str = "corpus";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    CorruptLog {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    BadManifest { path: PathBuf, message: String },
    #[error("run directory {0} already contains a run; use resume")]
    RunExists(PathBuf),
    #[error("run interrupted after {0} records")]
    Interrupted(usize),
    #[error("source audit failed for {domain_id}: {source}")]
    SourceAudit {
        domain_id: String,
        #[source]
        source: AuditError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Homogeneous,
    Heterogeneous,
    Custom,
}

fn default_max_repeats() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub branch_count: u32,
    pub depth: u32,
    pub domain_ids: Vec<String>,
    pub backend: BackendConfig,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_assignment: Option<Vec<Vec<u32>>>,
    #[serde(default = "default_max_repeats")]
    pub max_repeats: u32,
}

impl RunConfig {
    /// One branch per persona over every domain at depth 30.
    pub fn full_grid(mode: Mode, corpus: &Corpus, master_seed: u64) -> Self {
        Self {
            mode,
            branch_count: corpus.personas.len() as u32,
            depth: 30,
            domain_ids: corpus.domain_ids(),
            backend: BackendConfig::synthetic(),
            master_seed,
            custom_assignment: None,
            max_repeats: default_max_repeats(),
        }
    }

    pub fn validate(&self, corpus: &Corpus) -> Result<(), EngineError> {
        let fail = |m: String| Err(EngineError::Config(m));
        self.backend.validate()?;
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.branch_count == 0 {
            return fail("branch_count must be at least 1".into());
        }
        if self.domain_ids.is_empty() {
            return fail("no domains selected".into());
        }
        let mut seen = BTreeSet::new();
        for d in &self.domain_ids {
            if corpus.domain(d).is_none() {
                return fail(format!("unknown domain {d}"));
            }
            if !seen.insert(d) {
                return fail(format!("domain {d} listed twice"));
            }
        }
        let personas = corpus.personas.len() as u64;
        match self.mode {
            Mode::Homogeneous => {
                if u64::from(self.branch_count) > personas {
                    return fail(format!(
                        "homogeneous mode runs one persona per branch; {} branches > {} personas",
                        self.branch_count, personas
                    ));
                }
            }
            Mode::Heterogeneous => {
                if u64::from(self.max_repeats) * personas < u64::from(self.depth) {
                    return fail(format!(
                        "infeasible heterogeneous config: {} repeats x {} personas < depth {}",
                        self.max_repeats, personas, self.depth
                    ));
                }
            }
            Mode::Custom => {
                let Some(rows) = &self.custom_assignment else {
                    return fail("custom mode needs a custom assignment".into());
                };
                if rows.len() != self.branch_count as usize {
                    return fail(format!(
                        "custom assignment has {} branches, config says {}",
                        rows.len(),
                        self.branch_count
                    ));
                }
                for (b, row) in rows.iter().enumerate() {
                    if row.len() != self.depth as usize {
                        return fail(format!(
                            "custom branch {} has {} personas, depth is {}",
                            b + 1,
                            row.len(),
                            self.depth
                        ));
                    }
                    if let Some(id) = row.iter().find(|&&id| corpus.persona(id).is_none()) {
                        return fail(format!("custom branch {} references unknown persona {id}", b + 1));
                    }
                }
            }
        }
        if self.backend.kind == BackendKind::Synthetic {
            let profiles = self.backend.effective_profiles();
            if let Some(p) = corpus.personas.iter().find(|p| !profiles.contains_key(&p.id)) {
                return Err(ConfigError::MissingProfile(p.id).into());
            }
        }
        Ok(())
    }
}

/// Persona sequence of one branch; position `k-1` holds the persona of node `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub branch_index: u32,
    pub persona_ids: Vec<u32>,
}

impl Assignment {
    pub fn counts(&self) -> BTreeMap<u32, u32> {
        let mut m = BTreeMap::new();
        for &id in &self.persona_ids {
            *m.entry(id).or_insert(0) += 1;
        }
        m
    }
}

pub fn build_assignments(config: &RunConfig, corpus: &Corpus, domain_id: &str) -> Result<Vec<Assignment>, EngineError> {
    config.validate(corpus)?;
    let k = config.depth as usize;
    let out: Vec<Assignment> = (1..=config.branch_count)
        .map(|b| {
            let persona_ids = match config.mode {
                Mode::Homogeneous => vec![corpus.personas[(b - 1) as usize].id; k],
                Mode::Heterogeneous => {
                    let mut pool: Vec<u32> = corpus
                        .personas
                        .iter()
                        .flat_map(|p| std::iter::repeat_n(p.id, config.max_repeats as usize))
                        .collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(rng::assignment_seed(config.master_seed, domain_id, b));
                    pool.shuffle(&mut rng);
                    pool.truncate(k);
                    pool
                }
                Mode::Custom => config.custom_assignment.as_ref().expect("validated")[(b - 1) as usize].clone(),
            };
            Assignment {
                branch_index: b,
                persona_ids,
            }
        })
        .collect();
    for a in &out {
        assert_eq!(a.persona_ids.len(), k);
        match config.mode {
            Mode::Homogeneous => assert_eq!(a.counts().len(), 1),
            Mode::Heterogeneous => assert!(a.counts().values().all(|&c| c <= config.max_repeats)),
            Mode::Custom => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: String,
    pub finished: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub run_id: String,
    pub domain_id: String,
    pub branch_index: u32,
    pub node_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona_id: Option<u32>,
    pub article_text: String,
    /// SHA-256 of the text this node rewrote; absent for node 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_digest: Option<String>,
    /// SHA-256 of `article_text`.
    pub text_digest: String,
    pub answer_vector: AnswerVector,
    pub mi: u32,
    /// Wall-clock times; recorded for live calls only so synthetic logs stay
    /// byte-reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Timestamps>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub backend_call_ids: Vec<String>,
}

impl NodeRecord {
    fn key(&self) -> (String, u32, u32) {
        (self.domain_id.clone(), self.branch_index, self.node_index)
    }
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchResult {
    pub domain_id: String,
    pub branch_index: u32,
    pub assignment: Assignment,
    pub node_records: Vec<NodeRecord>,
    pub mpr: Mpr,
}

impl BranchResult {
    pub fn mi_trajectory(&self) -> Vec<u32> {
        self.node_records.iter().map(|r| r.mi).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub domain_id: String,
    pub branch_index: u32,
    /// Node whose rewrite or audit failed.
    pub node_index: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSeed {
    pub domain_id: String,
    pub branch_index: u32,
    pub seed: u64,
}

/// Empirical audit of an unmodified source article.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceAudit {
    pub domain_id: String,
    pub bits: String,
    /// 1-based question numbers the auditor answered "no" for the source.
    pub zero_questions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Partial,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub tool_version: String,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub config: RunConfig,
    pub corpus_digest: String,
    pub m: usize,
    pub backend_identity: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub effective_profiles: BTreeMap<u32, PersonaProfile>,
    pub branch_seeds: Vec<BranchSeed>,
    pub assignments: BTreeMap<String, Vec<Assignment>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_audits: Vec<SourceAudit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aborted: Vec<AbortInfo>,
}

impl Manifest {
    /// Row label for branch `b`: the persona for homogeneous runs, otherwise
    /// the branch number.
    pub fn row_label(&self, branch_index: u32, corpus: &Corpus) -> String {
        match self.config.mode {
            Mode::Homogeneous => {
                let id = self
                    .assignments
                    .values()
                    .next()
                    .and_then(|a| a.get(branch_index as usize - 1))
                    .map(|a| a.persona_ids[0])
                    .unwrap_or(branch_index);
                match corpus.persona(id) {
                    Some(p) => format!("#{id} {}", p.name),
                    None => format!("#{id}"),
                }
            }
            Mode::Heterogeneous => format!("#b{branch_index}"),
            Mode::Custom => format!("#c{branch_index}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub manifest: Manifest,
    pub corpus: Corpus,
    /// Completed branches ordered by `(domain, branch)`.
    pub branches: Vec<BranchResult>,
    pub aborted: Vec<AbortInfo>,
}

impl RunResult {
    pub fn branch(&self, domain_id: &str, branch_index: u32) -> Option<&BranchResult> {
        self.branches
            .iter()
            .find(|b| b.domain_id == domain_id && b.branch_index == branch_index)
    }
}

/// Destination for node records. Implementations must persist the record
/// before returning.
pub trait RecordSink: Sync {
    fn append(&self, record: &NodeRecord) -> Result<(), SinkError>;
}

#[derive(Debug, Error)]
pub enum SinkError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("run halted")]
    Halted,
}

#[derive(Default)]
pub struct MemorySink(pub Mutex<Vec<NodeRecord>>);

impl RecordSink for MemorySink {
    fn append(&self, record: &NodeRecord) -> Result<(), SinkError> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).push(record.clone());
        Ok(())
    }
}

/// Serialized appender for `records.log`, with optional fault injection.
struct RecordLog {
    file: Mutex<File>,
    written: AtomicUsize,
    halt: AtomicBool,
    crash_after: Option<usize>,
    torn_write: bool,
}

impl RecordSink for RecordLog {
    fn append(&self, record: &NodeRecord) -> Result<(), SinkError> {
        let line = serde_json::to_string(record).map_err(std::io::Error::other)? + "\n";
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        if self.halt.load(Ordering::SeqCst) {
            return Err(SinkError::Halted);
        }
        if let Some(limit) = self.crash_after {
            if self.written.load(Ordering::SeqCst) >= limit {
                self.halt.store(true, Ordering::SeqCst);
                if self.torn_write {
                    f.write_all(&line.as_bytes()[..line.len() / 2])?;
                    f.flush()?;
                }
                return Err(SinkError::Halted);
            }
        }
        f.write_all(line.as_bytes())?;
        f.flush()?;
        self.written.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }
}

/// The rewrite and audit services for a run.
pub enum Backends {
    Synthetic {
        profiles: BTreeMap<u32, PersonaProfile>,
    },
    Live {
        rewriter: Box<ChatClient>,
        auditor: Box<ChatClient>,
    },
}

impl Backends {
    pub fn from_config(cfg: &BackendConfig, calls: Option<Arc<CallLog>>) -> Self {
        match cfg.kind {
            BackendKind::Synthetic => Backends::Synthetic {
                profiles: cfg.effective_profiles(),
            },
            BackendKind::Live => {
                let limiter = Arc::new(Limiter::new(cfg.max_in_flight));
                Backends::Live {
                    rewriter: Box::new(ChatClient::new(cfg.rewrite_settings(), limiter.clone(), calls.clone())),
                    auditor: Box::new(ChatClient::new(cfg.auditor_settings(), limiter, calls)),
                }
            }
        }
    }
}

pub fn backend_identity(cfg: &BackendConfig) -> String {
    match cfg.kind {
        BackendKind::Synthetic => format!("synthetic-keyed-splitmix64/v{}", env!("CARGO_PKG_VERSION")),
        BackendKind::Live => format!(
            "live {} rewrite={} (T={}) auditor={} (T=0)",
            cfg.endpoint, cfg.model_name, cfg.temperature, cfg.auditor_model
        ),
    }
}

/// Everything a branch needs besides its assignment.
pub struct BranchContext<'a> {
    pub run_id: &'a str,
    pub corpus: &'a Corpus,
    pub backends: &'a Backends,
    pub seed: u64,
    pub sink: &'a dyn RecordSink,
}

#[derive(Debug)]
pub enum BranchFailure {
    Aborted(AbortInfo),
    Halted,
}

pub fn source_record(run_id: &str, domain: &DomainSpec, branch_index: u32, reference: &AnswerVector) -> NodeRecord {
    NodeRecord {
        run_id: run_id.to_string(),
        domain_id: domain.id.clone(),
        branch_index,
        node_index: 0,
        persona_id: None,
        article_text: domain.body.clone(),
        input_digest: None,
        text_digest: text_digest(&domain.body),
        answer_vector: reference.clone(),
        mi: 0,
        timestamps: None,
        backend_call_ids: Vec::new(),
    }
}

enum StepError {
    Rewrite(RewriteError),
    Audit(AuditError),
    Metrics(MetricsError),
    Sink(SinkError),
}

impl std::fmt::Display for StepError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepError::Rewrite(e) => write!(f, "rewrite: {e}"),
            StepError::Audit(e) => write!(f, "audit: {e}"),
            StepError::Metrics(e) => write!(f, "metrics: {e}"),
            StepError::Sink(e) => write!(f, "record log: {e}"),
        }
    }
}

/// Runs (or continues) one branch. `prior` holds already-persisted records
/// for this branch, ordered by node index, possibly empty.
pub fn run_branch(
    domain: &DomainSpec,
    assignment: &Assignment,
    reference: &AnswerVector,
    ctx: &BranchContext<'_>,
    prior: Vec<NodeRecord>,
) -> Result<BranchResult, BranchFailure> {
    let b = assignment.branch_index;
    let depth = assignment.persona_ids.len() as u32;
    let abort = |k: u32, e: StepError| {
        if let StepError::Sink(SinkError::Halted) = e {
            return BranchFailure::Halted;
        }
        BranchFailure::Aborted(AbortInfo {
            domain_id: domain.id.clone(),
            branch_index: b,
            node_index: k,
            reason: e.to_string(),
        })
    };
    let mut records = prior;
    if records.is_empty() {
        let r0 = source_record(ctx.run_id, domain, b, reference);
        ctx.sink.append(&r0).map_err(|e| abort(0, StepError::Sink(e)))?;
        records.push(r0);
    }
    for k in records.len() as u32..=depth {
        let prev = records.last().expect("node 0 present");
        let persona_id = assignment.persona_ids[(k - 1) as usize];
        let persona = ctx.corpus.persona(persona_id).expect("assignment validated against corpus");
        let input = RewriteInput {
            persona,
            article_text: &prev.article_text,
            domain_id: &domain.id,
            branch_index: b,
            node_index: k,
        };
        let started = chrono::Utc::now();
        let (text, vector, call_ids) = match ctx.backends {
            Backends::Synthetic { profiles } => {
                let state = SyntheticState {
                    fact_bits: prev.answer_vector.bits().to_vec(),
                    rng_seed: ctx.seed,
                    profile: profiles[&persona_id],
                };
                let (text, _) = agents::rewrite_synthetic(&state, &input);
                let audit = auditor::audit_oracle(&text, domain, b, k).map_err(|e| abort(k, StepError::Audit(e)))?;
                (text, audit.vector, Vec::new())
            }
            Backends::Live { rewriter, auditor } => {
                let text = agents::rewrite_live(rewriter, &input).map_err(|e| abort(k, StepError::Rewrite(e)))?;
                let call = CallContext::new(&domain.id, b, k);
                let audit = auditor::audit_live(auditor, &text, domain, &call)
                    .map_err(|e| abort(k, StepError::Audit(e)))?;
                // prefixes of the call ids in calls.log, which append the attempt
                let ids = vec![format!("{}/rewrite", call.label()), format!("{}/audit", call.label())];
                (text, audit.vector, ids)
            }
        };
        let mi = metrics::misinformation_index(reference, &vector).map_err(|e| abort(k, StepError::Metrics(e)))?;
        let timestamps = matches!(ctx.backends, Backends::Live { .. }).then(|| Timestamps {
            started: started.to_rfc3339(),
            finished: chrono::Utc::now().to_rfc3339(),
        });
        let record = NodeRecord {
            run_id: ctx.run_id.to_string(),
            domain_id: domain.id.clone(),
            branch_index: b,
            node_index: k,
            persona_id: Some(persona_id),
            input_digest: Some(prev.text_digest.clone()),
            text_digest: text_digest(&text),
            article_text: text,
            answer_vector: vector,
            mi,
            timestamps,
            backend_call_ids: call_ids,
        };
        ctx.sink.append(&record).map_err(|e| abort(k, StepError::Sink(e)))?;
        records.push(record);
    }
    finish_branch(&domain.id, assignment.clone(), records).map_err(|e| abort(depth, StepError::Metrics(e)))
}

fn finish_branch(domain_id: &str, assignment: Assignment, records: Vec<NodeRecord>) -> Result<BranchResult, MetricsError> {
    let mis: Vec<u32> = records.iter().map(|r| r.mi).collect();
    let mpr = metrics::mpr(&mis)?;
    Ok(BranchResult {
        domain_id: domain_id.to_string(),
        branch_index: assignment.branch_index,
        assignment,
        node_records: records,
        mpr,
    })
}

/// Checks that each node rewrote exactly its predecessor's text.
pub fn verify_chain(records: &[NodeRecord]) -> Result<(), String> {
    for (k, r) in records.iter().enumerate() {
        if r.node_index as usize != k {
            return Err(format!("record {k} has node index {}", r.node_index));
        }
        if r.text_digest != text_digest(&r.article_text) {
            return Err(format!("node {k}: text digest mismatch"));
        }
        let expected = (k > 0).then(|| records[k - 1].text_digest.clone());
        if r.input_digest != expected {
            return Err(format!("node {k}: input is not node {}'s output", k.saturating_sub(1)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the rayon default.
    pub workers: Option<usize>,
    /// Fault injection: stop persisting after this many records, as if the
    /// process had been killed.
    pub crash_after_records: Option<usize>,
    /// With `crash_after_records`, leave half a record at the end of the log.
    pub torn_write_on_crash: bool,
}

fn run_id_for(config: &RunConfig, corpus_digest: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(corpus_digest.as_bytes());
    hex::encode(&h.finalize()[..8])
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), EngineError> {
    let path = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let body = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    fs::write(&tmp, body).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, EngineError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| EngineError::BadManifest {
        path,
        message: e.to_string(),
    })
}

/// Starts a new run in `out_dir`, which must not already hold a manifest.
pub fn run_experiment(
    config: &RunConfig,
    corpus: &Corpus,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunResult, EngineError> {
    config.validate(corpus)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    if out_dir.join(MANIFEST_FILE).exists() {
        return Err(EngineError::RunExists(out_dir.to_path_buf()));
    }
    corpus::write_corpus(corpus, &out_dir.join(CORPUS_DIR))?;
    let corpus_digest = corpus.digest();
    let mut assignments = BTreeMap::new();
    let mut branch_seeds = Vec::new();
    for d in &config.domain_ids {
        assignments.insert(d.clone(), build_assignments(config, corpus, d)?);
        for b in 1..=config.branch_count {
            branch_seeds.push(BranchSeed {
                domain_id: d.clone(),
                branch_index: b,
                seed: rng::branch_seed(config.master_seed, d, b),
            });
        }
    }
    let manifest = Manifest {
        run_id: run_id_for(config, &corpus_digest),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        created_at: chrono::Utc::now().to_rfc3339(),
        finished_at: None,
        status: RunStatus::Running,
        config: config.clone(),
        corpus_digest,
        m: corpus.m,
        backend_identity: backend_identity(&config.backend),
        effective_profiles: match config.backend.kind {
            BackendKind::Synthetic => config.backend.effective_profiles(),
            BackendKind::Live => BTreeMap::new(),
        },
        branch_seeds,
        assignments,
        source_audits: Vec::new(),
        aborted: Vec::new(),
    };
    write_manifest(out_dir, &manifest)?;
    let records_path = out_dir.join(RECORDS_FILE);
    File::create(&records_path).map_err(io_err(&records_path))?;
    execute(out_dir, manifest, corpus.clone(), Vec::new(), opts)
}

/// Continues an interrupted or partially aborted run. Completed
/// `(domain, branch, node)` records are kept; everything else is redone.
pub fn resume_experiment(run_dir: &Path, opts: &RunOptions) -> Result<RunResult, EngineError> {
    let mut manifest = read_manifest(run_dir)?;
    let corpus = corpus::load_corpus(&run_dir.join(CORPUS_DIR))?;
    if corpus.digest() != manifest.corpus_digest {
        return Err(EngineError::BadManifest {
            path: run_dir.join(MANIFEST_FILE),
            message: "corpus snapshot does not match the recorded digest".into(),
        });
    }
    let records = read_records(&run_dir.join(RECORDS_FILE), true)?;
    manifest.aborted.clear();
    manifest.status = RunStatus::Running;
    manifest.finished_at = None;
    write_manifest(run_dir, &manifest)?;
    execute(run_dir, manifest, corpus, records, opts)
}

/// Reads `records.log`. With `repair`, a torn final line (no newline or
/// unparseable) is cut off the file.
pub fn read_records(path: &Path, repair: bool) -> Result<Vec<NodeRecord>, EngineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut good_len = 0usize;
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let end = bytes[offset..].iter().position(|&c| c == b'\n').map(|p| offset + p);
        let Some(end) = end else {
            // unterminated tail
            if repair {
                break;
            }
            return Err(EngineError::CorruptLog {
                path: path.to_path_buf(),
                line: line_no,
                message: "unterminated record".into(),
            });
        };
        let parsed = std::str::from_utf8(&bytes[offset..end])
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<NodeRecord>(s).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => records.push(r),
            Err(message) => {
                let is_last = end + 1 >= bytes.len();
                if repair && is_last {
                    break;
                }
                return Err(EngineError::CorruptLog {
                    path: path.to_path_buf(),
                    line: line_no,
                    message,
                });
            }
        }
        offset = end + 1;
        good_len = offset;
    }
    if repair && good_len < bytes.len() {
        log::warn!("{}: dropping {} bytes of torn record", path.display(), bytes.len() - good_len);
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(good_len as u64).map_err(io_err(path))?;
    }
    Ok(records)
}

/// Groups records by branch, keeping the contiguous prefix `0..n` of each.
fn group_records(records: Vec<NodeRecord>) -> BTreeMap<(String, u32), Vec<NodeRecord>> {
    let mut by_key: BTreeMap<(String, u32, u32), NodeRecord> = BTreeMap::new();
    for r in records {
        by_key.entry(r.key()).or_insert(r);
    }
    let mut out: BTreeMap<(String, u32), Vec<NodeRecord>> = BTreeMap::new();
    for ((d, b, k), r) in by_key {
        let chain = out.entry((d, b)).or_default();
        if chain.len() as u32 == k {
            chain.push(r);
        }
    }
    out
}

fn execute(
    dir: &Path,
    mut manifest: Manifest,
    corpus: Corpus,
    existing: Vec<NodeRecord>,
    opts: &RunOptions,
) -> Result<RunResult, EngineError> {
    let config = manifest.config.clone();
    let records_path = dir.join(RECORDS_FILE);
    let file = OpenOptions::new()
        .append(true)
        .open(&records_path)
        .map_err(io_err(&records_path))?;
    let log = RecordLog {
        file: Mutex::new(file),
        written: AtomicUsize::new(0),
        halt: AtomicBool::new(false),
        crash_after: opts.crash_after_records,
        torn_write: opts.torn_write_on_crash,
    };
    let calls = match config.backend.kind {
        BackendKind::Live => {
            let p = dir.join(CALLS_FILE);
            Some(Arc::new(CallLog::open(&p).map_err(io_err(&p))?))
        }
        BackendKind::Synthetic => None,
    };
    let backends = Backends::from_config(&config.backend, calls);

    if let Backends::Live { auditor, .. } = &backends {
        let done: BTreeSet<String> = manifest.source_audits.iter().map(|a| a.domain_id.clone()).collect();
        for d in config.domain_ids.iter().filter(|d| !done.contains(*d)) {
            let domain = corpus.domain(d).expect("validated");
            let audit = source_audit(auditor, domain)?;
            manifest.source_audits.push(audit);
        }
        write_manifest(dir, &manifest)?;
    }

    let mut prior = group_records(existing);
    let mut jobs = Vec::new();
    for d in &config.domain_ids {
        for a in &manifest.assignments[d] {
            let have = prior.remove(&(d.clone(), a.branch_index)).unwrap_or_default();
            jobs.push((d.clone(), a.clone(), have));
        }
    }

    let seeds: BTreeMap<(String, u32), u64> = manifest
        .branch_seeds
        .iter()
        .map(|s| ((s.domain_id.clone(), s.branch_index), s.seed))
        .collect();
    let references: BTreeMap<String, AnswerVector> = config
        .domain_ids
        .iter()
        .map(|d| (d.clone(), auditor::reference_vector(d.clone(), corpus.m).expect("m >= 1")))
        .collect();
    let run_one = |(d, a, have): (String, Assignment, Vec<NodeRecord>)| {
        let domain = corpus.domain(&d).expect("validated");
        let ctx = BranchContext {
            run_id: &manifest.run_id,
            corpus: &corpus,
            backends: &backends,
            seed: seeds[&(d.clone(), a.branch_index)],
            sink: &log,
        };
        run_branch(domain, &a, &references[&d], &ctx, have)
    };
    let outcomes: Vec<Result<BranchResult, BranchFailure>> = match opts.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| EngineError::Config(e.to_string()))?
            .install(|| jobs.into_par_iter().map(run_one).collect()),
        None => jobs.into_par_iter().map(run_one).collect(),
    };

    let mut branches = Vec::new();
    let mut aborted = Vec::new();
    let mut halted = false;
    for o in outcomes {
        match o {
            Ok(b) => branches.push(b),
            Err(BranchFailure::Aborted(info)) => {
                log::error!(
                    "branch {}/b{} aborted at node {}: {}",
                    info.domain_id,
                    info.branch_index,
                    info.node_index,
                    info.reason
                );
                aborted.push(info);
            }
            Err(BranchFailure::Halted) => halted = true,
        }
    }
    drop(log);
    if halted {
        return Err(EngineError::Interrupted(opts.crash_after_records.unwrap_or(0)));
    }

    canonicalize_log(&records_path)?;
    branches.sort_by(|a, b| (&a.domain_id, a.branch_index).cmp(&(&b.domain_id, b.branch_index)));
    aborted.sort_by(|a, b| (&a.domain_id, a.branch_index).cmp(&(&b.domain_id, b.branch_index)));
    manifest.status = if aborted.is_empty() {
        RunStatus::Complete
    } else {
        RunStatus::Partial
    };
    manifest.aborted = aborted.clone();
    manifest.finished_at = Some(chrono::Utc::now().to_rfc3339());
    write_manifest(dir, &manifest)?;
    Ok(RunResult {
        manifest,
        corpus,
        branches,
        aborted,
    })
}

fn source_audit(auditor: &ChatClient, domain: &DomainSpec) -> Result<SourceAudit, EngineError> {
    let ctx = CallContext::new(&domain.id, 0, 0);
    let rec = auditor::audit_live(auditor, &domain.body, domain, &ctx).map_err(|source| EngineError::SourceAudit {
        domain_id: domain.id.clone(),
        source,
    })?;
    let zero_questions: Vec<usize> = rec.vector.zero_positions().iter().map(|j| j + 1).collect();
    if !zero_questions.is_empty() {
        log::warn!(
            "source article {} fails its own audit on question(s) {:?}; MI is still measured against all-ones",
            domain.id,
            zero_questions
        );
    }
    Ok(SourceAudit {
        domain_id: domain.id.clone(),
        bits: rec.vector.to_bit_string(),
        zero_questions,
    })
}

/// Rewrites `records.log` sorted by `(domain, branch, node)` with duplicates
/// removed.
fn canonicalize_log(path: &Path) -> Result<(), EngineError> {
    let mut records = read_records(path, false)?;
    records.sort_by_key(|r| r.key());
    records.dedup_by(|a, b| a.key() == b.key());
    let tmp = path.with_extension("log.tmp");
    {
        let mut out = std::io::BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        for r in &records {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(out, "{line}").map_err(io_err(&tmp))?;
        }
        out.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Rebuilds a [`RunResult`] from a run directory alone.
pub fn load_run(dir: &Path) -> Result<RunResult, EngineError> {
    let manifest = read_manifest(dir)?;
    let corpus = corpus::load_corpus(&dir.join(CORPUS_DIR))?;
    let records_path = dir.join(RECORDS_FILE);
    let file = File::open(&records_path).map_err(io_err(&records_path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&records_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: NodeRecord = serde_json::from_str(&line).map_err(|e| EngineError::CorruptLog {
            path: records_path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    let mut grouped = group_records(records);
    let depth = manifest.config.depth as usize;
    let recorded: BTreeMap<(String, u32), AbortInfo> = manifest
        .aborted
        .iter()
        .map(|a| ((a.domain_id.clone(), a.branch_index), a.clone()))
        .collect();
    let mut branches = Vec::new();
    let mut aborted = Vec::new();
    for d in &manifest.config.domain_ids {
        for a in &manifest.assignments[d] {
            let key = (d.clone(), a.branch_index);
            let chain = grouped.remove(&key).unwrap_or_default();
            if chain.len() == depth + 1 {
                let b = finish_branch(d, a.clone(), chain).map_err(|e| EngineError::CorruptLog {
                    path: records_path.clone(),
                    line: 0,
                    message: e.to_string(),
                })?;
                branches.push(b);
            } else {
                aborted.push(recorded.get(&key).cloned().unwrap_or(AbortInfo {
                    domain_id: d.clone(),
                    branch_index: a.branch_index,
                    node_index: chain.len() as u32,
                    reason: "incomplete".into(),
                }));
            }
        }
    }
    branches.sort_by(|a, b| (&a.domain_id, a.branch_index).cmp(&(&b.domain_id, b.branch_index)));
    aborted.sort_by(|a, b| (&a.domain_id, a.branch_index).cmp(&(&b.domain_id, b.branch_index)));
    Ok(RunResult {
        manifest,
        corpus,
        branches,
        aborted,
    })
}
