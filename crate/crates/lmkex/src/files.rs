//! On-disk formats: store, usage model, templates, scripts, needs and
//! binding sets.
//!
//! Store and usage files are line-delimited JSON with a header line.
//! Script, need and binding files are plain JSON documents.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, SecondsFormat, Utc};
use lmkex_core::backend::{ScriptEntry, ScriptError, ScriptReply, ScriptedBackend};
use lmkex_core::model::{
    Assertion, AssertionId, AssertionStatus, KnowledgeNeed, ModelClass, PromptId, Provenance,
    ProvenanceStrategy, PscmFunction, RelationKind, SchemaKind, Timestamp, Variable,
};
use lmkex_core::prompt::{PromptTemplate, SamplingParams, TemplateSet};
use lmkex_core::store::{KnowledgeStore, PromptRecord, RawResponse};
use lmkex_core::term::{ObjectValue, Term};
use lmkex_core::usage::{LatencyClass, LmProfile, ParameterBounds, Tally, UsageKey, UsageRecords};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const STORE_FORMAT: &str = "lmkex-store";
pub const USAGE_FORMAT: &str = "lmkex-usage";
pub const FORMAT_VERSION: u32 = 1;

/// A problem in a file's content. `line` is 1-based; 0 means the file as
/// a whole.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct FormatError {
    pub line: usize,
    pub message: String,
}

impl FormatError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        FormatError {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
}

impl FileError {
    fn io(path: &Path, source: io::Error) -> Self {
        FileError::Io {
            path: path.into(),
            source,
        }
    }

    fn format(path: &Path, source: FormatError) -> Self {
        FileError::Format {
            path: path.into(),
            source,
        }
    }
}

fn read(path: &Path) -> Result<String, FileError> {
    fs::read_to_string(path).map_err(|e| FileError::io(path, e))
}

fn parse_with<T>(path: &Path, parse: impl FnOnce(&str) -> Result<T, FormatError>) -> Result<T, FileError> {
    let text = read(path)?;
    parse(&text).map_err(|e| FileError::format(path, e))
}

/// Replace `path` with `contents` via a temporary file in the same
/// directory, so readers never see a half-written file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), FileError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| FileError::io(path, e))?;
    tmp.write_all(contents.as_bytes())
        .map_err(|e| FileError::io(path, e))?;
    tmp.persist(path).map_err(|e| FileError::io(path, e.error))?;
    Ok(())
}

pub fn format_time(t: &Timestamp) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse_time(s: &str) -> Result<Timestamp, String> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))
}

pub fn parse_date(s: &str) -> Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| format!("bad date {s:?}: {e}"))
}

fn parse_enum<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

fn term(s: &str) -> Result<Term, String> {
    Term::new(s).map_err(|e| e.to_string())
}

/// Non-blank lines with their 1-based numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

fn header_line(format: &str) -> String {
    serde_json::to_string(&Header {
        format: format.into(),
        version: FORMAT_VERSION,
    })
    .expect("header serializes")
}

fn check_header<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    format: &str,
) -> Result<bool, FormatError> {
    let Some((n, line)) = lines.next() else {
        return Ok(false);
    };
    let h: Header = serde_json::from_str(line)
        .map_err(|e| FormatError::new(n, format!("expected {format} header: {e}")))?;
    if h.format != format {
        return Err(FormatError::new(n, format!("expected format {format:?}, found {:?}", h.format)));
    }
    if h.version != FORMAT_VERSION {
        return Err(FormatError::new(n, format!("unsupported version {}", h.version)));
    }
    Ok(true)
}

// ---- store ----

/// One assertion line of the store file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssertionRecord {
    pub id: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub object_kind: String,
    pub lm_id: String,
    pub prompt_id: String,
    pub strategy: String,
    pub sample_count: u32,
    pub status: String,
    pub confidence: f64,
    pub created_at: String,
    pub updated_at: String,
}

impl AssertionRecord {
    /// Step-of objects carry their position as an `"N. "` prefix.
    pub fn from_assertion(a: &Assertion) -> Self {
        let object = match (a.relation, a.step_index) {
            (RelationKind::StepOf, Some(i)) => format!("{i}. {}", a.object.surface()),
            _ => a.object.surface().into(),
        };
        AssertionRecord {
            id: a.id.as_str().into(),
            subject: a.subject.surface().into(),
            relation: a.relation.as_str().into(),
            object,
            object_kind: a.object.kind_str().into(),
            lm_id: a.provenance.lm_id.clone(),
            prompt_id: a.provenance.prompt_id.as_str().into(),
            strategy: a.provenance.strategy.as_str().into(),
            sample_count: a.provenance.sample_count,
            status: a.status.as_str().into(),
            confidence: a.confidence,
            created_at: format_time(&a.created_at),
            updated_at: format_time(&a.updated_at),
        }
    }

    pub fn to_assertion(&self) -> Result<Assertion, String> {
        let relation: RelationKind = parse_enum(&self.relation)?;
        let (step_index, object) = match relation {
            RelationKind::StepOf => split_step(&self.object),
            _ => (None, self.object.as_str()),
        };
        let object = match self.object_kind.as_str() {
            "term" => ObjectValue::Term(term(object)?),
            "phrase" => ObjectValue::phrase(object),
            other => return Err(format!("unknown object_kind {other:?}")),
        };
        let strategy = match self.strategy.as_str() {
            "human-amended" => ProvenanceStrategy::HumanAmended,
            s => ProvenanceStrategy::Lm(parse_enum(s)?),
        };
        let created_at = parse_time(&self.created_at)?;
        Ok(Assertion {
            id: AssertionId::new(&self.id),
            subject: term(&self.subject)?,
            relation,
            object,
            step_index,
            provenance: Provenance {
                lm_id: self.lm_id.clone(),
                prompt_id: PromptId::new(&self.prompt_id),
                strategy,
                sample_count: self.sample_count,
                extracted_at: created_at,
            },
            status: parse_enum::<AssertionStatus>(&self.status)?,
            confidence: self.confidence,
            created_at,
            updated_at: parse_time(&self.updated_at)?,
        })
    }
}

fn split_step(object: &str) -> (Option<u32>, &str) {
    if let Some((n, rest)) = object.split_once(". ") {
        if let Ok(i) = n.parse::<u32>() {
            return (Some(i), rest);
        }
    }
    (None, object)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsRecord {
    pub max_tokens: u32,
    pub temperature: f64,
    pub n_samples: u32,
    pub top_k: u32,
}

impl From<SamplingParams> for ParamsRecord {
    fn from(p: SamplingParams) -> Self {
        ParamsRecord {
            max_tokens: p.max_tokens,
            temperature: p.temperature,
            n_samples: p.n_samples,
            top_k: p.top_k,
        }
    }
}

impl From<&ParamsRecord> for SamplingParams {
    fn from(p: &ParamsRecord) -> Self {
        SamplingParams {
            max_tokens: p.max_tokens,
            temperature: p.temperature,
            n_samples: p.n_samples,
            top_k: p.top_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ResponseRecord {
    Completions(Vec<String>),
    Candidates(Vec<(String, f64)>),
    Failed(String),
}

/// One prompt line of the store file, marked `"kind": "prompt"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptLine {
    pub kind: String,
    pub id: String,
    pub lm_id: String,
    pub strategy: String,
    pub pscm_function: Option<String>,
    pub target_class: String,
    pub schema: String,
    pub text: String,
    pub params: ParamsRecord,
    pub response: ResponseRecord,
    #[serde(default)]
    pub trace: Vec<String>,
    pub created_at: String,
}

impl PromptLine {
    pub fn from_record(p: &PromptRecord) -> Self {
        PromptLine {
            kind: "prompt".into(),
            id: p.id.as_str().into(),
            lm_id: p.lm_id.clone(),
            strategy: p.strategy.as_str().into(),
            pscm_function: p.pscm_function.map(|f| f.as_str().into()),
            target_class: p.target_class.as_str().into(),
            schema: p.schema.as_str().into(),
            text: p.text.clone(),
            params: p.params.into(),
            response: match &p.response {
                RawResponse::Completions(c) => ResponseRecord::Completions(c.clone()),
                RawResponse::Candidates(c) => ResponseRecord::Candidates(c.clone()),
                RawResponse::Failed(m) => ResponseRecord::Failed(m.clone()),
            },
            trace: p.trace.clone(),
            created_at: format_time(&p.created_at),
        }
    }

    pub fn to_record(&self) -> Result<PromptRecord, String> {
        Ok(PromptRecord {
            id: PromptId::new(&self.id),
            lm_id: self.lm_id.clone(),
            strategy: parse_enum(&self.strategy)?,
            pscm_function: self
                .pscm_function
                .as_deref()
                .map(parse_enum::<PscmFunction>)
                .transpose()?,
            target_class: parse_enum(&self.target_class)?,
            schema: parse_enum(&self.schema)?,
            text: self.text.clone(),
            params: (&self.params).into(),
            response: match &self.response {
                ResponseRecord::Completions(c) => RawResponse::Completions(c.clone()),
                ResponseRecord::Candidates(c) => RawResponse::Candidates(c.clone()),
                ResponseRecord::Failed(m) => RawResponse::Failed(m.clone()),
            },
            trace: self.trace.clone(),
            created_at: parse_time(&self.created_at)?,
        })
    }
}

/// Header, then prompt records, then assertions.
pub fn write_store(store: &KnowledgeStore) -> String {
    let mut out = header_line(STORE_FORMAT);
    out.push('\n');
    for p in store.prompts() {
        out.push_str(&serde_json::to_string(&PromptLine::from_record(p)).expect("prompt serializes"));
        out.push('\n');
    }
    for a in store.assertions() {
        out.push_str(&serde_json::to_string(&AssertionRecord::from_assertion(a)).expect("assertion serializes"));
        out.push('\n');
    }
    out
}

/// Read store records into `store`. Prompts must precede the assertions
/// that cite them.
pub fn read_store_into(text: &str, store: &mut KnowledgeStore) -> Result<(), FormatError> {
    let mut lines = numbered_lines(text);
    if !check_header(&mut lines, STORE_FORMAT)? {
        return Ok(());
    }
    for (n, line) in lines {
        let err = |m: String| FormatError::new(n, m);
        let value: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if value.get("kind").and_then(Value::as_str) == Some("prompt") {
            let p: PromptLine = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
            let record = p.to_record().map_err(err)?;
            match store.prompt(&record.id) {
                Some(existing) if *existing == record => {}
                _ => store.log_prompt(record).map_err(|e| err(e.to_string()))?,
            }
        } else {
            let a: AssertionRecord = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
            let assertion = a.to_assertion().map_err(err)?;
            match store.get(&assertion.id) {
                Some(existing) if *existing == assertion => {}
                _ => {
                    let outcome = store.add_assertion(assertion).map_err(|e| err(e.to_string()))?;
                    if outcome.is_duplicate() {
                        return Err(err(format!("duplicates assertion {}", outcome.id())));
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn parse_store(text: &str, verification_threshold: f64) -> Result<KnowledgeStore, FormatError> {
    let mut store = KnowledgeStore::new(verification_threshold);
    read_store_into(text, &mut store)?;
    Ok(store)
}

/// A missing file is an empty store.
pub fn load_store(path: &Path, verification_threshold: f64) -> Result<KnowledgeStore, FileError> {
    if !path.exists() {
        return Ok(KnowledgeStore::new(verification_threshold));
    }
    parse_with(path, |t| parse_store(t, verification_threshold))
}

pub fn save_store(path: &Path, store: &KnowledgeStore) -> Result<(), FileError> {
    write_atomic(path, &write_store(store))
}

// ---- usage model ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsRecord {
    pub max_tokens: (u32, u32),
    pub temperature: (f64, f64),
    pub top_k: (u32, u32),
}

fn default_latency() -> String {
    "remote".into()
}

/// An LM profile as written in config and usage files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub lm_id: String,
    pub model_class: String,
    pub training_cutoff: String,
    #[serde(default)]
    pub corpus_description: String,
    #[serde(default)]
    pub endpoint_ref: String,
    #[serde(default = "default_latency")]
    pub latency_class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_bounds: Option<BoundsRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extensions: BTreeMap<String, String>,
}

impl ProfileRecord {
    pub fn from_profile(p: &LmProfile) -> Self {
        let b = &p.parameter_bounds;
        ProfileRecord {
            lm_id: p.lm_id.clone(),
            model_class: p.model_class.as_str().into(),
            training_cutoff: p.training_cutoff.format("%Y-%m-%d").to_string(),
            corpus_description: p.corpus_description.clone(),
            endpoint_ref: p.endpoint_ref.clone(),
            latency_class: p.latency_class.as_str().into(),
            parameter_bounds: (*b != ParameterBounds::default()).then_some(BoundsRecord {
                max_tokens: b.max_tokens,
                temperature: b.temperature,
                top_k: b.top_k,
            }),
            extensions: p.extensions.clone(),
        }
    }

    pub fn to_profile(&self) -> Result<LmProfile, String> {
        if self.lm_id.trim().is_empty() {
            return Err("profile has an empty lm_id".into());
        }
        let mut p = LmProfile::new(
            self.lm_id.clone(),
            parse_enum::<ModelClass>(&self.model_class)?,
            parse_date(&self.training_cutoff)?,
        );
        p.corpus_description = self.corpus_description.clone();
        p.endpoint_ref = self.endpoint_ref.clone();
        p.latency_class = parse_enum::<LatencyClass>(&self.latency_class)?;
        if let Some(b) = &self.parameter_bounds {
            p.parameter_bounds = ParameterBounds {
                max_tokens: b.max_tokens,
                temperature: b.temperature,
                top_k: b.top_k,
            };
        }
        p.extensions = self.extensions.clone();
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsageLine {
    pub lm_id: String,
    pub strategy: String,
    pub pscm_function: String,
    pub successes: u64,
    pub attempts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum UsageFileLine {
    Profile(ProfileRecord),
    Usage(UsageLine),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UsageModel {
    pub profiles: Vec<LmProfile>,
    pub records: UsageRecords,
}

pub fn write_usage(model: &UsageModel) -> String {
    let mut out = header_line(USAGE_FORMAT);
    out.push('\n');
    let lines = model
        .profiles
        .iter()
        .map(|p| UsageFileLine::Profile(ProfileRecord::from_profile(p)))
        .chain(model.records.records().map(|r| {
            UsageFileLine::Usage(UsageLine {
                lm_id: r.key.lm_id.clone(),
                strategy: r.key.strategy.as_str().into(),
                pscm_function: r.key.pscm_function.as_str().into(),
                successes: r.tally.successes(),
                attempts: r.tally.attempts(),
            })
        }));
    for l in lines {
        out.push_str(&serde_json::to_string(&l).expect("usage line serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_usage(text: &str) -> Result<UsageModel, FormatError> {
    let mut model = UsageModel::default();
    let mut lines = numbered_lines(text);
    if !check_header(&mut lines, USAGE_FORMAT)? {
        return Ok(model);
    }
    for (n, line) in lines {
        let err = |m: String| FormatError::new(n, m);
        match serde_json::from_str::<UsageFileLine>(line).map_err(|e| err(e.to_string()))? {
            UsageFileLine::Profile(p) => model.profiles.push(p.to_profile().map_err(err)?),
            UsageFileLine::Usage(u) => {
                let key = UsageKey::new(
                    &u.lm_id,
                    parse_enum(&u.strategy).map_err(err)?,
                    parse_enum(&u.pscm_function).map_err(err)?,
                );
                let tally = Tally::new(u.successes, u.attempts)
                    .ok_or_else(|| err(format!("{} successes exceed {} attempts", u.successes, u.attempts)))?;
                model.records.insert(key, tally);
            }
        }
    }
    Ok(model)
}

pub fn load_usage(path: &Path) -> Result<UsageModel, FileError> {
    if !path.exists() {
        return Ok(UsageModel::default());
    }
    parse_with(path, parse_usage)
}

pub fn save_usage(path: &Path, model: &UsageModel) -> Result<(), FileError> {
    write_atomic(path, &write_usage(model))
}

// ---- templates ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateRecord {
    pub id: String,
    pub pscm_function: String,
    pub pattern: String,
    pub target_class: String,
    pub schema: String,
    /// Overrides the relation inferred from function and wording.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

impl TemplateRecord {
    pub fn from_template(t: &PromptTemplate) -> Self {
        TemplateRecord {
            id: t.id().into(),
            pscm_function: t.pscm_function().as_str().into(),
            pattern: t.pattern().into(),
            target_class: t.target_class().as_str().into(),
            schema: t.schema().as_str().into(),
            relation: Some(t.relation().as_str().into()),
        }
    }

    pub fn to_template(&self) -> Result<PromptTemplate, String> {
        let t = PromptTemplate::new(
            &self.id,
            parse_enum::<PscmFunction>(&self.pscm_function)?,
            &self.pattern,
            parse_enum::<ModelClass>(&self.target_class)?,
            parse_enum::<SchemaKind>(&self.schema)?,
        )
        .map_err(|e| e.to_string())?;
        Ok(match &self.relation {
            Some(r) => t.with_relation(parse_enum(r)?),
            None => t,
        })
    }
}

/// Templates in file order.
pub fn parse_templates(text: &str) -> Result<Vec<PromptTemplate>, FormatError> {
    numbered_lines(text)
        .map(|(n, line)| {
            let r: TemplateRecord = serde_json::from_str(line).map_err(|e| FormatError::new(n, e.to_string()))?;
            r.to_template().map_err(|e| FormatError::new(n, e))
        })
        .collect()
}

pub fn write_templates<'a>(templates: impl IntoIterator<Item = &'a PromptTemplate>) -> String {
    let mut out = String::new();
    for t in templates {
        out.push_str(&serde_json::to_string(&TemplateRecord::from_template(t)).expect("template serializes"));
        out.push('\n');
    }
    out
}

pub fn load_templates(path: &Path) -> Result<Vec<PromptTemplate>, FileError> {
    parse_with(path, parse_templates)
}

/// Built-ins extended by the templates in `path`.
pub fn load_template_set(path: Option<&Path>) -> Result<TemplateSet, FileError> {
    let mut set = TemplateSet::builtin();
    if let Some(path) = path {
        for t in load_templates(path)? {
            set.register(t)
                .map_err(|e| FileError::format(path, FormatError::new(0, e.to_string())))?;
        }
    }
    Ok(set)
}

// ---- scripts ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptRecord {
    prompt: String,
    responses: Option<Vec<String>>,
    candidates: Option<Vec<(String, f64)>>,
}

/// Byte offset of every element of a top-level JSON array.
fn element_offsets(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut expect_element = false;
    for (i, c) in text.char_indices() {
        if in_string {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
            continue;
        }
        if expect_element && !c.is_whitespace() && c != ']' {
            out.push(i);
            expect_element = false;
        }
        match c {
            '"' => in_string = true,
            '[' | '{' => {
                depth += 1;
                if depth == 1 && c == '[' {
                    expect_element = true;
                }
            }
            ']' | '}' => depth = depth.saturating_sub(1),
            ',' if depth == 1 => expect_element = true,
            _ => {}
        }
    }
    out
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parse a script file into entries.
pub fn parse_script(text: &str) -> Result<Vec<ScriptEntry>, FormatError> {
    let records: Vec<ScriptRecord> =
        serde_json::from_str(text).map_err(|e| FormatError::new(e.line(), e.to_string()))?;
    let offsets = element_offsets(text);
    let line = |i: usize| offsets.get(i).map(|&o| line_of(text, o)).unwrap_or(0);
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let reply = match (r.responses, r.candidates) {
                (Some(rs), None) => ScriptReply::Responses(rs),
                (None, Some(cs)) => ScriptReply::Candidates(cs),
                _ => {
                    return Err(FormatError::new(
                        line(i),
                        "entry needs exactly one of \"responses\" or \"candidates\"",
                    ))
                }
            };
            Ok(ScriptEntry {
                prompt: r.prompt,
                reply,
            })
        })
        .collect()
}

/// Parse and validate a script for `lm_id`.
pub fn parse_scripted_backend(lm_id: &str, text: &str) -> Result<ScriptedBackend, FormatError> {
    let entries = parse_script(text)?;
    let offsets = element_offsets(text);
    ScriptedBackend::new(lm_id, entries).map_err(|e| {
        let line = offsets.get(e.index()).map(|&o| line_of(text, o)).unwrap_or(0);
        let message = match &e {
            ScriptError::DuplicatePrompt { prompt, .. } => format!("duplicate prompt {prompt:?}"),
            other => other.to_string(),
        };
        FormatError::new(line, message)
    })
}

pub fn load_script(lm_id: &str, path: &Path) -> Result<ScriptedBackend, FileError> {
    parse_with(path, |t| parse_scripted_backend(lm_id, t))
}

// ---- needs and bindings ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedRecord {
    pub task_name: String,
    #[serde(default)]
    pub domain_label: String,
    pub pscm_function: String,
    #[serde(default)]
    pub bindings: BTreeMap<String, String>,
    #[serde(default)]
    pub prior_dialogue: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_as_of: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_verified: Option<u32>,
}

pub fn parse_bindings(raw: &BTreeMap<String, String>) -> Result<BTreeMap<Variable, Term>, String> {
    raw.iter()
        .map(|(k, v)| {
            let var = Variable::parse_placeholder(k).map_err(|e| e.to_string())?;
            Ok((var, term(v).map_err(|e| format!("binding {k}: {e}"))?))
        })
        .collect()
}

impl NeedRecord {
    pub fn from_need(n: &KnowledgeNeed) -> Self {
        NeedRecord {
            task_name: n.task_name.clone(),
            domain_label: n.domain_label.clone(),
            pscm_function: n.pscm_function.as_str().into(),
            bindings: n
                .bindings
                .iter()
                .map(|(k, v)| (k.as_str().into(), v.surface().into()))
                .collect(),
            prior_dialogue: n.prior_dialogue.clone(),
            required_as_of: n.required_as_of.map(|d| d.format("%Y-%m-%d").to_string()),
            min_verified: Some(n.min_verified),
        }
    }

    pub fn to_need(&self) -> Result<KnowledgeNeed, String> {
        if self.task_name.trim().is_empty() {
            return Err("task_name is empty".into());
        }
        let mut need = KnowledgeNeed::new(self.task_name.clone(), parse_enum(&self.pscm_function)?)
            .with_domain(self.domain_label.clone())
            .with_prior_dialogue(self.prior_dialogue.clone());
        need.bindings = parse_bindings(&self.bindings)?;
        if let Some(d) = &self.required_as_of {
            need = need.with_required_as_of(parse_date(d)?);
        }
        if let Some(m) = self.min_verified {
            need.min_verified = m;
        }
        Ok(need)
    }
}

pub fn parse_need(text: &str) -> Result<KnowledgeNeed, FormatError> {
    let r: NeedRecord = serde_json::from_str(text).map_err(|e| FormatError::new(e.line(), e.to_string()))?;
    r.to_need().map_err(|e| FormatError::new(0, e))
}

pub fn load_need(path: &Path) -> Result<KnowledgeNeed, FileError> {
    parse_with(path, parse_need)
}

/// A JSON array of `{variable: term}` objects.
pub fn parse_binding_sets(text: &str) -> Result<Vec<BTreeMap<Variable, Term>>, FormatError> {
    let raw: Vec<BTreeMap<String, String>> =
        serde_json::from_str(text).map_err(|e| FormatError::new(e.line(), e.to_string()))?;
    let offsets = element_offsets(text);
    raw.iter()
        .enumerate()
        .map(|(i, b)| {
            parse_bindings(b).map_err(|e| {
                FormatError::new(offsets.get(i).map(|&o| line_of(text, o)).unwrap_or(0), e)
            })
        })
        .collect()
}

pub fn load_binding_sets(path: &Path) -> Result<Vec<BTreeMap<Variable, Term>>, FileError> {
    parse_with(path, parse_binding_sets)
}
