//! Uniform access to masked and generative LMs, a scripted backend for
//! offline runs, and the retry policy shared by live backends.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::ModelClass;
use crate::prompt::{PromptSpec, MASK};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("no scripted response for prompt {0:?}")]
    NotFound(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl BackendError {
    /// Only transport failures and timeouts are worth another try.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::Timeout(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeResponse {
    pub samples: Vec<String>,
    pub lm_id: String,
    pub elapsed_ms: u64,
}

/// Ranked fill-in candidates, scores non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedResponse {
    pub candidates: Vec<(String, f64)>,
    pub lm_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LmResponse {
    Generative(GenerativeResponse),
    Masked(MaskedResponse),
}

impl LmResponse {
    pub fn class(&self) -> ModelClass {
        match self {
            LmResponse::Generative(_) => ModelClass::Generative,
            LmResponse::Masked(_) => ModelClass::Masked,
        }
    }
}

/// An LM service. Implementations must tolerate concurrent requests.
pub trait LanguageModel: Send + Sync {
    fn lm_id(&self) -> &str;

    fn complete(&self, spec: &PromptSpec) -> Result<GenerativeResponse, BackendError>;

    fn fill_mask(&self, spec: &PromptSpec) -> Result<MaskedResponse, BackendError>;

    /// Dispatch on the prompt's target class.
    fn request(&self, spec: &PromptSpec) -> Result<LmResponse, BackendError> {
        match spec.target_class {
            ModelClass::Generative => self.complete(spec).map(LmResponse::Generative),
            ModelClass::Masked => self.fill_mask(spec).map(LmResponse::Masked),
        }
    }
}

pub fn check_generative(spec: &PromptSpec) -> Result<(), BackendError> {
    if spec.target_class != ModelClass::Generative {
        return Err(BackendError::Usage("complete() needs a generative prompt".into()));
    }
    Ok(())
}

pub fn check_masked(spec: &PromptSpec) -> Result<(), BackendError> {
    if spec.target_class != ModelClass::Masked {
        return Err(BackendError::Usage("fill_mask() needs a masked prompt".into()));
    }
    match spec.text.matches(MASK).count() {
        1 => Ok(()),
        n => Err(BackendError::Usage(alloc::format!(
            "masked prompt must contain exactly one {MASK}, found {n}"
        ))),
    }
}

/// Drop an echoed prompt from the front of a completion.
pub fn strip_echo(prompt: &str, completion: &str) -> String {
    completion
        .strip_prefix(prompt)
        .unwrap_or(completion)
        .trim()
        .into()
}

pub fn normalize_prompt(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Backends keyed by LM id.
#[derive(Default)]
pub struct Backends {
    by_id: BTreeMap<String, Box<dyn LanguageModel>>,
}

impl Backends {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, backend: Box<dyn LanguageModel>) {
        self.by_id.insert(backend.lm_id().into(), backend);
    }

    pub fn with(mut self, backend: impl LanguageModel + 'static) -> Self {
        self.insert(Box::new(backend));
        self
    }

    pub fn get(&self, lm_id: &str) -> Option<&dyn LanguageModel> {
        self.by_id.get(lm_id).map(|b| b.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptReply {
    Responses(Vec<String>),
    Candidates(Vec<(String, f64)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEntry {
    pub prompt: String,
    pub reply: ScriptReply,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error("entry {index}: prompt {prompt:?} appears more than once")]
    DuplicatePrompt { index: usize, prompt: String },
    #[error("entry {index}: no responses or candidates")]
    Empty { index: usize },
    #[error("entry {index}: candidate scores must be non-increasing")]
    UnsortedScores { index: usize },
}

impl ScriptError {
    pub fn index(&self) -> usize {
        match self {
            ScriptError::DuplicatePrompt { index, .. }
            | ScriptError::Empty { index }
            | ScriptError::UnsortedScores { index } => *index,
        }
    }
}

/// Answers exact-match prompts (after whitespace normalization) with
/// recorded responses. Immutable after construction, so a pure function of
/// (script, request).
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedBackend {
    lm_id: String,
    entries: BTreeMap<String, ScriptReply>,
}

impl ScriptedBackend {
    pub fn new(lm_id: impl Into<String>, entries: Vec<ScriptEntry>) -> Result<Self, ScriptError> {
        let mut map = BTreeMap::new();
        for (index, e) in entries.into_iter().enumerate() {
            match &e.reply {
                ScriptReply::Responses(r) if r.is_empty() => {
                    return Err(ScriptError::Empty { index })
                }
                ScriptReply::Candidates(c) => {
                    if c.is_empty() {
                        return Err(ScriptError::Empty { index });
                    }
                    if c.windows(2).any(|w| w[1].1 > w[0].1) {
                        return Err(ScriptError::UnsortedScores { index });
                    }
                }
                ScriptReply::Responses(_) => {}
            }
            let key = normalize_prompt(&e.prompt);
            if map.contains_key(&key) {
                return Err(ScriptError::DuplicatePrompt {
                    index,
                    prompt: e.prompt,
                });
            }
            map.insert(key, e.reply);
        }
        Ok(ScriptedBackend {
            lm_id: lm_id.into(),
            entries: map,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&self, text: &str) -> Result<&ScriptReply, BackendError> {
        self.entries
            .get(&normalize_prompt(text))
            .ok_or_else(|| BackendError::NotFound(text.into()))
    }
}

impl LanguageModel for ScriptedBackend {
    fn lm_id(&self) -> &str {
        &self.lm_id
    }

    fn complete(&self, spec: &PromptSpec) -> Result<GenerativeResponse, BackendError> {
        check_generative(spec)?;
        let ScriptReply::Responses(responses) = self.lookup(&spec.text)? else {
            return Err(BackendError::Usage(
                "scripted entry holds mask candidates, not completions".into(),
            ));
        };
        let n = spec.params.n_samples.max(1) as usize;
        let samples = (0..n)
            .map(|i| strip_echo(&spec.text, &responses[i % responses.len()]))
            .collect();
        Ok(GenerativeResponse {
            samples,
            lm_id: self.lm_id.clone(),
            elapsed_ms: 0,
        })
    }

    fn fill_mask(&self, spec: &PromptSpec) -> Result<MaskedResponse, BackendError> {
        check_masked(spec)?;
        let ScriptReply::Candidates(candidates) = self.lookup(&spec.text)? else {
            return Err(BackendError::Usage(
                "scripted entry holds completions, not mask candidates".into(),
            ));
        };
        Ok(MaskedResponse {
            candidates: candidates
                .iter()
                .take(spec.params.top_k as usize)
                .cloned()
                .collect(),
            lm_id: self.lm_id.clone(),
        })
    }
}

/// Bounded retry with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 500,
            multiplier: 2,
        }
    }
}

impl RetryPolicy {
    /// Run `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent. `sleep` receives each backoff in ms. Returns
    /// the final result and the number of attempts made.
    pub fn run<T>(
        &self,
        mut sleep: impl FnMut(u64),
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> (Result<T, BackendError>, u32) {
        let max = self.max_attempts.max(1);
        let mut backoff = self.initial_backoff_ms;
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < max => {
                    sleep(backoff);
                    backoff = backoff.saturating_mul(self.multiplier);
                    attempt += 1;
                }
                other => return (other, attempt),
            }
        }
    }
}
