//! The agent-side knowledge store: assertions plus the prompt log that
//! backs their provenance.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{
    Assertion, AssertionId, AssertionStatus, ModelClass, PromptId, PscmFunction, RelationKind,
    SchemaKind, StrategyKind, Timestamp, TripleKey,
};
use crate::prompt::SamplingParams;
use crate::term::canonicalize;

pub const DEFAULT_VERIFICATION_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StoreError {
    #[error("assertion {assertion} references unknown prompt {prompt}")]
    DanglingProvenance { assertion: AssertionId, prompt: PromptId },
    #[error("no assertion with id {0}")]
    NotFound(AssertionId),
    #[error("no prompt record with id {0}")]
    PromptNotFound(PromptId),
    #[error("illegal status transition {from} -> {to} for {id}")]
    IllegalTransition {
        id: AssertionId,
        from: AssertionStatus,
        to: AssertionStatus,
    },
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("verified assertion {id} has confidence {confidence} below threshold {threshold}")]
    BelowThreshold {
        id: AssertionId,
        confidence: f64,
        threshold: f64,
    },
    #[error("prompt id {0} already logged")]
    DuplicatePrompt(PromptId),
    #[error("assertion id {0} already used by a different assertion")]
    IdConflict(AssertionId),
}

/// Raw LM output as received, before interpretation.
#[derive(Debug, Clone, PartialEq)]
pub enum RawResponse {
    Completions(Vec<String>),
    Candidates(Vec<(String, f64)>),
    Failed(String),
}

/// Everything needed to audit one prompt: what was sent, to whom, and what
/// came back.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub id: PromptId,
    pub lm_id: String,
    pub strategy: StrategyKind,
    pub pscm_function: Option<PscmFunction>,
    pub target_class: ModelClass,
    pub schema: SchemaKind,
    pub text: String,
    pub params: SamplingParams,
    pub response: RawResponse,
    /// Interpretation notes appended after parsing.
    pub trace: Vec<String>,
    pub created_at: Timestamp,
}

/// Outcome of [`KnowledgeStore::add_assertion`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AddOutcome {
    Added(AssertionId),
    /// Same subject/relation/object/prompt already present; nothing changed.
    Duplicate(AssertionId),
}

impl AddOutcome {
    pub fn is_duplicate(&self) -> bool {
        matches!(self, AddOutcome::Duplicate(_))
    }

    pub fn id(&self) -> &AssertionId {
        match self {
            AddOutcome::Added(id) | AddOutcome::Duplicate(id) => id,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssertionFilter {
    pub subject: Option<String>,
    pub relation: Option<RelationKind>,
    pub status: Option<AssertionStatus>,
    pub min_confidence: Option<f64>,
}

impl AssertionFilter {
    pub fn subject(mut self, s: &str) -> Self {
        self.subject = Some(s.into());
        self
    }

    pub fn relation(mut self, r: RelationKind) -> Self {
        self.relation = Some(r);
        self
    }

    pub fn status(mut self, s: AssertionStatus) -> Self {
        self.status = Some(s);
        self
    }

    pub fn min_confidence(mut self, c: f64) -> Self {
        self.min_confidence = Some(c);
        self
    }

    pub fn matches(&self, a: &Assertion) -> bool {
        if let Some(s) = &self.subject {
            if a.subject.text() != canonicalize(s) {
                return false;
            }
        }
        self.relation.is_none_or(|r| a.relation == r)
            && self.status.is_none_or(|s| a.status == s)
            && self.min_confidence.is_none_or(|c| a.confidence >= c)
    }
}

/// Legal status edges: potential -> verified, potential -> rejected,
/// verified -> rejected. Rejected is terminal.
pub fn transition_allowed(from: AssertionStatus, to: AssertionStatus) -> bool {
    use AssertionStatus::*;
    matches!(
        (from, to),
        (Potential, Verified) | (Potential, Rejected) | (Verified, Rejected)
    )
}

/// Single-writer store. Reads borrow immutably and may be shared.
#[derive(Debug, Clone)]
pub struct KnowledgeStore {
    assertions: BTreeMap<AssertionId, Assertion>,
    keys: BTreeMap<(TripleKey, PromptId), AssertionId>,
    prompts: BTreeMap<PromptId, PromptRecord>,
    next_prompt: u64,
    threshold: f64,
}

impl Default for KnowledgeStore {
    fn default() -> Self {
        Self::new(DEFAULT_VERIFICATION_THRESHOLD)
    }
}

impl PartialEq for KnowledgeStore {
    fn eq(&self, other: &Self) -> bool {
        self.assertions == other.assertions && self.prompts == other.prompts
    }
}

impl KnowledgeStore {
    pub fn new(verification_threshold: f64) -> Self {
        KnowledgeStore {
            assertions: BTreeMap::new(),
            keys: BTreeMap::new(),
            prompts: BTreeMap::new(),
            next_prompt: 1,
            threshold: verification_threshold,
        }
    }

    pub fn verification_threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.assertions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assertions.is_empty()
    }

    /// Reserve the next prompt id. Ids are sequential so runs are replayable.
    pub fn next_prompt_id(&mut self) -> PromptId {
        loop {
            let id = PromptId::new(format!("p{:06}", self.next_prompt));
            self.next_prompt += 1;
            if !self.prompts.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn log_prompt(&mut self, record: PromptRecord) -> Result<(), StoreError> {
        if self.prompts.contains_key(&record.id) {
            return Err(StoreError::DuplicatePrompt(record.id));
        }
        if let Some(n) = record
            .id
            .as_str()
            .strip_prefix('p')
            .and_then(|n| n.parse::<u64>().ok())
        {
            self.next_prompt = self.next_prompt.max(n + 1);
        }
        self.prompts.insert(record.id.clone(), record);
        Ok(())
    }

    pub fn append_trace(&mut self, id: &PromptId, line: String) -> Result<(), StoreError> {
        self.prompts
            .get_mut(id)
            .map(|p| p.trace.push(line))
            .ok_or_else(|| StoreError::PromptNotFound(id.clone()))
    }

    pub fn prompt(&self, id: &PromptId) -> Option<&PromptRecord> {
        self.prompts.get(id)
    }

    pub fn prompts(&self) -> impl Iterator<Item = &PromptRecord> {
        self.prompts.values()
    }

    pub fn get(&self, id: &AssertionId) -> Option<&Assertion> {
        self.assertions.get(id)
    }

    /// All assertions in id order.
    pub fn assertions(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.values()
    }

    pub fn add_assertion(&mut self, a: Assertion) -> Result<AddOutcome, StoreError> {
        if !self.prompts.contains_key(&a.provenance.prompt_id) {
            return Err(StoreError::DanglingProvenance {
                assertion: a.id.clone(),
                prompt: a.provenance.prompt_id.clone(),
            });
        }
        check_confidence(a.confidence)?;
        if a.status == AssertionStatus::Verified && a.confidence < self.threshold {
            return Err(StoreError::BelowThreshold {
                id: a.id.clone(),
                confidence: a.confidence,
                threshold: self.threshold,
            });
        }
        let key = (a.key(), a.provenance.prompt_id.clone());
        if let Some(existing) = self.keys.get(&key) {
            return Ok(AddOutcome::Duplicate(existing.clone()));
        }
        if self.assertions.contains_key(&a.id) {
            return Err(StoreError::IdConflict(a.id.clone()));
        }
        let id = a.id.clone();
        self.keys.insert(key, id.clone());
        self.assertions.insert(id.clone(), a);
        Ok(AddOutcome::Added(id))
    }

    /// Matching assertions ordered by creation time, then id.
    pub fn query(&self, filter: &AssertionFilter) -> Vec<&Assertion> {
        let mut out: Vec<&Assertion> = self
            .assertions
            .values()
            .filter(|a| filter.matches(a))
            .collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        out
    }

    pub fn set_status(
        &mut self,
        id: &AssertionId,
        status: AssertionStatus,
        confidence: f64,
        now: Timestamp,
    ) -> Result<(), StoreError> {
        check_confidence(confidence)?;
        let threshold = self.threshold;
        let a = self
            .assertions
            .get_mut(id)
            .ok_or_else(|| StoreError::NotFound(id.clone()))?;
        if !transition_allowed(a.status, status) {
            return Err(StoreError::IllegalTransition {
                id: id.clone(),
                from: a.status,
                to: status,
            });
        }
        if status == AssertionStatus::Verified && confidence < threshold {
            return Err(StoreError::BelowThreshold {
                id: id.clone(),
                confidence,
                threshold,
            });
        }
        a.status = status;
        a.confidence = confidence;
        a.updated_at = now;
        Ok(())
    }

    /// Change confidence without changing status. Refuses to push a verified
    /// assertion below the threshold and refuses to touch rejected ones.
    pub fn set_confidence(
        &mut self,
        id: &AssertionId,
        confidence: f64,
        now: Timestamp,
    ) -> Result<(), StoreError> {
        check_confidence(confidence)?;
        let threshold = self.threshold;
        let a = self
            .assertions
            .get_mut(id)
            .ok_or_else(|| StoreError::NotFound(id.clone()))?;
        match a.status {
            AssertionStatus::Rejected => {
                return Err(StoreError::IllegalTransition {
                    id: id.clone(),
                    from: a.status,
                    to: a.status,
                })
            }
            AssertionStatus::Verified if confidence < threshold => {
                return Err(StoreError::BelowThreshold {
                    id: id.clone(),
                    confidence,
                    threshold,
                })
            }
            _ => {}
        }
        a.confidence = confidence;
        a.updated_at = now;
        Ok(())
    }

    /// Full scan for provenance resolution. Returns the offending ids.
    pub fn dangling_provenance(&self) -> Vec<AssertionId> {
        self.assertions
            .values()
            .filter(|a| !self.prompts.contains_key(&a.provenance.prompt_id))
            .map(|a| a.id.clone())
            .collect()
    }

    pub fn pending(&self) -> Vec<&Assertion> {
        self.query(&AssertionFilter::default().status(AssertionStatus::Potential))
    }
}

fn check_confidence(c: f64) -> Result<(), StoreError> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(StoreError::ConfidenceOutOfRange(c))
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::model::{Provenance, ProvenanceStrategy};
    use crate::term::{ObjectValue, Term};
    use chrono::TimeZone;

    pub fn ts(secs: i64) -> Timestamp {
        chrono::Utc.timestamp_opt(1_650_000_000 + secs, 0).unwrap()
    }

    pub fn prompt_record(id: &str) -> PromptRecord {
        PromptRecord {
            id: PromptId::new(id),
            lm_id: "roberta".into(),
            strategy: StrategyKind::Template,
            pscm_function: Some(PscmFunction::StateLexicon),
            target_class: ModelClass::Masked,
            schema: SchemaKind::MaskLexicon,
            text: "A shelf is also known as a <mask>.".into(),
            params: SamplingParams::masked_default(),
            response: RawResponse::Candidates(alloc::vec![("rack".into(), 0.4)]),
            trace: Vec::new(),
            created_at: ts(0),
        }
    }

    pub fn assertion(id: &str, prompt: &str, subject: &str, relation: RelationKind, object: &str) -> Assertion {
        Assertion {
            id: AssertionId::new(id),
            subject: Term::new(subject).unwrap(),
            relation,
            object: ObjectValue::Term(Term::new(object).unwrap()),
            step_index: None,
            provenance: Provenance {
                lm_id: "roberta".into(),
                prompt_id: PromptId::new(prompt),
                strategy: ProvenanceStrategy::Lm(StrategyKind::Template),
                sample_count: 1,
                extracted_at: ts(0),
            },
            status: AssertionStatus::Potential,
            confidence: 0.5,
            created_at: ts(0),
            updated_at: ts(0),
        }
    }
}
