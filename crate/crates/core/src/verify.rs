//! Deciding which interpreted assertions become knowledge.
//!
//! Evidence comes from agreement across repeated samples of the same
//! prompt, consistency with what is already verified, the LM's temporal
//! currency, and optionally a human.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::interpret::{Interpretation, QualityFlag};
use crate::model::{
    Assertion, AssertionId, AssertionStatus, KnowledgeNeed, ProvenanceStrategy, RelationKind,
    Timestamp, TripleKey,
};
use crate::store::{KnowledgeStore, StoreError};
use crate::term::{ObjectValue, Term};
use crate::usage::{check_temporal_currency, Currency, LmProfile};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationPolicy {
    pub n_samples: u32,
    pub agreement_threshold: f64,
    pub require_human: bool,
    pub auto_promote_min_samples: u32,
}

impl Default for VerificationPolicy {
    fn default() -> Self {
        VerificationPolicy {
            n_samples: 3,
            agreement_threshold: 0.6,
            require_human: false,
            auto_promote_min_samples: 3,
        }
    }
}

impl VerificationPolicy {
    /// Verification without a human needs enough samples to mean anything.
    pub fn can_auto_promote(&self) -> bool {
        self.n_samples >= self.auto_promote_min_samples
    }

    pub fn with_samples(mut self, n: u32) -> Self {
        self.n_samples = n;
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VerifyError {
    #[error("policy expects {expected} sample(s), got {got}")]
    SampleCountMismatch { expected: u32, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Verified,
    Potential,
    Rejected,
}

impl Decision {
    pub fn status(self) -> AssertionStatus {
        match self {
            Decision::Verified => AssertionStatus::Verified,
            Decision::Potential => AssertionStatus::Potential,
            Decision::Rejected => AssertionStatus::Rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    pub assertion_id: AssertionId,
    /// The candidate with status and confidence set from the decision.
    pub assertion: Assertion,
    pub agreement: f64,
    pub conflicts: Vec<AssertionId>,
    pub currency: Currency,
    pub decision: Decision,
    pub rationale: String,
}

/// Agreement across samples and the index of a sample in the modal class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub score: f64,
    pub modal_sample: usize,
}

fn group_key(group: &[Assertion]) -> BTreeSet<TripleKey> {
    group.iter().map(Assertion::key).collect()
}

/// Size of the largest class of samples whose normalized assertion sets are
/// equal, over the number of samples. Ties go to the class seen first.
pub fn agreement<G: AsRef<[Assertion]>>(groups: &[G]) -> Agreement {
    let mut classes: Vec<(BTreeSet<TripleKey>, usize, usize)> = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        let key = group_key(g.as_ref());
        match classes.iter_mut().find(|(k, _, _)| *k == key) {
            Some((_, count, _)) => *count += 1,
            None => classes.push((key, 1, i)),
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for (_, count, first) in &classes {
        if best.is_none_or(|(c, _)| *count > c) {
            best = Some((*count, *first));
        }
    }
    match best {
        Some((count, first)) => Agreement {
            score: count as f64 / groups.len() as f64,
            modal_sample: first,
        },
        None => Agreement {
            score: 0.0,
            modal_sample: 0,
        },
    }
}

pub fn agreement_score<G: AsRef<[Assertion]>>(groups: &[G]) -> f64 {
    agreement(groups).score
}

/// Negation parity and the remaining words of a clause.
fn polarity(text: &str) -> (bool, Vec<String>) {
    let mut negated = false;
    let mut words = Vec::new();
    for raw in text.to_lowercase().split_whitespace() {
        let w = raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'');
        let (base, neg) = match w {
            "not" | "no" | "never" => ("", true),
            "cannot" | "can't" => ("can", true),
            "won't" => ("will", true),
            _ => match w.strip_suffix("n't") {
                Some(b) => (b, true),
                None => (w, false),
            },
        };
        negated ^= neg;
        if !base.is_empty() {
            words.push(base.into());
        }
    }
    (negated, words)
}

fn contradicts(a: &Assertion, b: &Assertion) -> bool {
    if a.subject.text() != b.subject.text() || a.relation != b.relation {
        return false;
    }
    match a.relation {
        RelationKind::StepOf => {
            a.step_index == b.step_index && a.object.normalized() != b.object.normalized()
        }
        RelationKind::Causes => {
            let (na, wa) = polarity(a.object.as_str());
            let (nb, wb) = polarity(b.object.as_str());
            na != nb && wa == wb
        }
        _ => false,
    }
}

/// Verified assertions in `store` that `a` contradicts.
pub fn consistency_check(a: &Assertion, store: &KnowledgeStore) -> Vec<AssertionId> {
    store
        .assertions()
        .filter(|b| b.status == AssertionStatus::Verified && b.id != a.id)
        .filter(|b| contradicts(a, b))
        .map(|b| b.id.clone())
        .collect()
}

/// Confidence for an assertion that passed verification.
///
/// Placeholder model: agreement times the usage-model capability, rescaled
/// onto `[floor, 1]` so a verified assertion never sits below the store's
/// verification threshold. Monotone in both factors.
pub fn verified_confidence(agreement: f64, capability: f64, floor: f64) -> f64 {
    let floor = floor.clamp(0.0, 1.0);
    floor + (1.0 - floor) * agreement.clamp(0.0, 1.0) * capability.clamp(0.0, 1.0)
}

fn low_quality(flags: &[QualityFlag]) -> Option<String> {
    flags.iter().find_map(|f| match f {
        QualityFlag::Unterminated => Some("step sequence has no terminator".into()),
        QualityFlag::NonImperative(i) => Some(format!("steps {i:?} are not imperative")),
        QualityFlag::Uninterpretable(_) => None,
    })
}

/// Judge the modal sample's assertions.
///
/// Verified iff agreement reaches the threshold, nothing conflicts, the LM
/// is not stale, the parse was clean, the policy allows auto-promotion and
/// no human sign-off is required. Conflicts reject; anything else stays
/// potential.
pub fn verify(
    samples: &[Interpretation],
    policy: &VerificationPolicy,
    store: &KnowledgeStore,
    profile: &LmProfile,
    need: &KnowledgeNeed,
    capability: f64,
) -> Result<Vec<VerificationResult>, VerifyError> {
    if samples.len() != policy.n_samples as usize {
        return Err(VerifyError::SampleCountMismatch {
            expected: policy.n_samples,
            got: samples.len(),
        });
    }
    let groups: Vec<&[Assertion]> = samples.iter().map(|s| s.assertions.as_slice()).collect();
    let Agreement {
        score,
        modal_sample,
    } = agreement(&groups);
    let currency = check_temporal_currency(profile, need);
    let Some(modal) = samples.get(modal_sample) else {
        return Ok(Vec::new());
    };
    let quality = low_quality(&modal.flags);

    let mut out = Vec::with_capacity(modal.assertions.len());
    for a in &modal.assertions {
        let conflicts = consistency_check(a, store);
        let (decision, rationale) = if !conflicts.is_empty() {
            (
                Decision::Rejected,
                format!("contradicts verified knowledge {conflicts:?}"),
            )
        } else if score < policy.agreement_threshold {
            (
                Decision::Potential,
                format!(
                    "low agreement {score:.3} below threshold {:.3}",
                    policy.agreement_threshold
                ),
            )
        } else if currency == Currency::Stale {
            (
                Decision::Potential,
                format!("LM {} predates the facts required", profile.lm_id),
            )
        } else if let Some(q) = &quality {
            (Decision::Potential, format!("low-quality interpretation: {q}"))
        } else if policy.require_human {
            (Decision::Potential, "awaiting human review".into())
        } else if !policy.can_auto_promote() {
            (
                Decision::Potential,
                format!(
                    "{} sample(s) is below the {} needed to auto-promote",
                    policy.n_samples, policy.auto_promote_min_samples
                ),
            )
        } else {
            (
                Decision::Verified,
                format!("agreement {score:.3} across {} samples", policy.n_samples),
            )
        };
        let mut assertion = a.clone();
        assertion.status = decision.status();
        assertion.confidence = match decision {
            Decision::Verified => {
                verified_confidence(score, capability, store.verification_threshold())
            }
            _ => (a.confidence * score).clamp(0.0, 1.0),
        };
        out.push(VerificationResult {
            assertion_id: a.id.clone(),
            assertion,
            agreement: score,
            conflicts,
            currency,
            decision,
            rationale,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReviewDecision {
    Accept,
    Reject,
    Amend(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewOutcome {
    pub assertion_id: AssertionId,
    pub decision: ReviewDecision,
}

/// Line-oriented conversation with a human reviewer.
pub trait ReviewChannel {
    /// Show `line` and return the reply, or `None` once the channel closed.
    fn ask(&mut self, line: &str) -> Option<String>;
}

/// Accepts `y`, `n` or `a <new object>`.
pub fn parse_review_answer(answer: &str) -> Option<ReviewDecision> {
    let answer = answer.trim();
    match answer {
        "y" | "Y" => Some(ReviewDecision::Accept),
        "n" | "N" => Some(ReviewDecision::Reject),
        _ => {
            let rest = answer.strip_prefix("a ").or_else(|| answer.strip_prefix("A "))?;
            let rest = rest.trim();
            (!rest.is_empty()).then(|| ReviewDecision::Amend(rest.into()))
        }
    }
}

pub fn review_line(a: &Assertion) -> String {
    format!("{} | {} | {}", a.subject, a.relation, a.object)
}

const MAX_REASKS: usize = 3;

/// Ask about each pending assertion in turn. Stops at the first closed
/// channel; unanswered assertions simply get no outcome.
pub fn human_review(pending: &[Assertion], channel: &mut dyn ReviewChannel) -> Vec<ReviewOutcome> {
    let mut out = Vec::new();
    'items: for a in pending {
        let line = review_line(a);
        for _ in 0..MAX_REASKS {
            let Some(answer) = channel.ask(&line) else {
                break 'items;
            };
            if let Some(decision) = parse_review_answer(&answer) {
                out.push(ReviewOutcome {
                    assertion_id: a.id.clone(),
                    decision,
                });
                continue 'items;
            }
        }
    }
    out
}

/// Apply review outcomes to the store. Accepted assertions are verified at
/// no less than the store threshold; amendments add a human-amended
/// assertion and reject the original. Returns ids of amended assertions.
pub fn apply_review(
    store: &mut KnowledgeStore,
    outcomes: &[ReviewOutcome],
    now: Timestamp,
) -> Result<Vec<AssertionId>, StoreError> {
    let floor = store.verification_threshold();
    let mut created = Vec::new();
    for o in outcomes {
        let original = store
            .get(&o.assertion_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(o.assertion_id.clone()))?;
        match &o.decision {
            ReviewDecision::Accept => {
                store.set_status(
                    &original.id,
                    AssertionStatus::Verified,
                    original.confidence.max(floor),
                    now,
                )?;
            }
            ReviewDecision::Reject => {
                store.set_status(&original.id, AssertionStatus::Rejected, original.confidence, now)?;
            }
            ReviewDecision::Amend(text) => {
                let object = match &original.object {
                    ObjectValue::Term(_) => Term::new(text)
                        .map(ObjectValue::Term)
                        .unwrap_or_else(|_| ObjectValue::phrase(text)),
                    ObjectValue::Phrase(_) => ObjectValue::phrase(text),
                };
                let mut id = AssertionId::new(format!("{}.h", original.id));
                let mut n = 1;
                while store.get(&id).is_some() {
                    n += 1;
                    id = AssertionId::new(format!("{}.h{n}", original.id));
                }
                let mut amended = original.clone();
                amended.id = id;
                amended.object = object;
                amended.provenance.strategy = ProvenanceStrategy::HumanAmended;
                amended.provenance.extracted_at = now;
                amended.status = AssertionStatus::Verified;
                amended.confidence = original.confidence.max(floor);
                amended.created_at = now;
                amended.updated_at = now;
                let added = store.add_assertion(amended)?;
                if added.is_duplicate() {
                    let existing = added.id().clone();
                    if store.get(&existing).is_some_and(|a| a.status == AssertionStatus::Potential) {
                        store.set_status(&existing, AssertionStatus::Verified, floor.max(original.confidence), now)?;
                    }
                } else {
                    created.push(added.id().clone());
                }
                store.set_status(&original.id, AssertionStatus::Rejected, original.confidence, now)?;
            }
        }
    }
    Ok(created)
}
