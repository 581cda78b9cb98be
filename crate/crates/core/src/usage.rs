//! The usage model: what the agent knows about each LM and how well each
//! (LM, strategy, function) combination has worked so far.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use chrono::NaiveDate;

use crate::model::{KnowledgeNeed, ModelClass, PscmFunction, StrategyKind, Variable};
use crate::model::ParseEnumError;
use crate::prompt::TemplateSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LatencyClass {
    Local,
    Remote,
}

impl LatencyClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LatencyClass::Local => "local",
            LatencyClass::Remote => "remote",
        }
    }
}

impl core::str::FromStr for LatencyClass {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(LatencyClass::Local),
            "remote" => Ok(LatencyClass::Remote),
            _ => Err(ParseEnumError {
                kind: "latency class",
                value: s.into(),
            }),
        }
    }
}

/// Inclusive ranges the LM accepts for each sampling parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterBounds {
    pub max_tokens: (u32, u32),
    pub temperature: (f64, f64),
    pub top_k: (u32, u32),
}

impl Default for ParameterBounds {
    fn default() -> Self {
        ParameterBounds {
            max_tokens: (1, 4096),
            temperature: (0.0, 2.0),
            top_k: (1, 100),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmProfile {
    pub lm_id: String,
    pub model_class: ModelClass,
    pub training_cutoff: NaiveDate,
    pub corpus_description: String,
    pub endpoint_ref: String,
    pub latency_class: LatencyClass,
    pub parameter_bounds: ParameterBounds,
    /// Open-ended metadata for characteristics not modelled explicitly.
    pub extensions: BTreeMap<String, String>,
}

impl LmProfile {
    pub fn new(lm_id: impl Into<String>, model_class: ModelClass, training_cutoff: NaiveDate) -> Self {
        LmProfile {
            lm_id: lm_id.into(),
            model_class,
            training_cutoff,
            corpus_description: String::new(),
            endpoint_ref: String::new(),
            latency_class: LatencyClass::Remote,
            parameter_bounds: ParameterBounds::default(),
            extensions: BTreeMap::new(),
        }
    }

    pub fn local(mut self) -> Self {
        self.latency_class = LatencyClass::Local;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UsageKey {
    pub lm_id: String,
    pub strategy: StrategyKind,
    pub pscm_function: PscmFunction,
}

impl UsageKey {
    pub fn new(lm_id: &str, strategy: StrategyKind, pscm_function: PscmFunction) -> Self {
        UsageKey {
            lm_id: lm_id.into(),
            strategy,
            pscm_function,
        }
    }
}

/// Track record for one key. `successes <= attempts` always.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    successes: u64,
    attempts: u64,
}

impl Tally {
    pub fn new(successes: u64, attempts: u64) -> Option<Self> {
        (successes <= attempts).then_some(Tally {
            successes,
            attempts,
        })
    }

    pub fn successes(self) -> u64 {
        self.successes
    }

    pub fn attempts(self) -> u64 {
        self.attempts
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageRecord {
    pub key: UsageKey,
    pub tally: Tally,
}

/// One observed outcome; the only input that changes a record set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeEvent {
    pub key: UsageKey,
    pub success: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UsageRecords {
    tallies: BTreeMap<UsageKey, Tally>,
}

impl UsageRecords {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuild a record set from an outcome log.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a OutcomeEvent>) -> Self {
        let mut records = Self::new();
        for e in events {
            records.record_outcome(&e.key, e.success);
        }
        records
    }

    /// Load a persisted tally verbatim.
    pub fn insert(&mut self, key: UsageKey, tally: Tally) {
        self.tallies.insert(key, tally);
    }

    pub fn record_outcome(&mut self, key: &UsageKey, success: bool) -> Tally {
        let t = self.tallies.entry(key.clone()).or_default();
        t.attempts += 1;
        if success {
            t.successes += 1;
        }
        *t
    }

    pub fn tally(&self, key: &UsageKey) -> Tally {
        self.tallies.get(key).copied().unwrap_or_default()
    }

    pub fn records(&self) -> impl Iterator<Item = UsageRecord> + '_ {
        self.tallies.iter().map(|(k, t)| UsageRecord {
            key: k.clone(),
            tally: *t,
        })
    }

    pub fn len(&self) -> usize {
        self.tallies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tallies.is_empty()
    }

    /// True if no LM has any attempts for `function`.
    pub fn untried(&self, function: PscmFunction) -> bool {
        self.tallies
            .iter()
            .all(|(k, t)| k.pscm_function != function || t.attempts == 0)
    }

    pub fn estimate_capability(&self, key: &UsageKey) -> f64 {
        estimate_capability(self.tally(key))
    }
}

/// Laplace-smoothed success rate `(s + 1) / (a + 2)`; 0.5 with no history.
pub fn estimate_capability(tally: Tally) -> f64 {
    (tally.successes as f64 + 1.0) / (tally.attempts as f64 + 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Currency {
    Current,
    Stale,
    Unknown,
}

impl Currency {
    pub fn as_str(self) -> &'static str {
        match self {
            Currency::Current => "current",
            Currency::Stale => "stale",
            Currency::Unknown => "unknown",
        }
    }
}

pub fn check_temporal_currency(profile: &LmProfile, need: &KnowledgeNeed) -> Currency {
    match need.required_as_of {
        None => Currency::Unknown,
        Some(d) if d > profile.training_cutoff => Currency::Stale,
        Some(_) => Currency::Current,
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectError {
    #[error("no LM profiles registered")]
    NoProfiles,
    #[error("no registered LM can serve {0} with any strategy")]
    NoCompatible(PscmFunction),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub lm_id: String,
    pub strategy: StrategyKind,
    pub capability: f64,
    pub latency: LatencyClass,
}

/// Whether `strategy` can serve `need` on an LM of class `class`.
pub fn strategy_compatible(
    class: ModelClass,
    strategy: StrategyKind,
    need: &KnowledgeNeed,
    templates: &TemplateSet,
) -> bool {
    let has_template = |class: ModelClass| {
        templates
            .for_function(need.pscm_function)
            .any(|t| t.target_class() == class && t.bindable(&need.bindings))
    };
    match strategy {
        StrategyKind::Template => has_template(class),
        StrategyKind::TemplateWithContext => {
            !need.domain_label.trim().is_empty() && has_template(class)
        }
        StrategyKind::Analogical => {
            class == ModelClass::Generative && has_template(ModelClass::Generative)
        }
        StrategyKind::DialogueShaped => {
            class == ModelClass::Generative
                && !need.prior_dialogue.is_empty()
                && need.bindings.contains_key(&Variable::Task)
                && matches!(
                    need.pscm_function,
                    PscmFunction::ProblemSpaceDescription | PscmFunction::GoalDefinition
                )
        }
    }
}

/// Rank every compatible (LM, strategy) pair for `need`.
///
/// Order: capability descending, then local before remote, then lm id, then
/// strategy declaration order. The result is a total order over distinct
/// pairs.
pub fn select<'a>(
    profiles: impl IntoIterator<Item = &'a LmProfile>,
    records: &UsageRecords,
    need: &KnowledgeNeed,
    templates: &TemplateSet,
) -> Result<Vec<Candidate>, SelectError> {
    let mut any = false;
    let mut out = Vec::new();
    for p in profiles {
        any = true;
        for &strategy in StrategyKind::ALL {
            if !strategy_compatible(p.model_class, strategy, need, templates) {
                continue;
            }
            let key = UsageKey::new(&p.lm_id, strategy, need.pscm_function);
            out.push(Candidate {
                lm_id: p.lm_id.clone(),
                strategy,
                capability: records.estimate_capability(&key),
                latency: p.latency_class,
            });
        }
    }
    if !any {
        return Err(SelectError::NoProfiles);
    }
    if out.is_empty() {
        return Err(SelectError::NoCompatible(need.pscm_function));
    }
    out.sort_by(rank_order);
    Ok(out)
}

fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.capability
        .total_cmp(&a.capability)
        .then(a.latency.cmp(&b.latency))
        .then_with(|| a.lm_id.cmp(&b.lm_id))
        .then(a.strategy.cmp(&b.strategy))
}
