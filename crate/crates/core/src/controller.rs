//! The extraction loop: select an (LM, strategy) pair, prompt, interpret,
//! verify, encode, and feed the outcome back into the usage model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backend::{BackendError, Backends, LmResponse, RetryPolicy};
use crate::interpret::{interpret_samples, InterpretContext};
use crate::model::{
    AssertionId, AssertionStatus, KnowledgeNeed, ModelClass, PromptId, StrategyKind, Timestamp,
    Variable,
};
use crate::prompt::{
    build_analogical_prompt, build_dialogue_shaped_prompt, context_prefix, instantiate_template,
    subtask_query, AnalogicalCase, PromptSpec, PromptTemplate, SamplingParams, TemplateSet,
};
use crate::store::{KnowledgeStore, PromptRecord, RawResponse, StoreError};
use crate::term::Term;
use crate::usage::{
    check_temporal_currency, select, Currency, LmProfile, OutcomeEvent, SelectError, UsageKey,
    UsageRecords,
};
use crate::verify::{verify, Decision, VerificationPolicy};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;

/// Step by which a confirmed assertion moves toward full confidence.
pub const REINFORCEMENT_RATE: f64 = 0.1;

/// Source of time, and of waiting between retries.
pub trait Clock {
    fn now(&self) -> Timestamp;

    fn sleep_ms(&self, _ms: u64) {}
}

/// Always the same instant; retries do not wait.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedClock(pub Timestamp);

impl Clock for FixedClock {
    fn now(&self) -> Timestamp {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    pub profiles: Vec<LmProfile>,
    pub templates: TemplateSet,
    pub policy: VerificationPolicy,
    pub max_attempts: u32,
    pub retry: RetryPolicy,
    /// Worked examples for analogical prompts.
    pub analogical_cases: Vec<AnalogicalCase>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            profiles: Vec::new(),
            templates: TemplateSet::builtin(),
            policy: VerificationPolicy::default(),
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            retry: RetryPolicy::default(),
            analogical_cases: Vec::new(),
        }
    }
}

impl ExtractionConfig {
    pub fn with_profiles(profiles: Vec<LmProfile>) -> Self {
        ExtractionConfig {
            profiles,
            ..Self::default()
        }
    }

    pub fn profile(&self, lm_id: &str) -> Option<&LmProfile> {
        self.profiles.iter().find(|p| p.lm_id == lm_id)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttemptError {
    #[error("{0}")]
    Backend(BackendError),
    #[error("uninterpretable response: {0}")]
    Interpret(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attempt {
    pub lm_id: String,
    pub strategy: StrategyKind,
    pub prompt_id: PromptId,
    pub template_id: Option<String>,
    pub interpreted_count: usize,
    pub verified_count: usize,
    pub rejected_count: usize,
    pub error: Option<AttemptError>,
}

impl Attempt {
    pub fn succeeded(&self) -> bool {
        self.verified_count > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalStatus {
    Satisfied,
    Exhausted,
    Error,
}

impl FinalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FinalStatus::Satisfied => "satisfied",
            FinalStatus::Exhausted => "exhausted",
            FinalStatus::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionReport {
    pub need: KnowledgeNeed,
    pub attempts: Vec<Attempt>,
    pub final_status: FinalStatus,
    pub encoded_assertion_ids: Vec<AssertionId>,
    /// Usage outcomes in the order they were recorded.
    pub outcomes: Vec<OutcomeEvent>,
}

impl ExtractionReport {
    pub fn verified_total(&self) -> usize {
        self.attempts.iter().map(|a| a.verified_count).sum()
    }
}

fn subject_binding(t: &PromptTemplate, bindings: &BTreeMap<Variable, Term>) -> Option<Term> {
    t.subject_variable().and_then(|v| bindings.get(&v).cloned())
}

/// Cases for an analogical prompt: configured ones, else verified store
/// knowledge of the same relation rendered through the template.
fn analogical_cases(
    config: &ExtractionConfig,
    store: &KnowledgeStore,
    template: &PromptTemplate,
    subject: Option<&Term>,
) -> Vec<AnalogicalCase> {
    if !config.analogical_cases.is_empty() {
        return config.analogical_cases.clone();
    }
    let Some(var) = template.subject_variable() else {
        return Vec::new();
    };
    if template.variables().len() != 1 {
        return Vec::new();
    }
    store
        .assertions()
        .filter(|a| a.status == AssertionStatus::Verified && a.relation == template.relation())
        .filter(|a| subject.is_none_or(|s| s.text() != a.subject.text()))
        .filter_map(|a| {
            let mut b = BTreeMap::new();
            b.insert(var, a.subject.clone());
            let stimulus = template.render_text(&b).ok()?;
            Some(AnalogicalCase::new(stimulus, a.object.surface()))
        })
        .collect()
}

/// Build the prompt for one strategy, or `None` if it cannot be built.
fn build_prompt(
    id: PromptId,
    strategy: StrategyKind,
    profile: &LmProfile,
    need: &KnowledgeNeed,
    config: &ExtractionConfig,
    store: &KnowledgeStore,
) -> Option<PromptSpec> {
    let first_template = |class: ModelClass| {
        config
            .templates
            .for_function(need.pscm_function)
            .find(|t| t.target_class() == class && t.bindable(&need.bindings))
    };
    let spec = match strategy {
        StrategyKind::Template => {
            instantiate_template(id, first_template(profile.model_class)?, &need.bindings, None).ok()?
        }
        StrategyKind::TemplateWithContext => {
            let prefix = context_prefix(&need.domain_label);
            let t = first_template(profile.model_class)?;
            instantiate_template(id, t, &need.bindings, Some(&prefix)).ok()?
        }
        StrategyKind::Analogical => {
            let t = first_template(ModelClass::Generative)?;
            let subject = subject_binding(t, &need.bindings);
            let cases = analogical_cases(config, store, t, subject.as_ref());
            let stimulus = t.render_text(&need.bindings).ok()?;
            let mut spec = build_analogical_prompt(id, &cases, &stimulus, false)
                .ok()?
                .with_interpretation(t.schema(), t.relation());
            spec.subject = subject;
            spec.inverse = t.is_inverse();
            spec.template_id = Some(t.id().into());
            spec
        }
        StrategyKind::DialogueShaped => {
            let task = need.bindings.get(&Variable::Task)?;
            build_dialogue_shaped_prompt(id, &need.prior_dialogue, &subtask_query(task.surface()))
                .ok()?
                .with_subject(task.clone())
        }
    };
    let n = match spec.target_class {
        ModelClass::Generative => config.policy.n_samples,
        ModelClass::Masked => 1,
    };
    let params = SamplingParams::for_class(spec.target_class)
        .with_samples(n)
        .clamp_to(&profile.parameter_bounds);
    Some(spec.with_params(params).with_need(need.clone()))
}

fn raw_response(r: &Result<LmResponse, BackendError>) -> RawResponse {
    match r {
        Ok(LmResponse::Generative(g)) => RawResponse::Completions(g.samples.clone()),
        Ok(LmResponse::Masked(m)) => RawResponse::Candidates(m.candidates.clone()),
        Err(e) => RawResponse::Failed(format!("{e}")),
    }
}

/// Send `spec` and log the prompt record before anything derived from it.
fn issue(
    spec: &PromptSpec,
    lm_id: &str,
    backends: &Backends,
    retry: &RetryPolicy,
    store: &mut KnowledgeStore,
    clock: &dyn Clock,
) -> Result<Result<LmResponse, BackendError>, StoreError> {
    let result = match backends.get(lm_id) {
        Some(b) => retry.run(|ms| clock.sleep_ms(ms), || b.request(spec)).0,
        None => Err(BackendError::Usage(format!("no backend for LM {lm_id}"))),
    };
    store.log_prompt(PromptRecord {
        id: spec.prompt_id.clone(),
        lm_id: lm_id.into(),
        strategy: spec.strategy,
        pscm_function: spec.pscm_function(),
        target_class: spec.target_class,
        schema: spec.schema,
        text: spec.text.clone(),
        params: spec.params,
        response: raw_response(&result),
        trace: Vec::new(),
        created_at: clock.now(),
    })?;
    Ok(result)
}

/// Try ranked (LM, strategy) pairs until the need has enough verified
/// assertions or the attempt budget is spent.
///
/// LMs whose training cutoff predates `need.required_as_of` are skipped.
/// When nothing is yet known about the need's function, one analogical
/// attempt goes first if example cases exist.
pub fn extract(
    need: &KnowledgeNeed,
    config: &ExtractionConfig,
    backends: &Backends,
    store: &mut KnowledgeStore,
    records: &mut UsageRecords,
    clock: &dyn Clock,
) -> Result<ExtractionReport, ExtractError> {
    if need.task_name.trim().is_empty() {
        return Err(ExtractError::Config("knowledge need has no task name".into()));
    }
    if config.profiles.is_empty() {
        return Err(SelectError::NoProfiles.into());
    }
    let current: Vec<&LmProfile> = config
        .profiles
        .iter()
        .filter(|p| check_temporal_currency(p, need) != Currency::Stale)
        .collect();
    if current.is_empty() {
        return Err(ExtractError::Config(format!(
            "every LM's training cutoff predates {}",
            need.required_as_of.map(|d| format!("{d}")).unwrap_or_default()
        )));
    }
    let mut ranked = select(current.iter().copied(), records, need, &config.templates)?;
    if records.untried(need.pscm_function) {
        if let Some(i) = ranked.iter().position(|c| c.strategy == StrategyKind::Analogical) {
            let c = ranked.remove(i);
            ranked.insert(0, c);
        }
    }

    let wanted = need.min_verified.max(1) as usize;
    let mut report = ExtractionReport {
        need: need.clone(),
        attempts: Vec::new(),
        final_status: FinalStatus::Exhausted,
        encoded_assertion_ids: Vec::new(),
        outcomes: Vec::new(),
    };
    for cand in &ranked {
        if report.attempts.len() >= config.max_attempts as usize || report.verified_total() >= wanted {
            break;
        }
        let Some(profile) = config.profile(&cand.lm_id) else {
            continue;
        };
        let Some(mut spec) = build_prompt(PromptId::new(""), cand.strategy, profile, need, config, store) else {
            continue;
        };
        spec.prompt_id = store.next_prompt_id();
        let result = issue(&spec, &profile.lm_id, backends, &config.retry, store, clock)?;
        let mut attempt = Attempt {
            lm_id: profile.lm_id.clone(),
            strategy: cand.strategy,
            prompt_id: spec.prompt_id.clone(),
            template_id: spec.template_id.clone(),
            interpreted_count: 0,
            verified_count: 0,
            rejected_count: 0,
            error: None,
        };
        let key = UsageKey::new(&profile.lm_id, cand.strategy, need.pscm_function);
        match result {
            Err(e) => attempt.error = Some(AttemptError::Backend(e)),
            Ok(response) => {
                let ctx = InterpretContext {
                    lm_id: profile.lm_id.clone(),
                    sample_count: spec.params.n_samples,
                    now: clock.now(),
                };
                match interpret_samples(&spec, &response, &ctx) {
                    Err(e) => attempt.error = Some(AttemptError::Interpret(format!("{e}"))),
                    Ok(samples) => {
                        for (i, s) in samples.iter().enumerate() {
                            store.append_trace(&spec.prompt_id, s.trace_line(i))?;
                        }
                        attempt.interpreted_count = samples.iter().map(|s| s.assertions.len()).sum();
                        let policy = config.policy.with_samples(samples.len() as u32);
                        let capability = records.estimate_capability(&key);
                        let results = verify(&samples, &policy, store, profile, need, capability)
                            .map_err(|e| ExtractError::Config(format!("{e}")))?;
                        for r in results {
                            match r.decision {
                                Decision::Rejected => attempt.rejected_count += 1,
                                Decision::Verified | Decision::Potential => {
                                    if r.decision == Decision::Verified {
                                        attempt.verified_count += 1;
                                    }
                                    let outcome = store.add_assertion(r.assertion.clone())?;
                                    let id = outcome.id().clone();
                                    if outcome.is_duplicate() {
                                        let promote = r.decision == Decision::Verified
                                            && store.get(&id).is_some_and(|a| a.status == AssertionStatus::Potential);
                                        if promote {
                                            store.set_status(&id, AssertionStatus::Verified, r.assertion.confidence, clock.now())?;
                                        }
                                    }
                                    if !report.encoded_assertion_ids.contains(&id) {
                                        report.encoded_assertion_ids.push(id);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        records.record_outcome(&key, attempt.succeeded());
        report.outcomes.push(OutcomeEvent {
            key,
            success: attempt.succeeded(),
        });
        report.attempts.push(attempt);
    }

    report.final_status = if report.verified_total() >= wanted {
        FinalStatus::Satisfied
    } else if !report.attempts.is_empty()
        && report.attempts.iter().all(|a| {
            matches!(&a.error, Some(AttemptError::Backend(e)) if e.is_retryable())
        })
    {
        FinalStatus::Error
    } else {
        FinalStatus::Exhausted
    };
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UseOutcome {
    Worked,
    Contradicted,
}

/// What a contradiction in use does to the assertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContradictionPolicy {
    /// Reject outright.
    #[default]
    Demote,
    /// Halve confidence; reject only a verified assertion that falls below
    /// the verification threshold, or one already near zero.
    Decay,
}

/// Below this a decayed assertion is rejected regardless of status.
pub const DECAY_FLOOR: f64 = 0.05;

/// Adjust an assertion after the agent acted on it.
///
/// `Worked` moves confidence a tenth of the way to 1. `Contradicted`
/// demotes or decays the assertion per `policy` and counts a failure
/// against the LM and strategy that produced it. Rejected assertions are
/// final either way.
pub fn refine_from_use(
    id: &AssertionId,
    outcome: UseOutcome,
    policy: ContradictionPolicy,
    store: &mut KnowledgeStore,
    records: &mut UsageRecords,
    now: Timestamp,
) -> Result<Option<OutcomeEvent>, StoreError> {
    let a = store
        .get(id)
        .cloned()
        .ok_or_else(|| StoreError::NotFound(id.clone()))?;
    match outcome {
        UseOutcome::Worked => {
            let c = a.confidence + (1.0 - a.confidence) * REINFORCEMENT_RATE;
            store.set_confidence(id, c.clamp(0.0, 1.0), now)?;
            Ok(None)
        }
        UseOutcome::Contradicted => {
            let decayed = a.confidence / 2.0;
            let reject = match policy {
                ContradictionPolicy::Demote => true,
                ContradictionPolicy::Decay => {
                    decayed < DECAY_FLOOR
                        || (a.status == AssertionStatus::Verified
                            && decayed < store.verification_threshold())
                }
            };
            if reject || a.status == AssertionStatus::Rejected {
                store.set_status(id, AssertionStatus::Rejected, a.confidence, now)?;
            } else {
                store.set_confidence(id, decayed, now)?;
            }
            let function = store
                .prompt(&a.provenance.prompt_id)
                .and_then(|p| p.pscm_function);
            let (Some(strategy), Some(function)) = (a.provenance.strategy.lm_strategy(), function) else {
                return Ok(None);
            };
            let key = UsageKey::new(&a.provenance.lm_id, strategy, function);
            records.record_outcome(&key, false);
            Ok(Some(OutcomeEvent {
                key,
                success: false,
            }))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreItem {
    pub template_id: String,
    pub binding_index: usize,
    pub prompt_id: Option<PromptId>,
    pub parsed: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreReport {
    pub lm_id: String,
    pub items: Vec<ExploreItem>,
    pub outcomes: Vec<OutcomeEvent>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExploreError {
    #[error("unknown LM {0}")]
    UnknownLm(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Prompt `lm_id` once per template and binding set, judging each only by
/// whether anything could be parsed from the answer. Items whose bindings
/// do not cover the template are skipped and reported, not scored.
#[allow(clippy::too_many_arguments)]
pub fn explore(
    lm_id: &str,
    templates: &[PromptTemplate],
    bindings_set: &[BTreeMap<Variable, Term>],
    config: &ExtractionConfig,
    backends: &Backends,
    store: &mut KnowledgeStore,
    records: &mut UsageRecords,
    clock: &dyn Clock,
) -> Result<ExploreReport, ExploreError> {
    let profile = config
        .profile(lm_id)
        .ok_or_else(|| ExploreError::UnknownLm(lm_id.into()))?;
    let mut report = ExploreReport {
        lm_id: lm_id.into(),
        items: Vec::new(),
        outcomes: Vec::new(),
    };
    for t in templates {
        for (bi, bindings) in bindings_set.iter().enumerate() {
            let mut item = ExploreItem {
                template_id: t.id().into(),
                binding_index: bi,
                prompt_id: None,
                parsed: 0,
                error: None,
            };
            if !t.bindable(bindings) {
                item.error = Some("bindings do not cover the template".into());
                report.items.push(item);
                continue;
            }
            let id = store.next_prompt_id();
            let Ok(spec) = instantiate_template(id, t, bindings, None) else {
                item.error = Some("template could not be instantiated".into());
                report.items.push(item);
                continue;
            };
            let params = SamplingParams::for_class(t.target_class()).clamp_to(&profile.parameter_bounds);
            let mut need = KnowledgeNeed::new(t.id(), t.pscm_function());
            need.bindings = bindings.clone();
            let spec = spec.with_params(params).with_need(need);
            item.prompt_id = Some(spec.prompt_id.clone());
            match issue(&spec, lm_id, backends, &config.retry, store, clock)? {
                Err(e) => item.error = Some(format!("{e}")),
                Ok(response) => {
                    let ctx = InterpretContext {
                        lm_id: lm_id.into(),
                        sample_count: spec.params.n_samples,
                        now: clock.now(),
                    };
                    match interpret_samples(&spec, &response, &ctx) {
                        Err(e) => item.error = Some(format!("{e}")),
                        Ok(samples) => {
                            for (i, s) in samples.iter().enumerate() {
                                store.append_trace(&spec.prompt_id, s.trace_line(i))?;
                            }
                            item.parsed = samples.iter().map(|s| s.assertions.len()).sum();
                        }
                    }
                }
            }
            let key = UsageKey::new(lm_id, StrategyKind::Template, t.pscm_function());
            let success = item.parsed > 0;
            records.record_outcome(&key, success);
            report.outcomes.push(OutcomeEvent { key, success });
            report.items.push(item);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptEntry, ScriptReply, ScriptedBackend};
    use crate::model::{PscmFunction, RelationKind};
    use crate::store::fixtures::ts;
    use crate::usage::{estimate_capability, Tally};
    use alloc::string::ToString;
    use alloc::vec;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn gpt3() -> LmProfile {
        LmProfile::new("gpt3", ModelClass::Generative, NaiveDate::from_ymd_opt(2019, 10, 1).unwrap())
    }

    fn responses(prompt: &str, rs: &[&str]) -> ScriptEntry {
        ScriptEntry {
            prompt: prompt.into(),
            reply: ScriptReply::Responses(rs.iter().map(|s| s.to_string()).collect()),
        }
    }

    fn term(s: &str) -> Term {
        Term::new(s).unwrap()
    }

    fn patrol_need() -> KnowledgeNeed {
        KnowledgeNeed::new("patrol", PscmFunction::GoalDefinition)
            .bind(Variable::Task, term("patrolling a warehouse"))
    }

    const CLOCK: fn() -> FixedClock = || FixedClock(ts(100));

    #[test]
    fn patrol_goal_is_extracted() {
        let backend = ScriptedBackend::new(
            "gpt3",
            vec![responses(
                "The goal of patrolling a warehouse is",
                &["to identify any hazards that may be present."],
            )],
        )
        .unwrap();
        let backends = Backends::new().with(backend);
        let config = ExtractionConfig::with_profiles(vec![gpt3()]);
        let mut store = KnowledgeStore::default();
        let mut records = UsageRecords::new();
        let report = extract(&patrol_need(), &config, &backends, &mut store, &mut records, &CLOCK()).unwrap();
        assert_eq!(report.final_status, FinalStatus::Satisfied);
        assert_eq!(report.attempts.len(), 1);
        assert_eq!(report.encoded_assertion_ids.len(), 1);
        let a = store.get(&report.encoded_assertion_ids[0]).unwrap();
        assert_eq!(a.subject.text(), "patrolling a warehouse");
        assert_eq!(a.relation, RelationKind::GoalOf);
        assert_eq!(a.object.as_str(), "to identify any hazards that may be present");
        assert_eq!(a.status, AssertionStatus::Verified);
        let p = store.prompt(&a.provenance.prompt_id).unwrap();
        assert_eq!(p.text, "The goal of patrolling a warehouse is");
        assert!(store.dangling_provenance().is_empty());
        let key = UsageKey::new("gpt3", StrategyKind::Template, PscmFunction::GoalDefinition);
        assert_eq!(records.tally(&key), Tally::new(1, 1).unwrap());

        // identical second run on a fresh store
        let mut store2 = KnowledgeStore::default();
        let mut records2 = UsageRecords::new();
        extract(&patrol_need(), &config, &backends, &mut store2, &mut records2, &CLOCK()).unwrap();
        assert_eq!(store, store2);
        assert_eq!(records, records2);
    }

    #[test]
    fn all_misses_exhaust_budget() {
        let backends = Backends::new().with(ScriptedBackend::new("gpt3", vec![]).unwrap());
        let mut profiles = Vec::new();
        for id in ["a", "b", "c"] {
            let mut p = gpt3();
            p.lm_id = id.into();
            profiles.push(p);
        }
        let mut backends = backends;
        for id in ["a", "b", "c"] {
            backends.insert(alloc::boxed::Box::new(ScriptedBackend::new(id, vec![]).unwrap()));
        }
        let config = ExtractionConfig::with_profiles(profiles);
        let need = patrol_need().with_domain("warehouse robot");
        let mut store = KnowledgeStore::default();
        let mut records = UsageRecords::new();
        let report = extract(&need, &config, &backends, &mut store, &mut records, &CLOCK()).unwrap();
        assert_eq!(report.final_status, FinalStatus::Exhausted);
        assert_eq!(report.attempts.len(), 5);
        assert!(report.encoded_assertion_ids.is_empty());
        assert!(store.is_empty());
        assert_eq!(store.prompts().count(), 5);
    }

    #[test]
    fn config_errors() {
        let backends = Backends::new();
        let mut store = KnowledgeStore::default();
        let mut records = UsageRecords::new();
        let empty = ExtractionConfig::default();
        assert_eq!(
            extract(&patrol_need(), &empty, &backends, &mut store, &mut records, &CLOCK()),
            Err(ExtractError::Select(SelectError::NoProfiles))
        );
        let stale = patrol_need().with_required_as_of(NaiveDate::from_ymd_opt(2022, 1, 1).unwrap());
        let config = ExtractionConfig::with_profiles(vec![gpt3()]);
        assert!(matches!(
            extract(&stale, &config, &backends, &mut store, &mut records, &CLOCK()),
            Err(ExtractError::Config(_))
        ));
        let unbound = KnowledgeNeed::new("patrol", PscmFunction::GoalDefinition);
        assert!(matches!(
            extract(&unbound, &config, &backends, &mut store, &mut records, &CLOCK()),
            Err(ExtractError::Select(SelectError::NoCompatible(_)))
        ));
    }

    #[test]
    fn transport_failures_end_in_error() {
        struct Down;
        impl crate::backend::LanguageModel for Down {
            fn lm_id(&self) -> &str {
                "gpt3"
            }
            fn complete(&self, _: &PromptSpec) -> Result<crate::backend::GenerativeResponse, BackendError> {
                Err(BackendError::Transport("connection refused".into()))
            }
            fn fill_mask(&self, _: &PromptSpec) -> Result<crate::backend::MaskedResponse, BackendError> {
                Err(BackendError::Timeout(30_000))
            }
        }
        let backends = Backends::new().with(Down);
        let config = ExtractionConfig::with_profiles(vec![gpt3()]);
        let mut store = KnowledgeStore::default();
        let mut records = UsageRecords::new();
        let report = extract(&patrol_need(), &config, &backends, &mut store, &mut records, &CLOCK()).unwrap();
        assert_eq!(report.final_status, FinalStatus::Error);
        assert_eq!(report.attempts.len(), 1);
        assert!(matches!(store.prompts().next().unwrap().response, RawResponse::Failed(_)));
    }

    const TABLE6: [&str; 4] = [
        "should not be in the building on weekends",
        "can't arrive at the start of their shift",
        "typically do not arrive between 6-9 on the subsequent Monday",
        "will not be in the building on Saturday or Sunday",
    ];

    /// Hand trace: with no history every pair scores 0.5, so the plain
    /// template precedes the context-prefixed one. The first yields 1/4
    /// agreement (potential, failure), the second 4/4 (verified, success).
    #[test]
    fn backtracks_to_second_strategy() {
        let need = KnowledgeNeed::new("staffing", PscmFunction::ProblemSpaceDescription)
            .with_domain("warehouse")
            .bind(Variable::Task, term("close on weekends"));
        let backend = ScriptedBackend::new(
            "gpt3",
            vec![
                responses("Explain how to close on weekends.", &TABLE6),
                responses("warehouse. Explain how to close on weekends.", &[TABLE6[0]]),
            ],
        )
        .unwrap();
        let backends = Backends::new().with(backend);
        let mut config = ExtractionConfig::with_profiles(vec![gpt3()]);
        config.policy.n_samples = 4;
        let mut store = KnowledgeStore::default();
        let mut records = UsageRecords::new();
        let report = extract(&need, &config, &backends, &mut store, &mut records, &CLOCK()).unwrap();
        assert_eq!(report.final_status, FinalStatus::Satisfied);
        assert_eq!(report.attempts.len(), 2);
        assert_eq!(report.attempts[0].strategy, StrategyKind::Template);
        assert_eq!(report.attempts[0].verified_count, 0);
        assert_eq!(report.attempts[1].strategy, StrategyKind::TemplateWithContext);
        assert_eq!(report.attempts[1].verified_count, 1);
        let f = PscmFunction::ProblemSpaceDescription;
        assert_eq!(records.tally(&UsageKey::new("gpt3", StrategyKind::Template, f)), Tally::new(0, 1).unwrap());
        assert_eq!(
            records.tally(&UsageKey::new("gpt3", StrategyKind::TemplateWithContext, f)),
            Tally::new(1, 1).unwrap()
        );
        assert_eq!(report.outcomes.iter().map(|o| o.success).collect::<Vec<_>>(), [false, true]);
        // the potential assertion from attempt one is kept alongside the verified one
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn analogical_bootstrap_goes_first() {
        let mut config = ExtractionConfig::with_profiles(vec![gpt3()]);
        config.analogical_cases = vec![AnalogicalCase::new(
            "The goal of guarding a door is",
            "to keep intruders out.",
        )];
        let prompt = "The goal of guarding a door is to keep intruders out.\nThe goal of patrolling a warehouse is";
        let backend = ScriptedBackend::new("gpt3", vec![responses(prompt, &["to find hazards."])]).unwrap();
        let backends = Backends::new().with(backend);
        let mut store = KnowledgeStore::default();
        let mut records = UsageRecords::new();
        let report = extract(&patrol_need(), &config, &backends, &mut store, &mut records, &CLOCK()).unwrap();
        assert_eq!(report.attempts[0].strategy, StrategyKind::Analogical);
        assert_eq!(report.final_status, FinalStatus::Satisfied);

        // with history, ranking is by capability alone
        let mut records = UsageRecords::new();
        records.record_outcome(&UsageKey::new("gpt3", StrategyKind::Template, PscmFunction::GoalDefinition), true);
        let mut store = KnowledgeStore::default();
        let report = extract(&patrol_need(), &config, &backends, &mut store, &mut records, &CLOCK()).unwrap();
        assert_eq!(report.attempts[0].strategy, StrategyKind::Template);
    }

    #[test]
    fn dialogue_shaped_prompt_is_issued() {
        let need = KnowledgeNeed::new("move", PscmFunction::ProblemSpaceDescription)
            .bind(Variable::Task, term("move the package into the cabinet"))
            .with_prior_dialogue(vec![
                "Move the box onto the table. What is the next goal or subtask of move?".into(),
                "Pick up the box.".into(),
                "Put the box onto the table.".into(),
                "You are done.".into(),
            ]);
        let prompt = "Move the box onto the table. What is the next goal or subtask of move? Pick up the box. Put the box onto the table. You are done. Move the package into the cabinet. What is the next goal or subtask of move?";
        let backend = ScriptedBackend::new(
            "gpt3",
            vec![responses(prompt, &["Pick up the package. Put the package into the cabinet. You are done."])],
        )
        .unwrap();
        let mut records = UsageRecords::new();
        // make the other strategies look poor so dialogue-shaped ranks first
        for s in [StrategyKind::Template, StrategyKind::TemplateWithContext, StrategyKind::Analogical] {
            records.record_outcome(&UsageKey::new("gpt3", s, PscmFunction::ProblemSpaceDescription), false);
        }
        let config = ExtractionConfig::with_profiles(vec![gpt3()]);
        let mut store = KnowledgeStore::default();
        let report =
            extract(&need, &config, &Backends::new().with(backend), &mut store, &mut records, &CLOCK()).unwrap();
        assert_eq!(report.attempts[0].strategy, StrategyKind::DialogueShaped);
        assert_eq!(report.attempts[0].verified_count, 2);
        let steps = store.query(&crate::store::AssertionFilter::default().relation(RelationKind::StepOf));
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].step_index, Some(1));
    }

    #[test]
    fn refine_examples() {
        let mut store = KnowledgeStore::default();
        let mut records = UsageRecords::new();
        let backend = ScriptedBackend::new(
            "gpt3",
            vec![responses("The goal of patrolling a warehouse is", &["to identify any hazards."])],
        )
        .unwrap();
        let config = ExtractionConfig::with_profiles(vec![gpt3()]);
        let report =
            extract(&patrol_need(), &config, &Backends::new().with(backend), &mut store, &mut records, &CLOCK())
                .unwrap();
        let id = report.encoded_assertion_ids[0].clone();
        store.set_confidence(&id, 0.8, ts(200)).unwrap();
        refine_from_use(&id, UseOutcome::Worked, ContradictionPolicy::Demote, &mut store, &mut records, ts(201)).unwrap();
        assert!((store.get(&id).unwrap().confidence - 0.82).abs() < 1e-12);

        let key = UsageKey::new("gpt3", StrategyKind::Template, PscmFunction::GoalDefinition);
        let before = records.tally(&key).attempts();
        let ev = refine_from_use(&id, UseOutcome::Contradicted, ContradictionPolicy::Demote, &mut store, &mut records, ts(202)).unwrap();
        assert_eq!(ev.unwrap().key, key);
        assert_eq!(store.get(&id).unwrap().status, AssertionStatus::Rejected);
        assert_eq!(records.tally(&key).attempts(), before + 1);
        assert!(matches!(
            refine_from_use(&id, UseOutcome::Contradicted, ContradictionPolicy::Demote, &mut store, &mut records, ts(203)),
            Err(StoreError::IllegalTransition { .. })
        ));
        assert!(matches!(
            refine_from_use(&AssertionId::new("nope"), UseOutcome::Worked, ContradictionPolicy::Demote, &mut store, &mut records, ts(203)),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn decay_lowers_before_rejecting() {
        let mut store = KnowledgeStore::default();
        let mut records = UsageRecords::new();
        store.log_prompt(crate::store::fixtures::prompt_record("p000001")).unwrap();
        let mut a = crate::store::fixtures::assertion("a", "p000001", "shelf", RelationKind::AlsoKnownAs, "rack");
        a.confidence = 0.4;
        store.add_assertion(a.clone()).unwrap();
        let decay = ContradictionPolicy::Decay;
        refine_from_use(&a.id, UseOutcome::Contradicted, decay, &mut store, &mut records, ts(1)).unwrap();
        assert_eq!(store.get(&a.id).unwrap().confidence, 0.2);
        assert_eq!(store.get(&a.id).unwrap().status, AssertionStatus::Potential);
        let key = UsageKey::new("roberta", StrategyKind::Template, PscmFunction::StateLexicon);
        assert_eq!(records.tally(&key), Tally::new(0, 1).unwrap());

        store.set_status(&a.id, AssertionStatus::Verified, 0.9, ts(2)).unwrap();
        refine_from_use(&a.id, UseOutcome::Contradicted, decay, &mut store, &mut records, ts(3)).unwrap();
        assert_eq!(store.get(&a.id).unwrap().status, AssertionStatus::Rejected);
    }

    fn table3() -> Vec<PromptTemplate> {
        let set = TemplateSet::builtin();
        ["psd-explain", "goal-of", "state-aka", "tax-type", "tax-part", "op-can", "op-causes"]
            .iter()
            .map(|id| set.get(id).unwrap().clone())
            .collect()
    }

    #[test]
    fn explore_counts() {
        let mut b = BTreeMap::new();
        for (v, t) in [
            (Variable::Task, "patrol a warehouse"),
            (Variable::Object, "shelf"),
            (Variable::Actor, "robot"),
            (Variable::Action, "pushing a box"),
        ] {
            b.insert(v, term(t));
        }
        let config = ExtractionConfig::with_profiles(vec![gpt3()]);
        let backends = Backends::new().with(ScriptedBackend::new("gpt3", vec![]).unwrap());
        let mut store = KnowledgeStore::default();
        let mut records = UsageRecords::new();
        let templates = table3();
        let report = explore("gpt3", &templates, &[b.clone()], &config, &backends, &mut store, &mut records, &CLOCK())
            .unwrap();
        assert_eq!(report.outcomes.len(), templates.len());
        let none = explore("gpt3", &templates, &[], &config, &backends, &mut store, &mut records, &CLOCK()).unwrap();
        assert!(none.outcomes.is_empty());
        assert!(matches!(
            explore("bert", &templates, &[b], &config, &backends, &mut store, &mut records, &CLOCK()),
            Err(ExploreError::UnknownLm(_))
        ));
    }

    #[test]
    fn explore_hits_and_misses_diverge() {
        let mut b = BTreeMap::new();
        b.insert(Variable::Task, term("patrol a warehouse"));
        b.insert(Variable::Action, term("Pushing a box"));
        let set = TemplateSet::builtin();
        let templates: Vec<PromptTemplate> = ["psd-explain", "op-causes", "psd-how", "goal-of", "goal-what"]
            .iter()
            .map(|id| set.get(id).unwrap().clone())
            .collect();
        let backend = ScriptedBackend::new(
            "gpt3",
            vec![
                responses("Explain how to patrol a warehouse.", &["Walk around the warehouse."]),
                responses("Pushing a box causes", &["the box to move."]),
            ],
        )
        .unwrap();
        let config = ExtractionConfig::with_profiles(vec![gpt3()]);
        let mut store = KnowledgeStore::default();
        let mut records = UsageRecords::new();
        let report = explore(
            "gpt3",
            &templates,
            &[b],
            &config,
            &Backends::new().with(backend),
            &mut store,
            &mut records,
            &CLOCK(),
        )
        .unwrap();
        assert_eq!(report.outcomes.iter().filter(|o| o.success).count(), 2);
        let psd = records.tally(&UsageKey::new("gpt3", StrategyKind::Template, PscmFunction::ProblemSpaceDescription));
        let op = records.tally(&UsageKey::new("gpt3", StrategyKind::Template, PscmFunction::OperatorAction));
        let goal = records.tally(&UsageKey::new("gpt3", StrategyKind::Template, PscmFunction::GoalDefinition));
        // psd: 1 hit of 2, op: 1 of 1, goal: 0 of 2
        assert_eq!(estimate_capability(psd), 2.0 / 4.0);
        assert_eq!(estimate_capability(op), 2.0 / 3.0);
        assert_eq!(estimate_capability(goal), 1.0 / 4.0);
        assert_eq!(UsageRecords::replay(&report.outcomes), records);
    }

    proptest! {
        #[test]
        fn attempts_never_exceed_budget(
            hits in proptest::collection::vec(any::<bool>(), 4),
            max_attempts in 1u32..7,
        ) {
            let mut profiles = Vec::new();
            let mut backends = Backends::new();
            for (i, hit) in hits.iter().enumerate() {
                let id = format!("lm{i}");
                let mut p = gpt3();
                p.lm_id = id.clone();
                profiles.push(p);
                let entries = if *hit {
                    vec![responses("warehouse. The goal of patrolling a warehouse is", &["to find hazards."])]
                } else {
                    vec![]
                };
                backends.insert(alloc::boxed::Box::new(ScriptedBackend::new(id, entries).unwrap()));
            }
            let mut config = ExtractionConfig::with_profiles(profiles);
            config.max_attempts = max_attempts;
            let need = patrol_need().with_domain("warehouse");
            let mut store = KnowledgeStore::default();
            let mut records = UsageRecords::new();
            let report = extract(&need, &config, &backends, &mut store, &mut records, &CLOCK()).unwrap();
            prop_assert!(report.attempts.len() <= max_attempts as usize);
            let satisfied = report.final_status == FinalStatus::Satisfied;
            prop_assert_eq!(satisfied, report.attempts.iter().any(|a| a.verified_count > 0));
            prop_assert!(store.dangling_provenance().is_empty());
            prop_assert_eq!(UsageRecords::replay(&report.outcomes), records);
        }
    }
}
