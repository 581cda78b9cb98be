//! Turning LM text into assertions.
//!
//! The prompt's schema fixes what shape of answer is expected, so each
//! parser here handles a deliberately small fragment of English: noun
//! lists, imperative step sequences, "X causes ..." clauses and goal
//! clauses. Parsers for lists and steps are total.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backend::{LmResponse, MaskedResponse};
use crate::model::{
    Assertion, AssertionId, AssertionStatus, ModelClass, Provenance, ProvenanceStrategy,
    SchemaKind, Timestamp,
};
use crate::prompt::PromptSpec;
use crate::term::{canonicalize, split_clauses, tidy_phrase, ObjectValue, Term};

pub const DEFAULT_FILLERS: [&str; 4] = ["more", "others", "other", "etc"];

/// Confidence given to generative assertions before verification.
pub const UNVERIFIED_PRIOR: f64 = 0.5;

const TERMINATOR: &str = "you are done";

const NON_IMPERATIVE_OPENERS: &[&str] = &[
    "the", "a", "an", "this", "that", "these", "those", "it", "i", "you", "we", "they", "he",
    "she", "there", "my", "your", "our", "their", "his", "her", "its",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InterpretError {
    #[error("nothing to assert: response is empty")]
    Empty,
    #[error("prompt has no subject binding to attach assertions to")]
    NoSubject,
    #[error("usage error: {0}")]
    Usage(String),
}

/// Parse problems the verifier should weigh. The parser itself never
/// rejects text over these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QualityFlag {
    /// A step sequence without the closing terminator sentence.
    Unterminated,
    /// Step sentences that do not read as commands (1-based positions).
    NonImperative(Vec<usize>),
    /// The sample produced nothing usable.
    Uninterpretable(String),
}

/// Assertions decoded from one sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Interpretation {
    pub assertions: Vec<Assertion>,
    pub flags: Vec<QualityFlag>,
}

impl Interpretation {
    pub fn trace_line(&self, sample: usize) -> String {
        let mut line = format!("sample {sample}: {} assertion(s)", self.assertions.len());
        for f in &self.flags {
            match f {
                QualityFlag::Unterminated => line.push_str("; unterminated step sequence"),
                QualityFlag::NonImperative(i) => {
                    line.push_str(&format!("; non-imperative steps {i:?}"))
                }
                QualityFlag::Uninterpretable(m) => line.push_str(&format!("; uninterpretable: {m}")),
            }
        }
        line
    }
}

/// Split a list answer into terms, dropping trailing fillers like "and more".
pub fn parse_noun_list(text: &str) -> Vec<Term> {
    parse_noun_list_with(text, &DEFAULT_FILLERS)
}

pub fn parse_noun_list_with(text: &str, fillers: &[&str]) -> Vec<Term> {
    let mut out = Vec::new();
    for chunk in text.split(',') {
        for piece in chunk.split(" and ") {
            let piece = piece.trim();
            let piece = piece
                .strip_prefix("and ")
                .or_else(|| piece.strip_prefix("And "))
                .unwrap_or(piece);
            let piece = tidy_phrase(piece);
            let head = piece
                .split_whitespace()
                .next()
                .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase());
            match head {
                None => continue,
                Some(h) if fillers.iter().any(|f| *f == h) => continue,
                Some(_) => {}
            }
            if let Ok(t) = Term::new(&piece) {
                out.push(t);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub text: String,
    pub imperative: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StepSequence {
    pub steps: Vec<Step>,
    pub terminated: bool,
}

impl StepSequence {
    pub fn non_imperative(&self) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.imperative)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Split on a period followed by whitespace or end of text.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        let boundary = b == b'.' && bytes.get(i + 1).is_none_or(|n| n.is_ascii_whitespace());
        if boundary {
            let s = text[start..i].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn is_terminator(sentence: &str) -> bool {
    let s = sentence
        .trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase();
    s == TERMINATOR
}

fn looks_imperative(sentence: &str) -> bool {
    match sentence.split_whitespace().next() {
        Some(w) => {
            let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            !NON_IMPERATIVE_OPENERS.contains(&w.as_str())
        }
        None => false,
    }
}

pub fn parse_step_sequence(text: &str) -> StepSequence {
    let mut seq = StepSequence::default();
    for s in sentences(text) {
        if is_terminator(s) {
            seq.terminated = true;
            break;
        }
        seq.steps.push(Step {
            text: s.into(),
            imperative: looks_imperative(s),
        });
    }
    seq
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalClause {
    pub subject: Term,
    pub effect: ObjectValue,
    pub sub_effects: Vec<String>,
}

pub fn parse_causal_clause(stimulus_action: &str, text: &str) -> Result<CausalClause, InterpretError> {
    let subject = Term::new(stimulus_action).map_err(|_| InterpretError::NoSubject)?;
    let clause = tidy_phrase(text.trim());
    if clause.is_empty() {
        return Err(InterpretError::Empty);
    }
    let sub_effects = split_clauses(&clause).into_iter().map(String::from).collect();
    Ok(CausalClause {
        subject,
        effect: ObjectValue::Phrase(clause),
        sub_effects,
    })
}

/// Goal clause from either a bare continuation ("to identify ...") or a
/// restated answer ("The goal of X is to identify ...").
pub fn parse_goal_clause(text: &str, task: Option<&str>) -> Result<ObjectValue, InterpretError> {
    let text = text.trim();
    let lowered = text.to_lowercase();
    let exact = task.map(|t| format!("the goal of {} is ", t.trim().to_lowercase()));
    let body = match exact {
        Some(prefix) if lowered.starts_with(&prefix) => text.get(prefix.len()..).unwrap_or(text),
        _ if lowered.starts_with("the goal of ") => match lowered.find(" is ") {
            Some(p) => text.get(p + 4..).unwrap_or(text),
            None => text,
        },
        _ => text,
    };
    let first = sentences(body).into_iter().next().unwrap_or("");
    let clause = tidy_phrase(first);
    if clause.is_empty() {
        return Err(InterpretError::Empty);
    }
    Ok(ObjectValue::Phrase(clause))
}

/// Provenance details that interpretation cannot know by itself.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpretContext {
    pub lm_id: String,
    pub sample_count: u32,
    pub now: Timestamp,
}

struct Builder<'a> {
    spec: &'a PromptSpec,
    ctx: &'a InterpretContext,
    sample: usize,
    out: Vec<Assertion>,
}

impl Builder<'_> {
    fn push(&mut self, subject: Term, object: ObjectValue, step: Option<u32>, confidence: f64) {
        let (subject, object) = match (self.spec.inverse, &object) {
            (true, ObjectValue::Term(t)) => (t.clone(), ObjectValue::Term(subject)),
            _ => (subject, object),
        };
        let index = self.out.len();
        self.out.push(Assertion {
            id: AssertionId::derived(&self.spec.prompt_id, self.sample, index),
            subject,
            relation: self.spec.relation,
            object,
            step_index: step,
            provenance: Provenance {
                lm_id: self.ctx.lm_id.clone(),
                prompt_id: self.spec.prompt_id.clone(),
                strategy: ProvenanceStrategy::Lm(self.spec.strategy),
                sample_count: self.ctx.sample_count.max(1),
                extracted_at: self.ctx.now,
            },
            status: AssertionStatus::Potential,
            confidence,
            created_at: self.ctx.now,
            updated_at: self.ctx.now,
        });
    }
}

fn subject_of(spec: &PromptSpec) -> Result<Term, InterpretError> {
    spec.subject.clone().ok_or(InterpretError::NoSubject)
}

/// One assertion per candidate, confidence scaled by the top score.
pub fn candidates_to_assertions(
    resp: &MaskedResponse,
    spec: &PromptSpec,
    ctx: &InterpretContext,
) -> Result<Vec<Assertion>, InterpretError> {
    if spec.target_class != ModelClass::Masked {
        return Err(InterpretError::Usage("mask candidates for a generative prompt".into()));
    }
    if resp.candidates.is_empty() {
        return Ok(Vec::new());
    }
    let subject = subject_of(spec)?;
    let top = resp.candidates[0].1;
    let mut b = Builder {
        spec,
        ctx,
        sample: 0,
        out: Vec::new(),
    };
    for (token, score) in &resp.candidates {
        let object = match Term::new(token) {
            Ok(t) => ObjectValue::Term(t),
            Err(_) => ObjectValue::Phrase(token.trim().into()),
        };
        let confidence = if top > 0.0 {
            (score / top).clamp(0.0, 1.0)
        } else {
            0.0
        };
        b.push(subject.clone(), object, None, confidence);
    }
    Ok(b.out)
}

fn interpret_text(
    spec: &PromptSpec,
    text: &str,
    ctx: &InterpretContext,
    sample: usize,
) -> Result<Interpretation, InterpretError> {
    let mut b = Builder {
        spec,
        ctx,
        sample,
        out: Vec::new(),
    };
    let mut flags = Vec::new();
    match spec.schema {
        SchemaKind::MaskLexicon => {
            return Err(InterpretError::Usage("mask-lexicon schema needs candidates".into()))
        }
        SchemaKind::NounList => {
            let subject = subject_of(spec)?;
            for item in parse_noun_list(text) {
                b.push(subject.clone(), ObjectValue::Term(item), None, UNVERIFIED_PRIOR);
            }
        }
        SchemaKind::StepSequence => {
            let subject = subject_of(spec)?;
            let seq = parse_step_sequence(text);
            if !seq.terminated {
                flags.push(QualityFlag::Unterminated);
            }
            let odd = seq.non_imperative();
            if !odd.is_empty() {
                flags.push(QualityFlag::NonImperative(odd));
            }
            for (i, step) in seq.steps.iter().enumerate() {
                b.push(
                    subject.clone(),
                    ObjectValue::phrase(&step.text),
                    Some(i as u32 + 1),
                    UNVERIFIED_PRIOR,
                );
            }
        }
        SchemaKind::CausalClause => {
            let subject = subject_of(spec)?;
            let c = parse_causal_clause(subject.surface(), text)?;
            b.push(c.subject, c.effect, None, UNVERIFIED_PRIOR);
        }
        SchemaKind::GoalClause => {
            let subject = subject_of(spec)?;
            let clause = parse_goal_clause(text, Some(subject.surface()))?;
            b.push(subject, clause, None, UNVERIFIED_PRIOR);
        }
        SchemaKind::FreeText => {
            let subject = match &spec.subject {
                Some(s) => s.clone(),
                None => Term::new(&spec.text).map_err(|_| InterpretError::NoSubject)?,
            };
            let body = tidy_phrase(text);
            if body.is_empty() {
                return Err(InterpretError::Empty);
            }
            b.push(subject, ObjectValue::Phrase(body), None, UNVERIFIED_PRIOR);
        }
    }
    if b.out.is_empty() {
        flags.push(QualityFlag::Uninterpretable("no assertions parsed".into()));
    }
    Ok(Interpretation {
        assertions: b.out,
        flags,
    })
}

/// Decode a response, one [`Interpretation`] per sample.
///
/// A sample that cannot be parsed yields an empty interpretation flagged
/// `Uninterpretable`; only class or schema mismatches are errors.
pub fn interpret_samples(
    spec: &PromptSpec,
    response: &LmResponse,
    ctx: &InterpretContext,
) -> Result<Vec<Interpretation>, InterpretError> {
    if response.class() != spec.target_class {
        return Err(InterpretError::Usage(format!(
            "{} response for a {} prompt",
            response.class(),
            spec.target_class
        )));
    }
    match response {
        LmResponse::Masked(m) => {
            if spec.schema != SchemaKind::MaskLexicon {
                return Err(InterpretError::Usage(format!(
                    "schema {} cannot decode mask candidates",
                    spec.schema
                )));
            }
            let assertions = candidates_to_assertions(m, spec, ctx)?;
            let mut flags = Vec::new();
            if assertions.is_empty() {
                flags.push(QualityFlag::Uninterpretable("no candidates".into()));
            }
            Ok(alloc::vec![Interpretation { assertions, flags }])
        }
        LmResponse::Generative(g) => Ok(g
            .samples
            .iter()
            .enumerate()
            .map(|(i, text)| {
                interpret_text(spec, text, ctx, i).unwrap_or_else(|e| Interpretation {
                    assertions: Vec::new(),
                    flags: alloc::vec![QualityFlag::Uninterpretable(format!("{e}"))],
                })
            })
            .collect()),
    }
}

/// All assertions from every sample, in sample order.
pub fn interpret(
    spec: &PromptSpec,
    response: &LmResponse,
    ctx: &InterpretContext,
) -> Result<Vec<Assertion>, InterpretError> {
    Ok(interpret_samples(spec, response, ctx)?
        .into_iter()
        .flat_map(|i| i.assertions)
        .collect())
}

/// Key under which a response normalizes; used when scripting tests.
pub fn normalized_text(text: &str) -> String {
    canonicalize(&tidy_phrase(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::GenerativeResponse;
    use crate::model::{PromptId, RelationKind, Variable};
    use crate::prompt::{build_dialogue_shaped_prompt, instantiate_template, subtask_query, TemplateSet};
    use alloc::collections::BTreeMap;
    use alloc::vec;
    use chrono::TimeZone;
    use proptest::prelude::*;

    const TABLE5_WITH: &str = "Pick up the package. Put the package into the cabinet. You are done.";
    const TABLE5_WITHOUT: &str = "The next goal or subtask is to move the package into the cabinet. Apply these steps to a goal or subtask until the lowest level of goal or subtask is reached.";

    fn ctx() -> InterpretContext {
        InterpretContext {
            lm_id: "gpt3".into(),
            sample_count: 1,
            now: chrono::Utc.timestamp_opt(1_650_000_000, 0).unwrap(),
        }
    }

    fn texts(terms: &[Term]) -> Vec<&str> {
        terms.iter().map(|t| t.text()).collect()
    }

    fn spec_for(id: &str, pairs: &[(Variable, &str)]) -> PromptSpec {
        let set = TemplateSet::builtin();
        let b: BTreeMap<_, _> = pairs.iter().map(|(v, s)| (*v, Term::new(s).unwrap())).collect();
        instantiate_template(PromptId::new("p000007"), set.get(id).unwrap(), &b, None).unwrap()
    }

    fn generative(samples: &[&str]) -> LmResponse {
        LmResponse::Generative(GenerativeResponse {
            samples: samples.iter().map(|s| String::from(*s)).collect(),
            lm_id: "gpt3".into(),
            elapsed_ms: 0,
        })
    }

    #[test]
    fn noun_lists() {
        assert_eq!(
            texts(&parse_noun_list("beds, tables, chairs, wardrobes, and more")),
            ["beds", "tables", "chairs", "wardrobes"]
        );
        assert_eq!(texts(&parse_noun_list("tables, chairs, and other items")), ["tables", "chairs"]);
        assert!(parse_noun_list("").is_empty());
        assert_eq!(texts(&parse_noun_list("forklifts and pallets, etc.")), ["forklifts", "pallets"]);
        assert_eq!(texts(&parse_noun_list_with("boxes and others", &[])), ["boxes", "others"]);
    }

    #[test]
    fn step_sequences() {
        let seq = parse_step_sequence(TABLE5_WITH);
        let steps: Vec<_> = seq.steps.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(steps, ["Pick up the package", "Put the package into the cabinet"]);
        assert!(seq.terminated);
        assert!(seq.non_imperative().is_empty());

        let seq = parse_step_sequence("You are done.");
        assert!(seq.steps.is_empty() && seq.terminated);
        assert!(parse_step_sequence("you are DONE").terminated);

        let seq = parse_step_sequence(TABLE5_WITHOUT);
        assert_eq!(seq.steps.len(), 2);
        assert!(!seq.terminated);
        assert_eq!(seq.non_imperative(), [1]);
    }

    #[test]
    fn causal_clauses() {
        let c = parse_causal_clause(
            "Pushing a box",
            "the box to move and the object inside the box to move with the box.",
        )
        .unwrap();
        assert_eq!(c.subject.text(), "pushing a box");
        assert_eq!(c.sub_effects, ["the box to move", "the object inside the box to move with the box"]);
        assert_eq!(parse_causal_clause("X", ""), Err(InterpretError::Empty));
        let c = parse_causal_clause("taking a nap", "increases energy").unwrap();
        assert_eq!(c.effect.as_str(), "increases energy");
        assert!(c.sub_effects.is_empty());
    }

    #[test]
    fn masked_candidates() {
        let spec = spec_for("op-can", &[(Variable::Actor, "A robot"), (Variable::Object, "package")]);
        let resp = MaskedResponse {
            candidates: vec![("open".into(), 0.4), ("deliver".into(), 0.2), (" carry".into(), 0.1)],
            lm_id: "roberta".into(),
        };
        let got = candidates_to_assertions(&resp, &spec, &ctx()).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].subject.text(), "robot");
        assert_eq!(got[0].relation, RelationKind::CanDo);
        assert_eq!(got[2].object.as_str(), "carry");
        assert_eq!(got[0].confidence, 1.0);
        assert_eq!(got[1].confidence, 0.5);
        assert_eq!(got[1].provenance.prompt_id.as_str(), "p000007");
        let empty = MaskedResponse { candidates: vec![], lm_id: "r".into() };
        assert!(candidates_to_assertions(&empty, &spec, &ctx()).unwrap().is_empty());
    }

    #[test]
    fn inverse_template_swaps_roles() {
        let spec = spec_for("tax-has", &[(Variable::Object, "A house")]);
        let resp = MaskedResponse { candidates: vec![("wall".into(), 0.3)], lm_id: "r".into() };
        let got = candidates_to_assertions(&resp, &spec, &ctx()).unwrap();
        assert_eq!((got[0].subject.text(), got[0].object.as_str()), ("wall", "house"));
        assert_eq!(got[0].relation, RelationKind::PartOf);
    }

    #[test]
    fn interpret_goal_clause() {
        let spec = spec_for("goal-of", &[(Variable::Task, "patrolling a warehouse")]);
        let got = interpret(&spec, &generative(&["to identify any hazards that may be present."]), &ctx()).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].subject.text(), "patrolling a warehouse");
        assert_eq!(got[0].relation, RelationKind::GoalOf);
        assert_eq!(got[0].object, ObjectValue::Phrase("to identify any hazards that may be present".into()));
        let restated = interpret(
            &spec,
            &generative(&["The goal of patrolling a warehouse is to identify any hazards that may be present."]),
            &ctx(),
        )
        .unwrap();
        assert_eq!(restated[0].object, got[0].object);
    }

    #[test]
    fn interpret_steps_and_mismatch() {
        let task = Term::new("move the package into the cabinet").unwrap();
        let spec = build_dialogue_shaped_prompt(PromptId::new("p000002"), &[], &subtask_query(task.surface()))
            .unwrap()
            .with_subject(task);
        let groups = interpret_samples(&spec, &generative(&[TABLE5_WITH]), &ctx()).unwrap();
        let a = &groups[0].assertions;
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].step_index, Some(1));
        assert_eq!(a[1].step_index, Some(2));
        assert_eq!(a[1].object.as_str(), "Put the package into the cabinet");
        assert!(groups[0].flags.is_empty());

        let groups = interpret_samples(&spec, &generative(&[TABLE5_WITHOUT]), &ctx()).unwrap();
        assert!(groups[0].flags.contains(&QualityFlag::Unterminated));

        let masked = LmResponse::Masked(MaskedResponse { candidates: vec![], lm_id: "r".into() });
        assert!(matches!(interpret(&spec, &masked, &ctx()), Err(InterpretError::Usage(_))));
    }

    #[test]
    fn free_text_is_one_description() {
        let spec = spec_for("psd-explain", &[(Variable::Task, "patrol a warehouse")]);
        let got = interpret(
            &spec,
            &generative(&["Walk around the warehouse to inspect it and make sure that it is free of people. Search the warehouse for dangerous items like weapons or hazardous materials."]),
            &ctx(),
        )
        .unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].relation, RelationKind::DescriptionOf);
        let empty = interpret_samples(&spec, &generative(&["  "]), &ctx()).unwrap();
        assert!(empty[0].assertions.is_empty());
    }

    proptest! {
        #[test]
        fn step_parser_is_total(text in "[A-Za-z .,!?]{0,80}") {
            let seq = parse_step_sequence(&text);
            for s in &seq.steps {
                prop_assert!(!s.text.is_empty());
                prop_assert!(!is_terminator(&s.text));
            }
        }

        #[test]
        fn noun_list_items_are_canonical(text in "[a-z ,]{0,60}") {
            for t in parse_noun_list(&text) {
                prop_assert_eq!(canonicalize(t.text()), t.text());
                prop_assert!(!DEFAULT_FILLERS.contains(&t.text().split(' ').next().unwrap()));
            }
        }

        #[test]
        fn masked_and_goal_render_round_trip(
            subj in "[a-z]{2,9}( [a-z]{2,9})?",
            obj in "[a-z]{2,9}",
            clause in "to [a-z]{2,9}( [a-z]{2,9}){0,3}",
        ) {
            let set = TemplateSet::builtin();
            for id in ["state-aka", "tax-type", "tax-part", "tax-has", "op-used-for"] {
                let t = set.get(id).unwrap();
                let spec = spec_for(id, &[(Variable::Object, &subj)]);
                let resp = MaskedResponse { candidates: vec![(obj.clone(), 0.5)], lm_id: "r".into() };
                let a = candidates_to_assertions(&resp, &spec, &ctx()).unwrap().remove(0);
                let rendered = t.render(&a).unwrap();
                let mask_text = spec.text.replacen("<mask>", &obj, 1);
                prop_assert_eq!(rendered, mask_text);
            }
            let t = set.get("goal-of").unwrap();
            let spec = spec_for("goal-of", &[(Variable::Task, &subj)]);
            let a = interpret(&spec, &generative(&[clause.as_str()]), &ctx()).unwrap().remove(0);
            let sentence = t.render(&a).unwrap();
            let reparsed = interpret(&spec, &generative(&[sentence.as_str()]), &ctx()).unwrap().remove(0);
            prop_assert_eq!(reparsed, a);
        }
    }
}
