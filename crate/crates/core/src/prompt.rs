//! Prompt construction: problem-space templates, context prefixes,
//! analogical case prompts and dialogue-shaped prompts.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::model::{
    Assertion, KnowledgeNeed, ModelClass, PromptId, PscmFunction, RelationKind, SchemaKind,
    StrategyKind, Variable,
};
use crate::term::Term;
use crate::usage::ParameterBounds;

pub const MASK: &str = "<mask>";
const ELLIPSIS: &str = "...";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("no binding for ?{0}")]
    MissingBinding(Variable),
    #[error("unknown template variable ?{0}")]
    UnknownVariable(String),
    #[error("template {id}: {class} pattern must contain {expected} mask marker(s), found {found}")]
    MaskCount {
        id: String,
        class: ModelClass,
        expected: usize,
        found: usize,
    },
    #[error("template {id}: schema {schema} cannot decode a {class} response")]
    SchemaMismatch {
        id: String,
        schema: SchemaKind,
        class: ModelClass,
    },
    #[error("template id {0} already registered")]
    DuplicateId(String),
    #[error("template {0} has an empty pattern")]
    EmptyPattern(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StrategyError {
    #[error("analogical prompt needs at least one case")]
    NoCases,
    #[error("analogical case has an empty stimulus")]
    EmptyCase,
    #[error("prompt query is empty")]
    EmptyQuery,
}

/// Sampling parameters sent with a request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub n_samples: u32,
    pub top_k: u32,
}

impl SamplingParams {
    pub fn generative_default() -> Self {
        SamplingParams {
            max_tokens: 64,
            temperature: 0.7,
            n_samples: 1,
            top_k: 10,
        }
    }

    pub fn masked_default() -> Self {
        SamplingParams {
            max_tokens: 1,
            temperature: 0.0,
            n_samples: 1,
            top_k: 10,
        }
    }

    pub fn for_class(class: ModelClass) -> Self {
        match class {
            ModelClass::Masked => Self::masked_default(),
            ModelClass::Generative => Self::generative_default(),
        }
    }

    pub fn with_samples(mut self, n: u32) -> Self {
        self.n_samples = n.max(1);
        self
    }

    /// Clamp into the LM's accepted ranges. `n_samples` stays at least 1.
    pub fn clamp_to(mut self, bounds: &ParameterBounds) -> Self {
        self.max_tokens = self.max_tokens.clamp(bounds.max_tokens.0, bounds.max_tokens.1);
        self.temperature = self.temperature.clamp(bounds.temperature.0, bounds.temperature.1);
        self.top_k = self.top_k.clamp(bounds.top_k.0, bounds.top_k.1);
        self.n_samples = self.n_samples.max(1);
        self
    }
}

/// A fully rendered prompt plus what is needed to decode its answer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub prompt_id: PromptId,
    pub text: String,
    pub target_class: ModelClass,
    pub params: SamplingParams,
    pub strategy: StrategyKind,
    pub schema: SchemaKind,
    /// Relation produced by interpretation.
    pub relation: RelationKind,
    /// Term the produced assertions are about.
    pub subject: Option<Term>,
    /// Subject and object swap roles (`?object has a <mask>`).
    pub inverse: bool,
    pub template_id: Option<String>,
    pub source_need: Option<KnowledgeNeed>,
}

impl PromptSpec {
    pub fn with_params(mut self, params: SamplingParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_subject(mut self, subject: Term) -> Self {
        self.subject = Some(subject);
        self
    }

    pub fn with_interpretation(mut self, schema: SchemaKind, relation: RelationKind) -> Self {
        self.schema = schema;
        self.relation = relation;
        self
    }

    pub fn with_need(mut self, need: KnowledgeNeed) -> Self {
        self.source_need = Some(need);
        self
    }

    pub fn pscm_function(&self) -> Option<PscmFunction> {
        self.source_need.as_ref().map(|n| n.pscm_function)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Var(Variable),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    id: String,
    pscm_function: PscmFunction,
    pattern: String,
    target_class: ModelClass,
    schema: SchemaKind,
    relation: RelationKind,
    inverse: bool,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(
        id: &str,
        pscm_function: PscmFunction,
        pattern: &str,
        target_class: ModelClass,
        schema: SchemaKind,
    ) -> Result<Self, TemplateError> {
        if pattern.trim().is_empty() {
            return Err(TemplateError::EmptyPattern(id.into()));
        }
        let masks = pattern.matches(MASK).count();
        let expected = match target_class {
            ModelClass::Masked => 1,
            ModelClass::Generative => 0,
        };
        if masks != expected {
            return Err(TemplateError::MaskCount {
                id: id.into(),
                class: target_class,
                expected,
                found: masks,
            });
        }
        if (target_class == ModelClass::Masked) != (schema == SchemaKind::MaskLexicon) {
            return Err(TemplateError::SchemaMismatch {
                id: id.into(),
                schema,
                class: target_class,
            });
        }
        let segments = parse_segments(pattern)?;
        let lowered = pattern.to_lowercase();
        Ok(PromptTemplate {
            id: id.into(),
            pscm_function,
            pattern: pattern.into(),
            target_class,
            schema,
            relation: default_relation(pscm_function, schema, &lowered),
            inverse: lowered.contains(" has a "),
            segments,
        })
    }

    /// Override the relation inferred from function, schema and wording.
    pub fn with_relation(mut self, relation: RelationKind) -> Self {
        self.relation = relation;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pscm_function(&self) -> PscmFunction {
        self.pscm_function
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn target_class(&self) -> ModelClass {
        self.target_class
    }

    pub fn schema(&self) -> SchemaKind {
        self.schema
    }

    pub fn relation(&self) -> RelationKind {
        self.relation
    }

    pub fn is_inverse(&self) -> bool {
        self.inverse
    }

    /// Variables in order of first appearance.
    pub fn variables(&self) -> Vec<Variable> {
        let mut vars = Vec::new();
        for s in &self.segments {
            if let Segment::Var(v) = s {
                if !vars.contains(v) {
                    vars.push(*v);
                }
            }
        }
        vars
    }

    /// The first variable is what produced assertions are about.
    pub fn subject_variable(&self) -> Option<Variable> {
        self.variables().first().copied()
    }

    pub fn bindable(&self, bindings: &BTreeMap<Variable, Term>) -> bool {
        self.variables().iter().all(|v| bindings.contains_key(v))
    }

    /// Substitute bindings, leaving the mask marker in place.
    pub fn render_text(&self, bindings: &BTreeMap<Variable, Term>) -> Result<String, TemplateError> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Var(v) => {
                    let term = bindings.get(v).ok_or(TemplateError::MissingBinding(*v))?;
                    agree_article(&mut out, term.surface());
                    out.push_str(term.surface());
                }
            }
        }
        if self.target_class == ModelClass::Generative {
            if let Some(stripped) = out.trim_end().strip_suffix(ELLIPSIS) {
                out = stripped.trim_end().into();
            }
        }
        Ok(out)
    }

    /// Render an assertion back into the surface sentence this template
    /// would have elicited. Used to check interpretation round-trips.
    pub fn render(&self, a: &Assertion) -> Result<String, TemplateError> {
        let (subject, object) = if self.inverse {
            (a.object.surface(), a.subject.surface())
        } else {
            (a.subject.surface(), a.object.surface())
        };
        let var = self
            .subject_variable()
            .ok_or(TemplateError::EmptyPattern(self.id.clone()))?;
        let mut bindings = BTreeMap::new();
        bindings.insert(
            var,
            Term::new(subject).map_err(|_| TemplateError::MissingBinding(var))?,
        );
        let text = self.render_text(&bindings)?;
        Ok(match self.target_class {
            ModelClass::Masked => text.replacen(MASK, object, 1),
            ModelClass::Generative => format!("{text} {object}."),
        })
    }
}

fn parse_segments(pattern: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut chars = pattern.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let starts_var = c == '?'
            && chars
                .peek()
                .is_some_and(|(_, n)| n.is_ascii_alphabetic());
        if !starts_var {
            text.push(c);
            continue;
        }
        let mut end = i + 1;
        while let Some(&(j, n)) = chars.peek() {
            if n.is_ascii_alphanumeric() || n == '_' {
                end = j + n.len_utf8();
                chars.next();
            } else {
                break;
            }
        }
        let name = &pattern[i + 1..end];
        let var = name
            .parse::<Variable>()
            .map_err(|_| TemplateError::UnknownVariable(name.into()))?;
        if !text.is_empty() {
            segments.push(Segment::Text(core::mem::take(&mut text)));
        }
        segments.push(Segment::Var(var));
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    Ok(segments)
}

/// Make an indefinite article written just before a variable agree with the
/// bound word: "an ?object" + "package" gives "a package".
fn agree_article(out: &mut String, next: &str) {
    let Some(first) = next.chars().next() else {
        return;
    };
    let vowel = matches!(first.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u');
    let body = out.trim_end_matches(' ');
    let gap = out.len() - body.len();
    if gap == 0 {
        return;
    }
    let word_start = body.rfind(' ').map_or(0, |p| p + 1);
    let word = &body[word_start..];
    let replacement = match (word, vowel) {
        ("a", true) => "an",
        ("an", false) => "a",
        ("A", true) => "An",
        ("An", false) => "A",
        _ => return,
    };
    let spaces = out[body.len()..].to_string();
    out.truncate(word_start);
    out.push_str(replacement);
    out.push_str(&spaces);
}

fn default_relation(function: PscmFunction, schema: SchemaKind, lowered: &str) -> RelationKind {
    match schema {
        SchemaKind::GoalClause => return RelationKind::GoalOf,
        SchemaKind::StepSequence => return RelationKind::StepOf,
        SchemaKind::CausalClause => return RelationKind::Causes,
        SchemaKind::FreeText => return RelationKind::DescriptionOf,
        SchemaKind::MaskLexicon | SchemaKind::NounList => {}
    }
    match function {
        PscmFunction::StateLexicon => RelationKind::AlsoKnownAs,
        PscmFunction::TaxonomicRelation => {
            if lowered.contains("part of") || lowered.contains(" has a ") {
                RelationKind::PartOf
            } else {
                RelationKind::IsATypeOf
            }
        }
        PscmFunction::OperatorLexicon => RelationKind::CanDo,
        PscmFunction::OperatorPrecondition => RelationKind::UsedFor,
        PscmFunction::OperatorAction => RelationKind::Causes,
        PscmFunction::GoalDefinition => RelationKind::GoalOf,
        PscmFunction::ProblemSpaceDescription => RelationKind::DescriptionOf,
    }
}

/// Separator-terminated context prefix built from a bare label.
pub fn context_prefix(label: &str) -> String {
    let label = label.trim();
    if label.is_empty() {
        String::new()
    } else if label.ends_with('.') {
        format!("{label} ")
    } else {
        format!("{label}. ")
    }
}

pub fn instantiate_template(
    prompt_id: PromptId,
    template: &PromptTemplate,
    bindings: &BTreeMap<Variable, Term>,
    context_prefix: Option<&str>,
) -> Result<PromptSpec, TemplateError> {
    let body = template.render_text(bindings)?;
    let text = match context_prefix {
        Some(p) => format!("{p}{body}"),
        None => body,
    };
    let subject = template
        .subject_variable()
        .and_then(|v| bindings.get(&v).cloned());
    Ok(PromptSpec {
        prompt_id,
        text,
        target_class: template.target_class,
        params: SamplingParams::for_class(template.target_class),
        strategy: if context_prefix.is_some_and(|p| !p.is_empty()) {
            StrategyKind::TemplateWithContext
        } else {
            StrategyKind::Template
        },
        schema: template.schema,
        relation: template.relation,
        subject,
        inverse: template.inverse,
        template_id: Some(template.id.clone()),
        source_need: None,
    })
}

/// An example stimulus/response pair embedded in a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalogicalCase {
    pub stimulus: String,
    pub response: String,
}

impl AnalogicalCase {
    pub fn new(stimulus: impl Into<String>, response: impl Into<String>) -> Self {
        AnalogicalCase {
            stimulus: stimulus.into(),
            response: response.into(),
        }
    }
}

fn with_marker(marker: &str, text: &str) -> String {
    let text = text.trim();
    if text.starts_with(marker) {
        text.into()
    } else {
        format!("{marker}{text}")
    }
}

/// Embed worked cases ahead of a new stimulus. The prompt ends exactly where
/// the LM should continue.
pub fn build_analogical_prompt(
    prompt_id: PromptId,
    cases: &[AnalogicalCase],
    stimulus: &str,
    qa_style: bool,
) -> Result<PromptSpec, StrategyError> {
    if cases.is_empty() {
        return Err(StrategyError::NoCases);
    }
    if stimulus.trim().is_empty() {
        return Err(StrategyError::EmptyQuery);
    }
    let mut lines: Vec<String> = Vec::with_capacity(cases.len() * 2 + 1);
    for case in cases {
        if case.stimulus.trim().is_empty() {
            return Err(StrategyError::EmptyCase);
        }
        let response = case.response.trim();
        if qa_style {
            lines.push(with_marker("Q: ", &case.stimulus));
            lines.push(with_marker("A: ", response));
        } else if response.is_empty() {
            lines.push(case.stimulus.trim().into());
        } else {
            lines.push(format!("{} {}", case.stimulus.trim(), response));
        }
    }
    let text = if qa_style {
        lines.push(with_marker("Q: ", stimulus));
        let mut t = lines.join("\n");
        t.push('\n');
        t
    } else {
        lines.push(stimulus.trim_start().into());
        lines.join("\n")
    };
    Ok(generative_spec(prompt_id, text, StrategyKind::Analogical))
}

/// Prior agent dialogue followed by the query, so the LM answers in the
/// register the agent already understands.
pub fn build_dialogue_shaped_prompt(
    prompt_id: PromptId,
    prior_dialogue: &[String],
    query: &str,
) -> Result<PromptSpec, StrategyError> {
    let query = query.trim();
    if query.is_empty() {
        return Err(StrategyError::EmptyQuery);
    }
    let mut parts: Vec<&str> = prior_dialogue
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect();
    parts.push(query);
    Ok(generative_spec(prompt_id, parts.join(" "), StrategyKind::DialogueShaped)
        .with_interpretation(SchemaKind::StepSequence, RelationKind::StepOf))
}

/// "Move the package into the cabinet. What is the next goal or subtask of move?"
pub fn subtask_query(task: &str) -> String {
    let task = task.trim().trim_end_matches('.');
    let mut chars = task.chars();
    let sentence = match chars.next() {
        Some(c) => format!("{}{}", c.to_uppercase(), chars.as_str()),
        None => String::new(),
    };
    let verb = task.split_whitespace().next().unwrap_or("").to_lowercase();
    format!("{sentence}. What is the next goal or subtask of {verb}?")
}

fn generative_spec(prompt_id: PromptId, text: String, strategy: StrategyKind) -> PromptSpec {
    PromptSpec {
        prompt_id,
        text,
        target_class: ModelClass::Generative,
        params: SamplingParams::generative_default(),
        strategy,
        schema: SchemaKind::FreeText,
        relation: RelationKind::DescriptionOf,
        subject: None,
        inverse: false,
        template_id: None,
        source_need: None,
    }
}

/// Built-in problem-space templates, one or more per function.
const BUILTINS: &[(&str, PscmFunction, &str, ModelClass, SchemaKind)] = &[
    ("psd-explain", PscmFunction::ProblemSpaceDescription, "Explain how to ?task.", ModelClass::Generative, SchemaKind::FreeText),
    ("psd-how", PscmFunction::ProblemSpaceDescription, "How do you ?task?", ModelClass::Generative, SchemaKind::FreeText),
    ("goal-of", PscmFunction::GoalDefinition, "The goal of ?task is...", ModelClass::Generative, SchemaKind::GoalClause),
    ("goal-what", PscmFunction::GoalDefinition, "What is the goal of ?task?", ModelClass::Generative, SchemaKind::GoalClause),
    ("state-aka", PscmFunction::StateLexicon, "?object is also known as a <mask>.", ModelClass::Masked, SchemaKind::MaskLexicon),
    ("tax-type", PscmFunction::TaxonomicRelation, "?object is a type of <mask>.", ModelClass::Masked, SchemaKind::MaskLexicon),
    ("tax-part", PscmFunction::TaxonomicRelation, "?object is part of a <mask>.", ModelClass::Masked, SchemaKind::MaskLexicon),
    ("tax-has", PscmFunction::TaxonomicRelation, "?object has a <mask>.", ModelClass::Masked, SchemaKind::MaskLexicon),
    ("op-can", PscmFunction::OperatorLexicon, "?actor can <mask> an ?object.", ModelClass::Masked, SchemaKind::MaskLexicon),
    ("op-used-for", PscmFunction::OperatorPrecondition, "?object is used for <mask>.", ModelClass::Masked, SchemaKind::MaskLexicon),
    ("op-causes", PscmFunction::OperatorAction, "?action causes...", ModelClass::Generative, SchemaKind::CausalClause),
];

/// Built-in templates plus any registered by the caller, in registration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl TemplateSet {
    pub fn empty() -> Self {
        TemplateSet {
            templates: Vec::new(),
        }
    }

    pub fn builtin() -> Self {
        let templates = BUILTINS
            .iter()
            .map(|(id, f, pattern, class, schema)| {
                PromptTemplate::new(id, *f, pattern, *class, *schema)
                    .expect("built-in templates are well formed")
            })
            .collect();
        TemplateSet { templates }
    }

    pub fn register(&mut self, template: PromptTemplate) -> Result<(), TemplateError> {
        if self.get(template.id()).is_some() {
            return Err(TemplateError::DuplicateId(template.id.clone()));
        }
        self.templates.push(template);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn for_function(&self, f: PscmFunction) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter().filter(move |t| t.pscm_function == f)
    }

    /// `templates_for`: every template serving `f`.
    pub fn templates_for(&self, f: PscmFunction) -> Vec<&PromptTemplate> {
        self.for_function(f).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn pid() -> PromptId {
        PromptId::new("p000001")
    }

    fn bind(pairs: &[(Variable, &str)]) -> BTreeMap<Variable, Term> {
        pairs
            .iter()
            .map(|(v, s)| (*v, Term::new(s).unwrap()))
            .collect()
    }

    #[test]
    fn instantiate_examples() {
        let t = PromptTemplate::new(
            "t",
            PscmFunction::StateLexicon,
            "?object is also known as a <mask>.",
            ModelClass::Masked,
            SchemaKind::MaskLexicon,
        )
        .unwrap();
        let spec = instantiate_template(pid(), &t, &bind(&[(Variable::Object, "A shelf")]), None).unwrap();
        assert_eq!(spec.text, "A shelf is also known as a <mask>.");
        assert_eq!(spec.strategy, StrategyKind::Template);
        assert_eq!(spec.subject.unwrap().text(), "shelf");

        let t = TemplateSet::builtin().get("op-used-for").unwrap().clone();
        let spec = instantiate_template(
            pid(),
            &t,
            &bind(&[(Variable::Object, "A bay")]),
            Some("warehouse robot. "),
        )
        .unwrap();
        assert_eq!(spec.text, "warehouse robot. A bay is used for <mask>.");
        assert_eq!(spec.strategy, StrategyKind::TemplateWithContext);

        let t = TemplateSet::builtin().get("psd-explain").unwrap().clone();
        let spec =
            instantiate_template(pid(), &t, &bind(&[(Variable::Task, "patrol a warehouse")]), None).unwrap();
        assert_eq!(spec.text, "Explain how to patrol a warehouse.");
    }

    #[test]
    fn ellipsis_and_article_agreement() {
        let set = TemplateSet::builtin();
        let b = bind(&[(Variable::Actor, "A robot"), (Variable::Object, "package")]);
        let spec = instantiate_template(pid(), set.get("op-can").unwrap(), &b, None).unwrap();
        assert_eq!(spec.text, "A robot can <mask> a package.");
        assert_eq!(spec.subject.unwrap().text(), "robot");
        let b = bind(&[(Variable::Actor, "A robot"), (Variable::Object, "object")]);
        let spec = instantiate_template(pid(), set.get("op-can").unwrap(), &b, None).unwrap();
        assert_eq!(spec.text, "A robot can <mask> an object.");

        let b = bind(&[(Variable::Action, "Pushing a box")]);
        let spec = instantiate_template(pid(), set.get("op-causes").unwrap(), &b, None).unwrap();
        assert_eq!(spec.text, "Pushing a box causes");
        let b = bind(&[(Variable::Task, "patrolling a warehouse")]);
        let spec = instantiate_template(pid(), set.get("goal-of").unwrap(), &b, None).unwrap();
        assert_eq!(spec.text, "The goal of patrolling a warehouse is");
    }

    #[test]
    fn template_errors() {
        let set = TemplateSet::builtin();
        let err = instantiate_template(pid(), set.get("op-can").unwrap(), &bind(&[(Variable::Actor, "robot")]), None);
        assert_eq!(err, Err(TemplateError::MissingBinding(Variable::Object)));
        assert_eq!(
            PromptTemplate::new("x", PscmFunction::StateLexicon, "?thing is a <mask>", ModelClass::Masked, SchemaKind::MaskLexicon),
            Err(TemplateError::UnknownVariable("thing".into()))
        );
        assert!(matches!(
            PromptTemplate::new("x", PscmFunction::StateLexicon, "?object <mask> <mask>", ModelClass::Masked, SchemaKind::MaskLexicon),
            Err(TemplateError::MaskCount { found: 2, .. })
        ));
        assert!(matches!(
            PromptTemplate::new("x", PscmFunction::OperatorAction, "?action causes <mask>", ModelClass::Generative, SchemaKind::CausalClause),
            Err(TemplateError::MaskCount { .. })
        ));
        assert!(matches!(
            PromptTemplate::new("x", PscmFunction::OperatorAction, "?action causes...", ModelClass::Generative, SchemaKind::MaskLexicon),
            Err(TemplateError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn templates_for_every_function() {
        let set = TemplateSet::builtin();
        for f in PscmFunction::ALL {
            assert!(!set.templates_for(*f).is_empty(), "{f}");
        }
        let has = |f, p: &str| set.templates_for(f).iter().any(|t| t.pattern().starts_with(p));
        assert!(has(PscmFunction::StateLexicon, "?object is also known as a <mask>"));
        assert!(has(PscmFunction::OperatorLexicon, "?actor can <mask> an ?object"));
        assert!(has(PscmFunction::OperatorAction, "?action causes..."));
        assert_eq!(set.get("tax-has").unwrap().relation(), RelationKind::PartOf);
        assert!(set.get("tax-has").unwrap().is_inverse());
        assert_eq!(set.get("tax-type").unwrap().relation(), RelationKind::IsATypeOf);
        assert_eq!(set.get("op-can").unwrap().relation(), RelationKind::CanDo);

        let mut set = set;
        let dup = set.get("state-aka").unwrap().clone();
        assert!(matches!(set.register(dup), Err(TemplateError::DuplicateId(_))));
    }

    #[test]
    fn analogical_plain() {
        let cases = [
            AnalogicalCase::new("The household robot charges in the garage.", ""),
            AnalogicalCase::new("The office robot charges in the maintenance closet.", ""),
        ];
        let spec = build_analogical_prompt(pid(), &cases, "The warehouse robot charges in the", false).unwrap();
        let lines: Vec<_> = spec.text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "The warehouse robot charges in the");
        assert!(spec.text.ends_with("charges in the"));
        assert_eq!(spec.strategy, StrategyKind::Analogical);

        let one = build_analogical_prompt(pid(), &[AnalogicalCase::new("The cat sat on the", "mat.")], "The dog sat on the", false).unwrap();
        assert_eq!(one.text, "The cat sat on the mat.\nThe dog sat on the");
        assert_eq!(build_analogical_prompt(pid(), &[], "x", false), Err(StrategyError::NoCases));
    }

    #[test]
    fn analogical_qa() {
        let cases = [AnalogicalCase::new(
            "Q: Where should a robot find a package in an office?",
            "A: the mail room",
        )];
        let spec = build_analogical_prompt(
            pid(),
            &cases,
            "Where should a robot find a package in a warehouse?",
            true,
        )
        .unwrap();
        assert_eq!(
            spec.text,
            "Q: Where should a robot find a package in an office?\nA: the mail room\nQ: Where should a robot find a package in a warehouse?\n"
        );
    }

    #[test]
    fn dialogue_shaped() {
        let prior: Vec<String> = vec![
            "Move the box onto the table.".into(),
            "What is the next goal or subtask of move?".into(),
            "Pick up the box.".into(),
            "Put the box onto the table.".into(),
            "You are done.".into(),
        ];
        let query = subtask_query("move the package into the cabinet");
        assert_eq!(query, "Move the package into the cabinet. What is the next goal or subtask of move?");
        let spec = build_dialogue_shaped_prompt(pid(), &prior, &query).unwrap();
        assert_eq!(
            spec.text,
            "Move the box onto the table. What is the next goal or subtask of move? Pick up the box. Put the box onto the table. You are done. Move the package into the cabinet. What is the next goal or subtask of move?"
        );
        assert_eq!(spec.schema, SchemaKind::StepSequence);
        let bare = build_dialogue_shaped_prompt(pid(), &[], &query).unwrap();
        assert_eq!(bare.text, query);
        assert_eq!(build_dialogue_shaped_prompt(pid(), &prior, "  "), Err(StrategyError::EmptyQuery));
    }

    #[test]
    fn context_prefix_separator() {
        assert_eq!(context_prefix("warehouse robot"), "warehouse robot. ");
        assert_eq!(context_prefix("warehouse robot."), "warehouse robot. ");
        assert_eq!(context_prefix(" "), "");
    }

    #[test]
    fn params_clamp() {
        let bounds = ParameterBounds { max_tokens: (1, 32), temperature: (0.0, 0.5), top_k: (1, 5) };
        let p = SamplingParams::generative_default().with_samples(0).clamp_to(&bounds);
        assert_eq!(p.max_tokens, 32);
        assert_eq!(p.temperature, 0.5);
        assert_eq!(p.top_k, 5);
        assert_eq!(p.n_samples, 1);
    }

    proptest! {
        #[test]
        fn instantiation_is_deterministic_and_keeps_mask_count(
            idx in 0usize..BUILTINS.len(),
            word in "[a-z]{1,10}( [a-z]{1,8}){0,2}",
            prefix in proptest::option::of("[a-z]{1,8}( [a-z]{1,8})?"),
        ) {
            let set = TemplateSet::builtin();
            let t = set.iter().nth(idx).unwrap();
            let b: BTreeMap<_, _> = Variable::ALL.iter().map(|v| (*v, Term::new(&word).unwrap())).collect();
            let prefix = prefix.map(|p| context_prefix(&p));
            let a = instantiate_template(pid(), t, &b, prefix.as_deref()).unwrap();
            let again = instantiate_template(pid(), t, &b, prefix.as_deref()).unwrap();
            prop_assert_eq!(&a, &again);
            let expected = if t.target_class() == ModelClass::Masked { 1 } else { 0 };
            prop_assert_eq!(a.text.matches(MASK).count(), expected);
            if let Some(p) = prefix {
                prop_assert!(a.text.starts_with(&p));
            }
        }
    }
}
