//! Vocabulary shared by every stage of extraction: relations, problem-space
//! functions, strategies, assertions and their provenance.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};

use crate::term::{ObjectValue, Term};

pub type Timestamp = DateTime<Utc>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {kind} {value:?}")]
pub struct ParseEnumError {
    pub kind: &'static str,
    pub value: String,
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident, $label:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ParseEnumError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(ParseEnumError { kind: $label, value: s.into() }),
                }
            }
        }
    };
}

string_enum!(
    /// Relation carried by an assertion. Each template maps to exactly one.
    RelationKind, "relation" {
        AlsoKnownAs => "also-known-as",
        IsATypeOf => "is-a-type-of",
        PartOf => "part-of",
        CanDo => "can-do",
        UsedFor => "used-for",
        Causes => "causes",
        GoalOf => "goal-of",
        StepOf => "step-of",
        DescriptionOf => "description-of",
        Guidance => "guidance",
    }
);

string_enum!(
    /// Problem-space function a knowledge need targets.
    PscmFunction, "pscm function" {
        ProblemSpaceDescription => "problem-space-description",
        GoalDefinition => "goal-definition",
        StateLexicon => "state-lexicon",
        TaxonomicRelation => "taxonomic-relation",
        OperatorLexicon => "operator-lexicon",
        OperatorPrecondition => "operator-precondition",
        OperatorAction => "operator-action",
    }
);

string_enum!(
    /// How a prompt was constructed.
    StrategyKind, "strategy" {
        Template => "template",
        TemplateWithContext => "template-with-context",
        Analogical => "analogical",
        DialogueShaped => "dialogue-shaped",
    }
);

string_enum!(
    AssertionStatus, "status" {
        Potential => "potential",
        Verified => "verified",
        Rejected => "rejected",
    }
);

string_enum!(
    /// Kind of LM service: fill-in-the-blank or free completion.
    ModelClass, "model class" {
        Masked => "masked",
        Generative => "generative",
    }
);

string_enum!(
    /// Expected response shape; fixes which parser decodes the answer.
    SchemaKind, "schema" {
        MaskLexicon => "mask-lexicon",
        NounList => "noun-list",
        StepSequence => "step-sequence",
        CausalClause => "causal-clause",
        GoalClause => "goal-clause",
        FreeText => "free-text",
    }
);

string_enum!(
    /// Template placeholder. Written `?object` etc. in patterns.
    Variable, "variable" {
        Object => "object",
        Actor => "actor",
        Task => "task",
        Action => "action",
    }
);

impl RelationKind {
    /// Exclusive relations admit one object per subject (and index); the
    /// rest accumulate freely.
    pub fn is_exclusive(self) -> bool {
        matches!(self, RelationKind::StepOf | RelationKind::Causes)
    }
}

impl StrategyKind {
    pub fn requires_generative(self) -> bool {
        matches!(self, StrategyKind::Analogical | StrategyKind::DialogueShaped)
    }
}

impl Variable {
    /// Parse a placeholder with or without its leading `?`.
    pub fn parse_placeholder(s: &str) -> Result<Self, ParseEnumError> {
        s.strip_prefix('?').unwrap_or(s).parse()
    }
}

/// Strategy tag recorded in provenance. Human amendments are not an LM
/// strategy but still need a tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProvenanceStrategy {
    Lm(StrategyKind),
    HumanAmended,
}

impl ProvenanceStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            ProvenanceStrategy::Lm(s) => s.as_str(),
            ProvenanceStrategy::HumanAmended => "human-amended",
        }
    }

    pub fn lm_strategy(self) -> Option<StrategyKind> {
        match self {
            ProvenanceStrategy::Lm(s) => Some(s),
            ProvenanceStrategy::HumanAmended => None,
        }
    }
}

impl FromStr for ProvenanceStrategy {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "human-amended" {
            Ok(ProvenanceStrategy::HumanAmended)
        } else {
            s.parse().map(ProvenanceStrategy::Lm)
        }
    }
}

impl fmt::Display for ProvenanceStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                $name(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

string_id!(
    /// Identifier of a logged prompt, allocated by the store (`p000001`, ...).
    PromptId
);
string_id!(
    /// Identifier of an assertion. Derived from the prompt id, the sample
    /// index and the position within the sample, so it is reproducible.
    AssertionId
);

impl AssertionId {
    pub fn derived(prompt: &PromptId, sample: usize, index: usize) -> Self {
        AssertionId(alloc::format!("{prompt}.{sample}.{index}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub lm_id: String,
    pub prompt_id: PromptId,
    pub strategy: ProvenanceStrategy,
    pub sample_count: u32,
    pub extracted_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub id: AssertionId,
    pub subject: Term,
    pub relation: RelationKind,
    pub object: ObjectValue,
    /// 1-based position for `step-of` assertions.
    pub step_index: Option<u32>,
    pub provenance: Provenance,
    pub status: AssertionStatus,
    pub confidence: f64,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
}

/// Normalized (subject, relation, object, step) key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TripleKey {
    pub subject: String,
    pub relation: RelationKind,
    pub object: String,
    pub step_index: Option<u32>,
}

impl Assertion {
    pub fn key(&self) -> TripleKey {
        TripleKey {
            subject: self.subject.text().into(),
            relation: self.relation,
            object: self.object.normalized(),
            step_index: self.step_index,
        }
    }
}

impl fmt::Display for Assertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {}", self.subject, self.relation)?;
        if let Some(i) = self.step_index {
            write!(f, " #{i}")?;
        }
        write!(f, " | {}", self.object)
    }
}

/// Something the agent lacks and hopes an LM can supply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeNeed {
    pub task_name: String,
    pub domain_label: String,
    pub pscm_function: PscmFunction,
    pub bindings: BTreeMap<Variable, Term>,
    pub prior_dialogue: Vec<String>,
    pub required_as_of: Option<NaiveDate>,
    pub min_verified: u32,
}

impl KnowledgeNeed {
    pub fn new(task_name: impl Into<String>, pscm_function: PscmFunction) -> Self {
        KnowledgeNeed {
            task_name: task_name.into(),
            domain_label: String::new(),
            pscm_function,
            bindings: BTreeMap::new(),
            prior_dialogue: Vec::new(),
            required_as_of: None,
            min_verified: 1,
        }
    }

    pub fn with_domain(mut self, label: impl Into<String>) -> Self {
        self.domain_label = label.into();
        self
    }

    pub fn bind(mut self, var: Variable, term: Term) -> Self {
        self.bindings.insert(var, term);
        self
    }

    pub fn with_prior_dialogue(mut self, lines: Vec<String>) -> Self {
        self.prior_dialogue = lines;
        self
    }

    pub fn with_required_as_of(mut self, date: NaiveDate) -> Self {
        self.required_as_of = Some(date);
        self
    }
}
