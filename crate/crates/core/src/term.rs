//! Canonical terms and free phrases.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, trim, collapse internal whitespace and strip leading articles.
///
/// A lone article is left in place so the result is never emptied by article
/// stripping alone. The function is idempotent.
pub fn canonicalize(surface: &str) -> String {
    let lowered = surface.to_lowercase();
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    while words.len() > 1 && ARTICLES.contains(&words[0]) {
        words.remove(0);
    }
    words.join(" ")
}

/// Canonical form for phrase objects: whitespace collapsed and terminal
/// sentence punctuation removed, case preserved.
pub fn tidy_phrase(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(['.', '!', '?', ';', ','])
        .trim_end()
        .into()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("term is empty after canonicalization: {0:?}")]
pub struct EmptyTerm(pub String);

/// A lexicon entry. `text` is the canonical key, `surface` what the LM or the
/// agent actually wrote.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Term {
    text: String,
    surface: String,
}

impl Term {
    pub fn new(surface: &str) -> Result<Self, EmptyTerm> {
        let text = canonicalize(surface);
        if text.is_empty() {
            return Err(EmptyTerm(surface.into()));
        }
        Ok(Term {
            text,
            surface: surface.trim().into(),
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Object slot of an assertion: either a lexicon term or a verbatim clause.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ObjectValue {
    Term(Term),
    Phrase(String),
}

impl ObjectValue {
    /// Phrase object with terminal punctuation removed.
    pub fn phrase(text: &str) -> Self {
        ObjectValue::Phrase(tidy_phrase(text))
    }

    pub fn as_str(&self) -> &str {
        match self {
            ObjectValue::Term(t) => t.text(),
            ObjectValue::Phrase(p) => p,
        }
    }

    /// Text used when rendering the object back into a prompt.
    pub fn surface(&self) -> &str {
        match self {
            ObjectValue::Term(t) => t.surface(),
            ObjectValue::Phrase(p) => p,
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            ObjectValue::Term(_) => "term",
            ObjectValue::Phrase(_) => "phrase",
        }
    }

    /// Key used for duplicate detection and sample agreement.
    pub fn normalized(&self) -> String {
        match self {
            ObjectValue::Term(t) => t.text().into(),
            ObjectValue::Phrase(p) => canonicalize(&tidy_phrase(p)),
        }
    }

    /// Sub-clauses of a phrase joined by "and". Empty unless the split
    /// yields at least two non-empty clauses.
    pub fn sub_effects(&self) -> Vec<&str> {
        match self {
            ObjectValue::Term(_) => Vec::new(),
            ObjectValue::Phrase(p) => split_clauses(p),
        }
    }
}

pub(crate) fn split_clauses(text: &str) -> Vec<&str> {
    let parts: Vec<&str> = text
        .split(" and ")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if parts.len() >= 2 {
        parts
    } else {
        Vec::new()
    }
}

impl fmt::Display for ObjectValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
