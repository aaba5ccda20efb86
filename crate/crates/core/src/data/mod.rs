//! Edit-dataset schema and validation.
//!
//! An [`EditGroup`] is one multilingual edit descriptor: aligned per-language
//! questions, the new answer, subjects, held-out rephrasings, and the
//! locality/portability probes. The JSON wire schema mirrors these structs;
//! `paraphrases` (the locating corpus) and `probe` are optional extension
//! fields the synthetic generator fills in.

pub mod synth;

pub use synth::{gen_synthetic_world, FactWorld, WorldCfg};

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::tokenizer::split_surface;

/// A prompt with its reference answer.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptAnswer {
    pub prompt: String,
    pub answer: String,
}

/// Per-language slice of an edit descriptor.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LangEntry {
    pub subject: String,
    pub prompt: String,
    pub target_new: String,
    #[serde(default)]
    pub rephrase_prompts: Vec<String>,
    #[serde(default)]
    pub locality: PromptAnswer,
    #[serde(default)]
    pub portability: PromptAnswer,
    /// Locating corpus for this language (paraphrases of `prompt`).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paraphrases: Vec<String>,
    /// Instantiated preservation probe, e.g. the subject's attribute question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<String>,
}

/// One multilingual edit descriptor; all languages describe the same fact.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EditGroup {
    pub id: String,
    pub langs: BTreeMap<String, LangEntry>,
}

impl EditGroup {
    pub fn entry(&self, lang: &str) -> Result<&LangEntry> {
        self.langs
            .get(lang)
            .ok_or_else(|| Error::Invalid(alloc::format!("group {} lacks language {lang}", self.id)))
    }
}

/// True when `needle`'s surface tokens occur contiguously in `haystack`'s.
pub fn contains_token_subsequence(haystack: &str, needle: &str) -> bool {
    let h = split_surface(haystack);
    let n = split_surface(needle);
    if n.is_empty() || n.len() > h.len() {
        return false;
    }
    h.windows(n.len()).any(|w| w == n.as_slice())
}

/// Check the structural invariants of one group.
pub fn validate_group(group: &EditGroup) -> Result<()> {
    if group.langs.is_empty() {
        return Err(Error::Invalid(alloc::format!("group {} has no languages", group.id)));
    }
    for (lang, entry) in &group.langs {
        if !contains_token_subsequence(&entry.prompt, &entry.subject) {
            return Err(Error::Invalid(alloc::format!(
                "group {} language {lang}: subject '{}' not found in prompt '{}'",
                group.id,
                entry.subject,
                entry.prompt
            )));
        }
        if entry.target_new.is_empty() {
            return Err(Error::Invalid(alloc::format!(
                "group {} language {lang}: empty target_new",
                group.id
            )));
        }
    }
    Ok(())
}

pub fn validate_groups(groups: &[EditGroup]) -> Result<()> {
    for g in groups {
        validate_group(g)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn token_subsequence_matches_whole_tokens_only() {
        assert!(contains_token_subsequence("the bade kuro", "bade"));
        assert!(contains_token_subsequence("a b c", "b c"));
        assert!(!contains_token_subsequence("bades kuro", "bade"));
        assert!(!contains_token_subsequence("bade", "bade kuro"));
    }

    #[test]
    fn validation_flags_subject_missing_from_prompt() {
        let mut group = EditGroup { id: "g0".to_string(), ..Default::default() };
        group.langs.insert(
            "l1".to_string(),
            LangEntry {
                subject: "vena".to_string(),
                prompt: "bade kuro".to_string(),
                target_new: "limo".to_string(),
                ..Default::default()
            },
        );
        let err = validate_group(&group).unwrap_err();
        assert!(alloc::format!("{err}").contains("g0"));
    }
}
