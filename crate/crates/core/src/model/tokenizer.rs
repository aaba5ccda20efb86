//! Corpus-derived whitespace/punctuation tokenizer with reserved ids.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];
const PUNCT: [char; 10] = ['.', ',', '!', '?', ';', ':', '(', ')', '"', '\''];

/// Split text into surface tokens: whitespace separation with leading and
/// trailing punctuation peeled off as single-character tokens.
pub fn split_surface(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        let mut leading = Vec::new();
        while let Some(c) = rest.chars().next() {
            if PUNCT.contains(&c) {
                leading.push(c.to_string());
                rest = &rest[c.len_utf8()..];
            } else {
                break;
            }
        }
        let mut trailing = Vec::new();
        while let Some(c) = rest.chars().last() {
            if PUNCT.contains(&c) {
                trailing.push(c.to_string());
                rest = &rest[..rest.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.extend(leading);
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

/// Surface-form to id map built from a corpus; unknown forms map to `<unk>`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    lookup: BTreeMap<String, u32>,
}

impl Tokenizer {
    /// Build a vocabulary from corpus lines. Ids are assigned in sorted
    /// surface order after the four reserved tokens, so the same corpus
    /// always produces the same table.
    pub fn from_corpus<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        let mut forms = BTreeSet::new();
        for line in lines {
            for tok in split_surface(line) {
                forms.insert(tok);
            }
        }
        let mut vocab: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        vocab.extend(forms);
        Self::from_vocab(vocab).expect("reserved prefix is present by construction")
    }

    /// Rebuild from a stored id-ordered table.
    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < RESERVED.len()
            || vocab[..RESERVED.len()].iter().map(String::as_str).ne(RESERVED)
        {
            return Err(Error::Invalid("tokenizer table must start with the reserved ids".into()));
        }
        let mut lookup = BTreeMap::new();
        for (id, form) in vocab.iter().enumerate() {
            if lookup.insert(form.clone(), id as u32).is_some() {
                return Err(Error::Invalid(alloc::format!(
                    "duplicate surface form '{form}' in tokenizer table"
                )));
            }
        }
        Ok(Tokenizer { vocab, lookup })
    }

    /// Restore the lookup map after deserialization.
    pub fn rebuild_lookup(&mut self) {
        self.lookup =
            self.vocab.iter().enumerate().map(|(id, s)| (s.clone(), id as u32)).collect();
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    pub fn id_of(&self, form: &str) -> Option<u32> {
        self.lookup.get(form).copied()
    }

    /// Encode without sequence markers; unknown forms map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_surface(text)
            .into_iter()
            .map(|tok| self.lookup.get(&tok).copied().unwrap_or(UNK))
            .collect()
    }

    /// Encode with a leading `<bos>`, the form the model consumes.
    pub fn encode_prompt(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(1 + text.len() / 4);
        ids.push(BOS);
        ids.extend(self.encode(text));
        ids
    }

    /// Join token surfaces with single spaces, skipping control ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn roundtrip_in_vocabulary_text() {
        let tok = Tokenizer::from_corpus(["bade kuro limo", "vena sipo rato"]);
        let text = "kuro bade rato";
        assert_eq!(tok.decode(&tok.encode(text)), text);
    }

    #[test]
    fn unknown_forms_map_to_unk() {
        let tok = Tokenizer::from_corpus(["bade kuro"]);
        assert_eq!(tok.encode("zzz kuro"), vec![UNK, tok.id_of("kuro").unwrap()]);
    }

    #[test]
    fn punctuation_splits_off() {
        assert_eq!(split_surface("kuro, bade?"), vec!["kuro", ",", "bade", "?"]);
        assert_eq!(split_surface("(limo)"), vec!["(", "limo", ")"]);
    }

    #[test]
    fn vocab_ids_are_deterministic() {
        let a = Tokenizer::from_corpus(["b a c"]);
        let b = Tokenizer::from_corpus(["c b a", "a b"]);
        assert_eq!(a.vocab(), b.vocab());
    }
}
