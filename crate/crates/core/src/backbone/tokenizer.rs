//! Whitespace/punctuation tokenizer with atomic `⟨name⟩` concept pieces.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
/// Marks the start of the assistant turn.
pub const ASSISTANT: &str = "<assistant>";

const SPECIALS: [&str; 4] = [BOS, EOS, UNK, ASSISTANT];

/// One tokenizer piece: a base-vocabulary word or a concept reference that
/// the backbone resolves against its extension table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Token(TokenId),
    Concept(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

/// True for `⟨[a-z0-9_]+⟩`.
pub fn is_concept_name(s: &str) -> bool {
    s.strip_prefix('⟨')
        .and_then(|r| r.strip_suffix('⟩'))
        .is_some_and(|inner| {
            !inner.is_empty()
                && inner
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        })
}

/// Splits text into surface pieces: alphanumeric runs, single punctuation
/// characters, and whole `⟨name⟩` references.
pub fn split(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut word = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '⟨' {
            if let Some(end) = chars[i..].iter().position(|&x| x == '⟩') {
                let candidate: String = chars[i..=i + end].iter().collect();
                if is_concept_name(&candidate) {
                    flush(&mut word, &mut out);
                    out.push(candidate);
                    i += end + 1;
                    continue;
                }
            }
        }
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        i += 1;
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

/// Inverse of [`split`] up to whitespace normalization.
pub fn join(pieces: &[&str]) -> String {
    const NO_SPACE_BEFORE: &[&str] = &[",", ".", "?", "!", "’", "'", ":", ";", ")", "%"];
    const NO_SPACE_AFTER: &[&str] = &["’", "'", "("];
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for &p in pieces {
        if let Some(prev) = prev {
            if !NO_SPACE_BEFORE.contains(&p) && !NO_SPACE_AFTER.contains(&prev) {
                out.push(' ');
            }
        }
        out.push_str(p);
        prev = Some(p);
    }
    out
}

impl Tokenizer {
    /// Deterministic vocabulary: special tokens, then the sorted set of
    /// non-concept pieces found in `corpus`.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in corpus {
            for piece in split(text) {
                if !is_concept_name(&piece) {
                    words.insert(piece);
                }
            }
        }
        let vocab = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_vocab(vocab)
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn bos(&self) -> TokenId {
        0
    }

    pub fn eos(&self) -> TokenId {
        1
    }

    pub fn unk(&self) -> TokenId {
        2
    }

    pub fn assistant(&self) -> TokenId {
        3
    }

    /// Unknown words map to `<unk>`; concept references are left unresolved.
    pub fn encode(&self, text: &str) -> Vec<Piece> {
        split(text)
            .into_iter()
            .map(|p| {
                if is_concept_name(&p) {
                    Piece::Concept(p)
                } else {
                    Piece::Token(self.id(&p).unwrap_or(self.unk()))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_keeps_concepts_whole() {
        assert_eq!(
            split("Yes, ⟨sks⟩’s in this photo."),
            vec!["Yes", ",", "⟨sks⟩", "’", "s", "in", "this", "photo", "."]
        );
        assert_eq!(split(" is "), vec!["is"]);
        // not a valid concept name: falls back to punctuation
        assert_eq!(split("⟨Bad⟩"), vec!["⟨", "Bad", "⟩"]);
    }

    #[test]
    fn join_restores_template_text() {
        for text in [
            "Yes, ⟨sks⟩’s in this photo.",
            "No, I can’t point out ⟨sks⟩ because ⟨sks⟩ is not in the photo.",
            "What is ⟨sks⟩'s hair color?",
            "Hey AI, can you tell me if you see ⟨sks⟩ in this photo?",
        ] {
            let pieces = split(text);
            let refs: Vec<&str> = pieces.iter().map(String::as_str).collect();
            assert_eq!(join(&refs), text);
        }
    }

    #[test]
    fn vocabulary_is_deterministic_and_excludes_concepts() {
        let a = Tokenizer::from_corpus(["Is ⟨sks⟩ here?", "Yes, it is."]);
        let b = Tokenizer::from_corpus(["Yes, it is.", "Is ⟨sks⟩ here?"]);
        assert_eq!(a, b);
        assert_eq!(&a.vocab()[..4], &SPECIALS.map(String::from));
        assert!(a.id("⟨sks⟩").is_none());
        assert_eq!(
            a.encode("Is ⟨max⟩ zebra"),
            vec![
                Piece::Token(a.id("Is").unwrap()),
                Piece::Concept("⟨max⟩".into()),
                Piece::Token(a.unk()),
            ]
        );
    }

    #[test]
    fn concept_name_pattern() {
        assert!(is_concept_name("⟨lucas⟩"));
        assert!(is_concept_name("⟨a_1⟩"));
        assert!(!is_concept_name("⟨⟩"));
        assert!(!is_concept_name("⟨Lucas⟩"));
        assert!(!is_concept_name("lucas"));
    }
}
