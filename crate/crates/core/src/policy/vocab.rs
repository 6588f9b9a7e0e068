//! Closed vocabulary for the toy policy: template words, attribute words,
//! digits, brackets, structural tags, and begin/end markers.

use std::collections::HashMap;
use std::path::Path;

use crate::{LensError, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const THINKING_OPEN: &str = "<thinking>";
pub const THINKING_CLOSE: &str = "</thinking>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Every token the models can emit or read. Order is the id assignment and
/// must stay stable; the exported vocabulary file is the JSON array of these
/// strings, index = token id.
const WORDS: &[&str] = &[
    // markers and structural tags
    BOS, EOS, THINKING_OPEN, THINKING_CLOSE, ANSWER_OPEN, ANSWER_CLOSE,
    // punctuation
    "[", "]", ",", ".",
    // digits
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    // colors
    "red", "green", "blue", "yellow",
    // shape kinds
    "rectangle", "disc", "triangle", "shape", "shapes",
    // sides
    "left", "right", "top", "bottom",
    // ordinals
    "first", "second", "third", "fourth", "fifth", "sixth",
    // superlatives
    "largest", "smallest",
    // template and reasoning words
    "segment", "the", "from", "in", "at", "is", "are", "it", "there",
    "target", "position", "o'clock", "box", "of", "and", "to", "a",
    "reason", "then", "answer", "find", "look", "for", "with", "center",
    "middle", "near", "count", "color", "kind", "size", "image",
];

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let words: Vec<String> = WORDS.iter().map(|s| s.to_string()).collect();
        debug_assert_eq!(
            words.len(),
            words.iter().collect::<std::collections::HashSet<_>>().len(),
            "duplicate vocabulary words"
        );
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| LensError::OutOfVocabulary(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| LensError::OutOfVocabulary(format!("id {id}")))
    }

    pub fn bos(&self) -> u32 {
        self.index[BOS]
    }

    pub fn eos(&self) -> u32 {
        self.index[EOS]
    }

    /// Token ids for a word sequence.
    pub fn tokenize(&self, words: &[String]) -> Result<Vec<u32>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Token ids for whitespace-separated text.
    pub fn tokenize_text(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Inverse of tokenize for grammar-conforming text: words joined by
    /// single spaces.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }

    /// JSON array of token strings; index = token id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.words)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let words: Vec<String> = serde_json::from_str(&json)?;
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Self { words, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structural_tags_are_single_tokens() {
        let v = Vocab::new();
        for tag in [THINKING_OPEN, THINKING_CLOSE, ANSWER_OPEN, ANSWER_CLOSE] {
            assert!(v.id(tag).is_ok(), "{tag} missing");
        }
    }

    #[test]
    fn template_sentences_roundtrip() {
        let v = Vocab::new();
        for text in [
            "segment the red disc",
            "segment the second rectangle from the left",
            "segment the largest blue rectangle",
            "segment the disc in the 3 o'clock position",
            "<thinking> target is the red disc </thinking> <answer> [ 2 , 3 , 1 0 , 1 1 ] </answer> <eos>",
        ] {
            let ids = v.tokenize_text(text).unwrap();
            assert_eq!(v.detokenize(&ids).unwrap(), text);
        }
    }

    #[test]
    fn out_of_vocabulary_is_error() {
        let v = Vocab::new();
        assert!(matches!(
            v.tokenize_text("segment the zebra"),
            Err(LensError::OutOfVocabulary(w)) if w == "zebra"
        ));
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = Vocab::new();
        let dir = std::env::temp_dir().join(format!("lens-vocab-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.json");
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v.words, loaded.words);
    }

    #[test]
    fn vocabulary_is_closed_and_small() {
        let v = Vocab::new();
        assert!(v.len() <= 100, "vocab grew to {}", v.len());
    }
}
