//! Word vocabulary with reserved ids.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Captions longer than this are truncated.
pub const MAX_CAPTION_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordVocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pub min_count: usize,
}

impl WordVocabulary {
    fn from_words(words: Vec<String>, min_count: usize) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index, min_count }
    }

    /// Keeps words seen at least `min_count` times. Kept words follow the
    /// reserved entries in lexicographic order, so ids depend only on the
    /// multiset of tokens.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], min_count: usize) -> Result<Self> {
        if sentences.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyInput("no tokens to build a vocabulary from".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in sentences {
            for w in s {
                *counts.entry(w.as_ref().to_lowercase()).or_default() += 1;
            }
        }
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend(
            counts
                .into_iter()
                .filter(|(w, c)| *c >= min_count && !RESERVED.contains(&w.as_str()))
                .map(|(w, _)| w),
        );
        Ok(Self::from_words(words, min_count))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, size: self.len() })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Maps tokens to ids, truncating to [`MAX_CAPTION_LEN`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().take(MAX_CAPTION_LEN).map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to words, stopping at the first EOS and dropping
    /// BOS/PAD.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                BOS | PAD => {}
                _ => out.push(self.word(id)?.to_string()),
            }
        }
        Ok(out)
    }

    /// One word per line, in id order.
    pub fn to_text(&self) -> String {
        let mut out = format!("# min_count {}\n", self.min_count);
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut min_count = 1;
        let mut words = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# min_count ") {
                min_count = rest
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(n + 1, "min_count", "not an integer"))?;
            } else if !line.is_empty() {
                words.push(line.to_string());
            }
        }
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::parse(1, "words", "reserved entries missing"));
        }
        Ok(Self::from_words(words, min_count))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentences(spec: &[(&str, usize)]) -> Vec<Vec<String>> {
        spec.iter()
            .flat_map(|(w, n)| std::iter::repeat_n(vec![w.to_string()], *n))
            .collect()
    }

    #[test]
    fn threshold_is_inclusive_at_five() {
        let v = WordVocabulary::build(&sentences(&[("car", 5), ("dog", 4)]), 5).unwrap();
        assert_eq!(v.id("dog"), UNK);
        assert_eq!(v.id("car"), 4);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn reserved_come_first() {
        let v = WordVocabulary::build(&sentences(&[("a", 1)]), 1).unwrap();
        assert_eq!(&v.words()[..4], &RESERVED);
        assert_eq!(v.word(EOS).unwrap(), "<eos>");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert!(matches!(WordVocabulary::build(&empty, 5), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn ids_ignore_sentence_order() {
        let mut s = sentences(&[("zebra", 6), ("apple", 7), ("man", 5)]);
        let a = WordVocabulary::build(&s, 5).unwrap();
        s.reverse();
        let b = WordVocabulary::build(&s, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.id("apple") < a.id("man") && a.id("man") < a.id("zebra"));
    }

    #[test]
    fn encode_truncates_and_decode_stops_at_eos() {
        let v = WordVocabulary::build(&sentences(&[("car", 1)]), 1).unwrap();
        let long = vec!["car"; 20];
        assert_eq!(v.encode(&long).len(), MAX_CAPTION_LEN);
        assert_eq!(v.decode(&[BOS, 4, 3, EOS, 4]).unwrap(), vec!["car", "<unk>"]);
        assert!(matches!(v.decode(&[99]), Err(Error::TokenOutOfRange { id: 99, .. })));
    }

    #[test]
    fn text_round_trip() {
        let v = WordVocabulary::build(&sentences(&[("car", 5), ("red", 9)]), 5).unwrap();
        assert_eq!(WordVocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(WordVocabulary::from_text("car\n").is_err());
    }
}
