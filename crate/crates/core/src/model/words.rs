//! Word vocabulary for the text encoder.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::orderparse::tokenize;
use crate::scene::{ClassVocab, Relation};
use crate::synthgen::{render_description, render_natural};

pub const UNK: &str = "<unk>";

/// Token list with `<unk>` at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct WordVocab {
    words: Vec<String>,
}

impl WordVocab {
    /// Sorted, deduplicated tokens of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let mut words = vec![UNK.to_string()];
        words.extend(set.into_iter().filter(|w| w != UNK));
        Self { words }
    }

    /// Every token the generator can emit for `classes`: class names plus
    /// the template and reworded phrasings.
    pub fn for_generator(classes: &ClassVocab) -> Self {
        let names: Vec<String> = classes.names().to_vec();
        let mut texts: Vec<String> = names.clone();
        let pairs = [names[0].clone(), names[names.len() - 1].clone(), names[0].clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for rel in [Relation::Farthest, Relation::Nearest] {
            texts.push(render_description(&pairs, rel).expect("three names"));
            for len in 1..=3 {
                for _ in 0..32 {
                    texts.push(render_natural(&pairs[..len], &[rel, rel], &mut rng));
                }
            }
        }
        Self::from_texts(texts.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.words[1..]
            .binary_search_by(|w| w.as_str().cmp(word))
            .map_or(0, |i| i + 1)
    }

    /// Token ids of `text`, unknown words mapped to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }
}

impl TryFrom<Vec<String>> for WordVocab {
    type Error = String;

    fn try_from(words: Vec<String>) -> Result<Self, String> {
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(format!("word vocabulary must start with {UNK}"));
        }
        if !words[1..].windows(2).all(|w| w[0] < w[1]) {
            return Err("word vocabulary must be sorted and unique".into());
        }
        Ok(Self { words })
    }
}

impl From<WordVocab> for Vec<String> {
    fn from(v: WordVocab) -> Self {
        v.words
    }
}
