//! Character inventory and character-level tokenization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Characters of the standard inventory, in id order.
pub const STANDARD_CHARS: &str =
    " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789äöüÄÖÜß-.'";

/// Characters that only occur in the extended (German) charset group.
pub const EXTENDED_CHARS: [char; 7] = ['ä', 'ö', 'ü', 'Ä', 'Ö', 'Ü', 'ß'];

pub fn is_extended(ch: char) -> bool {
    EXTENDED_CHARS.contains(&ch)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabSpec", into = "VocabSpec")]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
    max_len: usize,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabSpec {
    chars: String,
    max_len: usize,
}

impl TryFrom<VocabSpec> for Vocabulary {
    type Error = Error;
    fn try_from(spec: VocabSpec) -> Result<Self> {
        Vocabulary::new(spec.chars.chars().collect(), spec.max_len)
    }
}

impl From<Vocabulary> for VocabSpec {
    fn from(v: Vocabulary) -> Self {
        VocabSpec {
            chars: v.chars.iter().collect(),
            max_len: v.max_len,
        }
    }
}

impl Vocabulary {
    pub fn new(chars: Vec<char>, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::config("vocabulary.max_len", "must be at least 1"));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::config(
                    "vocabulary.chars",
                    format!("duplicate character {c:?}"),
                ));
            }
        }
        Ok(Self {
            chars,
            index,
            max_len,
        })
    }

    pub fn standard(max_len: usize) -> Result<Self> {
        Self::new(STANDARD_CHARS.chars().collect(), max_len)
    }

    /// Number of character ids (the pad id is not included).
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Rows needed in an embedding table: every character plus the pad id.
    pub fn table_rows(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn pad_id(&self) -> usize {
        self.chars.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::with_capacity(self.max_len);
        for (index, ch) in text.chars().enumerate() {
            let id = self.id(ch).ok_or(Error::UnknownChar { ch, index })?;
            ids.push(id);
        }
        let len = ids.len();
        if len > self.max_len {
            return Err(Error::TooLong {
                len,
                limit: self.max_len,
            });
        }
        ids.resize(self.max_len, self.pad_id());
        Ok(TokenSeq { ids, len })
    }

    pub fn detokenize(&self, tokens: &TokenSeq) -> Result<String> {
        tokens.ids[..tokens.len]
            .iter()
            .map(|&id| {
                self.char_of(id)
                    .ok_or_else(|| Error::Contract(format!("token id {id} is not a character")))
            })
            .collect()
    }
}

/// Fixed-length token ids: characters first, then pad.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<usize>,
    len: usize,
}

impl TokenSeq {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Count of non-pad tokens.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `true` for character positions, `false` for pad.
    pub fn key_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.len).collect()
    }

    /// Swap two pad positions; only meaningful for probing pad masking.
    pub fn with_swapped(&self, a: usize, b: usize) -> TokenSeq {
        let mut ids = self.ids.clone();
        ids.swap(a, b);
        TokenSeq { ids, len: self.len }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn umlaut_word_tokenizes_with_padding() {
        let v = Vocabulary::standard(8).unwrap();
        let t = v.tokenize("über").unwrap();
        assert_eq!(t.len(), 4);
        let want: Vec<usize> = "über".chars().map(|c| v.id(c).unwrap()).collect();
        assert_eq!(&t.ids()[..4], &want[..]);
        assert!(t.ids()[4..].iter().all(|&i| i == v.pad_id()));
        assert_eq!(v.detokenize(&t).unwrap(), "über");
    }

    #[test]
    fn empty_text_is_all_pad() {
        let v = Vocabulary::standard(5).unwrap();
        let t = v.tokenize("").unwrap();
        assert_eq!(t.len(), 0);
        assert_eq!(t.ids(), [v.pad_id(); 5]);
    }

    #[test]
    fn errors_name_character_and_limit() {
        let v = Vocabulary::standard(4).unwrap();
        match v.tokenize("ab$c") {
            Err(Error::UnknownChar { ch: '$', index: 2 }) => {}
            other => panic!("{other:?}"),
        }
        match v.tokenize("abcde") {
            Err(Error::TooLong { len: 5, limit: 4 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn standard_inventory_covers_required_sets() {
        let v = Vocabulary::standard(32).unwrap();
        for c in ('a'..='z')
            .chain('A'..='Z')
            .chain('0'..='9')
            .chain([' ', 'ä', 'ö', 'ü', 'ß'])
        {
            assert!(v.contains(c), "{c}");
        }
        assert!(v.pad_id() >= v.len());
        assert!(Vocabulary::new(vec!['a', 'a'], 3).is_err());
    }
}
