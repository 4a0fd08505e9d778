use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::Story;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token ↔ index map with `PAD = 0` and `UNK = 1` reserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_tokens(std::iter::empty::<String>())
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(all: Vec<String>) -> Self {
        // Serialized form includes the two reserved entries.
        Vocabulary::from_tokens(all.into_iter().skip(2))
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in order; repeats are ignored.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        for t in tokens {
            v.push(t.into());
        }
        v
    }

    /// Vocabulary of training tokens seen at least `min_count` times, in
    /// descending frequency (ties alphabetical).
    pub fn from_stories<'a>(stories: impl IntoIterator<Item = &'a Story>, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in stories {
            for t in &s.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ordered: Vec<(&str, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Vocabulary::from_tokens(ordered.into_iter().map(|(t, _)| t))
    }

    /// Adds a token if new; returns its index.
    pub fn push(&mut self, token: String) -> usize {
        if token == PAD_TOKEN {
            return PAD;
        }
        if token == UNK_TOKEN {
            return UNK;
        }
        if let Some(&i) = self.index.get(&token) {
            return i;
        }
        let i = self.tokens.len();
        self.index.insert(token.clone(), i);
        self.tokens.push(token);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or `UNK`.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t.as_ref())).collect()
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    /// Number of entries including the reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_indices_and_bijection() {
        let v = Vocabulary::from_tokens(["man", "bus", "man"]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.lookup("man"), 2);
        assert_eq!(v.lookup("bus"), 3);
        assert_eq!(v.lookup("train"), UNK);
        for i in 2..v.len() {
            assert_eq!(v.lookup(v.token(i).unwrap()), i);
        }
        assert_eq!(v.token(PAD), Some("<pad>"));
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::from_tokens(["a", "b"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }
}
