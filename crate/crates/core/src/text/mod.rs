//! Text normalisation, tokenisation, vocabularies, word vectors, corpus
//! loading and context windows.

mod context;
mod corpus;
mod vectors;
mod vocab;

pub use context::{build_context_sequences, ContextSequence};
pub use corpus::{
    load_corpus, load_splits, parse_story_record, read_corpus, split_counts, story_from_text,
    FormRecord, LabelRecord, SpanRecord, Split, Story, StoryRecord,
};
pub use vectors::{load_word_vectors, EmbeddingTable};
pub use vocab::{Vocabulary, PAD, UNK};

/// Punctuation kept by [`preprocess`] and split off by [`tokenize`].
pub fn is_kept_punct(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn lowered(c: char) -> impl Iterator<Item = char> {
    // Characters with no lowercase mapping that still read as uppercase
    // (mathematical capitals and the like) are dropped with the rest.
    c.to_lowercase().filter(|l| {
        l.is_whitespace() || is_kept_punct(*l) || (l.is_alphanumeric() && !l.is_uppercase())
    })
}

/// Lowercases, removes every character that is not alphanumeric, whitespace
/// or one of `. ! ?`, and collapses whitespace runs to single spaces.
pub fn preprocess(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        for l in lowered(c) {
            if l.is_whitespace() {
                pending_space = !out.is_empty();
            } else {
                if pending_space {
                    out.push(' ');
                    pending_space = false;
                }
                out.push(l);
            }
        }
    }
    out
}

/// Splits on whitespace, detaching each `.`, `!` and `?` as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if is_kept_punct(c) {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            tokens.push(cur);
        }
    }
    tokens
}

/// A token of the normalised text with the character range `[start, end)`
/// it came from in the raw text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// `tokenize(preprocess(raw))`, keeping raw character offsets.
pub fn tokenize_with_offsets(raw: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut cur: Option<Token> = None;
    for (idx, c) in raw.chars().enumerate() {
        for l in lowered(c) {
            if l.is_whitespace() {
                tokens.extend(cur.take());
            } else if is_kept_punct(l) {
                tokens.extend(cur.take());
                tokens.push(Token {
                    text: l.to_string(),
                    start: idx,
                    end: idx + 1,
                });
            } else {
                let tok = cur.get_or_insert_with(|| Token {
                    text: String::new(),
                    start: idx,
                    end: idx + 1,
                });
                tok.text.push(l);
                tok.end = idx + 1;
            }
        }
    }
    tokens.extend(cur);
    tokens
}
