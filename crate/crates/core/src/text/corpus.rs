//! Line-delimited JSON corpus records and split assignment files.
//!
//! One story per line:
//!
//! ```json
//! {"id": "s1", "text": "A guy stared at me.",
//!  "spans": [{"start": 0, "end": 5, "type": "harasser"}],
//!  "labels": {"age": 2, "single_multiple": 1, "harasser_type": 0,
//!             "location_type": 0, "time_of_day": 0},
//!  "forms": {"commenting": false, "ogling": true, "groping": false}}
//! ```
//!
//! Span offsets count Unicode scalar values of `text`, end exclusive. A token
//! takes a span's type when its character range overlaps the span.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tokenize_with_offsets;
use crate::error::{Error, Result};
use crate::schema::{Dimension, ElementTag, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Schema(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// One annotated narrative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Story {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub element_tags: Vec<ElementTag>,
    /// Gold class per [`Dimension`], indexed by `Dimension::index`.
    pub dims: [Option<usize>; 5],
    /// Gold flag per [`Form`], indexed by `Form::index`.
    pub forms: [Option<bool>; 3],
    pub split: Option<Split>,
}

impl Story {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold class index for a classification task.
    pub fn gold(&self, task: Task) -> Option<usize> {
        match (task.dimension(), task.form()) {
            (Some(d), _) => self.dims[d.index()],
            (_, Some(f)) => self.forms[f.index()].map(usize::from),
            _ => None,
        }
    }

    pub fn tag_indices(&self) -> Vec<usize> {
        self.element_tags.iter().map(|t| t.index()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub kind: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub age: Option<usize>,
    pub single_multiple: Option<usize>,
    pub harasser_type: Option<usize>,
    pub location_type: Option<usize>,
    pub time_of_day: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormRecord {
    pub commenting: Option<bool>,
    pub ogling: Option<bool>,
    pub groping: Option<bool>,
}

/// Serialized form of one corpus line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub spans: Vec<SpanRecord>,
    #[serde(default)]
    pub labels: LabelRecord,
    #[serde(default)]
    pub forms: FormRecord,
}

impl LabelRecord {
    fn as_array(&self) -> [Option<usize>; 5] {
        [
            self.age,
            self.single_multiple,
            self.harasser_type,
            self.location_type,
            self.time_of_day,
        ]
    }
}

/// Tokenises a record, projects its spans onto tokens and validates labels.
pub fn parse_story_record(rec: &StoryRecord, max_len: usize) -> Result<Story> {
    let conflict = |message: String| Error::Annotation {
        story: rec.id.clone(),
        message,
    };
    let dims = rec.labels.as_array();
    for d in Dimension::ALL {
        if let Some(v) = dims[d.index()] {
            if v >= d.class_count() {
                return Err(Error::Schema(format!(
                    "story {}: {} label {v} outside 0..{}",
                    rec.id,
                    d.key(),
                    d.class_count()
                )));
            }
        }
    }

    let toks = tokenize_with_offsets(&rec.text);
    let char_len = rec.text.chars().count();
    let mut tags = vec![ElementTag::None; toks.len()];
    for span in &rec.spans {
        let kind: ElementTag = span
            .kind
            .parse()
            .map_err(|_| Error::Schema(format!("story {}: unknown span type {:?}", rec.id, span.kind)))?;
        if kind == ElementTag::None {
            return Err(Error::Schema(format!(
                "story {}: span type \"none\" is implicit",
                rec.id
            )));
        }
        if span.start >= span.end || span.end > char_len {
            return Err(Error::Schema(format!(
                "story {}: span {}..{} outside text of {char_len} chars",
                rec.id, span.start, span.end
            )));
        }
        let mut hit = false;
        for (tok, tag) in toks.iter().zip(tags.iter_mut()) {
            if tok.start < span.end && span.start < tok.end {
                hit = true;
                if *tag != ElementTag::None && *tag != kind {
                    return Err(conflict(format!(
                        "token {:?} is both {} and {}",
                        tok.text, tag, kind
                    )));
                }
                *tag = kind;
            }
        }
        if !hit {
            return Err(conflict(format!(
                "{} span {}..{} covers no token",
                kind, span.start, span.end
            )));
        }
    }

    let mut tokens: Vec<String> = toks.into_iter().map(|t| t.text).collect();
    if tokens.len() > max_len {
        log::warn!(
            "story {}: truncating {} tokens to {max_len}",
            rec.id,
            tokens.len()
        );
        tokens.truncate(max_len);
        tags.truncate(max_len);
    }

    let f = &rec.forms;
    Ok(Story {
        id: rec.id.clone(),
        text: rec.text.clone(),
        tokens,
        element_tags: tags,
        dims,
        forms: [f.commenting, f.ogling, f.groping],
        split: None,
    })
}

/// Builds an unlabelled story from raw text.
pub fn story_from_text(id: &str, text: &str, max_len: usize) -> Result<Story> {
    parse_story_record(
        &StoryRecord {
            id: id.to_string(),
            text: text.to_string(),
            spans: Vec::new(),
            labels: LabelRecord::default(),
            forms: FormRecord::default(),
        },
        max_len,
    )
}

/// Reads a corpus file without split assignments.
pub fn read_corpus(path: &Path, max_len: usize) -> Result<Vec<Story>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut stories = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StoryRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Data(format!("duplicate story id {:?}", rec.id)));
        }
        stories.push(parse_story_record(&rec, max_len)?);
    }
    Ok(stories)
}

/// Reads `story-id split` pairs, one per line. `#` starts a comment line.
pub fn load_splits(path: &Path) -> Result<HashMap<String, Split>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, split] = fields[..] else {
            return Err(bad("expected `<story-id> <split>`".into()));
        };
        let split = split.parse::<Split>().map_err(|e| bad(e.to_string()))?;
        if out.insert(id.to_string(), split).is_some() {
            return Err(bad(format!("story {id:?} assigned twice")));
        }
    }
    Ok(out)
}

/// Loads the corpus and attaches split assignments. Every story must have one.
pub fn load_corpus(corpus: &Path, splits: &Path, max_len: usize) -> Result<Vec<Story>> {
    let mut stories = read_corpus(corpus, max_len)?;
    let assignment = load_splits(splits)?;
    for s in &mut stories {
        s.split = Some(*assignment.get(&s.id).ok_or_else(|| {
            Error::Data(format!("story {:?} has no split assignment", s.id))
        })?);
    }
    let ids: HashSet<&str> = stories.iter().map(|s| s.id.as_str()).collect();
    let orphans = assignment.keys().filter(|k| !ids.contains(k.as_str())).count();
    if orphans > 0 {
        log::warn!("{orphans} split entries name stories absent from the corpus");
    }
    let (tr, dv, te) = split_counts(&stories);
    log::info!("loaded {} stories: train {tr}, dev {dv}, test {te}", stories.len());
    Ok(stories)
}

/// `(train, dev, test)` sizes.
pub fn split_counts(stories: &[Story]) -> (usize, usize, usize) {
    let count = |s: Split| stories.iter().filter(|x| x.split == Some(s)).count();
    (count(Split::Train), count(Split::Dev), count(Split::Test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(text: &str, phrase: &str, kind: &str) -> SpanRecord {
        let byte = text.find(phrase).expect("phrase present");
        let start = text[..byte].chars().count();
        SpanRecord {
            start,
            end: start + phrase.chars().count(),
            kind: kind.to_string(),
        }
    }

    fn figure_one_record() -> StoryRecord {
        let text = "This morning a guy was passing going towards the ladies at dhobi ghat.";
        StoryRecord {
            id: "fig1".into(),
            text: text.into(),
            spans: vec![
                span(text, "a guy", "harasser"),
                span(text, "passing going towards the ladies", "trigger"),
                span(text, "dhobi ghat", "location"),
                span(text, "This morning", "time"),
            ],
            labels: LabelRecord {
                age: Some(2),
                single_multiple: Some(1),
                harasser_type: Some(0),
                location_type: Some(7),
                time_of_day: Some(1),
            },
            forms: FormRecord::default(),
        }
    }

    fn tagged(story: &Story, tag: ElementTag) -> String {
        story
            .tokens
            .iter()
            .zip(&story.element_tags)
            .filter(|(_, t)| **t == tag)
            .map(|(w, _)| w.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn figure_one_spans_project_onto_tokens() {
        let s = parse_story_record(&figure_one_record(), 200).unwrap();
        assert_eq!(tagged(&s, ElementTag::Harasser), "a guy");
        assert_eq!(tagged(&s, ElementTag::Trigger), "passing going towards the ladies");
        assert_eq!(tagged(&s, ElementTag::Location), "dhobi ghat");
        assert_eq!(tagged(&s, ElementTag::Time), "this morning");
        assert_eq!(s.gold(Task::LocationType), Some(7));
    }

    #[test]
    fn no_spans_means_all_none() {
        let s = story_from_text("x", "He stared at me.", 200).unwrap();
        assert!(s.element_tags.iter().all(|t| *t == ElementTag::None));
        assert_eq!(s.gold(Task::Age), None);
    }

    #[test]
    fn overlapping_spans_of_different_types_conflict() {
        let mut rec = figure_one_record();
        rec.spans.push(span(&rec.text, "guy was", "trigger"));
        let err = parse_story_record(&rec, 200).unwrap_err();
        assert!(matches!(err, Error::Annotation { ref story, .. } if story == "fig1"), "{err}");
    }

    #[test]
    fn span_over_removed_characters_is_rejected() {
        let rec = StoryRecord {
            id: "p".into(),
            text: "hey @@ you".into(),
            spans: vec![SpanRecord {
                start: 4,
                end: 6,
                kind: "trigger".into(),
            }],
            labels: LabelRecord::default(),
            forms: FormRecord::default(),
        };
        assert!(matches!(parse_story_record(&rec, 200), Err(Error::Annotation { .. })));
    }

    #[test]
    fn unknown_labels_are_schema_errors() {
        let mut rec = figure_one_record();
        rec.labels.location_type = Some(14);
        assert!(matches!(parse_story_record(&rec, 200), Err(Error::Schema(_))));
        let mut rec = figure_one_record();
        rec.spans[0].kind = "victim".into();
        assert!(matches!(parse_story_record(&rec, 200), Err(Error::Schema(_))));
        let line = r#"{"id":"a","text":"x","labels":{"mood":1}}"#;
        assert!(serde_json::from_str::<StoryRecord>(line).is_err());
    }

    #[test]
    fn truncation_keeps_tags_aligned() {
        let s = parse_story_record(&figure_one_record(), 4).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.element_tags.len(), 4);
    }

    #[test]
    fn corpus_and_splits_load_together() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.jsonl");
        let splits = dir.path().join("s.txt");
        let mut a = figure_one_record();
        let line_a = serde_json::to_string(&a).unwrap();
        a.id = "other".into();
        let line_b = serde_json::to_string(&a).unwrap();
        fs::write(&corpus, format!("{line_a}\n\n{line_b}\n")).unwrap();
        fs::write(&splits, "# id split\nfig1 train\nother dev\n").unwrap();
        let stories = load_corpus(&corpus, &splits, 200).unwrap();
        assert_eq!(split_counts(&stories), (1, 1, 0));

        fs::write(&splits, "fig1 train\n").unwrap();
        assert!(matches!(load_corpus(&corpus, &splits, 200), Err(Error::Data(_))));
        fs::write(&splits, "fig1 holdout\n").unwrap();
        assert!(matches!(load_splits(&splits), Err(Error::Parse { line: 1, .. })));
    }
}
