//! Templated synthetic stories with key-element spans, dimension labels and
//! form flags. Used for demos, smoke tests and determinism checks; the
//! generator plants a few correlations (young harassers on streets, adults
//! on transport, night more common than day) so pattern analysis has
//! something to find.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schema::ElementTag;
use crate::text::{FormRecord, LabelRecord, SpanRecord, Split, Story, StoryRecord};

const DAY: &[&str] = &["this morning", "in the afternoon", "during the day", "at noon", "one morning"];
const NIGHT: &[&str] = &["late at night", "in the evening", "at night", "around midnight", "one night"];

/// `(preposition, place)` per location class; only the place is a span.
const PLACES: &[&[(&str, &str)]] = &[
    &[],
    &[("on", "the street"), ("on", "the main road"), ("in", "a narrow lane")],
    &[("in", "the bus"), ("on", "the train"), ("in", "a crowded metro"), ("in", "an auto")],
    &[("at", "the bus stop"), ("at", "the railway station"), ("at", "the metro station")],
    &[("at", "his house"), ("in", "my building"), ("at", "a private party")],
    &[("in", "the market"), ("at", "the mall"), ("in", "a shop")],
    &[("in", "my colony"), ("in", "our locality"), ("near", "my neighbourhood")],
    &[("at", "dhobi ghat"), ("in", "the park"), ("in", "a public garden")],
    &[("at", "the hotel"), ("in", "the hotel lobby")],
    &[("near", "the woods"), ("behind", "the bushes")],
    &[("in", "the parking lot"), ("near", "the parking area")],
    &[("outside", "my school"), ("near", "the college gate"), ("in", "the school")],
    &[("at", "a restaurant"), ("in", "the cafe")],
    &[("at", "the temple"), ("near", "the hospital")],
];

/// Type nouns as `(singular, plural)`, indexed by harasser type class.
const TYPES: &[(&str, &str)] = &[
    ("guy", "guys"),
    ("relative", "relatives"),
    ("teacher", "teachers"),
    ("classmate", "classmates"),
    ("friend of my brother", "friends of my brother"),
    ("neighbour", "neighbours"),
    ("bus conductor", "bus conductors"),
    ("colleague", "colleagues"),
    ("policeman", "policemen"),
    ("shopkeeper", "shopkeepers"),
];

const COMMENTING: &[(&str, &str)] = &[
    ("", "passed lewd comments"),
    ("", "whistled and called me names"),
    ("", "made dirty remarks"),
];
const OGLING: &[(&str, &str)] = &[
    ("was", "passing going towards the ladies"),
    ("", "kept staring at me"),
    ("", "stared at my body"),
];
const GROPING: &[(&str, &str)] = &[
    ("", "touched me inappropriately"),
    ("", "groped me"),
    ("", "brushed against my chest"),
];

const FILLERS: &[&str] = &[
    "I felt very scared.",
    "Nobody around said anything.",
    "I shouted at him and moved away.",
    "It was horrible.",
    "I did not tell anyone.",
];

fn weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

#[derive(Default)]
struct Builder {
    text: String,
    spans: Vec<SpanRecord>,
}

impl Builder {
    fn push(&mut self, piece: &str, tag: Option<ElementTag>) {
        if piece.is_empty() {
            return;
        }
        if !self.text.is_empty() && !piece.starts_with(['.', ',']) {
            self.text.push(' ');
        }
        let start = self.text.chars().count();
        self.text.push_str(piece);
        if let Some(t) = tag {
            self.spans.push(SpanRecord {
                start,
                end: start + piece.chars().count(),
                kind: t.name().to_string(),
            });
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn harasser_phrase(rng: &mut ChaCha8Rng, age: usize, multiple: usize, kind: usize) -> String {
    let (single, plural) = TYPES[kind];
    if kind == 0 {
        return match (age, multiple) {
            (1, 2) => "some boys".into(),
            (1, _) => "a boy".into(),
            (2, 2) => "a group of men".into(),
            (2, _) => ["a guy", "a man", "an old man"].choose(rng).unwrap().to_string(),
            (_, 2) => "some people".into(),
            _ => "someone".into(),
        };
    }
    let age_word = match age {
        1 => "young ",
        2 => "middle aged ",
        _ => "",
    };
    if multiple == 2 {
        format!("two {age_word}{plural}")
    } else {
        let article = if age_word.is_empty() && single.starts_with(['a', 'e', 'i', 'o', 'u']) {
            "an"
        } else {
            "a"
        };
        format!("{article} {age_word}{single}")
    }
}

/// One synthetic story with a random but internally consistent annotation.
pub fn story(id: &str, rng: &mut ChaCha8Rng) -> StoryRecord {
    let age = weighted(rng, &[0.2, 0.4, 0.4]);
    let multiple = 1 + weighted(rng, &[0.65, 0.35]);
    let kind = weighted(rng, &[0.35, 0.05, 0.05, 0.05, 0.05, 0.05, 0.15, 0.1, 0.05, 0.1]);
    let location = match age {
        1 => weighted(rng, &[1.0, 5.0, 1.0, 1.0, 0.5, 1.0, 1.5, 1.0, 0.2, 0.3, 0.3, 2.0, 0.3, 0.3]),
        2 => weighted(rng, &[1.0, 1.0, 5.0, 2.0, 0.5, 1.0, 0.5, 1.0, 0.5, 0.2, 0.5, 0.3, 0.5, 0.3]),
        _ => weighted(rng, &[2.0, 1.5, 1.5, 1.0, 0.5, 1.0, 1.0, 1.0, 0.3, 0.2, 0.3, 0.5, 0.3, 0.3]),
    };
    let location = if kind == 6 && location == 0 { 2 } else { location };
    let time = weighted(rng, &[0.25, 0.3, 0.45]);
    let mut forms = [rng.gen_bool(0.5), rng.gen_bool(0.35), rng.gen_bool(0.3)];
    if !forms.iter().any(|f| *f) {
        forms[rng.gen_range(0..3)] = true;
    }

    let harasser = harasser_phrase(rng, age, multiple, kind);
    let when = match time {
        1 => DAY.choose(rng).copied(),
        2 => NIGHT.choose(rng).copied(),
        _ => None,
    };
    let place = PLACES[location].choose(rng).copied();
    let mut triggers = Vec::new();
    for (on, pool) in forms.iter().zip([COMMENTING, OGLING, GROPING]) {
        if *on {
            triggers.push(*pool.choose(rng).unwrap());
        }
    }

    let mut b = Builder::default();
    let time_first = when.is_some() && rng.gen_bool(0.6);
    if time_first {
        b.push(&capitalize(when.unwrap()), Some(ElementTag::Time));
        b.push(&harasser, Some(ElementTag::Harasser));
    } else {
        b.push(&capitalize(&harasser), Some(ElementTag::Harasser));
    }
    for (i, (aux, act)) in triggers.iter().enumerate() {
        if i > 0 {
            b.push("and", None);
        }
        b.push(aux, None);
        b.push(act, Some(ElementTag::Trigger));
    }
    if let Some((prep, spot)) = place {
        b.push(prep, None);
        b.push(spot, Some(ElementTag::Location));
    }
    if let (Some(w), false) = (when, time_first) {
        b.push(w, Some(ElementTag::Time));
    }
    b.push(".", None);
    if rng.gen_bool(0.5) {
        b.push(FILLERS.choose(rng).unwrap(), None);
    }

    StoryRecord {
        id: id.to_string(),
        text: b.text,
        spans: b.spans,
        labels: LabelRecord {
            age: Some(age),
            single_multiple: Some(multiple),
            harasser_type: Some(kind),
            location_type: Some(location),
            time_of_day: Some(time),
        },
        forms: FormRecord {
            commenting: Some(forms[0]),
            ogling: Some(forms[1]),
            groping: Some(forms[2]),
        },
    }
}

/// A fixed six-token annotated story, "a man groped me on bus".
pub fn probe_story() -> Story {
    use ElementTag::*;
    let tokens = ["a", "man", "groped", "me", "on", "bus"];
    Story {
        id: "probe".into(),
        text: tokens.join(" "),
        tokens: tokens.iter().map(|t| t.to_string()).collect(),
        element_tags: vec![Harasser, Harasser, Trigger, Trigger, None, Location],
        dims: [Some(2), Some(1), Some(0), Some(2), Some(0)],
        forms: [Some(false), Some(false), Some(true)],
        split: Option::None,
    }
}

/// `count` stories with ids `s0000`, `s0001`, ….
pub fn generate(count: usize, seed: u64) -> Vec<StoryRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| story(&format!("s{i:04}"), &mut rng)).collect()
}

/// Assigns roughly 70/10/20 train/dev/test splits in id order.
pub fn assign_splits(records: &[StoryRecord]) -> Vec<(String, Split)> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let split = match i % 10 {
                7 => Split::Dev,
                8 | 9 => Split::Test,
                _ => Split::Train,
            };
            (r.id.clone(), split)
        })
        .collect()
}

/// Writes `corpus.jsonl` and `splits.txt` into `dir`.
pub fn write_dataset(dir: &Path, count: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records = generate(count, seed);
    let corpus = dir.join("corpus.jsonl");
    let mut f = fs::File::create(&corpus).map_err(|e| Error::io(&corpus, e))?;
    for r in &records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&corpus, e))?;
    }
    let splits = dir.join("splits.txt");
    let body: String = assign_splits(&records)
        .into_iter()
        .map(|(id, s)| format!("{id} {s}\n"))
        .collect();
    fs::write(&splits, body).map_err(|e| Error::io(&splits, e))?;
    Ok((corpus, splits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::parse_story_record;

    #[test]
    fn generated_records_parse_cleanly() {
        for rec in generate(300, 11) {
            let story = parse_story_record(&rec, 200).unwrap_or_else(|e| panic!("{}: {e}", rec.text));
            assert!(story.element_tags.contains(&ElementTag::Trigger));
            assert!(story.dims.iter().all(Option::is_some));
            assert!(story.forms.iter().any(|f| *f == Some(true)));
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate(20, 3), generate(20, 3));
        assert_ne!(generate(20, 3), generate(20, 4));
    }

    #[test]
    fn harasser_span_is_tagged_harasser() {
        for rec in generate(50, 2) {
            let story = parse_story_record(&rec, 200).unwrap();
            let has = story.element_tags.contains(&ElementTag::Harasser);
            assert!(has, "{}", rec.text);
        }
    }
}
