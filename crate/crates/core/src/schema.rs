//! Annotation schema: key-element tags, the five categorical dimensions and
//! the three binary harassment forms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Per-token key-element type. The discriminant is the class index used by
/// the extraction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementTag {
    Harasser = 0,
    Time = 1,
    Location = 2,
    Trigger = 3,
    None = 4,
}

impl ElementTag {
    pub const ALL: [ElementTag; 5] = [
        ElementTag::Harasser,
        ElementTag::Time,
        ElementTag::Location,
        ElementTag::Trigger,
        ElementTag::None,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementTag::Harasser => "harasser",
            ElementTag::Time => "time",
            ElementTag::Location => "location",
            ElementTag::Trigger => "trigger",
            ElementTag::None => "none",
        }
    }
}

impl fmt::Display for ElementTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElementTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        ElementTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown element type {s:?}")))
    }
}

/// One categorical labelling of a story. Class 0 is always "unspecified".
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Age,
    SingleMultiple,
    HarasserType,
    LocationType,
    TimeOfDay,
}

const AGE: &[&str] = &["unspecified", "young", "adult"];
const SINGLE_MULTIPLE: &[&str] = &["unspecified", "single", "multiple"];
const HARASSER_TYPE: &[&str] = &[
    "unspecified",
    "relative",
    "teacher",
    "classmate",
    "friend",
    "neighbor",
    "conductor/driver",
    "work-related",
    "police/guard",
    "other",
];
const LOCATION_TYPE: &[&str] = &[
    "unspecified",
    "street",
    "transportation",
    "station/stop",
    "private places",
    "shopping places",
    "neighborhood",
    "park",
    "hotel",
    "bush/woods",
    "parking lot",
    "in/near school",
    "restaurant",
    "other",
];
const TIME_OF_DAY: &[&str] = &["unspecified", "day", "night"];

impl Dimension {
    pub const ALL: [Dimension; 5] = [
        Dimension::Age,
        Dimension::SingleMultiple,
        Dimension::HarasserType,
        Dimension::LocationType,
        Dimension::TimeOfDay,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            Dimension::Age => "age",
            Dimension::SingleMultiple => "single_multiple",
            Dimension::HarasserType => "harasser_type",
            Dimension::LocationType => "location_type",
            Dimension::TimeOfDay => "time_of_day",
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Dimension::Age => AGE,
            Dimension::SingleMultiple => SINGLE_MULTIPLE,
            Dimension::HarasserType => HARASSER_TYPE,
            Dimension::LocationType => LOCATION_TYPE,
            Dimension::TimeOfDay => TIME_OF_DAY,
        }
    }

    pub fn class_count(self) -> usize {
        self.class_names().len()
    }
}

/// Binary harassment form flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Commenting,
    Ogling,
    Groping,
}

impl Form {
    pub const ALL: [Form; 3] = [Form::Commenting, Form::Ogling, Form::Groping];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            Form::Commenting => "commenting",
            Form::Ogling => "ogling",
            Form::Groping => "groping",
        }
    }
}

/// A classification head: one of the five dimensions or one binary form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Age,
    SingleMultiple,
    HarasserType,
    LocationType,
    TimeOfDay,
    Commenting,
    Ogling,
    Groping,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::Age,
        Task::SingleMultiple,
        Task::HarasserType,
        Task::LocationType,
        Task::TimeOfDay,
        Task::Commenting,
        Task::Ogling,
        Task::Groping,
    ];

    pub fn dims() -> impl Iterator<Item = Task> {
        Self::ALL.into_iter().filter(|t| t.dimension().is_some())
    }

    pub fn forms() -> impl Iterator<Item = Task> {
        Self::ALL.into_iter().filter(|t| t.form().is_some())
    }

    pub fn dimension(self) -> Option<Dimension> {
        match self {
            Task::Age => Some(Dimension::Age),
            Task::SingleMultiple => Some(Dimension::SingleMultiple),
            Task::HarasserType => Some(Dimension::HarasserType),
            Task::LocationType => Some(Dimension::LocationType),
            Task::TimeOfDay => Some(Dimension::TimeOfDay),
            _ => None,
        }
    }

    pub fn form(self) -> Option<Form> {
        match self {
            Task::Commenting => Some(Form::Commenting),
            Task::Ogling => Some(Form::Ogling),
            Task::Groping => Some(Form::Groping),
            _ => None,
        }
    }

    pub fn key(self) -> &'static str {
        match (self.dimension(), self.form()) {
            (Some(d), _) => d.key(),
            (_, Some(f)) => f.key(),
            _ => unreachable!(),
        }
    }

    pub fn class_count(self) -> usize {
        self.dimension().map_or(2, Dimension::class_count)
    }

    pub fn class_name(self, class: usize) -> String {
        match self.dimension() {
            Some(d) => d.class_names().get(class).copied().unwrap_or("?").to_string(),
            None => (class == 1).to_string(),
        }
    }

    /// Element type whose tokens serve as attention ground truth by default.
    pub fn default_supervision(self) -> ElementTag {
        match self {
            Task::Age | Task::SingleMultiple | Task::HarasserType => ElementTag::Harasser,
            Task::LocationType => ElementTag::Location,
            Task::TimeOfDay => ElementTag::Time,
            Task::Commenting | Task::Ogling | Task::Groping => ElementTag::Trigger,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Task::ALL
            .into_iter()
            .find(|t| t.key() == s)
            .ok_or_else(|| Error::Schema(format!("unknown task {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts_match_annotation_scheme() {
        let counts: Vec<usize> = Dimension::ALL.iter().map(|d| d.class_count()).collect();
        assert_eq!(counts, vec![3, 3, 10, 14, 3]);
        assert_eq!(Task::Groping.class_count(), 2);
    }

    #[test]
    fn names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.key().parse::<Task>().unwrap(), t);
        }
        for e in ElementTag::ALL {
            assert_eq!(e.name().parse::<ElementTag>().unwrap(), e);
            assert_eq!(ElementTag::from_index(e.index()), Some(e));
        }
    }
}
