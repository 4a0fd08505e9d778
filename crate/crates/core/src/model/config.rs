use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schema::{ElementTag, Task};

/// The ten model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Cnn,
    Bilstm,
    Abilstm,
    JCnnStar,
    JCnn,
    JAcnn,
    JSacnn,
    JBilstm,
    JAbilstm,
    JSabilstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Cnn,
    Lstm,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Cnn,
        Variant::Bilstm,
        Variant::Abilstm,
        Variant::JCnnStar,
        Variant::JCnn,
        Variant::JAcnn,
        Variant::JSacnn,
        Variant::JBilstm,
        Variant::JAbilstm,
        Variant::JSabilstm,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Cnn => "cnn",
            Variant::Bilstm => "bilstm",
            Variant::Abilstm => "abilstm",
            Variant::JCnnStar => "j-cnn-star",
            Variant::JCnn => "j-cnn",
            Variant::JAcnn => "j-acnn",
            Variant::JSacnn => "j-sacnn",
            Variant::JBilstm => "j-bilstm",
            Variant::JAbilstm => "j-abilstm",
            Variant::JSabilstm => "j-sabilstm",
        }
    }

    pub fn encoder(self) -> EncoderKind {
        match self {
            Variant::Cnn | Variant::JCnnStar | Variant::JCnn | Variant::JAcnn | Variant::JSacnn => {
                EncoderKind::Cnn
            }
            _ => EncoderKind::Lstm,
        }
    }

    /// Two-layer structure with a shared encoder feeding every head.
    pub fn is_joint(self) -> bool {
        !matches!(self, Variant::Cnn | Variant::Bilstm | Variant::Abilstm)
    }

    pub fn is_attentive(self) -> bool {
        matches!(
            self,
            Variant::Abilstm | Variant::JAcnn | Variant::JSacnn | Variant::JAbilstm | Variant::JSabilstm
        )
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, Variant::JSacnn | Variant::JSabilstm)
    }

    /// Whether the variant trains the extraction head unless told otherwise.
    fn default_extraction(self) -> bool {
        self.is_joint() && self != Variant::JCnnStar
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('*', "-star");
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == norm)
            .ok_or_else(|| Error::config("variant", format!("unknown variant {s:?}")))
    }
}

/// Architecture and loss configuration of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub word_dim: usize,
    /// Context half-width `l`; windows hold `2l+1` tokens.
    pub window: usize,
    pub position_dim: usize,
    /// Filter width → filter count, shared by both convolution layers.
    pub filters: BTreeMap<usize, usize>,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub attention_size: usize,
    pub cnn_dropout: f64,
    pub lstm_dropout: f64,
    /// Train the per-token element head. Unset means the variant default.
    pub extraction: Option<bool>,
    /// Classification heads, in output order.
    pub classify: Vec<Task>,
    /// Key-element type used as attention ground truth per task.
    pub supervision: Option<BTreeMap<Task, ElementTag>>,
    pub attention_weight: f64,
    pub extraction_weight: f64,
    pub supervised_width: usize,
    pub max_len: usize,
    pub init_range: f64,
    pub forget_bias: f64,
    pub train_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::JCnn,
            word_dim: 100,
            window: 5,
            position_dim: 20,
            filters: (1..=4).map(|w| (w, 50)).collect(),
            hidden: 50,
            lstm_layers: 1,
            attention_size: 50,
            cnn_dropout: 0.5,
            lstm_dropout: 0.25,
            extraction: None,
            classify: Task::dims().collect(),
            supervision: None,
            attention_weight: 1.0,
            extraction_weight: 1.0,
            supervised_width: 3,
            max_len: 200,
            init_range: 0.1,
            forget_bias: 1.0,
            train_embeddings: true,
        }
    }
}

impl ModelConfig {
    /// Defaults for `variant`, validated.
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..Default::default()
        }
        .validated()
        .expect("default configuration is valid")
    }

    /// Scaled-down dimensions for gradient checks and quick runs.
    pub fn small(variant: Variant) -> Self {
        ModelConfig {
            variant,
            word_dim: 4,
            window: 2,
            position_dim: 3,
            filters: (1..=4).map(|w| (w, 2)).collect(),
            hidden: 3,
            attention_size: 3,
            ..Default::default()
        }
        .validated()
        .expect("small configuration is valid")
    }

    pub fn extraction(&self) -> bool {
        self.extraction.unwrap_or(self.variant.default_extraction())
    }

    pub fn dropout(&self) -> f64 {
        match self.variant.encoder() {
            EncoderKind::Cnn => self.cnn_dropout,
            EncoderKind::Lstm => self.lstm_dropout,
        }
    }

    pub fn filter_list(&self) -> Vec<(usize, usize)> {
        self.filters.iter().map(|(w, c)| (*w, *c)).collect()
    }

    /// Supervision element for `task`, if the variant is supervised.
    pub fn supervision_for(&self, task: Task) -> Option<ElementTag> {
        self.supervision.as_ref().and_then(|m| m.get(&task).copied())
    }

    /// Resolves variant defaults and checks every field.
    pub fn validated(mut self) -> Result<Self> {
        let v = self.variant;
        self.extraction = Some(self.extraction());
        if v.is_supervised() && self.supervision.is_none() {
            self.supervision = Some(self.classify.iter().map(|t| (*t, t.default_supervision())).collect());
        }

        let positive = [
            ("word_dim", self.word_dim),
            ("window", self.window),
            ("position_dim", self.position_dim),
            ("hidden", self.hidden),
            ("lstm_layers", self.lstm_layers),
            ("attention_size", self.attention_size),
            ("supervised_width", self.supervised_width),
            ("max_len", self.max_len),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.filters.is_empty() || self.filters.iter().any(|(w, c)| *w == 0 || *c == 0) {
            return Err(Error::config("filters", "need at least one width with positive width and count"));
        }
        for (field, rate) in [("cnn_dropout", self.cnn_dropout), ("lstm_dropout", self.lstm_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(field, format!("rate {rate} outside [0, 1)")));
            }
        }
        for (field, x) in [
            ("attention_weight", self.attention_weight),
            ("extraction_weight", self.extraction_weight),
            ("init_range", self.init_range),
        ] {
            if !x.is_finite() || x < 0.0 {
                return Err(Error::config(field, format!("{x} must be finite and non-negative")));
            }
        }
        if !self.forget_bias.is_finite() {
            return Err(Error::config("forget_bias", "must be finite"));
        }
        let mut seen = Vec::new();
        for t in &self.classify {
            if seen.contains(t) {
                return Err(Error::config("classify", format!("task {t} listed twice")));
            }
            seen.push(*t);
        }

        let extraction = self.extraction();
        let classifies = !self.classify.is_empty();
        if v.is_joint() {
            if v == Variant::JCnnStar && extraction {
                return Err(Error::config("extraction", "j-cnn-star never trains the extraction head"));
            }
            if v != Variant::JCnnStar && !extraction {
                return Err(Error::config("extraction", format!("{v} is a joint model and needs extraction")));
            }
            if !classifies {
                return Err(Error::config("classify", format!("{v} needs at least one classification task")));
            }
        } else if v == Variant::Abilstm {
            if extraction || !classifies {
                return Err(Error::config("extraction", "abilstm is a classification-only baseline"));
            }
        } else if extraction == classifies {
            return Err(Error::config(
                "extraction",
                format!("baseline {v} runs either extraction or classification, not both or neither"),
            ));
        }

        match (&self.supervision, v.is_supervised()) {
            (Some(_), false) => {
                return Err(Error::config("supervision", format!("{v} has no supervised attention")));
            }
            (Some(map), true) => {
                for t in &self.classify {
                    match map.get(t) {
                        None => {
                            return Err(Error::config("supervision", format!("no element type for task {t}")));
                        }
                        Some(ElementTag::None) => {
                            return Err(Error::config("supervision", format!("task {t} supervised by `none` tokens")));
                        }
                        Some(_) => {}
                    }
                }
            }
            _ => {}
        }

        if v.encoder() == EncoderKind::Cnn {
            let widest = *self.filters.keys().last().expect("filters checked non-empty");
            if (extraction || v.is_joint()) && 2 * self.window + 1 < widest {
                return Err(Error::config(
                    "window",
                    format!("context of {} tokens is narrower than filter width {widest}", 2 * self.window + 1),
                ));
            }
            if v.is_attentive() && !self.filters.contains_key(&self.supervised_width) {
                return Err(Error::config(
                    "supervised_width",
                    format!("no filter branch of width {}", self.supervised_width),
                ));
            }
        }
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
