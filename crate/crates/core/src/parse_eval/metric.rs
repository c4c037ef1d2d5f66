use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    align_tags, example_f1, repair_parse, slot_f1, strip_punctuation, tag_accuracy, F1Score,
    PunctuationSet, TagSequence,
};
use crate::corpus::DataFormat;
use crate::error::Error;

/// Task metric used both for held-out evaluation and for training fidelity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    /// Unlabeled bracketing F1 with punctuation removed.
    #[serde(rename = "parse-f1")]
    BracketF1,
    /// BIO chunk F1.
    #[serde(rename = "slot-f1")]
    ChunkF1,
    /// Per-word tag accuracy.
    #[serde(rename = "token-accuracy")]
    TagAccuracy,
    /// Whole-output exact match.
    #[serde(rename = "exact")]
    Exact,
}

impl Metric {
    pub fn default_for(format: DataFormat) -> Metric {
        match format {
            DataFormat::ParseJsonl => Metric::BracketF1,
            DataFormat::SlotJsonl => Metric::ChunkF1,
        }
    }

    /// Whether outputs are bracket strings rather than tag sequences.
    pub fn is_tree(self) -> bool {
        self == Metric::BracketF1
    }

    /// Score one prediction against a target over the given input words.
    ///
    /// Both sides go through the same repair: trees are balanced, re-aligned
    /// with the input and stripped of punctuation; tag sequences are padded or
    /// truncated to the input length.
    pub fn score<W: AsRef<str>>(self, pred: &str, target: &str, words: &[W]) -> F1Score {
        match self {
            Metric::BracketF1 => {
                let punct = PunctuationSet::default();
                let spans = |s: &str| {
                    let (tree, _) = repair_parse(s, words);
                    strip_punctuation(&tree, |w| punct.is_punctuation(w)).scoring_spans()
                };
                example_f1(&spans(pred), &spans(target))
            }
            Metric::ChunkF1 | Metric::TagAccuracy => {
                let n = words.len();
                let (p, _) = align_tags(TagSequence::parse(pred), n);
                let (g, _) = align_tags(TagSequence::parse(target), n);
                if self == Metric::ChunkF1 {
                    slot_f1(&p, &g).expect("aligned sequences")
                } else {
                    F1Score::uniform(tag_accuracy(&p, &g).expect("aligned sequences"))
                }
            }
            Metric::Exact => {
                let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
                F1Score::uniform(if norm(pred) == norm(target) { 1.0 } else { 0.0 })
            }
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "parse-f1" | "parse" => Ok(Metric::BracketF1),
            "slot-f1" | "slot" => Ok(Metric::ChunkF1),
            "token-accuracy" | "accuracy" => Ok(Metric::TagAccuracy),
            "exact" => Ok(Metric::Exact),
            other => Err(Error::config(format!("unknown metric `{other}`"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::BracketF1 => "parse-f1",
            Metric::ChunkF1 => "slot-f1",
            Metric::TagAccuracy => "token-accuracy",
            Metric::Exact => "exact",
        })
    }
}
