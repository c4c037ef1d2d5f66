//! Slot tag sequences, BIO chunk scoring and the interleaved prompt format.

use std::collections::BTreeSet;

use super::F1Score;
use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

/// Per-word slot tags aligned with the input words.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagSequence(pub Vec<String>);

impl TagSequence {
    pub fn parse(s: &str) -> Self {
        TagSequence(s.split_whitespace().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn render(&self) -> String {
        self.0.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

fn split_tag(tag: &str) -> (char, &str) {
    if tag == OUTSIDE {
        ('O', "")
    } else if let Some(t) = tag.strip_prefix("B-") {
        ('B', t)
    } else if let Some(t) = tag.strip_prefix("I-") {
        ('I', t)
    } else {
        // tags without a BIO prefix behave like B-<tag>
        ('B', tag)
    }
}

/// Decode BIO chunks the way conlleval does: a chunk starts at `B-x`, or at
/// `I-x` when the previous tag is `O` or of another type, and runs over the
/// following `I-x`.
pub fn chunks<S: AsRef<str>>(tags: &[S]) -> Vec<Chunk> {
    let mut out = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, kind) = split_tag(tag.as_ref());
        let continues = prefix == 'I' && matches!(open, Some((_, k)) if k == kind);
        if continues {
            continue;
        }
        if let Some((start, k)) = open.take() {
            out.push(Chunk {
                start,
                end: i,
                label: k.to_string(),
            });
        }
        if prefix != 'O' {
            open = Some((i, kind));
        }
    }
    if let Some((start, k)) = open {
        out.push(Chunk {
            start,
            end: tags.len(),
            label: k.to_string(),
        });
    }
    out
}

/// Chunk-level F1 over exact (type, extent) matches.
pub fn slot_f1(pred: &TagSequence, gold: &TagSequence) -> Result<F1Score> {
    if pred.len() != gold.len() {
        return Err(Error::validation(format!(
            "tag sequences differ in length: predicted {} vs gold {}",
            pred.len(),
            gold.len()
        )));
    }
    let p: BTreeSet<Chunk> = chunks(pred.as_slice()).into_iter().collect();
    let g: BTreeSet<Chunk> = chunks(gold.as_slice()).into_iter().collect();
    Ok(F1Score::from_counts(p.intersection(&g).count(), p.len(), g.len()))
}

/// Micro-averaged chunk F1 over a corpus (counts pooled across examples).
pub fn corpus_chunk_f1(pairs: &[(TagSequence, TagSequence)]) -> Result<F1Score> {
    let (mut matched, mut n_pred, mut n_gold) = (0, 0, 0);
    for (pred, gold) in pairs {
        if pred.len() != gold.len() {
            return Err(Error::validation(format!(
                "tag sequences differ in length: predicted {} vs gold {}",
                pred.len(),
                gold.len()
            )));
        }
        let p: BTreeSet<Chunk> = chunks(pred.as_slice()).into_iter().collect();
        let g: BTreeSet<Chunk> = chunks(gold.as_slice()).into_iter().collect();
        matched += p.intersection(&g).count();
        n_pred += p.len();
        n_gold += g.len();
    }
    Ok(F1Score::from_counts(matched, n_pred, n_gold))
}

/// Fraction of positions whose tags agree.
pub fn tag_accuracy(pred: &TagSequence, gold: &TagSequence) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::validation(format!(
            "tag sequences differ in length: predicted {} vs gold {}",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.0.iter().zip(&gold.0).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Pad with `O` or truncate to `n` tags. Returns whether a repair happened.
pub fn align_tags(mut tags: TagSequence, n: usize) -> (TagSequence, bool) {
    let repaired = tags.len() != n;
    tags.0.resize(n, OUTSIDE.to_string());
    (tags, repaired)
}

/// `w1 t1 w2 t2 ...`
pub fn interleave_tags<W: AsRef<str>, T: AsRef<str>>(words: &[W], tags: &[T]) -> String {
    words
        .iter()
        .zip(tags)
        .flat_map(|(w, t)| [w.as_ref(), t.as_ref()])
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deinterleaved {
    pub tags: TagSequence,
    /// Reference positions that were filled with `O`.
    pub filled: Vec<usize>,
    /// Generated tokens that matched no reference word.
    pub skipped: usize,
}

impl Deinterleaved {
    pub fn is_clean(&self) -> bool {
        self.filled.is_empty() && self.skipped == 0
    }
}

/// Recover per-word tags from an interleaved generation.
///
/// Alignment is greedy left to right: a generated token equal to the next
/// unfilled reference word (or a later one, skipping positions that are
/// filled with `O`) claims the following token as its tag.
pub fn deinterleave_tags<R: AsRef<str>>(generated: &str, reference: &[R]) -> Deinterleaved {
    let toks: Vec<&str> = generated.split_whitespace().collect();
    let mut tags: Vec<Option<String>> = vec![None; reference.len()];
    let mut skipped = 0;
    let (mut i, mut j) = (0, 0);
    while i < toks.len() && j < reference.len() {
        let found = (j..reference.len()).find(|&k| reference[k].as_ref() == toks[i]);
        match found {
            Some(k) => {
                j = k;
                tags[j] = toks.get(i + 1).map(|t| t.to_string());
                i += 2;
                j += 1;
            }
            None => {
                skipped += 1;
                i += 1;
            }
        }
    }
    skipped += toks.len().saturating_sub(i);
    let mut filled = Vec::new();
    let tags = tags
        .into_iter()
        .enumerate()
        .map(|(k, t)| {
            t.unwrap_or_else(|| {
                filled.push(k);
                OUTSIDE.to_string()
            })
        })
        .collect();
    Deinterleaved {
        tags: TagSequence(tags),
        filled,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> TagSequence {
        TagSequence::parse(s)
    }

    #[test]
    fn chunk_decoding() {
        let c = chunks(&["O", "B-a", "I-a", "B-b", "I-a", "O", "I-c"]);
        let got: Vec<(usize, usize, &str)> = c.iter().map(|c| (c.start, c.end, c.label.as_str())).collect();
        assert_eq!(got, vec![(1, 3, "a"), (3, 4, "b"), (4, 5, "a"), (6, 7, "c")]);
    }

    #[test]
    fn slot_f1_examples() {
        let g = ts("O B-a I-a O");
        assert_eq!(slot_f1(&g, &g).unwrap().f1, 1.0);
        let s = slot_f1(&ts("O O O O"), &g).unwrap();
        assert_eq!((s.recall, s.f1), (0.0, 0.0));
        assert_eq!(slot_f1(&ts("B-a I-a O"), &ts("B-a O O")).unwrap().f1, 0.0);
        assert!(slot_f1(&ts("O"), &ts("O O")).is_err());
    }

    #[test]
    fn micro_corpus_f1_pools_counts() {
        let pairs = vec![
            (ts("B-a O"), ts("B-a O")),
            (ts("O O"), ts("B-b O")),
        ];
        let s = corpus_chunk_f1(&pairs).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
    }

    #[test]
    fn accuracy() {
        assert_eq!(tag_accuracy(&ts("O B-a"), &ts("O O")).unwrap(), 0.5);
    }

    #[test]
    fn interleave_format() {
        assert_eq!(interleave_tags(&["list", "the"], &["O", "O"]), "list O the O");
    }

    #[test]
    fn deinterleave_roundtrip() {
        let words = ["list", "the", "fares", "of", "US", "Air"];
        let tags = ["O", "O", "O", "O", "B-airline_name", "I-airline_name"];
        let d = deinterleave_tags(&interleave_tags(&words, &tags), &words);
        assert!(d.is_clean());
        assert_eq!(d.tags.0, tags);
    }

    #[test]
    fn deinterleave_missing_word_is_filled() {
        let words = ["a", "b", "c"];
        let d = deinterleave_tags("a B-x c B-y", &words);
        assert_eq!(d.tags.0, vec!["B-x", "O", "B-y"]);
        assert_eq!(d.filled, vec![1]);
    }

    #[test]
    fn deinterleave_garbage() {
        let d = deinterleave_tags("zzz qqq", &["a"]);
        assert_eq!(d.tags.0, vec!["O"]);
        assert_eq!(d.skipped, 2);
        let d = deinterleave_tags("a", &["a"]);
        assert_eq!(d.filled, vec![0]);
    }

    #[test]
    fn align_pads_and_truncates() {
        assert_eq!(align_tags(ts("B-a"), 3), (ts("B-a O O"), true));
        assert_eq!(align_tags(ts("B-a O O"), 1), (ts("B-a"), true));
        assert_eq!(align_tags(ts("O"), 1), (ts("O"), false));
    }
}
