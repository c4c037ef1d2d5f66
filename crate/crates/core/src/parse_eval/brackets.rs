//! Bracketed parse trees: generation repair, pushdown parsing, rendering and
//! punctuation removal.

use std::collections::BTreeSet;

use super::SpanSet;

/// Half-open word interval `[start, end)`.
pub type Span = (usize, usize);

/// Make an arbitrary generation bracket-balanced.
///
/// Unmatched `)` are dropped; missing `)` are appended at the end. The
/// result is idempotent under a second application.
pub fn balance_brackets(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len() + 8);
    let mut depth = 0usize;
    for c in raw.chars() {
        match c {
            '(' => {
                depth += 1;
                out.push(c);
            }
            ')' => {
                if depth > 0 {
                    depth -= 1;
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out.extend(std::iter::repeat_n(')', depth));
    out
}

pub fn is_balanced(s: &str) -> bool {
    let mut depth = 0i64;
    for c in s.chars() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token<'a> {
    Open,
    Close,
    Word(&'a str),
}

fn tokenize(s: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in s.char_indices() {
        if c == '(' || c == ')' || c.is_whitespace() {
            if let Some(st) = start.take() {
                tokens.push(Token::Word(&s[st..i]));
            }
            match c {
                '(' => tokens.push(Token::Open),
                ')' => tokens.push(Token::Close),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(st) = start {
        tokens.push(Token::Word(&s[st..]));
    }
    tokens
}

/// Outcome of re-aligning generated words with the input words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationRepair {
    pub words: Vec<String>,
    /// For every generated word, the index of the repaired word it ended up in.
    pub mapping: Vec<usize>,
    /// Repaired word indices that could not be aligned with the reference.
    pub flagged: Vec<usize>,
    pub merges: usize,
}

impl SegmentationRepair {
    pub fn is_clean(&self) -> bool {
        self.flagged.is_empty() && self.merges == 0
    }
}

/// Greedily merge adjacent generated fragments whose concatenation equals the
/// next reference word. Words that do not align are kept verbatim and flagged.
pub fn repair_segmentation<S: AsRef<str>, R: AsRef<str>>(
    generated: &[S],
    reference: &[R],
) -> SegmentationRepair {
    let mut words = Vec::with_capacity(reference.len());
    let mut mapping = Vec::with_capacity(generated.len());
    let mut flagged = Vec::new();
    let mut merges = 0;
    let (mut i, mut j) = (0, 0);
    while i < generated.len() {
        let g = generated[i].as_ref();
        let target = reference.get(j).map(AsRef::as_ref);
        match target {
            Some(t) if g == t => {
                mapping.push(words.len());
                words.push(g.to_string());
                i += 1;
                j += 1;
            }
            Some(t) => {
                let mut concat = g.to_string();
                let mut m = i + 1;
                while concat.len() < t.len() && t.starts_with(&concat) && m < generated.len() {
                    concat.push_str(generated[m].as_ref());
                    m += 1;
                }
                if concat == t && m - i > 1 {
                    for _ in i..m {
                        mapping.push(words.len());
                    }
                    words.push(concat);
                    merges += 1;
                    i = m;
                } else {
                    flagged.push(words.len());
                    mapping.push(words.len());
                    words.push(g.to_string());
                    i += 1;
                }
                j += 1;
            }
            None => {
                flagged.push(words.len());
                mapping.push(words.len());
                words.push(g.to_string());
                i += 1;
            }
        }
    }
    SegmentationRepair {
        words,
        mapping,
        flagged,
        merges,
    }
}

/// Words of a sentence and the unlabeled constituent spans over them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BracketTree {
    pub words: Vec<String>,
    pub spans: BTreeSet<Span>,
}

impl BracketTree {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Spans that count for bracketing F1: no single words, no whole sentence.
    pub fn scoring_spans(&self) -> SpanSet {
        let n = self.words.len();
        SpanSet::from_iter(
            self.spans
                .iter()
                .copied()
                .filter(|&(s, e)| e - s > 1 && (s, e) != (0, n)),
        )
    }

    pub fn is_laminar(&self) -> bool {
        is_laminar(&self.spans)
    }

    /// Space-separated bracket string, e.g. `( ( a ) ( b c ) )`.
    pub fn render(&self) -> String {
        let mut out: Vec<&str> = Vec::new();
        for (i, w) in self.words.iter().enumerate() {
            let mut opening: Vec<&Span> = self.spans.iter().filter(|s| s.0 == i).collect();
            opening.sort_by(|a, b| b.1.cmp(&a.1));
            out.extend(opening.iter().map(|_| "("));
            out.push(w);
            let mut closing: Vec<&Span> = self.spans.iter().filter(|s| s.1 == i + 1).collect();
            closing.sort_by(|a, b| b.0.cmp(&a.0));
            out.extend(closing.iter().map(|_| ")"));
        }
        out.join(" ")
    }

    /// The flat tree: one root over single-word brackets.
    pub fn flat<S: AsRef<str>>(words: &[S]) -> BracketTree {
        let n = words.len();
        let mut spans: BTreeSet<Span> = (0..n).map(|i| (i, i + 1)).collect();
        if n > 0 {
            spans.insert((0, n));
        }
        BracketTree {
            words: words.iter().map(|w| w.as_ref().to_string()).collect(),
            spans,
        }
    }
}

fn crosses(a: &Span, b: &Span) -> bool {
    (a.0 < b.0 && b.0 < a.1 && a.1 < b.1) || (b.0 < a.0 && a.0 < b.1 && b.1 < a.1)
}

pub fn is_laminar(spans: &BTreeSet<Span>) -> bool {
    let v: Vec<&Span> = spans.iter().collect();
    v.iter()
        .enumerate()
        .all(|(i, a)| v[i + 1..].iter().all(|b| !crosses(a, b)))
}

/// Pushdown scan of a balanced bracket string without word repair.
fn scan(balanced: &str) -> (Vec<&str>, BTreeSet<Span>) {
    let mut words = Vec::new();
    let mut spans = BTreeSet::new();
    let mut stack = Vec::new();
    for tok in tokenize(balanced) {
        match tok {
            Token::Open => stack.push(words.len()),
            Token::Close => {
                if let Some(start) = stack.pop() {
                    if words.len() > start {
                        spans.insert((start, words.len()));
                    }
                }
            }
            Token::Word(w) => words.push(w),
        }
    }
    (words, spans)
}

/// Parse a balanced bracket string, re-aligning its words with the input.
pub fn parse_brackets<R: AsRef<str>>(balanced: &str, reference: &[R]) -> BracketTree {
    parse_brackets_with_repair(balanced, reference).0
}

pub fn parse_brackets_with_repair<R: AsRef<str>>(
    balanced: &str,
    reference: &[R],
) -> (BracketTree, SegmentationRepair) {
    let (gen_words, gen_spans) = scan(balanced);
    let repair = repair_segmentation(&gen_words, reference);
    let mut remapped: Vec<Span> = gen_spans
        .iter()
        .map(|&(s, e)| (repair.mapping[s], repair.mapping[e - 1] + 1))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    // merges can make sibling spans overlap; keep the larger ones
    remapped.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    let mut spans = BTreeSet::new();
    for s in remapped {
        if spans.iter().all(|k| !crosses(k, &s)) {
            spans.insert(s);
        }
    }
    let tree = BracketTree {
        words: repair.words.clone(),
        spans,
    };
    (tree, repair)
}

/// Balance, repair and parse a raw generation against the input words.
pub fn repair_parse<R: AsRef<str>>(raw: &str, reference: &[R]) -> (BracketTree, SegmentationRepair) {
    parse_brackets_with_repair(&balance_brackets(raw), reference)
}

/// Characters and whole tokens treated as punctuation when scoring parses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PunctuationSet {
    chars: BTreeSet<char>,
    tokens: BTreeSet<String>,
}

const DEFAULT_PUNCTUATION: &str = include_str!("../../data/punctuation.txt");

impl Default for PunctuationSet {
    fn default() -> Self {
        PunctuationSet::parse(DEFAULT_PUNCTUATION)
    }
}

impl PunctuationSet {
    /// One entry per line: a single character joins the character class,
    /// anything longer is a whole punctuation token. `#` starts a comment
    /// only at the beginning of a line and when followed by a space.
    pub fn parse(list: &str) -> Self {
        let mut chars = BTreeSet::new();
        let mut tokens = BTreeSet::new();
        for line in list.lines() {
            let entry = line.trim();
            if entry.is_empty() || entry.starts_with("# ") {
                continue;
            }
            let mut it = entry.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => {
                    chars.insert(c);
                }
                _ => {
                    tokens.insert(entry.to_string());
                }
            }
        }
        PunctuationSet { chars, tokens }
    }

    pub fn is_punctuation(&self, word: &str) -> bool {
        if self.tokens.contains(word) {
            return true;
        }
        !word.is_empty() && word.chars().all(|c| c.is_ascii_punctuation() || self.chars.contains(&c))
    }
}

/// Remove punctuation words, compacting indices. Spans that shrink to one
/// word or less are dropped.
pub fn strip_punctuation(tree: &BracketTree, is_punct: impl Fn(&str) -> bool) -> BracketTree {
    let mut kept_before = Vec::with_capacity(tree.words.len() + 1);
    let mut words = Vec::new();
    for w in &tree.words {
        kept_before.push(words.len());
        if !is_punct(w) {
            words.push(w.clone());
        }
    }
    kept_before.push(words.len());
    let spans = tree
        .spans
        .iter()
        .map(|&(s, e)| (kept_before[s], kept_before[e]))
        .filter(|(s, e)| e - s > 1)
        .collect();
    BracketTree { words, spans }
}
