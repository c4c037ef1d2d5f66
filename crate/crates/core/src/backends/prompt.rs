//! Few-shot prompt assembly for the teacher.

use crate::corpus::{words, Example};
use crate::error::{Error, Result};
use crate::parse_eval::{interleave_tags, Metric};

pub const ATIS_INSTRUCTION: &str = "Predict tag for each word in the sentence. 'O' for unrelated word. \
Focus on words related to the flight information, such as locations, time and airline.";

pub const SNIPS_INSTRUCTION: &str = "Predict tag for each word in the sentence. 'O' for unrelated word. \
Focus on words related to the music, restuarant, weather, book, playlist and searching.";

/// Resolve a configured instruction: `atis` and `snips` name the built-in
/// slot instructions, anything else is used literally.
pub fn resolve_instruction(name: &str) -> &str {
    match name {
        "atis" => ATIS_INSTRUCTION,
        "snips" => SNIPS_INSTRUCTION,
        other => other,
    }
}

/// Assemble the prompt text.
///
/// ```text
/// <instruction>
/// Input:<in>
/// Output:<out>
/// ...
/// Input:<query>
/// Output:
/// ```
pub fn build_prompt(instruction: Option<&str>, demos: &[(String, String)], query: &str) -> Result<String> {
    if demos.is_empty() {
        return Err(Error::validation("a prompt needs at least one demonstration"));
    }
    let mut out = String::new();
    if let Some(ins) = instruction.filter(|s| !s.is_empty()) {
        out.push_str(ins);
        out.push('\n');
    }
    for (input, output) in demos {
        out.push_str("Input:");
        out.push_str(input);
        out.push_str("\nOutput:");
        out.push_str(output);
        out.push('\n');
    }
    out.push_str("Input:");
    out.push_str(query);
    out.push_str("\nOutput:");
    Ok(out)
}

/// Demonstration pairs from gold-labeled examples. Slot outputs are
/// interleaved with their words.
pub fn demo_pairs(demos: &[Example], metric: Metric) -> Result<Vec<(String, String)>> {
    demos
        .iter()
        .map(|ex| {
            let gold = ex
                .gold
                .as_deref()
                .ok_or_else(|| Error::validation(format!("demonstration `{}` has no gold label", ex.id)))?;
            let output = if metric.is_tree() || metric == Metric::Exact {
                gold.to_string()
            } else {
                let tags: Vec<&str> = gold.split_whitespace().collect();
                interleave_tags(&words(&ex.input), &tags)
            };
            Ok((ex.input.clone(), output))
        })
        .collect()
}
