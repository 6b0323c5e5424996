use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::training::corpus::{parse_template, tokenize, Piece};

/// Counterfactual prompts of equal length differing in one substituted word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// Token positions where source and target differ.
    pub span: Range<usize>,
}

/// Fill templates with random words, then swap one slot for a different
/// word of the same byte length. The substituted prompt is the source.
pub fn build_str_pairs(
    templates: &[String],
    word_lists: &BTreeMap<String, Vec<String>>,
    count: usize,
    seed: u64,
) -> Result<Vec<PromptPair>> {
    if templates.is_empty() {
        return Err(Error::Generation("no templates".into()));
    }
    let parsed = templates
        .iter()
        .map(|t| parse_template(t))
        .collect::<Result<Vec<_>>>()?;
    for pieces in &parsed {
        for p in pieces {
            if let Piece::Slot(name) = p {
                let list = word_lists.get(name).ok_or_else(|| {
                    Error::Generation(format!("no word list for slot {{{name}}}"))
                })?;
                if list.len() < 2 {
                    return Err(Error::Generation(format!(
                        "slot {{{name}}} needs at least 2 words"
                    )));
                }
            }
        }
    }

    let mut rng = Rng::new(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let ti = rng.below(parsed.len());
        let pieces = &parsed[ti];
        let chosen: Vec<Option<&str>> = pieces
            .iter()
            .map(|p| match p {
                Piece::Slot(name) => {
                    let list = &word_lists[name];
                    Some(list[rng.below(list.len())].as_str())
                }
                Piece::Text(_) => None,
            })
            .collect();
        // Slot occurrences that have an equal-length alternative.
        let mut options = Vec::new();
        for (k, p) in pieces.iter().enumerate() {
            if let (Piece::Slot(name), Some(word)) = (p, chosen[k]) {
                let alts: Vec<&str> = word_lists[name]
                    .iter()
                    .map(String::as_str)
                    .filter(|w| w.len() == word.len() && *w != word)
                    .collect();
                if !alts.is_empty() {
                    options.push((k, alts));
                }
            }
        }
        if options.is_empty() {
            return Err(Error::Generation(format!(
                "template {:?} has no slot with an equal-length substitute",
                templates[ti]
            )));
        }
        let (slot, alts) = &options[rng.below(options.len())];
        let replacement = alts[rng.below(alts.len())];

        let mut target = String::new();
        let mut source = String::new();
        let mut span = 0..0;
        for (k, p) in pieces.iter().enumerate() {
            let text = match p {
                Piece::Text(t) => t.as_str(),
                Piece::Slot(_) => chosen[k].expect("slot filled"),
            };
            if k == *slot {
                span = target.len()..target.len() + text.len();
                source.push_str(replacement);
            } else {
                source.push_str(text);
            }
            target.push_str(text);
        }
        pairs.push(PromptPair {
            source: tokenize(&source),
            target: tokenize(&target),
            span,
        });
    }
    Ok(pairs)
}
