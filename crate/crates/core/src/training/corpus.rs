//! Byte-level corpora: train/held-out splitting, window sampling and the
//! built-in synthetic template generator.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Vocabulary size of the byte tokenizer.
pub const BYTE_VOCAB: usize = 256;

/// Bytes per split block. Blocks are assigned wholesale to train or held-out.
const BLOCK: usize = 2048;

/// UTF-8 bytes as tokens.
pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Tokens back to text, replacing invalid UTF-8.
pub fn detokenize(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// A tokenized corpus split into train and held-out segments.
#[derive(Clone, Debug)]
pub struct Corpus {
    tokens: Vec<usize>,
    train: Vec<(usize, usize)>,
    heldout: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

impl Corpus {
    /// Split `text` into fixed-size blocks and hold out a seeded random
    /// `heldout_fraction` of them (at least one).
    pub fn from_text(text: &str, heldout_fraction: f64, seed: u64) -> Result<Self> {
        if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
            return Err(Error::Input(format!(
                "train.heldout_fraction: must be in (0, 1), got {heldout_fraction}"
            )));
        }
        let tokens = tokenize(text);
        let blocks = tokens.len().div_ceil(BLOCK);
        if blocks < 2 {
            return Err(Error::Input(format!(
                "corpus has {} bytes; need more than {BLOCK} to form a held-out split",
                tokens.len()
            )));
        }
        let want = ((blocks as f64 * heldout_fraction).round() as usize).clamp(1, blocks - 1);
        let mut held = vec![false; blocks];
        for i in Rng::new(seed).sample_indices(blocks, want) {
            held[i] = true;
        }
        let mut train = Vec::new();
        let mut heldout = Vec::new();
        let mut b = 0;
        while b < blocks {
            let flag = held[b];
            let start = b;
            while b < blocks && held[b] == flag {
                b += 1;
            }
            let span = (start * BLOCK, (b * BLOCK).min(tokens.len()));
            if flag {
                heldout.push(span);
            } else {
                train.push(span);
            }
        }
        Ok(Self {
            tokens,
            train,
            heldout,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.segments(split).iter().map(|(a, b)| b - a).sum()
    }

    fn segments(&self, split: Split) -> &[(usize, usize)] {
        match split {
            Split::Train => &self.train,
            Split::Heldout => &self.heldout,
        }
    }

    /// Segments long enough to hold a window of `len` tokens.
    fn usable(&self, split: Split, len: usize) -> Vec<(usize, usize)> {
        self.segments(split)
            .iter()
            .copied()
            .filter(|(a, b)| b - a >= len)
            .collect()
    }

    /// Uniformly random contiguous window of `len` tokens from `split`.
    pub fn sample_window(&self, split: Split, len: usize, rng: &mut Rng) -> Result<&[usize]> {
        let usable = self.usable(split, len);
        let starts: usize = usable.iter().map(|(a, b)| b - a - len + 1).sum();
        if starts == 0 {
            return Err(Error::Input(format!(
                "no {} window of length {len}",
                split.name()
            )));
        }
        let mut k = rng.below(starts);
        for (a, b) in usable {
            let here = b - a - len + 1;
            if k < here {
                return Ok(&self.tokens[a + k..a + k + len]);
            }
            k -= here;
        }
        unreachable!("window index within total")
    }

    /// Up to `count` evenly spaced windows of `len` tokens from `split`.
    pub fn fixed_windows(&self, split: Split, len: usize, count: usize) -> Vec<&[usize]> {
        let usable = self.usable(split, len);
        let starts: Vec<usize> = usable
            .iter()
            .flat_map(|&(a, b)| (a..=b - len).step_by(len))
            .collect();
        if starts.is_empty() || count == 0 {
            return Vec::new();
        }
        let take = count.min(starts.len());
        (0..take)
            .map(|i| {
                let s = starts[i * starts.len() / take];
                &self.tokens[s..s + len]
            })
            .collect()
    }
}

/// Entropy in nats of the byte unigram distribution of `tokens`.
pub fn unigram_entropy(tokens: &[usize]) -> f64 {
    let mut counts = [0u64; BYTE_VOCAB];
    for &t in tokens {
        counts[t.min(BYTE_VOCAB - 1)] += 1;
    }
    let total = tokens.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Sentence templates with `{slot}` placeholders and a word list per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub templates: Vec<String>,
    pub word_lists: BTreeMap<String, Vec<String>>,
}

/// One piece of a parsed template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Text(String),
    Slot(String),
}

/// Split a template into literal text and `{slot}` references.
pub fn parse_template(template: &str) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Text(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Input(format!("unclosed slot in template {template:?}")))?;
        let name = &rest[open + 1..open + close];
        if name.is_empty() {
            return Err(Error::Input(format!(
                "empty slot name in template {template:?}"
            )));
        }
        pieces.push(Piece::Slot(name.to_string()));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_string()));
    }
    Ok(pieces)
}

const ANIMALS: [&str; 12] = [
    "cat", "dog", "fox", "owl", "bat", "cow", "pig", "hen", "ant", "bee", "elk", "yak",
];
const FOODS: [&str; 6] = ["fish", "corn", "nuts", "milk", "seed", "figs"];
const HOMES: [&str; 6] = ["barn", "cave", "nest", "pond", "hive", "tree"];
const VERBS: [&str; 6] = ["sees", "hugs", "bites", "chases", "helps", "greets"];

/// Prompt templates over the synthetic corpus. Every animal has three bytes,
/// so swapping the `{animal}` slot yields equal-length prompt pairs.
pub fn default_templates() -> TemplateSet {
    let mut word_lists = BTreeMap::new();
    word_lists.insert(
        "animal".to_string(),
        ANIMALS.iter().map(|s| s.to_string()).collect(),
    );
    TemplateSet {
        templates: vec![
            "The {animal} eats ".into(),
            "The {animal} lives in the ".into(),
        ],
        word_lists,
    }
}

/// Templated sentences with fixed facts: each animal always eats the same food
/// and lives in the same home, so predicting the object requires reading the
/// subject.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    let mut rng = Rng::new(seed);
    let mut out = String::with_capacity(bytes + 64);
    while out.len() < bytes {
        let a = rng.below(ANIMALS.len());
        let line = match rng.below(3) {
            0 => format!("The {} eats {}.", ANIMALS[a], FOODS[a % FOODS.len()]),
            1 => format!(
                "The {} lives in the {}.",
                ANIMALS[a],
                HOMES[(a * 5 + 1) % HOMES.len()]
            ),
            _ => {
                let b = rng.below(ANIMALS.len());
                let v = VERBS[rng.below(VERBS.len())];
                format!("The {} {v} the {}.", ANIMALS[a], ANIMALS[b])
            }
        };
        out.push_str(&line);
        out.push(if rng.below(4) == 0 { '\n' } else { ' ' });
    }
    out
}
