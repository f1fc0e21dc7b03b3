//! Byte corpora and training batches.

use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Rng};

/// Reads a file as byte-level token ids.
pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("corpus {} is empty", path.display())));
    }
    Ok(bytes)
}

pub fn byte_ids(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// `B × L` inputs with next-byte targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TokenBatch {
    /// Windows of `seq + 1` bytes starting at each offset.
    pub fn from_offsets(corpus: &[u8], offsets: &[usize], seq: usize) -> Result<Self> {
        let mut tokens = Vec::with_capacity(offsets.len() * seq);
        let mut targets = Vec::with_capacity(offsets.len() * seq);
        for &o in offsets {
            let window = corpus
                .get(o..o + seq + 1)
                .ok_or_else(|| Error::Data(format!("window at {o} runs past the corpus end")))?;
            tokens.extend(window[..seq].iter().map(|&b| b as usize));
            targets.extend(window[1..].iter().map(|&b| b as usize));
        }
        Ok(Self {
            batch: offsets.len(),
            seq,
            tokens,
            targets,
        })
    }
}

/// Uniformly random windows for training.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: Rng,
    batch: usize,
    seq: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, batch: usize, seq: usize) -> Self {
        Self {
            rng: seeded_rng(seed),
            batch,
            seq,
        }
    }

    pub fn next_batch(&mut self, corpus: &[u8]) -> Result<TokenBatch> {
        if corpus.len() < self.seq + 1 {
            return Err(Error::Data(format!(
                "corpus of {} bytes is shorter than one window of {}",
                corpus.len(),
                self.seq + 1
            )));
        }
        let last = corpus.len() - self.seq - 1;
        let offsets: Vec<usize> = (0..self.batch).map(|_| self.rng.gen_range(0..=last)).collect();
        TokenBatch::from_offsets(corpus, &offsets, self.seq)
    }
}

const NOUNS: &[&str] = &[
    "river", "garden", "machine", "teacher", "city", "window", "letter", "mountain", "engine", "village",
    "market", "student", "forest", "captain", "bridge", "library", "kitchen", "island", "doctor", "harbor",
    "painter", "station", "storm", "child", "farmer", "lamp", "road", "king", "sailor", "clock", "winter",
    "stone", "song", "horse", "house", "friend", "ship", "tower", "field", "book",
];
const VERBS: &[&str] = &[
    "found", "watched", "carried", "opened", "followed", "painted", "built", "remembered", "crossed",
    "repaired", "visited", "described", "lost", "heard", "closed", "answered", "measured", "climbed",
    "cleaned", "called", "moved", "guarded", "wrote", "sold",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "small", "heavy", "green", "broken", "distant", "warm", "narrow", "golden",
    "empty", "careful", "strange", "early", "tired", "wooden", "gentle", "cold", "famous",
];
const ADVERBS: &[&str] = &["slowly", "again", "early", "carefully", "today", "at night", "once more", "quickly"];
const PREPOSITIONS: &[&str] = &["near", "behind", "across", "under", "beside", "inside", "over", "along"];
const NAMES: &[&str] = &["Anna", "Tomas", "Mira", "Jonah", "Elena", "Felix", "Ruth", "Oskar"];

fn zipf<'a>(rng: &mut Rng, words: &[&'a str]) -> &'a str {
    let total: f64 = (1..=words.len()).map(|i| 1.0 / i as f64).sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in words.iter().enumerate() {
        u -= 1.0 / (i + 1) as f64;
        if u <= 0.0 {
            return w;
        }
    }
    words[words.len() - 1]
}

fn noun_phrase(rng: &mut Rng, out: &mut String) {
    out.push_str(if rng.gen_bool(0.7) { "the " } else { "a " });
    if rng.gen_bool(0.5) {
        out.push_str(zipf(rng, ADJECTIVES));
        out.push(' ');
    }
    out.push_str(zipf(rng, NOUNS));
}

fn sentence(rng: &mut Rng, out: &mut String) {
    let start = out.len();
    match rng.gen_range(0..4) {
        0 => {
            noun_phrase(rng, out);
            out.push(' ');
            out.push_str(zipf(rng, VERBS));
            out.push(' ');
            noun_phrase(rng, out);
            out.push(' ');
            out.push_str(zipf(rng, PREPOSITIONS));
            out.push(' ');
            noun_phrase(rng, out);
        }
        1 => {
            out.push_str(zipf(rng, NAMES));
            out.push(' ');
            out.push_str(zipf(rng, VERBS));
            out.push(' ');
            noun_phrase(rng, out);
            out.push(' ');
            out.push_str(zipf(rng, ADVERBS));
        }
        2 => {
            out.push_str("when ");
            out.push_str(zipf(rng, NAMES));
            out.push(' ');
            out.push_str(zipf(rng, VERBS));
            out.push(' ');
            noun_phrase(rng, out);
            out.push_str(", ");
            noun_phrase(rng, out);
            out.push_str(" was ");
            out.push_str(zipf(rng, ADJECTIVES));
        }
        _ => {
            noun_phrase(rng, out);
            out.push_str(" was ");
            out.push_str(zipf(rng, ADJECTIVES));
            out.push_str(" and ");
            out.push_str(zipf(rng, ADJECTIVES));
        }
    }
    if let Some(first) = out[start..].chars().next() {
        let upper = first.to_ascii_uppercase().to_string();
        out.replace_range(start..start + first.len_utf8(), &upper);
    }
    out.push_str(if rng.gen_bool(0.9) { ". " } else { "? " });
}

/// Deterministic English-like text of exactly `len` bytes.
///
/// Sentences come from a small template grammar with Zipf-distributed word
/// choices, which gives a byte model plenty of learnable structure.
pub fn synthetic_corpus(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = seeded_rng(seed);
    let mut text = String::with_capacity(len + 128);
    while text.len() < len {
        for _ in 0..rng.gen_range(3..7) {
            sentence(&mut rng, &mut text);
        }
        text.pop();
        text.push('\n');
    }
    let mut bytes = text.into_bytes();
    bytes.truncate(len);
    bytes
}
