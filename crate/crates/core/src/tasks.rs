//! Data sources: the curriculum copy task and a character corpus streamer.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::RngHandle;

/// Copy-task alphabet.
pub mod symbol {
    pub const ZERO: usize = 0;
    pub const ONE: usize = 1;
    pub const MARKER: usize = 2;
    pub const BLANK: usize = 3;
    pub const COUNT: usize = 4;

    pub fn to_char(s: usize) -> char {
        match s {
            ZERO => '0',
            ONE => '1',
            MARKER => '#',
            _ => '-',
        }
    }
}

/// Curriculum state for the copy task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyCurriculum {
    /// Current maximum string length `T`.
    pub t: usize,
    /// Advance once the windowed mean error drops below this (bits/char).
    pub threshold: f64,
    /// Number of error reports averaged before a decision.
    pub window: usize,
    /// Training may stop once `T` reaches this length.
    #[serde(default)]
    pub target: Option<usize>,
    #[serde(skip)]
    recent: VecDeque<f64>,
}

impl CopyCurriculum {
    pub fn new(t: usize, threshold: f64, window: usize) -> Result<Self> {
        if t == 0 || window == 0 {
            return invalid("curriculum length and window must be at least 1");
        }
        Ok(CopyCurriculum { t, threshold, window, target: None, recent: VecDeque::with_capacity(window) })
    }

    pub fn with_target(mut self, target: usize) -> Self {
        self.target = Some(target);
        self
    }

    pub fn reached_target(&self) -> bool {
        self.target.is_some_and(|g| self.t >= g)
    }

    /// Lengths drawn at the current level: `max(1, T-5) ..= T`.
    pub fn length_range(&self) -> (usize, usize) {
        (self.t.saturating_sub(5).max(1), self.t)
    }

    /// Feeds one error report; returns `true` when `T` was increased.
    ///
    /// A decision is taken only on a full window. On success the window is
    /// cleared, so each increment needs a fresh window of good reports.
    pub fn update(&mut self, error: f64) -> Result<bool> {
        if !(error >= 0.0) {
            return invalid(format!("curriculum error must be non-negative, got {error}"));
        }
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(error);
        if self.recent.len() < self.window {
            return Ok(false);
        }
        let mean = self.recent.iter().sum::<f64>() / self.window as f64;
        if mean < self.threshold {
            self.t += 1;
            self.recent.clear();
            Ok(true)
        } else {
            Ok(false)
        }
    }
}

/// Free-function form of [`CopyCurriculum::update`].
pub fn curriculum_update(curr: &mut CopyCurriculum, error: f64) -> Result<bool> {
    curr.update(error)
}

/// One copy-task sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CopySample {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// True on the positions that carry loss (the final `L + 1`).
    pub mask: Vec<bool>,
}

impl CopySample {
    /// Lays out `#bits` followed by `L+1` blanks, with the target shifted by `L+1`.
    pub fn from_bits(bits: &[usize]) -> Self {
        let l = bits.len();
        let mut inputs = Vec::with_capacity(2 * (l + 1));
        inputs.push(symbol::MARKER);
        inputs.extend_from_slice(bits);
        inputs.extend(std::iter::repeat(symbol::BLANK).take(l + 1));
        let mut targets = vec![symbol::BLANK; l + 1];
        targets.push(symbol::MARKER);
        targets.extend_from_slice(bits);
        let mask = (0..2 * (l + 1)).map(|i| i > l).collect();
        CopySample { inputs, targets, mask }
    }

    pub fn string_len(&self) -> usize {
        self.inputs.len() / 2 - 1
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub fn render(symbols: &[usize]) -> String {
    symbols.iter().map(|&s| symbol::to_char(s)).collect()
}

/// Draws `batch` samples at the curriculum's current level.
pub fn gen_copy_batch(curr: &CopyCurriculum, batch: usize, rng: &mut RngHandle) -> Result<Vec<CopySample>> {
    if batch == 0 {
        return invalid("batch must be at least 1");
    }
    let (lo, hi) = curr.length_range();
    Ok((0..batch)
        .map(|_| {
            let l = rng.int_in(lo, hi);
            let bits: Vec<usize> = (0..l).map(|_| if rng.sign() > 0.0 { symbol::ONE } else { symbol::ZERO }).collect();
            CopySample::from_bits(&bits)
        })
        .collect())
}

/// Character vocabulary: the sorted distinct characters of a text.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Vocab { chars: set.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn index(&self, c: char) -> Option<usize> {
        self.chars.binary_search(&c).ok()
    }

    pub fn char_at(&self, i: usize) -> char {
        self.chars[i]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index(c)
                    .ok_or_else(|| crate::Error::InvalidArgument(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }
}

/// Something that yields `(input, target)` symbol pairs for each batch lane.
pub trait BatchSource {
    fn lanes(&self) -> usize;
    /// Symbols per position (one-hot width).
    fn alphabet(&self) -> usize;
    /// Next pair for every lane, or `None` once exhausted.
    fn next_batch(&mut self) -> Option<Vec<(usize, usize)>>;
}

/// Streams a text character by character; each lane starts at a random offset
/// and wraps around at the end.
#[derive(Debug, Clone)]
pub struct CorpusStream {
    pub vocab: Vocab,
    symbols: Vec<usize>,
    positions: Vec<usize>,
    remaining: Option<usize>,
}

impl CorpusStream {
    pub fn new(text: &str, batch: usize, rng: &mut RngHandle) -> Result<Self> {
        let vocab = Vocab::from_text(text);
        let symbols = vocab.encode(text)?;
        if symbols.len() < 2 {
            return invalid("corpus needs at least two characters");
        }
        if batch == 0 {
            return invalid("batch must be at least 1");
        }
        let positions = (0..batch).map(|_| rng.int_in(0, symbols.len() - 1)).collect();
        Ok(CorpusStream { vocab, symbols, positions, remaining: None })
    }

    /// Encodes `text` with an existing vocabulary (e.g. for held-out data).
    pub fn with_vocab(text: &str, vocab: Vocab, batch: usize, rng: &mut RngHandle) -> Result<Self> {
        let symbols = vocab.encode(text)?;
        if symbols.len() < 2 {
            return invalid("corpus needs at least two characters");
        }
        let positions = (0..batch.max(1)).map(|_| rng.int_in(0, symbols.len() - 1)).collect();
        Ok(CorpusStream { vocab, symbols, positions, remaining: None })
    }

    /// Every lane starts at position zero.
    pub fn from_start(mut self) -> Self {
        self.positions.iter_mut().for_each(|p| *p = 0);
        self
    }

    /// Stop after `steps` more batches.
    pub fn limit(mut self, steps: usize) -> Self {
        self.remaining = Some(steps);
        self
    }

    pub fn text_len(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }
}

impl BatchSource for CorpusStream {
    fn lanes(&self) -> usize {
        self.positions.len()
    }

    fn alphabet(&self) -> usize {
        self.vocab.len()
    }

    fn next_batch(&mut self) -> Option<Vec<(usize, usize)>> {
        if let Some(r) = self.remaining.as_mut() {
            if *r == 0 {
                return None;
            }
            *r -= 1;
        }
        let len = self.symbols.len();
        Some(
            self.positions
                .iter_mut()
                .map(|p| {
                    let pair = (self.symbols[*p], self.symbols[(*p + 1) % len]);
                    *p = (*p + 1) % len;
                    pair
                })
                .collect(),
        )
    }
}

/// Free-function form of [`CorpusStream::new`].
pub fn corpus_stream(text: &str, batch: usize, rng: &mut RngHandle) -> Result<CorpusStream> {
    CorpusStream::new(text, batch, rng)
}

/// A small public-domain English text used when no corpus is supplied.
pub const BUNDLED_TEXT: &str = include_str!("../data/corpus.txt");
