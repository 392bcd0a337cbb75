//! Maps between continuous scores, the discrete label alphabets, and
//! backend logits.
//!
//! Total scores in `[1, 5]` are scaled onto fifteen rating levels `a..=o`;
//! element scores in `[0, 1]` onto seven categories `1..=7`. At inference the
//! closed-set softmax over the label logits gives a distribution whose
//! expectation is the calibrated continuous score.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RATING_LEVELS: usize = 15;
pub const ELEMENT_CATEGORIES: usize = 7;
/// Element categories strictly above this count as hits.
pub const DEFAULT_TAU: u8 = 3;

const RATING_LETTERS: [char; RATING_LEVELS] = [
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o',
];
const ELEMENT_DIGITS: [char; ELEMENT_CATEGORIES] = ['1', '2', '3', '4', '5', '6', '7'];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("score {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("`{0}` is not a label of the {1} alphabet")]
    UnknownLabel(char, Alphabet),
    #[error("expected {expected} logits for the {alphabet} alphabet, got {got}")]
    Length {
        alphabet: Alphabet,
        expected: usize,
        got: usize,
    },
    #[error("logit {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("logits are over the {got} alphabet, expected {expected}")]
    AlphabetMismatch { expected: Alphabet, got: Alphabet },
}

/// Round half away from zero; the one rounding rule both codecs share.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// The two closed label sets a backend is asked to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alphabet {
    Rating,
    Element,
}

impl Alphabet {
    pub fn labels(self) -> &'static [char] {
        match self {
            Alphabet::Rating => &RATING_LETTERS,
            Alphabet::Element => &ELEMENT_DIGITS,
        }
    }

    pub fn len(self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// Zero-based position of a label.
    pub fn position(self, label: char) -> Option<usize> {
        self.labels().iter().position(|&l| l == label)
    }
}

impl fmt::Display for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alphabet::Rating => "rating",
            Alphabet::Element => "element",
        })
    }
}

/// One of the fifteen rating letters, `a` = 1 through `o` = 15.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RatingLevel(u8);

impl RatingLevel {
    pub fn from_index(index: u8) -> Option<Self> {
        (1..=RATING_LEVELS as u8).contains(&index).then_some(Self(index))
    }

    pub fn from_letter(letter: char) -> Option<Self> {
        Alphabet::Rating
            .position(letter)
            .map(|p| Self(p as u8 + 1))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn letter(self) -> char {
        RATING_LETTERS[self.0 as usize - 1]
    }
}

/// One of the seven element categories, `1..=7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ElementCategory(u8);

impl ElementCategory {
    pub fn new(digit: u8) -> Option<Self> {
        (1..=ELEMENT_CATEGORIES as u8).contains(&digit).then_some(Self(digit))
    }

    /// Saturating constructor for arithmetic that may leave `1..=7`.
    pub fn clamped(digit: i32) -> Self {
        Self(digit.clamp(1, ELEMENT_CATEGORIES as i32) as u8)
    }

    pub fn from_label(label: char) -> Option<Self> {
        label
            .to_digit(10)
            .and_then(|d| Self::new(d as u8))
    }

    pub fn digit(self) -> u8 {
        self.0
    }

    pub fn label(self) -> char {
        ELEMENT_DIGITS[self.0 as usize - 1]
    }
}

impl fmt::Display for ElementCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn encode_total_score(score: f64) -> Result<RatingLevel, CodecError> {
    if !(1.0..=5.0).contains(&score) {
        return Err(CodecError::OutOfRange {
            value: score,
            lo: 1.0,
            hi: 5.0,
        });
    }
    let index = round_half_away((score - 1.0) / 4.0 * 14.0 + 1.0);
    Ok(RatingLevel(index as u8))
}

pub fn decode_level(level: RatingLevel) -> f64 {
    index_to_total(level.index() as f64)
}

/// Linear map from rating-index space `[1, 15]` back onto `[1, 5]`.
pub fn index_to_total(index: f64) -> f64 {
    1.0 + (index - 1.0) * 4.0 / 14.0
}

pub fn encode_element_score(score: f64) -> Result<ElementCategory, CodecError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(CodecError::OutOfRange {
            value: score,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(ElementCategory(round_half_away(score * 6.0) as u8 + 1))
}

/// Inverse of [`encode_element_score`] on category centres.
pub fn decode_element_category(category: f64) -> f64 {
    (category - 1.0) / 6.0
}

/// Strictly greater than `tau` is a hit.
pub fn category_to_hit(category: ElementCategory, tau: u8) -> bool {
    category.digit() > tau
}

/// Raw backend scores over one closed alphabet, in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    alphabet: Alphabet,
    values: Vec<f64>,
}

impl LogitVector {
    pub fn new(alphabet: Alphabet, values: Vec<f64>) -> Result<Self, CodecError> {
        if values.len() != alphabet.len() {
            return Err(CodecError::Length {
                alphabet,
                expected: alphabet.len(),
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(CodecError::NonFinite { index, value });
        }
        Ok(Self { alphabet, values })
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same logits with `offset` added to every entry.
    pub fn shifted(&self, offset: f64) -> Self {
        Self {
            alphabet: self.alphabet,
            values: self.values.iter().map(|v| v + offset).collect(),
        }
    }

    fn expect(&self, alphabet: Alphabet) -> Result<(), CodecError> {
        if self.alphabet == alphabet {
            Ok(())
        } else {
            Err(CodecError::AlphabetMismatch {
                expected: alphabet,
                got: self.alphabet,
            })
        }
    }
}

/// Probabilities over one closed alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    alphabet: Alphabet,
    probabilities: Vec<f64>,
}

impl Distribution {
    /// Accepts any nonnegative vector summing to one within `1e-9`.
    pub fn new(alphabet: Alphabet, probabilities: Vec<f64>) -> Result<Self, CodecError> {
        if probabilities.len() != alphabet.len() {
            return Err(CodecError::Length {
                alphabet,
                expected: alphabet.len(),
                got: probabilities.len(),
            });
        }
        for (index, &p) in probabilities.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(CodecError::NonFinite { index, value: p });
            }
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CodecError::OutOfRange {
                value: total,
                lo: 1.0,
                hi: 1.0,
            });
        }
        Ok(Self {
            alphabet,
            probabilities,
        })
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Zero-based index of the most probable label; the first wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probabilities)
    }

    pub fn argmax_label(&self) -> char {
        self.alphabet.labels()[self.argmax()]
    }

    /// `Σ p_i · i` with labels numbered from one.
    pub fn expected_index(&self) -> f64 {
        self.probabilities
            .iter()
            .enumerate()
            .map(|(i, p)| p * (i + 1) as f64)
            .sum()
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax restricted to the candidate labels, stabilised by subtracting
/// the maximum logit.
pub fn closed_set_softmax(logits: &LogitVector) -> Distribution {
    let max = logits
        .values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.values.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Distribution {
        alphabet: logits.alphabet,
        probabilities: exps.into_iter().map(|e| e / total).collect(),
    }
}

/// Expected rating index under the closed-set softmax, mapped onto `[1, 5]`.
pub fn expected_total_score(logits: &LogitVector) -> Result<f64, CodecError> {
    logits.expect(Alphabet::Rating)?;
    Ok(total_from_distribution(&closed_set_softmax(logits)))
}

pub(crate) fn total_from_distribution(dist: &Distribution) -> f64 {
    index_to_total(dist.expected_index()).clamp(1.0, 5.0)
}

/// Expected category in `[1, 7]` under the closed-set softmax.
pub fn expected_element_category(logits: &LogitVector) -> Result<f64, CodecError> {
    logits.expect(Alphabet::Element)?;
    Ok(closed_set_softmax(logits)
        .expected_index()
        .clamp(1.0, ELEMENT_CATEGORIES as f64))
}
