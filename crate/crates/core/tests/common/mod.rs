#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tialign_core::dataset::{ElementAnnotation, PromptType, SamplePair, Split};

const SUBJECTS: [&str; 5] = ["dog", "cat", "horse", "robot", "teapot"];
const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
const PLACES: [&str; 4] = ["beach", "kitchen", "forest", "rooftop"];

/// Deterministic labeled sample with three elements.
pub fn sample(index: usize, split: Split, seed: u64) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let subject = SUBJECTS[index % SUBJECTS.len()];
    let color = COLORS[(index / 5) % COLORS.len()];
    let place = PLACES[(index / 3) % PLACES.len()];
    let mut element = |name: &str, category: &str| {
        let score = (rng.random_range(0..=6) as f64) / 6.0;
        ElementAnnotation::new(format!("{name} ({category})"), category, Some(score))
    };
    let elements = vec![
        element(subject, "animal"),
        element(color, "color"),
        element(place, "location"),
    ];
    SamplePair {
        sample_id: format!("{split}-{index:04}"),
        prompt_id: format!("p{index:04}"),
        prompt: format!("a {color} {subject} on a {place}"),
        prompt_type: if index.is_multiple_of(2) {
            PromptType::Real
        } else {
            PromptType::Synthetic
        },
        image_ref: format!("images/{split}-{index:04}.png"),
        split,
        total_score: Some(1.0 + rng.random_range(0..=16) as f64 * 0.25),
        elements,
        meaninglessness: rng.random_range(0.0..0.5),
        split_confidence: rng.random_range(0.5..1.0),
        attribute_confidence: rng.random_range(0.5..1.0),
        extra: Default::default(),
    }
}

pub fn samples(n: usize, split: Split, seed: u64) -> Vec<SamplePair> {
    (0..n).map(|i| sample(i, split, seed)).collect()
}
