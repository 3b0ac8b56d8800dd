//! Seeded keyword corpus for smoke tests and overfitting checks.
//!
//! Each text is a handful of clauses like "the pasta was delicious".
//! The noun fixes the aspect category and the adjective fixes the
//! polarity, so labels are a deterministic function of the words.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabelSpace, Opinion, RawReview};

pub const DEFAULT_SIZE: usize = 50;
pub const DEFAULT_SEED: u64 = 2019;

const ASPECTS: [(&str, &[&str]); 5] = [
    ("FOOD#QUALITY", &["food", "pasta", "pizza"]),
    ("SERVICE#GENERAL", &["service", "waiter", "staff"]),
    ("AMBIENCE#GENERAL", &["decor", "music", "atmosphere"]),
    ("FOOD#PRICES", &["prices", "bill", "menu prices"]),
    ("LOCATION#GENERAL", &["location", "neighborhood", "view"]),
];

const POLARITIES: [(&str, &[&str]); 3] = [
    ("positive", &["great", "excellent", "delicious", "wonderful"]),
    ("negative", &["terrible", "awful", "rude", "disappointing"]),
    ("neutral", &["okay", "average", "ordinary", "fine"]),
];

const FILLER: [&str; 6] = [
    "we went there on a friday",
    "my friend booked a table",
    "it was a long evening",
    "we arrived at seven",
    "there were four of us",
    "i had been there before",
];

pub fn label_space() -> LabelSpace {
    LabelSpace::new(
        ASPECTS.iter().map(|(a, _)| a.to_string()).collect(),
        POLARITIES.iter().map(|(p, _)| p.to_string()).collect(),
    )
    .expect("static label space is valid")
}

/// `n` texts with ids `synth-0000`.. Roughly one text in ten mentions no
/// aspect at all; the rest mention one to three distinct aspects.
pub fn generate(n: usize, seed: u64) -> Vec<RawReview> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..=3) };
            let mut aspect_ids: Vec<usize> = (0..ASPECTS.len()).collect();
            aspect_ids.shuffle(&mut rng);
            aspect_ids.truncate(k);

            let mut clauses = Vec::new();
            let mut opinions = Vec::new();
            for &a in &aspect_ids {
                let p = rng.random_range(0..POLARITIES.len());
                let noun = ASPECTS[a].1.choose(&mut rng).expect("non-empty keyword list");
                let adj = POLARITIES[p].1.choose(&mut rng).expect("non-empty keyword list");
                clauses.push(format!("the {noun} was {adj}"));
                opinions.push(Opinion {
                    category: ASPECTS[a].0.to_string(),
                    polarity: POLARITIES[p].0.to_string(),
                });
            }
            if k == 0 || rng.random_bool(0.3) {
                let filler = FILLER.choose(&mut rng).expect("non-empty filler list");
                let at = rng.random_range(0..=clauses.len());
                clauses.insert(at, filler.to_string());
            }
            let mut text = clauses.join(" and ");
            text.push('.');
            RawReview::new(format!("synth-{i:04}"), capitalize(&text), opinions).expect("generated categories are valid")
        })
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
