//! Seeded synthetic datasets for smoke runs and golden tests.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mcq::{CountryTable, SharedQuestion, COUNTRY_PLACEHOLDER};
use crate::model::{ModelConfig, ModelWeights};
use crate::pipeline::QAInstance;

/// Seeded random weights whose greedy output stays within lowercase letters,
/// space, comma and end-of-sequence, so untrained runs still produce words.
///
/// The unembedding columns of every other token are zeroed and the kept
/// columns amplified.
pub fn letters_only_weights(config: ModelConfig, seed: u64) -> Result<ModelWeights> {
    let (cfg, emb, layers, mut unemb) = ModelWeights::random(config, seed)?.into_parts();
    let gain = |id: usize| match id.checked_sub(1).and_then(|b| u8::try_from(b).ok()) {
        Some(b',') => 6.0,
        Some(b' ') => 5.0,
        Some(b) if b.is_ascii_lowercase() => 4.0,
        Some(_) => 0.0,
        None => 1.0,
    };
    for (id, mut col) in unemb.columns_mut().into_iter().enumerate() {
        col *= gain(id);
    }
    ModelWeights::from_parts(cfg, emb, layers, unemb)
}

struct Domain {
    name: &'static str,
    entity: &'static str,
    question: &'static str,
    vocab: &'static [&'static str],
}

const DOMAINS: [Domain; 5] = [
    Domain {
        name: "food",
        entity: "food",
        question: "What is a common breakfast food in {country}?",
        vocab: &[
            "porridge",
            "flatbread",
            "dumplings",
            "rice soup",
            "beans",
            "omelette",
            "pancakes",
            "yogurt",
            "tortilla",
            "noodles",
            "toast",
            "injera",
            "fried dough",
            "cheese pie",
        ],
    },
    Domain {
        name: "sport",
        entity: "sport",
        question: "What is the most popular sport in {country}?",
        vocab: &[
            "football",
            "cricket",
            "wrestling",
            "basketball",
            "baseball",
            "table tennis",
            "volleyball",
            "running",
            "archery",
            "polo",
            "boxing",
            "cycling",
            "handball",
        ],
    },
    Domain {
        name: "family",
        entity: "game",
        question: "What is a popular family game in {country}?",
        vocab: &[
            "mahjong", "monopoly", "yutnori", "tavli", "gebeta", "parchis", "loteria", "nard", "carrom", "dominoes",
            "ludo", "chess", "oware", "checkers",
        ],
    },
    Domain {
        name: "holiday",
        entity: "festival",
        question: "What is an important holiday in {country}?",
        vocab: &[
            "new year",
            "harvest festival",
            "spring festival",
            "independence day",
            "lantern night",
            "bihu",
            "nowruz",
            "easter",
            "timkat",
            "day of the dead",
            "eid",
            "chuseok",
            "carnival",
        ],
    },
    Domain {
        name: "education",
        entity: "subject",
        question: "Which school subject do students in {country} study most?",
        vocab: &[
            "mathematics",
            "history",
            "english",
            "science",
            "literature",
            "geography",
            "music",
            "religion",
            "physics",
            "arts",
            "languages",
            "economics",
        ],
    },
];

/// `n` open-ended instances cycling through the table's countries. Every
/// fifth instance is an extraction item.
pub fn synthetic_qa(n: usize, table: &CountryTable, seed: u64) -> Vec<QAInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let countries: Vec<_> = table.entries().collect();
    (0..n)
        .map(|i| {
            let c = countries[i % countries.len()];
            let d = &DOMAINS[(i / countries.len() + i) % DOMAINS.len()];
            let answer = d.vocab.choose(&mut rng).expect("non-empty vocab").to_string();
            let id = format!("qa-{i:03}");
            if i % 5 == 4 {
                QAInstance {
                    id,
                    question: format!("Last weekend in {} we enjoyed {answer} with the neighbours.", c.name),
                    country: c.code.clone(),
                    answers: vec![answer],
                    domain: d.name.to_string(),
                    entity_type: Some(d.entity.to_string()),
                }
            } else {
                QAInstance {
                    id,
                    question: d.question.replace(COUNTRY_PLACEHOLDER, &c.name),
                    country: c.code.clone(),
                    answers: vec![answer],
                    domain: d.name.to_string(),
                    entity_type: None,
                }
            }
        })
        .collect()
}

/// `n` shared questions answered by every country in the table. Answers are
/// drawn with replacement, so some collide on purpose.
pub fn synthetic_shared_questions(n: usize, table: &CountryTable, seed: u64) -> Vec<SharedQuestion> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let d = &DOMAINS[i % DOMAINS.len()];
            SharedQuestion {
                id: format!("sq-{i:03}"),
                question: d.question.to_string(),
                answers: table
                    .entries()
                    .map(|e| {
                        let a = d.vocab.choose(&mut rng).expect("non-empty vocab");
                        (e.code.clone(), vec![a.to_string()])
                    })
                    .collect(),
            }
        })
        .collect()
}
