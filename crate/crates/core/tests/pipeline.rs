use std::sync::Arc;

use culturescope::filter::EmbedderConfig;
use culturescope::harness::synthetic::{letters_only_weights, synthetic_qa};
use culturescope::mcq::CountryTable;
use culturescope::model::{CaptureSpec, Model, ModelConfig, ModelWeights};
use culturescope::pipeline::{
    condense, parse_knowledge, pos_weight_mask, run_pipeline, FlagReason, InspectionPrompt, Pipeline, PipelineConfig,
    PosTagger, StoplistTagger, TokenWeightMask, WordClass, DEFAULT_INSPECTION_PROMPT,
};
use culturescope::Error;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn text_model(seed: u64) -> Model {
    Model::new(ModelWeights::random(ModelConfig::tiny_text(), seed).unwrap())
}

fn full_trace(model: &Model, ids: Vec<usize>) -> culturescope::model::ResidualTrace {
    let seq = model.sequence(ids).unwrap();
    model.forward(&seq, &CaptureSpec::all(model.config())).unwrap().trace
}

#[test]
fn one_hot_mask_returns_captured_vector() {
    let model = Model::new(ModelWeights::random(ModelConfig::tiny(), 1).unwrap());
    let trace = full_trace(&model, vec![5, 6, 7, 8, 9, 10]);
    for layer in 1..=2 {
        for k in 0..4 {
            let c = condense(&trace, &TokenWeightMask::one_hot(4, k), layer, 2, "q").unwrap();
            assert_eq!(c.vector, trace.hidden(layer, 2 + k).unwrap().to_vec());
            assert_eq!(c.weight_sum, 1);
        }
    }
}

#[test]
fn two_position_mask_is_elementwise_sum() {
    let model = Model::new(ModelWeights::random(ModelConfig::tiny(), 2).unwrap());
    let trace = full_trace(&model, vec![11, 12, 13]);
    let c = condense(&trace, &TokenWeightMask::new(vec![1, 1]).unwrap(), 2, 1, "q").unwrap();
    let (a, b) = (trace.hidden(2, 1).unwrap(), trace.hidden(2, 2).unwrap());
    let by_hand: Vec<f64> = (0..8).map(|i| a[i] + b[i]).collect();
    assert_eq!(c.vector, by_hand);
}

#[test]
fn disjoint_masks_add() {
    let model = Model::new(ModelWeights::random(ModelConfig::tiny(), 3).unwrap());
    let trace = full_trace(&model, (1..13).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let n = 10;
        let owner: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let m1 = TokenWeightMask::new(owner.iter().map(|&o| u8::from(o == 1)).collect()).unwrap();
        let m2 = TokenWeightMask::new(owner.iter().map(|&o| u8::from(o == 2)).collect()).unwrap();
        let union = m1.disjoint_union(&m2).unwrap();
        let (c1, c2, cu) = (
            condense(&trace, &m1, 1, 2, "q").unwrap(),
            condense(&trace, &m2, 1, 2, "q").unwrap(),
            condense(&trace, &union, 1, 2, "q").unwrap(),
        );
        for i in 0..8 {
            assert!((c1.vector[i] + c2.vector[i] - cu.vector[i]).abs() < 1e-12);
        }
        assert_eq!(cu.weight_sum, c1.weight_sum + c2.weight_sum);
    }
    // Single-position parts: the sums are formed in the same order, so bit-exact.
    let (m1, m2) = (TokenWeightMask::one_hot(10, 3), TokenWeightMask::one_hot(10, 7));
    let cu = condense(&trace, &m1.disjoint_union(&m2).unwrap(), 1, 2, "q").unwrap();
    let (c1, c2) = (
        condense(&trace, &m1, 1, 2, "q").unwrap(),
        condense(&trace, &m2, 1, 2, "q").unwrap(),
    );
    for i in 0..8 {
        assert_eq!((c1.vector[i] + c2.vector[i]).to_bits(), cu.vector[i].to_bits());
    }
    assert!(m1.disjoint_union(&m1).is_err());
}

#[test]
fn zero_mask_condenses_to_zero_and_bad_masks_fail() {
    let model = Model::new(ModelWeights::random(ModelConfig::tiny(), 3).unwrap());
    let trace = full_trace(&model, vec![1, 2, 3]);
    let z = TokenWeightMask::zeros(3);
    assert!(z.is_all_zero());
    let c = condense(&trace, &z, 1, 0, "q").unwrap();
    assert_eq!(c.vector, vec![0.0; 8]);
    assert_eq!(c.weight_sum, 0);
    assert!(matches!(condense(&trace, &z, 1, 1, "q"), Err(Error::Shape(_))));
    assert!(TokenWeightMask::new(vec![0, 2]).is_err());
}

struct NeverContent;

impl PosTagger for NeverContent {
    fn tag(&self, _: &str) -> WordClass {
        WordClass::Other
    }
}

#[test]
fn all_zero_masks_are_flagged_not_probed() {
    let model = Model::new(letters_only_weights(ModelConfig::tiny_text(), 1).unwrap());
    let qa = synthetic_qa(6, &CountryTable::default(), 3);
    let out = Pipeline::new(&model, &PipelineConfig::default())
        .unwrap()
        .with_tagger(Arc::new(NeverContent))
        .run(&qa);
    assert!(out.records.is_empty());
    assert_eq!(out.flags.len(), 6);
    assert!(out
        .flags
        .iter()
        .all(|f| matches!(f.reason, FlagReason::NoCondensableContent | FlagReason::EmptyAnswer)));
}

#[test]
fn single_proper_noun_answer_is_fully_weighted() {
    let model = text_model(1);
    let ids = model.tokenize("Zakynthos").unwrap().ids().to_vec();
    let mask = pos_weight_mask(&model, &ids, &StoplistTagger);
    assert_eq!(mask.weights(), &[1u8; 9]);
}

const CONTENT: &[&str] = &[
    "tea",
    "dumplings",
    "cook",
    "festival",
    "zakynthos",
    "family",
    "gathering",
    "rice",
    "dance",
    "eat",
];
const FUNCTION: &[&str] = &["the", "of", "and", "with", "a", "in", "to", "is", "their"];
const PUNCT: &[&str] = &["", "", ",", ".", "!", "\""];

/// Byte-level expected weights from the word lists alone.
fn lexicon_mask(text: &str) -> Vec<u8> {
    let mut out = vec![0u8; text.len()];
    let mut start = 0;
    for piece in text.split(' ') {
        let trimmed = piece.trim_matches(|c: char| c.is_ascii_punctuation());
        if CONTENT.contains(&trimmed.to_lowercase().as_str()) {
            let off = piece.find(trimmed).unwrap();
            out[start + off..start + off + trimmed.len()].fill(1);
        }
        start += piece.len() + 1;
    }
    out
}

#[test]
fn pos_mask_agrees_with_lexicon_oracle() {
    let model = text_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let n = rng.random_range(1..7);
        let words: Vec<String> = (0..n)
            .map(|_| {
                let w = if rng.random_bool(0.5) { CONTENT } else { FUNCTION }
                    .choose(&mut rng)
                    .unwrap();
                let w = if rng.random_bool(0.2) {
                    w.to_uppercase()
                } else {
                    w.to_string()
                };
                format!(
                    "{}{}{}",
                    PUNCT.choose(&mut rng).unwrap(),
                    w,
                    PUNCT.choose(&mut rng).unwrap()
                )
            })
            .collect();
        let text = words.join(" ");
        let ids = model.tokenize(&text).unwrap().ids().to_vec();
        let mask = pos_weight_mask(&model, &ids, &StoplistTagger);
        assert_eq!(mask.weights(), lexicon_mask(&text).as_slice(), "{text:?}");
    }
}

#[test]
fn knowledge_parser_splits_and_dedups() {
    assert_eq!(
        parse_knowledge("Tea, Family gathering, , Tea"),
        vec!["tea", "family gathering"]
    );
    assert_eq!(parse_knowledge("a\nb  c,\n"), vec!["a", "b c"]);
    assert!(parse_knowledge(" , ,").is_empty());
}

#[test]
fn inspection_placeholder_is_final_token() {
    let model = text_model(1);
    let p = InspectionPrompt::new(DEFAULT_INSPECTION_PROMPT, &model).unwrap();
    assert_eq!(p.placeholder_position(), DEFAULT_INSPECTION_PROMPT.len() - 1);
    assert!(InspectionPrompt::new("words, y", &model).is_err());
    assert!(InspectionPrompt::new("words, box", &model).is_err());
}

#[test]
fn layer_resolution() {
    let mut c = PipelineConfig::default();
    assert_eq!(c.resolved_layers(2).unwrap(), vec![1]);
    assert_eq!(c.resolved_layers(5).unwrap(), vec![3]);
    c.layers = Some(vec![2, 1, 2]);
    assert_eq!(c.resolved_layers(2).unwrap(), vec![1, 2]);
    c.layers = Some(vec![0]);
    assert!(c.resolved_layers(2).is_err());
    c.layers = Some(vec![3]);
    assert!(c.resolved_layers(2).is_err());
}

#[test]
fn synthetic_run_is_deterministic_and_serializable() {
    let model = Model::new(letters_only_weights(ModelConfig::tiny_text(), 1).unwrap());
    let qa = synthetic_qa(20, &CountryTable::default(), 5);
    let cfg = PipelineConfig {
        layers: Some(vec![1, 2]),
        embedder: EmbedderConfig::Hashing { dim: 2 },
        ..PipelineConfig::default()
    };
    let a = run_pipeline(&model, &qa, &cfg).unwrap();
    let b = run_pipeline(&model, &qa, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.records.len() / 2 + a.flags.len(), 20);
    assert!(a.records.iter().any(|r| !r.items.is_empty()));
    for r in &a.records {
        assert!(r.mask_weight_sum > 0);
        for it in &r.items {
            assert!(it.activation_score > cfg.threshold);
            assert!(!it.text.trim().is_empty());
            assert_eq!(it.country, r.country);
        }
    }
    let ids: Vec<_> = a.records.iter().map(|r| (&r.instance_id, r.layer)).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
}
