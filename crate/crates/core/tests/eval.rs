mod common;

use common::records::{instance, record};
use culturescope::attention::Grouping;
use culturescope::harness::eval::{
    exact_match, mcq_metrics, parse_mcq_choice, McqChoice, RefusalLexicon, RefusalReason,
};
use culturescope::harness::prompts::{
    render_prompt, PromptContext, PromptScheme, PromptTask, SchemeKind, TemplateKind,
};
use culturescope::mcq::ResourceLevel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn baseline_template_is_verbatim() {
    let scheme = PromptScheme {
        kind: SchemeKind::Baseline,
        template: TemplateKind::CommonsenseQa,
    };
    let p = render_prompt(
        &scheme,
        PromptTask::Question("What is eaten at weddings?"),
        PromptContext::default(),
    )
    .unwrap();
    assert_eq!(
        p.text,
        "Answer the question.\n\nQuestion: What is eaten at weddings?\n\nProvide your answer as \"Answer: [Answer]\""
    );
}

#[test]
fn country_schemes_need_their_context() {
    let q = PromptTask::Question("q?");
    let cultural = PromptScheme {
        kind: SchemeKind::Cultural,
        template: TemplateKind::CommonsenseQa,
    };
    assert!(render_prompt(&cultural, q, PromptContext::default()).is_err());
    let p = render_prompt(
        &cultural,
        q,
        PromptContext {
            country: Some("Greece"),
            knowledge: None,
        },
    )
    .unwrap();
    assert!(p
        .text
        .starts_with("You are given a question about Greece. Answer the question."));
    let aug = PromptScheme {
        kind: SchemeKind::KnowledgeAugmented,
        template: TemplateKind::CommonsenseQa,
    };
    assert!(render_prompt(
        &aug,
        q,
        PromptContext {
            country: Some("Greece"),
            knowledge: None
        }
    )
    .is_err());
    let concepts = ["tavli".to_string(), "easter".to_string()];
    let p = render_prompt(
        &aug,
        q,
        PromptContext {
            country: Some("Greece"),
            knowledge: Some(&concepts),
        },
    )
    .unwrap();
    assert!(p.text.contains("Concepts: tavli, easter"));
}

#[test]
fn exact_match_cases() {
    let golds = vec!["Zakynthos".to_string()];
    assert!(exact_match("Answer: Zakynthos", &golds, false));
    assert!(exact_match("Answer: Zakynthos", &golds, true));
    assert!(exact_match("answer:   ZAKYNTHOS.", &golds, true));
    assert!(exact_match("I think it is zakynthos island", &golds, false));
    assert!(!exact_match("I think it is zakynthos island", &golds, true));
    assert!(!exact_match("Corfu", &golds, false));
    assert!(!exact_match("anything", &["  ".to_string()], false));
}

#[test]
fn refusal_lexicon() {
    let lex = RefusalLexicon::default();
    assert_eq!(
        lex.matches("I cannot determine a culturally specific answer."),
        Some(RefusalReason::Phrase)
    );
    assert_eq!(lex.matches("I don’t know"), Some(RefusalReason::Phrase));
    assert_eq!(lex.matches("   "), Some(RefusalReason::Empty));
    assert_eq!(lex.matches("Tea"), None);
}

#[test]
fn mcq_choice_parsing() {
    let opts: Vec<String> = ["Mahjong", "Yutnori", "Monopoly", "Tavli"].map(String::from).to_vec();
    let lex = RefusalLexicon::default();
    let pick = |s| parse_mcq_choice(s, &opts, &lex);
    assert_eq!(pick("Answer: C"), McqChoice::Option { index: 2 });
    assert_eq!(pick("answer: b."), McqChoice::Option { index: 1 });
    assert_eq!(pick("D"), McqChoice::Option { index: 3 });
    assert_eq!(pick("I would say Yutnori"), McqChoice::Option { index: 1 });
    assert_eq!(
        pick("Mahjong or Tavli"),
        McqChoice::Refusal {
            reason: RefusalReason::Unparsable
        }
    );
    assert_eq!(
        pick("I cannot answer"),
        McqChoice::Refusal {
            reason: RefusalReason::Phrase
        }
    );
    assert_eq!(
        pick(""),
        McqChoice::Refusal {
            reason: RefusalReason::Empty
        }
    );
    assert_eq!(
        pick("Answer: E"),
        McqChoice::Refusal {
            reason: RefusalReason::Unparsable
        }
    );
}

#[test]
fn ten_record_metrics() {
    let choices = [
        Some(0),
        Some(0),
        Some(0),
        Some(0),
        Some(0),
        Some(1),
        Some(1),
        Some(2),
        Some(3),
        None,
    ];
    let ds: Vec<_> = (0..10).map(|i| instance(i, ResourceLevel::Mid)).collect();
    let recs: Vec<_> = choices.iter().enumerate().map(|(i, c)| record(i, *c)).collect();
    let m = mcq_metrics(&recs, &ds, Grouping::Resource).unwrap();
    let all = &m[0];
    assert_eq!(all.group, "all");
    assert_eq!(
        (all.accuracy, all.pct_biased, all.pct_others, all.refusal_rate),
        (0.5, 0.2, 0.1, 0.1)
    );
    let mid = m.iter().find(|r| r.group == "Mid").unwrap();
    assert_eq!(mid.support, 10);
    assert!((all.partition_sum() - 1.0).abs() < 1e-12);
}

#[test]
fn partition_identity_on_fuzzed_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let ds: Vec<_> = (0..n)
            .map(|i| instance(i, ResourceLevel::ALL[rng.random_range(0..3)]))
            .collect();
        let recs: Vec<_> = (0..n)
            .map(|i| {
                record(
                    i,
                    if rng.random_bool(0.1) {
                        None
                    } else {
                        Some(rng.random_range(0..4))
                    },
                )
            })
            .collect();
        for row in mcq_metrics(&recs, &ds, Grouping::Resource).unwrap() {
            if row.support > 0 {
                assert!((row.partition_sum() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn metrics_need_aligned_records() {
    let ds: Vec<_> = (0..2).map(|i| instance(i, ResourceLevel::High)).collect();
    assert!(mcq_metrics(&[record(0, Some(0))], &ds, Grouping::Resource).is_err());
    assert!(mcq_metrics(&[record(1, Some(0)), record(0, Some(0))], &ds, Grouping::Resource).is_err());
}

proptest! {
    #[test]
    fn more_golds_never_unmatch(out in "[a-z ]{0,30}", golds in prop::collection::vec("[a-z]{1,6}", 1..4), extra in "[a-z]{1,6}") {
        let mut more = golds.clone();
        more.push(extra);
        for strict in [false, true] {
            if exact_match(&out, &golds, strict) {
                prop_assert!(exact_match(&out, &more, strict));
            }
        }
        if exact_match(&out, &golds, true) {
            prop_assert!(exact_match(&out, &golds, false));
        }
    }
}
