use culturescope::harness::eval::{EvalRecord, RefusalReason};
use culturescope::harness::prompts::SchemeKind;
use culturescope::mcq::{LabelKind, McqInstance, OptionLabel, Region, ResourceLevel, Variant};

fn label(kind: LabelKind) -> OptionLabel {
    OptionLabel {
        kind,
        country: "XX".into(),
        resource_group: ResourceLevel::Mid,
        region_group: Region::Europe,
    }
}

/// Gold first, then one hard negative and two random distractors.
pub fn instance(i: usize, target: ResourceLevel) -> McqInstance {
    let mut labels = vec![
        label(LabelKind::Gold),
        label(LabelKind::HardNegative),
        label(LabelKind::Random),
        label(LabelKind::Random),
    ];
    labels[0].country = "GR".into();
    labels[0].resource_group = target;
    McqInstance {
        id: format!("i{i}"),
        question_id: "q".into(),
        country: "GR".into(),
        question: "q?".into(),
        options: ["a", "b", "c", "d"].map(String::from).to_vec(),
        labels,
        gold_index: 0,
        golds: vec!["a".into()],
        variant: Variant::Region,
        seed: 0,
    }
}

/// `None` is a refusal; index 0 is the gold.
pub fn record(i: usize, chosen: Option<usize>) -> EvalRecord {
    EvalRecord {
        instance_id: format!("i{i}"),
        scheme: SchemeKind::Baseline,
        prompt: String::new(),
        output: String::new(),
        matched: chosen == Some(0),
        refusal: chosen.is_none(),
        refusal_reason: chosen.is_none().then_some(RefusalReason::Unparsable),
        chosen,
    }
}
