use std::collections::BTreeSet;

use culturescope::mcq::{CountryTable, LabelKind, McqInstance, ResourceLevel, SharedQuestion, Variant};

pub fn family_game() -> SharedQuestion {
    let answers = [
        ("CN", "Mahjong"),
        ("KR", "Yutnori"),
        ("US", "Monopoly"),
        ("GB", "Scrabble"),
        ("ES", "Parchis"),
        ("MX", "Loteria"),
        ("GR", "Tavli"),
        ("ID", "Congklak"),
        ("ET", "Gebeta"),
        ("AZ", "Nard"),
        ("NG", "Dara"),
        ("DZ", "Dames"),
        ("IN-AS", "Kori"),
        ("IR", "Backgammon"),
    ];
    SharedQuestion {
        id: "family-game".into(),
        question: "What is a popular family game in {country}?".into(),
        answers: answers
            .iter()
            .map(|(c, a)| (c.to_string(), vec![a.to_string()]))
            .collect(),
    }
}

/// Option and label invariants every emitted instance must satisfy.
pub fn check_instance(inst: &McqInstance, table: &CountryTable) {
    inst.validate().unwrap();
    let opts: BTreeSet<String> = inst.options.iter().map(|o| o.to_lowercase()).collect();
    assert_eq!(opts.len(), 4);
    assert_eq!(inst.labels.iter().filter(|l| l.kind == LabelKind::Gold).count(), 1);
    let target = table.get(&inst.country).unwrap();
    let negs: Vec<_> = inst.labels.iter().filter(|l| l.kind != LabelKind::Gold).collect();
    assert!(negs.iter().all(|l| l.country != inst.country));
    match inst.variant {
        Variant::Resource => {
            assert!(negs.iter().all(|l| l.kind == LabelKind::HardNegative));
            let levels: BTreeSet<_> = negs.iter().map(|l| l.resource_group).collect();
            assert_eq!(levels, ResourceLevel::ALL.into_iter().collect());
        }
        Variant::Region => {
            let same: Vec<_> = negs.iter().filter(|l| l.region_group == target.region_group).collect();
            assert_eq!(same.len(), 1);
            assert_eq!(same[0].kind, LabelKind::HardNegative);
            let randoms: Vec<_> = negs.iter().filter(|l| l.kind == LabelKind::Random).collect();
            assert_eq!(randoms.len(), 2);
            assert_ne!(randoms[0].region_group, randoms[1].region_group);
        }
    }
}
