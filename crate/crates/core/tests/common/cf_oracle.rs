//! Flattening scores straight from the definitions, with hash maps.

use std::collections::{HashMap, HashSet};

use culturescope::cf::KnowledgeCorpus;
use rand::Rng;

pub type Data = HashMap<String, HashMap<String, Vec<f64>>>;

pub fn naive_matrix(data: &Data) -> HashMap<(String, String), f64> {
    let mut sigs: HashMap<&String, HashMap<&String, f64>> = HashMap::new();
    for (c, items) in data {
        let mut raw = HashMap::new();
        let mut total = 0.0;
        for (k, s) in items {
            let v = s.iter().sum::<f64>() / s.len() as f64 * (1.0 + s.len() as f64).ln();
            total += v;
            raw.insert(k, v);
        }
        if total > 0.0 {
            sigs.insert(c, raw.into_iter().map(|(k, v)| (k, v / total)).collect());
        }
    }
    let eligible: Vec<&String> = sigs.keys().copied().collect();
    let universal: HashSet<&String> = data[eligible[0]]
        .keys()
        .filter(|k| eligible.iter().all(|c| data[*c].contains_key(*k)))
        .collect();
    let mut out = HashMap::new();
    for t in &eligible {
        for s in &eligible {
            if t == s {
                continue;
            }
            let f: f64 = sigs[t]
                .iter()
                .filter(|(k, _)| !universal.contains(*k) && data[*s].contains_key(**k))
                .map(|(_, v)| v)
                .sum();
            out.insert(((*t).clone(), (*s).clone()), f);
        }
    }
    out
}

pub fn random_data(rng: &mut impl Rng) -> Data {
    let n_countries = rng.random_range(2..6);
    let n_keys = rng.random_range(1..8);
    let mut data: Data = HashMap::new();
    for c in 0..n_countries {
        let country = format!("C{c}");
        let items = data.entry(country).or_default();
        for k in 0..n_keys {
            if rng.random_bool(0.5) {
                let n = rng.random_range(1..4);
                let scores = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
                items.insert(format!("k{k}"), scores);
            }
        }
        if items.is_empty() {
            items.insert("k0".into(), vec![0.5]);
        }
    }
    data
}

pub fn to_corpus(data: &Data) -> KnowledgeCorpus {
    let mut c = KnowledgeCorpus::new();
    for (country, items) in data {
        for (k, scores) in items {
            for s in scores {
                c.add(country, k, *s).unwrap();
            }
        }
    }
    c
}
