//! Knowledge signatures and cultural-flattening scores between countries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::KnowledgeItem;
use crate::harness::data::{csv_string, FORMAT_VERSION};

/// Canonical form of a knowledge string: lowercased, whitespace collapsed.
pub fn normalize_key(ck: &str) -> String {
    ck.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Activation scores per (country, knowledge string).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeCorpus {
    scores: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    clamped: usize,
}

impl KnowledgeCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record one score. Scores are clamped to `[0, 1]`; NaN is rejected.
    pub fn add(&mut self, country: &str, ck: &str, score: f64) -> Result<()> {
        if score.is_nan() {
            return Err(Error::Data(format!("NaN score for `{ck}` ({country})")));
        }
        let key = normalize_key(ck);
        if key.is_empty() {
            return Err(Error::Data(format!("empty knowledge string for {country}")));
        }
        let clamped = score.clamp(0.0, 1.0);
        if clamped != score {
            self.clamped += 1;
        }
        self.scores
            .entry(country.to_string())
            .or_default()
            .entry(key)
            .or_default()
            .push(clamped);
        Ok(())
    }

    pub fn from_items<'a>(items: impl IntoIterator<Item = &'a KnowledgeItem>) -> Result<Self> {
        let mut corpus = Self::new();
        for item in items {
            corpus.add(&item.country, &item.text, item.activation_score)?;
        }
        if corpus.clamped > 0 {
            tracing::warn!(count = corpus.clamped, "activation scores clamped to [0, 1]");
        }
        Ok(corpus)
    }

    /// Number of scores that were outside `[0, 1]` on ingestion.
    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    pub fn countries(&self) -> impl Iterator<Item = &str> {
        self.scores.keys().map(String::as_str)
    }

    pub fn scores(&self, country: &str, ck: &str) -> Option<&[f64]> {
        self.scores.get(country)?.get(&normalize_key(ck)).map(Vec::as_slice)
    }

    fn items(&self, country: &str) -> Option<&BTreeMap<String, Vec<f64>>> {
        self.scores.get(country)
    }
}

/// `mean(S) * ln(1 + |S|)` for every knowledge string `country` holds.
pub fn unnormalized_signature(corpus: &KnowledgeCorpus, country: &str) -> BTreeMap<String, f64> {
    corpus
        .items(country)
        .map(|items| {
            items
                .iter()
                .map(|(ck, s)| {
                    let n = s.len() as f64;
                    let mean = s.iter().sum::<f64>() / n;
                    (ck.clone(), mean * n.ln_1p())
                })
                .collect()
        })
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSignature {
    pub country: String,
    pub sigma: BTreeMap<String, f64>,
    /// No positive mass; the country cannot enter a CF matrix.
    pub empty: bool,
}

pub fn normalize_signature(country: &str, raw: &BTreeMap<String, f64>) -> KnowledgeSignature {
    let total: f64 = raw.values().sum();
    if total <= 0.0 {
        return KnowledgeSignature {
            country: country.to_string(),
            sigma: BTreeMap::new(),
            empty: true,
        };
    }
    KnowledgeSignature {
        country: country.to_string(),
        sigma: raw.iter().map(|(k, v)| (k.clone(), v / total)).collect(),
        empty: false,
    }
}

pub fn signature(corpus: &KnowledgeCorpus, country: &str) -> KnowledgeSignature {
    normalize_signature(country, &unnormalized_signature(corpus, country))
}

/// Knowledge strings held by every listed country.
pub fn universal_set_of<'a>(
    corpus: &KnowledgeCorpus,
    countries: impl IntoIterator<Item = &'a str>,
) -> BTreeSet<String> {
    let mut iter = countries.into_iter();
    let Some(first) = iter.next() else {
        return BTreeSet::new();
    };
    let mut u: BTreeSet<String> = corpus
        .items(first)
        .map(|m| m.keys().cloned().collect())
        .unwrap_or_default();
    for c in iter {
        match corpus.items(c) {
            Some(items) => u.retain(|k| items.contains_key(k)),
            None => u.clear(),
        }
    }
    u
}

/// Knowledge strings held by every country in the corpus.
pub fn universal_set(corpus: &KnowledgeCorpus) -> BTreeSet<String> {
    universal_set_of(corpus, corpus.countries())
}

/// `F(target -> source)`: the share of `target`'s non-universal signature mass
/// whose strings `source` also holds.
pub fn cf_score_with(
    corpus: &KnowledgeCorpus,
    target: &KnowledgeSignature,
    source: &str,
    universal: &BTreeSet<String>,
) -> f64 {
    let Some(held) = corpus.items(source) else {
        return 0.0;
    };
    let f: f64 = target
        .sigma
        .iter()
        .filter(|(ck, _)| !universal.contains(*ck) && held.contains_key(*ck))
        .fold(0.0, |acc, (_, w)| acc + w);
    f.clamp(0.0, 1.0)
}

/// `F(target -> source)` over the countries that have a non-empty signature.
pub fn cf_score(corpus: &KnowledgeCorpus, target: &str, source: &str) -> Result<f64> {
    let sigs = eligible_signatures(corpus);
    let t = sigs
        .iter()
        .find(|s| s.country == target)
        .ok_or_else(|| Error::Precondition(format!("{target} has no non-empty signature")))?;
    if !sigs.iter().any(|s| s.country == source) {
        return Err(Error::Precondition(format!("{source} has no non-empty signature")));
    }
    let u = universal_set_of(corpus, sigs.iter().map(|s| s.country.as_str()));
    Ok(cf_score_with(corpus, t, source, &u))
}

fn eligible_signatures(corpus: &KnowledgeCorpus) -> Vec<KnowledgeSignature> {
    corpus
        .countries()
        .map(|c| signature(corpus, c))
        .filter(|s| {
            if s.empty {
                tracing::warn!(country = %s.country, "empty knowledge signature; country excluded");
            }
            !s.empty
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfEntry {
    pub target: String,
    pub source: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfMatrix {
    pub countries: Vec<String>,
    /// Countries dropped for having an empty signature.
    pub excluded: Vec<String>,
    pub universal: BTreeSet<String>,
    /// Every ordered pair of distinct eligible countries, sorted by (target, source).
    pub entries: Vec<CfEntry>,
    /// Mean of all entries.
    pub mean: f64,
    /// Entries at or above the mean.
    pub visual: Vec<CfEntry>,
}

impl CfMatrix {
    pub fn get(&self, target: &str, source: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.target == target && e.source == source)
            .map(|e| e.score)
    }

    /// `target,source,score` rows.
    pub fn to_csv(&self) -> Result<String> {
        csv_string(&self.entries)
    }

    /// Visualization subset as `source,target,weight` links. Knowledge flows
    /// from the source culture into the flattened target.
    pub fn links_csv(&self) -> Result<String> {
        let links: Vec<Link> = self
            .visual
            .iter()
            .map(|e| Link {
                source: &e.source,
                target: &e.target,
                weight: e.score,
            })
            .collect();
        csv_string(&links)
    }

    /// Visualization subset as a DOT digraph.
    pub fn to_dot(&self) -> String {
        let mut out = format!("// format_version={FORMAT_VERSION}\ndigraph cf {{\n");
        for c in &self.countries {
            let _ = writeln!(out, "  {c:?};");
        }
        for e in &self.visual {
            let _ = writeln!(out, "  {:?} -> {:?} [weight={}];", e.source, e.target, e.score);
        }
        out.push_str("}\n");
        out
    }
}

#[derive(Serialize)]
struct Link<'a> {
    source: &'a str,
    target: &'a str,
    weight: f64,
}

pub fn cf_matrix(corpus: &KnowledgeCorpus) -> Result<CfMatrix> {
    let sigs = eligible_signatures(corpus);
    let excluded: Vec<String> = corpus
        .countries()
        .filter(|c| !sigs.iter().any(|s| s.country == *c))
        .map(str::to_string)
        .collect();
    if sigs.len() < 2 {
        return Err(Error::Config(format!(
            "CF matrix needs at least 2 countries with knowledge, got {}",
            sigs.len()
        )));
    }
    let countries: Vec<String> = sigs.iter().map(|s| s.country.clone()).collect();
    let universal = universal_set_of(corpus, countries.iter().map(String::as_str));
    let entries: Vec<CfEntry> = sigs
        .par_iter()
        .flat_map_iter(|t| {
            let universal = &universal;
            countries
                .iter()
                .filter(move |s| **s != t.country)
                .map(move |s| CfEntry {
                    target: t.country.clone(),
                    source: s.clone(),
                    score: cf_score_with(corpus, t, s, universal),
                })
        })
        .collect();
    let mean = entries.iter().map(|e| e.score).sum::<f64>() / entries.len() as f64;
    let visual = entries.iter().filter(|e| e.score >= mean).cloned().collect();
    Ok(CfMatrix {
        countries,
        excluded,
        universal,
        entries,
        mean,
        visual,
    })
}
