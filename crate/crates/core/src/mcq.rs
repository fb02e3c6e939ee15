//! Multiple-choice questions with culturally hard negatives.
//!
//! Every option is the gold answer of some country. The resource variant
//! draws one distractor from each resource level; the region variant draws
//! one distractor from the target's own region and two from two other
//! regions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const COUNTRY_PLACEHOLDER: &str = "{country}";
pub const MAX_RESAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResourceLevel {
    High,
    Mid,
    Low,
}

impl ResourceLevel {
    pub const ALL: [ResourceLevel; 3] = [ResourceLevel::High, ResourceLevel::Mid, ResourceLevel::Low];

    pub fn as_str(&self) -> &'static str {
        match self {
            ResourceLevel::High => "High",
            ResourceLevel::Mid => "Mid",
            ResourceLevel::Low => "Low",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "South Asia")]
    SouthAsia,
    #[serde(rename = "East Asia")]
    EastAsia,
    #[serde(rename = "West Asia")]
    WestAsia,
    Europe,
    #[serde(rename = "North America")]
    NorthAmerica,
    Africa,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::SouthAsia,
        Region::EastAsia,
        Region::WestAsia,
        Region::Europe,
        Region::NorthAmerica,
        Region::Africa,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Region::SouthAsia => "South Asia",
            Region::EastAsia => "East Asia",
            Region::WestAsia => "West Asia",
            Region::Europe => "Europe",
            Region::NorthAmerica => "North America",
            Region::Africa => "Africa",
        }
    }
}

impl fmt::Display for ResourceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountryEntry {
    pub code: String,
    pub name: String,
    pub resource_group: ResourceLevel,
    pub region_group: Region,
}

/// Country groups keyed by code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountryTable {
    entries: BTreeMap<String, CountryEntry>,
}

const DEFAULT_COUNTRIES: [(&str, &str, ResourceLevel, Region); 14] = [
    ("DZ", "Algeria", ResourceLevel::High, Region::Africa),
    ("CN", "China", ResourceLevel::High, Region::EastAsia),
    ("IR", "Iran", ResourceLevel::High, Region::WestAsia),
    ("MX", "Mexico", ResourceLevel::High, Region::NorthAmerica),
    ("ES", "Spain", ResourceLevel::High, Region::Europe),
    ("GB", "UK", ResourceLevel::High, Region::Europe),
    ("US", "US", ResourceLevel::High, Region::NorthAmerica),
    ("GR", "Greece", ResourceLevel::Mid, Region::Europe),
    ("ID", "Indonesia", ResourceLevel::Mid, Region::SouthAsia),
    ("KR", "South Korea", ResourceLevel::Mid, Region::EastAsia),
    ("IN-AS", "Assam", ResourceLevel::Low, Region::SouthAsia),
    ("AZ", "Azerbaijan", ResourceLevel::Low, Region::WestAsia),
    ("ET", "Ethiopia", ResourceLevel::Low, Region::Africa),
    ("NG", "Northern Nigeria", ResourceLevel::Low, Region::Africa),
];

impl Default for CountryTable {
    /// The 14-country table with resource levels and regions.
    fn default() -> Self {
        Self::new(DEFAULT_COUNTRIES.iter().map(|&(code, name, r, g)| CountryEntry {
            code: code.into(),
            name: name.into(),
            resource_group: r,
            region_group: g,
        }))
        .expect("default table is valid")
    }
}

impl CountryTable {
    pub fn new(entries: impl IntoIterator<Item = CountryEntry>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entries {
            if e.code.trim().is_empty() {
                return Err(Error::Data("country table row with empty code".into()));
            }
            let code = e.code.clone();
            if map.insert(code.clone(), e).is_some() {
                return Err(Error::Data(format!("country {code} listed twice")));
            }
        }
        if map.is_empty() {
            return Err(Error::Data("country table is empty".into()));
        }
        Ok(Self { entries: map })
    }

    /// CSV with header `code,name,resource_group,region_group`; `#` lines are comments.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let rows: std::result::Result<Vec<CountryEntry>, _> = reader.deserialize().collect();
        Self::new(rows.map_err(|e| Error::Data(format!("country table: {e}")))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in self.entries.values() {
            w.serialize(e).map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn get(&self, code: &str) -> Option<&CountryEntry> {
        self.entries.get(code)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CountryEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A question asked of every country, with each country's own answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedQuestion {
    pub id: String,
    /// May contain `{country}`, replaced by the target's name.
    pub question: String,
    /// Country code to gold answers; the first is used as the option string.
    pub answers: BTreeMap<String, Vec<String>>,
}

impl SharedQuestion {
    /// Countries with at least one non-blank answer.
    pub fn answered(&self) -> impl Iterator<Item = &str> {
        self.answers
            .iter()
            .filter(|(_, a)| first_answer(a).is_some())
            .map(|(c, _)| c.as_str())
    }

    pub fn option_for(&self, country: &str) -> Option<&str> {
        self.answers.get(country).and_then(|a| first_answer(a))
    }

    pub fn instantiate(&self, country_name: &str) -> String {
        self.question.replace(COUNTRY_PLACEHOLDER, country_name)
    }
}

fn first_answer(a: &[String]) -> Option<&str> {
    a.iter().map(|s| s.trim()).find(|s| !s.is_empty())
}

fn option_key(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Resource,
    Region,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Resource => "resource",
            Variant::Region => "region",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Gold,
    HardNegative,
    Random,
}

/// Provenance of one option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionLabel {
    pub kind: LabelKind,
    pub country: String,
    pub resource_group: ResourceLevel,
    pub region_group: Region,
}

impl OptionLabel {
    fn new(kind: LabelKind, entry: &CountryEntry) -> Self {
        Self {
            kind,
            country: entry.code.clone(),
            resource_group: entry.resource_group,
            region_group: entry.region_group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqInstance {
    pub id: String,
    pub question_id: String,
    pub country: String,
    pub question: String,
    pub options: Vec<String>,
    pub labels: Vec<OptionLabel>,
    pub gold_index: usize,
    /// Every gold answer of the target, for exact-match scoring.
    pub golds: Vec<String>,
    pub variant: Variant,
    pub seed: u64,
}

impl McqInstance {
    pub fn target_label(&self) -> &OptionLabel {
        &self.labels[self.gold_index]
    }

    /// Structural checks: 4 distinct options, one gold, labels aligned.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Data(format!("instance {}: {m}", self.id)));
        if self.options.len() != 4 || self.labels.len() != 4 {
            return fail("needs exactly 4 options and labels");
        }
        let keys: BTreeSet<String> = self.options.iter().map(|o| option_key(o)).collect();
        if keys.len() != 4 {
            return fail("options are not pairwise distinct");
        }
        let golds: Vec<usize> = (0..4).filter(|&i| self.labels[i].kind == LabelKind::Gold).collect();
        if golds != [self.gold_index] {
            return fail("gold_index does not match the single gold label");
        }
        if self.labels[self.gold_index].country != self.country {
            return fail("gold label is not the target country");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    /// A country in the question is missing from the table.
    UnknownCountry,
    /// Fewer than 4 countries answer the question.
    TooFewCountries,
    /// No country other than the target answers at some resource level.
    EmptyResourceLevel,
    /// No other country in the target's region answers.
    NoSameRegionCountry,
    /// Fewer than two other regions answer.
    TooFewRegions,
    /// A slot kept colliding with another option after the resample budget.
    Collision,
}

/// Why an instance could not be built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub question_id: String,
    pub country: String,
    pub variant: Variant,
    pub reason: SkipReason,
    pub detail: String,
}

impl From<Skip> for Error {
    fn from(s: Skip) -> Self {
        Error::Precondition(format!(
            "{} / {} ({}): {:?}: {}",
            s.question_id,
            s.country,
            s.variant.as_str(),
            s.reason,
            s.detail
        ))
    }
}

/// Option list before shuffling; slot 0 is the gold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McqDraft {
    pub id: String,
    pub question_id: String,
    pub country: String,
    pub question: String,
    pub options: Vec<String>,
    pub labels: Vec<OptionLabel>,
    pub golds: Vec<String>,
    pub variant: Variant,
    pub seed: u64,
}

/// Seed derived from the master seed, question id and target country only.
pub fn instance_seed(master: u64, question_id: &str, country: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((question_id.len() as u64).to_le_bytes());
    h.update(question_id.as_bytes());
    h.update(country.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn instance_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Ctx<'a> {
    sq: &'a SharedQuestion,
    table: &'a CountryTable,
    target: &'a CountryEntry,
    gold: &'a str,
    variant: Variant,
}

impl Ctx<'_> {
    fn skip(&self, reason: SkipReason, detail: impl Into<String>) -> Skip {
        Skip {
            question_id: self.sq.id.clone(),
            country: self.target.code.clone(),
            variant: self.variant,
            reason,
            detail: detail.into(),
        }
    }

    /// Answered countries other than the target that pass `keep`.
    fn pool(&self, keep: impl Fn(&CountryEntry) -> bool) -> Vec<&CountryEntry> {
        self.sq
            .answered()
            .filter(|c| *c != self.target.code)
            .filter_map(|c| self.table.get(c))
            .filter(|e| keep(e))
            .collect()
    }

    /// Draw a country for one slot, resampling on text collisions.
    fn fill_slot<'e>(
        &self,
        pool: &[&'e CountryEntry],
        taken: &BTreeSet<String>,
        rng: &mut ChaCha8Rng,
        slot: &str,
    ) -> std::result::Result<&'e CountryEntry, Skip> {
        for _ in 0..=MAX_RESAMPLES {
            let pick = *pool.choose(rng).expect("pool checked non-empty");
            let text = self.sq.option_for(&pick.code).expect("pool countries have answers");
            if !taken.contains(&option_key(text)) {
                return Ok(pick);
            }
        }
        Err(self.skip(
            SkipReason::Collision,
            format!("{slot} slot collided {} times", MAX_RESAMPLES + 1),
        ))
    }

    fn draft(&self, negatives: Vec<(LabelKind, &CountryEntry)>, seed: u64) -> McqDraft {
        let mut options = vec![self.gold.to_string()];
        let mut labels = vec![OptionLabel::new(LabelKind::Gold, self.target)];
        for (kind, e) in negatives {
            options.push(self.sq.option_for(&e.code).expect("answered").to_string());
            labels.push(OptionLabel::new(kind, e));
        }
        McqDraft {
            id: format!("{}-{}-{}", self.sq.id, self.target.code, self.variant.as_str()),
            question_id: self.sq.id.clone(),
            country: self.target.code.clone(),
            question: self.sq.instantiate(&self.target.name),
            options,
            labels,
            golds: self.sq.answers[&self.target.code]
                .iter()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
            variant: self.variant,
            seed,
        }
    }
}

fn context<'a>(
    sq: &'a SharedQuestion,
    target: &str,
    table: &'a CountryTable,
    variant: Variant,
) -> std::result::Result<Ctx<'a>, Skip> {
    let skip = |reason, detail: String| Skip {
        question_id: sq.id.clone(),
        country: target.to_string(),
        variant,
        reason,
        detail,
    };
    let entry = table
        .get(target)
        .ok_or_else(|| skip(SkipReason::UnknownCountry, format!("{target} not in table")))?;
    let gold = sq
        .option_for(target)
        .ok_or_else(|| skip(SkipReason::TooFewCountries, format!("{target} has no answer")))?;
    let answered = sq.answered().count();
    if answered < 4 {
        return Err(skip(
            SkipReason::TooFewCountries,
            format!("{answered} countries answer, 4 needed"),
        ));
    }
    Ok(Ctx {
        sq,
        table,
        target: entry,
        gold,
        variant,
    })
}

/// Gold plus one answer from each resource level (never the target itself).
pub fn build_resource_draft(
    sq: &SharedQuestion,
    target: &str,
    table: &CountryTable,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> std::result::Result<McqDraft, Skip> {
    let ctx = context(sq, target, table, Variant::Resource)?;
    let pools: Vec<Vec<&CountryEntry>> = ResourceLevel::ALL
        .iter()
        .map(|&level| ctx.pool(|e| e.resource_group == level))
        .collect();
    if let Some(i) = pools.iter().position(Vec::is_empty) {
        return Err(ctx.skip(
            SkipReason::EmptyResourceLevel,
            format!("no other country answers at level {}", ResourceLevel::ALL[i]),
        ));
    }
    let mut taken = BTreeSet::from([option_key(ctx.gold)]);
    let mut negatives = Vec::with_capacity(3);
    for (level, pool) in ResourceLevel::ALL.iter().zip(&pools) {
        let pick = ctx.fill_slot(pool, &taken, rng, level.as_str())?;
        taken.insert(option_key(sq.option_for(&pick.code).expect("answered")));
        negatives.push((LabelKind::HardNegative, pick));
    }
    Ok(ctx.draft(negatives, seed))
}

/// Gold, one same-region answer, and answers from two other distinct regions.
pub fn build_region_draft(
    sq: &SharedQuestion,
    target: &str,
    table: &CountryTable,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> std::result::Result<McqDraft, Skip> {
    let ctx = context(sq, target, table, Variant::Region)?;
    let home = ctx.target.region_group;
    let same = ctx.pool(|e| e.region_group == home);
    if same.is_empty() {
        return Err(ctx.skip(
            SkipReason::NoSameRegionCountry,
            format!("no other {home} country answers"),
        ));
    }
    let mut other_regions: Vec<Region> = ctx
        .pool(|e| e.region_group != home)
        .iter()
        .map(|e| e.region_group)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if other_regions.len() < 2 {
        return Err(ctx.skip(
            SkipReason::TooFewRegions,
            format!("{} other region(s) answer, 2 needed", other_regions.len()),
        ));
    }
    let mut taken = BTreeSet::from([option_key(ctx.gold)]);
    let flatten = ctx.fill_slot(&same, &taken, rng, "same-region")?;
    taken.insert(option_key(sq.option_for(&flatten.code).expect("answered")));
    let mut negatives = vec![(LabelKind::HardNegative, flatten)];
    other_regions.shuffle(rng);
    for region in other_regions.into_iter().take(2) {
        let pool = ctx.pool(|e| e.region_group == region);
        let pick = ctx.fill_slot(&pool, &taken, rng, region.as_str())?;
        taken.insert(option_key(sq.option_for(&pick.code).expect("answered")));
        negatives.push((LabelKind::Random, pick));
    }
    Ok(ctx.draft(negatives, seed))
}

/// Uniformly permute options and labels together.
pub fn shuffle_options(draft: McqDraft, rng: &mut impl Rng) -> McqInstance {
    let mut order: Vec<usize> = (0..draft.options.len()).collect();
    order.shuffle(rng);
    let options = order.iter().map(|&i| draft.options[i].clone()).collect();
    let labels: Vec<OptionLabel> = order.iter().map(|&i| draft.labels[i].clone()).collect();
    let gold_index = labels
        .iter()
        .position(|l| l.kind == LabelKind::Gold)
        .expect("draft carries a gold");
    McqInstance {
        id: draft.id,
        question_id: draft.question_id,
        country: draft.country,
        question: draft.question,
        options,
        labels,
        gold_index,
        golds: draft.golds,
        variant: draft.variant,
        seed: draft.seed,
    }
}

pub fn build_resource_options(
    sq: &SharedQuestion,
    target: &str,
    table: &CountryTable,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<McqInstance, Skip> {
    let draft = build_resource_draft(sq, target, table, rng, 0)?;
    Ok(shuffle_options(draft, rng))
}

pub fn build_region_options(
    sq: &SharedQuestion,
    target: &str,
    table: &CountryTable,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<McqInstance, Skip> {
    let draft = build_region_draft(sq, target, table, rng, 0)?;
    Ok(shuffle_options(draft, rng))
}

/// Build one instance with its derived seed.
pub fn build_instance(
    sq: &SharedQuestion,
    target: &str,
    variant: Variant,
    table: &CountryTable,
    master_seed: u64,
) -> std::result::Result<McqInstance, Skip> {
    let seed = instance_seed(master_seed, &sq.id, target);
    let mut rng = instance_rng(seed);
    let draft = match variant {
        Variant::Resource => build_resource_draft(sq, target, table, &mut rng, seed)?,
        Variant::Region => build_region_draft(sq, target, table, &mut rng, seed)?,
    };
    Ok(shuffle_options(draft, &mut rng))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqDataset {
    pub instances: Vec<McqInstance>,
    pub skips: Vec<Skip>,
}

/// One instance per (question, answering country), in question then country order.
pub fn build_dataset(questions: &[SharedQuestion], variant: Variant, table: &CountryTable, seed: u64) -> McqDataset {
    let mut out = McqDataset::default();
    for sq in questions {
        for target in sq.answered() {
            match build_instance(sq, target, variant, table, seed) {
                Ok(inst) => out.instances.push(inst),
                Err(skip) => {
                    tracing::debug!(question = %skip.question_id, country = %skip.country, reason = ?skip.reason, "mcq instance skipped");
                    out.skips.push(skip)
                }
            }
        }
    }
    out
}
