//! Big-Five hierarchy (items, facets, traits) and score aggregation.
//!
//! A [`ScoringKey`] maps every questionnaire item to a facet and every facet
//! to a trait. Item responses are reverse-coded where the key says so, then
//! averaged upward. Predictions and ground truth travel through the same code
//! unclamped, so regressor output can leave the Likert range.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Default BFI-2 key shipped with the crate.
pub const DEFAULT_KEY_JSON: &str = include_str!("../data/bfi2_key.json");

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("score {value} outside Likert range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },
    #[error("expected a {expected} vector, got {found}")]
    LevelMismatch { expected: Level, found: Level },
    #[error("{level} vector has {found} scores, key expects {expected}")]
    LengthMismatch {
        level: Level,
        expected: usize,
        found: usize,
    },
    #[error("cannot aggregate an empty list of predictions")]
    EmptyList,
    #[error("predictions mix hierarchy levels")]
    MixedLevels,
    #[error("predictions mix subjects ({0} vs {1})")]
    MixedSubjects(String, String),
    #[error("bad cardinality: {0}")]
    BadCardinality(String),
    #[error("duplicate item id {0}")]
    DuplicateItem(u32),
    #[error("duplicate facet id {0:?}")]
    DuplicateFacet(String),
    #[error("unknown reference: {0}")]
    UnknownReference(String),
    #[error("invalid Likert bounds [{0}, {1}]")]
    InvalidBounds(f64, f64),
    #[error("reading key: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing key: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ScoringError>;

/// Hierarchy level of a score vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Trait,
    Facet,
    Nuance,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Trait, Level::Facet, Level::Nuance];

    pub fn name(self) -> &'static str {
        match self {
            Level::Trait => "trait",
            Level::Facet => "facet",
            Level::Nuance => "nuance",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        match s.to_ascii_lowercase().as_str() {
            "trait" | "traits" => Some(Level::Trait),
            "facet" | "facets" => Some(Level::Facet),
            "nuance" | "nuances" | "item" | "items" => Some(Level::Nuance),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How repeated per-person predictions are collapsed into one profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Mean,
    Median,
}

/// Whether session predictions are converted to traits before or after
/// collapsing a participant's repeated sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    #[default]
    ConvertThenCollapse,
    CollapseThenConvert,
}

/// Scores at one hierarchy level for one participant or prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalityVector {
    pub level: Level,
    pub scores: Vec<f64>,
    pub subject: String,
}

impl PersonalityVector {
    pub fn new(level: Level, scores: Vec<f64>, subject: impl Into<String>) -> Self {
        Self {
            level,
            scores,
            subject: subject.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FacetDef {
    pub id: String,
    pub trait_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemDef {
    pub id: u32,
    pub facet_index: usize,
    pub reversed: bool,
}

/// Expected hierarchy cardinalities, checked when loading a key file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyShape {
    pub items_per_facet: usize,
    pub facets_per_trait: usize,
}

impl KeyShape {
    /// 60 items, 15 facets, 5 traits.
    pub const BFI2: KeyShape = KeyShape {
        items_per_facet: 4,
        facets_per_trait: 3,
    };
}

/// Item -> facet -> trait assignment with reverse-coding flags.
///
/// Items are held sorted by id, facets grouped by trait in trait order, so two
/// key files that list the same assignments in a different order compare
/// equal.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringKey {
    likert_min: f64,
    likert_max: f64,
    traits: Vec<String>,
    facets: Vec<FacetDef>,
    items: Vec<ItemDef>,
    facet_members: Vec<Vec<usize>>,
    trait_facets: Vec<Vec<usize>>,
    trait_items: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyFile {
    pub likert: LikertBounds,
    pub traits: Vec<String>,
    pub facets: Vec<KeyFileFacet>,
    pub items: Vec<KeyFileItem>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LikertBounds {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyFileFacet {
    pub id: String,
    #[serde(rename = "trait")]
    pub trait_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyFileItem {
    pub id: u32,
    pub facet: String,
    #[serde(default)]
    pub reversed: bool,
}

impl ScoringKey {
    /// Builds a key, validating references and uniqueness only. Use
    /// [`ScoringKey::check_shape`] for fixed cardinalities.
    pub fn from_key_file(file: &KeyFile) -> Result<Self> {
        let LikertBounds { min, max } = file.likert;
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(ScoringError::InvalidBounds(min, max));
        }
        if file.traits.is_empty() {
            return Err(ScoringError::BadCardinality("no traits".into()));
        }
        let mut seen = HashSet::new();
        for t in &file.traits {
            if !seen.insert(t.as_str()) {
                return Err(ScoringError::BadCardinality(format!("duplicate trait {t}")));
            }
        }

        // facets grouped by trait order, file order within a trait
        let mut facets = Vec::with_capacity(file.facets.len());
        let mut facet_index = BTreeMap::new();
        for f in &file.facets {
            if !file.traits.contains(&f.trait_id) {
                return Err(ScoringError::UnknownReference(format!(
                    "facet {:?} -> trait {:?}",
                    f.id, f.trait_id
                )));
            }
        }
        for (ti, t) in file.traits.iter().enumerate() {
            for f in file.facets.iter().filter(|f| &f.trait_id == t) {
                if facet_index.insert(f.id.clone(), facets.len()).is_some() {
                    return Err(ScoringError::DuplicateFacet(f.id.clone()));
                }
                facets.push(FacetDef {
                    id: f.id.clone(),
                    trait_index: ti,
                });
            }
        }

        let mut items = Vec::with_capacity(file.items.len());
        let mut ids = HashSet::new();
        for it in &file.items {
            if !ids.insert(it.id) {
                return Err(ScoringError::DuplicateItem(it.id));
            }
            let facet_index = *facet_index.get(&it.facet).ok_or_else(|| {
                ScoringError::UnknownReference(format!("item {} -> facet {:?}", it.id, it.facet))
            })?;
            items.push(ItemDef {
                id: it.id,
                facet_index,
                reversed: it.reversed,
            });
        }
        items.sort_by_key(|i| i.id);

        let mut facet_members = vec![Vec::new(); facets.len()];
        for (ii, it) in items.iter().enumerate() {
            facet_members[it.facet_index].push(ii);
        }
        let mut trait_facets = vec![Vec::new(); file.traits.len()];
        for (fi, f) in facets.iter().enumerate() {
            trait_facets[f.trait_index].push(fi);
        }
        let trait_items = trait_facets
            .iter()
            .map(|fs| {
                let mut v: Vec<usize> = fs.iter().flat_map(|&f| facet_members[f].clone()).collect();
                v.sort_unstable();
                v
            })
            .collect();

        if let Some(fi) = facet_members.iter().position(Vec::is_empty) {
            return Err(ScoringError::BadCardinality(format!(
                "facet {:?} has no items",
                facets[fi].id
            )));
        }
        if let Some(ti) = trait_facets.iter().position(Vec::is_empty) {
            return Err(ScoringError::BadCardinality(format!(
                "trait {:?} has no facets",
                file.traits[ti]
            )));
        }

        Ok(Self {
            likert_min: min,
            likert_max: max,
            traits: file.traits.clone(),
            facets,
            items,
            facet_members,
            trait_facets,
            trait_items,
        })
    }

    pub fn from_json_str(s: &str, shape: Option<KeyShape>) -> Result<Self> {
        let file: KeyFile = serde_json::from_str(s)?;
        let key = Self::from_key_file(&file)?;
        if let Some(shape) = shape {
            key.check_shape(shape)?;
        }
        Ok(key)
    }

    /// The shipped BFI-2 key.
    pub fn bfi2() -> Self {
        Self::from_json_str(DEFAULT_KEY_JSON, Some(KeyShape::BFI2)).expect("shipped key is valid")
    }

    pub fn check_shape(&self, shape: KeyShape) -> Result<()> {
        for (fi, members) in self.facet_members.iter().enumerate() {
            if members.len() != shape.items_per_facet {
                return Err(ScoringError::BadCardinality(format!(
                    "facet {:?} has {} items, expected {}",
                    self.facets[fi].id,
                    members.len(),
                    shape.items_per_facet
                )));
            }
        }
        for (ti, fs) in self.trait_facets.iter().enumerate() {
            if fs.len() != shape.facets_per_trait {
                return Err(ScoringError::BadCardinality(format!(
                    "trait {:?} has {} facets, expected {}",
                    self.traits[ti],
                    fs.len(),
                    shape.facets_per_trait
                )));
            }
        }
        Ok(())
    }

    pub fn to_key_file(&self) -> KeyFile {
        KeyFile {
            likert: LikertBounds {
                min: self.likert_min,
                max: self.likert_max,
            },
            traits: self.traits.clone(),
            facets: self
                .facets
                .iter()
                .map(|f| KeyFileFacet {
                    id: f.id.clone(),
                    trait_id: self.traits[f.trait_index].clone(),
                })
                .collect(),
            items: self
                .items
                .iter()
                .map(|i| KeyFileItem {
                    id: i.id,
                    facet: self.facets[i.facet_index].id.clone(),
                    reversed: i.reversed,
                })
                .collect(),
        }
    }

    pub fn likert_min(&self) -> f64 {
        self.likert_min
    }

    pub fn likert_max(&self) -> f64 {
        self.likert_max
    }

    pub fn traits(&self) -> &[String] {
        &self.traits
    }

    pub fn facets(&self) -> &[FacetDef] {
        &self.facets
    }

    pub fn items(&self) -> &[ItemDef] {
        &self.items
    }

    /// Item indices (into [`ScoringKey::items`]) belonging to each facet.
    pub fn facet_members(&self) -> &[Vec<usize>] {
        &self.facet_members
    }

    pub fn trait_facets(&self) -> &[Vec<usize>] {
        &self.trait_facets
    }

    pub fn len(&self, level: Level) -> usize {
        match level {
            Level::Trait => self.traits.len(),
            Level::Facet => self.facets.len(),
            Level::Nuance => self.items.len(),
        }
    }

    /// Column names for a level: trait symbols, facet names, or `item_NN`.
    pub fn labels(&self, level: Level) -> Vec<String> {
        match level {
            Level::Trait => self.traits.clone(),
            Level::Facet => self.facets.iter().map(|f| f.id.clone()).collect(),
            Level::Nuance => self.items.iter().map(|i| item_column(i.id)).collect(),
        }
    }

    /// `(min + max) - x`.
    pub fn reverse_code(&self, x: f64) -> Result<f64> {
        if !(self.likert_min..=self.likert_max).contains(&x) {
            return Err(ScoringError::OutOfRange {
                value: x,
                min: self.likert_min,
                max: self.likert_max,
            });
        }
        Ok(self.reflect(x))
    }

    // Unchecked reversal; predictions may leave the Likert range.
    fn reflect(&self, x: f64) -> f64 {
        self.likert_min + self.likert_max - x
    }

    fn keyed_item(&self, item: usize, x: f64) -> f64 {
        if self.items[item].reversed {
            self.reflect(x)
        } else {
            x
        }
    }

    fn expect(&self, v: &PersonalityVector, level: Level) -> Result<()> {
        if v.level != level {
            return Err(ScoringError::LevelMismatch {
                expected: level,
                found: v.level,
            });
        }
        let expected = self.len(level);
        if v.scores.len() != expected {
            return Err(ScoringError::LengthMismatch {
                level,
                expected,
                found: v.scores.len(),
            });
        }
        Ok(())
    }

    pub fn nuances_to_facets(&self, v: &PersonalityVector) -> Result<PersonalityVector> {
        self.expect(v, Level::Nuance)?;
        let scores = self
            .facet_members
            .iter()
            .map(|members| {
                members
                    .iter()
                    .map(|&i| self.keyed_item(i, v.scores[i]))
                    .sum::<f64>()
                    / members.len() as f64
            })
            .collect();
        Ok(PersonalityVector::new(Level::Facet, scores, v.subject.clone()))
    }

    pub fn facets_to_traits(&self, v: &PersonalityVector) -> Result<PersonalityVector> {
        self.expect(v, Level::Facet)?;
        let scores = self
            .trait_facets
            .iter()
            .map(|fs| fs.iter().map(|&f| v.scores[f]).sum::<f64>() / fs.len() as f64)
            .collect();
        Ok(PersonalityVector::new(Level::Trait, scores, v.subject.clone()))
    }

    /// Direct item-to-trait mean, reversal applied per item.
    pub fn nuances_to_traits(&self, v: &PersonalityVector) -> Result<PersonalityVector> {
        self.expect(v, Level::Nuance)?;
        let scores = self
            .trait_items
            .iter()
            .map(|items| {
                items
                    .iter()
                    .map(|&i| self.keyed_item(i, v.scores[i]))
                    .sum::<f64>()
                    / items.len() as f64
            })
            .collect();
        Ok(PersonalityVector::new(Level::Trait, scores, v.subject.clone()))
    }

    /// Converts a vector at any level to the trait level.
    pub fn to_traits(&self, v: &PersonalityVector) -> Result<PersonalityVector> {
        match v.level {
            Level::Trait => {
                self.expect(v, Level::Trait)?;
                Ok(v.clone())
            }
            Level::Facet => self.facets_to_traits(v),
            Level::Nuance => self.nuances_to_traits(v),
        }
    }

    /// Converts a nuance vector down to `level`.
    pub fn nuances_to_level(&self, v: &PersonalityVector, level: Level) -> Result<PersonalityVector> {
        match level {
            Level::Nuance => {
                self.expect(v, Level::Nuance)?;
                Ok(v.clone())
            }
            Level::Facet => self.nuances_to_facets(v),
            Level::Trait => self.nuances_to_traits(v),
        }
    }
}

pub fn item_column(id: u32) -> String {
    format!("item_{id:02}")
}

pub fn load_scoring_key(path: impl AsRef<Path>) -> Result<ScoringKey> {
    let s = std::fs::read_to_string(path)?;
    ScoringKey::from_json_str(&s, Some(KeyShape::BFI2))
}

/// Median of a non-empty slice; mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Collapses repeated predictions of one subject at one level, elementwise.
pub fn collapse_sessions(preds: &[PersonalityVector], strategy: Strategy) -> Result<PersonalityVector> {
    let first = preds.first().ok_or(ScoringError::EmptyList)?;
    for p in &preds[1..] {
        if p.level != first.level || p.scores.len() != first.scores.len() {
            return Err(ScoringError::MixedLevels);
        }
        if p.subject != first.subject {
            return Err(ScoringError::MixedSubjects(first.subject.clone(), p.subject.clone()));
        }
    }
    let n = preds.len() as f64;
    let mut column = Vec::with_capacity(preds.len());
    let scores = (0..first.scores.len())
        .map(|j| match strategy {
            Strategy::Mean => preds.iter().map(|p| p.scores[j]).sum::<f64>() / n,
            Strategy::Median => {
                column.clear();
                column.extend(preds.iter().map(|p| p.scores[j]));
                median(&column)
            }
        })
        .collect();
    Ok(PersonalityVector::new(first.level, scores, first.subject.clone()))
}

/// Aggregates one participant's per-session predictions into a trait profile.
pub fn to_trait_level(
    preds: &[PersonalityVector],
    key: &ScoringKey,
    order: Order,
    strategy: Strategy,
) -> Result<PersonalityVector> {
    match order {
        Order::ConvertThenCollapse => {
            let traits = preds
                .iter()
                .map(|p| key.to_traits(p))
                .collect::<Result<Vec<_>>>()?;
            collapse_sessions(&traits, strategy)
        }
        Order::CollapseThenConvert => key.to_traits(&collapse_sessions(preds, strategy)?),
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_items(rng: &mut ChaCha8Rng, key: &ScoringKey) -> PersonalityVector {
        let scores = (0..key.len(Level::Nuance))
            .map(|_| rng.random_range(1..=5) as f64)
            .collect();
        PersonalityVector::new(Level::Nuance, scores, "p")
    }

    // Straight loops over the key file, independent of the cached index tables.
    fn oracle_facets(file: &KeyFile, items: &[f64]) -> Vec<f64> {
        let mut sorted = file.items.clone();
        sorted.sort_by_key(|i| i.id);
        let mut out = Vec::new();
        for t in &file.traits {
            for f in file.facets.iter().filter(|f| &f.trait_id == t) {
                let mut sum = 0.0;
                let mut n = 0.0;
                for (idx, it) in sorted.iter().enumerate() {
                    if it.facet == f.id {
                        let x = items[idx];
                        sum += if it.reversed { 6.0 - x } else { x };
                        n += 1.0;
                    }
                }
                out.push(sum / n);
            }
        }
        out
    }

    fn oracle_traits(file: &KeyFile, items: &[f64]) -> Vec<f64> {
        let mut sorted = file.items.clone();
        sorted.sort_by_key(|i| i.id);
        file.traits
            .iter()
            .map(|t| {
                let mut sum = 0.0;
                let mut n = 0.0;
                for (idx, it) in sorted.iter().enumerate() {
                    let trait_of = &file.facets.iter().find(|f| f.id == it.facet).unwrap().trait_id;
                    if trait_of == t {
                        let x = items[idx];
                        sum += if it.reversed { 6.0 - x } else { x };
                        n += 1.0;
                    }
                }
                sum / n
            })
            .collect()
    }

    #[test]
    fn reverse_code_endpoints_and_involution() {
        let key = ScoringKey::bfi2();
        assert_eq!(key.reverse_code(1.0).unwrap(), 5.0);
        assert_eq!(key.reverse_code(3.0).unwrap(), 3.0);
        for x in 1..=5 {
            let x = x as f64;
            assert_eq!(key.reverse_code(key.reverse_code(x).unwrap()).unwrap(), x);
        }
        assert!(matches!(key.reverse_code(0.5), Err(ScoringError::OutOfRange { .. })));
        assert!(matches!(key.reverse_code(5.5), Err(ScoringError::OutOfRange { .. })));
    }

    #[test]
    fn shipped_key_cardinality() {
        let key = ScoringKey::bfi2();
        assert_eq!(key.len(Level::Nuance), 60);
        assert_eq!(key.len(Level::Facet), 15);
        assert_eq!(key.len(Level::Trait), 5);
        assert_eq!(key.traits(), ["O", "C", "E", "A", "N"]);
        assert!(key.facet_members().iter().all(|m| m.len() == 4));
    }

    #[test]
    fn center_is_reversal_invariant() {
        let key = ScoringKey::bfi2();
        let v = PersonalityVector::new(Level::Nuance, vec![3.0; 60], "p");
        let f = key.nuances_to_facets(&v).unwrap();
        assert!(f.scores.iter().all(|&s| s == 3.0));
    }

    #[test]
    fn mini_key_fixture() {
        let key = mini_key();
        let v = PersonalityVector::new(Level::Nuance, vec![5.0, 1.0, 2.0, 2.0], "p");
        let f = key.nuances_to_facets(&v).unwrap();
        assert_eq!(f.scores, vec![5.0, 2.0]);
        let t = key.nuances_to_traits(&v).unwrap();
        assert_eq!(t.scores, vec![3.5]);
    }

    #[test]
    fn no_reversal_fixture_traits() {
        let key = three_facet_key();
        let v = PersonalityVector::new(Level::Nuance, vec![4.0; 3], "p");
        assert_eq!(key.nuances_to_traits(&v).unwrap().scores, vec![4.0]);
    }

    #[test]
    fn facets_to_traits_means() {
        let key = ScoringKey::bfi2();
        let v = PersonalityVector::new(Level::Facet, vec![2.5; 15], "p");
        assert!(key.facets_to_traits(&v).unwrap().scores.iter().all(|&s| s == 2.5));
        let mut f = vec![3.0; 15];
        f[0] = 1.0;
        f[1] = 3.0;
        f[2] = 5.0;
        let t = key
            .facets_to_traits(&PersonalityVector::new(Level::Facet, f, "p"))
            .unwrap();
        assert_eq!(t.scores[0], 3.0);
    }

    #[test]
    fn level_mismatch_is_rejected() {
        let key = ScoringKey::bfi2();
        let v = PersonalityVector::new(Level::Facet, vec![3.0; 15], "p");
        assert!(matches!(
            key.nuances_to_facets(&v),
            Err(ScoringError::LevelMismatch { .. })
        ));
        let short = PersonalityVector::new(Level::Nuance, vec![3.0; 59], "p");
        assert!(matches!(
            key.nuances_to_traits(&short),
            Err(ScoringError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn aggregation_matches_loop_oracles() {
        let key = ScoringKey::bfi2();
        let file: KeyFile = serde_json::from_str(DEFAULT_KEY_JSON).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let v = random_items(&mut rng, &key);
            assert_eq!(key.nuances_to_facets(&v).unwrap().scores, oracle_facets(&file, &v.scores));
            let direct = key.nuances_to_traits(&v).unwrap().scores;
            let expected = oracle_traits(&file, &v.scores);
            for (a, b) in direct.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
            let via = key.facets_to_traits(&key.nuances_to_facets(&v).unwrap()).unwrap();
            for (a, b) in direct.iter().zip(&via.scores) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn facets_to_traits_matches_loop_oracle() {
        let key = ScoringKey::bfi2();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let f: Vec<f64> = (0..15).map(|_| rng.random_range(1.0..5.0)).collect();
            let t = key
                .facets_to_traits(&PersonalityVector::new(Level::Facet, f.clone(), "p"))
                .unwrap();
            for (ti, got) in t.scores.iter().enumerate() {
                let expected = (f[3 * ti] + f[3 * ti + 1] + f[3 * ti + 2]) / 3.0;
                assert!((got - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collapse_basics() {
        let a = PersonalityVector::new(Level::Trait, vec![1.0; 5], "p");
        let b = PersonalityVector::new(Level::Trait, vec![5.0; 5], "p");
        assert_eq!(collapse_sessions(&[a.clone()], Strategy::Mean).unwrap(), a);
        assert_eq!(collapse_sessions(&[a.clone()], Strategy::Median).unwrap(), a);
        let m = collapse_sessions(&[a.clone(), b], Strategy::Mean).unwrap();
        assert_eq!(m.scores, vec![3.0; 5]);
        assert!(matches!(collapse_sessions(&[], Strategy::Mean), Err(ScoringError::EmptyList)));
        let f = PersonalityVector::new(Level::Facet, vec![1.0; 15], "p");
        assert!(matches!(
            collapse_sessions(&[a.clone(), f], Strategy::Mean),
            Err(ScoringError::MixedLevels)
        ));
        let other = PersonalityVector::new(Level::Trait, vec![1.0; 5], "q");
        assert!(matches!(
            collapse_sessions(&[a, other], Strategy::Mean),
            Err(ScoringError::MixedSubjects(..))
        ));
    }

    #[test]
    fn median_matches_sort_and_pick() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let preds: Vec<_> = (0..7)
            .map(|_| {
                PersonalityVector::new(
                    Level::Facet,
                    (0..15).map(|_| rng.random_range(0.0..6.0)).collect(),
                    "p",
                )
            })
            .collect();
        let med = collapse_sessions(&preds, Strategy::Median).unwrap();
        for j in 0..15 {
            let mut col: Vec<f64> = preds.iter().map(|p| p.scores[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(med.scores[j], col[3]);
        }
    }

    #[test]
    fn orders_agree_for_single_session_and_mean() {
        let key = ScoringKey::bfi2();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let one = vec![random_items(&mut rng, &key)];
            for s in [Strategy::Mean, Strategy::Median] {
                assert_eq!(
                    to_trait_level(&one, &key, Order::ConvertThenCollapse, s).unwrap(),
                    to_trait_level(&one, &key, Order::CollapseThenConvert, s).unwrap()
                );
            }
            let many: Vec<_> = (0..4).map(|_| random_items(&mut rng, &key)).collect();
            let a = to_trait_level(&many, &key, Order::ConvertThenCollapse, Strategy::Mean).unwrap();
            let b = to_trait_level(&many, &key, Order::CollapseThenConvert, Strategy::Mean).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    // Exhaustive search over {1,2,3}^9 (3 sessions x 3 facets) for the first
    // input where the two orders disagree under the median.
    #[test]
    fn median_order_witness_search() {
        let key = three_facet_key();
        let mut witness = None;
        'outer: for code in 0..3usize.pow(9) {
            let mut c = code;
            let mut vals = [0.0; 9];
            for v in vals.iter_mut() {
                *v = (c % 3 + 1) as f64;
                c /= 3;
            }
            let preds: Vec<_> = vals
                .chunks(3)
                .map(|ch| PersonalityVector::new(Level::Facet, ch.to_vec(), "p"))
                .collect();
            let a = to_trait_level(&preds, &key, Order::ConvertThenCollapse, Strategy::Median).unwrap();
            let b = to_trait_level(&preds, &key, Order::CollapseThenConvert, Strategy::Median).unwrap();
            if a.scores != b.scores {
                witness = Some(vals);
                break 'outer;
            }
        }
        assert_eq!(witness, Some(MEDIAN_WITNESS));
    }

    /// Sessions (1,2,1), (2,1,1), (1,1,1): convert-first gives median(4/3, 4/3, 1) = 4/3,
    /// collapse-first gives mean(1, 1, 1) = 1.
    const MEDIAN_WITNESS: [f64; 9] = [1.0, 2.0, 1.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0];

    #[test]
    fn load_rejects_bad_cardinality_and_duplicates() {
        let mut file: KeyFile = serde_json::from_str(DEFAULT_KEY_JSON).unwrap();
        // move item 2 into item 1's facet: one facet with 5 items
        let f1 = file.items.iter().find(|i| i.id == 1).unwrap().facet.clone();
        file.items.iter_mut().find(|i| i.id == 2).unwrap().facet = f1;
        let s = serde_json::to_string(&file).unwrap();
        assert!(matches!(
            ScoringKey::from_json_str(&s, Some(KeyShape::BFI2)),
            Err(ScoringError::BadCardinality(_))
        ));

        let mut file: KeyFile = serde_json::from_str(DEFAULT_KEY_JSON).unwrap();
        file.items[1].id = file.items[0].id;
        let s = serde_json::to_string(&file).unwrap();
        assert!(matches!(
            ScoringKey::from_json_str(&s, Some(KeyShape::BFI2)),
            Err(ScoringError::DuplicateItem(1))
        ));
    }

    #[test]
    fn item_order_in_file_is_irrelevant() {
        let mut file: KeyFile = serde_json::from_str(DEFAULT_KEY_JSON).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let n = file.items.len();
            for i in (1..n).rev() {
                file.items.swap(i, rng.random_range(0..=i));
            }
            let key = ScoringKey::from_json_str(&serde_json::to_string(&file).unwrap(), Some(KeyShape::BFI2))
                .unwrap();
            assert_eq!(key, ScoringKey::bfi2());
        }
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("key.json");
        std::fs::write(&p, DEFAULT_KEY_JSON).unwrap();
        assert_eq!(load_scoring_key(&p).unwrap(), ScoringKey::bfi2());
    }

    proptest::proptest! {
        #[test]
        fn aggregates_stay_within_input_range(items in proptest::collection::vec(1u8..=5, 60)) {
            let key = ScoringKey::bfi2();
            let v = PersonalityVector::new(Level::Nuance, items.iter().map(|&x| x as f64).collect(), "p");
            let t = key.nuances_to_traits(&v).unwrap();
            for s in t.scores {
                proptest::prop_assert!((1.0..=5.0).contains(&s));
            }
        }

        #[test]
        fn collapse_within_range(rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..8.0, 5), 1..8)) {
            let preds: Vec<_> = rows.iter().map(|r| PersonalityVector::new(Level::Trait, r.clone(), "p")).collect();
            for s in [Strategy::Mean, Strategy::Median] {
                let c = collapse_sessions(&preds, s).unwrap();
                for j in 0..5 {
                    let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                    let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                    proptest::prop_assert!(c.scores[j] >= lo - 1e-12 && c.scores[j] <= hi + 1e-12);
                }
            }
        }
    }
}
