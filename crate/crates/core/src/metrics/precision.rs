//! Community precision against external token labels.
//!
//! Label CSV header: `token,category,attribute,value,rank`. Each row attaches
//! one attribute (e.g. `country=US`) to a token within a category
//! (e.g. `first-name`); `attribute`, `value` and `rank` may be empty.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::ConceptHierarchy;
use crate::store::{EmbeddingSpace, TokenNormalization};

pub const LABEL_HEADER: [&str; 5] = ["token", "category", "attribute", "value", "rank"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub category: String,
    pub attribute: String,
    pub value: String,
    pub rank: Option<u32>,
}

#[derive(Deserialize)]
struct LabelRow {
    token: String,
    category: String,
    #[serde(default)]
    attribute: String,
    #[serde(default)]
    value: String,
    #[serde(default)]
    rank: Option<u32>,
}

/// Token -> label records, keyed by the normalized token.
#[derive(Debug, Clone, Default)]
pub struct LabelSet {
    norm: TokenNormalization,
    records: HashMap<String, Vec<LabelRecord>>,
}

impl LabelSet {
    pub fn new(norm: TokenNormalization) -> Self {
        Self {
            norm,
            records: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: &str, record: LabelRecord) {
        let list = self.records.entry(self.norm.normalize(token)).or_default();
        if !list.contains(&record) {
            list.push(record);
        }
    }

    pub fn from_reader<R: Read>(reader: R, norm: TokenNormalization) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::Fields).from_reader(reader);
        let header: Vec<String> = csv.headers()?.iter().map(str::to_string).collect();
        if header != LABEL_HEADER {
            return Err(Error::Format(format!(
                "label header must be {:?}, found {header:?}",
                LABEL_HEADER.join(",")
            )));
        }
        let mut set = Self::new(norm);
        for row in csv.deserialize::<LabelRow>() {
            let row = row?;
            set.insert(
                &row.token,
                LabelRecord {
                    category: row.category,
                    attribute: row.attribute,
                    value: row.value,
                    rank: row.rank,
                },
            );
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>, norm: TokenNormalization) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?, norm)
    }

    pub fn normalization(&self) -> &TokenNormalization {
        &self.norm
    }

    /// Records for a raw token (normalized internally).
    pub fn get(&self, token: &str) -> &[LabelRecord] {
        self.records
            .get(&self.norm.normalize(token))
            .map_or(&[], Vec::as_slice)
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.records
            .values()
            .flatten()
            .map(|r| r.category.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommunityPrecision {
    pub community: String,
    pub support: usize,
    /// Best-matching category; `None` when no member carries any label.
    pub category: Option<String>,
    pub matched: usize,
    pub precision: f64,
    /// Best attribute within the category, e.g. `("country", "US")`.
    pub attribute: Option<(String, String)>,
    pub attribute_matched: usize,
    pub attribute_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecisionReport {
    pub communities: Vec<CommunityPrecision>,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "community",
    "support",
    "category",
    "matched",
    "precision",
    "attribute",
    "value",
    "attribute_matched",
    "attribute_precision",
];

impl PrecisionReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_COLUMNS)?;
        for c in &self.communities {
            let (attr, value) = c.attribute.clone().unwrap_or_default();
            w.write_record([
                c.community.clone(),
                c.support.to_string(),
                c.category.clone().unwrap_or_default(),
                c.matched.to_string(),
                format!("{:.6}", c.precision),
                attr,
                value,
                c.attribute_matched.to_string(),
                format!("{:.6}", c.attribute_precision),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Precision of every hierarchy node with at least `min_support` members.
///
/// The best category maximizes `|members in category| / |members|`; within it
/// the best attribute value is chosen the same way. Ties go to the
/// lexicographically smaller name.
pub fn precision_report(
    h: &ConceptHierarchy,
    labels: &LabelSet,
    space: &EmbeddingSpace,
    min_support: usize,
) -> Result<PrecisionReport> {
    let mut communities = Vec::new();
    for node in h.nodes() {
        let support = node.members.len();
        if support < min_support.max(1) {
            continue;
        }
        let mut per_category: BTreeMap<&str, usize> = BTreeMap::new();
        for &row in &node.members {
            if row >= space.len() {
                return Err(Error::Validation(format!(
                    "community {} references row {row} outside the space",
                    node.name
                )));
            }
            let cats: BTreeSet<&str> = labels.get(space.token(row)).iter().map(|r| r.category.as_str()).collect();
            for c in cats {
                *per_category.entry(c).or_default() += 1;
            }
        }
        // max count; BTreeMap order makes the first maximum the smallest name
        let best = per_category
            .iter()
            .fold(None::<(&str, usize)>, |acc, (&c, &n)| match acc {
                Some((_, m)) if m >= n => acc,
                _ => Some((c, n)),
            });

        let (category, matched, attribute, attribute_matched) = match best {
            None => (None, 0, None, 0),
            Some((cat, matched)) => {
                let mut per_attr: BTreeMap<(&str, &str), usize> = BTreeMap::new();
                for &row in &node.members {
                    let attrs: BTreeSet<(&str, &str)> = labels
                        .get(space.token(row))
                        .iter()
                        .filter(|r| r.category == cat && !r.attribute.is_empty())
                        .map(|r| (r.attribute.as_str(), r.value.as_str()))
                        .collect();
                    for a in attrs {
                        *per_attr.entry(a).or_default() += 1;
                    }
                }
                let best_attr = per_attr
                    .iter()
                    .fold(None::<((&str, &str), usize)>, |acc, (&a, &n)| match acc {
                        Some((_, m)) if m >= n => acc,
                        _ => Some((a, n)),
                    });
                match best_attr {
                    Some(((a, v), n)) => (Some(cat.to_string()), matched, Some((a.to_string(), v.to_string())), n),
                    None => (Some(cat.to_string()), matched, None, 0),
                }
            }
        };
        communities.push(CommunityPrecision {
            community: node.name.clone(),
            support,
            category,
            matched,
            precision: matched as f64 / support as f64,
            attribute,
            attribute_matched,
            attribute_precision: attribute_matched as f64 / support as f64,
        });
    }
    Ok(PrecisionReport { communities })
}
