//! Column schema for tabular events.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the factorization a column feeds.
///
/// Ad-side features are restricted to the two-level taxonomy hierarchy;
/// that restriction is what makes per-category caching possible at auction
/// time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "user")]
    User,
    #[serde(rename = "ad-taxonomy-top")]
    TaxonomyTop,
    #[serde(rename = "ad-taxonomy-low")]
    TaxonomyLow,
}

/// One categorical column: `cardinality` dictionary slots, of which
/// `oov_index` is reserved for values outside the dictionary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    pub name: String,
    pub cardinality: usize,
    pub oov_index: usize,
    pub side: Side,
}

impl ColumnSchema {
    /// Column with the out-of-vocabulary slot at the last index.
    pub fn new(name: impl Into<String>, cardinality: usize, side: Side) -> Self {
        ColumnSchema {
            name: name.into(),
            cardinality,
            oov_index: cardinality.saturating_sub(1),
            side,
        }
    }
}

/// Validated ordered list of columns. Exactly one column carries each
/// taxonomy role.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    columns: Vec<ColumnSchema>,
    tax_top: usize,
    tax_low: usize,
}

/// On-disk form of one column; `oov_index` defaults to `cardinality - 1`.
#[derive(Serialize, Deserialize)]
struct ColumnRecord {
    name: String,
    cardinality: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    oov_index: Option<usize>,
    side: Side,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSchema>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Config("schema has no columns".into()));
        }
        let mut tax_top = None;
        let mut tax_low = None;
        for (i, col) in columns.iter().enumerate() {
            if col.cardinality < 2 {
                return Err(Error::Config(format!(
                    "column '{}' has cardinality {}, need at least 2",
                    col.name, col.cardinality
                )));
            }
            if col.oov_index >= col.cardinality {
                return Err(Error::Config(format!(
                    "column '{}' oov_index {} out of range (cardinality {})",
                    col.name, col.oov_index, col.cardinality
                )));
            }
            match col.side {
                Side::TaxonomyTop => {
                    if tax_top.replace(i).is_some() {
                        return Err(Error::Config("multiple ad-taxonomy-top columns".into()));
                    }
                }
                Side::TaxonomyLow => {
                    if tax_low.replace(i).is_some() {
                        return Err(Error::Config("multiple ad-taxonomy-low columns".into()));
                    }
                }
                Side::User => {}
            }
        }
        let (tax_top, tax_low) = match (tax_top, tax_low) {
            (Some(t), Some(l)) => (t, l),
            _ => {
                return Err(Error::Config(
                    "schema needs exactly one ad-taxonomy-top and one ad-taxonomy-low column"
                        .into(),
                ))
            }
        };
        Ok(Schema {
            columns,
            tax_top,
            tax_low,
        })
    }

    /// The 7-column synthetic schema used throughout the test pipeline:
    /// five user columns followed by the two taxonomy columns.
    pub fn default_synthetic() -> Self {
        Schema::new(vec![
            ColumnSchema::new("publisher", 50, Side::User),
            ColumnSchema::new("device", 20, Side::User),
            ColumnSchema::new("age_bucket", 10, Side::User),
            ColumnSchema::new("geo", 100, Side::User),
            ColumnSchema::new("interest", 30, Side::User),
            ColumnSchema::new("tax_top", 8, Side::TaxonomyTop),
            ColumnSchema::new("tax_low", 48, Side::TaxonomyLow),
        ])
        .expect("default schema is valid")
    }

    pub fn columns(&self) -> &[ColumnSchema] {
        &self.columns
    }

    pub fn column_count(&self) -> usize {
        self.columns.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.columns.iter().map(|c| c.cardinality).collect()
    }

    pub fn sum_cardinalities(&self) -> usize {
        self.columns.iter().map(|c| c.cardinality).sum()
    }

    /// Index of the ad-taxonomy-top column.
    pub fn taxonomy_top(&self) -> usize {
        self.tax_top
    }

    /// Index of the ad-taxonomy-low column.
    pub fn taxonomy_low(&self) -> usize {
        self.tax_low
    }

    pub fn user_columns(&self) -> Vec<usize> {
        (0..self.columns.len())
            .filter(|&i| self.columns[i].side == Side::User)
            .collect()
    }

    pub fn ad_columns(&self) -> Vec<usize> {
        (0..self.columns.len())
            .filter(|&i| self.columns[i].side != Side::User)
            .collect()
    }

    /// Reconstruction loss of a decoder that outputs uniform probabilities
    /// over every block: (1/C) Σ ln(n_i). Reference level for the
    /// auto-encoder metrics.
    pub fn uniform_recloss(&self) -> f64 {
        let sum: f64 = self.columns.iter().map(|c| (c.cardinality as f64).ln()).sum();
        sum / self.columns.len() as f64
    }

    /// Maps an out-of-range raw value to the column's reserved slot.
    /// Returns `(index, was_oov)`.
    pub fn clamp_value(&self, column: usize, raw: i64) -> (usize, bool) {
        let col = &self.columns[column];
        if raw >= 0 && (raw as usize) < col.cardinality {
            (raw as usize, false)
        } else {
            (col.oov_index, true)
        }
    }

    /// FNV-1a over the canonical column description. Stored in checkpoints
    /// so a model is never resumed against a different schema.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for col in &self.columns {
            eat(col.name.as_bytes());
            eat(&[0xff]);
            eat(&(col.cardinality as u64).to_le_bytes());
            eat(&(col.oov_index as u64).to_le_bytes());
            let side = match col.side {
                Side::User => 0u8,
                Side::TaxonomyTop => 1,
                Side::TaxonomyLow => 2,
            };
            eat(&[side]);
        }
        h
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<ColumnRecord> = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("schema file {}: {}", path.display(), e)))?;
        let columns = records
            .into_iter()
            .map(|r| ColumnSchema {
                oov_index: r.oov_index.unwrap_or(r.cardinality.saturating_sub(1)),
                name: r.name,
                cardinality: r.cardinality,
                side: r.side,
            })
            .collect();
        Schema::new(columns)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let records: Vec<ColumnRecord> = self
            .columns
            .iter()
            .map(|c| ColumnRecord {
                name: c.name.clone(),
                cardinality: c.cardinality,
                oov_index: Some(c.oov_index),
                side: c.side,
            })
            .collect();
        let text = serde_json::to_string_pretty(&records).expect("schema serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
