//! Event schema, stream ingestion, and uniform-random datasets.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::schema::Schema;

/// Event kind as it appears on the wire. `ConvView` events never carry a
/// CVR label: they exist for the auto-encoder only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    /// A click that was not followed by an attributed conversion.
    #[serde(rename = "click")]
    ClickNegative,
    /// A conversion attributed to a click — the CVR positive.
    #[serde(rename = "conv_click")]
    ClickConversion,
    /// A conversion attributed to an ad view without a click.
    #[serde(rename = "conv_view")]
    ViewConversion,
}

impl EventKind {
    pub fn is_click(self) -> bool {
        matches!(self, EventKind::ClickNegative | EventKind::ClickConversion)
    }

    pub fn is_conversion(self) -> bool {
        matches!(self, EventKind::ClickConversion | EventKind::ViewConversion)
    }
}

/// One tabular sample: a value index per schema column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub values: Vec<usize>,
    pub kind: EventKind,
    pub interval_id: u64,
}

impl Event {
    /// CVR label: 1 for click-attributed conversions, 0 otherwise.
    /// View conversions are 0 by definition, not by observation.
    pub fn label(&self) -> f64 {
        if self.kind == EventKind::ClickConversion {
            1.0
        } else {
            0.0
        }
    }
}

/// The events of one training interval, in stream arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalDataset {
    pub interval_id: u64,
    pub events: Vec<Event>,
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    interval: u64,
    kind: EventKind,
    values: Vec<i64>,
}

/// Counters reported by [`load_events`].
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LoadStats {
    /// Values outside a column's dictionary, mapped to its OOV slot.
    pub oov_values: u64,
    pub events: u64,
}

/// Reads a line-delimited event file (one JSON record per line with fields
/// `interval`, `kind`, `values`) and groups events by interval.
///
/// Out-of-range column values are clamped to the column's OOV slot and
/// counted; a malformed line is an error naming the line number.
pub fn load_events(path: impl AsRef<Path>, schema: &Schema) -> Result<(Vec<IntervalDataset>, LoadStats)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut stats = LoadStats::default();
    let mut groups: BTreeMap<u64, Vec<Event>> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: malformed event: {}", path.display(), lineno + 1, e))
        })?;
        if record.values.len() != schema.column_count() {
            return Err(Error::Data(format!(
                "{}:{}: event has {} values, schema has {} columns",
                path.display(),
                lineno + 1,
                record.values.len(),
                schema.column_count()
            )));
        }
        let mut values = Vec::with_capacity(record.values.len());
        for (col, &raw) in record.values.iter().enumerate() {
            let (v, oov) = schema.clamp_value(col, raw);
            if oov {
                stats.oov_values += 1;
            }
            values.push(v);
        }
        stats.events += 1;
        groups.entry(record.interval).or_default().push(Event {
            values,
            kind: record.kind,
            interval_id: record.interval,
        });
    }

    let datasets = groups
        .into_iter()
        .map(|(interval_id, events)| IntervalDataset { interval_id, events })
        .collect();
    Ok((datasets, stats))
}

/// Writes intervals in order as line-delimited JSON records.
pub fn write_events(path: impl AsRef<Path>, datasets: &[IntervalDataset]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ds in datasets {
        for e in &ds.events {
            let record = EventRecord {
                interval: e.interval_id,
                kind: e.kind,
                values: e.values.iter().map(|&v| v as i64).collect(),
            };
            serde_json::to_writer(&mut w, &record).map_err(|e| Error::Data(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dataset with every column value drawn i.i.d. uniformly over the
/// column's dictionary. Reference data for the random-reconstruction
/// metric; event kinds are irrelevant there and set to `ClickNegative`.
pub fn make_random_dataset(schema: &Schema, length: usize, seed: u64) -> Result<IntervalDataset> {
    if length == 0 {
        return Err(Error::Config("random dataset length must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, Stream::MetricsRandom, 0);
    let cards = schema.cardinalities();
    let events = (0..length)
        .map(|_| Event {
            values: cards.iter().map(|&n| rng.random_range(0..n)).collect(),
            kind: EventKind::ClickNegative,
            interval_id: 0,
        })
        .collect();
    Ok(IntervalDataset {
        interval_id: 0,
        events,
    })
}
