//! Per-interval auto-encoder quality metrics: reconstruction loss,
//! stability, generalization, and the random-loss ratio. All evaluations
//! are pure — they never touch model parameters.

use std::fs;
use std::path::Path;

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::events::{make_random_dataset, Event};
use crate::schema::Schema;

/// One row of the per-interval metric series.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub interval_id: u64,
    /// Mean reconstruction loss of the interval's model on the interval.
    pub recloss: f64,
    /// Mean reconstruction loss on a uniform-random dataset of equal length.
    pub recloss_rand: f64,
    /// `recloss(current model) / recloss(previous model)`, both on this
    /// interval's data. Close to 1 means the previous model generalized.
    pub gen: f64,
    /// Mean Euclidean distance between the two models' codes.
    pub diff: f64,
    /// `recloss / recloss_rand`; small means the model has learned data
    /// patterns rather than the identity.
    pub randratio: f64,
}

/// Mean reconstruction loss over a dataset.
pub fn eval_recloss(model: &Autoencoder, events: &[Event]) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::Data("cannot evaluate recloss on an empty dataset".into()));
    }
    let sum: f64 = events.iter().map(|e| model.recloss(&e.values)).sum();
    Ok(sum / events.len() as f64)
}

/// Mean Euclidean norm of the code difference between two models.
pub fn eval_diff(current: &Autoencoder, previous: &Autoencoder, events: &[Event]) -> Result<f64> {
    if current.code_dim() != previous.code_dim() {
        return Err(Error::Contract(format!(
            "code dimension mismatch: {} vs {}",
            current.code_dim(),
            previous.code_dim()
        )));
    }
    if events.is_empty() {
        return Err(Error::Data("cannot evaluate diff on an empty dataset".into()));
    }
    let sum: f64 = events
        .iter()
        .map(|e| {
            let a = current.encode(&e.values);
            let b = previous.encode(&e.values);
            a.iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(sum / events.len() as f64)
}

/// Ratio of mean reconstruction losses (current over previous) on the
/// same dataset. A ratio of means, not a mean of ratios.
pub fn eval_gen(current: &Autoencoder, previous: &Autoencoder, events: &[Event]) -> Result<f64> {
    let num = eval_recloss(current, events)?;
    let den = eval_recloss(previous, events)?;
    if den <= 0.0 {
        return Err(Error::Data(format!(
            "previous model recloss {den} is not a valid denominator"
        )));
    }
    Ok(num / den)
}

/// Mean reconstruction loss on a fresh uniform-random dataset of the
/// given length.
pub fn eval_recloss_random(
    model: &Autoencoder,
    schema: &Schema,
    length: usize,
    seed: u64,
) -> Result<f64> {
    let random = make_random_dataset(schema, length, seed)?;
    eval_recloss(model, &random.events)
}

/// `recloss(real) / recloss(random)` with a random dataset of the same
/// length as the real one.
pub fn eval_randratio(
    model: &Autoencoder,
    real_events: &[Event],
    schema: &Schema,
    seed: u64,
) -> Result<f64> {
    let real = eval_recloss(model, real_events)?;
    let rand = eval_recloss_random(model, schema, real_events.len(), seed)?;
    Ok(real / rand)
}

/// Writes the metric series as CSV with a header row; input to external
/// plotting.
pub fn write_metrics_csv(path: impl AsRef<Path>, reports: &[MetricsReport]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("interval,recloss,recloss_rand,gen,diff,randratio\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.interval_id, r.recloss, r.recloss_rand, r.gen, r.diff, r.randratio
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
