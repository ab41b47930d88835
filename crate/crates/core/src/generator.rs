//! Synthetic event streams with planted conversion structure.
//!
//! Events are drawn from a mixture of latent clusters. Clusters come in
//! pairs that share every per-column distribution; the two members of a
//! pair differ only in the *joint* parity of two designated user columns,
//! so cluster parity is invisible to any single-column statistic (and to
//! any model that aggregates user columns additively) but recoverable from
//! the column interaction. The click-conversion label is driven by an XOR
//! of cluster parity and low-taxonomy parity, which makes the
//! Bayes-optimal decision boundary nonlinear in any faithful embedding of
//! the event.
//!
//! View-attributed conversions are drawn from a cluster prior whose parity
//! balance is shifted by a configured total-variation amount — the
//! contamination that motivates keeping them out of CVR training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventKind, IntervalDataset};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Per-column dictionary sizes; the last two columns are the taxonomy
    /// top and low levels, everything before them is user-side.
    pub cardinalities: Vec<usize>,
    /// Number of latent clusters (must be even: clusters form pairs).
    pub clusters: usize,
    pub events_per_interval: usize,
    pub intervals: usize,
    /// Marginal click-conversion probability; the XOR offset is solved so
    /// the label rate averages to this.
    pub conversion_rate: f64,
    /// Fraction of events that are view-attributed conversions.
    pub view_share: f64,
    /// Total-variation distance between the view-event cluster prior and
    /// the click-event cluster prior.
    pub view_prior_shift: f64,
    /// Per-interval mixing rate toward an alternate cluster prior; 0 keeps
    /// the stream stationary.
    pub drift_rate: f64,
    /// Log-odds swing of the planted XOR interaction.
    pub xor_amplitude: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            cardinalities: vec![50, 20, 10, 100, 30, 8, 48],
            clusters: 16,
            events_per_interval: 20_000,
            intervals: 10,
            conversion_rate: 0.15,
            view_share: 0.3,
            view_prior_shift: 0.3,
            drift_rate: 0.0,
            xor_amplitude: 2.0,
        }
    }
}

/// Per-event generation trace, exported for tests that must see the
/// latent state (cluster assignments, planted parities).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebugRecord {
    pub interval: u64,
    pub kind: EventKind,
    pub cluster: usize,
    pub cluster_parity: u8,
    pub tax_parity: u8,
    /// `cluster_parity XOR tax_parity` — the planted label driver.
    pub xor_bit: u8,
}

/// One cluster pair: both members produce these column values; only the
/// joint parity of the two parity columns distinguishes them.
struct PairProfile {
    /// One fixed value per plain user column.
    plain_values: Vec<usize>,
    /// Two even then two odd dictionary values of parity column A.
    parity_a: [usize; 4],
    /// Two even then two odd dictionary values of parity column B.
    parity_b: [usize; 4],
    /// Low-taxonomy values are `{2a, 2a+1}`, one of each parity.
    tax_low_base: usize,
}

struct World {
    pair_weights: Vec<f64>,
    alt_pair_weights: Vec<f64>,
    profiles: Vec<PairProfile>,
    base_logit: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Solves `(sigmoid(b + amp) + sigmoid(b - amp)) / 2 = rate` for `b`.
fn solve_base_logit(rate: f64, amplitude: f64) -> f64 {
    let f = |b: f64| 0.5 * (sigmoid(b + amplitude) + sigmoid(b - amplitude)) - rate;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn validate(config: &GeneratorConfig) -> Result<()> {
    let c = config.cardinalities.len();
    if c < 4 {
        return Err(Error::Config(
            "generator needs at least 4 columns (2 user + 2 taxonomy)".into(),
        ));
    }
    if config.cardinalities.iter().any(|&n| n < 2) {
        return Err(Error::Config("column cardinalities must be >= 2".into()));
    }
    // the two user columns carrying the hidden parity need two values of
    // each parity
    for &col in &[c - 4, c - 3] {
        if config.cardinalities[col] < 4 {
            return Err(Error::Config(format!(
                "parity column {} needs cardinality >= 4, got {}",
                col, config.cardinalities[col]
            )));
        }
    }
    if config.clusters < 2 || config.clusters % 2 != 0 {
        return Err(Error::Config("cluster count must be even and >= 2".into()));
    }
    if !(0.0..1.0).contains(&config.conversion_rate) || config.conversion_rate <= 0.0 {
        return Err(Error::Config("conversion_rate must be in (0, 1)".into()));
    }
    if !(0.0..=1.0).contains(&config.view_share) {
        return Err(Error::Config("view_share must be in [0, 1]".into()));
    }
    if !(0.0..=0.5).contains(&config.view_prior_shift) {
        return Err(Error::Config("view_prior_shift must be in [0, 0.5]".into()));
    }
    if config.drift_rate < 0.0 || !config.drift_rate.is_finite() {
        return Err(Error::Config("drift_rate must be finite and >= 0".into()));
    }
    if config.xor_amplitude < 0.0 || !config.xor_amplitude.is_finite() {
        return Err(Error::Config("xor_amplitude must be finite and >= 0".into()));
    }
    if config.intervals == 0 {
        return Err(Error::Config("need at least one interval".into()));
    }
    Ok(())
}

/// Draws `count` distinct values of the given parity from `[0, n)`.
fn draw_parity_values(rng: &mut ChaCha8Rng, n: usize, parity: usize, count: usize) -> Vec<usize> {
    let pool: Vec<usize> = (0..n).filter(|v| v % 2 == parity).collect();
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let v = pool[rng.random_range(0..pool.len())];
        if !picked.contains(&v) {
            picked.push(v);
        }
    }
    picked
}

fn build_world(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> World {
    let c = config.cardinalities.len();
    let pairs = config.clusters / 2;
    let (col_a, col_b) = (c - 4, c - 3);
    let n_low = config.cardinalities[c - 1];

    let draw_weights = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..pairs).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect::<Vec<f64>>()
    };
    let pair_weights = draw_weights(rng);
    let alt_pair_weights = draw_weights(rng);

    let profiles = (0..pairs)
        .map(|_| {
            let plain_values = (0..c - 4)
                .map(|col| rng.random_range(0..config.cardinalities[col]))
                .collect();
            let ae = draw_parity_values(rng, config.cardinalities[col_a], 0, 2);
            let ao = draw_parity_values(rng, config.cardinalities[col_a], 1, 2);
            let be = draw_parity_values(rng, config.cardinalities[col_b], 0, 2);
            let bo = draw_parity_values(rng, config.cardinalities[col_b], 1, 2);
            PairProfile {
                plain_values,
                parity_a: [ae[0], ae[1], ao[0], ao[1]],
                parity_b: [be[0], be[1], bo[0], bo[1]],
                tax_low_base: rng.random_range(0..n_low / 2),
            }
        })
        .collect();

    World {
        pair_weights,
        alt_pair_weights,
        profiles,
        base_logit: solve_base_logit(config.conversion_rate, config.xor_amplitude),
    }
}

/// Maps a low-taxonomy category to its top-level category. The hierarchy
/// is fixed so that each low category has exactly one parent; the auction
/// cache depends on that.
pub fn taxonomy_top_of(low: usize, top_cardinality: usize, low_cardinality: usize) -> usize {
    low * top_cardinality / low_cardinality
}

fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let mut u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Generates the interval sequence together with its latent trace.
pub fn gen_synthetic_with_debug(
    config: &GeneratorConfig,
    seed: u64,
) -> Result<(Vec<IntervalDataset>, Vec<DebugRecord>)> {
    validate(config)?;
    let c = config.cardinalities.len();
    let (col_a, col_b) = (c - 4, c - 3);
    let (col_top, col_low) = (c - 2, c - 1);
    let (n_top, n_low) = (config.cardinalities[col_top], config.cardinalities[col_low]);

    let world = build_world(config, &mut stream_rng(seed, Stream::GeneratorProfiles, 0));
    let mut rng = stream_rng(seed, Stream::GeneratorEvents, 0);

    let mut datasets = Vec::with_capacity(config.intervals);
    let mut debug = Vec::new();
    let mut weights = vec![0.0; world.pair_weights.len()];

    for t in 0..config.intervals as u64 {
        // prior drift: mix the base pair weights toward the alternate draw
        let lambda = (config.drift_rate * t as f64).min(1.0);
        for (w, (base, alt)) in weights
            .iter_mut()
            .zip(world.pair_weights.iter().zip(&world.alt_pair_weights))
        {
            *w = (1.0 - lambda) * base + lambda * alt;
        }

        let mut events = Vec::with_capacity(config.events_per_interval);
        for _ in 0..config.events_per_interval {
            let is_view = rng.random::<f64>() < config.view_share;

            let pair = sample_categorical(&mut rng, &weights);
            // view events see a parity-shifted cluster prior; the pair
            // marginal is unchanged, only the within-pair split moves
            let odd_prob = if is_view {
                0.5 + config.view_prior_shift
            } else {
                0.5
            };
            let parity = usize::from(rng.random::<f64>() < odd_prob);
            let cluster = 2 * pair + parity;
            let profile = &world.profiles[pair];

            let mut values = vec![0usize; c];
            values[..c - 4].copy_from_slice(&profile.plain_values);

            // joint parity of (A, B) equals the cluster parity; each
            // column's own marginal stays parity-balanced
            let a_slot = rng.random_range(0..4);
            let va = profile.parity_a[a_slot];
            let b_parity = (va % 2) ^ parity;
            let b_slot = 2 * b_parity + rng.random_range(0..2);
            values[col_a] = va;
            values[col_b] = profile.parity_b[b_slot];

            let low = 2 * profile.tax_low_base + rng.random_range(0..2);
            values[col_low] = low;
            values[col_top] = taxonomy_top_of(low, n_top, n_low);

            let xor_bit = ((cluster & 1) ^ (low & 1)) as u8;
            let kind = if is_view {
                EventKind::ViewConversion
            } else {
                let swing = if xor_bit == 1 { 1.0 } else { -1.0 };
                let p = sigmoid(world.base_logit + config.xor_amplitude * swing);
                if rng.random::<f64>() < p {
                    EventKind::ClickConversion
                } else {
                    EventKind::ClickNegative
                }
            };

            debug.push(DebugRecord {
                interval: t,
                kind,
                cluster,
                cluster_parity: (cluster & 1) as u8,
                tax_parity: (low & 1) as u8,
                xor_bit,
            });
            events.push(Event {
                values,
                kind,
                interval_id: t,
            });
        }
        datasets.push(IntervalDataset {
            interval_id: t,
            events,
        });
    }
    Ok((datasets, debug))
}

/// As [`gen_synthetic_with_debug`], dropping the trace.
pub fn gen_synthetic(config: &GeneratorConfig, seed: u64) -> Result<Vec<IntervalDataset>> {
    gen_synthetic_with_debug(config, seed).map(|(datasets, _)| datasets)
}
