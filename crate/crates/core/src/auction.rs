//! Real-time auction simulation.
//!
//! Ranking a catalog under the code-augmented score would naively run the
//! encoder once per ad. Because the only ad-side inputs to the encoder are
//! the two taxonomy levels, and the low level determines the top level,
//! the encoder and the code-weight product need to run only once per
//! distinct low-level category; every ad in that category reuses the
//! cached term. Both paths assemble the final score through the same
//! fixed-order helper, so cached and naive scores are bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::cvr::{sigmoid, CvrModel};
use crate::error::{Error, Result};
use crate::rff::RffTransform;
use crate::rng::{stream_rng, Stream};
use crate::schema::Schema;

/// One catalog entry. `tcpa` is the advertiser's target cost per
/// acquisition and must be positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Ad {
    pub ad_id: u64,
    pub tax_top: usize,
    pub tax_low: usize,
    pub tcpa: f64,
}

/// User-side column values in schema order (user columns only).
#[derive(Debug, Clone, PartialEq)]
pub struct UserContext {
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuctionMode {
    Cached,
    Naive,
}

impl AuctionMode {
    pub fn name(self) -> &'static str {
        match self {
            AuctionMode::Cached => "cached",
            AuctionMode::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedAd {
    pub ad_id: u64,
    pub pcvr: f64,
    pub bid: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTiming {
    /// Encoder + feature-map + code-weight product time.
    pub code_ns: u64,
    /// Per-ad scoring and sorting time.
    pub score_ns: u64,
    pub total_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuctionResult {
    /// Sorted by bid descending, ties broken by ascending ad id.
    pub ranked: Vec<RankedAd>,
    pub encoder_invocations: usize,
    /// Ads whose taxonomy values fell outside the schema and were scored
    /// through the OOV slot.
    pub oov_ads: usize,
    pub timing: PhaseTiming,
}

/// `bid = pCVR * tCPA`.
pub fn compute_bid(pcvr: f64, tcpa: f64) -> f64 {
    debug_assert!(tcpa > 0.0, "tcpa must be positive");
    pcvr * tcpa
}

/// Full column-value vector for the encoder: user context plus the ad's
/// two taxonomy values.
fn assemble_values(schema: &Schema, user: &UserContext, top: usize, low: usize) -> Vec<usize> {
    let user_cols = schema.user_columns();
    assert_eq!(
        user.values.len(),
        user_cols.len(),
        "user context arity does not match the schema"
    );
    let mut values = vec![0usize; schema.column_count()];
    for (&col, &v) in user_cols.iter().zip(&user.values) {
        values[col] = v;
    }
    values[schema.taxonomy_top()] = top;
    values[schema.taxonomy_low()] = low;
    values
}

pub fn rank_auction(
    model: &CvrModel,
    encoder: &Autoencoder,
    rff: Option<&RffTransform>,
    schema: &Schema,
    user: &UserContext,
    catalog: &[Ad],
    mode: AuctionMode,
) -> Result<AuctionResult> {
    if catalog.is_empty() {
        return Err(Error::Data("cannot rank an empty catalog".into()));
    }
    let start = Instant::now();
    let top_col = schema.taxonomy_top();
    let low_col = schema.taxonomy_low();

    // clamp unknown taxonomy values to the OOV slots up front
    let mut oov_ads = 0usize;
    let clamped: Vec<(u64, usize, usize, f64)> = catalog
        .iter()
        .map(|ad| {
            let (top, top_oov) = schema.clamp_value(top_col, ad.tax_top as i64);
            let (low, low_oov) = schema.clamp_value(low_col, ad.tax_low as i64);
            if top_oov || low_oov {
                oov_ads += 1;
            }
            (ad.ad_id, top, low, ad.tcpa)
        })
        .collect();

    let mut values = assemble_values(schema, user, 0, 0);
    let user_vec = model.user_vector(&values);

    let mut encoder_invocations = 0usize;
    let mut ranked = Vec::with_capacity(clamped.len());
    let code_ns;

    match mode {
        AuctionMode::Cached => {
            // one cache slot per low-level category; the hierarchy makes
            // the top level a function of the low level
            let mut category_tops: BTreeMap<usize, usize> = BTreeMap::new();
            for &(_, top, low, _) in &clamped {
                match category_tops.get(&low) {
                    None => {
                        category_tops.insert(low, top);
                    }
                    Some(&seen) if seen != top => {
                        return Err(Error::Data(format!(
                            "taxonomy hierarchy violation: low category {low} appears under tops {seen} and {top}"
                        )));
                    }
                    Some(_) => {}
                }
            }

            let code_start = Instant::now();
            let mut cached_terms: BTreeMap<usize, f64> = BTreeMap::new();
            for (&low, &top) in &category_tops {
                values[top_col] = top;
                values[low_col] = low;
                let term = if model.code_mode() == crate::cvr::CodeMode::Off {
                    0.0
                } else {
                    encoder_invocations += 1;
                    let code = encoder.encode(&values);
                    model.code_term(&model.code_features(&code, rff))
                };
                cached_terms.insert(low, term);
            }
            code_ns = code_start.elapsed().as_nanos() as u64;

            for &(ad_id, top, low, tcpa) in &clamped {
                values[top_col] = top;
                values[low_col] = low;
                let ad_vec = model.ad_vector(&values);
                let ua: f64 = user_vec.iter().zip(&ad_vec).map(|(u, a)| u * a).sum();
                let score =
                    CvrModel::score_from_parts(ua, 0.0, model.bias, cached_terms[&low]);
                let pcvr = sigmoid(score);
                ranked.push(RankedAd {
                    ad_id,
                    pcvr,
                    bid: compute_bid(pcvr, tcpa),
                });
            }
        }
        AuctionMode::Naive => {
            let mut code_total = 0u64;
            for &(ad_id, top, low, tcpa) in &clamped {
                values[top_col] = top;
                values[low_col] = low;
                let code_start = Instant::now();
                let term = if model.code_mode() == crate::cvr::CodeMode::Off {
                    0.0
                } else {
                    encoder_invocations += 1;
                    let code = encoder.encode(&values);
                    model.code_term(&model.code_features(&code, rff))
                };
                code_total += code_start.elapsed().as_nanos() as u64;

                let ad_vec = model.ad_vector(&values);
                let ua: f64 = user_vec.iter().zip(&ad_vec).map(|(u, a)| u * a).sum();
                let score = CvrModel::score_from_parts(ua, 0.0, model.bias, term);
                let pcvr = sigmoid(score);
                ranked.push(RankedAd {
                    ad_id,
                    pcvr,
                    bid: compute_bid(pcvr, tcpa),
                });
            }
            code_ns = code_total;
        }
    }

    ranked.sort_by(|a, b| {
        b.bid
            .partial_cmp(&a.bid)
            .expect("bids are finite")
            .then(a.ad_id.cmp(&b.ad_id))
    });

    let total_ns = start.elapsed().as_nanos() as u64;
    Ok(AuctionResult {
        ranked,
        encoder_invocations,
        oov_ads,
        timing: PhaseTiming {
            code_ns,
            score_ns: total_ns.saturating_sub(code_ns),
            total_ns,
        },
    })
}

// ---------------------------------------------------------------------------
// benchmark harness

/// Benchmark scenario; also the schema of the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchScenario {
    pub catalog_size: usize,
    pub category_count: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl BenchScenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("scenario file {}: {}", path.display(), e)))
    }
}

/// Random catalog over the first `category_count` low categories, with
/// tops derived through the hierarchy.
pub fn gen_catalog(schema: &Schema, scenario: &BenchScenario) -> Result<Vec<Ad>> {
    let n_low = schema.columns()[schema.taxonomy_low()].cardinality;
    let n_top = schema.columns()[schema.taxonomy_top()].cardinality;
    if scenario.category_count == 0 || scenario.category_count > n_low {
        return Err(Error::Config(format!(
            "category_count must be in [1, {n_low}]"
        )));
    }
    if scenario.catalog_size == 0 {
        return Err(Error::Config("catalog_size must be >= 1".into()));
    }
    let mut rng = stream_rng(scenario.seed, Stream::Auction, 0);
    Ok((0..scenario.catalog_size as u64)
        .map(|ad_id| {
            let low = rng.random_range(0..scenario.category_count);
            Ad {
                ad_id,
                tax_top: crate::generator::taxonomy_top_of(low, n_top, n_low),
                tax_low: low,
                tcpa: rng.random_range(0.5..5.0),
            }
        })
        .collect())
}

/// Random user context for repetition `index`.
pub fn gen_user_context(schema: &Schema, seed: u64, index: u64) -> UserContext {
    let mut rng = stream_rng(seed, Stream::Auction, index + 1);
    UserContext {
        values: schema
            .user_columns()
            .iter()
            .map(|&c| rng.random_range(0..schema.columns()[c].cardinality))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: AuctionMode,
    pub median_ns: u64,
    pub p99_ns: u64,
    pub encoder_invocations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// naive median over cached median.
    pub speedup_median: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,median_ns,p99_ns,invocations\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.mode.name(),
                r.median_ns,
                r.p99_ns,
                r.encoder_invocations
            ));
        }
        out
    }
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Wall-clock comparison of the two auction modes on one catalog. Each
/// repetition draws a fresh user; one warmup auction per mode runs before
/// anything is measured.
pub fn latency_bench(
    model: &CvrModel,
    encoder: &Autoencoder,
    rff: Option<&RffTransform>,
    schema: &Schema,
    scenario: &BenchScenario,
) -> Result<BenchReport> {
    if scenario.repetitions == 0 {
        return Err(Error::Config("repetitions must be >= 1".into()));
    }
    let catalog = gen_catalog(schema, scenario)?;
    let users: Vec<UserContext> = (0..scenario.repetitions as u64)
        .map(|i| gen_user_context(schema, scenario.seed, i))
        .collect();

    let mut rows = Vec::new();
    let mut medians = BTreeMap::new();
    for mode in [AuctionMode::Cached, AuctionMode::Naive] {
        // warmup
        rank_auction(model, encoder, rff, schema, &users[0], &catalog, mode)?;
        let mut times = Vec::with_capacity(scenario.repetitions);
        let mut invocations = 0;
        for user in &users {
            let start = Instant::now();
            let result = rank_auction(model, encoder, rff, schema, user, &catalog, mode)?;
            times.push(start.elapsed().as_nanos() as u64);
            invocations = result.encoder_invocations;
        }
        times.sort_unstable();
        let median = percentile(&times, 0.5);
        medians.insert(mode.name(), median);
        rows.push(BenchRow {
            mode,
            median_ns: median,
            p99_ns: percentile(&times, 0.99),
            encoder_invocations: invocations,
        });
    }
    let speedup_median = medians["naive"] as f64 / medians["cached"] as f64;
    Ok(BenchReport {
        rows,
        speedup_median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AeDims;
    use crate::cvr::CodeMode;
    use crate::trainer::{Pipeline, PipelineConfig};

    fn test_pipeline() -> (Schema, Pipeline) {
        let schema = Schema::default_synthetic();
        let config = PipelineConfig {
            ae_dims: AeDims {
                embed_dim: 4,
                code_dim: 3,
                encoder_hidden: vec![8],
                decoder_hidden: vec![8],
            },
            rff_dim: 16,
            ..PipelineConfig::default()
        };
        let p = Pipeline::new(&schema, &config).unwrap();
        (schema, p)
    }

    #[test]
    fn bid_is_the_product() {
        assert_eq!(compute_bid(0.5, 10.0), 5.0);
        assert_eq!(compute_bid(0.0, 3.0), 0.0);
        // monotone in pcvr at fixed tcpa
        assert!(compute_bid(0.4, 2.0) < compute_bid(0.6, 2.0));
    }

    #[test]
    fn cached_and_naive_agree_bit_for_bit() {
        let (schema, p) = test_pipeline();
        let scenario = BenchScenario {
            catalog_size: 500,
            category_count: 48,
            repetitions: 1,
            seed: 3,
        };
        let catalog = gen_catalog(&schema, &scenario).unwrap();
        let user = gen_user_context(&schema, 3, 0);
        let cached = rank_auction(
            &p.cvr,
            &p.ae,
            p.rff.as_ref(),
            &schema,
            &user,
            &catalog,
            AuctionMode::Cached,
        )
        .unwrap();
        let naive = rank_auction(
            &p.cvr,
            &p.ae,
            p.rff.as_ref(),
            &schema,
            &user,
            &catalog,
            AuctionMode::Naive,
        )
        .unwrap();
        assert_eq!(cached.ranked, naive.ranked);
        assert_eq!(naive.encoder_invocations, catalog.len());
        let distinct: std::collections::BTreeSet<usize> =
            catalog.iter().map(|a| a.tax_low).collect();
        assert_eq!(cached.encoder_invocations, distinct.len());
    }

    #[test]
    fn ranking_is_sorted_and_deterministic() {
        let (schema, p) = test_pipeline();
        let scenario = BenchScenario {
            catalog_size: 200,
            category_count: 10,
            repetitions: 1,
            seed: 5,
        };
        let catalog = gen_catalog(&schema, &scenario).unwrap();
        let user = gen_user_context(&schema, 5, 0);
        let run = || {
            rank_auction(
                &p.cvr,
                &p.ae,
                p.rff.as_ref(),
                &schema,
                &user,
                &catalog,
                AuctionMode::Cached,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.ranked, b.ranked);
        for w in a.ranked.windows(2) {
            assert!(
                w[0].bid > w[1].bid || (w[0].bid == w[1].bid && w[0].ad_id < w[1].ad_id),
                "ranking order violated"
            );
        }
    }

    #[test]
    fn single_ad_catalog_works_in_both_modes() {
        let (schema, p) = test_pipeline();
        let catalog = vec![Ad {
            ad_id: 7,
            tax_top: 1,
            tax_low: 9,
            tcpa: 2.0,
        }];
        let user = gen_user_context(&schema, 1, 0);
        for mode in [AuctionMode::Cached, AuctionMode::Naive] {
            let result =
                rank_auction(&p.cvr, &p.ae, p.rff.as_ref(), &schema, &user, &catalog, mode)
                    .unwrap();
            assert_eq!(result.ranked.len(), 1);
            assert_eq!(result.encoder_invocations, 1);
        }
    }

    #[test]
    fn unknown_category_goes_through_oov_and_is_counted() {
        let (schema, p) = test_pipeline();
        let catalog = vec![
            Ad {
                ad_id: 0,
                tax_top: 1,
                tax_low: 999, // out of range
                tcpa: 1.0,
            },
            Ad {
                ad_id: 1,
                tax_top: 1,
                tax_low: 9,
                tcpa: 1.0,
            },
        ];
        let user = gen_user_context(&schema, 1, 0);
        // low 999 clamps to the OOV slot, whose hierarchy top differs from
        // tax_top 1, so use matching tops to keep the hierarchy coherent
        let mut catalog = catalog;
        catalog[0].tax_top = crate::generator::taxonomy_top_of(47, 8, 48);
        let result = rank_auction(
            &p.cvr,
            &p.ae,
            p.rff.as_ref(),
            &schema,
            &user,
            &catalog,
            AuctionMode::Cached,
        )
        .unwrap();
        assert_eq!(result.oov_ads, 1);
        assert_eq!(result.ranked.len(), 2);
    }

    #[test]
    fn hierarchy_violation_is_rejected_in_cached_mode() {
        let (schema, p) = test_pipeline();
        let catalog = vec![
            Ad {
                ad_id: 0,
                tax_top: 0,
                tax_low: 9,
                tcpa: 1.0,
            },
            Ad {
                ad_id: 1,
                tax_top: 3,
                tax_low: 9,
                tcpa: 1.0,
            },
        ];
        let user = gen_user_context(&schema, 1, 0);
        let err = rank_auction(
            &p.cvr,
            &p.ae,
            p.rff.as_ref(),
            &schema,
            &user,
            &catalog,
            AuctionMode::Cached,
        );
        assert!(err.is_err());
    }

    #[test]
    fn code_off_mode_never_invokes_the_encoder() {
        let schema = Schema::default_synthetic();
        let config = PipelineConfig {
            code_mode: CodeMode::Off,
            ae_dims: AeDims {
                embed_dim: 4,
                code_dim: 3,
                encoder_hidden: vec![8],
                decoder_hidden: vec![8],
            },
            ..PipelineConfig::default()
        };
        let p = Pipeline::new(&schema, &config).unwrap();
        let scenario = BenchScenario {
            catalog_size: 50,
            category_count: 5,
            repetitions: 1,
            seed: 2,
        };
        let catalog = gen_catalog(&schema, &scenario).unwrap();
        let user = gen_user_context(&schema, 2, 0);
        for mode in [AuctionMode::Cached, AuctionMode::Naive] {
            let result =
                rank_auction(&p.cvr, &p.ae, None, &schema, &user, &catalog, mode).unwrap();
            assert_eq!(result.encoder_invocations, 0);
        }
    }

    #[test]
    fn invocation_ratio_matches_catalog_over_categories() {
        let (schema, p) = test_pipeline();
        let scenario = BenchScenario {
            catalog_size: 960,
            category_count: 48,
            repetitions: 1,
            seed: 11,
        };
        let catalog = gen_catalog(&schema, &scenario).unwrap();
        let user = gen_user_context(&schema, 11, 0);
        let naive = rank_auction(
            &p.cvr,
            &p.ae,
            p.rff.as_ref(),
            &schema,
            &user,
            &catalog,
            AuctionMode::Naive,
        )
        .unwrap();
        let cached = rank_auction(
            &p.cvr,
            &p.ae,
            p.rff.as_ref(),
            &schema,
            &user,
            &catalog,
            AuctionMode::Cached,
        )
        .unwrap();
        let distinct: std::collections::BTreeSet<usize> =
            catalog.iter().map(|a| a.tax_low).collect();
        assert_eq!(naive.encoder_invocations, scenario.catalog_size);
        assert_eq!(cached.encoder_invocations, distinct.len());
        assert!(cached.encoder_invocations <= scenario.category_count);
    }
}
