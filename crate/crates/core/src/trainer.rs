//! Per-interval training orchestration.
//!
//! Each interval runs one pass over its events in arrival order. Codes for
//! CVR training always come from the *previous* interval's frozen encoder,
//! never from the auto-encoder being updated in the same pass — the
//! stability contract the linear code weights depend on. Every event is
//! evaluated before anything trains on it.
//!
//! Event routing: click events feed the CVR model; conversion events (any
//! attribution) feed the auto-encoder; a click-attributed conversion is
//! both a CVR positive and an auto-encoder sample. With the contamination
//! flag set, view-attributed conversions additionally train the CVR model
//! as positives — the deliberately broken configuration — while the
//! click-only evaluation stays unchanged.

use std::fs;
use std::path::Path;

use crate::autoencoder::{AeDims, Autoencoder};
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::cvr::{CodeMode, CvrEval, CvrModel, Prediction, SegmentCalibration};
use crate::error::{Error, Result};
use crate::events::IntervalDataset;
use crate::metrics::{eval_recloss_random, MetricsReport};
use crate::nn::OptimizerState;
use crate::rff::RffTransform;
use crate::schema::Schema;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub ae_dims: AeDims,
    pub latent_dim: usize,
    pub code_mode: CodeMode,
    pub rff_dim: usize,
    pub rff_sigma: f64,
    pub ae_lr: f64,
    pub ae_momentum: f64,
    pub latent_lr: f64,
    pub code_lr: f64,
    pub cvr_momentum: f64,
    pub init_seed: u64,
    pub rff_seed: u64,
    pub metrics_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ae_dims: AeDims::default(),
            latent_dim: 16,
            code_mode: CodeMode::Rff,
            rff_dim: 200,
            rff_sigma: 1.0,
            ae_lr: 0.01,
            ae_momentum: 0.9,
            latent_lr: 0.05,
            code_lr: 0.01,
            cvr_momentum: 0.0,
            init_seed: 1,
            rff_seed: 2,
            metrics_seed: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainFlags {
    /// Feed view-attributed conversions to the CVR model as positives.
    pub contaminate: bool,
}

/// Progressive-validation row for one interval: every click event is
/// scored before the model trains on it.
#[derive(Debug, Clone, PartialEq)]
pub struct CvrEvalRow {
    pub interval_id: u64,
    pub clicks: u64,
    pub positives: u64,
    pub logloss: f64,
    pub auc: Option<f64>,
    pub mean_pcvr: f64,
    pub empirical_cvr: f64,
    pub calibration: Option<f64>,
    pub segments: Vec<SegmentCalibration>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalOutcome {
    /// Auto-encoder metrics; absent when the interval had no conversions.
    pub metrics: Option<MetricsReport>,
    /// CVR progressive validation; absent when the interval had no clicks.
    pub cvr_eval: Option<CvrEvalRow>,
    /// Events consumed by CVR training (clicks, plus views when
    /// contaminated).
    pub cvr_training_events: u64,
    /// Events consumed by auto-encoder training (all conversions).
    pub ae_training_events: u64,
}

/// Full per-stream training state: model parameters, optimizer buffers,
/// and the frozen feature transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    schema: Schema,
    pub ae: Autoencoder,
    pub ae_opt: OptimizerState,
    pub cvr: CvrModel,
    pub cvr_latent_opt: OptimizerState,
    pub cvr_code_opt: OptimizerState,
    pub rff: Option<RffTransform>,
    pub interval_tag: Option<u64>,
    metrics_seed: u64,
}

fn mix_seed(seed: u64, interval: u64) -> u64 {
    // splitmix-style spread so each interval draws an unrelated random
    // evaluation dataset
    let mut z = seed ^ (interval.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 27)
}

impl Pipeline {
    pub fn new(schema: &Schema, config: &PipelineConfig) -> Result<Self> {
        let ae = Autoencoder::init(schema, config.ae_dims.clone(), config.init_seed)?;
        let ae_opt = OptimizerState::new(
            config.ae_lr,
            config.ae_momentum,
            &ae.optimizer_tensor_lens(),
        );
        let (rff, code_feature_dim) = match config.code_mode {
            CodeMode::Rff => (
                Some(RffTransform::init(
                    config.ae_dims.code_dim,
                    config.rff_dim,
                    config.rff_sigma,
                    config.rff_seed,
                )?),
                config.rff_dim,
            ),
            CodeMode::Linear => (None, config.ae_dims.code_dim),
            CodeMode::Off => (None, 0),
        };
        let cvr = CvrModel::init(
            schema,
            config.latent_dim,
            config.code_mode,
            code_feature_dim,
            0,
            config.init_seed,
        )?;
        let cvr_latent_opt = OptimizerState::new(
            config.latent_lr,
            config.cvr_momentum,
            &cvr.latent_optimizer_lens(),
        );
        let cvr_code_opt = OptimizerState::new(
            config.code_lr,
            config.cvr_momentum,
            &cvr.code_optimizer_lens(),
        );
        Ok(Pipeline {
            schema: schema.clone(),
            ae,
            ae_opt,
            cvr,
            cvr_latent_opt,
            cvr_code_opt,
            rff,
            interval_tag: None,
            metrics_seed: config.metrics_seed,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            schema_fingerprint: self.schema.fingerprint(),
            interval_id: self.interval_tag,
            autoencoder: self.ae.clone(),
            ae_opt: self.ae_opt.clone(),
            cvr: self.cvr.clone(),
            cvr_latent_opt: self.cvr_latent_opt.clone(),
            cvr_code_opt: self.cvr_code_opt.clone(),
            rff: self.rff.clone(),
        }
    }

    /// Resumes from a checkpoint. `metrics_seed` must match the original
    /// run for bit-exact continuation.
    pub fn from_checkpoint(checkpoint: Checkpoint, schema: &Schema, metrics_seed: u64) -> Self {
        Pipeline {
            schema: schema.clone(),
            interval_tag: checkpoint.interval_id,
            ae: checkpoint.autoencoder,
            ae_opt: checkpoint.ae_opt,
            cvr: checkpoint.cvr,
            cvr_latent_opt: checkpoint.cvr_latent_opt,
            cvr_code_opt: checkpoint.cvr_code_opt,
            rff: checkpoint.rff,
            metrics_seed,
        }
    }

    /// Trains one interval and reports its metrics.
    pub fn run_interval(
        &mut self,
        dataset: &IntervalDataset,
        flags: &TrainFlags,
    ) -> Result<IntervalOutcome> {
        if let Some(prev) = self.interval_tag {
            if dataset.interval_id != prev + 1 {
                return Err(Error::Data(format!(
                    "interval ordering violation: model trained through {prev}, dataset is {}",
                    dataset.interval_id
                )));
            }
        }
        let t = dataset.interval_id;
        let tax_top_col = self.schema.taxonomy_top();

        // Enc_{t-1}: codes for CVR training and the previous-model side of
        // the metrics both come from this frozen snapshot.
        let frozen = self.ae.clone();

        let mut scored: Vec<(Prediction, bool, usize)> = Vec::new();
        let mut prev_codes: Vec<Vec<f64>> = Vec::new();
        let mut conversion_idx: Vec<usize> = Vec::new();
        let mut recloss_prev_sum = 0.0;
        let mut cvr_training_events = 0u64;
        let mut ae_training_events = 0u64;

        for (i, event) in dataset.events.iter().enumerate() {
            let code;
            if event.kind.is_conversion() {
                let fwd = frozen.forward(&event.values);
                recloss_prev_sum += fwd.recloss;
                code = fwd.code;
            } else {
                code = frozen.encode(&event.values);
            }

            if event.kind.is_click() {
                let feats = self.cvr.code_features(&code, self.rff.as_ref());
                let pred = self.cvr.train_step(
                    event,
                    &feats,
                    &[],
                    &mut self.cvr_latent_opt,
                    &mut self.cvr_code_opt,
                )?;
                cvr_training_events += 1;
                scored.push((pred, event.label() == 1.0, event.values[tax_top_col]));
            } else if flags.contaminate {
                let feats = self.cvr.code_features(&code, self.rff.as_ref());
                self.cvr.train_step_with_label(
                    &event.values,
                    1.0,
                    &feats,
                    &[],
                    &mut self.cvr_latent_opt,
                    &mut self.cvr_code_opt,
                );
                cvr_training_events += 1;
            }

            if event.kind.is_conversion() {
                prev_codes.push(code);
                conversion_idx.push(i);
                self.ae.train_step(&event.values, &mut self.ae_opt);
                ae_training_events += 1;
            }
        }

        // metrics pass over the interval's conversions with the trained
        // model M_t
        let metrics = if conversion_idx.is_empty() {
            None
        } else {
            let n = conversion_idx.len();
            let mut recloss_sum = 0.0;
            let mut diff_sum = 0.0;
            for (j, &i) in conversion_idx.iter().enumerate() {
                let fwd = self.ae.forward(&dataset.events[i].values);
                recloss_sum += fwd.recloss;
                diff_sum += fwd
                    .code
                    .iter()
                    .zip(&prev_codes[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
            let recloss = recloss_sum / n as f64;
            let recloss_prev = recloss_prev_sum / n as f64;
            if recloss_prev <= 0.0 {
                return Err(Error::Contract(format!(
                    "previous-model recloss {recloss_prev} cannot normalize Gen"
                )));
            }
            let recloss_rand =
                eval_recloss_random(&self.ae, &self.schema, n, mix_seed(self.metrics_seed, t))?;
            Some(MetricsReport {
                interval_id: t,
                recloss,
                recloss_rand,
                gen: recloss / recloss_prev,
                diff: diff_sum / n as f64,
                randratio: recloss / recloss_rand,
            })
        };

        let cvr_eval = if scored.is_empty() {
            None
        } else {
            let eval = CvrEval::from_scored(&scored);
            Some(CvrEvalRow {
                interval_id: t,
                clicks: eval.clicks,
                positives: eval.positives,
                logloss: eval.logloss,
                auc: eval.auc,
                mean_pcvr: eval.mean_pcvr,
                empirical_cvr: eval.empirical_cvr,
                calibration: eval.calibration,
                segments: eval.segments,
            })
        };

        self.interval_tag = Some(t);
        self.ae.interval_tag = Some(t);
        Ok(IntervalOutcome {
            metrics,
            cvr_eval,
            cvr_training_events,
            ae_training_events,
        })
    }

    /// Runs every interval in order, collecting the reports.
    pub fn run_stream(
        &mut self,
        datasets: &[IntervalDataset],
        flags: &TrainFlags,
    ) -> Result<RunArtifacts> {
        let mut artifacts = RunArtifacts::default();
        for ds in datasets {
            let outcome = self.run_interval(ds, flags)?;
            if let Some(m) = outcome.metrics {
                artifacts.metrics.push(m);
            }
            if let Some(e) = outcome.cvr_eval {
                artifacts.evals.push(e);
            }
        }
        Ok(artifacts)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunArtifacts {
    pub metrics: Vec<MetricsReport>,
    pub evals: Vec<CvrEvalRow>,
}

impl RunArtifacts {
    /// Mean progressive logloss across intervals, weighted by click count.
    pub fn overall_logloss(&self) -> Option<f64> {
        let clicks: u64 = self.evals.iter().map(|e| e.clicks).sum();
        if clicks == 0 {
            return None;
        }
        let total: f64 = self
            .evals
            .iter()
            .map(|e| e.logloss * e.clicks as f64)
            .sum();
        Some(total / clicks as f64)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Progressive CVR evaluation rows as CSV.
pub fn write_cvr_eval_csv(path: impl AsRef<Path>, rows: &[CvrEvalRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out =
        String::from("interval,clicks,positives,logloss,auc,mean_pcvr,empirical_cvr,calibration\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.interval_id,
            r.clicks,
            r.positives,
            r.logloss,
            fmt_opt(r.auc),
            r.mean_pcvr,
            r.empirical_cvr,
            fmt_opt(r.calibration),
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-segment calibration rows as CSV.
pub fn write_segment_csv(path: impl AsRef<Path>, rows: &[CvrEvalRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out =
        String::from("interval,segment,clicks,positives,mean_pcvr,empirical_cvr,ratio\n");
    for r in rows {
        for s in &r.segments {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.interval_id,
                s.segment,
                s.clicks,
                s.positives,
                s.mean_pcvr,
                s.empirical_cvr,
                fmt_opt(s.ratio),
            ));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, EventKind};
    use crate::generator::{gen_synthetic, GeneratorConfig};

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            ae_dims: AeDims {
                embed_dim: 4,
                code_dim: 3,
                encoder_hidden: vec![8],
                decoder_hidden: vec![8],
            },
            rff_dim: 16,
            ..PipelineConfig::default()
        }
    }

    fn small_stream(intervals: usize) -> Vec<IntervalDataset> {
        gen_synthetic(
            &GeneratorConfig {
                events_per_interval: 300,
                intervals,
                ..GeneratorConfig::default()
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn identical_runs_produce_identical_checkpoints() {
        let schema = Schema::default_synthetic();
        let stream = small_stream(3);
        let run = || {
            let mut p = Pipeline::new(&schema, &small_config()).unwrap();
            p.run_stream(&stream, &TrainFlags::default()).unwrap();
            p.to_checkpoint().to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn interval_without_conversions_leaves_ae_untouched() {
        let schema = Schema::default_synthetic();
        let mut p = Pipeline::new(&schema, &small_config()).unwrap();
        let clicks_only = IntervalDataset {
            interval_id: 0,
            events: (0..50)
                .map(|i| Event {
                    values: vec![i % 50, 0, 0, 0, 0, 0, 0],
                    kind: EventKind::ClickNegative,
                    interval_id: 0,
                })
                .collect(),
        };
        let before = p.ae.clone();
        let outcome = p.run_interval(&clicks_only, &TrainFlags::default()).unwrap();
        assert_eq!(p.ae.embeddings, before.embeddings);
        assert_eq!(p.ae.encoder, before.encoder);
        assert_eq!(p.ae.decoder, before.decoder);
        assert!(outcome.metrics.is_none());
        assert_eq!(outcome.ae_training_events, 0);
        assert_eq!(outcome.cvr_training_events, 50);
    }

    #[test]
    fn empty_interval_passes_checkpoint_through() {
        let schema = Schema::default_synthetic();
        let mut p = Pipeline::new(&schema, &small_config()).unwrap();
        let before = p.to_checkpoint().to_bytes();
        let empty = IntervalDataset {
            interval_id: 0,
            events: vec![],
        };
        let outcome = p.run_interval(&empty, &TrainFlags::default()).unwrap();
        assert!(outcome.metrics.is_none());
        assert!(outcome.cvr_eval.is_none());
        // only the interval tag advances
        let mut after = Checkpoint::from_bytes(&p.to_checkpoint().to_bytes(), &schema).unwrap();
        assert_eq!(after.interval_id, Some(0));
        after.interval_id = None;
        after.autoencoder.interval_tag = None;
        assert_eq!(after.to_bytes(), before);
    }

    #[test]
    fn interval_ordering_is_enforced() {
        let schema = Schema::default_synthetic();
        let stream = small_stream(3);
        let mut p = Pipeline::new(&schema, &small_config()).unwrap();
        p.run_interval(&stream[0], &TrainFlags::default()).unwrap();
        let err = p.run_interval(&stream[2], &TrainFlags::default());
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn view_events_never_touch_cvr_within_an_interval() {
        // within one interval the click codes come from the frozen
        // start-of-interval encoder, so dropping the interval's view
        // events cannot change any CVR parameter (they reach the CVR
        // model only through the *next* interval's encoder)
        let schema = Schema::default_synthetic();
        let stream = small_stream(1);
        let mut with_views = Pipeline::new(&schema, &small_config()).unwrap();
        with_views
            .run_stream(&stream, &TrainFlags::default())
            .unwrap();

        let stripped: Vec<IntervalDataset> = stream
            .iter()
            .map(|ds| IntervalDataset {
                interval_id: ds.interval_id,
                events: ds
                    .events
                    .iter()
                    .filter(|e| e.kind != EventKind::ViewConversion)
                    .cloned()
                    .collect(),
            })
            .collect();
        let mut without_views = Pipeline::new(&schema, &small_config()).unwrap();
        without_views
            .run_stream(&stripped, &TrainFlags::default())
            .unwrap();

        assert_eq!(with_views.cvr, without_views.cvr);
        assert_ne!(with_views.ae, without_views.ae);
    }

    #[test]
    fn contamination_flag_changes_the_cvr_model() {
        let schema = Schema::default_synthetic();
        let stream = small_stream(2);
        let mut clean = Pipeline::new(&schema, &small_config()).unwrap();
        clean.run_stream(&stream, &TrainFlags::default()).unwrap();
        let mut dirty = Pipeline::new(&schema, &small_config()).unwrap();
        dirty
            .run_stream(&stream, &TrainFlags { contaminate: true })
            .unwrap();
        assert_ne!(clean.cvr, dirty.cvr);
        // the auto-encoder path is identical either way
        assert_eq!(clean.ae, dirty.ae);
    }

    #[test]
    fn stream_conservation_counts() {
        let schema = Schema::default_synthetic();
        let stream = small_stream(1);
        let ds = &stream[0];
        let clicks = ds.events.iter().filter(|e| e.kind.is_click()).count() as u64;
        let conversions = ds.events.iter().filter(|e| e.kind.is_conversion()).count() as u64;
        let views = ds
            .events
            .iter()
            .filter(|e| e.kind == EventKind::ViewConversion)
            .count() as u64;

        let mut p = Pipeline::new(&schema, &small_config()).unwrap();
        let outcome = p.run_interval(ds, &TrainFlags::default()).unwrap();
        assert_eq!(outcome.cvr_training_events, clicks);
        assert_eq!(outcome.ae_training_events, conversions);

        let mut p = Pipeline::new(&schema, &small_config()).unwrap();
        let outcome = p.run_interval(ds, &TrainFlags { contaminate: true }).unwrap();
        assert_eq!(outcome.cvr_training_events, clicks + views);
    }

    #[test]
    fn reports_align_one_to_one_with_intervals() {
        let schema = Schema::default_synthetic();
        let stream = small_stream(4);
        let mut p = Pipeline::new(&schema, &small_config()).unwrap();
        let artifacts = p.run_stream(&stream, &TrainFlags::default()).unwrap();
        assert_eq!(artifacts.metrics.len(), 4);
        assert_eq!(artifacts.evals.len(), 4);
        for (i, (m, e)) in artifacts.metrics.iter().zip(&artifacts.evals).enumerate() {
            assert_eq!(m.interval_id, i as u64);
            assert_eq!(e.interval_id, i as u64);
        }
    }
}
