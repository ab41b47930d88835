//! Factorization-style CVR model: `f = <U, A> + Σ w_i x_i + b + <W, C>`
//! where `U`/`A` are sums of per-column latent vectors for the user and ad
//! sides, and `C` is the (optionally RFF-expanded) auto-encoder code.
//! Trained with logistic SGD on click events only; view-attributed
//! conversions are rejected unless the caller deliberately opts into the
//! contamination experiment.

use rand::Rng;

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::events::{Event, EventKind};
use crate::nn::{Matrix, OptimizerState};
use crate::rff::RffTransform;
use crate::rng::{stream_rng, Stream};
use crate::schema::Schema;

/// How the auto-encoder code enters the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeMode {
    /// No code term at all — the bare factorization model.
    Off,
    /// `W` applied to the raw code (length = code dimension).
    Linear,
    /// `W` applied to the random Fourier expansion (length = RFF dimension).
    Rff,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub pcvr: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvrModel {
    latent_dim: usize,
    code_mode: CodeMode,
    user_cols: Vec<usize>,
    ad_cols: Vec<usize>,
    tax_top_col: usize,
    /// One latent table per schema column, `cardinality x latent_dim`.
    pub latents: Vec<Matrix>,
    pub aux_weights: Vec<f64>,
    pub bias: f64,
    pub code_weights: Vec<f64>,
}

impl CvrModel {
    /// `code_feature_dim` is the RFF dimension in `Rff` mode and the code
    /// dimension in `Linear` mode; it is ignored when the code is off.
    pub fn init(
        schema: &Schema,
        latent_dim: usize,
        code_mode: CodeMode,
        code_feature_dim: usize,
        aux_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        let w_len = match code_mode {
            CodeMode::Off => 0,
            CodeMode::Linear | CodeMode::Rff => {
                if code_feature_dim == 0 {
                    return Err(Error::Config("code feature dimension must be positive".into()));
                }
                code_feature_dim
            }
        };
        let mut rng = stream_rng(seed, Stream::ModelInit, 1);
        let latents = schema
            .columns()
            .iter()
            .map(|c| {
                let data = (0..c.cardinality * latent_dim)
                    .map(|_| rng.random_range(-0.05..0.05))
                    .collect();
                Matrix::from_vec(c.cardinality, latent_dim, data)
            })
            .collect();
        Ok(CvrModel {
            latent_dim,
            code_mode,
            user_cols: schema.user_columns(),
            ad_cols: schema.ad_columns(),
            tax_top_col: schema.taxonomy_top(),
            latents,
            aux_weights: vec![0.0; aux_count],
            bias: 0.0,
            code_weights: vec![0.0; w_len],
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        schema: &Schema,
        latent_dim: usize,
        code_mode: CodeMode,
        latents: Vec<Matrix>,
        aux_weights: Vec<f64>,
        bias: f64,
        code_weights: Vec<f64>,
    ) -> Self {
        CvrModel {
            latent_dim,
            code_mode,
            user_cols: schema.user_columns(),
            ad_cols: schema.ad_columns(),
            tax_top_col: schema.taxonomy_top(),
            latents,
            aux_weights,
            bias,
            code_weights,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn code_mode(&self) -> CodeMode {
        self.code_mode
    }

    pub fn param_count(&self) -> usize {
        self.latents.iter().map(|m| m.data().len()).sum::<usize>()
            + self.aux_weights.len()
            + 1
            + self.code_weights.len()
    }

    /// Turns a code into the feature block `W` consumes under the current
    /// mode. `rff` must be present exactly in `Rff` mode.
    pub fn code_features(&self, code: &[f64], rff: Option<&RffTransform>) -> Vec<f64> {
        match self.code_mode {
            CodeMode::Off => Vec::new(),
            CodeMode::Linear => code.to_vec(),
            CodeMode::Rff => rff
                .expect("code mode is Rff but no transform was supplied")
                .transform(code),
        }
    }

    /// `<W, features>` — the term the auction caches per category.
    pub fn code_term(&self, code_features: &[f64]) -> f64 {
        assert_eq!(
            code_features.len(),
            self.code_weights.len(),
            "code feature block does not match the model's code mode"
        );
        self.code_weights
            .iter()
            .zip(code_features)
            .map(|(w, c)| w * c)
            .sum()
    }

    fn column_sum(&self, cols: &[usize], values: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.latent_dim];
        for &c in cols {
            for (o, v) in out.iter_mut().zip(self.latents[c].row(values[c])) {
                *o += v;
            }
        }
        out
    }

    /// Sum of user-side latent vectors — the single user vector computed
    /// once per auction.
    pub fn user_vector(&self, values: &[usize]) -> Vec<f64> {
        self.column_sum(&self.user_cols, values)
    }

    /// Sum of ad-side latent vectors.
    pub fn ad_vector(&self, values: &[usize]) -> Vec<f64> {
        self.column_sum(&self.ad_cols, values)
    }

    /// The score is always assembled in this order so that the cached and
    /// naive auction paths produce bit-identical floats.
    pub fn score_from_parts(ua: f64, aux_sum: f64, bias: f64, code_term: f64) -> f64 {
        ua + aux_sum + bias + code_term
    }

    pub fn score(&self, values: &[usize], code_features: &[f64], aux_active: &[usize]) -> Prediction {
        assert_eq!(
            code_features.len(),
            self.code_weights.len(),
            "code feature block does not match the model's code mode"
        );
        let u = self.user_vector(values);
        let a = self.ad_vector(values);
        let ua: f64 = u.iter().zip(&a).map(|(x, y)| x * y).sum();
        let aux_sum: f64 = aux_active.iter().map(|&i| self.aux_weights[i]).sum();
        let code_term: f64 = self
            .code_weights
            .iter()
            .zip(code_features)
            .map(|(w, c)| w * c)
            .sum();
        let score = Self::score_from_parts(ua, aux_sum, self.bias, code_term);
        Prediction {
            score,
            pcvr: sigmoid(score),
        }
    }

    /// Binary cross entropy computed in the log domain.
    pub fn logloss(pred: &Prediction, y: f64) -> f64 {
        debug_assert!(y == 0.0 || y == 1.0, "label must be 0 or 1");
        if y == 1.0 {
            softplus(-pred.score)
        } else {
            softplus(pred.score)
        }
    }

    /// Tensor lengths for the latent-side optimizer: one tensor per
    /// column table, then the aux weights, then the bias.
    pub fn latent_optimizer_lens(&self) -> Vec<usize> {
        let mut lens: Vec<usize> = self.latents.iter().map(|m| m.data().len()).collect();
        lens.push(self.aux_weights.len());
        lens.push(1);
        lens
    }

    /// Tensor lengths for the code-weight optimizer.
    pub fn code_optimizer_lens(&self) -> Vec<usize> {
        vec![self.code_weights.len()]
    }

    /// One evaluate-then-train step on a click event. View-attributed
    /// conversions are a contract violation here: admitting them is
    /// exactly the calibration bug this model exists to avoid. The
    /// contamination experiment calls [`Self::train_step_with_label`]
    /// explicitly instead.
    pub fn train_step(
        &mut self,
        event: &Event,
        code_features: &[f64],
        aux_active: &[usize],
        latent_opt: &mut OptimizerState,
        code_opt: &mut OptimizerState,
    ) -> Result<Prediction> {
        if event.kind == EventKind::ViewConversion {
            return Err(Error::Contract(
                "view-attributed conversion fed to CVR training without the contamination flag"
                    .into(),
            ));
        }
        Ok(self.train_step_with_label(
            &event.values,
            event.label(),
            code_features,
            aux_active,
            latent_opt,
            code_opt,
        ))
    }

    /// Training step with an explicit label, bypassing the view-exclusion
    /// contract. Returns the pre-update prediction.
    pub fn train_step_with_label(
        &mut self,
        values: &[usize],
        y: f64,
        code_features: &[f64],
        aux_active: &[usize],
        latent_opt: &mut OptimizerState,
        code_opt: &mut OptimizerState,
    ) -> Prediction {
        let u = self.user_vector(values);
        let a = self.ad_vector(values);
        let ua: f64 = u.iter().zip(&a).map(|(x, y)| x * y).sum();
        let aux_sum: f64 = aux_active.iter().map(|&i| self.aux_weights[i]).sum();
        let code_term: f64 = self
            .code_weights
            .iter()
            .zip(code_features)
            .map(|(w, c)| w * c)
            .sum();
        let score = Self::score_from_parts(ua, aux_sum, self.bias, code_term);
        let pred = Prediction {
            score,
            pcvr: sigmoid(score),
        };

        // d logloss / d score
        let err = pred.pcvr - y;
        let finite = err.is_finite()
            && u.iter().all(|v| v.is_finite())
            && a.iter().all(|v| v.is_finite())
            && code_features.iter().all(|v| v.is_finite());
        if !finite {
            latent_opt.note_skipped();
            return pred;
        }

        // latent gradients: user rows move along A, ad rows along U
        let grad_user: Vec<f64> = a.iter().map(|v| err * v).collect();
        let grad_ad: Vec<f64> = u.iter().map(|v| err * v).collect();
        for &c in &self.user_cols {
            latent_opt.step_row(c, self.latents[c].data_mut(), self.latent_dim, values[c], &grad_user);
        }
        for &c in &self.ad_cols {
            latent_opt.step_row(c, self.latents[c].data_mut(), self.latent_dim, values[c], &grad_ad);
        }
        let aux_tensor = self.latents.len();
        for &i in aux_active {
            latent_opt.step_row(aux_tensor, &mut self.aux_weights, 1, i, &[err]);
        }
        latent_opt.step_dense(aux_tensor + 1, std::slice::from_mut(&mut self.bias), &[err]);

        if !self.code_weights.is_empty() {
            let grad_w: Vec<f64> = code_features.iter().map(|c| err * c).collect();
            code_opt.step_dense(0, &mut self.code_weights, &grad_w);
        }
        pred
    }

    /// Standalone evaluation over the click events of a dataset: mean
    /// logloss, rank AUC, and calibration overall and per top-taxonomy
    /// segment.
    pub fn evaluate(
        &self,
        encoder: &Autoencoder,
        rff: Option<&RffTransform>,
        events: &[Event],
    ) -> Result<CvrEval> {
        let mut scored = Vec::new();
        for e in events.iter().filter(|e| e.kind.is_click()) {
            let code = encoder.encode(&e.values);
            let feats = self.code_features(&code, rff);
            let pred = self.score(&e.values, &feats, &[]);
            scored.push((pred, e.label() == 1.0, e.values[self.tax_top_col]));
        }
        if scored.is_empty() {
            return Err(Error::Data("no click events to evaluate".into()));
        }
        Ok(CvrEval::from_scored(&scored))
    }
}

/// Calibration of one top-taxonomy traffic segment. `ratio` is undefined
/// (not an error) when the segment has no positives.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCalibration {
    pub segment: usize,
    pub clicks: u64,
    pub positives: u64,
    pub mean_pcvr: f64,
    pub empirical_cvr: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvrEval {
    pub clicks: u64,
    pub positives: u64,
    pub logloss: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub mean_pcvr: f64,
    pub empirical_cvr: f64,
    /// `mean_pcvr / empirical_cvr`; `None` without positives.
    pub calibration: Option<f64>,
    pub segments: Vec<SegmentCalibration>,
}

impl CvrEval {
    /// Builds the report from `(prediction, is_positive, segment)` rows.
    pub fn from_scored(rows: &[(Prediction, bool, usize)]) -> CvrEval {
        let clicks = rows.len() as u64;
        let positives = rows.iter().filter(|r| r.1).count() as u64;
        let logloss = rows
            .iter()
            .map(|(p, y, _)| CvrModel::logloss(p, if *y { 1.0 } else { 0.0 }))
            .sum::<f64>()
            / clicks as f64;
        let mean_pcvr = rows.iter().map(|(p, _, _)| p.pcvr).sum::<f64>() / clicks as f64;
        let empirical_cvr = positives as f64 / clicks as f64;
        let calibration = (positives > 0).then(|| mean_pcvr / empirical_cvr);

        let mut pairs: Vec<(f64, bool)> = rows.iter().map(|(p, y, _)| (p.score, *y)).collect();
        let auc = rank_auc(&mut pairs);

        let mut segment_ids: Vec<usize> = rows.iter().map(|r| r.2).collect();
        segment_ids.sort_unstable();
        segment_ids.dedup();
        let segments = segment_ids
            .into_iter()
            .map(|segment| {
                let seg_rows: Vec<_> = rows.iter().filter(|r| r.2 == segment).collect();
                let clicks = seg_rows.len() as u64;
                let positives = seg_rows.iter().filter(|r| r.1).count() as u64;
                let mean_pcvr =
                    seg_rows.iter().map(|(p, _, _)| p.pcvr).sum::<f64>() / clicks as f64;
                let empirical_cvr = positives as f64 / clicks as f64;
                SegmentCalibration {
                    segment,
                    clicks,
                    positives,
                    mean_pcvr,
                    empirical_cvr,
                    ratio: (positives > 0).then(|| mean_pcvr / empirical_cvr),
                }
            })
            .collect();

        CvrEval {
            clicks,
            positives,
            logloss,
            auc,
            mean_pcvr,
            empirical_cvr,
            calibration,
            segments,
        }
    }
}

/// Exact Mann-Whitney AUC with average ranks for ties. `None` when a
/// class is missing.
pub fn rank_auc(pairs: &mut [(f64, bool)]) -> Option<f64> {
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are finite"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged across the tie group
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += avg_rank * pairs[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ColumnSchema, Schema, Side};

    fn tiny_schema() -> Schema {
        Schema::new(vec![
            ColumnSchema::new("u", 3, Side::User),
            ColumnSchema::new("t", 2, Side::TaxonomyTop),
            ColumnSchema::new("l", 4, Side::TaxonomyLow),
        ])
        .unwrap()
    }

    fn opts(model: &CvrModel, lr_latent: f64, lr_code: f64) -> (OptimizerState, OptimizerState) {
        (
            OptimizerState::new(lr_latent, 0.0, &model.latent_optimizer_lens()),
            OptimizerState::new(lr_code, 0.0, &model.code_optimizer_lens()),
        )
    }

    #[test]
    fn zero_model_scores_half() {
        let schema = tiny_schema();
        let mut model = CvrModel::init(&schema, 2, CodeMode::Linear, 3, 0, 1).unwrap();
        for t in &mut model.latents {
            t.data_mut().fill(0.0);
        }
        let pred = model.score(&[0, 1, 2], &[0.0, 0.0, 0.0], &[]);
        assert_eq!(pred.score, 0.0);
        assert_eq!(pred.pcvr, 0.5);
    }

    #[test]
    fn unit_code_weight_scores_sigmoid_one() {
        let schema = tiny_schema();
        let mut model = CvrModel::init(&schema, 2, CodeMode::Linear, 3, 0, 1).unwrap();
        for t in &mut model.latents {
            t.data_mut().fill(0.0);
        }
        model.code_weights = vec![1.0, 0.0, 0.0];
        let pred = model.score(&[0, 1, 2], &[1.0, 1.0, 1.0], &[]);
        assert_eq!(pred.score, 1.0);
        assert!((pred.pcvr - sigmoid(1.0)).abs() < 1e-15);
        assert!((pred.pcvr - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn hand_built_score_matches_manual_arithmetic() {
        let schema = tiny_schema();
        let mut model = CvrModel::init(&schema, 2, CodeMode::Linear, 2, 0, 1).unwrap();
        // user value 1 -> (0.5, -1.0); top value 0 -> (2.0, 0.25);
        // low value 3 -> (-0.5, 1.0)
        for t in &mut model.latents {
            t.data_mut().fill(0.0);
        }
        model.latents[0].row_mut(1).copy_from_slice(&[0.5, -1.0]);
        model.latents[1].row_mut(0).copy_from_slice(&[2.0, 0.25]);
        model.latents[2].row_mut(3).copy_from_slice(&[-0.5, 1.0]);
        model.bias = 0.125;
        model.code_weights = vec![0.5, -2.0];

        // U = (0.5, -1.0); A = (1.5, 1.25); <U,A> = 0.75 - 1.25 = -0.5
        // code term = 0.5*0.2 - 2.0*(-0.1) = 0.3; f = -0.5 + 0.125 + 0.3
        let pred = model.score(&[1, 0, 3], &[0.2, -0.1], &[]);
        assert!((pred.score - (-0.075)).abs() < 1e-12);
    }

    #[test]
    fn logloss_reference_values() {
        let half = Prediction {
            score: 0.0,
            pcvr: 0.5,
        };
        assert!((CvrModel::logloss(&half, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((CvrModel::logloss(&half, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);

        let f = (0.9f64 / 0.1).ln();
        let p9 = Prediction {
            score: f,
            pcvr: sigmoid(f),
        };
        assert!((CvrModel::logloss(&p9, 1.0) - (-(0.9f64.ln()))).abs() < 1e-12);
        assert!((CvrModel::logloss(&p9, 1.0) - 0.10536).abs() < 1e-5);
    }

    #[test]
    fn bias_gradient_is_residual() {
        let schema = tiny_schema();
        let mut model = CvrModel::init(&schema, 2, CodeMode::Off, 0, 0, 1).unwrap();
        let (mut lat, mut code) = opts(&model, 1.0, 1.0);
        let before = model.bias;
        let pred = model.train_step_with_label(&[0, 1, 2], 1.0, &[], &[], &mut lat, &mut code);
        // with lr 1: bias moves by -(pcvr - y)
        assert!((model.bias - (before - (pred.pcvr - 1.0))).abs() < 1e-15);
    }

    #[test]
    fn code_weight_gradient_is_residual_times_features() {
        let schema = tiny_schema();
        let mut model = CvrModel::init(&schema, 2, CodeMode::Linear, 2, 0, 1).unwrap();
        let (mut lat, mut code) = opts(&model, 0.0001, 1.0);
        let feats = [0.3, -0.7];
        let before = model.code_weights.clone();
        let pred = model.train_step_with_label(&[0, 1, 2], 0.0, &feats, &[], &mut lat, &mut code);
        let err = pred.pcvr;
        for i in 0..2 {
            assert!((model.code_weights[i] - (before[i] - err * feats[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn positive_step_raises_score_negative_lowers_it() {
        let schema = tiny_schema();
        let mut model = CvrModel::init(&schema, 4, CodeMode::Linear, 3, 0, 3).unwrap();
        let feats = [0.5, -0.2, 0.8];
        let values = [2, 1, 0];

        let before = model.score(&values, &feats, &[]).score;
        let (mut lat, mut code) = opts(&model, 1e-4, 1e-4);
        model.train_step_with_label(&values, 1.0, &feats, &[], &mut lat, &mut code);
        let after = model.score(&values, &feats, &[]).score;
        assert!(after > before, "positive step must raise the score");

        let mut model = CvrModel::init(&schema, 4, CodeMode::Linear, 3, 0, 3).unwrap();
        let before = model.score(&values, &feats, &[]).score;
        let (mut lat, mut code) = opts(&model, 1e-4, 1e-4);
        model.train_step_with_label(&values, 0.0, &feats, &[], &mut lat, &mut code);
        let after = model.score(&values, &feats, &[]).score;
        assert!(after < before, "negative step must lower the score");
    }

    #[test]
    fn view_event_is_rejected() {
        let schema = tiny_schema();
        let mut model = CvrModel::init(&schema, 2, CodeMode::Off, 0, 0, 1).unwrap();
        let (mut lat, mut code) = opts(&model, 0.1, 0.1);
        let event = Event {
            values: vec![0, 1, 2],
            kind: EventKind::ViewConversion,
            interval_id: 0,
        };
        let err = model.train_step(&event, &[], &[], &mut lat, &mut code);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn score_decomposes_into_its_four_terms() {
        let schema = tiny_schema();
        let mut model = CvrModel::init(&schema, 3, CodeMode::Linear, 2, 2, 9).unwrap();
        model.bias = -0.3;
        model.aux_weights = vec![0.2, -0.4];
        model.code_weights = vec![0.6, 1.1];
        let values = [2, 1, 3];
        let feats = [0.25, -0.5];
        let aux = [0usize, 1];

        let pred = model.score(&values, &feats, &aux);
        let u = model.user_vector(&values);
        let a = model.ad_vector(&values);
        let ua: f64 = u.iter().zip(&a).map(|(x, y)| x * y).sum();
        let aux_sum: f64 = model.aux_weights.iter().sum();
        let code_term: f64 = model
            .code_weights
            .iter()
            .zip(&feats)
            .map(|(w, c)| w * c)
            .sum();
        assert!((pred.score - (ua + aux_sum + model.bias + code_term)).abs() < 1e-12);
    }

    #[test]
    fn auc_reference_cases() {
        // perfect separation
        let mut pairs = vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        assert_eq!(rank_auc(&mut pairs), Some(1.0));

        // constant scores tie everything: AUC 1/2
        let mut pairs = vec![(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(rank_auc(&mut pairs), Some(0.5));

        // single class undefined
        let mut pairs = vec![(0.5, true), (0.9, true)];
        assert_eq!(rank_auc(&mut pairs), None);
    }

    #[test]
    fn constant_prediction_is_perfectly_calibrated_at_base_rate() {
        let p = Prediction {
            score: 0.0,
            pcvr: 0.5,
        };
        let rows: Vec<(Prediction, bool, usize)> =
            (0..100).map(|i| (p, i % 2 == 0, 0)).collect();
        let eval = CvrEval::from_scored(&rows);
        assert_eq!(eval.auc, Some(0.5));
        assert_eq!(eval.calibration, Some(1.0));
    }

    #[test]
    fn segment_without_positives_has_undefined_ratio() {
        let p = Prediction {
            score: -1.0,
            pcvr: sigmoid(-1.0),
        };
        let rows = vec![(p, true, 0), (p, false, 0), (p, false, 1)];
        let eval = CvrEval::from_scored(&rows);
        let seg1 = eval.segments.iter().find(|s| s.segment == 1).unwrap();
        assert_eq!(seg1.ratio, None);
        let seg0 = eval.segments.iter().find(|s| s.segment == 0).unwrap();
        assert!(seg0.ratio.is_some());
    }
}
