//! Tabular auto-encoder: per-column embeddings → concatenation → encoder
//! MLP → tanh-bounded code → decoder MLP → per-block log-softmax
//! classifiers.
//!
//! The reconstruction loss is the average of the per-column cross
//! entropies. Training is strictly online: one gradient step per event,
//! evaluate-then-train, no mini-batching.

use crate::error::{Error, Result};
use crate::nn::{ActivationKind, Matrix, Mlp, OptimizerState};
use crate::rng::{stream_rng, Stream};
use crate::schema::Schema;

/// Network dimensions. The embedding layer is part of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AeDims {
    pub embed_dim: usize,
    pub code_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl Default for AeDims {
    fn default() -> Self {
        AeDims {
            embed_dim: 20,
            code_dim: 12,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![64],
        }
    }
}

impl AeDims {
    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.code_dim == 0 {
            return Err(Error::Config("embedding and code dims must be positive".into()));
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&h| h == 0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Output of one full forward pass.
pub struct AeForward {
    /// Tanh-bounded code vector, length `code_dim`.
    pub code: Vec<f64>,
    /// Per-block log-probabilities, length `Σ n_i`.
    pub log_probs: Vec<f64>,
    /// Average per-column cross entropy of the event under `log_probs`.
    pub recloss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    cardinalities: Vec<usize>,
    /// Start offset of each column's block in the decoder output.
    block_offsets: Vec<usize>,
    dims: AeDims,
    pub embeddings: Vec<Matrix>,
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// Id of the last interval trained into these parameters.
    pub interval_tag: Option<u64>,
}

impl Autoencoder {
    pub fn init(schema: &Schema, dims: AeDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let cardinalities = schema.cardinalities();
        let mut rng = stream_rng(seed, Stream::ModelInit, 0);

        use rand::Rng;
        let embeddings = cardinalities
            .iter()
            .map(|&n| {
                let data = (0..n * dims.embed_dim)
                    .map(|_| rng.random_range(-0.05..0.05))
                    .collect();
                Matrix::from_vec(n, dims.embed_dim, data)
            })
            .collect();

        let c = cardinalities.len();
        let mut enc_sizes = vec![c * dims.embed_dim];
        enc_sizes.extend(&dims.encoder_hidden);
        enc_sizes.push(dims.code_dim);
        let mut enc_acts = vec![ActivationKind::Relu; dims.encoder_hidden.len()];
        enc_acts.push(ActivationKind::Tanh);
        let encoder = Mlp::init(&enc_sizes, enc_acts, &mut rng);

        let mut dec_sizes = vec![dims.code_dim];
        dec_sizes.extend(&dims.decoder_hidden);
        dec_sizes.push(cardinalities.iter().sum());
        let mut dec_acts = vec![ActivationKind::Relu; dims.decoder_hidden.len()];
        dec_acts.push(ActivationKind::LogSoftmaxBlocks(cardinalities.clone()));
        let decoder = Mlp::init(&dec_sizes, dec_acts, &mut rng);

        let block_offsets = cardinalities
            .iter()
            .scan(0, |acc, &n| {
                let start = *acc;
                *acc += n;
                Some(start)
            })
            .collect();

        Ok(Autoencoder {
            cardinalities,
            block_offsets,
            dims,
            embeddings,
            encoder,
            decoder,
            interval_tag: None,
        })
    }

    /// Rebuilds a model from checkpointed tensors, validating shapes
    /// against the schema.
    pub fn from_parts(
        schema: &Schema,
        dims: AeDims,
        embeddings: Vec<Matrix>,
        encoder: Mlp,
        decoder: Mlp,
        interval_tag: Option<u64>,
    ) -> Result<Self> {
        dims.validate()?;
        let cardinalities = schema.cardinalities();
        if embeddings.len() != cardinalities.len() {
            return Err(Error::Checkpoint(format!(
                "{} embedding tables for {} columns",
                embeddings.len(),
                cardinalities.len()
            )));
        }
        for (i, (table, &n)) in embeddings.iter().zip(&cardinalities).enumerate() {
            if table.rows() != n || table.cols() != dims.embed_dim {
                return Err(Error::Checkpoint(format!(
                    "embedding table {i} is {}x{}, expected {}x{}",
                    table.rows(),
                    table.cols(),
                    n,
                    dims.embed_dim
                )));
            }
        }
        let total: usize = cardinalities.iter().sum();
        if encoder.in_dim() != cardinalities.len() * dims.embed_dim
            || encoder.out_dim() != dims.code_dim
            || decoder.in_dim() != dims.code_dim
            || decoder.out_dim() != total
        {
            return Err(Error::Checkpoint("network shapes do not match dims".into()));
        }
        let block_offsets = cardinalities
            .iter()
            .scan(0, |acc, &n| {
                let start = *acc;
                *acc += n;
                Some(start)
            })
            .collect();
        Ok(Autoencoder {
            cardinalities,
            block_offsets,
            dims,
            embeddings,
            encoder,
            decoder,
            interval_tag,
        })
    }

    pub fn dims(&self) -> &AeDims {
        &self.dims
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn code_dim(&self) -> usize {
        self.dims.code_dim
    }

    pub fn column_count(&self) -> usize {
        self.cardinalities.len()
    }

    /// Parameters of the encoder side, embedding tables included.
    pub fn encoder_param_count(&self) -> usize {
        let emb: usize = self.embeddings.iter().map(|m| m.data().len()).sum();
        emb + self.encoder.param_count()
    }

    pub fn decoder_param_count(&self) -> usize {
        self.decoder.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.encoder_param_count() + self.decoder_param_count()
    }

    fn check_values(&self, values: &[usize]) {
        assert_eq!(
            values.len(),
            self.cardinalities.len(),
            "event arity does not match the schema"
        );
        for (col, (&v, &n)) in values.iter().zip(&self.cardinalities).enumerate() {
            assert!(v < n, "value {v} out of range for column {col} (cardinality {n})");
        }
    }

    fn embed_concat(&self, values: &[usize]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.cardinalities.len() * self.dims.embed_dim);
        for (table, &v) in self.embeddings.iter().zip(values) {
            x.extend_from_slice(table.row(v));
        }
        x
    }

    /// Encoder-only pass; bit-identical to the code of [`Self::forward`].
    pub fn encode(&self, values: &[usize]) -> Vec<f64> {
        self.check_values(values);
        self.encoder.forward(&self.embed_concat(values))
    }

    fn recloss_of(&self, log_probs: &[f64], values: &[usize]) -> f64 {
        let c = self.cardinalities.len() as f64;
        let sum: f64 = values
            .iter()
            .zip(&self.block_offsets)
            .map(|(&v, &off)| -log_probs[off + v])
            .sum();
        sum / c
    }

    pub fn forward(&self, values: &[usize]) -> AeForward {
        self.check_values(values);
        let code = self.encoder.forward(&self.embed_concat(values));
        let log_probs = self.decoder.forward(&code);
        let recloss = self.recloss_of(&log_probs, values);
        AeForward {
            code,
            log_probs,
            recloss,
        }
    }

    pub fn recloss(&self, values: &[usize]) -> f64 {
        self.forward(values).recloss
    }

    /// Tensor lengths in optimizer order: embedding tables, then encoder
    /// weight/bias pairs, then decoder weight/bias pairs.
    pub fn optimizer_tensor_lens(&self) -> Vec<usize> {
        let mut lens: Vec<usize> = self.embeddings.iter().map(|m| m.data().len()).collect();
        for mlp in [&self.encoder, &self.decoder] {
            for layer in &mlp.layers {
                lens.push(layer.weights.data().len());
                lens.push(layer.biases.len());
            }
        }
        lens
    }

    /// One evaluate-then-train step on the reconstruction loss. Returns
    /// the pre-update loss. Only the embedding rows the event touches are
    /// updated; a non-finite gradient skips the update and is counted.
    pub fn train_step(&mut self, values: &[usize], opt: &mut OptimizerState) -> f64 {
        self.check_values(values);
        let x = self.embed_concat(values);
        let enc_cache = self.encoder.forward_cached(&x);
        let dec_cache = self.decoder.forward_cached(enc_cache.output());
        let log_probs = dec_cache.output();
        let recloss = self.recloss_of(log_probs, values);

        // d recloss / d log_probs: -1/C at each column's observed value
        let c = self.cardinalities.len() as f64;
        let mut d_logp = vec![0.0; log_probs.len()];
        for (&v, &off) in values.iter().zip(&self.block_offsets) {
            d_logp[off + v] = -1.0 / c;
        }

        let (dec_grads, d_code) = self.decoder.backward(&dec_cache, &d_logp);
        let (enc_grads, d_x) = self.encoder.backward(&enc_cache, &d_code);

        if !dec_grads.all_finite()
            || !enc_grads.all_finite()
            || d_x.iter().any(|v| !v.is_finite())
        {
            opt.note_skipped();
            return recloss;
        }

        let d = self.dims.embed_dim;
        for (col, &v) in values.iter().enumerate() {
            opt.step_row(
                col,
                self.embeddings[col].data_mut(),
                d,
                v,
                &d_x[col * d..(col + 1) * d],
            );
        }
        let mut tensor = self.embeddings.len();
        for (mlp, grads) in [
            (&mut self.encoder, &enc_grads),
            (&mut self.decoder, &dec_grads),
        ] {
            for (layer, (gw, gb)) in mlp
                .layers
                .iter_mut()
                .zip(grads.weights.iter().zip(&grads.biases))
            {
                opt.step_dense(tensor, layer.weights.data_mut(), gw.data());
                opt.step_dense(tensor + 1, &mut layer.biases, gb);
                tensor += 2;
            }
        }
        recloss
    }

    /// Zeroes the decoder's final affine layer, forcing uniform
    /// per-block probabilities. Reference state for loss identities.
    pub fn zero_final_decoder_layer(&mut self) {
        let last = self.decoder.layers.last_mut().expect("decoder has layers");
        last.weights.data_mut().fill(0.0);
        last.biases.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Schema;

    fn small_dims() -> AeDims {
        AeDims {
            embed_dim: 4,
            code_dim: 3,
            encoder_hidden: vec![8],
            decoder_hidden: vec![8],
        }
    }

    #[test]
    fn default_encoder_param_count_near_1e5() {
        let schema = Schema::default_synthetic();
        let ae = Autoencoder::init(&schema, AeDims::default(), 1).unwrap();
        let count = ae.encoder_param_count();
        assert!(
            (50_000..=200_000).contains(&count),
            "encoder params = {count}"
        );
    }

    #[test]
    fn init_is_deterministic() {
        let schema = Schema::default_synthetic();
        let a = Autoencoder::init(&schema, small_dims(), 9).unwrap();
        let b = Autoencoder::init(&schema, small_dims(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scalar_code_stays_bounded() {
        let schema = Schema::default_synthetic();
        let dims = AeDims {
            code_dim: 1,
            ..small_dims()
        };
        let ae = Autoencoder::init(&schema, dims, 2).unwrap();
        let code = ae.encode(&[0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(code.len(), 1);
        assert!(code[0] > -1.0 && code[0] < 1.0);
    }

    #[test]
    fn zeroed_decoder_gives_uniform_recloss() {
        let schema = Schema::default_synthetic();
        let mut ae = Autoencoder::init(&schema, small_dims(), 3).unwrap();
        ae.zero_final_decoder_layer();
        let fwd = ae.forward(&[7, 3, 1, 42, 11, 2, 30]);
        assert!((fwd.recloss - schema.uniform_recloss()).abs() < 1e-12);
    }

    #[test]
    fn recloss_is_nonnegative() {
        let schema = Schema::default_synthetic();
        let ae = Autoencoder::init(&schema, small_dims(), 4).unwrap();
        let ds = crate::events::make_random_dataset(&schema, 50, 5).unwrap();
        for e in &ds.events {
            assert!(ae.recloss(&e.values) >= 0.0);
        }
    }

    #[test]
    fn encode_matches_forward_code_bit_exactly() {
        let schema = Schema::default_synthetic();
        let ae = Autoencoder::init(&schema, small_dims(), 4).unwrap();
        let values = [7, 3, 1, 42, 11, 2, 30];
        let fwd = ae.forward(&values);
        assert_eq!(ae.encode(&values), fwd.code);
        assert_eq!(fwd.code.len(), ae.code_dim());
    }

    #[test]
    fn one_column_change_moves_the_code() {
        let schema = Schema::default_synthetic();
        for seed in 0..20 {
            let ae = Autoencoder::init(&schema, small_dims(), seed).unwrap();
            let a = ae.encode(&[7, 3, 1, 42, 11, 2, 30]);
            let b = ae.encode(&[8, 3, 1, 42, 11, 2, 30]);
            assert_ne!(a, b, "seed {seed} produced identical codes");
        }
    }

    #[test]
    fn codes_stay_in_open_unit_box() {
        let schema = Schema::default_synthetic();
        let ae = Autoencoder::init(&schema, small_dims(), 6).unwrap();
        let ds = crate::events::make_random_dataset(&schema, 10_000, 7).unwrap();
        for e in &ds.events {
            for &c in &ae.encode(&e.values) {
                assert!(c > -1.0 && c < 1.0, "code component {c} escaped (-1, 1)");
            }
        }
    }

    #[test]
    fn overfits_a_single_repeated_event() {
        let schema = Schema::default_synthetic();
        let mut ae = Autoencoder::init(&schema, small_dims(), 8).unwrap();
        let mut opt = OptimizerState::new(0.01, 0.9, &ae.optimizer_tensor_lens());
        let values = [7, 3, 1, 42, 11, 2, 30];
        for _ in 0..200 {
            ae.train_step(&values, &mut opt);
        }
        let final_loss = ae.recloss(&values);
        assert!(final_loss < 0.01, "recloss after 200 steps = {final_loss}");
    }

    #[test]
    fn untouched_embedding_rows_are_bit_identical() {
        let schema = Schema::default_synthetic();
        let mut ae = Autoencoder::init(&schema, small_dims(), 9).unwrap();
        let mut opt = OptimizerState::new(0.01, 0.9, &ae.optimizer_tensor_lens());
        let before = ae.embeddings.clone();
        let values = [7, 3, 1, 42, 11, 2, 30];
        ae.train_step(&values, &mut opt);
        for (col, (now, was)) in ae.embeddings.iter().zip(&before).enumerate() {
            for row in 0..now.rows() {
                if row == values[col] {
                    assert_ne!(now.row(row), was.row(row), "trained row did not move");
                } else {
                    assert_eq!(now.row(row), was.row(row), "untouched row changed");
                }
            }
        }
    }
}
