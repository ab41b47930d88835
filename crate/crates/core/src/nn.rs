//! Minimal dense network kernel.
//!
//! Just enough machinery for the tabular auto-encoder: affine layers,
//! ReLU/tanh/per-block log-softmax activations, manual backpropagation
//! through a cached forward pass, and heavy-ball SGD. All math is `f64`;
//! training-state round trips are expected to be bit-exact.

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `out = self · x`
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "matvec input length mismatch");
        assert_eq!(out.len(), self.rows, "matvec output length mismatch");
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *o = acc;
        }
    }

    /// `out += selfᵀ · y` — used for input gradients.
    pub fn matvec_transpose_add(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.rows, "transpose matvec length mismatch");
        assert_eq!(out.len(), self.cols, "transpose matvec output mismatch");
        for (yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if *yi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += yi * w;
            }
        }
    }

    /// `self += y ⊗ x` — accumulates an outer product (weight gradients).
    pub fn outer_add(&mut self, y: &[f64], x: &[f64]) {
        assert_eq!(y.len(), self.rows, "outer rows mismatch");
        assert_eq!(x.len(), self.cols, "outer cols mismatch");
        for (yi, row) in y.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            for (r, xi) in row.iter_mut().zip(x) {
                *r += yi * xi;
            }
        }
    }
}

/// One affine layer: `output = weights · input + biases`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.biases.clone();
        let mut tmp = vec![0.0; self.out_dim()];
        self.weights.matvec_into(input, &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += t;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.weights.data().len() + self.biases.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActivationKind {
    Relu,
    Tanh,
    Identity,
    /// Log-softmax applied independently to consecutive blocks of the
    /// given sizes; the sizes must sum to the layer's output length.
    LogSoftmaxBlocks(Vec<usize>),
}

/// Applies an activation out of place.
pub fn activation_apply(kind: &ActivationKind, input: &[f64]) -> Vec<f64> {
    match kind {
        ActivationKind::Relu => input.iter().map(|&x| x.max(0.0)).collect(),
        ActivationKind::Tanh => input.iter().map(|&x| x.tanh()).collect(),
        ActivationKind::Identity => input.to_vec(),
        ActivationKind::LogSoftmaxBlocks(blocks) => log_softmax_blocks(input, blocks),
    }
}

/// Per-block log-softmax with max subtraction.
pub fn log_softmax_blocks(input: &[f64], blocks: &[usize]) -> Vec<f64> {
    assert_eq!(
        blocks.iter().sum::<usize>(),
        input.len(),
        "block sizes must sum to the input length"
    );
    let mut out = Vec::with_capacity(input.len());
    let mut offset = 0;
    for &size in blocks {
        let block = &input[offset..offset + size];
        let max = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + block.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        out.extend(block.iter().map(|&x| x - lse));
        offset += size;
    }
    out
}

/// Sequence of affine layers, each followed by its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub activations: Vec<ActivationKind>,
}

/// Intermediates of one forward pass, consumed by [`Mlp::backward`].
pub struct MlpCache {
    /// `inputs[i]` feeds layer `i`; `inputs[len]` is the network output.
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("cache holds at least the input")
    }
}

/// Parameter gradients mirroring an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .all(|w| w.data().iter().all(|v| v.is_finite()))
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

impl Mlp {
    /// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` for weights
    /// and biases.
    pub fn init(
        sizes: &[usize],
        activations: Vec<ActivationKind>,
        rng: &mut impl rand::Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        assert_eq!(sizes.len() - 1, activations.len(), "one activation per layer");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                DenseLayer {
                    weights: Matrix::from_vec(fan_out, fan_in, data),
                    biases: (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect(),
                }
            })
            .collect();
        Mlp {
            layers,
            activations,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("non-empty mlp").in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            x = activation_apply(act, &layer.forward(&x));
        }
        x
    }

    pub fn forward_cached(&self, input: &[f64]) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        inputs.push(input.to_vec());
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let z = layer.forward(inputs.last().expect("pushed above"));
            inputs.push(activation_apply(act, &z));
            pre_activations.push(z);
        }
        MlpCache {
            inputs,
            pre_activations,
        }
    }

    /// Backpropagates `d_output` (gradient w.r.t. the post-activation
    /// output) through the cached pass. Returns parameter gradients and
    /// the gradient w.r.t. the network input.
    pub fn backward(&self, cache: &MlpCache, d_output: &[f64]) -> (MlpGrads, Vec<f64>) {
        assert_eq!(
            cache.inputs.len(),
            self.layers.len() + 1,
            "cache does not match this network"
        );
        assert_eq!(d_output.len(), self.out_dim(), "upstream gradient length");

        let mut grads = MlpGrads {
            weights: self
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: self.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        };

        let mut d_post = d_output.to_vec();
        for i in (0..self.layers.len()).rev() {
            let z = &cache.pre_activations[i];
            let a = &cache.inputs[i + 1];
            // gradient w.r.t. the pre-activation
            let d_z: Vec<f64> = match &self.activations[i] {
                ActivationKind::Identity => d_post.clone(),
                ActivationKind::Relu => d_post
                    .iter()
                    .zip(z)
                    .map(|(&g, &zi)| if zi > 0.0 { g } else { 0.0 })
                    .collect(),
                ActivationKind::Tanh => d_post
                    .iter()
                    .zip(a)
                    .map(|(&g, &ai)| g * (1.0 - ai * ai))
                    .collect(),
                ActivationKind::LogSoftmaxBlocks(blocks) => {
                    // a holds log-probabilities; dz_i = g_i - p_i * Σ_block g
                    let mut d_z = Vec::with_capacity(d_post.len());
                    let mut offset = 0;
                    for &size in blocks {
                        let g_block = &d_post[offset..offset + size];
                        let a_block = &a[offset..offset + size];
                        let g_sum: f64 = g_block.iter().sum();
                        d_z.extend(
                            g_block
                                .iter()
                                .zip(a_block)
                                .map(|(&g, &lp)| g - lp.exp() * g_sum),
                        );
                        offset += size;
                    }
                    d_z
                }
            };

            grads.weights[i].outer_add(&d_z, &cache.inputs[i]);
            for (b, g) in grads.biases[i].iter_mut().zip(&d_z) {
                *b += g;
            }

            let mut d_input = vec![0.0; self.layers[i].in_dim()];
            self.layers[i].weights.matvec_transpose_add(&d_z, &mut d_input);
            d_post = d_input;
        }
        (grads, d_post)
    }
}

/// Heavy-ball SGD state: one velocity buffer per registered parameter
/// tensor, in a fixed order the owning model defines.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Updates dropped because a gradient was non-finite.
    pub skipped_updates: u64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, tensor_lens: &[usize]) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0, 1)");
        OptimizerState {
            learning_rate,
            momentum,
            skipped_updates: 0,
            velocity: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.velocity.len()
    }

    pub fn velocity(&self, tensor: usize) -> &[f64] {
        &self.velocity[tensor]
    }

    /// Rebuilds state from checkpointed buffers.
    pub fn from_parts(
        learning_rate: f64,
        momentum: f64,
        skipped_updates: u64,
        velocity: Vec<Vec<f64>>,
    ) -> Self {
        OptimizerState {
            learning_rate,
            momentum,
            skipped_updates,
            velocity,
        }
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// `v ← momentum·v + g; p ← p − lr·v` over a whole tensor.
    pub fn step_dense(&mut self, tensor: usize, param: &mut [f64], grad: &[f64]) {
        let v = &mut self.velocity[tensor];
        assert_eq!(param.len(), v.len(), "parameter/velocity shape mismatch");
        assert_eq!(param.len(), grad.len(), "parameter/gradient shape mismatch");
        for ((p, v), g) in param.iter_mut().zip(v.iter_mut()).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
    }

    /// Row-sparse variant for embedding-style tensors: only the touched
    /// row's velocity accumulates, untouched rows stay bit-identical.
    pub fn step_row(&mut self, tensor: usize, param: &mut [f64], cols: usize, row: usize, grad: &[f64]) {
        assert_eq!(grad.len(), cols, "row gradient length mismatch");
        let span = row * cols..(row + 1) * cols;
        let v = &mut self.velocity[tensor][span.clone()];
        let p = &mut param[span];
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
    }

    pub fn note_skipped(&mut self) {
        self.skipped_updates += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_passes_through() {
        let layer = DenseLayer {
            weights: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            biases: vec![0.0, 0.0],
        };
        assert_eq!(layer.forward(&[1.0, 2.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn affine_zero_weights_returns_bias() {
        let layer = DenseLayer {
            weights: Matrix::zeros(1, 3),
            biases: vec![3.0],
        };
        assert_eq!(layer.forward(&[9.0, -4.0, 2.0]), vec![3.0]);
    }

    #[test]
    fn affine_hand_matvec() {
        let layer = DenseLayer {
            weights: Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, -1.0]),
            biases: vec![0.0, 0.0],
        };
        assert_eq!(layer.forward(&[2.0, 3.0]), vec![5.0, -1.0]);
    }

    #[test]
    fn relu_and_tanh_basics() {
        assert_eq!(
            activation_apply(&ActivationKind::Relu, &[-1.0, 2.0]),
            vec![0.0, 2.0]
        );
        let t = activation_apply(&ActivationKind::Tanh, &[0.0, 100.0, -100.0]);
        assert_eq!(t[0], 0.0);
        assert!(t.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn log_softmax_uniform_block() {
        let n = 7;
        let out = log_softmax_blocks(&vec![0.3; n], &[n]);
        for &v in &out {
            assert!((v + (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_blocks_normalize() {
        let input = vec![1.0, -2.0, 0.5, 3.0, 3.0, -1.0, 0.0];
        let blocks = [3, 2, 2];
        let out = log_softmax_blocks(&input, &blocks);
        let mut offset = 0;
        for &size in &blocks {
            let total: f64 = out[offset..offset + size].iter().map(|&x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            offset += size;
        }
    }

    #[test]
    #[should_panic(expected = "block sizes")]
    fn log_softmax_rejects_bad_blocks() {
        log_softmax_blocks(&[1.0, 2.0, 3.0], &[2, 2]);
    }

    #[test]
    fn sgd_momentum_zero_is_plain_sgd() {
        let mut opt = OptimizerState::new(0.1, 0.0, &[2]);
        let mut p = vec![1.0, -1.0];
        opt.step_dense(0, &mut p, &[0.5, -0.5]);
        assert_eq!(p, vec![0.95, -0.95]);
    }

    #[test]
    fn sgd_momentum_unrolled_two_steps() {
        // lr 0.1, momentum 0.9, constant grad 1 from 0:
        // v1 = 1, p1 = -0.1; v2 = 1.9, p2 = -0.29
        let mut opt = OptimizerState::new(0.1, 0.9, &[1]);
        let mut p = vec![0.0];
        opt.step_dense(0, &mut p, &[1.0]);
        opt.step_dense(0, &mut p, &[1.0]);
        assert!((p[0] + 0.29).abs() < 1e-15, "p = {}", p[0]);
    }

    #[test]
    fn sgd_zero_grad_coasts_on_velocity() {
        let mut opt = OptimizerState::new(0.1, 0.9, &[1]);
        let mut p = vec![0.0];
        opt.step_dense(0, &mut p, &[1.0]); // v = 1
        let before = p[0];
        opt.step_dense(0, &mut p, &[0.0]); // v = 0.9, p -= 0.09
        assert!((before - p[0] - 0.1 * 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_is_deterministic() {
        let run = || {
            let mut opt = OptimizerState::new(0.05, 0.9, &[3]);
            let mut p = vec![0.3, -0.2, 0.9];
            for i in 0..10 {
                let g = [0.1 * i as f64, -0.3, 0.02];
                opt.step_dense(0, &mut p, &g);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_single_affine_is_outer_product() {
        let mlp = Mlp {
            layers: vec![DenseLayer {
                weights: Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.1, 0.0, 0.5]),
                biases: vec![0.0, 0.0],
            }],
            activations: vec![ActivationKind::Identity],
        };
        let x = [1.0, -2.0, 0.5];
        let g = [2.0, -1.0];
        let cache = mlp.forward_cached(&x);
        let (grads, _) = mlp.backward(&cache, &g);
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(grads.weights[0].get(r, c), g[r] * x[c]);
            }
        }
        assert_eq!(grads.biases[0], g.to_vec());
    }

    #[test]
    fn backward_zero_upstream_zero_grads() {
        let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::ModelInit, 0);
        let mlp = Mlp::init(
            &[4, 3, 2],
            vec![ActivationKind::Relu, ActivationKind::Tanh],
            &mut rng,
        );
        let cache = mlp.forward_cached(&[0.1, 0.2, 0.3, 0.4]);
        let (grads, d_in) = mlp.backward(&cache, &[0.0, 0.0]);
        assert!(grads.weights.iter().all(|w| w.data().iter().all(|&v| v == 0.0)));
        assert!(d_in.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_row_leaves_other_rows_untouched() {
        let mut opt = OptimizerState::new(0.1, 0.9, &[6]);
        let mut table = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3 rows x 2 cols
        let before = table.clone();
        opt.step_row(0, &mut table, 2, 1, &[1.0, -1.0]);
        assert_eq!(table[0..2], before[0..2]);
        assert_eq!(table[4..6], before[4..6]);
        assert_ne!(table[2..4], before[2..4]);
    }
}
