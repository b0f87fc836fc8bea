//! The layer-local network.
//!
//! A model is a stack of [`LocalLayer`]s. Each layer owns a main weight
//! matrix with bias, an embedding projection (no bias), and Adam state for
//! every parameter. The forward pass per layer is
//!
//! ```text
//! preact = x W1^T + b1;  activ = relu(preact);  normed = normalize(activ)
//! embedding = normed W2^T;  next input = normed (or embedding)
//! ```
//!
//! What moves to the next layer carries no gradient linkage: every
//! backward entry point below stops at its own layer's parameters, except
//! the explicit `backward_input` used by the end-to-end baseline.

use crate::error::{Error, Result};
use crate::norm::{normalize_rows, normalize_rows_backward, NormMode};
use crate::tensor::{adam_step, matmul, relu, AdamState, DenseMatrix};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

/// Which value a layer hands to its successor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardSource {
    /// Normalized activations flow forward (the default).
    Activation,
    /// The embedding itself flows forward.
    Embedding,
}

impl ForwardSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            ForwardSource::Activation => "activation",
            ForwardSource::Embedding => "embedding",
        }
    }
}

/// One trainable unit: main weights, embedding projection, optimizer state.
#[derive(Debug, Clone)]
pub struct LocalLayer {
    /// d_out x d_in
    pub w1: DenseMatrix,
    /// 1 x d_out
    pub b1: DenseMatrix,
    /// d_emb x d_out
    pub w2: DenseMatrix,
    pub adam_w1: AdamState,
    pub adam_b1: AdamState,
    pub adam_w2: AdamState,
    pub norm_mode: NormMode,
}

/// Everything the local backward pass needs, captured during forward.
#[derive(Debug, Clone)]
pub struct LayerForwardTrace {
    pub input: DenseMatrix,
    pub preact: DenseMatrix,
    pub relu_mask: DenseMatrix,
    pub activ: DenseMatrix,
    pub normed: DenseMatrix,
    /// Per-row normalization statistic (L2 norm or layernorm stddev).
    pub norms: Vec<f64>,
    /// Absent when the caller asked for a trunk-only forward.
    pub embedding: Option<DenseMatrix>,
}

/// Parameter gradients for one layer. `w2` is absent on paths that never
/// touched the embedding projection.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: Option<DenseMatrix>,
}

impl LayerGrads {
    pub fn add(&mut self, other: &LayerGrads) -> Result<()> {
        self.w1.add_scaled(&other.w1, 1.0)?;
        self.b1.add_scaled(&other.b1, 1.0)?;
        match (&mut self.w2, &other.w2) {
            (Some(a), Some(b)) => a.add_scaled(b, 1.0)?,
            (None, None) => {}
            (a @ None, Some(b)) => *a = Some(b.clone()),
            (Some(_), None) => {}
        }
        Ok(())
    }
}

fn column_sums(m: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

fn hadamard(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (o, &m) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o *= m;
    }
    out
}

impl LocalLayer {
    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.w2.rows()
    }

    fn forward_impl(&self, x: &DenseMatrix, with_embedding: bool) -> Result<LayerForwardTrace> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "layer_forward",
                left: x.shape(),
                right: self.w1.shape(),
            });
        }
        // x * W1^T via the broadcast kernel; the transpose is cheap next to
        // the product itself
        let mut preact = matmul(x, &self.w1.transpose())?;
        for i in 0..preact.rows() {
            for (p, &b) in preact.row_mut(i).iter_mut().zip(self.b1.row(0)) {
                *p += b;
            }
        }
        let (activ, relu_mask) = relu(&preact);
        let (normed, norms) = normalize_rows(&activ, self.norm_mode);
        let embedding = if with_embedding {
            Some(matmul(&normed, &self.w2.transpose())?)
        } else {
            None
        };
        Ok(LayerForwardTrace {
            input: x.clone(),
            preact,
            relu_mask,
            activ,
            normed,
            norms,
            embedding,
        })
    }

    /// Full forward: trunk plus embedding projection.
    pub fn forward(&self, x: &DenseMatrix) -> Result<LayerForwardTrace> {
        self.forward_impl(x, true)
    }

    /// Trunk-only forward, for paths that never read the embedding
    /// (forward-forward goodness, the backprop trunk).
    pub fn forward_trunk(&self, x: &DenseMatrix) -> Result<LayerForwardTrace> {
        self.forward_impl(x, false)
    }

    /// Shared tail of every backward path: from a gradient on the post-ReLU
    /// activations down to W1/b1, honoring the ReLU mask.
    fn grads_from_activation(
        &self,
        trace: &LayerForwardTrace,
        grad_activ: &DenseMatrix,
    ) -> Result<(LayerGrads, DenseMatrix)> {
        let grad_pre = hadamard(grad_activ, &trace.relu_mask);
        let w1 = matmul(&grad_pre.transpose(), &trace.input)?;
        let b1 = column_sums(&grad_pre);
        Ok((LayerGrads { w1, b1, w2: None }, grad_pre))
    }

    /// Gradient of a loss on this layer's embedding w.r.t. this layer's
    /// parameters only. Nothing flows to the layer's input.
    pub fn backward_embedding(
        &self,
        trace: &LayerForwardTrace,
        grad_embedding: &DenseMatrix,
    ) -> Result<LayerGrads> {
        let embedding = trace
            .embedding
            .as_ref()
            .ok_or_else(|| Error::Argument("trace has no embedding; use forward()".into()))?;
        if grad_embedding.shape() != embedding.shape() {
            return Err(Error::Dimension {
                op: "layer_backward",
                left: grad_embedding.shape(),
                right: embedding.shape(),
            });
        }
        let w2_grad = matmul(&grad_embedding.transpose(), &trace.normed)?;
        let grad_normed = matmul(grad_embedding, &self.w2)?;
        let grad_activ = normalize_rows_backward(
            &grad_normed,
            &trace.activ,
            &trace.normed,
            &trace.norms,
            self.norm_mode,
        );
        let (mut grads, _) = self.grads_from_activation(trace, &grad_activ)?;
        grads.w2 = Some(w2_grad);
        Ok(grads)
    }

    /// Gradient of a loss on this layer's post-ReLU activations (the
    /// forward-forward path; the loss sits before normalization).
    pub fn backward_activation(
        &self,
        trace: &LayerForwardTrace,
        grad_activ: &DenseMatrix,
    ) -> Result<LayerGrads> {
        if grad_activ.shape() != trace.activ.shape() {
            return Err(Error::Dimension {
                op: "layer_backward_activation",
                left: grad_activ.shape(),
                right: trace.activ.shape(),
            });
        }
        let (grads, _) = self.grads_from_activation(trace, &grad_activ.clone())?;
        Ok(grads)
    }

    /// End-to-end chain rule step for the backprop baseline: a gradient on
    /// the forwarded (normalized) output yields parameter gradients plus
    /// the gradient on this layer's input.
    pub fn backward_input(
        &self,
        trace: &LayerForwardTrace,
        grad_normed: &DenseMatrix,
    ) -> Result<(LayerGrads, DenseMatrix)> {
        if grad_normed.shape() != trace.normed.shape() {
            return Err(Error::Dimension {
                op: "layer_backward_input",
                left: grad_normed.shape(),
                right: trace.normed.shape(),
            });
        }
        let grad_activ = normalize_rows_backward(
            grad_normed,
            &trace.activ,
            &trace.normed,
            &trace.norms,
            self.norm_mode,
        );
        let (grads, grad_pre) = self.grads_from_activation(trace, &grad_activ)?;
        let grad_input = matmul(&grad_pre, &self.w1)?;
        Ok((grads, grad_input))
    }

    /// Adam-update every parameter this gradient covers.
    pub fn apply_grads(&mut self, grads: &LayerGrads) -> Result<()> {
        adam_step(&mut self.w1, &grads.w1, &mut self.adam_w1)?;
        adam_step(&mut self.b1, &grads.b1, &mut self.adam_b1)?;
        if let Some(w2) = &grads.w2 {
            adam_step(&mut self.w2, w2, &mut self.adam_w2)?;
        }
        Ok(())
    }
}

/// Final linear head for the backprop baseline.
#[derive(Debug, Clone)]
pub struct LinearHead {
    /// classes x d_in
    pub w: DenseMatrix,
    /// 1 x classes
    pub b: DenseMatrix,
    pub adam_w: AdamState,
    pub adam_b: AdamState,
}

impl LinearHead {
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut logits = matmul(x, &self.w.transpose())?;
        for i in 0..logits.rows() {
            for (o, &bv) in logits.row_mut(i).iter_mut().zip(self.b.row(0)) {
                *o += bv;
            }
        }
        Ok(logits)
    }

    /// Returns (w grad, b grad, input grad).
    pub fn backward(
        &self,
        x: &DenseMatrix,
        grad_logits: &DenseMatrix,
    ) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
        let gw = matmul(&grad_logits.transpose(), x)?;
        let gb = column_sums(grad_logits);
        let gx = matmul(grad_logits, &self.w)?;
        Ok((gw, gb, gx))
    }
}

/// A stack of local layers plus optional classification head.
#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<LocalLayer>,
    pub head: Option<LinearHead>,
    pub forward_source: ForwardSource,
    /// [input_dim, hidden_1, ..., hidden_L]
    pub arch: Vec<usize>,
    pub emb_dim: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

/// Per-layer traces from a full stack forward, plus the exact number of
/// (sample, layer) evaluations performed.
#[derive(Debug)]
pub struct StackOutput {
    pub traces: Vec<LayerForwardTrace>,
    pub evaluations: u64,
}

impl StackOutput {
    pub fn embeddings(&self) -> Vec<&DenseMatrix> {
        self.traces
            .iter()
            .map(|t| t.embedding.as_ref().expect("stack_forward computes embeddings"))
            .collect()
    }
}

fn uniform_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut StdRng) -> DenseMatrix {
    let bound = (1.0 / fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    DenseMatrix::from_vec(rows, cols, data).expect("positive dims")
}

/// Layer input width given the stack position and forwarding mode.
fn layer_input_dim(arch: &[usize], layer: usize, emb_dim: usize, source: ForwardSource) -> usize {
    if layer == 0 {
        arch[0]
    } else {
        match source {
            ForwardSource::Activation => arch[layer],
            ForwardSource::Embedding => emb_dim,
        }
    }
}

/// Build a stack per `arch = [d_in, d_1, ..., d_L]` with seeded uniform
/// Kaiming-style fan-in initialization: W ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)),
/// biases zero. Deterministic per seed.
pub fn init_layers(
    arch: &[usize],
    emb_dim: usize,
    lr: f64,
    norm_mode: NormMode,
    forward_source: ForwardSource,
    rng_seed: u64,
) -> Result<Vec<LocalLayer>> {
    if arch.len() < 2 {
        return Err(Error::Argument("arch needs input dim plus at least one layer".into()));
    }
    if arch.contains(&0) || emb_dim == 0 {
        return Err(Error::Argument("all dims must be positive".into()));
    }
    let mut rng = StdRng::seed_from_u64(rng_seed);
    let mut layers = Vec::with_capacity(arch.len() - 1);
    for l in 0..arch.len() - 1 {
        let d_in = layer_input_dim(arch, l, emb_dim, forward_source);
        let d_out = arch[l + 1];
        let w1 = uniform_matrix(d_out, d_in, d_in, &mut rng);
        let w2 = uniform_matrix(emb_dim, d_out, d_out, &mut rng);
        layers.push(LocalLayer {
            adam_w1: AdamState::new(d_out, d_in, lr),
            adam_b1: AdamState::new(1, d_out, lr),
            adam_w2: AdamState::new(emb_dim, d_out, lr),
            w1,
            b1: DenseMatrix::zeros(1, d_out),
            w2,
            norm_mode,
        });
    }
    Ok(layers)
}

impl Model {
    pub fn new(
        arch: &[usize],
        emb_dim: usize,
        num_classes: usize,
        lr: f64,
        norm_mode: NormMode,
        forward_source: ForwardSource,
        rng_seed: u64,
    ) -> Result<Model> {
        let layers = init_layers(arch, emb_dim, lr, norm_mode, forward_source, rng_seed)?;
        Ok(Model {
            layers,
            head: None,
            forward_source,
            arch: arch.to_vec(),
            emb_dim,
            num_classes,
            init_seed: rng_seed,
        })
    }

    /// Same trunk plus a C-way linear head (backprop baseline). The head is
    /// drawn after the layers from the same seeded stream.
    pub fn new_with_head(
        arch: &[usize],
        emb_dim: usize,
        num_classes: usize,
        lr: f64,
        norm_mode: NormMode,
        forward_source: ForwardSource,
        rng_seed: u64,
    ) -> Result<Model> {
        let mut model = Self::new(arch, emb_dim, num_classes, lr, norm_mode, forward_source, rng_seed)?;
        // reuse the stream position after the layer draws
        let mut rng = StdRng::seed_from_u64(rng_seed);
        for l in 0..arch.len() - 1 {
            let d_in = layer_input_dim(arch, l, emb_dim, forward_source);
            let _ = uniform_matrix(arch[l + 1], d_in, d_in, &mut rng);
            let _ = uniform_matrix(emb_dim, arch[l + 1], arch[l + 1], &mut rng);
        }
        let d_last = *arch.last().unwrap();
        model.head = Some(LinearHead {
            w: uniform_matrix(num_classes, d_last, d_last, &mut rng),
            b: DenseMatrix::zeros(1, num_classes),
            adam_w: AdamState::new(num_classes, d_last, lr),
            adam_b: AdamState::new(1, num_classes, lr),
        });
        Ok(model)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    /// The value layer `l` hands onward, per the configured source.
    pub fn forwarded<'t>(&self, trace: &'t LayerForwardTrace) -> &'t DenseMatrix {
        match self.forward_source {
            ForwardSource::Activation => &trace.normed,
            ForwardSource::Embedding => trace
                .embedding
                .as_ref()
                .expect("embedding forwarding requires full forward"),
        }
    }

    /// Forward a batch through every layer, collecting per-layer traces
    /// (embeddings included).
    pub fn stack_forward(&self, x: &DenseMatrix) -> Result<StackOutput> {
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        let mut evaluations = 0u64;
        for layer in &self.layers {
            let trace = layer.forward(&current)?;
            evaluations += current.rows() as u64;
            current = self.forwarded(&trace).clone();
            traces.push(trace);
        }
        Ok(StackOutput { traces, evaluations })
    }

    /// Trunk-only stack forward (no embeddings computed).
    pub fn stack_forward_trunk(&self, x: &DenseMatrix) -> Result<StackOutput> {
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        let mut evaluations = 0u64;
        for layer in &self.layers {
            let trace = layer.forward_trunk(&current)?;
            evaluations += current.rows() as u64;
            current = trace.normed.clone();
            traces.push(trace);
        }
        Ok(StackOutput { traces, evaluations })
    }

    /// Per-layer embeddings without retaining traces. Read-only and cheap
    /// enough for whole-test-set inference; also returns the evaluation
    /// count (rows x layers).
    pub fn embeddings_only(&self, x: &DenseMatrix) -> Result<(Vec<DenseMatrix>, u64)> {
        let mut embeddings = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        let mut evaluations = 0u64;
        for layer in &self.layers {
            let trace = layer.forward(&current)?;
            evaluations += current.rows() as u64;
            let next = self.forwarded(&trace).clone();
            embeddings.push(trace.embedding.expect("forward computes embeddings"));
            current = next;
        }
        Ok((embeddings, evaluations))
    }

    /// Per-sample goodness (squared activation norm) summed over the given
    /// 0-based layer indices; the forward-forward inference score for one
    /// label encoding. Every layer is still evaluated (the stack must run
    /// to completion), only the sum is restricted.
    pub fn goodness_sums(&self, x: &DenseMatrix, layers: &[usize]) -> Result<(Vec<f64>, u64)> {
        let mut sums = vec![0.0; x.rows()];
        let mut current = x.clone();
        let mut evaluations = 0u64;
        let last_wanted = layers.iter().max().copied().unwrap_or(0);
        for (l, layer) in self.layers.iter().enumerate() {
            let trace = layer.forward_trunk(&current)?;
            evaluations += current.rows() as u64;
            if layers.contains(&l) {
                for (i, s) in sums.iter_mut().enumerate() {
                    *s += crate::loss::goodness(trace.activ.row(i));
                }
            }
            if l == last_wanted {
                break;
            }
            current = trace.normed;
        }
        Ok((sums, evaluations))
    }

    /// Trunk forward plus head logits (backprop baseline inference).
    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Argument("model has no classification head".into()))?;
        let mut current = x.clone();
        for layer in &self.layers {
            current = layer.forward_trunk(&current)?.normed;
        }
        head.forward(&current)
    }
}
