//! Multilayer perceptron with a softmax head and hand-written backpropagation.
//!
//! Parameters live in one flat `f64` vector. Layer `l` occupies a row-major
//! `(out, in)` weight block followed by its `out` biases. Hidden layers use
//! ReLU; the last layer emits raw logits.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Lower clamp applied to any probability before it enters a logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layer_widths: Vec<usize>,
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: usize,
    pub biases: usize,
}

impl ModelSpec {
    /// `widths` = input dim, hidden widths..., class count.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "model needs at least input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("layer widths must be >= 1, got {widths:?}")));
        }
        Ok(Self { layer_widths: widths })
    }

    /// Input, one hidden layer per entry of `hidden`, and `classes` outputs.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(classes);
        Self::new(widths)
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub(crate) fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    biases: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                shape
            })
            .collect()
    }
}

/// Flat model parameters together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    spec: ModelSpec,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            spec: spec.clone(),
        }
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, architecture {:?} needs {}",
                values.len(),
                spec.layer_widths(),
                spec.param_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("parameter {i} is not finite")));
        }
        Ok(Self {
            spec: spec.clone(),
            values,
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let mut params = Self::zeros(spec);
        for layer in spec.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in &mut params.values[layer.weights..layer.biases] {
                *w = dist.sample(rng);
            }
        }
        params
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Gradient of a scalar loss, aligned entry by entry with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self = a * self + b * other`.
    pub fn combine(&mut self, a: f64, other: &GradientVector, b: f64) {
        assert_eq!(self.values.len(), other.values.len());
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x = a * *x + b * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|x| *x *= a);
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

/// Inputs plus optional integer labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn unlabelled(inputs: Matrix) -> Self {
        Self {
            inputs,
            labels: None,
        }
    }

    pub fn labelled(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::Input(format!(
                "{} labels for {} input rows",
                labels.len(),
                inputs.rows()
            )));
        }
        Ok(Self {
            inputs,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// `c += a b` for row-major `c` (m x n); `a` is m x k and `b` is k x n, each given
/// with its row and column strides.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices holding the full m x k, k x n and m x n
    // operands under the given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Layer activations kept for backpropagation. `acts[0]` is the input batch,
/// `acts[l]` the post-ReLU output of hidden layer `l`, and `acts.last()` the logits.
pub(crate) struct Trace {
    acts: Vec<Matrix>,
}

impl Trace {
    pub fn logits(&self) -> &Matrix {
        self.acts.last().expect("trace always holds the input")
    }
}

fn check_inputs(params: &ParamVector, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != params.spec().input_dim() {
        return Err(Error::Config(format!(
            "input width {} does not match model input width {}",
            inputs.cols(),
            params.spec().input_dim()
        )));
    }
    Ok(())
}

pub(crate) fn forward_trace(params: &ParamVector, inputs: &Matrix) -> Result<Trace> {
    check_inputs(params, inputs)?;
    let layers = params.spec().layers();
    let last = layers.len() - 1;
    let theta = params.values();
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(inputs.clone());
    for (l, layer) in layers.iter().enumerate() {
        let x = &acts[l];
        let mut out = Matrix::zeros(x.rows(), layer.fan_out);
        let w = &theta[layer.weights..layer.biases];
        let b = &theta[layer.biases..layer.biases + layer.fan_out];
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(b);
        }
        // out += x w^T, with w stored fan_out x fan_in.
        gemm(
            (x.rows(), layer.fan_in, layer.fan_out),
            (&x.data, layer.fan_in, 1),
            (w, 1, layer.fan_in),
            &mut out.data,
        );
        if l < last {
            out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(out);
    }
    Ok(Trace { acts })
}

/// Logits `B x C` for a batch of inputs.
pub fn forward(params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    Ok(forward_trace(params, inputs)?.acts.pop().expect("non-empty"))
}

/// Penultimate-layer activations, used as embedding features by core-set selection.
pub fn penultimate_features(params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    let mut trace = forward_trace(params, inputs)?;
    let n = trace.acts.len();
    Ok(trace.acts.swap_remove(n - 2))
}

/// Gradient of a loss w.r.t. the parameters given its gradient w.r.t. the logits.
pub(crate) fn backward(params: &ParamVector, trace: &Trace, dlogits: &Matrix) -> GradientVector {
    let layers = params.spec().layers();
    let theta = params.values();
    let mut grad = vec![0.0; theta.len()];
    let mut delta = dlogits.clone();
    for (l, layer) in layers.iter().enumerate().rev() {
        let x = &trace.acts[l];
        let (gw, gb) = grad[layer.weights..layer.biases + layer.fan_out].split_at_mut(layer.fan_out * layer.fan_in);
        // gw += delta^T x; gb += column sums of delta.
        gemm(
            (layer.fan_out, x.rows(), layer.fan_in),
            (&delta.data, 1, layer.fan_out),
            (&x.data, layer.fan_in, 1),
            gw,
        );
        for row in delta.iter_rows() {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        if l == 0 {
            break;
        }
        let w = &theta[layer.weights..layer.biases];
        let mut prev = Matrix::zeros(x.rows(), layer.fan_in);
        gemm(
            (x.rows(), layer.fan_out, layer.fan_in),
            (&delta.data, layer.fan_out, 1),
            (w, layer.fan_in, 1),
            &mut prev.data,
        );
        // ReLU derivative: x holds post-activation values of layer l-1.
        for (p, &a) in prev.data.iter_mut().zip(&x.data) {
            if a <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
    GradientVector { values: grad }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&g| (g - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&g| (g - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&g| g - lse).collect()
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0)
}

/// `KL(p || q) = sum_c p_c ln(p_c / q_c)` with both sides clamped to `[eps, 1]`.
/// Clamping can leave the sum a hair below zero; it is floored at 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input(format!(
            "KL over vectors of different length ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    Ok(p
        .iter()
        .zip(q)
        .map(|(&pc, &qc)| {
            let (pc, qc) = (clamp_prob(pc), clamp_prob(qc));
            pc * (pc.ln() - qc.ln())
        })
        .sum::<f64>()
        .max(0.0))
}

/// Balanced (count-adjusted) softmax cross-entropy on logits.
///
/// Per sample the loss is `-ln(n_y e^{g_y} / sum_c n_c e^{g_c})`, averaged over the
/// batch. Classes with a zero count drop out of the normaliser. Returns the loss and
/// its gradient w.r.t. the logits.
pub fn balanced_ce_logits(logits: &Matrix, labels: &[usize], counts: &[u64]) -> Result<(f64, Matrix)> {
    let classes = logits.cols();
    if counts.len() != classes {
        return Err(Error::Input(format!(
            "histogram has {} classes, logits have {classes}",
            counts.len()
        )));
    }
    if labels.len() != logits.rows() {
        return Err(Error::Input(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let mut dlogits = Matrix::zeros(logits.rows(), classes);
    if labels.is_empty() {
        return Ok((0.0, dlogits));
    }
    let log_counts: Vec<f64> = counts
        .iter()
        .map(|&n| if n == 0 { f64::NEG_INFINITY } else { (n as f64).ln() })
        .collect();
    let inv_b = 1.0 / labels.len() as f64;
    let mut loss = 0.0;
    let mut adjusted = vec![0.0; classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Input(format!("label {y} out of range for {classes} classes")));
        }
        if counts[y] == 0 {
            return Err(Error::Input(format!(
                "label {y} has a zero count in the balancing histogram"
            )));
        }
        for ((a, &g), &ln_n) in adjusted.iter_mut().zip(logits.row(r)).zip(&log_counts) {
            *a = g + ln_n;
        }
        let log_p = log_softmax(&adjusted);
        loss -= log_p[y];
        let dr = dlogits.row_mut(r);
        for (d, lp) in dr.iter_mut().zip(&log_p) {
            *d = lp.exp() * inv_b;
        }
        dr[y] -= inv_b;
    }
    Ok((loss * inv_b, dlogits))
}

/// Balanced cross-entropy of a labelled batch and its exact parameter gradient.
pub fn balanced_ce(params: &ParamVector, batch: &Batch, counts: &[u64]) -> Result<(f64, GradientVector)> {
    let labels = batch
        .labels
        .as_deref()
        .ok_or_else(|| Error::Input("balanced cross-entropy needs a labelled batch".into()))?;
    let trace = forward_trace(params, &batch.inputs)?;
    let (loss, dlogits) = balanced_ce_logits(trace.logits(), labels, counts)?;
    Ok((loss, backward(params, &trace, &dlogits)))
}

/// `params - lr * grad`.
pub fn sgd_step(params: &ParamVector, grad: &GradientVector, lr: f64) -> Result<ParamVector> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grad, lr)?;
    Ok(next)
}

pub fn sgd_step_in_place(params: &mut ParamVector, grad: &GradientVector, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if grad.len() != params.len() {
        return Err(Error::Config(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            params.len()
        )));
    }
    if let Some(i) = grad.values().iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("gradient entry {i} is {}", grad.values()[i])));
    }
    for (p, g) in params.values_mut().iter_mut().zip(grad.values()) {
        *p -= lr * g;
    }
    if params.values().iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("parameters diverged to a non-finite value".into()));
    }
    Ok(())
}

/// Row-wise argmax with ties resolved to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
