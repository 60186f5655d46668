//! Hand-rolled multilayer perceptrons with reverse-mode gradients.
//!
//! Three fixed architectures share one parameter container: categorical
//! policies (logit outputs), state/belief value functions (scalar output),
//! and Q functions (input is the domain vector concatenated with a one-hot
//! action). Parameters live in a single flat vector so optimizers and
//! trust-region solvers can treat them as points in R^n; per-layer matrices
//! are unpacked on demand.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HIDDEN_WIDTH: usize = 64;
/// Log-probabilities are clamped here to keep ratios and KL terms finite.
pub const LOG_PROB_FLOOR: f64 = -30.0;
/// Output-layer init scale; near-zero logits start policies near uniform.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_L2: f64 = 0.001;
/// Probabilities from a softmax must renormalize at least this well.
pub const SOFTMAX_SUM_TOL: f64 = 1e-9;

#[derive(Error, Debug)]
pub enum NetError {
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input value at position {0}")]
    NonFiniteInput(usize),
    #[error("regression dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    fn deriv_from_output(&self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Two hidden layers of [`HIDDEN_WIDTH`] units; weights packed row-major
/// (layer by layer, each weight matrix followed by its bias).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub flat: DVector<f64>,
}

impl MlpParams {
    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        let dims = vec![input_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, output_dim];
        let n = param_count(&dims);
        MlpParams {
            dims,
            activation,
            flat: DVector::zeros(n),
        }
    }

    /// Orthogonal-style init: uniformly random orthonormal weight matrices
    /// (sign-fixed QR of a Gaussian draw), zero biases, and a small output
    /// scale so initial policies are near-uniform.
    pub fn init<R: Rng>(
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(input_dim, output_dim, activation);
        let n_layers = p.dims.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (rows, cols) = (p.dims[l + 1], p.dims[l]);
            let scale = if l + 1 == n_layers { OUTPUT_INIT_SCALE } else { 1.0 };
            let w = orthogonal_matrix(rows, cols, rng) * scale;
            for r in 0..rows {
                for c in 0..cols {
                    p.flat[offset + r * cols + c] = w[(r, c)];
                }
            }
            offset += rows * cols + rows; // biases stay zero
        }
        p
    }

    pub fn n_params(&self) -> usize {
        param_count(&self.dims)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn unpack(&self) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        unpack_flat(&self.dims, &self.flat)
    }

    /// Forward pass over a batch; `x` holds one sample per column.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> MlpCache {
        assert_eq!(x.nrows(), self.input_dim(), "input width mismatch");
        let (ws, bs) = self.unpack();
        let n_layers = ws.len();
        let mut hs = Vec::with_capacity(n_layers);
        hs.push(x.clone());
        let mut h = x.clone();
        for l in 0..n_layers {
            let mut z = &ws[l] * &h;
            for mut col in z.column_iter_mut() {
                col += &bs[l];
            }
            if l + 1 < n_layers {
                z.apply(|v| *v = self.activation.apply(*v));
                hs.push(z.clone());
            }
            h = z;
        }
        MlpCache { hs, output: h }
    }

    /// Parameter gradient of `sum_batch <cotangent_i, output_i>`; the
    /// cotangent has the same shape as the cached output.
    pub fn backward_batch(&self, cache: &MlpCache, cotangent: &DMatrix<f64>) -> DVector<f64> {
        let (ws, _) = self.unpack();
        let n_layers = ws.len();
        let mut grad = DVector::zeros(self.n_params());
        let mut delta = cotangent.clone();
        for l in (0..n_layers).rev() {
            let h_in = &cache.hs[l];
            let dw = &delta * h_in.transpose();
            let db: DVector<f64> = delta.column_sum();
            let (rows, cols) = (self.dims[l + 1], self.dims[l]);
            let offset = layer_offset(&self.dims, l);
            for r in 0..rows {
                for c in 0..cols {
                    grad[offset + r * cols + c] = dw[(r, c)];
                }
            }
            for r in 0..rows {
                grad[offset + rows * cols + r] = db[r];
            }
            if l > 0 {
                let mut back = ws[l].transpose() * delta;
                for (i, h) in cache.hs[l].iter().enumerate() {
                    back[i] *= self.activation.deriv_from_output(*h);
                }
                delta = back;
            }
        }
        grad
    }

    /// Directional derivative of the batched outputs along a parameter
    /// perturbation `v` (forward mode through the same cache).
    pub fn jvp_batch(&self, cache: &MlpCache, v: &DVector<f64>) -> DMatrix<f64> {
        let (ws, _) = self.unpack();
        let (dws, dbs) = unpack_flat(&self.dims, v);
        let n_layers = ws.len();
        let batch = cache.hs[0].ncols();
        let mut dh = DMatrix::zeros(self.dims[0], batch);
        let mut out = DMatrix::zeros(self.output_dim(), batch);
        for l in 0..n_layers {
            let h_in = &cache.hs[l];
            let mut dz = &dws[l] * h_in + &ws[l] * &dh;
            for mut col in dz.column_iter_mut() {
                col += &dbs[l];
            }
            if l + 1 < n_layers {
                let h_out = &cache.hs[l + 1];
                for (i, h) in h_out.iter().enumerate() {
                    dz[i] *= self.activation.deriv_from_output(*h);
                }
                dh = dz;
            } else {
                out = dz;
            }
        }
        out
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

fn layer_offset(dims: &[usize], layer: usize) -> usize {
    dims.windows(2)
        .take(layer)
        .map(|w| w[1] * w[0] + w[1])
        .sum()
}

fn unpack_flat(dims: &[usize], flat: &DVector<f64>) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
    let mut ws = Vec::new();
    let mut bs = Vec::new();
    let mut offset = 0;
    for win in dims.windows(2) {
        let (cols, rows) = (win[0], win[1]);
        let mut w = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                w[(r, c)] = flat[offset + r * cols + c];
            }
        }
        offset += rows * cols;
        let b = DVector::from_fn(rows, |r, _| flat[offset + r]);
        offset += rows;
        ws.push(w);
        bs.push(b);
    }
    (ws, bs)
}

/// Sign-fixed QR of a Gaussian draw; rows (or columns, whichever fit) are
/// orthonormal.
fn orthogonal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let (tall_r, tall_c) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::from_fn(tall_r, tall_c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..tall_c {
        if r[(j, j)] < 0.0 {
            for i in 0..tall_r {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    if rows <= cols {
        q.transpose()
    } else {
        q
    }
}

pub struct MlpCache {
    /// Post-activation values per layer; `hs[0]` is the input batch.
    hs: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl MlpCache {
    pub fn batch_len(&self) -> usize {
        self.hs[0].ncols()
    }
}

// ---------------------------------------------------------------------------
// categorical policies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputDomain {
    StateVec,
    BeliefVec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoricalPolicyNet {
    pub params: MlpParams,
    pub domain: InputDomain,
    pub n_actions: usize,
}

#[derive(Debug, Clone)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
    /// Clamped at [`LOG_PROB_FLOOR`]; always finite.
    pub log_probs: Vec<f64>,
}

impl CategoricalPolicyNet {
    pub fn new<R: Rng>(input_dim: usize, n_actions: usize, domain: InputDomain, rng: &mut R) -> Self {
        CategoricalPolicyNet {
            params: MlpParams::init(input_dim, n_actions, Activation::Tanh, rng),
            domain,
            n_actions,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NetError> {
        if x.len() != self.params.input_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.params.input_dim(),
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteInput(i));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ActionDistribution, NetError> {
        self.check_input(x)?;
        let xm = DMatrix::from_column_slice(x.len(), 1, x);
        let cache = self.params.forward_batch(&xm);
        let (probs, logps) = softmax_column(&cache.output.column(0).into_owned());
        Ok(ActionDistribution {
            probs,
            log_probs: logps,
        })
    }

    /// Batched distribution: columns of the returns line up with columns of
    /// `xs`. The cache is returned for reuse by gradient passes.
    pub fn forward_batch(&self, xs: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, MlpCache) {
        let cache = self.params.forward_batch(xs);
        let n = self.n_actions;
        let b = xs.ncols();
        let mut probs = DMatrix::zeros(n, b);
        let mut logps = DMatrix::zeros(n, b);
        for j in 0..b {
            let (p, lp) = softmax_column(&cache.output.column(j).into_owned());
            for a in 0..n {
                probs[(a, j)] = p[a];
                logps[(a, j)] = lp[a];
            }
        }
        (probs, logps, cache)
    }

    pub fn log_prob(&self, x: &[f64], a: usize) -> Result<f64, NetError> {
        Ok(self.forward(x)?.log_probs[a])
    }

    pub fn sample<R: Rng>(&self, x: &[f64], rng: &mut R) -> Result<(usize, f64), NetError> {
        let dist = self.forward(x)?;
        let a = sample_categorical(&dist.probs, rng);
        Ok((a, dist.log_probs[a]))
    }

    pub fn argmax_action(&self, x: &[f64]) -> Result<usize, NetError> {
        let dist = self.forward(x)?;
        Ok(dist
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap())
    }

    /// Reverse-mode gradient of `log pi(a|x)` in flat-parameter space. The
    /// clamp on reported log-probs is an output guard, not part of the
    /// differentiated objective.
    pub fn grad_log_prob(&self, x: &[f64], a: usize) -> Result<DVector<f64>, NetError> {
        self.check_input(x)?;
        let xm = DMatrix::from_column_slice(x.len(), 1, x);
        let cache = self.params.forward_batch(&xm);
        let (probs, _) = softmax_column(&cache.output.column(0).into_owned());
        let mut cot = DMatrix::zeros(self.n_actions, 1);
        for i in 0..self.n_actions {
            cot[(i, 0)] = -probs[i];
        }
        cot[(a, 0)] += 1.0;
        Ok(self.params.backward_batch(&cache, &cot))
    }

    /// Shannon entropy at `x` and its parameter gradient.
    pub fn entropy(&self, x: &[f64]) -> Result<(f64, DVector<f64>), NetError> {
        self.check_input(x)?;
        let xm = DMatrix::from_column_slice(x.len(), 1, x);
        let cache = self.params.forward_batch(&xm);
        let (probs, logps) = softmax_column(&cache.output.column(0).into_owned());
        let h: f64 = -probs
            .iter()
            .zip(&logps)
            .map(|(p, lp)| if *p > 0.0 { p * lp } else { 0.0 })
            .sum::<f64>();
        let mut cot = DMatrix::zeros(self.n_actions, 1);
        for i in 0..self.n_actions {
            cot[(i, 0)] = -probs[i] * (logps[i] + h);
        }
        Ok((h, self.params.backward_batch(&cache, &cot)))
    }

    /// Fisher-vector product of the batch-mean KL at the current parameters:
    /// for softmax outputs the Gauss-Newton form `J^T (diag(p) - p p^T) J v`
    /// is the exact Hessian of `mean KL(pi_old || pi)` evaluated at old.
    pub fn fisher_vector_product(&self, xs: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (probs, _, cache) = self.forward_batch(xs);
        let ju = self.params.jvp_batch(&cache, v);
        let b = xs.ncols() as f64;
        let mut cot = DMatrix::zeros(self.n_actions, xs.ncols());
        for j in 0..xs.ncols() {
            let mut dot = 0.0;
            for a in 0..self.n_actions {
                dot += probs[(a, j)] * ju[(a, j)];
            }
            for a in 0..self.n_actions {
                cot[(a, j)] = probs[(a, j)] * (ju[(a, j)] - dot) / b;
            }
        }
        self.params.backward_batch(&cache, &cot)
    }
}

fn softmax_column(logits: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let logps: Vec<f64> = logits.iter().map(|z| (z - lse).max(LOG_PROB_FLOOR)).collect();
    (probs, logps)
}

pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ---------------------------------------------------------------------------
// value and Q networks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueNet {
    pub params: MlpParams,
}

impl ValueNet {
    pub fn new<R: Rng>(input_dim: usize, rng: &mut R) -> Self {
        ValueNet {
            params: MlpParams::init(input_dim, 1, Activation::Tanh, rng),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let xm = DMatrix::from_column_slice(x.len(), 1, x);
        self.params.forward_batch(&xm).output[(0, 0)]
    }

    pub fn value_batch(&self, xs: &DMatrix<f64>) -> DVector<f64> {
        self.params.forward_batch(xs).output.row(0).transpose()
    }
}

/// Q network over `domain vector ++ one-hot action`, scalar output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QNet {
    pub params: MlpParams,
    pub n_actions: usize,
}

impl QNet {
    pub fn new<R: Rng>(domain_dim: usize, n_actions: usize, rng: &mut R) -> Self {
        QNet {
            params: MlpParams::init(domain_dim + n_actions, 1, Activation::Tanh, rng),
            n_actions,
        }
    }

    pub fn input_for(&self, x: &[f64], a: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(x.len() + self.n_actions);
        v.extend_from_slice(x);
        let mut onehot = vec![0.0; self.n_actions];
        onehot[a] = 1.0;
        v.extend_from_slice(&onehot);
        v
    }

    pub fn q_value(&self, x: &[f64], a: usize) -> f64 {
        let input = self.input_for(x, a);
        let xm = DMatrix::from_column_slice(input.len(), 1, &input);
        self.params.forward_batch(&xm).output[(0, 0)]
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled-from-nothing classic L2: the penalty gradient
/// `l2 * params` is added to the incoming gradient before the moment
/// updates. Non-finite gradients reject the whole step and are counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub l2: f64,
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub t: u64,
    pub rejected_steps: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            l2: DEFAULT_L2,
            m: DVector::zeros(n_params),
            v: DVector::zeros(n_params),
            t: 0,
            rejected_steps: 0,
        }
    }

    pub fn without_l2(n_params: usize, lr: f64) -> Self {
        let mut a = Self::new(n_params, lr);
        a.l2 = 0.0;
        a
    }

    /// Returns false (and leaves params and state untouched) when the
    /// gradient contains non-finite entries.
    pub fn step(&mut self, params: &mut DVector<f64>, grads: &DVector<f64>) -> bool {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            self.rejected_steps += 1;
            return false;
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] + self.l2 * params[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        true
    }
}

// ---------------------------------------------------------------------------
// regression fitting
// ---------------------------------------------------------------------------

/// Minimizes mean squared error over shuffled minibatches; returns the mean
/// loss per epoch (measured before each epoch's updates are complete, i.e.
/// the running minibatch losses of that epoch).
pub fn fit_regression<R: Rng>(
    params: &mut MlpParams,
    opt: &mut Adam,
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    epochs: usize,
    minibatches: usize,
    rng: &mut R,
) -> Result<Vec<f64>, NetError> {
    let n = inputs.ncols();
    if n == 0 || targets.len() != n {
        return Err(NetError::EmptyDataset);
    }
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let n_batches = minibatches.max(1).min(n);
        for chunk in chunks(&order, n_batches) {
            let m = chunk.len();
            let xb = DMatrix::from_fn(inputs.nrows(), m, |r, j| inputs[(r, chunk[j])]);
            let cache = params.forward_batch(&xb);
            let mut cot = DMatrix::zeros(1, m);
            let mut loss = 0.0;
            for j in 0..m {
                let err = cache.output[(0, j)] - targets[chunk[j]];
                loss += err * err;
                cot[(0, j)] = 2.0 * err / m as f64;
            }
            epoch_loss += loss;
            let grad = params.backward_batch(&cache, &cot);
            opt.step(&mut params.flat, &grad);
        }
        trace.push(epoch_loss / n as f64);
    }
    Ok(trace)
}

fn chunks(order: &[usize], n_batches: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    let base = n / n_batches;
    let extra = n % n_batches;
    let mut out = Vec::with_capacity(n_batches);
    let mut start = 0;
    for k in 0..n_batches {
        let len = base + usize::from(k < extra);
        if len == 0 {
            continue;
        }
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    out
}

// ---------------------------------------------------------------------------
// finite differences (test oracle)
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function of the flat parameters.
pub fn finite_diff_grad<F: FnMut(&DVector<f64>) -> f64>(
    f: &mut F,
    at: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let mut grad = DVector::zeros(at.len());
    let mut x = at.clone();
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}
