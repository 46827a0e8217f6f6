//! The conditioned encoder-decoder regressor.
//!
//! A feature window with the subject one-hot appended to every row passes
//! through four temporal convolutions (3×1 kernel, stride 2×1, same padding,
//! batch norm then ReLU), is flattened, concatenated with the condition again,
//! and mapped through two dense layers to a latent encoding. A final linear
//! decoder, initialized with PCA components of the training displacements,
//! emits per-vertex displacements. Forward caches everything the hand-written
//! backward pass needs.

use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Result, VocaError};
use crate::io_util;
use crate::mat::Mat;
use crate::scalar::{sc, Scalar};

pub const BN_EPS: f64 = 1e-5;

/// Layer sizing. The default mirrors the reference configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub window: usize,
    pub feature_dim: usize,
    pub n_subjects: usize,
    pub conv_channels: Vec<usize>,
    pub fc1_units: usize,
    pub latent: usize,
    pub n_vertices: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            window: 16,
            feature_dim: 29,
            n_subjects: 8,
            conv_channels: vec![32, 32, 64, 64],
            fc1_units: 128,
            latent: 50,
            n_vertices: 5023,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.window,
            self.feature_dim,
            self.n_subjects,
            self.fc1_units,
            self.latent,
            self.n_vertices,
        ];
        if positive.iter().any(|&v| v == 0) || self.conv_channels.is_empty() {
            return Err(VocaError::Config("all layer sizes must be positive".into()));
        }
        if self.conv_channels.contains(&0) {
            return Err(VocaError::Config("conv channel counts must be positive".into()));
        }
        // Each stride-2 stage halves the window; it must not bottom out early.
        if self.window < 1usize << self.depth() {
            return Err(VocaError::Config(format!(
                "window {} too short for {} stride-2 layers",
                self.window,
                self.depth()
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.conv_channels.len()
    }

    /// Temporal lengths entering each conv stage plus the final length.
    pub fn conv_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.window];
        for _ in 0..self.depth() {
            let l = *lens.last().unwrap();
            lens.push((l - 1) / 2 + 1);
        }
        lens
    }

    /// Channel counts entering each conv stage plus the final count.
    pub fn channel_chain(&self) -> Vec<usize> {
        let mut chain = vec![self.feature_dim + self.n_subjects];
        chain.extend_from_slice(&self.conv_channels);
        chain
    }

    /// Flattened encoder output before the second condition concat.
    pub fn flat_len(&self) -> usize {
        let lens = self.conv_lengths();
        lens[self.depth()] * *self.conv_channels.last().unwrap()
    }

    pub fn fc1_in(&self) -> usize {
        self.flat_len() + self.n_subjects
    }

    pub fn out_dim(&self) -> usize {
        self.n_vertices * 3
    }
}

/// Weights over subjects: one-hot in training, any simplex point at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition<S> {
    weights: Vec<S>,
}

impl<S: Scalar> Condition<S> {
    pub fn new(weights: Vec<S>) -> Result<Self> {
        if weights.is_empty() {
            return Err(VocaError::Parameter("condition must cover at least one subject".into()));
        }
        let mut sum = 0.0;
        for w in &weights {
            let w = w.to_f64_c();
            if w < -1e-6 {
                return Err(VocaError::Parameter(format!("condition weight {} is negative", w)));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(VocaError::Parameter(format!("condition weights sum to {}, expected 1", sum)));
        }
        Ok(Condition { weights })
    }

    pub fn one_hot(index: usize, n_subjects: usize) -> Result<Self> {
        if index >= n_subjects {
            return Err(VocaError::Parameter(format!(
                "subject index {} out of range for {} subjects",
                index, n_subjects
            )));
        }
        let mut weights = vec![S::zero(); n_subjects];
        weights[index] = S::one();
        Ok(Condition { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.weights
    }

    pub fn is_one_hot(&self) -> bool {
        let ones = self.weights.iter().filter(|w| **w == S::one()).count();
        let zeros = self.weights.iter().filter(|w| **w == S::zero()).count();
        ones == 1 && zeros == self.weights.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

impl<S: Scalar> BatchNorm<S> {
    fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<S> {
    /// out_channels × (3 · in_channels), tap-major: column t·C_in + ic.
    pub kernel: Mat<S>,
    pub bias: Vec<S>,
    pub bn: BatchNorm<S>,
}

#[derive(Debug, Clone)]
pub struct Dense<S> {
    /// out × in.
    pub weights: Mat<S>,
    pub bias: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct Decoder<S> {
    /// latent × (N·3): row j is the displacement direction of latent unit j.
    pub weights: Mat<S>,
    pub bias: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct NetworkParams<S> {
    pub config: NetConfig,
    pub conv: Vec<ConvLayer<S>>,
    pub fc1: Dense<S>,
    pub fc2: Dense<S>,
    pub decoder: Decoder<S>,
}

impl<S: Scalar> NetworkParams<S> {
    /// Same shapes, every tensor zeroed. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let conv = self
            .conv
            .iter()
            .map(|l| ConvLayer {
                kernel: Mat::zeros(l.kernel.rows(), l.kernel.cols()),
                bias: vec![S::zero(); l.bias.len()],
                bn: BatchNorm {
                    gamma: vec![S::zero(); l.bn.gamma.len()],
                    beta: vec![S::zero(); l.bn.beta.len()],
                    running_mean: vec![S::zero(); l.bn.running_mean.len()],
                    running_var: vec![S::zero(); l.bn.running_var.len()],
                },
            })
            .collect();
        let zero_dense = |d: &Dense<S>| Dense {
            weights: Mat::zeros(d.weights.rows(), d.weights.cols()),
            bias: vec![S::zero(); d.bias.len()],
        };
        NetworkParams {
            config: self.config.clone(),
            conv,
            fc1: zero_dense(&self.fc1),
            fc2: zero_dense(&self.fc2),
            decoder: Decoder {
                weights: Mat::zeros(self.decoder.weights.rows(), self.decoder.weights.cols()),
                bias: vec![S::zero(); self.decoder.bias.len()],
            },
        }
    }

    pub fn convert<T: Scalar>(&self) -> NetworkParams<T> {
        let conv_vec = |v: &[S]| v.iter().map(|x| T::from_f64_c(x.to_f64_c())).collect::<Vec<T>>();
        NetworkParams {
            config: self.config.clone(),
            conv: self
                .conv
                .iter()
                .map(|l| ConvLayer {
                    kernel: l.kernel.convert(),
                    bias: conv_vec(&l.bias),
                    bn: BatchNorm {
                        gamma: conv_vec(&l.bn.gamma),
                        beta: conv_vec(&l.bn.beta),
                        running_mean: conv_vec(&l.bn.running_mean),
                        running_var: conv_vec(&l.bn.running_var),
                    },
                })
                .collect(),
            fc1: Dense { weights: self.fc1.weights.convert(), bias: conv_vec(&self.fc1.bias) },
            fc2: Dense { weights: self.fc2.weights.convert(), bias: conv_vec(&self.fc2.bias) },
            decoder: Decoder {
                weights: self.decoder.weights.convert(),
                bias: conv_vec(&self.decoder.bias),
            },
        }
    }

    /// Trainable tensors in a fixed order (running stats excluded).
    pub fn trainable(&self) -> Vec<(String, &[S])> {
        let mut out: Vec<(String, &[S])> = Vec::new();
        for (i, l) in self.conv.iter().enumerate() {
            out.push((format!("conv{}.kernel", i), l.kernel.as_slice()));
            out.push((format!("conv{}.bias", i), &l.bias));
            out.push((format!("conv{}.bn_gamma", i), &l.bn.gamma));
            out.push((format!("conv{}.bn_beta", i), &l.bn.beta));
        }
        out.push(("fc1.weight".into(), self.fc1.weights.as_slice()));
        out.push(("fc1.bias".into(), &self.fc1.bias));
        out.push(("fc2.weight".into(), self.fc2.weights.as_slice()));
        out.push(("fc2.bias".into(), &self.fc2.bias));
        out.push(("decoder.weight".into(), self.decoder.weights.as_slice()));
        out.push(("decoder.bias".into(), &self.decoder.bias));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut [S])> {
        let mut out: Vec<(String, &mut [S])> = Vec::new();
        for (i, l) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{}.kernel", i), l.kernel.as_mut_slice()));
            out.push((format!("conv{}.bias", i), &mut l.bias));
            out.push((format!("conv{}.bn_gamma", i), &mut l.bn.gamma));
            out.push((format!("conv{}.bn_beta", i), &mut l.bn.beta));
        }
        out.push(("fc1.weight".into(), self.fc1.weights.as_mut_slice()));
        out.push(("fc1.bias".into(), &mut self.fc1.bias));
        out.push(("fc2.weight".into(), self.fc2.weights.as_mut_slice()));
        out.push(("fc2.bias".into(), &mut self.fc2.bias));
        out.push(("decoder.weight".into(), self.decoder.weights.as_mut_slice()));
        out.push(("decoder.bias".into(), &mut self.decoder.bias));
        out
    }
}

/// PCA of displacement rows: orthonormal components by decreasing singular
/// value, plus the row mean.
#[derive(Debug, Clone)]
pub struct PCABasis<S> {
    /// k × (N·3).
    pub components: Mat<S>,
    pub singular_values: Vec<S>,
    pub mean: Vec<S>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues (descending) and matching eigenvectors as rows.
fn jacobi_eigh(mut a: Mat<f64>) -> (Vec<f64>, Mat<f64>) {
    let n = a.rows();
    let mut v = Mat::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 });
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(1e-300, f64::max);
    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() < 1e-14 * scale.max(1.0) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (aip, aiq) = (a[(i, p)], a[(i, q)]);
                    a[(i, p)] = c * aip - s * aiq;
                    a[(i, q)] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let (api, aqi) = (a[(p, i)], a[(q, i)]);
                    a[(p, i)] = c * api - s * aqi;
                    a[(q, i)] = s * api + c * aqi;
                }
                for i in 0..n {
                    let (vip, viq) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(c, order[r])]);
    (values, vectors)
}

/// Flip each row so its largest-magnitude entry is positive.
fn canonical_signs(components: &mut Mat<f64>) {
    for r in 0..components.rows() {
        let row = components.row_mut(r);
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = i;
            }
        }
        if row[best] < 0.0 {
            for v in row.iter_mut() {
                *v = -*v;
            }
        }
    }
}

/// Top-k principal directions of the row-centered data.
///
/// Eigendecomposes whichever of the D×D covariance or M×M Gram matrix is
/// smaller; zero-variance directions from the Gram path are completed with
/// canonical basis vectors orthonormalized against the rest.
pub fn compute_pca<S: Scalar>(data: &Mat<S>, k: usize) -> Result<PCABasis<S>> {
    let (m, d) = (data.rows(), data.cols());
    if k == 0 {
        return Err(VocaError::Parameter("need at least one component".into()));
    }
    if m < k {
        return Err(VocaError::InsufficientData(format!(
            "{} rows cannot support {} components",
            m, k
        )));
    }
    if d < k {
        return Err(VocaError::Parameter(format!(
            "{}-dimensional rows cannot support {} orthonormal components",
            d, k
        )));
    }
    let x: Mat<f64> = data.convert();
    let mean: Vec<f64> = {
        let sums = x.col_sums();
        sums.into_iter().map(|s| s / m as f64).collect()
    };
    let centered = Mat::from_fn(m, d, |r, c| x[(r, c)] - mean[c]);

    let (mut values, mut components) = if d <= m {
        let cov = centered.matmul_at(&centered).unwrap();
        let (values, vectors) = jacobi_eigh(cov);
        (values, vectors)
    } else {
        let gram = centered.matmul_bt(&centered).unwrap();
        let (values, u_rows) = jacobi_eigh(gram);
        let sigma_max = values.first().map_or(0.0, |v| v.max(0.0).sqrt());
        // Null directions of the Gram matrix come back as eigensolver noise
        // near sigma_max * 1e-7; dividing by such a sigma would manufacture a
        // junk direction. Classify everything below this line as rank-null.
        let tol = sigma_max * 1e-6;
        let mut comps = Mat::zeros(m, d);
        let mut filled = Vec::with_capacity(m);
        for i in 0..m {
            let sigma = values[i].max(0.0).sqrt();
            if sigma > tol {
                let row = comps.row_mut(i);
                for (c, slot) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for b in 0..m {
                        acc += u_rows[(i, b)] * centered[(b, c)];
                    }
                    *slot = acc / sigma;
                }
                filled.push(i);
            }
        }
        // Rank-deficient directions: orthonormalize canonical axes against
        // what exists so the basis stays deterministic.
        let mut next_axis = 0usize;
        for i in 0..m {
            let sigma = values[i].max(0.0).sqrt();
            if sigma > tol {
                continue;
            }
            'axis: while next_axis < d {
                let mut cand = vec![0.0f64; d];
                cand[next_axis] = 1.0;
                next_axis += 1;
                for &j in &filled {
                    let dot: f64 = comps.row(j).iter().zip(&cand).map(|(a, b)| a * b).sum();
                    for (slot, cj) in cand.iter_mut().zip(comps.row(j)) {
                        *slot -= dot * cj;
                    }
                }
                let norm: f64 = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    for (slot, v) in comps.row_mut(i).iter_mut().zip(&cand) {
                        *slot = v / norm;
                    }
                    filled.push(i);
                    break 'axis;
                }
            }
        }
        (values, comps)
    };

    values.truncate(k);
    let mut top = Mat::from_fn(k, d, |r, c| components[(r, c)]);
    canonical_signs(&mut top);
    components = top;

    Ok(PCABasis {
        components: components.convert(),
        singular_values: values.iter().map(|&v| sc(v.max(0.0).sqrt())).collect(),
        mean: mean.iter().map(|&v| sc(v)).collect(),
    })
}

/// Initialize parameters: decoder rows from unit-norm PCA components with a
/// zero bias, fc2 zeroed so the initial output is exactly zero, everything
/// else uniform with a fan-in bound, deterministically from the seed.
pub fn init_params<S: Scalar>(config: &NetConfig, pca: &PCABasis<S>, seed: u64) -> Result<NetworkParams<S>> {
    use rand::Rng;
    config.validate()?;
    if pca.components.rows() != config.latent || pca.components.cols() != config.out_dim() {
        return Err(VocaError::Parameter(format!(
            "PCA basis is {}x{}, config needs {}x{}",
            pca.components.rows(),
            pca.components.cols(),
            config.latent,
            config.out_dim()
        )));
    }
    let mut rng = crate::rng::seeded_rng(seed, "net-init");
    let mut uniform_fan_in = |rows: usize, cols: usize, fan_in: usize| -> Mat<S> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Mat::from_fn(rows, cols, |_, _| sc(rng.gen_range(-bound..bound)))
    };

    let chain = config.channel_chain();
    let conv = (0..config.depth())
        .map(|l| {
            let (c_in, c_out) = (chain[l], chain[l + 1]);
            ConvLayer {
                kernel: uniform_fan_in(c_out, 3 * c_in, 3 * c_in),
                bias: vec![S::zero(); c_out],
                bn: BatchNorm::identity(c_out),
            }
        })
        .collect();
    let fc1 = Dense {
        weights: uniform_fan_in(config.fc1_units, config.fc1_in(), config.fc1_in()),
        bias: vec![S::zero(); config.fc1_units],
    };
    let fc2 = Dense {
        weights: Mat::zeros(config.latent, config.fc1_units),
        bias: vec![S::zero(); config.latent],
    };
    let decoder = Decoder {
        weights: pca.components.clone(),
        bias: vec![S::zero(); config.out_dim()],
    };
    Ok(NetworkParams { config: config.clone(), conv, fc1, fc2, decoder })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Everything backward needs from one forward pass.
pub struct ForwardCache<S> {
    pub mode: Mode,
    /// acts[0] is the window with condition columns; acts[l+1] the post-ReLU
    /// output of conv stage l. One matrix per batch item.
    pub acts: Vec<Vec<Mat<S>>>,
    pub xhat: Vec<Vec<Mat<S>>>,
    pub bn_mean: Vec<Vec<S>>,
    /// Biased batch variance per channel (the stats running averages track).
    pub bn_var: Vec<Vec<S>>,
    pub bn_inv_std: Vec<Vec<S>>,
    pub fc1_in: Mat<S>,
    pub h1: Mat<S>,
    pub enc: Mat<S>,
}

fn conv_forward<S: Scalar>(x: &Mat<S>, kernel: &Mat<S>, bias: &[S]) -> Mat<S> {
    let (l_in, c_in) = (x.rows(), x.cols());
    let c_out = kernel.rows();
    let l_out = (l_in - 1) / 2 + 1;
    let mut out = Mat::zeros(l_out, c_out);
    for p in 0..l_out {
        let dst = out.row_mut(p);
        for oc in 0..c_out {
            let krow = kernel.row(oc);
            let mut acc = bias[oc];
            for t in 0..3usize {
                let q = (2 * p + t) as isize - 1;
                if q < 0 || q >= l_in as isize {
                    continue;
                }
                let xrow = x.row(q as usize);
                let ktap = &krow[t * c_in..(t + 1) * c_in];
                for (k, v) in ktap.iter().zip(xrow) {
                    acc = acc + *k * *v;
                }
            }
            dst[oc] = acc;
        }
    }
    out
}

/// Encoder over a batch; caches activations and the batch-norm statistics the
/// pass used. Train mode normalizes with batch stats, infer with running
/// stats; neither mutates the parameters.
pub fn encode_batch<S: Scalar>(
    params: &NetworkParams<S>,
    windows: &[Mat<S>],
    conds: &[Condition<S>],
    mode: Mode,
) -> Result<(Mat<S>, ForwardCache<S>)> {
    let cfg = &params.config;
    if windows.is_empty() {
        return Err(VocaError::EmptyInput("empty batch".into()));
    }
    if windows.len() != conds.len() {
        return Err(VocaError::Parameter(format!(
            "{} windows vs {} conditions",
            windows.len(),
            conds.len()
        )));
    }
    for w in windows {
        if w.rows() != cfg.window || w.cols() != cfg.feature_dim {
            return Err(VocaError::Parameter(format!(
                "window is {}x{}, config needs {}x{}",
                w.rows(),
                w.cols(),
                cfg.window,
                cfg.feature_dim
            )));
        }
    }
    for c in conds {
        if c.len() != cfg.n_subjects {
            return Err(VocaError::Parameter(format!(
                "condition covers {} subjects, config has {}",
                c.len(),
                cfg.n_subjects
            )));
        }
    }
    let b = windows.len();

    // Stage 0: append the condition to every feature row.
    let x0: Vec<Mat<S>> = windows
        .iter()
        .zip(conds)
        .map(|(w, c)| {
            Mat::from_fn(cfg.window, cfg.feature_dim + cfg.n_subjects, |r, col| {
                if col < cfg.feature_dim {
                    w[(r, col)]
                } else {
                    c.as_slice()[col - cfg.feature_dim]
                }
            })
        })
        .collect();

    let mut acts: Vec<Vec<Mat<S>>> = vec![x0];
    let mut xhat_all = Vec::with_capacity(cfg.depth());
    let mut bn_mean_all = Vec::with_capacity(cfg.depth());
    let mut bn_var_all = Vec::with_capacity(cfg.depth());
    let mut bn_inv_std_all = Vec::with_capacity(cfg.depth());

    for layer in &params.conv {
        let inputs = acts.last().unwrap();
        let z: Vec<Mat<S>> = inputs.iter().map(|x| conv_forward(x, &layer.kernel, &layer.bias)).collect();
        let (l_out, c_out) = (z[0].rows(), z[0].cols());

        let (mean, var) = match mode {
            Mode::Train => {
                let m = (b * l_out) as f64;
                let mut mean = vec![0.0f64; c_out];
                for zb in &z {
                    for p in 0..l_out {
                        for (acc, v) in mean.iter_mut().zip(zb.row(p)) {
                            *acc += v.to_f64_c();
                        }
                    }
                }
                for v in mean.iter_mut() {
                    *v /= m;
                }
                let mut var = vec![0.0f64; c_out];
                for zb in &z {
                    for p in 0..l_out {
                        for (c, v) in zb.row(p).iter().enumerate() {
                            let d = v.to_f64_c() - mean[c];
                            var[c] += d * d;
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v /= m;
                }
                (mean, var)
            }
            Mode::Infer => (
                layer.bn.running_mean.iter().map(|v| v.to_f64_c()).collect(),
                layer.bn.running_var.iter().map(|v| v.to_f64_c()).collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let mut xhat_batch = Vec::with_capacity(b);
        let mut post_batch = Vec::with_capacity(b);
        for zb in &z {
            let xhat = Mat::from_fn(l_out, c_out, |p, c| sc::<S>((zb[(p, c)].to_f64_c() - mean[c]) * inv_std[c]));
            let post = Mat::from_fn(l_out, c_out, |p, c| {
                let y = layer.bn.gamma[c] * xhat[(p, c)] + layer.bn.beta[c];
                if y > S::zero() {
                    y
                } else {
                    S::zero()
                }
            });
            xhat_batch.push(xhat);
            post_batch.push(post);
        }
        xhat_all.push(xhat_batch);
        bn_mean_all.push(mean.iter().map(|&v| sc::<S>(v)).collect());
        bn_var_all.push(var.iter().map(|&v| sc::<S>(v)).collect());
        bn_inv_std_all.push(inv_std.iter().map(|&v| sc::<S>(v)).collect());
        acts.push(post_batch);
    }

    // Flatten the final stage and append the condition once more.
    let flat_len = cfg.flat_len();
    let fc1_in = Mat::from_fn(b, cfg.fc1_in(), |bi, col| {
        if col < flat_len {
            let last = &acts[cfg.depth()][bi];
            let c_out = last.cols();
            last[(col / c_out, col % c_out)]
        } else {
            conds[bi].as_slice()[col - flat_len]
        }
    });

    let mut h1 = Mat::zeros(b, cfg.fc1_units);
    for bi in 0..b {
        let input = fc1_in.row(bi);
        let dst = h1.row_mut(bi);
        for (u, slot) in dst.iter_mut().enumerate() {
            let mut acc = params.fc1.bias[u];
            for (w, v) in params.fc1.weights.row(u).iter().zip(input) {
                acc = acc + *w * *v;
            }
            *slot = acc.tanh();
        }
    }

    let mut enc = Mat::zeros(b, cfg.latent);
    for bi in 0..b {
        let input = h1.row(bi);
        let dst = enc.row_mut(bi);
        for (u, slot) in dst.iter_mut().enumerate() {
            let mut acc = params.fc2.bias[u];
            for (w, v) in params.fc2.weights.row(u).iter().zip(input) {
                acc = acc + *w * *v;
            }
            *slot = acc;
        }
    }

    let cache = ForwardCache {
        mode,
        acts,
        xhat: xhat_all,
        bn_mean: bn_mean_all,
        bn_var: bn_var_all,
        bn_inv_std: bn_inv_std_all,
        fc1_in,
        h1,
        enc: enc.clone(),
    };
    Ok((enc, cache))
}

/// Decode a batch of encodings to flattened displacement rows (B × N·3).
pub fn decode_batch<S: Scalar>(params: &NetworkParams<S>, enc: &Mat<S>) -> Result<Mat<S>> {
    if enc.cols() != params.config.latent {
        return Err(VocaError::Parameter(format!(
            "encoding length {} does not match latent size {}",
            enc.cols(),
            params.config.latent
        )));
    }
    let mut out = enc.matmul(&params.decoder.weights)?;
    for bi in 0..out.rows() {
        for (v, b) in out.row_mut(bi).iter_mut().zip(&params.decoder.bias) {
            *v = *v + *b;
        }
    }
    Ok(out)
}

/// Full network over a batch: flattened displacements plus the cache.
pub fn forward_batch<S: Scalar>(
    params: &NetworkParams<S>,
    windows: &[Mat<S>],
    conds: &[Condition<S>],
    mode: Mode,
) -> Result<(Mat<S>, ForwardCache<S>)> {
    let (enc, cache) = encode_batch(params, windows, conds, mode)?;
    let out = decode_batch(params, &enc)?;
    Ok((out, cache))
}

/// Single-window encoding.
pub fn encode<S: Scalar>(
    params: &NetworkParams<S>,
    window: &Mat<S>,
    cond: &Condition<S>,
    mode: Mode,
) -> Result<Vec<S>> {
    let (enc, _) = encode_batch(params, std::slice::from_ref(window), std::slice::from_ref(cond), mode)?;
    Ok(enc.row(0).to_vec())
}

/// Single-encoding decode to an N×3 displacement field.
pub fn decode<S: Scalar>(params: &NetworkParams<S>, encoding: &[S]) -> Result<Mat<S>> {
    let enc = Mat::from_vec(1, encoding.len(), encoding.to_vec())?;
    let flat = decode_batch(params, &enc)?;
    Mat::from_vec(params.config.n_vertices, 3, flat.into_vec())
}

/// Single-window forward to an N×3 displacement field.
pub fn forward<S: Scalar>(
    params: &NetworkParams<S>,
    window: &Mat<S>,
    cond: &Condition<S>,
    mode: Mode,
) -> Result<Mat<S>> {
    let enc = encode(params, window, cond, mode)?;
    decode(params, &enc)
}

/// Backpropagate dL/d(output-rows) through a cached forward pass, adding into
/// the gradient accumulator. The cache's own mode decides the batch-norm
/// backward: train mode differentiates through the batch statistics.
pub fn backward_batch<S: Scalar>(
    params: &NetworkParams<S>,
    cache: &ForwardCache<S>,
    dout: &Mat<S>,
    grads: &mut NetworkParams<S>,
) -> Result<()> {
    let cfg = &params.config;
    let b = dout.rows();
    if b != cache.enc.rows() || dout.cols() != cfg.out_dim() {
        return Err(VocaError::Parameter(format!(
            "output gradient is {}x{}, expected {}x{}",
            dout.rows(),
            dout.cols(),
            cache.enc.rows(),
            cfg.out_dim()
        )));
    }

    // Decoder.
    let dw = cache.enc.matmul_at(dout)?;
    add_into(grads.decoder.weights.as_mut_slice(), dw.as_slice());
    add_into(&mut grads.decoder.bias, &dout.col_sums());
    let denc = dout.matmul_bt(&params.decoder.weights)?;

    // fc2.
    let dw = denc.matmul_at(&cache.h1)?;
    add_into(grads.fc2.weights.as_mut_slice(), dw.as_slice());
    add_into(&mut grads.fc2.bias, &denc.col_sums());
    let dh1 = denc.matmul(&params.fc2.weights)?;

    // tanh.
    let dpre1 = Mat::from_fn(b, cfg.fc1_units, |bi, u| {
        let h = cache.h1[(bi, u)];
        dh1[(bi, u)] * (S::one() - h * h)
    });

    // fc1.
    let dw = dpre1.matmul_at(&cache.fc1_in)?;
    add_into(grads.fc1.weights.as_mut_slice(), dw.as_slice());
    add_into(&mut grads.fc1.bias, &dpre1.col_sums());
    let dg = dpre1.matmul(&params.fc1.weights)?;

    // Un-flatten; condition columns receive no gradient.
    let lens = cfg.conv_lengths();
    let l_final = lens[cfg.depth()];
    let c_final = *cfg.conv_channels.last().unwrap();
    let mut d_act: Vec<Mat<S>> = (0..b)
        .map(|bi| Mat::from_fn(l_final, c_final, |p, c| dg[(bi, p * c_final + c)]))
        .collect();

    let chain = cfg.channel_chain();
    for l in (0..cfg.depth()).rev() {
        let layer = &params.conv[l];
        let glayer = &mut grads.conv[l];
        let l_out = lens[l + 1];
        let c_out = chain[l + 1];
        let m = (b * l_out) as f64;

        // ReLU gate, then batch-norm backward per channel.
        let mut dy: Vec<Mat<S>> = Vec::with_capacity(b);
        for (bi, da) in d_act.iter().enumerate() {
            let post = &cache.acts[l + 1][bi];
            dy.push(Mat::from_fn(l_out, c_out, |p, c| {
                if post[(p, c)] > S::zero() {
                    da[(p, c)]
                } else {
                    S::zero()
                }
            }));
        }
        let mut sum_dy = vec![0.0f64; c_out];
        let mut sum_dy_xhat = vec![0.0f64; c_out];
        for (bi, dyb) in dy.iter().enumerate() {
            let xh = &cache.xhat[l][bi];
            for p in 0..l_out {
                for c in 0..c_out {
                    let g = dyb[(p, c)].to_f64_c();
                    sum_dy[c] += g;
                    sum_dy_xhat[c] += g * xh[(p, c)].to_f64_c();
                }
            }
        }
        for c in 0..c_out {
            glayer.bn.beta[c] = glayer.bn.beta[c] + sc(sum_dy[c]);
            glayer.bn.gamma[c] = glayer.bn.gamma[c] + sc(sum_dy_xhat[c]);
        }
        let mut dz: Vec<Mat<S>> = Vec::with_capacity(b);
        for (bi, dyb) in dy.iter().enumerate() {
            let xh = &cache.xhat[l][bi];
            dz.push(Mat::from_fn(l_out, c_out, |p, c| {
                let scale = layer.bn.gamma[c].to_f64_c() * cache.bn_inv_std[l][c].to_f64_c();
                let g = dyb[(p, c)].to_f64_c();
                let centered = match cache.mode {
                    Mode::Train => g - sum_dy[c] / m - xh[(p, c)].to_f64_c() * sum_dy_xhat[c] / m,
                    Mode::Infer => g,
                };
                sc(scale * centered)
            }));
        }

        // Conv backward: kernel, bias, and input gradients.
        let c_in = chain[l];
        let l_in = lens[l];
        let mut d_prev: Vec<Mat<S>> = (0..b).map(|_| Mat::zeros(l_in, c_in)).collect();
        for bi in 0..b {
            let x = &cache.acts[l][bi];
            let dzb = &dz[bi];
            let dx = &mut d_prev[bi];
            for p in 0..l_out {
                for oc in 0..c_out {
                    let g = dzb[(p, oc)];
                    if g == S::zero() {
                        continue;
                    }
                    glayer.bias[oc] = glayer.bias[oc] + g;
                    for t in 0..3usize {
                        let q = (2 * p + t) as isize - 1;
                        if q < 0 || q >= l_in as isize {
                            continue;
                        }
                        let q = q as usize;
                        let kcols = t * c_in..(t + 1) * c_in;
                        let krow = &layer.kernel.row(oc)[kcols.clone()];
                        let xrow = x.row(q);
                        let gkrow = &mut glayer.kernel.row_mut(oc)[kcols];
                        let dxrow = dx.row_mut(q);
                        for ic in 0..c_in {
                            gkrow[ic] = gkrow[ic] + g * xrow[ic];
                            dxrow[ic] = dxrow[ic] + g * krow[ic];
                        }
                    }
                }
            }
        }
        d_act = d_prev;
    }
    Ok(())
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

const CKPT_MAGIC: &[u8; 4] = b"VCKP";
const CKPT_VERSION: u32 = 1;

fn tensor_list<S: Scalar>(params: &NetworkParams<S>, pca: &PCABasis<S>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let vec32 = |v: &[S]| v.iter().map(|x| x.to_f64_c() as f32).collect::<Vec<f32>>();
    let mut out = Vec::new();
    for (i, l) in params.conv.iter().enumerate() {
        out.push((
            format!("conv{}.kernel", i),
            vec![l.kernel.rows(), l.kernel.cols()],
            vec32(l.kernel.as_slice()),
        ));
        out.push((format!("conv{}.bias", i), vec![l.bias.len()], vec32(&l.bias)));
        out.push((format!("conv{}.bn_gamma", i), vec![l.bn.gamma.len()], vec32(&l.bn.gamma)));
        out.push((format!("conv{}.bn_beta", i), vec![l.bn.beta.len()], vec32(&l.bn.beta)));
        out.push((
            format!("conv{}.bn_running_mean", i),
            vec![l.bn.running_mean.len()],
            vec32(&l.bn.running_mean),
        ));
        out.push((
            format!("conv{}.bn_running_var", i),
            vec![l.bn.running_var.len()],
            vec32(&l.bn.running_var),
        ));
    }
    out.push((
        "fc1.weight".into(),
        vec![params.fc1.weights.rows(), params.fc1.weights.cols()],
        vec32(params.fc1.weights.as_slice()),
    ));
    out.push(("fc1.bias".into(), vec![params.fc1.bias.len()], vec32(&params.fc1.bias)));
    out.push((
        "fc2.weight".into(),
        vec![params.fc2.weights.rows(), params.fc2.weights.cols()],
        vec32(params.fc2.weights.as_slice()),
    ));
    out.push(("fc2.bias".into(), vec![params.fc2.bias.len()], vec32(&params.fc2.bias)));
    out.push((
        "decoder.weight".into(),
        vec![params.decoder.weights.rows(), params.decoder.weights.cols()],
        vec32(params.decoder.weights.as_slice()),
    ));
    out.push(("decoder.bias".into(), vec![params.decoder.bias.len()], vec32(&params.decoder.bias)));
    out.push((
        "pca.components".into(),
        vec![pca.components.rows(), pca.components.cols()],
        vec32(pca.components.as_slice()),
    ));
    out.push((
        "pca.singular_values".into(),
        vec![pca.singular_values.len()],
        vec32(&pca.singular_values),
    ));
    out.push(("pca.mean".into(), vec![pca.mean.len()], vec32(&pca.mean)));
    out
}

/// Write the "VCKP" checkpoint: config dims, subject-id table, a named tensor
/// manifest (name, shape, element offset), then one f32 payload.
pub fn save_checkpoint<S: Scalar>(
    params: &NetworkParams<S>,
    pca: &PCABasis<S>,
    subjects: &[String],
    path: &Path,
) -> Result<()> {
    let tensors = tensor_list(params, pca);
    io_util::atomic_write(path, |w| {
        w.write_all(CKPT_MAGIC)?;
        io_util::write_u32(w, CKPT_VERSION)?;
        let cfg = &params.config;
        io_util::write_u32(w, cfg.window as u32)?;
        io_util::write_u32(w, cfg.feature_dim as u32)?;
        io_util::write_u32(w, cfg.n_subjects as u32)?;
        io_util::write_u32(w, cfg.depth() as u32)?;
        for &c in &cfg.conv_channels {
            io_util::write_u32(w, c as u32)?;
        }
        io_util::write_u32(w, cfg.fc1_units as u32)?;
        io_util::write_u32(w, cfg.latent as u32)?;
        io_util::write_u32(w, cfg.n_vertices as u32)?;

        io_util::write_u32(w, subjects.len() as u32)?;
        for s in subjects {
            io_util::write_str(w, s)?;
        }

        io_util::write_u32(w, tensors.len() as u32)?;
        let mut offset = 0u64;
        for (name, shape, data) in &tensors {
            io_util::write_str(w, name)?;
            io_util::write_u32(w, shape.len() as u32)?;
            for &d in shape {
                io_util::write_u32(w, d as u32)?;
            }
            w.write_all(&offset.to_le_bytes())?;
            offset += data.len() as u64;
        }
        w.write_all(&offset.to_le_bytes())?;
        for (_, _, data) in &tensors {
            io_util::write_f32_slice(w, data)?;
        }
        Ok(())
    })
}

/// Read a "VCKP" checkpoint back.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(NetworkParams<S>, PCABasis<S>, Vec<String>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    io_util::expect_magic(&mut r, CKPT_MAGIC, "checkpoint container")?;
    let version = io_util::read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(VocaError::Format(format!("unsupported checkpoint version {}", version)));
    }
    let window = io_util::read_u32(&mut r)? as usize;
    let feature_dim = io_util::read_u32(&mut r)? as usize;
    let n_subjects = io_util::read_u32(&mut r)? as usize;
    let depth = io_util::read_u32(&mut r)? as usize;
    if depth > 64 {
        return Err(VocaError::Format(format!("implausible conv depth {}", depth)));
    }
    let mut conv_channels = Vec::with_capacity(depth);
    for _ in 0..depth {
        conv_channels.push(io_util::read_u32(&mut r)? as usize);
    }
    let fc1_units = io_util::read_u32(&mut r)? as usize;
    let latent = io_util::read_u32(&mut r)? as usize;
    let n_vertices = io_util::read_u32(&mut r)? as usize;
    let config = NetConfig {
        window,
        feature_dim,
        n_subjects,
        conv_channels,
        fc1_units,
        latent,
        n_vertices,
    };
    config.validate()?;

    let n_subject_ids = io_util::read_u32(&mut r)? as usize;
    if n_subject_ids > 1 << 20 {
        return Err(VocaError::Format("implausible subject table".into()));
    }
    let mut subjects = Vec::with_capacity(n_subject_ids);
    for _ in 0..n_subject_ids {
        subjects.push(io_util::read_str(&mut r)?);
    }

    let n_tensors = io_util::read_u32(&mut r)? as usize;
    if n_tensors > 1 << 16 {
        return Err(VocaError::Format("implausible tensor count".into()));
    }
    let mut manifest = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = io_util::read_str(&mut r)?;
        let rank = io_util::read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(VocaError::Format(format!("tensor {} has implausible rank {}", name, rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(io_util::read_u32(&mut r)? as usize);
        }
        let mut off = [0u8; 8];
        r.read_exact(&mut off)?;
        manifest.push((name, shape, u64::from_le_bytes(off)));
    }
    let mut total = [0u8; 8];
    r.read_exact(&mut total)?;
    let total = u64::from_le_bytes(total) as usize;
    let payload = io_util::read_f32_vec(&mut r, total)
        .map_err(|_| VocaError::Format("checkpoint payload is truncated".into()))?;

    let fetch = |name: &str, shape: &[usize]| -> Result<Vec<S>> {
        let (_, stored_shape, offset) = manifest
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| VocaError::Format(format!("checkpoint is missing tensor {}", name)))?;
        if stored_shape != shape {
            return Err(VocaError::Format(format!(
                "tensor {} has shape {:?}, expected {:?}",
                name, stored_shape, shape
            )));
        }
        let len: usize = shape.iter().product();
        let start = *offset as usize;
        if start + len > payload.len() {
            return Err(VocaError::Format(format!("tensor {} overruns the payload", name)));
        }
        Ok(payload[start..start + len].iter().map(|&v| sc(v as f64)).collect())
    };
    let fetch_mat = |name: &str, rows: usize, cols: usize| -> Result<Mat<S>> {
        Mat::from_vec(rows, cols, fetch(name, &[rows, cols])?)
    };

    let chain = config.channel_chain();
    let mut conv = Vec::with_capacity(depth);
    for l in 0..depth {
        let (c_in, c_out) = (chain[l], chain[l + 1]);
        conv.push(ConvLayer {
            kernel: fetch_mat(&format!("conv{}.kernel", l), c_out, 3 * c_in)?,
            bias: fetch(&format!("conv{}.bias", l), &[c_out])?,
            bn: BatchNorm {
                gamma: fetch(&format!("conv{}.bn_gamma", l), &[c_out])?,
                beta: fetch(&format!("conv{}.bn_beta", l), &[c_out])?,
                running_mean: fetch(&format!("conv{}.bn_running_mean", l), &[c_out])?,
                running_var: fetch(&format!("conv{}.bn_running_var", l), &[c_out])?,
            },
        });
    }
    let params = NetworkParams {
        conv,
        fc1: Dense {
            weights: fetch_mat("fc1.weight", config.fc1_units, config.fc1_in())?,
            bias: fetch("fc1.bias", &[config.fc1_units])?,
        },
        fc2: Dense {
            weights: fetch_mat("fc2.weight", config.latent, config.fc1_units)?,
            bias: fetch("fc2.bias", &[config.latent])?,
        },
        decoder: Decoder {
            weights: fetch_mat("decoder.weight", config.latent, config.out_dim())?,
            bias: fetch("decoder.bias", &[config.out_dim()])?,
        },
        config: config.clone(),
    };
    let pca = PCABasis {
        components: fetch_mat("pca.components", config.latent, config.out_dim())?,
        singular_values: fetch("pca.singular_values", &[config.latent])?,
        mean: fetch("pca.mean", &[config.out_dim()])?,
    };
    Ok((params, pca, subjects))
}
