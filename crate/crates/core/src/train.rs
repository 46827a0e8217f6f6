//! Gradient training of the regressor with a position plus velocity loss.
//!
//! Each optimization step runs two forward passes: one over the batch and one
//! over the predecessor windows of every sample that has one, so the velocity
//! term compares prediction differences against target differences frame by
//! frame. Velocity pairs never cross sequence boundaries. Losses and Adam
//! moments accumulate in f64 regardless of the parameter scalar.

use crate::data::{subject_table, Dataset, DatasetSplit};
use crate::error::{Result, VocaError};
use crate::mat::Mat;
use crate::net::{
    backward_batch, compute_pca, decode_batch, encode_batch, init_params, Condition, Mode,
    NetConfig, NetworkParams, PCABasis,
};
use crate::scalar::{sc, Scalar};

/// Momentum for the running batch-norm statistics: after each step,
/// running = (1 - momentum) * running + momentum * batch.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub position_weight: f64,
    pub velocity_weight: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 1e-4,
            batch_size: 64,
            position_weight: 1.0,
            velocity_weight: 10.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(VocaError::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(VocaError::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(self.position_weight >= 0.0) || !(self.velocity_weight >= 0.0) {
            return Err(VocaError::Config("loss weights must be non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(VocaError::Config(format!("{} must be in [0, 1), got {}", name, b)));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(VocaError::Config(format!("bad adam epsilon {}", self.adam_eps)));
        }
        Ok(())
    }
}

/// One training frame: its window and target displacement, plus the
/// predecessor pair when the frame is not sequence-initial.
#[derive(Debug, Clone)]
pub struct TrainSample<S> {
    pub window: Mat<S>,
    pub prev_window: Option<Mat<S>>,
    pub cond: Condition<S>,
    /// N×3 displacement from the subject template.
    pub target: Mat<S>,
    pub prev_target: Option<Mat<S>>,
    pub sequence: usize,
    pub frame: usize,
}

impl<S: Scalar> TrainSample<S> {
    pub fn new(
        window: Mat<S>,
        prev_window: Option<Mat<S>>,
        cond: Condition<S>,
        target: Mat<S>,
        prev_target: Option<Mat<S>>,
        sequence: usize,
        frame: usize,
    ) -> Result<Self> {
        let has_prev = frame > 0;
        if prev_window.is_some() != has_prev || prev_target.is_some() != has_prev {
            return Err(VocaError::Data(format!(
                "frame {} of sequence {} must carry a predecessor iff it is not first",
                frame, sequence
            )));
        }
        if target.cols() != 3 {
            return Err(VocaError::Data("targets must be N×3 displacements".into()));
        }
        if let Some(pw) = &prev_window {
            if pw.rows() != window.rows() || pw.cols() != window.cols() {
                return Err(VocaError::Data("predecessor window shape differs".into()));
            }
        }
        if let Some(pt) = &prev_target {
            if pt.rows() != target.rows() || pt.cols() != 3 {
                return Err(VocaError::Data("predecessor target shape differs".into()));
            }
        }
        Ok(TrainSample { window, prev_window, cond, target, prev_target, sequence, frame })
    }

    pub fn has_prev(&self) -> bool {
        self.prev_window.is_some()
    }
}

/// Per-frame samples for the given sequences, conditioned one-hot by position
/// in the (sorted) subject table.
pub fn assemble_samples<S: Scalar>(
    dataset: &Dataset<S>,
    indices: &[usize],
    subjects: &[String],
) -> Result<Vec<TrainSample<S>>> {
    let mut samples = Vec::new();
    for &si in indices {
        let seq = &dataset.sequences[si];
        let subject_idx = subjects
            .iter()
            .position(|s| *s == seq.subject)
            .ok_or_else(|| VocaError::Data(format!("subject {} not in the subject table", seq.subject)))?;
        let cond = Condition::one_hot(subject_idx, subjects.len())?;
        push_sequence_samples(dataset, si, cond, &mut samples)?;
    }
    Ok(samples)
}

/// Samples with a uniform condition over all training subjects, for
/// evaluating splits whose subjects the network was never conditioned on.
pub fn assemble_eval_samples<S: Scalar>(
    dataset: &Dataset<S>,
    indices: &[usize],
    n_subjects: usize,
) -> Result<Vec<TrainSample<S>>> {
    let w = sc::<S>(1.0 / n_subjects as f64);
    let cond = Condition::new(vec![w; n_subjects])?;
    let mut samples = Vec::new();
    for &si in indices {
        push_sequence_samples(dataset, si, cond.clone(), &mut samples)?;
    }
    Ok(samples)
}

fn push_sequence_samples<S: Scalar>(
    dataset: &Dataset<S>,
    si: usize,
    cond: Condition<S>,
    out: &mut Vec<TrainSample<S>>,
) -> Result<()> {
    let seq = &dataset.sequences[si];
    let mut prev: Option<(Mat<S>, Mat<S>)> = None;
    for f in 0..seq.n_frames() {
        let window = seq.windows.window(f).clone();
        let target = dataset.displacement(si, f)?;
        let (prev_window, prev_target) = match &prev {
            Some((w, t)) => (Some(w.clone()), Some(t.clone())),
            None => (None, None),
        };
        out.push(TrainSample::new(
            window.clone(),
            prev_window,
            cond.clone(),
            target.clone(),
            prev_target,
            si,
            f,
        )?);
        prev = Some((window, target));
    }
    Ok(())
}

/// Squared Frobenius norm of pred − target.
pub fn loss_position<S: Scalar>(pred: &Mat<S>, target: &Mat<S>) -> Result<f64> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() {
        return Err(VocaError::Parameter(format!(
            "position loss shapes {}x{} vs {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let mut acc = 0.0f64;
    for (p, t) in pred.as_slice().iter().zip(target.as_slice()) {
        let d = p.to_f64_c() - t.to_f64_c();
        acc += d * d;
    }
    Ok(acc)
}

/// Squared Frobenius norm of the backward-difference mismatch:
/// ‖(target_t − target_prev) − (pred_t − pred_prev)‖².
pub fn loss_velocity<S: Scalar>(
    pred_t: &Mat<S>,
    pred_prev: &Mat<S>,
    target_t: &Mat<S>,
    target_prev: &Mat<S>,
) -> Result<f64> {
    for m in [pred_prev, target_t, target_prev] {
        if m.rows() != pred_t.rows() || m.cols() != pred_t.cols() {
            return Err(VocaError::Parameter("velocity loss needs four equal shapes".into()));
        }
    }
    let mut acc = 0.0f64;
    for i in 0..pred_t.as_slice().len() {
        let dv = (target_t.as_slice()[i].to_f64_c() - target_prev.as_slice()[i].to_f64_c())
            - (pred_t.as_slice()[i].to_f64_c() - pred_prev.as_slice()[i].to_f64_c());
        acc += dv * dv;
    }
    Ok(acc)
}

struct BatchForward<S> {
    out_a: Mat<S>,
    cache_a: crate::net::ForwardCache<S>,
    /// Positions in the batch that have a predecessor, in batch order.
    eligible: Vec<usize>,
    out_b: Option<Mat<S>>,
    cache_b: Option<crate::net::ForwardCache<S>>,
}

fn batch_forward<S: Scalar>(
    params: &NetworkParams<S>,
    batch: &[&TrainSample<S>],
    mode: Mode,
) -> Result<BatchForward<S>> {
    if batch.is_empty() {
        return Err(VocaError::EmptyInput("empty batch".into()));
    }
    let windows: Vec<Mat<S>> = batch.iter().map(|s| s.window.clone()).collect();
    let conds: Vec<Condition<S>> = batch.iter().map(|s| s.cond.clone()).collect();
    let (enc, cache_a) = encode_batch(params, &windows, &conds, mode)?;
    let out_a = decode_batch(params, &enc)?;

    let eligible: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].has_prev()).collect();
    let (out_b, cache_b) = if eligible.is_empty() {
        (None, None)
    } else {
        let prev_windows: Vec<Mat<S>> =
            eligible.iter().map(|&i| batch[i].prev_window.clone().unwrap()).collect();
        let prev_conds: Vec<Condition<S>> = eligible.iter().map(|&i| batch[i].cond.clone()).collect();
        let (enc_b, cache_b) = encode_batch(params, &prev_windows, &prev_conds, mode)?;
        (Some(decode_batch(params, &enc_b)?), Some(cache_b))
    };
    Ok(BatchForward { out_a, cache_a, eligible, out_b, cache_b })
}

fn batch_loss_terms<S: Scalar>(fwd: &BatchForward<S>, batch: &[&TrainSample<S>]) -> (f64, f64, usize) {
    let b = batch.len();
    let mut sum_p = 0.0f64;
    for (i, sample) in batch.iter().enumerate() {
        for (c, t) in fwd.out_a.row(i).iter().zip(sample.target.as_slice()) {
            let d = c.to_f64_c() - t.to_f64_c();
            sum_p += d * d;
        }
    }
    let mut sum_v = 0.0f64;
    if let Some(out_b) = &fwd.out_b {
        for (j, &i) in fwd.eligible.iter().enumerate() {
            let sample = batch[i];
            let prev_target = sample.prev_target.as_ref().unwrap();
            for k in 0..fwd.out_a.cols() {
                let dv = (sample.target.as_slice()[k].to_f64_c()
                    - prev_target.as_slice()[k].to_f64_c())
                    - (fwd.out_a[(i, k)].to_f64_c() - out_b[(j, k)].to_f64_c());
                sum_v += dv * dv;
            }
        }
    }
    (sum_p / b as f64, sum_v, fwd.eligible.len())
}

/// Weighted batch loss: position_weight · mean E_p + velocity_weight ·
/// mean E_v over the samples with a predecessor (zero when none have one).
/// The whole slice is treated as one batch.
pub fn total_loss<S: Scalar>(
    params: &NetworkParams<S>,
    batch: &[&TrainSample<S>],
    position_weight: f64,
    velocity_weight: f64,
    mode: Mode,
) -> Result<f64> {
    let fwd = batch_forward(params, batch, mode)?;
    let (mean_p, sum_v, n_v) = batch_loss_terms(&fwd, batch);
    let mean_v = if n_v == 0 { 0.0 } else { sum_v / n_v as f64 };
    Ok(position_weight * mean_p + velocity_weight * mean_v)
}

/// One step's products: accumulated gradients, the batch loss, and the
/// batch-norm statistics of the primary pass for running-average updates.
pub struct StepOutput<S> {
    pub grads: NetworkParams<S>,
    pub loss: f64,
    pub bn_mean: Vec<Vec<S>>,
    pub bn_var: Vec<Vec<S>>,
}

/// Analytic gradient of the weighted loss over one batch, differentiating
/// through both forward passes and the train-mode batch statistics.
pub fn gradients<S: Scalar>(
    params: &NetworkParams<S>,
    batch: &[&TrainSample<S>],
    cfg: &TrainConfig,
) -> Result<StepOutput<S>> {
    let fwd = batch_forward(params, batch, Mode::Train)?;
    let (mean_p, sum_v, n_v) = batch_loss_terms(&fwd, batch);
    let mean_v = if n_v == 0 { 0.0 } else { sum_v / n_v as f64 };
    let loss = cfg.position_weight * mean_p + cfg.velocity_weight * mean_v;
    if !loss.is_finite() {
        return Err(VocaError::Numeric("non-finite training loss".into()));
    }

    let b = batch.len();
    let out_dim = fwd.out_a.cols();
    let wp = 2.0 * cfg.position_weight / b as f64;
    let wv = if n_v == 0 { 0.0 } else { 2.0 * cfg.velocity_weight / n_v as f64 };

    let mut dout_a = Mat::<S>::zeros(b, out_dim);
    for (i, sample) in batch.iter().enumerate() {
        for k in 0..out_dim {
            let d = fwd.out_a[(i, k)].to_f64_c() - sample.target.as_slice()[k].to_f64_c();
            dout_a[(i, k)] = sc(wp * d);
        }
    }
    let mut dout_b = fwd.out_b.as_ref().map(|out_b| Mat::<S>::zeros(out_b.rows(), out_dim));
    if let (Some(out_b), Some(dout_b)) = (&fwd.out_b, &mut dout_b) {
        for (j, &i) in fwd.eligible.iter().enumerate() {
            let sample = batch[i];
            let prev_target = sample.prev_target.as_ref().unwrap();
            for k in 0..out_dim {
                let vdiff = (fwd.out_a[(i, k)].to_f64_c() - out_b[(j, k)].to_f64_c())
                    - (sample.target.as_slice()[k].to_f64_c()
                        - prev_target.as_slice()[k].to_f64_c());
                dout_a[(i, k)] = dout_a[(i, k)] + sc(wv * vdiff);
                dout_b[(j, k)] = sc(-wv * vdiff);
            }
        }
    }

    let mut grads = params.zeros_like();
    backward_batch(params, &fwd.cache_a, &dout_a, &mut grads)?;
    if let (Some(cache_b), Some(dout_b)) = (&fwd.cache_b, &dout_b) {
        backward_batch(params, cache_b, dout_b, &mut grads)?;
    }
    for (name, tensor) in grads.trainable() {
        if tensor.iter().any(|v| !v.to_f64_c().is_finite()) {
            return Err(VocaError::Numeric(format!("non-finite gradient in {}", name)));
        }
    }
    Ok(StepOutput {
        grads,
        loss,
        bn_mean: fwd.cache_a.bn_mean.clone(),
        bn_var: fwd.cache_a.bn_var.clone(),
    })
}

/// Adam first and second moments, kept in f64.
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<S: Scalar>(params: &NetworkParams<S>) -> Self {
        let sizes: Vec<usize> = params.trainable().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Standard bias-corrected Adam update.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut NetworkParams<S>,
        grads: &NetworkParams<S>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let gts = grads.trainable();
        let mut pts = params.trainable_mut();
        if gts.len() != pts.len() || gts.len() != self.m.len() {
            return Err(VocaError::Parameter("optimizer state does not match parameters".into()));
        }
        for (ti, (_, g)) in gts.iter().enumerate() {
            let p = &mut pts[ti].1;
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for i in 0..g.len() {
                let gi = g[i].to_f64_c();
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let update = cfg.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
                p[i] = sc(p[i].to_f64_c() - update);
            }
        }
        Ok(())
    }
}

/// Mean weighted loss over samples, evaluated with running statistics in
/// fixed-size chunks; chunking cannot change the result in infer mode.
pub fn evaluate_loss<S: Scalar>(
    params: &NetworkParams<S>,
    samples: &[TrainSample<S>],
    cfg: &TrainConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(VocaError::EmptyInput("nothing to evaluate".into()));
    }
    let mut sum_p = 0.0f64;
    let mut sum_v = 0.0f64;
    let mut n_v = 0usize;
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&TrainSample<S>> = chunk.iter().collect();
        let fwd = batch_forward(params, &refs, Mode::Infer)?;
        let (mean_p, sv, nv) = batch_loss_terms(&fwd, &refs);
        sum_p += mean_p * refs.len() as f64;
        sum_v += sv;
        n_v += nv;
    }
    let mean_p = sum_p / samples.len() as f64;
    let mean_v = if n_v == 0 { 0.0 } else { sum_v / n_v as f64 };
    Ok(cfg.position_weight * mean_p + cfg.velocity_weight * mean_v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct TrainResult<S> {
    /// Parameters at the best validation loss.
    pub best_params: NetworkParams<S>,
    /// Parameters after the final step.
    pub final_params: NetworkParams<S>,
    pub pca: PCABasis<S>,
    /// Training subjects in condition order.
    pub subjects: Vec<String>,
    pub history: Vec<EpochStats>,
    /// One "epoch,step,train_loss,val_loss" line per epoch.
    pub log: Vec<String>,
}

/// Train on the split's training sequences: PCA from training displacements
/// initializes the decoder, epochs shuffle deterministically from the seed,
/// and the best-validation parameters are retained. With an empty validation
/// split the training loss stands in for selection.
pub fn train<S: Scalar>(
    dataset: &Dataset<S>,
    split: &DatasetSplit,
    net_config: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainResult<S>> {
    use rand::seq::SliceRandom;
    cfg.validate()?;
    net_config.validate()?;
    if split.train.is_empty() {
        return Err(VocaError::Config("training split is empty".into()));
    }
    let subjects = subject_table(dataset, &split.train);
    if subjects.len() != net_config.n_subjects {
        return Err(VocaError::Config(format!(
            "config expects {} subjects, training split has {}",
            net_config.n_subjects,
            subjects.len()
        )));
    }
    for &si in &split.train {
        let seq = &dataset.sequences[si];
        if seq.windows.window_len() != net_config.window || seq.windows.dim() != net_config.feature_dim {
            return Err(VocaError::Config(format!(
                "sequence {}/{} windows are {}x{}, config needs {}x{}",
                seq.subject,
                seq.sentence,
                seq.windows.window_len(),
                seq.windows.dim(),
                net_config.window,
                net_config.feature_dim
            )));
        }
        if seq.meshes.n_vertices() != net_config.n_vertices {
            return Err(VocaError::Config(format!(
                "sequence {}/{} has {} vertices, config needs {}",
                seq.subject,
                seq.sentence,
                seq.meshes.n_vertices(),
                net_config.n_vertices
            )));
        }
    }

    let samples = assemble_samples(dataset, &split.train, &subjects)?;
    let disp = {
        let mut m = Mat::<S>::zeros(samples.len(), net_config.out_dim());
        for (i, s) in samples.iter().enumerate() {
            m.row_mut(i).copy_from_slice(s.target.as_slice());
        }
        m
    };
    let pca = compute_pca(&disp, net_config.latent)?;
    let mut params = init_params(net_config, &pca, cfg.seed)?;
    let val_samples = if split.val.is_empty() {
        Vec::new()
    } else {
        assemble_eval_samples(dataset, &split.val, subjects.len())?
    };

    let mut adam = AdamState::new(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, NetworkParams<S>)> = None;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = crate::rng::seeded_rng(cfg.seed, &format!("shuffle-epoch-{}", epoch));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample<S>> = chunk.iter().map(|&i| &samples[i]).collect();
            let step = gradients(&params, &batch, cfg)?;
            adam.step(&mut params, &step.grads, cfg)?;
            for (layer, (means, vars)) in
                params.conv.iter_mut().zip(step.bn_mean.iter().zip(step.bn_var.iter()))
            {
                for c in 0..layer.bn.running_mean.len() {
                    let rm = layer.bn.running_mean[c].to_f64_c();
                    let rv = layer.bn.running_var[c].to_f64_c();
                    layer.bn.running_mean[c] =
                        sc((1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * means[c].to_f64_c());
                    layer.bn.running_var[c] =
                        sc((1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * vars[c].to_f64_c());
                }
            }
            loss_sum += step.loss;
            batches += 1;
            global_step += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_loss = if val_samples.is_empty() {
            train_loss
        } else {
            evaluate_loss(&params, &val_samples, cfg)?
        };
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
        }
        history.push(EpochStats { epoch, step: global_step, train_loss, val_loss });
        log.push(format!("{},{},{:.12e},{:.12e}", epoch, global_step, train_loss, val_loss));
    }

    let best_params = best.map(|(_, p)| p).unwrap();
    Ok(TrainResult { best_params, final_params: params, pca, subjects, history, log })
}
