//! Optimization, the two-phase semi-supervised protocol, and metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyReport;
use crate::error::{Error, Result};
use crate::model::{Batch, BottleneckKind, CodebookMode, Mode, Model, TrainContext};
use crate::ops::loss::argmax_rows;
use crate::quantizer::{ema_update, utilization, Utilization};
use crate::rng::RngState;
use crate::tensor::{Parameter, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Real> AdamMoments<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` from its accumulated gradient.
pub fn adam_step<T: Real>(param: &mut Parameter<T>, state: &mut AdamMoments<T>, cfg: &AdamConfig) -> Result<()> {
    if param.frozen {
        return Ok(());
    }
    param.grad.ensure_same_shape(&state.m, "adam_step")?;
    if !param.grad.is_finite() {
        return Err(Error::NonFinite {
            op: "adam_step gradient",
        });
    }
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(state.t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let one = T::one();
    for (((w, &g), m), v) in param
        .value
        .data_mut()
        .iter_mut()
        .zip(param.grad.data())
        .zip(state.m.data_mut())
        .zip(state.v.data_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over named parameters. State is created lazily and never for
/// frozen parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub state: BTreeMap<String, AdamMoments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Updates every unfrozen parameter. All gradients are checked first so
    /// a non-finite one leaves every parameter untouched.
    pub fn step(&mut self, params: Vec<(String, &mut Parameter<T>)>) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, p)| !p.frozen && !p.grad.is_finite()) {
            log::error!("non-finite gradient in `{name}`; step aborted");
            return Err(Error::NonFinite { op: "adam gradient" });
        }
        for (name, p) in params {
            if p.frozen {
                continue;
            }
            let st = self.state.entry(name).or_insert_with(|| AdamMoments::new(p.shape()));
            adam_step(p, st, &self.cfg)?;
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut [&mut Tensor<T>], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("clip threshold must be > 0, got {threshold}")));
    }
    let norm = grads.iter().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt();
    if norm > threshold {
        let s = T::lit(threshold / norm);
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub dropconnect_rate: f64,
    pub clip_threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            dropconnect_rate: 0.1,
            clip_threshold: 1.0,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub epoch: usize,
    pub step: u64,
    pub total_loss: f64,
    pub reconstruction_loss: f64,
    pub vq_loss: f64,
    pub commitment_loss: f64,
    pub reconstruction_accuracy: f64,
    pub utilization: Vec<Utilization>,
}

/// Stateful pretraining loop over one model.
pub struct Pretrainer<T> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub cfg: TrainConfig,
    pub rng: RngState,
    /// Gate computed from the most recent step's assignments.
    pub gate: Option<EntropyReport>,
    pub step: u64,
    pub epoch: usize,
    /// Total loss of every step so far.
    pub step_losses: Vec<f64>,
    /// Codeword counts of the most recent step.
    pub last_counts: Vec<Vec<u64>>,
}

impl<T: Real> Pretrainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Self {
        Self {
            model,
            optimizer: Adam::new(cfg.adam),
            rng: RngState::new(cfg.seed).split(1),
            cfg,
            gate: None,
            step: 0,
            epoch: 0,
            step_losses: Vec::new(),
            last_counts: Vec::new(),
        }
    }

    /// One optimization step; returns the forward losses.
    pub fn train_step(&mut self, batch: &Batch) -> Result<crate::model::LossBreakdown> {
        let m = &mut self.model;
        m.zero_grad();
        let state = {
            let mut mode = Mode::Train(TrainContext {
                rng: &mut self.rng,
                dropconnect_rate: self.cfg.dropconnect_rate,
                gate: self.gate.as_ref(),
            });
            m.forward(batch, &mut mode)?
        };
        m.backward(&state)?;
        {
            let mut params = m.parameters_mut();
            let mut grads: Vec<&mut Tensor<T>> = params.iter_mut().map(|(_, p)| &mut p.grad).collect();
            clip_gradients(&mut grads, self.cfg.clip_threshold)?;
        }
        self.optimizer.step(m.parameters_mut())?;
        if m.config.codebook_mode == CodebookMode::Ema {
            if let (Some(cb), Some(q)) = (m.bottleneck.codebook_mut(), state.bottleneck.quantization()) {
                ema_update(cb, &state.z_e_valid, &q.indices)?;
            }
        }
        if m.config.bottleneck == BottleneckKind::Dvq && state.loss.tokens > 0 {
            self.gate = Some(EntropyReport::from_counts(&state.bottleneck.counts)?);
        }
        self.step += 1;
        self.step_losses.push(state.loss.total);
        self.last_counts = state.bottleneck.counts;
        Ok(state.loss)
    }

    /// One pass over `data` in a seeded shuffled order.
    pub fn pretrain_epoch(&mut self, data: &[Vec<usize>]) -> Result<PretrainMetrics> {
        if data.is_empty() {
            return Err(Error::Empty("pretraining data".into()));
        }
        if self.cfg.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let max_len = self.model.config.encoder.max_len;
        let mut acc = LossAccumulator::default();
        let mut counts = CountAccumulator::default();
        for chunk in order.chunks(self.cfg.batch_size) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let batch = Batch::from_sequences(&seqs, max_len, None)?;
            let loss = self.train_step(&batch)?;
            acc.add(&loss);
            counts.add(&self.last_counts);
        }
        self.epoch += 1;
        let mut metrics = acc.finish(self.epoch, self.step);
        metrics.utilization = counts.utilization()?;
        Ok(metrics)
    }
}

#[derive(Default)]
struct LossAccumulator {
    total: f64,
    recon: f64,
    vq: f64,
    commit: f64,
    correct: usize,
    tokens: usize,
}

impl LossAccumulator {
    fn add(&mut self, l: &crate::model::LossBreakdown) {
        let w = l.tokens as f64;
        self.total += l.total * w;
        self.recon += l.reconstruction * w;
        self.vq += l.vq * w;
        self.commit += l.commitment * w;
        self.correct += l.correct;
        self.tokens += l.tokens;
    }

    fn finish(&self, epoch: usize, step: u64) -> PretrainMetrics {
        let n = self.tokens.max(1) as f64;
        PretrainMetrics {
            epoch,
            step,
            total_loss: self.total / n,
            reconstruction_loss: self.recon / n,
            vq_loss: self.vq / n,
            commitment_loss: self.commit / n,
            reconstruction_accuracy: self.correct as f64 / n,
            utilization: Vec::new(),
        }
    }
}

#[derive(Default)]
struct CountAccumulator(Vec<Vec<u64>>);

impl CountAccumulator {
    fn add(&mut self, c: &[Vec<u64>]) {
        if self.0.is_empty() {
            self.0 = c.to_vec();
        } else {
            for (a, b) in self.0.iter_mut().zip(c) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }

    fn utilization(&self) -> Result<Vec<Utilization>> {
        if self.0.iter().all(|c| c.iter().all(|&x| x == 0)) {
            return Ok(Vec::new());
        }
        utilization(&self.0)
    }
}

/// Eval-mode losses, token accuracy and codeword utilization over `data`.
pub fn evaluate_reconstruction<T: Real>(
    model: &Model<T>,
    data: &[Vec<usize>],
    batch_size: usize,
) -> Result<PretrainMetrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data".into()));
    }
    let max_len = model.config.encoder.max_len;
    let mut acc = LossAccumulator::default();
    let mut counts = CountAccumulator::default();
    for chunk in data.chunks(batch_size.max(1)) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|s| s.as_slice()).collect();
        let batch = Batch::from_sequences(&seqs, max_len, None)?;
        if batch.mask.iter().all(|&m| !m) {
            continue;
        }
        let state = model.forward(&batch, &mut Mode::Eval)?;
        acc.add(&state.loss);
        counts.add(&state.bottleneck.counts);
    }
    let mut m = acc.finish(0, 0);
    m.utilization = counts.utilization()?;
    Ok(m)
}

/// Summed perplexity over all sub-codebooks.
pub fn summed_perplexity(u: &[Utilization]) -> f64 {
    u.iter().map(|x| x.perplexity).sum()
}

/// Class-stratified sample of `ceil(fraction · N_c)` indices per class,
/// returned in ascending order.
pub fn subsample_labeled(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "labeled fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or(Error::IndexOutOfRange {
                index: l,
                size: num_classes,
            })?
            .push(i);
    }
    let mut rng = RngState::new(seed).split(2);
    let mut out = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Empty(format!("class {c} has no examples")));
        }
        let take = ((fraction * members.len() as f64).ceil() as usize).min(members.len());
        rng.shuffle(&mut members);
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Accuracy and micro-averaged precision/recall/F1 from pooled counts.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<ClassificationMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("compute_metrics", labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("metrics over no examples".into()));
    }
    let (mut tp, mut fp, mut fneg) = (
        vec![0u64; num_classes],
        vec![0u64; num_classes],
        vec![0u64; num_classes],
    );
    for (&p, &l) in predictions.iter().zip(labels) {
        for x in [p, l] {
            if x >= num_classes {
                return Err(Error::IndexOutOfRange {
                    index: x,
                    size: num_classes,
                });
            }
        }
        if p == l {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let (tp, fp, fneg) = (
        tp.iter().sum::<u64>() as f64,
        fp.iter().sum::<u64>() as f64,
        fneg.iter().sum::<u64>() as f64,
    );
    let ratio = |a: f64, b: f64| if a + b > 0.0 { a / (a + b) } else { 0.0 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassificationMetrics {
        accuracy: tp / labels.len() as f64,
        precision,
        recall,
        f1,
        support: labels.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            epochs: 100,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Pooled eval-mode features `[N × D]` for every sequence in `data`.
pub fn pooled_features<T: Real>(model: &Model<T>, data: &[Vec<usize>], batch_size: usize) -> Result<Tensor<T>> {
    if data.is_empty() {
        return Err(Error::Empty("feature data".into()));
    }
    let d = model.d_model();
    let max_len = model.config.encoder.max_len;
    let mut out = Vec::with_capacity(data.len() * d);
    for chunk in data.chunks(batch_size.max(1)) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|s| s.as_slice()).collect();
        let batch = Batch::from_sequences(&seqs, max_len, None)?;
        out.extend_from_slice(model.pooled_features(&batch)?.data());
    }
    Tensor::new(&[data.len(), d], out)
}

/// Trains a freshly initialized classifier head on precomputed features with
/// the encoder and bottleneck frozen. Returns the mean loss of each epoch.
pub fn train_classifier<T: Real>(
    model: &mut Model<T>,
    features: &Tensor<T>,
    labels: &[usize],
    num_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<Vec<f64>> {
    let (n, _) = features.dims2()?;
    if n != labels.len() {
        return Err(Error::shape("train_classifier labels", n, labels.len()));
    }
    if n == 0 || cfg.batch_size == 0 {
        return Err(Error::Empty("classifier training data".into()));
    }
    let mut rng = RngState::new(cfg.seed).split(3);
    model.attach_classifier(num_classes, &mut rng);
    model.freeze_encoder();
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = features.gather_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            model.zero_grad();
            let loss = model.classifier_loss_backward(&x, &y)?;
            total += loss.as_f64() * chunk.len() as f64;
            let head: Vec<_> = model
                .parameters_mut()
                .into_iter()
                .filter(|(name, _)| name.starts_with("classifier."))
                .collect();
            adam.step(head)?;
        }
        losses.push(total / n as f64);
    }
    Ok(losses)
}

/// Argmax class for each feature row.
pub fn predict<T: Real>(model: &Model<T>, features: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.classify_features(features)?))
}
