//! Training loop: BCE with Adam under a cosine schedule, balanced
//! oversampling of positives, and a near → mid → far curriculum.

use kws_tensor::{Real, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::centroid::{centroid_sgd_step, CentroidCoupling, KeywordCentroids, V0_NAME, V1_NAME};
use crate::checkpoint::Checkpoint;
use crate::dsp::{FBankFeature, SpecAugmentMask, LOG_FLOOR};
use crate::error::{KwsError, Result};
use crate::eval::{evaluate, EvalReport, DEFAULT_THRESHOLD};
use crate::manifest::FieldTag;
use crate::model::{Model, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    s: &mut AdamState<F>,
    lr: F,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != s.m.len() {
        return Err(KwsError::contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            s.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&s.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(KwsError::contract(format!(
                "parameter shape {:?} does not match gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    s.t += 1;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let eps = F::lit(cfg.eps);
    let one = F::one();
    let c1 = one - b1.powi(s.t as i32);
    let c2 = one - b2.powi(s.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut s.m).zip(&mut s.v) {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`, clamped to `lr_min`
/// past the end.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let x = step as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Mean binary cross-entropy of positive-class probabilities, clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(p: &[f64], labels: &[u8]) -> f64 {
    const EPS: f64 = 1e-7;
    let n = p.len().max(1) as f64;
    p.iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// One epoch's sample order. Every negative appears once; positives are
/// cycled until they make up `target` of the epoch (never fewer than all of
/// them once). Positive slots are spread evenly so every batch gets its share,
/// and each batch is shuffled internally.
pub fn oversample<R: Rng + ?Sized>(labels: &[u8], target: f64, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&target) || target <= 0.0 {
        return Err(KwsError::config(format!("oversample target {target} must lie in (0, 1)")));
    }
    if batch_size == 0 {
        return Err(KwsError::config("batch size must be at least 1"));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(KwsError::config(format!(
            "oversampling needs both classes, got {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let wanted = (target * neg.len() as f64 / (1.0 - target)).round() as usize;
    let k = wanted.max(pos.len());
    let mut pos_draws = Vec::with_capacity(k);
    while pos_draws.len() < k {
        let mut round = pos.clone();
        round.shuffle(rng);
        let take = (k - pos_draws.len()).min(round.len());
        pos_draws.extend_from_slice(&round[..take]);
    }
    let n = k + neg.len();
    let (mut pi, mut ni) = (0, 0);
    let mut seq = Vec::with_capacity(n);
    for i in 0..n {
        let is_pos = (i + 1) * k / n > i * k / n;
        if is_pos {
            seq.push(pos_draws[pi]);
            pi += 1;
        } else {
            seq.push(neg[ni]);
            ni += 1;
        }
    }
    for chunk in seq.chunks_mut(batch_size) {
        chunk.shuffle(rng);
    }
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub field: FieldTag,
    pub epochs: usize,
}

/// What to do with phase data whose channel count differs from the model's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelAdapt {
    /// Channel `c` reads source channel `c mod n`.
    #[default]
    Replicate,
    /// Drop phases whose data does not already match.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Largest time shift in feature frames, applied identically to all channels.
    pub max_shift_frames: usize,
    pub spec_augment: bool,
    pub freq_param: usize,
    pub time_param: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift_frames: 10,
            spec_augment: true,
            freq_param: 25,
            time_param: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub oversample_target: f64,
    pub phases: Vec<PhaseSpec>,
    /// Restart the cosine schedule at each phase instead of spanning all of them.
    pub restart_per_phase: bool,
    pub channel_adapt: ChannelAdapt,
    pub centroid_lr: f64,
    pub centroid_coupling: CentroidCoupling,
    pub augment: AugmentConfig,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr0: 6e-4,
            lr_min: 1e-12,
            adam: AdamConfig::default(),
            oversample_target: 0.5,
            phases: vec![
                PhaseSpec {
                    field: FieldTag::Near,
                    epochs: 10,
                },
                PhaseSpec {
                    field: FieldTag::Mid,
                    epochs: 10,
                },
                PhaseSpec {
                    field: FieldTag::Far,
                    epochs: 30,
                },
            ],
            restart_per_phase: false,
            channel_adapt: ChannelAdapt::Replicate,
            centroid_lr: 0.01,
            centroid_coupling: CentroidCoupling::Detached,
            augment: AugmentConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(KwsError::config("trainer.batch_size must be at least 1"));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr0) {
            return Err(KwsError::config("trainer needs 0 < lr_min < lr0"));
        }
        if self.phases.is_empty() {
            return Err(KwsError::config("trainer.phases is empty"));
        }
        if !(self.oversample_target > 0.0 && self.oversample_target < 1.0) {
            return Err(KwsError::config("trainer.oversample_target must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(KwsError::config("trainer.threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A cached feature cube with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub feature: FBankFeature,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseData {
    pub field: FieldTag,
    pub examples: Vec<Example>,
}

/// Shifts frames by `shift` (positive delays), filling vacated frames with
/// the log floor, i.e. the features of digital silence.
pub fn shift_frames(f: &FBankFeature, shift: i64) -> FBankFeature {
    let mut out = f.clone();
    for c in 0..f.channels {
        for t in 0..f.frames {
            let src = t as i64 - shift;
            let row = &mut out.data[(c * f.frames + t) * f.mels..][..f.mels];
            if (0..f.frames as i64).contains(&src) {
                row.copy_from_slice(&f.data[(c * f.frames + src as usize) * f.mels..][..f.mels]);
            } else {
                row.fill(LOG_FLOOR);
            }
        }
    }
    out
}

/// Maps `f` onto `channels` channels: channel `c` reads source `c mod n`.
pub fn adapt_channels(f: &FBankFeature, channels: usize) -> Result<FBankFeature> {
    if f.channels == channels {
        return Ok(f.clone());
    }
    let map: Vec<usize> = (0..channels).map(|c| c % f.channels).collect();
    f.remap_channels(&map)
}

fn augment(f: &FBankFeature, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<FBankFeature> {
    let max = cfg.max_shift_frames as i64;
    let shift = rng.random_range(-max..=max);
    let out = if shift == 0 { f.clone() } else { shift_frames(f, shift) };
    if cfg.spec_augment {
        let mask = SpecAugmentMask::draw(f.mels, f.frames, cfg.freq_param, cfg.time_param, rng)?;
        Ok(mask.apply(&out))
    } else {
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PlannedPhase {
    spec_index: usize,
    data_index: usize,
    epochs: usize,
    batches: usize,
    start: u64,
}

impl PlannedPhase {
    fn steps(&self) -> u64 {
        (self.epochs * self.batches) as u64
    }
}

/// Where a global step falls in the curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cursor {
    pub phase: usize,
    pub epoch: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: FieldTag,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: u64,
    pub phase: FieldTag,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub dev: Option<EvalReport>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrainEvent {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub score: f64,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunEnd {
    Finished,
    Paused,
}

/// Complete training state; checkpointing it and resuming continues the
/// run bitwise.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub centroids: Option<KeywordCentroids<f32>>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub best: Option<Best>,
    /// Running loss sum and count over the current epoch.
    epoch_loss: (f64, u64),
    cfg: TrainerConfig,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            model,
            centroids: None,
            adam,
            step: 0,
            best: None,
            epoch_loss: (0.0, 0),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    fn plan(&self, data: &[PhaseData]) -> Result<Vec<PlannedPhase>> {
        let mut plan = Vec::new();
        let mut start = 0u64;
        let channels = self.model.config().channels;
        for (spec_index, spec) in self.cfg.phases.iter().enumerate() {
            let data_index = data
                .iter()
                .position(|d| d.field == spec.field)
                .ok_or_else(|| KwsError::config(format!("no training data for phase {}", spec.field.as_str())))?;
            let d = &data[data_index];
            if d.examples.is_empty() {
                return Err(KwsError::config(format!("phase {} has no examples", spec.field.as_str())));
            }
            let data_channels = d.examples[0].feature.channels;
            if d.examples.iter().any(|e| e.feature.channels != data_channels) {
                return Err(KwsError::contract(format!(
                    "phase {} mixes channel counts",
                    spec.field.as_str()
                )));
            }
            if data_channels != channels && self.cfg.channel_adapt == ChannelAdapt::Skip {
                continue;
            }
            let labels: Vec<u8> = d.examples.iter().map(|e| e.label).collect();
            let mut probe = ChaCha8Rng::seed_from_u64(0);
            let len = oversample(&labels, self.cfg.oversample_target, self.cfg.batch_size, &mut probe)?.len();
            let batches = len.div_ceil(self.cfg.batch_size);
            let p = PlannedPhase {
                spec_index,
                data_index,
                epochs: spec.epochs,
                batches,
                start,
            };
            start += p.steps();
            plan.push(p);
        }
        if plan.is_empty() {
            return Err(KwsError::config("every curriculum phase was skipped"));
        }
        Ok(plan)
    }

    /// Total optimizer steps of the configured curriculum on `data`.
    pub fn total_steps(&self, data: &[PhaseData]) -> Result<u64> {
        Ok(self.plan(data)?.iter().map(PlannedPhase::steps).sum())
    }

    fn cursor(plan: &[PlannedPhase], step: u64) -> Option<Cursor> {
        plan.iter().enumerate().find_map(|(i, p)| {
            if step >= p.start && step < p.start + p.steps() {
                let off = (step - p.start) as usize;
                Some(Cursor {
                    phase: i,
                    epoch: off / p.batches,
                    batch: off % p.batches,
                })
            } else {
                None
            }
        })
    }

    fn lr_at(&self, plan: &[PlannedPhase], step: u64) -> f64 {
        let (s, total) = if self.cfg.restart_per_phase {
            match Self::cursor(plan, step) {
                Some(c) => (step - plan[c.phase].start, plan[c.phase].steps()),
                None => (1, 0),
            }
        } else {
            (step, plan.iter().map(PlannedPhase::steps).sum())
        };
        cosine_lr(s, total, self.cfg.lr0, self.cfg.lr_min)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream);
        rng
    }

    fn epoch_order(&self, plan: &[PlannedPhase], data: &[PhaseData], c: Cursor) -> Result<Vec<usize>> {
        let p = &plan[c.phase];
        let labels: Vec<u8> = data[p.data_index].examples.iter().map(|e| e.label).collect();
        let mut rng = self.rng((1 << 63) | ((p.spec_index as u64) << 32) | c.epoch as u64);
        oversample(&labels, self.cfg.oversample_target, self.cfg.batch_size, &mut rng)
    }

    /// Runs the curriculum from the current step until it ends or `pause_at`
    /// steps have completed. `on_event` sees every step and epoch record.
    pub fn run(
        &mut self,
        data: &[PhaseData],
        dev: Option<&[Example]>,
        pause_at: Option<u64>,
        on_event: &mut dyn FnMut(&Trainer, &TrainEvent) -> Result<()>,
    ) -> Result<RunEnd> {
        let plan = self.plan(data)?;
        let mut order: Option<(usize, usize, Vec<usize>)> = None;
        loop {
            let Some(c) = Self::cursor(&plan, self.step) else {
                return Ok(RunEnd::Finished);
            };
            if pause_at.is_some_and(|p| self.step >= p) {
                return Ok(RunEnd::Paused);
            }
            if order.as_ref().is_none_or(|(ph, ep, _)| (*ph, *ep) != (c.phase, c.epoch)) {
                order = Some((c.phase, c.epoch, self.epoch_order(&plan, data, c)?));
            }
            let seq = &order.as_ref().expect("epoch order").2;
            let bs = self.cfg.batch_size;
            let batch = &seq[c.batch * bs..((c.batch + 1) * bs).min(seq.len())];
            let examples = &data[plan[c.phase].data_index].examples;
            let lr = self.lr_at(&plan, self.step);
            let loss = self.train_step(examples, batch, lr)?;
            let field = self.cfg.phases[plan[c.phase].spec_index].field;
            self.epoch_loss.0 += loss;
            self.epoch_loss.1 += 1;
            on_event(
                self,
                &TrainEvent::Step(StepRecord {
                    step: self.step,
                    phase: field,
                    epoch: c.epoch,
                    loss,
                    lr,
                }),
            )?;
            if c.batch + 1 == plan[c.phase].batches {
                let report = match dev {
                    Some(d) if !d.is_empty() => Some(self.evaluate(d)?.0),
                    _ => None,
                };
                let improved = match report.and_then(|r| r.score_value()) {
                    Some(s) if self.best.is_none_or(|b| s < b.score) => {
                        self.best = Some(Best { score: s, step: self.step });
                        true
                    }
                    _ => false,
                };
                let (sum, n) = std::mem::take(&mut self.epoch_loss);
                on_event(
                    self,
                    &TrainEvent::Epoch(EpochRecord {
                        step: self.step,
                        phase: field,
                        epoch: c.epoch,
                        loss: sum / n.max(1) as f64,
                        lr,
                        dev: report,
                        improved,
                    }),
                )?;
            }
        }
    }

    fn train_step(&mut self, examples: &[Example], batch: &[usize], lr: f64) -> Result<f64> {
        let channels = self.model.config().channels;
        let mut rng = self.rng(self.step);
        let mut feats = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &i in batch {
            let e = &examples[i];
            let f = augment(&adapt_channels(&e.feature, channels)?, &self.cfg.augment, &mut rng)?;
            feats.push(f);
            labels.push(e.label);
        }
        let refs: Vec<&FBankFeature> = feats.iter().collect();
        if self.centroids.is_none() {
            let latents = self.model.latents(&refs)?;
            self.centroids = Some(KeywordCentroids::from_class_means(
                &latents,
                &labels,
                self.cfg.centroid_lr as f32,
            )?);
        }
        let centroids = self.centroids.as_ref().expect("centroids initialized");
        let (v0, v1) = centroids.tensors();

        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape, true);
        let x = tape.constant(self.model.batch_input(&refs)?);
        let cents = self.model.config().centroid.then_some((&v0, &v1));
        let g = self.model.forward_graph(&mut tape, &p, x, cents)?;
        let y: Vec<f32> = labels.iter().map(|&l| f32::from(l)).collect();
        let mut loss = tape.bce(g.positive, &y)?;
        if self.cfg.centroid_coupling == CentroidCoupling::Joint {
            let cv0 = tape.constant(v0.clone());
            let cv1 = tape.constant(v1.clone());
            let d0 = tape.l2_distance(g.latent, cv0)?;
            let d1 = tape.l2_distance(g.latent, cv1)?;
            let sq0 = tape.mul(d0, d0)?;
            let sq1 = tape.mul(d1, d1)?;
            let pos = tape.constant(Tensor::vector(y.clone()));
            let neg = tape.constant(Tensor::vector(y.iter().map(|v| 1.0 - v).collect()));
            let a = tape.mul(sq1, pos)?;
            let b = tape.mul(sq0, neg)?;
            let mse = tape.add(a, b)?;
            let mse = tape.mean(mse);
            loss = tape.add(loss, mse)?;
        }
        let loss_value = f64::from(tape.value(loss).item());
        if !loss_value.is_finite() {
            return Err(KwsError::NonFiniteLoss { step: self.step });
        }
        let latents: Vec<Vec<f32>> = tape
            .value(g.latent)
            .data()
            .chunks(self.model.config().latent_dim)
            .map(<[f32]>::to_vec)
            .collect();
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = p
            .vars()
            .iter()
            .map(|&v| grads.take(v).expect("trainable parameter gradient"))
            .collect();
        adam_step(self.model.params_mut(), &grads, &mut self.adam, lr as f32, &self.cfg.adam)?;
        let eta = self.cfg.centroid_lr * lr / self.cfg.lr0;
        self.centroids = Some(centroid_sgd_step(&latents, &labels, centroids, Some(eta as f32))?);
        self.step += 1;
        Ok(loss_value)
    }

    /// Scores `examples` with the head at the configured threshold.
    pub fn evaluate(&self, examples: &[Example]) -> Result<(EvalReport, Vec<Scored>)> {
        let scored = score_examples(&self.model, self.centroids.as_ref(), examples)?;
        let probs: Vec<f64> = scored.iter().map(|s| s.prob).collect();
        let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
        Ok((evaluate(&probs, &labels, self.cfg.threshold)?, scored))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.model.named();
        if let Some(c) = &self.centroids {
            tensors.extend(c.named());
        }
        for (name, (m, v)) in self.model.names().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            tensors.push((format!("adam.m.{name}"), m.clone()));
            tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        Ok(Checkpoint {
            config: json!({
                "model": self.model.config(),
                "trainer": self.cfg,
            }),
            tensors,
            state: json!({
                "step": self.step,
                "adam_t": self.adam.t,
                "best": self.best,
                "epoch_loss_sum": self.epoch_loss.0,
                "epoch_loss_count": self.epoch_loss.1,
            }),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model_cfg: ModelConfig = serde_json::from_value(ck.config["model"].clone())?;
        let cfg: TrainerConfig = serde_json::from_value(ck.config["trainer"].clone())?;
        cfg.validate()?;
        let (model, centroids) = model_from_checkpoint_with(ck, model_cfg, cfg.centroid_lr)?;
        let param_names: Vec<String> = model.names().to_vec();
        let moment = |kind: &str| -> Result<Vec<Tensor<f32>>> {
            param_names
                .iter()
                .map(|n| {
                    ck.tensor(&format!("adam.{kind}.{n}"))
                        .cloned()
                        .ok_or_else(|| KwsError::Format(format!("missing optimizer moment adam.{kind}.{n}")))
                })
                .collect()
        };
        let adam = AdamState {
            m: moment("m")?,
            v: moment("v")?,
            t: ck.state["adam_t"]
                .as_u64()
                .ok_or_else(|| KwsError::Format("state.adam_t missing".into()))?,
        };
        let step = ck.state["step"]
            .as_u64()
            .ok_or_else(|| KwsError::Format("state.step missing".into()))?;
        let best: Option<Best> = serde_json::from_value(ck.state["best"].clone())?;
        let epoch_loss = (
            ck.state["epoch_loss_sum"].as_f64().unwrap_or(0.0),
            ck.state["epoch_loss_count"].as_u64().unwrap_or(0),
        );
        Ok(Self {
            model,
            centroids,
            adam,
            step,
            best,
            epoch_loss,
            cfg,
        })
    }
}

fn model_from_checkpoint_with(
    ck: &Checkpoint,
    model_cfg: ModelConfig,
    centroid_lr: f64,
) -> Result<(Model<f32>, Option<KeywordCentroids<f32>>)> {
    let model_names: std::collections::HashSet<String> =
        model_cfg.parameter_specs().into_iter().map(|s| s.name).collect();
    let mut params = Vec::new();
    for (name, t) in &ck.tensors {
        if model_names.contains(name) {
            params.push((name.clone(), t.clone()));
        } else if name != V0_NAME && name != V1_NAME && !name.starts_with("adam.") {
            return Err(KwsError::Format(format!("unknown tensor {name:?}")));
        }
    }
    let model = Model::from_named(model_cfg, &params, true)?;
    let centroids = match (ck.tensor(V0_NAME), ck.tensor(V1_NAME)) {
        (Some(a), Some(b)) => {
            let c = KeywordCentroids::from_tensors(a, b, centroid_lr as f32)?;
            if c.dim() != model.config().latent_dim {
                return Err(KwsError::Format(format!(
                    "centroid dimension {} does not match latent dimension {}",
                    c.dim(),
                    model.config().latent_dim
                )));
            }
            Some(c)
        }
        (None, None) => None,
        _ => return Err(KwsError::Format("checkpoint holds only one centroid".into())),
    };
    if model.config().centroid && centroids.is_none() {
        return Err(KwsError::Format("centroid model checkpoint has no centroids".into()));
    }
    Ok((model, centroids))
}

/// Model and centroids from any checkpoint written by [`Trainer::to_checkpoint`].
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(Model<f32>, Option<KeywordCentroids<f32>>)> {
    let model_cfg: ModelConfig = serde_json::from_value(ck.config["model"].clone())?;
    let lr = ck.config["trainer"]["centroid_lr"].as_f64().unwrap_or(0.01);
    model_from_checkpoint_with(ck, model_cfg, lr)
}

/// Per-utterance model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub prob: f64,
    pub latent: Vec<f32>,
}

/// Positive-class probabilities and latents, in batches of 64.
pub fn score_examples(
    model: &Model<f32>,
    centroids: Option<&KeywordCentroids<f32>>,
    examples: &[Example],
) -> Result<Vec<Scored>> {
    let tensors = centroids.map(KeywordCentroids::tensors);
    let cents = match (model.config().centroid, &tensors) {
        (true, Some((a, b))) => Some((a, b)),
        (true, None) => return Err(KwsError::contract("centroid model needs centroids to score")),
        (false, _) => None,
    };
    let channels = model.config().channels;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let feats = chunk
            .iter()
            .map(|e| adapt_channels(&e.feature, channels))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&FBankFeature> = feats.iter().collect();
        for r in model.infer(&refs, cents)? {
            out.push(Scored {
                prob: f64::from(r.probs[1]).clamp(0.0, 1.0),
                latent: r.latent,
            });
        }
    }
    Ok(out)
}
