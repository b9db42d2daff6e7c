//! Multi-channel ConvMixer keyword spotter.
//!
//! Tensors flow as `[batch, channel, time, freq]` token grids. A shared
//! convolutional encoder turns each channel's log-Mel features into a
//! `T' × F'` grid, `blocks` mixer blocks refine it, a convolution over all
//! channels aggregates it into a `D`-dimensional latent, and a softmax head
//! scores the latent (optionally with its distances to two class centroids).

use std::collections::HashMap;

use kws_tensor::{Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::FBankFeature;
use crate::error::{KwsError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Audio channels `C`; the channel-mix extent.
    pub channels: usize,
    pub mels: usize,
    /// Feature frames per utterance.
    pub frames: usize,
    pub encoder_kernel: usize,
    pub encoder_stride: usize,
    /// Encoder output width `F'`.
    pub encoder_width: usize,
    pub blocks: usize,
    pub freq_kernel: usize,
    pub time_kernel: usize,
    /// Hidden width of every mixer MLP as a multiple of the mixed extent.
    pub mix_expansion: usize,
    /// Latent dimension `D`.
    pub latent_dim: usize,
    pub post_kernel: usize,
    pub post_stride: usize,
    /// Feed centroid distances to the head.
    pub centroid: bool,
    /// Divide centroid distances by `√D` before the head.
    pub standardize_l2: bool,
    /// Standardize each utterance's features to zero mean and unit variance.
    pub normalize_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference(ReferenceModel::MultiChannel)
    }
}

/// Documented configurations sized against the published parameter budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceModel {
    /// One channel, about 124 K parameters.
    SingleChannel,
    /// Six channels, about 415 K parameters.
    MultiChannel,
    /// Six channels with centroid awareness, about 622 K parameters.
    MultiChannelCentroid,
    /// Three beams plus raw channel 0 with centroid awareness, about 473 K parameters.
    MultiLookCentroid,
    /// Compact six-channel model for desk-scale training.
    Compact,
}

impl ReferenceModel {
    pub const PUBLISHED: [(ReferenceModel, usize); 4] = [
        (ReferenceModel::SingleChannel, 124_000),
        (ReferenceModel::MultiChannel, 415_000),
        (ReferenceModel::MultiChannelCentroid, 622_000),
        (ReferenceModel::MultiLookCentroid, 473_000),
    ];
}

impl ModelConfig {
    pub fn reference(which: ReferenceModel) -> Self {
        let base = Self {
            channels: 6,
            mels: 40,
            frames: 197,
            encoder_kernel: 5,
            encoder_stride: 4,
            encoder_width: 48,
            blocks: 4,
            freq_kernel: 5,
            time_kernel: 5,
            mix_expansion: 1,
            latent_dim: 128,
            post_kernel: 5,
            post_stride: 2,
            centroid: false,
            standardize_l2: false,
            normalize_input: true,
        };
        match which {
            ReferenceModel::SingleChannel => Self {
                channels: 1,
                latent_dim: 245,
                ..base
            },
            ReferenceModel::MultiChannel => Self {
                latent_dim: 245,
                ..base
            },
            ReferenceModel::MultiChannelCentroid => Self {
                latent_dim: 387,
                centroid: true,
                ..base
            },
            ReferenceModel::MultiLookCentroid => Self {
                channels: 4,
                latent_dim: 425,
                centroid: true,
                ..base
            },
            ReferenceModel::Compact => Self {
                encoder_stride: 8,
                encoder_width: 16,
                freq_kernel: 3,
                time_kernel: 3,
                latent_dim: 32,
                post_kernel: 3,
                post_stride: 1,
                ..base
            },
        }
    }

    /// `T'`, the encoder's output length.
    pub fn token_frames(&self) -> usize {
        conv_len(self.frames, self.encoder_kernel, self.encoder_stride, self.encoder_kernel / 2)
    }

    /// `F'`.
    pub fn token_freqs(&self) -> usize {
        self.encoder_width
    }

    pub fn post_frames(&self) -> usize {
        conv_len(self.token_frames(), self.post_kernel, self.post_stride, self.post_kernel / 2)
    }

    pub fn head_inputs(&self) -> usize {
        self.latent_dim + if self.centroid { 2 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("mels", self.mels),
            ("frames", self.frames),
            ("encoder_kernel", self.encoder_kernel),
            ("encoder_stride", self.encoder_stride),
            ("encoder_width", self.encoder_width),
            ("blocks", self.blocks),
            ("mix_expansion", self.mix_expansion),
            ("post_kernel", self.post_kernel),
            ("post_stride", self.post_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(KwsError::config(format!("model.{name} must be at least 1")));
            }
        }
        if self.latent_dim < 2 {
            return Err(KwsError::config("model.latent_dim must be at least 2"));
        }
        for (name, k) in [("freq_kernel", self.freq_kernel), ("time_kernel", self.time_kernel)] {
            if k % 2 == 0 {
                return Err(KwsError::config(format!("model.{name} must be odd")));
            }
        }
        if self.encoder_kernel > self.frames + 2 * (self.encoder_kernel / 2) {
            return Err(KwsError::config("encoder kernel longer than the input"));
        }
        if self.post_kernel > self.token_frames() + 2 * (self.post_kernel / 2) {
            return Err(KwsError::config("post kernel longer than the token grid"));
        }
        Ok(())
    }

    /// Every parameter's name, shape and initializer, in storage order.
    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        let (c, t, f, m) = (self.channels, self.token_frames(), self.token_freqs(), self.mels);
        let e = self.mix_expansion;
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
        add("encoder.depth".into(), vec![m, self.encoder_kernel], Init::FanIn(self.encoder_kernel));
        add("encoder.point".into(), vec![f, m], Init::FanIn(m));
        add("encoder.bias".into(), vec![f], Init::Zeros);
        for i in 0..self.blocks {
            let p = format!("blocks.{i}");
            add(format!("{p}.freq_conv.depth"), vec![t, self.freq_kernel], Init::FanIn(self.freq_kernel));
            add(format!("{p}.freq_conv.point"), vec![t, t], Init::FanIn(t));
            add(format!("{p}.freq_conv.bias"), vec![t], Init::Zeros);
            add(format!("{p}.time_conv.depth"), vec![f, self.time_kernel], Init::FanIn(self.time_kernel));
            add(format!("{p}.time_conv.point"), vec![f, f], Init::FanIn(f));
            add(format!("{p}.time_conv.bias"), vec![f], Init::Zeros);
            for (stage, n) in [("time_mix", t), ("freq_mix", f), ("chan_mix", c)] {
                let (w1, w2) = match stage {
                    "time_mix" => ("w1", "w2"),
                    "freq_mix" => ("w3", "w4"),
                    _ => ("w5", "w6"),
                };
                let (b1, b2) = match stage {
                    "time_mix" => ("b1", "b2"),
                    "freq_mix" => ("b3", "b4"),
                    _ => ("b5", "b6"),
                };
                add(format!("{p}.{stage}.norm.gamma"), vec![n], Init::Ones);
                add(format!("{p}.{stage}.norm.beta"), vec![n], Init::Zeros);
                add(format!("{p}.{stage}.{w1}"), vec![n, e * n], Init::Linear);
                add(format!("{p}.{stage}.{b1}"), vec![e * n], Init::Zeros);
                add(format!("{p}.{stage}.{w2}"), vec![e * n, n], Init::Linear);
                add(format!("{p}.{stage}.{b2}"), vec![n], Init::Zeros);
            }
        }
        add("post.weight".into(), vec![self.latent_dim, c * f, self.post_kernel], Init::FanIn(c * f * self.post_kernel));
        add("post.bias".into(), vec![self.latent_dim], Init::Zeros);
        add("head.weight".into(), vec![self.head_inputs(), 2], Init::Linear);
        add("head.bias".into(), vec![2], Init::Zeros);
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

fn conv_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad).saturating_sub(k) / stride.max(1) + 1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Truncated normal, std 0.02, cut at two standard deviations.
    Linear,
    /// Truncated normal with std `1/√fan_in`.
    FanIn(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Parameters of a model, stored in [`ModelConfig::parameter_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    config: ModelConfig,
    names: Vec<String>,
    index: HashMap<String, usize>,
    params: Vec<Tensor<F>>,
}

impl<F: Real> Model<F> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let specs = config.parameter_specs();
        let params = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Ones => vec![F::one(); n],
                    Init::Zeros => vec![F::zero(); n],
                    Init::Linear => (0..n).map(|_| F::lit(truncated_normal(rng, 0.02))).collect(),
                    Init::FanIn(fan) => {
                        let std = 1.0 / (fan.max(1) as f64).sqrt();
                        (0..n).map(|_| F::lit(truncated_normal(rng, std))).collect()
                    }
                };
                Tensor::new(s.shape.clone(), data).map_err(KwsError::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(config, specs, params))
    }

    fn assemble(config: ModelConfig, specs: Vec<ParamSpec>, params: Vec<Tensor<F>>) -> Self {
        let names: Vec<String> = specs.into_iter().map(|s| s.name).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            index,
            params,
        }
    }

    /// Rebuilds a model from named tensors. Every expected name must be
    /// present with its exact shape; with `strict`, unknown names are errors.
    pub fn from_named(config: ModelConfig, named: &[(String, Tensor<F>)], strict: bool) -> Result<Self> {
        config.validate()?;
        let specs = config.parameter_specs();
        let lookup: HashMap<&str, &Tensor<F>> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if strict {
            let known: std::collections::HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            if let Some((n, _)) = named.iter().find(|(n, _)| !known.contains(n.as_str())) {
                return Err(KwsError::Format(format!("unknown tensor {n:?}")));
            }
        }
        let params = specs
            .iter()
            .map(|s| {
                let t = lookup
                    .get(s.name.as_str())
                    .ok_or_else(|| KwsError::Format(format!("missing tensor {:?}", s.name)))?;
                if t.shape() != s.shape.as_slice() {
                    return Err(KwsError::Format(format!(
                        "tensor {:?} has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )));
                }
                Ok((*t).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(config, specs, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn named(&self) -> Vec<(String, Tensor<F>)> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            index: self.index.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Zeroes the output projections of every mixer stage (W2, W4, W6 and
    /// their biases) so each mixing stack starts as the identity.
    pub fn identity_init(&mut self) {
        for i in 0..self.config.blocks {
            for name in [
                "time_mix.w2",
                "time_mix.b2",
                "freq_mix.w4",
                "freq_mix.b4",
                "chan_mix.w6",
                "chan_mix.b6",
            ] {
                if let Some(p) = self.param_mut(&format!("blocks.{i}.{name}")) {
                    p.data_mut().iter_mut().for_each(|v| *v = F::zero());
                }
            }
        }
    }

    /// Places every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Stacks features into a `[batch, C, T, mels]` tensor, standardizing each
    /// utterance when configured.
    pub fn batch_input(&self, feats: &[&FBankFeature]) -> Result<Tensor<F>> {
        let c = &self.config;
        if feats.is_empty() {
            return Err(KwsError::contract("empty batch"));
        }
        let per = c.channels * c.frames * c.mels;
        let mut data = Vec::with_capacity(feats.len() * per);
        for f in feats {
            if f.channels != c.channels {
                return Err(KwsError::contract(format!(
                    "model expects {} channels, features have {}",
                    c.channels, f.channels
                )));
            }
            if f.frames != c.frames || f.mels != c.mels {
                return Err(KwsError::contract(format!(
                    "model expects {}x{} features, got {}x{}",
                    c.frames, c.mels, f.frames, f.mels
                )));
            }
            if c.normalize_input {
                let n = f.data.len() as f64;
                let mean = f.data.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
                let var = f.data.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-5).sqrt();
                data.extend(f.data.iter().map(|&v| F::lit((f64::from(v) - mean) * inv)));
            } else {
                data.extend(f.data.iter().map(|&v| F::lit(f64::from(v))));
            }
        }
        Ok(Tensor::new(vec![feats.len(), c.channels, c.frames, c.mels], data)?)
    }

    /// `[B, C, T, mels]` → `[B, C, T', F']` with encoder weights shared by all channels.
    pub fn conv_encode(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let c = &self.config;
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != c.channels || s[2] != c.frames || s[3] != c.mels {
            return Err(KwsError::contract(format!(
                "encoder expects [B, {}, {}, {}], got {:?}",
                c.channels, c.frames, c.mels, s
            )));
        }
        let b = s[0];
        let x = tape.reshape(x, &[b * c.channels, c.frames, c.mels])?;
        let x = tape.permute(x, &[0, 2, 1])?;
        let h = tape.depthwise_separable_conv(
            x,
            p.var("encoder.depth"),
            p.var("encoder.point"),
            Some(p.var("encoder.bias")),
            c.encoder_stride,
            c.encoder_kernel / 2,
        )?;
        let h = tape.gelu(h);
        let h = tape.permute(h, &[0, 2, 1])?;
        Ok(tape.reshape(h, &[b, c.channels, c.token_frames(), c.token_freqs()])?)
    }

    /// Frequency then temporal depthwise-separable convolution with a residual.
    pub fn block_convs(&self, tape: &mut Tape<F>, p: &Bound, i: usize, x: Var) -> Result<Var> {
        let c = &self.config;
        let (t, f) = (c.token_frames(), c.token_freqs());
        let s = tape.shape(x).to_vec();
        let bc = s[0] * s[1];
        let pre = format!("blocks.{i}");
        let h = tape.reshape(x, &[bc, t, f])?;
        let h = tape.depthwise_separable_conv(
            h,
            p.var(&format!("{pre}.freq_conv.depth")),
            p.var(&format!("{pre}.freq_conv.point")),
            Some(p.var(&format!("{pre}.freq_conv.bias"))),
            1,
            c.freq_kernel / 2,
        )?;
        let h = tape.gelu(h);
        let h = tape.permute(h, &[0, 2, 1])?;
        let h = tape.depthwise_separable_conv(
            h,
            p.var(&format!("{pre}.time_conv.depth")),
            p.var(&format!("{pre}.time_conv.point")),
            Some(p.var(&format!("{pre}.time_conv.bias"))),
            1,
            c.time_kernel / 2,
        )?;
        let h = tape.gelu(h);
        let h = tape.permute(h, &[0, 2, 1])?;
        let h = tape.reshape(h, &s)?;
        Ok(tape.add(x, h)?)
    }

    /// `LayerNorm → W_a → GELU → W_b` over the last axis.
    fn mlp(&self, tape: &mut Tape<F>, p: &Bound, pre: &str, names: [&str; 4], x: Var) -> Result<Var> {
        let last = tape.shape(x).len() - 1;
        let n = tape.layer_norm(x, p.var(&format!("{pre}.norm.gamma")), p.var(&format!("{pre}.norm.beta")), last)?;
        let h = tape.affine(n, p.var(&format!("{pre}.{}", names[0])), Some(p.var(&format!("{pre}.{}", names[1]))))?;
        let h = tape.gelu(h);
        Ok(tape.affine(h, p.var(&format!("{pre}.{}", names[2])), Some(p.var(&format!("{pre}.{}", names[3]))))?)
    }

    /// Temporal mixing over `T'` for every `(c, f)`.
    pub fn time_mix(&self, tape: &mut Tape<F>, p: &Bound, i: usize, x: Var) -> Result<Var> {
        let v = tape.permute(x, &[0, 1, 3, 2])?;
        let h = self.mlp(tape, p, &format!("blocks.{i}.time_mix"), ["w1", "b1", "w2", "b2"], v)?;
        let h = tape.permute(h, &[0, 1, 3, 2])?;
        Ok(tape.add(x, h)?)
    }

    /// Frequency mixing over `F'` for every `(c, t)`.
    pub fn freq_mix(&self, tape: &mut Tape<F>, p: &Bound, i: usize, x: Var) -> Result<Var> {
        let h = self.mlp(tape, p, &format!("blocks.{i}.freq_mix"), ["w3", "b3", "w4", "b4"], x)?;
        Ok(tape.add(x, h)?)
    }

    /// Microphone-channel mixing over `C` for every `(t, f)`.
    pub fn chan_mix(&self, tape: &mut Tape<F>, p: &Bound, i: usize, x: Var) -> Result<Var> {
        let v = tape.permute(x, &[0, 2, 3, 1])?;
        let h = self.mlp(tape, p, &format!("blocks.{i}.chan_mix"), ["w5", "b5", "w6", "b6"], v)?;
        let h = tape.permute(h, &[0, 3, 1, 2])?;
        Ok(tape.add(x, h)?)
    }

    /// The three residual mixing stages of block `i`.
    pub fn mixing_stack(&self, tape: &mut Tape<F>, p: &Bound, i: usize, x: Var) -> Result<Var> {
        let u = self.time_mix(tape, p, i, x)?;
        let y = self.freq_mix(tape, p, i, u)?;
        self.chan_mix(tape, p, i, y)
    }

    pub fn mixer_block(&self, tape: &mut Tape<F>, p: &Bound, i: usize, x: Var) -> Result<Var> {
        let xc = self.block_convs(tape, p, i, x)?;
        self.mixing_stack(tape, p, i, xc)
    }

    /// `[B, C, T', F']` → `[B, D]`: one convolution over all channels' grids,
    /// GELU, then mean pooling over time.
    pub fn post_conv_aggregate(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let c = &self.config;
        let b = tape.shape(x)[0];
        let v = tape.permute(x, &[0, 1, 3, 2])?;
        let v = tape.reshape(v, &[b, c.channels * c.token_freqs(), c.token_frames()])?;
        let h = tape.conv1d(v, p.var("post.weight"), Some(p.var("post.bias")), c.post_stride, c.post_kernel / 2)?;
        let h = tape.gelu(h);
        Ok(tape.mean_last(h)?)
    }

    /// `[B, D]` latents and `[D]` centroids → `[B, 2]` distances.
    pub fn l2_features(&self, tape: &mut Tape<F>, latent: Var, v0: Var, v1: Var) -> Result<Var> {
        let b = tape.shape(latent)[0];
        let d0 = tape.l2_distance(latent, v0)?;
        let d1 = tape.l2_distance(latent, v1)?;
        let d0 = tape.reshape(d0, &[b, 1])?;
        let d1 = tape.reshape(d1, &[b, 1])?;
        let l2 = tape.concat(&[d0, d1])?;
        Ok(if self.config.standardize_l2 {
            tape.scale(l2, F::one() / F::lit(self.config.latent_dim as f64).sqrt())
        } else {
            l2
        })
    }

    /// Softmax over `W·[latent, l2] + b`, shape `[B, 2]`.
    pub fn predict(&self, tape: &mut Tape<F>, p: &Bound, latent: Var, l2: Option<Var>) -> Result<Var> {
        let input = match (self.config.centroid, l2) {
            (true, Some(l2)) => tape.concat(&[latent, l2])?,
            (false, None) => latent,
            (true, None) => return Err(KwsError::contract("centroid model needs L2 distance features")),
            (false, Some(_)) => return Err(KwsError::contract("model without centroid awareness got L2 features")),
        };
        let logits = tape.affine(input, p.var("head.weight"), Some(p.var("head.bias")))?;
        Ok(tape.softmax(logits)?)
    }

    /// Encoder, mixer blocks and aggregation: `[B, C, T, mels]` → `[B, D]`.
    pub fn latent_graph(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.conv_encode(tape, p, x)?;
        for i in 0..self.config.blocks {
            h = self.mixer_block(tape, p, i, h)?;
        }
        self.post_conv_aggregate(tape, p, h)
    }

    /// Latents for a batch, without the head.
    pub fn latents(&self, feats: &[&FBankFeature]) -> Result<Vec<Vec<F>>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(self.batch_input(feats)?);
        let latent = self.latent_graph(&mut tape, &p, x)?;
        Ok(tape
            .value(latent)
            .data()
            .chunks(self.config.latent_dim)
            .map(<[F]>::to_vec)
            .collect())
    }

    /// Full forward pass on a bound batch.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        x: Var,
        centroids: Option<(&Tensor<F>, &Tensor<F>)>,
    ) -> Result<Graph> {
        let latent = self.latent_graph(tape, p, x)?;
        let l2 = match (self.config.centroid, centroids) {
            (true, Some((v0, v1))) => {
                for v in [v0, v1] {
                    if v.shape() != [self.config.latent_dim] {
                        return Err(KwsError::contract(format!(
                            "centroid has shape {:?}, latent dim is {}",
                            v.shape(),
                            self.config.latent_dim
                        )));
                    }
                }
                let v0 = tape.constant(v0.clone());
                let v1 = tape.constant(v1.clone());
                Some(self.l2_features(tape, latent, v0, v1)?)
            }
            (true, None) => return Err(KwsError::contract("centroid model needs centroids")),
            (false, Some(_)) => return Err(KwsError::contract("model without centroid awareness got centroids")),
            (false, None) => None,
        };
        let probs = self.predict(tape, p, latent, l2)?;
        let positive = tape.column(probs, 1)?;
        Ok(Graph {
            probs,
            positive,
            latent,
            l2,
        })
    }

    /// Inference without gradients.
    pub fn infer(
        &self,
        feats: &[&FBankFeature],
        centroids: Option<(&Tensor<F>, &Tensor<F>)>,
    ) -> Result<Vec<Inference<F>>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(self.batch_input(feats)?);
        let g = self.forward_graph(&mut tape, &p, x, centroids)?;
        let d = self.config.latent_dim;
        let probs = tape.value(g.probs).data();
        let latent = tape.value(g.latent).data();
        Ok((0..feats.len())
            .map(|i| Inference {
                probs: [probs[2 * i], probs[2 * i + 1]],
                latent: latent[i * d..(i + 1) * d].to_vec(),
            })
            .collect())
    }
}

/// Parameter variables of a model placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("no parameter named {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Handles to the interesting nodes of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Graph {
    /// `[B, 2]` class probabilities.
    pub probs: Var,
    /// `[B]` positive-class probabilities.
    pub positive: Var,
    /// `[B, D]`.
    pub latent: Var,
    /// `[B, 2]` centroid distances, when enabled.
    pub l2: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference<F> {
    pub probs: [F; 2],
    pub latent: Vec<F>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spec_count_matches_allocated_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for which in [ReferenceModel::SingleChannel, ReferenceModel::Compact] {
            let cfg = ModelConfig::reference(which);
            let m = Model::<f32>::new(cfg.clone(), &mut rng).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn token_grid_follows_conv_arithmetic() {
        let cfg = ModelConfig::reference(ReferenceModel::MultiChannel);
        assert_eq!(cfg.token_frames(), (197 + 2 * 2 - 5) / 4 + 1);
        let compact = ModelConfig::reference(ReferenceModel::Compact);
        assert_eq!(compact.token_frames(), (197 + 2 * 2 - 5) / 8 + 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::reference(ReferenceModel::Compact);
        cfg.latent_dim = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::reference(ReferenceModel::Compact);
        cfg.blocks = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::reference(ReferenceModel::Compact);
        cfg.time_kernel = 4;
        assert!(cfg.validate().is_err());
    }
}
