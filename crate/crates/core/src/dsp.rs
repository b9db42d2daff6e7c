//! Waveforms, STFT, log-Mel filterbank features and training-time augmentation.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

/// `ln(1e-10)`, the value every empty feature cell takes.
pub const LOG_FLOOR: f32 = -23.025_85;
const POWER_FLOOR: f64 = 1e-10;

/// Multi-channel PCM audio, amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(KwsError::contract("sample rate must be positive"));
        }
        if let Some(first) = samples.first() {
            if samples.iter().any(|c| c.len() != first.len()) {
                return Err(KwsError::contract("all channels must have equal length"));
            }
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(channels: usize, len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![0.0; len]; channels], sample_rate)
    }

    pub fn from_f64(samples: &[Vec<f64>], sample_rate: u32) -> Result<Self> {
        Self::new(
            samples
                .iter()
                .map(|c| c.iter().map(|&v| v as f32).collect())
                .collect(),
            sample_rate,
        )
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c]
    }

    pub fn channel_f64(&self, c: usize) -> Vec<f64> {
        self.samples[c].iter().map(|&v| f64::from(v)).collect()
    }

    pub fn channels_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.samples.iter().map(Vec::as_slice)
    }

    pub fn into_channels(self) -> Vec<Vec<f32>> {
        self.samples
    }

    /// Keeps only the listed channels, in order.
    pub fn select(&self, channels: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(channels.len());
        for &c in channels {
            let ch = self
                .samples
                .get(c)
                .ok_or_else(|| KwsError::contract(format!("channel {c} out of range")))?;
            out.push(ch.clone());
        }
        Self::new(out, self.sample_rate)
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|c| c.iter().map(|v| v * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

pub fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * f64::from(sample_rate) / 1000.0).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFn {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl WindowFn {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowFn::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
                .collect(),
            WindowFn::Rectangular => vec![1.0; len],
        }
    }
}

/// One channel's complex spectrogram, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Short-time Fourier transform with a fixed window and hop.
///
/// The FFT size is the next power of two at or above the window length; each
/// frame is windowed then zero-padded to that size.
#[derive(Clone)]
pub struct StftPlan {
    win_len: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftPlan")
            .field("win_len", &self.win_len)
            .field("hop", &self.hop)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl StftPlan {
    pub fn new(win_len: usize, hop: usize, window: WindowFn) -> Result<Self> {
        if win_len == 0 || hop == 0 {
            return Err(KwsError::config("window and hop must be positive"));
        }
        let n_fft = win_len.next_power_of_two();
        let mut planner = FftPlanner::new();
        Ok(Self {
            win_len,
            hop,
            n_fft,
            window: window.coefficients(win_len),
            fft: planner.plan_fft_forward(n_fft),
            ifft: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn win_len(&self) -> usize {
        self.win_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// `1 + floor((len − win) / hop)`, or `None` when the input is shorter than a window.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.win_len).then(|| 1 + (len - self.win_len) / self.hop)
    }

    pub fn analyze(&self, x: &[f64]) -> Result<Spectrogram> {
        let frames = self.frame_count(x.len()).ok_or_else(|| {
            KwsError::contract(format!(
                "stft input of {} samples is shorter than the {}-sample window",
                x.len(),
                self.win_len
            ))
        })?;
        let bins = self.n_bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::default(); self.n_fft];
        let mut scratch = vec![Complex64::default(); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < self.win_len {
                    Complex64::new(x[start + i] * self.window[i], 0.0)
                } else {
                    Complex64::default()
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrogram { frames, bins, data })
    }

    /// Weighted overlap-add resynthesis of `len` samples, using the analysis
    /// window as the synthesis window and normalizing by the summed squared
    /// window. Samples no frame covers come out as zero.
    pub fn synthesize(&self, spec: &Spectrogram, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::default(); self.n_fft];
        let mut scratch = vec![Complex64::default(); self.ifft.get_inplace_scratch_len()];
        let bins = spec.bins;
        let scale = 1.0 / self.n_fft as f64;
        for t in 0..spec.frames {
            let frame = spec.frame(t);
            buf[..bins].copy_from_slice(frame);
            for k in bins..self.n_fft {
                buf[k] = frame[self.n_fft - k].conj();
            }
            buf[0].im = 0.0;
            if self.n_fft % 2 == 0 {
                buf[self.n_fft / 2].im = 0.0;
            }
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.hop;
            for i in 0..self.win_len {
                let n = start + i;
                if n >= len {
                    break;
                }
                let w = self.window[i];
                out[n] += buf[i].re * scale * w;
                norm[n] += w * w;
            }
        }
        for (o, &n) in out.iter_mut().zip(&norm) {
            *o = if n > 1e-10 { *o / n } else { 0.0 };
        }
        out
    }
}

/// Per-channel complex spectrograms of a waveform.
pub fn stft(w: &Waveform, win_ms: f64, hop_ms: f64, window: WindowFn) -> Result<Vec<Spectrogram>> {
    let plan = StftPlan::new(
        ms_to_samples(win_ms, w.sample_rate()),
        ms_to_samples(hop_ms, w.sample_rate()),
        window,
    )?;
    (0..w.channels())
        .map(|c| plan.analyze(&w.channel_f64(c)))
        .collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with centres equally spaced on the mel scale from 0 Hz
/// to Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    /// Row-major `n_mels × n_bins`.
    matrix: Vec<f64>,
    /// `n_mels + 2` band edges in Hz; row `m` spans `[m, m + 2]` with its peak at `m + 1`.
    breakpoints: Vec<f64>,
    /// Nonzero column range of each row.
    support: Vec<(usize, usize)>,
}

pub fn build_mel_filterbank(n_mels: usize, sample_rate: u32, n_fft: usize) -> Result<MelFilterbank> {
    if n_mels < 2 {
        return Err(KwsError::config("at least two mel bands are required"));
    }
    if n_fft < 2 {
        return Err(KwsError::config("n_fft must be at least 2"));
    }
    let nyquist = f64::from(sample_rate) / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let breakpoints: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = f64::from(sample_rate) / n_fft as f64;
    let mut matrix = vec![0.0; n_mels * n_bins];
    let mut support = Vec::with_capacity(n_mels);
    let mut last_peak: Option<usize> = None;
    for m in 0..n_mels {
        let (lo, centre, hi) = (breakpoints[m], breakpoints[m + 1], breakpoints[m + 2]);
        let row = &mut matrix[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - lo) / (centre - lo);
            let fall = (hi - f) / (hi - centre);
            *w = rise.min(fall).max(0.0);
        }
        let first = row.iter().position(|&w| w > 0.0);
        let last = row.iter().rposition(|&w| w > 0.0);
        let (Some(first), Some(last)) = (first, last) else {
            return Err(KwsError::config(format!(
                "n_fft {n_fft} too small: mel band {m} covers no FFT bin"
            )));
        };
        let peak = (first..=last)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .expect("nonempty support");
        if last_peak.is_some_and(|p| peak <= p) {
            return Err(KwsError::config(format!(
                "n_fft {n_fft} too small to separate mel bands {} and {m}",
                m - 1
            )));
        }
        last_peak = Some(peak);
        support.push((first, last + 1));
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        matrix,
        breakpoints,
        support,
    })
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.matrix[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Mel energies of one power spectrum.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let (a, b) = self.support[m];
            let row = self.row(m);
            *o = (a..b).map(|k| row[k] * power[k]).sum();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub duration_s: f64,
    pub window: WindowFn,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_ms: 32.0,
            hop_ms: 10.0,
            n_mels: 40,
            duration_s: 2.0,
            window: WindowFn::Hann,
        }
    }
}

impl FeatureConfig {
    pub fn target_samples(&self) -> usize {
        (self.duration_s * f64::from(self.sample_rate)).round() as usize
    }

    pub fn win_samples(&self) -> usize {
        ms_to_samples(self.win_ms, self.sample_rate)
    }

    pub fn hop_samples(&self) -> usize {
        ms_to_samples(self.hop_ms, self.sample_rate)
    }

    /// Frames in a fixed-length utterance (197 for the defaults).
    pub fn frames(&self) -> usize {
        let (len, win) = (self.target_samples(), self.win_samples());
        if len < win {
            0
        } else {
            1 + (len - win) / self.hop_samples()
        }
    }
}

/// Log-Mel feature cube, `channels × frames × mels`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FBankFeature {
    pub channels: usize,
    pub frames: usize,
    pub mels: usize,
    pub data: Vec<f32>,
}

impl FBankFeature {
    pub fn new(channels: usize, frames: usize, mels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * frames * mels {
            return Err(KwsError::contract(format!(
                "feature cube {channels}x{frames}x{mels} needs {} values, got {}",
                channels * frames * mels,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            frames,
            mels,
            data,
        })
    }

    pub fn get(&self, c: usize, t: usize, m: usize) -> f32 {
        self.data[(c * self.frames + t) * self.mels + m]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.frames * self.mels;
        &self.data[c * n..(c + 1) * n]
    }

    /// Builds a cube whose channel `i` is this cube's channel `map[i]`.
    pub fn remap_channels(&self, map: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(map.len() * self.frames * self.mels);
        for &c in map {
            if c >= self.channels {
                return Err(KwsError::contract(format!("channel {c} out of range")));
            }
            data.extend_from_slice(self.channel(c));
        }
        Self::new(map.len(), self.frames, self.mels, data)
    }
}

/// Turns waveforms into fixed-length log-Mel cubes.
#[derive(Debug, Clone)]
pub struct FBankExtractor {
    config: FeatureConfig,
    plan: StftPlan,
    mel: MelFilterbank,
}

impl FBankExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        let plan = StftPlan::new(config.win_samples(), config.hop_samples(), config.window)?;
        if config.target_samples() < plan.win_len() {
            return Err(KwsError::config("utterance duration is shorter than one window"));
        }
        let mel = build_mel_filterbank(config.n_mels, config.sample_rate, plan.n_fft())?;
        Ok(Self { config, plan, mel })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn mel(&self) -> &MelFilterbank {
        &self.mel
    }

    /// Right-pads with zeros (or trims) to the configured duration, then
    /// computes `ln(max(mel · |STFT|², 1e-10))` per channel.
    pub fn extract(&self, w: &Waveform) -> Result<FBankFeature> {
        if w.channels() == 0 {
            return Err(KwsError::contract("waveform has no channels"));
        }
        if w.sample_rate() != self.config.sample_rate {
            return Err(KwsError::contract(format!(
                "waveform sample rate {} does not match feature rate {}",
                w.sample_rate(),
                self.config.sample_rate
            )));
        }
        let target = self.config.target_samples();
        let frames = self.config.frames();
        let mels = self.config.n_mels;
        let mut data = Vec::with_capacity(w.channels() * frames * mels);
        let mut padded = vec![0.0f64; target];
        let mut power = vec![0.0; self.plan.n_bins()];
        let mut energies = vec![0.0; mels];
        for ch in w.channels_iter() {
            padded.fill(0.0);
            for (p, &s) in padded.iter_mut().zip(ch) {
                *p = f64::from(s);
            }
            let spec = self.plan.analyze(&padded)?;
            for t in 0..spec.frames {
                for (p, z) in power.iter_mut().zip(spec.frame(t)) {
                    *p = z.norm_sqr();
                }
                self.mel.apply(&power, &mut energies);
                data.extend(energies.iter().map(|&e| e.max(POWER_FLOOR).ln() as f32));
            }
        }
        FBankFeature::new(w.channels(), frames, mels, data)
    }
}

/// Shifts every channel by `shift` samples: positive delays (leading zeros),
/// negative advances (trailing zeros).
pub fn time_shift(w: &Waveform, shift: i64) -> Waveform {
    let len = w.len();
    let samples = w
        .channels_iter()
        .map(|ch| {
            let mut out = vec![0.0f32; len];
            for (i, o) in out.iter_mut().enumerate() {
                let src = i as i64 - shift;
                if (0..len as i64).contains(&src) {
                    *o = ch[src as usize];
                }
            }
            out
        })
        .collect();
    Waveform {
        samples,
        sample_rate: w.sample_rate(),
    }
}

/// Applies one uniform draw from `[-max_ms, +max_ms]` (in whole samples) to
/// all channels. Returns the shifted waveform and the shift in samples.
pub fn random_time_shift<R: Rng + ?Sized>(w: &Waveform, max_ms: f64, rng: &mut R) -> (Waveform, i64) {
    let max = ms_to_samples(max_ms, w.sample_rate()) as i64;
    let shift = rng.random_range(-max..=max);
    (time_shift(w, shift), shift)
}

/// One frequency band and one time band to blank out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecAugmentMask {
    pub freq: std::ops::Range<usize>,
    pub time: std::ops::Range<usize>,
}

impl SpecAugmentMask {
    pub fn draw<R: Rng + ?Sized>(
        mels: usize,
        frames: usize,
        freq_param: usize,
        time_param: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if freq_param > mels || time_param > frames {
            return Err(KwsError::contract(format!(
                "spec augment widths ({freq_param}, {time_param}) exceed feature extents ({mels}, {frames})"
            )));
        }
        let band = |extent: usize, param: usize, rng: &mut R| {
            let width = rng.random_range(0..=param);
            let start = rng.random_range(0..=extent - width);
            start..start + width
        };
        let freq = band(mels, freq_param, rng);
        let time = band(frames, time_param, rng);
        Ok(Self { freq, time })
    }

    /// Sets masked cells to [`LOG_FLOOR`] in every channel.
    pub fn apply(&self, f: &FBankFeature) -> FBankFeature {
        let mut out = f.clone();
        for c in 0..f.channels {
            for t in 0..f.frames {
                let row = &mut out.data[(c * f.frames + t) * f.mels..][..f.mels];
                if self.time.contains(&t) {
                    row.fill(LOG_FLOOR);
                } else {
                    row[self.freq.clone()].fill(LOG_FLOOR);
                }
            }
        }
        out
    }
}

pub fn spec_augment<R: Rng + ?Sized>(
    f: &FBankFeature,
    freq_param: usize,
    time_param: usize,
    rng: &mut R,
) -> Result<FBankFeature> {
    let mask = SpecAugmentMask::draw(f.mels, f.frames, freq_param, time_param, rng)?;
    Ok(mask.apply(f))
}
