//! Multi-channel front end: WPE dereverberation, mask-based MVDR beamforming
//! at fixed look directions, and multi-look stacking.
//!
//! All processing happens on a 75%-overlap Hann STFT (512-point window,
//! 128-sample hop at 16 kHz). Signals are zero-padded by `win − hop` samples
//! on both sides before analysis so that every input sample is covered by
//! several frames and the weighted overlap-add resynthesis is exact.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{StftPlan, Spectrogram, Waveform, WindowFn};
use crate::error::{KwsError, Result};

pub const DEFAULT_LOOKS_DEG: [f64; 3] = [10.0, 90.0, 170.0];

/// Linear microphone array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// Element positions along the array axis in metres, strictly increasing.
    pub positions: Vec<f64>,
    pub speed_of_sound: f64,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<f64>, speed_of_sound: f64) -> Result<Self> {
        if positions.len() < 2 {
            return Err(KwsError::config("an array needs at least two elements"));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(KwsError::config("element positions must be strictly increasing"));
        }
        if speed_of_sound <= 0.0 {
            return Err(KwsError::config("speed of sound must be positive"));
        }
        Ok(Self {
            positions,
            speed_of_sound,
        })
    }

    pub fn uniform(elements: usize, spacing: f64) -> Result<Self> {
        Self::new((0..elements).map(|i| i as f64 * spacing).collect(), 343.0)
    }

    pub fn elements(&self) -> usize {
        self.positions.len()
    }

    /// Plane-wave arrival delay of element `k` relative to element 0, seconds.
    pub fn relative_delay(&self, k: usize, dir: LookDirection) -> f64 {
        (self.positions[k] - self.positions[0]) * dir.radians().cos() / self.speed_of_sound
    }
}

impl Default for ArrayGeometry {
    /// Six elements, 4 cm apart.
    fn default() -> Self {
        Self::uniform(6, 0.04).expect("valid default geometry")
    }
}

/// Azimuth in degrees from the array axis, within `[0, 180]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LookDirection(f64);

impl LookDirection {
    pub fn new(degrees: f64) -> Result<Self> {
        if !(0.0..=180.0).contains(&degrees) {
            return Err(KwsError::config(format!("look direction {degrees}° outside [0, 180]")));
        }
        Ok(Self(degrees))
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    pub fn radians(self) -> f64 {
        self.0.to_radians()
    }
}

/// Far-field steering vector: element `k` has phase `−2π f (p_k − p_0) cos θ / c`.
pub fn steering_vector(dir: LookDirection, geom: &ArrayGeometry, freq_hz: f64) -> DVector<Complex64> {
    DVector::from_iterator(
        geom.elements(),
        (0..geom.elements()).map(|k| {
            let phase = -2.0 * std::f64::consts::PI * freq_hz * geom.relative_delay(k, dir);
            Complex64::from_polar(1.0, phase)
        }),
    )
}

/// Multi-channel STFT, indexed `[channel][frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStft {
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl MultiStft {
    pub fn get(&self, c: usize, t: usize, f: usize) -> Complex64 {
        self.data[(c * self.frames + t) * self.bins + f]
    }

    pub fn set(&mut self, c: usize, t: usize, f: usize, v: Complex64) {
        self.data[(c * self.frames + t) * self.bins + f] = v;
    }

    /// Snapshot of all channels at one time-frequency cell.
    pub fn cell(&self, t: usize, f: usize) -> DVector<Complex64> {
        DVector::from_iterator(self.channels, (0..self.channels).map(|c| self.get(c, t, f)))
    }

    fn channel_spec(&self, c: usize) -> Spectrogram {
        let n = self.frames * self.bins;
        Spectrogram {
            frames: self.frames,
            bins: self.bins,
            data: self.data[c * n..(c + 1) * n].to_vec(),
        }
    }
}

/// Analysis/resynthesis pair for the front end.
#[derive(Debug, Clone)]
pub struct FrontendStft {
    plan: StftPlan,
    sample_rate: u32,
}

impl FrontendStft {
    pub fn new(win_len: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        Ok(Self {
            plan: StftPlan::new(win_len, hop, WindowFn::Hann)?,
            sample_rate,
        })
    }

    pub fn bins(&self) -> usize {
        self.plan.n_bins()
    }

    pub fn bin_hz(&self, f: usize) -> f64 {
        f as f64 * f64::from(self.sample_rate) / self.plan.n_fft() as f64
    }

    fn pad(&self) -> usize {
        self.plan.win_len() - self.plan.hop()
    }

    fn padded_len(&self, len: usize) -> usize {
        let pad = self.pad();
        let core = len + 2 * pad;
        let win = self.plan.win_len();
        let hop = self.plan.hop();
        if core <= win {
            win
        } else {
            win + (core - win).div_ceil(hop) * hop
        }
    }

    pub fn analyze_channels(&self, channels: &[Vec<f64>]) -> Result<MultiStft> {
        let len = channels.first().map_or(0, Vec::len);
        let pad = self.pad();
        let total = self.padded_len(len);
        let mut data = Vec::new();
        let mut frames = 0;
        let mut bins = 0;
        for ch in channels {
            let mut x = vec![0.0; total];
            x[pad..pad + ch.len()].copy_from_slice(ch);
            let spec = self.plan.analyze(&x)?;
            frames = spec.frames;
            bins = spec.bins;
            data.extend(spec.data);
        }
        Ok(MultiStft {
            channels: channels.len(),
            frames,
            bins,
            data,
        })
    }

    pub fn analyze(&self, w: &Waveform) -> Result<MultiStft> {
        let chans: Vec<Vec<f64>> = (0..w.channels()).map(|c| w.channel_f64(c)).collect();
        self.analyze_channels(&chans)
    }

    /// Inverse of [`analyze`](Self::analyze) for one channel, returning `len` samples.
    pub fn synthesize_channel(&self, s: &MultiStft, c: usize, len: usize) -> Vec<f64> {
        let spec = s.channel_spec(c);
        let total = self.padded_len(len);
        let full = self.plan.synthesize(&spec, total);
        full[self.pad()..self.pad() + len].to_vec()
    }

    pub fn synthesize_spectrogram(&self, spec: &Spectrogram, len: usize) -> Vec<f64> {
        let total = self.padded_len(len);
        let full = self.plan.synthesize(spec, total);
        full[self.pad()..self.pad() + len].to_vec()
    }
}

/// Speech-presence weights per `(frame, bin)`; the noise weight is `1 − speech`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfMask {
    pub frames: usize,
    pub bins: usize,
    speech: Vec<f64>,
}

impl TfMask {
    pub fn new(frames: usize, bins: usize, speech: Vec<f64>) -> Result<Self> {
        if speech.len() != frames * bins {
            return Err(KwsError::contract("mask extent does not match frames × bins"));
        }
        if speech.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(KwsError::contract("mask entries must lie in [0, 1]"));
        }
        Ok(Self {
            frames,
            bins,
            speech,
        })
    }

    pub fn speech(&self, t: usize, f: usize) -> f64 {
        self.speech[t * self.bins + f]
    }

    pub fn noise(&self, t: usize, f: usize) -> f64 {
        1.0 - self.speech(t, f)
    }

    /// Ratio mask `|S|² / (|S|² + |N|²)` from known components, averaged over channels.
    pub fn oracle(speech: &MultiStft, noise: &MultiStft) -> Result<Self> {
        if (speech.channels, speech.frames, speech.bins) != (noise.channels, noise.frames, noise.bins) {
            return Err(KwsError::contract("speech and noise spectrogram extents differ"));
        }
        let mut m = Vec::with_capacity(speech.frames * speech.bins);
        for t in 0..speech.frames {
            for f in 0..speech.bins {
                let (mut ps, mut pn) = (0.0, 0.0);
                for c in 0..speech.channels {
                    ps += speech.get(c, t, f).norm_sqr();
                    pn += noise.get(c, t, f).norm_sqr();
                }
                let total = ps + pn;
                m.push(if total > 0.0 { ps / total } else { 0.0 });
            }
        }
        Self::new(speech.frames, speech.bins, m)
    }

    /// Minimum-statistics noise-floor tracker with a Wiener-style speech weight
    /// `max(0, 1 − over · floor / power)`.
    pub fn noise_floor(x: &MultiStft, window_frames: usize, oversubtract: f64) -> Result<Self> {
        let (frames, bins) = (x.frames, x.bins);
        let window_frames = window_frames.max(1);
        let mut m = vec![0.0; frames * bins];
        let mut smoothed = vec![0.0; frames];
        for f in 0..bins {
            let mut prev = 0.0;
            for (t, s) in smoothed.iter_mut().enumerate() {
                let p = (0..x.channels).map(|c| x.get(c, t, f).norm_sqr()).sum::<f64>() / x.channels as f64;
                prev = if t == 0 { p } else { 0.7 * prev + 0.3 * p };
                *s = prev;
            }
            for t in 0..frames {
                let lo = t.saturating_sub(window_frames);
                let hi = (t + window_frames + 1).min(frames);
                let floor = smoothed[lo..hi].iter().copied().fold(f64::INFINITY, f64::min);
                let p = smoothed[t];
                m[t * bins + f] = if p > 0.0 {
                    (1.0 - oversubtract * floor / p).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        Self::new(frames, bins, m)
    }
}

/// Per-bin spatial covariance matrices.
#[derive(Debug, Clone)]
pub struct SpatialCovariances {
    pub speech: Vec<DMatrix<Complex64>>,
    /// Includes diagonal loading of `1e-6 · trace / channels`.
    pub noise: Vec<DMatrix<Complex64>>,
    /// Bins whose noise mask summed to zero (or carried no energy); their
    /// noise covariance fell back to the identity.
    pub degenerate_bins: Vec<usize>,
}

pub const DIAGONAL_LOADING: f64 = 1e-6;

fn weighted_covariance(
    x: &MultiStft,
    f: usize,
    weight: impl Fn(usize) -> f64,
) -> Option<DMatrix<Complex64>> {
    let m = x.channels;
    let mut r = DMatrix::<Complex64>::zeros(m, m);
    let mut total = 0.0;
    for t in 0..x.frames {
        let w = weight(t);
        if w <= 0.0 {
            continue;
        }
        total += w;
        let v = x.cell(t, f);
        for i in 0..m {
            for j in 0..m {
                r[(i, j)] += v[i] * v[j].conj() * w;
            }
        }
    }
    (total > 0.0).then(|| r / Complex64::from(total))
}

pub fn estimate_covariances(x: &MultiStft, mask: &TfMask) -> Result<SpatialCovariances> {
    if (mask.frames, mask.bins) != (x.frames, x.bins) {
        return Err(KwsError::contract(format!(
            "mask is {}x{} but spectrogram is {}x{}",
            mask.frames, mask.bins, x.frames, x.bins
        )));
    }
    let m = x.channels;
    let mut speech = Vec::with_capacity(x.bins);
    let mut noise = Vec::with_capacity(x.bins);
    let mut degenerate_bins = Vec::new();
    for f in 0..x.bins {
        speech.push(
            weighted_covariance(x, f, |t| mask.speech(t, f))
                .unwrap_or_else(|| DMatrix::zeros(m, m)),
        );
        let rn = weighted_covariance(x, f, |t| mask.noise(t, f));
        match rn {
            Some(mut r) if r.trace().re > 0.0 => {
                let load = DIAGONAL_LOADING * r.trace().re / m as f64;
                for i in 0..m {
                    r[(i, i)] += Complex64::from(load);
                }
                noise.push(r);
            }
            _ => {
                degenerate_bins.push(f);
                noise.push(DMatrix::identity(m, m));
            }
        }
    }
    Ok(SpatialCovariances {
        speech,
        noise,
        degenerate_bins,
    })
}

/// `w = R⁻¹d / (dᴴR⁻¹d)`, solved through a Cholesky factorization.
pub fn mvdr_weights(
    r_noise: &DMatrix<Complex64>,
    d: &DVector<Complex64>,
    bin: usize,
) -> Result<DVector<Complex64>> {
    let chol = r_noise.clone().cholesky().ok_or_else(|| KwsError::Numeric {
        bin,
        msg: "noise covariance is not positive definite".into(),
    })?;
    let rinv_d = chol.solve(d);
    let denom = d.dotc(&rinv_d);
    if !(denom.norm() > 0.0) || !denom.re.is_finite() {
        return Err(KwsError::Numeric {
            bin,
            msg: "degenerate MVDR normalization".into(),
        });
    }
    Ok(rinv_d / denom)
}

/// `wᴴx` at every cell.
pub fn apply_beamformer(x: &MultiStft, weights: &[DVector<Complex64>]) -> Spectrogram {
    let mut data = Vec::with_capacity(x.frames * x.bins);
    for t in 0..x.frames {
        for (f, w) in weights.iter().enumerate() {
            let y = (0..x.channels).map(|c| w[c].conj() * x.get(c, t, f)).sum();
            data.push(y);
        }
    }
    Spectrogram {
        frames: x.frames,
        bins: x.bins,
        data,
    }
}

/// MVDR weights for every bin toward `dir`.
pub fn design_mvdr(
    cov: &SpatialCovariances,
    dir: LookDirection,
    geom: &ArrayGeometry,
    stft: &FrontendStft,
) -> Result<Vec<DVector<Complex64>>> {
    cov.noise
        .iter()
        .enumerate()
        .map(|(f, r)| mvdr_weights(r, &steering_vector(dir, geom, stft.bin_hz(f)), f))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WpeConfig {
    pub taps: usize,
    pub delay: usize,
    pub iterations: usize,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self {
            taps: 10,
            delay: 3,
            iterations: 3,
        }
    }
}

/// Outcome of a WPE pass.
#[derive(Debug, Clone)]
pub struct WpeOutput {
    pub stft: MultiStft,
    /// Squared Frobenius norm of the final prediction filters, summed over bins.
    pub filter_energy: f64,
    /// Bins whose normal equations needed extra regularization.
    pub regularized_bins: Vec<usize>,
}

const WPE_POWER_FLOOR: f64 = 1e-10;
const WPE_RELATIVE_FLOOR: f64 = 1e-3;
const WPE_LOADING: f64 = 1e-6;

/// Multi-channel WPE: per bin, alternate between estimating the desired
/// signal's power and solving the power-weighted normal equations for a
/// prediction filter over frames `[t − delay − taps + 1, t − delay]`, then
/// subtract the predicted late reverberation.
pub fn wpe_dereverb(x: &MultiStft, cfg: &WpeConfig) -> Result<WpeOutput> {
    if cfg.taps == 0 || cfg.delay == 0 {
        return Err(KwsError::config("WPE taps and delay must be at least 1"));
    }
    let mut out = x.clone();
    let mut filter_energy = 0.0;
    let mut regularized_bins = Vec::new();
    if cfg.iterations == 0 {
        return Ok(WpeOutput {
            stft: out,
            filter_energy,
            regularized_bins,
        });
    }
    let m = x.channels;
    let k = cfg.taps;
    let mk = m * k;
    let frames = x.frames;
    for f in 0..x.bins {
        let obs = DMatrix::from_fn(frames, m, |t, c| x.get(c, t, f));
        let obs_conj = obs.conjugate();
        let history = DMatrix::from_fn(frames, mk, |t, j| {
            let lag = cfg.delay + j / m;
            if t >= lag {
                x.get(j % m, t - lag, f)
            } else {
                Complex64::default()
            }
        });
        let history_conj = history.conjugate();
        let mut desired = obs.clone();
        let mut g = DMatrix::<Complex64>::zeros(mk, m);
        for _ in 0..cfg.iterations {
            let power: Vec<f64> = desired.row_iter().map(|d| d.norm_squared() / m as f64).collect();
            let floor = (WPE_RELATIVE_FLOOR * power.iter().sum::<f64>() / frames as f64).max(WPE_POWER_FLOOR);
            let mut weighted = history.clone();
            for (t, mut row) in weighted.row_iter_mut().enumerate() {
                row.scale_mut(1.0 / power[t].max(floor));
            }
            let r = weighted.tr_mul(&history_conj);
            let p = weighted.tr_mul(&obs_conj);
            let (solution, bumped) = solve_regularized(&r, &p);
            if bumped && !regularized_bins.contains(&f) {
                regularized_bins.push(f);
            }
            g = solution;
            desired = &obs - &history * g.conjugate();
        }
        filter_energy += g.iter().map(|z| z.norm_sqr()).sum::<f64>();
        for t in 0..frames {
            for c in 0..m {
                out.set(c, t, f, desired[(t, c)]);
            }
        }
    }
    Ok(WpeOutput {
        stft: out,
        filter_energy,
        regularized_bins,
    })
}

/// Solves `(R + δI) G = P`, raising `δ` until the factorization succeeds.
fn solve_regularized(r: &DMatrix<Complex64>, p: &DMatrix<Complex64>) -> (DMatrix<Complex64>, bool) {
    let n = r.nrows();
    let scale = (r.trace().re / n as f64).max(WPE_POWER_FLOOR);
    let mut delta = WPE_LOADING * scale;
    let mut bumped = false;
    for _ in 0..12 {
        let mut a = r.clone();
        for i in 0..n {
            a[(i, i)] += Complex64::from(delta);
        }
        if let Some(chol) = a.cholesky() {
            let g = chol.solve(p);
            if g.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return (g, bumped);
            }
        }
        delta *= 10.0;
        bumped = true;
    }
    (DMatrix::zeros(n, p.ncols()), true)
}

/// How speech-presence masks are obtained for covariance estimation.
#[derive(Debug, Clone)]
pub enum MaskSource {
    /// Known speech and noise components of the input (synthetic data).
    Oracle { speech: Waveform, noise: Waveform },
    /// Noise-floor tracking on the observed signal.
    NoiseFloor { window_frames: usize, oversubtract: f64 },
}

impl Default for MaskSource {
    fn default() -> Self {
        MaskSource::NoiseFloor {
            window_frames: 60,
            oversubtract: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub geometry: ArrayGeometry,
    pub looks_deg: Vec<f64>,
    pub win_len: usize,
    pub hop: usize,
    /// WPE pre-pass before beamforming; `None` disables it.
    pub wpe: Option<WpeConfig>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            geometry: ArrayGeometry::default(),
            looks_deg: DEFAULT_LOOKS_DEG.to_vec(),
            win_len: 512,
            hop: 128,
            wpe: Some(WpeConfig::default()),
        }
    }
}

/// Result of the multi-look front end.
#[derive(Debug, Clone)]
pub struct MultiLookOutput {
    /// Beams in look order followed by the untouched raw channel 0.
    pub waveform: Waveform,
    pub degenerate_bins: Vec<usize>,
    pub wpe_regularized_bins: Vec<usize>,
}

pub fn dereverberate(w: &Waveform, cfg: &WpeConfig, win_len: usize, hop: usize) -> Result<(Waveform, WpeOutput)> {
    let stft = FrontendStft::new(win_len, hop, w.sample_rate())?;
    let x = stft.analyze(w)?;
    let out = wpe_dereverb(&x, cfg)?;
    let chans: Vec<Vec<f64>> = (0..w.channels())
        .map(|c| stft.synthesize_channel(&out.stft, c, w.len()))
        .collect();
    Ok((Waveform::from_f64(&chans, w.sample_rate())?, out))
}

/// Turns a 6-channel recording into `looks + 1` channels: one MVDR beam per
/// look direction (after the optional WPE pass) and the raw channel 0.
pub fn multi_look_stack(w: &Waveform, cfg: &FrontendConfig, masks: &MaskSource) -> Result<MultiLookOutput> {
    if w.channels() != 6 {
        return Err(KwsError::contract(format!(
            "multi-look front end needs 6 input channels, got {}",
            w.channels()
        )));
    }
    if cfg.geometry.elements() != w.channels() {
        return Err(KwsError::config(format!(
            "geometry has {} elements for {} channels",
            cfg.geometry.elements(),
            w.channels()
        )));
    }
    let looks = cfg
        .looks_deg
        .iter()
        .map(|&d| LookDirection::new(d))
        .collect::<Result<Vec<_>>>()?;
    let stft = FrontendStft::new(cfg.win_len, cfg.hop, w.sample_rate())?;
    let mut x = stft.analyze(w)?;
    let mut wpe_regularized_bins = Vec::new();
    if let Some(wpe) = &cfg.wpe {
        let out = wpe_dereverb(&x, wpe)?;
        x = out.stft;
        wpe_regularized_bins = out.regularized_bins;
    }
    let mask = match masks {
        MaskSource::Oracle { speech, noise } => TfMask::oracle(&stft.analyze(speech)?, &stft.analyze(noise)?)?,
        MaskSource::NoiseFloor {
            window_frames,
            oversubtract,
        } => TfMask::noise_floor(&x, *window_frames, *oversubtract)?,
    };
    let cov = estimate_covariances(&x, &mask)?;
    let mut channels = Vec::with_capacity(looks.len() + 1);
    for &dir in &looks {
        let weights = design_mvdr(&cov, dir, &cfg.geometry, &stft)?;
        let beam = apply_beamformer(&x, &weights);
        let y = stft.synthesize_spectrogram(&beam, w.len());
        channels.push(y.iter().map(|&v| v as f32).collect::<Vec<f32>>());
    }
    channels.push(w.channel(0).to_vec());
    Ok(MultiLookOutput {
        waveform: Waveform::new(channels, w.sample_rate())?,
        degenerate_bins: cov.degenerate_bins,
        wpe_regularized_bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadside_steering_is_all_ones() {
        let g = ArrayGeometry::default();
        let d = steering_vector(LookDirection::new(90.0).unwrap(), &g, 3000.0);
        for z in d.iter() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn endfire_steering_phase_matches_plane_wave() {
        let g = ArrayGeometry::uniform(4, 0.05).unwrap();
        let f = 1200.0;
        let d = steering_vector(LookDirection::new(0.0).unwrap(), &g, f);
        let expect = -2.0 * std::f64::consts::PI * f * 0.05 / 343.0;
        for k in 1..4 {
            let step = (d[k] * d[k - 1].conj()).arg();
            assert!((step - expect).abs() < 1e-12);
            assert!((d[k].norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn geometry_and_direction_validation() {
        assert!(ArrayGeometry::new(vec![0.0], 343.0).is_err());
        assert!(ArrayGeometry::new(vec![0.0, 0.0], 343.0).is_err());
        assert!(LookDirection::new(181.0).is_err());
        assert!(LookDirection::new(-1.0).is_err());
    }

    #[test]
    fn identity_covariance_gives_delay_and_sum() {
        let g = ArrayGeometry::default();
        let d = steering_vector(LookDirection::new(30.0).unwrap(), &g, 2000.0);
        let w = mvdr_weights(&DMatrix::identity(6, 6), &d, 0).unwrap();
        let ds = &d / Complex64::from(d.norm_squared());
        assert!((w - ds).norm() < 1e-12);
    }

    #[test]
    fn singular_covariance_names_the_bin() {
        let d = DVector::from_element(2, Complex64::new(1.0, 0.0));
        let err = mvdr_weights(&DMatrix::zeros(2, 2), &d, 17).unwrap_err();
        assert!(matches!(err, KwsError::Numeric { bin: 17, .. }));
    }

    #[test]
    fn wpe_zero_iterations_is_identity() {
        let x = MultiStft {
            channels: 2,
            frames: 5,
            bins: 3,
            data: (0..30).map(|i| Complex64::new(i as f64, -(i as f64) * 0.5)).collect(),
        };
        let out = wpe_dereverb(
            &x,
            &WpeConfig {
                iterations: 0,
                ..WpeConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.stft, x);
        assert!(wpe_dereverb(&x, &WpeConfig { taps: 0, ..WpeConfig::default() }).is_err());
    }

    #[test]
    fn mask_validation() {
        assert!(TfMask::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(TfMask::new(1, 2, vec![0.5]).is_err());
        let m = TfMask::new(1, 2, vec![0.25, 1.0]).unwrap();
        assert_eq!(m.speech(0, 0) + m.noise(0, 0), 1.0);
    }

    #[test]
    fn degenerate_bins_fall_back_to_identity() {
        let x = MultiStft {
            channels: 2,
            frames: 4,
            bins: 2,
            data: vec![Complex64::new(1.0, 0.5); 16],
        };
        let mask = TfMask::new(4, 2, vec![1.0, 0.5, 1.0, 0.5, 1.0, 0.5, 1.0, 0.5]).unwrap();
        let cov = estimate_covariances(&x, &mask).unwrap();
        assert_eq!(cov.degenerate_bins, vec![0]);
        assert_eq!(cov.noise[0], DMatrix::identity(2, 2));
    }
}
