//! Seeded synthetic multi-channel scenes: a keyword tone pattern arriving as a
//! plane wave at a linear array, babble interferers at their own azimuths,
//! optional exponential reverberation, and per-microphone diffuse noise mixed
//! to a target SNR.
//!
//! Each component draws from its own RNG stream, so a negative scene is
//! exactly the positive scene with the keyword component removed.

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::array::{ArrayGeometry, LookDirection};
use crate::dsp::Waveform;
use crate::error::{KwsError, Result};
use crate::manifest::FieldTag;

const STREAM_KEYWORD: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_INTERFERER: u64 = 3;
const STREAM_REVERB: u64 = 4;
const SINC_HALF: i64 = 16;
const KEYWORD_RMS_AT_1M: f64 = 0.1;
const DIFFUSE_TALKERS: usize = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// One voiced segment: a harmonic complex whose fundamental glides linearly,
/// shaped by three Gaussian formant resonances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Syllable {
    pub duration_s: f64,
    pub f0_start: f64,
    pub f0_end: f64,
    pub formants: [f64; 3],
    pub gap_after_s: f64,
}

impl Syllable {
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            duration_s: rng.random_range(0.08..0.26),
            f0_start: rng.random_range(110.0..300.0),
            f0_end: rng.random_range(110.0..300.0),
            formants: [
                rng.random_range(300.0..900.0),
                rng.random_range(900.0..2300.0),
                rng.random_range(2300.0..3500.0),
            ],
            gap_after_s: rng.random_range(0.02..0.25),
        }
    }

    fn render(&self, pitch: f64, tempo: f64, sample_rate: f64, out: &mut Vec<f64>) {
        let n = (self.duration_s * tempo * sample_rate).round() as usize;
        let ramp = (0.015 * sample_rate) as usize;
        let top = (0.45 * sample_rate).min(4500.0);
        // Formant response sampled every hertz up to the top harmonic.
        let response: Vec<f64> = (0..=top.ceil() as usize + 1)
            .map(|f| {
                self.formants
                    .iter()
                    .enumerate()
                    .map(|(k, &fc)| {
                        let bw = 120.0 + 80.0 * k as f64;
                        (-(f as f64 - fc * pitch.sqrt()).powi(2) / (2.0 * bw * bw)).exp() / (k + 1) as f64
                    })
                    .sum()
            })
            .collect();
        let gain_at = |f: f64| {
            let i = f.floor() as usize;
            let t = f - i as f64;
            response[i] * (1.0 - t) + response[i + 1] * t
        };
        let mut phase = 0.0;
        for i in 0..n {
            let a = i as f64 / n.max(1) as f64;
            let f0 = pitch * (self.f0_start + (self.f0_end - self.f0_start) * a);
            phase += 2.0 * PI * f0 / sample_rate;
            let (s1, c1) = phase.sin_cos();
            let (mut prev, mut cur) = (0.0, s1);
            let mut v = 0.0;
            let mut h = 1;
            while h as f64 * f0 < top {
                v += gain_at(h as f64 * f0) * cur;
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
                h += 1;
            }
            let env = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if i + ramp > n {
                0.5 - 0.5 * (PI * (n - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            out.push(v * env);
        }
        let gap = (self.gap_after_s * tempo * sample_rate).round() as usize;
        out.extend(std::iter::repeat_n(0.0, gap));
    }
}

/// The fixed keyword pattern of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordTemplate {
    pub syllables: Vec<Syllable>,
}

impl KeywordTemplate {
    /// Two syllables: a rising glide then a falling glide with contrasting vowels.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = Syllable {
            duration_s: rng.random_range(0.22..0.28),
            f0_start: rng.random_range(150.0..170.0),
            f0_end: rng.random_range(250.0..280.0),
            formants: [
                rng.random_range(650.0..750.0),
                rng.random_range(1100.0..1300.0),
                rng.random_range(2500.0..2700.0),
            ],
            gap_after_s: rng.random_range(0.06..0.09),
        };
        let second = Syllable {
            duration_s: rng.random_range(0.24..0.3),
            f0_start: rng.random_range(260.0..290.0),
            f0_end: rng.random_range(140.0..160.0),
            formants: [
                rng.random_range(280.0..340.0),
                rng.random_range(2100.0..2400.0),
                rng.random_range(2900.0..3200.0),
            ],
            gap_after_s: 0.0,
        };
        Self {
            syllables: vec![first, second],
        }
    }

    /// Renders at unit RMS.
    pub fn render(&self, pitch: f64, tempo: f64, sample_rate: u32) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.syllables {
            s.render(pitch, tempo, f64::from(sample_rate), &mut out);
        }
        normalize_rms(&mut out);
        out
    }
}

fn normalize_rms(x: &mut [f64]) {
    let p = mean_power(x);
    if p > 0.0 {
        let g = p.sqrt().recip();
        x.iter_mut().for_each(|v| *v *= g);
    }
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourcePlacement {
    pub azimuth_deg: f64,
    pub distance_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterfererSpec {
    pub azimuth_deg: f64,
    /// Keyword-to-interferer power ratio at microphone 0, dB.
    pub sir_db: f64,
}

/// Direct path followed by an independent, exponentially decaying Gaussian
/// tail at each microphone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReverbSpec {
    /// Time for the tail envelope to fall by 60 dB.
    pub rt60_s: f64,
    /// Direct-to-reverberant energy ratio, dB.
    pub drr_db: f64,
    pub predelay_s: f64,
}

impl Default for ReverbSpec {
    fn default() -> Self {
        Self {
            rt60_s: 0.4,
            drr_db: 0.0,
            predelay_s: 0.004,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub template_seed: u64,
    pub source: SourcePlacement,
    pub keyword_present: bool,
    pub interferers: Vec<InterfererSpec>,
    /// Keyword-to-diffuse-noise ratio at microphone 0 over the keyword span; `None` for no noise.
    pub snr_db: Option<f64>,
    /// Share of the diffuse noise power carried by per-microphone babble; the
    /// rest is broadband colored noise.
    pub diffuse_babble: f64,
    pub reverb: Option<ReverbSpec>,
    pub geometry: ArrayGeometry,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Uniform relative pitch jitter, e.g. 0.05 for ±5%.
    pub pitch_jitter: f64,
    pub tempo_jitter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            template_seed: 7,
            source: SourcePlacement {
                azimuth_deg: 90.0,
                distance_m: 3.0,
            },
            keyword_present: true,
            interferers: Vec::new(),
            snr_db: Some(5.0),
            diffuse_babble: 0.5,
            reverb: None,
            geometry: ArrayGeometry::default(),
            duration_s: 2.0,
            sample_rate: 16000,
            pitch_jitter: 0.06,
            tempo_jitter: 0.1,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(KwsError::config("scene duration must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(KwsError::config("sample rate must be positive"));
        }
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return Err(KwsError::config("SNR must be finite"));
            }
        }
        LookDirection::new(self.source.azimuth_deg)?;
        for i in &self.interferers {
            LookDirection::new(i.azimuth_deg)?;
            if !i.sir_db.is_finite() {
                return Err(KwsError::config("SIR must be finite"));
            }
        }
        if !(self.source.distance_m > 0.0) {
            return Err(KwsError::config("source distance must be positive"));
        }
        if let Some(r) = &self.reverb {
            if !(r.rt60_s > 0.0) || !r.drr_db.is_finite() || r.predelay_s < 0.0 {
                return Err(KwsError::config("invalid reverb spec"));
            }
        }
        if !(0.0..=1.0).contains(&self.diffuse_babble) {
            return Err(KwsError::config("diffuse babble share must lie in [0, 1]"));
        }
        if !(0.0..0.5).contains(&self.pitch_jitter) || !(0.0..0.5).contains(&self.tempo_jitter) {
            return Err(KwsError::config("jitter must lie in [0, 0.5)"));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * f64::from(self.sample_rate)).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub mixture: Waveform,
    pub label: u8,
    /// Keyword as received, including reverberation; silent for negatives.
    pub keyword: Waveform,
    /// Direct-path keyword at every microphone; silent for negatives.
    pub clean: Waveform,
    /// Everything except the keyword.
    pub noise: Waveform,
    /// Diffuse noise alone.
    pub diffuse: Waveform,
    /// Sample range of the direct-path keyword at microphone 0.
    pub keyword_span: Range<usize>,
}

/// `y[n] = x(n − delay)` by windowed-sinc interpolation; delays within 1e-9
/// of an integer shift exactly.
pub fn fractional_delay(x: &[f64], delay: f64) -> Vec<f64> {
    let len = x.len() as i64;
    let nearest = delay.round();
    let delay = if (delay - nearest).abs() < 1e-9 { nearest } else { delay };
    let whole = delay.floor();
    let frac = delay - whole;
    let whole = whole as i64;
    let mut y = vec![0.0; x.len()];
    if frac == 0.0 {
        for (n, v) in y.iter_mut().enumerate() {
            let j = n as i64 - whole;
            if (0..len).contains(&j) {
                *v = x[j as usize];
            }
        }
        return y;
    }
    let taps: Vec<(i64, f64)> = (-SINC_HALF + 1..=SINC_HALF)
        .map(|m| {
            let u = m as f64 - frac;
            let sinc = (PI * u).sin() / (PI * u);
            let r = u / SINC_HALF as f64;
            let win = 0.42 + 0.5 * (PI * r).cos() + 0.08 * (2.0 * PI * r).cos();
            (m, sinc * win)
        })
        .collect();
    // Output n reads x[n - whole - m] for m in the tap range; samples whose
    // whole window lies inside x take the unchecked path.
    let lo = (whole + SINC_HALF).max(0);
    let hi = (len + whole - SINC_HALF + 1).clamp(lo, len);
    let h: Vec<f64> = taps.iter().rev().map(|&(_, h)| h).collect();
    for (n, v) in y.iter_mut().enumerate() {
        let ni = n as i64;
        if ni >= lo && ni < hi {
            let start = (ni - whole - SINC_HALF) as usize;
            *v = x[start..start + h.len()].iter().zip(&h).map(|(a, b)| a * b).sum();
        } else {
            let mut acc = 0.0;
            for &(m, h) in &taps {
                let j = ni - whole - m;
                if (0..len).contains(&j) {
                    acc += x[j as usize] * h;
                }
            }
            *v = acc;
        }
    }
    y
}

/// Linear convolution truncated to `x.len()` samples.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = (x.len() + h.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(n, Complex64::default());
    let mut b: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    b.resize(n, Complex64::default());
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a.iter().take(x.len()).map(|z| z.re / n as f64).collect()
}

fn plane_wave(signal: &[f64], dir_deg: f64, geom: &ArrayGeometry, gain: f64, sr: f64) -> Vec<Vec<f64>> {
    let dir = LookDirection::new(dir_deg).expect("validated azimuth");
    (0..geom.elements())
        .map(|k| {
            let d = geom.relative_delay(k, dir) * sr;
            let mut y = fractional_delay(signal, d);
            y.iter_mut().for_each(|v| *v *= gain);
            y
        })
        .collect()
}

/// Unit-energy-direct impulse response tails, one per microphone.
pub fn reverb_tails(spec: &ReverbSpec, mics: usize, sample_rate: u32, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, STREAM_REVERB);
    let sr = f64::from(sample_rate);
    let pre = (spec.predelay_s * sr).round() as usize;
    let len = (spec.rt60_s * sr).ceil() as usize;
    let decay = 6.907_755_278_982_137 / (spec.rt60_s * sr);
    let target = 10f64.powf(-spec.drr_db / 10.0);
    (0..mics)
        .map(|_| {
            let mut h = vec![0.0; pre + len];
            let step = (-decay).exp();
            let mut env = 1.0;
            for v in h[pre..].iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = g * env;
                env *= step;
            }
            let e: f64 = h.iter().map(|v| v * v).sum();
            let s = (target / e).sqrt();
            h.iter_mut().for_each(|v| *v *= s);
            h
        })
        .collect()
}

fn babble(len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(len + sample_rate as usize);
    let lead = rng.random_range(0..(sample_rate as usize / 5));
    out.extend(std::iter::repeat_n(0.0, lead));
    while out.len() < len {
        Syllable::random(rng).render(1.0, 1.0, f64::from(sample_rate), &mut out);
    }
    out.truncate(len);
    normalize_rms(&mut out);
    out
}

fn colored_noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut lp = 0.0;
    (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            lp = 0.6 * lp + 0.4 * w;
            0.5 * w + lp
        })
        .collect()
}

fn to_waveform(chans: &[Vec<f64>], sr: u32) -> Waveform {
    Waveform::from_f64(chans, sr).expect("equal-length channels")
}

pub fn synthesize_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let sr = f64::from(cfg.sample_rate);
    let len = cfg.samples();
    let mics = cfg.geometry.elements();

    let mut krng = stream(cfg.seed, STREAM_KEYWORD);
    let pitch = 1.0 + krng.random_range(-1.0..=1.0) * cfg.pitch_jitter;
    let tempo = 1.0 + krng.random_range(-1.0..=1.0) * cfg.tempo_jitter;
    let template = KeywordTemplate::from_seed(cfg.template_seed);
    let kw = template.render(pitch, tempo, cfg.sample_rate);
    let margin = (0.05 * sr) as usize;
    let latest = len.saturating_sub(kw.len() + margin).max(margin);
    let onset = krng.random_range(margin.min(latest)..=latest);
    let mut source = vec![0.0; len];
    let end = (onset + kw.len()).min(len);
    source[onset..end].copy_from_slice(&kw[..end - onset]);
    let gain = KEYWORD_RMS_AT_1M / cfg.source.distance_m;
    let clean = plane_wave(&source, cfg.source.azimuth_deg, &cfg.geometry, gain, sr);
    let keyword = match &cfg.reverb {
        Some(spec) => {
            let tails = reverb_tails(spec, mics, cfg.sample_rate, cfg.seed);
            clean
                .iter()
                .zip(&tails)
                .map(|(c, h)| {
                    let tail = fft_convolve(c, h);
                    c.iter().zip(&tail).map(|(a, b)| a + b).collect()
                })
                .collect()
        }
        None => clean.clone(),
    };
    let span = onset..end;
    let kw_power = mean_power(&clean[0][span.clone()]);

    let mut noise = vec![vec![0.0; len]; mics];
    let mut irng = stream(cfg.seed, STREAM_INTERFERER);
    for spec in &cfg.interferers {
        let b = babble(len, cfg.sample_rate, &mut irng);
        let g = (kw_power / 10f64.powf(spec.sir_db / 10.0)).sqrt();
        for (n, ch) in noise.iter_mut().zip(plane_wave(&b, spec.azimuth_deg, &cfg.geometry, g, sr)) {
            n.iter_mut().zip(ch).for_each(|(a, b)| *a += b);
        }
    }

    let mut diffuse = vec![vec![0.0; len]; mics];
    if let Some(snr) = cfg.snr_db {
        let mut nrng = stream(cfg.seed, STREAM_NOISE);
        let share = cfg.diffuse_babble;
        for d in diffuse.iter_mut() {
            let colored = colored_noise(len, &mut nrng);
            let p = mean_power(&colored).max(f64::MIN_POSITIVE);
            let mut b = vec![0.0; len];
            for _ in 0..DIFFUSE_TALKERS {
                b.iter_mut().zip(babble(len, cfg.sample_rate, &mut nrng)).for_each(|(a, v)| *a += v);
            }
            normalize_rms(&mut b);
            let (gc, gb) = ((1.0 - share).sqrt() / p.sqrt(), share.sqrt());
            *d = colored.iter().zip(&b).map(|(c, b)| gc * c + gb * b).collect();
        }
        let p = mean_power(&diffuse[0][span.clone()]);
        let g = (kw_power / 10f64.powf(snr / 10.0) / p).sqrt();
        for d in diffuse.iter_mut() {
            d.iter_mut().for_each(|v| *v *= g);
        }
    }
    for (n, d) in noise.iter_mut().zip(&diffuse) {
        n.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }

    let (keyword, clean) = if cfg.keyword_present {
        (keyword, clean)
    } else {
        (vec![vec![0.0; len]; mics], vec![vec![0.0; len]; mics])
    };
    let mixture: Vec<Vec<f64>> = keyword
        .iter()
        .zip(&noise)
        .map(|(k, n)| k.iter().zip(n).map(|(a, b)| a + b).collect())
        .collect();
    Ok(Scene {
        mixture: to_waveform(&mixture, cfg.sample_rate),
        label: u8::from(cfg.keyword_present),
        keyword: to_waveform(&keyword, cfg.sample_rate),
        clean: to_waveform(&clean, cfg.sample_rate),
        noise: to_waveform(&noise, cfg.sample_rate),
        diffuse: to_waveform(&diffuse, cfg.sample_rate),
        keyword_span: span,
    })
}

/// Distribution over scene configurations for corpus generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenePrior {
    pub template_seed: u64,
    pub field: FieldTag,
    pub positive_fraction: f64,
    pub snr_db: (f64, f64),
    pub diffuse_babble: f64,
    pub distance_m: (f64, f64),
    pub azimuth_deg: (f64, f64),
    pub max_interferers: usize,
    pub sir_db: (f64, f64),
    pub reverb_probability: f64,
    pub rt60_s: (f64, f64),
    pub drr_db: (f64, f64),
    pub geometry: ArrayGeometry,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl Default for ScenePrior {
    fn default() -> Self {
        Self {
            template_seed: 7,
            field: FieldTag::Far,
            positive_fraction: 0.5,
            snr_db: (0.0, 10.0),
            diffuse_babble: 1.0,
            distance_m: (3.0, 5.0),
            azimuth_deg: (0.0, 180.0),
            max_interferers: 1,
            sir_db: (10.0, 20.0),
            reverb_probability: 0.5,
            rt60_s: (0.2, 0.6),
            drr_db: (0.0, 10.0),
            geometry: ArrayGeometry::default(),
            duration_s: 2.0,
            sample_rate: 16000,
        }
    }
}

impl ScenePrior {
    /// Conventional settings for each recording field.
    pub fn for_field(field: FieldTag) -> Self {
        let base = Self {
            field,
            ..Self::default()
        };
        match field {
            FieldTag::Near => Self {
                snr_db: (10.0, 20.0),
                distance_m: (0.2, 0.5),
                max_interferers: 1,
                reverb_probability: 0.0,
                ..base
            },
            FieldTag::Mid => Self {
                snr_db: (5.0, 15.0),
                distance_m: (1.0, 1.5),
                reverb_probability: 0.3,
                ..base
            },
            FieldTag::Far => base,
        }
    }

    pub fn draw(&self, seed: u64) -> SceneConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut range = |r: (f64, f64)| if r.1 > r.0 { rng.random_range(r.0..=r.1) } else { r.0 };
        let azimuth = range(self.azimuth_deg);
        let distance = range(self.distance_m);
        let snr = range(self.snr_db);
        let rt60 = range(self.rt60_s);
        let drr = range(self.drr_db);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ce7e);
        let keyword_present = rng.random_bool(self.positive_fraction.clamp(0.0, 1.0));
        let reverb = rng
            .random_bool(self.reverb_probability.clamp(0.0, 1.0))
            .then_some(ReverbSpec {
                rt60_s: rt60,
                drr_db: drr,
                ..ReverbSpec::default()
            });
        let n_int = rng.random_range(0..=self.max_interferers);
        let interferers = (0..n_int)
            .map(|_| InterfererSpec {
                azimuth_deg: rng.random_range(0.0..=180.0),
                sir_db: if self.sir_db.1 > self.sir_db.0 {
                    rng.random_range(self.sir_db.0..=self.sir_db.1)
                } else {
                    self.sir_db.0
                },
            })
            .collect();
        SceneConfig {
            template_seed: self.template_seed,
            source: SourcePlacement {
                azimuth_deg: azimuth.clamp(0.0, 180.0),
                distance_m: distance,
            },
            keyword_present,
            interferers,
            snr_db: Some(snr),
            diffuse_babble: self.diffuse_babble,
            reverb,
            geometry: self.geometry.clone(),
            duration_s: self.duration_s,
            sample_rate: self.sample_rate,
            seed,
            ..SceneConfig::default()
        }
    }

    /// Draws and renders a scene, keeping the channels the field carries.
    pub fn render(&self, seed: u64) -> Result<(Scene, Waveform)> {
        let scene = synthesize_scene(&self.draw(seed))?;
        let keep: Vec<usize> = (0..self.field.channels()).collect();
        let w = scene.mixture.select(&keep)?;
        Ok((scene, w))
    }
}
