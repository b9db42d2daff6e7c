use kws_core::array::*;
use kws_core::dsp::Waveform;
use kws_core::scene::{fft_convolve, reverb_tails, synthesize_scene, InterfererSpec, ReverbSpec, SceneConfig, SourcePlacement};
use kws_core::KwsError;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn cn(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn random_hpd(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
    let a = DMatrix::from_fn(m, m, |_, _| cn(rng));
    &a * a.adjoint() + DMatrix::identity(m, m) * Complex64::from(0.1)
}

#[test]
fn single_frame_all_ones_mask_gives_outer_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<Complex64> = (0..3).map(|_| cn(&mut rng)).collect();
    let x = MultiStft { channels: 3, frames: 1, bins: 1, data };
    let mask = TfMask::new(1, 1, vec![1.0]).unwrap();
    let cov = estimate_covariances(&x, &mask).unwrap();
    let v = x.cell(0, 0);
    let want = &v * v.adjoint();
    assert!((&cov.speech[0] - want).norm() < 1e-12);
}

#[test]
fn white_noise_covariance_tends_to_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (m, frames) = (4, 4000);
    let mut data = vec![Complex64::default(); m * frames];
    for v in data.iter_mut() {
        *v = cn(&mut rng);
    }
    let x = MultiStft { channels: m, frames, bins: 1, data };
    let mask = TfMask::new(frames, 1, vec![0.0; frames]).unwrap();
    let cov = estimate_covariances(&x, &mask).unwrap();
    let r = &cov.noise[0];
    for i in 0..m {
        for j in 0..m {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((r[(i, j)] - Complex64::from(want)).norm() < 0.1, "({i},{j}) {}", r[(i, j)]);
        }
    }
    assert!((r - r.adjoint()).camax() < 1e-10);
}

#[test]
fn covariances_are_hermitian_and_loaded_noise_is_pd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, frames, bins) = (6, 40, 5);
    let data = (0..m * frames * bins).map(|_| cn(&mut rng)).collect();
    let x = MultiStft { channels: m, frames, bins, data };
    let mask = TfMask::new(frames, bins, (0..frames * bins).map(|_| rng.random::<f64>()).collect()).unwrap();
    let cov = estimate_covariances(&x, &mask).unwrap();
    for f in 0..bins {
        for r in [&cov.speech[f], &cov.noise[f]] {
            assert!((r - r.adjoint()).camax() < 1e-10);
        }
        assert!(cov.noise[f].clone().cholesky().is_some());
    }
    assert!(cov.degenerate_bins.is_empty());
}

#[test]
fn mask_extent_mismatch_is_a_contract_error() {
    let x = MultiStft { channels: 2, frames: 3, bins: 2, data: vec![Complex64::default(); 12] };
    let mask = TfMask::new(2, 2, vec![0.5; 4]).unwrap();
    assert!(matches!(estimate_covariances(&x, &mask), Err(KwsError::Contract(_))));
}

#[test]
fn mvdr_is_distortionless_for_random_pd_covariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = ArrayGeometry::default();
    for i in 0..200 {
        let r = random_hpd(6, &mut rng);
        let dir = LookDirection::new(rng.random_range(0.0..=180.0)).unwrap();
        let d = steering_vector(dir, &g, rng.random_range(0.0..=8000.0));
        let w = mvdr_weights(&r, &d, i).unwrap();
        assert!((w.dotc(&d) - Complex64::from(1.0)).norm() < 1e-6);
    }
}

proptest! {
    #[test]
    fn steering_vectors_are_unit_modulus(az in 0.0f64..=180.0, f in 0.0f64..=8000.0) {
        let d = steering_vector(LookDirection::new(az).unwrap(), &ArrayGeometry::default(), f);
        for z in d.iter() {
            prop_assert!((z.norm() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn stft_roundtrip_reconstructs_signal() {
    let stft = FrontendStft::new(512, 128, 16000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..5000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = stft.analyze_channels(std::slice::from_ref(&x)).unwrap();
    let y = stft.synthesize_channel(&s, 0, x.len());
    let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(err / scale < 1e-6, "relative error {}", err / scale);
}

fn two_source_scene() -> (SceneConfig, kws_core::scene::Scene) {
    let cfg = SceneConfig {
        source: SourcePlacement { azimuth_deg: 90.0, distance_m: 1.0 },
        interferers: vec![InterfererSpec { azimuth_deg: 30.0, sir_db: 0.0 }],
        snr_db: Some(40.0),
        seed: 11,
        ..SceneConfig::default()
    };
    let scene = synthesize_scene(&cfg).unwrap();
    (cfg, scene)
}

/// Response of MVDR weights designed with oracle masks, toward the look
/// direction and toward the interferer, weighted by the interferer's spectrum.
#[test]
fn mvdr_nulls_the_interferer_by_twenty_db() {
    let (cfg, scene) = two_source_scene();
    let stft = FrontendStft::new(512, 128, 16000).unwrap();
    let x = stft.analyze(&scene.mixture).unwrap();
    let mask = TfMask::oracle(&stft.analyze(&scene.keyword).unwrap(), &stft.analyze(&scene.noise).unwrap()).unwrap();
    let cov = estimate_covariances(&x, &mask).unwrap();
    let look = LookDirection::new(90.0).unwrap();
    let int = LookDirection::new(30.0).unwrap();
    let w = design_mvdr(&cov, look, &cfg.geometry, &stft).unwrap();
    let noise = stft.analyze(&scene.noise).unwrap();
    let (mut num, mut den, mut look_num) = (0.0, 0.0, 0.0);
    for (f, wf) in w.iter().enumerate() {
        let hz = stft.bin_hz(f);
        let dl = steering_vector(look, &cfg.geometry, hz);
        let di = steering_vector(int, &cfg.geometry, hz);
        assert!((wf.dotc(&dl) - Complex64::from(1.0)).norm() < 1e-6, "bin {f}");
        let p: f64 = (0..noise.frames).map(|t| noise.get(0, t, f).norm_sqr()).sum();
        num += p * wf.dotc(&di).norm_sqr();
        look_num += p * wf.dotc(&dl).norm_sqr();
        den += p;
    }
    let rejection_db = 10.0 * (look_num / num).log10();
    println!("interferer rejection {rejection_db:.1} dB (den {den:.3e})");
    assert!(rejection_db >= 20.0, "rejection {rejection_db:.2} dB");
}

#[test]
fn beam_toward_source_improves_snr() {
    let cfg = SceneConfig {
        source: SourcePlacement { azimuth_deg: 90.0, distance_m: 3.0 },
        interferers: vec![InterfererSpec { azimuth_deg: 20.0, sir_db: 3.0 }],
        snr_db: Some(0.0),
        seed: 12,
        ..SceneConfig::default()
    };
    let scene = synthesize_scene(&cfg).unwrap();
    let stft = FrontendStft::new(512, 128, 16000).unwrap();
    let x = stft.analyze(&scene.mixture).unwrap();
    let s = stft.analyze(&scene.keyword).unwrap();
    let n = stft.analyze(&scene.noise).unwrap();
    let cov = estimate_covariances(&x, &TfMask::oracle(&s, &n).unwrap()).unwrap();
    let w = design_mvdr(&cov, LookDirection::new(90.0).unwrap(), &cfg.geometry, &stft).unwrap();
    let ys = stft.synthesize_spectrogram(&apply_beamformer(&s, &w), scene.mixture.len());
    let yn = stft.synthesize_spectrogram(&apply_beamformer(&n, &w), scene.mixture.len());
    let span = scene.keyword_span.clone();
    let snr = |a: &[f64], b: &[f64]| {
        10.0 * (a[span.clone()].iter().map(|v| v * v).sum::<f64>() / b[span.clone()].iter().map(|v| v * v).sum::<f64>()).log10()
    };
    let raw = snr(&scene.keyword.channel_f64(0), &scene.noise.channel_f64(0));
    let beam = snr(&ys, &yn);
    println!("raw SNR {raw:.2} dB, beam SNR {beam:.2} dB");
    assert!(beam > raw);
}

#[test]
fn multi_look_stack_shape_and_passthrough() {
    let (_, scene) = two_source_scene();
    let cfg = FrontendConfig { wpe: None, ..FrontendConfig::default() };
    let out = multi_look_stack(&scene.mixture, &cfg, &MaskSource::default()).unwrap();
    assert_eq!(out.waveform.channels(), 4);
    assert_eq!(out.waveform.len(), scene.mixture.len());
    let a: Vec<u32> = out.waveform.channel(3).iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = scene.mixture.channel(0).iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
    let again = multi_look_stack(&scene.mixture, &cfg, &MaskSource::default()).unwrap();
    assert_eq!(again.waveform, out.waveform);
}

#[test]
fn multi_look_stack_rejects_wrong_channel_count() {
    let w = Waveform::silence(4, 1000, 16000).unwrap();
    let err = multi_look_stack(&w, &FrontendConfig::default(), &MaskSource::default()).unwrap_err();
    assert!(matches!(err, KwsError::Contract(_)));
}

/// Noise bursts every 400 ms, convolved with independent exponential tails.
fn burst_scene(reverb: bool) -> (Waveform, Vec<std::ops::Range<usize>>) {
    let sr = 16000;
    let len = 4 * sr as usize;
    let burst = 800;
    let period = 6400;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut src = vec![0.0; len];
    let mut late = Vec::new();
    let mut start = 1600;
    while start + period <= len {
        for v in &mut src[start..start + burst] {
            *v = 0.1 * { let g: f64 = StandardNormal.sample(&mut rng); g };
        }
        late.push(start + burst + 800..start + period);
        start += period;
    }
    let chans: Vec<Vec<f64>> = if reverb {
        let spec = ReverbSpec { rt60_s: 0.5, drr_db: -3.0, predelay_s: 0.004 };
        reverb_tails(&spec, 6, sr, 3)
            .iter()
            .map(|h| {
                let t = fft_convolve(&src, h);
                src.iter().zip(&t).map(|(a, b)| a + b).collect()
            })
            .collect()
    } else {
        (0..6)
            .map(|_| src.iter().map(|v| v + 1e-4 * { let g: f64 = StandardNormal.sample(&mut rng); g }).collect())
            .collect()
    };
    (Waveform::from_f64(&chans, sr).unwrap(), late)
}

fn segment_energy(x: &[f32], segs: &[std::ops::Range<usize>]) -> f64 {
    segs.iter().flat_map(|r| x[r.clone()].iter()).map(|&v| f64::from(v) * f64::from(v)).sum()
}

#[test]
fn wpe_reduces_late_reverberation_by_five_db() {
    let (w, late) = burst_scene(true);
    let (out, _) = dereverberate(&w, &WpeConfig::default(), 512, 128).unwrap();
    let before = segment_energy(w.channel(0), &late);
    let after = segment_energy(out.channel(0), &late);
    let reduction = 10.0 * (before / after).log10();
    println!("late energy reduction {reduction:.2} dB");
    assert!(reduction >= 5.0, "reduction {reduction:.2} dB");
}

/// Spatially white noise is unpredictable, so the prediction filters stay
/// near zero; the same source reverberated onto the array is highly
/// predictable.
#[test]
fn wpe_on_white_noise_barely_acts() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 80000;
    let mut white = || -> Vec<f64> {
        (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                0.1 * g
            })
            .collect()
    };
    let chans: Vec<Vec<f64>> = (0..6).map(|_| white()).collect();
    let spec = ReverbSpec { rt60_s: 0.5, drr_db: -3.0, predelay_s: 0.004 };
    let reverberant: Vec<Vec<f64>> = reverb_tails(&spec, 6, 16000, 3)
        .iter()
        .map(|h| {
            let t = fft_convolve(&chans[0], h);
            chans[0].iter().zip(&t).map(|(a, b)| a + b).collect()
        })
        .collect();
    let stft = FrontendStft::new(512, 128, 16000).unwrap();
    let xw = stft.analyze_channels(&chans).unwrap();
    let ow = wpe_dereverb(&xw, &WpeConfig::default()).unwrap();
    let or = wpe_dereverb(&stft.analyze_channels(&reverberant).unwrap(), &WpeConfig::default()).unwrap();
    assert!(
        ow.filter_energy < 0.05 * or.filter_energy,
        "{} vs {}",
        ow.filter_energy,
        or.filter_energy
    );
    let e = |s: &MultiStft| s.data.iter().map(|z| z.norm_sqr()).sum::<f64>();
    let ratio = e(&ow.stft) / e(&xw);
    assert!((0.8..=1.0).contains(&ratio), "energy ratio {ratio}");
}

#[test]
fn wpe_zero_iterations_is_bit_identical() {
    let (w, _) = burst_scene(true);
    let stft = FrontendStft::new(512, 128, 16000).unwrap();
    let x = stft.analyze(&w).unwrap();
    let out = wpe_dereverb(&x, &WpeConfig { iterations: 0, ..WpeConfig::default() }).unwrap();
    assert!(out.stft.data.iter().zip(&x.data).all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits()));
}

#[test]
fn wpe_on_anechoic_input_changes_energy_by_under_one_db() {
    let (w, _) = burst_scene(false);
    let (out, _) = dereverberate(&w, &WpeConfig::default(), 512, 128).unwrap();
    let e = |w: &Waveform| w.channel(0).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>();
    let db = 10.0 * (e(&out) / e(&w)).log10();
    assert!(db.abs() < 1.0, "{db:.3} dB");
}

#[test]
fn identity_noise_covariance_steers_like_delay_and_sum() {
    let g = ArrayGeometry::default();
    let d = steering_vector(LookDirection::new(10.0).unwrap(), &g, 1000.0);
    let w = mvdr_weights(&DMatrix::identity(6, 6), &d, 0).unwrap();
    let expect: DVector<Complex64> = &d / Complex64::from(6.0);
    assert!((w - expect).norm() < 1e-12);
}
