use std::fs;

use kws_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use kws_core::dsp::Waveform;
use kws_core::manifest::{load_manifest, write_manifest, AudioRef, FieldTag, ManifestEntry};
use kws_core::scene::{fractional_delay, mean_power, synthesize_scene, InterfererSpec, ReverbSpec, SceneConfig, SourcePlacement};
use kws_core::wav::{decode_wav, encode_wav, read_wav, write_wav, SampleFormat};
use kws_core::KwsError;
use kws_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn random_wave(channels: usize, len: usize, seed: u64, pcm_grid: bool) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chans = (0..channels)
        .map(|_| {
            (0..len)
                .map(|_| {
                    if pcm_grid {
                        f32::from(rng.random::<i16>()) / 32768.0
                    } else {
                        rng.random_range(-1.0f32..1.0)
                    }
                })
                .collect()
        })
        .collect();
    Waveform::new(chans, 16000).unwrap()
}

fn bits(w: &Waveform) -> Vec<u32> {
    w.channels_iter().flatten().map(|v| v.to_bits()).collect()
}

#[test]
fn six_channel_roundtrips_are_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let w = random_wave(6, 3000, 1, false);
    let p = dir.path().join("f.wav");
    write_wav(&w, &p, SampleFormat::Float32).unwrap();
    assert_eq!(bits(&read_wav(&p).unwrap()), bits(&w));
    let q = random_wave(6, 3000, 2, true);
    write_wav(&q, &p, SampleFormat::Pcm16).unwrap();
    assert_eq!(bits(&read_wav(&p).unwrap()), bits(&q));
}

#[test]
fn every_truncation_fails_closed() {
    let b = encode_wav(&random_wave(2, 50, 3, true), SampleFormat::Pcm16).unwrap();
    for cut in 0..b.len() {
        assert!(decode_wav(&b[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn missing_wav_is_io_error() {
    assert!(matches!(read_wav("/nonexistent/x.wav"), Err(KwsError::Io { .. })));
}

fn entry(id: &str, audio: AudioRef, label: u8, field: FieldTag) -> ManifestEntry {
    ManifestEntry { id: id.into(), audio, label, field }
}

#[test]
fn empty_manifest_is_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    fs::write(&p, "").unwrap();
    assert!(load_manifest(&p).unwrap().is_empty());
}

#[test]
fn hundred_record_fixture_partitions_by_field() {
    let dir = tempfile::tempdir().unwrap();
    let mono = Waveform::silence(1, 16, 16000).unwrap();
    let stereo = Waveform::silence(2, 16, 16000).unwrap();
    let six = Waveform::silence(6, 16, 16000).unwrap();
    write_wav(&mono, dir.path().join("m.wav"), SampleFormat::Pcm16).unwrap();
    write_wav(&stereo, dir.path().join("s.wav"), SampleFormat::Pcm16).unwrap();
    write_wav(&six, dir.path().join("f.wav"), SampleFormat::Pcm16).unwrap();
    let mut entries = Vec::new();
    for i in 0..100 {
        let (audio, field) = match i % 5 {
            0 => (AudioRef::Multi("m.wav".into()), FieldTag::Near),
            1 => (AudioRef::Multi("s.wav".into()), FieldTag::Mid),
            2 => (AudioRef::PerChannel(vec!["m.wav".into(), "m.wav".into()]), FieldTag::Mid),
            _ => (AudioRef::Multi("f.wav".into()), FieldTag::Far),
        };
        entries.push(entry(&format!("u{i}"), audio, (i % 2) as u8, field));
    }
    let p = dir.path().join("m.jsonl");
    write_manifest(&entries, &p).unwrap();
    let loaded = load_manifest(&p).unwrap();
    assert_eq!(loaded.len(), 100);
    let count = |f| loaded.iter().filter(|e| e.field == f).count();
    assert_eq!((count(FieldTag::Near), count(FieldTag::Mid), count(FieldTag::Far)), (20, 40, 40));
    let stereo_pair = loaded.iter().find(|e| e.id == "u2").unwrap().load_audio().unwrap();
    assert_eq!(stereo_pair.channels(), 2);
}

fn manifest_error(body: &str) -> (usize, String) {
    let dir = tempfile::tempdir().unwrap();
    write_wav(&Waveform::silence(1, 4, 16000).unwrap(), dir.path().join("a.wav"), SampleFormat::Pcm16).unwrap();
    let p = dir.path().join("m.jsonl");
    fs::write(&p, body).unwrap();
    match load_manifest(&p) {
        Err(KwsError::Manifest { line, msg, .. }) => (line, msg),
        other => panic!("expected manifest error, got {other:?}"),
    }
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let ok = r#"{"id":"a","audio":"a.wav","label":1,"field":"near"}"#;
    let (line, msg) = manifest_error(&format!("{ok}\n\n{}\n", r#"{"id":"b","audio":"a.wav","label":2,"field":"near"}"#));
    assert_eq!(line, 3);
    assert!(msg.contains("label"), "{msg}");
    let (line, msg) = manifest_error(&format!("{ok}\n{ok}\n"));
    assert_eq!(line, 2);
    assert!(msg.contains("duplicate"), "{msg}");
    let (line, _) = manifest_error(r#"{"id":"a","audio":"missing.wav","label":0,"field":"near"}"#);
    assert_eq!(line, 1);
    let (line, _) = manifest_error(r#"{"id":"a","label":0,"field":"near"}"#);
    assert_eq!(line, 1);
    let (_, msg) = manifest_error(r#"{"id":"a","audio":"a.wav","label":0,"field":"far"}"#);
    assert!(msg.contains("6 channels"), "{msg}");
}

fn quiet(cfg: SceneConfig) -> SceneConfig {
    SceneConfig { snr_db: None, interferers: vec![], reverb: None, ..cfg }
}

#[test]
fn broadside_noiseless_scene_is_identical_copies() {
    let s = synthesize_scene(&quiet(SceneConfig { seed: 4, ..SceneConfig::default() })).unwrap();
    assert_eq!(s.mixture.channels(), 6);
    for c in 1..6 {
        assert_eq!(s.mixture.channel(c), s.mixture.channel(0));
    }
    assert!(mean_power(&s.mixture.channel_f64(0)) > 0.0);
}

#[test]
fn endfire_delay_matches_spacing_over_sound_speed() {
    let delay: f64 = 0.04 / 343.0 * 16000.0;
    assert!((delay - 1.866).abs() < 1e-3);
    let cfg = quiet(SceneConfig {
        source: SourcePlacement { azimuth_deg: 0.0, distance_m: 1.0 },
        seed: 5,
        ..SceneConfig::default()
    });
    let s = synthesize_scene(&cfg).unwrap();
    let x0 = s.clean.channel_f64(0);
    let span = s.keyword_span.clone();
    for k in 1..6 {
        let want = fractional_delay(&x0, k as f64 * delay);
        let got = s.clean.channel_f64(k);
        let r = span.start + 50..span.end - 50;
        let err: f64 = r.clone().map(|n| (got[n] - want[n]).powi(2)).sum();
        let ref_e: f64 = r.map(|n| want[n].powi(2)).sum();
        assert!(err / ref_e < 1e-3, "mic {k}: relative error {}", err / ref_e);
    }
}

#[test]
fn measured_snr_matches_configuration() {
    for (seed, snr) in [(1, 0.0), (2, 5.0), (3, 10.0), (4, -3.0)] {
        let cfg = SceneConfig {
            snr_db: Some(snr),
            reverb: Some(ReverbSpec::default()),
            interferers: vec![InterfererSpec { azimuth_deg: 40.0, sir_db: 6.0 }],
            seed,
            ..SceneConfig::default()
        };
        let s = synthesize_scene(&cfg).unwrap();
        let span = s.keyword_span.clone();
        let p_kw = mean_power(&s.clean.channel_f64(0)[span.clone()]);
        let p_n = mean_power(&s.diffuse.channel_f64(0)[span]);
        let measured = 10.0 * (p_kw / p_n).log10();
        assert!((measured - snr).abs() < 0.5, "seed {seed}: {measured:.3} vs {snr}");
    }
}

#[test]
fn scenes_are_deterministic_and_negatives_drop_only_the_keyword() {
    let cfg = SceneConfig {
        reverb: Some(ReverbSpec::default()),
        interferers: vec![InterfererSpec { azimuth_deg: 150.0, sir_db: 3.0 }],
        seed: 9,
        ..SceneConfig::default()
    };
    let a = synthesize_scene(&cfg).unwrap();
    let b = synthesize_scene(&cfg).unwrap();
    assert_eq!(bits(&a.mixture), bits(&b.mixture));
    let neg = synthesize_scene(&SceneConfig { keyword_present: false, ..cfg }).unwrap();
    assert_eq!(neg.label, 0);
    assert_eq!(bits(&neg.noise), bits(&a.noise));
    for c in 0..6 {
        for ((p, k), n) in a.mixture.channel(c).iter().zip(a.keyword.channel(c)).zip(neg.mixture.channel(c)) {
            assert!((p - k - n).abs() < 1e-6);
        }
    }
}

fn ck() -> Checkpoint {
    Checkpoint {
        config: json!({"model": {"d": 4}}),
        tensors: vec![
            ("w".into(), Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            ("centroid.v0".into(), Tensor::vector(vec![0.5; 4])),
        ],
        state: json!({"step": 12, "rng": "123"}),
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.kwsm");
    save_checkpoint(&ck(), &p).unwrap();
    let first = fs::read(&p).unwrap();
    let loaded = load_checkpoint(&p).unwrap();
    assert_eq!(loaded, ck());
    save_checkpoint(&loaded, &p).unwrap();
    assert_eq!(fs::read(&p).unwrap(), first);
}

#[test]
fn checkpoint_flipped_byte_fails_checksum() {
    let b = ck().to_bytes().unwrap();
    for i in 8..b.len() - 4 {
        let mut c = b.clone();
        c[i] ^= 0x40;
        assert!(Checkpoint::from_bytes(&c).is_err(), "byte {i}");
    }
}

#[test]
fn corrupt_length_prefix_with_valid_checksum_is_format_error() {
    let b = ck().to_bytes().unwrap();
    let mut body = b[..b.len() - 4].to_vec();
    body[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    let err = Checkpoint::from_bytes(&body).unwrap_err();
    assert!(matches!(err, KwsError::Format(_)), "{err}");
}
