use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use kws_core::array::{dereverberate, multi_look_stack, MaskSource};
use kws_core::centroid::{distance_margin, KeywordCentroids};
use kws_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use kws_core::corpus::{scene_seed, Split};
use kws_core::eval::{evaluate, export_histograms};
use kws_core::manifest::{load_manifest, write_manifest, AudioRef, FieldTag, ManifestEntry};
use kws_core::model::{Model, ModelConfig};
use kws_core::trainer::{model_from_checkpoint, score_examples, Example, PhaseData, RunEnd, TrainEvent, Trainer};
use kws_core::wav::{read_wav, write_wav, SampleFormat};
use kws_core::KwsError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{InputKind, RunConfig};
use crate::run::{self, best_path, last_path, load_examples, par_map, prepare_out_dir, thread_count, write_json};

pub fn simulate(cfg: &RunConfig, out: Option<&Path>, force: bool) -> Result<()> {
    let dir = out.context("simulate needs --out <dir>")?;
    cfg.validate()?;
    for &field in &cfg.simulate.fields {
        let p = cfg.simulate.prior(field);
        ensure!(
            p.sample_rate == cfg.features.sample_rate,
            "simulate.{field}.sample_rate differs from features.sample_rate"
        );
    }
    prepare_out_dir(dir, force)?;
    cfg.echo(Some(dir))?;
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).with_context(|| format!("creating {}", wav_dir.display()))?;
    let format = SampleFormat::from(cfg.simulate.format);
    let counts = cfg.simulate.split_counts();
    let mut jobs = Vec::new();
    for (split, &n) in Split::ALL.iter().zip(&counts) {
        for &field in &cfg.simulate.fields {
            jobs.extend((0..n as u64).map(|i| (*split, field, i)));
        }
    }
    let entries = par_map(&jobs, thread_count(cfg.threads), |&(split, field, i)| -> Result<ManifestEntry> {
        let id = format!("{}-{}-{i:06}", split.as_str(), field);
        let (scene, w) = cfg.simulate.prior(field).render(scene_seed(cfg.seed, split, field, i))?;
        let rel = PathBuf::from("wav").join(format!("{id}.wav"));
        write_wav(&w, dir.join(&rel), format)?;
        Ok(ManifestEntry {
            id,
            audio: AudioRef::Multi(rel),
            label: scene.label,
            field,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    for split in Split::ALL {
        let part: Vec<ManifestEntry> = entries
            .iter()
            .filter(|e| e.id.starts_with(&format!("{}-", split.as_str())))
            .cloned()
            .collect();
        let path = dir.join(format!("{}.jsonl", split.as_str()));
        write_manifest(&part, &path)?;
        let pos = part.iter().filter(|e| e.is_positive()).count();
        println!("{}: {} scenes, {} positive -> {}", split.as_str(), part.len(), pos, path.display());
    }
    Ok(())
}

fn print_parameters(cfg: &ModelConfig) {
    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    for s in cfg.parameter_specs() {
        let group = match s.name.split('.').next().unwrap_or_default() {
            "encoder" => "encoder",
            "blocks" => "mixer",
            "post" => "post",
            _ => "head",
        };
        *groups.entry(group).or_default() += s.shape.iter().product::<usize>();
    }
    println!(
        "parameters: encoder {} mixer {} post {} head {} total {}",
        groups.get("encoder").unwrap_or(&0),
        groups.get("mixer").unwrap_or(&0),
        groups.get("post").unwrap_or(&0),
        groups.get("head").unwrap_or(&0),
        cfg.parameter_count()
    );
}

/// Groups training entries into one phase per field, in curriculum order.
fn phase_data(entries: Vec<ManifestEntry>, cfg: &RunConfig) -> Result<Vec<PhaseData>> {
    let mut data = Vec::new();
    for field in FieldTag::ALL {
        let part: Vec<ManifestEntry> = entries.iter().filter(|e| e.field == field).cloned().collect();
        if part.is_empty() {
            continue;
        }
        if cfg.input == InputKind::MultiLook && field != FieldTag::Far {
            bail!("multi-look input needs far-field recordings, but the training data has {field} entries");
        }
        data.push(PhaseData {
            field,
            examples: load_examples(&part, cfg)?,
        });
    }
    Ok(data)
}

fn io_err(path: &Path, source: std::io::Error) -> KwsError {
    KwsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Keeps the metrics records up to `step`, so a resumed run appends a
/// continuous trace.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
        if v["step"].as_u64().is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).with_context(|| format!("writing {}", path.display()))
}

pub fn train(cfg: &RunConfig, out: Option<&Path>, force: bool, resume: bool, stop_after: Option<u64>) -> Result<()> {
    let dir = out.context("train needs --out <run dir>")?;
    let mut cfg = cfg.clone();
    let mut trainer = if resume {
        let ck = load_checkpoint(last_path(dir)).context("resuming")?;
        let t = Trainer::from_checkpoint(&ck)?;
        cfg.model = t.model.config().clone();
        cfg.trainer = t.config().clone();
        cfg.seed = cfg.trainer.seed;
        Some(t)
    } else {
        None
    };
    cfg.validate()?;
    ensure!(!cfg.data.train.is_empty(), "no training manifest; pass --train or set data.train");
    let mut entries = Vec::new();
    for m in &cfg.data.train {
        entries.extend(load_manifest(m)?);
    }
    let dev_entries = cfg.data.dev.as_ref().map(load_manifest).transpose()?;

    if !resume {
        prepare_out_dir(dir, force)?;
    }
    let ck_dir = dir.join(run::CHECKPOINTS);
    fs::create_dir_all(&ck_dir).with_context(|| format!("creating {}", ck_dir.display()))?;
    cfg.echo(Some(dir))?;

    let data = phase_data(entries, &cfg)?;
    let dev = dev_entries.map(|d| load_examples(&d, &cfg)).transpose()?;
    let mut trainer = match trainer.take() {
        Some(t) => t,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Trainer::new(Model::new(cfg.model.clone(), &mut rng)?, cfg.trainer.clone())?
        }
    };
    print_parameters(trainer.model.config());
    println!("steps: {} (starting at {})", trainer.total_steps(&data)?, trainer.step);

    let metrics = dir.join(run::METRICS);
    if resume {
        truncate_metrics(&metrics, trainer.step)?;
    } else {
        File::create(&metrics).with_context(|| format!("creating {}", metrics.display()))?;
    }
    let mut log = OpenOptions::new()
        .append(true)
        .open(&metrics)
        .with_context(|| format!("opening {}", metrics.display()))?;
    let (best, last) = (best_path(dir), last_path(dir));
    let end = trainer.run(&data, dev.as_deref(), stop_after, &mut |t: &Trainer, e: &TrainEvent| {
        let mut line = serde_json::to_string(e)?;
        line.push('\n');
        log.write_all(line.as_bytes()).map_err(|x| io_err(&metrics, x))?;
        if let TrainEvent::Epoch(r) = e {
            let ck = t.to_checkpoint()?;
            if r.improved {
                save_checkpoint(&ck, &best)?;
            }
            save_checkpoint(&ck, &last)?;
            let dev = r.dev.map(|d| format!(", dev {d}")).unwrap_or_default();
            println!("{} epoch {} step {}: loss {:.4}{dev}", r.phase, r.epoch, r.step, r.loss);
        }
        Ok(())
    })?;
    let ck = trainer.to_checkpoint()?;
    save_checkpoint(&ck, &last)?;
    match end {
        RunEnd::Paused => {
            println!("paused at step {}; continue with --resume", trainer.step);
            return Ok(());
        }
        RunEnd::Finished => {
            if !best.exists() {
                save_checkpoint(&ck, &best)?;
            }
        }
    }
    if let Some(dev) = dev.as_deref().filter(|d| !d.is_empty()) {
        let (report, _) = trainer.evaluate(dev)?;
        println!("dev: {report}");
        write_json(&dir.join(run::DEV_REPORT), &report)?;
    }
    println!("checkpoints: {} {}", best.display(), last.display());
    Ok(())
}

struct Loaded {
    model: Model<f32>,
    centroids: Option<KeywordCentroids<f32>>,
    threshold: f64,
}

/// Loads a checkpoint and adopts its model configuration into `cfg`.
fn load_model(cfg: &mut RunConfig, path: &Path) -> Result<Loaded> {
    let ck: Checkpoint = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let (model, centroids) = model_from_checkpoint(&ck)?;
    cfg.model = model.config().clone();
    cfg.validate()?;
    Ok(Loaded {
        threshold: ck.config["trainer"]["threshold"].as_f64().unwrap_or(0.5),
        model,
        centroids,
    })
}

/// Rejects recordings the model cannot take without looking at any audio.
fn check_channels(cfg: &RunConfig, model: &Model<f32>, field: FieldTag, what: &str) -> Result<()> {
    if cfg.input == InputKind::MultiLook && field != FieldTag::Far {
        return Err(KwsError::Contract(format!("{what}: multi-look input needs far-field audio, got {field}")).into());
    }
    let got = cfg.input_channels(field.channels());
    let want = model.config().channels;
    if got != want {
        return Err(KwsError::Contract(format!(
            "{what}: {field} audio gives {got} model input channels but the checkpoint expects {want}"
        ))
        .into());
    }
    Ok(())
}

fn load_checked(cfg: &RunConfig, model: &Model<f32>, manifest: &Path) -> Result<(Vec<ManifestEntry>, Vec<Example>)> {
    let entries = load_manifest(manifest)?;
    for e in &entries {
        check_channels(cfg, model, e.field, &e.id)?;
    }
    let examples = load_examples(&entries, cfg)?;
    Ok((entries, examples))
}

/// Histogram values: the signed centroid distance margin when the model has
/// centroids, otherwise the keyword probability.
fn histogram_values(scored: &[kws_core::trainer::Scored], centroids: Option<&KeywordCentroids<f32>>) -> Result<Vec<f64>> {
    scored
        .iter()
        .map(|s| match centroids {
            Some(c) => Ok(f64::from(distance_margin(&s.latent, c)?)),
            None => Ok(s.prob),
        })
        .collect()
}

pub fn histogram_target(explicit: Option<PathBuf>, out: Option<&Path>) -> Result<PathBuf> {
    match (explicit, out) {
        (Some(p), _) => Ok(p),
        (None, Some(dir)) => Ok(dir.join(run::HISTOGRAM)),
        (None, None) => bail!("histogram export needs a path or --out"),
    }
}

pub fn eval(
    mut cfg: RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    threshold: Option<f64>,
    hist: Option<(PathBuf, usize)>,
    out: Option<&Path>,
) -> Result<()> {
    let loaded = load_model(&mut cfg, checkpoint)?;
    let threshold = threshold.unwrap_or(loaded.threshold);
    ensure!((0.0..=1.0).contains(&threshold), "threshold must lie in [0, 1]");
    cfg.trainer.threshold = threshold;
    cfg.echo(None)?;
    let (_, examples) = load_checked(&cfg, &loaded.model, manifest)?;
    let scored = score_examples(&loaded.model, loaded.centroids.as_ref(), &examples)?;
    let probs: Vec<f64> = scored.iter().map(|s| s.prob).collect();
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let report = evaluate(&probs, &labels, threshold)?;
    println!("{report}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join(run::EVAL_REPORT), &report)?;
    }
    if let Some((path, bins)) = hist {
        let values = histogram_values(&scored, loaded.centroids.as_ref())?;
        export_histograms(&values, &labels, bins, &path)?;
        println!("histogram: {}", path.display());
    }
    Ok(())
}

pub fn export_hist(mut cfg: RunConfig, checkpoint: &Path, manifest: &Path, target: &Path, bins: usize) -> Result<()> {
    let loaded = load_model(&mut cfg, checkpoint)?;
    cfg.echo(None)?;
    let (_, examples) = load_checked(&cfg, &loaded.model, manifest)?;
    let scored = score_examples(&loaded.model, loaded.centroids.as_ref(), &examples)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let values = histogram_values(&scored, loaded.centroids.as_ref())?;
    let hist = export_histograms(&values, &labels, bins, target)?;
    println!("histogram: {} bins -> {}", hist.len(), target.display());
    Ok(())
}

pub fn predict(mut cfg: RunConfig, checkpoint: &Path, wav: &Path) -> Result<()> {
    let loaded = load_model(&mut cfg, checkpoint)?;
    cfg.echo(None)?;
    let info = kws_core::wav::probe_wav(wav)?;
    let field = FieldTag::ALL
        .into_iter()
        .find(|f| f.channels() == info.channels)
        .ok_or_else(|| KwsError::Contract(format!("{}: unsupported channel count {}", wav.display(), info.channels)))?;
    check_channels(&cfg, &loaded.model, field, &wav.display().to_string())?;
    let entry = ManifestEntry {
        id: wav.display().to_string(),
        audio: AudioRef::Multi(wav.to_path_buf()),
        label: 0,
        field,
    };
    let examples = load_examples(std::slice::from_ref(&entry), &cfg)?;
    let scored = score_examples(&loaded.model, loaded.centroids.as_ref(), &examples)?;
    println!("{:.6}", scored[0].prob);
    Ok(())
}

pub fn beamform(cfg: &RunConfig, input: &Path, output: &Path, looks: &[f64], wpe: bool) -> Result<()> {
    let mut cfg = cfg.clone();
    if !looks.is_empty() {
        cfg.frontend.looks_deg = looks.to_vec();
    }
    cfg.frontend.wpe = wpe.then(|| cfg.frontend.wpe.unwrap_or_default());
    cfg.validate()?;
    cfg.echo(None)?;
    let w = read_wav(input)?;
    let out = multi_look_stack(&w, &cfg.frontend, &MaskSource::default())?;
    write_wav(&out.waveform, output, SampleFormat::Float32)?;
    if !out.degenerate_bins.is_empty() {
        eprintln!("warning: {} bins had degenerate covariance", out.degenerate_bins.len());
    }
    println!("{} channels -> {}", out.waveform.channels(), output.display());
    Ok(())
}

pub fn wpe(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    taps: Option<usize>,
    delay: Option<usize>,
    iterations: Option<usize>,
) -> Result<()> {
    let mut cfg = cfg.clone();
    let mut w = cfg.frontend.wpe.unwrap_or_default();
    w.taps = taps.unwrap_or(w.taps);
    w.delay = delay.unwrap_or(w.delay);
    w.iterations = iterations.unwrap_or(w.iterations);
    cfg.frontend.wpe = Some(w);
    cfg.validate()?;
    cfg.echo(None)?;
    let x = read_wav(input)?;
    let (y, info) = dereverberate(&x, &w, cfg.frontend.win_len, cfg.frontend.hop)?;
    write_wav(&y, output, SampleFormat::Float32)?;
    println!(
        "filter energy {:.3e}, {} regularized bins -> {}",
        info.filter_energy,
        info.regularized_bins.len(),
        output.display()
    );
    Ok(())
}
