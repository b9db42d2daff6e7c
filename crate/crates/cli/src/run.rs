//! Run directory layout and shared plumbing.
//!
//! ```text
//! <run>/config.toml              effective config
//! <run>/metrics.jsonl            one training event per line
//! <run>/checkpoints/best.kwsm    lowest dev Score so far
//! <run>/checkpoints/last.kwsm    most recent epoch boundary or pause
//! <run>/dev_report.json          final dev report of `train`
//! <run>/eval_report.json         report written by `eval`
//! <run>/histogram.csv            default `--export-hist` target
//! ```

use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{bail, ensure, Context, Result};
use kws_core::corpus::view_waveform;
use kws_core::manifest::ManifestEntry;
use kws_core::trainer::Example;

use crate::config::RunConfig;

pub const CONFIG_ECHO: &str = "config.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINTS: &str = "checkpoints";
pub const BEST: &str = "best.kwsm";
pub const LAST: &str = "last.kwsm";
pub const DEV_REPORT: &str = "dev_report.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const HISTOGRAM: &str = "histogram.csv";

pub fn best_path(run: &Path) -> PathBuf {
    run.join(CHECKPOINTS).join(BEST)
}

pub fn last_path(run: &Path) -> PathBuf {
    run.join(CHECKPOINTS).join(LAST)
}

/// Creates `dir`, refusing one that already has contents unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        ensure!(dir.is_dir(), "{} exists and is not a directory", dir.display());
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .next()
            .is_some();
        if occupied && !force {
            bail!("{} is not empty; pass --force to write into it", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn thread_count(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        thread::available_parallelism().map_or(1, NonZeroUsize::get)
    }
}

/// Applies `f` to every item on up to `threads` workers, keeping input order.
pub fn par_map<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Loads and featurizes manifest entries under the configured input view.
pub fn load_examples(entries: &[ManifestEntry], cfg: &RunConfig) -> Result<Vec<Example>> {
    let extractor = cfg.extractor()?;
    let view = cfg.view();
    par_map(entries, thread_count(cfg.threads), |e| -> Result<Example> {
        let w = e.load_audio().with_context(|| format!("loading {}", e.id))?;
        let w = view_waveform(&w, &view).with_context(|| format!("front end on {}", e.id))?;
        Ok(Example {
            feature: extractor.extract(&w).with_context(|| format!("features of {}", e.id))?,
            label: e.label,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
