//! Line-delimited JSON dataset manifests.
//!
//! Each non-blank line is an object with exactly the fields `id`, `audio`,
//! `label` and `field`. `audio` is either one multi-channel WAV path or a list
//! of mono WAV paths, one per channel; relative paths resolve against the
//! manifest's directory. `label` is 0 or 1 and `field` is `near`, `mid` or
//! `far`, which carry 1, 2 and 6 channels respectively.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{KwsError, Result};
use crate::wav::{probe_wav, read_wav};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldTag {
    Near,
    Mid,
    Far,
}

impl FieldTag {
    pub const ALL: [FieldTag; 3] = [FieldTag::Near, FieldTag::Mid, FieldTag::Far];

    pub fn channels(self) -> usize {
        match self {
            FieldTag::Near => 1,
            FieldTag::Mid => 2,
            FieldTag::Far => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FieldTag::Near => "near",
            FieldTag::Mid => "mid",
            FieldTag::Far => "far",
        }
    }
}

impl fmt::Display for FieldTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FieldTag {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "near" => Ok(FieldTag::Near),
            "mid" => Ok(FieldTag::Mid),
            "far" => Ok(FieldTag::Far),
            other => Err(KwsError::config(format!("unknown field tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AudioRef {
    Multi(PathBuf),
    PerChannel(Vec<PathBuf>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: AudioRef,
    pub label: u8,
    pub field: FieldTag,
}

impl ManifestEntry {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.audio {
            AudioRef::Multi(p) => fix(p),
            AudioRef::PerChannel(ps) => ps.iter_mut().for_each(fix),
        }
    }

    /// Loads the entry's audio as one multi-channel waveform.
    pub fn load_audio(&self) -> Result<Waveform> {
        match &self.audio {
            AudioRef::Multi(p) => read_wav(p),
            AudioRef::PerChannel(ps) => {
                let mut chans = Vec::with_capacity(ps.len());
                let mut rate = None;
                for p in ps {
                    let w = read_wav(p)?;
                    if w.channels() != 1 {
                        return Err(KwsError::contract(format!(
                            "{} should be mono but has {} channels",
                            p.display(),
                            w.channels()
                        )));
                    }
                    if *rate.get_or_insert(w.sample_rate()) != w.sample_rate() {
                        return Err(KwsError::contract(format!("{}: sample rate differs", p.display())));
                    }
                    chans.extend(w.into_channels());
                }
                Waveform::new(chans, rate.unwrap_or(16000))
            }
        }
    }

    fn channel_count(&self) -> Result<usize> {
        match &self.audio {
            AudioRef::Multi(p) => Ok(probe_wav(p)?.channels),
            AudioRef::PerChannel(ps) => {
                for p in ps {
                    probe_wav(p)?;
                }
                Ok(ps.len())
            }
        }
    }
}

/// Parses and validates a manifest, checking that every referenced file exists
/// and carries the channel count its field tag implies.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| KwsError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let err = |line: usize, msg: String| KwsError::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(raw).map_err(|x| err(line, x.to_string()))?;
        if e.label > 1 {
            return Err(err(line, format!("label must be 0 or 1, got {}", e.label)));
        }
        if e.id.is_empty() {
            return Err(err(line, "empty id".into()));
        }
        if !seen.insert(e.id.clone()) {
            return Err(err(line, format!("duplicate id {:?}", e.id)));
        }
        e.resolve(base);
        let channels = e.channel_count().map_err(|x| err(line, x.to_string()))?;
        if channels != e.field.channels() {
            return Err(err(
                line,
                format!(
                    "{} audio should have {} channels, found {}",
                    e.field,
                    e.field.channels(),
                    channels
                ),
            ));
        }
        entries.push(e);
    }
    Ok(entries)
}

/// Writes entries one per line; paths are written as given.
pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| KwsError::io(path, e))?;
    f.write_all(&out).map_err(|e| KwsError::io(path, e))
}
