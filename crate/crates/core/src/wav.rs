//! RIFF/WAVE reading and writing for PCM16 and IEEE float32 audio.
//!
//! PCM16 samples map to `s / 32768`, so full scale positive is `1 − 2⁻¹⁵`.
//! Writing PCM16 rounds `x · 32768` and saturates to the 16-bit range, which
//! makes write∘read sample-exact for content already on that grid.

use std::fs;
use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{KwsError, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleFormat {
    #[default]
    Pcm16,
    Float32,
}

impl SampleFormat {
    fn bytes(self) -> usize {
        match self {
            SampleFormat::Pcm16 => 2,
            SampleFormat::Float32 => 4,
        }
    }
}

/// Header facts of a WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavInfo {
    pub channels: usize,
    pub sample_rate: u32,
    pub frames: usize,
    pub format: SampleFormat,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> KwsError {
        KwsError::Parse {
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Parsed<'a> {
    info: WavInfo,
    data: &'a [u8],
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "RIFF tag")? != b"RIFF" {
        return Err(r.err(0, "missing RIFF tag"));
    }
    let riff_size = r.u32("RIFF size")? as usize;
    if riff_size + 8 != bytes.len() {
        return Err(r.err(
            4,
            format!("RIFF size {} disagrees with file length {}", riff_size, bytes.len()),
        ));
    }
    if r.take(4, "WAVE tag")? != b"WAVE" {
        return Err(r.err(8, "missing WAVE tag"));
    }
    let mut fmt: Option<(SampleFormat, usize, u32)> = None;
    let mut data: Option<&[u8]> = None;
    while r.pos < bytes.len() {
        let chunk_at = r.pos;
        let id = r.take(4, "chunk id")?;
        let size = r.u32("chunk size")? as usize;
        let body_at = r.pos;
        let body = r.take(size, "chunk body")?;
        if size % 2 == 1 {
            r.take(1, "chunk pad byte")?;
        }
        match id {
            b"fmt " => {
                if fmt.is_some() {
                    return Err(r.err(chunk_at, "duplicate fmt chunk"));
                }
                fmt = Some(parse_fmt(body, body_at)?);
            }
            b"data" => {
                if data.is_some() {
                    return Err(r.err(chunk_at, "duplicate data chunk"));
                }
                data = Some(body);
            }
            _ => {}
        }
    }
    let (format, channels, sample_rate) = fmt.ok_or_else(|| r.err(12, "no fmt chunk"))?;
    let data = data.ok_or_else(|| r.err(12, "no data chunk"))?;
    let frame_bytes = channels * format.bytes();
    if data.len() % frame_bytes != 0 {
        return Err(r.err(
            bytes.len(),
            format!("data length {} is not a whole number of frames", data.len()),
        ));
    }
    Ok(Parsed {
        info: WavInfo {
            channels,
            sample_rate,
            frames: data.len() / frame_bytes,
            format,
        },
        data,
    })
}

fn parse_fmt(body: &[u8], at: usize) -> Result<(SampleFormat, usize, u32)> {
    let mut r = Reader { bytes: body, pos: 0 };
    let wrap = |e: KwsError| match e {
        KwsError::Parse { offset, msg } => KwsError::Parse {
            offset: offset + at,
            msg,
        },
        other => other,
    };
    let mut tag = r.u16("format tag").map_err(wrap)?;
    let channels = r.u16("channel count").map_err(wrap)? as usize;
    let sample_rate = r.u32("sample rate").map_err(wrap)?;
    let _byte_rate = r.u32("byte rate").map_err(wrap)?;
    let block_align = r.u16("block align").map_err(wrap)? as usize;
    let bits = r.u16("bits per sample").map_err(wrap)?;
    if tag == FORMAT_EXTENSIBLE {
        let _cb = r.u16("extension size").map_err(wrap)?;
        let _valid = r.u16("valid bits").map_err(wrap)?;
        let _mask = r.u32("channel mask").map_err(wrap)?;
        let guid = r.take(16, "subformat").map_err(wrap)?;
        tag = u16::from_le_bytes([guid[0], guid[1]]);
    }
    let format = match (tag, bits) {
        (FORMAT_PCM, 16) => SampleFormat::Pcm16,
        (FORMAT_FLOAT, 32) => SampleFormat::Float32,
        _ => {
            return Err(KwsError::Parse {
                offset: at,
                msg: format!("unsupported codec: format tag {tag}, {bits} bits"),
            })
        }
    };
    if channels == 0 {
        return Err(KwsError::Parse {
            offset: at + 2,
            msg: "zero channels".into(),
        });
    }
    if sample_rate == 0 {
        return Err(KwsError::Parse {
            offset: at + 4,
            msg: "zero sample rate".into(),
        });
    }
    if block_align != channels * format.bytes() {
        return Err(KwsError::Parse {
            offset: at + 12,
            msg: format!("block align {block_align} inconsistent with {channels} channels"),
        });
    }
    Ok((format, channels, sample_rate))
}

/// Decodes a complete WAV image.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let p = parse(bytes)?;
    let WavInfo {
        channels,
        frames,
        format,
        sample_rate,
    } = p.info;
    let mut samples = vec![Vec::with_capacity(frames); channels];
    let width = format.bytes();
    for (i, chunk) in p.data.chunks_exact(width).enumerate() {
        let v = match format {
            SampleFormat::Pcm16 => f32::from(i16::from_le_bytes([chunk[0], chunk[1]])) / 32768.0,
            SampleFormat::Float32 => f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]),
        };
        samples[i % channels].push(v);
    }
    Waveform::new(samples, sample_rate)
}

/// Encodes a waveform as a canonical 44-byte-header WAV image.
pub fn encode_wav(w: &Waveform, format: SampleFormat) -> Result<Vec<u8>> {
    let channels = w.channels();
    if channels == 0 || channels > usize::from(u16::MAX) {
        return Err(KwsError::contract(format!("cannot encode {channels} channels")));
    }
    let width = format.bytes();
    let data_len = w.len() * channels * width;
    let riff_len = u32::try_from(36 + data_len)
        .map_err(|_| KwsError::contract("waveform too long for a RIFF file"))?;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&riff_len.to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    let tag = match format {
        SampleFormat::Pcm16 => FORMAT_PCM,
        SampleFormat::Float32 => FORMAT_FLOAT,
    };
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(channels as u16).to_le_bytes());
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    out.extend_from_slice(&(w.sample_rate() * (channels * width) as u32).to_le_bytes());
    out.extend_from_slice(&((channels * width) as u16).to_le_bytes());
    out.extend_from_slice(&((width * 8) as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for t in 0..w.len() {
        for c in 0..channels {
            let x = w.channel(c)[t];
            match format {
                SampleFormat::Pcm16 => {
                    let q = (f64::from(x) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                SampleFormat::Float32 => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| KwsError::io(path, e))?;
    decode_wav(&bytes)
}

pub fn write_wav(w: &Waveform, path: impl AsRef<Path>, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(w, format)?;
    fs::write(path, bytes).map_err(|e| KwsError::io(path, e))
}

/// Reads and validates only the header of a WAV file.
pub fn probe_wav(path: impl AsRef<Path>) -> Result<WavInfo> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| KwsError::io(path, e))?;
    Ok(parse(&bytes)?.info)
}
