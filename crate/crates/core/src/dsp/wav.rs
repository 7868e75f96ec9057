use std::fs;
use std::path::Path;

use super::DspError;

/// Real multichannel signal, one `Vec` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelWave {
    sample_rate: u32,
    channels: Vec<Vec<f64>>,
}

impl MultichannelWave {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self, DspError> {
        if sample_rate == 0 {
            return Err(DspError::InvalidWave("sample rate must be positive".into()));
        }
        if channels.is_empty() {
            return Err(DspError::InvalidWave("no channels".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(DspError::InvalidWave("channels differ in length".into()));
        }
        Ok(Self { sample_rate, channels })
    }

    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Result<Self, DspError> {
        Self::new(sample_rate, vec![samples])
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }
}

/// On-disk sample encoding.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

const FORMAT_PCM: u16 = 0x0001;
const FORMAT_FLOAT: u16 = 0x0003;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Reads a RIFF/WAVE file holding PCM16 or IEEE float32 samples.
pub fn wav_read(path: impl AsRef<Path>) -> Result<MultichannelWave, DspError> {
    parse_wav(&fs::read(path)?)
}

/// Writes `wave` as IEEE float32.
pub fn wav_write(path: impl AsRef<Path>, wave: &MultichannelWave) -> Result<(), DspError> {
    wav_write_as(path, wave, SampleFormat::Float32)
}

pub fn wav_write_as(path: impl AsRef<Path>, wave: &MultichannelWave, format: SampleFormat) -> Result<(), DspError> {
    fs::write(path, encode_wav(wave, format))?;
    Ok(())
}

pub(crate) fn encode_wav(wave: &MultichannelWave, format: SampleFormat) -> Vec<u8> {
    let m = wave.num_channels();
    let (tag, bytes) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 2usize),
        SampleFormat::Float32 => (FORMAT_FLOAT, 4usize),
    };
    let data_len = wave.len() * m * bytes;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(m as u16).to_le_bytes());
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * (m * bytes) as u32).to_le_bytes());
    out.extend_from_slice(&((m * bytes) as u16).to_le_bytes());
    out.extend_from_slice(&((bytes * 8) as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..wave.len() {
        for c in &wave.channels {
            match format {
                SampleFormat::Pcm16 => {
                    let q = (c[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                SampleFormat::Float32 => out.extend_from_slice(&(c[i] as f32).to_le_bytes()),
            }
        }
    }
    out
}

struct Fmt {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

pub(crate) fn parse_wav(bytes: &[u8]) -> Result<MultichannelWave, DspError> {
    if bytes.len() < 12 {
        return Err(DspError::MissingChunk("RIFF"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(DspError::Malformed("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<Fmt> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let available = bytes.len() - body_start;
        match id {
            b"fmt " => {
                if available < size || size < 16 {
                    return Err(DspError::Truncated { chunk: "fmt ", expected: size.max(16), got: available.min(size) });
                }
                let b = &bytes[body_start..body_start + size];
                let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
                let mut tag = u16_at(0);
                if tag == FORMAT_EXTENSIBLE {
                    if size < 26 {
                        return Err(DspError::Truncated { chunk: "fmt ", expected: 26, got: size });
                    }
                    tag = u16_at(24);
                }
                fmt = Some(Fmt {
                    tag,
                    channels: u16_at(2),
                    sample_rate: u32::from_le_bytes(b[4..8].try_into().unwrap()),
                    bits: u16_at(14),
                });
            }
            b"data" => {
                let f = fmt.ok_or(DspError::MissingChunk("fmt "))?;
                if available < size {
                    return Err(DspError::Truncated { chunk: "data", expected: size, got: available });
                }
                return decode_samples(&f, &bytes[body_start..body_start + size]);
            }
            _ => {}
        }
        pos = body_start + size + (size & 1);
    }
    if fmt.is_none() {
        Err(DspError::MissingChunk("fmt "))
    } else {
        Err(DspError::MissingChunk("data"))
    }
}

fn decode_samples(f: &Fmt, data: &[u8]) -> Result<MultichannelWave, DspError> {
    let m = f.channels as usize;
    if m == 0 {
        return Err(DspError::Malformed("zero channels".into()));
    }
    let bytes = match (f.tag, f.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_FLOAT, 32) => 4,
        (format, bits) => return Err(DspError::UnsupportedCodec { format, bits }),
    };
    let frame = m * bytes;
    let n = data.len() / frame;
    let mut channels = vec![Vec::with_capacity(n); m];
    for i in 0..n {
        for (c, ch) in channels.iter_mut().enumerate() {
            let o = i * frame + c * bytes;
            let v = if bytes == 2 {
                i16::from_le_bytes([data[o], data[o + 1]]) as f64 / 32768.0
            } else {
                f32::from_le_bytes(data[o..o + 4].try_into().unwrap()) as f64
            };
            ch.push(v);
        }
    }
    MultichannelWave::new(f.sample_rate, channels)
}
