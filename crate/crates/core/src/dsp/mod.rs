//! Waveform I/O and STFT analysis/synthesis.

mod spectrogram;
mod stft;
mod wav;

pub use spectrogram::ComplexSpectrogram;
pub use stft::{hann_window, istft, istft_padded, num_frames, stft, stft_padded, StftParams};
pub use wav::{wav_read, wav_write, wav_write_as, MultichannelWave, SampleFormat};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav: missing `{0}` chunk")]
    MissingChunk(&'static str),
    #[error("wav: `{chunk}` chunk truncated ({got} of {expected} bytes)")]
    Truncated { chunk: &'static str, expected: usize, got: usize },
    #[error("wav: malformed header: {0}")]
    Malformed(String),
    #[error("wav: unsupported codec (format tag {format:#06x}, {bits} bits)")]
    UnsupportedCodec { format: u16, bits: u16 },
    #[error("invalid waveform: {0}")]
    InvalidWave(String),
    #[error("invalid STFT parameters: {0}")]
    InvalidParams(String),
    #[error("signal of {len} samples is shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("spectrogram has {got} bins, window {window} needs {expected}")]
    BinMismatch { window: usize, expected: usize, got: usize },
}
