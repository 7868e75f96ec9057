use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use num_complex::Complex64;

/// F × T × M complex STFT tensor, stored frequency-major with the channel
/// axis innermost so that `frame(f, t)` is the mixture vector `x_ft`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    bins: usize,
    frames: usize,
    channels: usize,
    data: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn zeros(bins: usize, frames: usize, channels: usize) -> Self {
        Self { bins, frames, channels, data: vec![Complex64::new(0.0, 0.0); bins * frames * channels] }
    }

    /// Builds from data laid out `[f][t][m]`.
    pub fn from_vec(bins: usize, frames: usize, channels: usize, data: Vec<Complex64>) -> Option<Self> {
        (data.len() == bins * frames * channels).then_some(Self { bins, frames, channels, data })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(F, T, M)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.bins, self.frames, self.channels)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    fn idx(&self, f: usize, t: usize, m: usize) -> usize {
        (f * self.frames + t) * self.channels + m
    }

    pub fn get(&self, f: usize, t: usize, m: usize) -> Complex64 {
        self.data[self.idx(f, t, m)]
    }

    pub fn set(&mut self, f: usize, t: usize, m: usize, v: Complex64) {
        let i = self.idx(f, t, m);
        self.data[i] = v;
    }

    /// The M-vector at bin `(f, t)`.
    pub fn frame(&self, f: usize, t: usize) -> &[Complex64] {
        let i = self.idx(f, t, 0);
        &self.data[i..i + self.channels]
    }

    pub fn frame_mut(&mut self, f: usize, t: usize) -> &mut [Complex64] {
        let i = self.idx(f, t, 0);
        &mut self.data[i..i + self.channels]
    }

    /// All frames of bin `f`, `T × M` values.
    pub fn bin(&self, f: usize) -> &[Complex64] {
        let n = self.frames * self.channels;
        &self.data[f * n..(f + 1) * n]
    }

    pub fn bin_mut(&mut self, f: usize) -> &mut [Complex64] {
        let n = self.frames * self.channels;
        &mut self.data[f * n..(f + 1) * n]
    }

    /// Frames `[start, start + len)` as a new spectrogram.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.frames, "frame range out of bounds");
        let mut out = Self::zeros(self.bins, len, self.channels);
        for f in 0..self.bins {
            for t in 0..len {
                out.frame_mut(f, t).copy_from_slice(self.frame(f, start + t));
            }
        }
        out
    }

    /// Single channel `m` as an F × T × 1 spectrogram.
    pub fn channel(&self, m: usize) -> Self {
        let mut out = Self::zeros(self.bins, self.frames, 1);
        for (o, chunk) in out.data.iter_mut().zip(self.data.chunks_exact(self.channels)) {
            *o = chunk[m];
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Debug dump: `F, T, M` as little-endian `u64`, then `(re, im)` pairs as
    /// little-endian `f64` in `[f][t][m]` order.
    pub fn write_dump(&self, mut w: impl Write) -> io::Result<()> {
        for d in [self.bins, self.frames, self.channels] {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for c in &self.data {
            w.write_f64::<LittleEndian>(c.re)?;
            w.write_f64::<LittleEndian>(c.im)?;
        }
        Ok(())
    }

    pub fn read_dump(mut r: impl Read) -> io::Result<Self> {
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u64::<LittleEndian>()? as usize;
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "dimension overflow"))?;
        let mut flat = vec![0.0; 2 * n];
        r.read_f64_into::<LittleEndian>(&mut flat)?;
        let data = flat.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
        Ok(Self { bins: dims[0], frames: dims[1], channels: dims[2], data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trip_and_layout() {
        let data: Vec<Complex64> = (0..12).map(|k| Complex64::new(k as f64, -(k as f64) * 0.5)).collect();
        let s = ComplexSpectrogram::from_vec(2, 3, 2, data).unwrap();
        let mut buf = Vec::new();
        s.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 12 * 16);
        assert_eq!(&buf[0..8], &2u64.to_le_bytes());
        // Second value is (f=0, t=0, m=1) = 1 - 0.5i.
        assert_eq!(&buf[40..48], &1.0f64.to_le_bytes());
        assert_eq!(&buf[48..56], &(-0.5f64).to_le_bytes());
        assert_eq!(ComplexSpectrogram::read_dump(&buf[..]).unwrap(), s);
    }

    #[test]
    fn frame_indexing() {
        let mut s = ComplexSpectrogram::zeros(3, 4, 2);
        s.set(2, 1, 1, Complex64::new(5.0, 1.0));
        assert_eq!(s.frame(2, 1)[1], Complex64::new(5.0, 1.0));
        assert_eq!(s.slice_frames(1, 2).get(2, 0, 1), Complex64::new(5.0, 1.0));
        assert_eq!(s.channel(1).get(2, 1, 0), Complex64::new(5.0, 1.0));
    }
}
