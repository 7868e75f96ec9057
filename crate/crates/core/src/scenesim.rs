//! Ground-truthed multichannel mixtures: random shoebox rooms, image-method
//! impulse responses, synthetic speech-like dry sources and mixing with
//! per-source reference images and white noise.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{DspError, MultichannelWave};

/// Speed of sound in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;
/// One-sided length (samples) of the windowed-sinc fractional delay kernel.
pub const SINC_HALF_WIDTH: usize = 16;
/// Rejection-sampling budget of [`sample_scene`].
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error("no placement with source spacing {spacing} m found after {attempts} attempts")]
    Infeasible { attempts: usize, spacing: f64 },
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("dry source {index} has zero energy")]
    SilentSource { index: usize },
    #[error("dry sources must share one length; source {index} has {got} samples, expected {expected}")]
    LengthMismatch { index: usize, expected: usize, got: usize },
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Scene sampling and rendering settings. Ranges are inclusive `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Smallest room, `[x, y, z]` in metres.
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    /// Reverberation time range in seconds.
    pub rt60: [f64; 2],
    pub mics: usize,
    /// Microphones are drawn uniformly in a ball of this radius (m).
    pub array_radius: f64,
    /// Maximum offset of the array center from the room center, per axis (m).
    pub array_offset: f64,
    /// Source count range.
    pub sources: [usize; 2],
    pub min_source_spacing: f64,
    /// Minimum distance between any source and the array center.
    pub min_array_distance: f64,
    /// Minimum distance of every source and microphone to the walls.
    pub wall_margin: f64,
    /// Per-source power range in dB.
    pub gain_db: [f64; 2],
    /// Mixture SNR in dB; `None` renders without noise.
    pub snr_db: Option<f64>,
    pub sample_rate: u32,
    /// Clip length in seconds.
    pub duration: f64,
    pub max_order: usize,
    pub max_images: usize,
    pub seed: u64,
}

impl SceneConfig {
    /// Small, low-reverberation rooms at 8 kHz with three microphones.
    pub fn desk() -> Self {
        Self {
            room_min: [5.0, 5.0, 3.0],
            room_max: [10.0, 10.0, 5.0],
            rt60: [0.15, 0.3],
            mics: 3,
            array_radius: 0.1,
            array_offset: 0.5,
            sources: [2, 2],
            min_source_spacing: 1.0,
            min_array_distance: 0.5,
            wall_margin: 0.5,
            gain_db: [-2.5, 2.5],
            snr_db: Some(30.0),
            sample_rate: 8000,
            duration: 3.0,
            max_order: 6,
            max_images: 2000,
            seed: 0,
        }
    }

    /// The full protocol: six microphones, two to four sources, RT60 up to 0.6 s.
    pub fn paper() -> Self {
        Self { rt60: [0.2, 0.6], mics: 6, sources: [2, 4], duration: 4.0, ..Self::desk() }
    }

    /// Direct path only.
    pub fn anechoic(self) -> Self {
        Self { max_order: 0, ..self }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Config(m));
        for a in 0..3 {
            if !(self.room_min[a] > 0.0 && self.room_min[a] <= self.room_max[a]) {
                return bad(format!("room range on axis {a} is empty or nonpositive"));
            }
            if self.room_min[a] <= 2.0 * (self.wall_margin + self.array_offset + self.array_radius) {
                return bad(format!("room axis {a} too small for the wall margin and array"));
            }
        }
        if !(self.rt60[0] > 0.0 && self.rt60[0] <= self.rt60[1]) {
            return bad("rt60 range must be positive and nonempty".into());
        }
        if self.mics == 0 || self.sources[0] == 0 || self.sources[0] > self.sources[1] {
            return bad("need at least one microphone and a nonempty positive source range".into());
        }
        if self.gain_db[0] > self.gain_db[1] || !self.gain_db.iter().all(|g| g.is_finite()) {
            return bad("gain range must be finite and nonempty".into());
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            return bad("snr_db must be finite".into());
        }
        if self.sample_rate == 0 || !(self.duration > 0.0) || self.max_images == 0 {
            return bad("sample_rate, duration and max_images must be positive".into());
        }
        if !(self.array_radius >= 0.0 && self.array_offset >= 0.0 && self.wall_margin >= 0.0) {
            return bad("array radius, offset and wall margin must be nonnegative".into());
        }
        if !(self.min_source_spacing >= 0.0 && self.min_array_distance >= 0.0) {
            return bad("spacings must be nonnegative".into());
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }
}

/// Shoebox room with uniform wall absorption.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub dims: [f64; 3],
    pub rt60: f64,
}

impl Room {
    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    /// Sabine absorption `0.161 V / (S · RT60)`, clamped to 1.
    pub fn absorption(&self) -> f64 {
        (0.161 * self.volume() / (self.surface() * self.rt60)).min(1.0)
    }

    /// Pressure reflection coefficient `sqrt(1 − α)`.
    pub fn reflection(&self) -> f64 {
        (1.0 - self.absorption()).sqrt()
    }

    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        p.iter().zip(&self.dims).all(|(&v, &d)| v >= margin && v <= d - margin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RirOptions {
    pub sample_rate: u32,
    pub max_order: usize,
    /// Only the `max_images` lowest-order (then nearest) images are kept.
    pub max_images: usize,
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Image-method impulse response from `src` to `mic`. Each image of
/// reflection order `r` at distance `d` contributes `β^r / (4πd)` at delay
/// `fs·d/c`, placed with a Hann-windowed sinc.
pub fn image_method_rir(room: &Room, src: [f64; 3], mic: [f64; 3], opts: &RirOptions) -> Result<Vec<f64>, SceneError> {
    if !(room.rt60 > 0.0) {
        return Err(SceneError::Geometry(format!("rt60 must be positive, got {}", room.rt60)));
    }
    if !room.contains(src, 0.0) || !room.contains(mic, 0.0) {
        return Err(SceneError::Geometry("source and microphone must lie inside the room".into()));
    }
    let beta = room.reflection();
    let order = opts.max_order as i64;
    let fs = opts.sample_rate as f64;
    // Reflection index k per axis: even k = 2n mirrors by translation, odd
    // k = 2n − 1 by reflection about the wall; the order is Σ|k|.
    let coord = |k: i64, s: f64, len: f64| if k % 2 == 0 { s + k as f64 * len } else { -s + (k + 1) as f64 * len };
    let mut images = Vec::new();
    for kx in -order..=order {
        for ky in -(order - kx.abs())..=order - kx.abs() {
            let rest = order - kx.abs() - ky.abs();
            for kz in -rest..=rest {
                let p = [coord(kx, src[0], room.dims[0]), coord(ky, src[1], room.dims[1]), coord(kz, src[2], room.dims[2])];
                let d = distance(p, mic);
                if d < 1e-9 {
                    return Err(SceneError::Geometry("source coincides with microphone".into()));
                }
                images.push(((kx.abs() + ky.abs() + kz.abs()) as i32, d));
            }
        }
    }
    images.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    images.truncate(opts.max_images);
    let longest = images.iter().map(|&(_, d)| d).fold(0.0, f64::max);
    let len = (fs * longest / SPEED_OF_SOUND).ceil() as usize + SINC_HALF_WIDTH + 1;
    let mut h = vec![0.0; len];
    let w = SINC_HALF_WIDTH as f64;
    for &(r, d) in &images {
        let amp = beta.powi(r) / (4.0 * PI * d);
        if amp == 0.0 {
            continue;
        }
        let tau = fs * d / SPEED_OF_SOUND;
        let centre = tau.round() as i64;
        for i in centre - SINC_HALF_WIDTH as i64..=centre + SINC_HALF_WIDTH as i64 {
            let x = i as f64 - tau;
            if i < 0 || x.abs() >= w {
                continue;
            }
            let window = 0.5 * (1.0 + (PI * x / w).cos());
            h[i as usize] += amp * window * sinc(x);
        }
    }
    Ok(h)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Linear convolution truncated to `len` samples.
pub fn convolve(signal: &[f64], kernel: &[f64], len: usize) -> Vec<f64> {
    if signal.is_empty() || kernel.is_empty() {
        return vec![0.0; len];
    }
    let n = (signal.len() + kernel.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        b.resize(n, Complex64::new(0.0, 0.0));
        b
    };
    let (mut a, mut b) = (pad(signal), pad(kernel));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y);
    inv.process(&mut a);
    let mut out: Vec<f64> = a.iter().take(len).map(|c| c.re / n as f64).collect();
    out.resize(len, 0.0);
    out
}

/// Sampled room, array and source placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub room: Room,
    pub array_center: [f64; 3],
    pub mics: Vec<[f64; 3]>,
    pub sources: Vec<[f64; 3]>,
}

/// Draws a room, an array around its center and sources at least
/// `min_source_spacing` apart, by rejection sampling.
pub fn sample_scene(config: &SceneConfig, rng: &mut impl Rng) -> Result<SceneGeometry, SceneError> {
    config.validate()?;
    let uniform = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| if lo < hi { rng.random_range(lo..=hi) } else { lo };
    for _ in 0..MAX_ATTEMPTS {
        let dims: [f64; 3] = std::array::from_fn(|a| uniform(rng, config.room_min[a], config.room_max[a]));
        let rt60 = uniform(rng, config.rt60[0], config.rt60[1]);
        let room = Room { dims, rt60 };
        let o = config.array_offset;
        let array_center: [f64; 3] = std::array::from_fn(|a| dims[a] / 2.0 + uniform(rng, -o, o));
        let mics = (0..config.mics).map(|_| point_in_ball(rng, array_center, config.array_radius)).collect();
        let count = rng.random_range(config.sources[0]..=config.sources[1]);
        let m = config.wall_margin;
        let sources: Vec<[f64; 3]> =
            (0..count).map(|_| std::array::from_fn(|a| uniform(rng, m, (dims[a] - m).max(m)))).collect();
        let spaced = sources.iter().enumerate().all(|(i, &a)| sources[..i].iter().all(|&b| distance(a, b) >= config.min_source_spacing));
        let clear = sources.iter().all(|&s| distance(s, array_center) >= config.min_array_distance);
        if spaced && clear {
            return Ok(SceneGeometry { room, array_center, mics, sources });
        }
    }
    Err(SceneError::Infeasible { attempts: MAX_ATTEMPTS, spacing: config.min_source_spacing })
}

fn point_in_ball(rng: &mut impl Rng, center: [f64; 3], radius: f64) -> [f64; 3] {
    loop {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return std::array::from_fn(|a| center[a] + radius * p[a]);
        }
    }
}

/// Speech-like test signal: syllables of 80 to 300 ms separated by pauses,
/// each a pitch-gliding pulse train (or noise, for unvoiced syllables)
/// through two random formant resonators under a Hann envelope. Unit RMS.
pub fn synth_speech(rng: &mut impl Rng, sample_rate: u32, len: usize) -> Vec<f64> {
    let fs = sample_rate as f64;
    let mut out = vec![0.0; len];
    let mut pos = (rng.random_range(0.0..0.2) * fs) as usize;
    while pos < len {
        let dur = ((rng.random_range(0.08..0.3) * fs) as usize).min(len - pos);
        let voiced = rng.random_bool(0.8);
        let f0 = [rng.random_range(90.0..250.0), rng.random_range(90.0..250.0)];
        let formants = [(rng.random_range(300.0..900.0), 80.0), (rng.random_range(900.0..2500.0_f64.min(0.45 * fs)), 120.0)];
        let mut exc = vec![0.0; dur];
        let mut phase = 0.0;
        for (i, e) in exc.iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            if voiced {
                let f = f0[0] + (f0[1] - f0[0]) * i as f64 / dur as f64;
                phase += f / fs;
                if phase >= 1.0 {
                    phase -= 1.0;
                    *e = 1.0;
                }
                *e += 0.05 * noise;
            } else {
                *e = 0.3 * noise;
            }
        }
        for (freq, bw) in formants {
            resonate(&mut exc, freq, bw, fs);
        }
        for (i, e) in exc.iter().enumerate() {
            let env = 0.5 - 0.5 * (2.0 * PI * i as f64 / dur as f64).cos();
            out[pos + i] += env * e;
        }
        pos += dur + (rng.random_range(0.05..0.25) * fs) as usize;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

fn resonate(x: &mut [f64], freq: f64, bw: f64, fs: f64) {
    let r = (-PI * bw / fs).exp();
    let (a1, a2) = (2.0 * r * (2.0 * PI * freq / fs).cos(), -r * r);
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = (1.0 - r) * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// A rendered scene. `mixture` equals the images summed in source order
/// plus `noise`, sample by sample.
#[derive(Clone, Debug)]
pub struct Scene {
    pub geometry: SceneGeometry,
    /// `rirs[n][m]`.
    pub rirs: Vec<Vec<Vec<f64>>>,
    pub gains_db: Vec<f64>,
    pub dry: Vec<Vec<f64>>,
    /// Per-source reverberant images at the microphones.
    pub images: Vec<MultichannelWave>,
    pub noise: MultichannelWave,
    pub mixture: MultichannelWave,
}

/// Convolves each dry source with its RIRs, scales the image to a mean
/// per-channel power of `10^(gain/10)` with the gain drawn from
/// `config.gain_db`, and adds white Gaussian noise at `config.snr_db`
/// relative to the summed image energies.
pub fn render_mixture(
    geometry: &SceneGeometry,
    dry: &[Vec<f64>],
    config: &SceneConfig,
    rng: &mut impl Rng,
) -> Result<Scene, SceneError> {
    if dry.len() != geometry.sources.len() {
        return Err(SceneError::Config(format!("{} dry sources for {} positions", dry.len(), geometry.sources.len())));
    }
    let len = dry.first().map_or(0, Vec::len);
    for (index, d) in dry.iter().enumerate() {
        if d.len() != len {
            return Err(SceneError::LengthMismatch { index, expected: len, got: d.len() });
        }
        if d.iter().all(|&v| v == 0.0) {
            return Err(SceneError::SilentSource { index });
        }
    }
    let opts = RirOptions { sample_rate: config.sample_rate, max_order: config.max_order, max_images: config.max_images };
    let nm = geometry.mics.len();
    let mut rirs = Vec::with_capacity(dry.len());
    let mut images = Vec::with_capacity(dry.len());
    let mut gains_db = Vec::with_capacity(dry.len());
    for (src, d) in geometry.sources.iter().zip(dry) {
        let h: Vec<Vec<f64>> = geometry.mics.iter().map(|&mic| image_method_rir(&geometry.room, *src, mic, &opts)).collect::<Result<_, _>>()?;
        let mut chans: Vec<Vec<f64>> = h.iter().map(|k| convolve(d, k, len)).collect();
        let gain = if config.gain_db[0] < config.gain_db[1] { rng.random_range(config.gain_db[0]..=config.gain_db[1]) } else { config.gain_db[0] };
        let power = chans.iter().flatten().map(|v| v * v).sum::<f64>() / (nm * len) as f64;
        if !(power > 0.0) {
            return Err(SceneError::Geometry("source image has zero energy at the microphones".into()));
        }
        let s = (10f64.powf(gain / 10.0) / power).sqrt();
        chans.iter_mut().flatten().for_each(|v| *v *= s);
        rirs.push(h);
        gains_db.push(gain);
        images.push(MultichannelWave::new(config.sample_rate, chans)?);
    }
    let mut noise: Vec<Vec<f64>> = (0..nm).map(|_| (0..len).map(|_| rng.sample(StandardNormal)).collect()).collect();
    match config.snr_db {
        Some(snr) => {
            let signal: f64 = images.iter().flat_map(|w| w.channels().iter().flatten()).map(|v| v * v).sum();
            let raw: f64 = noise.iter().flatten().map(|v| v * v).sum();
            let s = (signal / raw / 10f64.powf(snr / 10.0)).sqrt();
            noise.iter_mut().flatten().for_each(|v| *v *= s);
        }
        None => noise.iter_mut().flatten().for_each(|v| *v = 0.0),
    }
    let mix = (0..nm)
        .map(|m| {
            (0..len)
                .map(|i| images.iter().fold(0.0, |acc, w| acc + w.channel(m)[i]) + noise[m][i])
                .collect()
        })
        .collect();
    Ok(Scene {
        geometry: geometry.clone(),
        rirs,
        gains_db,
        dry: dry.to_vec(),
        images,
        noise: MultichannelWave::new(config.sample_rate, noise)?,
        mixture: MultichannelWave::new(config.sample_rate, mix)?,
    })
}

/// Seed of scene `index` in a dataset seeded with `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples, synthesizes and renders one scene from `seed`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = sample_scene(config, &mut rng)?;
    let len = config.samples();
    let dry: Vec<Vec<f64>> = geometry.sources.iter().map(|_| synth_speech(&mut rng, config.sample_rate, len)).collect();
    render_mixture(&geometry, &dry, config, &mut rng)
}

/// Serializable description of a rendered scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub id: String,
    pub seed: u64,
    pub geometry: SceneGeometry,
    pub absorption: f64,
    pub gains_db: Vec<f64>,
    pub snr_db: Option<f64>,
    pub sample_rate: u32,
    pub samples: usize,
    pub max_order: usize,
}

impl Scene {
    pub fn metadata(&self, id: &str, seed: u64, config: &SceneConfig) -> SceneMetadata {
        SceneMetadata {
            id: id.to_string(),
            seed,
            geometry: self.geometry.clone(),
            absorption: self.geometry.room.absorption(),
            gains_db: self.gains_db.clone(),
            snr_db: config.snr_db,
            sample_rate: self.mixture.sample_rate(),
            samples: self.mixture.len(),
            max_order: config.max_order,
        }
    }

    /// Energy ratio of images to noise in dB.
    pub fn measured_snr_db(&self) -> f64 {
        let e = |w: &MultichannelWave| w.channels().iter().flatten().map(|v| v * v).sum::<f64>();
        10.0 * (self.images.iter().map(e).sum::<f64>() / e(&self.noise)).log10()
    }
}

#[cfg(test)]
mod tests;
